"""Command-line entry point.

Every subcommand prints a JSON document on success. Failures print
``{"error": ..., "type": ...}`` on stderr and exit with status 1
(2 for usage errors, which argparse reports itself).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from rmsdf.imaging import load_scene, save_mask, save_pfm
from rmsdf.pipeline import ReconOptions, SynthSpec, eval_geometry, eval_rm, reconstruct, synthesize
from rmsdf.rasterizer import render_gbuffer
from rmsdf.rmap import load_rm
from rmsdf.sdfgrid import load_obj
from rmsdf._bvh import BVH


def _cmd_synth(args):
    spec = SynthSpec.from_json(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    syn = synthesize(spec, args.out, base_dir=Path(args.spec).parent)
    return {"scene": str(Path(args.out) / "scene.json"), "views": len(syn.scene.views)}


def _cmd_reconstruct(args):
    scene = load_scene(args.scene)
    given = {name: getattr(args, name) for name in ("rounds", "steps", "rm_res", "seed", "lr")}
    opts = ReconOptions(out_dir=args.out, **{k: v for k, v in given.items() if v is not None})
    result = reconstruct(scene, opts)
    out = result.report.to_dict()
    out["mesh"] = str(Path(args.out) / "mesh.obj")
    return out


def _cmd_eval_geom(args):
    scene = load_scene(args.scene)
    rms1, rms2 = eval_geometry(load_obj(args.recon), load_obj(args.truth), scene.cameras,
                               n_samples=args.samples, seed=args.seed)
    return {"rms1": rms1, "rms2": rms2}


def _cmd_render(args):
    scene = load_scene(args.scene)
    mesh = load_obj(args.mesh)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bvh = BVH(mesh.vertices, mesh.faces)
    views = range(len(scene.views)) if args.view is None else [args.view]
    written = []
    for k in views:
        gb = render_gbuffer(mesh, scene.views[k].camera, bvh=bvh)
        save_mask(gb.coverage, out / f"coverage_{k:02d}.png")
        written.append(f"coverage_{k:02d}.png")
        if args.dump_gbuffer:
            channels = {
                "normal": gb.normal,
                "position": gb.position,
                "depth": gb.depth[..., None],
                "bary": gb.bary,
                "face": gb.face[..., None].astype(np.float64),
            }
            for name, data in channels.items():
                fname = f"{name}_{k:02d}.pfm"
                save_pfm(np.asarray(data, dtype=np.float32), out / fname)
                written.append(fname)
    return {"out": str(out), "files": written}


def build_parser():
    parser = argparse.ArgumentParser(prog="rmsdf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic multi-view scene")
    p.add_argument("spec", help="JSON synthesis spec")
    p.add_argument("out", help="output directory")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("reconstruct", help="recover geometry and reflectance maps")
    p.add_argument("scene", help="scene.json")
    p.add_argument("out", help="output directory")
    p.add_argument("--rounds", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--rm-res", dest="rm_res", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float, help="Adam step size in world units")
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("eval-geom", help="RMS surface distances in percent of the bbox diagonal")
    p.add_argument("recon")
    p.add_argument("truth")
    p.add_argument("scene")
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_eval_geom)

    p = sub.add_parser("eval-rm", help="log-scale mean absolute error between two maps")
    p.add_argument("estimate")
    p.add_argument("truth")
    p.set_defaults(func=None)

    p = sub.add_parser("render", help="rasterize a mesh into the scene's views")
    p.add_argument("mesh")
    p.add_argument("scene")
    p.add_argument("out")
    p.add_argument("--view", type=int)
    p.add_argument("--dump-gbuffer", action="store_true", help="also write G-buffer channels as PFM")
    p.set_defaults(func=_cmd_render)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr)
    try:
        if args.command == "eval-rm":
            # Bare number so that scripts can compare it directly.
            print(f"{eval_rm(load_rm(args.estimate), load_rm(args.truth)):.6g}")
            return 0
        print(json.dumps(args.func(args), indent=2))
        return 0
    except Exception as exc:  # noqa: BLE001 - reported as machine-readable JSON
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
