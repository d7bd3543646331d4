"""Command-line front end for the relighting pipeline.

Exit codes: 0 success, 2 validation/contract problems, 3 I/O or container
format problems, 4 numeric failures (diverged training). All randomness sits
behind --seed; identical inputs and flags produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import align as align_mod
from . import imagecore, lightrig, oracle, relight
from . import reflectfield as rf
from ._kernels import set_thread_count
from .errors import ContractError, FormatError, OlatkitError, TrainingDivergedError, ValidationError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _load_env(path) -> lightrig.EnvMap:
    return lightrig.EnvMap(image=imagecore.load_hdr(path))


def _weights_to_json(weights: lightrig.WeightVector) -> dict:
    return {
        label: [float(v) for v in weights.weights[i]]
        for i, label in enumerate(weights.rig.labels)
    }


def _weights_from_json(doc: dict, rig: lightrig.LightRig) -> lightrig.WeightVector:
    missing = [label for label in rig.labels if label not in doc]
    if missing:
        raise ValidationError(f"weights file is missing lights: {missing[:3]}...")
    arr = np.array([doc[label] for label in rig.labels], dtype=np.float64)
    return lightrig.WeightVector(weights=arr, rig=rig)


def cmd_weights(args) -> int:
    stack = lightrig.load_manifest(args.manifest)
    env = _load_env(args.env)
    weights = lightrig.env_to_weights(env, stack.rig, rotation=args.rotation)
    with open(args.out, "w") as f:
        json.dump(_weights_to_json(weights), f, indent=1)
        f.write("\n")
    return EXIT_OK


def cmd_relight(args) -> int:
    stack = lightrig.load_manifest(args.manifest)
    if (args.weights is None) == (args.env is None):
        raise ValidationError("provide exactly one of --weights or --env")
    if args.weights:
        with open(args.weights) as f:
            weights = _weights_from_json(json.load(f), stack.rig)
    else:
        weights = lightrig.env_to_weights(_load_env(args.env), stack.rig,
                                          rotation=args.rotation)
    if args.max_lights:
        weights = relight.truncate_weights(weights, args.max_lights)
    image = relight.combine(stack, weights)
    imagecore.save_hdr(args.out, image)
    if args.png:
        params = imagecore.ToneMapParams(exposure=args.exposure, gamma=args.gamma)
        imagecore.save_png(args.png, imagecore.tone_map(image, params))
    return EXIT_OK


def cmd_align(args) -> int:
    take_dir = Path(args.take_dir)
    with open(args.layout) as f:
        layout = align_mod.TakeLayout.from_dict(json.load(f))
    frame_paths = sorted(take_dir.glob("*.hdr"))
    if len(frame_paths) != layout.frame_count:
        raise ValidationError(
            f"take directory holds {len(frame_paths)} frames, layout says {layout.frame_count}"
        )
    frames = [imagecore.load_hdr(p) for p in frame_paths]
    reference = args.reference if args.reference is not None else layout.tracking_frames[0]
    aligned = align_mod.align_take(frames, layout, reference, levels=args.levels)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path, frame in zip(frame_paths, aligned):
        imagecore.save_hdr(out_dir / path.name, frame)
    if args.ground_truth:
        truth = [imagecore.load_hdr(p) for p in sorted(Path(args.ground_truth).glob("*.hdr"))]
        if len(truth) != layout.frame_count:
            raise ValidationError("ground-truth frame count does not match the take")
        before = _take_rmse(frames, truth)
        after = _take_rmse(aligned, truth)
        reduction = 100.0 * (1.0 - after / before) if before > 0 else 0.0
        print(f"rmse unaligned {before:.6f} aligned {after:.6f} reduction {reduction:.1f}%")
    return EXIT_OK


def _take_rmse(frames, truth, margin: int = 8) -> float:
    total = 0.0
    for a, b in zip(frames, truth):
        da = a.data[margin:-margin, margin:-margin].astype(np.float64)
        db = b.data[margin:-margin, margin:-margin].astype(np.float64)
        total += float(np.sqrt(np.mean((da - db) ** 2)))
    return total / len(frames)


def cmd_oracle(args) -> int:
    with open(args.scene) as f:
        doc = json.load(f)
    scene = oracle.SphereScene.from_dict(doc)
    camera = lightrig.CameraModel.from_dict(doc["camera"]) if "camera" in doc else (
        lightrig.CameraModel.look_at(eye=(0, 0, -3.2), target=(0, 0, 0),
                                     width=args.size, height=args.size, fov_deg=28.0)
    )
    rig = oracle.generate_rig(args.lights)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    stack = oracle.render_olat_stack(scene, rig, camera)
    for i in range(rig.count):
        name = f"olat_{i:04d}.hdr"
        imagecore.save_hdr(out_dir / name, stack.image(i))
        names.append(name)
    lightrig.save_manifest(out_dir / "manifest.json", stack, names)
    print(f"wrote {rig.count} OLAT frames to {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    stack = lightrig.load_manifest(args.manifest)
    dataset = [
        rf.TrainView(camera=stack.camera, light_dir=stack.rig.directions[i],
                     target=stack.image(i))
        for i in range(stack.count)
    ]
    sampling = rf.RaySampleConfig(samples=args.samples, near=args.near, far=args.far)
    cfg = rf.TrainConfig(
        learning_rate=args.lr,
        iterations=args.iters,
        batch_rays=args.batch_rays,
        mrf_weight=args.lambda_mrf,
        seed=args.seed,
        sampling=sampling,
    )
    field = rf.TriplaneField.create(
        channels=args.channels, resolution=args.resolution, hidden=args.hidden,
        seed=args.seed,
    )
    result = rf.train(field, dataset, cfg)
    field.save(args.out)
    if args.loss_csv:
        with open(args.loss_csv, "w") as f:
            f.write("iteration,loss\n")
            for i, value in enumerate(result.loss_history):
                f.write(f"{i},{value!r}\n")
    return EXIT_OK


def cmd_render(args) -> int:
    field = rf.TriplaneField.load(args.field)
    with open(args.camera) as f:
        camera = lightrig.CameraModel.from_dict(json.load(f))
    light = np.array([float(v) for v in args.light.split(",")], dtype=np.float64)
    if light.shape != (3,):
        raise ValidationError("--light expects x,y,z")
    norm = np.linalg.norm(light)
    if norm == 0:
        raise ValidationError("--light must be nonzero")
    light /= norm
    cfg = rf.RaySampleConfig(samples=args.samples, near=args.near, far=args.far)
    image = rf.render_olat(field, camera, light, cfg)
    imagecore.save_hdr(args.out, image)
    if args.png:
        params = imagecore.ToneMapParams(exposure=args.exposure, gamma=args.gamma)
        imagecore.save_png(args.png, imagecore.tone_map(image, params))
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(args.manifests, cache_bytes=args.cache_mb * (1 << 20),
                     ui_dir=args.ui)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="olat", description=__doc__)
    parser.add_argument("--threads", type=int, default=0,
                        help="worker threads for combination kernels (0 = auto)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("weights", help="environment map -> per-light weights JSON")
    p.add_argument("manifest")
    p.add_argument("env")
    p.add_argument("--rotation", type=float, default=0.0, help="azimuth radians")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("relight", help="combine OLATs under weights or an env map")
    p.add_argument("manifest")
    p.add_argument("--weights")
    p.add_argument("--env")
    p.add_argument("--rotation", type=float, default=0.0)
    p.add_argument("--out", required=True, help="output .hdr path")
    p.add_argument("--png", help="optional tone-mapped PNG path")
    p.add_argument("--exposure", type=float, default=0.0)
    p.add_argument("--gamma", type=float, default=2.2)
    p.add_argument("--max-lights", type=int, default=0)
    p.set_defaults(func=cmd_relight)

    p = sub.add_parser("align", help="align an OLAT take to a tracking frame")
    p.add_argument("take_dir")
    p.add_argument("layout", help="layout.json with frame_count/tracking_frames")
    p.add_argument("--out", required=True)
    p.add_argument("--reference", type=int)
    p.add_argument("--levels", type=int, default=4)
    p.add_argument("--ground-truth", help="directory of true frames: prints RMSE report")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("oracle", help="generate a synthetic OLAT stack + manifest")
    p.add_argument("scene", help="scene.json")
    p.add_argument("--lights", type=int, default=331)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("train", help="fit a triplane reflectance field to a stack")
    p.add_argument("manifest")
    p.add_argument("--iters", type=int, default=20000)
    p.add_argument("--lr", type=float, default=0.00015)
    p.add_argument("--lambda-mrf", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-rays", type=int, default=4096)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--near", type=float, default=2.0)
    p.add_argument("--far", type=float, default=4.6)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render an OLAT from a trained field")
    p.add_argument("field")
    p.add_argument("--light", required=True, help="x,y,z direction")
    p.add_argument("--camera", required=True, help="cam.json")
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--near", type=float, default=2.0)
    p.add_argument("--far", type=float, default=4.6)
    p.add_argument("--out", required=True)
    p.add_argument("--png")
    p.add_argument("--exposure", type=float, default=0.0)
    p.add_argument("--gamma", type=float, default=2.2)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("serve", help="run the HTTP relighting service")
    p.add_argument("manifests", nargs="+")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--cache-mb", type=int, default=2048)
    p.add_argument("--ui", help="directory with the built control-panel bundle")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads > 0:
        set_thread_count(args.threads)
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OlatkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
