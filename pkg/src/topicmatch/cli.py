"""Command-line interface.

Subcommands: gen-data, train, match, eval, profile, viz-topics, acceptance.
Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical
failure. Option precedence is defaults < config file < flags.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    ConfigHashMismatch,
    EmptyDataset,
    NonFinite,
    PopulationMismatch,
    ShapeError,
    TopicMatchError,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

CONFIG_SECTIONS = ("matcher", "train", "scene")


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file {p} not found")
    data = json.loads(p.read_text())
    if data.get("version", 1) != 1:
        raise ConfigError(f"unsupported config version {data.get('version')}")
    unknown = set(data) - {"version", *CONFIG_SECTIONS}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return data


def _merge_section(cls, file_values: dict, overrides: dict):
    """defaults < file < explicit flags, rejecting unknown keys."""
    known = {f.name for f in dataclass_fields(cls)}
    unknown = set(file_values) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    merged = dict(file_values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def _parse_dims(text: str) -> tuple[int, int]:
    try:
        h, w = (int(x) for x in text.lower().split("x"))
        return h, w
    except ValueError as exc:
        raise ConfigError(f"dims must look like 128x128, got {text!r}") from exc


def _parse_range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(x) for x in text.split(","))
        return lo, hi
    except ValueError as exc:
        raise ConfigError(f"range must look like 0.05,0.2, got {text!r}") from exc


def cmd_gen_data(args) -> int:
    from .synth import SceneParams, build_dataset

    if args.n is None or args.n <= 0:
        raise ConfigError("n must be positive")
    file_cfg = _load_config_file(args.config).get("scene", {})
    overrides = {
        "dims": _parse_dims(args.dims) if args.dims else None,
        "max_rotation_deg": args.max_rotation_deg,
        "translation_range": _parse_range(args.pose_range) if args.pose_range else None,
        "texture_octaves": args.octaves,
        "noise_sigma": args.noise_sigma,
    }
    params = SceneParams.from_dict(_merge_section(SceneParams, file_cfg, overrides))
    manifest = build_dataset(args.n, args.out, params, seed=args.seed)
    print(f"wrote {len(manifest.pairs)} pairs to {manifest.root}")
    return EXIT_OK


def _matcher_config(args, file_cfg: dict):
    from .model import MatcherConfig

    overrides = {
        "variant": getattr(args, "variant", None),
        "num_topics": getattr(args, "num_topics", None),
        "num_covisible": getattr(args, "covis", None),
        "match_threshold": getattr(args, "tau", None),
        "backbone_widths": tuple(int(x) for x in args.widths.split(","))
        if getattr(args, "widths", None)
        else None,
        "fine_dim": getattr(args, "fine_dim", None),
    }
    return MatcherConfig.from_dict(
        _merge_section(MatcherConfig, file_cfg.get("matcher", {}), overrides)
    )


def cmd_train(args) -> int:
    from .synth import DatasetManifest
    from .train import TrainConfig, train

    file_cfg = _load_config_file(args.config)
    matcher = _matcher_config(args, file_cfg)
    overrides = {
        "lr": args.lr,
        "epochs": args.epochs,
        "seed": args.seed,
        "max_steps": args.max_steps,
        "train_split": args.train_split,
    }
    merged = _merge_section(TrainConfig, file_cfg.get("train", {}), overrides)
    merged.pop("matcher", None)
    cfg = TrainConfig(matcher=matcher, **merged)
    manifest = DatasetManifest.load(args.data)
    report = train(manifest, cfg, args.out)
    last = report.epochs[-1] if report.epochs else {}
    print(f"trained {len(report.steps)} steps; checkpoint: {report.checkpoint_path}")
    if "val" in last:
        print(f"final val AUC: {last['val']['auc']}")
    return EXIT_OK


def _load_image_or_fail(path: str) -> np.ndarray:
    from .synth import read_image_file

    return read_image_file(path)


def write_matches_csv(path: Path | str, arr: np.ndarray) -> None:
    lines = ["xa,ya,xb,yb,conf"]
    for row in arr:
        lines.append(",".join(f"{v:.3f}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def _draw_line(canvas: np.ndarray, p0, q0, color) -> None:
    n = int(max(abs(q0[0] - p0[0]), abs(q0[1] - p0[1]), 1)) * 2
    xs = np.linspace(p0[0], q0[0], n).round().astype(int)
    ys = np.linspace(p0[1], q0[1], n).round().astype(int)
    h, w, _ = canvas.shape
    ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    canvas[ys[ok], xs[ok]] = color


def render_match_overlay(img_a: np.ndarray, img_b: np.ndarray, matches: np.ndarray) -> np.ndarray:
    """Side-by-side grayscale pair with confidence-colored match lines
    (green = high confidence, orange = low)."""
    ha, wa = img_a.shape
    hb, wb = img_b.shape
    canvas = np.zeros((max(ha, hb), wa + wb, 3), dtype=np.uint8)
    canvas[:ha, :wa] = np.clip(np.rint(img_a * 255), 0, 255).astype(np.uint8)[..., None]
    canvas[:hb, wa:] = np.clip(np.rint(img_b * 255), 0, 255).astype(np.uint8)[..., None]
    green = np.array([0, 200, 0], dtype=np.float64)
    orange = np.array([255, 165, 0], dtype=np.float64)
    for xa, ya, xb, yb, conf in matches:
        c = float(np.clip(conf, 0.0, 1.0))
        color = np.rint(c * green + (1 - c) * orange).astype(np.uint8)
        _draw_line(canvas, (xa, ya), (xb + wa, yb), color)
    return canvas


def cmd_match(args) -> int:
    from .checkpoint import load_checkpoint
    from .storage import write_ppm
    from .validation import pad_to_multiple

    img_a = _load_image_or_fail(args.image_a)
    img_b = _load_image_or_fail(args.image_b)
    model, _, _ = load_checkpoint(args.checkpoint)
    padded_a, dims_a = pad_to_multiple(img_a)
    padded_b, dims_b = pad_to_multiple(img_b)
    fine, _ = model.match_images(padded_a, padded_b, match_threshold=args.tau)
    arr = fine.to_numpy()
    keep = (
        (arr[:, 0] < dims_a[1])
        & (arr[:, 1] < dims_a[0])
        & (arr[:, 2] < dims_b[1])
        & (arr[:, 3] < dims_b[0])
    )
    arr = arr[keep]
    write_matches_csv(args.out_matches, arr)
    print(f"{len(arr)} matches -> {args.out_matches}")
    if args.viz:
        write_ppm(args.viz, render_match_overlay(img_a, img_b, arr))
        print(f"overlay -> {args.viz}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .evaluate import EvalConfig, evaluate
    from .synth import DatasetManifest

    manifest = DatasetManifest.load(args.data)
    model = None
    if not args.oracle:
        if not args.checkpoint:
            raise ConfigError("--checkpoint is required unless --oracle is set")
        model, _, _ = load_checkpoint(args.checkpoint)
    cfg = EvalConfig(split=args.split, oracle=args.oracle, match_threshold=args.tau)
    report = evaluate(manifest, model, cfg)
    Path(args.out).write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    print(f"AUC: {report.auc} failures: {report.n_failures} -> {args.out}")
    return EXIT_OK


def cmd_profile(args) -> int:
    from .model import MatcherConfig
    from .profiler import count_ops

    cfg = MatcherConfig(
        variant=args.variant,
        num_topics=args.k,
        num_covisible=min(args.covis, args.k),
        backbone_widths=(32, 64, args.dim),
        fine_dim=args.fine_dim,
    )
    cfg.validate()
    n = args.n
    pops = None
    if args.variant == "plus":
        if args.pop_mode == "single":
            pops = np.zeros(args.k, dtype=np.int64)
            pops[0] = n
        else:
            base = np.full(args.k, n // args.k, dtype=np.int64)
            base[: n % args.k] += 1
            pops = base
    model_cost = count_ops(cfg, n, n, matches=args.matches, populations_a=pops, populations_b=pops)
    lines = ["stage,macs"]
    for stage, macs in model_cost.stages.items():
        lines.append(f"{stage},{macs}")
    lines.append(f"total,{model_cost.total}")
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"total MACs: {model_cost.total} -> {args.out}")
    return EXIT_OK


def cmd_viz_topics(args) -> int:
    import torch

    from .checkpoint import load_checkpoint
    from .evaluate import render_topic_overlay
    from .storage import write_pgm, write_ppm
    from .synth import DatasetManifest, load_pair

    model, _, _ = load_checkpoint(args.checkpoint)
    manifest = DatasetManifest.load(args.data)
    pair_id = args.pair or manifest.pairs[0]["id"]
    scene = load_pair(manifest, pair_id)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        pyr_a = model.extract(scene.image_a)
        pyr_b = model.extract(scene.image_b)
        res = model.match_coarse(pyr_a, pyr_b, "eval")
    palette = None
    for side, dist, image in (("a", res.dist_a, scene.image_a), ("b", res.dist_b, scene.image_b)):
        index_map, overlay, palette = render_topic_overlay(dist, image, args.palette_seed)
        write_ppm(out / f"overlay_{side}.ppm", overlay)
        write_pgm(out / f"index_{side}.pgm", index_map.astype(np.float64) / 255.0)
    (out / "palette.json").write_text(json.dumps(palette, indent=1, sort_keys=True))
    print(f"topic overlays for {pair_id} -> {out}")
    return EXIT_OK


def cmd_acceptance(args) -> int:
    from .acceptance import run_acceptance

    report = run_acceptance(fast_only=args.fast_only, out_path=args.out)
    print(report.summary_line())
    return EXIT_OK if report.all_passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="topicmatch",
        description="Topic-assisted detector-free image matching toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic two-view dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", help="image dims, e.g. 128x128")
    p.add_argument("--pose-range", help="translation range fraction, e.g. 0.05,0.2")
    p.add_argument("--max-rotation-deg", type=float)
    p.add_argument("--octaves", type=int)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--config")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a matcher on a synthetic dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--variant", choices=("fast", "plus"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--train-split", choices=("train", "all"))
    p.add_argument("--num-topics", type=int)
    p.add_argument("--covis", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--widths", help="backbone widths, e.g. 16,32,64")
    p.add_argument("--fine-dim", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("match", help="match two images with a trained checkpoint")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--out-matches", required=True)
    p.add_argument("--viz")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--oracle", action="store_true", help="use exact GT matches instead of the model")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", help="analytic MAC counts per pipeline stage")
    p.add_argument("--n", type=int, default=1024, help="coarse features per image")
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--covis", type=int, default=8)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--fine-dim", type=int, default=64)
    p.add_argument("--variant", choices=("fast", "plus"), default="fast")
    p.add_argument("--matches", type=int, default=0)
    p.add_argument("--pop-mode", choices=("uniform", "single"), default="uniform")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("viz-topics", help="render per-cell topic overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pair")
    p.add_argument("--palette-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_viz_topics)

    p = sub.add_parser("acceptance", help="run the acceptance suite")
    p.add_argument("--fast-only", action="store_true")
    p.add_argument("--out", default="acceptance_report.md")
    p.set_defaults(func=cmd_acceptance)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NonFinite as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (
        ConfigError,
        ConfigHashMismatch,
        EmptyDataset,
        PopulationMismatch,
        ShapeError,
        ValueError,
    ) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, TopicMatchError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
