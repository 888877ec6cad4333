"""Command-line entry point: ``saresdet <subcommand> [flags]``.

Every failure prints one JSON line ``{"error": ..., "message": ...}`` to stderr
and exits nonzero (2 for usage errors, 1 otherwise). ``SARESDET_LOG`` sets the
log level (default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig, TrainConfig
from .moe import LEVELS
from .neck import FusionStrategy
from .router import RouterVariant

log = logging.getLogger("saresdet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # noqa: D401 - argparse hook
        raise UsageError(message)


# ---------------------------------------------------------------------------
# flag parsing helpers


def _pair(kind):
    def parse(text: str):
        parts = text.split(",")
        if len(parts) != 2:
            raise argparse.ArgumentTypeError(f"expected two comma-separated values, got {text!r}")
        return tuple(kind(p) for p in parts)

    return parse


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--seeds expects comma-separated integers, got {text!r}") from None


def _moe_levels(text: str) -> tuple[str, ...]:
    if text.strip().lower() == "none":
        return ()
    levels = tuple(s.strip().upper() for s in text.split(",") if s.strip())
    bad = [lvl for lvl in levels if lvl not in LEVELS]
    if bad or not levels:
        raise argparse.ArgumentTypeError(f"--moe expects a subset of p3,p4,p5 or 'none', got {text!r}")
    return tuple(lvl for lvl in LEVELS if lvl in levels)


def _router(text: str) -> str:
    try:
        return RouterVariant.parse(text).value
    except ValueError:
        raise argparse.ArgumentTypeError(f"unknown router {text!r}") from None


@dataclass
class RunConfig:
    """Validated model/training flags shared by train, ablate and inspect-routing."""

    model: ModelConfig
    train: TrainConfig


def resolve_fusion(sdep: str | None, fusion: str | None) -> str:
    if sdep == "on":
        if fusion not in (None, "spd"):
            raise UsageError(f"--sdep on conflicts with --fusion {fusion}")
        return "spd"
    if sdep == "off":
        if fusion == "spd":
            raise UsageError("--sdep off conflicts with --fusion spd")
        return fusion or "none"
    return fusion or "spd"


def run_config_from(args) -> RunConfig:
    model = ModelConfig(
        input_size=args.image_size,
        fusion=resolve_fusion(args.sdep, args.fusion),
        moe_levels=args.moe,
        router=args.router,
        k=args.k,
        tau=args.tau,
        experts=args.experts,
        seed=args.seed,
    )
    if not 1 <= args.k <= 4:
        raise UsageError(f"--k must be in 1..4, got {args.k}")
    for name in ("epochs", "batch"):
        if getattr(args, name) < 1:
            raise UsageError(f"--{name} must be >= 1")
    if args.lr < 0:
        raise UsageError("--lr must be >= 0")
    tcfg = TrainConfig(epochs=args.epochs, lr=args.lr, batch=args.batch, seed=args.seed,
                       weight_decay=args.weight_decay, balance_weight=args.balance_weight)
    return RunConfig(model, tcfg)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset directory written by `gen`")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sdep", choices=("on", "off"))
    p.add_argument("--fusion", choices=[s.value for s in FusionStrategy])
    p.add_argument("--moe", type=_moe_levels, default=LEVELS, help="p3,p4,p5 subset or 'none'")
    p.add_argument("--router", type=_router, default="dual_branch", help="dual|mlp|freq|spatial|uniform")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--experts", default="full", help="expert roster configuration")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--balance-weight", type=float, default=0.0)


# ---------------------------------------------------------------------------
# commands


def _load_split(data: str, split: str, image_size: int | None = None):
    from .synth import load_dataset

    root = Path(data)
    if not root.exists():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    ds = load_dataset(root, split)
    if image_size is not None and len(ds) and ds.image_size != image_size:
        raise UsageError(f"--image-size {image_size} does not match dataset images of {ds.image_size}px")
    return ds


def cmd_gen(args, out) -> int:
    from .synth import DatasetSpec, SceneSpec, gen_dataset

    if args.size < 32 or args.size % 32:
        raise UsageError(f"--size must be a positive multiple of 32, got {args.size}")
    if args.n_train < 0 or args.n_val < 0:
        raise UsageError("image counts must be non-negative")
    try:
        scene = SceneSpec(size=args.size, looks=args.looks, contrast=args.contrast, ship_size=args.ship_size,
                          ships=args.ships, coast_multiplier=args.coast_multiplier)
    except ValueError as e:
        raise UsageError(str(e)) from None
    spec = DatasetSpec(scene, args.n_train, args.n_val, args.coastal_prob, args.seed, args.format)
    gen_dataset(spec, args.out)
    out.write(json.dumps({"out": str(args.out), "n_train": args.n_train, "n_val": args.n_val, "size": args.size}) + "\n")
    return 0


def cmd_train(args, out) -> int:
    from .detection.checkpoint import save_checkpoint
    from .detection.train import stdout_emitter, train

    rc = run_config_from(args)
    train_set = _load_split(args.data, "train", args.image_size)
    val_set = _load_split(args.data, "val", args.image_size)
    model, _ = train(train_set, rc.model, rc.train, val=val_set, emit=stdout_emitter(out))
    save_checkpoint(args.model, model)
    log.info("saved %s", args.model)
    return 0


def _read_preds(path: Path, names: list[str], size: int):
    from .synth import px_to_norm

    by_name = {}
    order = []
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        rec = json.loads(line)
        if "boxes" not in rec or "scores" not in rec:
            raise ValueError(f"{path}:{n}: prediction record needs 'boxes' and 'scores'")
        item = (px_to_norm(np.asarray(rec["boxes"], dtype=np.float64).reshape(-1, 4), size),
                np.asarray(rec["scores"], dtype=np.float64))
        order.append(item)
        if "image" in rec:
            by_name[rec["image"]] = item
    if by_name and names:
        missing = [nm for nm in names if nm not in by_name]
        if missing:
            raise ValueError(f"{path}: no predictions for image {missing[0]}")
        return [by_name[nm] for nm in names]
    if len(order) != len(names):
        raise ValueError(f"{path}: {len(order)} prediction records for {len(names)} images")
    return order


def cmd_eval(args, out) -> int:
    from .detection.checkpoint import load_checkpoint
    from .metrics import coco_map

    if (args.model is None) == (args.preds is None):
        raise UsageError("eval needs exactly one of --model or --preds")
    ds = _load_split(args.data, args.split)
    if args.model is not None:
        model = load_checkpoint(args.model)
        preds = model.predict(ds.images, score_thresh=-1.0)
    else:
        p = Path(args.preds)
        if not p.exists():
            raise FileNotFoundError(f"prediction file not found: {p}")
        preds = _read_preds(p, ds.names or [], ds.image_size)
    out.write(coco_map(preds, ds.boxes, image_size=ds.image_size).to_json() + "\n")
    return 0


def cmd_predict(args, out) -> int:
    from .detection.checkpoint import load_checkpoint
    from .synth import load_image, norm_to_px

    model = load_checkpoint(args.model)
    if args.image:
        images = np.stack([load_image(p) for p in args.image])
        names = list(args.image)
    else:
        ds = _load_split(args.data, args.split)
        images, names = ds.images[:, 0], ds.names
    size = images.shape[-1]
    for name, det in zip(names, model.predict(images, score_thresh=args.score_thresh)):
        rec = {"image": name, "boxes": norm_to_px(det.boxes, size).round(4).tolist(), "scores": det.scores.round(6).tolist()}
        out.write(json.dumps(rec) + "\n")
    return 0


def cmd_ablate(args, out) -> int:
    from .experiments import CSV_FIELDS, format_csv_value, run_suite

    rc = run_config_from(args)
    train_set = _load_split(args.data, "train", args.image_size)
    val_set = _load_split(args.data, "val", args.image_size)
    seeds = args.seeds if args.seeds else [args.seed]
    sink = open(args.out, "w") if args.out else out
    try:
        sink.write(",".join(CSV_FIELDS) + "\n")

        def write(res):
            row = res.csv_row()
            sink.write(",".join(format_csv_value(row[k]) for k in CSV_FIELDS) + "\n")
            sink.flush()
            log.info("%s seed %d done in %.0fs", res.config_id, res.seed, res.seconds)

        run_suite(args.suite, rc.model, rc.train, train_set, val_set, seeds, on_result=write)
    finally:
        if sink is not out:
            sink.close()
    return 0


def routing_table(model, images: np.ndarray, batch: int = 50, variant: str | None = None) -> list[dict]:
    """Per-level, per-expert execution counts, mean routing weights and routing entropy."""
    from . import tensor as T
    from .detection.model import normalize_image
    from .moe import usage_table
    from .router import routing_entropy

    if variant is not None:
        v = RouterVariant.parse(variant)
        for moe in model.moe.values():
            if v is not moe.router.variant and v is not RouterVariant.UNIFORM:
                raise UsageError(f"model routers are {moe.router.variant.value}; only 'uniform' can override them")
            moe.router.variant = v
    for moe in model.moe.values():
        moe.stats.reset()
        moe.stats.keep_decisions = True
    with T.no_grad():
        for s in range(0, len(images), batch):
            model.forward(T.Tensor(normalize_image(images[s : s + batch])))
    rows = []
    for lvl, moe in model.moe.items():
        table = usage_table(moe.stats)
        probs = np.concatenate([d.probs for d in moe.stats.decisions]) if moe.stats.decisions else np.zeros((0, 1))
        entropy = routing_entropy(probs) if len(probs) else 0.0
        for e, kind in enumerate(moe.bank.roster):
            rows.append({"level": lvl, "expert": e, "kind": kind.value, "count": int(table["counts"][e]),
                         "mean_weight": float(table["mean_weight"][e]), "entropy": entropy,
                         "max_entropy": float(np.log(len(moe.bank.roster))), "images": moe.stats.images,
                         "k": len(moe.bank.roster) if moe.router.variant is RouterVariant.UNIFORM else moe.bank.k})
        moe.stats.keep_decisions = False
    return rows


def cmd_inspect_routing(args, out) -> int:
    import csv

    from .detection.checkpoint import load_checkpoint

    model = load_checkpoint(args.model)
    if not model.moe:
        raise UsageError("model has no MoE layers to inspect")
    ds = _load_split(args.data, args.split)
    rows = routing_table(model, ds.images, variant=args.router)
    sink = open(args.out, "w", newline="") if args.out else out
    try:
        writer = csv.DictWriter(sink, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if sink is not out:
            sink.close()
    return 0


def activation_map(feature: np.ndarray) -> np.ndarray:
    """Per-pixel L2 norm over channels of a ``(C, H, W)`` feature, min-max scaled to uint8."""
    norm = np.sqrt((np.asarray(feature, dtype=np.float64) ** 2).sum(axis=0))
    lo, hi = norm.min(), norm.max()
    if hi <= lo:
        return np.zeros(norm.shape, dtype=np.uint8)
    return np.round((norm - lo) / (hi - lo) * 255.0).astype(np.uint8)


def cmd_cam(args, out) -> int:
    from . import tensor as T
    from .detection.checkpoint import load_checkpoint
    from .detection.model import normalize_image
    from .synth import load_image, write_pgm

    model = load_checkpoint(args.model)
    if args.image:
        image = load_image(args.image)
    else:
        ds = _load_split(args.data, args.split)
        if not 0 <= args.index < len(ds):
            raise UsageError(f"--index {args.index} out of range for {len(ds)} images")
        image = ds.images[args.index, 0]
    with T.no_grad():
        fwd = model.forward(T.Tensor(normalize_image(image[None, None])))
    feature_of = {"P3": "F3", "P4": "F4", "P5": "F5"}
    if args.stage == "neck":
        feat = fwd.pyramid[args.level]
    elif args.stage == "pre":
        feat = fwd.backbone[feature_of[args.level]]
    else:
        if args.level not in model.moe:
            raise UsageError(f"model has no MoE at {args.level}")
        feat = fwd.enhanced[feature_of[args.level]]
    heat = activation_map(feat.data[0])
    write_pgm(args.out, heat)
    out.write(json.dumps({"out": str(args.out), "height": heat.shape[0], "width": heat.shape[1]}) + "\n")
    return 0


def cmd_selfcheck(args, out) -> int:
    from .selfcheck import CHECKS, run_checks

    if args.inject_fault is not None and args.inject_fault not in CHECKS:
        raise UsageError(f"unknown check {args.inject_fault!r}; choose from {', '.join(CHECKS)}")
    results = run_checks(args.inject_fault, args.seed)
    for r in results:
        out.write(json.dumps(r.to_record()) + "\n")
    failed = [r.name for r in results if not r.passed]
    out.write(json.dumps({"passed": not failed, "failed": failed}) + "\n")
    return 0 if not failed else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="saresdet", description="Sparse spectral MoE ship detection on synthetic SAR.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic SAR dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, default=500)
    g.add_argument("--n-val", type=int, default=100)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--looks", type=float, default=1.0)
    g.add_argument("--contrast", type=_pair(float), default=(6.0, 12.0))
    g.add_argument("--ship-size", type=_pair(int), default=(4, 14))
    g.add_argument("--ships", type=_pair(int), default=(1, 4))
    g.add_argument("--coastal-prob", type=float, default=0.5)
    g.add_argument("--coast-multiplier", type=float, default=4.0)
    g.add_argument("--format", choices=("stn", "pgm"), default="stn")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a detector and write a checkpoint")
    _add_model_flags(t)
    t.add_argument("--model", required=True, help="checkpoint output path")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or a prediction file")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--model")
    e.add_argument("--preds")
    e.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write detections as line-delimited JSON")
    p.add_argument("--model", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="val")
    p.add_argument("--image", nargs="*")
    p.add_argument("--score-thresh", type=float, default=0.5)
    p.set_defaults(func=cmd_predict)

    a = sub.add_parser("ablate", help="run an ablation grid and write CSV")
    a.add_argument("suite", choices=("table2", "table3", "table5", "table6"))
    _add_model_flags(a)
    a.add_argument("--seeds", type=_seeds)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("inspect-routing", help="per-level expert usage CSV")
    r.add_argument("--model", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--split", default="val")
    r.add_argument("--router", type=_router, help="override the routers (only 'uniform')")
    r.add_argument("--out")
    r.set_defaults(func=cmd_inspect_routing)

    c = sub.add_parser("cam", help="channel-norm activation heatmap as PGM")
    c.add_argument("--model", required=True)
    c.add_argument("--data")
    c.add_argument("--split", default="val")
    c.add_argument("--index", type=int, default=0)
    c.add_argument("--image")
    c.add_argument("--level", choices=LEVELS, default="P3")
    c.add_argument("--stage", choices=("pre", "post", "neck"), default="post")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_cam)

    s = sub.add_parser("selfcheck", help="run the built-in oracle suite")
    s.add_argument("--inject-fault", metavar="CHECK")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_selfcheck)
    return parser


def _error(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None, out=None) -> int:
    logging.basicConfig(level=os.environ.get("SARESDET_LOG", "WARNING").upper(), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
        if args.command == "predict" and not args.image and not args.data:
            raise UsageError("predict needs --data or --image")
        if args.command == "cam" and not args.image and not args.data:
            raise UsageError("cam needs --data or --image")
        return args.func(args, out)
    except UsageError as e:
        return _error("usage", str(e), 2)
    except BrokenPipeError:
        # reader went away (e.g. piped into head); silence the flush at exit
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 1
    except FileNotFoundError as e:
        return _error("not_found", str(e), 1)
    except (ValueError, KeyError, OSError, FloatingPointError) as e:
        return _error(type(e).__name__, str(e), 1)


if __name__ == "__main__":
    sys.exit(main())
