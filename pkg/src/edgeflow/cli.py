"""Command-line entry point: dataset generation, training, evaluation,
ablation tables, the annotation service, and the gradient-check gate.

Every artifact-producing command writes a manifest.json next to its
outputs holding the full config snapshot, seed, and build fingerprint, so
any run can be reproduced from the manifest alone. Exit codes: 0 success,
1 failed check, 2 bad usage or invalid config.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .data import generate_dataset, load_dataset, save_dataset
from .eval import ModelSegmenter, evaluate_dataset
from .gradcheck import run_suite
from .model import ModelConfig, load_checkpoint
from .train import TrainConfig, train

VARIANTS = {
    "baseline": {"use_edge_flow": False, "use_finenet": False},
    "ef": {"use_edge_flow": True, "use_finenet": False},
    "ef_f": {"use_edge_flow": True, "use_finenet": True},
}

CONFIG_KEYS = {"seed", "model", "train", "data"}


def build_fingerprint() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5,
        ).stdout.strip() or "unknown"
    except OSError:
        rev = "unknown"
    return f"edgeflow-{__version__}+git.{rev}+numpy.{np.__version__}"


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    fingerprint: str = field(default_factory=build_fingerprint)
    outputs: List[str] = field(default_factory=list)
    deterministic: bool = False
    created_at: str = field(
        default_factory=lambda: time.strftime("%Y-%m-%dT%H:%M:%S%z"))

    def write(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2) + "\n")
        return path


def load_run_config(path) -> dict:
    """Parse and fully validate the shared JSON config before any work.

    Schema: {"seed": int, "model": {ModelConfig fields}, "train":
    {TrainConfig fields}, "data": {"dir": str} or {"base_seed": int}}.
    All sections optional; unknown keys anywhere are errors.
    """
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ValueError("config root must be a JSON object")
    unknown = set(raw) - CONFIG_KEYS
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    seed = int(raw.get("seed", 0))
    model_config = ModelConfig.from_dict(raw.get("model", {}))
    train_section = dict(raw.get("train", {}))
    train_section.setdefault("seed", seed)
    try:
        train_config = TrainConfig(**train_section)
    except TypeError as exc:
        raise ValueError(f"invalid train section: {exc}") from None
    data = raw.get("data", {})
    if not isinstance(data, dict) or (set(data) - {"dir", "base_seed"}):
        raise ValueError("data section allows only 'dir' or 'base_seed'")
    return {"seed": seed, "model": model_config, "train": train_config,
            "data": data, "raw": raw}


def _resolve_samples(cfg: dict):
    """Training/holdout samples from the config's data section: an
    on-disk dataset if 'dir' is set, generated scenes otherwise."""
    model_config: ModelConfig = cfg["model"]
    train_config: TrainConfig = cfg["train"]
    data = cfg["data"]
    if "dir" in data:
        splits = load_dataset(data["dir"])
        if "train" not in splits:
            raise ValueError(f"dataset at {data['dir']} has no 'train' split")
        return splits["train"], splits.get("val", [])
    h, w = model_config.input_size
    base = int(data.get("base_seed", cfg["seed"]))
    train_samples = generate_dataset(train_config.train_size, h, w, base)
    holdout = generate_dataset(train_config.holdout_size, h, w,
                               base + train_config.train_size)
    return train_samples, holdout


def _miou_at_5(curve: List[float]) -> float:
    return curve[min(4, len(curve) - 1)]


class OracleSegmenter:
    """Returns the ground truth as the probability map; the simulated
    protocol then needs exactly one click per image."""

    def __init__(self, dataset):
        self._by_image = {s.image.tobytes(): s.gt_mask.astype(np.float64)
                          for s in dataset}

    def __call__(self, image, clicks, prev_pred):
        return self._by_image[np.ascontiguousarray(image).tobytes()]


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    train_samples = generate_dataset(args.count, args.size, args.size, args.seed)
    holdout = generate_dataset(args.holdout, args.size, args.size,
                               args.seed + args.count)
    save_dataset(out, {"train": train_samples, "val": holdout})
    manifest = RunManifest(
        command="gen-data",
        config={"count": args.count, "holdout": args.holdout,
                "size": args.size},
        seed=args.seed,
        outputs=[str(out / "train"), str(out / "val")],
        deterministic=args.deterministic,
    )
    manifest.write(out)
    print(f"wrote {args.count}+{args.holdout} scenes to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    out = Path(args.out)
    train_samples, _ = _resolve_samples(cfg)
    model, records = train(cfg["train"], cfg["model"], train_samples, out_dir=out)
    manifest = RunManifest(
        command="train", config=cfg["raw"], seed=cfg["seed"],
        outputs=[str(out / "checkpoint.bin"), str(out / "train_log.jsonl")],
        deterministic=args.deterministic,
    )
    manifest.write(out)
    print(f"trained {len(records)} epochs; checkpoint at {out / 'checkpoint.bin'}")
    return 0


def _load_split(dataset_dir, split: str):
    splits = load_dataset(dataset_dir)
    if split not in splits:
        raise ValueError(f"dataset {dataset_dir} has no '{split}' split "
                         f"(found {sorted(splits)})")
    return splits[split]


def cmd_eval(args) -> int:
    if args.checkpoint is None and not args.oracle:
        raise ValueError("eval needs --checkpoint (or --oracle)")
    dataset = _load_split(args.dataset, args.split)
    if args.oracle:
        segmenter = OracleSegmenter(dataset)
        source = "oracle"
    else:
        model = load_checkpoint(args.checkpoint)
        segmenter = ModelSegmenter(model)
        source = str(args.checkpoint)
    report = evaluate_dataset(
        segmenter, dataset, out_path=args.report,
        config={"segmenter": source, "dataset": str(args.dataset),
                "split": args.split, "max_clicks": args.max_clicks},
        max_clicks=args.max_clicks,
    )
    manifest = RunManifest(
        command="eval",
        config={"checkpoint": source, "dataset": str(args.dataset),
                "split": args.split, "max_clicks": args.max_clicks},
        seed=0,
        outputs=[str(args.report)],
        deterministic=args.deterministic,
    )
    manifest.write(Path(args.report).parent)
    print(f"NoC@85={report.mean_noc85:.2f} NoC@90={report.mean_noc90:.2f} "
          f"mIoU@5={_miou_at_5(report.miou_curve):.3f} stability={report.stability:.4f} "
          f"failures={report.failure_count}")
    return 0


def _format_table(rows: List[dict]) -> str:
    header = ["variant", "prior", "NoC@85", "NoC@90", "mIoU@5", "stability"]
    lines = ["| " + " | ".join(header) + " |",
             "|" + "|".join("---" for _ in header) + "|"]
    for r in rows:
        lines.append(
            f"| {r['variant']} | {r['prior']} | {r['noc85']:.2f} "
            f"| {r['noc90']:.2f} | {r['miou5']:.3f} | {r['stability']:.4f} |")
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    priors = [p.strip() for p in args.prior.split(",") if p.strip()]
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise ValueError(f"unknown variants {bad}; choose from {sorted(VARIANTS)}")
    cfg = load_run_config(args.config) if args.config else {
        "seed": args.seed, "model": ModelConfig(),
        "train": TrainConfig(seed=args.seed), "data": {}, "raw": {}}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_samples, holdout = _resolve_samples(cfg)
    if not holdout:
        raise ValueError("ablation needs a held-out split to evaluate on")

    base_model: ModelConfig = cfg["model"]
    rows = []
    for variant in variants:
        for prior in priors:
            overrides = dict(VARIANTS[variant], prior_mode=prior)
            model_config = ModelConfig.from_dict(
                {**base_model.to_dict(), **overrides})
            model, _ = train(cfg["train"], model_config, train_samples)
            report = evaluate_dataset(ModelSegmenter(model), holdout,
                                      max_clicks=args.max_clicks)
            rows.append({
                "variant": variant, "prior": prior,
                "noc85": report.mean_noc85, "noc90": report.mean_noc90,
                "miou5": _miou_at_5(report.miou_curve),
                "stability": report.stability,
            })
            print(f"{variant}/{prior}: NoC@85={report.mean_noc85:.2f} "
                  f"NoC@90={report.mean_noc90:.2f}")

    csv_path = out / "ablation.csv"
    with open(csv_path, "w") as f:
        f.write("variant,prior,noc85,noc90,miou5,stability\n")
        for r in rows:
            f.write(f"{r['variant']},{r['prior']},{r['noc85']:.4f},"
                    f"{r['noc90']:.4f},{r['miou5']:.4f},{r['stability']:.5f}\n")
    table_path = out / "ablation.md"
    table_path.write_text(_format_table(rows) + "\n")
    manifest = RunManifest(
        command="ablate",
        config={"variants": variants, "priors": priors, **cfg["raw"]},
        seed=cfg["seed"],
        outputs=[str(csv_path), str(table_path)],
        deterministic=args.deterministic,
    )
    manifest.write(out)
    print(_format_table(rows))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    model = load_checkpoint(args.checkpoint)
    app = create_app(model, max_side=args.max_side, ui_dir=args.ui_dir)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(args.seed)
    failures = [r for r in results if not r.passed]
    for r in results:
        status = "ok  " if r.passed else "FAIL"
        print(f"{status} {r.name:28s} rel_err={r.max_rel_err:.3e} "
              f"({r.seconds:.2f}s)")
    total = sum(r.seconds for r in results)
    print(f"{len(results)} checks, {len(failures)} failures, {total:.1f}s")
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edgeflow",
        description="Interactive segmentation: train, evaluate, serve.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--deterministic", action="store_true",
                       help="record deterministic mode in the manifest")

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--holdout", type=int, default=50)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="two-phase training from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="clicker-protocol evaluation report")
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", action="store_true",
                   help="use the ground-truth oracle instead of a model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--report", required=True)
    p.add_argument("--max-clicks", type=int, default=20)
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare variant/prior pairs")
    p.add_argument("--variants", default="baseline,ef,ef_f")
    p.add_argument("--prior", default="ei")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--max-clicks", type=int, default=20)
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("serve", help="run the annotation HTTP service")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--ui-dir")
    p.add_argument("--max-side", type=int, default=2048)
    common(p)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("gradcheck", help="finite-difference gradient gate")
    p.add_argument("--seed", type=int, default=0)
    common(p)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
