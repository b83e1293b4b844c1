"""Command-line entry point: generate, decompose, train, infer, eval, plot, ablate."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .data import IMAGE_EXTS, SynthSpec, generate_synthetic, load_mask, load_root
from .labelgen import NoSalientRegion, decompose_body, decompose_detail
from .metrics import PRSweep, evaluate_dirs
from .train import PRESET_LABELS, PRESETS, PROFILES, TrainConfig, infer, run_experiment, train

log = logging.getLogger("cascadesod")


def load_config(path=None, profile=None, overrides: dict | None = None) -> TrainConfig:
    """Config file (YAML/JSON), then profile defaults underneath, then explicit overrides on top."""
    d = {}
    if path is not None:
        d = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(d, dict):
            raise ValueError(f"{path}: expected a mapping")
    if profile is not None:
        d["profile"] = profile
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if isinstance(v, dict) and isinstance(d.get(k), dict):
            d[k] = {**d[k], **v}
        else:
            d[k] = v
    return TrainConfig.from_dict(d)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON training config")
    p.add_argument("--profile", choices=sorted(PROFILES))
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--input-size", type=int)
    p.add_argument("--lr-backbone", type=float)
    p.add_argument("--lr-head", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field, value parsed as YAML")


def _config_from_args(args) -> TrainConfig:
    over = {
        "preset": args.preset,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "input_size": args.input_size,
        "lr_backbone": args.lr_backbone,
        "lr_head": args.lr_head,
        "seed": args.seed,
        "threads": args.threads,
    }
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        key = key.replace("-", "_")
        if "." in key:  # nested field, e.g. net.flow=32
            top, sub = key.split(".", 1)
            over.setdefault(top, {})[sub] = yaml.safe_load(value)
        else:
            over[key] = yaml.safe_load(value)
    return load_config(args.config, args.profile, over)


def cmd_generate(args) -> int:
    spec = SynthSpec(n_images=args.n, canvas=args.canvas, seed=args.seed, noise=args.noise)
    generate_synthetic(spec, args.root)
    print(f"wrote {spec.n_images} image/mask pairs to {args.root}")
    return 0


def _write_label(arr: np.ndarray, path: Path) -> None:
    Image.fromarray(np.rint(arr * 255).astype(np.uint8), mode="L").save(path)


def cmd_decompose(args) -> int:
    mask_dir = Path(args.masks)
    out = Path(args.out) if args.out else mask_dir.with_name(mask_dir.name + "_detail")
    out.mkdir(parents=True, exist_ok=True)
    body_out = out.with_name(out.name.replace("_detail", "") + "_body") if args.body else None
    if body_out is not None:
        body_out.mkdir(parents=True, exist_ok=True)
    n = skipped = 0
    for p in sorted(mask_dir.iterdir()):
        if p.suffix.lower() not in IMAGE_EXTS:
            continue
        mask = load_mask(p)
        try:
            detail = decompose_detail(mask)
        except NoSalientRegion:
            log.warning("%s has no salient region, skipped", p.name)
            skipped += 1
            continue
        _write_label(detail, out / f"{p.stem}.png")
        if body_out is not None:
            _write_label(decompose_body(mask, detail), body_out / f"{p.stem}.png")
        n += 1
    print(f"decomposed {n} masks into {out}" + (f" and {body_out}" if body_out else "")
          + (f"; skipped {skipped} empty masks" if skipped else ""))
    return 0


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    out = Path(args.out)
    if args.resume:
        dataset = load_root(args.data, cfg.input_size)
        val = load_root(args.val, cfg.input_size) if args.val else None
        train(cfg, dataset, out, val_dataset=val, resume=args.resume)
        print(f"resumed and finished training; checkpoints in {out}")
        return 0
    run = run_experiment(cfg, args.data, out, test_root=args.test, val_root=args.val)
    print(json.dumps({"out": str(out), "steps": run["steps"], "metrics": run["metrics"]}, indent=2))
    return 0


def cmd_infer(args) -> int:
    dump = tuple(x for x in (args.dump or "").split(",") if x)
    bad = set(dump) - {"detail", "body"}
    if bad:
        raise SystemExit(f"--dump accepts detail,body; got {sorted(bad)}")
    expected = _config_from_args(args).net_config() if args.config else None
    summary = infer(args.checkpoint, args.images, args.out, dump=dump,
                    dump_attention=args.dump_attention, expected=expected)
    print(f"{summary['n_images']} images, {summary['images_per_sec']:.1f} images/sec")
    return 0


def cmd_eval(args) -> int:
    report = evaluate_dirs(args.pred, args.gt, pooling=args.pooling, jobs=args.jobs)
    if args.out:
        report.to_json(args.out)
    if args.curves:
        report.sweep.write_csv(args.curves)
    print(json.dumps(report.summary(), indent=2))
    if report.missing:
        print(f"{len(report.missing)} unpaired files: {', '.join(report.missing[:10])}", file=sys.stderr)
        return 1
    return 0


def cmd_plot(args) -> int:
    from .plotting import plot_curves

    labels = args.labels.split(",") if args.labels else [Path(c).stem for c in args.curves]
    if len(labels) != len(args.curves):
        raise SystemExit("--labels must name every curve file")
    sweeps = {lab: PRSweep.read_csv(c) for lab, c in zip(labels, args.curves)}
    for p in plot_curves(sweeps, args.out, args.format):
        print(f"wrote {p}")
    return 0


def write_ablation_table(rows: list[dict], out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    csv_path, md_path = out_dir / "ablation.csv", out_dir / "ablation.md"
    keys = ["preset", "setting", "mae", "mean_f", "weighted_f"]
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in keys})
    lines = ["| Preset | Setting | MAE | mean F | weighted F |", "|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['preset']} | {r['setting']} | {r['mae']:.4f} | {r['mean_f']:.4f} | {r['weighted_f']:.4f} |")
    md_path.write_text("\n".join(lines) + "\n")
    return csv_path, md_path


def cmd_ablate(args) -> int:
    base = _config_from_args(args)
    rows = []
    for preset in args.presets.split(","):
        if preset not in PRESETS:
            raise SystemExit(f"unknown preset {preset!r}")
        cfg = TrainConfig.from_dict({**base.to_dict(), "preset": preset})
        log.info("running %s", preset)
        run = run_experiment(cfg, args.data, Path(args.out) / preset, test_root=args.test)
        rows.append({"preset": preset, "setting": PRESET_LABELS[preset], **run["metrics"]})
    csv_path, md_path = write_ablation_table(rows, args.out)
    print(md_path.read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cascadesod", description="Cascaded detail/body saliency detection")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic shapes corpus")
    p.add_argument("root")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--canvas", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.03)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("decompose", help="write detail (and body) labels for a mask directory")
    p.add_argument("masks")
    p.add_argument("--out", help="detail label directory (default: sibling <masks>_detail)")
    p.add_argument("--body", action="store_true", help="also write body labels")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("train", help="train a preset; writes checkpoints, a loss log and run.json")
    p.add_argument("--data", required=True, help="root with images/ and masks/")
    p.add_argument("--out", required=True)
    p.add_argument("--val", help="validation root (best.pt by MAE)")
    p.add_argument("--test", help="held-out root evaluated after training")
    p.add_argument("--resume", help="checkpoint to resume from")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write saliency maps for a folder of images")
    p.add_argument("checkpoint")
    p.add_argument("images")
    p.add_argument("--out", required=True)
    p.add_argument("--dump", help="comma list of extra maps: detail,body")
    p.add_argument("--dump-attention", action="store_true")
    _add_config_args(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score prediction maps against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", help="report JSON")
    p.add_argument("--curves", help="PR/F curve CSV")
    p.add_argument("--pooling", choices=["image", "pixel"], default="image")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="render PR and F-vs-threshold curves")
    p.add_argument("curves", nargs="+")
    p.add_argument("--labels")
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--format", default="png")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("ablate", help="train and evaluate a list of presets; emit CSV and markdown tables")
    p.add_argument("--data", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--presets", default="B1,B2,B3,B4,B5,B6,B7")
    _add_config_args(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
