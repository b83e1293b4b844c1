"""Training, checkpointing, inference and experiment runs."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .data import IMAGE_EXTS, iterate_batches, load_root, num_batches
from .losses import LossFlags, hybrid_loss
from .metrics import MetricReport, evaluate_pairs
from .net import CascadeNet, NetConfig

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cascadesod-checkpoint"
CHECKPOINT_VERSION = 1

# preset -> (architecture toggles, loss toggles); each row adds one component
PRESETS: dict[str, tuple[dict, dict]] = {
    "B1": (dict(cascade=False, mdab=False, mbab=False), dict(cascade=False, ssim=False, iou_f=False)),
    "B2": (dict(body_first=True, mdab=False, mbab=False), dict(body_first=True, ssim=False, iou_f=False)),
    "B3": (dict(mdab=False, mbab=False), dict(ssim=False, iou_f=False)),
    "B4": (dict(mdab=False, mbab=False), dict(iou_f=False)),
    "B5": (dict(mdab=False, mbab=False), dict()),
    "B6": (dict(mbab=False), dict()),
    "B7": (dict(), dict()),
}
PRESETS["full"] = PRESETS["B7"]

PRESET_LABELS = {
    "B1": "Baseline",
    "B2": "B1 + Body Map -> Detail Map",
    "B3": "B1 + Detail Map -> Body Map",
    "B4": "B3 + SSIM on Detail Map",
    "B5": "B4 + IoU and F on Body Map",
    "B6": "B5 + MDAB",
    "B7": "B6 + MBAB",
    "full": "B6 + MBAB",
}

PROFILES = {
    "desk": dict(input_size=96, batch_size=8, epochs=20),
    "paper": dict(input_size=352, batch_size=32, epochs=50),
}


class NonFiniteLoss(FloatingPointError):
    pass


class CheckpointMismatch(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr_backbone: float = 0.005
    lr_head: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_fraction: float = 0.05
    input_size: int = 96
    preset: str = "B7"
    seed: int = 0
    augment: bool = True
    ssim_window: int = 11
    net: dict = field(default_factory=dict)  # NetConfig overrides (widths, flow, ...)
    ckpt_every: int = 0  # steps; 0 = end of each epoch only
    threads: int = 1

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if self.lr_backbone <= 0 or self.lr_head <= 0:
            raise ValueError("learning rates must be positive")
        if self.input_size % 32 or self.input_size < 64:
            raise ValueError(f"input_size {self.input_size} must be a multiple of 32 and >= 64")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def net_config(self) -> NetConfig:
        arch, _ = PRESETS[self.preset]
        return NetConfig.from_dict({**self.net, **arch})

    def loss_flags(self) -> LossFlags:
        _, flags = PRESETS[self.preset]
        return LossFlags(ssim_window=self.ssim_window, **flags)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names - {"profile"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        profile = d.pop("profile", None)
        if profile is not None:
            d = {**PROFILES[profile], **d}
        return cls(**d)


def git_hash(data: bytes) -> str:
    """Content hash in git's blob format."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def net_hash(cfg: NetConfig) -> str:
    return git_hash(canonical_json(cfg.to_dict()))


def params_hash(model: torch.nn.Module) -> str:
    h = hashlib.sha1()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig) -> tuple[float, float]:
    """Linear warm-up to the maximum rates, then linear decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = max(1, round(cfg.warmup_fraction * total_steps))
    if step <= warm:
        frac = step / warm
    else:
        frac = (total_steps - step) / max(1, total_steps - warm)
    return frac * cfg.lr_backbone, frac * cfg.lr_head


def configure_runtime(threads: int = 1) -> None:
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def build_model(cfg: TrainConfig) -> CascadeNet:
    torch.manual_seed(cfg.seed)
    return CascadeNet(cfg.net_config())


def build_optimizer(model: CascadeNet, cfg: TrainConfig) -> torch.optim.SGD:
    backbone = list(model.backbone.parameters())
    ids = {id(p) for p in backbone}
    rest = [p for p in model.parameters() if id(p) not in ids]
    return torch.optim.SGD(
        [{"params": backbone, "lr": cfg.lr_backbone}, {"params": rest, "lr": cfg.lr_head}],
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0  # completed epochs
    best_val_mae: float = math.inf
    history: list[float] = field(default_factory=list)  # l_total per step


def save_checkpoint(path, model: CascadeNet, optimizer, cfg: TrainConfig, state: TrainState, final: bool = False) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "net_config": model.cfg.to_dict(),
        "net_hash": net_hash(model.cfg),
        "epoch": state.epoch,
        "step": state.step,
        "best_val_mae": state.best_val_mae,
        "history": list(state.history),
        "final": final,
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "torch_rng": torch.get_rng_state(),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path, expected: NetConfig | None = None) -> tuple[CascadeNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointMismatch(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload["version"] > CHECKPOINT_VERSION:
        raise CheckpointMismatch(f"checkpoint version {payload['version']} is newer than supported {CHECKPOINT_VERSION}")
    net_cfg = NetConfig.from_dict(payload["net_config"])
    if expected is not None and net_hash(expected) != payload["net_hash"]:
        raise CheckpointMismatch(
            f"config hash {net_hash(expected)} does not match checkpoint hash {payload['net_hash']}"
        )
    model = CascadeNet(net_cfg)
    try:
        model.load_state_dict(payload["model"])
    except RuntimeError as e:
        raise CheckpointMismatch(
            f"parameters do not fit config hash {net_hash(net_cfg)} (checkpoint hash {payload['net_hash']}): {e}"
        ) from e
    return model, payload


def _log_record(fh, record: dict) -> None:
    fh.write(json.dumps(record) + "\n")
    fh.flush()


def train(cfg: TrainConfig, dataset, out_dir, val_dataset=None, resume=None, stop_after: int | None = None,
          fixed_batch=None) -> tuple[CascadeNet, TrainState]:
    """Train ``cfg.preset`` on ``dataset``; checkpoints and a JSONL loss log go to ``out_dir``.

    ``stop_after`` halts after that many global steps (a resumable
    checkpoint is written). ``fixed_batch`` replaces the data iterator with
    one repeated batch, as used by overfitting checks.
    """
    configure_runtime(cfg.threads)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg)
    optimizer = build_optimizer(model, cfg)
    flags = cfg.loss_flags()
    state = TrainState()
    if resume is not None:
        payload = torch.load(resume, map_location="cpu", weights_only=True)
        model.load_state_dict(payload["model"])
        optimizer.load_state_dict(payload["optimizer"])
        torch.set_rng_state(payload["torch_rng"])
        state = TrainState(step=payload["step"], epoch=payload["epoch"],
                           best_val_mae=payload["best_val_mae"], history=list(payload["history"]))

    n = 1 if fixed_batch is not None else len(dataset)
    if n == 0:
        raise ValueError("training dataset is empty")
    per_epoch = 1 if fixed_batch is not None else num_batches(n, cfg.batch_size)
    total = cfg.epochs * per_epoch
    model.train()
    with open(out_dir / "train_log.jsonl", "a") as log_fh:
        while state.step < total:
            epoch, start = divmod(state.step, per_epoch)
            batches = [fixed_batch] if fixed_batch is not None else iterate_batches(
                dataset, cfg.batch_size, cfg.seed, epoch, cfg.augment, cfg.input_size, start)
            for batch in batches:
                lr_b, lr_h = lr_schedule(state.step, total, cfg)
                optimizer.param_groups[0]["lr"] = lr_b
                optimizer.param_groups[1]["lr"] = lr_h
                outputs = model(batch.images)
                report = hybrid_loss(outputs, batch.gts, batch.details, flags)
                if not torch.isfinite(report.l_total):
                    dump = out_dir / f"nonfinite_epoch{epoch}_batch{batch.index}.pt"
                    torch.save({"images": batch.images, "gts": batch.gts, "ids": batch.ids}, dump)
                    raise NonFiniteLoss(
                        f"non-finite loss at step {state.step} (epoch {epoch}, batch {batch.index}, "
                        f"ids {batch.ids}); batch dumped to {dump}"
                    )
                optimizer.zero_grad(set_to_none=True)
                report.l_total.backward()
                optimizer.step()
                state.step += 1
                state.history.append(float(report.l_total.detach()))
                _log_record(log_fh, {"step": state.step, "epoch": epoch, "batch": batch.index,
                                     "lr_backbone": lr_b, "lr_head": lr_h, **report.as_record()})
                if cfg.ckpt_every and state.step % cfg.ckpt_every == 0:
                    save_checkpoint(out_dir / "last.pt", model, optimizer, cfg, state)
                if stop_after is not None and state.step >= stop_after:
                    save_checkpoint(out_dir / "last.pt", model, optimizer, cfg, state)
                    return model, state
            state.epoch = state.step // per_epoch
            if val_dataset is not None and fixed_batch is None:
                val = evaluate_model(model, val_dataset, cfg.batch_size).mae
                model.train()
                _log_record(log_fh, {"epoch": state.epoch, "val_mae": val})
                if val < state.best_val_mae:
                    state.best_val_mae = val
                    save_checkpoint(out_dir / "best.pt", model, optimizer, cfg, state)
            save_checkpoint(out_dir / "last.pt", model, optimizer, cfg, state)
    save_checkpoint(out_dir / "final.pt", model, optimizer, cfg, state, final=True)
    return model, state


@torch.no_grad()
def predict(model: CascadeNet, images: torch.Tensor) -> dict[str, torch.Tensor]:
    model.eval()
    return model(images)


def predict_dataset(model: CascadeNet, dataset, batch_size: int = 8) -> tuple[list[np.ndarray], list[np.ndarray]]:
    preds, gts = [], []
    for batch in iterate_batches(dataset, batch_size, seed=0, epoch=0, augment_on=False):
        out = predict(model, batch.images)["fused"]
        preds += [p[0].numpy().astype(np.float64) for p in out]
        gts += [g[0].numpy().astype(np.uint8) for g in batch.gts]
    return preds, gts


def evaluate_model(model: CascadeNet, dataset, batch_size: int = 8) -> MetricReport:
    preds, gts = predict_dataset(model, dataset, batch_size)
    return evaluate_pairs(preds, gts)


def _to_png(arr: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.rint(np.clip(arr, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


def infer(checkpoint, image_dir, out_dir, dump: tuple[str, ...] = (), dump_attention: bool = False,
          expected: NetConfig | None = None, input_size: int | None = None) -> dict:
    """Write fused saliency maps (8-bit, original resolution) for every image in ``image_dir``.

    ``dump`` may contain ``"detail"`` and/or ``"body"`` to also write the
    branch maps into same-named subdirectories. The fused map written is
    ``clamp(detail + body, 0, 1)`` of the resized branch maps.
    """
    model, payload = load_checkpoint(checkpoint, expected)
    model.eval()
    size = input_size or payload["config"]["input_size"]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if dump and not model.cfg.cascade:
        raise ValueError("detail/body dumps need a cascade model")
    model.set_record_attention(dump_attention)
    paths = [p for p in sorted(Path(image_dir).iterdir()) if p.suffix.lower() in IMAGE_EXTS]
    t0 = time.perf_counter()
    for p in paths:
        with Image.open(p) as im:
            im = im.convert("RGB")
            orig_hw = (im.height, im.width)
            arr = np.asarray(im.resize((size, size), Image.BILINEAR), dtype=np.float32) / 255.0
        x = torch.from_numpy(arr).permute(2, 0, 1)[None]
        out = predict(model, x)
        resized = {k: F.interpolate(v, size=orig_hw, mode="bilinear", align_corners=False)[0, 0].numpy()
                   for k, v in out.items()}
        if model.cfg.cascade:
            fused = np.clip(resized["detail"] + resized["body"], 0.0, 1.0)
        else:
            fused = resized["fused"]
        _to_png(fused, out_dir / f"{p.stem}.png")
        for key in dump:
            _to_png(resized[key], out_dir / key / f"{p.stem}.png")
        if dump_attention:
            for name, block in model.attention_blocks().items():
                for k, a in enumerate(block.attention):
                    a = F.interpolate(a, size=orig_hw, mode="bilinear", align_corners=False)[0, 0].numpy()
                    _to_png(a, out_dir / "attention" / p.stem / f"{name.replace('.', '_')}_{k}.png")
    elapsed = time.perf_counter() - t0
    summary = {
        "n_images": len(paths),
        "seconds": elapsed,
        "images_per_sec": len(paths) / elapsed if elapsed > 0 else float("inf"),
        "checkpoint": str(checkpoint),
        "net_hash": payload["net_hash"],
    }
    (out_dir / "infer_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def run_experiment(cfg: TrainConfig, train_root, out_dir, test_root=None, val_root=None) -> dict:
    """Train, optionally evaluate on ``test_root``, and write ``run.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    train_set = load_root(train_root, cfg.input_size)
    val_set = load_root(val_root, cfg.input_size) if val_root else None
    model, state = train(cfg, train_set, out_dir, val_dataset=val_set)
    run = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "content_hash": git_hash(canonical_json(cfg.to_dict())),
        "params_hash": params_hash(model),
        "steps": state.step,
        "final_loss": state.history[-1] if state.history else None,
        "metrics": None,
    }
    if test_root is not None:
        report = evaluate_model(model, load_root(test_root, cfg.input_size), cfg.batch_size)
        report.to_json(out_dir / "report.json")
        report.sweep.write_csv(out_dir / "curves.csv")
        run["metrics"] = report.summary()
    run["elapsed_sec"] = time.perf_counter() - t0
    (out_dir / "run.json").write_text(json.dumps(run, indent=2) + "\n")
    return run
