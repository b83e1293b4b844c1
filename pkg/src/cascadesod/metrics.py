"""Saliency evaluation: MAE, 256-threshold PR/F sweep, mean F and weighted F."""

from __future__ import annotations

import csv
import json
import math
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .data import IMAGE_EXTS, MASK_THRESHOLD
from .labelgen import euclidean_distance_transform

log = logging.getLogger(__name__)

BETA2 = 0.3
THRESHOLDS = np.arange(256) / 255.0


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred, gt.astype(bool)


def mae(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float(np.abs(pred - gt).mean())


def f_measure(precision, recall, beta2: float = BETA2):
    precision = np.asarray(precision, dtype=np.float64)
    recall = np.asarray(recall, dtype=np.float64)
    den = beta2 * precision + recall
    with np.errstate(invalid="ignore", divide="ignore"):
        f = np.where(den > 0, (1 + beta2) * precision * recall / np.where(den > 0, den, 1.0), 0.0)
    return f


@dataclass
class ThresholdCounts:
    """Per-threshold confusion counts of one image."""

    tp: np.ndarray  # (256,) true positives at each threshold
    positives: np.ndarray  # (256,) predicted positives
    n_gt: int

    @property
    def precision(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            p = self.tp / np.where(self.positives > 0, self.positives, 1)
        return np.where(self.positives > 0, p, 1.0 if self.n_gt == 0 else 0.0)

    @property
    def recall(self) -> np.ndarray:
        if self.n_gt == 0:
            return np.ones(len(self.tp))
        return self.tp / self.n_gt


def threshold_counts(pred, gt) -> ThresholdCounts:
    """Counts for ``pred > t / 255`` at every integer ``t`` in 0..255, via one histogram pass."""
    pred, gt = _pair(pred, gt)
    # number of thresholds strictly below each value: positive at t iff t < k
    k = np.searchsorted(THRESHOLDS, pred.ravel(), side="left")
    hist_all = np.bincount(k, minlength=257)
    hist_fg = np.bincount(k[gt.ravel()], minlength=257)
    positives = np.cumsum(hist_all[::-1])[::-1][1:]
    tp = np.cumsum(hist_fg[::-1])[::-1][1:]
    return ThresholdCounts(tp=tp.astype(np.int64), positives=positives.astype(np.int64), n_gt=int(gt.sum()))


@dataclass
class PRSweep:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f_beta: np.ndarray

    def to_dict(self) -> dict:
        return {
            "thresholds": self.thresholds.tolist(),
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f_beta": self.f_beta.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PRSweep":
        return cls(
            thresholds=np.asarray(d["thresholds"], dtype=np.int64),
            precision=np.asarray(d["precision"], dtype=np.float64),
            recall=np.asarray(d["recall"], dtype=np.float64),
            f_beta=np.asarray(d["f_beta"], dtype=np.float64),
        )

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "precision", "recall", "f_beta"])
            for row in zip(self.thresholds, self.precision, self.recall, self.f_beta):
                w.writerow([int(row[0]), repr(float(row[1])), repr(float(row[2])), repr(float(row[3]))])

    @classmethod
    def read_csv(cls, path) -> "PRSweep":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        col = lambda k: np.array([float(r[k]) for r in rows])  # noqa: E731
        return cls(col("threshold").astype(np.int64), col("precision"), col("recall"), col("f_beta"))


def _exact_mean(rows: Sequence[np.ndarray]) -> np.ndarray:
    # column means with exactly rounded sums: independent of image order
    return np.array([math.fsum(col) for col in zip(*rows)]) / len(rows)


def aggregate_sweep(counts: Sequence[ThresholdCounts], pooling: str = "image", beta2: float = BETA2) -> PRSweep:
    """Average per-image precision/recall (``pooling="image"``) or pool pixels globally (``"pixel"``)."""
    if not counts:
        raise ValueError("cannot sweep an empty prediction set")
    if pooling == "image":
        precision = _exact_mean([c.precision for c in counts])
        recall = _exact_mean([c.recall for c in counts])
    elif pooling == "pixel":
        pooled = ThresholdCounts(
            tp=np.sum([c.tp for c in counts], axis=0),
            positives=np.sum([c.positives for c in counts], axis=0),
            n_gt=sum(c.n_gt for c in counts),
        )
        precision, recall = pooled.precision, pooled.recall
    else:
        raise ValueError(f"unknown pooling {pooling!r}")
    return PRSweep(np.arange(256), precision, recall, f_measure(precision, recall, beta2))


def pr_sweep(preds: Sequence, gts: Sequence, pooling: str = "image", beta2: float = BETA2) -> PRSweep:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    return aggregate_sweep([threshold_counts(p, g) for p, g in zip(preds, gts)], pooling, beta2)


def mean_f(sweep: PRSweep) -> float:
    return float(np.mean(sweep.f_beta))


def _gaussian_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma**2))
    return k / k.sum()


def weighted_f(pred, gt, beta2: float = BETA2, sigma: float = 5.0, nu: float = 0.5, window: int = 7) -> float:
    """Weighted F-measure for non-binary maps (Margolin et al., 2014).

    Errors outside the object borrow the error of their nearest object
    pixel, are smoothed by a ``window``-sized Gaussian (``sigma``), and false
    positives are up-weighted with distance from the object via
    ``2 - exp(ln(1 - nu) / sigma * d)``. Zero padding at the image border.
    """
    pred, gt = _pair(pred, gt)
    if not gt.any():
        return 1.0 if not pred.any() else 0.0
    err = np.abs(pred - gt)
    dist, (nr, nc) = euclidean_distance_transform(gt.astype(np.uint8), return_indices=True)
    bg = ~gt
    err_t = err.copy()
    err_t[bg] = err[nr[bg], nc[bg]]
    err_a = ndimage.correlate(err_t, _gaussian_kernel(window, sigma), mode="constant", cval=0.0)
    min_err = err.copy()
    use = gt & (err_a < err)
    min_err[use] = err_a[use]
    importance = np.ones_like(err)
    importance[bg] = 2.0 - np.exp(np.log(1.0 - nu) / sigma * dist[bg])
    ew = min_err * importance
    eps = np.finfo(np.float64).eps
    tp_w = gt.sum() - ew[gt].sum()
    fp_w = ew[bg].sum()
    recall = 1.0 - ew[gt].mean()
    precision = tp_w / (eps + tp_w + fp_w)
    return float((1 + beta2) * recall * precision / (eps + recall + beta2 * precision))


@dataclass
class MetricReport:
    mae: float
    mean_f: float
    weighted_f: float
    sweep: PRSweep
    n_images: int
    missing: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mae": self.mae,
            "mean_f": self.mean_f,
            "weighted_f": self.weighted_f,
            "n_images": self.n_images,
            "missing": list(self.missing),
            "sweep": self.sweep.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(
            mae=d["mae"],
            mean_f=d["mean_f"],
            weighted_f=d["weighted_f"],
            sweep=PRSweep.from_dict(d["sweep"]),
            n_images=d["n_images"],
            missing=list(d.get("missing", [])),
        )

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls.from_dict(json.loads(text))

    def summary(self) -> dict[str, float]:
        return {"mae": self.mae, "mean_f": self.mean_f, "weighted_f": self.weighted_f, "n_images": self.n_images}


def _score_pair(pred, gt):
    return mae(pred, gt), weighted_f(pred, gt), threshold_counts(pred, gt)


def evaluate_pairs(preds: Sequence, gts: Sequence, pooling: str = "image", jobs: int = 1) -> MetricReport:
    if not preds:
        raise ValueError("no prediction/ground-truth pairs to evaluate")
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            scores = list(ex.map(_score_pair, preds, gts))
    else:
        scores = [_score_pair(p, g) for p, g in zip(preds, gts)]
    sweep = aggregate_sweep([s[2] for s in scores], pooling)
    return MetricReport(
        mae=float(np.mean([s[0] for s in scores])),
        mean_f=mean_f(sweep),
        weighted_f=float(np.mean([s[1] for s in scores])),
        sweep=sweep,
        n_images=len(scores),
    )


def load_prediction(path, size_hw: tuple[int, int] | None = None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("L")
        if size_hw is not None and im.size != (size_hw[1], size_hw[0]):
            im = im.resize((size_hw[1], size_hw[0]), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0


def load_gt(path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) >= MASK_THRESHOLD).astype(np.uint8)


def _stems(d: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(Path(d).iterdir()) if p.suffix.lower() in IMAGE_EXTS}


def evaluate_dirs(pred_dir, gt_dir, pooling: str = "image", jobs: int = 1) -> MetricReport:
    """Evaluate predictions against ground truths matched by filename stem.

    Predictions are bilinearly resized to the GT size. Unpaired stems are
    skipped and listed in ``report.missing``.
    """
    preds, gts = _stems(pred_dir), _stems(gt_dir)
    missing = sorted(set(preds) ^ set(gts))
    for stem in missing:
        log.warning("no counterpart for %s", stem)
    common = sorted(set(preds) & set(gts))
    gt_maps = [load_gt(gts[s]) for s in common]
    pred_maps = [load_prediction(preds[s], g.shape) for s, g in zip(common, gt_maps)]
    report = evaluate_pairs(pred_maps, gt_maps, pooling=pooling, jobs=jobs)
    report.missing = missing
    return report
