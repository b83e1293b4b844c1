"""Hybrid loss: CE + SSIM on the detail map, CE + IoU + F on the fused map."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

EPS = 1e-6
BETA2 = 0.3
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _check_pair(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    # accept (H, W), (B, H, W) or (B, 1, H, W)
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[:, None]
    return x


def ce_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Pixel-mean binary cross-entropy; ``target`` may be soft."""
    _check_pair(pred, target)
    p = pred.clamp(eps, 1.0 - eps)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()


def ssim_loss(pred: torch.Tensor, target: torch.Tensor, window: int = 11) -> torch.Tensor:
    """``1 - mean SSIM`` over uniform ``window``-sized sliding patches.

    Maps smaller than the window fall back to one global window.
    """
    _check_pair(pred, target)
    x, y = _as_batch(pred), _as_batch(target)
    h, w = x.shape[-2:]
    if h < window or w < window:
        def pool(t):
            return t.mean(dim=(-2, -1), keepdim=True)
    else:
        def pool(t):
            return F.avg_pool2d(t, window, stride=1)
    mu_x, mu_y = pool(x), pool(y)
    var_x = pool(x * x) - mu_x * mu_x
    var_y = pool(y * y) - mu_y * mu_y
    cov = pool(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return 1.0 - (num / den).mean()


def iou_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Soft IoU loss, averaged over the batch. Empty-vs-empty counts as a perfect match."""
    _check_pair(pred, target)
    s, g = _as_batch(pred), _as_batch(target)
    inter = (s * g).sum(dim=(1, 2, 3))
    union = (s + g - s * g).sum(dim=(1, 2, 3))
    empty = union <= 0
    iou = torch.where(empty, torch.ones_like(inter), inter / torch.where(empty, torch.ones_like(union), union))
    return (1.0 - iou).mean()


def f_loss(pred: torch.Tensor, target: torch.Tensor, beta2: float = BETA2, eps: float = EPS) -> torch.Tensor:
    """``1 - F_beta`` with continuous precision and recall, averaged over the batch."""
    _check_pair(pred, target)
    s, g = _as_batch(pred), _as_batch(target)
    tp = (s * g).sum(dim=(1, 2, 3))
    precision = tp / (s.sum(dim=(1, 2, 3)) + eps)
    recall = tp / (g.sum(dim=(1, 2, 3)) + eps)
    f = (1 + beta2) * precision * recall / (beta2 * precision + recall + eps)
    return (1.0 - f).mean()


@dataclass(frozen=True)
class LossFlags:
    """Which terms enter the hybrid loss.

    ``cascade`` is False for the direct-saliency baseline (no detail branch);
    ``body_first`` swaps the first-stage target to the body label.
    """

    cascade: bool = True
    body_first: bool = False
    ssim: bool = True
    iou_f: bool = True
    ssim_window: int = 11


@dataclass
class LossReport:
    l_detail: torch.Tensor
    l_body: torch.Tensor
    l_total: torch.Tensor
    components: dict[str, float] = field(default_factory=dict)

    def as_record(self) -> dict[str, float]:
        rec = {
            "l_detail": self.l_detail.item(),
            "l_body": self.l_body.item(),
            "l_total": self.l_total.item(),
        }
        rec.update(self.components)
        return rec


def hybrid_loss(outputs: dict, gt: torch.Tensor, detail_gt: torch.Tensor, flags: LossFlags = LossFlags()) -> LossReport:
    """Combine the per-branch losses; ``l_total = (l_detail + l_body) / 2``.

    ``outputs`` holds ``"detail"``, ``"body"`` and ``"fused"`` maps (the
    first two may be absent for the direct baseline). With ``body_first``
    the first stage is the body decoder and is supervised by ``gt - detail_gt``.
    """
    fused = outputs["fused"]
    _check_pair(fused, gt)
    zero = fused.new_zeros(())
    components: dict[str, float] = {}

    if flags.cascade:
        if flags.body_first:
            first, first_target = outputs["body"], (gt - detail_gt).clamp(0.0, 1.0)
        else:
            first, first_target = outputs["detail"], detail_gt
        ce_first = ce_loss(first, first_target)
        l_detail = ce_first
        components["ce_detail"] = ce_first.item()
        if flags.ssim:
            s = ssim_loss(first, first_target, flags.ssim_window)
            l_detail = l_detail + s
            components["ssim"] = s.item()
    else:
        l_detail = zero

    ce_b = ce_loss(fused, gt)
    l_body = ce_b
    components["ce_body"] = ce_b.item()
    if flags.iou_f:
        iou = iou_loss(fused, gt)
        fl = f_loss(fused, gt)
        l_body = l_body + iou + fl
        components["iou"] = iou.item()
        components["f"] = fl.item()

    l_total = 0.5 * (l_detail + l_body)
    return LossReport(l_detail=l_detail, l_body=l_body, l_total=l_total, components=components)
