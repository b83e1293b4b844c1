"""Datasets: synthetic shapes corpus, folder loading, augmentation and batching."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw

from .labelgen import decompose_detail

log = logging.getLogger(__name__)

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
SCALES = (0.75, 1.0, 1.25)
MASK_THRESHOLD = 128


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    gt: np.ndarray  # (H, W) uint8 in {0, 1}
    id: str
    _detail: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.image.shape[:2] != self.gt.shape:
            raise ValueError(f"{self.id}: image {self.image.shape[:2]} vs mask {self.gt.shape}")

    @property
    def detail(self) -> np.ndarray:
        if self._detail is None:
            self._detail = decompose_detail(self.gt).astype(np.float32)
        return self._detail


@dataclass(frozen=True)
class SynthSpec:
    n_images: int = 500
    canvas: int = 96
    shapes_per_image: tuple[int, int] = (1, 3)
    kinds: tuple[str, ...] = ("ellipse", "rectangle", "triangle", "blob")
    contrast: tuple[float, float] = (0.25, 0.6)
    noise: float = 0.03
    size_range: tuple[float, float] = (0.12, 0.3)  # shape radius as a fraction of the canvas
    multi_fraction: float = 0.3
    border_fraction: float = 0.2
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        for key in ("shapes_per_image", "kinds", "contrast", "size_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    coarse = rng.random((cells, cells)).astype(np.float32)
    img = Image.fromarray(coarse, mode="F").resize((size, size), Image.BICUBIC)
    out = np.asarray(img, dtype=np.float32)
    return (out - out.min()) / max(float(out.max() - out.min()), 1e-6)


def _shape_polygon(rng: np.random.Generator, kind: str, cx: float, cy: float, r: float):
    if kind == "rectangle":
        aspect = rng.uniform(0.5, 1.0)
        theta = rng.uniform(0, np.pi)
        hw, hh = r, r * aspect
        corners = np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]])
    elif kind == "triangle":
        angles = rng.uniform(0, 2 * np.pi) + np.array([0, 2 * np.pi / 3, 4 * np.pi / 3]) + rng.uniform(-0.3, 0.3, 3)
        return [(cx + r * np.cos(a), cy + r * np.sin(a)) for a in angles]
    elif kind == "blob":
        t = np.linspace(0, 2 * np.pi, 40, endpoint=False)
        radius = np.ones_like(t)
        for k in (2, 3, 4):
            radius += rng.uniform(0, 0.25) * np.cos(k * t + rng.uniform(0, 2 * np.pi))
        radius *= r / radius.max()
        return list(zip(cx + radius * np.cos(t), cy + radius * np.sin(t)))
    else:
        raise ValueError(f"unknown polygon kind {kind!r}")
    c, s = np.cos(theta), np.sin(theta)
    rot = corners @ np.array([[c, s], [-s, c]])
    return [(cx + x, cy + y) for x, y in rot]


def _draw_mask(rng: np.random.Generator, spec: SynthSpec, n_shapes: int, touch_border: bool) -> np.ndarray:
    size = spec.canvas
    img = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(img)
    for j in range(n_shapes):
        kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
        r = rng.uniform(*spec.size_range) * size
        if touch_border and j == 0:
            # centre within half a radius of a random side
            side = int(rng.integers(4))
            along = rng.uniform(r, size - r)
            off = rng.uniform(-0.5 * r, 0.5 * r)
            cx, cy = [(off, along), (size - 1 - off, along), (along, off), (along, size - 1 - off)][side]
        else:
            cx, cy = rng.uniform(r, size - r, 2)
        if kind == "ellipse":
            aspect = rng.uniform(0.5, 1.0)
            draw.ellipse([cx - r, cy - r * aspect, cx + r, cy + r * aspect], fill=1)
        else:
            draw.polygon(_shape_polygon(rng, kind, cx, cy, r), fill=1)
    return np.asarray(img, dtype=np.uint8)


def render_synthetic(spec: SynthSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Render image ``index`` of the corpus as ``(uint8 RGB image, {0,1} mask)``."""
    rng = np.random.default_rng([spec.seed, index])
    size = spec.canvas
    slot = index % 10
    multi = slot < round(10 * spec.multi_fraction)
    border = round(10 * spec.multi_fraction) <= slot < round(10 * (spec.multi_fraction + spec.border_fraction))
    lo, hi = spec.shapes_per_image
    n_shapes = int(rng.integers(max(lo, 2), hi + 1)) if multi and hi >= 2 else lo
    min_area = max(16, int(0.01 * size * size))
    while True:
        mask = _draw_mask(rng, spec, n_shapes, border)
        if mask.sum() >= min_area:
            break

    bg = rng.uniform(0.15, 0.85, 3)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    contrast = rng.uniform(*spec.contrast)
    fg = bg + contrast * direction * np.sqrt(3)
    shift = np.clip(fg, 0, 1) - fg
    fg = fg + shift
    bg = bg + shift  # keep the separation when clipping would shrink it
    bg = np.clip(bg, 0, 1)

    tex_bg = _smooth_noise(rng, size, int(rng.integers(3, 9)))[..., None] - 0.5
    tex_fg = _smooth_noise(rng, size, int(rng.integers(3, 9)))[..., None] - 0.5
    amp = rng.uniform(0.1, 0.3)
    bg_img = bg + amp * tex_bg * rng.uniform(0.5, 1.0, 3)
    fg_img = fg + 0.5 * amp * tex_fg * rng.uniform(0.5, 1.0, 3)
    m = mask[..., None].astype(np.float32)
    img = m * fg_img + (1 - m) * bg_img
    img = img + rng.normal(0, spec.noise, img.shape)
    img = np.clip(img, 0, 1)
    return (img * 255 + 0.5).astype(np.uint8), mask


def generate_synthetic(spec: SynthSpec, root: str | Path) -> Path:
    """Write ``images/``, ``masks/`` and ``spec.json`` under ``root``."""
    root = Path(root)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot write synthetic corpus to {root}: {e}") from e
    for i in range(spec.n_images):
        img, mask = render_synthetic(spec, i)
        Image.fromarray(img, mode="RGB").save(root / "images" / f"{i:05d}.png")
        Image.fromarray(mask * 255, mode="L").save(root / "masks" / f"{i:05d}.png")
    (root / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return root


# -- augmentation ---------------------------------------------------------


def round_to_stride(x: float, stride: int = 32, minimum: int = 64) -> int:
    return max(minimum, int(round(x / stride)) * stride)


@dataclass(frozen=True)
class AugmentParams:
    flip: bool
    crop: tuple[int, int, int, int]  # top, left, height, width
    size: tuple[int, int]


def draw_augment(rng: np.random.Generator, shape: tuple[int, int], base_size: int, scale: float | None = None,
                 flip_p: float = 0.5, min_area: float = 0.8) -> AugmentParams:
    h, w = shape
    flip = bool(rng.random() < flip_p)
    side = math.sqrt(rng.uniform(min_area, 1.0))
    ch, cw = max(1, round(h * side)), max(1, round(w * side))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    if scale is None:
        scale = SCALES[int(rng.integers(len(SCALES)))]
    s = round_to_stride(base_size * scale)
    return AugmentParams(flip=flip, crop=(top, left, ch, cw), size=(s, s))


def resize_image(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if img.shape[:2] == tuple(size):
        return img
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1)[None]
    t = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    return t[0].permute(1, 2, 0).clamp(0, 1).numpy()


def resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if mask.shape == tuple(size):
        return mask
    t = torch.from_numpy(np.ascontiguousarray(mask, dtype=np.float32))[None, None]
    t = F.interpolate(t, size=size, mode="nearest")
    return (t[0, 0].numpy() >= 0.5).astype(np.uint8)


def apply_augment(sample: Sample, params: AugmentParams) -> Sample:
    image, gt = sample.image, sample.gt
    h, w = gt.shape
    top, left, ch, cw = params.crop
    geometric = (top, left, ch, cw) != (0, 0, h, w) or tuple(params.size) != (h, w)
    if params.flip:
        image, gt = image[:, ::-1], gt[:, ::-1]
        left = w - left - cw
    image = image[top:top + ch, left:left + cw]
    gt = gt[top:top + ch, left:left + cw]
    image = np.ascontiguousarray(resize_image(image, params.size))
    gt = np.ascontiguousarray(resize_mask(gt, params.size))
    detail = None
    if not geometric:
        # the distance field is mirror-symmetric, so a pure flip carries over
        detail = np.ascontiguousarray(sample.detail[:, ::-1]) if params.flip else sample.detail
    return Sample(image=image, gt=gt, id=sample.id, _detail=detail)


def augment(sample: Sample, rng: np.random.Generator, base_size: int | None = None, scale: float | None = None) -> Sample:
    """Random flip, crop (80-100% area) and scale jitter; detail labels are recomputed."""
    base = base_size if base_size is not None else sample.gt.shape[0]
    return apply_augment(sample, draw_augment(rng, sample.gt.shape, base, scale))


# -- datasets ------------------------------------------------------------


def load_image(path: Path, size: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def load_mask(path: Path, size: int | tuple[int, int] | None = None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("L")
        if size is not None:
            wh = (size, size) if isinstance(size, int) else (size[1], size[0])
            if im.size != wh:
                im = im.resize(wh, Image.NEAREST)
        return (np.asarray(im) >= MASK_THRESHOLD).astype(np.uint8)


def _index_dir(d: Path) -> dict[str, Path]:
    if not d.is_dir():
        return {}
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_EXTS}


class FolderDataset:
    """Image/mask pairs matched by filename stem, resized to ``base_size``."""

    def __init__(self, image_dir, mask_dir, base_size: int | None = None, cache: bool = True):
        self.base_size = base_size
        images, masks = _index_dir(Path(image_dir)), _index_dir(Path(mask_dir))
        self.unmatched = sorted(set(images) ^ set(masks))
        if self.unmatched:
            log.warning("%d unmatched stems: %s", len(self.unmatched), ", ".join(self.unmatched[:10]))
        self.pairs: list[tuple[str, Path, Path]] = []
        self.skipped = 0
        for stem in sorted(set(images) & set(masks)):
            try:
                for p in (images[stem], masks[stem]):
                    with Image.open(p) as im:
                        im.verify()
            except Exception as e:  # noqa: BLE001 - PIL raises a zoo of types
                self.skipped += 1
                log.warning("skipping corrupt pair %s: %s", stem, e)
                continue
            self.pairs.append((stem, images[stem], masks[stem]))
        if self.skipped:
            log.warning("skipped %d corrupt pairs", self.skipped)
        if not self.pairs:
            raise ValueError(f"no samples in {image_dir} / {mask_dir}")
        self._cache: dict[int, Sample] | None = {} if cache else None

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, i: int) -> Sample:
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        stem, ip, mp = self.pairs[i]
        s = Sample(image=load_image(ip, self.base_size), gt=load_mask(mp, self.base_size), id=stem)
        if self._cache is not None:
            self._cache[i] = s
        return s


def load_folder(image_dir, mask_dir, base_size: int | None = None, cache: bool = True) -> FolderDataset:
    return FolderDataset(image_dir, mask_dir, base_size, cache=cache)


def load_root(root, base_size: int | None = None) -> FolderDataset:
    root = Path(root)
    return load_folder(root / "images", root / "masks", base_size)


@dataclass
class Batch:
    images: torch.Tensor  # (B, 3, H, W)
    gts: torch.Tensor  # (B, 1, H, W)
    details: torch.Tensor  # (B, 1, H, W)
    ids: list[str]
    index: int = 0

    def to(self, dtype=None, device=None) -> "Batch":
        return replace(
            self,
            images=self.images.to(device=device, dtype=dtype),
            gts=self.gts.to(device=device, dtype=dtype),
            details=self.details.to(device=device, dtype=dtype),
        )


def collate(samples: Sequence[Sample], index: int = 0) -> Batch:
    return Batch(
        images=torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).contiguous(),
        gts=torch.from_numpy(np.stack([s.gt for s in samples]).astype(np.float32))[:, None],
        details=torch.from_numpy(np.stack([s.detail for s in samples]).astype(np.float32))[:, None],
        ids=[s.id for s in samples],
        index=index,
    )


def num_batches(n: int, batch_size: int) -> int:
    return (n + batch_size - 1) // batch_size


def iterate_batches(dataset, batch_size: int, seed: int, epoch: int, augment_on: bool = True,
                    base_size: int | None = None, start: int = 0) -> Iterator[Batch]:
    """Deterministic epoch iterator; every draw derives from ``(seed, epoch, ...)``.

    All samples of a batch share one scale so the tensors stay rectangular.
    ``start`` skips already-consumed batches when resuming mid-epoch.
    """
    n = len(dataset)
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for b in range(start, num_batches(n, batch_size)):
        idx = order[b * batch_size:(b + 1) * batch_size]
        samples = [dataset[int(i)] for i in idx]
        if augment_on:
            scale = SCALES[int(np.random.default_rng([seed, epoch, b, 1]).integers(len(SCALES)))]
            samples = [
                augment(s, np.random.default_rng([seed, epoch, int(i), 2]), base_size, scale)
                for s, i in zip(samples, idx)
            ]
        yield collate(samples, index=b)
