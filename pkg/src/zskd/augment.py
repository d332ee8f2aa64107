"""Fixed geometric augmentations of impressions: scale, translate, rotate, flips and their composites.

Every op works on one ``H x W x C`` image or a ``B x H x W x C`` stack, keeps
the shape, fills uncovered pixels with zero and clamps to [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .errors import ParameterError
from .impressions import TransferSet

SCALES = (0.90, 0.75, 0.60)
DIRECTIONS = ("left", "right", "up", "down")
ANGLES = tuple(range(-90, 91, 20))
TRANSLATE_FRACTION = 0.20
FLIPS = ("flip_lr", "flip_ud", "transpose")


def shift_pixels(size: int = 32) -> int:
    return int(TRANSLATE_FRACTION * size)


def _bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``img`` at fractional source coordinates; outside the frame reads as 0."""
    h, w = img.shape[-3], img.shape[-2]
    # snap coordinates that are integers up to float noise so 90 degree turns are exact
    ys = np.where(np.abs(ys - np.rint(ys)) < 1e-9, np.rint(ys), ys)
    xs = np.where(np.abs(xs - np.rint(xs)) < 1e-9, np.rint(xs), xs)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]
    out = np.zeros(img.shape, dtype=np.float64)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = img[..., np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1), :]
            out += np.where(inside[..., None], vals, 0.0) * (wy * wx)
    return np.clip(out, 0.0, 1.0)


def _grid(img: np.ndarray):
    h, w = img.shape[-3], img.shape[-2]
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return ys - (h - 1) / 2, xs - (w - 1) / 2, (h - 1) / 2, (w - 1) / 2


def rotate(image: np.ndarray, angle: float) -> np.ndarray:
    """Counter-clockwise rotation (as displayed) about the image centre."""
    if angle not in ANGLES:
        raise ParameterError(f"rotation angle {angle} not in {ANGLES}")
    dy, dx, cy, cx = _grid(image)
    t = np.deg2rad(angle)
    xs = cx + np.cos(t) * dx - np.sin(t) * dy
    ys = cy + np.sin(t) * dx + np.cos(t) * dy
    return _bilinear(image, ys, xs)


def scale(image: np.ndarray, factor: float) -> np.ndarray:
    """Shrink about the centre onto a zero canvas of the original size."""
    if factor not in SCALES:
        raise ParameterError(f"scale factor {factor} not in {SCALES}")
    dy, dx, cy, cx = _grid(image)
    return _bilinear(image, cy + dy / factor, cx + dx / factor)


def translate(image: np.ndarray, direction: str) -> np.ndarray:
    """Shift content by 20% of the width (6 px at 32), zero filling the vacated band."""
    if direction not in DIRECTIONS:
        raise ParameterError(f"translate direction {direction!r} not in {DIRECTIONS}")
    s = shift_pixels(image.shape[-2])
    out = np.zeros(image.shape, dtype=np.float64)
    if direction == "left":
        out[..., :, :-s, :] = image[..., :, s:, :]
    elif direction == "right":
        out[..., :, s:, :] = image[..., :, :-s, :]
    elif direction == "up":
        out[..., :-s, :, :] = image[..., s:, :, :]
    else:
        out[..., s:, :, :] = image[..., :-s, :, :]
    return np.clip(out, 0.0, 1.0)


def flip_lr(image: np.ndarray) -> np.ndarray:
    return image[..., :, ::-1, :].copy()


def flip_ud(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1, :, :].copy()


def transpose(image: np.ndarray) -> np.ndarray:
    return np.swapaxes(image, -3, -2).copy()


_FLIP_FUNCS = {"flip_lr": flip_lr, "flip_ud": flip_ud, "transpose": transpose}


@dataclass(frozen=True)
class AugmentOp:
    """One enumerated augmentation. Composites apply ``steps`` left to right."""

    kind: str
    param: object = None
    steps: tuple = ()

    def __post_init__(self):
        valid = {"scale": SCALES, "translate": DIRECTIONS, "rotate": ANGLES}
        if self.kind in valid:
            if self.param not in valid[self.kind]:
                raise ParameterError(f"{self.kind} parameter {self.param!r} not in {valid[self.kind]}")
        elif self.kind == "composite":
            if len(self.steps) < 2 or any(s.kind == "composite" for s in self.steps):
                raise ParameterError("a composite needs two or more simple steps")
        elif self.kind not in FLIPS:
            raise ParameterError(f"unknown augmentation kind {self.kind!r}")

    def apply(self, image: np.ndarray) -> np.ndarray:
        if self.kind == "scale":
            return scale(image, self.param)
        if self.kind == "translate":
            return translate(image, self.param)
        if self.kind == "rotate":
            return rotate(image, self.param)
        if self.kind in FLIPS:
            return _FLIP_FUNCS[self.kind](image)
        for step in self.steps:
            image = step.apply(image)
        return image

    def label(self) -> str:
        if self.kind == "composite":
            return "+".join(s.label() for s in self.steps)
        return self.kind if self.param is None else f"{self.kind}:{self.param}"


def augmentation_ops() -> list:
    """The 102 ops, in a fixed order: 3 scale, 4 translate, 10 rotate, 3 flips,
    then scale x translate (12), translate x rotate (40), scale x rotate (30)."""
    sc = [AugmentOp("scale", f) for f in SCALES]
    tr = [AugmentOp("translate", d) for d in DIRECTIONS]
    ro = [AugmentOp("rotate", a) for a in ANGLES]
    fl = [AugmentOp(k) for k in FLIPS]
    combos = [AugmentOp("composite", steps=pair)
              for group in (product(sc, tr), product(tr, ro), product(sc, ro)) for pair in group]
    return sc + tr + ro + fl + combos


OPS = augmentation_ops()


class AugmentedView:
    """Lazy ``len(images) * 102`` augmented images; index ``i`` is impression
    ``i // 102`` under op ``i % 102``. Avoids materialising every variant."""

    def __init__(self, images: np.ndarray, ops=None):
        self.images = images
        self.ops = list(OPS if ops is None else ops)

    def __len__(self) -> int:
        return len(self.images) * len(self.ops)

    def __getitem__(self, idx) -> np.ndarray:
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        src, op_ids = np.divmod(idx, len(self.ops))
        out = np.empty((len(idx),) + self.images.shape[1:])
        for o in np.unique(op_ids):
            mask = op_ids == o
            out[mask] = self.ops[o].apply(self.images[src[mask]])
        return out


def augment_all(tset: TransferSet) -> TransferSet:
    """Every impression under all 102 ops, each keeping the source impression's metadata."""
    n, m = len(tset), len(OPS)
    images = np.empty((n * m,) + tset.images.shape[1:])
    for j, op in enumerate(OPS):
        images[j::m] = op.apply(tset.images)
    rep = lambda a: np.repeat(a, m, axis=0)
    prov = dict(tset.provenance, augmented=True, augment_ops=m)
    return TransferSet(images, rep(tset.targets), rep(tset.class_index), rep(tset.beta), rep(tset.final_loss),
                       rep(tset.initial_loss), rep(tset.iterations), rep(tset.seeds), rep(tset.batch), prov)
