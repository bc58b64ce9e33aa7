"""Augmentations used to build a reference depth, with their inverses.

Image-space kinds: ``hflip``, ``gray``, ``noise``, ``rot``.
Feature-space kinds: ``feat-hflip``, ``feat-noise``.

Geometric kinds (flips, rotation) are inverted on the predicted depth;
photometric kinds leave the depth frame untouched.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import SplitMix64, derive_seed
from .tensor import Tensor

KINDS = ("hflip", "gray", "noise", "rot", "feat-hflip", "feat-noise")
DEFAULT_NOISE_STD = 0.02
DEFAULT_FEAT_NOISE_STD = 0.1   # relative to each feature tensor's std
_SNAP = 1e-6


@dataclass(frozen=True)
class Augmentation:
    kind: str
    std: float = 0.0
    seed: int = 0
    angle_deg: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown augmentation {self.kind!r}; expected one of {KINDS}")
        if self.std < 0:
            raise ValueError("noise std must be non-negative")

    @property
    def space(self) -> str:
        return "feature" if self.kind.startswith("feat-") else "image"

    @property
    def geometric(self) -> bool:
        return self.kind in ("hflip", "rot", "feat-hflip")

    def __str__(self):
        if self.kind in ("noise", "feat-noise"):
            return f"{self.kind}:{self.std:g}:{self.seed}"
        if self.kind == "rot":
            return f"rot:{self.angle_deg:g}"
        return self.kind


HFLIP = Augmentation("hflip")
FEAT_HFLIP = Augmentation("feat-hflip")


def hflip_aug() -> Augmentation:
    return HFLIP


def noise(std: float = DEFAULT_NOISE_STD, seed: int = 0) -> Augmentation:
    return Augmentation("noise", std=std, seed=seed)


def feat_noise(std: float = DEFAULT_FEAT_NOISE_STD, seed: int = 0) -> Augmentation:
    return Augmentation("feat-noise", std=std, seed=seed)


def rotate(angle_deg: float) -> Augmentation:
    return Augmentation("rot", angle_deg=angle_deg)


def parse(spec: str) -> Augmentation:
    """Parse ``hflip | gray | noise:<std>:<seed> | rot:<deg> | feat-hflip | feat-noise:<std>:<seed>``."""
    parts = spec.strip().split(":")
    kind, args = parts[0], parts[1:]
    try:
        if kind in ("hflip", "gray", "feat-hflip") and not args:
            return Augmentation(kind)
        if kind in ("noise", "feat-noise") and len(args) <= 2:
            default = DEFAULT_NOISE_STD if kind == "noise" else DEFAULT_FEAT_NOISE_STD
            std = float(args[0]) if args else default
            seed = int(args[1]) if len(args) > 1 else 0
            return Augmentation(kind, std=std, seed=seed)
        if kind == "rot" and len(args) == 1:
            return Augmentation("rot", angle_deg=float(args[0]))
    except ValueError as e:
        raise ValueError(f"bad augmentation spec {spec!r}: {e}") from None
    raise ValueError(f"bad augmentation spec {spec!r}")


# --------------------------------------------------------------------------
# rotation

def _rotation_grid(h: int, w: int, angle_deg: float):
    """Source sampling positions (index space) for a rotation about the centre."""
    th = np.deg2rad(angle_deg)
    c, s = np.cos(th), np.sin(th)
    dy = (np.arange(h) + 0.5 - h / 2)[:, None]
    dx = (np.arange(w) + 0.5 - w / 2)[None, :]
    x = w / 2 + c * dx - s * dy
    y = h / 2 + s * dx + c * dy
    u, v = x - 0.5, y - 0.5
    # values within _SNAP of a pixel centre are exact hits (e.g. 90 degrees)
    u = np.where(np.abs(u - np.round(u)) < _SNAP, np.round(u), u)
    v = np.where(np.abs(v - np.round(v)) < _SNAP, np.round(v), v)
    return u, v


def bilinear_sample(img: np.ndarray, u: np.ndarray, v: np.ndarray, valid_src: np.ndarray | None = None):
    """Sample a (..., H, W) array at index-space points; out-of-frame reads 0.

    Returns the samples and a mask that is False wherever a neighbour with
    non-zero weight lies outside the frame or is invalid in ``valid_src``.
    """
    h, w = img.shape[-2:]
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    fx, fy = u - x0, v - y0
    out = np.zeros(img.shape[:-2] + u.shape, dtype=np.float64)
    valid = np.ones(u.shape, dtype=bool)
    for oy, wy in ((0, 1 - fy), (1, fy)):
        for ox, wx in ((0, 1 - fx), (1, fx)):
            wt = wy * wx
            yy, xx = y0 + oy, x0 + ox
            inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            yc, xc = np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)
            ok = inside if valid_src is None else inside & valid_src[yc, xc]
            valid &= (wt <= 0) | ok
            out += wt * np.where(inside, img[..., yc, xc], 0.0)
    return out, valid


def _rotate_array(a: np.ndarray, angle_deg: float, valid_src=None):
    u, v = _rotation_grid(a.shape[-2], a.shape[-1], angle_deg)
    return bilinear_sample(a.astype(np.float64), u, v, valid_src)


def rotation_mask(h: int, w: int, angle_deg: float) -> np.ndarray:
    """Validity of a map rotated by ``angle_deg`` and rotated back."""
    _, fwd = _rotate_array(np.zeros((h, w)), angle_deg)
    _, back = _rotate_array(np.zeros((h, w)), -angle_deg, fwd)
    return back


# --------------------------------------------------------------------------

def _noise_like(a: np.ndarray, std: float, seed: int) -> np.ndarray:
    if std == 0:
        return a
    return a + (std * SplitMix64(seed).normal(a.size)).reshape(a.shape).astype(a.dtype)


def apply(aug: Augmentation, t: Tensor, index: int = 0) -> Tensor:
    """Transform one (n, c, h, w) tensor.

    ``index`` decorrelates noise when one augmentation is applied to several
    feature tensors.
    """
    a = t.data
    k = aug.kind
    if k in ("hflip", "feat-hflip"):
        return Tensor(a[..., ::-1])
    if k == "gray":
        if a.ndim != 4 or a.shape[1] != 3:
            raise ValueError(f"gray needs a 3-channel image, got shape {a.shape}")
        luma = 0.299 * a[:, 0] + 0.587 * a[:, 1] + 0.114 * a[:, 2]
        return Tensor(np.repeat(luma[:, None], 3, axis=1))
    if k == "noise":
        if a.ndim == 4 and a.shape[1] not in (1, 3):
            raise ValueError(f"image noise expects 1 or 3 channels, got shape {a.shape}")
        return Tensor(_noise_like(a, aug.std, derive_seed(aug.seed, index) if index else aug.seed))
    if k == "feat-noise":
        std = aug.std * float(np.std(a, dtype=np.float64))
        return Tensor(_noise_like(a, std, derive_seed(aug.seed, index)))
    if k == "rot":
        out, _ = _rotate_array(a, aug.angle_deg)
        return Tensor(out)
    raise AssertionError(k)


def apply_features(aug: Augmentation, feats):
    """Apply a feature-space augmentation to the bottleneck and every skip."""
    if aug.space != "feature":
        raise ValueError(f"{aug} is not a feature-space augmentation")
    tensors = feats.tensors()
    out = [apply(aug, t, index=i) for i, t in enumerate(tensors)]
    return type(feats)(out[0], tuple(out[1:]))


def apply_to_depth(aug: Augmentation, d: Tensor) -> Tensor:
    """Move a depth map into the augmented frame (photometric kinds: identity)."""
    if aug.kind in ("hflip", "feat-hflip", "rot"):
        return apply(aug, d)
    return d


def invert(aug: Augmentation, d: Tensor) -> tuple[Tensor, np.ndarray]:
    """Map a depth predicted in the augmented frame back; returns (depth, HxW mask)."""
    a = d.data
    h, w = a.shape[-2:]
    if aug.kind in ("hflip", "feat-hflip"):
        return Tensor(a[..., ::-1]), np.ones((h, w), dtype=bool)
    if aug.kind == "rot":
        _, fwd = _rotate_array(np.zeros((h, w)), aug.angle_deg)
        out, mask = _rotate_array(a, -aug.angle_deg, fwd)
        return Tensor(np.where(mask, out, 0.0)), mask
    return d, np.ones((h, w), dtype=bool)
