"""Procedural scenes with exact ground-truth depth.

A scene is a tilted background plane plus a few axis-aligned rectangles
and disks.  Each pixel takes the nearest surface.  The image is a depth
shading times the shape albedo plus a little texture noise.  The plane has
albedo 1, so its shading pins depth down exactly, while each shape's
random RGB albedo makes its depth ambiguous.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .rng import SplitMix64
from .tensor import Tensor

SEED_STRIDE = 1_000_000
TEXTURE_STD = 0.02


@dataclass(frozen=True)
class Scene:
    image: Tensor      # 1x3xHxW in [0, 1]
    depth_gt: Tensor   # 1x1xHxW metres
    seed: int
    # (plane HxW, [(cover HxW bool, depth), ...]) as drawn; not persisted
    layers: tuple | None = field(default=None, compare=False, repr=False)


@dataclass
class SceneSet:
    scenes: list[Scene]
    split: str = "train"
    d_min: float = 1.0
    d_max: float = 10.0
    size: tuple[int, int] = (64, 64)
    path: Path | None = field(default=None, compare=False)

    def __len__(self):
        return len(self.scenes)

    def __iter__(self):
        return iter(self.scenes)

    @property
    def seeds(self) -> list[int]:
        return [s.seed for s in self.scenes]


def _check_dims(h, w, d_min, d_max, divisor=8):
    if h <= 0 or w <= 0 or h % divisor or w % divisor:
        raise ValueError(f"scene size {h}x{w} must be positive and divisible by {divisor}")
    if not (d_max > d_min > 0):
        raise ValueError(f"need d_max > d_min > 0, got d_min={d_min}, d_max={d_max}")


def gen_scene(seed: int, h: int = 64, w: int = 64, d_min: float = 1.0, d_max: float = 10.0,
              n_shapes: int | None = None) -> Scene:
    _check_dims(h, w, d_min, d_max)
    rng = SplitMix64(seed)
    rngd = d_max - d_min

    v = ((np.arange(h) + 0.5) / h - 0.5)[:, None]
    u = ((np.arange(w) + 0.5) / w - 0.5)[None, :]

    c = rng.uniform(1, d_min + 0.05 * rngd, d_max - 0.05 * rngd)[0]
    half = min(c - d_min, d_max - c)
    a, b, frac = rng.uniform(3)
    a, b = 2 * a - 1, 2 * b - 1
    norm = abs(a) + abs(b) + 1e-12
    span = half * (0.3 + 0.7 * frac)
    gx, gy = span * a / norm, span * b / norm
    depth = c + 2 * (gx * u + gy * v) + np.zeros((h, w))
    albedo = np.ones((3, h, w))   # the plane is unmodulated; shapes carry albedo
    plane, shapes = depth.copy(), []

    k = int(rng.integers(3, 8, 1)[0]) if n_shapes is None else n_shapes
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    for _ in range(k):
        kind, cy, cx, s1, s2, dz = rng.uniform(6)
        col = rng.uniform(3, 0.3, 1.0)
        cy, cx = cy * h, cx * w
        dz = d_min + dz * rngd
        if kind < 0.5:
            hh = h * (1 / 16 + s1 * (1 / 4 - 1 / 16))
            hw = w * (1 / 16 + s2 * (1 / 4 - 1 / 16))
            cover = (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
        else:
            r = min(h, w) * (1 / 16 + s1 * (1 / 5 - 1 / 16))
            cover = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        shapes.append((cover, float(dz)))
        front = cover & (dz < depth)
        depth = np.where(front, dz, depth)
        albedo[:, front] = col[:, None]

    shade = (d_max - depth) / rngd
    image = shade[None] * albedo + TEXTURE_STD * rng.normal(3 * h * w).reshape(3, h, w)
    image = np.clip(image, 0.0, 1.0)
    return Scene(Tensor(image[None]), Tensor(depth[None, None]), int(seed), (plane, tuple(shapes)))


def symmetrize(scene: Scene) -> Scene:
    """Mirror the left half onto the right half (bitwise left-right symmetric)."""
    def mirror(a):
        a = np.array(a)
        w = a.shape[-1]
        a[..., w - w // 2:] = a[..., : w // 2][..., ::-1]
        return a

    return Scene(Tensor(mirror(scene.image.data)), Tensor(mirror(scene.depth_gt.data)), scene.seed)


def scene_seeds(base_seed: int, count: int) -> list[int]:
    return [base_seed * SEED_STRIDE + i for i in range(count)]


def make_sceneset(base_seed: int, count: int, h: int = 64, w: int = 64, d_min: float = 1.0,
                  d_max: float = 10.0, split: str = "train") -> SceneSet:
    _check_dims(h, w, d_min, d_max)
    scenes = [gen_scene(s, h, w, d_min, d_max) for s in scene_seeds(base_seed, count)]
    return SceneSet(scenes, split, d_min, d_max, (h, w))


def write_sceneset(ss: SceneSet, out) -> Path:
    out = Path(out)
    entries = []
    for sc in ss.scenes:
        rel = Path("scenes") / str(sc.seed)
        io.write_gt01(out / rel / "image.gt01", sc.image)
        io.write_gt01(out / rel / "depth.gt01", sc.depth_gt)
        entries.append({"seed": sc.seed, "image": f"{rel.as_posix()}/image.gt01",
                        "depth": f"{rel.as_posix()}/depth.gt01"})
    manifest = {
        "format": "grumo-sceneset/1",
        "split": ss.split,
        "size": list(ss.size),
        "depth_range": [ss.d_min, ss.d_max],
        "seeds": ss.seeds,
        "scenes": entries,
    }
    io.atomic_write(out / "manifest.json", (json.dumps(manifest, indent=2) + "\n").encode("utf-8"))
    ss.path = out
    return out


def read_sceneset(path) -> SceneSet:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FileNotFoundError(f"no manifest.json in {path}") from None
    scenes = []
    for e in manifest["scenes"]:
        img = io.read_gt01(path / e["image"])
        dep = io.read_gt01(path / e["depth"])
        scenes.append(Scene(Tensor(img), Tensor(dep), int(e["seed"])))
    d_min, d_max = manifest["depth_range"]
    return SceneSet(scenes, manifest["split"], float(d_min), float(d_max),
                    tuple(manifest["size"]), path)
