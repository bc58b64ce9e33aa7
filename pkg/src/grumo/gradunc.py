"""Post-hoc pixel-wise uncertainty from decoder-layer gradients.

Pipeline per image: predict depth, build a reference depth from an
augmented input (or augmented encoder features), form the squared
inconsistency loss, back-propagate it to decoder layer outputs, and turn
each gradient map into a normalized score map.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import augment as A
from . import tensor as T
from .model import Model, PredictionBundle, encode, forward, forward_from_features
from .tensor import Tensor

FUSIONS = ("max", "mean", "var")
REDUCTIONS = ("abs_max", "max")
LOSSES = ("auto", "aux", "predictive")
DEFAULT_LAYER = 6
DEFAULT_MULTI = (5, 6, 7, 8)
DEFAULT_LAMBDA = 2.0


@dataclass(frozen=True)
class GradConfig:
    aug: A.Augmentation = A.HFLIP
    layer_mode: str = "single"          # single | multi
    layers: tuple[int, ...] = (DEFAULT_LAYER,)
    fusion: str = "max"
    lam: float = DEFAULT_LAMBDA
    channel_reduce: str = "abs_max"
    loss: str = "auto"                  # auto picks predictive for predictive models

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(int(i) for i in self.layers))
        if self.layer_mode not in ("single", "multi"):
            raise ValueError(f"layer_mode must be 'single' or 'multi', got {self.layer_mode!r}")
        if not self.layers:
            raise ValueError("layer set must be non-empty")
        if self.layer_mode == "single" and len(self.layers) != 1:
            raise ValueError(f"single mode takes one layer, got {self.layers}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.channel_reduce not in REDUCTIONS:
            raise ValueError(f"channel_reduce must be one of {REDUCTIONS}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")

    def check(self, n_layers: int):
        bad = [i for i in self.layers if not 1 <= i <= n_layers]
        if bad:
            raise ValueError(f"layer index {bad[0]} out of range: the model has L={n_layers} decoder layers")


def method_config(name: str, **overrides) -> GradConfig:
    """Presets: ``ours`` (image flip, one layer), ``ours-feat`` (feature flip),
    ``ours-multi`` (image flip, layers 5-8 fused by max)."""
    base = {
        "ours": GradConfig(),
        "ours-feat": GradConfig(aug=A.FEAT_HFLIP),
        "ours-multi": GradConfig(layer_mode="multi", layers=DEFAULT_MULTI),
    }
    if name not in base:
        raise ValueError(f"unknown method {name!r}")
    cfg = base[name]
    if overrides:
        fields = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
        fields.update({k: v for k, v in overrides.items() if v is not None})
        cfg = GradConfig(**fields)
    return cfg


@dataclass(frozen=True)
class UncertaintyMap:
    values: np.ndarray   # HxW float64 in [0, 1]; 0 where mask is False
    mask: np.ndarray     # HxW bool

    @property
    def shape(self):
        return self.values.shape


# --------------------------------------------------------------------------
# reference depth

def reference_depth(model: Model, image: Tensor, aug: A.Augmentation):
    if aug.space != "image":
        raise ValueError(f"{aug} is a feature-space augmentation; use reference_depth_feature")
    d_aug = forward(model, A.apply(aug, image)).depth
    return A.invert(aug, d_aug)


def reference_depth_feature(model: Model, image: Tensor, aug: A.Augmentation):
    if aug.space != "feature":
        raise ValueError(f"{aug} is an image-space augmentation; use reference_depth")
    z = A.apply_features(aug, encode(model, image))
    return A.invert(aug, forward_from_features(model, z).depth)


def reference(model: Model, image: Tensor, aug: A.Augmentation):
    if aug.space == "image":
        return reference_depth(model, image, aug)
    return reference_depth_feature(model, image, aug)


# --------------------------------------------------------------------------
# losses

def _mask_tensor(mask, like: Tensor) -> Tensor:
    m = np.broadcast_to(np.asarray(mask, dtype=bool), like.shape[-2:])
    return Tensor(np.broadcast_to(m, like.shape).astype(like.dtype))


def aux_loss(d_hat: Tensor, d_ref: Tensor, mask) -> Tensor:
    """Per-pixel (d_hat - d_ref)^2, zeroed where the mask is False."""
    if d_hat.shape != d_ref.shape:
        raise T.ShapeError(f"aux_loss shape mismatch: prediction {d_hat.shape} vs reference {d_ref.shape}")
    sq = T.square(T.sub(d_hat, d_ref.detach()))
    return T.mul(sq, _mask_tensor(mask, sq))


def aux_loss_predictive(d_hat: Tensor, d_ref: Tensor, sigma_sq: Tensor | None, lam: float, mask) -> Tensor:
    """aux_loss + lam * sigma^2 on valid pixels."""
    if sigma_sq is None:
        raise ValueError("predictive loss needs a sigma^2 map; the model is not predictive")
    if sigma_sq.shape != d_hat.shape:
        raise T.ShapeError(f"sigma^2 shape {sigma_sq.shape} != depth shape {d_hat.shape}")
    var = T.mul(T.mul_scalar(sigma_sq, lam), _mask_tensor(mask, sigma_sq))
    return T.add(aux_loss(d_hat, d_ref, mask), var)


# --------------------------------------------------------------------------
# gradients -> scores

def extract_gradients(bundle: PredictionBundle, loss: Tensor, tags) -> dict[str, np.ndarray]:
    """d(loss)/d(activation) for each requested decoder tag."""
    if not bundle.traced:
        raise ValueError("bundle was not traced; call forward(..., trace=True)")
    tape = bundle.tape
    tags = list(tags)
    missing = [t for t in tags if t not in tape.tags]
    if missing:
        raise KeyError(f"tags {missing} were not recorded; have {sorted(tape.tags)}")
    if loss.size != 1:
        loss = T.sum(loss)
    T.backward(tape, loss)
    out = {}
    for t in tags:
        node = tape.tags[t]
        g = tape.grads.get(node)
        out[t] = np.zeros_like(tape.values[node]) if g is None else g
    return out


def normalize(t, mask=None) -> np.ndarray:
    """Min-max scale to [0, 1] over mask-true entries; constant input gives zeros."""
    a = np.asarray(t, dtype=np.float64)
    m = np.ones(a.shape, dtype=bool) if mask is None else np.broadcast_to(mask, a.shape)
    out = np.zeros_like(a)
    if not m.any():
        return out
    lo, hi = a[m].min(), a[m].max()
    if not hi > lo:
        return out
    out[m] = (a[m] - lo) / (hi - lo)
    return out


def bilinear_resize(a: np.ndarray, out_hw) -> np.ndarray:
    """Resize an (..., h, w) array with half-pixel centres and edge clamping."""
    a = np.asarray(a, dtype=np.float64)
    h, w = a.shape[-2:]
    oh, ow = out_hw

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = axis(h, oh)
    x0, x1, fx = axis(w, ow)
    fy, fx = fy[:, None], fx[None, :]
    top = a[..., y0, :][..., x0] * (1 - fx) + a[..., y0, :][..., x1] * fx
    bot = a[..., y1, :][..., x0] * (1 - fx) + a[..., y1, :][..., x1] * fx
    return top * (1 - fy) + bot * fy


def channel_reduce(g, mode: str = "abs_max") -> np.ndarray:
    g = np.asarray(g.data if isinstance(g, Tensor) else g)
    if g.ndim != 4 or g.shape[0] != 1:
        raise T.ShapeError(f"gradient map must be 1xCxHxW, got {g.shape}")
    if mode == "abs_max":
        return np.abs(g[0]).max(axis=0)
    if mode == "max":
        return g[0].max(axis=0)
    raise ValueError(f"unknown channel reduction {mode!r}")


def layer_uncertainty(g, out_hw, mask=None, reduce: str = "abs_max") -> UncertaintyMap:
    r = channel_reduce(g, reduce)
    up = bilinear_resize(r, out_hw)
    mask = np.ones(tuple(out_hw), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return UncertaintyMap(normalize(up, mask), mask)


def fuse_multi(maps, fusion: str = "max") -> UncertaintyMap:
    maps = list(maps)
    if not maps:
        raise ValueError("fuse_multi needs at least one map")
    shapes = {m.values.shape for m in maps}
    if len(shapes) != 1:
        raise T.ShapeError(f"maps differ in shape: {sorted(shapes)}")
    stack = np.stack([m.values for m in maps])
    mask = np.logical_and.reduce([m.mask for m in maps])
    if fusion == "max":
        v = stack.max(axis=0)
    elif fusion == "mean":
        v = stack.mean(axis=0)
    elif fusion == "var":
        v = normalize(stack.var(axis=0), mask)
    else:
        raise ValueError(f"unknown fusion {fusion!r}")
    return UncertaintyMap(np.where(mask, v, 0.0), mask)


# --------------------------------------------------------------------------

def loss_map(model: Model, bundle: PredictionBundle, d_ref: Tensor, mask, cfg: GradConfig) -> Tensor:
    kind = cfg.loss
    if kind == "auto":
        kind = "predictive" if model.config.predictive else "aux"
    if kind == "predictive":
        return aux_loss_predictive(bundle.depth, d_ref, bundle.sigma_sq, cfg.lam, mask)
    return aux_loss(bundle.depth, d_ref, mask)


def estimate(model: Model, image: Tensor, cfg: GradConfig | None = None, return_layers: bool = False):
    """Return (depth, UncertaintyMap); optionally also the per-layer maps."""
    cfg = cfg or GradConfig()
    cfg.check(model.config.decoder_layers)
    if image.shape[0] != 1:
        raise T.ShapeError(f"estimate works on one image at a time, got batch {image.shape[0]}")
    bundle = forward(model, image, trace=True)
    d_ref, mask = reference(model, image, cfg.aug)
    loss = T.sum(loss_map(model, bundle, d_ref, mask, cfg))
    tags = [model.layer_tags[i - 1] for i in cfg.layers]
    grads = extract_gradients(bundle, loss, tags)
    hw = image.shape[-2:]
    layers = [layer_uncertainty(grads[t], hw, mask, cfg.channel_reduce) for t in tags]
    u = layers[0] if cfg.layer_mode == "single" else fuse_multi(layers, cfg.fusion)
    depth = bundle.depth.detach()
    if return_layers:
        return depth, u, layers
    return depth, u
