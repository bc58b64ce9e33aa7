"""Post-hoc comparison scores: flip residual, augmentation variance,
inference-time dropout variance and the predicted variance itself."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import augment as A
from .gradunc import UncertaintyMap, normalize, reference
from .model import Model, PredictionBundle, forward, make_dropout
from .tensor import Tensor

DEFAULT_VAR_AUGS = ("hflip", "gray", "rot:5", "noise:0.02:0")
DROPSTAR_N = 8
DROPSTAR_P = 0.2


@dataclass(frozen=True)
class BaselineKind:
    name: str                                   # post | var | dropstar | sigma
    augs: tuple = field(default=DEFAULT_VAR_AUGS)
    n: int = DROPSTAR_N
    p: float = DROPSTAR_P
    seed: int = 0

    def __post_init__(self):
        if self.name not in ("post", "var", "dropstar", "sigma"):
            raise ValueError(f"unknown baseline {self.name!r}")
        if self.name == "var" and not self.augs:
            raise ValueError("var needs at least one augmentation")
        if self.name == "dropstar":
            if self.n < 2:
                raise ValueError(f"dropstar needs n >= 2 samples, got {self.n}")
            if not 0 <= self.p < 1:
                raise ValueError(f"dropstar p must be in [0, 1), got {self.p}")


def parse_baseline(spec: str) -> BaselineKind:
    """``post | var[:aug,aug,...] | dropstar[:n:p:seed] | sigma``"""
    head, _, rest = spec.strip().partition(":")
    if head in ("post", "sigma") and not rest:
        return BaselineKind(head)
    if head == "var":
        augs = tuple(a for a in rest.split(",") if a) if rest else DEFAULT_VAR_AUGS
        for a in augs:
            A.parse(a)
        return BaselineKind("var", augs=augs)
    if head == "dropstar":
        parts = rest.split(":") if rest else []
        if len(parts) > 3:
            raise ValueError(f"bad dropstar spec {spec!r}")
        try:
            n = int(parts[0]) if len(parts) > 0 else DROPSTAR_N
            p = float(parts[1]) if len(parts) > 1 else DROPSTAR_P
            seed = int(parts[2]) if len(parts) > 2 else 0
        except ValueError:
            raise ValueError(f"bad dropstar spec {spec!r}") from None
        return BaselineKind("dropstar", n=n, p=p, seed=seed)
    raise ValueError(f"unknown baseline spec {spec!r}")


def _full(shape):
    return np.ones(shape, dtype=bool)


def post_uncertainty(model: Model, image: Tensor) -> tuple[Tensor, UncertaintyMap]:
    d_hat = forward(model, image).depth
    d_ref, mask = reference(model, image, A.HFLIP)
    r = np.abs(d_hat.data - d_ref.data)[0, 0]
    return d_hat, UncertaintyMap(normalize(r, mask), mask)


def population_variance(stack: np.ndarray) -> np.ndarray:
    """Two-pass variance along axis 0 after sorting, so input order cannot matter."""
    s = np.sort(np.asarray(stack, dtype=np.float64), axis=0)
    mu = s.mean(axis=0)
    return ((s - mu) ** 2).mean(axis=0)


def var_uncertainty(model: Model, image: Tensor, augs=DEFAULT_VAR_AUGS) -> tuple[Tensor, UncertaintyMap]:
    augs = [A.parse(a) if isinstance(a, str) else a for a in augs]
    if not augs:
        raise ValueError("var needs at least one augmentation")
    d_hat = forward(model, image).depth
    preds = [d_hat.data[0, 0]]
    mask = _full(preds[0].shape)
    for aug in augs:
        d_ref, m = reference(model, image, aug)
        preds.append(d_ref.data[0, 0])
        mask &= m
    v = population_variance(np.stack(preds))
    return d_hat, UncertaintyMap(normalize(v, mask), mask)


class Welford:
    def __init__(self, shape):
        self.n = 0
        self.mean = np.zeros(shape)
        self.m2 = np.zeros(shape)

    def push(self, x):
        x = np.asarray(x, dtype=np.float64)
        self.n += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.n
        self.m2 = self.m2 + delta * (x - self.mean)

    @property
    def variance(self):
        return self.m2 / self.n


def dropstar_samples(model: Model, image: Tensor, n: int = DROPSTAR_N, p: float = DROPSTAR_P, seed: int = 0):
    """Depth maps from n dropout forwards; sample j uses seed + j."""
    for j in range(n):
        yield forward(model, image, dropout=make_dropout(p, seed + j)).depth.data[0, 0]


def dropstar_uncertainty(model: Model, image: Tensor, n: int = DROPSTAR_N, p: float = DROPSTAR_P,
                         seed: int = 0) -> tuple[Tensor, UncertaintyMap]:
    if n < 2:
        raise ValueError(f"dropstar needs n >= 2 samples, got {n}")
    d_hat = forward(model, image).depth
    acc = Welford(d_hat.shape[-2:])
    for d in dropstar_samples(model, image, n, p, seed):
        acc.push(d)
    v = np.maximum(acc.variance, 0.0)
    return d_hat, UncertaintyMap(normalize(v), _full(v.shape))


def sigma_uncertainty(bundle: PredictionBundle) -> UncertaintyMap:
    if bundle.sigma_sq is None:
        raise ValueError("sigma baseline needs a predictive model")
    s = bundle.sigma_sq.data[0, 0]
    return UncertaintyMap(normalize(s), _full(s.shape))


def run_baseline(kind: BaselineKind, model: Model, image: Tensor) -> tuple[Tensor, UncertaintyMap]:
    if kind.name == "post":
        return post_uncertainty(model, image)
    if kind.name == "var":
        return var_uncertainty(model, image, kind.augs)
    if kind.name == "dropstar":
        return dropstar_uncertainty(model, image, kind.n, kind.p, kind.seed)
    if not model.config.predictive:
        raise ValueError("sigma baseline needs a predictive model")
    b = forward(model, image)
    return b.depth, sigma_uncertainty(b)
