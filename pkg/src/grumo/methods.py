"""Method spec strings -> (depth, uncertainty) runners.

``ours | ours-feat | ours-multi | post | var[:augs] | dropstar[:n:p:seed] | sigma``
"""
from __future__ import annotations

from dataclasses import dataclass

from . import augment as A
from . import baselines as B
from . import gradunc as G

GRAD_METHODS = ("ours", "ours-feat", "ours-multi")
DEFAULT_COMPARE = ("ours", "ours-feat", "ours-multi", "post", "var", "dropstar")


@dataclass(frozen=True)
class Method:
    spec: str
    grad: G.GradConfig | None = None
    baseline: B.BaselineKind | None = None

    def run(self, model, image):
        if self.grad is not None:
            return G.estimate(model, image, self.grad)
        return B.run_baseline(self.baseline, model, image)

    def describe(self) -> dict:
        if self.grad is not None:
            g = self.grad
            return {"kind": "gradient", "aug": str(g.aug), "layer_mode": g.layer_mode,
                    "layers": list(g.layers), "fusion": g.fusion, "lambda": g.lam,
                    "channel_reduce": g.channel_reduce, "loss": g.loss}
        b = self.baseline
        d = {"kind": b.name}
        if b.name == "var":
            d["augs"] = list(b.augs)
        if b.name == "dropstar":
            d.update(n=b.n, p=b.p, seed=b.seed)
        return d


def resolve(spec: str, aug: str | None = None, layer: int | None = None, layers=None,
            fusion: str | None = None, lam: float | None = None, loss: str | None = None,
            channel_reduce: str | None = None) -> Method:
    spec = spec.strip()
    if spec in GRAD_METHODS:
        over = {"fusion": fusion, "lam": lam, "loss": loss, "channel_reduce": channel_reduce}
        if aug is not None:
            over["aug"] = A.parse(aug)
        if layer is not None and layers:
            raise ValueError("give either --layer or --layers, not both")
        if layer is not None:
            over.update(layer_mode="single", layers=(layer,))
        elif layers:
            over.update(layer_mode="multi", layers=tuple(layers))
        return Method(spec, grad=G.method_config(spec, **over))
    return Method(spec, baseline=B.parse_baseline(spec))


def default_methods(predictive: bool) -> list[str]:
    return list(DEFAULT_COMPARE) + (["sigma"] if predictive else [])
