"""Toy encoder-decoder depth network.

Encoder: a full-resolution stem conv, then ``encoder_stages`` blocks of
2x2 average pooling + 3x3 conv, each doubling the channel count.
Decoder: per stage an in-place conv, nearest 2x upsampling, optional skip
concat and a second conv; then refinement convs up to ``decoder_layers``
tagged layers in total.  A 3x3 head maps the last layer to a bounded
depth ``d_min + sigmoid(.) * (d_max - d_min)``; the predictive variant
adds a second head predicting log-variance clamped to [-10, 10].

Downsampling uses average pooling rather than strided convs: pooling on
even sizes is aligned with the image centre, so the architecture itself
has no preferred horizontal direction.
"""
from __future__ import annotations

import json
import math
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import io
from . import tensor as T
from .rng import SplitMix64, derive_seed
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

LOGVAR_CLAMP = 10.0
# float32 exp of +-10 can land one ulp outside [e^-10, e^10]; these float32
# values both lie inside, so sigma^2 is clipped to them after the exp
SIGMA_SQ_BOUNDS = (float(np.float32(np.exp(-LOGVAR_CLAMP))), float(np.float32(np.exp(LOGVAR_CLAMP))))


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 3
    encoder_stages: int = 3
    base_channels: int = 8
    decoder_layers: int = 9
    skip_connections: bool = True
    predictive: bool = False
    d_min: float = 1.0
    d_max: float = 10.0

    def __post_init__(self):
        if self.decoder_layers < max(5, 2 * self.encoder_stages):
            raise ValueError(f"decoder_layers must be >= max(5, 2*encoder_stages), got {self.decoder_layers}")
        if not (self.d_max > self.d_min > 0):
            raise ValueError(f"need d_max > d_min > 0, got {self.d_min}, {self.d_max}")
        if self.encoder_stages < 1 or self.base_channels < 1:
            raise ValueError("encoder_stages and base_channels must be positive")

    @property
    def divisor(self) -> int:
        return 2 ** self.encoder_stages

    def channels(self, k: int) -> int:
        return self.base_channels * 2 ** k

    def layer_tags(self) -> tuple[str, ...]:
        return tuple(f"dec{i}" for i in range(1, self.decoder_layers + 1))

    def weight_shapes(self) -> dict[str, tuple[int, ...]]:
        """Architecture descriptor: every weight name with its exact shape."""
        shapes: dict[str, tuple[int, ...]] = {}

        def conv(name, cin, cout):
            shapes[f"{name}.weight"] = (cout, cin, 3, 3)
            shapes[f"{name}.bias"] = (cout,)

        conv("enc0", self.input_channels, self.base_channels)
        for k in range(1, self.encoder_stages + 1):
            conv(f"enc{k}", self.channels(k - 1), self.channels(k))
        i = 1
        for k in range(self.encoder_stages, 0, -1):
            conv(f"dec{i}", self.channels(k), self.channels(k - 1))
            cin = self.channels(k - 1) * (2 if self.skip_connections else 1)
            conv(f"dec{i + 1}", cin, self.channels(k - 1))
            i += 2
        while i <= self.decoder_layers:
            conv(f"dec{i}", self.base_channels, self.base_channels)
            i += 1
        conv("head", self.base_channels, 1)
        if self.predictive:
            conv("sigma", self.base_channels, 1)
        return shapes


@dataclass(frozen=True)
class Features:
    """Encoder output: the bottleneck plus the skip tensors, finest first."""
    bottleneck: Tensor
    skips: tuple[Tensor, ...] = ()

    def tensors(self) -> tuple[Tensor, ...]:
        return (self.bottleneck,) + tuple(self.skips)

    def map(self, fn) -> "Features":
        return Features(fn(self.bottleneck), tuple(fn(s) for s in self.skips))


@dataclass(frozen=True)
class Model:
    config: ModelConfig
    weights: dict[str, Tensor]
    fixture_abs_rel: float | None = None
    seed: int = 0
    optimizer: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = self.config.weight_shapes()
        for name, shape in expected.items():
            if name not in self.weights:
                raise ModelFormatError(f"missing weight {name!r}")
            if self.weights[name].shape != shape:
                raise ModelFormatError(f"weight {name!r} has shape {self.weights[name].shape}, expected {shape}")
        extra = set(self.weights) - set(expected)
        if extra:
            raise ModelFormatError(f"unexpected weights {sorted(extra)}")

    @property
    def layer_tags(self) -> tuple[str, ...]:
        return self.config.layer_tags()

    def mirror_symmetric(self) -> "Model":
        """Copy with every kernel averaged with its horizontal mirror.

        Such a model maps left-right symmetric inputs to bitwise symmetric
        outputs.
        """
        w = {}
        for name, t in self.weights.items():
            a = t.data
            w[name] = Tensor(0.5 * (a + a[..., ::-1])) if a.ndim == 4 else t
        return replace(self, weights=w)


@dataclass
class PredictionBundle:
    depth: Tensor                     # 1x1xHxW (n x 1 x H x W for batches)
    sigma_sq: Tensor | None = None
    activations: dict[str, Tensor] = field(default_factory=dict)
    tape: Tape | None = None
    features: Features | None = None
    log_var: Tensor | None = None

    @property
    def traced(self) -> bool:
        return self.tape is not None


def init_weights(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    out = {}
    for i, (name, shape) in enumerate(sorted(config.weight_shapes().items())):
        if name.endswith(".bias"):
            out[name] = Tensor(np.zeros(shape))
            continue
        fan_in = shape[1] * shape[2] * shape[3]
        rng = SplitMix64(derive_seed(seed, i))
        out[name] = Tensor(rng.normal(int(np.prod(shape))).reshape(shape) * np.sqrt(2.0 / fan_in))
    return out


def zero_model(config: ModelConfig) -> Model:
    return Model(config, {k: Tensor(np.zeros(s)) for k, s in config.weight_shapes().items()})


def _conv(p, name, x):
    return T.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], stride=1, pad=1)


def _check_image(config: ModelConfig, image: Tensor):
    if image.data.ndim != 4 or image.shape[1] != config.input_channels:
        raise T.ShapeError(f"image must be (n, {config.input_channels}, h, w), got {image.shape}")
    h, w = image.shape[2:]
    if h % config.divisor or w % config.divisor:
        raise T.ShapeError(f"spatial size {h}x{w} must be divisible by {config.divisor}")


def _encode(p, cfg: ModelConfig, x: Tensor) -> Features:
    feats = [T.elu(_conv(p, "enc0", x))]
    for k in range(1, cfg.encoder_stages + 1):
        feats.append(T.elu(_conv(p, f"enc{k}", T.avg_pool2(feats[-1]))))
    return Features(feats[-1], tuple(feats[:-1]))


def _decode(p, cfg: ModelConfig, feats: Features, tape: Tape | None = None, dropout=None):
    acts: dict[str, Tensor] = {}

    def block(i, x):
        y = T.elu(_conv(p, f"dec{i}", x))
        if tape is not None:
            tape.tag(f"dec{i}", y)
        acts[f"dec{i}"] = y
        if dropout is not None:
            y = dropout(y)
        return y

    x = feats.bottleneck
    i = 1
    for k in range(cfg.encoder_stages, 0, -1):
        x = T.upsample2(block(i, x))
        if cfg.skip_connections:
            x = T.concat([x, feats.skips[k - 1]], axis=1)
        x = block(i + 1, x)
        i += 2
    while i <= cfg.decoder_layers:
        x = block(i, x)
        i += 1

    span = cfg.d_max - cfg.d_min
    depth = T.add_scalar(T.mul_scalar(T.sigmoid(_conv(p, "head", x)), span), cfg.d_min)
    log_var = sigma_sq = None
    if cfg.predictive:
        log_var = T.clamp(_conv(p, "sigma", x), -LOGVAR_CLAMP, LOGVAR_CLAMP)
        sigma_sq = T.clamp(T.exp(log_var), *SIGMA_SQ_BOUNDS)
    return depth, sigma_sq, log_var, acts


def encode(model: Model, image: Tensor) -> Features:
    _check_image(model.config, image)
    return _encode(model.weights, model.config, image)


def _check_features(model: Model, z: Features, like: Features | None = None):
    cfg = model.config
    n = z.bottleneck.shape[0]
    b = z.bottleneck.shape
    if len(b) != 4 or b[1] != cfg.channels(cfg.encoder_stages):
        raise T.ShapeError(f"bottleneck has shape {b}, expected {cfg.channels(cfg.encoder_stages)} channels")
    if cfg.skip_connections:
        if len(z.skips) != cfg.encoder_stages:
            raise T.ShapeError(f"expected {cfg.encoder_stages} skip tensors, got {len(z.skips)}")
        for k, s in enumerate(z.skips):
            want = (n, cfg.channels(k), b[2] * 2 ** (cfg.encoder_stages - k), b[3] * 2 ** (cfg.encoder_stages - k))
            if s.shape != want:
                raise T.ShapeError(f"skip {k} has shape {s.shape}, expected {want}")


def forward_from_features(model: Model, z: Features, trace: bool = False, dropout=None) -> PredictionBundle:
    _check_features(model, z)
    tape = None
    if trace:
        tape = Tape()
        z = z.map(lambda t: tape.leaf(t))
    depth, sigma_sq, log_var, acts = _decode(model.weights, model.config, z, tape, dropout)
    return PredictionBundle(depth, sigma_sq, acts if trace else {}, tape, z, log_var)


def forward(model: Model, image: Tensor, trace: bool = False, dropout=None) -> PredictionBundle:
    """Predict depth; with ``trace`` the decoder runs on a fresh tape with
    all decoder layer outputs tagged."""
    return forward_from_features(model, encode(model, image), trace, dropout)


def make_dropout(p: float, seed: int):
    """Inference-time dropout: Bernoulli(1-p) keep masks scaled by 1/(1-p)."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    rng = SplitMix64(seed)

    def apply(y: Tensor) -> Tensor:
        if p == 0:
            return y
        keep = rng.uniform(y.size).reshape(y.shape) >= p
        return T.mul(y, Tensor(keep / (1 - p), dtype=y.dtype))

    return apply


# --------------------------------------------------------------------------
# fixture training

def _batch(scenes, idx):
    img = Tensor(np.concatenate([scenes[i].image.data for i in idx]))
    gt = Tensor(np.concatenate([scenes[i].depth_gt.data for i in idx]))
    return img, gt


def abs_rel(model: Model, scenes) -> float:
    """Mean over scenes of the per-image absolute relative error."""
    vals = []
    for sc in scenes:
        d = forward(model, sc.image).depth.data.astype(np.float64)
        g = sc.depth_gt.data.astype(np.float64)
        vals.append(np.mean(np.abs(d - g) / g))
    return float(np.mean(vals))


def train_fixture(config: ModelConfig, dataset, epochs: int, seed: int, lr: float = 0.05,
                  batch_size: int = 8, momentum: float = 0.9, clip_norm: float | None = 1.0,
                  test=None) -> Model:
    """SGD-with-momentum training on ground-truth depth.

    Regular models minimise mean squared depth error, predictive models the
    Gaussian negative log-likelihood (variance in m^2).  The squared error is
    divided by the squared depth range so one step size fits any range.
    Batch gradients are rescaled to global norm ``clip_norm`` when larger;
    the likelihood loss needs this while sigma is still small.  The Abs Rel
    achieved on ``test`` (or on the training set) is stored on the model.
    """
    scenes = list(dataset)
    if not scenes:
        raise ValueError("cannot train on an empty dataset")
    params = init_weights(config, seed)
    names = sorted(params)
    velocity = {k: np.zeros_like(params[k].data) for k in names}
    span = config.d_max - config.d_min
    order_rng = SplitMix64(derive_seed(seed, 0xDA7A))

    n_clipped = 0
    for epoch in range(epochs):
        order = np.argsort(order_rng.uniform(len(scenes)), kind="stable")
        total = 0.0
        for start in range(0, len(scenes), batch_size):
            img, gt = _batch(scenes, order[start:start + batch_size])
            tape = Tape()
            leaves = {k: tape.leaf(params[k], requires_grad=True) for k in names}
            feats = _encode(leaves, config, img)
            depth, _, log_var, _ = _decode(leaves, config, feats)
            resid = T.sub(depth, gt)
            if config.predictive:
                # 0.5 * r^2 / sigma^2 + 0.5 * log sigma^2, sigma^2 in m^2
                nll = T.add(T.mul(T.square(resid), T.exp(T.mul_scalar(log_var, -1.0))), log_var)
                loss = T.mul_scalar(T.mean(nll), 0.5)
            else:
                loss = T.mul_scalar(T.mean(T.square(resid)), 1.0 / span ** 2)
            grads = T.backward(tape, loss, wrt=[leaves[k] for k in names])
            total += float(loss.data.reshape(-1)[0])
            if clip_norm is not None:
                norm = float(np.sqrt(math.fsum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
                if norm > clip_norm:
                    grads = [g * np.float32(clip_norm / norm) for g in grads]
                n_clipped += norm > clip_norm
            for k, g in zip(names, grads):
                v = velocity[k]
                v *= momentum
                v += g
                params[k] = Tensor(params[k].data - lr * v)
        log.debug("epoch %d loss %.6f clipped %d", epoch, total, n_clipped)

    model = Model(config, params, seed=seed,
                  optimizer={"kind": "sgd", "lr": lr, "momentum": momentum,
                             "batch_size": batch_size, "epochs": epochs, "clip_norm": clip_norm})
    score = abs_rel(model, test if test is not None else scenes)
    return replace(model, fixture_abs_rel=score)


# --------------------------------------------------------------------------
# persistence

def save_model(model: Model, path) -> Path:
    path = Path(path)
    entries = {}
    for name in sorted(model.weights):
        rel = f"weights/{name}.gt01"
        io.write_gt01(path / rel, model.weights[name])
        entries[name] = {"path": rel, "shape": list(model.weights[name].shape)}
    manifest = {
        "arch": asdict(model.config),
        "layer_tags": list(model.layer_tags),
        "fixture_abs_rel": model.fixture_abs_rel,
        "seed": model.seed,
        "optimizer": model.optimizer,
        "weights": entries,
    }
    io.atomic_write(path / "manifest.json", (json.dumps(manifest, indent=2) + "\n").encode("utf-8"))
    return path


def load_model(path) -> Model:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ModelFormatError(f"no manifest.json in {path}") from None
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"corrupt manifest.json: {e}") from None
    config = ModelConfig(**manifest["arch"])
    if list(manifest["layer_tags"]) != list(config.layer_tags()):
        raise ModelFormatError(f"layer_tags {manifest['layer_tags']} do not match the architecture")
    expected = config.weight_shapes()
    weights = {}
    for name, entry in manifest["weights"].items():
        shape = tuple(entry["shape"])
        if name in expected and shape != expected[name]:
            raise ModelFormatError(f"weight {name!r}: manifest shape {shape} does not match architecture {expected[name]}")
        try:
            arr = io.read_gt01(path / entry["path"])
        except FileNotFoundError:
            raise ModelFormatError(f"weight {name!r}: missing file {entry['path']}") from None
        except io.FormatError as e:
            raise ModelFormatError(f"weight {name!r}: {e}") from None
        if arr.shape != shape:
            raise ModelFormatError(f"weight {name!r}: file shape {arr.shape} does not match manifest {shape}")
        weights[name] = Tensor(arr)
    return Model(config, weights, manifest.get("fixture_abs_rel"), int(manifest.get("seed", 0)),
                 manifest.get("optimizer", {}))
