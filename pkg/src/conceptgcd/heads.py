"""Trainable pieces of the model, each with a forward pass and an analytic backward pass.

Layout conventions: a linear layer stores ``weight`` as (in_dim, out_dim) so
that ``y = x @ weight + bias``; the cosine classifier stores one weight row
per class. Backward functions return ``(grad_input, grads)`` where ``grads``
maps local parameter names to gradients and is empty for frozen modules.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, ParameterError
from .numerics import (
    RngState,
    l2_normalize_backward,
    l2_normalize_rows,
    relu,
    relu_backward,
)

logger = logging.getLogger(__name__)


@dataclass
class Linear:
    weight: np.ndarray
    bias: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


def init_linear(in_dim: int, out_dim: int, rng: RngState, std: float | None = None) -> Linear:
    """He-normal weights, zero bias."""
    if std is None:
        std = math.sqrt(2.0 / in_dim)
    return Linear(rng.normal((in_dim, out_dim), std), np.zeros(out_dim))


def _check_input(x: np.ndarray, in_dim: int, what: str) -> None:
    if x.ndim != 2 or x.shape[1] != in_dim:
        raise DimensionError(f"{what} expects (B, {in_dim}) input, got {x.shape}")


def _unit_params(units: list[Linear], prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for i, u in enumerate(units):
        out[f"{prefix}{i}.weight"] = u.weight
        out[f"{prefix}{i}.bias"] = u.bias
    return out


# -- encoder ---------------------------------------------------------------


@dataclass
class MlpEncoder:
    """Linear layers with ReLU between them (none after the last one)."""

    layers: list[Linear]
    trainable: bool = True

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def params(self) -> dict[str, np.ndarray]:
        return _unit_params(self.layers, "layers.")

    def copy(self, trainable: bool | None = None) -> "MlpEncoder":
        out = copy.deepcopy(self)
        if trainable is not None:
            out.trainable = trainable
        return out


def make_encoder(input_dim: int, feat_dim: int, rng: RngState, hidden_dim: int | None = None) -> MlpEncoder:
    hidden_dim = hidden_dim or 2 * feat_dim
    return MlpEncoder([init_linear(input_dim, hidden_dim, rng), init_linear(hidden_dim, feat_dim, rng)])


def encoder_forward(enc: MlpEncoder, x: np.ndarray):
    _check_input(x, enc.input_dim, "encoder")
    cache = []
    h = x
    last = len(enc.layers) - 1
    for i, layer in enumerate(enc.layers):
        pre = h @ layer.weight + layer.bias
        cache.append((h, pre))
        h = relu(pre) if i < last else pre
    return h, cache


def encoder_backward(enc: MlpEncoder, cache, grad_out: np.ndarray):
    grads: dict[str, np.ndarray] = {}
    g = grad_out
    last = len(enc.layers) - 1
    for i in range(last, -1, -1):
        h_in, pre = cache[i]
        if i < last:
            g = relu_backward(pre, g)
        if enc.trainable:
            grads[f"layers.{i}.weight"] = h_in.T @ g
            grads[f"layers.{i}.bias"] = g.sum(axis=0)
        g = g @ enc.layers[i].weight.T
    return g, grads


# -- generator layer ---------------------------------------------------------


@dataclass
class GeneratorLayer:
    """Stack of linear+ReLU units. Depth 0 is the identity map."""

    units: list[Linear]
    trainable: bool = True
    identity_dim: int | None = None

    @property
    def depth(self) -> int:
        return len(self.units)

    @property
    def input_dim(self) -> int:
        return self.units[0].in_dim if self.units else self.identity_dim

    @property
    def output_dim(self) -> int:
        return self.units[-1].out_dim if self.units else self.identity_dim

    def params(self) -> dict[str, np.ndarray]:
        return _unit_params(self.units, "units.")


def make_generator(feat_dim: int, out_dim: int, depth: int, rng: RngState) -> GeneratorLayer:
    if depth < 0:
        raise ParameterError(f"generator depth must be >= 0, got {depth}")
    if depth == 0:
        return GeneratorLayer([], identity_dim=feat_dim)
    units = [init_linear(feat_dim, out_dim, rng)]
    units += [init_linear(out_dim, out_dim, rng) for _ in range(depth - 1)]
    return GeneratorLayer(units)


def _units_forward(units: list[Linear], z: np.ndarray):
    cache = []
    h = z
    for u in units:
        pre = h @ u.weight + u.bias
        cache.append((h, pre))
        h = relu(pre)
    return h, cache


def _units_backward(units: list[Linear], cache, grad_out: np.ndarray, trainable: bool, prefix: str):
    grads = {}
    g = grad_out
    for i in range(len(units) - 1, -1, -1):
        h_in, pre = cache[i]
        g = relu_backward(pre, g)
        if trainable:
            grads[f"{prefix}{i}.weight"] = h_in.T @ g
            grads[f"{prefix}{i}.bias"] = g.sum(axis=0)
        g = g @ units[i].weight.T
    return g, grads


def generator_forward(gen: GeneratorLayer, z: np.ndarray):
    _check_input(z, gen.input_dim, "generator layer")
    return _units_forward(gen.units, z)


def generator_backward(gen: GeneratorLayer, cache, grad_out: np.ndarray):
    return _units_backward(gen.units, cache, grad_out, gen.trainable, "units.")


# -- concept score normalization ----------------------------------------------


def csn(u: np.ndarray, m: int, return_flags: bool = False):
    """Rescale the first ``m`` entries of each row to norm sqrt(m) and the rest to sqrt(n - m).

    A sub-vector whose norm is below 1e-12 stays zero; with
    ``return_flags`` a (B, 2) boolean array marks those blocks.
    """
    n = u.shape[1]
    if not 1 <= m < n:
        raise ParameterError(f"CSN split m={m} must satisfy 1 <= m < n={n}")
    head, dh = l2_normalize_rows(u[:, :m])
    tail, dt = l2_normalize_rows(u[:, m:])
    out = np.hstack([math.sqrt(m) * head, math.sqrt(n - m) * tail])
    flags = np.stack([dh, dt], axis=1)
    if flags.any():
        logger.debug("CSN: %d degenerate sub-vectors left at zero", int(flags.sum()))
    return (out, flags) if return_flags else out


def csn_backward(u: np.ndarray, m: int, grad_out: np.ndarray) -> np.ndarray:
    n = u.shape[1]
    return np.hstack(
        [
            math.sqrt(m) * l2_normalize_backward(u[:, :m], grad_out[:, :m]),
            math.sqrt(n - m) * l2_normalize_backward(u[:, m:], grad_out[:, m:]),
        ]
    )


# -- expansion layer -------------------------------------------------------------


@dataclass
class ExpansionLayer:
    """Widened generator: linear (in -> n) + ReLU, then optional CSN at split ``split_m``.

    ``prefix`` holds frozen linear+ReLU units that run before the main
    unit; it is non-empty only when expanding a generator deeper than one.
    """

    weight: np.ndarray
    bias: np.ndarray
    split_m: int
    csn_enabled: bool = True
    prefix: list[Linear] = field(default_factory=list)
    trainable: bool = True

    def __post_init__(self):
        n = self.weight.shape[1]
        if not 1 <= self.split_m < n:
            raise ParameterError(f"expansion layer needs n > m >= 1, got n={n}, m={self.split_m}")

    @property
    def input_dim(self) -> int:
        return self.prefix[0].in_dim if self.prefix else self.weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.weight.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def frozen_params(self) -> dict[str, np.ndarray]:
        return _unit_params(self.prefix, "prefix.")


def expansion_from_generator(
    gen: GeneratorLayer, n: int, init_scale: float, rng: RngState, csn_enabled: bool = True
) -> ExpansionLayer:
    """Build an n-wide expansion layer whose first m units are copies of ``gen``'s last unit.

    For a generator deeper than one, the earlier units become the frozen
    ``prefix``.
    """
    if gen.depth < 1:
        raise ParameterError("cannot expand a depth-0 generator")
    last = gen.units[-1]
    m = last.out_dim
    if n <= m:
        raise ParameterError(f"expansion width n={n} must exceed m={m}")
    new_w = rng.normal((last.in_dim, n - m), init_scale)
    new_b = rng.normal((n - m,), init_scale)
    weight = np.hstack([last.weight, new_w])
    bias = np.concatenate([last.bias, new_b])
    prefix = copy.deepcopy(gen.units[:-1])
    return ExpansionLayer(weight, bias, m, csn_enabled, prefix)


def expansion_forward(el: ExpansionLayer, z: np.ndarray):
    """Returns ``(features, cache)``; ``cache["u"]`` is the pre-CSN activation."""
    _check_input(z, el.input_dim, "expansion layer")
    h, prefix_cache = _units_forward(el.prefix, z)
    pre = h @ el.weight + el.bias
    u = relu(pre)
    out = csn(u, el.split_m) if el.csn_enabled else u
    return out, {"prefix": prefix_cache, "h": h, "pre": pre, "u": u}


def expansion_backward(el: ExpansionLayer, cache, grad_out: np.ndarray):
    g = csn_backward(cache["u"], el.split_m, grad_out) if el.csn_enabled else grad_out
    g = relu_backward(cache["pre"], g)
    grads = {}
    if el.trainable:
        grads["weight"] = cache["h"].T @ g
        grads["bias"] = g.sum(axis=0)
    g = g @ el.weight.T
    g, _ = _units_backward(el.prefix, cache["prefix"], g, False, "prefix.")
    return g, grads


# -- cosine classifier --------------------------------------------------------


@dataclass
class CosineClassifier:
    weight: np.ndarray  # (n_classes, feat_dim)
    trainable: bool = True

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.weight.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight}


def make_classifier(n_classes: int, feat_dim: int, rng: RngState) -> CosineClassifier:
    w, _ = l2_normalize_rows(rng.normal((n_classes, feat_dim)))
    return CosineClassifier(w)


def classify_forward(cls: CosineClassifier, feat: np.ndarray, tau: float = 1.0):
    if not tau > 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    _check_input(feat, cls.feat_dim, "classifier")
    fn, degenerate = l2_normalize_rows(feat)
    wn, _ = l2_normalize_rows(cls.weight)
    if degenerate.any():
        logger.debug("classifier: %d degenerate feature rows get zero logits", int(degenerate.sum()))
    logits = fn @ wn.T / tau
    return logits, (feat, fn, wn, tau)


def classify(cls: CosineClassifier, feat: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Cosine similarity between each feature row and each class row, divided by ``tau``."""
    return classify_forward(cls, feat, tau)[0]


def classify_backward(cls: CosineClassifier, cache, grad_logits: np.ndarray):
    feat, fn, wn, tau = cache
    grad_feat = l2_normalize_backward(feat, grad_logits @ wn / tau)
    grads = {}
    if cls.trainable:
        grads["weight"] = l2_normalize_backward(cls.weight, grad_logits.T @ fn / tau)
    return grad_feat, grads


# -- whole model ---------------------------------------------------------------


@dataclass
class GcdModel:
    """Encoder, feature head (generator or expansion layer) and classifier of one stage."""

    stage: int
    encoder: MlpEncoder
    head: GeneratorLayer | ExpansionLayer
    classifier: CosineClassifier
    n_known: int
    n_novel: int

    def encode(self, x: np.ndarray) -> np.ndarray:
        return encoder_forward(self.encoder, x)[0]

    def features(self, x: np.ndarray) -> np.ndarray:
        z = self.encode(x)
        if isinstance(self.head, ExpansionLayer):
            return expansion_forward(self.head, z)[0]
        return generator_forward(self.head, z)[0]

    def raw_features(self, x: np.ndarray) -> np.ndarray:
        """Head output before CSN (identical to ``features`` when CSN is off)."""
        z = self.encode(x)
        if isinstance(self.head, ExpansionLayer):
            return expansion_forward(self.head, z)[1]["u"]
        return generator_forward(self.head, z)[0]

    def logits(self, x: np.ndarray) -> np.ndarray:
        return classify(self.classifier, self.features(x))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def to_tensors(self) -> dict[str, np.ndarray]:
        t: dict[str, np.ndarray] = {
            "meta.stage": np.float64(self.stage),
            "meta.n_known": np.float64(self.n_known),
            "meta.n_novel": np.float64(self.n_novel),
        }
        for k, v in self.encoder.params().items():
            t[f"encoder.{k}"] = v
        if isinstance(self.head, ExpansionLayer):
            el = self.head
            t["meta.head_kind"] = np.float64(2)
            t["meta.split_m"] = np.float64(el.split_m)
            t["meta.csn"] = np.float64(el.csn_enabled)
            t["meta.prefix_depth"] = np.float64(len(el.prefix))
            for k, v in el.frozen_params().items():
                t[f"expansion.{k}"] = v
            for k, v in el.params().items():
                t[f"expansion.{k}"] = v
        else:
            t["meta.head_kind"] = np.float64(1)
            t["meta.gl_depth"] = np.float64(self.head.depth)
            t["meta.feat_dim"] = np.float64(self.encoder.output_dim)
            for k, v in self.head.params().items():
                t[f"generator.{k}"] = v
        t["classifier.weight"] = self.classifier.weight
        return t

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray]) -> "GcdModel":
        try:
            stage = int(t["meta.stage"])
            n_enc = sum(1 for k in t if k.startswith("encoder.layers.") and k.endswith(".weight"))
            layers = [
                Linear(t[f"encoder.layers.{i}.weight"].copy(), t[f"encoder.layers.{i}.bias"].copy())
                for i in range(n_enc)
            ]
            encoder = MlpEncoder(layers)
            if int(t["meta.head_kind"]) == 2:
                prefix = [
                    Linear(t[f"expansion.prefix.{i}.weight"].copy(), t[f"expansion.prefix.{i}.bias"].copy())
                    for i in range(int(t["meta.prefix_depth"]))
                ]
                head = ExpansionLayer(
                    t["expansion.weight"].copy(),
                    t["expansion.bias"].copy(),
                    int(t["meta.split_m"]),
                    bool(t["meta.csn"]),
                    prefix,
                )
            else:
                units = [
                    Linear(t[f"generator.units.{i}.weight"].copy(), t[f"generator.units.{i}.bias"].copy())
                    for i in range(int(t["meta.gl_depth"]))
                ]
                head = GeneratorLayer(units, identity_dim=int(t["meta.feat_dim"]))
            classifier = CosineClassifier(t["classifier.weight"].copy())
            return cls(stage, encoder, head, classifier, int(t["meta.n_known"]), int(t["meta.n_novel"]))
        except KeyError as exc:
            raise ConfigError(f"checkpoint is missing tensor {exc.args[0]!r}") from None
