"""Central-difference checks of every analytic gradient on small seeded instances.

Shapes: 8 samples, encoder width l=6, generator width m=12, expansion
width n=20, 5 classes.
"""

from __future__ import annotations

import numpy as np

from . import heads as H
from .losses import (
    ContrastiveBatch,
    ViewPair,
    contrastive_transfer_loss,
    covariance_loss,
    self_label_loss,
    supervised_ce,
)
from .numerics import RngState, finite_diff_check, softmax_rows

B, D_IN, L, M, N, K = 8, 4, 6, 12, 20, 5
TOLERANCE = 1e-4


def _positive(rng: RngState, shape) -> np.ndarray:
    # keeps ReLU/normalization inputs away from kinks
    return np.abs(rng.normal(shape)) + 0.1


def check_supervised_ce(rng: RngState) -> float:
    logits = rng.normal((B, K))
    labels = np.arange(B) % K

    def fn(p):
        loss, g = supervised_ce(p[0], labels, 0.1)
        return loss, [g]

    return finite_diff_check(fn, [logits])


def check_covariance(rng: RngState) -> float:
    def fn(p):
        loss, g = covariance_loss(p[0])
        return loss, [g]

    return finite_diff_check(fn, [rng.normal((B, L))])


def check_self_label(rng: RngState, entropy_sign: float = -1.0) -> float:
    y1, y2 = rng.normal((B, K)), rng.normal((B, K))
    tau_prime = 0.05
    q1, q2 = softmax_rows(y1, tau_prime), softmax_rows(y2, tau_prime)

    def fn(p):
        loss, g1, g2 = self_label_loss(ViewPair(p[0], p[1], 0.1, tau_prime), 1.0, entropy_sign, targets=(q1, q2))
        return loss, [g1, g2]

    return finite_diff_check(fn, [y1, y2])


def check_contrastive(rng: RngState) -> float:
    v = rng.normal((B, M))
    negs = rng.normal((10, M))
    exclude = np.zeros((B, 10), dtype=bool)
    exclude[0, 3] = True

    def fn(p):
        loss, g = contrastive_transfer_loss(ContrastiveBatch(p[0], v, negs, 0.1, exclude))
        return loss, [g]

    return finite_diff_check(fn, [rng.normal((B, M))])


def check_csn_classifier(rng: RngState) -> float:
    """CSN -> cosine classifier -> cross-entropy, w.r.t. the pre-CSN features and class weights."""
    labels = np.arange(B) % K

    def fn(p):
        u, w = p
        feat = H.csn(u, M)
        cls = H.CosineClassifier(w)
        logits, cache = H.classify_forward(cls, feat)
        loss, g = supervised_ce(logits, labels, 0.1)
        gfeat, gw = H.classify_backward(cls, cache, g)
        return loss, [H.csn_backward(u, M, gfeat), gw["weight"]]

    return finite_diff_check(fn, [_positive(rng, (B, N)), rng.normal((K, N))])


def check_full_stack(rng: RngState, csn: bool = True) -> float:
    """Encoder -> expansion layer (with CSN) -> classifier -> cross-entropy."""
    x = rng.normal((B, D_IN))
    labels = np.arange(B) % K
    enc = H.make_encoder(D_IN, L, rng)
    el = H.ExpansionLayer(rng.normal((L, N), 0.5), _positive(rng, (N,)), M, csn)
    w = rng.normal((K, N))
    params = [*(a for layer in enc.layers for a in (layer.weight, layer.bias)), el.weight, el.bias, w]

    def fn(p):
        e = H.MlpEncoder([H.Linear(p[0], p[1]), H.Linear(p[2], p[3])])
        x_el = H.ExpansionLayer(p[4], p[5], M, csn)
        cls = H.CosineClassifier(p[6])
        z, ec = H.encoder_forward(e, x)
        u, elc = H.expansion_forward(x_el, z)
        logits, cc = H.classify_forward(cls, u)
        loss, g = supervised_ce(logits, labels, 0.1)
        gu, gcls = H.classify_backward(cls, cc, g)
        gz, gel = H.expansion_backward(x_el, elc, gu)
        _, genc = H.encoder_backward(e, ec, gz)
        return loss, [
            genc["layers.0.weight"], genc["layers.0.bias"], genc["layers.1.weight"], genc["layers.1.bias"],
            gel["weight"], gel["bias"], gcls["weight"],
        ]

    return finite_diff_check(fn, params)


def check_generator(rng: RngState, depth: int = 2) -> float:
    z = rng.normal((B, L))
    gen = H.make_generator(L, M, depth, rng)
    for u in gen.units:
        u.bias[:] = 0.3
    target = rng.normal((B, M))
    params = [a for u in gen.units for a in (u.weight, u.bias)]

    def fn(p):
        g = H.GeneratorLayer([H.Linear(p[i], p[i + 1]) for i in range(0, len(p), 2)])
        v, cache = H.generator_forward(g, z)
        loss = 0.5 * float(np.sum((v - target) ** 2))
        _, grads = H.generator_backward(g, cache, v - target)
        return loss, [grads[f"units.{i}.{k}"] for i in range(g.depth) for k in ("weight", "bias")]

    return finite_diff_check(fn, params)


CHECKS = {
    "supervised_ce": check_supervised_ce,
    "covariance": check_covariance,
    "self_label": check_self_label,
    "contrastive_transfer": check_contrastive,
    "csn_classifier": check_csn_classifier,
    "full_stack": check_full_stack,
    "generator": check_generator,
}


def run_gradient_suite(seed: int = 0) -> dict[str, float]:
    """Max relative error per check, each on its own seeded stream."""
    root = RngState(seed)
    return {name: fn(root.child(i)) for i, (name, fn) in enumerate(CHECKS.items())}
