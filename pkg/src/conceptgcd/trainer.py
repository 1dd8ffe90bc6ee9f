"""Optimizer, schedules, negative memory and the three training stages."""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import heads as H
from .dataset import GcdDataset, TrainView
from .errors import ConfigError, DataError, NumericError
from .losses import (
    ContrastiveBatch,
    LossValue,
    ViewPair,
    base_loss,
    contrastive_transfer_loss,
    covariance_loss,
    self_label_loss,
    stage1_loss,
    stage2_loss,
    stage3_loss,
    supervised_ce,
)
from .numerics import RngState


@dataclass
class TrainConfig:
    alpha: float = 0.35
    beta: float = 0.1
    lam: float = 1.0
    epsilon: float = 1.0
    tau: float = 0.1
    tau_prime_start: float = 0.07
    tau_prime_end: float = 0.04
    tau_prime_warmup_epochs: int = 30
    lr_init: float = 1.0
    lr_final: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-5
    batch_size: int = 128
    epochs_stage1: int = 100
    epochs_stage2: int = 100
    epochs_stage3: int = 200
    l: int = 64
    m: int | None = None
    n: int | None = None
    gl_depth: int = 1
    encoder_hidden: int | None = None
    sigma_aug: float = 0.3
    memory_capacity: int = 2048
    seed: int = 0
    entropy_sign: float = -1.0
    stage3_cov: bool = False
    csn: bool = True
    el_init_scale: float | None = None
    warm_start_classifier: bool = False
    smi_all_samples: bool = False

    def __post_init__(self):
        if self.m is None:
            self.m = 2 * self.l
        if self.n is None:
            self.n = 10 * self.l
        self.validate()

    def validate(self) -> None:
        problems = []
        if not self.m < self.n:
            problems.append(f"m={self.m} must be < n={self.n}")
        for name in ("tau", "tau_prime_start", "tau_prime_end"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be positive")
        if self.batch_size < 2:
            problems.append("batch_size must be >= 2")
        if not 0 <= self.alpha <= 1:
            problems.append("alpha must lie in [0, 1]")
        for name in ("beta", "lam", "epsilon", "weight_decay", "sigma_aug"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if self.entropy_sign not in (-1.0, 1.0):
            problems.append("entropy_sign must be -1 or 1")
        if min(self.l, self.m, self.memory_capacity) < 1 or self.gl_depth < 0:
            problems.append("l, m, memory_capacity must be >= 1 and gl_depth >= 0")
        if problems:
            raise ConfigError("invalid config: " + "; ".join(problems))

    @property
    def head_dim(self) -> int:
        """Width of the stage-2 feature space (l for a depth-0 generator)."""
        return self.m if self.gl_depth > 0 else self.l

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        values = dict(values)
        if "lambda" in values:
            values["lam"] = values.pop("lambda")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**values)


# -- schedules -----------------------------------------------------------------


def cosine_lr(epoch: float, cfg: TrainConfig, total_epochs: int) -> float:
    if epoch >= total_epochs:
        return cfg.lr_final
    return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1 + math.cos(math.pi * epoch / total_epochs))


def tau_prime_schedule(epoch: float, cfg: TrainConfig) -> float:
    w = cfg.tau_prime_warmup_epochs
    if epoch >= w:
        return cfg.tau_prime_end
    start, end = cfg.tau_prime_start, cfg.tau_prime_end
    return end + 0.5 * (start - end) * (1 + math.cos(math.pi * epoch / w))


# -- optimizer -------------------------------------------------------------------


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    lr: float = 0.0


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState, cfg: TrainConfig) -> None:
    """In-place momentum SGD. Weight decay skips parameters whose name ends in ``bias``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient {g.shape} does not match parameter {name} {p.shape}")
        if not name.endswith("bias"):
            g = g + cfg.weight_decay * p
        v = state.velocity.get(name)
        v = g.copy() if v is None else cfg.momentum * v + g
        state.velocity[name] = v
        p -= state.lr * v


# -- negative memory ---------------------------------------------------------------


class NegativeMemory:
    """Fixed-capacity FIFO of feature rows tagged with the sample id they came from."""

    def __init__(self, capacity: int, dim: int):
        self.capacity = capacity
        self.dim = dim
        self._rows = np.zeros((capacity, dim))
        self._ids = np.full(capacity, -1, dtype=np.int64)
        self._cursor = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, rows: np.ndarray, ids: np.ndarray) -> None:
        rows = rows[-self.capacity :]
        ids = np.asarray(ids)[-self.capacity :]
        k = rows.shape[0]
        slots = (self._cursor + np.arange(k)) % self.capacity
        self._rows[slots] = rows
        self._ids[slots] = ids
        self._cursor = (self._cursor + k) % self.capacity
        self._size = min(self._size + k, self.capacity)

    def contents(self) -> tuple[np.ndarray, np.ndarray]:
        """Stored rows and ids, oldest first."""
        if self._size < self.capacity:
            order = np.arange(self._size)
        else:
            order = (self._cursor + np.arange(self.capacity)) % self.capacity
        return self._rows[order], self._ids[order]


# -- logging -------------------------------------------------------------------------


class TrainLog:
    """Per-epoch JSON-lines log.

    Lines hold only values that are a function of config and data, so two
    identical runs produce identical files. Wall-clock times go to a
    ``<log>.timing.jsonl`` sidecar.
    """

    def __init__(self, path=None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.write_text("")
            self.timing_path = self.path.with_name(self.path.name + ".timing.jsonl")
            self.timing_path.write_text("")

    def write(self, record: dict, wall_time: float) -> None:
        self.records.append(record)
        if self.path:
            with self.path.open("a") as f:
                f.write(json.dumps(record) + "\n")
            with self.timing_path.open("a") as f:
                f.write(json.dumps({"stage": record["stage"], "epoch": record["epoch"], "wall_time": wall_time}) + "\n")


@dataclass
class StageResult:
    model: H.GcdModel
    history: list[dict]
    memory: NegativeMemory | None = None


BatchHook = Callable[[int, dict], None]


def _as_view(ds) -> TrainView:
    return ds.train_view() if isinstance(ds, GcdDataset) else ds


def _batches(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield order[start : start + size]


def _scatter(mask: np.ndarray, g: np.ndarray, n_rows: int) -> np.ndarray:
    out = np.zeros((n_rows, g.shape[1]))
    out[mask] = g
    return out


def _merge(target: dict, grads: dict, prefix: str) -> None:
    for k, g in grads.items():
        key = prefix + k
        target[key] = target[key] + g if key in target else g


class _EpochMeter:
    def __init__(self):
        self.sums: dict[str, float] = {}
        self.batches = 0
        self.skipped = 0

    def add(self, **values: float) -> None:
        self.batches += 1
        for k, v in values.items():
            self.sums[k] = self.sums.get(k, 0.0) + float(v)

    def means(self) -> dict[str, float]:
        return {k: v / max(self.batches, 1) for k, v in self.sums.items()}


def _record(stage: int, epoch: int, lr: float, tau_prime: float | None, meter: _EpochMeter) -> dict:
    rec = {"stage": stage, "epoch": epoch, "lr": lr}
    if tau_prime is not None:
        rec["tau_prime"] = tau_prime
    rec.update(meter.means())
    rec["batches"] = meter.batches
    rec["skipped_batches"] = meter.skipped
    return rec


def _sup_term(lg1, lg2, lab, labels, cfg, n_known):
    """Cross-entropy over the labeled rows of both views."""
    b = lg1.shape[0]
    if not lab.any():
        return LossValue(0.0)
    y = labels[lab]
    val, g = supervised_ce(np.vstack([lg1[lab], lg2[lab]]), np.concatenate([y, y]), cfg.tau, n_known)
    k = int(lab.sum())
    return LossValue(val, {"logits1": _scatter(lab, g[:k], b), "logits2": _scatter(lab, g[k:], b)})


def _unsup_term(lg1, lg2, unl, cfg, tau_prime):
    b = lg1.shape[0]
    if not unl.any():
        return LossValue(0.0)
    pair = ViewPair(lg1[unl], lg2[unl], cfg.tau, tau_prime)
    val, g1, g2 = self_label_loss(pair, cfg.epsilon, cfg.entropy_sign)
    return LossValue(val, {"logits1": _scatter(unl, g1, b), "logits2": _scatter(unl, g2, b)})


def _cov_term(f1, f2):
    c1, g1 = covariance_loss(f1)
    c2, g2 = covariance_loss(f2)
    return LossValue(0.5 * (c1 + c2), {"feat1": 0.5 * g1, "feat2": 0.5 * g2})


# -- stage 1 -----------------------------------------------------------------------------


def run_stage1(ds, cfg: TrainConfig, log: TrainLog | None = None, hook: BatchHook | None = None) -> StageResult:
    """Train encoder and known-class classifier on visible samples with CE + lambda * covariance."""
    view = _as_view(ds)
    log = log or TrainLog()
    lab_idx = np.flatnonzero(view.labeled)
    if lab_idx.size < 2:
        raise DataError(f"stage 1 needs at least 2 labeled samples, found {lab_idx.size}")
    root = RngState(cfg.seed)
    init, shuffle, aug = root.child(10), root.child(11), root.child(12)
    enc = H.make_encoder(view.features.shape[1], cfg.l, init, cfg.encoder_hidden)
    cls = H.make_classifier(view.n_known, cfg.l, init)
    params = {**_prefixed(enc.params(), "encoder."), **_prefixed(cls.params(), "classifier.")}
    state = OptimizerState()
    E = cfg.epochs_stage1
    for epoch in range(E):
        t0 = time.perf_counter()
        state.epoch, state.lr = epoch, cosine_lr(epoch, cfg, E)
        meter = _EpochMeter()
        for batch in _batches(lab_idx[shuffle.permutation(lab_idx.size)], cfg.batch_size):
            if batch.size < 2:
                meter.skipped += 1
                continue
            if hook:
                hook(1, {"batch": batch, "sup_rows": batch, "unsup_rows": batch[:0]})
            x = view.features[batch]
            if cfg.sigma_aug:
                x = x + aug.normal(x.shape, cfg.sigma_aug)
            z, ec = H.encoder_forward(enc, x)
            logits, cc = H.classify_forward(cls, z)
            ls, gl = supervised_ce(logits, view.labels[batch], cfg.tau, view.n_known)
            lc, gz = covariance_loss(z)
            total = stage1_loss(LossValue(ls, {"logits": gl}), LossValue(lc, {"z": gz}), cfg.lam)
            gfeat, gcls = H.classify_backward(cls, cc, total.grads["logits"])
            _, genc = H.encoder_backward(enc, ec, gfeat + total.grads["z"])
            grads = {**_prefixed(genc, "encoder."), **_prefixed(gcls, "classifier.")}
            sgd_step(params, grads, state, cfg)
            meter.add(loss=total.value, loss_s=ls, loss_cov=lc)
        log.write(_record(1, epoch, state.lr, None, meter), time.perf_counter() - t0)
    model = H.GcdModel(1, enc, H.GeneratorLayer([], identity_dim=cfg.l), cls, view.n_known, view.n_novel)
    return StageResult(model, log.records)


def _prefixed(d: dict, prefix: str) -> dict:
    return {prefix + k: v for k, v in d.items()}


# -- stage 2 ---------------------------------------------------------------------------------


def run_stage2(stage1: H.GcdModel, ds, cfg: TrainConfig, log: TrainLog | None = None, hook: BatchHook | None = None) -> StageResult:
    """Freeze the stage-1 encoder; train generator layer and all-class classifier with L_base + lambda * L_cov.

    ``gl_depth = 0`` trains the classifier alone on frozen encoder features.
    """
    view = _as_view(ds)
    log = log or TrainLog()
    if stage1.encoder.output_dim != cfg.l:
        raise ConfigError(f"stage-1 encoder emits {stage1.encoder.output_dim} dims but config l={cfg.l}")
    root = RngState(cfg.seed)
    init, shuffle, aug = root.child(20), root.child(21), root.child(22)
    enc = stage1.encoder.copy(trainable=False)
    gen = H.make_generator(cfg.l, cfg.m, cfg.gl_depth, init)
    cls = H.make_classifier(view.n_classes, gen.output_dim, init)
    params = {**_prefixed(gen.params(), "generator."), **_prefixed(cls.params(), "classifier.")}
    state = OptimizerState()
    n = view.features.shape[0]
    E = cfg.epochs_stage2
    for epoch in range(E):
        t0 = time.perf_counter()
        state.epoch, state.lr = epoch, cosine_lr(epoch, cfg, E)
        tp = tau_prime_schedule(epoch, cfg)
        meter = _EpochMeter()
        for batch in _batches(shuffle.permutation(n), cfg.batch_size):
            if batch.size < 2:
                meter.skipped += 1
                continue
            lab = view.labels[batch] >= 0
            if hook:
                hook(2, {"batch": batch, "sup_rows": batch[lab], "unsup_rows": batch[~lab]})
            x1, x2 = _views(view.features[batch], cfg.sigma_aug, aug)
            z1, _ = H.encoder_forward(enc, x1)
            z2, _ = H.encoder_forward(enc, x2)
            v1, gc1 = H.generator_forward(gen, z1)
            v2, gc2 = H.generator_forward(gen, z2)
            lg1, cc1 = H.classify_forward(cls, v1)
            lg2, cc2 = H.classify_forward(cls, v2)
            sup = _sup_term(lg1, lg2, lab, view.labels[batch], cfg, view.n_known)
            unsup = _unsup_term(lg1, lg2, ~lab, cfg, tp)
            cov = _cov_term(v1, v2) if gen.depth else LossValue(0.0)
            total = stage2_loss(base_loss(sup, unsup, cfg.alpha), cov, cfg.lam)
            grads: dict = {}
            for lg_key, f_key, cc, gc in (("logits1", "feat1", cc1, gc1), ("logits2", "feat2", cc2, gc2)):
                gfeat, gcls = H.classify_backward(cls, cc, total.grads.get(lg_key, np.zeros_like(lg1)))
                _merge(grads, gcls, "classifier.")
                if gen.depth:
                    if f_key in total.grads:
                        gfeat = gfeat + total.grads[f_key]
                    _, ggen = H.generator_backward(gen, gc, gfeat)
                    _merge(grads, ggen, "generator.")
            sgd_step(params, grads, state, cfg)
            meter.add(loss=total.value, loss_s=sup.value, loss_u=unsup.value, loss_cov=cov.value)
        log.write(_record(2, epoch, state.lr, tp, meter), time.perf_counter() - t0)
    model = H.GcdModel(2, stage1.encoder.copy(trainable=False), gen, cls, view.n_known, view.n_novel)
    return StageResult(model, log.records)


def _views(x: np.ndarray, sigma: float, rng: RngState):
    if sigma == 0:
        return x, x
    return x + rng.normal(x.shape, sigma), x + rng.normal(x.shape, sigma)


# -- stage 3 ------------------------------------------------------------------------------


def init_stage3(stage1: H.GcdModel, stage2: H.GcdModel, cfg: TrainConfig, n_classes: int):
    """Lower-branch encoder, expansion layer and classifier at the start of stage 3."""
    if stage1.encoder.output_dim != cfg.l:
        raise ConfigError(f"stage-1 encoder emits {stage1.encoder.output_dim} dims but config l={cfg.l}")
    gen = stage2.head
    if not isinstance(gen, H.GeneratorLayer) or gen.depth < 1:
        raise ConfigError("stage 3 needs a stage-2 checkpoint with a generator layer of depth >= 1")
    if gen.output_dim != cfg.m:
        raise ConfigError(f"stage-2 generator emits {gen.output_dim} dims but config m={cfg.m}")
    init = RngState(cfg.seed).child(30)
    scale = cfg.el_init_scale if cfg.el_init_scale is not None else math.sqrt(2.0 / gen.units[-1].in_dim)
    el = H.expansion_from_generator(gen, cfg.n, scale, init, cfg.csn)
    enc = stage1.encoder.copy(trainable=True)
    if cfg.warm_start_classifier:
        w = np.hstack([stage2.classifier.weight, np.zeros((n_classes, cfg.n - cfg.m))])
        cls = H.CosineClassifier(w)
    else:
        cls = H.make_classifier(n_classes, cfg.n, init)
    return enc, el, cls


def run_stage3(stage1: H.GcdModel, stage2: H.GcdModel, ds, cfg: TrainConfig, log: TrainLog | None = None, hook: BatchHook | None = None) -> StageResult:
    """Train the lower branch (encoder copy + expansion layer + classifier) with L_base + beta * L_smi.

    The upper branch (stage-1 encoder and stage-2 generator) stays frozen and
    supplies the positive targets ``v`` and, via the memory, the negatives.
    """
    view = _as_view(ds)
    log = log or TrainLog()
    enc, el, cls = init_stage3(stage1, stage2, cfg, view.n_classes)
    up_enc = stage1.encoder.copy(trainable=False)
    up_gen = H.GeneratorLayer(stage2.head.units, trainable=False)
    root = RngState(cfg.seed)
    shuffle, aug = root.child(31), root.child(32)
    params = {
        **_prefixed(enc.params(), "encoder."),
        **_prefixed(el.params(), "expansion."),
        **_prefixed(cls.params(), "classifier."),
    }
    memory = NegativeMemory(cfg.memory_capacity, cfg.m)
    state = OptimizerState()
    m = cfg.m
    n = view.features.shape[0]
    E = cfg.epochs_stage3
    for epoch in range(E):
        t0 = time.perf_counter()
        state.epoch, state.lr = epoch, cosine_lr(epoch, cfg, E)
        tp = tau_prime_schedule(epoch, cfg)
        meter = _EpochMeter()
        for batch in _batches(shuffle.permutation(n), cfg.batch_size):
            if batch.size < 2:
                meter.skipped += 1
                continue
            lab = view.labels[batch] >= 0
            smi_rows = np.ones_like(lab) if cfg.smi_all_samples else ~lab
            if hook:
                hook(3, {"batch": batch, "sup_rows": batch[lab], "unsup_rows": batch[~lab], "smi_rows": batch[smi_rows]})
            x = view.features[batch]
            v = H.generator_forward(up_gen, H.encoder_forward(up_enc, x)[0])[0]
            x1, x2 = _views(x, cfg.sigma_aug, aug)
            passes = {}
            for key, xi in (("1", x1), ("2", x2), ("0", x)):
                if key == "0" and cfg.beta == 0:
                    continue
                z, ec = H.encoder_forward(enc, xi)
                u, elc = H.expansion_forward(el, z)
                passes[key] = (u, ec, elc)
            (u1, _, _), (u2, _, _) = passes["1"], passes["2"]
            lg1, cc1 = H.classify_forward(cls, u1)
            lg2, cc2 = H.classify_forward(cls, u2)
            sup = _sup_term(lg1, lg2, lab, view.labels[batch], cfg, view.n_known)
            unsup = _unsup_term(lg1, lg2, ~lab, cfg, tp)
            smi = LossValue(0.0)
            if "0" in passes and smi_rows.any():
                negs, neg_ids = memory.contents()
                ids = batch[smi_rows]
                cb = ContrastiveBatch(
                    passes["0"][0][smi_rows, :m], v[smi_rows], negs, cfg.tau, neg_ids[None, :] == ids[:, None]
                )
                val, gu = contrastive_transfer_loss(cb)
                g0 = np.zeros_like(passes["0"][0])
                g0[smi_rows, :m] = gu
                smi = LossValue(val, {"feat0": g0})
            cov = _cov_term(u1, u2) if cfg.stage3_cov else None
            total = stage3_loss(base_loss(sup, unsup, cfg.alpha), smi, cfg.beta, cov, cfg.lam)
            grads: dict = {}
            g_feat = {}
            for key, cc, lg_key in (("1", cc1, "logits1"), ("2", cc2, "logits2")):
                gfeat, gcls = H.classify_backward(cls, cc, total.grads.get(lg_key, np.zeros_like(lg1)))
                _merge(grads, gcls, "classifier.")
                g_feat[key] = gfeat + total.grads.get("feat" + key, 0.0)
            if "0" in passes:
                g_feat["0"] = total.grads.get("feat0", np.zeros_like(passes["0"][0]))
            for key, g in g_feat.items():
                _, ec, elc = passes[key]
                gz, gel = H.expansion_backward(el, elc, g)
                _merge(grads, gel, "expansion.")
                _, genc = H.encoder_backward(enc, ec, gz)
                _merge(grads, genc, "encoder.")
            sgd_step(params, grads, state, cfg)
            memory.push(v, batch)
            meter.add(
                loss=total.value,
                loss_s=sup.value,
                loss_u=unsup.value,
                loss_smi=smi.value,
                **({"loss_cov": cov.value} if cov is not None else {}),
            )
        log.write(_record(3, epoch, state.lr, tp, meter), time.perf_counter() - t0)
    model = H.GcdModel(3, enc, el, cls, view.n_known, view.n_novel)
    return StageResult(model, log.records, memory)
