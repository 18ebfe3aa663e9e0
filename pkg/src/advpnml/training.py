"""SGD-momentum training (natural, PGD-adversarial, adaptive-adversarial) and evaluation."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, adaptive_bpda_pgd, fgsm, hsja, pgd
from .datasets import LabeledSet
from .errors import ContractError, TrainingError
from .models import ModelParams, ModelSpec, forward_logits, init_params
from .pnml import EndToEndModel, RefineConfig, pnml_predict_batch
from .rng import derive_seed, generator


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 50
    learning_rate: float | tuple = 0.01  # constant, or ((start_epoch, rate), ...)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    adversary: AttackConfig | None = None
    adaptive_refine: RefineConfig | None = None
    adaptive_switch_epoch: int | None = None
    epsilon_warmup: int = 0  # epochs over which the adversary's budget ramps up from 0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if isinstance(self.learning_rate, (int, float)):
            schedule = ((0, float(self.learning_rate)),)
        else:
            schedule = tuple((int(e), float(r)) for e, r in self.learning_rate)
        if not schedule or schedule[0][0] != 0:
            raise ValueError("learning-rate schedule must start at epoch 0")
        if any(r <= 0 for _, r in schedule):
            raise ValueError("learning rates must be positive")
        if [e for e, _ in schedule] != sorted({e for e, _ in schedule}):
            raise ValueError("schedule epochs must be strictly increasing")
        object.__setattr__(self, "learning_rate", schedule)
        if self.epsilon_warmup < 0:
            raise ValueError("epsilon_warmup must be >= 0")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight decay must be non-negative")
        if self.adaptive_switch_epoch is not None:
            if self.adversary is None or self.adaptive_refine is None:
                raise ValueError("adaptive training needs an adversary and a refine config")
            if not 0 <= self.adaptive_switch_epoch <= self.epochs:
                raise ValueError("adaptive_switch_epoch must lie within [0, epochs]")

    def adversary_scale(self, epoch, fraction):
        """Budget multiplier after ``fraction`` of ``epoch`` (linear ramp, then 1)."""
        if self.epsilon_warmup == 0:
            return 1.0
        return min(1.0, (epoch + fraction) / self.epsilon_warmup)

    def rate(self, epoch):
        current = self.learning_rate[0][1]
        for start, rate in self.learning_rate:
            if epoch >= start:
                current = rate
        return current


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    natural_acc: float
    adversarial_acc: float | None
    wall_time: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def to_csv(self, path):
        import csv

        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "train_loss", "natural_acc", "adversarial_acc", "wall_time"])
            for r in self.records:
                adv = "" if r.adversarial_acc is None else repr(r.adversarial_acc)
                writer.writerow([r.epoch, repr(r.train_loss), repr(r.natural_acc), adv, f"{r.wall_time:.3f}"])


def sgd_update(params: ModelParams, grads, lr, momentum, weight_decay, state=None):
    """``v <- momentum*v + grad + wd*param``; ``param <- param - lr*v``.

    Returns ``(new_params, new_state)``; ``state`` maps names to velocities.
    """
    missing = [n for n in params.names() if n not in grads]
    if missing:
        raise ContractError(f"missing gradients for {missing}")
    state = {} if state is None else state
    new_params, new_state = {}, {}
    for name in params.names():
        w = params[name]
        g = grads[name].data if isinstance(grads[name], T.Tensor) else np.asarray(grads[name])
        v = g + weight_decay * w
        if name in state:
            v = momentum * state[name] + v
        new_state[name] = v.astype(w.dtype)
        new_params[name] = (w - lr * new_state[name]).astype(w.dtype)
    return params.replace(new_params), new_state


def batch_order(n, batch_size, seed):
    order = generator(seed, "batches").permutation(n)
    return [order[s : s + batch_size] for s in range(0, n, batch_size)]


def train(spec: ModelSpec, data: LabeledSet, cfg: TrainConfig, init: ModelParams | None = None, on_epoch=None):
    """Train from ``init`` (or a seeded initialization) and return ``(params, log)``."""
    params = init if init is not None else init_params(spec, derive_seed(cfg.seed, "init"))
    x_all = data.inputs.astype(params.dtype)
    y_all = data.labels
    state = None
    log = TrainLog()
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        lr = cfg.rate(epoch)
        adaptive = cfg.adaptive_switch_epoch is not None and epoch >= cfg.adaptive_switch_epoch
        total_loss = 0.0
        natural_hits = adv_hits = 0
        order = batch_order(len(data), cfg.batch_size, derive_seed(cfg.seed, "epoch", epoch))
        for b, idx in enumerate(order):
            xb, yb = x_all[idx], y_all[idx]
            natural_hits += int((np.argmax(forward_logits(params, xb).data, axis=1) == yb).sum())
            if cfg.adversary is not None:
                scale = cfg.adversary_scale(epoch, (b + 1) / len(order))
                acfg = replace(
                    cfg.adversary,
                    epsilon=cfg.adversary.epsilon * scale,
                    step_size=cfg.adversary.step_size * scale,
                    seed=derive_seed(cfg.seed, "adversary", epoch),
                )
                if adaptive:
                    model = EndToEndModel(params, cfg.adaptive_refine)
                    xb = adaptive_bpda_pgd(model, xb, yb, acfg, sample_ids=idx).x_adv
                else:
                    xb = pgd(params, xb, yb, acfg, sample_ids=idx).x_adv
            tape = T.Tape()
            logits = forward_logits(params, xb, tape, param_grads=True)
            batch_loss = T.softmax_cross_entropy(logits, yb, reduction="mean")
            value = float(batch_loss.item())
            if not math.isfinite(value):
                raise TrainingError("non-finite training loss", epoch=epoch)
            grads = T.backward(batch_loss, tape)
            if cfg.adversary is not None:
                adv_hits += int((np.argmax(logits.data, axis=1) == yb).sum())
            params, state = sgd_update(params, grads, lr, cfg.momentum, cfg.weight_decay, state)
            total_loss += value * len(idx)
        n = len(data)
        record = EpochRecord(
            epoch=epoch + 1,
            train_loss=total_loss / n,
            natural_acc=natural_hits / n,
            adversarial_acc=adv_hits / n if cfg.adversary is not None else None,
            wall_time=time.perf_counter() - started,
        )
        log.records.append(record)
        if on_epoch is not None:
            on_epoch(record)
    meta = {"epochs": cfg.epochs, "seed": cfg.seed}
    return ModelParams(spec, params.tensors, meta), log


# ---------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class AttackSpec:
    """One evaluation attack.  ``kind`` is fgsm, pgd, adaptive or hsja."""

    kind: str
    epsilon: float
    config: AttackConfig | None = None
    query_budget: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd", "adaptive", "hsja"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.kind in ("pgd", "adaptive") and self.config is None:
            raise ValueError(f"{self.kind} needs an AttackConfig")
        if self.kind == "hsja" and self.query_budget < 1:
            raise ValueError("hsja needs a positive query budget")

    def with_epsilon(self, epsilon):
        config = None if self.config is None else replace(self.config, epsilon=epsilon)
        return replace(self, epsilon=epsilon, config=config)


@dataclass
class EvalRecord:
    natural_acc: float
    attack_acc: dict
    regret_mean: dict
    adversarial_inputs: dict = field(default_factory=dict, repr=False)

    @property
    def best_attack_acc(self):
        return min(self.attack_acc.values()) if self.attack_acc else self.natural_acc


def _predict_labels(params, x, defense, chunk):
    if defense is None:
        out = []
        for s in range(0, x.shape[0], chunk * 4):
            out.append(np.argmax(forward_logits(params, x[s : s + chunk * 4]).data, axis=1))
        return np.concatenate(out), None
    batch = pnml_predict_batch(params, x, defense, chunk=chunk)
    return batch.labels, batch.regret


def generate_adversarial(params, data, spec: AttackSpec, defense=None, chunk=50, sample_ids=None):
    """Adversarial inputs for ``data`` under ``spec``.

    FGSM and PGD are computed against the base model; adaptive attacks use
    the end-to-end defended model.  HSJA queries the defended decision when
    a defense is given, and falls back to the clean input for samples where
    no adversarial point within ``epsilon`` (L-inf) was found.
    """
    x = data.inputs.astype(params.dtype)
    y = data.labels
    ids = np.arange(len(data)) if sample_ids is None else np.asarray(sample_ids)
    clamp = None if not np.isfinite(data.input_range[0]) else tuple(data.input_range)
    out = np.empty_like(x)
    for s in range(0, len(data), chunk):
        xs, ys, sid = x[s : s + chunk], y[s : s + chunk], ids[s : s + chunk]
        if spec.kind == "fgsm":
            out[s : s + chunk] = fgsm(params, xs, ys, spec.epsilon, "ascend", clamp).x_adv
        elif spec.kind == "pgd":
            cfg = replace(spec.config, epsilon=spec.epsilon, clamp=clamp)
            out[s : s + chunk] = pgd(params, xs, ys, cfg, sample_ids=sid).x_adv
        elif spec.kind == "adaptive":
            cfg = replace(spec.config, epsilon=spec.epsilon, clamp=clamp)
            if defense is None:
                out[s : s + chunk] = pgd(params, xs, ys, cfg, sample_ids=sid).x_adv
            else:
                model = EndToEndModel(params, defense)
                out[s : s + chunk] = adaptive_bpda_pgd(model, xs, ys, cfg, sample_ids=sid).x_adv
        else:
            for j in range(xs.shape[0]):
                oracle = _decision_oracle(params, defense)
                res = hsja(oracle, xs[j], int(ys[j]), spec.query_budget, derive_seed(spec.seed, "hsja", int(sid[j])), clamp)
                ok = res.success and np.abs(res.x_adv - xs[j]).max() <= spec.epsilon + 1e-6
                out[s + j] = res.x_adv if ok else xs[j]
    return out


def _decision_oracle(params, defense):
    if defense is None:
        return lambda xs: np.argmax(forward_logits(params, np.asarray(xs)).data, axis=1)
    return lambda xs: pnml_predict_batch(params, np.asarray(xs), defense).labels


def evaluate(params, data: LabeledSet, attacks=None, defense: RefineConfig | None = None, chunk=50, keep_inputs=False, cache=None):
    """Accuracy of the (optionally defended) model on clean and attacked inputs.

    ``attacks`` maps a name to an :class:`AttackSpec`.  ``cache`` (a dict)
    lets several evaluations reuse adversarial inputs that do not depend on
    the defense (FGSM and PGD against the base model).
    """
    attacks = attacks or {}
    y = data.labels
    x = data.inputs.astype(params.dtype)
    labels, regret = _predict_labels(params, x, defense, chunk)
    natural = float((labels == y).mean())
    acc, reg, inputs = {}, {}, {}
    if regret is not None:
        reg["natural"] = float(regret.mean())
    for name, spec in attacks.items():
        key = (name, spec)
        defense_free = spec.kind in ("fgsm", "pgd") or (spec.kind == "adaptive" and defense is None)
        if cache is not None and defense_free and key in cache:
            adv = cache[key]
        else:
            adv = generate_adversarial(params, data, spec, defense, chunk)
            if cache is not None and defense_free:
                cache[key] = adv
        pred, r = _predict_labels(params, adv, defense, chunk)
        acc[name] = float((pred == y).mean())
        if r is not None:
            reg[name] = float(r.mean())
        if keep_inputs:
            inputs[name] = adv
    return EvalRecord(natural, acc, reg, inputs)
