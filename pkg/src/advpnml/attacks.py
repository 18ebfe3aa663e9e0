"""White-box (FGSM, PGD, BPDA-adaptive PGD) and decision-based (HSJA) attacks.

White-box attacks work on batches and draw each sample's random start from
its own stream keyed by ``(cfg.seed, sample_id, restart)``, so results do
not depend on how samples are grouped into batches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .models import ModelParams, forward_logits, input_gradient
from .pnml import EndToEndModel, end_to_end_loss
from .rng import generator

__all__ = [
    "AttackConfig",
    "AttackResult",
    "fgsm",
    "pgd",
    "adaptive_bpda_pgd",
    "hsja",
    "QueryCounter",
]


@dataclass(frozen=True)
class AttackConfig:
    """L-inf attack settings.  ``target=None`` is untargeted; ``clamp=None``
    disables the input-range bound."""

    epsilon: float
    step_size: float
    iterations: int = 1
    restarts: int = 1
    target: int | None = None
    clamp: tuple | None = (0.0, 1.0)
    seed: int = 0
    random_start: bool = True

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.iterations < 1 or self.restarts < 1:
            raise ValueError("iterations and restarts must be positive")
        if self.clamp is not None:
            lo, hi = float(self.clamp[0]), float(self.clamp[1])
            if not lo < hi:
                raise ValueError("clamp requires lo < hi")
            object.__setattr__(self, "clamp", (lo, hi))

    @property
    def bounds(self):
        return self.clamp if self.clamp is not None else (-math.inf, math.inf)


@dataclass(frozen=True)
class AttackResult:
    x_adv: np.ndarray
    loss: np.ndarray
    success: np.ndarray
    queries: int | None = None


def _prepare(params, x, labels):
    x = np.asarray(x, dtype=params.dtype)
    single = x.shape == params.spec.input_shape
    if single:
        x = x[None]
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (x.shape[0],)).copy()
    return x, labels, single


def _unbatch(result, single):
    if not single:
        return result
    return AttackResult(result.x_adv[0], result.loss[0], result.success[0], result.queries)


def fgsm(params: ModelParams, x, label, epsilon: float, direction="ascend", clamp=(0.0, 1.0)) -> AttackResult:
    """One signed-gradient step of size ``epsilon``.

    ``ascend`` increases the loss for ``label`` (untargeted attack on the
    true label); ``descend`` decreases it (targeted attack toward ``label``).
    """
    if direction not in ("ascend", "descend"):
        raise ValueError(f"unknown direction {direction!r}")
    xb, labels, single = _prepare(params, x, label)
    lo, hi = clamp if clamp is not None else (-math.inf, math.inf)
    grad, _ = input_gradient(params, xb, labels)
    step = np.sign(grad) if direction == "ascend" else -np.sign(grad)
    x_adv = T.clamp_project(xb + epsilon * step, xb, epsilon, lo, hi).data
    x_adv = np.array(x_adv)
    logits = forward_logits(params, x_adv).data
    loss_rows = T.softmax_cross_entropy(T.Tensor._wrap(logits), labels, reduction="none").data
    pred = np.argmax(logits, axis=1)
    success = pred != labels if direction == "ascend" else pred == labels
    return _unbatch(AttackResult(x_adv, loss_rows, success), single)


def _base_grad(params):
    def grad_fn(x, labels):
        return input_gradient(params, x, labels)

    return grad_fn


def _e2e_grad(model):
    def grad_fn(x, labels):
        tape = T.Tape()
        xt = tape.watch(x, "x")
        rows, values = end_to_end_loss(model, xt, labels, tape)
        grads = T.backward(T.sum(rows), tape)
        return grads["x"].data, values

    return grad_fn


def _pgd_loop(grad_fn, loss_fn, x, labels, cfg: AttackConfig, sample_ids):
    """Restarted projected sign-gradient ascent (descent when targeted).

    Returns the final iterate of the restart with the best objective.
    """
    lo, hi = cfg.bounds
    sign = 1.0 if cfg.target is None else -1.0
    best_x = x.copy()
    best_obj = np.full(x.shape[0], -np.inf)
    best_loss = np.full(x.shape[0], np.nan)
    for restart in range(cfg.restarts):
        if cfg.random_start and cfg.epsilon > 0:
            u = np.stack(
                [
                    generator(cfg.seed, "pgd", int(sid), restart)
                    .uniform(-cfg.epsilon, cfg.epsilon, size=x.shape[1:])
                    for sid in sample_ids
                ]
            ).astype(x.dtype)
            cur = T.clamp_project(x + u, x, cfg.epsilon, lo, hi).data
        else:
            cur = T.clamp_project(x, x, cfg.epsilon, lo, hi).data
        for _ in range(cfg.iterations):
            grad, _ = grad_fn(cur, labels)
            cur = T.clamp_project(cur + sign * cfg.step_size * np.sign(grad), x, cfg.epsilon, lo, hi).data
        final_loss = loss_fn(cur, labels)
        obj = sign * final_loss
        better = obj > best_obj
        best_x[better] = cur[better]
        best_obj[better] = obj[better]
        best_loss[better] = final_loss[better]
    return best_x, best_loss


def pgd(params: ModelParams, x, y, cfg: AttackConfig, sample_ids=None) -> AttackResult:
    """L-inf PGD with uniform random starts and best-final-iterate selection.

    ``y`` is the true label (untargeted) and is ignored in favour of
    ``cfg.target`` when the attack is targeted.
    """
    xb, labels, single = _prepare(params, x, y)
    ids = np.arange(xb.shape[0]) if sample_ids is None else np.atleast_1d(sample_ids)
    step_labels = labels if cfg.target is None else np.full_like(labels, cfg.target)

    def loss_fn(cur, lab):
        logits = forward_logits(params, cur)
        return T.softmax_cross_entropy(logits, lab, reduction="none").data.astype(np.float64)

    x_adv, best_loss = _pgd_loop(_base_grad(params), loss_fn, xb, step_labels, cfg, ids)
    pred = np.argmax(forward_logits(params, x_adv).data, axis=1)
    success = pred != labels if cfg.target is None else pred == cfg.target
    return _unbatch(AttackResult(x_adv, best_loss, success), single)


def adaptive_bpda_pgd(model: EndToEndModel, x, y, cfg: AttackConfig, sample_ids=None) -> AttackResult:
    """PGD on ``-log q[y]`` of the defended model with identity refinement backward.

    Success means the defended prediction differs from ``y``.
    """
    from .pnml import pnml_predict_batch

    xb, labels, single = _prepare(model.params, x, y)
    ids = np.arange(xb.shape[0]) if sample_ids is None else np.atleast_1d(sample_ids)
    step_labels = labels if cfg.target is None else np.full_like(labels, cfg.target)

    def loss_fn(cur, lab):
        _, values = end_to_end_loss(model, T.Tensor._wrap(cur), lab)
        return values.astype(np.float64)

    x_adv, best_loss = _pgd_loop(_e2e_grad(model), loss_fn, xb, step_labels, cfg, ids)
    pred = pnml_predict_batch(model.params, x_adv, model.refine).labels
    success = pred != labels if cfg.target is None else pred == cfg.target
    return _unbatch(AttackResult(x_adv, best_loss, success), single)


# ----------------------------------------------------------------- black box


class QueryCounter:
    """Wraps a batch decision oracle and refuses to exceed the budget."""

    def __init__(self, oracle, budget):
        self.oracle = oracle
        self.budget = int(budget)
        self.used = 0

    @property
    def remaining(self):
        return self.budget - self.used

    def __call__(self, xs):
        xs = np.asarray(xs)
        if xs.shape[0] > self.remaining:
            raise _BudgetExhausted
        self.used += xs.shape[0]
        return np.asarray(self.oracle(xs))


class _BudgetExhausted(Exception):
    pass


def hsja(
    decision_oracle,
    x,
    y_true: int,
    query_budget: int,
    seed: int = 0,
    clamp=(0.0, 1.0),
    init_evals: int = 100,
    max_evals: int = 10_000,
    threshold: float = 1e-3,
    max_init_tries: int = 1000,
) -> AttackResult:
    """Untargeted L2 HopSkipJump attack using only predicted labels.

    ``decision_oracle`` maps a batch ``(B, *x.shape)`` to ``B`` labels.  Every
    input passed to it counts as one query and the budget is never
    exceeded.  The result holds the closest (L2) misclassified point found;
    ``success`` is false when no misclassified point was found at all.
    """
    rng = generator(seed, "hsja")
    x = np.asarray(x)
    dtype = x.dtype
    lo, hi = clamp if clamp is not None else (-math.inf, math.inf)
    d = x.size
    counter = QueryCounter(decision_oracle, query_budget)

    def is_adv(points):
        return counter(np.asarray(points, dtype=dtype)) != y_true

    best = None
    best_dist = math.inf

    def consider(point):
        nonlocal best, best_dist
        dist = float(np.linalg.norm((point - x).ravel()))
        if dist < best_dist:
            best, best_dist = point.copy(), dist

    def boundary(adv_point):
        # bisect on the blend x + a * (adv - x) until the bracket is thin in L-inf
        span = float(np.abs(adv_point - x).max())
        low, high = 0.0, 1.0
        while (high - low) * span > threshold:
            mid = (low + high) / 2
            if is_adv([x + mid * (adv_point - x)])[0]:
                high = mid
            else:
                low = mid
        return (x + high * (adv_point - x)).astype(dtype)

    try:
        # initialization: random points until one is misclassified
        init = None
        scale = 1.0
        for _ in range(max_init_tries):
            if clamp is not None:
                cand = rng.uniform(lo, hi, size=x.shape).astype(dtype)
            else:
                cand = (x + scale * rng.standard_normal(x.shape)).astype(dtype)
                scale *= 1.5
            if is_adv([cand])[0]:
                init = cand
                break
        if init is None:
            raise _BudgetExhausted
        consider(init)
        current = boundary(init)
        consider(current)
        theta = 1.0 / (math.sqrt(d) * d)
        step = 0
        while True:
            step += 1
            dist = float(np.linalg.norm((current - x).ravel()))
            delta = math.sqrt(d) * theta * dist
            n_evals = min(int(init_evals * math.sqrt(step)), max_evals, counter.remaining)
            if n_evals < 2:
                break
            u = rng.standard_normal((n_evals,) + x.shape)
            u /= np.sqrt((u.reshape(n_evals, -1) ** 2).sum(axis=1)).reshape((-1,) + (1,) * x.ndim)
            probes = np.clip(current + delta * u, lo, hi)
            u = (probes - current) / delta
            phi = np.where(is_adv(probes), 1.0, -1.0)
            if abs(phi.mean()) == 1.0:
                direction = phi.mean() * u.mean(axis=0)
            else:
                direction = ((phi - phi.mean()).reshape((-1,) + (1,) * x.ndim) * u).mean(axis=0)
            norm = np.linalg.norm(direction.ravel())
            if norm == 0:
                continue
            direction = direction / norm
            # geometric step-size search
            eps = dist / math.sqrt(step)
            while True:
                cand = np.clip(current + eps * direction, lo, hi).astype(dtype)
                if is_adv([cand])[0]:
                    break
                eps /= 2.0
                if eps < 1e-12:
                    cand = None
                    break
            if cand is None:
                continue
            current = boundary(cand)
            consider(current)
    except _BudgetExhausted:
        pass
    if best is None:
        return AttackResult(x.copy(), np.array(math.inf), np.array(False), counter.used)
    return AttackResult(best, np.array(best_dist), np.array(True), counter.used)
