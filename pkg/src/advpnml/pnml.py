"""Adversarial pNML: label-directed refinement hypotheses and their normalization.

For every candidate label ``y_i`` the test input is nudged by a weak targeted
attack toward ``y_i``; the model's probability of ``y_i`` at the nudged input
is that hypothesis' score ``p_i``.  Normalizing the scores gives the
prediction ``q`` and the regret ``log sum p_i``.

All routines accept a batch ``(N, *input_shape)``.  Hypotheses of a batch
are evaluated together as one ``(N * H, ...)`` batch, sample-major.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .models import ModelParams, forward_logits, input_gradient

__all__ = [
    "RefineConfig",
    "PnmlPrediction",
    "PnmlBatch",
    "EndToEndModel",
    "refine",
    "refine_batch",
    "candidate_labels",
    "hypothesis_probs",
    "pnml_assign",
    "pnml_predict",
    "pnml_predict_batch",
    "end_to_end_forward",
    "end_to_end_loss",
]


@dataclass(frozen=True)
class RefineConfig:
    """Refinement settings.

    ``iterations == 1`` is the single FGSM-style step of size ``strength``.
    With more iterations each step has size ``step`` (default
    ``strength / iterations``) and iterates are projected back into the
    ``strength`` ball.  ``top_k=None`` evaluates every label.
    """

    strength: float
    iterations: int = 1
    step: float | None = None
    clamp: tuple | None = None
    top_k: int | None = None

    def __post_init__(self):
        if self.strength < 0:
            raise ValueError("refinement strength must be non-negative")
        if self.iterations < 1:
            raise ValueError("refinement iterations must be positive")
        if self.step is None:
            object.__setattr__(self, "step", self.strength / self.iterations)
        if self.step < 0:
            raise ValueError("refinement step must be non-negative")
        if self.iterations > 1 and self.iterations * self.step < self.strength * (1 - 1e-12):
            raise ValueError("iterations * step must cover the refinement strength")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be positive")
        if self.clamp is not None:
            object.__setattr__(self, "clamp", (float(self.clamp[0]), float(self.clamp[1])))

    @property
    def bounds(self):
        return self.clamp if self.clamp is not None else (-math.inf, math.inf)


@dataclass(frozen=True)
class PnmlPrediction:
    label: int
    q: np.ndarray
    p: np.ndarray  # 0 for labels outside the candidate set
    regret: float
    candidates: np.ndarray
    refined: np.ndarray | None = None


@dataclass(frozen=True)
class PnmlBatch:
    labels: np.ndarray  # (N,)
    q: np.ndarray  # (N, C)
    log_p: np.ndarray  # (N, C), -inf outside the candidate set
    regret: np.ndarray  # (N,)
    candidates: np.ndarray  # (N, H)
    refined: np.ndarray | None = None  # (N, H, ...)

    def __len__(self):
        return self.labels.shape[0]

    def __getitem__(self, i):
        return PnmlPrediction(
            label=int(self.labels[i]),
            q=self.q[i],
            p=np.exp(self.log_p[i]),
            regret=float(self.regret[i]),
            candidates=self.candidates[i],
            refined=None if self.refined is None else self.refined[i],
        )


def _batched(params, x):
    x = np.asarray(x, dtype=params.dtype)
    in_shape = params.spec.input_shape
    if x.shape == in_shape:
        return x[None], True
    if x.shape[1:] != in_shape:
        raise DimensionError(f"input shape {x.shape} does not match model input {in_shape}")
    return x, False


def refine_batch(params: ModelParams, x, labels, cfg: RefineConfig) -> np.ndarray:
    """Refine each row of ``x`` toward its own label in ``labels``."""
    x = np.asarray(x, dtype=params.dtype)
    if cfg.strength == 0:
        return x.copy()
    lo, hi = cfg.bounds
    if cfg.iterations == 1:
        grad, _ = input_gradient(params, x, labels)
        return np.clip(x - cfg.strength * np.sign(grad), lo, hi).astype(x.dtype)
    cur = x
    for _ in range(cfg.iterations):
        grad, _ = input_gradient(params, cur, labels)
        cur = T.clamp_project(cur - cfg.step * np.sign(grad), x, cfg.strength, lo, hi).data
    return np.array(cur)


def refine(params: ModelParams, x, y_i: int, cfg: RefineConfig) -> np.ndarray:
    """Targeted descent step(s) of total size ``cfg.strength`` toward ``y_i``."""
    xb, single = _batched(params, x)
    if not 0 <= int(y_i) < params.spec.n_classes:
        raise IndexError(f"label {y_i} out of range")
    out = refine_batch(params, xb, np.full(xb.shape[0], int(y_i)), cfg)
    return out[0] if single else out


def candidate_labels(probs: np.ndarray, top_k: int | None) -> np.ndarray:
    """Candidate labels per row: all labels, or the ``top_k`` most probable.

    Candidates are listed in ascending label order; ties in probability go
    to the lower label.
    """
    n, c = probs.shape
    if top_k is None or top_k >= c:
        return np.broadcast_to(np.arange(c), (n, c)).copy()
    order = np.argsort(-probs, axis=1, kind="stable")[:, :top_k]
    return np.sort(order, axis=1)


def _hypotheses(params, xb, cfg, keep_refined=False):
    """Candidates ``(N, H)``, per-hypothesis log-probabilities and refined inputs."""
    n = xb.shape[0]
    if cfg.top_k is None or cfg.top_k >= params.spec.n_classes:
        cands = candidate_labels(np.zeros((n, params.spec.n_classes)), None)
    else:
        cands = candidate_labels(T.softmax(forward_logits(params, xb)), cfg.top_k)
    h = cands.shape[1]
    if cfg.strength == 0:
        # every hypothesis sees the unrefined input: one forward per sample
        log_p = _log_softmax(forward_logits(params, xb).data)[np.arange(n)[:, None], cands]
        refined = np.repeat(xb[:, None], h, axis=1) if keep_refined else None
        return cands, log_p.astype(np.float64), refined
    reps = np.repeat(xb, h, axis=0)
    flat = cands.reshape(-1)
    refined = refine_batch(params, reps, flat, cfg)
    logp_all = _log_softmax(forward_logits(params, refined).data)
    log_p = logp_all[np.arange(n * h), flat].reshape(n, h)
    refined = refined.reshape((n, h) + xb.shape[1:]) if keep_refined else None
    return cands, log_p.astype(np.float64), refined


def _log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def hypothesis_probs(params: ModelParams, x, cfg: RefineConfig):
    """``(candidates, p)`` where ``p[j]`` is the model's probability of
    ``candidates[j]`` at the input refined toward that label."""
    xb, single = _batched(params, x)
    cands, log_p, _ = _hypotheses(params, xb, cfg)
    p = np.exp(log_p)
    return (cands[0], p[0]) if single else (cands, p)


def pnml_assign(p):
    """Normalize hypothesis scores: ``q = p / sum(p)``, regret ``log sum(p)``."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise DimensionError("expected a non-empty vector of scores")
    if np.any(~(p > 0)):
        raise ContractError("hypothesis scores must be strictly positive")
    total = p.sum()
    return p / total, float(math.log(total))


def _assign_log(log_p):
    # log-space normalization; identical to pnml_assign without underflow
    peak = log_p.max(axis=1, keepdims=True)
    lse = peak[:, 0] + np.log(np.exp(log_p - peak).sum(axis=1))
    return np.exp(log_p - lse[:, None]), lse


def pnml_predict_batch(params: ModelParams, x, cfg: RefineConfig, chunk=64, keep_refined=False) -> PnmlBatch:
    xb, _ = _batched(params, x)
    n, c = xb.shape[0], params.spec.n_classes
    parts = []
    for start in range(0, n, chunk):
        parts.append(_hypotheses(params, xb[start : start + chunk], cfg, keep_refined))
    cands = np.concatenate([p[0] for p in parts])
    log_p_c = np.concatenate([p[1] for p in parts])
    refined = np.concatenate([p[2] for p in parts]) if keep_refined else None
    q_c, regret = _assign_log(log_p_c)
    rows = np.arange(n)[:, None]
    q = np.zeros((n, c))
    q[rows, cands] = q_c
    log_p = np.full((n, c), -np.inf)
    log_p[rows, cands] = log_p_c
    labels = np.argmax(q, axis=1)
    return PnmlBatch(labels, q, log_p, regret, cands, refined)


def pnml_predict(params: ModelParams, x, cfg: RefineConfig, keep_refined=False) -> PnmlPrediction:
    """Full prediction record for one sample."""
    xb, single = _batched(params, x)
    if not single:
        raise DimensionError("pnml_predict takes one sample; use pnml_predict_batch")
    return pnml_predict_batch(params, xb, cfg, keep_refined=keep_refined)[0]


# ---------------------------------------------------------------- end to end


@dataclass(frozen=True)
class EndToEndModel:
    """Base model plus refinement, evaluated as a single graph."""

    params: ModelParams
    refine: RefineConfig

    @property
    def spec(self):
        return self.params.spec


def end_to_end_forward(model: EndToEndModel, x: T.Tensor, tape: T.Tape | None = None):
    """Log-assignment ``log q`` over the candidates, recorded on ``x``'s tape.

    Returns ``(log_q, candidates)`` with shapes ``(N, H)``.  The refined
    inputs enter the graph through :func:`tensor.straight_through`, so on
    the backward pass each refinement acts as the identity on ``x``.
    """
    params, cfg = model.params, model.refine
    if not isinstance(x, T.Tensor):
        x = T.Tensor._wrap(np.asarray(x, dtype=params.dtype))
    if tape is not None and x.tape is not tape:
        raise ContractError("x must be watched on the supplied tape")
    single = x.shape == params.spec.input_shape
    if single:
        x = T.reshape(x, (1,) + x.shape)
    xb = np.asarray(x.data)
    n = xb.shape[0]
    if cfg.top_k is None or cfg.top_k >= params.spec.n_classes:
        cands = candidate_labels(np.zeros((n, params.spec.n_classes)), None)
    else:
        cands = candidate_labels(T.softmax(forward_logits(params, xb)), cfg.top_k)
    h = cands.shape[1]
    flat = cands.reshape(-1)
    refined = refine_batch(params, np.repeat(xb, h, axis=0), flat, cfg)
    xr = T.straight_through(x, refined, groups=h)
    logp = T.pick(T.log_softmax(forward_logits(params, xr)), flat)
    logp = T.reshape(logp, (n, h))
    log_q = T.sub(logp, T.reshape(T.logsumexp(logp, axis=1), (n, 1)))
    return log_q, cands


def end_to_end_loss(model: EndToEndModel, x: T.Tensor, labels, tape: T.Tape | None = None):
    """Per-sample ``-log q[label]`` tensor and its values.

    Samples whose label is not a candidate have infinite loss and do not
    contribute to the graph.
    """
    log_q, cands = end_to_end_forward(model, x, tape)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    hits = cands == labels[:, None]
    present = hits.any(axis=1)
    pos = np.where(present, hits.argmax(axis=1), 0)
    mask = present.astype(log_q.dtype)
    rows = T.neg(T.mul(T.pick(log_q, pos), mask))
    values = np.where(present, rows.data, np.inf)
    return rows, values
