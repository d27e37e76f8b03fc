"""Uncertainty objectives on the next-token distribution and their gradients.

All three objectives are scalar functions of the logit vector z with
p = softmax(z):

* ``entropy``        H(p) = -sum_y p(y) log p(y)          (natural log)
* ``top_p_entropy``  H of the minimal descending-probability prefix whose
                     cumulative mass reaches ``mass``, renormalized to 1
* ``max_prob``       log max_y p(y)

Gradients are closed-form at the logit boundary:

* dH/dz_j = -p_j (log p_j + H), which is orthogonal to the all-ones
  direction (softmax shift invariance).
* d(log p_k*)/dz_j = delta_{jk*} - p_j for the argmax k* (ties broken by
  lowest index).
* The top-P gradient treats nucleus membership as fixed, i.e. it is the
  derivative of the current smooth piece; the measure-zero boundary where
  the nucleus changes is ignored.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Probabilities below this are clamped before log so 0 * log 0 == 0 exactly
# and no -inf leaks into gradients.
_P_FLOOR = 1e-300

ENTROPY = "entropy"
TOP_P_ENTROPY = "top_p_entropy"
MAX_PROB = "max_prob"
OBJECTIVE_KINDS = (ENTROPY, TOP_P_ENTROPY, MAX_PROB)


@dataclass(frozen=True)
class ObjectiveConfig:
    """Which uncertainty objective seeds the backward pass, and at which
    decoding step its next-token distribution is taken."""

    kind: str = ENTROPY
    mass: float = 0.9
    decode_step: int = 1

    def __post_init__(self) -> None:
        if self.kind not in OBJECTIVE_KINDS:
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if not (0.0 < self.mass <= 1.0):
            raise ValueError(f"mass must be in (0, 1], got {self.mass}")
        if self.decode_step < 1:
            raise ValueError("decode_step must be >= 1")

    def to_record(self) -> dict:
        return {"kind": self.kind, "mass": self.mass, "decode_step": self.decode_step}

    @staticmethod
    def from_record(rec: dict) -> "ObjectiveConfig":
        return ObjectiveConfig(
            kind=rec.get("kind", ENTROPY),
            mass=float(rec.get("mass", 0.9)),
            decode_step=int(rec.get("decode_step", 1)),
        )


@dataclass(frozen=True)
class NextTokenSummary:
    """Distribution statistics of one decoding step.

    Remote backends report only the statistics, so ``probs``/``logits``
    may be absent; everything downstream of the wire uses the scalars.
    """

    vocab: int
    decode_step: int
    max_prob: float
    entropy: float
    probs: np.ndarray | None = None
    logits: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.vocab < 1:
            raise ValueError("vocab must be >= 1")
        if not (0.0 < self.max_prob <= 1.0 + 1e-9):
            raise ValueError(f"max_prob {self.max_prob} outside (0, 1]")
        if not (-1e-9 <= self.entropy <= math.log(self.vocab) + 1e-9):
            raise ValueError(f"entropy {self.entropy} outside [0, ln vocab]")

    @staticmethod
    def from_probs(
        probs: np.ndarray, decode_step: int = 1, logits: np.ndarray | None = None
    ) -> "NextTokenSummary":
        probs = np.asarray(probs, dtype=np.float64)
        _check_distribution(probs)
        return NextTokenSummary(
            vocab=probs.size,
            decode_step=decode_step,
            max_prob=float(probs.max()),
            entropy=shannon_entropy(probs),
            probs=probs,
            logits=None if logits is None else np.asarray(logits, dtype=np.float64),
        )


def _check_distribution(probs: np.ndarray) -> None:
    if probs.ndim != 1 or probs.size < 1:
        raise ValueError("probability vector must be 1-D and non-empty")
    if np.any(probs < 0) or not np.all(np.isfinite(probs)):
        raise ValueError("invalid distribution: negative or non-finite entries")
    total = float(probs.sum())
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"invalid distribution: probabilities sum to {total}")


def _check_logits(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size < 1:
        raise ValueError("logit vector must be 1-D and non-empty")
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    return logits


def softmax(logits: np.ndarray) -> np.ndarray:
    """Shift-stabilized softmax."""
    logits = _check_logits(logits)
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def shannon_entropy(probs: np.ndarray) -> float:
    """H(p) = -sum p log p in nats, with the 0 log 0 = 0 convention."""
    probs = np.asarray(probs, dtype=np.float64)
    _check_distribution(probs)
    clamped = np.maximum(probs, _P_FLOOR)
    return float(-(probs * np.log(clamped)).sum())


def entropy_grad_logits(logits: np.ndarray) -> np.ndarray:
    """Exact gradient of shannon_entropy(softmax(z)) with respect to z."""
    p = softmax(logits)
    log_p = np.log(np.maximum(p, _P_FLOOR))
    h = float(-(p * log_p).sum())
    return -p * (log_p + h)


def top_p_nucleus(probs: np.ndarray, mass: float) -> np.ndarray:
    """Indices of the minimal descending-probability prefix with cumsum >= mass.

    Sorting ties are broken by original index ascending, so the nucleus is
    platform-independent.
    """
    if not (0.0 < mass <= 1.0):
        raise ValueError(f"mass must be in (0, 1], got {mass}")
    probs = np.asarray(probs, dtype=np.float64)
    _check_distribution(probs)
    order = np.lexsort((np.arange(probs.size), -probs))
    csum = np.cumsum(probs[order])
    # Tolerance absorbs rounding when mass == 1.0 and the sum is 1 - eps.
    cut = int(np.searchsorted(csum, mass - 1e-12)) + 1
    cut = min(cut, probs.size)
    return np.sort(order[:cut])


def top_p_entropy(
    probs: np.ndarray, mass: float, renormalize: bool = True
) -> tuple[float, np.ndarray]:
    """Entropy of the nucleus distribution; returns (value, nucleus indices).

    With ``renormalize`` (the default) the nucleus is rescaled to sum to 1
    before the entropy is taken, keeping the value comparable to the full
    entropy; with False the raw nucleus terms are summed as-is.
    """
    probs = np.asarray(probs, dtype=np.float64)
    nucleus = top_p_nucleus(probs, mass)
    q = probs[nucleus]
    if renormalize:
        q = q / q.sum()
    clamped = np.maximum(q, _P_FLOOR)
    return float(-(q * np.log(clamped)).sum()), nucleus


def max_prob_objective(logits: np.ndarray) -> tuple[float, np.ndarray]:
    """log of the top-1 probability and its logit gradient.

    grad_j = delta_{j,k} - p_j for the argmax k (ties to the lowest index).
    """
    p = softmax(logits)
    k = int(np.argmax(p))
    value = float(np.log(max(p[k], _P_FLOOR)))
    grad = -p.copy()
    grad[k] += 1.0
    return value, grad


def _top_p_grad_logits(logits: np.ndarray, mass: float) -> tuple[float, np.ndarray]:
    p = softmax(logits)
    value, nucleus = top_p_entropy(p, mass)
    z_mass = float(p[nucleus].sum())
    q = p[nucleus] / z_mass
    log_q = np.log(np.maximum(q, _P_FLOOR))
    # dV/dp_k = -(log q_k + V) / Z inside the nucleus, 0 outside.
    dv_dp = np.zeros_like(p)
    dv_dp[nucleus] = -(log_q + value) / z_mass
    # Softmax backward: dV/dz = p * (dV/dp - <dV/dp, p>).
    grad = p * (dv_dp - float(np.dot(dv_dp, p)))
    return value, grad


def objective_seed(
    config: ObjectiveConfig, logits: np.ndarray
) -> tuple[float, np.ndarray]:
    """Dispatch: (objective value, d value / d logits) for the configured kind."""
    logits = _check_logits(logits)
    if config.kind == ENTROPY:
        p = softmax(logits)
        return shannon_entropy(p), entropy_grad_logits(logits)
    if config.kind == MAX_PROB:
        return max_prob_objective(logits)
    if config.kind == TOP_P_ENTROPY:
        return _top_p_grad_logits(logits, config.mass)
    raise ValueError(f"unknown objective kind {config.kind!r}")
