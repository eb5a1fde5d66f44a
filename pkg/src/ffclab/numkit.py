"""Deterministic numerical core: seeded RNG streams, activation/loss primitives,
a decoupled-weight-decay adaptive optimizer step, and chi-square tail probabilities.

Everything here works on float64 numpy arrays and is a pure function of its
inputs; stateful pieces (optimizer moments, RNG) are passed in and returned
updated so callers control all state.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import gammaincc

from .errors import InvalidArgumentError


class Rng:
    """Seeded PCG64 stream addressed by (seed, stream).

    The generator is numpy's PCG64 initialized through
    ``SeedSequence(entropy=seed, spawn_key=(stream,))``, so the draw sequence is
    a platform-independent function of the (seed, stream) pair.  Distinct
    streams from one seed are statistically independent; stream ids are small
    integers assigned by callers (e.g. one stream per client, per repetition).

    Instances are stateful and must not be shared across threads.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def derive(self, stream: int) -> "Rng":
        """Fresh stream keyed by the same seed. Independent of this instance's position."""
        return Rng(self.seed, stream)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=size)

    def normal(self, size=None, loc: float = 0.0, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(loc, scale, size=size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def dirichlet(self, alpha) -> np.ndarray:
        return self._gen.dirichlet(np.asarray(alpha, dtype=np.float64))

    def bernoulli(self, p: float, size=None) -> np.ndarray:
        return (self._gen.uniform(0.0, 1.0, size=size) < p).astype(np.int8)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Rng(seed={self.seed}, stream={self.stream})"


def softmax(scores, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax with max-subtraction for stability.

    Returns a probability vector (entries >= 0, sum 1) for any finite input.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise InvalidArgumentError("softmax: scores must be finite")
    if not (np.isfinite(temperature) and temperature > 0):
        raise InvalidArgumentError(f"softmax: temperature must be positive, got {temperature}")
    x = scores / temperature
    x = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(x)
    return e / np.sum(e, axis=-1, keepdims=True)


def kl_div(p, q) -> float:
    """KL(p || q) = sum p_i ln(p_i / q_i), with the 0 * ln 0 := 0 convention."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise InvalidArgumentError(f"kl_div: shape mismatch {p.shape} vs {q.shape}")
    mask = p > 0
    if np.any(q[mask] <= 0):
        raise InvalidArgumentError("kl_div: q has a zero (or negative) entry where p > 0")
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def cosine(u, v) -> float:
    """Cosine similarity u.v / (|u||v|), clipped into [-1, 1]."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise InvalidArgumentError(f"cosine: shape mismatch {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise InvalidArgumentError("cosine: zero vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def cross_entropy_with_grad(logits, label: int) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy of a single logit vector and its gradient.

    loss = -ln softmax(logits)[label], grad = softmax(logits) - onehot(label),
    computed via log-sum-exp so saturated logits stay finite.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not (0 <= label < logits.shape[-1]):
        raise InvalidArgumentError(f"cross_entropy: label {label} out of range for {logits.shape[-1]} classes")
    m = np.max(logits)
    lse = m + np.log(np.sum(np.exp(logits - m)))
    loss = lse - logits[label]
    grad = np.exp(logits - lse)
    grad[label] -= 1.0
    return float(loss), grad


@dataclass
class OptimizerState:
    """Moments and hyperparameters for the decoupled-weight-decay update.

    ``lr`` may be a scalar or a per-parameter vector (used to run the adapter
    and classifier blocks at different rates).
    """

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float | np.ndarray = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def fresh(cls, n_params: int, **hyper) -> "OptimizerState":
        return cls(m=np.zeros(n_params), v=np.zeros(n_params), step=0, **hyper)


def adamw_step(params, grads, state: OptimizerState) -> tuple[np.ndarray, OptimizerState]:
    """One AdamW step: bias-corrected moment update plus decoupled weight decay.

    Pure: returns (new_params, new_state) without mutating the inputs.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise InvalidArgumentError(
            f"adamw_step: shape mismatch params {params.shape}, grads {grads.shape}, moments {state.m.shape}"
        )
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params * (1.0 - state.lr * state.weight_decay) - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, m=m, v=v, step=t)


def chi2_sf(x: float, df: int) -> float:
    """Chi-square survival function P(X >= x) via the regularized upper incomplete gamma."""
    if not (np.isfinite(x) and x >= 0):
        raise InvalidArgumentError(f"chi2_sf: x must be nonnegative, got {x}")
    if df < 1:
        raise InvalidArgumentError(f"chi2_sf: df must be a positive integer, got {df}")
    return float(gammaincc(df / 2.0, x / 2.0))
