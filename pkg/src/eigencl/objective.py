"""Eigen-weight guided pull/push contrastive loss, its gradient, and an NT-Xent baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ParameterError

UNIT_NORM_TOL = 1e-4


@dataclass(frozen=True)
class LossHyper:
    lam: float = 4.0
    tau: float = 0.075
    sigma: float = 0.5
    margin: float = 0.2

    def __post_init__(self):
        if not (self.lam > 0 and self.tau > 0 and self.sigma > 0):
            raise ParameterError("lambda, tau and sigma must be positive")
        if not 0 <= self.margin < 1:
            raise ParameterError("margin must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "tau": self.tau, "sigma": self.sigma, "margin": self.margin}

    @classmethod
    def from_dict(cls, d: dict) -> "LossHyper":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class AffinityBatch:
    w_hat: np.ndarray
    S: np.ndarray


def normalize_weights(w_batch) -> np.ndarray:
    """Inverted min-max scaling ``(max - w) / (max - min)``; all zeros when the range is 0."""
    w = np.asarray(w_batch, dtype=float)
    if w.size < 2:
        raise ContractError("weight normalization needs a batch of at least 2")
    hi, lo = w.max(), w.min()
    if hi == lo:
        return np.zeros_like(w)
    return (hi - w) / (hi - lo)


def stress_affinity(w_hat, sigma: float) -> AffinityBatch:
    if not sigma > 0:
        raise ParameterError("sigma must be positive")
    w_hat = np.asarray(w_hat, dtype=float)
    delta = np.abs(w_hat[:, None] - w_hat[None, :])
    return AffinityBatch(w_hat, np.exp(-delta / sigma))


def _off_diagonal(b: int) -> np.ndarray:
    return ~np.eye(b, dtype=bool)


def pull_loss(sim, S, tau: float) -> float:
    sim = np.asarray(sim, dtype=float)
    off = _off_diagonal(sim.shape[0])
    return float(np.sum((S * np.log1p((1.0 - sim) / tau))[off]))


def push_loss(sim, S, lam: float, margin: float) -> float:
    sim = np.asarray(sim, dtype=float)
    off = _off_diagonal(sim.shape[0])
    return float(np.sum((lam * (1.0 - S) * np.maximum(0.0, sim - margin))[off]))


def _unit_rows(z) -> np.ndarray:
    z = np.asarray(z.z if hasattr(z, "z") else z, dtype=float)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ContractError("need a batch of at least 2 embeddings")
    norms = np.linalg.norm(z, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
        raise ContractError(f"embedding rows must be unit norm (max deviation {np.abs(norms - 1).max():.2e})")
    return z


def cosine_matrix(z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    norms = np.linalg.norm(z, axis=1)
    u = z / norms[:, None]
    return u @ u.T, u, norms


def _through_cosine(dsim: np.ndarray, u: np.ndarray, norms: np.ndarray) -> np.ndarray:
    # sim = u u^T with u = z / |z|; dsim is dL/dsim (any diagonal already zeroed)
    du = (dsim + dsim.T) @ u
    return (du - u * np.sum(du * u, axis=1, keepdims=True)) / norms[:, None]


def pair_loss(z, S, hyper: LossHyper) -> tuple[float, np.ndarray]:
    """Pull + push over ordered pairs ``i != j`` divided by ``B(B-1)``, for a given affinity.

    ``S`` is treated as a constant. The returned gradient is w.r.t. ``z`` through the
    cosine similarity.
    """
    z = _unit_rows(z)
    b = z.shape[0]
    S = np.asarray(S, dtype=float)
    if S.shape != (b, b):
        raise ContractError(f"affinity shape {S.shape} does not match batch of {b}")
    sim, u, norms = cosine_matrix(z)
    off = _off_diagonal(b)
    scale = 1.0 / (b * (b - 1))
    slack = sim - hyper.margin
    pull = np.sum((S * np.log1p((1.0 - sim) / hyper.tau))[off])
    push = np.sum((hyper.lam * (1.0 - S) * np.maximum(0.0, slack))[off])
    dsim = -S / (hyper.tau + 1.0 - sim) + hyper.lam * (1.0 - S) * (slack > 0)
    dsim = np.where(off, dsim, 0.0) * scale
    return float((pull + push) * scale), _through_cosine(dsim, u, norms)


def eigencl_loss(z, w_batch, hyper: LossHyper) -> tuple[float, np.ndarray]:
    """Loss and ``dL/dz`` for a batch of embeddings and their raw eigen weights."""
    aff = stress_affinity(normalize_weights(w_batch), hyper.sigma)
    return pair_loss(z, aff.S, hyper)


def cosine_affinity(x) -> np.ndarray:
    """``(1 + cos(x_i, x_j)) / 2`` from raw series; the no-eigen ablation's affinity."""
    x = np.asarray(x, dtype=float)
    norms = np.maximum(np.linalg.norm(x, axis=1), 1e-12)
    u = x / norms[:, None]
    return np.clip((1.0 + u @ u.T) / 2.0, 0.0, 1.0)


def ntxent_loss(z_a, z_b, tau: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Normalized-temperature cross entropy over ``2B`` views.

    Row ``i`` of ``z_a`` and row ``i`` of ``z_b`` are the positive pair; every other view
    in the batch is a negative. Returns the mean over anchors and gradients for both
    views.
    """
    za = np.asarray(z_a.z if hasattr(z_a, "z") else z_a, dtype=float)
    zb = np.asarray(z_b.z if hasattr(z_b, "z") else z_b, dtype=float)
    if za.shape != zb.shape:
        raise ContractError(f"view shapes differ: {za.shape} vs {zb.shape}")
    if za.ndim != 2 or za.shape[0] < 2:
        raise ContractError("NT-Xent needs a batch of at least 2 pairs")
    if not tau > 0:
        raise ParameterError("tau must be positive")
    b = za.shape[0]
    z = _unit_rows(np.vstack([za, zb]))
    n = 2 * b
    sim, u, norms = cosine_matrix(z)
    logits = sim / tau
    np.fill_diagonal(logits, -np.inf)
    shift = logits.max(axis=1, keepdims=True)
    expl = np.exp(logits - shift)
    denom = expl.sum(axis=1, keepdims=True)
    pos = np.concatenate([np.arange(b, n), np.arange(b)])
    rows = np.arange(n)
    log_prob_pos = logits[rows, pos] - shift[:, 0] - np.log(denom[:, 0])
    loss = -log_prob_pos.mean()
    # d loss / d logits = (softmax - onehot) / n
    dlog = expl / denom
    dlog[rows, pos] -= 1.0
    dlog /= n
    dsim = dlog / tau
    np.fill_diagonal(dsim, 0.0)
    g = _through_cosine(dsim, u, norms)
    return float(loss), g[:b], g[b:]
