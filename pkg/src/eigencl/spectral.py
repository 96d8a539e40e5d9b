"""RBF kernel over NDRE series, its leading eigenpairs and the derived stress weights."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from .data import Dataset
from .errors import ContractError, NumericalError, ParameterError

MAX_KERNEL_N = 20_000
MAX_ITER = 10_000
RESIDUAL_TOL = 1e-10
ACCEPT_TOL = 1e-8


def _as_matrix(data) -> np.ndarray:
    if isinstance(data, Dataset):
        return data.values
    x = np.asarray(data, dtype=float)
    if x.ndim != 2:
        raise ParameterError("expected an N x T matrix of series")
    return x


@dataclass(frozen=True, eq=False)
class KernelMatrix:
    entries: np.ndarray
    gamma: float

    @property
    def n(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True, eq=False)
class EigenBasis:
    eigenvalues: np.ndarray  # descending, length k
    eigenvectors: np.ndarray  # N x k, unit columns
    trace: float
    residuals: np.ndarray
    iterations: np.ndarray

    @property
    def k(self) -> int:
        return len(self.eigenvalues)


@dataclass(frozen=True, eq=False)
class StressWeights:
    w: np.ndarray
    source_component: int = 0

    def __len__(self) -> int:
        return len(self.w)


def median_heuristic_gamma(data, max_rows: int = 4000) -> float:
    """``1 / (2 * median^2)`` over pairwise series distances.

    Above ``max_rows`` rows the median is taken over an evenly spaced row subsample.
    Falls back to 1.0 when every series is identical (any gamma gives the same kernel).
    """
    x = _as_matrix(data)
    if x.shape[0] > max_rows:
        x = x[np.linspace(0, x.shape[0] - 1, max_rows).astype(int)]
    if x.shape[0] < 2:
        raise ParameterError("median heuristic needs at least two series")
    med = float(np.median(pdist(x)))
    if med == 0.0:
        warnings.warn("all series identical; median heuristic falls back to gamma=1", stacklevel=2)
        return 1.0
    return 1.0 / (2.0 * med * med)


def rbf_matrix(data, gamma: float, block: int = 256) -> KernelMatrix:
    """Gaussian kernel ``exp(-gamma * ||x_i - x_j||^2)`` over raw series."""
    if not gamma > 0:
        raise ParameterError(f"gamma must be positive, got {gamma}")
    x = _as_matrix(data)
    n = x.shape[0]
    if n < 2:
        raise ParameterError("kernel needs at least two series")
    if n > MAX_KERNEL_N:
        raise ParameterError(f"dense kernel limited to N <= {MAX_KERNEL_N}, got N = {n}")
    k = np.empty((n, n))
    # exact differences (not the dot-product expansion) keep K symmetric with a unit diagonal
    for start in range(0, n, block):
        diff = x[start : start + block, None, :] - x[None, :, :]
        np.exp(-gamma * np.einsum("ijt,ijt->ij", diff, diff), out=k[start : start + block])
    k.setflags(write=False)
    return KernelMatrix(k, float(gamma))


def _start_vector(n: int, index: int) -> np.ndarray:
    if index == 0:
        return np.full(n, 1.0 / np.sqrt(n))
    v = np.random.default_rng(index).standard_normal(n)
    return v / np.linalg.norm(v)


def _orthogonalize(v: np.ndarray, basis: np.ndarray) -> np.ndarray:
    if basis.shape[1]:
        # classical Gram-Schmidt, applied twice
        v = v - basis @ (basis.T @ v)
        v = v - basis @ (basis.T @ v)
    return v


def eigen_decompose(
    kernel: KernelMatrix | np.ndarray,
    k: int,
    max_iter: int = MAX_ITER,
    tol: float = RESIDUAL_TOL,
) -> EigenBasis:
    """Top-``k`` eigenpairs by power iteration with Gram-Schmidt deflation.

    Iteration on pair ``j`` stops once its residual under the deflated operator is
    ``<= tol * lam_1``; the undeflated residual ``||K v - lam v||`` must then be within
    ``1e-8 * lam_1``. Raises NumericalError if either fails within ``max_iter``.
    """
    a = kernel.entries if isinstance(kernel, KernelMatrix) else np.asarray(kernel, dtype=float)
    n = a.shape[0]
    if not 1 <= k <= n:
        raise ParameterError(f"k must be in [1, {n}], got {k}")
    vecs = np.zeros((n, 0))
    vals, residuals, iters = [], [], []
    scale = None
    for j in range(k):
        v = _orthogonalize(_start_vector(n, j), vecs)
        norm = np.linalg.norm(v)
        if norm < 1e-12:
            v = _orthogonalize(np.random.default_rng(10_000 + j).standard_normal(n), vecs)
            norm = np.linalg.norm(v)
        v /= norm
        lam, res = 0.0, np.inf
        for it in range(1, max_iter + 1):
            y = a @ v
            lam = float(v @ y)
            threshold = tol * (abs(lam) if scale is None else scale)
            # convergence is judged on the deflated operator; inexact earlier pairs
            # leave a floor in the undeflated residual
            yd = _orthogonalize(y, vecs)
            res = float(np.linalg.norm(yd - lam * v))
            if res <= threshold:
                break
            ny = np.linalg.norm(yd)
            if ny == 0.0:
                # v lies in the null space of the deflated operator
                break
            v = yd / ny
        else:
            raise NumericalError(
                f"eigenpair {j} did not converge in {max_iter} iterations "
                f"(residual {res:.3e}, target {threshold:.3e})"
            )
        res = float(np.linalg.norm(y - lam * v))
        limit = ACCEPT_TOL * (abs(lam) if scale is None else scale)
        if res > limit:
            raise NumericalError(
                f"eigenpair {j}: residual {res:.3e} exceeds {limit:.3e} after deflation"
            )
        if scale is None:
            scale = abs(lam)
        vecs = np.column_stack([vecs, v])
        vals.append(lam)
        residuals.append(res)
        iters.append(it)
    vals = np.array(vals)
    order = np.argsort(-vals, kind="stable")
    trace = float(np.trace(a))
    return EigenBasis(vals[order], vecs[:, order], trace, np.array(residuals)[order], np.array(iters)[order])


def fix_sign(v: np.ndarray) -> np.ndarray:
    """Orient ``v`` so its entry sum is positive; ties go to first nonzero entry positive."""
    v = np.asarray(v, dtype=float)
    total = v.sum()
    if abs(total) <= 1e-12 * max(1.0, np.abs(v).sum()):
        nz = np.flatnonzero(v)
        if nz.size and v[nz[0]] < 0:
            return -v
        return v.copy()
    return -v if total < 0 else v.copy()


def stress_weights(basis: EigenBasis, component: int = 0) -> StressWeights:
    if not 0 <= component < basis.k:
        raise ParameterError(f"component {component} not in basis of size {basis.k}")
    return StressWeights(fix_sign(basis.eigenvectors[:, component]), component)


def explained_variance_ratio(basis: EigenBasis) -> np.ndarray:
    if not basis.trace > 0:
        raise ParameterError("trace must be positive")
    return np.clip(basis.eigenvalues / basis.trace, 0.0, 1.0)


def weight_ndre_correlation(weights: StressWeights | np.ndarray, dataset) -> float:
    """Pearson r between eigen weights and per-patch mean NDRE."""
    w = weights.w if isinstance(weights, StressWeights) else np.asarray(weights, dtype=float)
    m = dataset.mean_ndre if isinstance(dataset, Dataset) else np.asarray(dataset, dtype=float)
    return pearson(w, m)


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ContractError(f"length mismatch {a.shape} vs {b.shape}")
    if a.size < 3:
        raise ContractError("correlation needs at least 3 points")
    da = a - a.mean()
    db = b - b.mean()
    sa = np.sqrt(da @ da)
    sb = np.sqrt(db @ db)
    if sa == 0 or sb == 0:
        raise ContractError("correlation undefined for zero-variance input")
    return float(np.clip((da @ db) / (sa * sb), -1.0, 1.0))


def weights_to_csv(patch_ids, weights: StressWeights) -> str:
    lines = ["patch_id,weight,component"]
    for pid, w in zip(patch_ids, weights.w):
        lines.append(f"{pid},{float(w)!r},{weights.source_component}")
    return "\n".join(lines) + "\n"


def weights_from_csv(text: str) -> tuple[list[str], StressWeights]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != "patch_id,weight,component":
        raise ParameterError("weights CSV needs header patch_id,weight,component")
    ids, w, comps = [], [], set()
    for ln in lines[1:]:
        pid, weight, comp = ln.split(",")
        ids.append(pid)
        w.append(float(weight))
        comps.add(int(comp))
    if len(comps) != 1:
        raise ParameterError("weights CSV mixes components")
    return ids, StressWeights(np.array(w), comps.pop())
