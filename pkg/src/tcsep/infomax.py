"""Linear ICA baseline: PCA whitening followed by natural-gradient InfoMax
with a logistic nonlinearity. Full-data batch updates keep the fit
deterministic; the step size anneals whenever the update norm grows.

The logistic score targets super-Gaussian sources; sub-Gaussian sources are
outside this baseline's regime (no extended-InfoMax switching).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .analysis import ComponentSet, finalize_component_set
from .dataset import Dataset, PcaBasis, pca_fit, pca_inverse, pca_transform
from .errors import ArgumentError, NumericalError

DIVERGENCE_NORM = 1e6


@dataclass
class IcaConfig:
    lr: float = 0.0          # 0 -> default 0.01 / ln(k)
    max_iter: int = 1000
    tol: float = 1e-7
    anneal: float = 0.9


@dataclass
class UnmixingModel:
    whitener: PcaBasis       # whiten=True, P = k
    w: np.ndarray            # (k, k) unmixing in whitened space
    converged: bool
    iterations: int


def _logistic(u: np.ndarray) -> np.ndarray:
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    e = np.exp(u[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def infomax_fit(d: Dataset, k: int, cfg: IcaConfig | None = None) -> UnmixingModel:
    """Whiten to k dimensions, then iterate
    w <- w + lr * (I + mean_t[(1 - 2*logistic(u_t)) u_t^T]) w until the
    relative update norm drops below tolerance."""
    cfg = cfg or IcaConfig()
    if not 1 <= k <= min(d.n_rows, d.feature_dim):
        raise ArgumentError(f"k={k} out of range")
    whitener = pca_fit(d, k, whiten=True)
    y = pca_transform(whitener, d.x)          # (N, k), identity covariance
    n = y.shape[0]

    lr = cfg.lr if cfg.lr > 0 else 0.01 / max(np.log(k), 1.0)
    w = np.eye(k)
    eye = np.eye(k)
    prev_step = np.inf
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iter + 1):
        u = y @ w.T                            # (N, k) source estimates
        score = 1.0 - 2.0 * _logistic(u)
        natural = (eye + (score.T @ u) / n) @ w
        delta = lr * natural
        w = w + delta
        w_norm = float(np.linalg.norm(w))
        if not np.isfinite(w_norm) or w_norm > DIVERGENCE_NORM:
            raise NumericalError(
                "InfoMax diverged; retry with a smaller learning rate")
        step = float(np.linalg.norm(delta))
        if step > prev_step:
            lr *= cfg.anneal
        prev_step = step
        if step / max(w_norm, 1e-300) < cfg.tol:
            converged = True
            break
    return UnmixingModel(whitener, w, converged, iterations)


def unmix(m: UnmixingModel, d: Dataset) -> ComponentSet:
    """Recovered time courses and spatial maps in the shared ComponentSet
    normalization, so cross-method matching applies unchanged."""
    if d.feature_dim != m.whitener.components.shape[0]:
        raise ArgumentError(
            f"dataset dim {d.feature_dim} != whitener dim "
            f"{m.whitener.components.shape[0]}"
        )
    y = pca_transform(m.whitener, d.x)
    u = y @ m.w.T
    tcs = [u[d.rows_of_subject(s)] for s in range(d.n_subjects)]

    # y = u @ mixing with mixing = inv(w)^T; rows are whitened-space maps.
    try:
        mixing = np.linalg.inv(m.w).T
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"unmixing matrix singular: {e}")
    maps = pca_inverse(m.whitener, mixing)
    return finalize_component_set(maps, tcs, "infomax")
