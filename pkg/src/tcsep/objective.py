"""Decomposed training objective: reconstruction, mutual information,
total correlation, and dimension-wise KL.

total = rec + mi + beta * tc + dim_kl

The aggregated posterior and its marginals are estimated by minibatch
weighted sampling: each latent sample is scored against every posterior in
the batch, weighted by 1/(N*B). All accumulation is 64-bit; mi + tc + dim_kl
telescopes to the single-sample Monte Carlo KL exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError
from .model import LatentPosterior, ModelParams, decode, encode, reparameterize

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class LossBreakdown:
    rec: float
    mi: float
    tc: float
    dim_kl: float
    beta: float
    total: float
    kl_mc: float  # single-sample Monte Carlo KL, diagnostic

    def terms(self) -> dict[str, float]:
        return {"rec": self.rec, "mi": self.mi, "tc": self.tc,
                "dim_kl": self.dim_kl, "total": self.total, "kl_mc": self.kl_mc}


def log_normal_diag(z, mu, sigma) -> np.ndarray:
    """Elementwise log N(z; mu, sigma^2) under numpy broadcasting.

    Pass z as (B, 1, K) against mu/sigma (1, B, K) for the pairwise
    sample-vs-posterior tensor used by the aggregate estimator.
    """
    z = np.asarray(z, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    t = (z - mu) / sigma
    return -0.5 * LOG_2PI - np.log(sigma) - 0.5 * t * t


def logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(a - m), axis=axis)) + np.squeeze(m, axis=axis)
    return out


def estimate_aggregate_logq(z: np.ndarray, post: LatentPosterior,
                            dataset_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Minibatch-weighted estimates of log q(z) and its per-dimension marginals.

    Requires that row i of z was sampled from posterior row i. Returns
    (logqz (B,), logqz_marginals (B, K)), both including the -ln(N*B) weight.
    """
    z = np.asarray(z, dtype=np.float64)
    b, k = z.shape
    if b < 2:
        raise ArgumentError("aggregate estimator needs batch size >= 2")
    if dataset_size < b:
        raise ArgumentError("dataset_size must be >= batch size")
    pair = log_normal_diag(z[:, None, :], post.mu[None, :, :],
                           post.sigma[None, :, :])          # (B, B, K)
    log_nb = float(np.log(float(dataset_size) * b))
    logqz = logsumexp(pair.sum(axis=2), axis=1) - log_nb     # (B,)
    logqz_marginals = logsumexp(pair, axis=1) - log_nb       # (B, K)
    return logqz, logqz_marginals


def breakdown_from_parts(rec, lqzx, logqz, margsum, logpz, beta) -> LossBreakdown:
    mi = float(np.mean(lqzx - logqz))
    tc = float(np.mean(logqz - margsum))
    dim_kl = float(np.mean(margsum - logpz))
    kl_mc = float(np.mean(lqzx - logpz))
    total = rec + mi + beta * tc + dim_kl
    return LossBreakdown(rec, mi, tc, dim_kl, beta, total, kl_mc)


def loss_breakdown(p: ModelParams, batch_x: np.ndarray, batch_s: np.ndarray,
                   eps: np.ndarray, beta: float,
                   dataset_size: int) -> LossBreakdown:
    """Forward pass of the full objective on one batch."""
    if beta < 0:
        raise ArgumentError("beta must be non-negative")
    post = encode(p, batch_x, batch_s)
    z = reparameterize(post, eps)
    x_hat = decode(p, z)

    r = np.asarray(batch_x, dtype=np.float64) - x_hat
    rec = float(np.mean(np.sum(r * r, axis=1)))  # sum over features, mean over batch

    lqzx = log_normal_diag(z, post.mu, post.sigma).sum(axis=1)
    logpz = (-0.5 * LOG_2PI - 0.5 * z * z).sum(axis=1)
    logqz, marg = estimate_aggregate_logq(z, post, dataset_size)
    return breakdown_from_parts(rec, lqzx, logqz, marg.sum(axis=1), logpz, beta)


def beta_schedule(epoch: int, beta_final: float, warmup_epochs: int) -> float:
    """Linear ramp over the first ``warmup_epochs`` epochs, then fixed."""
    if epoch < 0:
        raise ArgumentError("epoch must be non-negative")
    if warmup_epochs < 0:
        raise ArgumentError("warmup_epochs must be non-negative")
    if warmup_epochs == 0:
        return float(beta_final)
    return float(beta_final) * min(1.0, (epoch + 1) / warmup_epochs)
