"""Training: analytic reverse-mode gradients of the decomposed objective,
Adam with global-norm clipping, and the deterministic epoch loop.

The backward pass is hand-derived. Gradient flows through the
reparameterized sample, through both the sample and posterior arguments of
the pairwise density tensor behind the aggregate estimator, and through the
subject-embedding rows used in the batch; embedding rows of absent subjects
receive exactly zero gradient.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .dataset import Dataset, _rng
from .errors import ArgumentError, DataError, TrainingError
from .model import (ArchSpec, LOGVAR_CLAMP, ModelParams, PARAM_FIELDS,
                    encoder_input, init_params, save_checkpoint)
from .objective import (LOG_2PI, LossBreakdown, beta_schedule,
                        breakdown_from_parts, logsumexp)


@dataclass
class Gradients:
    embed_table: np.ndarray
    enc_w1: np.ndarray
    enc_b1: np.ndarray
    enc_w2: np.ndarray
    enc_b2: np.ndarray
    enc_mu_w: np.ndarray
    enc_mu_b: np.ndarray
    enc_logvar_w: np.ndarray
    enc_logvar_b: np.ndarray
    dec_w1: np.ndarray
    dec_b1: np.ndarray
    dec_w2: np.ndarray
    dec_b2: np.ndarray
    dec_out_w: np.ndarray
    dec_out_b: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def backward(p: ModelParams, batch_x: np.ndarray, batch_s: np.ndarray,
             eps: np.ndarray, beta: float,
             dataset_size: int) -> tuple[LossBreakdown, Gradients]:
    """Loss breakdown plus exact gradients of ``total`` w.r.t. every parameter."""
    if beta < 0:
        raise ArgumentError("beta must be non-negative")
    x = np.asarray(batch_x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    b = x.shape[0]
    d = p.arch.feature_dim

    # Forward with cached activations.
    xin = encoder_input(p, x, batch_s)
    s_idx = np.asarray(batch_s, dtype=np.int64)
    a1 = xin @ p.enc_w1 + p.enc_b1
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ p.enc_w2 + p.enc_b2
    h2 = np.maximum(a2, 0.0)
    mu = h2 @ p.enc_mu_w + p.enc_mu_b
    lv_raw = h2 @ p.enc_logvar_w + p.enc_logvar_b
    lv = np.clip(lv_raw, -LOGVAR_CLAMP, LOGVAR_CLAMP)
    sigma = np.exp(0.5 * lv)
    if eps.shape != mu.shape:
        raise ArgumentError(f"eps shape {eps.shape} != {mu.shape}")
    z = mu + sigma * eps

    d1 = z @ p.dec_w1 + p.dec_b1
    g1 = np.maximum(d1, 0.0)
    d2 = g1 @ p.dec_w2 + p.dec_b2
    g2 = np.maximum(d2, 0.0)
    x_hat = g2 @ p.dec_out_w + p.dec_out_b

    r = x - x_hat
    rec = float(np.mean(np.sum(r * r, axis=1)))

    t_diag = (z - mu) / sigma
    lqzx = (-0.5 * LOG_2PI - np.log(sigma) - 0.5 * t_diag * t_diag).sum(axis=1)
    logpz = (-0.5 * LOG_2PI - 0.5 * z * z).sum(axis=1)

    if b < 2:
        raise ArgumentError("aggregate estimator needs batch size >= 2")
    if dataset_size < b:
        raise ArgumentError("dataset_size must be >= batch size")
    t_pair = (z[:, None, :] - mu[None, :, :]) / sigma[None, :, :]   # (B,B,K)
    pair = -0.5 * LOG_2PI - np.log(sigma)[None, :, :] - 0.5 * t_pair * t_pair
    log_nb = float(np.log(float(dataset_size) * b))
    s_joint = pair.sum(axis=2)                                      # (B,B)
    logqz = logsumexp(s_joint, axis=1) - log_nb
    marg = logsumexp(pair, axis=1) - log_nb                         # (B,K)

    breakdown = breakdown_from_parts(rec, lqzx, logqz, marg.sum(axis=1),
                                     logpz, beta)
    for name, value in breakdown.terms().items():
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss term {name!r}", term=name)

    # Per-row weights of each log-density family in d(total).
    w_lqzx = 1.0 / b
    w_logqz = (beta - 1.0) / b
    w_marg = (1.0 - beta) / b
    w_logpz = -1.0 / b

    # Reconstruction -> decoder stack.
    gx_hat = (-2.0 / b) * r
    g_dec_out_w = g2.T @ gx_hat
    g_dec_out_b = gx_hat.sum(axis=0)
    gg2 = gx_hat @ p.dec_out_w.T
    gd2 = gg2 * (d2 > 0.0)
    g_dec_w2 = g1.T @ gd2
    g_dec_b2 = gd2.sum(axis=0)
    gg1 = gd2 @ p.dec_w2.T
    gd1 = gg1 * (d1 > 0.0)
    g_dec_w1 = z.T @ gd1
    g_dec_b1 = gd1.sum(axis=0)
    gz = gd1 @ p.dec_w1.T

    # Prior term.
    gz += w_logpz * (-z)

    # log q(z|x): direct derivatives w.r.t. (z, mu, sigma).
    gz += w_lqzx * (-t_diag / sigma)
    gmu = w_lqzx * (t_diag / sigma)
    gsigma = w_lqzx * ((t_diag * t_diag - 1.0) / sigma)

    # Pairwise density tensor: softmax weights of both logsumexp reductions.
    a_joint = np.exp(s_joint - (logqz + log_nb)[:, None])           # (B,B)
    m_marg = np.exp(pair - (marg + log_nb)[:, None, :])             # (B,B,K)
    g_pair = w_logqz * a_joint[:, :, None] + w_marg * m_marg
    q = g_pair * (t_pair / sigma[None, :, :])
    gz += -q.sum(axis=1)
    gmu += q.sum(axis=0)
    gsigma += (g_pair * ((t_pair * t_pair - 1.0) / sigma[None, :, :])).sum(axis=0)

    # Reparameterization: z = mu + sigma * eps.
    gmu_total = gmu + gz
    gsigma_total = gsigma + gz * eps
    glv = gsigma_total * (0.5 * sigma)
    glv *= np.abs(lv_raw) < LOGVAR_CLAMP  # clamp blocks gradient outside

    # Encoder stack.
    g_enc_mu_w = h2.T @ gmu_total
    g_enc_mu_b = gmu_total.sum(axis=0)
    g_enc_logvar_w = h2.T @ glv
    g_enc_logvar_b = glv.sum(axis=0)
    gh2 = gmu_total @ p.enc_mu_w.T + glv @ p.enc_logvar_w.T
    ga2 = gh2 * (a2 > 0.0)
    g_enc_w2 = h1.T @ ga2
    g_enc_b2 = ga2.sum(axis=0)
    gh1 = ga2 @ p.enc_w2.T
    ga1 = gh1 * (a1 > 0.0)
    g_enc_w1 = xin.T @ ga1
    g_enc_b1 = ga1.sum(axis=0)
    gxin = ga1 @ p.enc_w1.T

    g_embed = np.zeros_like(p.embed_table)
    np.add.at(g_embed, s_idx, gxin[:, d:])

    grads = Gradients(
        embed_table=g_embed,
        enc_w1=g_enc_w1, enc_b1=g_enc_b1,
        enc_w2=g_enc_w2, enc_b2=g_enc_b2,
        enc_mu_w=g_enc_mu_w, enc_mu_b=g_enc_mu_b,
        enc_logvar_w=g_enc_logvar_w, enc_logvar_b=g_enc_logvar_b,
        dec_w1=g_dec_w1, dec_b1=g_dec_b1,
        dec_w2=g_dec_w2, dec_b2=g_dec_b2,
        dec_out_w=g_dec_out_w, dec_out_b=g_dec_out_b,
    )
    return breakdown, grads


def clip_global_norm(g: Gradients, max_norm: float) -> tuple[Gradients, float]:
    """Scale all tensors so the global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ArgumentError("max_norm must be positive")
    sq = 0.0
    for name in PARAM_FIELDS:
        arr = getattr(g, name)
        sq += float(np.sum(arr * arr))
    norm = float(np.sqrt(sq))
    if norm > max_norm:
        scale = max_norm / norm
        for name in PARAM_FIELDS:
            getattr(g, name)[...] *= scale
    return g, norm


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    @classmethod
    def init(cls, p: ModelParams, lr: float = 1e-4) -> "AdamState":
        zeros = lambda: {k: np.zeros_like(v) for k, v in p.tensors().items()}
        return cls(m=zeros(), v=zeros(), lr=lr)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    @classmethod
    def from_tensors(cls, p: ModelParams, tensors: dict[str, np.ndarray],
                     step: int, lr: float) -> "AdamState":
        st = cls.init(p, lr=lr)
        st.step = step
        for k in PARAM_FIELDS:
            st.m[k][...] = tensors[f"adam.m.{k}"]
            st.v[k][...] = tensors[f"adam.v.{k}"]
        return st


def adam_step(p: ModelParams, g: Gradients, st: AdamState) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update, in place, in canonical tensor order."""
    st.step += 1
    bc1 = 1.0 - st.beta1 ** st.step
    bc2 = 1.0 - st.beta2 ** st.step
    for name in PARAM_FIELDS:
        grad = getattr(g, name)
        m = st.m[name]
        v = st.v[name]
        m *= st.beta1
        m += (1.0 - st.beta1) * grad
        v *= st.beta2
        v += (1.0 - st.beta2) * grad * grad
        update = (m / bc1) / (np.sqrt(v / bc2) + st.eps_hat)
        getattr(p, name)[...] -= st.lr * update
    return p, st


@dataclass
class TrainConfig:
    epochs: int = 16000
    batch_size: int = 64
    lr: float = 1e-4
    beta_final: float = 4.0
    warmup_epochs: int = 10
    clip_norm: float = 5.0
    latent_dim: int = 80
    embed_dim: int = 8
    hidden1: int = 512
    hidden2: int = 256
    ckpt_every: int = 0
    ckpt_path: str | None = None


LOG_COLUMNS = ["epoch", "rec", "mi", "tc", "dim_kl", "total", "beta",
               "grad_norm", "wall_ms"]


@dataclass
class EpochRecord:
    epoch: int
    rec: float
    mi: float
    tc: float
    dim_kl: float
    total: float
    beta: float
    grad_norm: float
    wall_ms: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ArgumentError("epochs must be strictly increasing")
        self.records.append(rec)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(LOG_COLUMNS)
            for r in self.records:
                writer.writerow([r.epoch, repr(r.rec), repr(r.mi), repr(r.tc),
                                 repr(r.dim_kl), repr(r.total), repr(r.beta),
                                 repr(r.grad_norm), repr(r.wall_ms)])

    @classmethod
    def from_csv(cls, path) -> "TrainLog":
        log = cls()
        with open(path, "r", encoding="utf-8", newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header != LOG_COLUMNS:
                raise DataError(f"{path}: bad loss-log header {header!r}")
            for row in reader:
                r = EpochRecord(int(row[0]), *[float(v) for v in row[1:]])
                expected = r.rec + r.mi + r.beta * r.tc + r.dim_kl
                if abs(r.total - expected) > 1e-6 * max(1.0, abs(r.total)):
                    raise DataError(
                        f"{path}: epoch {r.epoch} total violates decomposition"
                    )
                log.append(r)
        return log


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return _rng(seed, 20, epoch)


def train(d: Dataset, cfg: TrainConfig, seed: int,
          resume_params: ModelParams | None = None,
          resume_adam: AdamState | None = None,
          start_epoch: int = 0,
          pca=None) -> tuple[ModelParams, TrainLog]:
    """Epoch loop: deterministic shuffle, backward -> clip -> adam per batch.

    One eps draw per row per pass. Batch order and noise come from a
    counter-based generator keyed on (seed, epoch), so runs resume from a
    checkpoint bit-identically. A trailing batch of a single row is dropped
    because the aggregate estimator needs at least two rows.
    """
    if cfg.epochs < 0:
        raise ArgumentError("epochs must be non-negative")
    if cfg.batch_size < 2:
        raise ArgumentError("batch_size must be >= 2")

    if resume_params is not None:
        params = resume_params
        adam = resume_adam if resume_adam is not None else AdamState.init(params, cfg.lr)
    else:
        spec = ArchSpec(
            feature_dim=d.feature_dim,
            embed_dim=cfg.embed_dim,
            latent_dim=cfg.latent_dim,
            hidden1=cfg.hidden1,
            hidden2=cfg.hidden2,
            n_subjects=d.n_subjects,
        )
        params = init_params(spec, seed)
        adam = AdamState.init(params, cfg.lr)

    log = TrainLog()
    n = d.n_rows
    k = params.arch.latent_dim

    def write_ckpt(epoch_done: int) -> None:
        if cfg.ckpt_path is None:
            return
        save_checkpoint(cfg.ckpt_path, params,
                        meta={"epoch": epoch_done, "step": adam.step,
                              "seed": seed, "lr": repr(cfg.lr)},
                        adam_tensors=adam.tensors(), pca=pca)

    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        rng = _epoch_rng(seed, epoch)
        perm = rng.permutation(n)
        beta = beta_schedule(epoch, cfg.beta_final, cfg.warmup_epochs)

        sums = {"rec": 0.0, "mi": 0.0, "tc": 0.0, "dim_kl": 0.0, "total": 0.0}
        norm_sum = 0.0
        n_batches = 0
        rows_used = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            eps = rng.standard_normal((idx.size, k))
            if idx.size < 2:
                continue
            breakdown, grads = backward(params, d.x[idx], d.subject_of_row[idx],
                                        eps, beta, n)
            grads, norm = clip_global_norm(grads, cfg.clip_norm)
            adam_step(params, grads, adam)
            for key in sums:
                sums[key] += getattr(breakdown, key) * idx.size
            norm_sum += norm
            n_batches += 1
            rows_used += idx.size

        if rows_used == 0:
            raise ArgumentError("dataset too small to form a batch of 2 rows")
        wall_ms = (time.perf_counter() - t0) * 1000.0
        log.append(EpochRecord(
            epoch=epoch + 1,
            rec=sums["rec"] / rows_used,
            mi=sums["mi"] / rows_used,
            tc=sums["tc"] / rows_used,
            dim_kl=sums["dim_kl"] / rows_used,
            total=sums["total"] / rows_used,
            beta=beta,
            grad_norm=norm_sum / n_batches,
            wall_ms=round(wall_ms, 3),
        ))
        if cfg.ckpt_every > 0 and (epoch + 1) % cfg.ckpt_every == 0:
            write_ckpt(epoch + 1)

    write_ckpt(cfg.epochs)
    return params, log


# ---------------------------------------------------------------------------
# Finite-difference verification of the analytic gradients.
# ---------------------------------------------------------------------------

def finite_difference_check(p: ModelParams, batch_x, batch_s, eps,
                            beta: float, dataset_size: int,
                            h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error is |a - f| / max(|a|, |f|, 1); central differences run in
    full 64-bit through the same forward used in training.
    """
    from .objective import loss_breakdown

    _, grads = backward(p, batch_x, batch_s, eps, beta, dataset_size)
    worst = 0.0
    for name in PARAM_FIELDS:
        theta = getattr(p, name)
        analytic = getattr(grads, name)
        flat = theta.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_breakdown(p, batch_x, batch_s, eps, beta, dataset_size).total
            flat[i] = orig - h
            down = loss_breakdown(p, batch_x, batch_s, eps, beta, dataset_size).total
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - fd) / max(abs(a), abs(fd), 1.0)
            worst = max(worst, err)
    return worst


def random_tiny_gradcheck(n_models: int = 20, seed: int = 1,
                          h: float = 1e-5) -> float:
    """Keystone check: randomized tiny models, full objective, beta varied."""
    worst = 0.0
    for trial in range(n_models):
        rng = _rng(seed, 30, trial)
        spec = ArchSpec(feature_dim=6, embed_dim=2, latent_dim=3,
                        hidden1=8, hidden2=8, n_subjects=2)
        p = init_params(spec, int(rng.integers(0, 2 ** 31)))
        for name in PARAM_FIELDS:
            arr = getattr(p, name)
            arr += 0.3 * rng.standard_normal(arr.shape)
        batch_x = rng.standard_normal((4, 6))
        batch_s = rng.integers(0, 2, size=4)
        eps = rng.standard_normal((4, 3))
        beta = float(rng.uniform(0.5, 4.0))
        worst = max(worst, finite_difference_check(
            p, batch_x, batch_s, eps, beta, dataset_size=40, h=h))
    return worst
