"""Subject-conditioned encoder/decoder: a diagonal-Gaussian posterior MLP
conditioned on a learned per-subject embedding, and an unconditioned
mirrored decoder.

Encoder: [x; e_s] -> h1 -> h2 -> (mu, logvar), ReLU hidden layers.
Decoder: z -> h2 -> h1 -> x_hat, ReLU hidden layers, linear output.
The log-variance head is clamped to [-10, 10] before exponentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import io
from .errors import ArgumentError, FormatError
from .dataset import PcaBasis, _rng

LOGVAR_CLAMP = 10.0


@dataclass
class ArchSpec:
    feature_dim: int
    embed_dim: int = 8
    latent_dim: int = 80
    hidden1: int = 512
    hidden2: int = 256
    n_subjects: int = 1


@dataclass
class ModelParams:
    embed_table: np.ndarray     # (S, m)
    enc_w1: np.ndarray          # (D+m, H1)
    enc_b1: np.ndarray
    enc_w2: np.ndarray          # (H1, H2)
    enc_b2: np.ndarray
    enc_mu_w: np.ndarray        # (H2, K)
    enc_mu_b: np.ndarray
    enc_logvar_w: np.ndarray    # (H2, K)
    enc_logvar_b: np.ndarray
    dec_w1: np.ndarray          # (K, H2)
    dec_b1: np.ndarray
    dec_w2: np.ndarray          # (H2, H1)
    dec_b2: np.ndarray
    dec_out_w: np.ndarray       # (H1, D)
    dec_out_b: np.ndarray
    arch: ArchSpec

    def tensors(self) -> dict[str, np.ndarray]:
        """Named parameter tensors in canonical (field) order."""
        return {f.name: getattr(self, f.name)
                for f in fields(self) if f.name != "arch"}

    def set_tensors(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            getattr(self, name)[...] = arr

    @property
    def latent_dim(self) -> int:
        return self.arch.latent_dim


PARAM_FIELDS = tuple(f.name for f in fields(ModelParams) if f.name != "arch")


@dataclass
class LatentPosterior:
    mu: np.ndarray      # (B, K)
    sigma: np.ndarray   # (B, K), strictly positive
    logvar: np.ndarray  # (B, K), clamped; sigma == exp(logvar / 2)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_params(spec: ArchSpec, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases, N(0, 0.01^2) embeddings.

    Draw order is fixed so identical seeds give bit-identical parameters.
    """
    rng = _rng(seed, 10)
    d, m, k = spec.feature_dim, spec.embed_dim, spec.latent_dim
    h1, h2 = spec.hidden1, spec.hidden2
    embed = rng.normal(0.0, 0.01, size=(spec.n_subjects, m))
    return ModelParams(
        embed_table=embed,
        enc_w1=_glorot(rng, d + m, h1),
        enc_b1=np.zeros(h1),
        enc_w2=_glorot(rng, h1, h2),
        enc_b2=np.zeros(h2),
        enc_mu_w=_glorot(rng, h2, k),
        enc_mu_b=np.zeros(k),
        enc_logvar_w=_glorot(rng, h2, k),
        enc_logvar_b=np.zeros(k),
        dec_w1=_glorot(rng, k, h2),
        dec_b1=np.zeros(h2),
        dec_w2=_glorot(rng, h2, h1),
        dec_b2=np.zeros(h1),
        dec_out_w=_glorot(rng, h1, d),
        dec_out_b=np.zeros(d),
        arch=spec,
    )


def _check_subjects(p: ModelParams, s: np.ndarray) -> np.ndarray:
    s = np.asarray(s)
    if s.ndim != 1:
        raise ArgumentError("subject vector must be 1-D")
    if not np.issubdtype(s.dtype, np.integer):
        raise ArgumentError("subject ids must be integers")
    if s.size and (s.min() < 0 or s.max() >= p.embed_table.shape[0]):
        raise ArgumentError(
            f"subject id out of range [0, {p.embed_table.shape[0]})"
        )
    return s.astype(np.int64)


def encoder_input(p: ModelParams, x: np.ndarray, s: np.ndarray) -> np.ndarray:
    s = _check_subjects(p, s)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != s.shape[0]:
        raise ArgumentError("x must be (B, D) aligned with subject ids")
    if x.shape[1] != p.arch.feature_dim:
        raise ArgumentError(
            f"feature dim {x.shape[1]} != model dim {p.arch.feature_dim}"
        )
    return np.concatenate([x, p.embed_table[s]], axis=1)


def encode(p: ModelParams, x: np.ndarray, s: np.ndarray) -> LatentPosterior:
    xin = encoder_input(p, x, s)
    h1 = np.maximum(xin @ p.enc_w1 + p.enc_b1, 0.0)
    h2 = np.maximum(h1 @ p.enc_w2 + p.enc_b2, 0.0)
    mu = h2 @ p.enc_mu_w + p.enc_mu_b
    logvar = np.clip(h2 @ p.enc_logvar_w + p.enc_logvar_b,
                     -LOGVAR_CLAMP, LOGVAR_CLAMP)
    return LatentPosterior(mu, np.exp(0.5 * logvar), logvar)


def reparameterize(post: LatentPosterior, eps: np.ndarray) -> np.ndarray:
    """z = mu + sigma * eps; eps is injected so sampling is testable."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != post.mu.shape:
        raise ArgumentError(
            f"eps shape {eps.shape} != posterior shape {post.mu.shape}"
        )
    return post.mu + post.sigma * eps


def decode(p: ModelParams, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != p.arch.latent_dim:
        raise ArgumentError(
            f"z must be (B, {p.arch.latent_dim}), got {z.shape}"
        )
    g1 = np.maximum(z @ p.dec_w1 + p.dec_b1, 0.0)
    g2 = np.maximum(g1 @ p.dec_w2 + p.dec_b2, 0.0)
    return g2 @ p.dec_out_w + p.dec_out_b


def gaussian_kl_analytic(post: LatentPosterior) -> np.ndarray:
    """Per-row KL(q(z|x) || N(0, I)) in closed form."""
    mu2 = post.mu ** 2
    var = post.sigma ** 2
    return 0.5 * np.sum(mu2 + var - 1.0 - post.logvar, axis=1)


# ---------------------------------------------------------------------------
# Checkpoints: one named-tensor container plus a plain-text sidecar with the
# architecture and training step counters. PCA bases and Adam moments ride
# along so extraction and resumed training see the exact training state.
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, meta: dict | None = None,
                    adam_tensors: dict[str, np.ndarray] | None = None,
                    pca: PcaBasis | None = None) -> None:
    tensors = dict(params.tensors())
    if adam_tensors:
        tensors.update(adam_tensors)
    if pca is not None:
        tensors["pca.mean"] = pca.mean
        tensors["pca.components"] = pca.components
        tensors["pca.singular_values"] = pca.singular_values
    io.write_container(path, tensors)

    arch = params.arch
    sidecar: dict[str, object] = {
        "feature_dim": arch.feature_dim,
        "embed_dim": arch.embed_dim,
        "latent_dim": arch.latent_dim,
        "hidden1": arch.hidden1,
        "hidden2": arch.hidden2,
        "n_subjects": arch.n_subjects,
    }
    if pca is not None:
        sidecar["pca.whiten"] = "true" if pca.whiten else "false"
        sidecar["pca.n_rows"] = pca.n_rows
    if meta:
        sidecar.update(meta)
    io.write_kv_text(str(path) + ".meta", sidecar)


def load_checkpoint(path):
    """Returns (params, meta, adam_tensors, pca_or_none)."""
    tensors = io.read_container(path)
    meta = io.read_kv_text(str(path) + ".meta")
    try:
        spec = ArchSpec(
            feature_dim=int(meta["feature_dim"]),
            embed_dim=int(meta["embed_dim"]),
            latent_dim=int(meta["latent_dim"]),
            hidden1=int(meta["hidden1"]),
            hidden2=int(meta["hidden2"]),
            n_subjects=int(meta["n_subjects"]),
        )
    except KeyError as e:
        raise FormatError(f"checkpoint sidecar missing {e}") from None

    param_tensors = {}
    for name in PARAM_FIELDS:
        if name not in tensors:
            raise FormatError(f"checkpoint missing tensor {name!r}")
        param_tensors[name] = tensors[name].astype(np.float64)
    params = ModelParams(**param_tensors, arch=spec)

    adam_tensors = {k: v for k, v in tensors.items() if k.startswith("adam.")}
    pca = None
    if "pca.components" in tensors:
        pca = PcaBasis(
            mean=tensors["pca.mean"],
            components=tensors["pca.components"],
            singular_values=tensors["pca.singular_values"],
            whiten=meta.get("pca.whiten", "false") == "true",
            n_rows=int(meta.get("pca.n_rows", "0")),
        )
    return params, meta, adam_tensors, pca
