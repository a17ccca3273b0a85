"""Post-hoc component analysis: latent time courses, spatial map extraction,
functional connectivity with hierarchical reordering, cross-method matching,
and ground-truth recovery scores.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import io
from ._parallel import ordered_map
from .dataset import Dataset, PcaBasis, SyntheticTruth, pca_inverse
from .errors import ArgumentError, NumericalError
from .model import ModelParams, encode

logger = logging.getLogger(__name__)

EXTRACTION_METHODS = ("tcvae_regression", "tcvae_jacobian", "infomax")


@dataclass
class ComponentSet:
    spatial: np.ndarray              # (K, D_original), unit L2 rows
    timecourses: list[np.ndarray]    # per subject (T_s, K), zero-mean columns
    method: str
    latent_order: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.latent_order is None:
            self.latent_order = np.arange(self.spatial.shape[0], dtype=np.int64)

    @property
    def n_components(self) -> int:
        return self.spatial.shape[0]

    def pooled_timecourses(self) -> np.ndarray:
        return np.concatenate(self.timecourses, axis=0)


@dataclass
class FncMatrix:
    r: np.ndarray           # (K, K), thresholded
    r_raw: np.ndarray       # (K, K), pre-threshold; clustering runs on this
    threshold: float
    order: np.ndarray       # (K,)
    n_subjects_averaged: int
    degenerate_components: tuple[int, ...] = ()


def finalize_component_set(spatial: np.ndarray, timecourses: list[np.ndarray],
                           method: str,
                           latent_order: np.ndarray | None = None) -> ComponentSet:
    """Normalize maps to unit L2 rows with a deterministic sign, rescaling
    time courses so the timecourse-by-map product is preserved, then zero-mean
    each time-course column per subject."""
    spatial = np.array(spatial, dtype=np.float64)
    tcs = [np.array(t, dtype=np.float64) for t in timecourses]
    k = spatial.shape[0]
    scale = np.ones(k)
    for i in range(k):
        norm = np.linalg.norm(spatial[i])
        if norm > 1e-12:
            spatial[i] /= norm
            scale[i] = norm
        pivot = np.argmax(np.abs(spatial[i]))
        if spatial[i, pivot] < 0:
            spatial[i] = -spatial[i]
            scale[i] = -scale[i]
    tcs = [t * scale[None, :] for t in tcs]
    tcs = [t - t.mean(axis=0) for t in tcs]
    return ComponentSet(spatial, tcs, method,
                        None if latent_order is None else np.asarray(latent_order))


def latent_timecourses(p: ModelParams, d: Dataset,
                       batch_rows: int = 4096) -> list[np.ndarray]:
    """Posterior means per row (no sampling), split by subject and zero-meaned
    per subject per latent dimension."""
    if d.feature_dim != p.arch.feature_dim:
        raise ArgumentError(
            f"dataset dim {d.feature_dim} != checkpoint dim {p.arch.feature_dim}"
        )
    chunks = []
    for start in range(0, d.n_rows, batch_rows):
        stop = min(start + batch_rows, d.n_rows)
        post = encode(p, d.x[start:stop], d.subject_of_row[start:stop])
        chunks.append(post.mu)
    mu = np.concatenate(chunks, axis=0)
    out = []
    for s in range(d.n_subjects):
        block = mu[d.rows_of_subject(s)]
        out.append(block - block.mean(axis=0))
    return out


REGRESSION_RIDGE = 1e-6


def spatial_maps_regression(tcs: list[np.ndarray], d: Dataset,
                            pca: PcaBasis | None = None,
                            n_threads: int = 1) -> ComponentSet:
    """Per-subject least squares of the data on the time courses, averaged
    across subjects and back-projected to the original feature space."""
    if len(tcs) != d.n_subjects:
        raise ArgumentError("one time-course block per subject required")

    def solve_subject(s: int) -> np.ndarray:
        t = tcs[s]
        x = d.x[d.rows_of_subject(s)]
        if t.shape[0] != x.shape[0]:
            raise ArgumentError(f"subject {s}: time courses misaligned with rows")
        gram = t.T @ t + REGRESSION_RIDGE * np.eye(t.shape[1])
        try:
            maps = np.linalg.solve(gram, t.T @ x)
        except np.linalg.LinAlgError as e:
            raise NumericalError(f"subject {s}: normal equations singular: {e}")
        if not np.all(np.isfinite(maps)):
            raise NumericalError(f"subject {s}: non-finite regression maps")
        return maps

    per_subject = ordered_map(solve_subject, range(d.n_subjects), n_threads)
    maps = np.mean(per_subject, axis=0)
    if pca is not None:
        maps = pca_inverse(pca, maps)
    return finalize_component_set(maps, tcs, "tcvae_regression")


def decoder_jacobian(p: ModelParams, z_row: np.ndarray) -> np.ndarray:
    """Exact forward-mode Jacobian d x_hat / d z at one latent point (K, D)."""
    d1 = z_row @ p.dec_w1 + p.dec_b1
    g1 = np.maximum(d1, 0.0)
    d2 = g1 @ p.dec_w2 + p.dec_b2
    j = (p.dec_w1 * (d1 > 0.0)[None, :]) @ (p.dec_w2 * (d2 > 0.0)[None, :])
    return j @ p.dec_out_w


def spatial_maps_jacobian(p: ModelParams, d: Dataset, n_probe: int = 64,
                          pca: PcaBasis | None = None,
                          n_threads: int = 1) -> ComponentSet:
    """Decoder sensitivity maps: mean Jacobian over posterior-mean latents at
    evenly spaced probe rows."""
    if n_probe < 1:
        raise ArgumentError("n_probe must be >= 1")
    tcs = latent_timecourses(p, d)
    idx = np.unique(np.round(np.linspace(0, d.n_rows - 1, n_probe)).astype(int))
    post = encode(p, d.x[idx], d.subject_of_row[idx])
    jacs = ordered_map(lambda row: decoder_jacobian(p, row), post.mu, n_threads)
    maps = np.mean(jacs, axis=0)
    if pca is not None:
        maps = pca_inverse(pca, maps)
    return finalize_component_set(maps, tcs, "tcvae_jacobian")


def _corr_columns(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pearson correlation between columns of a (n,p) and b (n,q) -> (p,q).

    Zero-variance columns yield zero correlation; the boolean mask of valid
    (non-degenerate) pairs is returned alongside.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    sa = np.sqrt(np.sum(ac * ac, axis=0))
    sb = np.sqrt(np.sum(bc * bc, axis=0))
    ok_a = sa > 1e-12
    ok_b = sb > 1e-12
    denom = np.outer(np.where(ok_a, sa, 1.0), np.where(ok_b, sb, 1.0))
    r = (ac.T @ bc) / denom
    valid = np.outer(ok_a, ok_b)
    r[~valid] = 0.0
    return np.clip(r, -1.0, 1.0), valid


def fnc(tcs: list[np.ndarray], threshold: float = 0.05,
        n_threads: int = 1) -> FncMatrix:
    """Average functional connectivity: per-subject Pearson correlations of
    time-course columns, Fisher-z averaged across subjects, then thresholded
    at |r| <= threshold (diagonal retained)."""
    if not tcs:
        raise ArgumentError("need at least one subject")
    k = tcs[0].shape[1]
    degenerate: set[int] = set()

    def subject_corr(t: np.ndarray) -> np.ndarray:
        if t.shape[0] < 3:
            raise ArgumentError("each subject needs at least 3 timepoints")
        if t.shape[1] != k:
            raise ArgumentError("inconsistent component count across subjects")
        r, valid = _corr_columns(t, t)
        bad = np.where(~valid.diagonal())[0]
        degenerate.update(int(i) for i in bad)
        return r

    lim = 1.0 - 1e-15
    zs = [np.arctanh(np.clip(c, -lim, lim))
          for c in ordered_map(subject_corr, tcs, n_threads)]
    r_raw = np.tanh(np.mean(zs, axis=0))
    r_raw = np.clip((r_raw + r_raw.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(r_raw, 1.0)
    if degenerate:
        logger.warning("zero-variance time courses for components %s",
                       sorted(degenerate))

    r = r_raw.copy()
    off = np.abs(r) <= threshold
    np.fill_diagonal(off, False)
    r[off] = 0.0
    return FncMatrix(r=r, r_raw=r_raw, threshold=float(threshold),
                     order=np.arange(k, dtype=np.int64),
                     n_subjects_averaged=len(tcs),
                     degenerate_components=tuple(sorted(degenerate)))


def hcluster_order(f: FncMatrix) -> np.ndarray:
    """Leaf order of average-linkage clustering on distance 1 - |r| computed
    from pre-threshold values. Merge ties break toward the lower component
    index; the merge tree is traversed left (earlier) child first."""
    k = f.r_raw.shape[0]
    if k < 2:
        raise ArgumentError("need at least 2 components to cluster")
    dist = 1.0 - np.abs(f.r_raw)

    # Clusters kept sorted by smallest member; Lance-Williams average update.
    members: list[list[int]] = [[i] for i in range(k)]
    trees: list[object] = list(range(k))
    return _hcluster_run(dist, members, trees, list(range(k)))


def _hcluster_run(d, members, trees, active) -> np.ndarray:
    sizes = {i: 1 for i in active}
    dmat = {}
    for ai in range(len(active)):
        for aj in range(ai + 1, len(active)):
            i, j = active[ai], active[aj]
            dmat[(i, j)] = d[i, j]

    def get(i, j):
        return dmat[(i, j)] if i < j else dmat[(j, i)]

    min_member = {i: members[i][0] for i in active}
    next_id = len(active)
    while len(active) > 1:
        ordered = sorted(active, key=lambda c: min_member[c])
        best = None
        best_pair = None
        for ai in range(len(ordered)):
            for aj in range(ai + 1, len(ordered)):
                val = get(ordered[ai], ordered[aj])
                if best is None or val < best:
                    best = val
                    best_pair = (ordered[ai], ordered[aj])
        a, b = best_pair
        if min_member[b] < min_member[a]:
            a, b = b, a
        new = next_id
        next_id += 1
        members.append(members[a] + members[b])
        trees.append((trees[a], trees[b]))
        sizes[new] = sizes[a] + sizes[b]
        min_member[new] = min(min_member[a], min_member[b])
        for c in active:
            if c in (a, b):
                continue
            dmat[(min(c, new), max(c, new))] = (
                sizes[a] * get(c, a) + sizes[b] * get(c, b)
            ) / (sizes[a] + sizes[b])
        active = [c for c in active if c not in (a, b)] + [new]

    order: list[int] = []

    def walk(node):
        if isinstance(node, tuple):
            walk(node[0])
            walk(node[1])
        else:
            order.append(node)

    walk(trees[active[0]])
    return np.array(order, dtype=np.int64)


def _all_permutations(n: int) -> np.ndarray:
    """All permutations of 0..n-1 by iterative insertion, as an (n!, n) array."""
    perms = np.zeros((1, 1), dtype=np.int8)
    for size in range(2, n + 1):
        blocks = []
        for pos in range(size):
            col = np.full((perms.shape[0], 1), size - 1, dtype=np.int8)
            blocks.append(np.concatenate(
                [perms[:, :pos], col, perms[:, pos:]], axis=1))
        perms = np.concatenate(blocks, axis=0)
    return perms


def exhaustive_assignment(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """Exact minimum-cost one-to-one assignment by full enumeration.

    Only sensible for small square matrices (n <= 10); serves as the
    independent oracle for the polynomial algorithm.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise ArgumentError("exhaustive assignment needs a square cost matrix")
    if n > 10:
        raise ArgumentError("exhaustive assignment capped at n=10")
    perms = _all_permutations(n)
    rows = np.arange(n)
    best_val = np.inf
    best_perm = None
    chunk = 300_000
    for start in range(0, perms.shape[0], chunk):
        block = perms[start:start + chunk].astype(np.int64)
        vals = cost[rows[None, :], block].sum(axis=1)
        i = int(np.argmin(vals))
        if vals[i] < best_val:
            best_val = float(vals[i])
            best_perm = block[i].copy()
    return best_perm, best_val


def _assign(cost: np.ndarray) -> np.ndarray:
    """Column assigned to each row; exhaustive for small square problems,
    the standard polynomial algorithm otherwise."""
    n, m = cost.shape
    if n == m and n <= 10:
        perm, _ = exhaustive_assignment(cost)
        return perm
    rows, cols = linear_sum_assignment(cost)
    out = np.full(n, -1, dtype=np.int64)
    out[rows] = cols
    return out


def match_components(a: ComponentSet, b: ComponentSet):
    """Optimal one-to-one matching of spatial maps by |Pearson correlation|.

    Returns (pairs, mean_abs_r) where pairs is a list of (i, j, signed_r).
    """
    if a.spatial.shape[1] != b.spatial.shape[1]:
        raise ArgumentError("component sets live in different feature spaces")
    r, _ = _corr_columns(a.spatial.T, b.spatial.T)
    assign = _assign(-np.abs(r))
    pairs = [(int(i), int(j), float(r[i, j]))
             for i, j in enumerate(assign) if j >= 0]
    mean_abs = float(np.mean([abs(p[2]) for p in pairs]))
    return pairs, mean_abs


def mcc_score(recovered, truth: SyntheticTruth, mode: str = "time") -> float:
    """Mean |correlation| between optimally matched recovered and true
    components. ``recovered`` is a ComponentSet or a raw matrix (pooled
    timecourses (N, K) in time mode, maps (K, D) in space mode)."""
    if mode == "time":
        rec = (recovered.pooled_timecourses()
               if isinstance(recovered, ComponentSet) else np.asarray(recovered))
        true = truth.true_timecourses
        r, _ = _corr_columns(rec, true)
    elif mode == "space":
        rec = (recovered.spatial
               if isinstance(recovered, ComponentSet) else np.asarray(recovered))
        r, _ = _corr_columns(rec.T, truth.true_spatial.T)
    else:
        raise ArgumentError("mode must be 'time' or 'space'")
    k_rec, k_true = r.shape
    if k_rec < k_true:
        raise ArgumentError(f"recovered {k_rec} components < {k_true} true")
    rows, cols = linear_sum_assignment(-np.abs(r))
    return float(np.mean(np.abs(r[rows, cols])))


def select_components(cs: ComponentSet, n: int) -> ComponentSet:
    """Top-n components by pooled time-course variance (ties toward the lower
    index); used to pick an FNC subset when many latents are trained."""
    if not 1 <= n <= cs.n_components:
        raise ArgumentError(f"subset size {n} out of range")
    pooled = cs.pooled_timecourses()
    variance = np.mean(pooled * pooled, axis=0)  # columns are zero-mean
    chosen = np.argsort(-variance, kind="stable")[:n]
    chosen = np.array(sorted(chosen.tolist(),
                             key=lambda i: (-variance[i], i)), dtype=np.int64)
    return ComponentSet(
        spatial=cs.spatial[chosen].copy(),
        timecourses=[t[:, chosen].copy() for t in cs.timecourses],
        method=cs.method,
        latent_order=cs.latent_order[chosen].copy(),
    )


def save_component_set(prefix: str, cs: ComponentSet) -> None:
    io.write_tensor(f"{prefix}_maps.tcsf", cs.spatial)
    tensors = {f"subject{i}": t for i, t in enumerate(cs.timecourses)}
    tensors["latent_order"] = cs.latent_order.astype(np.float64)
    io.write_container(f"{prefix}_timecourses.tcsf", tensors)


def save_fnc_csv(path, f: FncMatrix, order: np.ndarray | None = None) -> None:
    """Thresholded FNC in the given component order, as CSV with an id header."""
    order = f.order if order is None else order
    reordered = f.r[np.ix_(order, order)]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("component," + ",".join(str(int(i)) for i in order) + "\n")
        for i, row in zip(order, reordered):
            fh.write(str(int(i)) + "," + ",".join(repr(float(v)) for v in row) + "\n")
