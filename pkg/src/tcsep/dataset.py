"""Multi-subject time-by-feature matrices: loading, standardization, PCA,
and a synthetic ground-truth generator for recovery benchmarks.

Rows of one subject are contiguous and time-ordered. All numerics are
float64.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import io
from .errors import ArgumentError, DataError, FormatError

SUBJECTS_HEADER = ["subject_id", "start_row", "end_row"]


@dataclass
class Dataset:
    x: np.ndarray                    # (N, D)
    subject_of_row: np.ndarray       # (N,) int64 in [0, S)
    n_subjects: int
    n_timepoints_per_subject: np.ndarray  # (S,) int64

    @property
    def n_rows(self) -> int:
        return self.x.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.x.shape[1]

    def rows_of_subject(self, s: int) -> slice:
        start = int(np.searchsorted(self.subject_of_row, s, side="left"))
        stop = int(np.searchsorted(self.subject_of_row, s, side="right"))
        return slice(start, stop)


def from_blocks(x: np.ndarray, n_timepoints_per_subject) -> Dataset:
    """Build a Dataset from a matrix whose rows are per-subject blocks in order."""
    x = np.asarray(x, dtype=np.float64)
    counts = np.asarray(n_timepoints_per_subject, dtype=np.int64)
    if x.ndim != 2:
        raise ArgumentError("data matrix must be 2-D")
    if counts.sum() != x.shape[0]:
        raise ArgumentError("per-subject row counts do not sum to matrix rows")
    if np.any(counts < 1):
        raise ArgumentError("every subject needs at least one row")
    subject_of_row = np.repeat(np.arange(len(counts), dtype=np.int64), counts)
    return Dataset(x, subject_of_row, len(counts), counts)


def load_dataset(path, subjects_path) -> Dataset:
    """Read a TCSF matrix plus its subjects CSV. No standardization applied."""
    x = io.read_tensor(path)
    if x.ndim != 2:
        raise FormatError(f"expected a 2-D matrix in {path}, got ndim={x.ndim}")
    x = x.astype(np.float64)
    if not np.all(np.isfinite(x)):
        raise DataError(f"non-finite values in {path}")

    ranges = _read_subjects_csv(subjects_path)
    n_rows = x.shape[0]
    counts = np.zeros(len(ranges), dtype=np.int64)
    cursor = 0
    seen = set()
    for sid, start, end in ranges:
        if start != cursor:
            raise DataError(f"subject ranges not contiguous at row {start}")
        if end <= start:
            raise DataError(f"empty row range for subject {sid}")
        if sid in seen:
            raise DataError(f"subject {sid} listed twice")
        seen.add(sid)
        cursor = end
    if cursor != n_rows:
        raise DataError(
            f"subjects CSV covers {cursor} rows but matrix has {n_rows}"
        )
    n_subjects = len(ranges)
    if seen != set(range(n_subjects)):
        raise DataError("subject ids must be exactly 0..S-1")

    subject_of_row = np.empty(n_rows, dtype=np.int64)
    for sid, start, end in ranges:
        subject_of_row[start:end] = sid
        counts[sid] = end - start
    order = np.argsort(subject_of_row, kind="stable")
    if not np.array_equal(order, np.arange(n_rows)):
        # Blocks may appear in any order on disk; normalize to id order.
        x = x[order]
        subject_of_row = subject_of_row[order]
    return Dataset(x, subject_of_row, n_subjects, counts)


def save_dataset(path, subjects_path, d: Dataset) -> None:
    io.write_tensor(path, d.x)
    with open(subjects_path, "w", encoding="utf-8", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(SUBJECTS_HEADER)
        start = 0
        for sid, count in enumerate(d.n_timepoints_per_subject):
            writer.writerow([sid, start, start + int(count)])
            start += int(count)


def _read_subjects_csv(path) -> list[tuple[int, int, int]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty subjects CSV") from None
        if header != SUBJECTS_HEADER:
            raise FormatError(
                f"{path}: bad header {header!r}, expected {SUBJECTS_HEADER!r}"
            )
        ranges = []
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 fields")
            try:
                ranges.append((int(row[0]), int(row[1]), int(row[2])))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-integer field") from None
    if not ranges:
        raise DataError(f"{path}: no subject ranges")
    ranges.sort(key=lambda r: r[1])
    return ranges


CONSTANT_STD_FLOOR = 1e-12


def standardize(d: Dataset, per_subject: bool = False) -> Dataset:
    """Zero-mean, unit-std features (population std, divisor N).

    Constant features map to exact zeros so masked-out voxels cannot poison
    training. ``per_subject`` standardizes each subject's block separately.
    """
    if d.n_rows < 2:
        raise ArgumentError("standardize needs at least 2 rows")
    x = d.x.copy()
    if per_subject:
        for s in range(d.n_subjects):
            rows = d.rows_of_subject(s)
            x[rows] = _standardize_block(x[rows])
    else:
        x = _standardize_block(x)
    return Dataset(x, d.subject_of_row.copy(), d.n_subjects,
                   d.n_timepoints_per_subject.copy())


def _standardize_block(x: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=0)
    std = x.std(axis=0)  # population (divisor N)
    out = x - mean
    constant = std < CONSTANT_STD_FLOOR
    safe = np.where(constant, 1.0, std)
    out /= safe
    out[:, constant] = 0.0
    return out


@dataclass
class PcaBasis:
    mean: np.ndarray             # (D,)
    components: np.ndarray       # (D, P), orthonormal columns
    singular_values: np.ndarray  # (P,), non-increasing
    whiten: bool
    n_rows: int                  # rows used at fit time; sets the whiten scale


def pca_fit(d: Dataset, p: int, whiten: bool = False) -> PcaBasis:
    """Top-p right singular subspace of the centered matrix, via SVD.

    Sign convention: the entry of largest magnitude in each component is
    positive (ties broken toward the lower index), so bases are reproducible.
    """
    n, dim = d.x.shape
    if not 1 <= p <= min(n, dim):
        raise ArgumentError(f"p={p} out of range [1, {min(n, dim)}]")
    mean = d.x.mean(axis=0)
    centered = d.x - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:p].T.copy()
    for j in range(p):
        pivot = np.argmax(np.abs(components[:, j]))
        if components[pivot, j] < 0:
            components[:, j] = -components[:, j]
    return PcaBasis(mean, components, s[:p].copy(), whiten, n)


def _whiten_scale(b: PcaBasis) -> np.ndarray:
    s1 = b.singular_values[0] if b.singular_values.size else 1.0
    safe = np.maximum(b.singular_values, 1e-12 * max(s1, 1.0))
    return np.sqrt(b.n_rows) / safe


def pca_transform(b: PcaBasis, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != b.components.shape[0]:
        raise ArgumentError(
            f"feature dim {x.shape[-1]} != basis dim {b.components.shape[0]}"
        )
    y = (x - b.mean) @ b.components
    if b.whiten:
        y = y * _whiten_scale(b)
    return y


def pca_inverse(b: PcaBasis, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != b.components.shape[1]:
        raise ArgumentError(
            f"component dim {y.shape[-1]} != basis rank {b.components.shape[1]}"
        )
    if b.whiten:
        y = y / _whiten_scale(b)
    return y @ b.components.T + b.mean


MIXING_KINDS = ("linear", "post_nonlinear", "mlp")


@dataclass
class SynthConfig:
    k_true: int = 5
    d: int = 50
    n_subjects: int = 4
    t_per_subject: int = 500
    mixing_kind: str = "linear"
    noise_std: float = 0.1
    seed: int = 0


@dataclass
class SyntheticTruth:
    true_spatial: np.ndarray       # (K_true, D), unit L2 rows
    true_timecourses: np.ndarray   # (N, K_true), zero-mean columns
    mixing_kind: str
    noise_std: float
    seed: int


def _rng(seed, *stream) -> np.random.Generator:
    # Philox is counter-based: stable across platforms, cheap to re-key.
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, *stream))))


def _gaussian_bumps(k: int, d: int) -> np.ndarray:
    """Unit-norm Gaussian bumps at distinct centers on a 1-D feature lattice."""
    grid = np.arange(d, dtype=np.float64)
    centers = (np.arange(k) + 0.5) * d / k
    width = max(d / (4.0 * k), 1.0)
    maps = np.exp(-0.5 * ((grid[None, :] - centers[:, None]) / width) ** 2)
    return maps / np.linalg.norm(maps, axis=1, keepdims=True)


def _source_timecourses(cfg: SynthConfig) -> np.ndarray:
    """Sinusoids with subject-specific phase plus AR(1) noise.

    AR innovations are Laplace so sources stay super-Gaussian; the logistic
    InfoMax baseline is only expected to separate that regime.
    """
    t = np.arange(cfg.t_per_subject, dtype=np.float64)
    blocks = []
    for s in range(cfg.n_subjects):
        rng = _rng(cfg.seed, 1, s)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=cfg.k_true)
        freqs = np.arange(1, cfg.k_true + 1, dtype=np.float64)
        sines = np.sin(2.0 * np.pi * freqs[None, :] * t[:, None] / cfg.t_per_subject
                       + phases[None, :])
        innov = rng.laplace(0.0, 1.0, size=(cfg.t_per_subject, cfg.k_true))
        ar = np.empty_like(innov)
        ar[0] = innov[0]
        rho = 0.6
        for i in range(1, cfg.t_per_subject):
            ar[i] = rho * ar[i - 1] + innov[i]
        blocks.append(0.5 * sines + ar)
    tc = np.concatenate(blocks, axis=0)
    return tc - tc.mean(axis=0)


def _apply_mixing(u: np.ndarray, kind: str, seed: int) -> np.ndarray:
    if kind == "linear":
        return u
    if kind == "post_nonlinear":
        v = u + 0.5 * np.tanh(2.0 * u)
        # Rescale per feature so the distortion keeps the original spread.
        su = u.std(axis=0)
        sv = v.std(axis=0)
        return v * (su / np.where(sv < 1e-12, 1.0, sv))
    if kind == "mlp":
        d = u.shape[1]
        h = 2 * d
        rng = _rng(seed, 2)
        w1 = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, h))
        w2 = rng.normal(0.0, 1.0 / np.sqrt(h), size=(h, d))
        v = np.tanh(u @ w1) @ w2
        su = u.std(axis=0)
        sv = v.std(axis=0)
        return v * (su / np.where(sv < 1e-12, 1.0, sv))
    raise ArgumentError(f"unknown mixing kind {kind!r}")


def synth_generate(cfg: SynthConfig) -> tuple[Dataset, SyntheticTruth]:
    """Generate a ground-truth mixture: x = mix(timecourses @ spatial) + noise."""
    if cfg.k_true > cfg.d:
        raise ArgumentError(f"k_true={cfg.k_true} exceeds feature dim {cfg.d}")
    if cfg.mixing_kind not in MIXING_KINDS:
        raise ArgumentError(f"mixing_kind must be one of {MIXING_KINDS}")
    if cfg.n_subjects < 1 or cfg.t_per_subject < 1:
        raise ArgumentError("need at least one subject and one timepoint")

    spatial = _gaussian_bumps(cfg.k_true, cfg.d)
    tc = _source_timecourses(cfg)
    clean = _apply_mixing(tc @ spatial, cfg.mixing_kind, cfg.seed)
    noise_rng = _rng(cfg.seed, 3)
    x = clean + cfg.noise_std * noise_rng.normal(size=clean.shape)

    counts = np.full(cfg.n_subjects, cfg.t_per_subject, dtype=np.int64)
    d = from_blocks(x, counts)
    truth = SyntheticTruth(spatial, tc, cfg.mixing_kind, cfg.noise_std, cfg.seed)
    return d, truth


def save_truth(path, truth: SyntheticTruth) -> None:
    io.write_container(path, {
        "true_spatial": truth.true_spatial,
        "true_timecourses": truth.true_timecourses,
    })
    io.write_kv_text(str(path) + ".meta", {
        "mixing_kind": truth.mixing_kind,
        "noise_std": repr(float(truth.noise_std)),
        "seed": truth.seed,
    })


def load_truth(path) -> SyntheticTruth:
    tensors = io.read_container(path)
    try:
        spatial = tensors["true_spatial"]
        tc = tensors["true_timecourses"]
    except KeyError as e:
        raise FormatError(f"truth container missing tensor {e}") from None
    meta = io.read_kv_text(str(path) + ".meta")
    return SyntheticTruth(
        spatial.astype(np.float64),
        tc.astype(np.float64),
        meta.get("mixing_kind", "linear"),
        float(meta.get("noise_std", "0.0")),
        int(meta.get("seed", "0")),
    )
