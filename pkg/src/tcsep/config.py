"""Plain-text run configuration: section-prefixed ``key = value`` pairs.

Defaults follow the published training recipe where it specifies values
(epochs, batch size, learning rate, warm-up, clipping, latent and embedding
dimensions, hidden sizes, PCA target). Unknown keys are rejected. The
canonical dump is a fixed point: dump -> parse -> dump is byte-identical.
"""

from __future__ import annotations

from .errors import ArgumentError, FormatError

_EXTRACTORS = ("regression", "jacobian")
_KINDS = ("linear", "post_nonlinear", "mlp")
_KIND_ALIASES = {"pnl": "post_nonlinear"}


def _parse_bool(raw: str) -> bool:
    if raw == "true":
        return True
    if raw == "false":
        return False
    raise ArgumentError(f"expected true/false, got {raw!r}")


def _parse_kind(raw: str) -> str:
    raw = _KIND_ALIASES.get(raw, raw)
    if raw not in _KINDS:
        raise ArgumentError(f"mixing kind must be one of {_KINDS}")
    return raw


def _parse_extractor(raw: str) -> str:
    if raw not in _EXTRACTORS:
        raise ArgumentError(f"extractor must be one of {_EXTRACTORS}")
    return raw


# key -> (default, parser). Order here is the canonical dump order.
SCHEMA: dict[str, tuple[object, object]] = {
    "data.per_subject_standardize": (False, _parse_bool),
    "data.use_pca": (True, _parse_bool),
    "data.pca_dim": (100, int),
    "data.pca_whiten": (False, _parse_bool),
    "model.latent_dim": (80, int),
    "model.embed_dim": (8, int),
    "model.hidden1": (512, int),
    "model.hidden2": (256, int),
    "train.epochs": (16000, int),
    "train.batch_size": (64, int),
    "train.lr": (1e-4, float),
    "train.beta_final": (4.0, float),
    "train.warmup_epochs": (10, int),
    "train.clip_norm": (5.0, float),
    "train.ckpt_every": (0, int),
    "analysis.fnc_threshold": (0.05, float),
    "analysis.n_components": (0, int),
    "analysis.extractor": ("regression", _parse_extractor),
    "analysis.jacobian_probes": (64, int),
    "ica.lr": (0.0, float),
    "ica.max_iter": (1000, int),
    "ica.tol": (1e-7, float),
    "ica.anneal": (0.9, float),
    "synth.k_true": (5, int),
    "synth.d": (50, int),
    "synth.subjects": (4, int),
    "synth.t_per_subject": (500, int),
    "synth.kind": ("linear", _parse_kind),
    "synth.noise_std": (0.1, float),
}


class RunConfig:
    def __init__(self, values: dict[str, object] | None = None):
        self._values = {k: default for k, (default, _) in SCHEMA.items()}
        if values:
            for k, v in values.items():
                self.set(k, v)

    def set(self, key: str, value: object) -> None:
        if key not in SCHEMA:
            raise ArgumentError(f"unknown config key {key!r}")
        self._values[key] = value

    def set_raw(self, key: str, raw: str) -> None:
        if key not in SCHEMA:
            raise ArgumentError(f"unknown config key {key!r}")
        parser = SCHEMA[key][1]
        try:
            self._values[key] = parser(raw)
        except (ValueError, TypeError):
            raise ArgumentError(f"bad value {raw!r} for {key}") from None

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise ArgumentError(f"unknown config key {key!r}")
        return self._values[key]

    def dump(self) -> str:
        lines = []
        for key in SCHEMA:
            value = self._values[key]
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            lines.append(f"{key} = {text}")
        return "\n".join(lines) + "\n"


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise FormatError(f"line {lineno}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        cfg.set_raw(key.strip(), raw.strip())
    return cfg


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read())
