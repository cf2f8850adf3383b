"""Experiment configuration, read from and written to INI files.

Example::

    [experiment]
    representations = wideband, narrowband
    fusion = multispectral
    classifier = svm
    composition = both
    seed = 0

    [autoencoder]
    channels = 16, 32, 64
    bottleneck = 256
    epochs = 100

    [background]
    speakers = 20

Every key is optional; see ``ExperimentConfig`` for defaults.
"""
from __future__ import annotations

import configparser
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field, fields

from . import classifiers as clf
from . import dsp
from .cae import FEATURE_COMPOSITIONS, CAEConfig
from .evaluation import FUSION_MODES, CVConfig
from .fileio import atomic_write_text

BRANCH_PRESETS = {
    1: ("narrowband",),
    2: ("wideband", "narrowband"),
    3: ("wideband", "narrowband", "wavelet"),
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    representations: tuple = ("narrowband",)
    fusion: str = "none"
    classifier: str = "svm"
    composition: str = "both"
    per_utterance: bool = False
    seed: int = 0
    n_outer: int = 10
    n_inner: int = 9
    # autoencoder
    channels: tuple = (16, 32, 64)
    post_concat_channels: int = 128
    bottleneck: int = 256
    ae_epochs: int = 100
    ae_batch_size: int = 32
    ae_patience: int = 10
    ae_learning_rate: float = 1e-3
    # svm
    C_grid: tuple = clf.SVM_C_GRID
    gamma_grid: tuple = clf.SVM_GAMMA_GRID
    svm_tol: float = 1e-3
    # mlp
    mlp_hidden: tuple = (128, 64)
    mlp_dropout: float = 0.3
    mlp_epochs: int = 200
    mlp_batch_size: int = 32
    mlp_learning_rate: float = 1e-3
    mlp_patience: int = 20
    # late fusion
    fusion_lr: float = 1e-2
    fusion_epochs: int = 100
    fusion_l2: float = 1e-3
    # background corpus for autoencoder training
    background_manifest: str = ""
    background_speakers: int = 20
    background_duration_s: float = 3.0
    background_valid_fraction: float = 0.2
    # "aligned" (plosive onsets) or "uniform" (random 500 ms windows)
    background_segments: str = "aligned"

    def __post_init__(self):
        self.representations = tuple(self.representations)
        unknown = [r for r in self.representations if r not in dsp.SPECS]
        if unknown:
            raise ConfigError(f"unknown representations {unknown}; choose from {list(dsp.SPECS)}")
        if len(set(self.representations)) != len(self.representations) or not self.representations:
            raise ConfigError("representations must be a non-empty list without duplicates")
        # keep a canonical stream order
        self.representations = tuple(r for r in dsp.STREAM_ORDER if r in self.representations)
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}")
        if self.fusion == "none" and len(self.representations) != 1:
            raise ConfigError("fusion 'none' takes exactly one representation")
        if self.fusion != "none" and len(self.representations) < 2:
            raise ConfigError(f"fusion '{self.fusion}' needs at least two representations (branch count >= 2)")
        if self.classifier not in ("svm", "mlp"):
            raise ConfigError("classifier must be svm or mlp")
        if self.composition not in FEATURE_COMPOSITIONS:
            raise ConfigError(f"composition must be one of {FEATURE_COMPOSITIONS}")
        if not 0.0 < self.background_valid_fraction < 1.0:
            raise ConfigError("background_valid_fraction must lie in (0, 1)")
        if self.background_segments not in ("aligned", "uniform"):
            raise ConfigError("background_segments must be 'aligned' or 'uniform'")
        self.channels = tuple(int(c) for c in self.channels)
        self.C_grid = tuple(float(c) for c in self.C_grid)
        self.gamma_grid = tuple(float(g) for g in self.gamma_grid)
        self.mlp_hidden = tuple(int(h) for h in self.mlp_hidden)

    @property
    def branches(self) -> int:
        return len(self.representations)

    def with_branches(self, n: int, fusion: str | None = None) -> "ExperimentConfig":
        if n not in BRANCH_PRESETS:
            raise ConfigError("branches must be 1, 2 or 3")
        fusion = fusion or self.fusion
        if n == 1:
            fusion = "none"
        elif fusion == "none":
            fusion = "multispectral"
        return ExperimentConfig(**{**self.to_dict(), "representations": BRANCH_PRESETS[n], "fusion": fusion})

    def replace(self, **changes) -> "ExperimentConfig":
        return ExperimentConfig(**{**self.to_dict(), **changes})

    def cae_config(self, representations=None) -> CAEConfig:
        reps = representations or self.representations
        return CAEConfig(
            branch_specs=[dsp.get_spec(r) for r in reps],
            channels_per_stage=list(self.channels),
            post_concat_channels=self.post_concat_channels,
            bottleneck_dim=self.bottleneck,
            epochs=self.ae_epochs,
            batch_size=self.ae_batch_size,
            patience=self.ae_patience,
            learning_rate=self.ae_learning_rate,
            seed=self.seed,
        )

    def model_groups(self) -> list:
        """Representation tuples, one per autoencoder to train."""
        if self.fusion == "multispectral":
            return [self.representations]
        return [(r,) for r in self.representations]

    def cv_config(self) -> CVConfig:
        mlp = clf.MlpConfig(hidden=self.mlp_hidden, dropout=self.mlp_dropout, epochs=self.mlp_epochs,
                            batch_size=self.mlp_batch_size, learning_rate=self.mlp_learning_rate,
                            patience=self.mlp_patience, seed=self.seed)
        return CVConfig(classifier=self.classifier, fusion=self.fusion, C_grid=self.C_grid,
                        gamma_grid=self.gamma_grid, svm_tol=self.svm_tol, mlp=mlp,
                        fusion_lr=self.fusion_lr, fusion_epochs=self.fusion_epochs,
                        fusion_l2=self.fusion_l2, per_utterance=self.per_utterance,
                        n_outer=self.n_outer, n_inner=self.n_inner, seed=self.seed)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# INI section/key -> dataclass field
_INI_KEYS = {
    ("experiment", "representations"): "representations",
    ("experiment", "fusion"): "fusion",
    ("experiment", "classifier"): "classifier",
    ("experiment", "composition"): "composition",
    ("experiment", "per_utterance"): "per_utterance",
    ("experiment", "seed"): "seed",
    ("experiment", "outer_folds"): "n_outer",
    ("experiment", "inner_folds"): "n_inner",
    ("autoencoder", "channels"): "channels",
    ("autoencoder", "post_concat_channels"): "post_concat_channels",
    ("autoencoder", "bottleneck"): "bottleneck",
    ("autoencoder", "epochs"): "ae_epochs",
    ("autoencoder", "batch_size"): "ae_batch_size",
    ("autoencoder", "patience"): "ae_patience",
    ("autoencoder", "learning_rate"): "ae_learning_rate",
    ("svm", "c_grid"): "C_grid",
    ("svm", "gamma_grid"): "gamma_grid",
    ("svm", "tol"): "svm_tol",
    ("mlp", "hidden"): "mlp_hidden",
    ("mlp", "dropout"): "mlp_dropout",
    ("mlp", "epochs"): "mlp_epochs",
    ("mlp", "batch_size"): "mlp_batch_size",
    ("mlp", "learning_rate"): "mlp_learning_rate",
    ("mlp", "patience"): "mlp_patience",
    ("fusion", "learning_rate"): "fusion_lr",
    ("fusion", "epochs"): "fusion_epochs",
    ("fusion", "l2"): "fusion_l2",
    ("background", "manifest"): "background_manifest",
    ("background", "speakers"): "background_speakers",
    ("background", "duration_s"): "background_duration_s",
    ("background", "valid_fraction"): "background_valid_fraction",
    ("background", "segments"): "background_segments",
}
_FIELD_TYPES = {f.name: f.default for f in fields(ExperimentConfig)}


def _convert(name, text):
    default = _FIELD_TYPES[name]
    if isinstance(default, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        if default and isinstance(default[0], (int, float)):
            kind = type(default[0])
            return tuple(kind(float(t)) if kind is int else float(t) for t in items)
        return tuple(items)
    if isinstance(default, bool):
        low = text.strip().lower()
        if low not in ("true", "false", "yes", "no", "1", "0"):
            raise ValueError(f"not a boolean: {text!r}")
        return low in ("true", "yes", "1")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text.strip()


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    values = {}
    for section in parser.sections():
        for key, text in parser.items(section):
            name = _INI_KEYS.get((section.lower(), key.lower()))
            if name is None:
                raise ConfigError(f"{path}: unknown key [{section}] {key}")
            try:
                values[name] = _convert(name, text)
            except ValueError as exc:
                raise ConfigError(f"{path}: [{section}] {key}: {exc}") from None
    return ExperimentConfig(**values)


def dump_config(config: ExperimentConfig) -> str:
    d = config.to_dict()
    parser = configparser.ConfigParser()
    for (section, key), name in _INI_KEYS.items():
        if not parser.has_section(section):
            parser.add_section(section)
        v = d[name]
        if isinstance(v, tuple):
            text = ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        else:
            text = repr(v) if isinstance(v, float) else str(v)
        parser.set(section, key, text)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def save_config(config: ExperimentConfig, path) -> None:
    atomic_write_text(path, dump_config(config))
