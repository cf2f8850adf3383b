"""Versioned, checksummed model archives.

Layout (little endian)::

    b"MSPC" | u32 version | u64 header length | header JSON (UTF-8)
    | array blobs, back to back | sha256 of everything before it (32 bytes)

The header holds free-form metadata and, for each array, its name, dtype,
shape, offset and byte length within the blob section.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cae, nn
from . import classifiers as clf
from .fileio import atomic_write_bytes

MAGIC = b"MSPC"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DIGEST = 32


class ArchiveError(Exception):
    pass


class ChecksumError(ArchiveError):
    pass


class VersionError(ArchiveError):
    pass


class ArchiveShapeError(ArchiveError):
    pass


@dataclass
class ModelArchive:
    kind: str
    meta: dict = field(default_factory=dict)
    arrays: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def encode(archive: ModelArchive) -> bytes:
    entries, blobs, offset = [], [], 0
    for name in sorted(archive.arrays):
        arr = np.ascontiguousarray(archive.arrays[name])
        if arr.dtype.hasobject:
            raise ArchiveError(f"array {name!r} has object dtype")
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.newbyteorder("<").str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"kind": archive.kind, "meta": archive.meta, "arrays": entries},
                        sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(MAGIC, archive.version, len(header)) + header + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def decode(data: bytes) -> ModelArchive:
    if len(data) < _PREFIX.size + _DIGEST or data[:4] != MAGIC:
        raise ChecksumError("not a model archive (bad magic or too short)")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("archive checksum mismatch (file truncated or corrupted)")
    _, version, hlen = _PREFIX.unpack_from(body)
    if version > FORMAT_VERSION or version < 1:
        raise VersionError(f"archive format version {version} is not supported (this build reads <= {FORMAT_VERSION})")
    start = _PREFIX.size
    try:
        header = json.loads(body[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"archive header unreadable: {exc}") from None
    blob = body[start + hlen :]
    arrays = {}
    for e in header["arrays"]:
        chunk = blob[e["offset"] : e["offset"] + e["nbytes"]]
        dt = np.dtype(e["dtype"])
        if len(chunk) != e["nbytes"] or e["nbytes"] != dt.itemsize * int(np.prod(e["shape"], dtype=np.int64)):
            raise ArchiveError(f"array {e['name']!r}: size does not match its shape metadata")
        arrays[e["name"]] = np.frombuffer(chunk, dtype=dt).reshape(e["shape"]).astype(dt.newbyteorder("="))
    return ModelArchive(header["kind"], header["meta"], arrays, version)


def save_model(archive: ModelArchive, path) -> None:
    atomic_write_bytes(path, encode(archive))


def load_model(path) -> ModelArchive:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ArchiveError(f"cannot read {path}: {exc}") from exc
    return decode(data)


# ---------------------------------------------------------------------------
# Autoencoders
# ---------------------------------------------------------------------------

def pack_autoencoder(config: cae.CAEConfig, graph: nn.ModelGraph, provenance: dict | None = None) -> ModelArchive:
    shapes = {k: list(v.shape) for k, v in graph.parameters().items()}
    meta = {"cae": config.to_dict(), "param_shapes": shapes,
            "representations": [{"name": s.name, "window_ms": s.window_ms, "shift_ms": s.shift_ms,
                                  "n_bands": s.n_bands, "target_shape": list(s.target_shape)}
                                 for s in config.branch_specs],
            "provenance": provenance or {}}
    arrays = {f"param/{k}": v for k, v in graph.parameters().items()}
    return ModelArchive("autoencoder", meta, arrays)


def unpack_autoencoder(archive: ModelArchive, expect: cae.CAEConfig | None = None):
    """Rebuild (CAEConfig, ModelGraph); ``expect`` guards against branch mismatches."""
    if archive.kind != "autoencoder":
        raise ArchiveError(f"archive holds a {archive.kind}, not an autoencoder")
    config = cae.CAEConfig.from_dict(archive.meta["cae"])
    if expect is not None:
        got, want = config.branch_names, expect.branch_names
        if got != want:
            raise ArchiveShapeError(f"archive has {len(got)} branch(es) {got}; experiment expects {len(want)} {want}")
        for key in ("channels_per_stage", "post_concat_channels", "bottleneck_dim"):
            if getattr(config, key) != getattr(expect, key):
                raise ArchiveShapeError(f"archive {key}={getattr(config, key)} but experiment expects {getattr(expect, key)}")
    graph = cae.build_cae(config)
    params = {k[len("param/"):]: v for k, v in archive.arrays.items() if k.startswith("param/")}
    current = graph.parameters()
    if set(params) != set(current):
        raise ArchiveShapeError("archive parameters do not match the rebuilt graph")
    for k, v in params.items():
        if v.shape != current[k].shape:
            raise ArchiveShapeError(f"parameter {k}: archive shape {v.shape} != graph shape {current[k].shape}")
    graph.set_parameters({k: v.astype(current[k].dtype, copy=False) for k, v in params.items()})
    return config, graph


# ---------------------------------------------------------------------------
# Classifiers
# ---------------------------------------------------------------------------

def pack_svm(model: clf.SvmModel, provenance: dict | None = None) -> ModelArchive:
    meta = {"gamma": model.gamma, "C": model.C, "bias": model.bias, "platt_A": model.platt_A,
            "platt_B": model.platt_B, "n_iter": model.n_iter, "provenance": provenance or {}}
    arrays = {"support_vectors": model.support_vectors, "dual_coef": model.dual_coef}
    if model.scaler is not None:
        arrays["scaler/mean"] = model.scaler.mean
        arrays["scaler/scale"] = model.scaler.scale
    return ModelArchive("svm", meta, arrays)


def unpack_svm(archive: ModelArchive) -> clf.SvmModel:
    if archive.kind != "svm":
        raise ArchiveError(f"archive holds a {archive.kind}, not an svm")
    m, a = archive.meta, archive.arrays
    scaler = None
    if "scaler/mean" in a:
        scaler = clf.Standardizer()
        scaler.mean, scaler.scale = a["scaler/mean"], a["scaler/scale"]
    sv = a["support_vectors"]
    if sv.shape[0] != a["dual_coef"].shape[0]:
        raise ArchiveShapeError("support vector count disagrees with dual coefficients")
    return clf.SvmModel(sv, a["dual_coef"], m["bias"], m["gamma"], m["C"], scaler,
                        m["platt_A"], m["platt_B"], m["n_iter"])


def pack_mlp(model: clf.MlpModel, provenance: dict | None = None) -> ModelArchive:
    cfg = model.config
    meta = {"config": {"hidden": list(cfg.hidden), "dropout": cfg.dropout, "epochs": cfg.epochs,
                       "batch_size": cfg.batch_size, "learning_rate": cfg.learning_rate,
                       "patience": cfg.patience, "seed": cfg.seed},
            "n_features": int(model.scaler.mean.shape[0]), "epochs_trained": model.epochs_trained,
            "provenance": provenance or {}}
    arrays = {f"param/{k}": v for k, v in model.graph.parameters().items()}
    arrays["scaler/mean"] = model.scaler.mean
    arrays["scaler/scale"] = model.scaler.scale
    return ModelArchive("mlp", meta, arrays)


def unpack_mlp(archive: ModelArchive) -> clf.MlpModel:
    if archive.kind != "mlp":
        raise ArchiveError(f"archive holds a {archive.kind}, not an mlp")
    c = dict(archive.meta["config"])
    c["hidden"] = tuple(c["hidden"])
    cfg = clf.MlpConfig(**c)
    graph = clf.build_mlp(archive.meta["n_features"], cfg)
    params = {k[len("param/"):]: v for k, v in archive.arrays.items() if k.startswith("param/")}
    current = graph.parameters()
    if set(params) != set(current) or any(params[k].shape != current[k].shape for k in params):
        raise ArchiveShapeError("archive parameters do not match the rebuilt network")
    graph.set_parameters(params)
    scaler = clf.Standardizer(archive.arrays["scaler/mean"], archive.arrays["scaler/scale"])
    return clf.MlpModel(graph, scaler, cfg, archive.meta["epochs_trained"])
