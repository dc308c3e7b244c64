"""JSON-manifest + little-endian binary sidecar containers.

Every artifact is a small JSON manifest next to a ``<manifest>.bin`` blob.
The manifest records dtype, element counts and a sha256 of the blob so a
truncated or swapped sidecar is caught at load time.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigurationError
from .model import Dataset, ModelSpec, ParameterVector
from .quantizer import QuantParams, dequantize, quantize, quant_params, BitPlan, FULL_PRECISION
from .spectral import Spectrum

SCHEMA_VERSION = 1
F8 = np.dtype("<f8")
I4 = np.dtype("<i4")


@dataclass(frozen=True, eq=False)
class Checkpoint:
    spec: ModelSpec
    params: ParameterVector
    meta: dict = field(default_factory=dict)

    @property
    def seed(self):
        return self.meta.get("seed")

    def checksum(self) -> str:
        h = hashlib.sha256(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        h.update(self.params.values.tobytes())
        return h.hexdigest()[:16]


def _blob_path(path: Path) -> Path:
    return path.with_name(path.name + ".bin")


def _write(path, manifest: dict, arrays: list[np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = b"".join(np.ascontiguousarray(a).tobytes() for a in arrays)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        **manifest,
        "blob": _blob_path(path).name,
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    _blob_path(path).write_bytes(blob)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _read(path, kind: str) -> tuple[dict, bytes]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path} does not exist")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path} is not a JSON manifest: {e}") from None
    if manifest.get("kind") != kind:
        raise ConfigurationError(f"{path} holds a {manifest.get('kind')!r}, expected {kind!r}")
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ConfigurationError(f"{path}: unsupported schema version {manifest.get('schema_version')}")
    blob = (path.parent / manifest["blob"]).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise ConfigurationError(f"{path}: sidecar blob checksum mismatch")
    return manifest, blob


def _segments_list(segs: Mapping[str, tuple[int, int]]) -> list:
    return [[k, o, n] for k, (o, n) in segs.items()]


def _segments_dict(lst) -> dict:
    return {k: (int(o), int(n)) for k, o, n in lst}


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    _write(path, {
        "kind": "checkpoint",
        "spec": ckpt.spec.to_dict(),
        "segments": _segments_list(ckpt.params.segments),
        "dtype": "<f8",
        "count": len(ckpt.params),
        "seed": ckpt.meta.get("seed"),
        "metadata": ckpt.meta,
    }, [ckpt.params.values.astype(F8)])


def load_checkpoint(path) -> Checkpoint:
    m, blob = _read(path, "checkpoint")
    spec = ModelSpec.from_dict(m["spec"])
    vals = np.frombuffer(blob, dtype=F8, count=m["count"]).astype(np.float64)
    params = ParameterVector(vals, _segments_dict(m["segments"]))
    if params.segments != spec.segment_map():
        raise ConfigurationError(f"{path}: segment map does not match the model spec")
    return Checkpoint(spec, params, dict(m.get("metadata", {})))


def save_dataset(path, ds: Dataset) -> None:
    arrays = [ds.inputs.astype(F8), ds.labels.astype(I4)]
    if ds.targets is not None:
        arrays.append(ds.targets.astype(F8))
    _write(path, {
        "kind": "dataset",
        "split": ds.split,
        "num_classes": ds.num_classes,
        "count": len(ds),
        "sample_shape": list(ds.sample_shape),
        "inputs_dtype": "<f8",
        "labels_dtype": "<i4",
        "target_dim": None if ds.targets is None else int(ds.targets.shape[1]),
        "metadata": ds.meta,
    }, arrays)


def load_dataset(path) -> Dataset:
    m, blob = _read(path, "dataset")
    n = m["count"]
    shape = tuple(m["sample_shape"])
    nin = n * int(np.prod(shape))
    x = np.frombuffer(blob, dtype=F8, count=nin).reshape((n, *shape))
    off = nin * 8
    y = np.frombuffer(blob, dtype=I4, count=n, offset=off)
    off += n * 4
    t = None
    if m.get("target_dim") is not None:
        t = np.frombuffer(blob, dtype=F8, count=n * m["target_dim"], offset=off).reshape(n, m["target_dim"])
    return Dataset(x.copy(), y.copy(), m["split"], m["num_classes"], None if t is None else t.copy(),
                   dict(m.get("metadata", {})))


def import_flat_dataset(inputs_path, labels_path, sample_shape, split="train", num_classes=None) -> Dataset:
    """Build a Dataset from raw little-endian float64 inputs and int32 labels files."""
    y = np.fromfile(labels_path, dtype=I4)
    x = np.fromfile(inputs_path, dtype=F8).reshape((y.size, *sample_shape))
    return Dataset(x, y, split, int(num_classes or (y.max() + 1 if y.size else 1)))


def spectrum_cache_key(ckpt: Checkpoint, batch: Dataset, cfg) -> str:
    h = hashlib.sha256()
    h.update(ckpt.checksum().encode())
    h.update(batch.checksum().encode())
    h.update(json.dumps(cfg.to_dict(), sort_keys=True).encode())
    return h.hexdigest()[:24]


def save_spectrum(path, sp: Spectrum, cache_key: str | None = None) -> None:
    _write(path, {
        "kind": "spectrum",
        "dim": sp.dim,
        "count": len(sp),
        "residual_tolerance": sp.residual_tolerance,
        "segments": None if sp.segments is None else _segments_list(sp.segments),
        "cache_key": cache_key,
        "dtype": "<f8",
        "layout": "eigenvalues, residuals, eigenvectors (one vector after another)",
        "metadata": sp.meta,
    }, [sp.eigenvalues.astype(F8), sp.residuals.astype(F8), sp.eigenvectors.T.astype(F8)])


def load_spectrum(path, expect_key: str | None = None) -> Spectrum:
    m, blob = _read(path, "spectrum")
    if expect_key is not None and m.get("cache_key") != expect_key:
        raise ConfigurationError(f"{path}: cache key mismatch")
    k, n = m["count"], m["dim"]
    a = np.frombuffer(blob, dtype=F8).astype(np.float64)
    lam, res, vecs = a[:k], a[k:2 * k], a[2 * k:].reshape(k, n).T
    segs = None if m["segments"] is None else _segments_dict(m["segments"])
    return Spectrum(lam, vecs, res, n, m["residual_tolerance"], segs, dict(m.get("metadata", {})))


def save_quantized_checkpoint(path, ckpt: Checkpoint, plan: BitPlan) -> None:
    """Integer codes for every quantized layer; full-precision layers keep float weights."""
    codes, floats, layers = [], [], []
    for lid in ckpt.params.layer_ids:
        W = ckpt.params.segment(lid)
        b = plan.bits[lid]
        if b == FULL_PRECISION:
            layers.append({"layer_id": lid, "bits": b, "count": W.size, "storage": "float"})
            floats.append(W.astype(F8))
        else:
            qp = quant_params(W, b, None)
            codes.append(quantize(W, qp).codes.astype(I4))
            layers.append({"layer_id": lid, "bits": b, "count": W.size, "storage": "codes",
                           "quant_params": qp.to_dict()})
    _write(path, {
        "kind": "quantized_checkpoint",
        "spec": ckpt.spec.to_dict(),
        "segments": _segments_list(ckpt.params.segments),
        "layers": layers,
        "layout": "int32 codes of quantized layers in segment order, then float64 of full-precision layers",
        "metadata": {**ckpt.meta, "plan_total_bits": plan.total_bits},
    }, codes + floats)


def load_quantized_checkpoint(path) -> Checkpoint:
    m, blob = _read(path, "quantized_checkpoint")
    spec = ModelSpec.from_dict(m["spec"])
    ncodes = sum(l["count"] for l in m["layers"] if l["storage"] == "codes")
    codes = np.frombuffer(blob, dtype=I4, count=ncodes)
    floats = np.frombuffer(blob, dtype=F8, offset=ncodes * 4)
    ci = fi = 0
    chunks = []
    from .quantizer import QuantizedTensor
    for l in m["layers"]:
        c = l["count"]
        if l["storage"] == "codes":
            qp = QuantParams.from_dict(l["quant_params"])
            chunks.append(dequantize(QuantizedTensor(codes[ci:ci + c].astype(np.int64), qp, (c,))))
            ci += c
        else:
            chunks.append(floats[fi:fi + c].astype(np.float64))
            fi += c
    params = ParameterVector(np.concatenate(chunks), _segments_dict(m["segments"]))
    return Checkpoint(spec, params, dict(m.get("metadata", {})))


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
    os.replace(tmp, path)


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")
