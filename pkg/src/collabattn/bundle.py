"""Single-file weight bundles.

Layout (all integers little-endian)::

    8 bytes   magic  b"CMHABNDL"
    4 bytes   uint32 format version (1)
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header {"metadata": {...}, "tensors": [...]}
    rest      blob of IEEE-754 binary32 values, row-major

Each tensor record is ``{"name", "shape", "dtype": "f32", "byte_offset"}``
with ``byte_offset`` counted from the start of the blob.

Collab bundles may carry ``layer.L.content_bias_residual``: the float32
rounding remainder of the folded content bias, added back on load.  The
folded bias is a product of stored weights and so, unlike the other
tensors of an exact expansion, is not itself representable in float32.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import AttentionDims, CollabMHAParams, ConcatMHAParams, MixingKind, MixingMatrix
from .errors import BundleParseError, BundleValidationError

MAGIC = b"CMHABNDL"
VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")

CONCAT_NAMES = ("w_q", "w_k", "w_v", "w_o", "b_q", "b_k")
COLLAB_NAMES = ("wq_shared", "wk_shared", "mixing", "content_bias", "w_v", "w_o")
METADATA_KEYS = ("n_heads", "d_k_per_head", "d_in", "d_out", "n_layers")


@dataclass(frozen=True)
class TensorRecord:
    name: str
    shape: tuple[int, ...]
    byte_offset: int
    dtype: str = "f32"

    @property
    def nbytes(self) -> int:
        return 4 * int(np.prod(self.shape, dtype=np.int64))

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "shape": list(self.shape),
            "dtype": self.dtype,
            "byte_offset": self.byte_offset,
        }


@dataclass
class WeightBundle:
    manifest: list[TensorRecord]
    blob: bytes
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], metadata: dict) -> "WeightBundle":
        """Pack arrays (converted to float32) back to back in insertion order."""
        manifest = []
        chunks = []
        offset = 0
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            manifest.append(TensorRecord(name, tuple(int(n) for n in data.shape), offset))
            chunks.append(data.tobytes())
            offset += data.nbytes
        return cls(manifest, b"".join(chunks), dict(metadata))

    def names(self) -> list[str]:
        return [r.name for r in self.manifest]

    def record(self, name: str) -> TensorRecord:
        for r in self.manifest:
            if r.name == name:
                return r
        raise KeyError(name)

    def array(self, name: str) -> np.ndarray:
        """The named tensor widened to float64."""
        r = self.record(name)
        count = r.nbytes // 4
        data = np.frombuffer(self.blob, dtype="<f4", count=count, offset=r.byte_offset)
        return data.reshape(r.shape).astype(np.float64)

    @property
    def form(self) -> str:
        return self.metadata.get("form", "concat")

    def validate(self) -> None:
        _validate(self.manifest, len(self.blob), self.metadata)


def _expect(obj, key, kind, path):
    if not isinstance(obj, dict) or key not in obj:
        raise BundleParseError(path, "missing field")
    value = obj[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise BundleParseError(f"{path}", f"expected integer, got {value!r}")
    if kind is not int and not isinstance(value, kind):
        raise BundleParseError(path, f"expected {kind.__name__}, got {type(value).__name__}")
    return value


def _parse_header(raw: bytes) -> tuple[list[TensorRecord], dict]:
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise BundleParseError("header", f"invalid JSON: {e}") from e
    if not isinstance(header, dict):
        raise BundleParseError("header", "expected an object")
    metadata = _expect(header, "metadata", dict, "metadata")
    for key in METADATA_KEYS:
        _expect(metadata, key, int, f"metadata.{key}")
    tensors = _expect(header, "tensors", list, "tensors")
    manifest = []
    for i, rec in enumerate(tensors):
        path = f"tensors[{i}]"
        if not isinstance(rec, dict):
            raise BundleParseError(path, "expected an object")
        name = _expect(rec, "name", str, f"{path}.name")
        shape = _expect(rec, "shape", list, f"{path}.shape")
        for j, n in enumerate(shape):
            if isinstance(n, bool) or not isinstance(n, int) or n < 0:
                raise BundleParseError(f"{path}.shape[{j}]", f"expected non-negative integer, got {n!r}")
        dtype = _expect(rec, "dtype", str, f"{path}.dtype")
        offset = _expect(rec, "byte_offset", int, f"{path}.byte_offset")
        manifest.append(TensorRecord(name, tuple(shape), offset, dtype))
    return manifest, metadata


def required_names(metadata: dict) -> list[str]:
    names = COLLAB_NAMES if metadata.get("form", "concat") == "collab" else CONCAT_NAMES
    return [f"layer.{layer}.{n}" for layer in range(metadata["n_layers"]) for n in names]


def _validate(manifest: list[TensorRecord], blob_len: int, metadata: dict) -> None:
    seen = set()
    for r in manifest:
        if r.name in seen:
            raise BundleValidationError(f"duplicate tensor name {r.name!r}")
        seen.add(r.name)
        if r.dtype != "f32":
            raise BundleValidationError(f"{r.name}: unsupported dtype {r.dtype!r}")
        if r.byte_offset < 0:
            raise BundleValidationError(f"{r.name}: negative byte_offset")
        if r.byte_offset + r.nbytes > blob_len:
            raise BundleValidationError(
                f"{r.name}: needs bytes [{r.byte_offset}, {r.byte_offset + r.nbytes}) "
                f"but blob holds {blob_len}"
            )
    spans = sorted((r.byte_offset, r.byte_offset + r.nbytes, r.name) for r in manifest if r.nbytes)
    for (_, end, a), (start, _, b) in zip(spans, spans[1:]):
        if start < end:
            raise BundleValidationError(f"tensors {a!r} and {b!r} overlap")
    total = sum(r.nbytes for r in manifest)
    if total != blob_len:
        raise BundleValidationError(f"blob holds {blob_len} bytes, manifest accounts for {total}")
    form = metadata.get("form", "concat")
    if form not in ("concat", "collab"):
        raise BundleValidationError(f"metadata.form: unknown form {form!r}")
    missing = [n for n in required_names(metadata) if n not in seen]
    if missing:
        raise BundleValidationError(f"missing tensors: {', '.join(missing)}")


def save_bundle(bundle: WeightBundle, path) -> None:
    bundle.validate()
    header = json.dumps(
        {"metadata": bundle.metadata, "tensors": [r.to_json() for r in bundle.manifest]},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_PREAMBLE.pack(MAGIC, VERSION, len(header)))
        f.write(header)
        f.write(bundle.blob)


def load_bundle(path) -> WeightBundle:
    data = Path(path).read_bytes()
    if len(data) < _PREAMBLE.size:
        raise BundleParseError("preamble", "file too short")
    magic, version, header_len = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise BundleParseError("preamble.magic", f"bad magic {magic!r}")
    if version != VERSION:
        raise BundleParseError("preamble.version", f"unsupported version {version}")
    start = _PREAMBLE.size
    if start + header_len > len(data):
        raise BundleParseError("header", "header extends past end of file")
    manifest, metadata = _parse_header(data[start : start + header_len])
    blob = data[start + header_len :]
    _validate(manifest, len(blob), metadata)
    return WeightBundle(manifest, blob, metadata)


# -- conversion to and from layer parameters --------------------------------


def _metadata(dims: AttentionDims, n_layers: int, form: str, **extra) -> dict:
    meta = {
        "n_heads": dims.n_heads,
        "d_k_per_head": dims.d_k,
        "d_in": dims.d_in,
        "d_out": dims.d_out,
        "n_layers": n_layers,
        "form": form,
    }
    meta.update(extra)
    return meta


def bundle_from_concat(layers: list[ConcatMHAParams]) -> WeightBundle:
    if not layers:
        raise ValueError("at least one layer is required")
    arrays = {}
    for i, p in enumerate(layers):
        for n in CONCAT_NAMES:
            arrays[f"layer.{i}.{n}"] = getattr(p, n)
    return WeightBundle.from_arrays(arrays, _metadata(layers[0].dims, len(layers), "concat"))


def bundle_from_collab(layers: list[CollabMHAParams]) -> WeightBundle:
    if not layers:
        raise ValueError("at least one layer is required")
    arrays = {}
    for i, p in enumerate(layers):
        arrays[f"layer.{i}.wq_shared"] = p.w_q_shared
        arrays[f"layer.{i}.wk_shared"] = p.w_k_shared
        arrays[f"layer.{i}.mixing"] = p.mixing.m
        hi = p.content_bias.astype(np.float32)
        arrays[f"layer.{i}.content_bias"] = hi
        arrays[f"layer.{i}.content_bias_residual"] = p.content_bias - hi.astype(np.float64)
        arrays[f"layer.{i}.w_v"] = p.w_v
        arrays[f"layer.{i}.w_o"] = p.w_o
    meta = _metadata(layers[0].dims, len(layers), "collab", d_k_shared=layers[0].d_k_shared)
    return WeightBundle.from_arrays(arrays, meta)


def _dims(bundle: WeightBundle) -> AttentionDims:
    meta = bundle.metadata
    w_v = bundle.record("layer.0.w_v")
    if len(w_v.shape) != 2 or w_v.shape[1] % meta["n_heads"]:
        raise BundleValidationError(f"layer.0.w_v: shape {w_v.shape} not divisible into heads")
    try:
        return AttentionDims(
            d_in=meta["d_in"],
            d_out=meta["d_out"],
            n_heads=meta["n_heads"],
            d_k=meta["d_k_per_head"],
            d_v=w_v.shape[1] // meta["n_heads"],
        )
    except ValueError as e:
        raise BundleValidationError(f"metadata: {e}") from e


def concat_layers(bundle: WeightBundle) -> list[ConcatMHAParams]:
    if bundle.form != "concat":
        raise BundleValidationError(f"expected a concat bundle, got form {bundle.form!r}")
    dims = _dims(bundle)
    layers = []
    for i in range(bundle.metadata["n_layers"]):
        kw = {n: bundle.array(f"layer.{i}.{n}") for n in CONCAT_NAMES}
        try:
            layers.append(ConcatMHAParams(dims, **kw))
        except ValueError as e:
            raise BundleValidationError(f"layer.{i}: {e}") from e
    return layers


def collab_layers(bundle: WeightBundle) -> list[CollabMHAParams]:
    if bundle.form != "collab":
        raise BundleValidationError(f"expected a collab bundle, got form {bundle.form!r}")
    dims = _dims(bundle)
    layers = []
    for i in range(bundle.metadata["n_layers"]):
        a = lambda n: bundle.array(f"layer.{i}.{n}")  # noqa: E731
        content_bias = a("content_bias")
        if f"layer.{i}.content_bias_residual" in bundle.names():
            content_bias = content_bias + a("content_bias_residual")
        try:
            layers.append(
                CollabMHAParams(
                    dims,
                    w_q_shared=a("wq_shared"),
                    w_k_shared=a("wk_shared"),
                    mixing=MixingMatrix(a("mixing"), MixingKind.DENSE),
                    content_bias=content_bias,
                    w_v=a("w_v"),
                    w_o=a("w_o"),
                )
            )
        except ValueError as e:
            raise BundleValidationError(f"layer.{i}: {e}") from e
    return layers
