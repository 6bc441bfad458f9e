"""The trained model and its on-disk container.

Container layout (all integers little-endian)::

    8 bytes   magic  b"DECAFMDL"
    4 bytes   uint32 format version
    8 bytes   uint64 manifest length in bytes
    manifest  UTF-8 JSON: versions, dims, config, metadata, array table
    payload   raw arrays at the offsets listed in the table (relative to the
              payload start); floats are '<f4', index arrays '<i4' / '<i8'
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import __version__
from .clustering import LabelClustering
from .embedding import CombinationBlock, EmbeddingBlock, combine, embed_label
from .errors import ModelFormatError
from .linalg import sigmoid
from .shortlister import Shortlister

__all__ = [
    "Model",
    "CLASSIFIER_MODES",
    "save_model",
    "load_model",
    "save_container",
    "load_container",
    "model_arrays",
    "model_from_arrays",
]

MAGIC = b"DECAFMDL"
FORMAT_VERSION = 1
CLASSIFIER_MODES = ("full", "z1", "z2")

_ALLOWED_DTYPES = {"<f4", "<i4", "<i8"}


@dataclass
class Model:
    """Token embeddings, the two text blocks, classifier parts and shortlister.

    ``refinement`` holds one row per label (L x D).  ``classifier_mode``
    selects how ``w_l`` is formed: ``full`` combines text embedding and
    refinement through ``classifier_gates``, ``z1`` uses the text embedding
    alone and ``z2`` drops the text embedding.
    """

    E: np.ndarray
    doc_block: EmbeddingBlock
    label_block: EmbeddingBlock
    classifier_gates: CombinationBlock
    label_texts: sp.csr_matrix
    refinement: np.ndarray | None = None
    shortlister: Shortlister | None = None
    classifier_mode: str = "full"
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.classifier_mode not in CLASSIFIER_MODES:
            raise ValueError(f"unknown classifier mode {self.classifier_mode!r}")

    @property
    def dim(self) -> int:
        return self.E.shape[1]

    @property
    def num_tokens(self) -> int:
        return self.E.shape[0]

    @property
    def num_labels(self) -> int:
        return self.label_texts.shape[0]

    def label_embeddings(self, label_ids=None) -> np.ndarray:
        z = self.label_texts if label_ids is None else self.label_texts[label_ids]
        return embed_label(self, z)

    def classifiers(self, label_ids=None) -> np.ndarray:
        """``w_l`` rows for ``label_ids`` (all labels by default)."""
        ids = np.arange(self.num_labels) if label_ids is None else np.asarray(label_ids)
        z2 = self.refinement[ids] if self.refinement is not None else np.zeros((ids.size, self.dim))
        if self.classifier_mode == "z2":
            return sigmoid(self.classifier_gates.beta) * np.asarray(z2, dtype=np.float64)
        z1 = self.label_embeddings(ids)
        if self.classifier_mode == "z1":
            return z1
        return combine(self.classifier_gates, z1, z2)

    def astype(self, dtype) -> Model:
        """Copy with every trainable array cast to ``dtype``."""
        sl = self.shortlister
        if sl is not None:
            sl = Shortlister(
                sl.clustering,
                sl.H.astype(dtype),
                None if sl.refinement is None else sl.refinement.astype(dtype),
                None if sl.gates is None else sl.gates.astype(dtype),
                None if sl.encoder_E is None else sl.encoder_E.astype(dtype),
                None if sl.encoder_block is None else sl.encoder_block.astype(dtype),
            )
        return replace(
            self,
            E=self.E.astype(dtype),
            doc_block=self.doc_block.astype(dtype),
            label_block=self.label_block.astype(dtype),
            classifier_gates=self.classifier_gates.astype(dtype),
            refinement=None if self.refinement is None else self.refinement.astype(dtype),
            shortlister=sl,
            config=dict(self.config),
        )

    def copy(self) -> Model:
        return self.astype(self.E.dtype)


def _le(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype.kind == "f":
        return np.ascontiguousarray(a, dtype="<f4")
    if a.dtype.kind in "iub":
        if a.size and (a.max() > np.iinfo(np.int32).max or a.min() < np.iinfo(np.int32).min):
            return np.ascontiguousarray(a, dtype="<i8")
        return np.ascontiguousarray(a, dtype="<i4")
    raise TypeError(f"cannot serialise dtype {a.dtype}")


def save_container(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    table = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        a = _le(arr)
        table.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                      "offset": offset, "nbytes": a.nbytes})
        blobs.append(a.tobytes())
        offset += a.nbytes
    manifest = dict(meta)
    manifest["format_version"] = FORMAT_VERSION
    manifest["package_version"] = __version__
    manifest["arrays"] = table
    raw = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)


def load_container(path):
    data = Path(path).read_bytes()
    head = len(MAGIC) + 12
    if len(data) < head or data[: len(MAGIC)] != MAGIC:
        raise ModelFormatError(f"{path}: not a model container (bad magic bytes)")
    version, mlen = struct.unpack("<IQ", data[len(MAGIC):head])
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if head + mlen > len(data):
        raise ModelFormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[head:head + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: unreadable manifest ({exc})") from None
    base = head + mlen
    arrays = {}
    for entry in manifest.get("arrays", []):
        if entry["dtype"] not in _ALLOWED_DTYPES:
            raise ModelFormatError(f"{path}: unsupported dtype {entry['dtype']}")
        lo = base + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(data):
            raise ModelFormatError(f"{path}: truncated array {entry['name']!r}")
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if count * dt.itemsize != entry["nbytes"]:
            raise ModelFormatError(f"{path}: array {entry['name']!r} size mismatch")
        arrays[entry["name"]] = np.frombuffer(data, dtype=dt, count=count, offset=lo).reshape(
            entry["shape"]).copy()
    return manifest, arrays


def _block_arrays(prefix, blk: EmbeddingBlock, out):
    out[f"{prefix}.R"] = blk.R
    out[f"{prefix}.alpha"] = blk.alpha
    out[f"{prefix}.beta"] = blk.beta
    if blk.u is not None:
        out[f"{prefix}.u"] = blk.u


def model_arrays(model: Model) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {"E": model.E}
    _block_arrays("doc", model.doc_block, out)
    _block_arrays("label", model.label_block, out)
    out["clf.alpha"] = model.classifier_gates.alpha
    out["clf.beta"] = model.classifier_gates.beta
    if model.refinement is not None:
        out["refinement"] = model.refinement
    z = sp.csr_matrix(model.label_texts)
    out["label_texts.indptr"] = z.indptr.astype(np.int64)
    out["label_texts.indices"] = z.indices
    out["label_texts.data"] = z.data
    sl = model.shortlister
    if sl is not None:
        out["shortlister.H"] = sl.H
        out["shortlister.sizes"] = sl.clustering.sizes()
        out["shortlister.members"] = np.concatenate(sl.clustering.clusters)
        if sl.refinement is not None:
            out["shortlister.refinement"] = sl.refinement
        if sl.gates is not None:
            out["shortlister.alpha"] = sl.gates.alpha
            out["shortlister.beta"] = sl.gates.beta
        if sl.encoder_E is not None:
            out["shortlister.E"] = sl.encoder_E
            _block_arrays("shortlister.doc", sl.encoder_block, out)
    return out


def _f32(a):
    return np.asarray(a, dtype=np.float32)


def _block(arrays, prefix, dim, path):
    R = arrays[f"{prefix}.R"]
    if R.shape != (dim, dim):
        raise ModelFormatError(f"{path}: {prefix}.R has shape {R.shape}, expected {(dim, dim)}")
    for part in ("alpha", "beta"):
        if arrays[f"{prefix}.{part}"].shape != (dim,):
            raise ModelFormatError(f"{path}: {prefix}.{part} has wrong length")
    u = arrays.get(f"{prefix}.u")
    return EmbeddingBlock(_f32(R), _f32(arrays[f"{prefix}.alpha"]), _f32(arrays[f"{prefix}.beta"]),
                          None if u is None else _f32(u))


def model_from_arrays(manifest: dict, arrays: dict, path="<memory>") -> Model:
    try:
        E = _f32(arrays["E"])
        num_tokens, dim = E.shape
        dims = manifest.get("dims", {})
        if dims and (dims.get("D") != dim or dims.get("V") != num_tokens):
            raise ModelFormatError(f"{path}: manifest dims {dims} disagree with E {E.shape}")
        num_labels = dims.get("L")
        indptr = arrays["label_texts.indptr"]
        if num_labels is None:
            num_labels = indptr.size - 1
        if indptr.size != num_labels + 1:
            raise ModelFormatError(f"{path}: label text rows disagree with L={num_labels}")
        z = sp.csr_matrix(
            (_f32(arrays["label_texts.data"]), arrays["label_texts.indices"], indptr),
            shape=(num_labels, num_tokens),
        )
        refinement = arrays.get("refinement")
        if refinement is not None and refinement.shape != (num_labels, dim):
            raise ModelFormatError(f"{path}: refinement shape {refinement.shape} inconsistent")
        sl = None
        if "shortlister.H" in arrays:
            H = _f32(arrays["shortlister.H"])
            sizes = arrays["shortlister.sizes"]
            members = arrays["shortlister.members"].astype(np.int64)
            if H.shape != (sizes.size, dim) or members.size != num_labels:
                raise ModelFormatError(f"{path}: shortlister arrays inconsistent with dims")
            clusters = np.split(members, np.cumsum(sizes)[:-1])
            levels = int(round(np.log2(max(sizes.size, 1))))
            clustering = LabelClustering(list(clusters), levels, num_labels)
            gates = None
            if "shortlister.alpha" in arrays:
                gates = CombinationBlock(_f32(arrays["shortlister.alpha"]), _f32(arrays["shortlister.beta"]))
            ref = arrays.get("shortlister.refinement")
            enc_E = enc_blk = None
            if "shortlister.E" in arrays:
                enc_E = _f32(arrays["shortlister.E"])
                if enc_E.shape != E.shape:
                    raise ModelFormatError(f"{path}: shortlister.E shape {enc_E.shape} disagrees with E")
                enc_blk = _block(arrays, "shortlister.doc", dim, path)
            sl = Shortlister(clustering, H, None if ref is None else _f32(ref), gates, enc_E, enc_blk)
        return Model(
            E=E,
            doc_block=_block(arrays, "doc", dim, path),
            label_block=_block(arrays, "label", dim, path),
            classifier_gates=CombinationBlock(_f32(arrays["clf.alpha"]), _f32(arrays["clf.beta"])),
            label_texts=z,
            refinement=None if refinement is None else _f32(refinement),
            shortlister=sl,
            classifier_mode=manifest.get("classifier_mode", "full"),
            config=manifest.get("config", {}),
        )
    except KeyError as exc:
        raise ModelFormatError(f"{path}: missing array {exc}") from None


def model_manifest(model: Model) -> dict:
    return {
        "kind": "model",
        "dims": {"D": model.dim, "V": model.num_tokens, "L": model.num_labels,
                 "K": None if model.shortlister is None else model.shortlister.num_clusters},
        "classifier_mode": model.classifier_mode,
        "config": model.config,
    }


def save_model(model: Model, path, extra_meta=None, extra_arrays=None) -> None:
    meta = model_manifest(model)
    if extra_meta:
        meta.update(extra_meta)
    arrays = model_arrays(model)
    for k, v in (extra_arrays or {}).items():
        arrays[f"extra.{k}"] = v
    save_container(path, meta, arrays)


def load_model(path, with_extras: bool = False):
    manifest, arrays = load_container(path)
    model = model_from_arrays(manifest, arrays, path)
    if not with_extras:
        return model
    extras = {k[len("extra."):]: v for k, v in arrays.items() if k.startswith("extra.")}
    return model, manifest, extras
