"""Self-describing model files.

Layout::

    ORDBM-ARCHIVE <version>\\n          text header line
    u64 length + JSON metadata
    repeated sections:
        u16 name length, name
        u8 dtype length, numpy dtype string
        u8 ndim, ndim x u64 shape
        u64 payload length, raw little-endian payload
    b"END!"

Every length is checked against the bytes actually present; a short read
raises :class:`TruncatedArchiveError` and no partial model is returned.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import SvdFactors
from .features import FeatureScheme, GaussianNormalizer
from .joint_bm import JointModelParams
from .user_bm import UserModelParams

MAGIC = b"ORDBM-ARCHIVE"
FORMAT_VERSION = 1
END = b"END!"


class ArchiveError(ValueError):
    pass


class ArchiveVersionError(ArchiveError):
    pass


class TruncatedArchiveError(ArchiveError):
    pass


@dataclass(eq=False)
class ModelArchive:
    variant: str
    scheme: FeatureScheme
    user_ids: np.ndarray
    item_ids: np.ndarray
    dataset_hash: str = ""
    graph: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    joint: JointModelParams | None = None
    svd: SvdFactors | None = None
    version: int = FORMAT_VERSION

    @property
    def user_side(self) -> UserModelParams | None:
        return None if self.joint is None else self.joint.user_side


def _param_sections(prefix: str, p: UserModelParams) -> dict:
    return {f"{prefix}.alpha": p.alpha, f"{prefix}.beta": p.beta, f"{prefix}.gamma": p.gamma,
            f"{prefix}.edges": p.edges, f"{prefix}.lam": p.lam, f"{prefix}.seen": p.seen}


def _params_from(prefix: str, sec: dict) -> UserModelParams:
    return UserModelParams(sec[f"{prefix}.alpha"], sec[f"{prefix}.beta"], sec[f"{prefix}.gamma"],
                           sec[f"{prefix}.edges"], sec[f"{prefix}.lam"], sec[f"{prefix}.seen"])


def _ids_meta(ids: np.ndarray, name: str, sections: dict):
    if ids.dtype == object:
        return [str(x) for x in ids.tolist()]
    sections[name] = ids
    return None


def _write_section(buf, name: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype == object:
        raise ArchiveError(f"section {name} has object dtype")
    arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    nb = name.encode()
    dt = arr.dtype.str.encode()
    buf.write(struct.pack("<H", len(nb)) + nb)
    buf.write(struct.pack("<B", len(dt)) + dt)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    payload = arr.tobytes()
    buf.write(struct.pack("<Q", len(payload)) + payload)


def dumps(archive: ModelArchive) -> bytes:
    sections: dict = {}
    meta = {
        "variant": archive.variant,
        "scheme": {"kind": archive.scheme.kind, "n_levels": archive.scheme.n_levels},
        "dataset_hash": archive.dataset_hash,
        "graph": archive.graph,
        "config": archive.config,
        "has_item_side": bool(archive.joint is not None and archive.joint.item_side is not None),
        "has_user_side": archive.joint is not None,
        "has_svd": archive.svd is not None,
    }
    if archive.scheme.normalizer is not None:
        meta["scheme"]["normalizer"] = [archive.scheme.normalizer.mean, archive.scheme.normalizer.std]
    meta["user_ids"] = _ids_meta(archive.user_ids, "ids.user", sections)
    meta["item_ids"] = _ids_meta(archive.item_ids, "ids.item", sections)
    if archive.joint is not None:
        sections.update(_param_sections("user", archive.joint.user_side))
        if archive.joint.item_side is not None:
            sections.update(_param_sections("item", archive.joint.item_side))
    if archive.svd is not None:
        s = archive.svd
        meta["svd"] = {"global_mean": s.global_mean, "n_levels": s.n_levels}
        sections.update({"svd.P": s.user_factors, "svd.Q": s.item_factors,
                         "svd.seen_users": s.seen_users, "svd.seen_items": s.seen_items})
    meta["sections"] = list(sections)
    buf = io.BytesIO()
    buf.write(MAGIC + f" {archive.version}\n".encode())
    header = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<Q", len(header)) + header)
    for name, arr in sections.items():
        _write_section(buf, name, arr)
    buf.write(END)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise TruncatedArchiveError(
                f"archive truncated: need {n} bytes at offset {self.pos}, {len(self.data) - self.pos} left")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes, reader_version: int = FORMAT_VERSION) -> ModelArchive:
    nl = data.find(b"\n")
    if nl < 0 or not data.startswith(MAGIC + b" "):
        raise ArchiveError("not an ordbm archive")
    try:
        version = int(data[len(MAGIC) + 1:nl])
    except ValueError:
        raise ArchiveError("unreadable archive version") from None
    if version != reader_version:
        raise ArchiveVersionError(f"archive version {version} not readable by version {reader_version} reader")
    r = _Reader(data)
    r.pos = nl + 1
    (hlen,) = r.unpack("<Q")
    try:
        meta = json.loads(r.take(hlen))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"corrupt archive header: {exc}") from None
    sec = {}
    for _ in meta["sections"]:
        (n,) = r.unpack("<H")
        name = r.take(n).decode()
        (n,) = r.unpack("<B")
        dt = np.dtype(r.take(n).decode())
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        (plen,) = r.unpack("<Q")
        if plen != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise TruncatedArchiveError(f"section {name}: payload length {plen} does not match shape {shape}")
        sec[name] = np.frombuffer(r.take(plen), dtype=dt).reshape(shape).copy()
    if r.take(len(END)) != END or r.pos != len(data):
        raise TruncatedArchiveError("missing end marker or trailing bytes")

    sm = meta["scheme"]
    norm = GaussianNormalizer(*sm["normalizer"]) if "normalizer" in sm else None
    scheme = FeatureScheme(sm["kind"], sm["n_levels"], norm)
    joint = None
    if meta["has_user_side"]:
        joint = JointModelParams(_params_from("user", sec),
                                 _params_from("item", sec) if meta["has_item_side"] else None)
    svd = None
    if meta["has_svd"]:
        svd = SvdFactors(sec["svd.P"], sec["svd.Q"], meta["svd"]["global_mean"], meta["svd"]["n_levels"],
                         sec["svd.seen_users"], sec["svd.seen_items"])
    user_ids = sec["ids.user"] if meta["user_ids"] is None else np.array(meta["user_ids"], dtype=object)
    item_ids = sec["ids.item"] if meta["item_ids"] is None else np.array(meta["item_ids"], dtype=object)
    return ModelArchive(meta["variant"], scheme, user_ids, item_ids, meta["dataset_hash"],
                        meta["graph"], meta["config"], joint, svd, version)


def save_model(archive: ModelArchive, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(archive))
    tmp.replace(path)


def load_model(path, reader_version: int = FORMAT_VERSION) -> ModelArchive:
    return loads(Path(path).read_bytes(), reader_version)
