"""File formats: PFM, PNG, weight files and dataset manifests.

Weight file layout::

    b"MHDR1\\n"                       magic line
    uint64 little-endian              byte length of the JSON header
    JSON header (UTF-8, sorted keys)  {"kind", "spec", "T", "tensors": [{"name", "shape", "offset"}], "provenance"}
    payload                           float32 little-endian tensors in directory order

``offset`` counts float32 elements from the start of the payload.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import png

from .errors import (BadMagic, DecodeFailure, InvalidArgument, MalformedHeader, RangeOverflow,
                     ShapeDirectoryMismatch, TruncatedPayload, UnsupportedBitDepth)
from .modulo import standardize_bits
from .priors import DenoiserSpec, DenoiserWeights, weight_shapes
from .reconstruct import UnrolledWeights

MAGIC = b"MHDR1\n"


@contextmanager
def atomic_write(path, mode: str = "wb"):
    """Write to a temporary sibling file and rename it over ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- PFM ----------------------------------------------------------------------

def _read_token(fh) -> bytes:
    tok = b""
    while True:
        c = fh.read(1)
        if not c:
            if tok:
                return tok
            raise MalformedHeader("unexpected end of file in PFM header")
        if c.isspace():
            if tok:
                return tok
            continue
        tok += c


def read_pfm(path) -> np.ndarray:
    """Read a PFM file as (H, W) for ``Pf`` or (H, W, 3) for ``PF``, rows top-down."""
    with open(path, "rb") as fh:
        ident = _read_token(fh)
        if ident == b"PF":
            channels = 3
        elif ident == b"Pf":
            channels = 1
        else:
            raise MalformedHeader(f"bad PFM identifier {ident!r}")
        try:
            width, height = int(_read_token(fh)), int(_read_token(fh))
            scale = float(_read_token(fh))
        except ValueError as exc:
            raise MalformedHeader(f"bad PFM dimensions or scale: {exc}") from None
        if width <= 0 or height <= 0 or scale == 0:
            raise MalformedHeader("PFM dimensions must be positive and scale non-zero")
        payload = fh.read()
    count = width * height * channels
    if len(payload) < 4 * count:
        raise TruncatedPayload(f"PFM payload has {len(payload)} bytes, expected {4 * count}")
    if len(payload) > 4 * count:
        raise MalformedHeader(f"PFM payload larger than a {channels}-channel {width}x{height} image")
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(payload, dtype=dtype).reshape(height, width, channels)[::-1]
    data = data.astype(np.float64)
    return data[..., 0] if channels == 1 else data


def write_pfm(path, image, kind: str | None = None) -> None:
    """Write float32 little-endian PFM (negative scale), rows bottom-up."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] == 1:
        img = img[..., 0]
    channels = 1 if img.ndim == 2 else img.shape[-1]
    if channels not in (1, 3):
        raise MalformedHeader(f"PFM stores 1 or 3 channels, got {channels}")
    kind = kind or ("Pf" if channels == 1 else "PF")
    if (kind == "Pf") != (channels == 1) or kind not in ("Pf", "PF"):
        raise MalformedHeader(f"header {kind!r} cannot hold {channels} channel(s)")
    h, w = img.shape[:2]
    header = f"{kind}\n{w} {h}\n-1.0\n".encode("ascii")
    body = np.ascontiguousarray(img[::-1], dtype="<f4").tobytes()
    with atomic_write(path) as fh:
        fh.write(header + body)


# --- PNG ----------------------------------------------------------------------

def write_png(path, image, bits: int = 8) -> None:
    """Store integer DN values exactly in an 8- or 16-bit grey/RGB PNG.

    Non-integer values are rounded to the nearest integer first.
    """
    if bits not in (8, 16):
        raise UnsupportedBitDepth(f"PNG bit depth must be 8 or 16, got {bits}")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] == 1:
        img = img[..., 0]
    if img.ndim == 3 and img.shape[-1] != 3:
        raise InvalidArgument(f"PNG stores 1 or 3 channels, got {img.shape[-1]}")
    q = np.round(img)
    top = 2 ** bits - 1
    if q.size and (q.min() < 0 or q.max() > top):
        raise RangeOverflow(f"values span [{q.min():g}, {q.max():g}], {bits}-bit PNG holds [0, {top}]")
    h, w = q.shape[:2]
    greyscale = q.ndim == 2
    rows = q.astype(np.uint16 if bits == 16 else np.uint8).reshape(h, -1)
    writer = png.Writer(width=w, height=h, greyscale=greyscale, bitdepth=bits)
    with atomic_write(path) as fh:
        writer.write(fh, rows.tolist())


def read_png(path) -> np.ndarray:
    """Read a PNG as float DN values, (H, W) for grey or (H, W, 3) for colour; alpha is dropped."""
    try:
        width, height, rows, info = png.Reader(filename=str(path)).asDirect()
        data = np.array([np.asarray(r) for r in rows], dtype=np.float64)
    except png.Error as exc:
        raise DecodeFailure(str(exc)) from None
    planes = info["planes"]
    data = data.reshape(height, width, planes)
    if info.get("alpha"):
        data = data[..., :-1]
    return data[..., 0] if data.shape[-1] == 1 else data


def read_image(path) -> np.ndarray:
    suffix = Path(path).suffix.lower()
    if suffix == ".pfm":
        return read_pfm(path)
    if suffix == ".png":
        return read_png(path)
    raise InvalidArgument(f"unsupported image format {suffix!r}")


# --- weights ------------------------------------------------------------------

def _pack(kind: str, spec: DenoiserSpec, tensors: dict, T, provenance) -> bytes:
    directory, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        offset += arr.size
    header = {"kind": kind, "spec": spec.to_dict(), "T": T, "tensors": directory,
              "provenance": provenance or {}}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks)


def save_weights(path, weights, provenance: dict | None = None) -> None:
    """Save :class:`DenoiserWeights` or :class:`UnrolledWeights` at float32 precision."""
    if isinstance(weights, UnrolledWeights):
        blob = _pack("unrolled", weights.spec, weights.params(), weights.T, provenance)
    elif isinstance(weights, DenoiserWeights):
        blob = _pack("denoiser", weights.spec, weights.tensors, None, provenance)
    else:
        raise InvalidArgument(f"cannot save {type(weights).__name__}")
    with atomic_write(path) as fh:
        fh.write(blob)


@dataclass
class WeightFile:
    kind: str
    spec: DenoiserSpec
    T: int | None
    tensors: dict[str, np.ndarray]
    provenance: dict = field(default_factory=dict)

    def weights(self):
        shapes = {k: tuple(v) for k, v in weight_shapes(self.spec).items()}
        theta = DenoiserWeights(self.spec, {k: self.tensors[k] for k in shapes})
        if self.kind == "denoiser":
            return theta
        return UnrolledWeights(self.tensors["rho_raw"], self.tensors["sigma_raw"], theta)


def read_weight_file(path) -> WeightFile:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise BadMagic(f"{path}: not a weight file")
    pos = len(MAGIC)
    if len(blob) < pos + 8:
        raise TruncatedPayload("weight file ends inside the header length")
    (hlen,) = struct.unpack("<Q", blob[pos:pos + 8])
    pos += 8
    if len(blob) < pos + hlen:
        raise TruncatedPayload("weight file ends inside the JSON header")
    try:
        header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
        kind = header["kind"]
        spec = DenoiserSpec.from_dict(header["spec"])
        directory = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedHeader(f"bad weight header: {exc}") from None
    payload = blob[pos + hlen:]
    total = sum(int(np.prod(d["shape"], dtype=np.int64)) for d in directory)
    if len(payload) < 4 * total:
        raise TruncatedPayload(f"payload holds {len(payload) // 4} floats, header declares {total}")
    if len(payload) > 4 * total:
        raise ShapeDirectoryMismatch("payload longer than the tensor directory")

    expected = {k: tuple(v) for k, v in weight_shapes(spec).items()}
    if kind == "unrolled":
        T = header.get("T")
        if not isinstance(T, int) or T < 1:
            raise MalformedHeader("unrolled weight file needs a positive T")
        expected = {"rho_raw": (T,), "sigma_raw": (T,), **expected}
    elif kind != "denoiser":
        raise MalformedHeader(f"unknown weight kind {kind!r}")
    got = {d["name"]: tuple(d["shape"]) for d in directory}
    if got != expected or [d["name"] for d in directory] != list(expected):
        raise ShapeDirectoryMismatch("tensor directory does not match the denoiser spec")

    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    tensors = {}
    for d in directory:
        n = int(np.prod(d["shape"], dtype=np.int64))
        tensors[d["name"]] = values[d["offset"]:d["offset"] + n].reshape(d["shape"]).copy()
    return WeightFile(kind, spec, header.get("T"), tensors, header.get("provenance", {}))


def load_weights(path):
    return read_weight_file(path).weights()


# --- dataset manifest ---------------------------------------------------------

ROLES = ("train", "val", "test")


@dataclass
class ManifestEntry:
    path: Path
    bit_depth: int
    role: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    seed: int = 0
    target_bits: int = 10

    def paths(self, role: str) -> list[Path]:
        return [e.path for e in self.entries if e.role == role]

    def load(self, role: str = "train") -> list[np.ndarray]:
        """Images of one role, each rescaled so its maximum is ``2^target_bits - 1``."""
        return [standardize_bits(read_image(p), self.target_bits) for p in self.paths(role)]


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        items = doc["images"]
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedHeader(f"bad manifest {path}: {exc}") from None
    entries, seen = [], {}
    for item in items:
        p = (path.parent / item["path"]).resolve()
        role = item.get("role", "train")
        if role not in ROLES:
            raise InvalidArgument(f"unknown role {role!r} for {item['path']}")
        if not p.exists():
            raise InvalidArgument(f"manifest entry not found: {item['path']}")
        if seen.setdefault(p, role) != role:
            raise InvalidArgument(f"{item['path']} listed under more than one role")
        entries.append(ManifestEntry(p, int(item.get("bit_depth", 10)), role))
    return DatasetManifest(entries, int(doc.get("seed", 0)), int(doc.get("target_bits", 10)))


def write_manifest(path, entries: list[dict], seed: int = 0, target_bits: int = 10) -> None:
    doc = {"images": entries, "seed": seed, "target_bits": target_bits}
    with atomic_write(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")
