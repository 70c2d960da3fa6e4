"""On-disk formats: PGM (P5) images, LSK1 raw images, LSKM models, LSKD descriptors.

All binary formats are little-endian with f64 payloads and round-trip
bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .descriptors import ENCODER_TAGS, FaceDescriptor
from .dictionary import AtomDictionary, AutoencoderModel, MixtureModel

F64 = np.dtype("<f8")
IMAGE_MAGIC = b"LSK1"
MODEL_MAGIC = b"LSKM"
DESCRIPTOR_MAGIC = b"LSKD"
MODEL_TAGS = {AtomDictionary: 1, AutoencoderModel: 2, MixtureModel: 3}
_TAG_KINDS = {v: k for k, v in ENCODER_TAGS.items()}


class FormatError(ValueError):
    pass


def _read(path) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return path.read_bytes()


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {self.what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype=F64).astype(np.float64)

    def done(self):
        if self.pos != len(self.buf):
            raise FormatError(f"trailing bytes in {self.what}")


def _f64(a) -> bytes:
    return np.ascontiguousarray(a, dtype=F64).tobytes()


# --- images ------------------------------------------------------------------


def read_pgm(path) -> np.ndarray:
    """Binary PGM as float64 in [0, 1] (8- or 16-bit)."""
    buf = _read(path)
    if buf[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        fields.append(int(buf[start:pos]))
    pos += 1  # single whitespace byte before the raster
    w, h, maxval = fields
    if not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    raster = buf[pos : pos + w * h * dtype.itemsize]
    if len(raster) != w * h * dtype.itemsize:
        raise FormatError(f"{path}: truncated PGM raster")
    return np.frombuffer(raster, dtype=dtype).reshape(h, w).astype(np.float64) / maxval


def write_pgm(path, image, maxval: int = 255):
    """Quantise an image in [0, 1] to a binary PGM."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    raster = np.rint(img * maxval).astype(dtype)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode() + raster.tobytes())


def write_raw_image(path, image):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("image must be 2-D")
    h, w = img.shape
    Path(path).write_bytes(IMAGE_MAGIC + struct.pack("<II", w, h) + _f64(img))


def read_raw_image(path) -> np.ndarray:
    r = _Reader(_read(path), "LSK1 image")
    if r.take(4) != IMAGE_MAGIC:
        raise FormatError(f"{path}: not an LSK1 image")
    w, h = r.unpack("<II")
    img = r.floats(w * h).reshape(h, w)
    r.done()
    return img


def read_image(path) -> np.ndarray:
    """Dispatch on the file's magic bytes."""
    head = _read(path)[:4]
    if head == IMAGE_MAGIC:
        return read_raw_image(path)
    if head[:2] == b"P5":
        return read_pgm(path)
    raise FormatError(f"{path}: unknown image format")


# --- models ------------------------------------------------------------------


def model_to_bytes(model) -> bytes:
    tag = MODEL_TAGS.get(type(model))
    if tag is None:
        raise TypeError(f"cannot serialise {type(model).__name__}")
    if isinstance(model, AtomDictionary):
        d, n = model.atoms.shape
        body = _f64(model.atoms.T)  # column-major: one atom after another
    elif isinstance(model, AutoencoderModel):
        d, n = model.weights.shape
        body = b"".join(_f64(a) for a in (model.weights, model.bias, model.decode_weights, model.decode_bias))
    else:
        n, d = model.means.shape
        body = b"".join(_f64(a) for a in (model.weights, model.means, model.covariances))
    return MODEL_MAGIC + struct.pack("<BII", tag, d, n) + body


def model_from_bytes(buf: bytes):
    r = _Reader(buf, "LSKM model")
    if r.take(4) != MODEL_MAGIC:
        raise FormatError("not an LSKM model")
    tag, d, n = r.unpack("<BII")
    if tag == 1:
        model = AtomDictionary(r.floats(d * n).reshape(n, d).T.copy())
    elif tag == 2:
        model = AutoencoderModel(
            r.floats(d * n).reshape(d, n), r.floats(n), r.floats(n * d).reshape(n, d), r.floats(d)
        )
    elif tag == 3:
        model = MixtureModel(r.floats(n), r.floats(n * d).reshape(n, d), r.floats(n * d).reshape(n, d))
    else:
        raise FormatError(f"unknown model kind {tag}")
    r.done()
    return model


def save_model(path, model):
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path):
    return model_from_bytes(_read(path))


# --- descriptors --------------------------------------------------------------


def descriptor_to_bytes(desc: FaceDescriptor) -> bytes:
    r, n = desc.regions.shape
    head = DESCRIPTOR_MAGIC + struct.pack("<IIB", r, n, ENCODER_TAGS[desc.encoder_kind])
    return head + desc.config_hash + _f64(desc.regions)


def descriptor_from_bytes(buf: bytes) -> FaceDescriptor:
    r = _Reader(buf, "LSKD descriptor")
    if r.take(4) != DESCRIPTOR_MAGIC:
        raise FormatError("not an LSKD descriptor")
    n_regions, n_codes, tag = r.unpack("<IIB")
    if tag not in _TAG_KINDS:
        raise FormatError(f"unknown encoder kind {tag}")
    digest = r.take(8)
    regions = r.floats(n_regions * n_codes).reshape(n_regions, n_codes)
    r.done()
    return FaceDescriptor(regions, _TAG_KINDS[tag], digest)


def save_descriptor(path, desc: FaceDescriptor):
    Path(path).write_bytes(descriptor_to_bytes(desc))


def load_descriptor(path) -> FaceDescriptor:
    return descriptor_from_bytes(_read(path))
