"""Bit-exact file formats: dense flow, netpbm images, match lists.

Flow uses the Middlebury layout: a 4-byte little-endian float magic
(202021.25, which is the byte string "PIEH"), int32 width and height, then
row-major interleaved (u, v) float32 pairs. Validity travels in a sidecar
PGM (255 = valid) written and read automatically next to the flow file.
Images are binary PPM (P6) / PGM (P5) with maxval 255 and nothing else.
All readers reject malformed input outright; there are no partial results.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "FlowField",
    "FileFormatError",
    "BadMagicError",
    "TruncatedFileError",
    "read_flo",
    "write_flo",
    "read_image",
    "write_image",
    "read_correspondences",
    "write_correspondences",
    "valid_sidecar_path",
]

FLO_MAGIC = 202021.25


class FileFormatError(ValueError):
    """Input bytes do not form a well-formed file of the expected format."""


class BadMagicError(FileFormatError):
    pass


class TruncatedFileError(FileFormatError):
    pass


@dataclass
class FlowField:
    """Dense per-pixel displacement with validity mask.

    flow[i, j] is the (dx, dy) displacement in pixels of pixel (j, i);
    valid[i, j] says whether that displacement means anything.
    """

    width: int
    height: int
    flow: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=np.float32)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.flow.shape != (self.height, self.width, 2):
            raise FileFormatError(
                f"flow shape {self.flow.shape} != ({self.height},{self.width},2)")
        if self.valid.shape != (self.height, self.width):
            raise FileFormatError(
                f"valid shape {self.valid.shape} != ({self.height},{self.width})")
        if not np.isfinite(self.flow[self.valid]).all():
            raise FileFormatError("non-finite flow inside the valid mask")

    @classmethod
    def all_valid(cls, flow):
        flow = np.asarray(flow, dtype=np.float32)
        h, w = flow.shape[:2]
        return cls(width=w, height=h, flow=flow, valid=np.ones((h, w), dtype=bool))


def valid_sidecar_path(flo_path):
    p = Path(flo_path)
    return p.with_name(p.name + ".valid.pgm")


def write_flo(field, path, sidecar=True):
    """Write Middlebury flow; the validity mask lands in a sidecar PGM."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(struct.pack("<f", FLO_MAGIC))
        f.write(struct.pack("<ii", field.width, field.height))
        f.write(field.flow.astype("<f4").tobytes())
    if sidecar:
        mask = np.where(field.valid, 255, 0).astype(np.uint8)
        write_image(mask.astype(np.float32) / 255.0, valid_sidecar_path(path))


def read_flo(path):
    """Read Middlebury flow; mask from the sidecar PGM when present."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes is shorter than a header")
    magic = struct.unpack("<f", raw[0:4])[0]
    if magic != FLO_MAGIC:
        raise BadMagicError(f"{path}: magic {magic!r} != {FLO_MAGIC}")
    w, h = struct.unpack("<ii", raw[4:12])
    if w <= 0 or h <= 0:
        raise FileFormatError(f"{path}: nonpositive dimensions {w}x{h}")
    need = 12 + 8 * w * h
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, need {need}")
    flow = np.frombuffer(raw[12:need], dtype="<f4").reshape(h, w, 2)
    sidecar = valid_sidecar_path(path)
    if sidecar.exists():
        mask_img = read_image(sidecar)
        valid = mask_img[..., 0] >= 0.5
        if valid.shape != (h, w):
            raise FileFormatError(f"{sidecar}: mask {valid.shape} != flow {h}x{w}")
    else:
        valid = np.ones((h, w), dtype=bool)
    return FlowField(width=w, height=h, flow=flow.copy(), valid=valid)


# -- netpbm ----------------------------------------------------------------


def _read_netpbm_header(raw, path):
    # magic, width, height, maxval as whitespace-separated tokens with
    # '#'-to-newline comments, then a single whitespace byte before pixels
    tokens = []
    i = 2
    magic = raw[0:2]
    while len(tokens) < 3:
        if i >= len(raw):
            raise TruncatedFileError(f"{path}: header ended early")
        c = raw[i:i + 1]
        if c == b"#":
            while i < len(raw) and raw[i:i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(raw) and not raw[j:j + 1].isspace():
                j += 1
            tokens.append(raw[i:j])
            i = j
    i += 1  # the single whitespace after maxval
    return magic, int(tokens[0]), int(tokens[1]), int(tokens[2]), i


def read_image(path):
    """Read binary PPM/PGM into float32 [0,1]; gray replicates to 3 channels."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 2 or raw[0:2] not in (b"P5", b"P6"):
        raise BadMagicError(f"{path}: not a binary PGM/PPM")
    magic, w, h, maxval, offset = _read_netpbm_header(raw, path)
    if maxval != 255:
        raise FileFormatError(f"{path}: maxval {maxval} unsupported (need 255)")
    if w <= 0 or h <= 0:
        raise FileFormatError(f"{path}: nonpositive dimensions {w}x{h}")
    channels = 3 if magic == b"P6" else 1
    need = offset + w * h * channels
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, need {need}")
    data = np.frombuffer(raw[offset:need], dtype=np.uint8).reshape(h, w, channels)
    img = data.astype(np.float32) / 255.0
    if channels == 1:
        img = np.repeat(img, 3, axis=2)
    return img


def write_image(img, path):
    """Write float [0,1] image as P6 (H,W,3) or P5 (H,W / H,W,1)."""
    path = Path(path)
    arr = np.asarray(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    if data.ndim == 2:
        header = f"P5\n{data.shape[1]} {data.shape[0]}\n255\n"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = f"P6\n{data.shape[1]} {data.shape[0]}\n255\n"
    else:
        raise FileFormatError(f"cannot write image of shape {arr.shape}")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(data.tobytes())


# -- correspondence lists -----------------------------------------------------


def write_correspondences(records, path):
    """Write match lines 'qx qy px py cycle_error' at 6 significant digits."""
    arr = np.asarray(records, dtype=np.float64).reshape(-1, 5)
    lines = [" ".join(f"{v:.6g}" for v in row) for row in arr]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_correspondences(path):
    """Read match lines back into an (N, 5) float array; '#' comments allowed."""
    rows = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise FileFormatError(
                f"{path}: line {lineno}: expected 5 fields, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise FileFormatError(f"{path}: line {lineno}: non-numeric field") from None
    return np.array(rows, dtype=np.float64).reshape(-1, 5)
