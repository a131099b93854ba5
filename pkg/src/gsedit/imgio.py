"""Image and tensor file I/O: 8-bit PNG, PFM float maps, and the per-Gaussian
float sidecar container."""

import struct

import numpy as np
from PIL import Image

from .errors import FormatError

# sidecar magic: 5 ASCII bytes, two NULs, one version byte
WEIGHTS_MAGIC = b"GSWTS\x00\x00\x01"


def write_png(path, image):
    """Write an H x W x 3 (or H x W) float image in [0,1] as 8-bit PNG."""
    arr = np.asarray(image, dtype=np.float64)
    arr = np.clip(arr, 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data).save(str(path))


def read_png(path):
    """Read a PNG into float64 in [0,1]. RGB images come back H x W x 3."""
    with Image.open(str(path)) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        data = np.asarray(im)
    return data.astype(np.float64) / 255.0


def write_mask_png(path, mask):
    Image.fromarray(np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8)).save(str(path))


def read_mask_png(path):
    with Image.open(str(path)) as im:
        data = np.asarray(im.convert("L"))
    return data >= 128


def write_pfm(path, data):
    """Write a float map as little-endian PFM (scale -1.0).

    Accepts H x W (greyscale, 'Pf') or H x W x 3 (color, 'PF'). Rows are
    stored bottom-to-top per the PFM convention.
    """
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        header = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = b"PF"
    else:
        raise FormatError(f"PFM needs HxW or HxWx3 data, got shape {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(arr[::-1], dtype="<f4").tobytes())


def read_pfm(path):
    """Read a PFM file into float64 (H x W or H x W x 3)."""
    with open(path, "rb") as f:
        header = f.readline().rstrip()
        if header == b"PF":
            channels = 3
        elif header == b"Pf":
            channels = 1
        else:
            raise FormatError(f"not a PFM file: bad header {header!r}")
        dims = f.readline().split()
        if len(dims) != 2:
            raise FormatError("PFM: malformed dimensions line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        endian = "<" if scale < 0 else ">"
        count = w * h * channels
        raw = f.read(count * 4)
        if len(raw) != count * 4:
            raise FormatError("PFM: truncated payload")
    arr = np.frombuffer(raw, dtype=endian + "f4").reshape(h, w, channels)[::-1]
    if channels == 1:
        arr = arr[:, :, 0]
    return arr.astype(np.float64)


def write_weights_sidecar(path, values):
    """Write a per-Gaussian float32 array: magic, u64 LE count, raw payload."""
    arr = np.ascontiguousarray(np.asarray(values), dtype="<f4")
    if arr.ndim != 1:
        raise FormatError("sidecar payload must be a flat array")
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<Q", arr.shape[0]))
        f.write(arr.tobytes())


def read_weights_sidecar(path):
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != WEIGHTS_MAGIC:
            raise FormatError(f"bad sidecar magic {magic!r}")
        (count,) = struct.unpack("<Q", f.read(8))
        raw = f.read(count * 4)
        if len(raw) != count * 4:
            raise FormatError("sidecar: truncated payload")
    return np.frombuffer(raw, dtype="<f4").astype(np.float32)
