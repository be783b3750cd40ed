"""Image and cubemap file IO: PFM (linear float), PNG (8-bit display),
and a tone-mapped cross-layout cubemap export for inspection."""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .errors import FormatError


def write_pfm(path, data: np.ndarray) -> None:
    """Write a (H, W) or (H, W, 3) float array as little-endian PFM."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        data = data[..., None]
    if data.shape[2] not in (1, 3):
        raise ValueError("PFM supports 1 or 3 channels")
    header = b"PF\n" if data.shape[2] == 3 else b"Pf\n"
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(f"{data.shape[1]} {data.shape[0]}\n".encode())
        fh.write(b"-1.0\n")  # negative scale marks little-endian
        fh.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic not in (b"PF", b"Pf"):
            raise FormatError(f"not a PFM file: {path!r}", offset=0)
        dims = fh.readline().split()
        if len(dims) != 2:
            raise FormatError("malformed PFM dimensions", offset=3)
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        count = w * h * (3 if magic == b"PF" else 1)
        raw = fh.read(count * 4)
        if len(raw) != count * 4:
            raise FormatError("truncated PFM payload", offset=fh.tell())
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(raw, dtype=dtype).reshape(
        (h, w, 3) if magic == b"PF" else (h, w)
    )
    return np.flipud(data).astype(np.float64)


def write_png(path, data: np.ndarray) -> None:
    """Write display-space values in [0, 1] as 8-bit PNG."""
    arr = np.clip(np.asarray(data), 0.0, 1.0)
    img = (arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(img).save(path)


def read_png(path) -> np.ndarray:
    """Read a PNG into float64 [0, 1]; grayscale stays 2-D."""
    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


_FACE_SUFFIXES = ("posx", "negx", "posy", "negy", "posz", "negz")


def write_cubemap(directory, stem: str, faces: np.ndarray) -> str:
    """Write six per-face PFMs and a manifest; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    names = []
    for f, suffix in enumerate(_FACE_SUFFIXES):
        name = f"{stem}_{suffix}.pfm"
        write_pfm(os.path.join(directory, name), faces[f])
        names.append(name)
    manifest = os.path.join(directory, f"{stem}.cube")
    with open(manifest, "w") as fh:
        fh.write(f"cubemap {faces.shape[1]}\n")
        for name in names:
            fh.write(name + "\n")
    return manifest


def read_cubemap(manifest_path) -> np.ndarray:
    directory = os.path.dirname(manifest_path)
    with open(manifest_path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("cubemap"):
        raise FormatError(f"not a cubemap manifest: {manifest_path!r}", line=1)
    if len(lines) != 7:
        raise FormatError("cubemap manifest must list six faces", line=len(lines))
    faces = [read_pfm(os.path.join(directory, name)) for name in lines[1:]]
    return np.stack(faces)


def cubemap_cross_png(path, faces: np.ndarray, tonemap=None) -> None:
    """Export the six faces as the usual horizontal-cross PNG layout."""
    res = faces.shape[1]
    canvas = np.zeros((3 * res, 4 * res, 3))
    # (row, col) cell per face: +X, -X, +Y, -Y, +Z, -Z
    cells = ((1, 2), (1, 0), (0, 1), (2, 1), (1, 1), (1, 3))
    vals = np.asarray(faces, dtype=np.float64)
    if tonemap is not None:
        vals = tonemap(vals)
    for f, (r, c) in enumerate(cells):
        canvas[r * res : (r + 1) * res, c * res : (c + 1) * res] = vals[f]
    write_png(path, canvas)
