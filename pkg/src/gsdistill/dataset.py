"""Dataset ingestion: plain-text manifests listing cameras, images and
optional masks.

Manifest grammar (one directive per line, ``#`` comments allowed):

    colorspace display|linear
    background R G B
    resolution W H
    env_gt <cubemap manifest path>        (optional)
    relight_env <cubemap manifest path>   (optional)
    truth_scene <scene path>              (optional)
    init_points <points path>             (optional)
    domain_sphere CX CY CZ RADIUS         (optional)
    view <image> <mask|-> fx fy cx cy qw qx qy qz tx ty tz
    eval_view <image> <mask|-> fx fy cx cy qw qx qy qz tx ty tz

All paths are relative to the manifest.  The quaternion/translation give
the world-to-camera transform x_cam = R(q) x + t with R from (w, x, y, z).
Images are 8-bit PNG in display space or PFM in linear space per the
``colorspace`` directive; linear images are converted to display space at
load so losses always compare display-referred values.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import imgio
from .camera import Camera
from .errors import FormatError
from .scene import normalize_quats, quats_to_rotmats
from .shading import linear_to_srgb

VIEW_FIELDS = 13  # image mask fx fy cx cy qw qx qy qz tx ty tz


@dataclass
class View:
    camera: Camera
    image: np.ndarray  # (H, W, 3) display space
    mask: np.ndarray | None  # (H, W) bool
    image_path: str = ""


@dataclass
class Dataset:
    views: list[View]
    eval_views: list[View] = field(default_factory=list)
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    colorspace: str = "display"
    env_gt: np.ndarray | None = None
    relight_env: np.ndarray | None = None
    truth_scene_path: str | None = None
    init_points: np.ndarray | None = None
    init_colors: np.ndarray | None = None
    domain_sphere: tuple | None = None

    @property
    def maskless(self) -> bool:
        return any(v.mask is None for v in self.views)


def _parse_view(tokens, line_no, base, colorspace, resolution):
    if len(tokens) != VIEW_FIELDS:
        raise FormatError(
            f"view row needs {VIEW_FIELDS} fields, got {len(tokens)}", line=line_no
        )
    img_path = os.path.join(base, tokens[0])
    mask_path = None if tokens[1] == "-" else os.path.join(base, tokens[1])
    try:
        nums = [float(v) for v in tokens[2:]]
    except ValueError as e:
        raise FormatError(f"bad number in view row: {e}", line=line_no) from None
    fx, fy, cx, cy = nums[0:4]
    quat = normalize_quats(np.array(nums[4:8])[None])
    r_wc = quats_to_rotmats(quat)[0]
    t_wc = np.array(nums[8:11])

    if not os.path.exists(img_path):
        raise FileNotFoundError(f"view image not found: {img_path}")
    if img_path.endswith(".pfm"):
        image = imgio.read_pfm(img_path)
    else:
        image = imgio.read_png(img_path)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=-1)
    if colorspace == "linear":
        image = linear_to_srgb(np.clip(image, 0.0, 1.0))
    h, w = image.shape[:2]
    if resolution is not None and (w, h) != resolution:
        raise FormatError(
            f"image is {w}x{h} but manifest declares {resolution[0]}x{resolution[1]}",
            line=line_no,
        )
    mask = None
    if mask_path is not None:
        if not os.path.exists(mask_path):
            raise FileNotFoundError(f"mask not found: {mask_path}")
        m = imgio.read_png(mask_path)
        if m.ndim == 3:
            m = m.mean(axis=-1)
        mask = m > 0.5
    cam = Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=w, height=h, r_wc=r_wc, t_wc=t_wc)
    return View(cam, image, mask, img_path)


def load_points(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Seed points: rows of x y z or x y z r g b."""
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                rows.append([float(v) for v in line.split()])
    arr = np.asarray(rows)
    if arr.shape[1] >= 6:
        return arr[:, :3], arr[:, 3:6]
    return arr[:, :3], None


def load_dataset(manifest_path) -> Dataset:
    base = os.path.dirname(os.path.abspath(manifest_path))
    colorspace = "display"
    resolution = None
    background = np.zeros(3)
    pend_views: list[tuple] = []
    extras: dict = {}

    with open(manifest_path) as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            tokens = text.split()
            key, rest = tokens[0], tokens[1:]
            if key == "colorspace":
                if rest[0] not in ("display", "linear"):
                    raise FormatError(f"unknown colorspace {rest[0]!r}", line=line_no)
                colorspace = rest[0]
            elif key == "background":
                background = np.array([float(v) for v in rest[:3]])
            elif key == "resolution":
                resolution = (int(rest[0]), int(rest[1]))
            elif key in ("env_gt", "relight_env", "truth_scene", "init_points"):
                extras[key] = os.path.join(base, rest[0])
            elif key == "domain_sphere":
                vals = [float(v) for v in rest[:4]]
                extras["domain_sphere"] = (np.array(vals[:3]), vals[3])
            elif key in ("view", "eval_view"):
                pend_views.append((key, rest, line_no))
            else:
                raise FormatError(f"unknown directive {key!r}", line=line_no)

    ds = Dataset(views=[], background=background, colorspace=colorspace)
    for kind, rest, line_no in pend_views:
        v = _parse_view(rest, line_no, base, colorspace, resolution)
        (ds.views if kind == "view" else ds.eval_views).append(v)
    if len(ds.views) < 2:
        raise FormatError("dataset needs at least 2 training views", line=None)

    if "env_gt" in extras:
        ds.env_gt = imgio.read_cubemap(extras["env_gt"])
    if "relight_env" in extras:
        ds.relight_env = imgio.read_cubemap(extras["relight_env"])
    if "truth_scene" in extras:
        ds.truth_scene_path = extras["truth_scene"]
    if "init_points" in extras:
        ds.init_points, ds.init_colors = load_points(extras["init_points"])
    ds.domain_sphere = extras.get("domain_sphere")
    return ds
