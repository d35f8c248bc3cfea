"""Orthographic z-buffered point splatting onto six axis-aligned views."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .pointcloud import PointCloud, rotation_matrix

BACKGROUND = (128, 128, 128)
DEFAULT_RESOLUTION = 512
DEFAULT_RADIUS = 2


def _look(forward, up):
    """Rows are the camera axes (right, up, towards-camera) in world coordinates."""
    back = -np.asarray(forward, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(up, back)
    return np.stack([right, up, back])


# camera looking from +Z, -Z, +X, -X, +Y, -Y towards the origin
CANONICAL_POSES = (
    _look((0, 0, -1), (0, 1, 0)),
    _look((0, 0, 1), (0, 1, 0)),
    _look((-1, 0, 0), (0, 1, 0)),
    _look((1, 0, 0), (0, 1, 0)),
    _look((0, -1, 0), (0, 0, -1)),
    _look((0, 1, 0), (0, 0, 1)),
)


@dataclass
class ViewImage:
    rgb: np.ndarray  # H x W x 3 uint8
    mask: np.ndarray  # H x W bool, True where no splat landed

    @property
    def height(self):
        return self.rgb.shape[0]

    @property
    def width(self):
        return self.rgb.shape[1]

    def as_float(self):
        return self.rgb.astype(np.float64) / 255.0


@dataclass
class ViewSet:
    views: list
    pose_seed: int
    rotation: np.ndarray
    poses: list = field(default_factory=list)

    def __len__(self):
        return len(self.views)

    def __getitem__(self, i):
        return self.views[i]

    def __iter__(self):
        return iter(self.views)


def view_pose(n):
    """Canonical pose for view ``n``; beyond six views the cycle repeats rotated about Y."""
    base = CANONICAL_POSES[n % 6]
    turns = n // 6
    if turns == 0:
        return base
    a = turns * np.pi / 4.0
    spin = np.array([[np.cos(a), 0, np.sin(a)], [0, 1, 0], [-np.sin(a), 0, np.cos(a)]])
    return base @ spin


def splat(points_cam, colors, resolution, radius):
    """Rasterise camera-space points; larger z is closer to the camera.

    Ties in depth go to the lower point index.
    """
    h = w = int(resolution)
    rgb = np.empty((h, w, 3), dtype=np.uint8)
    rgb[:] = BACKGROUND
    mask = np.ones((h, w), dtype=bool)
    cols = np.floor((points_cam[:, 0] + 1.0) * 0.5 * w).astype(np.int64)
    rows = np.floor((1.0 - points_cam[:, 1]) * 0.5 * h).astype(np.int64)
    inside = (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
    if not inside.any():
        raise ValueError("no points project onto the raster")
    idx = np.nonzero(inside)[0]
    # rank points front to back (depth, then index); each pixel keeps the
    # splat with the smallest rank
    idx = idx[np.lexsort((idx, -points_cam[idx, 2]))]
    rows, cols = rows[idx], cols[idx]

    offs = np.arange(-radius, radius + 1)
    dr, dc = np.meshgrid(offs, offs, indexing="ij")
    rr = (rows[:, None] + dr.ravel()[None, :]).ravel()
    cc = (cols[:, None] + dc.ravel()[None, :]).ravel()
    rank = np.repeat(np.arange(idx.size), dr.size)
    ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
    pix = rr[ok] * w + cc[ok]
    zbuf = np.full(h * w, idx.size, dtype=np.int64)
    np.minimum.at(zbuf, pix, rank[ok])
    hit = np.nonzero(zbuf < idx.size)[0]
    rgb.reshape(-1, 3)[hit] = colors[idx[zbuf[hit]]]
    mask.reshape(-1)[hit] = False
    return ViewImage(rgb, mask)


def render_views(pc: PointCloud, n_views=6, resolution=DEFAULT_RESOLUTION, pose_seed=0,
                 radius=DEFAULT_RADIUS) -> ViewSet:
    """Render ``n_views`` orthographic views of a unit-sphere-normalised cloud.

    The cloud is first rotated by ``rotation_matrix(pose_seed)``; view ``n``
    then looks along one of the six axis directions.
    """
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    colors = pc.colors if pc.colors is not None else np.full((len(pc), 3), 255, dtype=np.uint8)
    rot = rotation_matrix(pose_seed)
    world = pc.positions @ rot.T
    views, poses = [], []
    for n in range(n_views):
        pose = view_pose(n)
        views.append(splat(world @ pose.T, colors, resolution, radius))
        poses.append(pose)
    return ViewSet(views, pose_seed, rot, poses)


def render_pair(distorted: PointCloud, reference: PointCloud, pose_seed=0, n_views=6,
                resolution=DEFAULT_RESOLUTION, radius=DEFAULT_RADIUS):
    """Render both clouds with the identical rotation and poses."""
    kw = dict(n_views=n_views, resolution=resolution, pose_seed=pose_seed, radius=radius)
    return render_views(distorted, **kw), render_views(reference, **kw)


# -- files -----------------------------------------------------------------


def write_view(view: ViewImage, png_path):
    """Write ``<name>.png`` plus a sibling ``<name>.mask`` (packed bits, row-major)."""
    png_path = Path(png_path)
    Image.fromarray(view.rgb, mode="RGB").save(png_path)
    png_path.with_suffix(".mask").write_bytes(np.packbits(view.mask.ravel()).tobytes())


def read_view(png_path) -> ViewImage:
    png_path = Path(png_path)
    rgb = np.asarray(Image.open(png_path).convert("RGB"), dtype=np.uint8).copy()
    h, w = rgb.shape[:2]
    mask_file = png_path.with_suffix(".mask")
    if mask_file.exists():
        bits = np.unpackbits(np.frombuffer(mask_file.read_bytes(), dtype=np.uint8))
        if bits.size < h * w:
            raise ValueError(f"mask file {mask_file} too short")
        mask = bits[: h * w].reshape(h, w).astype(bool)
    else:
        mask = np.all(rgb == np.array(BACKGROUND, dtype=np.uint8), axis=-1)
    return ViewImage(rgb, mask)
