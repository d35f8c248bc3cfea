"""Grid mini-patch maps: a mosaic of small windows sampled from multi-view renders.

Each view is cut into ``L x L`` grids. Every grid that is not entirely
background is a candidate; one ``s x s`` mini-patch is cut from each chosen
candidate at a seeded offset, and the mini-patches are tiled in a seeded
order into an ``H x W`` map. Missing slots are refilled by resampling the
candidates with replacement.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .render import BACKGROUND, ViewImage


@dataclass(frozen=True)
class GridSpec:
    grids: int = 16  # L, grids per side
    patch: int = 32  # s, mini-patch side
    height: int = 512
    width: int = 512

    def __post_init__(self):
        if self.grids < 1 or self.patch < 1:
            raise ValueError("grids and patch must be positive")
        if self.height % self.grids or self.width % self.grids:
            raise ValueError(f"map {self.height}x{self.width} not divisible by L={self.grids}")
        if self.height % self.patch or self.width % self.patch:
            raise ValueError(f"map {self.height}x{self.width} not divisible by s={self.patch}")
        if self.patch > self.height // self.grids or self.patch > self.width // self.grids:
            raise ValueError("mini-patch larger than a grid cell")

    @property
    def slot_rows(self):
        return self.height // self.patch

    @property
    def slot_cols(self):
        return self.width // self.patch

    @property
    def n_slots(self):
        return self.slot_rows * self.slot_cols


@dataclass(frozen=True)
class Provenance:
    slot: int
    row: int
    col: int
    view: int
    i: int
    j: int
    off_y: int
    off_x: int
    fill: bool


@dataclass
class MiniPatchMap:
    rgb: np.ndarray
    provenance: list

    def as_float(self):
        return self.rgb.astype(np.float64) / 255.0


def split_grids(img, L):
    """Half-open windows ``(i, j, y0, y1, x0, x1)`` tiling an ``H x W`` image."""
    h, w = (img.height, img.width) if isinstance(img, ViewImage) else img.shape[:2]
    if h % L or w % L:
        raise ValueError(f"image {h}x{w} not divisible by L={L}")
    gh, gw = h // L, w // L
    return [(i, j, i * gh, (i + 1) * gh, j * gw, (j + 1) * gw) for i in range(L) for j in range(L)]


def is_blank(mask_window) -> bool:
    """True iff every pixel in the window is background."""
    return bool(np.all(mask_window))


def build_map(views, spec: GridSpec = GridSpec(), seed=0) -> MiniPatchMap:
    """Assemble a mini-patch map from ``views`` (an iterable of ViewImage)."""
    views = list(views)
    if not views:
        raise ValueError("no views given")
    for v in views:
        if v.rgb.shape[:2] != (spec.height, spec.width):
            raise ValueError(f"view size {v.rgb.shape[:2]} does not match spec {spec.height}x{spec.width}")
    rng = np.random.default_rng(seed)
    candidates = []
    for n, v in enumerate(views):
        for i, j, y0, y1, x0, x1 in split_grids(v, spec.grids):
            if not is_blank(v.mask[y0:y1, x0:x1]):
                candidates.append((n, i, j, y0, x0))
    if not candidates:
        raise ValueError("every grid of every view is background")

    gh = spec.height // spec.grids
    gw = spec.width // spec.grids
    n_slots = spec.n_slots
    n_take = min(n_slots, len(candidates))
    chosen = list(rng.permutation(len(candidates))[:n_take])
    fills = [False] * n_take
    if n_take < n_slots:
        extra = rng.integers(0, len(candidates), size=n_slots - n_take)
        chosen += list(extra)
        fills += [True] * (n_slots - n_take)

    s = spec.patch
    out = np.empty((spec.height, spec.width, 3), dtype=np.uint8)
    out[:] = BACKGROUND
    provenance = []
    for slot, (ci, fill) in enumerate(zip(chosen, fills)):
        n, i, j, y0, x0 = candidates[ci]
        oy = int(rng.integers(0, gh - s + 1))
        ox = int(rng.integers(0, gw - s + 1))
        r, c = divmod(slot, spec.slot_cols)
        out[r * s : (r + 1) * s, c * s : (c + 1) * s] = views[n].rgb[y0 + oy : y0 + oy + s, x0 + ox : x0 + ox + s]
        provenance.append(Provenance(slot, r, c, n, i, j, oy, ox, fill))
    return MiniPatchMap(out, provenance)


def source_window(views, spec: GridSpec, prov: Provenance):
    gh = spec.height // spec.grids
    gw = spec.width // spec.grids
    y = prov.i * gh + prov.off_y
    x = prov.j * gw + prov.off_x
    return views[prov.view].rgb[y : y + spec.patch, x : x + spec.patch]


PROVENANCE_FIELDS = ("slot", "row", "col", "view", "i", "j", "off_y", "off_x", "kind")


def write_provenance(path, provenance):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROVENANCE_FIELDS)
        for p in provenance:
            w.writerow([p.slot, p.row, p.col, p.view, p.i, p.j, p.off_y, p.off_x,
                        "FILL" if p.fill else "SAMPLE"])


def read_provenance(path):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        Provenance(*(int(r[k]) for k in PROVENANCE_FIELDS[:-1]), fill=r["kind"] == "FILL")
        for r in rows
    ]
