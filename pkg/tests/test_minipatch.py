import numpy as np
import pytest

from dispa.minipatch import (
    GridSpec,
    build_map,
    is_blank,
    read_provenance,
    source_window,
    split_grids,
    write_provenance,
)
from dispa.render import ViewImage


def full_views(n=6, size=512, seed=0):
    rng = np.random.default_rng(seed)
    return [ViewImage(rng.integers(0, 256, (size, size, 3), dtype=np.uint8),
                      np.zeros((size, size), dtype=bool)) for _ in range(n)]


def test_split_grids_tiles_exactly():
    img = np.zeros((512, 512, 3))
    grids = split_grids(img, 16)
    assert len(grids) == 256
    cover = np.zeros((512, 512), dtype=int)
    for _, _, y0, y1, x0, x1 in grids:
        assert (y1 - y0, x1 - x0) == (32, 32)
        cover[y0:y1, x0:x1] += 1
    assert np.all(cover == 1)
    assert split_grids(img, 1) == [(0, 0, 0, 512, 0, 512)]
    with pytest.raises(ValueError):
        split_grids(np.zeros((10, 10)), 3)


def test_is_blank_strict():
    w = np.ones((32, 32), dtype=bool)
    assert is_blank(w)
    w[5, 7] = False
    assert not is_blank(w)
    w = np.ones((10, 10), dtype=bool)
    w[0, 0] = False  # 99% background
    assert not is_blank(w)


def test_full_coverage_counts_and_distinct_sources():
    views = full_views()
    spec = GridSpec(16, 32, 512, 512)
    m = build_map(views, spec, seed=3)
    assert m.rgb.shape == (512, 512, 3)
    assert len(m.provenance) == 256
    assert not any(p.fill for p in m.provenance)
    sources = {(p.view, p.i, p.j) for p in m.provenance}
    assert len(sources) == 256
    # s == grid side, so every offset is zero
    assert all(p.off_y == 0 and p.off_x == 0 for p in m.provenance)
    for p in m.provenance:
        got = m.rgb[p.row * 32 : (p.row + 1) * 32, p.col * 32 : (p.col + 1) * 32]
        assert np.array_equal(got, source_window(views, spec, p))


def test_single_foreground_grid_fills_every_slot():
    rgb = np.random.default_rng(0).integers(0, 256, (512, 512, 3), dtype=np.uint8)
    mask = np.ones((512, 512), dtype=bool)
    mask[100, 300] = False  # grid (3, 9)
    m = build_map([ViewImage(rgb, mask)], GridSpec(16, 32), seed=1)
    assert {(p.view, p.i, p.j) for p in m.provenance} == {(0, 3, 9)}
    assert sum(p.fill for p in m.provenance) == 255
    tile = rgb[96:128, 288:320]
    for p in m.provenance:
        assert np.array_equal(m.rgb[p.row * 32 : (p.row + 1) * 32, p.col * 32 : (p.col + 1) * 32], tile)


def test_no_candidates_is_an_error():
    v = ViewImage(np.zeros((64, 64, 3), np.uint8), np.ones((64, 64), bool))
    with pytest.raises(ValueError):
        build_map([v], GridSpec(4, 16, 64, 64))


def test_determinism_and_seed_dependence():
    views = full_views(3, 128)
    spec = GridSpec(8, 8, 128, 128)
    a, b = build_map(views, spec, 5), build_map(views, spec, 5)
    assert a.rgb.tobytes() == b.rgb.tobytes() and a.provenance == b.provenance
    assert build_map(views, spec, 6).provenance != a.provenance


def test_random_offsets_stay_inside_grid():
    views = full_views(2, 128)
    spec = GridSpec(4, 8, 128, 128)  # grid side 32, patch 8
    m = build_map(views, spec, seed=2)
    assert m.rgb.shape == (128, 128, 3) and len(m.provenance) == 256
    assert all(0 <= p.off_y <= 24 and 0 <= p.off_x <= 24 for p in m.provenance)
    assert len({(p.off_y, p.off_x) for p in m.provenance}) > 1
    for p in m.provenance:
        got = m.rgb[p.row * 8 : (p.row + 1) * 8, p.col * 8 : (p.col + 1) * 8]
        assert np.array_equal(got, source_window(views, spec, p))


def test_scrambling_breaks_adjacency():
    m = build_map(full_views(), GridSpec(16, 32), seed=0)
    by_pos = {(p.row, p.col): p for p in m.provenance}
    pairs = adjacent = 0
    for (r, c), p in by_pos.items():
        for q in (by_pos.get((r, c + 1)), by_pos.get((r + 1, c))):
            if q is None:
                continue
            pairs += 1
            if p.view == q.view and max(abs(p.i - q.i), abs(p.j - q.j)) <= 1:
                adjacent += 1
    assert pairs == 2 * 16 * 15
    assert 1 - adjacent / pairs >= 0.9


def test_map_size_independent_of_candidate_count():
    rgb = np.zeros((128, 128, 3), np.uint8)
    for k in (1, 3, 40):
        mask = np.ones((128, 128), bool)
        mask.reshape(-1)[: k * 16 * 128 : 16 * 128 // 8] = False
        m = build_map([ViewImage(rgb, mask)], GridSpec(8, 16, 128, 128), seed=k)
        assert m.rgb.shape == (128, 128, 3) and len(m.provenance) == 64


def test_provenance_roundtrip(tmp_path):
    rgb = np.zeros((64, 64, 3), np.uint8)
    mask = np.ones((64, 64), bool)
    mask[:16, :16] = False
    m = build_map([ViewImage(rgb, mask)], GridSpec(4, 16, 64, 64), seed=0)
    write_provenance(tmp_path / "p.csv", m.provenance)
    text = (tmp_path / "p.csv").read_text()
    assert text.splitlines()[0] == "slot,row,col,view,i,j,off_y,off_x,kind"
    assert "FILL" in text
    assert read_provenance(tmp_path / "p.csv") == m.provenance


def test_gridspec_validation():
    with pytest.raises(ValueError):
        GridSpec(16, 64, 512, 512)
    with pytest.raises(ValueError):
        GridSpec(7, 32, 512, 512)
