import numpy as np
import pytest

from entropy_ground.core import (
    Component,
    PixelRect,
    TokenGrid,
    View,
    ViewSet,
    compose_rect,
    expand_rect,
    rect_iou,
    token_bbox_to_pixels,
)


def iou_pixel_counting(a: PixelRect, b: PixelRect) -> float:
    """Oracle: count integer pixels inside each rect one by one."""
    if a.area == 0 or b.area == 0:
        return 0.0
    inter = 0
    union_cells = set()
    for x in range(a.x, a.x2):
        for y in range(a.y, a.y2):
            union_cells.add((x, y))
            if b.x <= x < b.x2 and b.y <= y < b.y2:
                inter += 1
    for x in range(b.x, b.x2):
        for y in range(b.y, b.y2):
            union_cells.add((x, y))
    return inter / len(union_cells)


class TestRectIou:
    def test_identical(self):
        r = PixelRect(3, 4, 10, 6)
        assert rect_iou(r, r) == 1.0

    def test_disjoint(self):
        assert rect_iou(PixelRect(0, 0, 4, 4), PixelRect(10, 10, 4, 4)) == 0.0

    def test_partial_overlap(self):
        # overlap 1, union 7
        got = rect_iou(PixelRect(0, 0, 2, 2), PixelRect(1, 1, 2, 2))
        assert got == pytest.approx(1 / 7, abs=1e-12)

    def test_zero_area_never_matches(self):
        degenerate = PixelRect(5, 5, 0, 0)
        assert rect_iou(degenerate, degenerate) == 0.0
        assert rect_iou(degenerate, PixelRect(0, 0, 10, 10)) == 0.0

    def test_symmetry_and_oracle_200_random_pairs(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            x1, y1, x2, y2 = rng.integers(0, 20, size=4)
            a = PixelRect(int(x1), int(y1), int(rng.integers(0, 12)), int(rng.integers(0, 12)))
            b = PixelRect(int(x2), int(y2), int(rng.integers(0, 12)), int(rng.integers(0, 12)))
            got = rect_iou(a, b)
            assert got == rect_iou(b, a)
            assert got == pytest.approx(iou_pixel_counting(a, b), abs=1e-12)

    def test_negative_extent_rejected(self):
        with pytest.raises(ValueError):
            PixelRect(0, 0, -1, 5)


class TestTokenBboxToPixels:
    def test_full_image_8x8(self):
        grid = TokenGrid(8, 8, 16, PixelRect(0, 0, 128, 128))
        got = token_bbox_to_pixels((2, 4, 3, 5), grid)
        assert got == PixelRect(64, 32, 32, 32)

    def test_whole_grid_is_view_rect(self):
        view = PixelRect(0, 0, 128, 128)
        grid = TokenGrid(8, 8, 16, view)
        assert token_bbox_to_pixels((0, 0, 7, 7), grid) == view

    def test_nested_view_composition(self):
        child = TokenGrid(2, 2, 16, PixelRect(64, 32, 32, 32))
        assert token_bbox_to_pixels((0, 0, 0, 0), child) == PixelRect(64, 32, 16, 16)

    def test_out_of_bounds(self):
        grid = TokenGrid(8, 8, 16, PixelRect(0, 0, 128, 128))
        with pytest.raises(ValueError):
            token_bbox_to_pixels((0, 0, 8, 7), grid)

    def test_uneven_partition_covers_view(self):
        # 65 px over 8 columns: tokens tile the view without gaps or overlap
        grid = TokenGrid(1, 8, 8, PixelRect(10, 0, 65, 4))
        edges = [token_bbox_to_pixels((0, c, 0, c), grid) for c in range(8)]
        assert edges[0].x == 10
        assert edges[-1].x2 == 75
        for left, right in zip(edges, edges[1:]):
            assert left.x2 == right.x

    def test_round_trip_containment(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            rows, cols = rng.integers(1, 9, size=2)
            w, h = rng.integers(max(cols, 8), 200), rng.integers(max(rows, 8), 200)
            grid = TokenGrid(int(rows), int(cols), 1, PixelRect(3, 5, int(w), int(h)))
            r1, r2 = sorted(rng.integers(0, rows, size=2))
            c1, c2 = sorted(rng.integers(0, cols, size=2))
            rect = token_bbox_to_pixels((int(r1), int(c1), int(r2), int(c2)), grid)
            assert grid.view_rect.contains(rect)
            assert rect.area > 0


class TestComposeRect:
    def _view(self, rect: PixelRect, depth=1) -> View:
        return View(id="v", pixel_rect=rect, depth=depth)

    def test_identity(self):
        parent = self._view(PixelRect(10, 20, 30, 40))
        assert compose_rect(PixelRect(0, 0, 30, 40), parent) == parent.pixel_rect

    def test_offset(self):
        parent = self._view(PixelRect(10, 10, 20, 20))
        assert compose_rect(PixelRect(5, 5, 4, 4), parent) == PixelRect(15, 15, 4, 4)

    def test_escaping_child_rejected(self):
        parent = self._view(PixelRect(10, 10, 20, 20))
        with pytest.raises(ValueError):
            compose_rect(PixelRect(18, 0, 4, 4), parent)

    def test_three_level_nesting_associative(self):
        outer = self._view(PixelRect(100, 50, 60, 60))
        mid_local = PixelRect(10, 10, 30, 30)
        mid_abs = compose_rect(mid_local, outer)
        inner_local = PixelRect(5, 5, 10, 10)
        two_step = compose_rect(inner_local, self._view(mid_abs, depth=2))
        flat = compose_rect(
            PixelRect(mid_local.x + inner_local.x, mid_local.y + inner_local.y, 10, 10), outer
        )
        assert two_step == flat


class TestViewSet:
    def test_global_must_be_first(self):
        g = View(id="g", pixel_rect=PixelRect(0, 0, 64, 64), is_global=True)
        c = View(id="c", pixel_rect=PixelRect(0, 0, 16, 16), depth=1)
        ViewSet(views=(g, c))
        with pytest.raises(ValueError):
            ViewSet(views=(c, g))

    def test_exactly_one_global(self):
        g = View(id="g", pixel_rect=PixelRect(0, 0, 64, 64), is_global=True)
        with pytest.raises(ValueError):
            ViewSet(views=(g, g))

    def test_child_containment_enforced(self):
        g = View(id="g", pixel_rect=PixelRect(0, 0, 64, 64), is_global=True)
        escape = View(id="c", pixel_rect=PixelRect(60, 60, 16, 16), depth=1)
        with pytest.raises(ValueError):
            ViewSet(views=(g, escape))


class TestExpandRect:
    def test_grows_to_min_side(self):
        bounds = PixelRect(0, 0, 64, 64)
        got = expand_rect(PixelRect(30, 30, 8, 8), 28, bounds)
        assert got.w == 28 and got.h == 28
        assert bounds.contains(got)

    def test_shifts_inside_bounds(self):
        bounds = PixelRect(0, 0, 64, 64)
        got = expand_rect(PixelRect(60, 0, 4, 4), 28, bounds)
        assert bounds.contains(got)
        assert got.w == 28 and got.h == 28

    def test_capped_at_bounds(self):
        bounds = PixelRect(0, 0, 20, 20)
        got = expand_rect(PixelRect(2, 2, 4, 4), 28, bounds)
        assert got == PixelRect(0, 0, 20, 20)

    def test_large_rect_untouched(self):
        bounds = PixelRect(0, 0, 64, 64)
        rect = PixelRect(0, 0, 40, 40)
        assert expand_rect(rect, 28, bounds) == rect


class TestComponent:
    def test_nonempty_required(self):
        with pytest.raises(ValueError):
            Component(token_indices=frozenset(), token_bbox=(0, 0, 0, 0))
