"""Straight-line interpolation baselines."""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import T0, checkins
from poiaug.baselines import InterpolatedPoint, impute_linear, impute_nn, impute_pop, linear_interpolate_point
from poiaug.data import CheckIn, Vocabulary, build_vocabulary, grid_align


def haversine(lat1, lng1, lat2, lng2):
    p1, p2 = math.radians(lat1), math.radians(lat2)
    a = math.sin((p2 - p1) / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(math.radians(lng2 - lng1) / 2) ** 2
    return 2 * 6371.0088 * math.asin(math.sqrt(a))


def vocab_of(coords, freq=None):
    return Vocabulary([f"v{i}" for i in range(len(coords))], coords, freq or [1] * len(coords))


def at(ts, lat, lng):
    return CheckIn("u", T0 + ts, lat, lng, "x")


class TestInterpolation:
    def test_examples(self):
        p = linear_interpolate_point(at(0, 0.0, 0.0), at(100, 10.0, 20.0), T0 + 25)
        assert (p.latitude, p.longitude, p.fraction) == (2.5, 5.0, 0.25)
        mid = linear_interpolate_point(at(0, 1.0, 2.0), at(10, 3.0, 6.0), T0 + 5)
        assert (mid.latitude, mid.longitude) == (2.0, 4.0)
        same = linear_interpolate_point(at(0, 7.0, 8.0), at(10, 7.0, 8.0), T0 + 3)
        assert (same.latitude, same.longitude) == (7.0, 8.0)

    def test_open_interval(self):
        a, b = at(0, 0.0, 0.0), at(10, 1.0, 1.0)
        for t in (0, 10, -1, 11):
            with pytest.raises(ValueError):
                linear_interpolate_point(a, b, T0 + t)

    def test_antimeridian(self):
        p = linear_interpolate_point(at(0, 0.0, 179.0), at(10, 0.0, -179.0), T0 + 5)
        assert p.longitude == pytest.approx(180.0) or p.longitude == pytest.approx(-180.0)
        q = linear_interpolate_point(at(0, 0.0, 179.0), at(10, 0.0, -179.0), T0 + 2.5)
        assert q.longitude == pytest.approx(179.5)
        r = linear_interpolate_point(at(0, 0.0, 179.0), at(10, 0.0, -179.0), T0 + 7.5)
        assert r.longitude == pytest.approx(-179.5)

    @given(st.floats(-80, 80), st.floats(-170, 170), st.floats(-80, 80), st.floats(-170, 170))
    def test_monotone_in_time(self, la, lo, lb, lob):
        a, b = at(0, la, lo), at(1000, lb, lob)
        pts = [linear_interpolate_point(a, b, T0 + t) for t in range(100, 1000, 100)]
        lats = [p.latitude for p in pts]
        assert lats == sorted(lats) or lats == sorted(lats, reverse=True)
        if abs(lob - lo) <= 180:
            lngs = [p.longitude for p in pts]
            assert lngs == sorted(lngs) or lngs == sorted(lngs, reverse=True)


class TestNearest:
    def test_trivial(self):
        assert impute_nn(InterpolatedPoint(5.0, 5.0, 0.5), vocab_of([(0.0, 0.0)])) == 0
        v = vocab_of([(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)])
        assert impute_nn(InterpolatedPoint(1.0, 1.0, 0.5), v) == 1

    def test_tie_goes_to_lower_index(self):
        v = vocab_of([(0.0, 1.0), (0.0, -1.0)])
        assert impute_nn(InterpolatedPoint(0.0, 0.0, 0.5), v) == 0

    def test_matches_brute_force(self, rng):
        coords = np.column_stack([rng.uniform(39.5, 40.5, 50), rng.uniform(-74.5, -73.5, 50)])
        v = vocab_of(coords.tolist())
        for _ in range(200):
            lat, lng = rng.uniform(39.4, 40.6), rng.uniform(-74.6, -73.4)
            d = [haversine(lat, lng, a, b) for a, b in coords]
            assert impute_nn(InterpolatedPoint(lat, lng, 0.5), v) == d.index(min(d))


class TestPopular:
    def test_degenerate_k(self, rng):
        coords = np.column_stack([rng.uniform(0, 1, 30), rng.uniform(0, 1, 30)]).tolist()
        freq = rng.integers(1, 50, 30).tolist()
        v = vocab_of(coords, freq)
        top = int(np.lexsort((np.arange(30), -np.array(freq)))[0])
        for _ in range(50):
            p = InterpolatedPoint(rng.uniform(0, 1), rng.uniform(0, 1), 0.5)
            assert impute_pop(p, v, 1) == impute_nn(p, v)
            if freq.count(max(freq)) == 1:
                assert impute_pop(p, v, 30) == top

    def test_third_nearest_most_popular(self):
        coords = [(0.0, 0.01 * (i + 1)) for i in range(8)]
        freq = [5, 4, 9, 1, 2, 3, 7, 8]
        v = vocab_of(coords, freq)
        assert impute_pop(InterpolatedPoint(0.0, 0.0, 0.5), v, 5) == 2

    def test_frequency_ties_by_distance(self):
        coords = [(0.0, 0.03), (0.0, 0.01), (0.0, 0.02)]
        v = vocab_of(coords, [4, 4, 1])
        assert impute_pop(InterpolatedPoint(0.0, 0.0, 0.5), v, 3) == 1

    def test_equal_frequencies_reduce_to_nn(self, rng):
        coords = np.column_stack([rng.uniform(0, 1, 40), rng.uniform(0, 1, 40)]).tolist()
        v = vocab_of(coords, [3] * 40)
        for _ in range(50):
            p = InterpolatedPoint(rng.uniform(0, 1), rng.uniform(0, 1), 0.5)
            assert impute_pop(p, v, 10) == impute_nn(p, v)

    def test_bad_k(self):
        with pytest.raises(ValueError):
            impute_pop(InterpolatedPoint(0.0, 0.0, 0.5), vocab_of([(0.0, 0.0)]), 0)


class TestImputeLinear:
    def test_fills_gaps_on_the_line(self):
        cs = checkins("u", [0, 9], pois=["a", "b"], step_km=3.0)
        extra = [CheckIn("w", T0, 40.0, -74.0 + k / 85.0, f"m{k}") for k in (1, 2)]
        vocab = build_vocabulary(cs + extra)
        out = impute_linear(grid_align(cs, 3 * 3600), vocab, "nn")
        assert [s.checkin.poi_id for s in out.slots] == ["a", "m1", "m2", "b"]
        assert [s.imputed for s in out.slots] == [False, True, True, False]
        assert out.slots[1].checkin.timestamp == T0 + 3 * 3600

    def test_no_gaps_unchanged(self):
        cs = checkins("u", [0, 3, 6])
        seq = grid_align(cs, 3 * 3600)
        assert impute_linear(seq, build_vocabulary(cs), "pop") == seq

    def test_unknown_method(self):
        cs = checkins("u", [0, 3])
        with pytest.raises(ValueError):
            impute_linear(grid_align(cs, 3 * 3600), build_vocabulary(cs), "spline")
