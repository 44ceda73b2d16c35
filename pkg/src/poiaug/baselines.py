"""Straight-line interpolation baselines for filling missing slots.

The position of a missing slot is placed on the segment between the
bracketing observed check-ins in proportion to elapsed time; ``nn`` picks the
closest POI and ``pop`` the most popular of the ``k`` closest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import CheckIn, GriddedSequence, Vocabulary, haversine_many, imputed_slot


@dataclass(frozen=True)
class InterpolatedPoint:
    latitude: float
    longitude: float
    fraction: float  # elapsed share of the gap between the bracketing check-ins


def _wrap_lng(lng: float) -> float:
    if -180.0 <= lng <= 180.0:
        return lng
    return (lng + 180.0) % 360.0 - 180.0


def linear_interpolate_point(a: CheckIn, b: CheckIn, t: float) -> InterpolatedPoint:
    """Point at time ``t`` on the straight line from ``a`` to ``b`` (shorter way round in longitude)."""
    if not a.timestamp < t < b.timestamp:
        raise ValueError(f"time {t} not strictly between {a.timestamp} and {b.timestamp}")
    lam = (t - a.timestamp) / (b.timestamp - a.timestamp)
    dlng = b.longitude - a.longitude
    if dlng > 180.0:
        dlng -= 360.0
    elif dlng < -180.0:
        dlng += 360.0
    lat = a.latitude + lam * (b.latitude - a.latitude)
    return InterpolatedPoint(lat, _wrap_lng(a.longitude + lam * dlng), lam)


def _distances(p: InterpolatedPoint, vocab: Vocabulary) -> np.ndarray:
    if vocab.size == 0:
        raise ValueError("empty vocabulary")
    coords = np.ascontiguousarray(vocab.coords)
    return haversine_many(p.latitude, p.longitude, np.ascontiguousarray(coords[:, 0]),
                          np.ascontiguousarray(coords[:, 1]))


def impute_nn(p: InterpolatedPoint, vocab: Vocabulary) -> int:
    """Index of the POI nearest to ``p``; ties go to the lower index."""
    return int(np.argmin(_distances(p, vocab)))


def impute_pop(p: InterpolatedPoint, vocab: Vocabulary, k: int = 10) -> int:
    """Most frequent POI among the ``k`` nearest; ties by distance, then index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    dist = _distances(p, vocab)
    idx = np.arange(vocab.size)
    nearest = np.lexsort((idx, dist))[:k]
    best = np.lexsort((nearest, dist[nearest], -vocab.freq[nearest]))[0]
    return int(nearest[best])


def impute_linear(seq: GriddedSequence, vocab: Vocabulary, method: str = "nn", k: int = 10) -> GriddedSequence:
    """Fill every missing slot of ``seq`` by straight-line interpolation."""
    if method not in ("nn", "pop"):
        raise ValueError(f"unknown interpolation method {method!r}")
    slots = list(seq.slots)
    prev = None
    for t, slot in enumerate(seq.slots):
        if slot.checkin is not None:
            prev = slot.checkin
            continue
        nxt = next((s.checkin for s in seq.slots[t + 1:] if s.checkin is not None), None)
        if prev is None or nxt is None:
            raise ValueError(f"missing slot {t} of {seq.seq_id!r} is not bracketed by observed check-ins")
        point = linear_interpolate_point(prev, nxt, slot.timestamp)
        choice = impute_nn(point, vocab) if method == "nn" else impute_pop(point, vocab, k)
        slots[t] = imputed_slot(seq.user_id, slot.timestamp, vocab, choice)
    return GriddedSequence(seq.user_id, seq.interval, slots, seq.seq_id)
