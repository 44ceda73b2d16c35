"""Synthetic check-in worlds with known ground truth for the removed slots.

Both worlds place check-ins exactly on the 3 h grid so that every removed
check-in becomes a Missing slot at a known position.

* ``cycle_world``: POIs on a ring, every user steps k -> k+1 each slot.
* ``curved_world``: routes that alternate anchors and intermediates.  Half of
  the intermediates lie on the chord between their anchors (straight-line
  interpolation finds them); the other half sit off the chord while a decoy
  POI occupies the chord midpoint, so straight-line interpolation is wrong by
  construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import (DEFAULT_INTERVAL, CheckIn, DatasetSplit, FeatureStats, GriddedSequence, Vocabulary,
                   assemble_split, build_vocabulary, grid_user)
from .numerics import make_rng

T0 = 1_600_000_000
DAY = 86400
KM_PER_DEG = 111.0


@dataclass
class SyntheticWorld:
    split: DatasetSplit
    heldout: list[GriddedSequence]  # sparse sequences whose missing slots have known POIs
    truth: dict[tuple[str, int], str]  # (user, timestamp) -> POI of every removed check-in
    meta: dict = field(default_factory=dict)

    def vocabulary(self) -> Vocabulary:
        return build_vocabulary(self.split.training_checkins())

    def stats(self) -> FeatureStats:
        return FeatureStats.fit(self.split.train)


def _offset(lat: float, lng: float, north_km: float, east_km: float) -> tuple[float, float]:
    return lat + north_km / KM_PER_DEG, lng + east_km / (KM_PER_DEG * math.cos(math.radians(lat)))


def _drop_interior(trip: list[CheckIn], drop: float,
                   rng: np.random.Generator) -> tuple[list[CheckIn], list[CheckIn]]:
    """Remove ``round(drop * interior)`` interior check-ins; first and last always stay."""
    interior = list(range(1, len(trip) - 1))
    k = int(math.floor(drop * len(interior) + 0.5))
    gone = set(rng.choice(interior, size=k, replace=False).tolist()) if k else set()
    kept = [c for i, c in enumerate(trip) if i not in gone]
    removed = [c for i, c in enumerate(trip) if i in gone]
    return kept, removed


def _grid(portion: dict[str, list[CheckIn]], tag: str, interval: float) -> list[GriddedSequence]:
    out = []
    for user in sorted(portion):
        out.extend(grid_user(portion[user], interval, DAY, 64, f"{tag}:{user}:"))
    return out


def ring_coordinates(n: int, center=(40.0, -74.0), radius_km: float = 5.0) -> list[tuple[float, float]]:
    return [_offset(center[0], center[1], radius_km * math.sin(2 * math.pi * k / n),
                    radius_km * math.cos(2 * math.pi * k / n)) for k in range(n)]


def cycle_world(n_pois: int = 20, n_train: int = 200, n_val: int = 20, n_test: int = 50, n_heldout: int = 50,
                length: int = 16, drop: float = 0.3, seed: int = 0,
                interval: float = DEFAULT_INTERVAL) -> SyntheticWorld:
    """Deterministic ring world: one sequence per user, each slot advances one POI."""
    rng = make_rng(seed, "cycle-world")
    coords = ring_coordinates(n_pois)

    def trip(user: str, start: int, t0: int) -> list[CheckIn]:
        out = []
        for i in range(length):
            k = (start + i) % n_pois
            out.append(CheckIn(user, t0 + int(i * interval), coords[k][0], coords[k][1], f"ring{k:02d}"))
        return out

    portions: dict[str, dict[str, list[CheckIn]]] = {"train": {}, "validation": {}, "test": {}}
    truth: dict[tuple[str, int], str] = {}
    sparse_heldout: dict[str, list[CheckIn]] = {}
    counts = {"train": n_train, "validation": n_val, "test": n_test, "heldout": n_heldout}
    for name, count in counts.items():
        for u in range(count):
            user = f"{name[0]}{u:04d}"
            full = trip(user, int(rng.integers(n_pois)), T0 + u * 7 * DAY)
            if name == "test":
                portions["test"][user] = full  # dense: the recommender sees true transitions
                continue
            kept, removed = _drop_interior(full, drop, rng)
            if name == "heldout":
                sparse_heldout[user] = kept
                truth.update({(c.user_id, c.timestamp): c.poi_id for c in removed})
            else:
                portions[name][user] = kept
    split = assemble_split(portions, interval)
    return SyntheticWorld(split, _grid(sparse_heldout, "heldout", interval), truth,
                          {"world": "cycle", "n_pois": n_pois, "drop": drop, "seed": seed})


@dataclass(frozen=True)
class Route:
    anchors: tuple[str, ...]
    intermediates: tuple[str, ...]  # intermediates[j] sits between anchors[j] and anchors[j+1]
    curved: tuple[bool, ...]

    def pois(self) -> list[str]:
        out = [self.anchors[0]]
        for c, a in zip(self.intermediates, self.anchors[1:]):
            out += [c, a]
        return out


def curved_world(n_routes: int = 6, anchors_per_route: int = 4, trips_per_route: int = 30, val_trips: int = 4,
                 test_trips: int = 6, heldout_trips: int = 10, keep_intermediate: float = 0.3,
                 distractor_trips: int = 8, seed: int = 0, interval: float = DEFAULT_INTERVAL) -> SyntheticWorld:
    """Route world where straight-line interpolation fails on the curved legs.

    Anchors are always observed; each intermediate survives with probability
    ``keep_intermediate`` in train, validation and held-out trips.  Test trips
    are fully observed so downstream recommenders are scored on true transitions.
    Distractor users visit the decoys inside unrelated dense trips so that the
    decoys belong to the vocabulary.
    """
    rng = make_rng(seed, "curved-world")
    coords: dict[str, tuple[float, float]] = {}
    routes: list[Route] = []
    decoys: list[str] = []
    leg_km, bend_km = 2.0, 1.0
    for r in range(n_routes):
        base = _offset(40.0, -74.0, 12.0 * (r // 3), 12.0 * (r % 3))
        anchors, inters, curved = [], [], []
        for j in range(anchors_per_route):
            name = f"r{r}a{j}"
            coords[name] = _offset(base[0], base[1], 0.0, leg_km * j)
            anchors.append(name)
        for j in range(anchors_per_route - 1):
            a, b = coords[anchors[j]], coords[anchors[j + 1]]
            mid = ((a[0] + b[0]) / 2, (a[1] + b[1]) / 2)
            bend = (r + j) % 2 == 1
            name = f"r{r}c{j}"
            if bend:
                coords[name] = _offset(mid[0], mid[1], bend_km, 0.0)
                decoy = f"r{r}d{j}"
                coords[decoy] = mid
                decoys.append(decoy)
            else:
                coords[name] = mid
            inters.append(name)
            curved.append(bend)
        routes.append(Route(tuple(anchors), tuple(inters), tuple(curved)))

    def route_trip(user: str, route: Route, t0: int) -> list[CheckIn]:
        return [CheckIn(user, t0 + int(i * interval), *coords[p], p) for i, p in enumerate(route.pois())]

    portions: dict[str, dict[str, list[CheckIn]]] = {"train": {}, "validation": {}, "test": {}}
    truth: dict[tuple[str, int], str] = {}
    heldout: dict[str, list[CheckIn]] = {}
    plan = {"train": trips_per_route, "validation": val_trips, "test": test_trips, "heldout": heldout_trips}
    for name, per_route in plan.items():
        for r, route in enumerate(routes):
            for k in range(per_route):
                user = f"{name[0]}{r}u{k:03d}"
                full = route_trip(user, route, T0 + (r * 100 + k) * 2 * DAY)
                if name == "test":
                    portions["test"][user] = full
                    continue
                kept = [c for i, c in enumerate(full) if i % 2 == 0 or rng.random() < keep_intermediate]
                if name == "heldout":
                    heldout[user] = kept
                    kept_ts = {c.timestamp for c in kept}
                    truth.update({(c.user_id, c.timestamp): c.poi_id for c in full if c.timestamp not in kept_ts})
                else:
                    portions[name][user] = kept
    for i, decoy in enumerate(decoys):
        lat, lng = coords[decoy]
        for k in range(distractor_trips):
            user = f"x{i}u{k:03d}"
            t0 = T0 + (50_000 + i * 100 + k) * 2 * DAY
            pre, post = f"x{i}p", f"x{i}q"
            coords.setdefault(pre, _offset(lat, lng, -3.0, -1.0))
            coords.setdefault(post, _offset(lat, lng, -3.0, 1.0))
            trip = [CheckIn(user, t0 + int(s * interval), *coords[p], p) for s, p in enumerate((pre, decoy, post))]
            portions["train"][user] = trip
    split = assemble_split(portions, interval)
    return SyntheticWorld(split, _grid(heldout, "heldout", interval), truth,
                          {"world": "curved", "routes": routes, "coords": coords, "decoys": decoys, "seed": seed})


def imputation_accuracy(imputed: list[GriddedSequence], truth: dict[tuple[str, int], str]) -> float:
    """Fraction of imputed slots whose POI equals the removed ground truth."""
    hits = total = 0
    for seq in imputed:
        for slot in seq.slots:
            if slot.imputed:
                key = (seq.user_id, slot.checkin.timestamp)
                if key not in truth:
                    continue
                total += 1
                hits += slot.checkin.poi_id == truth[key]
    if total == 0:
        raise ValueError("no imputed slot has a known ground truth")
    return hits / total


def random_checkins(n_users: int = 30, n_pois: int = 60, per_user: tuple[int, int] = (5, 80),
                    seed: int = 0) -> list[CheckIn]:
    """Irregular LBSN-like log: bursts of check-ins within a day, separated by multi-day pauses.

    Timestamps are arbitrary seconds, so gaps rarely fall on the grid.
    """
    rng = make_rng(seed, "random-checkins")
    coords = [(40.0 + float(rng.normal(0, 0.05)), -74.0 + float(rng.normal(0, 0.05))) for _ in range(n_pois)]
    popularity = rng.dirichlet(np.full(n_pois, 0.5))
    out: list[CheckIn] = []
    for u in range(n_users):
        user = str(1000 + u)
        t = T0 + int(rng.integers(0, 30 * DAY))
        for _ in range(int(rng.integers(per_user[0], per_user[1] + 1))):
            poi = int(rng.choice(n_pois, p=popularity))
            out.append(CheckIn(user, t, coords[poi][0], coords[poi][1], f"loc{poi}"))
            t += int(rng.exponential(4 * 3600)) + 60 if rng.random() < 0.85 else int(rng.integers(2, 6) * DAY)
    return out
