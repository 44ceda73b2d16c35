"""Check-in ingestion, vocabulary, grid alignment and dataset splits.

Raw logs follow the SNAP LBSN layout: one check-in per line with
tab-separated user, ISO-8601 UTC timestamp, latitude, longitude and
location id.  Each user's history is cut into sequences at long gaps,
aligned to an evenly spaced grid (inserting missing slots), and split
chronologically into train / validation / test.
"""

from __future__ import annotations

import calendar
import gzip
import logging
import math
import time
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import ContractViolation, DataFormatError

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0
DEFAULT_INTERVAL = 3 * 3600.0
DEFAULT_MAX_GAP = 24 * 3600.0
DEFAULT_MAX_LEN = 64
TIME_FORMAT = "%Y-%m-%dT%H:%M:%SZ"


@dataclass(frozen=True)
class CheckIn:
    user_id: str
    timestamp: int
    latitude: float
    longitude: float
    poi_id: str

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0 or not -180.0 <= self.longitude <= 180.0:
            raise ValueError(f"coordinates out of range: {self.latitude}, {self.longitude}")
        if self.timestamp <= 0:
            raise ValueError("timestamp must be positive")


def format_time(ts: float) -> str:
    return time.strftime(TIME_FORMAT, time.gmtime(int(round(ts))))


def parse_time(text: str) -> int:
    return calendar.timegm(time.strptime(text, TIME_FORMAT))


@dataclass
class ParsedCheckins:
    records: list[CheckIn]
    malformed: int = 0
    duplicates: int = 0

    @property
    def skipped(self) -> int:
        return self.malformed + self.duplicates


def _open_text(path):
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"\x1f\x8b":
        return gzip.open(path, "rt", encoding="utf-8", errors="replace")
    return open(path, encoding="utf-8", errors="replace")


def parse_line(line: str) -> CheckIn:
    fields = line.rstrip("\r\n").split("\t")
    if len(fields) < 5:
        raise ValueError("expected 5 tab-separated fields")
    user, ts, lat, lng, poi = fields[:5]
    if not user or not poi:
        raise ValueError("empty user or location id")
    return CheckIn(user, parse_time(ts), float(lat), float(lng), poi)


def parse_checkin_file(path, max_users: int | None = None, max_records: int | None = None) -> ParsedCheckins:
    """Read a SNAP check-in file (plain or gzip).

    Malformed lines are counted and skipped.  ``max_users`` keeps the first
    users in file order, ``max_records`` stops after that many valid
    records.  The result is sorted by (user, timestamp); later records at an
    already-seen (user, timestamp) are dropped as duplicates.
    """
    records: list[CheckIn] = []
    malformed = 0
    seen_users: set[str] = set()
    total = 0
    with _open_text(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            total += 1
            try:
                rec = parse_line(line)
            except ValueError:
                malformed += 1
                continue
            if rec.user_id not in seen_users:
                if max_users is not None and len(seen_users) >= max_users:
                    continue
                seen_users.add(rec.user_id)
            records.append(rec)
            if max_records is not None and len(records) >= max_records:
                break
    if total and malformed > 0.5 * total:
        raise DataFormatError(f"{path}: {malformed} of {total} lines malformed; not a SNAP check-in file?")
    records.sort(key=lambda r: (r.user_id, r.timestamp))  # stable: file order within a second
    deduped: list[CheckIn] = []
    for rec in records:
        if deduped and deduped[-1].user_id == rec.user_id and deduped[-1].timestamp == rec.timestamp:
            continue
        deduped.append(rec)
    if malformed:
        log.info("skipped %d malformed lines in %s", malformed, path)
    return ParsedCheckins(deduped, malformed, len(records) - len(deduped))


def write_checkins(checkins: Iterable[CheckIn], target, marker: str | None = None,
                   imputed: Iterable[bool] | None = None) -> None:
    """Emit check-ins in SNAP layout.

    With ``marker`` set, a sixth column carries ``marker`` on imputed rows
    (per the parallel ``imputed`` flags) and is empty otherwise.
    """
    if isinstance(target, (str, Path)):
        with open(target, "w", encoding="utf-8", newline="\n") as fh:
            write_checkins(checkins, fh, marker, imputed)
        return
    flags = iter(imputed) if imputed is not None else None
    for c in checkins:
        row = f"{c.user_id}\t{format_time(c.timestamp)}\t{c.latitude!r}\t{c.longitude!r}\t{c.poi_id}"
        if marker is not None:
            flag = next(flags) if flags is not None else False
            row += "\t" + (marker if flag else "")
        target.write(row + "\n")


def _check_coords(lat: float, lng: float) -> None:
    if not (-90.0 <= lat <= 90.0 and -180.0 <= lng <= 180.0):
        raise ValueError(f"coordinates out of range: ({lat}, {lng})")


def haversine_km(a, b) -> float:
    """Great-circle distance in km between two (lat, lng) pairs in degrees."""
    lat1, lng1 = a
    lat2, lng2 = b
    _check_coords(lat1, lng1)
    _check_coords(lat2, lng2)
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lng2 - lng1)
    h = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(math.sqrt(min(1.0, max(0.0, h))))


def haversine_many(lat: float, lng: float, lats: np.ndarray, lngs: np.ndarray) -> np.ndarray:
    """Distances in km from one point to many (no range checks)."""
    return _kernels.ACTIVE.haversine_many(float(lat), float(lng), lats, lngs, EARTH_RADIUS_KM)


@dataclass
class Vocabulary:
    """POI index.  Index ``size`` (== number of POIs) is the missing token."""

    pois: list[str]
    coords: np.ndarray  # (P, 2) representative lat, lng
    freq: np.ndarray  # (P,) train-set check-in counts
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {p: i for i, p in enumerate(self.pois)}
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(len(self.pois), 2)
        self.freq = np.asarray(self.freq, dtype=np.int64)

    @property
    def size(self) -> int:
        return len(self.pois)

    @property
    def missing_token_index(self) -> int:
        return len(self.pois)

    def __len__(self) -> int:
        return len(self.pois)

    def lookup(self, poi_id: str) -> int:
        return self.index[poi_id]

    def poi(self, i: int) -> str:
        return self.pois[i]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for i, p in enumerate(self.pois):
                fh.write(f"{i}\t{p}\t{float(self.coords[i, 0])!r}\t{float(self.coords[i, 1])!r}\t{int(self.freq[i])}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        pois, coords, freq = [], [], []
        with open(path, encoding="utf-8") as fh:
            for i, line in enumerate(fh):
                idx, poi, lat, lng, count = line.rstrip("\n").split("\t")
                if int(idx) != i:
                    raise DataFormatError(f"{path}: vocabulary index {idx} out of order")
                pois.append(poi)
                coords.append((float(lat), float(lng)))
                freq.append(int(count))
        return cls(pois, np.array(coords).reshape(-1, 2), np.array(freq, dtype=np.int64))


def build_vocabulary(checkins: Sequence[CheckIn]) -> Vocabulary:
    """Index POIs by descending frequency, ties by poi id.

    A POI's representative coordinates are its most frequently reported
    position (ties to the smallest (lat, lng)).
    """
    if not checkins:
        raise ValueError("cannot build a vocabulary from no check-ins")
    counts = Counter(c.poi_id for c in checkins)
    positions: dict[str, Counter] = defaultdict(Counter)
    for c in checkins:
        positions[c.poi_id][(c.latitude, c.longitude)] += 1
    order = sorted(counts, key=lambda p: (-counts[p], p))
    coords = []
    for p in order:
        pos = positions[p]
        coords.append(min(pos, key=lambda xy: (-pos[xy], xy)))
    return Vocabulary(order, np.array(coords, dtype=np.float64), np.array([counts[p] for p in order]))


@dataclass(frozen=True)
class Slot:
    """One grid position: an observed (or imputed) check-in, or a missing one."""

    timestamp: float
    checkin: CheckIn | None = None
    imputed: bool = False

    @property
    def observed(self) -> bool:
        return self.checkin is not None

    @property
    def coords(self):
        return None if self.checkin is None else (self.checkin.latitude, self.checkin.longitude)


def imputed_slot(user_id: str, timestamp: float, vocab: Vocabulary, poi_index: int) -> Slot:
    """Slot filled with a POI's representative coordinates at the rounded slot time."""
    lat, lng = vocab.coords[poi_index]
    checkin = CheckIn(user_id, int(round(timestamp)), float(lat), float(lng), vocab.poi(poi_index))
    return Slot(timestamp, checkin, True)


@dataclass
class GriddedSequence:
    user_id: str
    interval: float
    slots: list[Slot]
    seq_id: str = ""

    def __len__(self) -> int:
        return len(self.slots)

    @property
    def observed_checkins(self) -> list[CheckIn]:
        return [s.checkin for s in self.slots if s.checkin is not None]

    @property
    def missing_positions(self) -> list[int]:
        return [i for i, s in enumerate(self.slots) if s.checkin is None]

    def masked(self, positions: Iterable[int]) -> "GriddedSequence":
        """Copy with the given slots turned into missing slots."""
        hide = set(positions)
        slots = [Slot(s.timestamp) if i in hide else s for i, s in enumerate(self.slots)]
        return GriddedSequence(self.user_id, self.interval, slots, self.seq_id)


def grid_align(checkins: Sequence[CheckIn], interval: float = DEFAULT_INTERVAL, seq_id: str = "") -> GriddedSequence:
    """Insert evenly spaced missing slots into the gaps of one user's sequence.

    A gap ``g`` between consecutive check-ins receives ``round(g / interval) - 1``
    missing slots (rounding half up); observed check-ins keep their timestamps.
    """
    if interval <= 0:
        raise ValueError("interval must be positive")
    if not checkins:
        raise ValueError("grid_align needs at least one check-in")
    user = checkins[0].user_id
    slots = [Slot(float(checkins[0].timestamp), checkins[0])]
    for prev, cur in zip(checkins, checkins[1:]):
        if cur.timestamp <= prev.timestamp:
            raise ContractViolation("check-ins must have strictly increasing timestamps")
        gap = float(cur.timestamp - prev.timestamp)
        k = int(math.floor(gap / interval + 0.5)) - 1
        for j in range(1, k + 1):
            slots.append(Slot(prev.timestamp + j * gap / (k + 1)))
        slots.append(Slot(float(cur.timestamp), cur))
    return GriddedSequence(user, interval, slots, seq_id)


def segment_checkins(checkins: Sequence[CheckIn], max_gap: float = DEFAULT_MAX_GAP) -> list[list[CheckIn]]:
    """Cut a user's time-sorted history wherever consecutive check-ins are more than ``max_gap`` apart."""
    segments: list[list[CheckIn]] = []
    for c in checkins:
        if segments and c.timestamp - segments[-1][-1].timestamp <= max_gap:
            segments[-1].append(c)
        else:
            segments.append([c])
    return segments


def split_long(seq: GriddedSequence, max_len: int = DEFAULT_MAX_LEN) -> list[GriddedSequence]:
    """Chop a sequence into chunks of at most ``max_len`` slots.

    Every chunk starts and ends on an observed slot; missing slots that would
    trail a chunk boundary are dropped.
    """
    if len(seq) <= max_len:
        return [seq]
    slots = seq.slots
    n = len(slots)
    chunks = []
    start = 0
    while start < n:
        end = start + max_len
        if end >= n:
            chunks.append(slots[start:])
            break
        cut = end
        while cut > start + 1 and not slots[cut].observed:
            cut -= 1
        if not slots[cut].observed:
            cut = end
            while cut < n and not slots[cut].observed:
                cut += 1
        chunk = slots[start:cut]
        while not chunk[-1].observed:
            chunk = chunk[:-1]
        chunks.append(chunk)
        start = cut
    return [GriddedSequence(seq.user_id, seq.interval, list(c), f"{seq.seq_id}.{i}") for i, c in enumerate(chunks)]


def grid_user(checkins: Sequence[CheckIn], interval: float, max_gap: float, max_len: int,
              prefix: str) -> list[GriddedSequence]:
    out = []
    for k, segment in enumerate(segment_checkins(checkins, max_gap)):
        seq = grid_align(segment, interval, f"{prefix}{k}")
        out.extend(split_long(seq, max_len))
    return out


@dataclass
class Deltas:
    dt: np.ndarray  # seconds since previous slot
    dd: np.ndarray  # km from last observed position
    dd_unknown: np.ndarray  # bool: no coordinates at this slot


def feature_deltas(seq: GriddedSequence) -> Deltas:
    """Raw (un-normalized) time and distance deltas for every slot."""
    n = len(seq)
    dt = np.zeros(n)
    dd = np.zeros(n)
    unknown = np.zeros(n, dtype=bool)
    last = None
    for i, slot in enumerate(seq.slots):
        if i > 0:
            dt[i] = slot.timestamp - seq.slots[i - 1].timestamp
        pos = slot.coords
        if pos is None:
            unknown[i] = True
            continue
        if last is not None:
            dd[i] = haversine_km(last, pos)
        last = pos
    return Deltas(dt, dd, unknown)


@dataclass
class FeatureStats:
    """Train-set statistics for ``log1p`` then z-normalized delta features."""

    dt_mean: float = 0.0
    dt_std: float = 1.0
    dd_mean: float = 0.0
    dd_std: float = 1.0

    @classmethod
    def fit(cls, sequences: Iterable[GriddedSequence]) -> "FeatureStats":
        dts, dds = [], []
        for seq in sequences:
            d = feature_deltas(seq)
            dts.append(np.log1p(d.dt))
            dds.append(np.log1p(d.dd[~d.dd_unknown]))
        dt = np.concatenate(dts) if dts else np.zeros(1)
        dd = np.concatenate(dds) if dds else np.zeros(1)

        def _std(x):
            s = float(x.std()) if x.size else 0.0
            return s if s > 1e-8 else 1.0

        return cls(float(dt.mean()) if dt.size else 0.0, _std(dt), float(dd.mean()) if dd.size else 0.0, _std(dd))

    def normalize(self, deltas: Deltas) -> np.ndarray:
        """(n, 2) array of normalized (dt, dd); unknown distances map to 0."""
        t = (np.log1p(deltas.dt) - self.dt_mean) / self.dt_std
        d = (np.log1p(deltas.dd) - self.dd_mean) / self.dd_std
        d[deltas.dd_unknown] = 0.0
        return np.stack([t, d], axis=1)

    def to_text(self) -> str:
        return "".join(f"{k}={getattr(self, k)!r}\n" for k in ("dt_mean", "dt_std", "dd_mean", "dd_std"))

    @classmethod
    def from_text(cls, text: str) -> "FeatureStats":
        values = {}
        for line in text.splitlines():
            if line.strip():
                k, _, v = line.partition("=")
                values[k.strip()] = float(v)
        return cls(**values)


@dataclass
class DatasetSplit:
    train: list[GriddedSequence]
    validation: list[GriddedSequence]
    test: list[GriddedSequence]
    raw: dict[str, list[CheckIn]]
    fractions: tuple[float, float] = (0.8, 0.1)
    dropped_users: int = 0

    def training_checkins(self) -> list[CheckIn]:
        """Check-ins of the training portion (train plus its validation tail)."""
        return self.raw["train"] + self.raw["validation"]


def split_counts(n: int, train_frac: float = 0.8, val_frac: float = 0.1) -> tuple[int, int, int]:
    """(train, validation, test) sizes for a user with ``n`` check-ins."""
    head = int(math.floor(train_frac * n + 1e-9))
    val = int(math.floor(val_frac * head + 1e-9))
    if head >= 5:
        val = max(val, 1)
    return head - val, val, n - head


def _group_by_user(checkins: Iterable[CheckIn]) -> dict[str, list[CheckIn]]:
    users: dict[str, list[CheckIn]] = defaultdict(list)
    for c in checkins:
        users[c.user_id].append(c)
    for seq in users.values():
        seq.sort(key=lambda c: c.timestamp)
    return dict(sorted(users.items()))


def assemble_split(portions: dict[str, dict[str, list[CheckIn]]], interval: float = DEFAULT_INTERVAL,
                   max_gap: float = DEFAULT_MAX_GAP, max_len: int = DEFAULT_MAX_LEN,
                   fractions=(0.8, 0.1), dropped_users: int = 0) -> DatasetSplit:
    """Grid pre-split raw portions (``{"train": {user: [...]}, ...}``) independently."""
    grids: dict[str, list[GriddedSequence]] = {}
    raw: dict[str, list[CheckIn]] = {}
    for name in ("train", "validation", "test"):
        per_user = portions.get(name, {})
        grids[name] = []
        raw[name] = []
        for user in sorted(per_user):
            cs = per_user[user]
            if not cs:
                continue
            raw[name].extend(cs)
            grids[name].extend(grid_user(cs, interval, max_gap, max_len, f"{name}:{user}:"))
    return DatasetSplit(grids["train"], grids["validation"], grids["test"], raw, tuple(fractions), dropped_users)


def split_dataset(checkins: Iterable[CheckIn], interval: float = DEFAULT_INTERVAL, train_frac: float = 0.8,
                  val_frac: float = 0.1, min_checkins: int = 5, max_gap: float = DEFAULT_MAX_GAP,
                  max_len: int = DEFAULT_MAX_LEN) -> DatasetSplit:
    """Chronological per-user split followed by independent grid alignment of each portion."""
    users = _group_by_user(checkins)
    if not users:
        warnings.warn("split_dataset: no users in input", stacklevel=2)
    portions: dict[str, dict[str, list[CheckIn]]] = {"train": {}, "validation": {}, "test": {}}
    dropped = 0
    for user, cs in users.items():
        if len(cs) < min_checkins:
            dropped += 1
            continue
        n_train, n_val, _ = split_counts(len(cs), train_frac, val_frac)
        portions["train"][user] = cs[:n_train]
        portions["validation"][user] = cs[n_train:n_train + n_val]
        portions["test"][user] = cs[n_train + n_val:]
    if dropped:
        log.info("dropped %d users with fewer than %d check-ins", dropped, min_checkins)
    return assemble_split(portions, interval, max_gap, max_len, (train_frac, val_frac), dropped)


_STATE = {"O": False, "I": True}


def write_gridded(sequences: Iterable[GriddedSequence], target) -> None:
    """Slot-per-line TSV: seq_id, user, timestamp, state (O/I/M), poi, lat, lng, raw timestamp."""
    if isinstance(target, (str, Path)):
        with open(target, "w", encoding="utf-8", newline="\n") as fh:
            write_gridded(sequences, fh)
        return
    for seq in sequences:
        for s in seq.slots:
            if s.checkin is None:
                target.write(f"{seq.seq_id}\t{seq.user_id}\t{s.timestamp!r}\tM\t\t\t\t\n")
            else:
                c = s.checkin
                state = "I" if s.imputed else "O"
                target.write(f"{seq.seq_id}\t{seq.user_id}\t{s.timestamp!r}\t{state}\t{c.poi_id}\t"
                             f"{c.latitude!r}\t{c.longitude!r}\t{c.timestamp}\n")


def read_gridded(path, interval: float) -> list[GriddedSequence]:
    out: list[GriddedSequence] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 8:
                raise DataFormatError(f"{path}:{lineno}: expected 8 columns")
            seq_id, user, ts, state, poi, lat, lng, raw_ts = parts
            if not out or out[-1].seq_id != seq_id:
                out.append(GriddedSequence(user, interval, [], seq_id))
            if state == "M":
                slot = Slot(float(ts))
            elif state in _STATE:
                slot = Slot(float(ts), CheckIn(user, int(raw_ts), float(lat), float(lng), poi), _STATE[state])
            else:
                raise DataFormatError(f"{path}:{lineno}: unknown slot state {state!r}")
            out[-1].slots.append(slot)
    return out
