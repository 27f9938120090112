"""Trip records, per-user sequences, CSV ingestion, batching and synthetic populations."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SECONDS_PER_HOUR = 3600.0
SECONDS_PER_DAY = 86400
# 2017-07-03 00:00 UTC, a Monday.
SYNTHETIC_EPOCH = 1499040000


class TripDataError(ValueError):
    """Malformed trip, station-feature or mask input."""


@dataclass(frozen=True)
class TripRecord:
    user_id: str
    t: int
    o: int
    d: int


@dataclass
class UserSequence:
    """Time-ordered trips of one user plus derived gap and calendar features.

    ``taus[i]`` is the gap in hours between trip ``i`` and trip ``i - 1``
    (so ``len(taus) == len(trips) - 1``).
    """

    user_id: str
    trips: list[TripRecord]
    taus: np.ndarray = field(default=None)
    hours: np.ndarray = field(default=None)
    weekdays: np.ndarray = field(default=None)
    tz_offset: int = 0

    def __post_init__(self):
        t = np.array([tr.t for tr in self.trips], dtype=np.int64)
        if self.taus is None:
            self.taus = np.diff(t).astype(np.float64) / SECONDS_PER_HOUR
        if self.hours is None or self.weekdays is None:
            self.hours, self.weekdays = calendar_features(t, self.tz_offset)

    def __len__(self) -> int:
        return len(self.trips)

    @property
    def origins(self) -> np.ndarray:
        return np.array([tr.o for tr in self.trips], dtype=np.int64)

    @property
    def destinations(self) -> np.ndarray:
        return np.array([tr.d for tr in self.trips], dtype=np.int64)

    @property
    def times(self) -> np.ndarray:
        return np.array([tr.t for tr in self.trips], dtype=np.int64)

    def locations(self) -> list[int]:
        """Interleaved ``[o_1, d_1, ..., o_n, d_n]``."""
        out: list[int] = []
        for tr in self.trips:
            out.extend((tr.o, tr.d))
        return out

    def head(self, n: int) -> UserSequence:
        return UserSequence(self.user_id, self.trips[:n], tz_offset=self.tz_offset)

    def __eq__(self, other) -> bool:
        if not isinstance(other, UserSequence):
            return NotImplemented
        return (self.user_id == other.user_id and self.trips == other.trips
                and np.array_equal(self.taus, other.taus)
                and np.array_equal(self.hours, other.hours)
                and np.array_equal(self.weekdays, other.weekdays))


def calendar_features(t, tz_offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Hour of day in 0..23 and day of week (Monday=0) for epoch seconds ``t``."""
    local = np.asarray(t, dtype=np.int64) + int(tz_offset)
    hours = (local % SECONDS_PER_DAY) // 3600
    # 1970-01-01 was a Thursday (weekday 3).
    weekdays = (local // SECONDS_PER_DAY + 3) % 7
    return hours.astype(np.int64), weekdays.astype(np.int64)


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

TRIP_HEADER = ["user_id", "t", "o", "d"]


def load_csv(path, num_stations: int, tz_offset: int = 0) -> list[UserSequence]:
    """Read a ``user_id,t,o,d`` trip file into per-user sequences sorted by time.

    Users keep the order of their first appearance in the file.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        return read_trips(fh, num_stations, tz_offset)


def read_trips(fh, num_stations: int, tz_offset: int = 0) -> list[UserSequence]:
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != TRIP_HEADER:
        raise TripDataError(f"trip CSV header must be {','.join(TRIP_HEADER)}, got {header}")
    by_user: dict[str, list[TripRecord]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 4:
            raise TripDataError(f"row {lineno}: expected 4 fields, got {len(row)}")
        try:
            uid, t, o, d = row[0], int(row[1]), int(row[2]), int(row[3])
        except ValueError as exc:
            raise TripDataError(f"row {lineno}: {exc}") from None
        if o == d:
            raise TripDataError(f"row {lineno}: origin equals destination ({o})")
        for name, sid in (("origin", o), ("destination", d)):
            if not 0 <= sid < num_stations:
                raise TripDataError(f"row {lineno}: {name} station {sid} outside [0, {num_stations})")
        by_user.setdefault(uid, []).append(TripRecord(uid, t, o, d))
    out = []
    for uid, trips in by_user.items():
        trips.sort(key=lambda tr: tr.t)
        ts = [tr.t for tr in trips]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise TripDataError(f"user {uid}: duplicate timestamps")
        out.append(UserSequence(uid, trips, tz_offset=tz_offset))
    return out


def write_csv(sequences, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(trips_to_csv(sequences))


def trips_to_csv(sequences) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRIP_HEADER)
    for seq in sequences:
        for tr in seq.trips:
            w.writerow([tr.user_id, tr.t, tr.o, tr.d])
    return buf.getvalue()


def load_station_features(path, num_stations: int) -> np.ndarray:
    """Read ``station_id,f_1,...,f_P`` into a ``P x S`` matrix."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "station_id":
            raise TripDataError("station feature CSV must start with a station_id column")
        p = len(header) - 1
        feats = np.zeros((p, num_stations))
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            sid = int(row[0])
            if not 0 <= sid < num_stations:
                raise TripDataError(f"row {lineno}: station {sid} outside [0, {num_stations})")
            if len(row) != p + 1:
                raise TripDataError(f"row {lineno}: expected {p + 1} fields")
            feats[:, sid] = [float(x) for x in row[1:]]
            seen.add(sid)
    missing = set(range(num_stations)) - seen
    if missing:
        raise TripDataError(f"station features missing for stations {sorted(missing)[:5]}")
    return feats


def load_od_mask(path, num_stations: int) -> list[tuple[int, int]]:
    """Read forbidden ``o,d`` pairs (header ``o,d``)."""
    pairs = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if [h.strip() for h in (header or [])] != ["o", "d"]:
            raise TripDataError("OD mask CSV header must be o,d")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            o, d = int(row[0]), int(row[1])
            if not (0 <= o < num_stations and 0 <= d < num_stations):
                raise TripDataError(f"row {lineno}: station outside [0, {num_stations})")
            pairs.append((o, d))
    return pairs


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class PaddedBatch:
    """Right-padded ``B x T`` arrays for a group of users.

    ``tau`` holds the gap preceding each trip (0 for a user's first trip and
    for padding); it is both a time-embedding input and the time target.
    """

    user_ids: list[str]
    hours: np.ndarray
    weekdays: np.ndarray
    tau: np.ndarray
    origins: np.ndarray
    destinations: np.ndarray
    marker_mask: np.ndarray
    time_mask: np.ndarray
    lengths: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.origins.shape

    def pad_to(self, T: int, pad_id: int) -> PaddedBatch:
        """Append padding columns up to length ``T``."""
        B, T0 = self.shape
        extra = T - T0
        if extra <= 0:
            return self

        def grow(a, fill):
            return np.concatenate([a, np.full((B, extra), fill, dtype=a.dtype)], axis=1)

        return PaddedBatch(self.user_ids, grow(self.hours, 0), grow(self.weekdays, 0),
                           grow(self.tau, 0.0), grow(self.origins, pad_id),
                           grow(self.destinations, pad_id), grow(self.marker_mask, 0.0),
                           grow(self.time_mask, 0.0), self.lengths.copy())


def pad_batch(sequences, num_stations: int, max_len: int | None = None) -> PaddedBatch:
    """Stack sequences into a padded batch; padding uses station id ``num_stations``.

    Sequences longer than ``max_len`` keep only their most recent ``max_len``
    trips; the first kept trip then still has a valid gap target.
    """
    if not sequences:
        raise ValueError("pad_batch: no sequences")
    views = []
    for seq in sequences:
        n = len(seq)
        start = max(0, n - max_len) if max_len else 0
        taus = np.concatenate([[0.0], seq.taus])[start:]
        has_first = start == 0
        views.append((seq, start, taus, has_first))
    lengths = np.array([len(v[0]) - v[1] for v in views], dtype=np.int64)
    B, T = len(views), int(max(lengths.max(), 1))
    hours = np.zeros((B, T), dtype=np.int64)
    weekdays = np.zeros((B, T), dtype=np.int64)
    tau = np.zeros((B, T))
    origins = np.full((B, T), num_stations, dtype=np.int64)
    dests = np.full((B, T), num_stations, dtype=np.int64)
    marker_mask = np.zeros((B, T))
    time_mask = np.zeros((B, T))
    for b, (seq, start, taus, has_first) in enumerate(views):
        n = lengths[b]
        hours[b, :n] = seq.hours[start:]
        weekdays[b, :n] = seq.weekdays[start:]
        tau[b, :n] = taus
        origins[b, :n] = seq.origins[start:]
        dests[b, :n] = seq.destinations[start:]
        marker_mask[b, :n] = 1.0
        time_mask[b, :n] = 1.0
        if has_first and n > 0:
            time_mask[b, 0] = 0.0
    return PaddedBatch([s.user_id for s in sequences], hours, weekdays, tau, origins, dests,
                       marker_mask, time_mask, lengths)


def split_users(sequences, train_fraction: float, seed: int):
    """Disjoint user-level split into (train, validation), deterministic under ``seed``."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    n = len(sequences)
    n_train = int(round(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"split of {n} users at {train_fraction} leaves an empty side")
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = sorted(perm[:n_train])
    val_idx = sorted(perm[n_train:])
    return [sequences[i] for i in train_idx], [sequences[i] for i in val_idx]


def split_time(sequences, cutoff: int):
    """Split every user's trips at epoch second ``cutoff`` into (before, at-or-after).

    Users with no trips on one side are absent from that side.
    """
    before, after = [], []
    for s in sequences:
        early = [tr for tr in s.trips if tr.t < cutoff]
        late = [tr for tr in s.trips if tr.t >= cutoff]
        if early:
            before.append(UserSequence(s.user_id, early, tz_offset=s.tz_offset))
        if late:
            after.append(UserSequence(s.user_id, late, tz_offset=s.tz_offset))
    return before, after


# ---------------------------------------------------------------------------
# synthetic populations
# ---------------------------------------------------------------------------

ARCHETYPES = ("round_trip", "morning_only", "random")


@dataclass
class SyntheticPopulationSpec:
    """Parameters of the synthetic generator.

    Commuter activity durations carry Laplace noise with scale ``spread``
    hours, which keeps the duration distributions sharply peaked.  Departure
    times mean-revert toward the archetype's usual hour, and commuters skip
    weekends.
    """

    n_users: int = 200
    num_stations: int = 10
    days: int = 30
    proportions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    morning_hour: float = 8.0
    work_hours: float = 8.0
    spread: float = 0.25
    reversion: float = 0.5
    random_gap_hours: float = 10.0
    random_day_start: float = 6.0
    random_day_end: float = 23.0
    skip_weekends: bool = True
    seed: int = 0
    start: int = SYNTHETIC_EPOCH

    def __post_init__(self):
        if abs(sum(self.proportions) - 1.0) > 1e-9 or min(self.proportions) < 0:
            raise ValueError("archetype proportions must be non-negative and sum to 1")
        if self.num_stations < 2:
            raise ValueError("need at least two stations")


def archetype_counts(spec: SyntheticPopulationSpec) -> list[int]:
    raw = np.array(spec.proportions) * spec.n_users
    counts = np.floor(raw).astype(int)
    # hand leftover users to the largest remainders, earliest archetype first on ties
    order = sorted(range(3), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: spec.n_users - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def generate_synthetic(spec: SyntheticPopulationSpec) -> tuple[list[UserSequence], dict[str, str]]:
    """Draw a population; returns sequences and a ``user_id -> archetype`` map."""
    rng = np.random.default_rng(spec.seed)
    counts = archetype_counts(spec)
    kinds = [k for k, c in zip(ARCHETYPES, counts) for _ in range(c)]
    kinds = [kinds[i] for i in rng.permutation(len(kinds))]
    sequences, labels = [], {}
    for u, kind in enumerate(kinds):
        uid = f"u{u:05d}"
        if kind == "random":
            trips = _random_traveler(uid, spec, rng)
        else:
            trips = _commuter(uid, spec, rng, round_trip=(kind == "round_trip"))
        labels[uid] = kind
        if trips:
            sequences.append(UserSequence(uid, trips))
    return sequences, labels


def _workday(spec: SyntheticPopulationSpec, day: int) -> bool:
    weekday = ((spec.start // SECONDS_PER_DAY) + day + 3) % 7
    return not (spec.skip_weekends and weekday >= 5)


def _commuter(uid, spec, rng, round_trip: bool) -> list[TripRecord]:
    home, work = (int(x) for x in rng.choice(spec.num_stations, size=2, replace=False))
    trips = []
    # current morning departure, hours relative to the start of its own day
    morning = spec.morning_hour + rng.laplace(0.0, spec.spread)
    prev_day = None
    for day in range(spec.days):
        if not _workday(spec, day):
            continue
        if prev_day is not None:
            # next departure time follows the previous one, pulled back toward the usual hour
            morning = morning + spec.reversion * (spec.morning_hour - morning) + rng.laplace(0.0, spec.spread)
        prev_day = day
        t_am = spec.start + day * SECONDS_PER_DAY + int(round(morning * 3600))
        trips.append(TripRecord(uid, t_am, home, work))
        if round_trip:
            duration = spec.work_hours * np.exp(rng.laplace(0.0, spec.spread / spec.work_hours))
            trips.append(TripRecord(uid, t_am + int(round(duration * 3600)), work, home))
    return trips


def _random_traveler(uid, spec, rng) -> list[TripRecord]:
    end = spec.start + spec.days * SECONDS_PER_DAY
    t = float(spec.start) + rng.uniform(spec.random_day_start, spec.random_day_end) * 3600
    trips = []
    while t < end:
        o, d = (int(x) for x in rng.choice(spec.num_stations, size=2, replace=False))
        trips.append(TripRecord(uid, int(t), o, d))
        t += max(rng.exponential(spec.random_gap_hours), 0.1) * 3600
        hour = ((t - spec.start) % SECONDS_PER_DAY) / 3600
        if hour < spec.random_day_start or hour >= spec.random_day_end:
            # no night travel: wait until the next active window opens
            day0 = (t - spec.start) // SECONDS_PER_DAY + (1 if hour >= spec.random_day_end else 0)
            t = spec.start + day0 * SECONDS_PER_DAY + spec.random_day_start * 3600 + rng.exponential(1.0) * 3600
    return trips


def write_archetypes(labels: dict[str, str], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "archetype"])
        for uid, kind in labels.items():
            w.writerow([uid, kind])


def read_archetypes(path) -> dict[str, str]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {row["user_id"]: row["archetype"] for row in csv.DictReader(fh)}


def ensure_parent(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path
