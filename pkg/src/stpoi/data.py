"""Check-in data pipeline.

Raw check-ins come from tab-separated location-based social network dumps
(``snap`` format) or a comma-separated variant (``csv``).  Both carry one
check-in per line in the field order

    user, time, latitude, longitude, poi

where time is ISO-8601 (a trailing ``Z`` meaning UTC) or plain unix seconds.
The csv variant may start with a header line, which is detected and skipped.

The pipeline is: load -> clean (drop rare users and rare POIs until a fixed
point) -> build_corpus (per-user chronological ordering, 70/30 split, and
transition triples).  A transition triple pairs the POI being left with the
elapsed hours and travelled km toward the next check-in; the POI of that
next check-in is the prediction target.  Each user therefore contributes
``n_train - 1`` training steps and ``n - n_train`` evaluation steps, with
the step that crosses the split belonging to evaluation so no test target
is ever trained on.

``synth_corpus`` fabricates corpora with two behavioural patterns used by
the test and experiment suites (see the function docstring).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from . import container

log = logging.getLogger("stpoi.data")

EARTH_RADIUS_KM = 6371.0


class FormatError(ValueError):
    """Raised when an input file is mostly unparseable for its format."""


@dataclass
class CheckIn:
    user: str
    ts: float          # unix seconds
    lat: float
    lon: float
    poi: str


@dataclass
class UserSeq:
    """One user's full chronological record chain in dense POI ids.

    ``dts[t]``/``dds[t]`` are the hours and km between record t and t+1.
    ``n_train`` counts the records in the training split; the first
    ``n_train - 1`` transitions train, the rest evaluate.
    """

    user: str
    pois: np.ndarray       # int64, length n
    dts: np.ndarray        # float64, length n-1
    dds: np.ndarray        # float64, length n-1
    n_train: int

    def train_steps(self):
        k = self.n_train
        return self.pois[: k - 1], self.dts[: k - 1], self.dds[: k - 1], self.pois[1:k]

    def test_steps(self):
        k = self.n_train
        n = len(self.pois)
        return (
            self.pois[k - 1 : n - 1],
            self.dts[k - 1 :],
            self.dds[k - 1 :],
            self.pois[k:],
        )


@dataclass
class Corpus:
    users: list
    vocab: list                      # dense id -> raw poi id
    meta: dict = field(default_factory=dict)

    @property
    def n_pois(self) -> int:
        return len(self.vocab)

    def poi_index(self) -> dict:
        return {raw: i for i, raw in enumerate(self.vocab)}

    def stats(self) -> dict:
        return {
            "users": len(self.users),
            "pois": len(self.vocab),
            "records": int(sum(len(u.pois) for u in self.users)),
            "train_transitions": int(sum(u.n_train - 1 for u in self.users)),
            "test_transitions": int(
                sum(len(u.pois) - u.n_train for u in self.users)
            ),
        }


def haversine(lat1, lon1, lat2, lon2) -> float:
    """Great-circle distance in km between two (lat, lon) points in degrees."""
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2.0) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2.0) ** 2
    return EARTH_RADIUS_KM * 2.0 * math.atan2(math.sqrt(a), math.sqrt(1.0 - a))


def _parse_time(text: str) -> float:
    text = text.strip()
    try:
        stamp = datetime.fromisoformat(text.replace("Z", "+00:00"))
        if stamp.tzinfo is None:
            stamp = stamp.replace(tzinfo=timezone.utc)
        return stamp.timestamp()
    except ValueError:
        return float(text)   # plain unix seconds; ValueError propagates


def _parse_line(parts) -> CheckIn:
    if len(parts) != 5:
        raise ValueError(f"expected 5 fields, got {len(parts)}")
    user, when, lat_s, lon_s, poi = (p.strip() for p in parts)
    if not user or not poi:
        raise ValueError("empty user or poi id")
    ts = _parse_time(when)
    lat, lon = float(lat_s), float(lon_s)
    if not (-90.0 <= lat <= 90.0) or not (-180.0 <= lon <= 180.0):
        raise ValueError(f"coordinates out of range: {lat}, {lon}")
    if not math.isfinite(ts):
        raise ValueError("non-finite timestamp")
    return CheckIn(user=user, ts=ts, lat=lat, lon=lon, poi=poi)


def load_checkins(path, fmt: str = "snap"):
    """Parse a check-in file; returns a list of CheckIn in file order.

    Malformed lines are skipped with a warning tally; if more than half of
    the non-blank lines fail to parse the file is rejected as being in the
    wrong format.  An empty file is legal and yields an empty list.
    """
    if fmt not in ("snap", "csv"):
        raise ValueError(f"unknown format {fmt!r}; expected 'snap' or 'csv'")
    sep = "\t" if fmt == "snap" else ","
    out = []
    seen = 0
    bad = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split(sep)
            try:
                out.append(_parse_line(parts))
                seen += 1
            except (ValueError, OverflowError):
                if fmt == "csv" and lineno == 1:
                    continue   # header line, not data
                seen += 1
                bad += 1
    if seen == 0:
        log.warning("%s: no check-ins found", path)
        return []
    if bad > 0:
        log.warning("%s: skipped %d of %d malformed lines", path, bad, seen)
    if bad * 2 > seen:
        raise FormatError(
            f"{path}: {bad}/{seen} lines malformed; is this really {fmt} format?"
        )
    return out


def clean(checkins, min_user_checkins: int = 10, min_poi_users: int = 10):
    """Iteratively drop users with too few check-ins and POIs visited by too
    few distinct users, until neither rule removes anything.

    Removing a POI shrinks user histories which can push a user under the
    threshold on the next sweep, hence the fixed-point loop.
    """
    current = list(checkins)
    while True:
        by_user = {}
        for c in current:
            by_user[c.user] = by_user.get(c.user, 0) + 1
        kept = [c for c in current if by_user[c.user] >= min_user_checkins]
        poi_users = {}
        for c in kept:
            poi_users.setdefault(c.poi, set()).add(c.user)
        kept2 = [c for c in kept if len(poi_users[c.poi]) >= min_poi_users]
        if len(kept2) == len(current):
            return kept2
        current = kept2


def _split_point(n: int, train_frac: float) -> int:
    # round-half-up of train_frac*n, clamped so both splits are non-empty:
    # 10 records -> 7 train / 3 test, 2 records -> 1 / 1
    return max(1, min(n - 1, int(math.floor(train_frac * n + 0.5))))


def build_corpus(checkins, train_frac: float = 0.7, clip_dt=None, clip_dd=None,
                 log_scale: bool = False) -> Corpus:
    """Assemble per-user transition sequences with a dense POI vocabulary.

    Users appear in order of first appearance in ``checkins``; within a user
    records are sorted by timestamp with input order breaking ties.  Dense
    POI ids are assigned by first appearance along that traversal.  Users
    with fewer than two records cannot form a transition and are dropped
    with a warning.

    Intervals are raw hours/km by default.  ``clip_dt``/``clip_dd`` cap them
    first; ``log_scale`` then maps u -> log1p(u).
    """
    if not 0.0 < train_frac < 1.0:
        raise ValueError(f"train_frac must be in (0, 1), got {train_frac}")
    order = []
    grouped = {}
    for idx, c in enumerate(checkins):
        if c.user not in grouped:
            grouped[c.user] = []
            order.append(c.user)
        grouped[c.user].append((c.ts, idx, c))

    vocab: list = []
    index: dict = {}
    users = []
    dropped = 0
    for user in order:
        recs = [c for _, _, c in sorted(grouped[user], key=lambda t: (t[0], t[1]))]
        if len(recs) < 2:
            dropped += 1
            continue
        pois = np.empty(len(recs), dtype=np.int64)
        for j, c in enumerate(recs):
            if c.poi not in index:
                index[c.poi] = len(vocab)
                vocab.append(c.poi)
            pois[j] = index[c.poi]
        dts = np.empty(len(recs) - 1)
        dds = np.empty(len(recs) - 1)
        for j in range(len(recs) - 1):
            a, b = recs[j], recs[j + 1]
            dts[j] = (b.ts - a.ts) / 3600.0
            dds[j] = haversine(a.lat, a.lon, b.lat, b.lon)
        if np.any(dts < 0):
            raise ValueError(f"user {user!r}: negative interval after sorting")
        if clip_dt is not None:
            np.minimum(dts, clip_dt, out=dts)
        if clip_dd is not None:
            np.minimum(dds, clip_dd, out=dds)
        if log_scale:
            dts = np.log1p(dts)
            dds = np.log1p(dds)
        users.append(
            UserSeq(
                user=user, pois=pois, dts=dts, dds=dds,
                n_train=_split_point(len(recs), train_frac),
            )
        )
    if dropped:
        log.warning("dropped %d users with fewer than 2 check-ins", dropped)
    meta = {
        "train_frac": train_frac,
        "interval_transform": {
            "clip_dt": clip_dt, "clip_dd": clip_dd, "log_scale": log_scale,
        },
    }
    return Corpus(users=users, vocab=vocab, meta=meta)


def checkin_stats(checkins) -> dict:
    """Raw counts used for before/after-cleaning reports."""
    return {
        "users": len({c.user for c in checkins}),
        "pois": len({c.poi for c in checkins}),
        "records": len(checkins),
    }


def save_corpus(corpus: Corpus, path) -> None:
    """Serialize to the binary container; byte-stable for equal content."""
    meta = {
        "kind": "corpus",
        "vocab": corpus.vocab,
        "users": [
            {"user": u.user, "n": int(len(u.pois)), "n_train": int(u.n_train)}
            for u in corpus.users
        ],
        **corpus.meta,
    }
    arrays = {
        "pois": np.concatenate([u.pois for u in corpus.users])
        if corpus.users else np.zeros(0, dtype=np.int64),
        "dts": np.concatenate([u.dts for u in corpus.users])
        if corpus.users else np.zeros(0),
        "dds": np.concatenate([u.dds for u in corpus.users])
        if corpus.users else np.zeros(0),
    }
    container.save(path, meta, arrays)


def load_corpus(path) -> Corpus:
    meta, arrays = container.load(path)
    if meta.get("kind") != "corpus":
        raise FormatError(f"{path}: not a corpus cache")
    users = []
    at_poi = 0
    at_iv = 0
    for entry in meta["users"]:
        n = entry["n"]
        users.append(
            UserSeq(
                user=entry["user"],
                pois=arrays["pois"][at_poi : at_poi + n].copy(),
                dts=arrays["dts"][at_iv : at_iv + n - 1].copy(),
                dds=arrays["dds"][at_iv : at_iv + n - 1].copy(),
                n_train=entry["n_train"],
            )
        )
        at_poi += n
        at_iv += n - 1
    extra = {k: v for k, v in meta.items() if k not in ("kind", "vocab", "users")}
    return Corpus(users=users, vocab=list(meta["vocab"]), meta=extra)


# --------------------------------------------------------------------------
# synthetic corpora


def _cluster_coords(rng, center_lat, center_lon, n, jitter):
    lats = center_lat + rng.uniform(-jitter, jitter, size=n)
    lons = center_lon + rng.uniform(-jitter, jitter, size=n)
    return list(zip(lats, lons))


def _synth_periodic(rng, n_users, n_pois, length, n_short, jump_every):
    """Each user cycles through three POIs of a home neighbourhood at a
    near-constant pace and takes a scheduled excursion to one far POI every
    ``jump_every``-th step.  Continuations are deterministic given the
    history and the incoming interval, and the transition pairs each user
    contributes are kept globally unique where possible so the pattern is
    learnable without memorizing user identities."""
    if n_pois < 16:
        raise ValueError("periodic pattern needs at least 16 POIs")
    cluster_size = 8
    n_clusters = max(2, n_pois // cluster_size)
    coords = [None] * n_pois
    members = [[] for _ in range(n_clusters)]
    for p in range(n_pois):
        members[p % n_clusters].append(p)
    for ci, pois in enumerate(members):
        lat = float(rng.uniform(-55, 55))
        lon = float(rng.uniform(-170, 170))
        for p, c in zip(pois, _cluster_coords(rng, lat, lon, len(pois), 0.01)):
            coords[p] = c

    used_pairs = set()
    checkins = []
    t0 = 0.0
    for u in range(n_users):
        home = u % n_clusters
        pool = members[home]
        cyc = far = None
        for _ in range(300):
            trial_cyc = [int(q) for q in rng.choice(pool, size=3, replace=False)]
            away = (home + 1 + int(rng.integers(n_clusters - 1))) % n_clusters
            trial_far = int(rng.choice(members[away]))
            a, b, c = trial_cyc
            into = trial_cyc[(jump_every - 1) % 3]
            back = trial_cyc[jump_every % 3]
            pairs = {(a, b), (b, c), (c, a), (into, trial_far), (trial_far, back)}
            if pairs.isdisjoint(used_pairs):
                cyc, far = trial_cyc, trial_far
                used_pairs |= pairs
                break
        if cyc is None:       # pool exhausted; accept a colliding draw
            cyc = [int(q) for q in rng.choice(pool, size=3, replace=False)]
            far = int(rng.choice(members[(home + 1) % n_clusters]))
        m = 6 if u < n_short else length
        t = t0
        cycle_count = 1
        visits = [cyc[0]]
        gaps = []
        for s in range(1, m):
            if s % jump_every == 0:
                visits.append(far)
                gaps.append(float(48.0 + rng.uniform(-4, 4)))
            else:
                visits.append(cyc[cycle_count % 3])
                cycle_count += 1
                gaps.append(float(8.0 + rng.uniform(-0.5, 0.5)))
        for j, p in enumerate(visits):
            checkins.append(
                CheckIn(
                    user=f"u{u}", ts=t, lat=coords[p][0], lon=coords[p][1],
                    poi=f"p{p}",
                )
            )
            if j < len(gaps):
                t += gaps[j] * 3600.0
        t0 += 1.0e7
    return checkins


def _synth_interval(rng, n_users, n_pois, length, n_short):
    """Next POI depends on the incoming interval: a short gap stays in the
    current neighbourhood, a long gap switches to one of two others, and
    which one is told apart by the travelled distance (the three
    neighbourhoods sit at pairwise-distinct distances).  Within a
    neighbourhood visits alternate between its two POIs.  Each user owns six
    private POIs, so the rule is exactly recoverable from history plus the
    interval inputs, while a model blind to intervals cannot beat guessing
    the stay/switch coin."""
    if n_pois < 6 * n_users:
        raise ValueError(
            f"interval pattern needs at least 6 POIs per user "
            f"({6 * n_users} for {n_users} users, got {n_pois})"
        )
    checkins = []
    t0 = 0.0
    for u in range(n_users):
        base_lat = float(rng.uniform(-35, 35))
        base_lon = float(rng.uniform(-60, 60))
        km_per_deg = 111.32 * math.cos(math.radians(base_lat))
        offsets = [0.0, 300.0 / km_per_deg, 900.0 / km_per_deg]
        clusters = []
        for ci in range(3):
            pts = _cluster_coords(rng, base_lat, base_lon + offsets[ci], 2, 0.003)
            ids = [f"p{6 * u + 2 * ci}", f"p{6 * u + 2 * ci + 1}"]
            clusters.append(list(zip(ids, pts)))
        m = 6 if u < n_short else length
        visit_count = [1, 0, 0]
        cur = 0
        poi_id, (lat, lon) = clusters[0][0]
        t = t0
        checkins.append(CheckIn(user=f"u{u}", ts=t, lat=lat, lon=lon, poi=poi_id))
        for _ in range(m - 1):
            r = rng.random()
            if r < 0.5:
                target = cur
                gap = float(rng.uniform(1, 4))
            else:
                target = (cur + (1 if r < 0.75 else 2)) % 3
                gap = float(rng.uniform(24, 48))
            poi_id, (lat, lon) = clusters[target][visit_count[target] % 2]
            visit_count[target] += 1
            cur = target
            t += gap * 3600.0
            checkins.append(CheckIn(user=f"u{u}", ts=t, lat=lat, lon=lon, poi=poi_id))
        t0 += 1.0e7
    return checkins


SYNTH_PATTERNS = ("periodic", "interval")


def synth_corpus(seed: int, n_users: int, n_pois: int, pattern: str = "periodic",
                 length: int = 60, n_short: int = 0, train_frac: float = 0.7,
                 jump_every: int = 7) -> Corpus:
    """Generate a deterministic synthetic corpus.

    ``periodic``: home cycles with scheduled far excursions (see
    _synth_periodic).  ``interval``: stay-or-switch behaviour readable only
    from the elapsed-time/distance inputs (see _synth_interval).  The first
    ``n_short`` users get 6-record histories so cold-start cohorts are
    non-empty.  The same arguments always produce byte-identical corpora.
    """
    rng = np.random.default_rng(seed)
    if pattern == "periodic":
        checkins = _synth_periodic(rng, n_users, n_pois, length, n_short, jump_every)
    elif pattern == "interval":
        checkins = _synth_interval(rng, n_users, n_pois, length, n_short)
    else:
        raise ValueError(
            f"unknown pattern {pattern!r}; expected one of {SYNTH_PATTERNS}"
        )
    corpus = build_corpus(checkins, train_frac=train_frac)
    corpus.meta["synth"] = {
        "seed": seed, "pattern": pattern, "n_users": n_users, "n_pois": n_pois,
        "length": length, "n_short": n_short, "jump_every": jump_every,
    }
    return corpus
