"""Linkage database: ties connections to identities and assembles traces.

The database ingests finished-connection summaries, links each one to an
IMSI (directly, via a stored TMSI pair, via a captured identity, or via
handover continuity), and accumulates time-ordered position estimates per
identity.  Connections that cannot be linked get a provisional anonymous
id that is never merged by guesswork.

State is a deterministic function of the ingested stream; an append-only
JSONL journal captures enough of each event to rebuild the database by
replay.  Solver byproducts such as covariance matrices are recomputable
and stay out of the journal.
"""

from __future__ import annotations

import json
import uuid
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .geometry import (AnnulusLocus, EllipseLocus, Position,
                       PositionEstimate, multilaterate)

MIN_MEASUREMENTS = 10
OUTLIER_IQR_FACTOR = 10.0
DEFAULT_MAX_GAP_PS = 10 * 10**12  # matches a 10 s inactivity timer
DEFAULT_MAX_DIST_M = 300.0

_PROVISIONAL_NS = uuid.uuid5(uuid.NAMESPACE_URL, "tatrack/provisional")


class IntegrityError(ValueError):
    """Raised when stored identity links contradict new evidence."""


@dataclass(frozen=True)
class ConnectionStats:
    median_distance_m: float
    n_measurements: int
    n_outliers_removed: int
    iqr_m: float


def connection_stats(meas: Sequence[float]) -> Optional[ConnectionStats]:
    """Median ranging distance for one connection, or None if too sparse.

    Values more than ten interquartile ranges from the raw median are
    dropped before the reported median is taken.
    """
    if len(meas) < MIN_MEASUREMENTS:
        return None
    values = np.asarray(meas, dtype=float)
    med = float(np.median(values))
    q25, q75 = np.percentile(values, [25.0, 75.0])
    iqr = float(q75 - q25)
    keep = np.abs(values - med) <= OUTLIER_IQR_FACTOR * iqr
    kept = values[keep]
    return ConnectionStats(median_distance_m=float(np.median(kept)),
                           n_measurements=len(meas),
                           n_outliers_removed=int(len(values) - len(kept)),
                           iqr_m=iqr)


@dataclass(frozen=True)
class TracePoint:
    t_ps: int
    estimate: PositionEstimate
    loci: tuple = ()
    corrected: bool = False

    @property
    def position(self) -> Position:
        return self.estimate.position


@dataclass(frozen=True)
class ConnectionSummary:
    """What the tracker needs to know about one finished connection."""

    conn_id: str
    cell_id: int
    rnti: int
    start_ps: int
    end_ps: int
    tmsi: Optional[int] = None
    tmsi_is_random: bool = False
    had_service_request: bool = False
    observed_imsi: Optional[str] = None
    distances_m: tuple = ()
    points: tuple = ()

    @property
    def key(self) -> tuple:
        return (self.cell_id, self.rnti, self.start_ps)


@dataclass
class PairRecord:
    tmsi: int
    imsi: str
    first_seen_ps: int
    last_seen_ps: int
    valid_to_ps: Optional[int] = None  # None while the mapping is current


def provisional_id(conn_id: str) -> str:
    return "anon-" + str(uuid.uuid5(_PROVISIONAL_NS, conn_id))


def _extraction_imsi(conn: ConnectionSummary,
                     entries: Iterable[Mapping]) -> Optional[str]:
    found = set()
    for entry in entries:
        if entry.get("tmsi") != conn.tmsi or "imsi" not in entry:
            continue
        if not conn.start_ps <= entry["t_ps"] <= conn.end_ps:
            continue
        found.add(entry["imsi"])
    if len(found) > 1:
        raise IntegrityError(
            f"tmsi {conn.tmsi:#x} extracted as {sorted(found)} "
            f"within one connection")
    return found.pop() if found else None


class TrackDb:
    def __init__(self) -> None:
        self.pairs: dict[int, list[PairRecord]] = {}
        self.connections: dict[tuple, ConnectionSummary] = {}
        self.link_of: dict[tuple, str] = {}
        self.traces: dict[str, list[TracePoint]] = {}
        self.fingerprints: dict[str, tuple[str, float]] = {}
        self.halted: list[tuple] = []  # (key, end_ps, cell_id, last point)
        self.journal: list[dict] = []

    # -- identity linkage -------------------------------------------------

    def current_pairs(self) -> dict[int, str]:
        out = {}
        for tmsi, records in self.pairs.items():
            if records and records[-1].valid_to_ps is None:
                out[tmsi] = records[-1].imsi
        return out

    def imsi_for(self, tmsi: int) -> Optional[str]:
        return self.current_pairs().get(tmsi)

    def record_pair(self, tmsi: int, imsi: str, t_ps: int) -> None:
        self._journal({"event": "pair", "tmsi": tmsi, "imsi": imsi,
                       "t_ps": t_ps})
        records = self.pairs.setdefault(tmsi, [])
        if records and records[-1].valid_to_ps is None:
            current = records[-1]
            if current.imsi == imsi:
                current.last_seen_ps = max(current.last_seen_ps, t_ps)
                return
            # The network re-assigned this TMSI; close the old interval.
            current.valid_to_ps = t_ps
        records.append(PairRecord(tmsi=tmsi, imsi=imsi,
                                  first_seen_ps=t_ps, last_seen_ps=t_ps))

    def link_connection(self, conn: ConnectionSummary,
                        extraction_entries: Iterable[Mapping] = (),
                        ) -> str:
        """Resolve a connection to an IMSI or a provisional id."""
        extracted = None
        if conn.tmsi is not None and not conn.tmsi_is_random:
            extracted = _extraction_imsi(conn, extraction_entries)
        if conn.observed_imsi is not None:
            if extracted is not None and extracted != conn.observed_imsi:
                raise IntegrityError(
                    f"connection {conn.conn_id} attached as "
                    f"{conn.observed_imsi} but extraction says {extracted}")
            extracted = conn.observed_imsi
        if extracted is not None:
            if conn.tmsi is not None and not conn.tmsi_is_random:
                self.record_pair(conn.tmsi, extracted, conn.start_ps)
            return extracted
        if conn.tmsi is not None and not conn.tmsi_is_random:
            known = self.imsi_for(conn.tmsi)
            if known is not None:
                # Journaled so replay reproduces the last-seen update.
                self.record_pair(conn.tmsi, known, conn.end_ps)
                return known
        return provisional_id(conn.conn_id)

    # -- handover continuity ----------------------------------------------

    def match_handover(self, new_conn: ConnectionSummary,
                       max_gap_ps: int = DEFAULT_MAX_GAP_PS,
                       max_dist_m: float = DEFAULT_MAX_DIST_M,
                       ) -> Optional[ConnectionSummary]:
        """Nearest recently-halted connection at a different cell."""
        if not new_conn.points:
            return None
        here = new_conn.points[0].position
        best = None
        best_dist = max_dist_m
        for key, end_ps, cell_id, last_point in self.halted:
            if cell_id == new_conn.cell_id:
                continue
            gap = new_conn.start_ps - end_ps
            if not 0 <= gap <= max_gap_ps:
                continue
            dist = here.distance_to(last_point.position)
            if dist <= best_dist:
                best_dist = dist
                best = self.connections[key]
        return best

    # -- ingest -------------------------------------------------------------

    def ingest(self, conn: ConnectionSummary,
               extraction_entries: Iterable[Mapping] = ()) -> str:
        linked = None
        direct = (conn.observed_imsi is not None
                  or (conn.tmsi is not None and not conn.tmsi_is_random))
        if direct:
            linked = self.link_connection(conn, extraction_entries)
        else:
            if not conn.had_service_request:
                matched = self.match_handover(conn)
                if matched is not None:
                    linked = self.link_of[matched.key]
            if linked is None:
                linked = provisional_id(conn.conn_id)

        self.connections[conn.key] = conn
        self.link_of[conn.key] = linked
        self.traces.setdefault(linked, []).extend(conn.points)
        self.traces[linked].sort(key=lambda p: p.t_ps)
        if conn.points:
            self.halted.append((conn.key, conn.end_ps, conn.cell_id,
                                conn.points[-1]))
        self._journal({"event": "connection", "linked": linked,
                       **_conn_to_json(conn)})
        return linked

    def set_fingerprint(self, imsi: str, model: str,
                        hw_error_m: float) -> None:
        self.fingerprints[imsi] = (model, hw_error_m)
        self._journal({"event": "fingerprint", "imsi": imsi,
                       "model": model, "hw_error_m": hw_error_m})

    # -- trace assembly ------------------------------------------------------

    def build_trace(self, imsi: str) -> list[TracePoint]:
        """Time-ordered estimates, re-corrected once a fingerprint exists."""
        if imsi not in self.traces:
            raise KeyError(imsi)
        points = self.traces[imsi]
        if imsi in self.fingerprints:
            _, hw_error_m = self.fingerprints[imsi]
            points = [self._corrected(p, hw_error_m) for p in points]
            self.traces[imsi] = points
        return list(points)

    @staticmethod
    def _corrected(point: TracePoint, hw_error_m: float) -> TracePoint:
        if point.corrected or not point.loci:
            return point
        loci = corrected_loci(point.loci, hw_error_m)
        estimate = multilaterate(loci, initial=point.position)
        return replace(point, estimate=estimate, corrected=True)

    # -- persistence ----------------------------------------------------------

    def _journal(self, entry: dict) -> None:
        self.journal.append(entry)

    def journal_lines(self) -> Iterable[str]:
        for entry in self.journal:
            yield json.dumps(entry, sort_keys=True)

    def dump_journal(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for line in self.journal_lines():
                fh.write(line + "\n")

    @classmethod
    def replay(cls, lines: Iterable[str]) -> "TrackDb":
        db = cls()
        for line in lines:
            entry = json.loads(line)
            kind = entry["event"]
            if kind == "pair":
                db.record_pair(entry["tmsi"], entry["imsi"], entry["t_ps"])
            elif kind == "fingerprint":
                db.set_fingerprint(entry["imsi"], entry["model"],
                                   entry["hw_error_m"])
            elif kind == "connection":
                conn = _conn_from_json(entry)
                linked = entry["linked"]
                db.connections[conn.key] = conn
                db.link_of[conn.key] = linked
                db.traces.setdefault(linked, []).extend(conn.points)
                db.traces[linked].sort(key=lambda p: p.t_ps)
                if conn.points:
                    db.halted.append((conn.key, conn.end_ps, conn.cell_id,
                                      conn.points[-1]))
                db.journal.append({"event": "connection", "linked": linked,
                                   **_conn_to_json(conn)})
            else:
                raise ValueError(f"unknown journal event {kind!r}")
        return db

    def state_digest(self) -> str:
        """Canonical serialization of the linkage state, for replay checks."""
        state = {
            "pairs": {
                str(tmsi): [[r.imsi, r.first_seen_ps, r.last_seen_ps,
                             r.valid_to_ps] for r in records]
                for tmsi, records in self.pairs.items()
            },
            "links": {"/".join(map(str, k)): v
                      for k, v in self.link_of.items()},
            "traces": {
                ident: [[p.t_ps, round(p.position.x, 9),
                         round(p.position.y, 9), p.corrected]
                        for p in points]
                for ident, points in self.traces.items()
            },
            "fingerprints": self.fingerprints,
        }
        return json.dumps(state, sort_keys=True)


def corrected_loci(loci: Sequence, hw_error_m: float) -> tuple:
    """Undo a per-phone ranging bias on measurement loci.

    A transmit-timing error inflates a two-leg delay sum by twice the
    one-way bias and a timing-advance ring radius by the bias itself.
    """
    out = []
    for locus in loci:
        if isinstance(locus, EllipseLocus):
            out.append(EllipseLocus(focus_enb=locus.focus_enb,
                                    focus_probe=locus.focus_probe,
                                    sum_dist=locus.sum_dist - 2 * hw_error_m,
                                    sigma=locus.sigma))
        elif isinstance(locus, AnnulusLocus):
            width = locus.r_outer - locus.r_inner
            mid = locus.mid_radius - hw_error_m
            # A ring touching the eNodeB comes from a timing advance
            # clamped at zero, which covers every range the bias maps
            # below the first step boundary; its inner edge stays pinned.
            inner = 0.0 if locus.r_inner == 0.0 else max(0.0,
                                                         mid - width / 2)
            out.append(AnnulusLocus(center=locus.center, r_inner=inner,
                                    r_outer=max(inner + 1e-9,
                                                mid + width / 2)))
        else:
            raise TypeError(f"unknown locus type {type(locus).__name__}")
    return tuple(out)


# -- journal (de)serialization helpers ----------------------------------------

def _locus_to_json(locus) -> dict:
    if isinstance(locus, EllipseLocus):
        return {"kind": "ellipse",
                "fa": [locus.focus_enb.x, locus.focus_enb.y],
                "fb": [locus.focus_probe.x, locus.focus_probe.y],
                "sum": locus.sum_dist, "sigma": locus.sigma}
    if isinstance(locus, AnnulusLocus):
        return {"kind": "annulus",
                "c": [locus.center.x, locus.center.y],
                "inner": locus.r_inner, "outer": locus.r_outer}
    raise TypeError(f"unknown locus type {type(locus).__name__}")


def _locus_from_json(data: Mapping):
    if data["kind"] == "ellipse":
        return EllipseLocus(focus_enb=Position(*data["fa"]),
                            focus_probe=Position(*data["fb"]),
                            sum_dist=data["sum"], sigma=data["sigma"])
    return AnnulusLocus(center=Position(*data["c"]), r_inner=data["inner"],
                        r_outer=data["outer"])


def _point_to_json(point: TracePoint) -> dict:
    return {"t_ps": point.t_ps,
            "x": point.position.x, "y": point.position.y,
            "rms": point.estimate.residual_rms,
            "corrected": point.corrected,
            "loci": [_locus_to_json(l) for l in point.loci]}


def _point_from_json(data: Mapping) -> TracePoint:
    estimate = PositionEstimate(position=Position(data["x"], data["y"]),
                                residual_rms=data["rms"])
    loci = tuple(_locus_from_json(d) for d in data["loci"])
    return TracePoint(t_ps=data["t_ps"], estimate=estimate, loci=loci,
                      corrected=data["corrected"])


def _conn_to_json(conn: ConnectionSummary) -> dict:
    return {"conn_id": conn.conn_id, "cell_id": conn.cell_id,
            "rnti": conn.rnti, "start_ps": conn.start_ps,
            "end_ps": conn.end_ps, "tmsi": conn.tmsi,
            "tmsi_is_random": conn.tmsi_is_random,
            "had_service_request": conn.had_service_request,
            "observed_imsi": conn.observed_imsi,
            "distances_m": list(conn.distances_m),
            "points": [_point_to_json(p) for p in conn.points]}


def _conn_from_json(data: Mapping) -> ConnectionSummary:
    return ConnectionSummary(
        conn_id=data["conn_id"], cell_id=data["cell_id"],
        rnti=data["rnti"], start_ps=data["start_ps"],
        end_ps=data["end_ps"], tmsi=data["tmsi"],
        tmsi_is_random=data["tmsi_is_random"],
        had_service_request=data["had_service_request"],
        observed_imsi=data["observed_imsi"],
        distances_m=tuple(data["distances_m"]),
        points=tuple(_point_from_json(p) for p in data["points"]))


# -- exports -------------------------------------------------------------------

def trace_csv_rows(db: TrackDb, imsi: str) -> Iterable[dict]:
    for point in db.build_trace(imsi):
        yield {"imsi": imsi, "t_ps": point.t_ps,
               "x_m": point.position.x, "y_m": point.position.y,
               "residual_rms_m": point.estimate.residual_rms,
               "corrected": point.corrected}


def stats_csv_rows(db: TrackDb) -> Iterable[dict]:
    for key in sorted(db.connections):
        conn = db.connections[key]
        stats = connection_stats(conn.distances_m)
        if stats is None:
            continue
        yield {"conn_id": conn.conn_id, "linked": db.link_of[key],
               "median_distance_m": stats.median_distance_m,
               "n_measurements": stats.n_measurements,
               "n_outliers_removed": stats.n_outliers_removed,
               "iqr_m": stats.iqr_m}
