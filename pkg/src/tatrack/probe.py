"""Passive sniffer state: connection tracking and ToA measurement.

Two receive chains feed one table: the downlink carrier provides the
eNodeB's subframe timeline (and the control messages that schedule
uplink traffic), the uplink carrier provides arrival times of the UE
transmissions. A Measurement fuses both: the arrival time of an uplink
burst, the transmission instant of its subframe recovered from the
downlink, and the timing advance in force at that moment.

Uplink bursts are associated to connections purely by resource-block
allocation equality against outstanding grants; unmatched bursts are
counted and dropped, mirroring a sniffer that cannot decode unscheduled
traffic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Optional

from .messages import (Ack, AttachRequest, CapabilityVector, DciFormat0,
                       IdentityResponse, Imsi, MacTaCommand, Message,
                       RandomAccessResponse, Rnti, RrcConnectionRequest,
                       ServiceRequest, Tmsi, rnti_of_rar)
from .timebase import (PS_PER_SUBFRAME, Instant, Span, TaIndex, ta_span)

#: Subframes in one radio-frame numbering period (1024 frames x 10).
SUBFRAME_PERIOD = 10_240

#: Misalignment beyond which a carrier's messages cannot be decoded.
DECODE_GATE_PS = 4_000_000

#: Unused grants and unacknowledged TA commands vanish after this many
#: subframes.
EXPIRY_SUBFRAMES = 8


class Carrier(str, Enum):
    DOWNLINK = "downlink"
    UPLINK = "uplink"


@dataclass(frozen=True)
class SubframeStamp:
    frame: int
    subframe: int
    rx_time: Instant
    carrier: Carrier

    def __post_init__(self):
        if not 0 <= self.frame <= 1023:
            raise ValueError(f"frame {self.frame} outside [0, 1023]")
        if not 0 <= self.subframe <= 9:
            raise ValueError(f"subframe {self.subframe} outside [0, 9]")

    @property
    def index(self) -> int:
        """Position within the 10240-subframe numbering period."""
        return self.frame * 10 + self.subframe


@dataclass(frozen=True)
class Measurement:
    subframe: SubframeStamp
    toa: Instant
    t_n: Instant
    d_ta: Span
    sum_delay: Span


@dataclass(frozen=True)
class ProbeEvent:
    """One received item: a stamp plus whatever was decodable.

    ``message`` is None for uplink data bursts the probe cannot decode but
    can still time. ``rb_alloc`` carries the allocation an uplink burst
    rode on; ``rnti`` the addressee of downlink control (or the inferred
    sender of an uplink Ack).
    """

    stamp: SubframeStamp
    message: Optional[Message] = None
    rb_alloc: Optional[int] = None
    rnti: Optional[Rnti] = None


def align_carriers(dl: list[SubframeStamp], ul: list[SubframeStamp]) -> Span:
    """Uplink clock correction from stamps of matching (frame, subframe).

    Returns the offset to add to uplink rx times so that they land on the
    downlink timebase; the median over all matches, so a few polluted
    stamps do not bend the result.
    """
    if not dl or not ul:
        raise ValueError("need stamps on both carriers")
    dl_times = {(s.frame, s.subframe): s.rx_time for s in dl}
    diffs = sorted(dl_times[(s.frame, s.subframe)] - s.rx_time
                   for s in ul if (s.frame, s.subframe) in dl_times)
    if not diffs:
        raise ValueError("no overlapping subframe indices between carriers")
    return diffs[len(diffs) // 2]


def can_decode(misalignment_ps: Span, gate_ps: int = DECODE_GATE_PS) -> bool:
    """Whether a carrier with this residual misalignment is decodable."""
    return abs(misalignment_ps) < gate_ps


def infer_t_n(dl_rx: Instant, d_dlprobe: Span) -> Instant:
    """Subframe transmission instant from its downlink arrival time.

    The downlink propagation delay to the probe is known (surveyed probe
    and eNodeB positions), so t_n = dl_rx - d_dlprobe; later subframes
    follow at exact 1 ms steps.
    """
    if d_dlprobe < 0:
        raise ValueError("downlink probe delay must be >= 0")
    return dl_rx - d_dlprobe


@dataclass
class PendingGrant:
    rnti: Rnti
    rb_alloc: int
    issued_index: int
    due_index: int


@dataclass
class _PendingTa:
    adjust: int
    issued_index: int


@dataclass
class ConnectionRecord:
    rnti: Rnti
    tmsi: Optional[Tmsi] = None
    tmsi_is_random: bool = False
    ta_current: TaIndex = 0
    ta_history: list[tuple[Instant, TaIndex]] = field(default_factory=list)
    pending_grants: list[PendingGrant] = field(default_factory=list)
    measurements: list[Measurement] = field(default_factory=list)
    capabilities: Optional[CapabilityVector] = None
    observed_imsi: Optional[str] = None
    had_service_request: bool = False
    state: str = "active"
    _pending_tas: list[_PendingTa] = field(default_factory=list)


class ConnectionTable:
    """Single-writer per-probe state; a pure function of the event stream."""

    def __init__(self, d_dlprobe_ps: Span = 0, ul_offset_ps: Span = 0,
                 ack_gating: bool = True):
        self.d_dlprobe_ps = d_dlprobe_ps
        self.ul_offset_ps = ul_offset_ps
        self.ack_gating = ack_gating
        self.records: list[ConnectionRecord] = []
        self.by_rnti: dict[int, ConnectionRecord] = {}
        self.dropped_uplinks = 0
        self._cursor: Optional[tuple[int, int]] = None  # (raw idx, abs idx)
        self._tn_anchor: Optional[tuple[int, Instant]] = None

    # -- bookkeeping ---------------------------------------------------------

    def _advance(self, stamp: SubframeStamp) -> int:
        """Unwrapped subframe counter; tolerates slight cross-carrier skew."""
        raw = stamp.index
        if self._cursor is None:
            self._cursor = (raw, raw)
            return raw
        prev_raw, prev_abs = self._cursor
        delta = (raw - prev_raw) % SUBFRAME_PERIOD
        if delta >= SUBFRAME_PERIOD - 64:
            delta -= SUBFRAME_PERIOD  # a stamp arriving marginally late
        abs_idx = prev_abs + delta
        if delta >= 0:
            self._cursor = (raw, abs_idx)
        return abs_idx

    def _expire(self, now_idx: int) -> None:
        for rec in self.by_rnti.values():
            rec.pending_grants = [
                g for g in rec.pending_grants
                if now_idx - g.issued_index <= EXPIRY_SUBFRAMES]
            rec._pending_tas = [
                p for p in rec._pending_tas
                if now_idx - p.issued_index <= EXPIRY_SUBFRAMES]

    def _t_n_at(self, abs_idx: int) -> Optional[Instant]:
        if self._tn_anchor is None:
            return None
        anchor_idx, anchor_tn = self._tn_anchor
        return anchor_tn + (abs_idx - anchor_idx) * PS_PER_SUBFRAME

    # -- ingestion -------------------------------------------------------------

    def ingest(self, event: ProbeEvent) -> list[Measurement]:
        """Feed one event; returns measurements it produced (0 or 1)."""
        stamp = event.stamp
        abs_idx = self._advance(stamp)
        self._expire(abs_idx)
        if stamp.carrier is Carrier.DOWNLINK:
            self._ingest_downlink(event, abs_idx)
            return []
        return self._ingest_uplink(event, abs_idx)

    def _ingest_downlink(self, event: ProbeEvent, abs_idx: int) -> None:
        self._tn_anchor = (abs_idx,
                           infer_t_n(event.stamp.rx_time, self.d_dlprobe_ps))
        msg = event.message
        if isinstance(msg, RandomAccessResponse):
            rnti = rnti_of_rar(msg)
            old = self.by_rnti.get(rnti.value)
            if old is not None:
                old.state = "halted"  # RNTI reused while record still live
            rec = ConnectionRecord(rnti=rnti, ta_current=msg.ta)
            rec.ta_history.append((event.stamp.rx_time, msg.ta))
            rec.pending_grants.append(PendingGrant(
                rnti, msg.grant.rb_alloc, abs_idx,
                abs_idx + msg.grant.subframe_offset))
            self.records.append(rec)
            self.by_rnti[rnti.value] = rec
        elif isinstance(msg, DciFormat0):
            rec = self.by_rnti.get(msg.rnti.value)
            if rec is not None and rec.state == "active":
                rec.pending_grants.append(PendingGrant(
                    msg.rnti, msg.rb_alloc, abs_idx,
                    abs_idx + msg.subframe_offset))
        elif isinstance(msg, MacTaCommand):
            rnti = event.rnti
            rec = self.by_rnti.get(rnti.value) if rnti else None
            if rec is not None and rec.state == "active":
                if self.ack_gating:
                    rec._pending_tas.append(_PendingTa(msg.adjust, abs_idx))
                else:
                    self._apply_ta(rec, msg.adjust, event.stamp.rx_time)

    def _apply_ta(self, rec: ConnectionRecord, adjust: int,
                  t: Instant) -> None:
        rec.ta_current = max(0, min(rec.ta_current + adjust, 1282))
        rec.ta_history.append((t, rec.ta_current))

    def _ingest_uplink(self, event: ProbeEvent,
                       abs_idx: int) -> list[Measurement]:
        msg = event.message
        if isinstance(msg, Ack):
            rec = self.by_rnti.get(event.rnti.value) if event.rnti else None
            if rec is not None and rec._pending_tas:
                pending = rec._pending_tas.pop(0)
                self._apply_ta(rec, pending.adjust, event.stamp.rx_time)
            return []

        rec = self._match_grant(event.rb_alloc)
        if rec is None:
            self.dropped_uplinks += 1
            return []
        self._note_uplink_content(rec, msg)

        t_n = self._t_n_at(abs_idx)
        if t_n is None:
            self.dropped_uplinks += 1
            return []
        toa = event.stamp.rx_time + self.ul_offset_ps
        d_ta = ta_span(rec.ta_current)
        meas = Measurement(subframe=event.stamp, toa=toa, t_n=t_n,
                           d_ta=d_ta, sum_delay=toa - t_n + d_ta)
        rec.measurements.append(meas)
        return [meas]

    def _match_grant(self, rb_alloc: Optional[int]
                     ) -> Optional[ConnectionRecord]:
        if rb_alloc is None:
            return None
        for rec in self.by_rnti.values():
            if rec.state != "active":
                continue
            for grant in rec.pending_grants:
                if grant.rb_alloc == rb_alloc:
                    rec.pending_grants.remove(grant)
                    return rec
        return None

    @staticmethod
    def _note_uplink_content(rec: ConnectionRecord,
                             msg: Optional[Message]) -> None:
        if isinstance(msg, RrcConnectionRequest):
            rec.tmsi = msg.tmsi
            rec.tmsi_is_random = msg.is_random
        elif isinstance(msg, ServiceRequest):
            rec.tmsi = msg.tmsi
            rec.had_service_request = True
        elif isinstance(msg, AttachRequest):
            rec.capabilities = msg.capabilities
            if isinstance(msg.id, Imsi):
                rec.observed_imsi = msg.id.digits
            elif isinstance(msg.id, Tmsi):
                rec.tmsi = msg.id
        elif isinstance(msg, IdentityResponse):
            rec.observed_imsi = msg.imsi.digits

    # -- output ----------------------------------------------------------------

    def close_all(self) -> None:
        for rec in self.records:
            if rec.state == "active":
                rec.state = "closed"

    def measurement_rows(self, imsi_by_tmsi: Optional[dict[int, str]] = None
                         ) -> Iterator[dict]:
        """Flat per-measurement dicts in the measurement CSV column order."""
        for rec in self.records:
            tmsi = rec.tmsi.value if rec.tmsi else None
            imsi = rec.observed_imsi
            if imsi is None and imsi_by_tmsi and tmsi is not None:
                imsi = imsi_by_tmsi.get(tmsi)
            for meas in rec.measurements:
                yield {
                    "imsi": imsi or "",
                    "tmsi": tmsi if tmsi is not None else "",
                    "rnti": rec.rnti.value,
                    "frame": meas.subframe.frame,
                    "subframe": meas.subframe.subframe,
                    "toa_ps": meas.toa,
                    "tn_ps": meas.t_n,
                    "dta_ps": meas.d_ta,
                    "sum_ps": meas.sum_delay,
                }
