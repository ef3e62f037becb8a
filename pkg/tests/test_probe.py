"""Scripted sniffer traces checked against exact ground-truth timing."""

import pytest

from tatrack import timebase as tb
from tatrack.messages import (Ack, DciFormat0, MacTaCommand,
                              RandomAccessResponse, Rnti, RrcConnectionRequest,
                              ServiceRequest, Tmsi, UlGrant)
from tatrack.probe import (Carrier, ConnectionTable, ProbeEvent, SubframeStamp,
                           align_carriers, can_decode, infer_t_n)

RNTI = Rnti(0x004A)


def _stamp(idx, rx, carrier):
    return SubframeStamp(frame=(idx // 10) % 1024, subframe=idx % 10,
                         rx_time=rx, carrier=carrier)


def dl(idx, rx, msg=None, rnti=None):
    return ProbeEvent(_stamp(idx, rx, Carrier.DOWNLINK), msg, rnti=rnti)


def ul(idx, rx, msg=None, rb=None, rnti=None):
    return ProbeEvent(_stamp(idx, rx, Carrier.UPLINK), msg, rb_alloc=rb,
                      rnti=rnti)


# -- alignment ----------------------------------------------------------------

def test_align_identical_stamps_zero_offset():
    stamps = [_stamp(i, i * 10**9, Carrier.DOWNLINK) for i in range(5)]
    shifted = [_stamp(i, i * 10**9, Carrier.UPLINK) for i in range(5)]
    assert align_carriers(stamps, shifted) == 0


def test_align_uniform_shift():
    dl_stamps = [_stamp(i, i * 10**9, Carrier.DOWNLINK) for i in range(8)]
    ul_stamps = [_stamp(i, i * 10**9 + 3_000_000, Carrier.UPLINK)
                 for i in range(8)]
    assert align_carriers(dl_stamps, ul_stamps) == -3_000_000


def test_align_requires_overlap():
    a = [_stamp(1, 10**9, Carrier.DOWNLINK)]
    b = [_stamp(500, 5 * 10**9, Carrier.UPLINK)]
    with pytest.raises(ValueError):
        align_carriers(a, b)


def test_decode_gate_composes_with_alignment():
    dl_stamps = [_stamp(i, i * 10**9, Carrier.DOWNLINK) for i in range(8)]
    ul_stamps = [_stamp(i, i * 10**9 + 5_000_000, Carrier.UPLINK)
                 for i in range(8)]
    raw_misalignment = 5_000_000
    assert not can_decode(raw_misalignment)
    offset = align_carriers(dl_stamps, ul_stamps)
    assert can_decode(raw_misalignment + offset)


# -- t_n recovery --------------------------------------------------------------

def test_infer_t_n_values():
    assert infer_t_n(10_000_000, 0) == 10_000_000
    assert infer_t_n(10_000_000, 1_000_000) == 9_000_000
    with pytest.raises(ValueError):
        infer_t_n(10_000_000, -1)


def test_t_n_chains_in_exact_milliseconds():
    table = ConnectionTable()
    table.ingest(dl(10, 10 * 10**9))
    assert table._t_n_at(13) == 13 * 10**9


# -- scripted connection -------------------------------------------------------

D_UE = tb.m_to_ps(500.0)  # colocated eNodeB and probe, UE at 500 m
TA0 = tb.quantize_ta(2 * D_UE)


def _uplink_rx(idx, ta):
    return tb.uplink_toa(tb.subframe_start(idx), D_UE, D_UE, ta)


def test_full_flow_emits_exact_measurement():
    table = ConnectionTable()
    rar = RandomAccessResponse(RNTI, TA0, UlGrant(4, 0x10, 3))
    table.ingest(dl(10, 10 * 10**9, rar))
    out = table.ingest(ul(14, _uplink_rx(14, TA0),
                          RrcConnectionRequest(Tmsi(0xAABBCCDD), 0),
                          rb=0x10))
    assert len(out) == 1
    meas = out[0]
    assert meas.t_n == 14 * 10**9
    assert meas.d_ta == tb.ta_span(TA0)
    assert meas.sum_delay == 2 * D_UE  # exact, quantization cancelled
    assert meas.sum_delay == meas.toa - meas.t_n + meas.d_ta

    rec = table.by_rnti[RNTI.value]
    assert rec.tmsi == Tmsi(0xAABBCCDD)
    assert rec.ta_current == TA0


def test_service_request_noted_on_record():
    table = ConnectionTable()
    table.ingest(dl(10, 10 * 10**9,
                    RandomAccessResponse(RNTI, TA0, UlGrant(4, 0x10, 3))))
    assert not table.by_rnti[RNTI.value].had_service_request
    table.ingest(ul(14, _uplink_rx(14, TA0), ServiceRequest(Tmsi(0xAABBCCDD)),
                    rb=0x10))
    rec = table.by_rnti[RNTI.value]
    assert rec.had_service_request
    assert rec.tmsi == Tmsi(0xAABBCCDD)


def test_dci0_grant_then_data_burst_measured():
    table = ConnectionTable()
    table.ingest(dl(10, 10 * 10**9,
                    RandomAccessResponse(RNTI, TA0, UlGrant(4, 0x10, 3))))
    table.ingest(ul(14, _uplink_rx(14, TA0), rb=0x10))
    table.ingest(dl(20, 20 * 10**9, DciFormat0(RNTI, 4, 0x20, 5)))
    out = table.ingest(ul(24, _uplink_rx(24, TA0), rb=0x20))
    assert len(out) == 1
    assert out[0].sum_delay == 2 * D_UE


def test_unmatched_uplink_counted_and_dropped():
    table = ConnectionTable()
    table.ingest(dl(10, 10 * 10**9,
                    RandomAccessResponse(RNTI, TA0, UlGrant(4, 0x10, 3))))
    out = table.ingest(ul(14, _uplink_rx(14, TA0), rb=0x99))
    assert out == []
    assert table.dropped_uplinks == 1
    assert table.by_rnti[RNTI.value].measurements == []


def test_grants_expire_after_eight_subframes():
    table = ConnectionTable()
    table.ingest(dl(10, 10 * 10**9,
                    RandomAccessResponse(RNTI, TA0, UlGrant(4, 0x10, 3))))
    table.ingest(dl(19, 19 * 10**9))  # activity, inside expiry window
    table.ingest(dl(20, 20 * 10**9))  # grant now 10 subframes old
    out = table.ingest(ul(21, _uplink_rx(21, TA0), rb=0x10))
    assert out == []
    assert table.dropped_uplinks == 1


def test_ack_gated_resend_applied_once():
    table = ConnectionTable(ack_gating=True)
    table.ingest(dl(10, 10 * 10**9,
                    RandomAccessResponse(RNTI, TA0, UlGrant(4, 0x10, 3))))
    table.ingest(dl(30, 30 * 10**9, MacTaCommand(1), rnti=RNTI))
    table.ingest(dl(32, 32 * 10**9, MacTaCommand(1), rnti=RNTI))  # resend
    rec = table.by_rnti[RNTI.value]
    assert rec.ta_current == TA0  # nothing acknowledged yet
    table.ingest(ul(33, _uplink_rx(33, TA0), Ack(0), rnti=RNTI))
    assert rec.ta_current == TA0 + 1
    # The duplicate expires unacknowledged instead of double-applying.
    table.ingest(dl(45, 45 * 10**9))
    assert rec._pending_tas == []
    assert rec.ta_current == TA0 + 1
    assert [ta for _, ta in rec.ta_history] == [TA0, TA0 + 1]


def test_ungated_resend_double_applies():
    table = ConnectionTable(ack_gating=False)
    table.ingest(dl(10, 10 * 10**9,
                    RandomAccessResponse(RNTI, TA0, UlGrant(4, 0x10, 3))))
    table.ingest(dl(30, 30 * 10**9, MacTaCommand(1), rnti=RNTI))
    table.ingest(dl(32, 32 * 10**9, MacTaCommand(1), rnti=RNTI))
    assert table.by_rnti[RNTI.value].ta_current == TA0 + 2


def test_ta_current_is_initial_plus_acked_adjustments():
    table = ConnectionTable()
    table.ingest(dl(10, 10 * 10**9,
                    RandomAccessResponse(RNTI, TA0, UlGrant(4, 0x10, 3))))
    applied = []
    idx = 20
    for adjust in (2, -1, 3, -2):
        table.ingest(dl(idx, idx * 10**9, MacTaCommand(adjust), rnti=RNTI))
        table.ingest(ul(idx + 1, _uplink_rx(idx + 1, TA0), Ack(0), rnti=RNTI))
        applied.append(adjust)
        idx += 4
    assert table.by_rnti[RNTI.value].ta_current == TA0 + sum(applied)


def test_rnti_reuse_halts_old_record():
    table = ConnectionTable()
    table.ingest(dl(10, 10 * 10**9,
                    RandomAccessResponse(RNTI, TA0, UlGrant(4, 0x10, 3))))
    table.ingest(dl(500, 500 * 10**9,
                    RandomAccessResponse(RNTI, 3, UlGrant(4, 0x11, 3))))
    assert len(table.records) == 2
    assert table.records[0].state == "halted"
    assert table.by_rnti[RNTI.value] is table.records[1]


def test_subframe_wraparound_keeps_timeline():
    table = ConnectionTable()
    base = 10_239
    table.ingest(dl(base, base * 10**9,
                    RandomAccessResponse(RNTI, TA0, UlGrant(4, 0x10, 3))))
    out = table.ingest(ul(base + 4, _uplink_rx(base + 4, TA0), rb=0x10))
    assert len(out) == 1
    assert out[0].t_n == (base + 4) * 10**9
    assert out[0].sum_delay == 2 * D_UE


def test_measurement_rows_shape():
    table = ConnectionTable()
    table.ingest(dl(10, 10 * 10**9,
                    RandomAccessResponse(RNTI, TA0, UlGrant(4, 0x10, 3))))
    table.ingest(ul(14, _uplink_rx(14, TA0),
                    RrcConnectionRequest(Tmsi(0xAABBCCDD), 0), rb=0x10))
    rows = list(table.measurement_rows({0xAABBCCDD: "001010000000001"}))
    assert len(rows) == 1
    row = rows[0]
    assert row["imsi"] == "001010000000001"
    assert row["tmsi"] == 0xAABBCCDD
    assert row["rnti"] == RNTI.value
    assert row["sum_ps"] == 2 * D_UE
    assert set(row) == {"imsi", "tmsi", "rnti", "frame", "subframe",
                        "toa_ps", "tn_ps", "dta_ps", "sum_ps"}
