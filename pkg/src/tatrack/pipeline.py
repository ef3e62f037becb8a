"""Batch stage runner: scenario in, measurement/position/track artifacts out.

Stages chain as simulate -> probe -> localize -> track -> stats, with
extract branching off simulate and feeding track. Stage products accumulate
on a RunContext so later stages and the file writers share one source of
truth. All file output uses stable ordering and plain string formatting, so
a rerun with the same scenario and seed is byte-identical.

Localization geometry assumes each connection belongs to the first eNodeB
in the scenario; the shipped scenarios are single-cell. Cross-cell handover
linkage remains available at the tracker level for summaries built
elsewhere.
"""

import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import sim
from .fingerprint import (FingerprintDb, HwErrorUnavailable, classify,
                          hw_error)
from .geometry import (ConvergenceError, InfeasibleSumError, Position,
                       PositionEstimate, annulus_from_ta, ellipse_from_sum,
                       multilaterate, multilaterate_with_offset)
from .messages import CapabilityVector, encode
from .probe import Carrier, ConnectionTable
from .timebase import m_to_ps, ps_to_m, ta_span
from .tracker import (ConnectionSummary, TracePoint, TrackDb,
                      connection_stats, corrected_loci, stats_csv_rows,
                      trace_csv_rows)

STAGES = ("simulate", "probe", "extract", "localize", "track", "stats")

_DEPS = {
    "simulate": (),
    "probe": ("simulate",),
    "extract": ("simulate",),
    "localize": ("probe",),
    "track": ("localize", "extract"),
    "stats": ("track",),
}

#: Gaussian interquartile range in units of sigma.
_IQR_PER_SIGMA = 1.349

GROUP_CHOICES = ("imsi", "model", "connection")


class StageError(ValueError):
    """Requested stages are unknown or missing a prerequisite."""


def check_stages(stages) -> tuple:
    """Validate a stage selection and return it in canonical order."""
    chosen = list(stages)
    unknown = sorted(set(chosen) - set(STAGES))
    if unknown:
        raise StageError(f"unknown stage(s): {', '.join(unknown)}")
    for stage in chosen:
        missing = sorted(set(_DEPS[stage]) - set(chosen))
        if missing:
            raise StageError(
                f"stage {stage!r} requires {', '.join(missing)}")
    return tuple(s for s in STAGES if s in chosen)


@dataclass
class ProbeLeg:
    """One probe's view of one connection."""

    probe_id: str
    record: object
    sums: list
    stats: object = None  # connection_stats over sums, in picoseconds


@dataclass
class ConnectionView:
    """One physical connection merged across every probe that heard it."""

    key: str
    rnti: int
    start_ps: int
    end_ps: int
    cell_id: int
    tmsi: Optional[int]
    tmsi_is_random: bool
    observed_imsi: Optional[str]
    capabilities: Optional[CapabilityVector]
    had_service_request: bool
    legs: dict
    ta_index: Optional[int]
    loci: tuple = ()
    estimate: Optional[PositionEstimate] = None
    offset_m: Optional[float] = None
    model_hat: Optional[str] = None
    hw_bias_m: Optional[float] = None


@dataclass
class RunContext:
    scenario: sim.Scenario
    db: FingerprintDb
    group_by: str = "imsi"
    ack_gating: bool = True
    result: Optional[sim.SimResult] = None
    tables: dict = field(default_factory=dict)
    extraction_entries: list = field(default_factory=list)
    views: list = field(default_factory=list)
    track_db: Optional[TrackDb] = None
    linked: dict = field(default_factory=dict)
    stats_rows: list = field(default_factory=list)
    error_rows: list = field(default_factory=list)
    summary_rows: list = field(default_factory=list)


# -- stages ---------------------------------------------------------------


def stage_simulate(ctx: RunContext) -> None:
    ctx.result = sim.run(ctx.scenario, ctx.db)


def stage_probe(ctx: RunContext) -> None:
    enb = ctx.scenario.enbs[0]
    for probe in ctx.scenario.probes:
        d_dl = m_to_ps(probe.position.distance_to(enb.position))
        table = ConnectionTable(d_dlprobe_ps=d_dl,
                                ack_gating=ctx.ack_gating)
        for event in ctx.result.events[probe.id]:
            table.ingest(event)
        table.close_all()
        ctx.tables[probe.id] = table


def stage_extract(ctx: RunContext) -> None:
    ctx.extraction_entries = [json.loads(line)
                              for line in ctx.result.extraction.dump_lines()]


def _ta_index(d_ta_values) -> Optional[int]:
    if not d_ta_values:
        return None
    span = statistics.median_low(d_ta_values)
    return round(span * 3 / 1562500)


def stage_localize(ctx: RunContext) -> None:
    enb = ctx.scenario.enbs[0]
    probe_pos = {p.id: p.position for p in ctx.scenario.probes}
    d_dl = {p.id: m_to_ps(p.position.distance_to(enb.position))
            for p in ctx.scenario.probes}

    groups: dict = {}
    for probe_id in sorted(ctx.tables):
        for record in ctx.tables[probe_id].records:
            if not record.ta_history:
                continue
            rar_rx, _ = record.ta_history[0]
            start_ps = rar_rx - d_dl[probe_id]
            leg = ProbeLeg(probe_id=probe_id, record=record,
                           sums=[m.sum_delay for m in record.measurements])
            leg.stats = connection_stats(leg.sums)
            groups.setdefault((start_ps, record.rnti.value), []).append(leg)

    bias_by_tmsi: dict = {}
    for (start_ps, rnti), legs in sorted(groups.items()):
        view = _merge_legs(start_ps, rnti, legs)
        _classify_view(view, ctx.db)
        stable_tmsi = view.tmsi is not None and not view.tmsi_is_random
        if view.hw_bias_m is not None:
            if stable_tmsi:
                bias_by_tmsi[view.tmsi] = (view.model_hat, view.hw_bias_m)
        elif stable_tmsi and view.tmsi in bias_by_tmsi:
            # No capability vector this time; reuse the model this TMSI
            # showed in an earlier connection.
            view.model_hat, view.hw_bias_m = bias_by_tmsi[view.tmsi]
        _solve_view(ctx, view, enb.position, probe_pos)
        ctx.views.append(view)


def _merge_legs(start_ps: int, rnti: int, legs) -> ConnectionView:
    tmsi = None
    tmsi_is_random = False
    observed_imsi = None
    capabilities = None
    had_service = False
    end_ps = start_ps
    d_ta_values = []
    for leg in legs:
        rec = leg.record
        if rec.tmsi is not None and tmsi is None:
            tmsi = rec.tmsi.value
            tmsi_is_random = rec.tmsi_is_random
        if rec.observed_imsi is not None:
            observed_imsi = rec.observed_imsi
        if rec.capabilities is not None:
            capabilities = rec.capabilities
        had_service = had_service or rec.had_service_request
        for meas in rec.measurements:
            end_ps = max(end_ps, meas.t_n)
            d_ta_values.append(meas.d_ta)
    return ConnectionView(
        key=f"0-{rnti:#06x}-{start_ps}", rnti=rnti, start_ps=start_ps,
        end_ps=end_ps, cell_id=0, tmsi=tmsi, tmsi_is_random=tmsi_is_random,
        observed_imsi=observed_imsi, capabilities=capabilities,
        had_service_request=had_service,
        legs={leg.probe_id: leg for leg in legs},
        ta_index=_ta_index(d_ta_values))


def _solve_view(ctx: RunContext, view: ConnectionView, enb_pos: Position,
                probe_pos: dict) -> None:
    """Build loci and solve, correcting sums when the model is known.

    Connections that carried no capability vector stay uncorrected here;
    the tracker re-corrects their loci once the linked identity gains a
    fingerprint from another connection.
    """
    corr_ps = (m_to_ps(2 * view.hw_bias_m)
               if view.hw_bias_m is not None else 0)
    loci = []
    n_ellipses = 0
    for probe_id in sorted(view.legs):
        leg = view.legs[probe_id]
        if leg.stats is None:
            continue
        kept = leg.stats.n_measurements - leg.stats.n_outliers_removed
        sigma_sum_ps = leg.stats.iqr_m / _IQR_PER_SIGMA
        sigma_median_ps = 1.2533 * sigma_sum_ps / max(1.0, kept) ** 0.5
        try:
            loci.append(ellipse_from_sum(
                enb_pos, probe_pos[probe_id],
                round(leg.stats.median_distance_m - corr_ps),
                sigma=ps_to_m(sigma_median_ps)))
            n_ellipses += 1
        except InfeasibleSumError:
            continue
    if view.ta_index is not None:
        annulus = annulus_from_ta(enb_pos, view.ta_index)
        if corr_ps:
            annulus = corrected_loci((annulus,), view.hw_bias_m)[0]
        loci.append(annulus)
    view.loci = tuple(loci)
    if not loci:
        return
    countered = ctx.scenario.countermeasure.mode == "random_offset"
    try:
        if countered and n_ellipses >= 3:
            view.estimate, offset = multilaterate_with_offset(loci)
            view.offset_m = offset
        else:
            view.estimate = multilaterate(loci)
    except ConvergenceError:
        view.estimate = None


def stage_track(ctx: RunContext) -> None:
    db = TrackDb()
    for view in ctx.views:
        points = ()
        if view.estimate is not None:
            points = (TracePoint(t_ps=view.start_ps, estimate=view.estimate,
                                 loci=view.loci,
                                 corrected=view.hw_bias_m is not None),)
        first_leg = view.legs[sorted(view.legs)[0]]
        summary = ConnectionSummary(
            conn_id=view.key, cell_id=view.cell_id, rnti=view.rnti,
            start_ps=view.start_ps, end_ps=view.end_ps, tmsi=view.tmsi,
            tmsi_is_random=view.tmsi_is_random,
            had_service_request=view.had_service_request,
            observed_imsi=view.observed_imsi,
            distances_m=tuple(ps_to_m(s) / 2 for s in first_leg.sums),
            points=points)
        linked = db.ingest(summary, ctx.extraction_entries)
        ctx.linked[view.key] = linked
        if view.model_hat is not None and view.hw_bias_m is not None:
            db.set_fingerprint(linked, view.model_hat, view.hw_bias_m)
    ctx.track_db = db


def _classify_view(view: ConnectionView, db: FingerprintDb) -> None:
    if view.capabilities is None:
        return
    result = classify(view.capabilities, db)
    if result.tie:
        return
    view.model_hat = result.model
    try:
        view.hw_bias_m = hw_error(result.model, db)
    except HwErrorUnavailable:
        view.hw_bias_m = None


def stage_stats(ctx: RunContext) -> None:
    truth = {(row.probe_id, row.t_n_ps): row
             for row in ctx.result.ground_truth}
    for view in ctx.views:
        for probe_id in sorted(view.legs):
            leg = view.legs[probe_id]
            if leg.stats is None:
                continue
            rows = [truth.get((probe_id, m.t_n))
                    for m in leg.record.measurements]
            rows = [r for r in rows if r is not None]
            if not rows:
                continue
            true_sum = statistics.median(r.sum_true_ps for r in rows)
            err_raw_ps = leg.stats.median_distance_m - true_sum
            corr_ps = (m_to_ps(2 * view.hw_bias_m)
                       if view.hw_bias_m is not None else 0)
            err_corr_ps = err_raw_ps - corr_ps
            ctx.stats_rows.append({
                "conn": view.key,
                "sim_conn": rows[0].conn_id,
                "probe": probe_id,
                "imsi": rows[0].imsi,
                "model": rows[0].model,
                "model_hat": view.model_hat or "",
                "n_meas": leg.stats.n_measurements,
                "n_removed": leg.stats.n_outliers_removed,
                "median_sum_ps": leg.stats.median_distance_m,
                "true_sum_ps": true_sum,
                "err_raw_m": ps_to_m(err_raw_ps) / 2,
                "err_corr_m": ps_to_m(err_corr_ps) / 2,
            })
    for row in ctx.stats_rows:
        ctx.error_rows.append({
            "conn": row["conn"],
            "imsi": row["imsi"],
            "model": row["model"],
            "error_m": abs(row["err_corr_m"]),
        })
    ctx.summary_rows = _summarize(ctx.stats_rows, ctx.group_by)


def _group_key(row: dict, group_by: str) -> str:
    if group_by == "imsi":
        return row["imsi"]
    if group_by == "model":
        return row["model"]
    return row["sim_conn"]


def _summarize(stats_rows, group_by: str) -> list:
    if group_by not in GROUP_CHOICES:
        raise StageError(f"unknown group-by {group_by!r}")
    groups: dict = {}
    for row in stats_rows:
        groups.setdefault(_group_key(row, group_by), []).append(
            abs(row["err_corr_m"]))
    out = []
    for key in sorted(groups):
        errs = np.asarray(groups[key])
        out.append({
            "group": key,
            "n_connections": len(errs),
            "median_m": float(np.median(errs)),
            "p90_m": float(np.percentile(errs, 90.0)),
        })
    return out


def run_pipeline(scenario: sim.Scenario, stages=STAGES, *,
                 db: Optional[FingerprintDb] = None, out_dir=None,
                 group_by: str = "imsi", ack_gating: bool = True
                 ) -> RunContext:
    """Run the requested stages and optionally write their artifacts."""
    ordered = check_stages(stages)
    if group_by not in GROUP_CHOICES:
        raise StageError(f"unknown group-by {group_by!r}")
    ctx = RunContext(scenario=scenario, db=db or FingerprintDb.default(),
                     group_by=group_by, ack_gating=ack_gating)
    runners = {
        "simulate": stage_simulate,
        "probe": stage_probe,
        "extract": stage_extract,
        "localize": stage_localize,
        "track": stage_track,
        "stats": stage_stats,
    }
    for stage in ordered:
        runners[stage](ctx)
    if out_dir is not None:
        write_artifacts(ctx, out_dir, ordered)
    return ctx


# -- artifact writers ------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, columns, rows) -> None:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in columns))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _event_to_json(event) -> dict:
    message_hex = None
    if event.message is not None:
        message_hex = encode(event.message).hex()
    return {
        "frame": event.stamp.frame,
        "subframe": event.stamp.subframe,
        "rx_ps": event.stamp.rx_time,
        "carrier": ("downlink" if event.stamp.carrier is Carrier.DOWNLINK
                    else "uplink"),
        "rnti": event.rnti.value if event.rnti is not None else None,
        "rb_alloc": event.rb_alloc,
        "message_hex": message_hex,
    }


_GT_COLUMNS = ("conn_id", "ue_index", "model", "imsi", "probe_id",
               "abs_subframe", "t_n_ps", "x_m", "y_m", "d_ue_ps",
               "d_probe_ps", "sum_true_ps", "tx_extra_ps", "ta_ue")

_MEAS_COLUMNS = ("imsi", "tmsi", "rnti", "frame", "subframe", "toa_ps",
                 "tn_ps", "dta_ps", "sum_ps")

_POSITION_COLUMNS = ("conn", "rnti", "start_ps", "tmsi", "imsi_observed",
                     "ta_index", "n_loci", "x_m", "y_m", "residual_rms_m",
                     "offset_m")

_STATS_COLUMNS = ("conn", "sim_conn", "probe", "imsi", "model", "model_hat",
                  "n_meas", "n_removed", "median_sum_ps", "true_sum_ps",
                  "err_raw_m", "err_corr_m")

_ERROR_COLUMNS = ("conn", "imsi", "model", "error_m")

_SUMMARY_COLUMNS = ("group", "n_connections", "median_m", "p90_m")

_CONN_STATS_COLUMNS = ("conn_id", "linked", "median_distance_m",
                       "n_measurements", "n_outliers_removed", "iqr_m")

_TRACE_COLUMNS = ("imsi", "t_ps", "x_m", "y_m", "residual_rms_m",
                  "corrected")


def write_artifacts(ctx: RunContext, out_dir, stages) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if "simulate" in stages:
        for probe_id in sorted(ctx.result.events):
            lines = [json.dumps(_event_to_json(e), sort_keys=True)
                     for e in ctx.result.events[probe_id]]
            (out / f"events_{probe_id}.jsonl").write_text(
                "\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
        _write_csv(out / "ground_truth.csv", _GT_COLUMNS,
                   [{c: getattr(r, c) for c in _GT_COLUMNS}
                    for r in ctx.result.ground_truth])
    if "probe" in stages:
        pairs = ctx.result.attacker_pairs if "extract" in stages else None
        for probe_id in sorted(ctx.tables):
            rows = ctx.tables[probe_id].measurement_rows(pairs)
            _write_csv(out / f"measurements_{probe_id}.csv", _MEAS_COLUMNS,
                       rows)
    if "extract" in stages:
        ctx.result.extraction.dump(out / "extraction.jsonl")
        (out / "extracted_pairs.json").write_text(
            json.dumps({str(t): i for t, i in
                        sorted(ctx.result.attacker_pairs.items())},
                       sort_keys=True, indent=2) + "\n", encoding="utf-8")
    if "localize" in stages:
        rows = []
        for view in ctx.views:
            est = view.estimate
            rows.append({
                "conn": view.key, "rnti": view.rnti,
                "start_ps": view.start_ps, "tmsi": view.tmsi,
                "imsi_observed": view.observed_imsi or "",
                "ta_index": view.ta_index, "n_loci": len(view.loci),
                "x_m": est.position.x if est else None,
                "y_m": est.position.y if est else None,
                "residual_rms_m": est.residual_rms if est else None,
                "offset_m": view.offset_m,
            })
        _write_csv(out / "positions.csv", _POSITION_COLUMNS, rows)
    if "track" in stages:
        ctx.track_db.dump_journal(out / "trackdb.jsonl")
        trace_rows = []
        for identity in sorted(ctx.track_db.traces):
            trace_rows.extend(trace_csv_rows(ctx.track_db, identity))
        _write_csv(out / "traces.csv", _TRACE_COLUMNS, trace_rows)
        _write_csv(out / "connection_stats.csv", _CONN_STATS_COLUMNS,
                   stats_csv_rows(ctx.track_db))
    if "stats" in stages:
        _write_csv(out / "stats.csv", _STATS_COLUMNS, ctx.stats_rows)
        _write_csv(out / "errors.csv", _ERROR_COLUMNS, ctx.error_rows)
        _write_csv(out / "summary.csv", _SUMMARY_COLUMNS, ctx.summary_rows)


# -- empirical distribution helpers ----------------------------------------


def empirical_cdf(values) -> list:
    """Sorted (value, cumulative fraction) pairs over the sample."""
    ordered = sorted(values)
    n = len(ordered)
    if n == 0:
        raise ValueError("empty sample")
    return [(v, (i + 1) / n) for i, v in enumerate(ordered)]
