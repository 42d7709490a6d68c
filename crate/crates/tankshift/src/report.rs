//! Run output files: trajectory and metrics tables as CSV, sweep tables as
//! CSV, and a JSON diagnostics bundle with the solver audit trail.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! trajectory read back from disk is bit-identical to the one written.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::{EnergyAudit, MpcCallRecord, RunConfig, RunMetrics, RunResult, SweepOutcome, SweepRow, TrajectorySample};
use crate::param_id::IdSourcePoint;
use crate::units::m3_to_gallons;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad file format: {0}")]
    Format(String),
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn trajectory_header(n_nodes: usize) -> Vec<String> {
    let mut h = vec!["time_s".to_string()];
    h.extend((0..n_nodes).map(|i| format!("node_{i:02}")));
    h.extend((1..=8).map(|i| format!("sensor_{i}")));
    for name in ["p_lower_w", "p_upper_w", "flow_m3_per_s", "cum_volume_m3", "cum_cost_usd"] {
        h.push(name.to_string());
    }
    h
}

/// Writes the per-interval log: node temperatures bottom to top, the eight
/// sensor readings, element powers, draw flow and cumulative totals.
pub fn write_trajectory_csv<W: Write>(
    w: W,
    rows: &[TrajectorySample],
) -> Result<(), ReportError> {
    let n_nodes = rows.first().map_or(0, |r| r.nodes_k.len());
    let mut out = csv::Writer::from_writer(w);
    out.write_record(trajectory_header(n_nodes))?;
    for r in rows {
        if r.nodes_k.len() != n_nodes {
            return Err(ReportError::Format(format!(
                "row at t = {} s has {} nodes, expected {n_nodes}",
                r.time_s,
                r.nodes_k.len()
            )));
        }
        let mut rec = vec![fmt(r.time_s)];
        rec.extend(r.nodes_k.iter().copied().map(fmt));
        rec.extend(r.sensors_k.iter().copied().map(fmt));
        rec.push(fmt(r.p_lower_w));
        rec.push(fmt(r.p_upper_w));
        rec.push(fmt(r.flow_m3_per_s));
        rec.push(fmt(r.cum_volume_m3));
        rec.push(fmt(r.cum_cost_usd));
        out.write_record(rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a trajectory table written by [`write_trajectory_csv`].
pub fn read_trajectory_csv<R: Read>(r: R) -> Result<Vec<TrajectorySample>, ReportError> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let n_nodes = header.iter().filter(|c| c.starts_with("node_")).count();
    let expected = trajectory_header(n_nodes);
    if header != expected {
        return Err(ReportError::Format(format!(
            "unexpected trajectory header {header:?}"
        )));
    }
    let width = expected.len();
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        if record.len() != width {
            return Err(ReportError::Format(format!(
                "row {} has {} fields, expected {width}",
                rows.len() + 1,
                record.len()
            )));
        }
        let cell = |i: usize| -> Result<f64, ReportError> {
            record[i]
                .parse()
                .map_err(|_| ReportError::Format(format!("bad number {:?}", &record[i])))
        };
        let mut sensors_k = [0.0; 8];
        for (i, s) in sensors_k.iter_mut().enumerate() {
            *s = cell(1 + n_nodes + i)?;
        }
        let tail = 1 + n_nodes + 8;
        rows.push(TrajectorySample {
            time_s: cell(0)?,
            nodes_k: (0..n_nodes).map(|i| cell(1 + i)).collect::<Result<_, _>>()?,
            sensors_k,
            p_lower_w: cell(tail)?,
            p_upper_w: cell(tail + 1)?,
            flow_m3_per_s: cell(tail + 2)?,
            cum_volume_m3: cell(tail + 3)?,
            cum_cost_usd: cell(tail + 4)?,
        });
    }
    Ok(rows)
}

/// Adapts a trajectory log into identification source points.
pub fn trajectory_to_id_points(rows: &[TrajectorySample]) -> Vec<IdSourcePoint> {
    rows.iter()
        .map(|r| IdSourcePoint {
            time_s: r.time_s,
            sensors_k: r.sensors_k,
            p_lower_w: r.p_lower_w,
            p_upper_w: r.p_upper_w,
            flow_m3_per_s: r.flow_m3_per_s,
        })
        .collect()
}

const METRICS_COLUMNS: [&str; 18] = [
    "electrical_kwh",
    "embodied_kwh",
    "cost_usd",
    "cost_per_kwh_electric",
    "cost_per_kwh_drawn",
    "peak_kwh",
    "offpeak_kwh",
    "draw_volume_m3",
    "draw_temp_mean_k",
    "draw_temp_p10_k",
    "draw_temp_p90_k",
    "mpc_calls",
    "fallback_count",
    "solve_time_median_s",
    "solve_time_max_s",
    "solver_iterations_max",
    "kkt_residual_max",
    "audit_closure_fraction",
];

fn metrics_cells(m: &RunMetrics, closure: f64) -> Vec<String> {
    vec![
        fmt(m.electrical_kwh),
        fmt(m.embodied_kwh),
        fmt(m.cost_usd),
        fmt(m.cost_per_kwh_electric),
        fmt(m.cost_per_kwh_drawn),
        fmt(m.peak_kwh),
        fmt(m.offpeak_kwh),
        fmt(m.draw_volume_m3),
        fmt(m.draw_temp_mean_k),
        fmt(m.draw_temp_p10_k),
        fmt(m.draw_temp_p90_k),
        m.mpc_calls.to_string(),
        m.fallback_count.to_string(),
        fmt(m.solve_time_median_s),
        fmt(m.solve_time_max_s),
        m.solver_iterations_max.to_string(),
        fmt(m.kkt_residual_max),
        fmt(closure),
    ]
}

/// Writes the one-row-per-run metrics table: the run's identifying knobs
/// followed by its final-day performance numbers.
pub fn write_metrics_csv<W: Write>(
    w: W,
    cfg: &RunConfig,
    result: &RunResult,
) -> Result<(), ReportError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec![
        "controller".to_string(),
        "actuation".to_string(),
        "days".to_string(),
        "daily_volume_gal".to_string(),
        "forecast_alpha".to_string(),
    ];
    header.extend(METRICS_COLUMNS.iter().map(|s| s.to_string()));
    out.write_record(header)?;
    let mut row = vec![
        cfg.controller.to_string(),
        cfg.actuation.to_string(),
        cfg.days.to_string(),
        fmt(m3_to_gallons(cfg.profile.daily_volume_m3())),
        fmt(cfg.forecast_alpha),
    ];
    row.extend(metrics_cells(&result.metrics, result.audit.closure_fraction()));
    out.write_record(row)?;
    out.flush()?;
    Ok(())
}

/// Writes a sweep table: one row per (axis value, controller) point. Failed
/// points keep their row with an error message and empty metric cells, so a
/// partial sweep is still a well-formed table.
pub fn write_sweep_csv<W: Write>(w: W, rows: &[SweepRow]) -> Result<(), ReportError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec![
        "axis".to_string(),
        "axis_value".to_string(),
        "controller".to_string(),
        "status".to_string(),
        "error".to_string(),
    ];
    header.extend(METRICS_COLUMNS.iter().map(|s| s.to_string()));
    out.write_record(&header)?;
    for row in rows {
        let mut rec = vec![
            row.axis.clone(),
            fmt(row.axis_value),
            row.controller.to_string(),
        ];
        match &row.outcome {
            SweepOutcome::Metrics(m) => {
                rec.push("ok".to_string());
                rec.push(String::new());
                rec.extend(metrics_cells(m, f64::NAN));
            }
            SweepOutcome::Failed(msg) => {
                rec.push("failed".to_string());
                rec.push(msg.clone());
                rec.extend(std::iter::repeat(String::new()).take(METRICS_COLUMNS.len()));
            }
        }
        out.write_record(rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Everything needed to audit a run after the fact: the exact configuration,
/// the energy ledger, per-day totals and the per-call solver records with
/// model-predicted versus plant-realized temperatures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub config: RunConfig,
    pub metrics: RunMetrics,
    pub daily_cost_usd: Vec<f64>,
    pub daily_electrical_kwh: Vec<f64>,
    pub audit: EnergyAudit,
    pub audit_closure_fraction: f64,
    pub mpc_calls: Vec<MpcCallRecord>,
}

pub fn diagnostics_report(cfg: &RunConfig, result: &RunResult) -> DiagnosticsReport {
    DiagnosticsReport {
        config: cfg.clone(),
        metrics: result.metrics.clone(),
        daily_cost_usd: result.daily_cost_usd.clone(),
        daily_electrical_kwh: result.daily_electrical_kwh.clone(),
        audit: result.audit.clone(),
        audit_closure_fraction: result.audit.closure_fraction(),
        mpc_calls: result.mpc_calls.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controllers::ControllerChoice;
    use crate::harness::{run_closed_loop, RunConfig};
    use crate::scenario::DrawProfile;

    fn sample(t: f64) -> TrajectorySample {
        // Awkward decimals exercise the round-trip formatting.
        TrajectorySample {
            time_s: t,
            nodes_k: (0..20).map(|i| 293.15 + 0.1 * i as f64 + 0.1 + 0.2).collect(),
            sensors_k: [310.0 + 1.0 / 3.0; 8],
            p_lower_w: 1130.0 * 0.123456789,
            p_upper_w: 0.0,
            flow_m3_per_s: 6.3e-5,
            cum_volume_m3: 0.1 + 0.2,
            cum_cost_usd: t * 1e-4,
        }
    }

    #[test]
    fn trajectory_round_trips_bit_exactly() {
        let rows: Vec<_> = (0..5).map(|k| sample(60.0 * k as f64)).collect();
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &rows).unwrap();
        let back = read_trajectory_csv(buf.as_slice()).unwrap();
        assert_eq!(rows, back);
    }

    #[test]
    fn trajectory_header_is_stable() {
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &[sample(0.0)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let header = text.lines().next().unwrap();
        assert!(header.starts_with("time_s,node_00,node_01,"));
        assert!(header.contains("node_19,sensor_1,"));
        assert!(header.ends_with("sensor_8,p_lower_w,p_upper_w,flow_m3_per_s,cum_volume_m3,cum_cost_usd"));
    }

    #[test]
    fn wrong_header_is_rejected() {
        let text = "time_s,node_00,bogus\n0,1,2\n";
        assert!(matches!(
            read_trajectory_csv(text.as_bytes()),
            Err(ReportError::Format(_))
        ));
    }

    #[test]
    fn id_points_carry_the_log_columns() {
        let rows = vec![sample(0.0), sample(60.0)];
        let pts = trajectory_to_id_points(&rows);
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[1].time_s, 60.0);
        assert_eq!(pts[0].sensors_k, rows[0].sensors_k);
        assert_eq!(pts[0].p_lower_w, rows[0].p_lower_w);
        assert_eq!(pts[0].flow_m3_per_s, rows[0].flow_m3_per_s);
    }

    /// One short real run (a single morning draw) shared by the table and
    /// diagnostics tests.
    fn tiny_run() -> (RunConfig, crate::harness::RunResult) {
        let mut cfg = RunConfig::baseline(ControllerChoice::Thermostat);
        cfg.days = 1;
        cfg.profile = DrawProfile::new(vec![crate::scenario::DrawEvent {
            start_s: 7.0 * 3600.0,
            duration_s: 600.0,
            rate_m3_per_s: 6.3e-5,
        }])
        .unwrap();
        let result = run_closed_loop(&cfg).unwrap();
        (cfg, result)
    }

    #[test]
    fn metrics_table_is_one_labelled_row() {
        let (cfg, result) = tiny_run();
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &cfg, &result).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        let header: Vec<_> = lines.next().unwrap().split(',').collect();
        let row: Vec<_> = lines.next().unwrap().split(',').collect();
        assert!(lines.next().is_none());
        assert_eq!(&header[..5], &["controller", "actuation", "days", "daily_volume_gal", "forecast_alpha"]);
        assert_eq!(header.len(), row.len());
        assert_eq!(&row[..3], &["thermostat", "on-off", "1"]);
        let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
        let cost: f64 = row[col("cost_usd")].parse().unwrap();
        assert_eq!(cost, result.metrics.cost_usd);
        let calls: usize = row[col("mpc_calls")].parse().unwrap();
        assert_eq!(calls, 0);
    }

    #[test]
    fn sweep_table_keeps_failed_rows() {
        let (_, result) = tiny_run();
        let rows = vec![
            SweepRow {
                axis: "daily_volume_gal".into(),
                axis_value: 36.0,
                controller: ControllerChoice::Thermostat,
                outcome: SweepOutcome::Metrics(Box::new(result.metrics.clone())),
            },
            SweepRow {
                axis: "daily_volume_gal".into(),
                axis_value: 54.0,
                controller: ControllerChoice::ThreeNodeMpc,
                outcome: SweepOutcome::Failed("solver blew up".into()),
            },
        ];
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("daily_volume_gal,36,thermostat,ok,,"));
        assert!(lines[2].starts_with("daily_volume_gal,54,three-node,failed,solver blew up,"));
        // Failed rows pad to the full width.
        assert_eq!(
            lines[2].matches(',').count(),
            lines[0].matches(',').count()
        );
    }

    #[test]
    fn diagnostics_json_round_trips() {
        let (cfg, result) = tiny_run();
        let report = diagnostics_report(&cfg, &result);
        let text = serde_json::to_string_pretty(&report).unwrap();
        let back: DiagnosticsReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.metrics, report.metrics);
        assert_eq!(back.audit, report.audit);
        assert_eq!(back.daily_cost_usd, report.daily_cost_usd);
        assert_eq!(back.config.days, 1);
    }
}
