//! Grey-box parameter identification: builds ordinary least-squares systems
//! from logged heating-cycle and at-rest data (no draws) and solves for the
//! one-node or three-node model parameters.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control_models::{OneNodeParams, ThreeNodeParams};
use crate::tank_sim::{read_sensors, sim_step, SimError, SimParams, TankSimState};
use crate::units::{fahrenheit_to_kelvin, AmbientConditions, TankSpec, CP_WATER, RHO_WATER};

#[derive(Debug, Error, PartialEq)]
pub enum IdError {
    #[error("identification data contains nonzero flow at t = {0} s")]
    FlowInData(f64),
    #[error("not enough usable sample pairs ({0}); need at least {1}")]
    TooFewSamples(usize, usize),
    #[error(
        "regression is rank-deficient (rank {rank} of {cols}); \
         unidentifiable directions: {directions}"
    )]
    RankDeficient { rank: usize, cols: usize, directions: String },
    #[error("samples are not uniformly spaced: expected {expected_s} s, found {found_s} s")]
    IrregularSpacing { expected_s: f64, found_s: f64 },
}

/// Operating regime of a data segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// One or both elements on at constant power, no draws.
    HeatingCycle,
    /// Everything off, no draws.
    AtRest,
}

/// One resampled measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdSample {
    pub time_s: f64,
    pub sensors_k: [f64; 8],
    pub p_lower_w: f64,
    pub p_upper_w: f64,
    pub flow_m3_per_s: f64,
}

/// A maximal run of uniformly spaced samples with constant element powers
/// and zero flow. Regression pairs never straddle segment boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdSegment {
    pub regime: Regime,
    pub samples: Vec<IdSample>,
}

/// Identification dataset: segments of samples spaced `dt_s` apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdDataset {
    pub dt_s: f64,
    pub segments: Vec<IdSegment>,
}

impl IdDataset {
    pub fn validate(&self) -> Result<(), IdError> {
        for seg in &self.segments {
            for s in &seg.samples {
                if s.flow_m3_per_s != 0.0 {
                    return Err(IdError::FlowInData(s.time_s));
                }
            }
            for w in seg.samples.windows(2) {
                let spacing = w[1].time_s - w[0].time_s;
                if (spacing - self.dt_s).abs() > 1e-6 {
                    return Err(IdError::IrregularSpacing {
                        expected_s: self.dt_s,
                        found_s: spacing,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn pair_count(&self) -> usize {
        self.segments.iter().map(|s| s.samples.len().saturating_sub(1)).sum()
    }
}

/// Raw log point used to build an [`IdDataset`] (typically one per simulator
/// step).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdSourcePoint {
    pub time_s: f64,
    pub sensors_k: [f64; 8],
    pub p_lower_w: f64,
    pub p_upper_w: f64,
    pub flow_m3_per_s: f64,
}

/// Resamples a uniformly logged record stream at `dt_s` by endpoint sampling
/// (values at the grid instants, no averaging). The stream is first split
/// into maximal runs of constant element power and zero flow; runs shorter
/// than two grid points are dropped.
pub fn resample(points: &[IdSourcePoint], dt_s: f64) -> IdDataset {
    let mut segments = Vec::new();
    if points.len() < 2 {
        return IdDataset { dt_s, segments };
    }
    let source_dt = points[1].time_s - points[0].time_s;
    let stride = (dt_s / source_dt).round() as usize;
    assert!(
        stride >= 1 && (stride as f64 * source_dt - dt_s).abs() < 1e-9,
        "resample grid {dt_s} s must be a multiple of the source spacing {source_dt} s"
    );

    let mut run_start = 0;
    let flush = |start: usize, end: usize, segments: &mut Vec<IdSegment>| {
        let run = &points[start..end];
        if run.is_empty() || run[0].flow_m3_per_s != 0.0 {
            return;
        }
        let samples: Vec<IdSample> = run
            .iter()
            .step_by(stride)
            .map(|p| IdSample {
                time_s: p.time_s,
                sensors_k: p.sensors_k,
                p_lower_w: p.p_lower_w,
                p_upper_w: p.p_upper_w,
                flow_m3_per_s: p.flow_m3_per_s,
            })
            .collect();
        if samples.len() >= 2 {
            let regime = if run[0].p_lower_w + run[0].p_upper_w > 0.0 {
                Regime::HeatingCycle
            } else {
                Regime::AtRest
            };
            segments.push(IdSegment { regime, samples });
        }
    };
    for k in 1..points.len() {
        let same = points[k].p_lower_w == points[run_start].p_lower_w
            && points[k].p_upper_w == points[run_start].p_upper_w
            && (points[k].flow_m3_per_s == 0.0) == (points[run_start].flow_m3_per_s == 0.0);
        if !same {
            flush(run_start, k, &mut segments);
            run_start = k;
        }
    }
    flush(run_start, points.len(), &mut segments);
    IdDataset { dt_s, segments }
}

/// A stacked least-squares system `W theta ~ z`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSystem {
    pub w: DMatrix<f64>,
    pub z: DVector<f64>,
    pub param_names: Vec<&'static str>,
}

/// Sensor used as the one-node model state (mounted just above the lower
/// element).
pub const ONE_NODE_SENSOR: usize = 6;
/// Sensors used as the three-node states, bottom to top.
pub const THREE_NODE_SENSORS: [usize; 3] = [0, 6, 7];

/// One-node energy balance per sample pair:
/// `dt p = rho cp (T' - T) V + dt (T - Ta) U`, parameters `[V, U]`.
pub fn build_regression_one_node(
    ds: &IdDataset,
    ambient: &AmbientConditions,
) -> Result<RegressionSystem, IdError> {
    ds.validate()?;
    let pairs = ds.pair_count();
    if pairs < 2 {
        return Err(IdError::TooFewSamples(pairs, 2));
    }
    let mut w = DMatrix::zeros(pairs, 2);
    let mut z = DVector::zeros(pairs);
    let mut row = 0;
    for seg in &ds.segments {
        for pair in seg.samples.windows(2) {
            let t0 = pair[0].sensors_k[ONE_NODE_SENSOR];
            let t1 = pair[1].sensors_k[ONE_NODE_SENSOR];
            let p = pair[0].p_lower_w + pair[0].p_upper_w;
            w[(row, 0)] = RHO_WATER * CP_WATER * (t1 - t0);
            w[(row, 1)] = ds.dt_s * (t0 - ambient.t_ambient_k);
            z[row] = ds.dt_s * p;
            row += 1;
        }
    }
    Ok(RegressionSystem { w, z, param_names: vec!["V", "U"] })
}

/// Three-node energy balances per sample pair, three rows each (upper,
/// middle, lower), parameters `[U_l, U_m, U_u, K_ml, K_um, V_m, V_u]` with
/// the known total volume `v_total_m3` carried on the left side of the
/// lower-node row. Eleven nonzero entries per pair.
pub fn build_regression_three_node(
    ds: &IdDataset,
    ambient: &AmbientConditions,
    v_total_m3: f64,
) -> Result<RegressionSystem, IdError> {
    ds.validate()?;
    let pairs = ds.pair_count();
    if pairs < 3 {
        return Err(IdError::TooFewSamples(pairs, 3));
    }
    let names = vec!["U_l", "U_m", "U_u", "K_ml", "K_um", "V_m", "V_u"];
    let (iul, ium, iuu, ikml, ikum, ivm, ivu) = (0, 1, 2, 3, 4, 5, 6);
    let mut w = DMatrix::zeros(3 * pairs, 7);
    let mut z = DVector::zeros(3 * pairs);
    let dt = ds.dt_s;
    let ta = ambient.t_ambient_k;
    let mut row = 0;
    for seg in &ds.segments {
        for pair in seg.samples.windows(2) {
            let [sl, sm, su] = THREE_NODE_SENSORS;
            let (tl, tm, tu) =
                (pair[0].sensors_k[sl], pair[0].sensors_k[sm], pair[0].sensors_k[su]);
            let (tl1, tm1, tu1) =
                (pair[1].sensors_k[sl], pair[1].sensors_k[sm], pair[1].sensors_k[su]);
            let (p_m, p_u) = (pair[0].p_lower_w, pair[0].p_upper_w);

            w[(row, iuu)] = dt * (tu - ta);
            w[(row, ikum)] = dt * (tu - tm);
            w[(row, ivu)] = RHO_WATER * CP_WATER * (tu1 - tu);
            z[row] = dt * p_u;

            w[(row + 1, ium)] = dt * (tm - ta);
            w[(row + 1, ikml)] = dt * (tm - tl);
            w[(row + 1, ikum)] = dt * (tm - tu);
            w[(row + 1, ivm)] = RHO_WATER * CP_WATER * (tm1 - tm);
            z[row + 1] = dt * p_m;

            w[(row + 2, iul)] = dt * (tl - ta);
            w[(row + 2, ikml)] = dt * (tl - tm);
            w[(row + 2, ivm)] = -RHO_WATER * CP_WATER * (tl1 - tl);
            w[(row + 2, ivu)] = -RHO_WATER * CP_WATER * (tl1 - tl);
            z[row + 2] = v_total_m3 * RHO_WATER * CP_WATER * (tl - tl1);

            row += 3;
        }
    }
    Ok(RegressionSystem { w, z, param_names: names })
}

/// Least-squares estimate plus fit diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdFit {
    pub theta: Vec<f64>,
    pub param_names: Vec<String>,
    /// Per-equation RMS residual in the row units (joules).
    pub rms_residual: f64,
    pub condition_number: f64,
    pub n_rows: usize,
    /// Plausibility notes; estimates are reported as-is, never clamped.
    pub warnings: Vec<String>,
}

/// Solves `W theta ~ z` by SVD, failing loudly when columns are (nearly)
/// linearly dependent instead of returning an arbitrary answer.
pub fn ols_solve(sys: &RegressionSystem) -> Result<IdFit, IdError> {
    let svd = sys.w.clone().svd(true, true);
    let max_sv = svd.singular_values.iter().fold(0.0f64, |a, &b| a.max(b));
    let rank_tol = max_sv * 1e-10;
    let rank = svd.singular_values.iter().filter(|sv| **sv > rank_tol).count();
    let cols = sys.w.ncols();
    if rank < cols {
        let v_t = svd.v_t.as_ref().expect("v_t requested");
        let mut directions = Vec::new();
        for (i, sv) in svd.singular_values.iter().enumerate() {
            if *sv <= rank_tol {
                let combo: Vec<String> = (0..cols)
                    .filter(|j| v_t[(i, *j)].abs() > 1e-3)
                    .map(|j| format!("{:+.3}*{}", v_t[(i, j)], sys.param_names[j]))
                    .collect();
                directions.push(combo.join(" "));
            }
        }
        return Err(IdError::RankDeficient {
            rank,
            cols,
            directions: directions.join("; "),
        });
    }
    let min_sv = svd
        .singular_values
        .iter()
        .fold(f64::INFINITY, |a, &b| if b > rank_tol { a.min(b) } else { a });
    let theta = svd.solve(&sys.z, rank_tol).expect("svd solve");
    let residual = &sys.w * &theta - &sys.z;
    let rms = (residual.norm_squared() / sys.w.nrows() as f64).sqrt();
    Ok(IdFit {
        theta: theta.iter().copied().collect(),
        param_names: sys.param_names.iter().map(|s| s.to_string()).collect(),
        rms_residual: rms,
        condition_number: max_sv / min_sv,
        n_rows: sys.w.nrows(),
        warnings: Vec::new(),
    })
}

/// Identifies one-node parameters and attaches plausibility warnings.
pub fn identify_one_node(
    ds: &IdDataset,
    ambient: &AmbientConditions,
    v_total_m3: f64,
) -> Result<(OneNodeParams, IdFit), IdError> {
    let sys = build_regression_one_node(ds, ambient)?;
    let mut fit = ols_solve(&sys)?;
    let params = OneNodeParams { volume_m3: fit.theta[0], ua_w_per_k: fit.theta[1] };
    if !(params.volume_m3 > 0.0) {
        fit.warnings.push(format!("estimated volume {} m^3 is not positive", params.volume_m3));
    } else if params.volume_m3 > v_total_m3 {
        fit.warnings.push(format!(
            "estimated volume {} m^3 exceeds the physical tank volume {} m^3",
            params.volume_m3, v_total_m3
        ));
    }
    if !(params.ua_w_per_k >= 0.0) {
        fit.warnings.push(format!("estimated UA {} W/K is negative", params.ua_w_per_k));
    }
    Ok((params, fit))
}

/// Identifies three-node parameters and attaches plausibility warnings.
pub fn identify_three_node(
    ds: &IdDataset,
    ambient: &AmbientConditions,
    v_total_m3: f64,
) -> Result<(ThreeNodeParams, IdFit), IdError> {
    let sys = build_regression_three_node(ds, ambient, v_total_m3)?;
    let mut fit = ols_solve(&sys)?;
    let params = ThreeNodeParams {
        u_l_w_per_k: fit.theta[0],
        u_m_w_per_k: fit.theta[1],
        u_u_w_per_k: fit.theta[2],
        k_ml_w_per_k: fit.theta[3],
        k_um_w_per_k: fit.theta[4],
        v_m_m3: fit.theta[5],
        v_u_m3: fit.theta[6],
        v_total_m3,
    };
    for (name, v) in [
        ("U_l", params.u_l_w_per_k),
        ("U_m", params.u_m_w_per_k),
        ("U_u", params.u_u_w_per_k),
        ("K_ml", params.k_ml_w_per_k),
        ("K_um", params.k_um_w_per_k),
        ("V_m", params.v_m_m3),
        ("V_u", params.v_u_m3),
        ("V_l", params.v_l_m3()),
    ] {
        if !(v > 0.0) {
            fit.warnings.push(format!("estimated {name} = {v} is not positive"));
        }
    }
    Ok((params, fit))
}

/// Tank state at the start of a collection run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum IdInitialCondition {
    /// Uniform temperature; the lumped-model assumptions hold during the
    /// run and the estimates come out physically sensible.
    WellMixed { t_k: f64 },
    /// Hot upper half over a cold lower half. The lower element then heats
    /// only the small pool below the thermocline, so the apparent volume
    /// shrinks and the apparent loss coefficient inflates.
    Stratified { t_top_k: f64, t_bottom_k: f64 },
}

/// Two-regime collection schedule: a constant-power heating cycle followed
/// by an at-rest period, with no draws anywhere. Lower element only is the
/// one-node convention; both elements for three-node data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdProtocol {
    pub initial: IdInitialCondition,
    pub heat_s: f64,
    pub rest_s: f64,
    pub p_lower_w: f64,
    pub p_upper_w: f64,
    /// Spacing of the emitted log; must be a multiple of the sim step.
    pub log_dt_s: f64,
}

impl IdProtocol {
    /// Heating cycle from a uniform warm start, lower element only.
    pub fn well_mixed_one_node(spec: &TankSpec) -> Self {
        IdProtocol {
            initial: IdInitialCondition::WellMixed { t_k: fahrenheit_to_kelvin(120.0) },
            heat_s: 2.0 * 3600.0,
            rest_s: 24.0 * 3600.0,
            p_lower_w: spec.p_rated_lower_w,
            p_upper_w: 0.0,
            log_dt_s: 1.0,
        }
    }

    /// Same schedule from a half-hot start.
    pub fn stratified_one_node(spec: &TankSpec) -> Self {
        IdProtocol {
            initial: IdInitialCondition::Stratified {
                t_top_k: fahrenheit_to_kelvin(130.0),
                t_bottom_k: fahrenheit_to_kelvin(70.0),
            },
            ..IdProtocol::well_mixed_one_node(spec)
        }
    }

    /// Both elements on, as three-node collection requires.
    pub fn well_mixed_three_node(spec: &TankSpec) -> Self {
        IdProtocol {
            p_upper_w: spec.p_rated_upper_w,
            ..IdProtocol::well_mixed_one_node(spec)
        }
    }
}

/// Runs the simulator through a collection schedule and returns the logged
/// stream, ready for [`resample`]. Logged powers follow the left-endpoint
/// convention: the value at time t is the power applied over the following
/// log interval.
pub fn collect_id_data(
    spec: &TankSpec,
    params: &SimParams,
    ambient: &AmbientConditions,
    protocol: &IdProtocol,
) -> Result<Vec<IdSourcePoint>, SimError> {
    let mut state = match protocol.initial {
        IdInitialCondition::WellMixed { t_k } => TankSimState::uniform(params.n_nodes, t_k),
        IdInitialCondition::Stratified { t_top_k, t_bottom_k } => TankSimState::from_nodes(
            (0..params.n_nodes)
                .map(|k| if k >= params.n_nodes / 2 { t_top_k } else { t_bottom_k })
                .collect(),
        ),
    };
    let log_every = (protocol.log_dt_s / params.sim_dt_s).round() as usize;
    assert!(
        log_every >= 1
            && (log_every as f64 * params.sim_dt_s - protocol.log_dt_s).abs() < 1e-9,
        "log spacing {} s must be a multiple of the sim step {} s",
        protocol.log_dt_s,
        params.sim_dt_s
    );
    let heat_steps = (protocol.heat_s / params.sim_dt_s).round() as usize;
    let total_steps = heat_steps + (protocol.rest_s / params.sim_dt_s).round() as usize;
    let mut points = Vec::with_capacity(total_steps / log_every + 1);
    for k in 0..=total_steps {
        let (p_lo, p_up) = if k < heat_steps {
            (protocol.p_lower_w, protocol.p_upper_w)
        } else {
            (0.0, 0.0)
        };
        if k % log_every == 0 {
            points.push(IdSourcePoint {
                time_s: k as f64 * params.sim_dt_s,
                sensors_k: read_sensors(&state, spec, params),
                p_lower_w: p_lo,
                p_upper_w: p_up,
                flow_m3_per_s: 0.0,
            });
        }
        if k < total_steps {
            sim_step(&mut state, p_lo, p_up, 0.0, ambient, spec, params)?;
        }
    }
    Ok(points)
}
