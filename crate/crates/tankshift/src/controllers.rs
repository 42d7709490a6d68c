//! Control strategies: thermostatic hysteresis baseline, one-node MPC,
//! and three-node MPC. All three expose the same step shape: sensor
//! readings plus forecasts in, element power commands out.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control_models::{
    one_node_interval_affine, three_node_interval_affine, OneNodeParams, ThreeNodeParams,
};
use crate::qp::{solve_qp, solve_qp_warm, QpProblem, QpSolution, QpStatus, SolverOptions};
use crate::units::{fahrenheit_to_kelvin, AmbientConditions};

#[derive(Debug, Error, PartialEq)]
pub enum ControlError {
    #[error("invalid controller config: {0}")]
    InvalidConfig(String),
    #[error("forecast length {got} does not match horizon steps {expected}")]
    ForecastLength { expected: usize, got: usize },
}

/// Which measurement feeds the one-node model state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StateSource {
    /// Sensor 7, just above the lower element.
    LowerElementSensor,
    /// Mean of sensors 2..=6, a mid-tank average.
    MidTankMean,
}

/// Receding-horizon controller settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    /// Control interval [s].
    pub dt_s: f64,
    /// Euler sub-steps per control interval.
    pub substeps: usize,
    /// Lookahead horizon [s]; must be a multiple of dt_s.
    pub horizon_s: f64,
    /// Soft lower temperature bound [K].
    pub t_low_k: f64,
    /// Soft upper temperature bound [K].
    pub t_high_k: f64,
    /// Comfort penalty weight [$ / K^2].
    pub lambda: f64,
    /// Overshoot weight relative to undershoot.
    pub beta: f64,
    pub state_source: StateSource,
    pub solver_tol: f64,
    pub solver_max_iter: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            dt_s: 600.0,
            substeps: 2,
            horizon_s: 18.0 * 3600.0,
            t_low_k: fahrenheit_to_kelvin(115.0),
            t_high_k: fahrenheit_to_kelvin(125.0),
            lambda: 0.002,
            beta: 1.0,
            state_source: StateSource::LowerElementSensor,
            solver_tol: 1e-6,
            solver_max_iter: 5000,
        }
    }
}

impl MpcConfig {
    /// Tuned settings per controller, from the closed-loop sweep in
    /// examples/tune_lambda.rs. Each weight is the smallest on the sweep
    /// grid that keeps the 54 gal/day 10th-percentile draw temperature
    /// inside the comfort tolerance band. The one-node weight is smaller
    /// because its sensor sits just above the lower element and swings
    /// hard during draws; a heavier penalty makes every swing trigger
    /// reactive full-power heating regardless of price.
    pub fn for_controller(choice: ControllerChoice) -> Self {
        let lambda = match choice {
            ControllerChoice::OneNodeMpc => 5e-4,
            _ => 2e-3,
        };
        MpcConfig { lambda, ..MpcConfig::default() }
    }

    pub fn n_steps(&self) -> usize {
        (self.horizon_s / self.dt_s).round() as usize
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        if !(self.dt_s > 0.0) || self.substeps == 0 {
            return Err(ControlError::InvalidConfig("dt and substeps must be positive".into()));
        }
        let n = self.horizon_s / self.dt_s;
        if (n - n.round()).abs() > 1e-9 || n < 1.0 {
            return Err(ControlError::InvalidConfig(
                "horizon must be a positive multiple of the control interval".into(),
            ));
        }
        if !(self.t_low_k < self.t_high_k) {
            return Err(ControlError::InvalidConfig("need t_low < t_high".into()));
        }
        if !(self.lambda > 0.0) || !(self.beta > 0.0) {
            return Err(ControlError::InvalidConfig("lambda and beta must be positive".into()));
        }
        Ok(())
    }
}

/// Which strategy drives a closed-loop run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControllerChoice {
    Thermostat,
    OneNodeMpc,
    ThreeNodeMpc,
}

impl std::fmt::Display for ControllerChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ControllerChoice::Thermostat => "thermostat",
            ControllerChoice::OneNodeMpc => "one-node",
            ControllerChoice::ThreeNodeMpc => "three-node",
        })
    }
}

/// How average-power commands reach the elements: switched at rated power
/// with a matching duty cycle, or passed through as modulated power.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Actuation {
    OnOff,
    Continuous,
}

impl std::fmt::Display for Actuation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Actuation::OnOff => "on-off",
            Actuation::Continuous => "continuous",
        })
    }
}

/// Average element powers over the next control interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlCommand {
    pub p_lower_w: f64,
    pub p_upper_w: f64,
}

impl ControlCommand {
    pub const OFF: ControlCommand = ControlCommand { p_lower_w: 0.0, p_upper_w: 0.0 };
}

/// Number of leading simulator steps an element spends at full power so the
/// delivered energy matches `avg_power * dt` to within one `p_bar * sim_dt`
/// quantum. Front-loaded: on-steps first, then off.
pub fn to_on_off(avg_power_w: f64, p_bar_w: f64, dt_s: f64, sim_dt_s: f64) -> usize {
    debug_assert!(avg_power_w >= -1e-9 && avg_power_w <= p_bar_w * (1.0 + 1e-9));
    let total_steps = (dt_s / sim_dt_s).round();
    if p_bar_w <= 0.0 {
        return 0;
    }
    let on = (avg_power_w / p_bar_w * total_steps).round();
    (on.max(0.0).min(total_steps)) as usize
}

/// Per-element hysteresis latch with non-simultaneous operation and upper
/// priority. Update period is the cadence at which the harness consults it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermostatState {
    pub t_low_k: f64,
    pub t_high_k: f64,
    pub update_period_s: f64,
    pub heating_lower: bool,
    pub heating_upper: bool,
}

impl Default for ThermostatState {
    fn default() -> Self {
        ThermostatState {
            t_low_k: fahrenheit_to_kelvin(115.0),
            t_high_k: fahrenheit_to_kelvin(125.0),
            update_period_s: 30.0,
            heating_lower: false,
            heating_upper: false,
        }
    }
}

/// One hysteresis update. Each latch starts when its sensor drops below the
/// deadband and stops when it rises above; the upper element preempts the
/// lower whenever it wants heat, so at most one element runs.
pub fn thermostat_step(
    state: ThermostatState,
    sensor_upper_k: f64,
    sensor_lower_k: f64,
    p_rated_lower_w: f64,
    p_rated_upper_w: f64,
) -> (ControlCommand, ThermostatState) {
    let mut next = state;
    next.heating_upper = latch(state.heating_upper, sensor_upper_k, state.t_low_k, state.t_high_k);
    next.heating_lower = latch(state.heating_lower, sensor_lower_k, state.t_low_k, state.t_high_k);
    let cmd = if next.heating_upper {
        ControlCommand { p_lower_w: 0.0, p_upper_w: p_rated_upper_w }
    } else if next.heating_lower {
        ControlCommand { p_lower_w: p_rated_lower_w, p_upper_w: 0.0 }
    } else {
        ControlCommand::OFF
    };
    (cmd, next)
}

fn latch(heating: bool, sensor_k: f64, t_low_k: f64, t_high_k: f64) -> bool {
    if heating {
        sensor_k <= t_high_k
    } else {
        sensor_k < t_low_k
    }
}

/// Projects a sensor triple onto the nondecreasing set by isotonic
/// averaging of violating adjacent pairs (pool-adjacent-violators), so the
/// optimization's initial condition satisfies its ordering constraints.
pub fn adjust_initial_ordering(t: [f64; 3]) -> [f64; 3] {
    let mut sums = Vec::with_capacity(3);
    let mut counts: Vec<usize> = Vec::with_capacity(3);
    for v in t {
        sums.push(v);
        counts.push(1);
        while sums.len() > 1 {
            let k = sums.len();
            if sums[k - 2] / counts[k - 2] as f64 > sums[k - 1] / counts[k - 1] as f64 {
                let (s, c) = (sums.pop().unwrap(), counts.pop().unwrap());
                sums[k - 2] += s;
                counts[k - 2] += c;
            } else {
                break;
            }
        }
    }
    let mut out = [0.0; 3];
    let mut i = 0;
    for (s, c) in sums.iter().zip(&counts) {
        for _ in 0..*c {
            out[i] = s / *c as f64;
            i += 1;
        }
    }
    out
}

/// Scaled-variable conventions shared by both QP builders: temperatures are
/// offset by t_low and divided by 10 K, powers divided by their rating,
/// slacks divided by 10 K. Costs are expressed so the QP objective equals
/// the controller objective in dollars plus weighted squared kelvin.
const T_SCALE: f64 = 10.0;

/// Variable layout for the one-node horizon QP:
/// index 0 is the (fixed) initial state; step j occupies
/// [p_j, s_lo_j, s_hi_j, T_{j+1}] at 1 + 4j. Slack pairs penalize the
/// interval-end temperatures T_1..T_N.
pub fn one_node_layout(j: usize) -> (usize, usize, usize, usize) {
    (1 + 4 * j, 2 + 4 * j, 3 + 4 * j, 4 + 4 * j)
}

pub fn build_one_node_qp(
    cfg: &MpcConfig,
    params: &OneNodeParams,
    p_bar_w: f64,
    t0_k: f64,
    flows_m3s: &[f64],
    prices_per_kwh: &[f64],
    ambient: &AmbientConditions,
) -> QpProblem {
    let n = cfg.n_steps();
    assert_eq!(flows_m3s.len(), n);
    assert_eq!(prices_per_kwh.len(), n);
    let mut qp = QpProblem::new(1 + 4 * n);
    let energy_per_unit = cfg.dt_s / 3.6e6 * p_bar_w;
    let band = (cfg.t_high_k - cfg.t_low_k) / T_SCALE;

    // initial condition
    qp.eq_rows.push(vec![(0, 1.0)]);
    qp.eq_rhs.push((t0_k - cfg.t_low_k) / T_SCALE);

    for j in 0..n {
        let (p, slo, shi, t_next) = one_node_layout(j);
        let t_prev = if j == 0 { 0 } else { one_node_layout(j - 1).3 };
        let step = one_node_interval_affine(params, ambient, flows_m3s[j], cfg.dt_s, cfg.substeps);
        // dynamics in scaled variables:
        // T'_s = a T_s + (b p_bar / 10) p_s + (c + (a - 1) t_low) / 10
        qp.eq_rows.push(vec![(t_next, 1.0), (t_prev, -step.a), (p, -step.b * p_bar_w / T_SCALE)]);
        qp.eq_rhs.push((step.c + (step.a - 1.0) * cfg.t_low_k) / T_SCALE);

        qp.lin[p] = prices_per_kwh[j] * energy_per_unit;
        qp.quad_diag[slo] = 2.0 * cfg.lambda * T_SCALE * T_SCALE;
        qp.quad_diag[shi] = 2.0 * cfg.lambda * cfg.beta * T_SCALE * T_SCALE;

        qp.ineq_rows.push(vec![(t_next, -1.0), (slo, -1.0)]);
        qp.ineq_rhs.push(0.0);
        qp.ineq_rows.push(vec![(t_next, 1.0), (shi, -1.0)]);
        qp.ineq_rhs.push(band);
        qp.ineq_rows.push(vec![(slo, -1.0)]);
        qp.ineq_rhs.push(0.0);
        qp.ineq_rows.push(vec![(shi, -1.0)]);
        qp.ineq_rhs.push(0.0);
        qp.ineq_rows.push(vec![(p, -1.0)]);
        qp.ineq_rhs.push(0.0);
        qp.ineq_rows.push(vec![(p, 1.0)]);
        qp.ineq_rhs.push(1.0);
    }
    qp
}

/// Variable layout for the three-node horizon QP: indices 0..3 hold the
/// fixed initial states (l, m, u); step j occupies
/// [p_low_j, p_up_j, s_lo_j, s_hi_j, T_l_{j+1}, T_m_{j+1}, T_u_{j+1}]
/// starting at 3 + 7j. Slacks penalize the upper node only.
pub fn three_node_layout(j: usize) -> (usize, usize, usize, usize, [usize; 3]) {
    let base = 3 + 7 * j;
    (base, base + 1, base + 2, base + 3, [base + 4, base + 5, base + 6])
}

#[allow(clippy::too_many_arguments)]
pub fn build_three_node_qp(
    cfg: &MpcConfig,
    params: &ThreeNodeParams,
    p_bar_lower_w: f64,
    p_bar_upper_w: f64,
    t0_k: [f64; 3],
    flows_m3s: &[f64],
    prices_per_kwh: &[f64],
    ambient: &AmbientConditions,
) -> QpProblem {
    let n = cfg.n_steps();
    assert_eq!(flows_m3s.len(), n);
    assert_eq!(prices_per_kwh.len(), n);
    let t0 = adjust_initial_ordering(t0_k);
    let mut qp = QpProblem::new(3 + 7 * n);
    let band = (cfg.t_high_k - cfg.t_low_k) / T_SCALE;
    let p_bars = [p_bar_lower_w, p_bar_upper_w];

    for i in 0..3 {
        qp.eq_rows.push(vec![(i, 1.0)]);
        qp.eq_rhs.push((t0[i] - cfg.t_low_k) / T_SCALE);
    }

    for j in 0..n {
        let (p_low, p_up, slo, shi, t_next) = three_node_layout(j);
        let t_prev: [usize; 3] = if j == 0 { [0, 1, 2] } else { three_node_layout(j - 1).4 };
        let step =
            three_node_interval_affine(params, ambient, flows_m3s[j], cfg.dt_s, cfg.substeps);
        // rows of T'_s = A T_s + (B diag(p_bar)/10) p_s
        //              + (c + (A - I) t_low 1)/10
        for r in 0..3 {
            let mut row = vec![(t_next[r], 1.0)];
            let mut a_row_sum = 0.0;
            for k in 0..3 {
                let a = step.a[(r, k)];
                a_row_sum += a;
                if a != 0.0 {
                    row.push((t_prev[k], -a));
                }
            }
            for (u, pvar) in [p_low, p_up].iter().enumerate() {
                let b = step.b[(r, u)];
                if b != 0.0 {
                    row.push((*pvar, -b * p_bars[u] / T_SCALE));
                }
            }
            qp.eq_rows.push(row);
            qp.eq_rhs.push((step.c[r] + (a_row_sum - 1.0) * cfg.t_low_k) / T_SCALE);
        }

        let energy = cfg.dt_s / 3.6e6 * prices_per_kwh[j];
        qp.lin[p_low] = energy * p_bar_lower_w;
        qp.lin[p_up] = energy * p_bar_upper_w;
        qp.quad_diag[slo] = 2.0 * cfg.lambda * T_SCALE * T_SCALE;
        qp.quad_diag[shi] = 2.0 * cfg.lambda * cfg.beta * T_SCALE * T_SCALE;

        // comfort slacks watch the upper node
        qp.ineq_rows.push(vec![(t_next[2], -1.0), (slo, -1.0)]);
        qp.ineq_rhs.push(0.0);
        qp.ineq_rows.push(vec![(t_next[2], 1.0), (shi, -1.0)]);
        qp.ineq_rhs.push(band);
        qp.ineq_rows.push(vec![(slo, -1.0)]);
        qp.ineq_rhs.push(0.0);
        qp.ineq_rows.push(vec![(shi, -1.0)]);
        qp.ineq_rhs.push(0.0);
        for pvar in [p_low, p_up] {
            qp.ineq_rows.push(vec![(pvar, -1.0)]);
            qp.ineq_rhs.push(0.0);
            qp.ineq_rows.push(vec![(pvar, 1.0)]);
            qp.ineq_rhs.push(1.0);
        }
        // stratification ordering; the initial triple is ordered by
        // construction so rows start at the first predicted state
        qp.ineq_rows.push(vec![(t_next[0], 1.0), (t_next[1], -1.0)]);
        qp.ineq_rhs.push(0.0);
        qp.ineq_rows.push(vec![(t_next[1], 1.0), (t_next[2], -1.0)]);
        qp.ineq_rhs.push(0.0);
    }
    qp
}

/// Per-call solver audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcCallDiag {
    pub status: QpStatus,
    pub iterations: usize,
    pub solve_time_s: f64,
    pub objective: f64,
    /// KKT residual reported by the solver (max of the four norms).
    pub kkt_residual: f64,
    /// Model-predicted temperatures at the end of the first interval;
    /// one entry for the one-node model, three for the three-node model.
    pub predicted_next_k: Vec<f64>,
    /// True when the thermostat fallback produced the command.
    pub fallback: bool,
}

fn unscale_t(ts: f64, t_low_k: f64) -> f64 {
    ts * T_SCALE + t_low_k
}

fn diag_from(sol: &QpSolution, predicted_next_k: Vec<f64>, fallback: bool) -> MpcCallDiag {
    MpcCallDiag {
        status: sol.status,
        iterations: sol.iterations,
        solve_time_s: sol.solve_time_s,
        objective: sol.objective,
        kkt_residual: sol
            .dual_residual
            .max(sol.eq_residual)
            .max(sol.ineq_residual)
            .max(sol.comp_residual),
        predicted_next_k,
        fallback,
    }
}

/// Shifts the previous horizon solution one step forward as a warm-start
/// hint, repeating the final block.
fn shift_hint(prev: &[f64], block: usize, head: usize) -> Vec<f64> {
    let mut hint = prev.to_vec();
    hint.copy_within(head + block.., head);
    let n_blocks = (prev.len() - head) / block;
    if n_blocks >= 2 {
        let src = head + (n_blocks - 2) * block..head + (n_blocks - 1) * block;
        hint.copy_within(src, head + (n_blocks - 1) * block);
    }
    hint
}

/// One-node receding-horizon controller. Commands the lower element only.
pub struct OneNodeMpc {
    pub cfg: MpcConfig,
    pub params: OneNodeParams,
    pub p_bar_w: f64,
    pub ambient: AmbientConditions,
    warm: Option<Vec<f64>>,
    fallback_latch: ThermostatState,
}

impl OneNodeMpc {
    pub fn new(
        cfg: MpcConfig,
        params: OneNodeParams,
        p_bar_w: f64,
        ambient: AmbientConditions,
    ) -> Result<Self, ControlError> {
        cfg.validate()?;
        let fallback_latch = ThermostatState {
            t_low_k: cfg.t_low_k,
            t_high_k: cfg.t_high_k,
            ..ThermostatState::default()
        };
        Ok(OneNodeMpc { cfg, params, p_bar_w, ambient, warm: None, fallback_latch })
    }

    pub fn state_from_sensors(&self, sensors_k: &[f64; 8]) -> f64 {
        match self.cfg.state_source {
            StateSource::LowerElementSensor => sensors_k[6],
            StateSource::MidTankMean => sensors_k[1..6].iter().sum::<f64>() / 5.0,
        }
    }

    pub fn step(
        &mut self,
        sensors_k: &[f64; 8],
        flows_m3s: &[f64],
        prices_per_kwh: &[f64],
    ) -> Result<(ControlCommand, MpcCallDiag), ControlError> {
        let n = self.cfg.n_steps();
        if flows_m3s.len() != n {
            return Err(ControlError::ForecastLength { expected: n, got: flows_m3s.len() });
        }
        if prices_per_kwh.len() != n {
            return Err(ControlError::ForecastLength { expected: n, got: prices_per_kwh.len() });
        }
        let t0 = self.state_from_sensors(sensors_k);
        let qp = build_one_node_qp(
            &self.cfg,
            &self.params,
            self.p_bar_w,
            t0,
            flows_m3s,
            prices_per_kwh,
            &self.ambient,
        );
        let opts = SolverOptions { tol: self.cfg.solver_tol, max_iter: self.cfg.solver_max_iter };
        let sol = match &self.warm {
            Some(hint) => solve_qp_warm(&qp, &opts, hint),
            None => solve_qp(&qp, &opts),
        };
        let (p0_idx, .., t1_idx) = one_node_layout(0);
        let predicted = vec![unscale_t(sol.x[t1_idx], self.cfg.t_low_k)];
        if sol.status != QpStatus::Optimal {
            self.warm = None;
            // hysteresis on the model state keeps the tank alive for this
            // interval; the upper element stays untouched by design
            let (fallback_cmd, next_latch) =
                thermostat_step(self.fallback_latch, f64::INFINITY, t0, self.p_bar_w, 0.0);
            self.fallback_latch = next_latch;
            return Ok((fallback_cmd, diag_from(&sol, predicted, true)));
        }
        let p0 = (sol.x[p0_idx] * self.p_bar_w).clamp(0.0, self.p_bar_w);
        self.warm = Some(shift_hint(&sol.x, 4, 1));
        let cmd = ControlCommand { p_lower_w: p0, p_upper_w: 0.0 };
        Ok((cmd, diag_from(&sol, predicted, false)))
    }
}

/// Three-node receding-horizon controller commanding both elements.
pub struct ThreeNodeMpc {
    pub cfg: MpcConfig,
    pub params: ThreeNodeParams,
    pub p_bar_lower_w: f64,
    pub p_bar_upper_w: f64,
    pub ambient: AmbientConditions,
    warm: Option<Vec<f64>>,
    fallback_latch: ThermostatState,
}

/// Sensor indices feeding the three model nodes: below the lower element,
/// above the lower element, above the upper element.
pub const THREE_NODE_SENSOR_IDX: [usize; 3] = [0, 6, 7];

impl ThreeNodeMpc {
    pub fn new(
        cfg: MpcConfig,
        params: ThreeNodeParams,
        p_bar_lower_w: f64,
        p_bar_upper_w: f64,
        ambient: AmbientConditions,
    ) -> Result<Self, ControlError> {
        cfg.validate()?;
        params
            .validate()
            .map_err(|e| ControlError::InvalidConfig(format!("model params: {e}")))?;
        let fallback_latch = ThermostatState {
            t_low_k: cfg.t_low_k,
            t_high_k: cfg.t_high_k,
            ..ThermostatState::default()
        };
        Ok(ThreeNodeMpc {
            cfg,
            params,
            p_bar_lower_w,
            p_bar_upper_w,
            ambient,
            warm: None,
            fallback_latch,
        })
    }

    pub fn state_from_sensors(&self, sensors_k: &[f64; 8]) -> [f64; 3] {
        THREE_NODE_SENSOR_IDX.map(|i| sensors_k[i])
    }

    pub fn step(
        &mut self,
        sensors_k: &[f64; 8],
        flows_m3s: &[f64],
        prices_per_kwh: &[f64],
    ) -> Result<(ControlCommand, MpcCallDiag), ControlError> {
        let n = self.cfg.n_steps();
        if flows_m3s.len() != n {
            return Err(ControlError::ForecastLength { expected: n, got: flows_m3s.len() });
        }
        if prices_per_kwh.len() != n {
            return Err(ControlError::ForecastLength { expected: n, got: prices_per_kwh.len() });
        }
        let t0 = self.state_from_sensors(sensors_k);
        let qp = build_three_node_qp(
            &self.cfg,
            &self.params,
            self.p_bar_lower_w,
            self.p_bar_upper_w,
            t0,
            flows_m3s,
            prices_per_kwh,
            &self.ambient,
        );
        let opts = SolverOptions { tol: self.cfg.solver_tol, max_iter: self.cfg.solver_max_iter };
        let sol = match &self.warm {
            Some(hint) => solve_qp_warm(&qp, &opts, hint),
            None => solve_qp(&qp, &opts),
        };
        let (p_low_idx, p_up_idx, .., t1_idx) = three_node_layout(0);
        let predicted = t1_idx.iter().map(|i| unscale_t(sol.x[*i], self.cfg.t_low_k)).collect();
        if sol.status != QpStatus::Optimal {
            self.warm = None;
            let (fallback_cmd, next_latch) = thermostat_step(
                self.fallback_latch,
                sensors_k[7],
                sensors_k[6],
                self.p_bar_lower_w,
                self.p_bar_upper_w,
            );
            self.fallback_latch = next_latch;
            return Ok((fallback_cmd, diag_from(&sol, predicted, true)));
        }
        let cmd = ControlCommand {
            p_lower_w: (sol.x[p_low_idx] * self.p_bar_lower_w).clamp(0.0, self.p_bar_lower_w),
            p_upper_w: (sol.x[p_up_idx] * self.p_bar_upper_w).clamp(0.0, self.p_bar_upper_w),
        };
        self.warm = Some(shift_hint(&sol.x, 7, 3));
        Ok((cmd, diag_from(&sol, predicted, false)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::TankSpec;
    use approx::assert_abs_diff_eq;

    const GPM: f64 = 0.0037854118 / 60.0;

    fn spec() -> TankSpec {
        TankSpec::default()
    }

    fn amb() -> AmbientConditions {
        AmbientConditions::default()
    }

    fn flat_prices(n: usize) -> Vec<f64> {
        vec![0.21; n]
    }

    #[test]
    fn both_sensors_hot_keeps_both_elements_off() {
        let ts = ThermostatState::default();
        let hot = fahrenheit_to_kelvin(130.0);
        let (cmd, next) = thermostat_step(ts, hot, hot, 1130.0, 1130.0);
        assert_eq!(cmd, ControlCommand::OFF);
        assert!(!next.heating_lower && !next.heating_upper);
    }

    #[test]
    fn cold_upper_sensor_preempts_the_lower_element() {
        let ts = ThermostatState::default();
        let cold = fahrenheit_to_kelvin(110.0);
        let (cmd, next) = thermostat_step(ts, cold, cold, 1130.0, 1130.0);
        assert_eq!(cmd.p_upper_w, 1130.0);
        assert_eq!(cmd.p_lower_w, 0.0);
        assert!(next.heating_upper);
    }

    #[test]
    fn upper_latch_holds_inside_the_deadband() {
        // two-step trace: upper trips at 110F, keeps running at 120F
        // because 120F is still below the 125F stop threshold
        let ts = ThermostatState::default();
        let (_, ts) = thermostat_step(
            ts,
            fahrenheit_to_kelvin(110.0),
            fahrenheit_to_kelvin(110.0),
            1130.0,
            1130.0,
        );
        let (cmd, ts) = thermostat_step(
            ts,
            fahrenheit_to_kelvin(120.0),
            fahrenheit_to_kelvin(110.0),
            1130.0,
            1130.0,
        );
        assert_eq!(cmd.p_upper_w, 1130.0);
        assert_eq!(cmd.p_lower_w, 0.0);
        // once the upper passes 125F it releases and the lower takes over
        let (cmd, _) = thermostat_step(
            ts,
            fahrenheit_to_kelvin(125.1),
            fahrenheit_to_kelvin(110.0),
            1130.0,
            1130.0,
        );
        assert_eq!(cmd.p_upper_w, 0.0);
        assert_eq!(cmd.p_lower_w, 1130.0);
    }

    #[test]
    fn no_chatter_inside_the_deadband() {
        let mut ts = ThermostatState::default();
        let mid = fahrenheit_to_kelvin(120.0);
        for _ in 0..10 {
            let (cmd, next) = thermostat_step(ts, mid, mid, 1130.0, 1130.0);
            assert_eq!(cmd, ControlCommand::OFF);
            ts = next;
        }
    }

    #[test]
    fn on_off_conversion_front_loads_the_duty() {
        assert_eq!(to_on_off(0.0, 1130.0, 600.0, 1.0), 0);
        assert_eq!(to_on_off(1130.0, 1130.0, 600.0, 1.0), 600);
        assert_eq!(to_on_off(1130.0 / 3.0, 1130.0, 600.0, 1.0), 200);
        // energy error bounded by one quantum
        for frac in [0.137, 0.5004, 0.9991] {
            let on = to_on_off(frac * 1130.0, 1130.0, 600.0, 30.0);
            let delivered = on as f64 * 1130.0 * 30.0;
            let target = frac * 1130.0 * 600.0;
            assert!((delivered - target).abs() <= 1130.0 * 30.0);
        }
    }

    #[test]
    fn isotonic_adjustment_fixes_inverted_triples() {
        // small inversion from sensor noise: upper pair pooled
        let adj = adjust_initial_ordering([320.0, 325.0, 324.7]);
        assert_abs_diff_eq!(adj[0], 320.0);
        assert_abs_diff_eq!(adj[1], 324.85);
        assert_abs_diff_eq!(adj[2], 324.85);
        // already ordered: untouched
        let adj = adjust_initial_ordering([300.0, 310.0, 320.0]);
        assert_eq!(adj, [300.0, 310.0, 320.0]);
        // fully inverted: single pool at the mean
        let adj = adjust_initial_ordering([330.0, 320.0, 310.0]);
        for v in adj {
            assert_abs_diff_eq!(v, 320.0, epsilon = 1e-12);
        }
        // mean is preserved in every case
        let t = [321.4, 319.2, 318.9];
        let adj = adjust_initial_ordering(t);
        assert_abs_diff_eq!(
            adj.iter().sum::<f64>(),
            t.iter().sum::<f64>(),
            epsilon = 1e-9
        );
        assert!(adj[0] <= adj[1] && adj[1] <= adj[2]);
    }

    #[test]
    fn hot_tank_with_flat_prices_commands_zero_power() {
        let cfg = MpcConfig::default();
        let n = cfg.n_steps();
        let mut mpc =
            OneNodeMpc::new(cfg, OneNodeParams::default(), 1130.0, amb()).unwrap();
        let hot = fahrenheit_to_kelvin(130.0);
        let sensors = [hot; 8];
        let (cmd, diag) = mpc.step(&sensors, &vec![0.0; n], &flat_prices(n)).unwrap();
        assert_eq!(diag.status, QpStatus::Optimal);
        assert!(!diag.fallback);
        assert!(cmd.p_lower_w <= 1130.0 * 1e-4, "p = {}", cmd.p_lower_w);
        assert_eq!(cmd.p_upper_w, 0.0);
    }

    #[test]
    fn cold_tank_with_flat_prices_heats_immediately() {
        let cfg = MpcConfig::default();
        let n = cfg.n_steps();
        let mut mpc =
            OneNodeMpc::new(cfg, OneNodeParams::default(), 1130.0, amb()).unwrap();
        let just_cold = cfg.t_low_k - 0.5;
        let sensors = [just_cold; 8];
        let (cmd, diag) = mpc.step(&sensors, &vec![0.0; n], &flat_prices(n)).unwrap();
        assert_eq!(diag.status, QpStatus::Optimal);
        assert!(cmd.p_lower_w > 100.0, "p = {}", cmd.p_lower_w);
    }

    #[test]
    fn three_node_hot_tank_only_trickle_heats_the_upper_node() {
        let cfg = MpcConfig::default();
        let n = cfg.n_steps();
        let mut mpc =
            ThreeNodeMpc::new(cfg, ThreeNodeParams::default(), 1130.0, 1130.0, amb()).unwrap();
        let hot = fahrenheit_to_kelvin(130.0);
        let sensors = [hot; 8];
        let (cmd, diag) = mpc.step(&sensors, &vec![0.0; n], &flat_prices(n)).unwrap();
        assert_eq!(diag.status, QpStatus::Optimal);
        assert!(cmd.p_lower_w <= 0.1, "p_lower = {}", cmd.p_lower_w);
        // no bulk heating; but the upper node sheds heat faster than the
        // middle (U_u/C_u >> U_m/C_m), so from equal temperatures the
        // ordering constraints force a ~20 W maintenance trickle that
        // offsets the differential standing loss
        assert!(
            cmd.p_upper_w > 5.0 && cmd.p_upper_w < 30.0,
            "p_upper = {}",
            cmd.p_upper_w
        );
    }

    #[test]
    fn three_node_solution_respects_stratification_ordering() {
        // stressed instance: cold start, draws, peak-price window ahead
        let cfg = MpcConfig::default();
        let n = cfg.n_steps();
        let params = ThreeNodeParams::default();
        let mut flows = vec![0.0; n];
        for (j, f) in flows.iter_mut().enumerate() {
            if j % 9 == 3 {
                *f = 0.4 * GPM;
            }
        }
        let mut prices = flat_prices(n);
        for p in prices.iter_mut().skip(30).take(18) {
            *p = 0.47;
        }
        let t0 = [300.0, 317.0, 321.0];
        let qp =
            build_three_node_qp(&cfg, &params, 1130.0, 1130.0, t0, &flows, &prices, &amb());
        let sol = solve_qp(&qp, &SolverOptions::default());
        assert_eq!(sol.status, QpStatus::Optimal);
        for j in 0..n {
            let t = three_node_layout(j).4.map(|i| sol.x[i]);
            assert!(t[0] <= t[1] + 1e-6, "step {j}: {} > {}", t[0], t[1]);
            assert!(t[1] <= t[2] + 1e-6, "step {j}: {} > {}", t[1], t[2]);
        }
    }

    #[test]
    fn inverted_sensors_still_solve_to_optimal() {
        let cfg = MpcConfig::default();
        let n = cfg.n_steps();
        let mut mpc =
            ThreeNodeMpc::new(cfg, ThreeNodeParams::default(), 1130.0, 1130.0, amb()).unwrap();
        // measurement noise puts the middle sensor 0.3 K above the upper
        let mut sensors = [318.0; 8];
        sensors[0] = 310.0;
        sensors[6] = 321.5;
        sensors[7] = 321.2;
        let (_, diag) = mpc.step(&sensors, &vec![0.0; n], &flat_prices(n)).unwrap();
        assert_eq!(diag.status, QpStatus::Optimal);
        assert!(!diag.fallback);
    }

    #[test]
    fn first_action_is_deterministic() {
        let cfg = MpcConfig::default();
        let n = cfg.n_steps();
        let sensors = [318.5; 8];
        let flows = vec![0.2 * GPM; n];
        let run = || {
            let mut mpc =
                OneNodeMpc::new(cfg, OneNodeParams::default(), 1130.0, amb()).unwrap();
            let (cmd, _) = mpc.step(&sensors, &flows, &flat_prices(n)).unwrap();
            cmd.p_lower_w
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn raising_the_peak_price_never_raises_peak_energy() {
        let cfg = MpcConfig::default();
        let n = cfg.n_steps();
        let params = OneNodeParams::default();
        let flows = vec![0.15 * GPM; n];
        let peak = 24..42; // a 3 h block mid-horizon
        let peak_energy = |peak_price: f64| {
            let mut prices = flat_prices(n);
            for j in peak.clone() {
                prices[j] = peak_price;
            }
            let qp =
                build_one_node_qp(&cfg, &params, 1130.0, 318.0, &flows, &prices, &amb());
            let sol = solve_qp(&qp, &SolverOptions::default());
            assert_eq!(sol.status, QpStatus::Optimal);
            peak.clone().map(|j| sol.x[one_node_layout(j).0]).sum::<f64>()
        };
        let mut prev = f64::INFINITY;
        for price in [0.21, 0.3, 0.47, 0.8, 2.0] {
            let e = peak_energy(price);
            assert!(e <= prev + 1e-5, "peak energy rose: {prev} -> {e} at price {price}");
            prev = e;
        }
    }

    #[test]
    fn one_node_mpc_solves_the_default_horizon_quickly() {
        let cfg = MpcConfig::default();
        let n = cfg.n_steps();
        assert_eq!(n, 108);
        let mut mpc =
            OneNodeMpc::new(cfg, OneNodeParams::default(), 1130.0, amb()).unwrap();
        let sensors = [cfg.t_low_k + 1.0; 8];
        let flows: Vec<f64> = (0..n).map(|j| if j % 12 < 2 { 0.3 * GPM } else { 0.0 }).collect();
        let (_, diag) = mpc.step(&sensors, &flows, &flat_prices(n)).unwrap();
        assert_eq!(diag.status, QpStatus::Optimal);
        assert!(diag.kkt_residual <= 1e-6);
        // second call exercises the shifted warm start
        let (_, diag2) = mpc.step(&sensors, &flows, &flat_prices(n)).unwrap();
        assert_eq!(diag2.status, QpStatus::Optimal);
        assert!(diag2.iterations <= diag.iterations * 2 + 2);
    }

    #[test]
    fn state_source_selects_the_configured_sensors() {
        let cfg =
            MpcConfig { state_source: StateSource::MidTankMean, ..MpcConfig::default() };
        let mpc = OneNodeMpc::new(cfg, OneNodeParams::default(), 1130.0, amb()).unwrap();
        let sensors = [300.0, 301.0, 302.0, 303.0, 304.0, 305.0, 340.0, 350.0];
        assert_abs_diff_eq!(mpc.state_from_sensors(&sensors), 303.0, epsilon = 1e-12);
        let cfg = MpcConfig::default();
        let mpc = OneNodeMpc::new(cfg, OneNodeParams::default(), 1130.0, amb()).unwrap();
        assert_eq!(mpc.state_from_sensors(&sensors), 340.0);
    }

    #[test]
    fn forecast_length_mismatch_is_reported() {
        let cfg = MpcConfig::default();
        let mut mpc =
            OneNodeMpc::new(cfg, OneNodeParams::default(), 1130.0, amb()).unwrap();
        let sensors = [320.0; 8];
        let err = mpc.step(&sensors, &[0.0; 10], &[0.21; 10]).unwrap_err();
        assert_eq!(err, ControlError::ForecastLength { expected: 108, got: 10 });
    }

    #[test]
    fn default_spec_power_ratings_are_plausible() {
        let s = spec();
        assert_eq!(s.p_rated_lower_w, 1130.0);
        assert_eq!(s.p_rated_upper_w, 1130.0);
    }
}
