//! Multi-node stratified tank simulator used as the virtual plant.
//!
//! The tank is a vertical stack of equal-volume nodes, bottom to top. Each
//! 1 s step applies, in order: plug-flow advection of the draw, axial
//! conduction between neighbours, ambient loss, element heat injection, and
//! an instant-mix buoyancy pass that removes temperature inversions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::units::{AmbientConditions, TankSpec, CP_WATER, RHO_WATER};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error(
        "draw of {draw_m3} m^3 in one {dt_s} s step exceeds a node volume \
         {node_volume_m3} m^3 (flow too fast for the advection scheme)"
    )]
    CflViolation { draw_m3: f64, node_volume_m3: f64, dt_s: f64 },
    #[error("node temperature {t_k} K left the liquid-water range [273.15, 373.15)")]
    TemperatureOutOfRange { t_k: f64 },
    #[error("invalid simulator parameters: {0}")]
    InvalidParams(String),
}

/// Discretization and exchange coefficients of the plant simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub n_nodes: usize,
    pub sim_dt_s: f64,
    /// Ambient-loss conductance of each node, W/K; sums to the whole-tank UA.
    pub ua_per_node_w_per_k: Vec<f64>,
    /// Conduction between adjacent nodes, W/K.
    pub k_axial_w_per_k: f64,
    pub element_node_lower: usize,
    pub element_node_upper: usize,
}

impl SimParams {
    /// Derives simulator coefficients from two measurable targets:
    ///
    /// - `ua_total_w_per_k`: the whole-tank standby loss conductance,
    ///   spread uniformly over the nodes;
    /// - `destrat_time_constant_s`: the decay time of the slowest thermal
    ///   mode, which sets how long a half-hot/half-cold tank takes to even
    ///   out. For an explicit diffusion stencil the slowest mode of an
    ///   n-node stack decays at rate (k/(rho cp V_node))(2 - 2cos(pi/n)),
    ///   so k follows from the requested time constant.
    pub fn calibrated(
        spec: &TankSpec,
        n_nodes: usize,
        ua_total_w_per_k: f64,
        destrat_time_constant_s: f64,
    ) -> Self {
        let v_node = spec.total_volume_m3 / n_nodes as f64;
        let mode = 2.0 - 2.0 * (std::f64::consts::PI / n_nodes as f64).cos();
        SimParams {
            n_nodes,
            sim_dt_s: 1.0,
            ua_per_node_w_per_k: vec![ua_total_w_per_k / n_nodes as f64; n_nodes],
            k_axial_w_per_k: RHO_WATER * CP_WATER * v_node / (destrat_time_constant_s * mode),
            element_node_lower: node_at_height(spec.lower_element_frac, n_nodes),
            element_node_upper: node_at_height(spec.upper_element_frac, n_nodes),
        }
    }

    /// Default 20-node calibration: 1.27 W/K whole-tank UA and a 36 h
    /// slowest-mode destratification time constant.
    pub fn default_for(spec: &TankSpec) -> Self {
        Self::calibrated(spec, 20, 1.27, 36.0 * 3600.0)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let mut problems = Vec::new();
        if self.n_nodes < 10 {
            problems.push(format!("need at least 10 nodes, got {}", self.n_nodes));
        }
        if !(self.sim_dt_s > 0.0) {
            problems.push(format!("sim_dt {} s must be positive", self.sim_dt_s));
        }
        if self.ua_per_node_w_per_k.len() != self.n_nodes {
            problems.push(format!(
                "ua_per_node has {} entries for {} nodes",
                self.ua_per_node_w_per_k.len(),
                self.n_nodes
            ));
        }
        if self.ua_per_node_w_per_k.iter().any(|u| !(*u >= 0.0)) {
            problems.push("ua_per_node entries must be non-negative".into());
        }
        if !(self.k_axial_w_per_k >= 0.0) {
            problems.push(format!("k_axial {} W/K must be non-negative", self.k_axial_w_per_k));
        }
        if self.element_node_lower >= self.element_node_upper
            || self.element_node_upper >= self.n_nodes
        {
            problems.push(format!(
                "element nodes ({}, {}) must be ordered and inside 0..{}",
                self.element_node_lower, self.element_node_upper, self.n_nodes
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SimError::InvalidParams(problems.join("; ")))
        }
    }

    pub fn ua_total_w_per_k(&self) -> f64 {
        self.ua_per_node_w_per_k.iter().sum()
    }
}

/// Index of the node containing height fraction `frac` (node k spans
/// [k/n, (k+1)/n) of the tank height).
pub fn node_at_height(frac: f64, n_nodes: usize) -> usize {
    ((frac * n_nodes as f64).floor() as usize).min(n_nodes - 1)
}

/// Node temperatures in kelvin, index 0 at the bottom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TankSimState {
    nodes: Vec<f64>,
}

impl TankSimState {
    pub fn uniform(n_nodes: usize, t_k: f64) -> Self {
        TankSimState { nodes: vec![t_k; n_nodes] }
    }

    /// Post-recovery initial condition: nodes at and above the lower element
    /// at `t_hot_k`, nodes below at `t_cold_k`.
    pub fn heated_above_lower_element(params: &SimParams, t_hot_k: f64, t_cold_k: f64) -> Self {
        let nodes = (0..params.n_nodes)
            .map(|k| if k >= params.element_node_lower { t_hot_k } else { t_cold_k })
            .collect();
        TankSimState { nodes }
    }

    pub fn from_nodes(nodes: Vec<f64>) -> Self {
        TankSimState { nodes }
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn top_temp_k(&self) -> f64 {
        *self.nodes.last().expect("tank has nodes")
    }

    pub fn mean_temp_k(&self) -> f64 {
        self.nodes.iter().sum::<f64>() / self.nodes.len() as f64
    }

    /// Thermal energy relative to 0 K, joules.
    pub fn energy_j(&self, spec: &TankSpec) -> f64 {
        let v_node = spec.total_volume_m3 / self.nodes.len() as f64;
        CP_WATER * RHO_WATER * v_node * self.nodes.iter().sum::<f64>()
    }
}

/// Per-step energy accounting, all in joules over one `sim_dt`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepAudit {
    pub electrical_j: f64,
    pub inlet_enthalpy_j: f64,
    pub outlet_enthalpy_j: f64,
    pub ambient_loss_j: f64,
    /// Temperature of the water drawn this step (top node before advection).
    pub outlet_temp_k: f64,
}

/// Advances the plant one `sim_dt` step.
///
/// `flow_m3_per_s` is the draw averaged over the step; the drawn volume
/// must not exceed one node volume per step.
pub fn sim_step(
    state: &mut TankSimState,
    p_lower_w: f64,
    p_upper_w: f64,
    flow_m3_per_s: f64,
    ambient: &AmbientConditions,
    spec: &TankSpec,
    params: &SimParams,
) -> Result<StepAudit, SimError> {
    let n = params.n_nodes;
    debug_assert_eq!(state.nodes.len(), n);
    debug_assert!(p_lower_w >= 0.0 && p_upper_w >= 0.0);
    let dt = params.sim_dt_s;
    let v_node = spec.total_volume_m3 / n as f64;
    let c_node = CP_WATER * RHO_WATER * v_node;

    let mut audit = StepAudit { outlet_temp_k: state.top_temp_k(), ..StepAudit::default() };

    // plug-flow advection: the draw pushes every node's share upward and
    // feeds inlet water into the bottom node
    let draw_m3 = flow_m3_per_s * dt;
    if draw_m3 > v_node {
        return Err(SimError::CflViolation { draw_m3, node_volume_m3: v_node, dt_s: dt });
    }
    if draw_m3 > 0.0 {
        let f = draw_m3 / v_node;
        audit.inlet_enthalpy_j = CP_WATER * RHO_WATER * draw_m3 * ambient.t_inlet_k;
        audit.outlet_enthalpy_j = CP_WATER * RHO_WATER * draw_m3 * state.nodes[n - 1];
        for k in (1..n).rev() {
            state.nodes[k] += f * (state.nodes[k - 1] - state.nodes[k]);
        }
        state.nodes[0] += f * (ambient.t_inlet_k - state.nodes[0]);
    }

    // axial conduction, flux form so neighbour exchanges cancel exactly
    if params.k_axial_w_per_k > 0.0 {
        let scale = params.k_axial_w_per_k * dt / c_node;
        let fluxes: Vec<f64> =
            (0..n - 1).map(|k| scale * (state.nodes[k + 1] - state.nodes[k])).collect();
        for k in 0..n {
            let incoming = if k < n - 1 { fluxes[k] } else { 0.0 };
            let outgoing = if k > 0 { fluxes[k - 1] } else { 0.0 };
            state.nodes[k] += incoming - outgoing;
        }
    }

    // ambient loss
    for k in 0..n {
        let loss_j = params.ua_per_node_w_per_k[k] * (state.nodes[k] - ambient.t_ambient_k) * dt;
        state.nodes[k] -= loss_j / c_node;
        audit.ambient_loss_j += loss_j;
    }

    // element injection
    state.nodes[params.element_node_lower] += p_lower_w * dt / c_node;
    state.nodes[params.element_node_upper] += p_upper_w * dt / c_node;
    audit.electrical_j = (p_lower_w + p_upper_w) * dt;

    // buoyancy: replace each maximal inverted run by its volume-weighted
    // mean (equal node volumes, so a plain mean), bottom stays coolest
    mix_inversions(&mut state.nodes);

    for &t in &state.nodes {
        if !(273.15..373.15).contains(&t) {
            return Err(SimError::TemperatureOutOfRange { t_k: t });
        }
    }
    Ok(audit)
}

/// Pool-adjacent-violators pass: after it, temperatures are non-decreasing
/// bottom to top, each pooled run holding its mean. Preserves total energy
/// and never increases variance.
fn mix_inversions(nodes: &mut [f64]) {
    // (sum, count) blocks merged while inverted
    let mut sums: Vec<f64> = Vec::with_capacity(nodes.len());
    let mut counts: Vec<usize> = Vec::with_capacity(nodes.len());
    for k in 0..nodes.len() {
        sums.push(nodes[k]);
        counts.push(1);
        while sums.len() > 1 {
            let m = sums.len();
            let upper_mean = sums[m - 1] / counts[m - 1] as f64;
            let lower_mean = sums[m - 2] / counts[m - 2] as f64;
            if lower_mean > upper_mean {
                let s = sums.pop().expect("non-empty");
                let c = counts.pop().expect("non-empty");
                sums[m - 2] += s;
                counts[m - 2] += c;
            } else {
                break;
            }
        }
    }
    let mut k = 0;
    for (s, c) in sums.iter().zip(&counts) {
        let mean = s / *c as f64;
        for slot in nodes[k..k + c].iter_mut() {
            *slot = mean;
        }
        k += c;
    }
}

/// Samples the eight side sensors: each reads the node containing its
/// mounting height.
pub fn read_sensors(state: &TankSimState, spec: &TankSpec, params: &SimParams) -> [f64; 8] {
    let mut out = [0.0; 8];
    for (i, frac) in spec.sensor_fracs.iter().enumerate() {
        out[i] = state.nodes[node_at_height(*frac, params.n_nodes)];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::fahrenheit_to_kelvin;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn setup() -> (TankSpec, SimParams, AmbientConditions) {
        let spec = TankSpec::default();
        let params = SimParams::default_for(&spec);
        (spec, params, AmbientConditions::default())
    }

    #[test]
    fn default_calibration_hits_ua_and_destrat_targets() {
        let (spec, params, _) = setup();
        params.validate().unwrap();
        assert_eq!(params.n_nodes, 20);
        assert_eq!(params.element_node_lower, 4);
        assert_eq!(params.element_node_upper, 14);
        assert_abs_diff_eq!(params.ua_total_w_per_k(), 1.27, epsilon = 1e-12);
        assert_abs_diff_eq!(params.k_axial_w_per_k, 12.399748569150871, epsilon = 1e-9);
        // the requested slowest-mode decay rate comes back out of the coefficients
        let v_node = spec.total_volume_m3 / 20.0;
        let rate = params.k_axial_w_per_k / (CP_WATER * RHO_WATER * v_node)
            * (2.0 - 2.0 * (std::f64::consts::PI / 20.0).cos());
        assert_abs_diff_eq!(1.0 / rate, 36.0 * 3600.0, epsilon = 1e-3);
    }

    #[test]
    fn adiabatic_heating_conserves_energy_exactly() {
        let (spec, mut params, ambient) = setup();
        params.ua_per_node_w_per_k = vec![0.0; 20];
        let mut state = TankSimState::uniform(20, 300.0);
        let e0 = state.energy_j(&spec);
        let mut injected = 0.0;
        for _ in 0..3600 {
            let audit =
                sim_step(&mut state, 1130.0, 1130.0, 0.0, &ambient, &spec, &params).unwrap();
            injected += audit.electrical_j;
        }
        let e1 = state.energy_j(&spec);
        assert_abs_diff_eq!((e1 - e0 - injected) / injected, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn each_step_closes_its_energy_audit() {
        let (spec, params, ambient) = setup();
        let mut state =
            TankSimState::heated_above_lower_element(&params, fahrenheit_to_kelvin(120.0), 293.15);
        for step in 0..7200u32 {
            let flow = if step % 100 < 30 { 1e-4 } else { 0.0 };
            let before = state.energy_j(&spec);
            let audit =
                sim_step(&mut state, 900.0, 500.0, flow, &ambient, &spec, &params).unwrap();
            let after = state.energy_j(&spec);
            let expected = audit.electrical_j + audit.inlet_enthalpy_j
                - audit.outlet_enthalpy_j
                - audit.ambient_loss_j;
            assert_abs_diff_eq!(after - before, expected, epsilon = 1e-4);
        }
    }

    #[test]
    fn full_node_draw_shifts_the_profile_up_one_node() {
        let (spec, mut params, ambient) = setup();
        params.ua_per_node_w_per_k = vec![0.0; 20];
        params.k_axial_w_per_k = 0.0;
        let profile: Vec<f64> = (0..20).map(|k| 300.0 + k as f64).collect();
        let mut state = TankSimState::from_nodes(profile.clone());
        let v_node = spec.total_volume_m3 / 20.0;
        let audit =
            sim_step(&mut state, 0.0, 0.0, v_node / 1.0, &ambient, &spec, &params).unwrap();
        assert_abs_diff_eq!(state.nodes()[0], ambient.t_inlet_k, epsilon = 1e-12);
        for k in 1..20 {
            assert_abs_diff_eq!(state.nodes()[k], profile[k - 1], epsilon = 1e-12);
        }
        assert_abs_diff_eq!(audit.outlet_temp_k, 319.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            audit.outlet_enthalpy_j,
            CP_WATER * RHO_WATER * v_node * 319.0,
            epsilon = 1e-3
        );
    }

    #[test]
    fn overfast_draw_is_rejected() {
        let (spec, params, ambient) = setup();
        let mut state = TankSimState::uniform(20, 300.0);
        let v_node = spec.total_volume_m3 / 20.0;
        let err = sim_step(&mut state, 0.0, 0.0, v_node * 1.5, &ambient, &spec, &params)
            .unwrap_err();
        assert!(matches!(err, SimError::CflViolation { .. }));
    }

    #[test]
    fn buoyancy_mixes_maximal_inverted_runs_to_their_mean() {
        let mut nodes = vec![310.0, 305.0, 300.0, 320.0];
        mix_inversions(&mut nodes);
        assert_eq!(nodes, vec![305.0, 305.0, 305.0, 320.0]);

        // heating the bottom of an already uniform region pools everything
        let mut nodes = vec![301.0, 300.0, 300.0, 300.0];
        mix_inversions(&mut nodes);
        for t in &nodes {
            assert_abs_diff_eq!(*t, 300.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn element_heat_rises_through_instant_mixing() {
        let (spec, mut params, ambient) = setup();
        params.ua_per_node_w_per_k = vec![0.0; 20];
        let mut state = TankSimState::uniform(20, 310.0);
        for _ in 0..600 {
            sim_step(&mut state, 1130.0, 0.0, 0.0, &ambient, &spec, &params).unwrap();
        }
        // everything from the lower element up is one mixed region; below it
        // only conduction acts, so the bottom stays behind
        let nodes = state.nodes();
        for k in params.element_node_lower..19 {
            assert_abs_diff_eq!(nodes[k], nodes[19], epsilon = 1e-9);
        }
        assert!(nodes[0] < nodes[19]);
        assert!(nodes[19] > 310.0);
    }

    #[test]
    fn half_hot_tank_destratifies_monotonically_over_days() {
        let (spec, params, ambient) = setup();
        let nodes: Vec<f64> =
            (0..20).map(|k| if k < 10 { 292.0 } else { 333.15 }).collect();
        let mut state = TankSimState::from_nodes(nodes);
        let mut prev_spread = f64::INFINITY;
        let mut lost = 0.0;
        let e0 = state.energy_j(&spec);
        for hour in 0..96 {
            for _ in 0..3600 {
                let audit =
                    sim_step(&mut state, 0.0, 0.0, 0.0, &ambient, &spec, &params).unwrap();
                lost += audit.ambient_loss_j;
            }
            let spread = state.nodes()[19] - state.nodes()[0];
            assert!(
                spread <= prev_spread + 1e-12,
                "stratification grew at hour {hour}: {spread} > {prev_spread}"
            );
            prev_spread = spread;
        }
        // after four days the initial 41 K split has collapsed and the
        // energy balance closes against the integrated ambient loss
        assert!(prev_spread < 3.0, "spread still {prev_spread} K after 4 days");
        let e1 = state.energy_j(&spec);
        assert_abs_diff_eq!((e0 - e1 - lost) / e0.abs(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn sensors_read_their_mounting_nodes() {
        let (spec, params, _) = setup();
        let nodes: Vec<f64> = (0..20).map(|k| 300.0 + k as f64).collect();
        let state = TankSimState::from_nodes(nodes);
        let sensors = read_sensors(&state, &spec, &params);
        let expected_nodes = [1usize, 5, 8, 11, 15, 18, 4, 14];
        for (i, node) in expected_nodes.iter().enumerate() {
            assert_abs_diff_eq!(sensors[i], 300.0 + *node as f64, epsilon = 1e-12);
        }
    }

    #[test]
    fn uniform_tank_loses_heat_at_the_whole_tank_ua() {
        let (spec, params, ambient) = setup();
        let mut state = TankSimState::uniform(20, 322.0);
        let audit = sim_step(&mut state, 0.0, 0.0, 0.0, &ambient, &spec, &params).unwrap();
        let expected = 1.27 * (322.0 - ambient.t_ambient_k) * 1.0;
        assert_abs_diff_eq!(audit.ambient_loss_j, expected, epsilon = 1e-9);
    }

    #[test]
    fn unheated_tank_relaxes_to_ambient() {
        let (spec, params, ambient) = setup();
        let mut state = TankSimState::uniform(20, 330.0);
        for _ in 0..40 * 86400 {
            sim_step(&mut state, 0.0, 0.0, 0.0, &ambient, &spec, &params).unwrap();
        }
        // 40 days is ~5.5 tank time constants: within 0.2 K of ambient
        for t in state.nodes() {
            assert_abs_diff_eq!(*t, ambient.t_ambient_k, epsilon = 0.2);
        }
    }

    #[test]
    fn runaway_heating_fails_loudly() {
        let (spec, mut params, ambient) = setup();
        params.ua_per_node_w_per_k = vec![0.0; 20];
        let mut state = TankSimState::uniform(20, 370.0);
        let mut failed = false;
        for _ in 0..100_000 {
            if let Err(e) = sim_step(&mut state, 1130.0, 1130.0, 0.0, &ambient, &spec, &params) {
                assert!(matches!(e, SimError::TemperatureOutOfRange { .. }));
                failed = true;
                break;
            }
        }
        assert!(failed, "expected the overheated tank to be rejected");
    }

    proptest! {
        #[test]
        fn buoyancy_preserves_mean_and_reduces_variance(
            raw in proptest::collection::vec(280.0f64..340.0, 20)
        ) {
            let mut nodes = raw.clone();
            mix_inversions(&mut nodes);
            for w in nodes.windows(2) {
                prop_assert!(w[0] <= w[1] + 1e-12);
            }
            let mean_before: f64 = raw.iter().sum::<f64>() / 20.0;
            let mean_after: f64 = nodes.iter().sum::<f64>() / 20.0;
            prop_assert!((mean_before - mean_after).abs() < 1e-9);
            let var = |xs: &[f64], m: f64| xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
            prop_assert!(var(&nodes, mean_after) <= var(&raw, mean_before) + 1e-9);
        }
    }
}
