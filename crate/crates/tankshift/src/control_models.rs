//! Grey-box one-node and three-node tank models used by the predictive
//! controllers, with forward-Euler discretization at a sub-interval timestep
//! and affine interval maps for QP assembly.

use nalgebra::{Matrix3, Matrix3x2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::units::{AmbientConditions, CP_WATER, RHO_WATER};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),
    #[error(
        "forward-Euler step of {dt_s} s is unstable for these parameters \
         (spectral radius {spectral_radius:.4})"
    )]
    UnstableDiscretization { dt_s: f64, spectral_radius: f64 },
}

/// Single mixed-volume model: the tank is one node of volume `volume_m3`
/// losing heat through conductance `ua_w_per_k`, heated by the lower element.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneNodeParams {
    pub volume_m3: f64,
    pub ua_w_per_k: f64,
}

impl Default for OneNodeParams {
    /// Values identified from a well-mixed 50 gal tank.
    fn default() -> Self {
        OneNodeParams { volume_m3: 0.156, ua_w_per_k: 1.27 }
    }
}

impl OneNodeParams {
    pub fn heat_capacity_j_per_k(&self) -> f64 {
        CP_WATER * RHO_WATER * self.volume_m3
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.volume_m3 > 0.0 && self.ua_w_per_k >= 0.0 {
            Ok(())
        } else {
            Err(ModelError::InvalidParams(format!(
                "volume {} m^3, UA {} W/K",
                self.volume_m3, self.ua_w_per_k
            )))
        }
    }
}

/// Three stacked nodes: lower (unheated, fed by inlet), middle (lower
/// element), upper (upper element). Inter-node mixing conductances `k_ml`
/// and `k_um` stand in for buoyancy-driven exchange; the lower volume is
/// whatever remains of `v_total_m3`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreeNodeParams {
    pub u_l_w_per_k: f64,
    pub u_m_w_per_k: f64,
    pub u_u_w_per_k: f64,
    pub k_ml_w_per_k: f64,
    pub k_um_w_per_k: f64,
    pub v_m_m3: f64,
    pub v_u_m3: f64,
    pub v_total_m3: f64,
}

impl Default for ThreeNodeParams {
    /// Values identified from a 50 gal two-element tank.
    fn default() -> Self {
        ThreeNodeParams {
            u_l_w_per_k: 1.15,
            u_m_w_per_k: 0.092,
            u_u_w_per_k: 0.662,
            k_ml_w_per_k: 3.59,
            k_um_w_per_k: 0.703,
            v_m_m3: 0.0932,
            v_u_m3: 0.0546,
            v_total_m3: 0.0415 + 0.0932 + 0.0546,
        }
    }
}

impl ThreeNodeParams {
    pub fn v_l_m3(&self) -> f64 {
        self.v_total_m3 - self.v_m_m3 - self.v_u_m3
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("U_l", self.u_l_w_per_k),
            ("U_m", self.u_m_w_per_k),
            ("U_u", self.u_u_w_per_k),
            ("K_ml", self.k_ml_w_per_k),
            ("K_um", self.k_um_w_per_k),
        ] {
            if !(v >= 0.0) {
                problems.push(format!("{name} = {v} must be non-negative"));
            }
        }
        for (name, v) in [
            ("V_m", self.v_m_m3),
            ("V_u", self.v_u_m3),
            ("V_l", self.v_l_m3()),
        ] {
            if !(v > 0.0) {
                problems.push(format!("{name} = {v} m^3 must be positive"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ModelError::InvalidParams(problems.join("; ")))
        }
    }
}

/// Affine one-step map `T' = a T + b p + c` for the one-node model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineStep1 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl AffineStep1 {
    pub fn apply(&self, t: f64, p: f64) -> f64 {
        self.a * t + self.b * p + self.c
    }
}

/// Affine one-step map `x' = A x + B [p_m, p_u] + c` for the three-node
/// model, state ordered bottom to top `[T_l, T_m, T_u]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineStep3 {
    pub a: Matrix3<f64>,
    pub b: Matrix3x2<f64>,
    pub c: Vector3<f64>,
}

impl AffineStep3 {
    pub fn apply(&self, x: Vector3<f64>, p_m: f64, p_u: f64) -> Vector3<f64> {
        self.a * x + self.b * Vector3::new(p_m, p_u, 0.0).xy() + self.c
    }
}

/// One forward-Euler substep of the one-node dynamics.
pub fn one_node_substep_affine(
    params: &OneNodeParams,
    ambient: &AmbientConditions,
    flow_m3_per_s: f64,
    dt_s: f64,
) -> AffineStep1 {
    let c_heat = params.heat_capacity_j_per_k();
    let loss = params.ua_w_per_k / c_heat;
    let wash = flow_m3_per_s / params.volume_m3;
    AffineStep1 {
        a: 1.0 - dt_s * (loss + wash),
        b: dt_s / c_heat,
        c: dt_s * (loss * ambient.t_ambient_k + wash * ambient.t_inlet_k),
    }
}

/// `m` composed substeps with constant power and flow over the interval.
pub fn one_node_interval_affine(
    params: &OneNodeParams,
    ambient: &AmbientConditions,
    flow_m3_per_s: f64,
    dt_s: f64,
    substeps: usize,
) -> AffineStep1 {
    let sub = one_node_substep_affine(params, ambient, flow_m3_per_s, dt_s / substeps as f64);
    let mut acc = AffineStep1 { a: 1.0, b: 0.0, c: 0.0 };
    for _ in 0..substeps {
        acc = AffineStep1 {
            a: sub.a * acc.a,
            b: sub.a * acc.b + sub.b,
            c: sub.a * acc.c + sub.c,
        };
    }
    acc
}

/// Advances the one-node temperature by one explicit Euler step.
pub fn one_node_step(
    t_k: f64,
    p_w: f64,
    flow_m3_per_s: f64,
    dt_s: f64,
    params: &OneNodeParams,
    ambient: &AmbientConditions,
) -> f64 {
    one_node_substep_affine(params, ambient, flow_m3_per_s, dt_s).apply(t_k, p_w)
}

/// One forward-Euler substep of the three-node dynamics. All three node
/// updates read the same pre-step state (simultaneous update).
pub fn three_node_substep_affine(
    params: &ThreeNodeParams,
    ambient: &AmbientConditions,
    flow_m3_per_s: f64,
    dt_s: f64,
) -> AffineStep3 {
    let c_l = CP_WATER * RHO_WATER * params.v_l_m3();
    let c_m = CP_WATER * RHO_WATER * params.v_m_m3;
    let c_u = CP_WATER * RHO_WATER * params.v_u_m3;
    let f = flow_m3_per_s;
    let (ta, ti) = (ambient.t_ambient_k, ambient.t_inlet_k);

    // continuous-time x' = M x + B u + g, rows [l, m, u]
    let m_ll = -(params.u_l_w_per_k / c_l + f / params.v_l_m3() + params.k_ml_w_per_k / c_l);
    let m_lm = params.k_ml_w_per_k / c_l;
    let m_ml = f / params.v_m_m3 + params.k_ml_w_per_k / c_m;
    let m_mm = -(params.u_m_w_per_k / c_m
        + f / params.v_m_m3
        + params.k_ml_w_per_k / c_m
        + params.k_um_w_per_k / c_m);
    let m_mu = params.k_um_w_per_k / c_m;
    let m_um = f / params.v_u_m3 + params.k_um_w_per_k / c_u;
    let m_uu = -(params.u_u_w_per_k / c_u + f / params.v_u_m3 + params.k_um_w_per_k / c_u);

    let m = Matrix3::new(m_ll, m_lm, 0.0, m_ml, m_mm, m_mu, 0.0, m_um, m_uu);
    let b = Matrix3x2::new(0.0, 0.0, 1.0 / c_m, 0.0, 0.0, 1.0 / c_u);
    let g = Vector3::new(
        params.u_l_w_per_k / c_l * ta + f / params.v_l_m3() * ti,
        params.u_m_w_per_k / c_m * ta,
        params.u_u_w_per_k / c_u * ta,
    );

    AffineStep3 {
        a: Matrix3::identity() + m * dt_s,
        b: b * dt_s,
        c: g * dt_s,
    }
}

/// `m` composed substeps with constant powers and flow over the interval.
pub fn three_node_interval_affine(
    params: &ThreeNodeParams,
    ambient: &AmbientConditions,
    flow_m3_per_s: f64,
    dt_s: f64,
    substeps: usize,
) -> AffineStep3 {
    let sub = three_node_substep_affine(params, ambient, flow_m3_per_s, dt_s / substeps as f64);
    let mut acc = AffineStep3 {
        a: Matrix3::identity(),
        b: Matrix3x2::zeros(),
        c: Vector3::zeros(),
    };
    for _ in 0..substeps {
        acc = AffineStep3 {
            a: sub.a * acc.a,
            b: sub.a * acc.b + sub.b,
            c: sub.a * acc.c + sub.c,
        };
    }
    acc
}

/// Advances the three-node state `[T_l, T_m, T_u]` by one explicit Euler step.
pub fn three_node_step(
    x: [f64; 3],
    p_m_w: f64,
    p_u_w: f64,
    flow_m3_per_s: f64,
    dt_s: f64,
    params: &ThreeNodeParams,
    ambient: &AmbientConditions,
) -> [f64; 3] {
    let step = three_node_substep_affine(params, ambient, flow_m3_per_s, dt_s);
    let out = step.apply(Vector3::new(x[0], x[1], x[2]), p_m_w, p_u_w);
    [out[0], out[1], out[2]]
}

/// Rejects parameter/timestep pairs whose Euler update amplifies state
/// (checked at zero flow; forecast flows only add damping on the diagonal).
pub fn check_one_node_stability(
    params: &OneNodeParams,
    dt_s: f64,
) -> Result<(), ModelError> {
    params.validate()?;
    let a = one_node_substep_affine(params, &AmbientConditions::default(), 0.0, dt_s).a;
    if a.abs() <= 1.0 + 1e-12 {
        Ok(())
    } else {
        Err(ModelError::UnstableDiscretization { dt_s, spectral_radius: a.abs() })
    }
}

/// Same guard for the three-node Euler update matrix.
pub fn check_three_node_stability(
    params: &ThreeNodeParams,
    dt_s: f64,
) -> Result<(), ModelError> {
    params.validate()?;
    let a = three_node_substep_affine(params, &AmbientConditions::default(), 0.0, dt_s).a;
    let rho = a
        .complex_eigenvalues()
        .iter()
        .map(|ev| ev.norm())
        .fold(0.0f64, f64::max);
    if rho <= 1.0 + 1e-12 {
        Ok(())
    } else {
        Err(ModelError::UnstableDiscretization { dt_s, spectral_radius: rho })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn ambient() -> AmbientConditions {
        AmbientConditions::default()
    }

    #[test]
    fn one_node_step_matches_hand_computed_value() {
        // T=320 K, p=1130 W, 36 gal/day steady flow, 300 s step
        let params = OneNodeParams::default();
        let flow = crate::units::gallons_to_m3(36.0) / crate::units::DAY_S;
        let next = one_node_step(320.0, 1130.0, flow, 300.0, &params, &ambient());
        assert_abs_diff_eq!(next, 320.42323812890635, epsilon = 1e-9);
        assert_abs_diff_eq!(params.heat_capacity_j_per_k(), 652282.8, epsilon = 1e-6);
    }

    #[test]
    fn three_node_step_matches_hand_computed_values() {
        // state [300, 318, 322] K, both elements 1130 W, 2 gal/min draw, 300 s
        let params = ThreeNodeParams::default();
        let flow = crate::units::gallons_to_m3(2.0) / 60.0;
        let next = three_node_step([300.0, 318.0, 322.0], 1130.0, 1130.0, flow, 300.0, &params, &ambient());
        assert_abs_diff_eq!(next[0], 293.8520995615795, epsilon = 1e-9);
        assert_abs_diff_eq!(next[1], 311.5097622522716, epsilon = 1e-9);
        assert_abs_diff_eq!(next[2], 320.6838739371199, epsilon = 1e-9);
        assert_abs_diff_eq!(params.v_l_m3(), 0.0415, epsilon = 1e-12);
    }

    #[test]
    fn interval_map_composes_two_substeps() {
        let params = OneNodeParams::default();
        let flow = crate::units::gallons_to_m3(36.0) / crate::units::DAY_S;
        let int = one_node_interval_affine(&params, &ambient(), flow, 600.0, 2);
        assert_abs_diff_eq!(int.a, 0.9927785147302426, epsilon = 1e-12);
        assert_abs_diff_eq!(int.b, 0.0009181827491034709, epsilon = 1e-15);
        assert_abs_diff_eq!(int.c, 2.118274064708635, epsilon = 1e-9);
        let direct = int.apply(320.0, 1130.0);
        let stepped = {
            let t1 = one_node_step(320.0, 1130.0, flow, 300.0, &params, &ambient());
            one_node_step(t1, 1130.0, flow, 300.0, &params, &ambient())
        };
        assert_abs_diff_eq!(direct, stepped, epsilon = 1e-9);
        assert_abs_diff_eq!(direct, 320.84494528487323, epsilon = 1e-9);
    }

    #[test]
    fn three_node_interval_map_composes_substeps() {
        let params = ThreeNodeParams::default();
        let flow = 1e-5;
        let int = three_node_interval_affine(&params, &ambient(), flow, 600.0, 2);
        let x0 = Vector3::new(295.0, 315.0, 323.0);
        let direct = int.apply(x0, 800.0, 400.0);
        let s1 = three_node_step([295.0, 315.0, 323.0], 800.0, 400.0, flow, 300.0, &params, &ambient());
        let s2 = three_node_step(s1, 800.0, 400.0, flow, 300.0, &params, &ambient());
        for i in 0..3 {
            assert_abs_diff_eq!(direct[i], s2[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn default_params_are_stable_at_the_default_substep() {
        check_one_node_stability(&OneNodeParams::default(), 300.0).unwrap();
        check_three_node_stability(&ThreeNodeParams::default(), 300.0).unwrap();
    }

    #[test]
    fn oversized_timestep_is_rejected() {
        let err = check_one_node_stability(&OneNodeParams::default(), 2e6).unwrap_err();
        assert!(matches!(err, ModelError::UnstableDiscretization { .. }));
        let params = ThreeNodeParams {
            k_ml_w_per_k: 3000.0,
            ..ThreeNodeParams::default()
        };
        let err = check_three_node_stability(&params, 300.0).unwrap_err();
        assert!(matches!(err, ModelError::UnstableDiscretization { .. }));
    }

    #[test]
    fn negative_volumes_are_rejected() {
        let params = ThreeNodeParams {
            v_m_m3: 0.12,
            v_u_m3: 0.08,
            ..ThreeNodeParams::default()
        };
        assert!(matches!(params.validate(), Err(ModelError::InvalidParams(_))));
    }

    #[test]
    fn steady_state_with_no_load_sits_at_ambient() {
        let params = OneNodeParams::default();
        let mut t = 330.0;
        for _ in 0..200_000 {
            t = one_node_step(t, 0.0, 0.0, 300.0, &params, &ambient());
        }
        assert_abs_diff_eq!(t, ambient().t_ambient_k, epsilon = 1e-6);
    }

    proptest! {
        // the step must be affine: probing with superposed inputs matches
        // the sum of individual responses
        #[test]
        fn three_node_step_is_affine(
            tl in 280.0f64..330.0, tm in 280.0f64..330.0, tu in 280.0f64..330.0,
            pm in 0.0f64..1130.0, pu in 0.0f64..1130.0,
        ) {
            let params = ThreeNodeParams::default();
            let amb = ambient();
            let step = three_node_substep_affine(&params, &amb, 1e-5, 300.0);
            let full = step.apply(Vector3::new(tl, tm, tu), pm, pu);
            let direct = three_node_step([tl, tm, tu], pm, pu, 1e-5, 300.0, &params, &amb);
            for i in 0..3 {
                prop_assert!((full[i] - direct[i]).abs() < 1e-9);
            }
        }
    }
}
