//! Run configuration files.
//!
//! A run is described by a TOML document with up to seven sections:
//! `[run]`, `[scenario]`, `[tank]`, `[sim]`, `[mpc]`, `[one_node]` and
//! `[three_node]`. Every key is optional; omitted keys keep the study
//! defaults for the chosen controller, so `controller = "thermostat"` on
//! its own is a complete file. Unknown keys are rejected rather than
//! silently ignored.
//!
//! Keys carry the same names and units as the corresponding struct fields
//! (`_s`, `_m3`, `_w_per_k`, ...). Temperatures may be given as either
//! `<name>_k` or `<name>_f`, and the daily draw volume as either
//! `daily_volume_m3` or `daily_volume_gal`; giving both forms of one
//! quantity is an error.

use serde::Deserialize;
use thiserror::Error;

use crate::controllers::{Actuation, ControllerChoice, StateSource};
use crate::harness::RunConfig;
use crate::scenario::{DrawEvent, DrawProfile};
use crate::tank_sim::SimParams;
use crate::units::fahrenheit_to_kelvin;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub fn parse_controller(s: &str) -> Result<ControllerChoice, ConfigError> {
    match s {
        "thermostat" => Ok(ControllerChoice::Thermostat),
        "one-node" => Ok(ControllerChoice::OneNodeMpc),
        "three-node" => Ok(ControllerChoice::ThreeNodeMpc),
        other => Err(ConfigError::Invalid(format!(
            "unknown controller {other:?}; expected thermostat, one-node or three-node"
        ))),
    }
}

pub fn parse_actuation(s: &str) -> Result<Actuation, ConfigError> {
    match s {
        "on-off" => Ok(Actuation::OnOff),
        "continuous" => Ok(Actuation::Continuous),
        other => Err(ConfigError::Invalid(format!(
            "unknown actuation {other:?}; expected on-off or continuous"
        ))),
    }
}

pub fn parse_state_source(s: &str) -> Result<StateSource, ConfigError> {
    match s {
        "lower-element-sensor" => Ok(StateSource::LowerElementSensor),
        "mid-tank-mean" => Ok(StateSource::MidTankMean),
        other => Err(ConfigError::Invalid(format!(
            "unknown state source {other:?}; expected lower-element-sensor or mid-tank-mean"
        ))),
    }
}

/// Resolves a temperature given as kelvin or fahrenheit, keeping `current`
/// when neither form appears.
fn pick_temp(
    name: &str,
    k: Option<f64>,
    f: Option<f64>,
    current: f64,
) -> Result<f64, ConfigError> {
    match (k, f) {
        (Some(_), Some(_)) => Err(ConfigError::Invalid(format!(
            "{name} given in both kelvin and fahrenheit; keep one"
        ))),
        (Some(k), None) => Ok(k),
        (None, Some(f)) => Ok(fahrenheit_to_kelvin(f)),
        (None, None) => Ok(current),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    run: Option<RunSection>,
    scenario: Option<ScenarioSection>,
    tank: Option<TankSection>,
    sim: Option<SimSection>,
    mpc: Option<MpcSection>,
    one_node: Option<OneNodeSection>,
    three_node: Option<ThreeNodeSection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    controller: Option<String>,
    days: Option<usize>,
    forecast_alpha: Option<f64>,
    init_above_element_k: Option<f64>,
    init_above_element_f: Option<f64>,
    actuation: Option<String>,
    thermostat_period_s: Option<f64>,
    log_interval_s: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioSection {
    daily_volume_m3: Option<f64>,
    daily_volume_gal: Option<f64>,
    /// Full replacement draw list; mutually exclusive with the daily volume.
    draws: Option<Vec<DrawRow>>,
    offpeak_usd_per_kwh: Option<f64>,
    peak_usd_per_kwh: Option<f64>,
    peak_start_s: Option<f64>,
    peak_end_s: Option<f64>,
    t_ambient_k: Option<f64>,
    t_ambient_f: Option<f64>,
    t_inlet_k: Option<f64>,
    t_inlet_f: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DrawRow {
    start_s: f64,
    duration_s: f64,
    rate_m3_per_s: f64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TankSection {
    total_volume_m3: Option<f64>,
    total_volume_gal: Option<f64>,
    height_m: Option<f64>,
    lower_element_frac: Option<f64>,
    upper_element_frac: Option<f64>,
    p_rated_lower_w: Option<f64>,
    p_rated_upper_w: Option<f64>,
    sensor_fracs: Option<[f64; 8]>,
}

/// Simulator coefficients are derived from calibration targets, not set
/// directly; see `SimParams::calibrated`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimSection {
    n_nodes: Option<usize>,
    sim_dt_s: Option<f64>,
    ua_total_w_per_k: Option<f64>,
    destrat_time_constant_s: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct MpcSection {
    dt_s: Option<f64>,
    substeps: Option<usize>,
    horizon_s: Option<f64>,
    t_low_k: Option<f64>,
    t_low_f: Option<f64>,
    t_high_k: Option<f64>,
    t_high_f: Option<f64>,
    lambda: Option<f64>,
    beta: Option<f64>,
    state_source: Option<String>,
    solver_tol: Option<f64>,
    solver_max_iter: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct OneNodeSection {
    volume_m3: Option<f64>,
    ua_w_per_k: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ThreeNodeSection {
    u_l_w_per_k: Option<f64>,
    u_m_w_per_k: Option<f64>,
    u_u_w_per_k: Option<f64>,
    k_ml_w_per_k: Option<f64>,
    k_um_w_per_k: Option<f64>,
    v_m_m3: Option<f64>,
    v_u_m3: Option<f64>,
    v_total_m3: Option<f64>,
}

/// Parses a TOML run description into a validated [`RunConfig`].
///
/// The controller is read first so that per-controller defaults (notably
/// the comfort weight) are in place before `[mpc]` overrides apply, and the
/// tank before `[sim]` so simulator calibration targets act on the right
/// geometry.
pub fn load_run_config(text: &str) -> Result<RunConfig, ConfigError> {
    load_run_config_with(text, None)
}

/// As [`load_run_config`], with the controller forced from outside (a
/// command-line flag). The override wins over `[run].controller` and, like
/// it, is applied before the `[mpc]` section so explicit solver keys still
/// take precedence over per-controller defaults.
pub fn load_run_config_with(
    text: &str,
    controller_override: Option<ControllerChoice>,
) -> Result<RunConfig, ConfigError> {
    let file: FileConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;

    let run = file.run.unwrap_or_default();
    let controller = match (controller_override, &run.controller) {
        (Some(c), _) => c,
        (None, Some(name)) => parse_controller(name)?,
        (None, None) => ControllerChoice::ThreeNodeMpc,
    };
    let mut cfg = RunConfig::baseline(controller);

    set(&mut cfg.days, run.days);
    set(&mut cfg.forecast_alpha, run.forecast_alpha);
    cfg.init_above_element_k = pick_temp(
        "init_above_element",
        run.init_above_element_k,
        run.init_above_element_f,
        cfg.init_above_element_k,
    )?;
    if let Some(s) = &run.actuation {
        cfg.actuation = parse_actuation(s)?;
    }
    set(&mut cfg.thermostat_period_s, run.thermostat_period_s);
    set(&mut cfg.log_interval_s, run.log_interval_s);

    if let Some(tank) = file.tank {
        let t = &mut cfg.tank;
        match (tank.total_volume_m3, tank.total_volume_gal) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::Invalid(
                    "tank volume given in both m3 and gallons; keep one".into(),
                ))
            }
            (Some(m3), None) => t.total_volume_m3 = m3,
            (None, Some(gal)) => t.total_volume_m3 = crate::units::gallons_to_m3(gal),
            (None, None) => {}
        }
        set(&mut t.height_m, tank.height_m);
        set(&mut t.lower_element_frac, tank.lower_element_frac);
        set(&mut t.upper_element_frac, tank.upper_element_frac);
        set(&mut t.p_rated_lower_w, tank.p_rated_lower_w);
        set(&mut t.p_rated_upper_w, tank.p_rated_upper_w);
        set(&mut t.sensor_fracs, tank.sensor_fracs);
        // Element node indices and per-node losses depend on the tank.
        cfg.sim = SimParams::default_for(&cfg.tank);
    }

    if let Some(sim) = file.sim {
        let defaults = SimParams::default_for(&cfg.tank);
        let n_nodes = sim.n_nodes.unwrap_or(defaults.n_nodes);
        let ua_total: f64 = defaults.ua_per_node_w_per_k.iter().sum();
        cfg.sim = SimParams::calibrated(
            &cfg.tank,
            n_nodes,
            sim.ua_total_w_per_k.unwrap_or(ua_total),
            sim.destrat_time_constant_s.unwrap_or(36.0 * 3600.0),
        );
        set(&mut cfg.sim.sim_dt_s, sim.sim_dt_s);
    }

    if let Some(sc) = file.scenario {
        match (sc.daily_volume_m3, sc.daily_volume_gal, &sc.draws) {
            (Some(_), Some(_), _) => {
                return Err(ConfigError::Invalid(
                    "daily volume given in both m3 and gallons; keep one".into(),
                ))
            }
            (Some(_), _, Some(_)) | (_, Some(_), Some(_)) => {
                return Err(ConfigError::Invalid(
                    "give either a daily volume or an explicit draw list, not both".into(),
                ))
            }
            (Some(m3), None, None) => {
                cfg.profile = DrawProfile::with_daily_volume(m3)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            }
            (None, Some(gal), None) => {
                cfg.profile = DrawProfile::with_daily_volume(crate::units::gallons_to_m3(gal))
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            }
            (None, None, Some(rows)) => {
                let events = rows
                    .iter()
                    .map(|r| DrawEvent {
                        start_s: r.start_s,
                        duration_s: r.duration_s,
                        rate_m3_per_s: r.rate_m3_per_s,
                    })
                    .collect();
                cfg.profile =
                    DrawProfile::new(events).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            }
            (None, None, None) => {}
        }
        set(&mut cfg.prices.offpeak_usd_per_kwh, sc.offpeak_usd_per_kwh);
        set(&mut cfg.prices.peak_usd_per_kwh, sc.peak_usd_per_kwh);
        set(&mut cfg.prices.peak_start_s, sc.peak_start_s);
        set(&mut cfg.prices.peak_end_s, sc.peak_end_s);
        cfg.ambient.t_ambient_k =
            pick_temp("t_ambient", sc.t_ambient_k, sc.t_ambient_f, cfg.ambient.t_ambient_k)?;
        cfg.ambient.t_inlet_k =
            pick_temp("t_inlet", sc.t_inlet_k, sc.t_inlet_f, cfg.ambient.t_inlet_k)?;
    }

    if let Some(mpc) = file.mpc {
        let m = &mut cfg.mpc;
        set(&mut m.dt_s, mpc.dt_s);
        set(&mut m.substeps, mpc.substeps);
        set(&mut m.horizon_s, mpc.horizon_s);
        m.t_low_k = pick_temp("t_low", mpc.t_low_k, mpc.t_low_f, m.t_low_k)?;
        m.t_high_k = pick_temp("t_high", mpc.t_high_k, mpc.t_high_f, m.t_high_k)?;
        set(&mut m.lambda, mpc.lambda);
        set(&mut m.beta, mpc.beta);
        if let Some(s) = &mpc.state_source {
            m.state_source = parse_state_source(s)?;
        }
        set(&mut m.solver_tol, mpc.solver_tol);
        set(&mut m.solver_max_iter, mpc.solver_max_iter);
    }

    if let Some(one) = file.one_node {
        set(&mut cfg.one_node.volume_m3, one.volume_m3);
        set(&mut cfg.one_node.ua_w_per_k, one.ua_w_per_k);
    }

    if let Some(three) = file.three_node {
        let p = &mut cfg.three_node;
        set(&mut p.u_l_w_per_k, three.u_l_w_per_k);
        set(&mut p.u_m_w_per_k, three.u_m_w_per_k);
        set(&mut p.u_u_w_per_k, three.u_u_w_per_k);
        set(&mut p.k_ml_w_per_k, three.k_ml_w_per_k);
        set(&mut p.k_um_w_per_k, three.k_um_w_per_k);
        set(&mut p.v_m_m3, three.v_m_m3);
        set(&mut p.v_u_m3, three.v_u_m3);
        set(&mut p.v_total_m3, three.v_total_m3);
    }

    cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(cfg)
}
