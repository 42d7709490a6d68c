//! Closed-loop experiment runner: virtual tank + controller + scenario,
//! stepped at simulator resolution, with metrics over the final day.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control_models::{OneNodeParams, ThreeNodeParams};
use crate::controllers::{
    thermostat_step, to_on_off, Actuation, ControlCommand, ControllerChoice, MpcCallDiag,
    MpcConfig, OneNodeMpc, ThermostatState, ThreeNodeMpc,
};
use crate::scenario::{make_forecast, DrawProfile, ForecastSpec, PriceSchedule};
use crate::tank_sim::{read_sensors, sim_step, SimError, SimParams, TankSimState};
use crate::units::{
    fahrenheit_to_kelvin, AmbientConditions, TankSpec, CP_WATER, DAY_S, KWH_J, RHO_WATER,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("simulator failed at t = {t_s} s: {source}")]
    Sim { t_s: f64, source: SimError },
    #[error("controller failed at t = {t_s} s: {source}")]
    Control { t_s: f64, source: crate::controllers::ControlError },
}

/// Full specification of one closed-loop run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub controller: ControllerChoice,
    pub tank: TankSpec,
    pub ambient: AmbientConditions,
    pub sim: SimParams,
    pub mpc: MpcConfig,
    pub one_node: OneNodeParams,
    pub three_node: ThreeNodeParams,
    pub profile: DrawProfile,
    pub prices: PriceSchedule,
    /// Forecast scale factor; 1 is perfect foresight of hourly averages.
    pub forecast_alpha: f64,
    pub days: usize,
    /// Nodes at and above the lower element start here; nodes below start
    /// at the inlet temperature.
    pub init_above_element_k: f64,
    pub actuation: Actuation,
    pub thermostat_period_s: f64,
    pub log_interval_s: f64,
}

impl RunConfig {
    /// Study defaults: 50 gal tank, 36 gal/day draws, TOU prices, perfect
    /// foresight, 3 days, on-off actuation.
    pub fn baseline(controller: ControllerChoice) -> Self {
        let tank = TankSpec::default();
        let sim = SimParams::default_for(&tank);
        RunConfig {
            controller,
            tank,
            ambient: AmbientConditions::default(),
            sim,
            mpc: MpcConfig::for_controller(controller),
            one_node: OneNodeParams::default(),
            three_node: ThreeNodeParams::default(),
            profile: DrawProfile::base(),
            prices: PriceSchedule::default(),
            forecast_alpha: 1.0,
            days: 3,
            init_above_element_k: fahrenheit_to_kelvin(120.0),
            actuation: Actuation::OnOff,
            thermostat_period_s: 30.0,
            log_interval_s: 60.0,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidConfig(m));
        if self.days < 1 {
            return bad("need at least one day".into());
        }
        self.tank.validate().map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        self.sim.validate().map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        self.mpc.validate().map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        if !(self.forecast_alpha > 0.0) {
            return bad("forecast alpha must be positive".into());
        }
        let dt = self.sim.sim_dt_s;
        for (name, period) in [
            ("mpc interval", self.mpc.dt_s),
            ("thermostat period", self.thermostat_period_s),
            ("log interval", self.log_interval_s),
        ] {
            let steps = period / dt;
            if steps < 1.0 || (steps - steps.round()).abs() > 1e-9 {
                return bad(format!("{name} {period} s must be a multiple of sim dt {dt} s"));
            }
        }
        if (DAY_S / dt - (DAY_S / dt).round()).abs() > 1e-9 {
            return bad(format!("sim dt {dt} s must divide a day"));
        }
        Ok(())
    }
}

/// One row of the trajectory log, sampled every `log_interval_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub time_s: f64,
    pub nodes_k: Vec<f64>,
    pub sensors_k: [f64; 8],
    pub p_lower_w: f64,
    pub p_upper_w: f64,
    pub flow_m3_per_s: f64,
    pub cum_cost_usd: f64,
    pub cum_volume_m3: f64,
}

/// Per-MPC-call record; `realized_next_k` is filled at the following call
/// so model-predicted and plant-realized temperatures can be compared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcCallRecord {
    pub time_s: f64,
    pub diag: MpcCallDiag,
    pub realized_next_k: Option<Vec<f64>>,
}

/// Whole-run energy bookkeeping in joules, from simulator step audits.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyAudit {
    pub electrical_j: f64,
    pub inlet_enthalpy_j: f64,
    pub outlet_enthalpy_j: f64,
    pub ambient_loss_j: f64,
    pub initial_energy_j: f64,
    pub final_energy_j: f64,
}

impl EnergyAudit {
    /// |balance residual| / total throughput; zero for a perfect ledger.
    pub fn closure_fraction(&self) -> f64 {
        let delta = self.final_energy_j - self.initial_energy_j;
        let residual =
            self.electrical_j + self.inlet_enthalpy_j
                - self.outlet_enthalpy_j
                - self.ambient_loss_j
                - delta;
        let scale = self
            .electrical_j
            .abs()
            .max(self.outlet_enthalpy_j.abs())
            .max(self.ambient_loss_j.abs())
            .max(1.0);
        residual.abs() / scale
    }
}

/// Final-day performance numbers plus whole-run solver statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub electrical_kwh: f64,
    pub embodied_kwh: f64,
    pub cost_usd: f64,
    pub cost_per_kwh_electric: f64,
    pub cost_per_kwh_drawn: f64,
    pub peak_kwh: f64,
    pub offpeak_kwh: f64,
    pub draw_volume_m3: f64,
    /// Volume-weighted outlet temperature statistics over final-day draws.
    pub draw_temp_mean_k: f64,
    pub draw_temp_p10_k: f64,
    pub draw_temp_p90_k: f64,
    pub mpc_calls: usize,
    pub fallback_count: usize,
    pub solve_time_median_s: f64,
    pub solve_time_max_s: f64,
    pub solver_iterations_max: usize,
    pub kkt_residual_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub metrics: RunMetrics,
    /// Cost of each simulated day, dollars.
    pub daily_cost_usd: Vec<f64>,
    /// Electrical energy of each simulated day, kWh.
    pub daily_electrical_kwh: Vec<f64>,
    pub trajectory: Vec<TrajectorySample>,
    pub mpc_calls: Vec<MpcCallRecord>,
    pub audit: EnergyAudit,
}

/// E_d: energy embodied in the drawn hot water, kWh.
pub fn compute_embodied_energy(draws: &[(f64, f64)], t_inlet_k: f64) -> f64 {
    draws
        .iter()
        .map(|(vol_m3, t_out_k)| CP_WATER * RHO_WATER * vol_m3 * (t_out_k - t_inlet_k))
        .sum::<f64>()
        / KWH_J
}

/// Volume-weighted percentile of (volume, temperature) samples; `q` in
/// [0, 1]. The percentile is the temperature at which the cumulative drawn
/// volume first reaches q of the total.
pub fn volume_weighted_percentile(samples: &mut Vec<(f64, f64)>, q: f64) -> f64 {
    assert!((0.0..=1.0).contains(&q));
    if samples.is_empty() {
        return f64::NAN;
    }
    samples.sort_by(|a, b| a.1.total_cmp(&b.1));
    let total: f64 = samples.iter().map(|(v, _)| v).sum();
    let target = q * total;
    let mut cum = 0.0;
    for (v, t) in samples.iter() {
        cum += v;
        if cum >= target {
            return *t;
        }
    }
    samples.last().unwrap().1
}

enum ControllerState {
    Thermostat(ThermostatState),
    OneNode(Box<OneNodeMpc>),
    ThreeNode(Box<ThreeNodeMpc>),
}

/// Runs the configured controller against the virtual tank.
pub fn run_closed_loop(cfg: &RunConfig) -> Result<RunResult, HarnessError> {
    cfg.validate()?;
    let dt = cfg.sim.sim_dt_s;
    let steps_per_day = (DAY_S / dt).round() as u64;
    let total_steps = steps_per_day * cfg.days as u64;
    let mpc_period = (cfg.mpc.dt_s / dt).round() as u64;
    let thermo_period = (cfg.thermostat_period_s / dt).round() as u64;
    let log_period = (cfg.log_interval_s / dt).round() as u64;
    let n_horizon = cfg.mpc.n_steps();

    let mut state = TankSimState::heated_above_lower_element(
        &cfg.sim,
        cfg.init_above_element_k,
        cfg.ambient.t_inlet_k,
    );
    let mut audit = EnergyAudit {
        initial_energy_j: state.energy_j(&cfg.tank),
        ..EnergyAudit::default()
    };

    let deadband = ThermostatState {
        t_low_k: cfg.mpc.t_low_k,
        t_high_k: cfg.mpc.t_high_k,
        update_period_s: cfg.thermostat_period_s,
        heating_lower: false,
        heating_upper: false,
    };
    let mut controller = match cfg.controller {
        ControllerChoice::Thermostat => ControllerState::Thermostat(deadband),
        ControllerChoice::OneNodeMpc => ControllerState::OneNode(Box::new(
            OneNodeMpc::new(cfg.mpc, cfg.one_node, cfg.tank.p_rated_lower_w, cfg.ambient)
                .map_err(|source| HarnessError::Control { t_s: 0.0, source })?,
        )),
        ControllerChoice::ThreeNodeMpc => ControllerState::ThreeNode(Box::new(
            ThreeNodeMpc::new(
                cfg.mpc,
                cfg.three_node,
                cfg.tank.p_rated_lower_w,
                cfg.tank.p_rated_upper_w,
                cfg.ambient,
            )
            .map_err(|source| HarnessError::Control { t_s: 0.0, source })?,
        )),
    };

    // power plan for the current control interval, refreshed at each tick
    let mut cmd = ControlCommand::OFF;
    let mut on_steps = (0u64, 0u64);
    let mut steps_into_interval = 0u64;

    let mut trajectory = Vec::new();
    let mut mpc_calls: Vec<MpcCallRecord> = Vec::new();
    let mut daily_cost = vec![0.0; cfg.days];
    let mut daily_elec_j = vec![0.0; cfg.days];
    let mut cum_cost = 0.0;
    let mut cum_volume = 0.0;
    let mut final_day_embodied_j = 0.0;
    let mut final_day_draws: Vec<(f64, f64)> = Vec::new();
    let mut peak_j = 0.0;
    let mut offpeak_j = 0.0;
    let mut fallback_count = 0;

    for step in 0..total_steps {
        let t = step as f64 * dt;
        let day = (step / steps_per_day) as usize;
        let last_day = day + 1 == cfg.days;

        match &mut controller {
            ControllerState::Thermostat(ts) => {
                if step % thermo_period == 0 {
                    let sensors = read_sensors(&state, &cfg.tank, &cfg.sim);
                    let (c, next) = thermostat_step(
                        *ts,
                        sensors[7],
                        sensors[6],
                        cfg.tank.p_rated_lower_w,
                        cfg.tank.p_rated_upper_w,
                    );
                    *ts = next;
                    cmd = c;
                }
            }
            ControllerState::OneNode(_) | ControllerState::ThreeNode(_) => {
                if step % mpc_period == 0 {
                    let sensors = read_sensors(&state, &cfg.tank, &cfg.sim);
                    let flows = make_forecast(
                        &cfg.profile,
                        ForecastSpec { alpha: cfg.forecast_alpha },
                        t,
                        n_horizon,
                        cfg.mpc.dt_s,
                    );
                    let prices = cfg.prices.price_vector(t, n_horizon, cfg.mpc.dt_s);
                    let (c, diag) = match &mut controller {
                        ControllerState::OneNode(m) => {
                            if let Some(prev) = mpc_calls.last_mut() {
                                prev.realized_next_k = Some(vec![m.state_from_sensors(&sensors)]);
                            }
                            m.step(&sensors, &flows, &prices)
                        }
                        ControllerState::ThreeNode(m) => {
                            if let Some(prev) = mpc_calls.last_mut() {
                                prev.realized_next_k =
                                    Some(m.state_from_sensors(&sensors).to_vec());
                            }
                            m.step(&sensors, &flows, &prices)
                        }
                        ControllerState::Thermostat(_) => unreachable!(),
                    }
                    .map_err(|source| HarnessError::Control { t_s: t, source })?;
                    if diag.fallback {
                        fallback_count += 1;
                    }
                    mpc_calls.push(MpcCallRecord { time_s: t, diag, realized_next_k: None });
                    cmd = c;
                    on_steps = (
                        to_on_off(cmd.p_lower_w, cfg.tank.p_rated_lower_w, cfg.mpc.dt_s, dt)
                            as u64,
                        to_on_off(cmd.p_upper_w, cfg.tank.p_rated_upper_w, cfg.mpc.dt_s, dt)
                            as u64,
                    );
                    steps_into_interval = 0;
                }
            }
        }

        // instantaneous element powers for this sim step
        let (p_lower, p_upper) = match (&controller, cfg.actuation) {
            (ControllerState::Thermostat(_), _) => (cmd.p_lower_w, cmd.p_upper_w),
            (_, Actuation::Continuous) => (cmd.p_lower_w, cmd.p_upper_w),
            (_, Actuation::OnOff) => (
                if steps_into_interval < on_steps.0 { cfg.tank.p_rated_lower_w } else { 0.0 },
                if steps_into_interval < on_steps.1 { cfg.tank.p_rated_upper_w } else { 0.0 },
            ),
        };
        steps_into_interval += 1;

        let vol = cfg.profile.volume_between(t, t + dt);
        let flow = vol / dt;
        let step_audit =
            sim_step(&mut state, p_lower, p_upper, flow, &cfg.ambient, &cfg.tank, &cfg.sim)
                .map_err(|source| HarnessError::Sim { t_s: t, source })?;

        audit.electrical_j += step_audit.electrical_j;
        audit.inlet_enthalpy_j += step_audit.inlet_enthalpy_j;
        audit.outlet_enthalpy_j += step_audit.outlet_enthalpy_j;
        audit.ambient_loss_j += step_audit.ambient_loss_j;

        let price = cfg.prices.price_at(t);
        let step_cost = step_audit.electrical_j / KWH_J * price;
        cum_cost += step_cost;
        cum_volume += vol;
        daily_cost[day] += step_cost;
        daily_elec_j[day] += step_audit.electrical_j;
        if last_day {
            if cfg.prices.is_peak(t) {
                peak_j += step_audit.electrical_j;
            } else {
                offpeak_j += step_audit.electrical_j;
            }
            if vol > 0.0 {
                final_day_draws.push((vol, step_audit.outlet_temp_k));
                final_day_embodied_j += CP_WATER
                    * RHO_WATER
                    * vol
                    * (step_audit.outlet_temp_k - cfg.ambient.t_inlet_k);
            }
        }

        if step % log_period == 0 {
            trajectory.push(TrajectorySample {
                time_s: t,
                nodes_k: state.nodes().to_vec(),
                sensors_k: read_sensors(&state, &cfg.tank, &cfg.sim),
                p_lower_w: p_lower,
                p_upper_w: p_upper,
                flow_m3_per_s: flow,
                cum_cost_usd: cum_cost,
                cum_volume_m3: cum_volume,
            });
        }
    }
    audit.final_energy_j = state.energy_j(&cfg.tank);

    let mut solve_times: Vec<f64> =
        mpc_calls.iter().map(|r| r.diag.solve_time_s).collect();
    solve_times.sort_by(f64::total_cmp);
    let final_day = cfg.days - 1;
    let electrical_kwh = daily_elec_j[final_day] / KWH_J;
    let embodied_kwh = final_day_embodied_j / KWH_J;
    let cost_usd = daily_cost[final_day];
    let draw_volume_m3: f64 = final_day_draws.iter().map(|(v, _)| v).sum();
    let draw_temp_mean_k = if draw_volume_m3 > 0.0 {
        final_day_draws.iter().map(|(v, t)| v * t).sum::<f64>() / draw_volume_m3
    } else {
        f64::NAN
    };
    let metrics = RunMetrics {
        electrical_kwh,
        embodied_kwh,
        cost_usd,
        cost_per_kwh_electric: if electrical_kwh > 0.0 { cost_usd / electrical_kwh } else { 0.0 },
        cost_per_kwh_drawn: if embodied_kwh > 0.0 { cost_usd / embodied_kwh } else { 0.0 },
        peak_kwh: peak_j / KWH_J,
        offpeak_kwh: offpeak_j / KWH_J,
        draw_volume_m3,
        draw_temp_mean_k,
        draw_temp_p10_k: volume_weighted_percentile(&mut final_day_draws.clone(), 0.10),
        draw_temp_p90_k: volume_weighted_percentile(&mut final_day_draws, 0.90),
        mpc_calls: mpc_calls.len(),
        fallback_count,
        solve_time_median_s: if solve_times.is_empty() {
            0.0
        } else {
            solve_times[solve_times.len() / 2]
        },
        solve_time_max_s: solve_times.last().copied().unwrap_or(0.0),
        solver_iterations_max: mpc_calls.iter().map(|r| r.diag.iterations).max().unwrap_or(0),
        kkt_residual_max: mpc_calls
            .iter()
            .filter(|r| !r.diag.fallback)
            .map(|r| r.diag.kkt_residual)
            .fold(0.0, f64::max),
    };

    Ok(RunResult {
        metrics,
        daily_cost_usd: daily_cost,
        daily_electrical_kwh: daily_elec_j.iter().map(|e| e / KWH_J).collect(),
        trajectory,
        mpc_calls,
        audit,
    })
}

/// Daily-volume sweep points from §controller comparison: factors of the
/// base profile volume.
pub const VOLUME_FACTORS: [f64; 8] = [0.8, 1.0, 1.2, 1.4, 1.5, 1.6, 1.8, 2.0];

/// Forecast-error sweep points.
pub const ALPHA_GRID: [f64; 7] = [0.3, 0.5, 0.7, 1.0, 1.3, 1.5, 1.7];

/// One row of a sweep output table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub axis_value: f64,
    pub controller: ControllerChoice,
    pub outcome: SweepOutcome,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum SweepOutcome {
    Metrics(Box<RunMetrics>),
    Failed(String),
}

/// Builds the run configs for a daily-volume sweep. `bases` holds one fully
/// configured run per controller, so per-controller settings (notably the
/// tuned comfort weight) travel with their controller.
pub fn volume_sweep_configs(bases: &[RunConfig]) -> Vec<(f64, RunConfig)> {
    let base_volume = DrawProfile::base().daily_volume_m3();
    let mut out = Vec::new();
    for factor in VOLUME_FACTORS {
        for base in bases {
            let mut cfg = base.clone();
            cfg.profile = DrawProfile::with_daily_volume(base_volume * factor)
                .expect("volume factors stay clear of event overlap");
            out.push((base_volume * factor, cfg));
        }
    }
    out
}

/// Builds run configs for a forecast-error sweep. The thermostat ignores
/// forecasts, so it appears once (at alpha 1) rather than per grid point.
pub fn alpha_sweep_configs(bases: &[RunConfig]) -> Vec<(f64, RunConfig)> {
    let mut out = Vec::new();
    for base in bases {
        match base.controller {
            ControllerChoice::Thermostat => {
                let mut cfg = base.clone();
                cfg.forecast_alpha = 1.0;
                out.push((1.0, cfg));
            }
            _ => {
                for alpha in ALPHA_GRID {
                    let mut cfg = base.clone();
                    cfg.forecast_alpha = alpha;
                    out.push((alpha, cfg));
                }
            }
        }
    }
    out
}

/// Runs one sweep point, capturing failures instead of aborting the sweep.
pub fn sweep_point(axis: &str, axis_value: f64, cfg: &RunConfig) -> SweepRow {
    let outcome = match run_closed_loop(cfg) {
        Ok(result) => SweepOutcome::Metrics(Box::new(result.metrics)),
        Err(e) => SweepOutcome::Failed(e.to_string()),
    };
    SweepRow { axis: axis.to_string(), axis_value, controller: cfg.controller, outcome }
}
