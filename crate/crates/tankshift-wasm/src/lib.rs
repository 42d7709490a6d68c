//! Browser bindings. Every function takes plain numbers and strings and
//! returns a JSON string; failures come back as `{"error": "..."}` so the
//! calling page handles one shape and no exceptions.
//!
//! Display units differ from the library's SI internals: temperatures in
//! degrees Fahrenheit, flows in gallons per minute, time in hours.

use serde_json::{json, Value};
use tankshift::controllers::ControllerChoice;
use tankshift::harness::{run_closed_loop, RunConfig, RunResult};
use tankshift::scenario::{make_forecast, DrawProfile, ForecastSpec};
use tankshift::units::{gallons_to_m3, kelvin_to_fahrenheit, m3_to_gallons};
use wasm_bindgen::prelude::wasm_bindgen;

const LOG_INTERVAL_S: f64 = 300.0;
const GPM_PER_M3S: f64 = 60.0 / 3.785411784e-3;

fn parse_controller(name: &str) -> Result<ControllerChoice, String> {
    match name {
        "thermostat" => Ok(ControllerChoice::Thermostat),
        "one-node" => Ok(ControllerChoice::OneNodeMpc),
        "three-node" => Ok(ControllerChoice::ThreeNodeMpc),
        other => Err(format!(
            "unknown controller {other:?}; expected thermostat, one-node or three-node"
        )),
    }
}

fn build_config(
    controller: ControllerChoice,
    daily_volume_gal: f64,
    forecast_alpha: f64,
    days: u32,
) -> Result<RunConfig, String> {
    let mut cfg = RunConfig::baseline(controller);
    cfg.profile =
        DrawProfile::with_daily_volume(gallons_to_m3(daily_volume_gal)).map_err(|e| e.to_string())?;
    cfg.forecast_alpha = forecast_alpha;
    cfg.days = days as usize;
    cfg.log_interval_s = LOG_INTERVAL_S;
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn run(cfg: &RunConfig) -> Result<RunResult, String> {
    run_closed_loop(cfg).map_err(|e| e.to_string())
}

fn summary_value(result: &RunResult) -> Value {
    let m = &result.metrics;
    json!({
        "cost_usd": m.cost_usd,
        "electrical_kwh": m.electrical_kwh,
        "cost_per_kwh_electric": m.cost_per_kwh_electric,
        "cost_per_kwh_drawn": m.cost_per_kwh_drawn,
        "peak_kwh": m.peak_kwh,
        "offpeak_kwh": m.offpeak_kwh,
        "draw_temp_mean_f": kelvin_to_fahrenheit(m.draw_temp_mean_k),
        "draw_temp_p10_f": kelvin_to_fahrenheit(m.draw_temp_p10_k),
        "draw_temp_p90_f": kelvin_to_fahrenheit(m.draw_temp_p90_k),
        "mpc_calls": m.mpc_calls,
        "fallback_count": m.fallback_count,
    })
}

fn simulate_value(
    controller: &str,
    daily_volume_gal: f64,
    forecast_alpha: f64,
    days: u32,
) -> Result<Value, String> {
    let choice = parse_controller(controller)?;
    let cfg = build_config(choice, daily_volume_gal, forecast_alpha, days)?;
    let result = run(&cfg)?;

    let traj = &result.trajectory;
    let time_h: Vec<f64> = traj.iter().map(|s| s.time_s / 3600.0).collect();
    let node_temps_f: Vec<Vec<f64>> = traj
        .iter()
        .map(|s| s.nodes_k.iter().map(|&t| kelvin_to_fahrenheit(t)).collect())
        .collect();
    let heater_kw: Vec<f64> =
        traj.iter().map(|s| 1e-3 * (s.p_lower_w + s.p_upper_w)).collect();
    let flow_gpm: Vec<f64> = traj.iter().map(|s| GPM_PER_M3S * s.flow_m3_per_s).collect();
    let price: Vec<f64> = traj.iter().map(|s| cfg.prices.price_at(s.time_s)).collect();
    let cum_cost_usd: Vec<f64> = traj.iter().map(|s| s.cum_cost_usd).collect();

    Ok(json!({
        "controller": controller,
        "daily_volume_gal": daily_volume_gal,
        "forecast_alpha": forecast_alpha,
        "days": days,
        "time_h": time_h,
        "node_temps_f": node_temps_f,
        "heater_kw": heater_kw,
        "flow_gpm": flow_gpm,
        "price_usd_per_kwh": price,
        "cum_cost_usd": cum_cost_usd,
        "daily_cost_usd": result.daily_cost_usd,
        "summary": summary_value(&result),
    }))
}

fn compare_value(daily_volume_gal: f64, forecast_alpha: f64, days: u32) -> Result<Value, String> {
    let thermostat = run(&build_config(
        ControllerChoice::Thermostat,
        daily_volume_gal,
        forecast_alpha,
        days,
    )?)?;
    let reference = thermostat.metrics.cost_usd;

    let mut rows = Vec::new();
    for (name, result) in [
        ("thermostat", thermostat),
        ("one-node", run(&build_config(ControllerChoice::OneNodeMpc, daily_volume_gal, forecast_alpha, days)?)?),
        ("three-node", run(&build_config(ControllerChoice::ThreeNodeMpc, daily_volume_gal, forecast_alpha, days)?)?),
    ] {
        let mut row = summary_value(&result);
        row["controller"] = json!(name);
        row["savings_vs_thermostat"] = json!(1.0 - result.metrics.cost_usd / reference);
        rows.push(row);
    }
    Ok(json!({
        "daily_volume_gal": daily_volume_gal,
        "forecast_alpha": forecast_alpha,
        "days": days,
        "controllers": rows,
    }))
}

fn scenario_value(daily_volume_gal: f64, forecast_alpha: f64) -> Result<Value, String> {
    let profile =
        DrawProfile::with_daily_volume(gallons_to_m3(daily_volume_gal)).map_err(|e| e.to_string())?;
    let cfg = RunConfig::baseline(ControllerChoice::ThreeNodeMpc);
    let hours: Vec<f64> = (0..24).map(|h| h as f64).collect();
    let price: Vec<f64> =
        hours.iter().map(|&h| cfg.prices.price_at(h * 3600.0)).collect();
    let draw_gph: Vec<f64> = profile
        .hourly_mean_flow()
        .iter()
        .map(|&q| 3600.0 * m3_to_gallons(q))
        .collect();
    let forecast_gph: Vec<f64> =
        make_forecast(&profile, ForecastSpec { alpha: forecast_alpha }, 0.0, 24, 3600.0)
            .iter()
            .map(|&q| 3600.0 * m3_to_gallons(q))
            .collect();
    Ok(json!({
        "daily_volume_gal": daily_volume_gal,
        "forecast_alpha": forecast_alpha,
        "hour": hours,
        "price_usd_per_kwh": price,
        "draw_gal_per_h": draw_gph,
        "forecast_gal_per_h": forecast_gph,
    }))
}

fn to_json(result: Result<Value, String>) -> String {
    match result {
        Ok(value) => value.to_string(),
        Err(message) => json!({ "error": message }).to_string(),
    }
}

/// Closed-loop run: node-temperature trajectory plus cost and comfort
/// figures, sampled every five minutes.
#[wasm_bindgen]
pub fn simulate(controller: &str, daily_volume_gal: f64, forecast_alpha: f64, days: u32) -> String {
    to_json(simulate_value(controller, daily_volume_gal, forecast_alpha, days))
}

/// All three controllers at one operating point, with savings relative to
/// the thermostat.
#[wasm_bindgen]
pub fn compare_controllers(daily_volume_gal: f64, forecast_alpha: f64, days: u32) -> String {
    to_json(compare_value(daily_volume_gal, forecast_alpha, days))
}

/// The day the controllers face: hourly prices, the true draw profile and
/// the (possibly mis-scaled) forecast the optimizers see.
#[wasm_bindgen]
pub fn scenario_preview(daily_volume_gal: f64, forecast_alpha: f64) -> String {
    to_json(scenario_value(daily_volume_gal, forecast_alpha))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Value {
        serde_json::from_str(s).expect("output is valid JSON")
    }

    #[test]
    fn simulate_returns_a_full_trajectory() {
        let out = parse(&simulate("thermostat", 36.0, 1.0, 1));
        assert!(out.get("error").is_none(), "{out}");
        let times = out["time_h"].as_array().unwrap();
        assert_eq!(times.len(), 288); // one day at 5 min sampling
        assert_eq!(out["node_temps_f"][0].as_array().unwrap().len(), 20);
        let cost = out["summary"]["cost_usd"].as_f64().unwrap();
        assert!(cost > 0.0);
        assert_eq!(out["daily_cost_usd"].as_array().unwrap().len(), 1);
        // price samples stay on the two-level tariff
        for p in out["price_usd_per_kwh"].as_array().unwrap() {
            let p = p.as_f64().unwrap();
            assert!(p == 0.21 || p == 0.47);
        }
    }

    #[test]
    fn compare_orders_the_controllers() {
        let out = parse(&compare_controllers(54.0, 1.0, 1));
        assert!(out.get("error").is_none(), "{out}");
        let rows = out["controllers"].as_array().unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0]["savings_vs_thermostat"], json!(0.0));
        let cost = |i: usize| rows[i]["cost_usd"].as_f64().unwrap();
        assert!(cost(2) < cost(1) && cost(1) < cost(0));
    }

    #[test]
    fn scenario_preview_scales_the_forecast() {
        let out = parse(&scenario_preview(54.0, 1.3));
        let actual: f64 =
            out["draw_gal_per_h"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        let forecast: f64 =
            out["forecast_gal_per_h"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        assert!((actual - 54.0).abs() < 1e-9);
        assert!((forecast - 1.3 * 54.0).abs() < 1e-9);
        assert_eq!(out["price_usd_per_kwh"][17], json!(0.47));
        assert_eq!(out["price_usd_per_kwh"][16], json!(0.21));
    }

    #[test]
    fn errors_come_back_as_json() {
        let out = parse(&simulate("pid", 54.0, 1.0, 1));
        let msg = out["error"].as_str().unwrap();
        assert!(msg.contains("pid"));
        let zero_days = parse(&simulate("thermostat", 54.0, 1.0, 0));
        assert!(zero_days["error"].as_str().is_some());
    }
}
