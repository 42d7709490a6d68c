//! Hot-water draw profiles, time-of-use price schedules, and the
//! hourly-average flow forecasts fed to the predictive controllers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::units::{gallons_to_m3, DAY_S, HOUR_S};

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("draw events overlap: event starting at {0} s collides with event starting at {1} s")]
    OverlappingEvents(f64, f64),
    #[error("invalid draw event: {0}")]
    InvalidEvent(String),
    #[error("daily volume must be positive, got {0} m^3")]
    NonPositiveVolume(f64),
}

/// One piecewise-constant draw: `rate_m3_per_s` for `duration_s` starting at
/// `start_s` seconds after midnight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrawEvent {
    pub start_s: f64,
    pub duration_s: f64,
    pub rate_m3_per_s: f64,
}

impl DrawEvent {
    pub fn end_s(&self) -> f64 {
        self.start_s + self.duration_s
    }

    pub fn volume_m3(&self) -> f64 {
        self.duration_s * self.rate_m3_per_s
    }
}

/// A daily hot-water draw profile: non-overlapping piecewise-constant flow
/// events repeated every day. The built-in base profile is laid out on a
/// 30 s grid; volume-scaled variants stretch event durations and may leave
/// that grid, but always integrate to the requested daily volume exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawProfile {
    events: Vec<DrawEvent>,
}

impl DrawProfile {
    pub fn new(mut events: Vec<DrawEvent>) -> Result<Self, ScenarioError> {
        for e in &events {
            if !(e.duration_s > 0.0) || !(e.rate_m3_per_s >= 0.0) || !(e.start_s >= 0.0) {
                return Err(ScenarioError::InvalidEvent(format!(
                    "start {} s, duration {} s, rate {} m^3/s",
                    e.start_s, e.duration_s, e.rate_m3_per_s
                )));
            }
            if e.end_s() > DAY_S {
                return Err(ScenarioError::InvalidEvent(format!(
                    "event starting at {} s runs past midnight",
                    e.start_s
                )));
            }
        }
        events.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        for w in events.windows(2) {
            if w[0].end_s() > w[1].start_s {
                return Err(ScenarioError::OverlappingEvents(w[0].start_s, w[1].start_s));
            }
        }
        Ok(DrawProfile { events })
    }

    /// Base residential profile, 36 gal/day: a morning shower cluster, small
    /// midday sink draws, and an evening cluster that overlaps the 5-8 pm
    /// price peak. Rates are 1-2 gal/min, durations multiples of 30 s.
    pub fn base() -> Self {
        let gpm = |g: f64| gallons_to_m3(g) / 60.0;
        let at = |h: f64, m: f64| h * 3600.0 + m * 60.0;
        DrawProfile::new(vec![
            DrawEvent { start_s: at(6.0, 30.0), duration_s: 480.0, rate_m3_per_s: gpm(2.0) },
            DrawEvent { start_s: at(7.0, 30.0), duration_s: 120.0, rate_m3_per_s: gpm(1.0) },
            DrawEvent { start_s: at(9.0, 0.0), duration_s: 60.0, rate_m3_per_s: gpm(1.0) },
            DrawEvent { start_s: at(12.0, 0.0), duration_s: 120.0, rate_m3_per_s: gpm(1.0) },
            DrawEvent { start_s: at(15.0, 0.0), duration_s: 60.0, rate_m3_per_s: gpm(1.0) },
            DrawEvent { start_s: at(17.0, 45.0), duration_s: 240.0, rate_m3_per_s: gpm(1.5) },
            DrawEvent { start_s: at(19.0, 0.0), duration_s: 240.0, rate_m3_per_s: gpm(1.5) },
            DrawEvent { start_s: at(21.0, 0.0), duration_s: 120.0, rate_m3_per_s: gpm(1.0) },
        ])
        .expect("base profile is well formed")
    }

    /// Scales the base profile to `daily_volume_m3` by stretching event
    /// durations; start times and rates are unchanged.
    pub fn with_daily_volume(daily_volume_m3: f64) -> Result<Self, ScenarioError> {
        if !(daily_volume_m3 > 0.0) {
            return Err(ScenarioError::NonPositiveVolume(daily_volume_m3));
        }
        let base = Self::base();
        let factor = daily_volume_m3 / base.daily_volume_m3();
        let events = base
            .events
            .iter()
            .map(|e| DrawEvent { duration_s: e.duration_s * factor, ..*e })
            .collect();
        DrawProfile::new(events)
    }

    pub fn events(&self) -> &[DrawEvent] {
        &self.events
    }

    pub fn daily_volume_m3(&self) -> f64 {
        self.events.iter().map(DrawEvent::volume_m3).sum()
    }

    /// Instantaneous flow at clock time `t_s` (any number of seconds since
    /// the start of day 0).
    pub fn rate_at(&self, t_s: f64) -> f64 {
        let tod = t_s.rem_euclid(DAY_S);
        for e in &self.events {
            if tod >= e.start_s && tod < e.end_s() {
                return e.rate_m3_per_s;
            }
        }
        0.0
    }

    /// Exact volume drawn over `[t0_s, t1_s)`, handling partial event
    /// overlap and midnight wrap.
    pub fn volume_between(&self, t0_s: f64, t1_s: f64) -> f64 {
        assert!(t1_s >= t0_s, "volume_between needs an ordered interval");
        let whole_days = ((t1_s - t0_s) / DAY_S).floor();
        let mut vol = whole_days * self.daily_volume_m3();
        let a = t0_s.rem_euclid(DAY_S);
        let mut b = a + (t1_s - t0_s) - whole_days * DAY_S;
        if b > DAY_S {
            vol += self.volume_in_day(a, DAY_S);
            b -= DAY_S;
            vol += self.volume_in_day(0.0, b);
        } else {
            vol += self.volume_in_day(a, b);
        }
        vol
    }

    fn volume_in_day(&self, a: f64, b: f64) -> f64 {
        self.events
            .iter()
            .map(|e| {
                let lo = e.start_s.max(a);
                let hi = e.end_s().min(b);
                (hi - lo).max(0.0) * e.rate_m3_per_s
            })
            .sum()
    }

    /// Mean flow in each of the 24 clock hours, m^3/s.
    pub fn hourly_mean_flow(&self) -> [f64; 24] {
        let mut hours = [0.0; 24];
        for (h, slot) in hours.iter_mut().enumerate() {
            *slot = self.volume_in_day(h as f64 * HOUR_S, (h + 1) as f64 * HOUR_S) / HOUR_S;
        }
        hours
    }
}

/// Daily time-of-use electricity prices: a flat off-peak rate with one peak
/// window `[peak_start_s, peak_end_s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceSchedule {
    pub offpeak_usd_per_kwh: f64,
    pub peak_usd_per_kwh: f64,
    pub peak_start_s: f64,
    pub peak_end_s: f64,
}

impl Default for PriceSchedule {
    /// $0.47/kWh between 5 pm and 8 pm, $0.21/kWh otherwise.
    fn default() -> Self {
        PriceSchedule {
            offpeak_usd_per_kwh: 0.21,
            peak_usd_per_kwh: 0.47,
            peak_start_s: 17.0 * HOUR_S,
            peak_end_s: 20.0 * HOUR_S,
        }
    }
}

impl PriceSchedule {
    pub fn flat(usd_per_kwh: f64) -> Self {
        PriceSchedule {
            offpeak_usd_per_kwh: usd_per_kwh,
            peak_usd_per_kwh: usd_per_kwh,
            peak_start_s: 0.0,
            peak_end_s: 0.0,
        }
    }

    pub fn is_peak(&self, t_s: f64) -> bool {
        let tod = t_s.rem_euclid(DAY_S);
        tod >= self.peak_start_s && tod < self.peak_end_s
    }

    pub fn price_at(&self, t_s: f64) -> f64 {
        if self.is_peak(t_s) {
            self.peak_usd_per_kwh
        } else {
            self.offpeak_usd_per_kwh
        }
    }

    /// Prices for `n` intervals of `dt_s` starting at `t0_s`, sampled at each
    /// interval start. With interval starts aligned to the hour no interval
    /// straddles a price boundary.
    pub fn price_vector(&self, t0_s: f64, n: usize, dt_s: f64) -> Vec<f64> {
        (0..n).map(|k| self.price_at(t0_s + k as f64 * dt_s)).collect()
    }
}

/// Forecast model: hourly-average flows from the true profile, scaled by the
/// forecast-error factor `alpha` (1 = perfect daily volume, <1 underpredicts,
/// >1 overpredicts).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastSpec {
    pub alpha: f64,
}

impl Default for ForecastSpec {
    fn default() -> Self {
        ForecastSpec { alpha: 1.0 }
    }
}

/// Forecast flows for `n` intervals of `dt_s` starting at `t0_s`.
///
/// `dt_s` must divide the hour or be a multiple of it; each interval's value
/// is alpha times the mean of the hourly-average flow over the interval, so
/// the forecast is invariant to within-hour draw timing.
pub fn make_forecast(
    profile: &DrawProfile,
    spec: ForecastSpec,
    t0_s: f64,
    n: usize,
    dt_s: f64,
) -> Vec<f64> {
    let divides_hour = (HOUR_S / dt_s).round() * dt_s == HOUR_S;
    let multiple_of_hour = (dt_s / HOUR_S).round() * HOUR_S == dt_s;
    assert!(
        dt_s > 0.0 && (divides_hour || multiple_of_hour),
        "forecast interval {dt_s} s must divide or be a multiple of an hour"
    );
    let hourly = profile.hourly_mean_flow();
    (0..n)
        .map(|k| {
            let t = t0_s + k as f64 * dt_s;
            if divides_hour {
                let h = (t.rem_euclid(DAY_S) / HOUR_S) as usize % 24;
                spec.alpha * hourly[h]
            } else {
                let hours = (dt_s / HOUR_S).round() as usize;
                let h0 = (t.rem_euclid(DAY_S) / HOUR_S) as usize;
                let sum: f64 = (0..hours).map(|i| hourly[(h0 + i) % 24]).sum();
                spec.alpha * sum / hours as f64
            }
        })
        .collect()
}
