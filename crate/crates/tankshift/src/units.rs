//! Physical constants, unit conversions, and shared tank geometry types.
//!
//! Everything downstream works in SI (kelvin, cubic metres, watts, seconds,
//! joules). Fahrenheit, gallons, kilowatt-hours and hours exist only at the
//! config-parse and report-format boundaries, and every conversion constant
//! lives here.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Density of water, kg/m^3.
pub const RHO_WATER: f64 = 1000.0;
/// Specific heat of water, J/(kg K).
pub const CP_WATER: f64 = 4181.3;
/// One US gallon in cubic metres.
pub const GALLON_M3: f64 = 0.0037854118;
/// One kilowatt-hour in joules.
pub const KWH_J: f64 = 3.6e6;
/// One hour in seconds.
pub const HOUR_S: f64 = 3600.0;
/// One day in seconds.
pub const DAY_S: f64 = 86400.0;

pub fn fahrenheit_to_kelvin(deg_f: f64) -> f64 {
    (deg_f - 32.0) * 5.0 / 9.0 + 273.15
}

pub fn kelvin_to_fahrenheit(kelvin: f64) -> f64 {
    (kelvin - 273.15) * 9.0 / 5.0 + 32.0
}

pub fn gallons_to_m3(gal: f64) -> f64 {
    gal * GALLON_M3
}

pub fn m3_to_gallons(m3: f64) -> f64 {
    m3 / GALLON_M3
}

pub fn joules_to_kwh(j: f64) -> f64 {
    j / KWH_J
}

pub fn kwh_to_joules(kwh: f64) -> f64 {
    kwh * KWH_J
}

pub fn hours_to_seconds(h: f64) -> f64 {
    h * HOUR_S
}

pub fn seconds_to_hours(s: f64) -> f64 {
    s / HOUR_S
}

/// Units accepted by [`convert_units`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Unit {
    Fahrenheit,
    Kelvin,
    Gallon,
    CubicMeter,
    KilowattHour,
    Joule,
    Hour,
    Second,
}

impl Unit {
    fn dimension(self) -> u8 {
        match self {
            Unit::Fahrenheit | Unit::Kelvin => 0,
            Unit::Gallon | Unit::CubicMeter => 1,
            Unit::KilowattHour | Unit::Joule => 2,
            Unit::Hour | Unit::Second => 3,
        }
    }

    /// Converts a value in this unit to the dimension's SI base unit.
    fn to_si(self, value: f64) -> f64 {
        match self {
            Unit::Fahrenheit => fahrenheit_to_kelvin(value),
            Unit::Kelvin => value,
            Unit::Gallon => gallons_to_m3(value),
            Unit::CubicMeter => value,
            Unit::KilowattHour => kwh_to_joules(value),
            Unit::Joule => value,
            Unit::Hour => hours_to_seconds(value),
            Unit::Second => value,
        }
    }

    fn from_si(self, value: f64) -> f64 {
        match self {
            Unit::Fahrenheit => kelvin_to_fahrenheit(value),
            Unit::Kelvin => value,
            Unit::Gallon => m3_to_gallons(value),
            Unit::CubicMeter => value,
            Unit::KilowattHour => joules_to_kwh(value),
            Unit::Joule => value,
            Unit::Hour => seconds_to_hours(value),
            Unit::Second => value,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum UnitsError {
    #[error("cannot convert {from:?} to {to:?}")]
    UnsupportedUnitPair { from: Unit, to: Unit },
    #[error("invalid tank spec: {0}")]
    InvalidTankSpec(String),
}

/// Converts `value` between two units of the same dimension.
pub fn convert_units(value: f64, from: Unit, to: Unit) -> Result<f64, UnitsError> {
    if from.dimension() != to.dimension() {
        return Err(UnitsError::UnsupportedUnitPair { from, to });
    }
    Ok(to.from_si(from.to_si(value)))
}

/// Temperature in kelvin.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Temperature(f64);

impl Temperature {
    pub fn from_kelvin(k: f64) -> Self {
        Temperature(k)
    }
    pub fn from_fahrenheit(f: f64) -> Self {
        Temperature(fahrenheit_to_kelvin(f))
    }
    pub fn kelvin(self) -> f64 {
        self.0
    }
    pub fn fahrenheit(self) -> f64 {
        kelvin_to_fahrenheit(self.0)
    }
}

/// Volume in cubic metres.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Volume(f64);

impl Volume {
    pub fn from_m3(m3: f64) -> Self {
        Volume(m3)
    }
    pub fn from_gallons(gal: f64) -> Self {
        Volume(gallons_to_m3(gal))
    }
    pub fn m3(self) -> f64 {
        self.0
    }
    pub fn gallons(self) -> f64 {
        m3_to_gallons(self.0)
    }
}

/// Power in watts.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Power(f64);

impl Power {
    pub fn from_watts(w: f64) -> Self {
        Power(w)
    }
    pub fn watts(self) -> f64 {
        self.0
    }
}

/// Energy in joules.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Energy(f64);

impl Energy {
    pub fn from_joules(j: f64) -> Self {
        Energy(j)
    }
    pub fn from_kwh(kwh: f64) -> Self {
        Energy(kwh_to_joules(kwh))
    }
    pub fn joules(self) -> f64 {
        self.0
    }
    pub fn kwh(self) -> f64 {
        joules_to_kwh(self.0)
    }
}

/// Duration in seconds.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Seconds(f64);

impl Seconds {
    pub fn from_seconds(s: f64) -> Self {
        Seconds(s)
    }
    pub fn from_hours(h: f64) -> Self {
        Seconds(hours_to_seconds(h))
    }
    pub fn seconds(self) -> f64 {
        self.0
    }
    pub fn hours(self) -> f64 {
        seconds_to_hours(self.0)
    }
}

/// Geometry and ratings of a two-element tank.
///
/// Element and sensor positions are fractions of tank height measured from
/// the bottom. Sensors 1-6 sit at the centres of six equal bands up the side,
/// sensors 7 and 8 at the lower and upper element heights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TankSpec {
    pub total_volume_m3: f64,
    pub height_m: f64,
    pub lower_element_frac: f64,
    pub upper_element_frac: f64,
    pub p_rated_lower_w: f64,
    pub p_rated_upper_w: f64,
    pub sensor_fracs: [f64; 8],
}

impl Default for TankSpec {
    /// 50 gal two-element tank, 1.13 kW per element.
    fn default() -> Self {
        let lower = 0.2;
        let upper = 0.7;
        TankSpec {
            total_volume_m3: gallons_to_m3(50.0),
            height_m: 1.2,
            lower_element_frac: lower,
            upper_element_frac: upper,
            p_rated_lower_w: 1130.0,
            p_rated_upper_w: 1130.0,
            sensor_fracs: [
                1.0 / 12.0,
                3.0 / 12.0,
                5.0 / 12.0,
                7.0 / 12.0,
                9.0 / 12.0,
                11.0 / 12.0,
                lower,
                upper,
            ],
        }
    }
}

impl TankSpec {
    pub fn validate(&self) -> Result<(), UnitsError> {
        let mut problems = Vec::new();
        if !(self.total_volume_m3 > 0.0) {
            problems.push("total volume must be positive".to_string());
        }
        if !(self.height_m > 0.0) {
            problems.push("height must be positive".to_string());
        }
        for (name, frac) in [
            ("lower element", self.lower_element_frac),
            ("upper element", self.upper_element_frac),
        ] {
            if !(0.0..1.0).contains(&frac) {
                problems.push(format!("{name} height fraction {frac} outside [0,1)"));
            }
        }
        if self.lower_element_frac >= self.upper_element_frac {
            problems.push("lower element must sit below upper element".to_string());
        }
        if !(self.p_rated_lower_w > 0.0) || !(self.p_rated_upper_w > 0.0) {
            problems.push("element ratings must be positive".to_string());
        }
        for (i, frac) in self.sensor_fracs.iter().enumerate() {
            if !(0.0..1.0).contains(frac) {
                problems.push(format!("sensor {} fraction {frac} outside [0,1)", i + 1));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(UnitsError::InvalidTankSpec(problems.join("; ")))
        }
    }

    /// Fraction of total volume above the lower element.
    pub fn volume_above_lower_element_m3(&self) -> f64 {
        (1.0 - self.lower_element_frac) * self.total_volume_m3
    }
}

/// Ambient air and inlet water temperatures, kelvin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmbientConditions {
    pub t_ambient_k: f64,
    pub t_inlet_k: f64,
}

impl Default for AmbientConditions {
    /// 70 F room, 68 F inlet.
    fn default() -> Self {
        AmbientConditions {
            t_ambient_k: fahrenheit_to_kelvin(70.0),
            t_inlet_k: fahrenheit_to_kelvin(68.0),
        }
    }
}
