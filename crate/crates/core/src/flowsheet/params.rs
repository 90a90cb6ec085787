use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::thermo::{ConfigError, ThermoConfig};

/// Closed interval `[lower, upper]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lower: f64,
    pub upper: f64,
}

impl Range {
    pub const fn new(lower: f64, upper: f64) -> Self {
        Range { lower, upper }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lower && v <= self.upper
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }
}

/// Manipulated inputs of the flowsheet.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inputs {
    /// Natural-gas feed, mol/s.
    pub gas_flow: f64,
    /// Steam feed, mol/s.
    pub steam_flow: f64,
    /// Bypass fraction of the natural gas.
    pub bypass: f64,
}

/// Process data. Units: K, Pa, mol/s, W.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowsheetParams {
    /// Natural-gas inlet absolute pressure.
    pub pressure: f64,
    /// Methane conversion in the reactor.
    pub conversion: f64,
    /// Mole fractions of the natural-gas feed.
    pub gas_composition: BTreeMap<String, f64>,
    pub air_composition: BTreeMap<String, f64>,
    pub gas_temperature: f64,
    pub steam_temperature: f64,
    pub air_temperature: f64,
    /// Expander outlet over inlet pressure.
    pub expander_pressure_ratio: f64,
    /// Polytropic exponent: `T_out = T_in * ratio^exponent`.
    pub expander_exponent: f64,
    /// Recuperator conductance, W/K.
    pub recuperator_ua: f64,
    pub max_reactor_temperature: f64,
    pub max_product_temperature: f64,
    /// Minimum product flow before scaling to the feed basis.
    pub min_product_flow: f64,
    /// Multiplies `min_product_flow`.
    pub product_flow_scale: f64,
    pub max_product_n2: f64,
    pub gas_flow: Range,
    pub steam_flow: Range,
    pub bypass: Range,
    /// Inputs of the shared initialization pass.
    pub nominal: Inputs,
}

fn composition(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

impl Default for FlowsheetParams {
    fn default() -> Self {
        FlowsheetParams {
            pressure: 2.0e5,
            conversion: 0.9,
            gas_composition: composition(&[("CH4", 0.93), ("C2H6", 0.04), ("C3H8", 0.01), ("CO2", 0.005), ("N2", 0.015)]),
            air_composition: composition(&[("O2", 0.21), ("N2", 0.78), ("Ar", 0.01)]),
            gas_temperature: 300.0,
            steam_temperature: 800.0,
            air_temperature: 800.0,
            expander_pressure_ratio: 0.5,
            expander_exponent: 0.2,
            recuperator_ua: 6.0e4,
            max_reactor_temperature: 1200.0,
            max_product_temperature: 700.0,
            min_product_flow: 3900.0,
            product_flow_scale: 1.0,
            max_product_n2: 0.3,
            gas_flow: Range::new(1300.0, 1450.0),
            steam_flow: Range::new(200.0, 350.0),
            bypass: Range::new(0.0, 1.0),
            nominal: Inputs { gas_flow: 1375.0, steam_flow: 275.0, bypass: 0.35 },
        }
    }
}

impl FlowsheetParams {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn with_operating_point(&self, pressure: f64, conversion: f64) -> Self {
        FlowsheetParams { pressure, conversion, ..self.clone() }
    }

    /// Dense mole-fraction vector in `cfg` species order.
    pub fn composition_vector(&self, cfg: &ThermoConfig, c: &BTreeMap<String, f64>, what: &str) -> Result<Vec<f64>, ConfigError> {
        let mut y = vec![0.0; cfg.len()];
        for (name, &v) in c {
            let j = cfg.index(name).ok_or_else(|| ConfigError::UnknownSpecies(name.clone()))?;
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ConfigError::Invalid(format!("{what} fraction of {name} is {v}")));
            }
            y[j] = v;
        }
        let sum: f64 = y.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ConfigError::Composition { name: what.to_string(), sum });
        }
        Ok(y)
    }

    pub fn validate(&self, cfg: &ThermoConfig) -> Result<(), ConfigError> {
        cfg.validate()?;
        self.composition_vector(cfg, &self.gas_composition, "gas")?;
        self.composition_vector(cfg, &self.air_composition, "air")?;
        for sp in ["CH4", "H2O", "H2"] {
            if cfg.index(sp).is_none() {
                return Err(ConfigError::UnknownSpecies(sp.to_string()));
            }
        }
        let positive = [
            ("pressure", self.pressure),
            ("gas_temperature", self.gas_temperature),
            ("steam_temperature", self.steam_temperature),
            ("air_temperature", self.air_temperature),
            ("expander_pressure_ratio", self.expander_pressure_ratio),
            ("recuperator_ua", self.recuperator_ua),
            ("product_flow_scale", self.product_flow_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.conversion > 0.0 && self.conversion < 1.0) {
            return Err(ConfigError::Invalid(format!("conversion must lie in (0, 1), got {}", self.conversion)));
        }
        for (name, r) in [("gas_flow", self.gas_flow), ("steam_flow", self.steam_flow), ("bypass", self.bypass)] {
            if !(r.lower <= r.upper) {
                return Err(ConfigError::Invalid(format!("{name} range is empty")));
            }
        }
        if !(self.bypass.lower >= 0.0 && self.bypass.upper <= 1.0) {
            return Err(ConfigError::Invalid("bypass range must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Expander temperature ratio `T_out / T_in`.
    pub fn expander_temperature_ratio(&self) -> f64 {
        self.expander_pressure_ratio.powf(self.expander_exponent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let p = FlowsheetParams::default();
        p.validate(&ThermoConfig::default()).unwrap();
        let s = toml::to_string(&p).unwrap();
        assert_eq!(FlowsheetParams::from_toml_str(&s).unwrap(), p);
        // partial files fill from defaults
        let q = FlowsheetParams::from_toml_str("pressure = 5e5\nconversion = 0.95\n").unwrap();
        assert_eq!(q.pressure, 5e5);
        assert_eq!(q.gas_flow, p.gas_flow);
    }

    #[test]
    fn bad_values_are_rejected() {
        let cfg = ThermoConfig::default();
        let p = FlowsheetParams { conversion: 1.0, ..Default::default() };
        assert!(p.validate(&cfg).is_err());
        let mut p = FlowsheetParams::default();
        p.gas_composition.insert("He".into(), 0.1);
        assert_eq!(p.validate(&cfg), Err(ConfigError::UnknownSpecies("He".into())));
        let mut p = FlowsheetParams::default();
        p.air_composition.insert("O2".into(), 0.3);
        assert!(matches!(p.validate(&cfg), Err(ConfigError::Composition { .. })));
    }
}
