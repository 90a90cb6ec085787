//! Sequential-modular pass through the units. It seeds every formulation
//! and serves as the reactor oracle for surrogate training data.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::equilibrium::{equilibrium_hp, EquilibriumError, ReactorState};
use super::params::{FlowsheetParams, Inputs};
use super::thermo::{ConfigError, ThermoConfig};

#[derive(Clone, Debug, Error, PartialEq)]
pub enum SimulationError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("reactor: {0}")]
    Reactor(#[from] EquilibriumError),
    #[error("{unit} did not converge")]
    Unit { unit: &'static str },
    #[error("recycle did not converge after {iterations} passes")]
    Tear { iterations: usize },
    #[error("square solve failed: {0}")]
    Square(String),
}

/// Every stream and unit quantity of the flowsheet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowsheetState {
    pub inputs: Inputs,
    pub bypass_flow: f64,
    pub main_flow: f64,
    /// Recuperator duty, W.
    pub duty: f64,
    pub cold_outlet_temperature: f64,
    pub hot_outlet_temperature: f64,
    pub expander_outlet_temperature: f64,
    /// Expander work, W.
    pub work: f64,
    /// Component flows into the reactor, mol/s.
    pub mixer_flows: Vec<f64>,
    /// Total enthalpy into the reactor, W.
    pub mixer_enthalpy: f64,
    pub air_flow: f64,
    pub mixer_pressure: f64,
    pub reactor: ReactorState,
    pub product_flow: f64,
    pub product_x: Vec<f64>,
    pub product_temperature: f64,
}

/// Illinois regula falsi for an increasing `f` on `[lo, hi]`.
pub(crate) fn increasing_root<E>(
    mut f: impl FnMut(f64) -> Result<f64, E>,
    mut lo: f64,
    mut hi: f64,
    xtol: f64,
    ftol: f64,
) -> Result<Option<f64>, E> {
    let mut flo = f(lo)?;
    let mut fhi = f(hi)?;
    if flo > 0.0 || fhi < 0.0 {
        return Ok(None);
    }
    if flo == 0.0 {
        return Ok(Some(lo));
    }
    if fhi == 0.0 {
        return Ok(Some(hi));
    }
    let mut side = 0i8;
    for _ in 0..300 {
        let mut x = hi - fhi * (hi - lo) / (fhi - flo);
        if !(x > lo && x < hi) {
            x = 0.5 * (lo + hi);
        }
        let fx = f(x)?;
        if fx.abs() <= ftol || hi - lo <= xtol {
            return Ok(Some(x));
        }
        if fx < 0.0 {
            lo = x;
            flo = fx;
            if side == -1 {
                fhi *= 0.5;
            }
            side = -1;
        } else {
            hi = x;
            fhi = fx;
            if side == 1 {
                flo *= 0.5;
            }
            side = 1;
        }
    }
    Ok(Some(0.5 * (lo + hi)))
}

/// Temperature at which a stream of component flows `n` carries enthalpy `h`.
pub(crate) fn stream_temperature(cfg: &ThermoConfig, n: &[f64], h: f64) -> Option<f64> {
    let f = |t: f64| -> Result<f64, ()> { Ok(n.iter().enumerate().map(|(j, v)| v * cfg.enthalpy(j, t)).sum::<f64>() - h) };
    increasing_root(f, 100.0, 4000.0, 1e-12, 1e-9 * h.abs().max(1.0)).ok().flatten()
}

/// Adiabatic equilibrium reactor with the air flow chosen so that the
/// methane conversion equals `conversion`. `feed` and `h_feed` exclude air.
pub fn reactor_at_conversion(
    cfg: &ThermoConfig,
    feed: &[f64],
    h_feed: f64,
    air: &[f64],
    h_air: f64,
    pressure: f64,
    conversion: f64,
) -> Result<(f64, ReactorState), EquilibriumError> {
    let ch4 = cfg.index("CH4").ok_or_else(|| EquilibriumError::Invalid("no CH4 species".into()))?;
    let n_ch4 = feed[ch4] + 0.0;
    if !(n_ch4 > 0.0) {
        return Err(EquilibriumError::MissingElement("C".into()));
    }
    let mut last: Option<ReactorState> = None;
    let mut run = |f_air: f64| -> Result<f64, EquilibriumError> {
        let n: Vec<f64> = feed.iter().zip(air).map(|(a, b)| a + f_air * b).collect();
        let s = equilibrium_hp(cfg, h_feed + f_air * h_air, pressure, &n, (250.0, 4000.0))?;
        let converted = 1.0 - s.x[ch4] * s.total_flow / (n_ch4 + f_air * air[ch4]);
        last = Some(s);
        Ok(converted - conversion)
    };
    let mut hi = 0.5 * n_ch4;
    let mut reached = run(0.0)?;
    if reached >= 0.0 {
        return Err(EquilibriumError::Unreachable { target: conversion, reached: reached + conversion });
    }
    loop {
        reached = run(hi)?;
        if reached >= 0.0 {
            break;
        }
        hi *= 2.0;
        if hi > 1e3 * n_ch4 {
            return Err(EquilibriumError::Unreachable { target: conversion, reached: reached + conversion });
        }
    }
    let f_air = increasing_root(&mut run, 0.0, hi, 1e-13 * hi, 1e-13)?
        .ok_or(EquilibriumError::Unreachable { target: conversion, reached: reached + conversion })?;
    // leave the cached state at the accepted root
    run(f_air)?;
    Ok((f_air, last.expect("reactor evaluated")))
}

/// Reactor outputs for surrogate inputs: steam flow, expander outlet
/// temperature, natural-gas flow to the reactor and conversion. Returns the
/// air flow and the outlet state.
pub fn simulate_reactor(
    cfg: &ThermoConfig,
    params: &FlowsheetParams,
    steam_flow: f64,
    gas_temperature: f64,
    gas_flow: f64,
    conversion: f64,
) -> Result<(f64, ReactorState), SimulationError> {
    let y_gas = params.composition_vector(cfg, &params.gas_composition, "gas")?;
    let y_air = params.composition_vector(cfg, &params.air_composition, "air")?;
    let h2o = cfg.index("H2O").ok_or_else(|| ConfigError::UnknownSpecies("H2O".into()))?;
    let mut feed: Vec<f64> = y_gas.iter().map(|y| y * gas_flow).collect();
    feed[h2o] += steam_flow;
    let h_feed = gas_flow * cfg.mixture_enthalpy(&y_gas, gas_temperature) + steam_flow * cfg.enthalpy(h2o, params.steam_temperature);
    let h_air = cfg.mixture_enthalpy(&y_air, params.air_temperature);
    let p = params.pressure * params.expander_pressure_ratio;
    Ok(reactor_at_conversion(cfg, &feed, h_feed, &y_air, h_air, p, conversion)?)
}

/// One sequential pass with a converged recycle tear on the cold recuperator
/// outlet temperature.
pub fn sequential_pass(cfg: &ThermoConfig, params: &FlowsheetParams, inputs: Inputs) -> Result<FlowsheetState, SimulationError> {
    params.validate(cfg)?;
    let y_gas = params.composition_vector(cfg, &params.gas_composition, "gas")?;
    let t_g = params.gas_temperature;
    let h_ng = |t: f64| cfg.mixture_enthalpy(&y_gas, t);
    let bypass_flow = inputs.bypass * inputs.gas_flow;
    let main_flow = (1.0 - inputs.bypass) * inputs.gas_flow;
    let ratio = params.expander_temperature_ratio();
    let ua = params.recuperator_ua;

    let mut t_cold = 800.0;
    let mut iterations = 0;
    loop {
        iterations += 1;
        let t_exp = t_cold * ratio;
        let (air_flow, reactor) = simulate_reactor(cfg, params, inputs.steam_flow, t_exp, main_flow, params.conversion)?;
        let t_syn = reactor.temperature;
        let n_syn = reactor.flows();
        let h_syn_in: f64 = n_syn.iter().enumerate().map(|(j, v)| v * cfg.enthalpy(j, t_syn)).sum();
        // duty as a function of the cold outlet; the residual grows with it
        let hot_out = |q: f64| stream_temperature(cfg, &n_syn, h_syn_in - q);
        let resid = |tc: f64| -> Result<f64, SimulationError> {
            let q = main_flow * (h_ng(tc) - h_ng(t_g));
            let th = hot_out(q).ok_or(SimulationError::Unit { unit: "recuperator" })?;
            Ok(q - ua * ((t_syn - tc) + (th - t_g)) / 2.0)
        };
        let new_cold = increasing_root(resid, t_g, t_syn, 1e-12 * t_syn, 1e-6)?
            .ok_or(SimulationError::Unit { unit: "recuperator" })?;
        let done = (new_cold - t_cold).abs() <= 1e-10 * t_cold;
        t_cold = new_cold;
        if done {
            let duty = main_flow * (h_ng(t_cold) - h_ng(t_g));
            let t_hot = hot_out(duty).ok_or(SimulationError::Unit { unit: "recuperator" })?;
            let t_exp = t_cold * ratio;
            let work = main_flow * (h_ng(t_cold) - h_ng(t_exp));
            let air = params.composition_vector(cfg, &params.air_composition, "air")?;
            let h2o = cfg.index("H2O").expect("validated");
            let mut mixer_flows: Vec<f64> = (0..cfg.len()).map(|j| main_flow * y_gas[j] + air_flow * air[j]).collect();
            mixer_flows[h2o] += inputs.steam_flow;
            let mixer_enthalpy = main_flow * h_ng(t_exp)
                + inputs.steam_flow * cfg.enthalpy(h2o, params.steam_temperature)
                + air_flow * cfg.mixture_enthalpy(&air, params.air_temperature);
            let n_prod: Vec<f64> = (0..cfg.len()).map(|j| n_syn[j] + bypass_flow * y_gas[j]).collect();
            let product_flow: f64 = reactor.total_flow + bypass_flow;
            let h_prod: f64 =
                n_syn.iter().enumerate().map(|(j, v)| v * cfg.enthalpy(j, t_hot)).sum::<f64>() + bypass_flow * h_ng(t_g);
            let product_temperature = stream_temperature(cfg, &n_prod, h_prod).ok_or(SimulationError::Unit { unit: "product mixer" })?;
            return Ok(FlowsheetState {
                inputs,
                bypass_flow,
                main_flow,
                duty,
                cold_outlet_temperature: t_cold,
                hot_outlet_temperature: t_hot,
                expander_outlet_temperature: t_exp,
                work,
                mixer_flows,
                mixer_enthalpy,
                air_flow,
                mixer_pressure: params.pressure * params.expander_pressure_ratio,
                reactor,
                product_flow,
                product_x: n_prod.iter().map(|v| v / product_flow).collect(),
                product_temperature,
            });
        }
        if iterations >= 100 {
            return Err(SimulationError::Tear { iterations });
        }
    }
}
