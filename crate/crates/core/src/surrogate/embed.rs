//! Replacement of the mixer and reactor section of a full-space flowsheet by
//! a trained surrogate.

use std::collections::BTreeSet;

use super::mlp::encode_mlp;
use super::{Predictor, Surrogate, SurrogateError};
use crate::expr::{incidence_vars, Expr, VarId};
use crate::flowsheet::build::{build_flowsheet, Flowsheet, FLOW_SCALE, TEMPERATURE_SCALE};
use crate::flowsheet::params::FlowsheetParams;
use crate::flowsheet::thermo::ThermoConfig;
use crate::model::{extract_subsystem, Constraint, Formulation, ModelError, Tag};

/// Builds the full-space flowsheet and embeds `surrogate` into it.
pub fn build_surrogate_flowsheet(cfg: &ThermoConfig, params: &FlowsheetParams, surrogate: &Surrogate) -> Result<Flowsheet, SurrogateError> {
    let full = build_flowsheet(cfg, params, Formulation::FullSpace)?;
    embed_surrogate(&full, surrogate)
}

/// Removes every constraint incident to a mixer or reactor variable and
/// ties the syngas stream to the surrogate's predictions over the steam
/// flow, expander outlet temperature, main gas flow and conversion. All
/// other constraints, including the operational limits, are kept verbatim.
pub fn embed_surrogate(full: &Flowsheet, surrogate: &Surrogate) -> Result<Flowsheet, SurrogateError> {
    let model = &full.model;
    if model.formulation != Formulation::FullSpace {
        return Err(ModelError::WrongFormulation { expected: Formulation::FullSpace, found: model.formulation }.into());
    }
    // the replaced section must be a well-formed square block
    extract_subsystem(model, Tag::Reactor)?;
    let h = &full.handles;

    let inputs: Vec<VarId> = surrogate
        .input_names()
        .iter()
        .map(|name| match name.as_str() {
            "F_S" => Ok(h.steam_flow),
            "T_ref" => Ok(h.expander_outlet_temperature),
            "F_ref" => Ok(h.main_flow),
            "X" => Ok(h.conversion),
            other => Err(SurrogateError::UnknownInput(other.to_string())),
        })
        .collect::<Result<_, _>>()?;
    let names = surrogate.output_names();
    // (stream variable, residual scale) per surrogate output
    let mut targets = Vec::with_capacity(names.len());
    for name in &names {
        let target = match name.as_str() {
            "T_out" => (h.syngas_temperature, TEMPERATURE_SCALE),
            "F_out" => (h.syngas_flow, FLOW_SCALE),
            other => {
                let j = other
                    .strip_prefix("x_")
                    .and_then(|sp| full.thermo.index(sp))
                    .ok_or_else(|| SurrogateError::UnknownOutput(other.to_string()))?;
                (h.syngas_x[j], 1.0 / full.initial.reactor.x[j].max(1e-12))
            }
        };
        targets.push(target);
    }
    let covered: BTreeSet<VarId> = targets.iter().map(|t| t.0).collect();
    let stream = [h.syngas_temperature, h.syngas_flow].into_iter().chain(h.syngas_x.iter().copied());
    if let Some(v) = stream.into_iter().find(|v| !covered.contains(v)) {
        return Err(SurrogateError::MissingOutput(model.var(v).name.clone()));
    }

    let mut section: BTreeSet<VarId> = [h.mixer_enthalpy, h.air_flow, h.mixer_pressure].into_iter().collect();
    section.extend(&h.mixer_flows);
    section.extend(model.vars().iter().enumerate().filter(|(_, v)| v.owner == Some(Tag::Reactor)).map(|(i, _)| VarId(i)));

    let mut out = full.clone();
    out.model.formulation = surrogate.formulation();
    out.model.remove_constraints(|c| incidence_vars(&c.residual).iter().any(|v| section.contains(v)));

    let values = out.model.values();
    let x0: Vec<f64> = inputs.iter().map(|v| values[v.0]).collect();
    let in_exprs: Vec<Expr> = inputs.iter().map(|&v| Expr::var(v)).collect();
    let preds = match surrogate {
        Surrogate::Poly(p) => p.exprs(&in_exprs),
        Surrogate::Mlp(m) => encode_mlp(m, &mut out.model, &in_exprs, &x0, "surrogate").outputs,
    };
    let start = surrogate.predict(&x0);
    for (((name, (var, scale)), pred), y0) in names.iter().zip(&targets).zip(preds).zip(start) {
        out.model.add_constraint(Constraint::equality(format!("surrogate.{name}"), (Expr::var(*var) - pred) * *scale, Tag::Surrogate));
        if y0.is_finite() {
            let v = out.model.var_mut(*var);
            v.value = y0.clamp(v.lower, v.upper);
        }
    }
    Ok(out)
}
