//! Equation-oriented flowsheet model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::params::{FlowsheetParams, Inputs};
use super::simulate::{sequential_pass, FlowsheetState, SimulationError};
use super::thermo::{ConfigError, ThermoConfig, R_GAS};
use crate::expr::{Expr, VarId};
use crate::implicit::reformulate;
use crate::model::{Constraint, ConstraintKind, Formulation, ModelError, NlpModel, SquareSubsystem, Tag, Variable};
use crate::sqsolve::{solve_blt, BlockSolveOptions, BlockSolveReport};

#[derive(Clone, Debug, Error, PartialEq)]
pub enum BuildError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("initialization failed: {0}")]
    Initialization(#[from] SimulationError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0:?} needs a trained surrogate; use the surrogate embedding")]
    NeedsSurrogate(Formulation),
}

// Residual scales: the solver sees O(1) rows.
const FLOW: f64 = 1e-3;
/// Residual scale of flow rows (per mol/s).
pub const FLOW_SCALE: f64 = FLOW;
const ENERGY: f64 = 1e-7;
const TEMPERATURE: f64 = 1e-3;
/// Residual scale of temperature rows (per K).
pub const TEMPERATURE_SCALE: f64 = TEMPERATURE;
const PRESSURE: f64 = 1e-5;
const GIBBS: f64 = 1.0 / (R_GAS * 1000.0);

/// Variables of the reactor block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReactorVars {
    pub temperature: VarId,
    pub pressure: VarId,
    pub flow: VarId,
    pub x: Vec<VarId>,
    pub multipliers: Vec<VarId>,
}

/// Named handles into a built flowsheet model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Handles {
    pub gas_flow: VarId,
    pub steam_flow: VarId,
    pub bypass: VarId,
    pub pressure: VarId,
    pub conversion: VarId,
    pub bypass_flow: VarId,
    pub main_flow: VarId,
    pub duty: VarId,
    pub cold_outlet_temperature: VarId,
    pub hot_outlet_temperature: VarId,
    pub expander_outlet_temperature: VarId,
    pub work: VarId,
    pub mixer_flows: Vec<VarId>,
    pub mixer_enthalpy: VarId,
    pub air_flow: VarId,
    pub mixer_pressure: VarId,
    pub reactor: ReactorVars,
    pub syngas_temperature: VarId,
    pub syngas_flow: VarId,
    pub syngas_x: Vec<VarId>,
    pub product_flow: VarId,
    pub product_x: Vec<VarId>,
    pub product_temperature: VarId,
}

impl Handles {
    pub fn inputs(&self) -> [VarId; 3] {
        [self.gas_flow, self.steam_flow, self.bypass]
    }
}

/// A built model with the data it was built from.
#[derive(Clone, Debug)]
pub struct Flowsheet {
    pub model: NlpModel,
    pub handles: Handles,
    pub thermo: ThermoConfig,
    pub params: FlowsheetParams,
    /// State of the shared initialization pass.
    pub initial: FlowsheetState,
}

impl Flowsheet {
    /// Manipulated inputs at a full model point.
    pub fn inputs_at(&self, point: &[f64]) -> Inputs {
        Inputs {
            gas_flow: point[self.handles.gas_flow.0],
            steam_flow: point[self.handles.steam_flow.0],
            bypass: point[self.handles.bypass.0],
        }
    }

    /// Pins the swept parameters; values of the other variables are kept.
    pub fn set_operating_point(&mut self, pressure: f64, conversion: f64) -> Result<(), ModelError> {
        self.model.fix_parameter("P_G", pressure)?;
        self.model.fix_parameter("X", conversion)?;
        self.params.pressure = pressure;
        self.params.conversion = conversion;
        Ok(())
    }
}

/// Builds the flowsheet for `formulation`, initialized by one sequential pass
/// at the nominal inputs. Surrogate formulations are produced by embedding a
/// trained surrogate into the full-space model.
pub fn build_flowsheet(cfg: &ThermoConfig, params: &FlowsheetParams, formulation: Formulation) -> Result<Flowsheet, BuildError> {
    let initial = sequential_pass(cfg, params, params.nominal)?;
    let (model, handles) = full_space_model(cfg, params, &initial)?;
    let model = match formulation {
        Formulation::FullSpace => model,
        Formulation::Implicit => reformulate(&model)?,
        other => return Err(BuildError::NeedsSurrogate(other)),
    };
    Ok(Flowsheet { model, handles, thermo: cfg.clone(), params: params.clone(), initial })
}

fn var(m: &mut NlpModel, name: String, value: f64, scale: f64) -> VarId {
    m.add_var(Variable::new(name, value).scale(scale))
}

/// Full-space model with variable values taken from `s`.
pub fn full_space_model(cfg: &ThermoConfig, p: &FlowsheetParams, s: &FlowsheetState) -> Result<(NlpModel, Handles), BuildError> {
    p.validate(cfg)?;
    let ns = cfg.len();
    let names = cfg.names();
    let y_gas = p.composition_vector(cfg, &p.gas_composition, "gas")?;
    let y_air = p.composition_vector(cfg, &p.air_composition, "air")?;
    let ch4 = cfg.index("CH4").expect("validated");
    let h2o = cfg.index("H2O").expect("validated");
    let h2 = cfg.index("H2").expect("validated");
    let n2 = cfg.index("N2");
    let elements = cfg.elements();
    let e = Expr::var;

    let mut m = NlpModel::new(Formulation::FullSpace);
    let pressure = m.add_param("P_G", p.pressure);
    let conversion = m.add_param("X", p.conversion);

    let gas_flow = m.add_var(Variable::new("F_G", s.inputs.gas_flow).bounds(p.gas_flow.lower, p.gas_flow.upper).scale(FLOW));
    let steam_flow =
        m.add_var(Variable::new("F_s", s.inputs.steam_flow).bounds(p.steam_flow.lower, p.steam_flow.upper).scale(FLOW));
    let bypass = m.add_var(Variable::new("alpha", s.inputs.bypass).bounds(p.bypass.lower, p.bypass.upper));

    // splitter
    let bypass_flow = var(&mut m, "splitter.F_bypass".into(), s.bypass_flow, FLOW);
    let main_flow = var(&mut m, "splitter.F_main".into(), s.main_flow, FLOW);
    m.add_constraint(Constraint::equality(
        "splitter.bypass",
        (e(bypass_flow) - e(bypass) * e(gas_flow)) * FLOW,
        Tag::Internal,
    ));
    m.add_constraint(Constraint::equality(
        "splitter.main",
        (e(main_flow) - (1.0 - e(bypass)) * e(gas_flow)) * FLOW,
        Tag::Internal,
    ));

    // recuperator: cold side heats the main natural-gas stream
    let duty = var(&mut m, "recuperator.Q".into(), s.duty, ENERGY);
    let t_cold = var(&mut m, "recuperator.T_cold_out".into(), s.cold_outlet_temperature, TEMPERATURE);
    let t_hot = var(&mut m, "recuperator.T_hot_out".into(), s.hot_outlet_temperature, TEMPERATURE);

    // expander
    let t_exp = var(&mut m, "expander.T_out".into(), s.expander_outlet_temperature, TEMPERATURE);
    let work = var(&mut m, "expander.W".into(), s.work, 1e-6);

    // mixer
    let mixer_flows: Vec<VarId> =
        (0..ns).map(|j| var(&mut m, format!("mixer.F_{}", names[j]), s.mixer_flows[j], FLOW)).collect();
    let mixer_enthalpy = var(&mut m, "mixer.H".into(), s.mixer_enthalpy, 1e-8);
    let air_flow = m.add_var(Variable::new("mixer.F_air", s.air_flow).lower(0.0).scale(FLOW));
    let mixer_pressure = var(&mut m, "mixer.P".into(), s.mixer_pressure, PRESSURE);

    // reactor
    let r = &s.reactor;
    let rt = m.add_var(Variable::new("reactor.T", r.temperature).lower(200.0).scale(TEMPERATURE).owned_by(Tag::Reactor));
    let rp = m.add_var(Variable::new("reactor.P", r.pressure).scale(PRESSURE).owned_by(Tag::Reactor));
    let rf = m.add_var(Variable::new("reactor.F", r.total_flow).lower(0.0).scale(FLOW).owned_by(Tag::Reactor));
    let rx: Vec<VarId> = (0..ns)
        .map(|j| {
            let x0 = r.x[j].max(1e-300);
            m.add_var(Variable::new(format!("reactor.x_{}", names[j]), r.x[j]).lower(0.0).scale(1.0 / x0).owned_by(Tag::Reactor))
        })
        .collect();
    let rl: Vec<VarId> = elements
        .iter()
        .zip(&r.multipliers)
        .map(|(el, &l)| m.add_var(Variable::new(format!("reactor.L_{el}"), l).scale(1e-5).owned_by(Tag::Reactor)))
        .collect();

    // syngas arc and product
    let syn_t = var(&mut m, "syngas.T".into(), r.temperature, TEMPERATURE);
    let syn_f = var(&mut m, "syngas.F".into(), r.total_flow, FLOW);
    let syn_x: Vec<VarId> = (0..ns)
        .map(|j| {
            let x0 = r.x[j].max(1e-300);
            var(&mut m, format!("syngas.x_{}", names[j]), r.x[j], 1.0 / x0)
        })
        .collect();
    let prod_f = var(&mut m, "product.F".into(), s.product_flow, FLOW);
    let prod_x: Vec<VarId> = (0..ns).map(|j| var(&mut m, format!("product.x_{}", names[j]), s.product_x[j], 1.0)).collect();
    let prod_t = var(&mut m, "product.T".into(), s.product_temperature, TEMPERATURE);

    let h_gas = |t: &Expr| cfg.mixture_enthalpy_expr(&y_gas, t);
    let tg = Expr::constant(p.gas_temperature);
    let h_stream = |flows: Vec<Expr>, t: &Expr| Expr::sum(flows.into_iter().enumerate().map(|(j, f)| f * cfg.enthalpy_expr(j, t)));
    let syn_flows = |f: VarId, x: &[VarId]| -> Vec<Expr> { x.iter().map(|&xj| e(f) * e(xj)).collect() };

    m.add_constraint(Constraint::equality(
        "recuperator.cold",
        (e(main_flow) * (h_gas(&e(t_cold)) - h_gas(&tg)) - e(duty)) * ENERGY,
        Tag::Internal,
    ));
    m.add_constraint(Constraint::equality(
        "recuperator.hot",
        (h_stream(syn_flows(syn_f, &syn_x), &e(syn_t)) - h_stream(syn_flows(syn_f, &syn_x), &e(t_hot)) - e(duty)) * ENERGY,
        Tag::Internal,
    ));
    m.add_constraint(Constraint::equality(
        "recuperator.ua",
        (e(duty) - p.recuperator_ua * 0.5 * ((e(syn_t) - e(t_cold)) + (e(t_hot) - p.gas_temperature))) * ENERGY,
        Tag::Internal,
    ));

    m.add_constraint(Constraint::equality(
        "expander.temperature",
        (e(t_exp) - p.expander_temperature_ratio() * e(t_cold)) * TEMPERATURE,
        Tag::Internal,
    ));
    m.add_constraint(Constraint::equality(
        "expander.work",
        (e(work) - e(main_flow) * (h_gas(&e(t_cold)) - h_gas(&e(t_exp)))) * ENERGY,
        Tag::Internal,
    ));

    for j in 0..ns {
        let mut feed = vec![y_gas[j] * e(main_flow), y_air[j] * e(air_flow)];
        if j == h2o {
            feed.push(e(steam_flow));
        }
        m.add_constraint(Constraint::equality(
            format!("mixer.balance.{}", names[j]),
            (e(mixer_flows[j]) - Expr::sum(feed)) * FLOW,
            Tag::Internal,
        ));
    }
    let h_steam = cfg.enthalpy(h2o, p.steam_temperature);
    let h_air = cfg.mixture_enthalpy(&y_air, p.air_temperature);
    m.add_constraint(Constraint::equality(
        "mixer.enthalpy",
        (e(mixer_enthalpy) - e(main_flow) * h_gas(&e(t_exp)) - h_steam * e(steam_flow) - h_air * e(air_flow)) * ENERGY,
        Tag::Internal,
    ));
    m.add_constraint(Constraint::equality(
        "mixer.pressure",
        (e(mixer_pressure) - p.expander_pressure_ratio * e(pressure)) * PRESSURE,
        Tag::Internal,
    ));
    m.add_constraint(Constraint::equality(
        "mixer.conversion",
        (e(mixer_flows[ch4]) * (1.0 - e(conversion)) - e(syn_f) * e(syn_x[ch4])) * FLOW,
        Tag::Internal,
    ));

    // Gibbs reactor: stationarity of each reactive species, element and inert
    // balances, closure and the adiabatic balance
    m.add_constraint(Constraint::equality("reactor.pressure", (e(rp) - e(mixer_pressure)) * PRESSURE, Tag::Reactor));
    for el in &elements {
        let out = Expr::sum((0..ns).filter(|&j| !cfg.is_inert(j) && cfg.beta(j, el) != 0.0).map(|j| cfg.beta(j, el) * e(rx[j])));
        let inp = Expr::sum((0..ns).filter(|&j| !cfg.is_inert(j) && cfg.beta(j, el) != 0.0).map(|j| cfg.beta(j, el) * e(mixer_flows[j])));
        m.add_constraint(Constraint::equality(format!("reactor.element.{el}"), (e(rf) * out - inp) * FLOW, Tag::Reactor));
    }
    for j in cfg.inert_species() {
        m.add_constraint(Constraint::equality(
            format!("reactor.inert.{}", names[j]),
            (e(rf) * e(rx[j]) - e(mixer_flows[j])) * FLOW,
            Tag::Reactor,
        ));
    }
    for j in cfg.reactive_species() {
        let g = cfg.partial_gibbs_expr(j, &e(rt), &e(rp), &e(rx[j]));
        let l = Expr::sum(elements.iter().zip(&rl).filter(|(el, _)| cfg.beta(j, el) != 0.0).map(|(el, &lv)| cfg.beta(j, el) * e(lv)));
        m.add_constraint(Constraint::equality(format!("reactor.gibbs.{}", names[j]), (g + l) * GIBBS, Tag::Reactor));
    }
    m.add_constraint(Constraint::equality("reactor.closure", Expr::sum(rx.iter().map(|&v| e(v))) - 1.0, Tag::Reactor));
    m.add_constraint(Constraint::equality(
        "reactor.enthalpy",
        (e(rf) * Expr::sum((0..ns).map(|j| e(rx[j]) * cfg.enthalpy_expr(j, &e(rt)))) - e(mixer_enthalpy)) * ENERGY,
        Tag::Reactor,
    ));

    // arcs from the reactor to the recuperator
    m.add_constraint(Constraint::equality("link.T", (e(syn_t) - e(rt)) * TEMPERATURE, Tag::Linking));
    m.add_constraint(Constraint::equality("link.F", (e(syn_f) - e(rf)) * FLOW, Tag::Linking));
    for j in 0..ns {
        let x0 = r.x[j].max(1e-300);
        m.add_constraint(Constraint::equality(
            format!("link.x_{}", names[j]),
            (e(syn_x[j]) - e(rx[j])) / x0,
            Tag::Linking,
        ));
    }

    // product mixer: cooled syngas joins the bypass gas
    m.add_constraint(Constraint::equality(
        "product.flow",
        (e(prod_f) - e(syn_f) - e(bypass_flow)) * FLOW,
        Tag::Internal,
    ));
    for j in 0..ns {
        let mut feed = vec![e(syn_f) * e(syn_x[j])];
        if y_gas[j] != 0.0 {
            feed.push(y_gas[j] * e(bypass_flow));
        }
        m.add_constraint(Constraint::equality(
            format!("product.balance.{}", names[j]),
            (e(prod_f) * e(prod_x[j]) - Expr::sum(feed)) * FLOW,
            Tag::Internal,
        ));
    }
    let prod_flows: Vec<Expr> = prod_x.iter().map(|&x| e(prod_f) * e(x)).collect();
    m.add_constraint(Constraint::equality(
        "product.enthalpy",
        (h_stream(prod_flows, &e(prod_t)) - h_stream(syn_flows(syn_f, &syn_x), &e(t_hot)) - e(bypass_flow) * h_gas(&tg)) * ENERGY,
        Tag::Internal,
    ));

    // operational limits, shared by every formulation
    m.add_constraint(Constraint::inequality(
        "limit.reactor_temperature",
        (e(syn_t) - p.max_reactor_temperature) * TEMPERATURE,
        Tag::Operational,
    ));
    m.add_constraint(Constraint::inequality(
        "limit.product_temperature",
        (e(prod_t) - p.max_product_temperature) * TEMPERATURE,
        Tag::Operational,
    ));
    m.add_constraint(Constraint::inequality(
        "limit.product_flow",
        (p.min_product_flow * p.product_flow_scale - e(prod_f)) * FLOW,
        Tag::Operational,
    ));
    if let Some(n2) = n2 {
        m.add_constraint(Constraint::inequality("limit.product_n2", e(prod_x[n2]) - p.max_product_n2, Tag::Operational));
    }

    m.set_objective(e(prod_x[h2]));

    let handles = Handles {
        gas_flow,
        steam_flow,
        bypass,
        pressure,
        conversion,
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
        mixer_pressure,
        reactor: ReactorVars { temperature: rt, pressure: rp, flow: rf, x: rx, multipliers: rl },
        syngas_temperature: syn_t,
        syngas_flow: syn_f,
        syngas_x: syn_x,
        product_flow: prod_f,
        product_x: prod_x,
        product_temperature: prod_t,
    };
    Ok((m, handles))
}

/// Converged square simulation at fixed manipulated inputs.
#[derive(Clone, Debug)]
pub struct SquareSolution {
    /// Full model point of the full-space model in `flowsheet`.
    pub point: Vec<f64>,
    /// Product hydrogen fraction.
    pub objective: f64,
    pub report: BlockSolveReport,
    pub flowsheet: Flowsheet,
}

/// Closes the degrees of freedom by fixing `inputs` and solves the whole
/// flowsheet block by block, starting from a sequential pass.
pub fn simulate_square(
    cfg: &ThermoConfig,
    params: &FlowsheetParams,
    inputs: Inputs,
    opts: &BlockSolveOptions,
) -> Result<SquareSolution, SimulationError> {
    let initial = sequential_pass(cfg, params, inputs)?;
    let (mut model, handles) = full_space_model(cfg, params, &initial).map_err(|e| SimulationError::Square(e.to_string()))?;
    for v in handles.inputs() {
        model.var_mut(v).fixed = true;
    }
    let equations: Vec<Constraint> =
        model.constraints().iter().filter(|c| c.kind == ConstraintKind::Equality).cloned().collect();
    let outputs = model.solver_vars();
    let mut sub = SquareSubsystem::new(equations, outputs, |v| model.var(v).name.clone())
        .map_err(|e| SimulationError::Square(e.to_string()))?;
    sub.lower = sub.outputs.iter().map(|&v| model.var(v).lower).collect();
    sub.upper = sub.outputs.iter().map(|&v| model.var(v).upper).collect();
    let mut point = model.values();
    let report = solve_blt(&sub, &mut point, opts).map_err(|e| SimulationError::Square(e.to_string()))?;
    if !report.converged() {
        return Err(SimulationError::Square(report.to_string()));
    }
    for v in handles.inputs() {
        model.var_mut(v).fixed = false;
    }
    let objective = point[handles.product_x[cfg.index("H2").expect("validated")].0];
    Ok(SquareSolution {
        objective,
        report,
        flowsheet: Flowsheet { model, handles, thermo: cfg.clone(), params: params.clone(), initial },
        point,
    })
}
