//! Feedforward network with sigmoid hidden layers and an affine output
//! layer, trained with Adam on standardized data.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Split};
use super::{Predictor, SurrogateError, FORMAT_VERSION};
use crate::expr::{Expr, VarId};
use crate::model::{Constraint, NlpModel, Tag, Variable};

/// Affine map to the network's scaled coordinates: `s = (v - offset) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Scaler {
    pub fn identity(n: usize) -> Self {
        Scaler { offset: vec![0.0; n], scale: vec![1.0; n] }
    }

    /// Mean and standard deviation of each column; constant columns get unit
    /// scale so the map stays invertible.
    pub fn standardize(rows: &[&[f64]]) -> Self {
        let n = rows.first().map_or(0, |r| r.len());
        let m = rows.len().max(1) as f64;
        let offset: Vec<f64> = (0..n).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / m).collect();
        let scale = (0..n)
            .map(|k| {
                let sd = (rows.iter().map(|r| (r[k] - offset[k]).powi(2)).sum::<f64>() / m).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Scaler { offset, scale }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(&self.offset).zip(&self.scale).map(|((x, o), s)| (x - o) / s).collect()
    }

    pub fn invert(&self, s: &[f64]) -> Vec<f64> {
        s.iter().zip(&self.offset).zip(&self.scale).map(|((x, o), sc)| o + sc * x).collect()
    }
}

/// Dense layer; `weights` is row-major `rows x cols` (outputs x inputs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Layer { rows, cols, weights: vec![0.0; rows * cols], bias: vec![0.0; rows] }
    }

    pub fn w(&self, r: usize, c: usize) -> f64 {
        self.weights[r * self.cols + c]
    }

    fn affine(&self, a: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| {
                let mut acc = self.bias[r];
                for (c, v) in a.iter().enumerate() {
                    acc += self.w(r, c) * v;
                }
                acc
            })
            .collect()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Sigmoid hidden layers followed by an affine output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSurrogate {
    pub format_version: u32,
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
    pub layers: Vec<Layer>,
    pub input_scaler: Scaler,
    pub output_scaler: Scaler,
}

impl MlpSurrogate {
    pub fn new(input_names: Vec<String>, output_names: Vec<String>, layers: Vec<Layer>) -> Self {
        let (ni, no) = (input_names.len(), output_names.len());
        MlpSurrogate {
            format_version: FORMAT_VERSION,
            input_names,
            output_names,
            layers,
            input_scaler: Scaler::identity(ni),
            output_scaler: Scaler::identity(no),
        }
    }

    pub(crate) fn validate(&self) -> Result<(), SurrogateError> {
        let bad = |m: String| Err(SurrogateError::Malformed(m));
        if self.layers.is_empty() {
            return bad("network has no layers".into());
        }
        let mut width = self.input_names.len();
        for (i, l) in self.layers.iter().enumerate() {
            if l.cols != width || l.weights.len() != l.rows * l.cols || l.bias.len() != l.rows {
                return bad(format!("layer {i} does not chain"));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return bad(format!("layer {i} has non-finite parameters"));
            }
            width = l.rows;
        }
        if width != self.output_names.len() {
            return bad("last layer width differs from the output count".into());
        }
        for (s, n) in [(&self.input_scaler, self.input_names.len()), (&self.output_scaler, self.output_names.len())] {
            if s.offset.len() != n || s.scale.len() != n || s.scale.iter().any(|v| !(*v != 0.0 && v.is_finite())) {
                return bad("scaler is not invertible or has the wrong size".into());
            }
        }
        Ok(())
    }
}

impl Predictor for MlpSurrogate {
    fn output_names(&self) -> Vec<String> {
        self.output_names.clone()
    }

    fn predict(&self, inputs: &[f64]) -> Vec<f64> {
        mlp_forward(self, inputs)
    }
}

/// Scales the inputs, applies the layers and unscales the outputs.
pub fn mlp_forward(m: &MlpSurrogate, inputs: &[f64]) -> Vec<f64> {
    let mut a = m.input_scaler.apply(inputs);
    let last = m.layers.len() - 1;
    for (i, l) in m.layers.iter().enumerate() {
        let z = l.affine(&a);
        a = if i == last { z } else { z.into_iter().map(sigmoid).collect() };
    }
    m.output_scaler.invert(&a)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig { hidden: vec![30; 4], epochs: 500, learning_rate: 3e-3, batch_size: 16, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpTraining {
    pub network: MlpSurrogate,
    /// Mean squared error in standardized output units.
    pub train_loss: f64,
    pub validation_loss: f64,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
        }
    }
}

/// Forward pass over a batch (columns are samples); returns every layer's
/// activation, input first.
fn batch_forward(ws: &[DMatrix<f64>], bs: &[DVector<f64>], x: DMatrix<f64>) -> Vec<DMatrix<f64>> {
    let mut acts = vec![x];
    let last = ws.len() - 1;
    for (i, (w, b)) in ws.iter().zip(bs).enumerate() {
        let mut z = w * acts.last().expect("input present");
        for mut col in z.column_iter_mut() {
            col += b;
        }
        if i < last {
            z.apply(|v| *v = sigmoid(*v));
        }
        acts.push(z);
    }
    acts
}

fn batch_loss(ws: &[DMatrix<f64>], bs: &[DVector<f64>], x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    if x.ncols() == 0 {
        return 0.0;
    }
    let out = batch_forward(ws, bs, x.clone()).pop().expect("output present");
    (out - y).norm_squared() / (y.len() as f64)
}

/// Trains a sigmoid network with Adam on mean squared error in standardized
/// units. Deterministic for a given seed.
pub fn train_mlp(data: &Dataset, cfg: &MlpConfig) -> Result<MlpTraining, SurrogateError> {
    let tr = data.indices(Split::Train);
    let va = data.indices(Split::Validation);
    if tr.is_empty() {
        return Err(SurrogateError::DegenerateData("no training rows".into()));
    }
    let ni = data.input_names.len();
    let no = data.output_names.len();
    let rows_in: Vec<&[f64]> = tr.iter().map(|&i| data.inputs[i].as_slice()).collect();
    let rows_out: Vec<&[f64]> = tr.iter().map(|&i| data.outputs[i].as_slice()).collect();
    let sx = Scaler::standardize(&rows_in);
    let sy = Scaler::standardize(&rows_out);
    let to_matrix = |idx: &[usize], inputs: bool| -> DMatrix<f64> {
        let n = if inputs { ni } else { no };
        let mut m = DMatrix::zeros(n, idx.len());
        for (c, &i) in idx.iter().enumerate() {
            let v = if inputs { sx.apply(&data.inputs[i]) } else { sy.apply(&data.outputs[i]) };
            m.set_column(c, &DVector::from_vec(v));
        }
        m
    };
    let (x_tr, y_tr) = (to_matrix(&tr, true), to_matrix(&tr, false));
    let (x_va, y_va) = (to_matrix(&va, true), to_matrix(&va, false));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dims = vec![ni];
    dims.extend(&cfg.hidden);
    dims.push(no);
    // Glorot-uniform weights, zero biases
    let mut ws: Vec<DMatrix<f64>> = dims
        .windows(2)
        .map(|d| {
            let lim = (6.0 / (d[0] + d[1]) as f64).sqrt();
            DMatrix::from_fn(d[1], d[0], |_, _| rng.random_range(-lim..lim))
        })
        .collect();
    let mut bs: Vec<DVector<f64>> = dims[1..].iter().map(|&n| DVector::zeros(n)).collect();
    let mut opt_w: Vec<Adam> = ws.iter().map(|w| Adam::new(w.len())).collect();
    let mut opt_b: Vec<Adam> = bs.iter().map(|b| Adam::new(b.len())).collect();

    let batch = cfg.batch_size.max(1);
    let mut order: Vec<usize> = (0..tr.len()).collect();
    let mut last_loss = batch_loss(&ws, &bs, &x_tr, &y_tr);
    let nl = ws.len();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let xb = DMatrix::from_fn(ni, chunk.len(), |r, c| x_tr[(r, chunk[c])]);
            let yb = DMatrix::from_fn(no, chunk.len(), |r, c| y_tr[(r, chunk[c])]);
            let acts = batch_forward(&ws, &bs, xb);
            let mut delta = (&acts[nl] - &yb) * (2.0 / (yb.len() as f64));
            for l in (0..nl).rev() {
                let gw = &delta * acts[l].transpose();
                let gb: DVector<f64> = delta.column_sum();
                if l > 0 {
                    let mut back = ws[l].transpose() * &delta;
                    back.zip_apply(&acts[l], |d, a| *d *= a * (1.0 - a));
                    delta = back;
                }
                opt_w[l].step(ws[l].as_mut_slice(), gw.as_slice(), cfg.learning_rate);
                opt_b[l].step(bs[l].as_mut_slice(), gb.as_slice(), cfg.learning_rate);
            }
        }
        let loss = batch_loss(&ws, &bs, &x_tr, &y_tr);
        if !loss.is_finite() {
            return Err(SurrogateError::NonFinite { epoch, last_loss });
        }
        last_loss = loss;
    }

    let layers = ws
        .iter()
        .zip(&bs)
        .map(|(w, b)| Layer {
            rows: w.nrows(),
            cols: w.ncols(),
            weights: w.transpose().as_slice().to_vec(),
            bias: b.as_slice().to_vec(),
        })
        .collect();
    let mut network = MlpSurrogate::new(data.input_names.clone(), data.output_names.clone(), layers);
    network.input_scaler = sx;
    network.output_scaler = sy;
    Ok(MlpTraining {
        network,
        train_loss: last_loss,
        validation_loss: batch_loss(&ws, &bs, &x_va, &y_va),
    })
}

/// Auxiliary variables, constraints and output expressions of an encoded
/// network.
#[derive(Clone, Debug)]
pub struct MlpEncoding {
    /// Pre- and post-activation variable of every hidden neuron.
    pub variables: Vec<VarId>,
    /// Indices of the added constraints in the model.
    pub constraints: Vec<usize>,
    /// Unscaled network outputs as expressions of the last hidden layer.
    pub outputs: Vec<Expr>,
}

/// Encodes `m` into `model` over the input expressions: every hidden neuron
/// gets `z = W a + b` and `a = sigmoid(z)` with `z` and `a` as variables;
/// the affine output layer stays an expression. Auxiliary values start at a
/// forward pass through `input_values`.
pub fn encode_mlp(m: &MlpSurrogate, model: &mut NlpModel, inputs: &[Expr], input_values: &[f64], prefix: &str) -> MlpEncoding {
    let mut variables = Vec::new();
    let mut constraints = Vec::new();
    let mut a: Vec<Expr> = inputs
        .iter()
        .zip(&m.input_scaler.offset)
        .zip(&m.input_scaler.scale)
        .map(|((x, &o), &s)| (x.clone() - o) * (1.0 / s))
        .collect();
    let mut a_val = m.input_scaler.apply(input_values);
    let last = m.layers.len() - 1;
    for (li, l) in m.layers.iter().enumerate() {
        let affine: Vec<Expr> = (0..l.rows)
            .map(|r| {
                let mut terms: Vec<Expr> = (0..l.cols).filter(|&c| l.w(r, c) != 0.0).map(|c| l.w(r, c) * a[c].clone()).collect();
                terms.push(Expr::constant(l.bias[r]));
                Expr::sum(terms)
            })
            .collect();
        let z_val = l.affine(&a_val);
        if li == last {
            let outputs = affine
                .into_iter()
                .zip(&m.output_scaler.offset)
                .zip(&m.output_scaler.scale)
                .map(|((z, &o), &s)| s * z + o)
                .collect();
            return MlpEncoding { variables, constraints, outputs };
        }
        let mut next = Vec::with_capacity(l.rows);
        let mut next_val = Vec::with_capacity(l.rows);
        for (r, aff) in affine.into_iter().enumerate() {
            let z = model.add_var(Variable::new(format!("{prefix}.z[{li}][{r}]"), z_val[r]).owned_by(Tag::Surrogate));
            let av = sigmoid(z_val[r]);
            let act = model.add_var(Variable::new(format!("{prefix}.a[{li}][{r}]"), av).owned_by(Tag::Surrogate));
            constraints.push(model.add_constraint(Constraint::equality(
                format!("{prefix}.affine[{li}][{r}]"),
                Expr::var(z) - aff,
                Tag::Surrogate,
            )));
            constraints.push(model.add_constraint(Constraint::equality(
                format!("{prefix}.sigmoid[{li}][{r}]"),
                Expr::var(act) - Expr::var(z).sigmoid(),
                Tag::Surrogate,
            )));
            variables.extend([z, act]);
            next.push(Expr::var(act));
            next_val.push(av);
        }
        a = next;
        a_val = next_val;
    }
    unreachable!("the last layer returns")
}
