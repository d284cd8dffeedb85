//! Unstacked deep operator network: a branch MLP on the patch values and a
//! trunk MLP on the query location, combined by an inner product in `R^K`.
//!
//! Parameters live in one flat vector. Layout: every branch layer in order
//! (weight matrix `out × in` row-major, then the `out` biases), then every
//! trunk layer in the same form, then the output bias if the architecture has one.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{fmt_f64, write_lines, Grid, GridField};
use crate::patch::{branch_input, ObservationSet, PatchSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Layer widths of both nets, input width first and `K` last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DonArchitecture {
    pub branch_layers: Vec<usize>,
    pub trunk_layers: Vec<usize>,
    pub activation: Activation,
    pub output_bias: bool,
}

impl DonArchitecture {
    pub fn new(branch_layers: Vec<usize>, trunk_layers: Vec<usize>, activation: Activation, output_bias: bool) -> Result<Self> {
        let arch = DonArchitecture {
            branch_layers,
            trunk_layers,
            activation,
            output_bias,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Branch `[sensors, w, w, w]`, trunk `[dim, w, w, w]`, tanh, with output bias.
    pub fn standard(sensors: usize, dim: usize, width: usize) -> Result<Self> {
        Self::new(vec![sensors, width, width, width], vec![dim, width, width, width], Activation::Tanh, true)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, layers) in [("branch", &self.branch_layers), ("trunk", &self.trunk_layers)] {
            if layers.len() < 2 || layers.contains(&0) {
                return Err(Error::invalid(format!("{name} net needs at least two positive widths")));
            }
        }
        if self.branch_layers.last() != self.trunk_layers.last() {
            return Err(Error::invalid("branch and trunk must end in the same width K"));
        }
        Ok(())
    }

    pub fn branch_input_dim(&self) -> usize {
        self.branch_layers[0]
    }

    pub fn trunk_input_dim(&self) -> usize {
        self.trunk_layers[0]
    }

    pub fn width(&self) -> usize {
        *self.branch_layers.last().unwrap()
    }

    fn net_size(layers: &[usize]) -> usize {
        layers.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    pub fn param_count(&self) -> usize {
        Self::net_size(&self.branch_layers) + Self::net_size(&self.trunk_layers) + usize::from(self.output_bias)
    }

    fn trunk_offset(&self) -> usize {
        Self::net_size(&self.branch_layers)
    }

    fn bias_index(&self) -> Option<usize> {
        self.output_bias.then(|| self.param_count() - 1)
    }
}

/// The flat parameter vector θ.
#[derive(Debug, Clone, PartialEq)]
pub struct DonParams {
    values: Vec<f64>,
}

impl DonParams {
    pub fn zeros(arch: &DonArchitecture) -> Self {
        DonParams {
            values: vec![0.0; arch.param_count()],
        }
    }

    pub fn unflatten(arch: &DonArchitecture, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::shape(format!(
                "architecture has {} parameters, got {}",
                arch.param_count(),
                values.len()
            )));
        }
        Ok(DonParams { values })
    }

    pub fn flatten(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn output_bias(&self, arch: &DonArchitecture) -> f64 {
        arch.bias_index().map_or(0.0, |i| self.values[i])
    }

    pub fn set_output_bias(&mut self, arch: &DonArchitecture, value: f64) {
        if let Some(i) = arch.bias_index() {
            self.values[i] = value;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check(&self, arch: &DonArchitecture) -> Result<()> {
        if self.values.len() != arch.param_count() {
            return Err(Error::shape(format!(
                "parameter vector has {} entries, architecture needs {}",
                self.values.len(),
                arch.param_count()
            )));
        }
        Ok(())
    }
}

/// A loss value with its gradient, laid out like [`DonParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct DonGradient {
    pub loss: f64,
    pub values: Vec<f64>,
}

impl DonGradient {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Branch inputs, trunk inputs and labels of a dataset as dense matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub branch: Array2<f64>,
    pub trunk: Array2<f64>,
    pub labels: Array1<f64>,
}

impl Batch {
    pub fn from_observations(set: &ObservationSet) -> Self {
        let n = set.len();
        let (bw, d) = (set.branch_width(), set.dim());
        let mut branch = Array2::zeros((n, bw));
        let mut trunk = Array2::zeros((n, d));
        let mut labels = Array1::zeros(n);
        for (r, t) in set.triplets.iter().enumerate() {
            branch.row_mut(r).assign(&ArrayView1::from(&t.branch_input[..]));
            trunk.row_mut(r).assign(&ArrayView1::from(&t.location[..]));
            labels[r] = t.label;
        }
        Batch { branch, trunk, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn check(&self, arch: &DonArchitecture) -> Result<()> {
        if self.branch.ncols() != arch.branch_input_dim() || self.trunk.ncols() != arch.trunk_input_dim() {
            return Err(Error::shape(format!(
                "batch has branch width {} and trunk width {}, architecture expects {} and {}",
                self.branch.ncols(),
                self.trunk.ncols(),
                arch.branch_input_dim(),
                arch.trunk_input_dim()
            )));
        }
        if self.branch.nrows() != self.trunk.nrows() || self.trunk.nrows() != self.labels.len() {
            return Err(Error::shape("batch row counts differ"));
        }
        Ok(())
    }
}

struct LayerView<'a> {
    w: ArrayView2<'a, f64>,
    b: ArrayView1<'a, f64>,
    w_off: usize,
    b_off: usize,
}

fn layers<'a>(theta: &'a [f64], widths: &[usize], offset: usize) -> Vec<LayerView<'a>> {
    let mut off = offset;
    widths
        .windows(2)
        .map(|w| {
            let (inp, out) = (w[0], w[1]);
            let w_off = off;
            let b_off = off + inp * out;
            off = b_off + out;
            LayerView {
                w: ArrayView2::from_shape((out, inp), &theta[w_off..b_off]).unwrap(),
                b: ArrayView1::from(&theta[b_off..b_off + out]),
                w_off,
                b_off,
            }
        })
        .collect()
}

/// Forward pass keeping every layer's output; the last entry is the linear output.
fn mlp_forward(layers: &[LayerView], act: Activation, input: ArrayView2<f64>) -> Vec<Array2<f64>> {
    let mut outs: Vec<Array2<f64>> = Vec::with_capacity(layers.len() + 1);
    outs.push(input.to_owned());
    for (l, layer) in layers.iter().enumerate() {
        let mut z = outs[l].dot(&layer.w.t());
        z += &layer.b;
        if l + 1 < layers.len() {
            act.apply(&mut z);
        }
        outs.push(z);
    }
    outs
}

/// Accumulates parameter gradients given `∂L/∂(final output)`.
fn mlp_backward(layers: &[LayerView], act: Activation, outs: &[Array2<f64>], mut delta: Array2<f64>, grad: &mut [f64]) {
    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        let (out, inp) = layer.w.dim();
        let gw = delta.t().dot(&outs[l]);
        let mut gw_view = ndarray::ArrayViewMut2::from_shape((out, inp), &mut grad[layer.w_off..layer.w_off + out * inp]).unwrap();
        gw_view += &gw;
        let gb = delta.sum_axis(Axis(0));
        for (g, v) in grad[layer.b_off..layer.b_off + out].iter_mut().zip(gb.iter()) {
            *g += v;
        }
        if l > 0 {
            let mut prev = delta.dot(&layer.w);
            prev.zip_mut_with(&outs[l], |d, &a| *d *= act.derivative_from_output(a));
            delta = prev;
        }
    }
}

struct Forward<'a> {
    branch_layers: Vec<LayerView<'a>>,
    trunk_layers: Vec<LayerView<'a>>,
    branch_outs: Vec<Array2<f64>>,
    trunk_outs: Vec<Array2<f64>>,
    output: Array1<f64>,
}

fn forward_full<'a>(params: &'a DonParams, arch: &DonArchitecture, branch: ArrayView2<f64>, trunk: ArrayView2<f64>) -> Forward<'a> {
    let theta = params.flatten();
    let branch_layers = layers(theta, &arch.branch_layers, 0);
    let trunk_layers = layers(theta, &arch.trunk_layers, arch.trunk_offset());
    let branch_outs = mlp_forward(&branch_layers, arch.activation, branch);
    let trunk_outs = mlp_forward(&trunk_layers, arch.activation, trunk);
    let bk = branch_outs.last().unwrap();
    let tk = trunk_outs.last().unwrap();
    let mut output = (bk * tk).sum_axis(Axis(1));
    output += params.output_bias(arch);
    Forward {
        branch_layers,
        trunk_layers,
        branch_outs,
        trunk_outs,
        output,
    }
}

/// Network outputs for every row of `branch` / `trunk`.
pub fn forward_batch(params: &DonParams, arch: &DonArchitecture, branch: ArrayView2<f64>, trunk: ArrayView2<f64>) -> Result<Array1<f64>> {
    params.check(arch)?;
    if branch.ncols() != arch.branch_input_dim() || trunk.ncols() != arch.trunk_input_dim() || branch.nrows() != trunk.nrows() {
        return Err(Error::shape("input matrices do not match the architecture"));
    }
    Ok(forward_full(params, arch, branch, trunk).output)
}

/// `⟨branch(branch_in), trunk(x)⟩ + output_bias`.
pub fn don_forward(params: &DonParams, arch: &DonArchitecture, branch_in: &[f64], x: &[f64]) -> Result<f64> {
    if branch_in.len() != arch.branch_input_dim() {
        return Err(Error::shape(format!(
            "branch input has length {}, expected {}",
            branch_in.len(),
            arch.branch_input_dim()
        )));
    }
    if x.len() != arch.trunk_input_dim() {
        return Err(Error::shape(format!("point has dimension {}, expected {}", x.len(), arch.trunk_input_dim())));
    }
    let b = ArrayView2::from_shape((1, branch_in.len()), branch_in).unwrap();
    let t = ArrayView2::from_shape((1, x.len()), x).unwrap();
    Ok(forward_batch(params, arch, b, t)?[0])
}

/// Gradient of `Σ_n w_n G_θ(row n)` where `weights(outputs)` supplies `w` and a loss value.
pub fn weighted_output_gradient(
    params: &DonParams,
    arch: &DonArchitecture,
    batch: &Batch,
    weights: impl FnOnce(&Array1<f64>) -> (f64, Array1<f64>),
) -> Result<DonGradient> {
    params.check(arch)?;
    batch.check(arch)?;
    let fw = forward_full(params, arch, batch.branch.view(), batch.trunk.view());
    let (loss, dy) = weights(&fw.output);
    let dy_col = dy.view().insert_axis(Axis(1));
    let bk = fw.branch_outs.last().unwrap();
    let tk = fw.trunk_outs.last().unwrap();
    let mut grad = vec![0.0; arch.param_count()];
    mlp_backward(&fw.branch_layers, arch.activation, &fw.branch_outs, tk * &dy_col, &mut grad);
    mlp_backward(&fw.trunk_layers, arch.activation, &fw.trunk_outs, bk * &dy_col, &mut grad);
    if let Some(i) = arch.bias_index() {
        grad[i] = dy.sum();
    }
    Ok(DonGradient { loss, values: grad })
}

/// Mean squared error over the batch and its gradient.
pub fn mse_loss_and_grad(params: &DonParams, arch: &DonArchitecture, batch: &Batch) -> Result<DonGradient> {
    if batch.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let n = batch.len() as f64;
    weighted_output_gradient(params, arch, batch, |y| {
        let r = y - &batch.labels;
        let loss = r.dot(&r) / n;
        (loss, r * (2.0 / n))
    })
}

pub fn don_loss_and_grad(params: &DonParams, arch: &DonArchitecture, dataset: &ObservationSet) -> Result<(f64, DonGradient)> {
    let g = mse_loss_and_grad(params, arch, &Batch::from_observations(dataset))?;
    Ok((g.loss, g))
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(arch: &DonArchitecture, seed: u64) -> DonParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; arch.param_count()];
    let mut off = 0;
    for widths in [&arch.branch_layers, &arch.trunk_layers] {
        for w in widths.windows(2) {
            let (inp, out) = (w[0], w[1]);
            let bound = (6.0 / (inp + out) as f64).sqrt();
            for v in &mut values[off..off + inp * out] {
                *v = rng.gen_range(-bound..=bound);
            }
            off += inp * out + out;
        }
    }
    DonParams { values }
}

/// Coarse patch values and locations for every node of an evaluation grid.
#[derive(Debug, Clone)]
pub struct FieldInputs {
    grid: Grid,
    branch: Array2<f64>,
    trunk: Array2<f64>,
}

impl FieldInputs {
    pub fn new(coarse: &GridField, spec: &PatchSpec, eval_grid: &Grid) -> Result<Self> {
        let n = eval_grid.node_count();
        let d = eval_grid.dim();
        let width = spec.sensors(d);
        let mut branch = Array2::zeros((n, width));
        let mut trunk = Array2::zeros((n, d));
        for k in 0..n {
            let x = eval_grid.node(k);
            let b = branch_input(coarse, &x, spec)?;
            branch.row_mut(k).assign(&ArrayView1::from(&b[..]));
            trunk.row_mut(k).assign(&ArrayView1::from(&x[..]));
        }
        Ok(FieldInputs {
            grid: eval_grid.clone(),
            branch,
            trunk,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn predict(&self, params: &DonParams, arch: &DonArchitecture) -> Result<GridField> {
        let y = forward_batch(params, arch, self.branch.view(), self.trunk.view())?;
        GridField::new(self.grid.clone(), y.to_vec())
    }
}

pub fn predict_field(params: &DonParams, arch: &DonArchitecture, coarse: &GridField, spec: &PatchSpec, eval_grid: &Grid) -> Result<GridField> {
    FieldInputs::new(coarse, spec, eval_grid)?.predict(params, arch)
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes θ one value per line and the architecture to a `.json` file beside it.
pub fn write_params(params: &DonParams, arch: &DonArchitecture, path: impl AsRef<Path>) -> Result<()> {
    params.check(arch)?;
    let path = path.as_ref();
    let mut s = String::with_capacity(params.len() * 24);
    for v in params.flatten() {
        s.push_str(&fmt_f64(*v));
        s.push('\n');
    }
    write_lines(path, &s)?;
    let json = serde_json::json!({
        "architecture": arch,
        "param_count": params.len(),
    });
    write_lines(sidecar(path), &(serde_json::to_string_pretty(&json)? + "\n"))
}

pub fn read_params(path: impl AsRef<Path>) -> Result<(DonArchitecture, DonParams)> {
    let path = path.as_ref();
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(sidecar(path))?)?;
    let arch: DonArchitecture = serde_json::from_value(meta["architecture"].clone())?;
    arch.validate()?;
    let values = std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().parse::<f64>().map_err(|e| Error::Parse(format!("`{l}`: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let params = DonParams::unflatten(&arch, values)?;
    Ok((arch, params))
}
