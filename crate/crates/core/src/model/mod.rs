//! Dual-scale edge-conditioned graph network mapping a geometry to the
//! generator of an orbital rotation.

mod adam;
mod checkpoint;
mod network;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureConfig, EDGE_EXTRA_WIDTH, NODE_BASE_WIDTH, PAIR_WIDTH};

pub use adam::{Adam, AdamState};
pub use checkpoint::{Checkpoint, TrainState, CHECKPOINT_SCHEMA};
pub use network::{
    forward, model_forward, model_gradients, model_loss, BatchGradients, Prediction, Sample,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub gnn_layers: usize,
    pub proj_dim: usize,
    /// Width of the hidden layer of each edge-kernel MLP.
    pub kernel_hidden: usize,
    /// Number of linear layers in the pair readout.
    pub readout_layers: usize,
    pub readout_hidden: usize,
    pub t_walk: usize,
    pub l_rbf: usize,
    pub rbf_min: f64,
    pub rbf_max: f64,
    pub r_fine: f64,
    pub r_coarse: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 64,
            gnn_layers: 3,
            proj_dim: 32,
            kernel_hidden: 32,
            readout_layers: 2,
            readout_hidden: 128,
            t_walk: 8,
            l_rbf: 20,
            rbf_min: 0.0,
            rbf_max: 6.0,
            r_fine: 2.5,
            r_coarse: 5.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.hidden_dim,
            self.gnn_layers,
            self.proj_dim,
            self.kernel_hidden,
            self.readout_layers,
            self.readout_hidden,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid("model dimensions must all be ≥ 1"));
        }
        self.feature_config().validate()
    }

    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            t_walk: self.t_walk,
            l_rbf: self.l_rbf,
            rbf_min: self.rbf_min,
            rbf_max: self.rbf_max,
            r_fine: self.r_fine,
            r_coarse: self.r_coarse,
        }
    }

    fn raw_node_width(&self) -> usize {
        NODE_BASE_WIDTH + self.t_walk
    }

    fn edge_width(&self) -> usize {
        self.l_rbf + EDGE_EXTRA_WIDTH
    }

    /// Width of `[projected ‖ raw]` node vectors entering the first layer.
    fn conv_input_width(&self) -> usize {
        self.proj_dim + self.raw_node_width()
    }

    fn readout_input_width(&self) -> usize {
        3 * self.hidden_dim + self.edge_width() + PAIR_WIDTH
    }
}

/// Name and shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    /// `[rows, cols]` for matrices, `[len]` for vectors.
    pub shape: Vec<usize>,
}

impl TensorSpec {
    fn rows_cols(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [r] => (*r, 1),
            _ => unreachable!("tensors are vectors or matrices"),
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct ConvLayer {
    pub d_in: usize,
    pub node: Linear,
    pub kernel1: Linear,
    /// Weight `[H·d_in, kernel_hidden]`; each column reshapes (column-major)
    /// into an `H × d_in` kernel.
    pub kernel2: Linear,
    pub shortcut: Option<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub proj1: Linear,
    pub proj2: Linear,
    pub proj_norm: Norm,
    /// Fine stack, then coarse stack.
    pub scales: [Vec<ConvLayer>; 2],
    pub fusion: Linear,
    pub fusion_norm: Norm,
    pub readout: Vec<Linear>,
}

struct SpecBuilder(Vec<TensorSpec>);

impl SpecBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>) -> usize {
        self.0.push(TensorSpec { name, shape });
        self.0.len() - 1
    }

    fn linear(&mut self, prefix: &str, out: usize, inp: usize) -> Linear {
        Linear {
            w: self.push(format!("{prefix}.weight"), vec![out, inp]),
            b: self.push(format!("{prefix}.bias"), vec![out]),
        }
    }

    fn norm(&mut self, prefix: &str, dim: usize) -> Norm {
        Norm {
            gain: self.push(format!("{prefix}.gain"), vec![dim]),
            bias: self.push(format!("{prefix}.shift"), vec![dim]),
        }
    }
}

pub(crate) fn layout(cfg: &ModelConfig) -> (Layout, Vec<TensorSpec>) {
    let h = cfg.hidden_dim;
    let mut b = SpecBuilder(Vec::new());
    let proj1 = b.linear("proj.0", cfg.proj_dim, cfg.raw_node_width());
    let proj2 = b.linear("proj.1", cfg.proj_dim, cfg.proj_dim);
    let proj_norm = b.norm("proj.norm", cfg.proj_dim);
    let mut stack = |scale: &str| -> Vec<ConvLayer> {
        (0..cfg.gnn_layers)
            .map(|l| {
                let d_in = if l == 0 { cfg.conv_input_width() } else { h };
                let p = format!("{scale}.{l}");
                ConvLayer {
                    d_in,
                    node: b.linear(&format!("{p}.node"), h, d_in),
                    kernel1: b.linear(&format!("{p}.kernel.0"), cfg.kernel_hidden, cfg.edge_width()),
                    kernel2: b.linear(&format!("{p}.kernel.1"), h * d_in, cfg.kernel_hidden),
                    shortcut: (d_in != h).then(|| b.push(format!("{p}.shortcut"), vec![h, d_in])),
                }
            })
            .collect()
    };
    let scales = [stack("fine"), stack("coarse")];
    let fusion = b.linear("fusion", h, 2 * h);
    let fusion_norm = b.norm("fusion.norm", h);
    let mut readout = Vec::new();
    let mut width = cfg.readout_input_width();
    for k in 0..cfg.readout_layers {
        let out = if k + 1 == cfg.readout_layers { 1 } else { cfg.readout_hidden };
        readout.push(b.linear(&format!("readout.{k}"), out, width));
        width = out;
    }
    let layout = Layout {
        proj1,
        proj2,
        proj_norm,
        scales,
        fusion,
        fusion_norm,
        readout,
    };
    (layout, b.0)
}

/// Parameter tensors in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    specs: Vec<TensorSpec>,
    tensors: Vec<DMatrix<f64>>,
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (_, specs) = layout(cfg);
        let tensors = specs
            .iter()
            .map(|s| {
                let (r, c) = s.rows_cols();
                DMatrix::zeros(r, c)
            })
            .collect();
        ModelParams { specs, tensors }
    }

    pub fn manifest(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[DMatrix<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [DMatrix<f64>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&DMatrix<f64>> {
        self.specs.iter().position(|s| s.name == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DMatrix<f64>> {
        let i = self.specs.iter().position(|s| s.name == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn num_values(&self) -> usize {
        self.specs.iter().map(TensorSpec::len).sum()
    }

    /// All values, tensor by tensor in manifest order, each row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for t in &self.tensors {
            for r in 0..t.nrows() {
                out.extend(t.row(r).iter());
            }
        }
        out
    }

    /// Inverse of [`ModelParams::to_flat`] for the layout of `cfg`.
    pub fn from_flat(cfg: &ModelConfig, values: &[f64]) -> Result<Self> {
        let mut p = ModelParams::zeros(cfg);
        if values.len() != p.num_values() {
            return Err(Error::Schema(format!(
                "{} parameter values for a model with {}",
                values.len(),
                p.num_values()
            )));
        }
        let mut it = values.iter();
        for t in p.tensors.iter_mut() {
            for r in 0..t.nrows() {
                for c in 0..t.ncols() {
                    t[(r, c)] = *it.next().expect("length checked");
                }
            }
        }
        Ok(p)
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn axpy(&mut self, scale: f64, other: &ModelParams) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += scale * y;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().map(|t| t.amax()).fold(0.0, f64::max)
    }
}

/// Glorot-uniform weights, zero biases, unit norm gains. Values are drawn in
/// manifest order, row-major, from a ChaCha stream seeded with `cfg.seed`.
pub fn init_params(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut p = ModelParams::zeros(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for (spec, t) in p.specs.iter().zip(p.tensors.iter_mut()) {
        if spec.name.ends_with(".gain") {
            t.fill(1.0);
        } else if spec.shape.len() == 2 {
            let (out, inp) = spec.rows_cols();
            let limit = (6.0 / (out + inp) as f64).sqrt();
            for r in 0..out {
                for c in 0..inp {
                    t[(r, c)] = rng.random_range(-limit..limit);
                }
            }
        }
    }
    Ok(p)
}
