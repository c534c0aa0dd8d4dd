//! Residual MLP velocity model with hand-written reverse-mode gradients.
//!
//! Layout, for data dimension `d`, width `H` and `R` residual blocks:
//!
//! ```text
//! [x, t] ─ in (d+1 → H) ─ silu ─ h₀
//! hᵢ₊₁ = hᵢ + W₂ silu(W₁ hᵢ + b₁) + b₂        i = 0..R
//! out = W_out h_R + b_out                       (H → d, zero initialised)
//! ```
//!
//! `h₀ … h_R` are the feature taps used by the discriminator.

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::matrix::{gemm_a_wt, gemm_g_w, gemm_gt_a, Matrix};
use super::params::{Activation, Architecture, ParamFile, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Applies SiLU in place on `pre`, writing activations to `out` and the
/// sigmoid of each pre-activation to `sig` (reused by the backward pass).
pub(crate) fn silu_forward(pre: &[f64], out: &mut [f64], sig: &mut [f64]) {
    for ((&z, o), s) in pre.iter().zip(out.iter_mut()).zip(sig.iter_mut()) {
        let sg = sigmoid(z);
        *s = sg;
        *o = z * sg;
    }
}

/// `grad ← grad · silu'(pre)`.
pub(crate) fn silu_backward(pre: &[f64], sig: &[f64], grad: &mut [f64]) {
    for ((g, &z), &s) in grad.iter_mut().zip(pre).zip(sig) {
        *g *= s * (1.0 + z * (1.0 - s));
    }
}

pub(crate) fn add_bias(out: &mut [f64], bias: &[f64]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

pub(crate) fn sum_rows_into(g: &[f64], cols: usize, db: &mut [f64]) {
    for row in g.chunks_exact(cols) {
        for (d, v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
}

/// Shape of a residual velocity MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub dim: usize,
    pub hidden: usize,
    pub blocks: usize,
}

const IN_W: usize = 0;
const IN_B: usize = 1;

fn block_w1(i: usize) -> usize {
    2 + 4 * i
}

impl MlpShape {
    pub fn new(dim: usize, hidden: usize, blocks: usize) -> Result<Self> {
        if dim == 0 || hidden == 0 || blocks == 0 {
            return Err(Error::Config(format!(
                "velocity model needs d, H, R >= 1 (got d={dim}, H={hidden}, R={blocks})"
            )));
        }
        Ok(Self { dim, hidden, blocks })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::VelocityMlp {
            dim: self.dim,
            hidden: self.hidden,
            blocks: self.blocks,
            activation: Activation::Silu,
        }
    }

    fn out_w(&self) -> usize {
        2 + 4 * self.blocks
    }

    /// Fan-in scaled uniform init for every layer except the output layer,
    /// which starts at zero.
    pub fn init(&self, seed: u64) -> ParamSet {
        let mut rng = rng_from_seed(seed);
        let (d, h) = (self.dim, self.hidden);
        let mut tensors = Vec::with_capacity(4 + 4 * self.blocks);
        let mut dense = |name: &str, fan_out: usize, fan_in: usize, rng: &mut dyn rand::RngCore| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let w = (0..fan_out * fan_in).map(|_| dist.sample(rng)).collect();
            let b = (0..fan_out).map(|_| dist.sample(rng)).collect();
            tensors.push(Tensor {
                name: format!("{name}.weight"),
                shape: vec![fan_out, fan_in],
                data: w,
            });
            tensors.push(Tensor {
                name: format!("{name}.bias"),
                shape: vec![fan_out],
                data: b,
            });
        };
        dense("input", h, d + 1, &mut rng);
        for i in 0..self.blocks {
            dense(&format!("block{i}.fc1"), h, h, &mut rng);
            dense(&format!("block{i}.fc2"), h, h, &mut rng);
        }
        tensors.push(Tensor::zeros("output.weight", vec![d, h]));
        tensors.push(Tensor::zeros("output.bias", vec![d]));
        ParamSet::new(tensors).expect("layout is consistent")
    }

    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let expected = 4 + 4 * self.blocks;
        if params.len() != expected
            || params.tensor(IN_W).shape != [self.hidden, self.dim + 1]
            || params.tensor(self.out_w()).shape != [self.dim, self.hidden]
        {
            return Err(Error::Shape(format!(
                "parameters do not match a d={} H={} R={} velocity model",
                self.dim, self.hidden, self.blocks
            )));
        }
        Ok(())
    }

    fn check_input(&self, x: &Matrix, t: &[f64]) -> Result<()> {
        if x.cols() != self.dim {
            return Err(Error::Shape(format!(
                "state has dimension {}, model expects {}",
                x.cols(),
                self.dim
            )));
        }
        if t.len() != x.rows() {
            return Err(Error::Shape(format!("{} times for {} states", t.len(), x.rows())));
        }
        Ok(())
    }

    /// Runs the network. With `tap = Some(b)` it stops after producing `h_b`
    /// and the trace holds no output.
    pub fn forward(&self, params: &ParamSet, x: &Matrix, t: &[f64], tap: Option<usize>) -> Result<Trace> {
        self.check_input(x, t)?;
        if let Some(b) = tap {
            if b > self.blocks {
                return Err(Error::Config(format!(
                    "feature tap {b} out of range (model has blocks 0..={})",
                    self.blocks
                )));
            }
        }
        let (d, h, n) = (self.dim, self.hidden, x.rows());
        let mut input = Vec::with_capacity(n * (d + 1));
        for (row, &ti) in x.iter_rows().zip(t) {
            input.extend_from_slice(row);
            input.push(ti);
        }

        let mut z0 = vec![0.0; n * h];
        let p = params.tensors();
        gemm_a_wt(&input, &p[IN_W].data, &mut z0, n, d + 1, h);
        add_bias(&mut z0, &p[IN_B].data);
        let mut h0 = vec![0.0; n * h];
        let mut sig0 = vec![0.0; n * h];
        silu_forward(&z0, &mut h0, &mut sig0);

        let last = tap.unwrap_or(self.blocks);
        let mut hs = Vec::with_capacity(last + 1);
        hs.push(h0);
        let mut blocks = Vec::with_capacity(last);
        for i in 0..last {
            let base = block_w1(i);
            let prev = &hs[i];
            let mut pre = vec![0.0; n * h];
            gemm_a_wt(prev, &p[base].data, &mut pre, n, h, h);
            add_bias(&mut pre, &p[base + 1].data);
            let mut act = vec![0.0; n * h];
            let mut sig = vec![0.0; n * h];
            silu_forward(&pre, &mut act, &mut sig);
            let mut next = prev.clone();
            gemm_a_wt(&act, &p[base + 2].data, &mut next, n, h, h);
            add_bias(&mut next, &p[base + 3].data);
            hs.push(next);
            blocks.push(BlockCache { pre, sig, act });
        }

        let output = if tap.is_none() {
            let mut out = vec![0.0; n * d];
            gemm_a_wt(&hs[self.blocks], &p[self.out_w()].data, &mut out, n, h, d);
            add_bias(&mut out, &p[self.out_w() + 1].data);
            Some(Matrix::from_vec(n, d, out)?)
        } else {
            None
        };

        Ok(Trace {
            rows: n,
            input,
            z0,
            sig0,
            hs,
            blocks,
            output,
        })
    }

    /// Reverse pass. `out_grad` seeds ∂L/∂output; `tap_grad` seeds ∂L/∂h_b.
    /// Parameter gradients are only accumulated when `want_params` is set;
    /// the state gradient ∂L/∂x is always returned.
    pub fn backward(
        &self,
        params: &ParamSet,
        trace: &Trace,
        out_grad: Option<&Matrix>,
        tap_grad: Option<(usize, &Matrix)>,
        want_params: bool,
    ) -> Result<Gradients> {
        let (d, h, n) = (self.dim, self.hidden, trace.rows);
        let p = params.tensors();
        let depth = trace.blocks.len();
        let mut grads = want_params.then(|| params.zeros_like());

        let mut g_h = vec![0.0; n * h];
        if let Some(go) = out_grad {
            go.ensure_shape(n, d, "output gradient")?;
            if trace.output.is_none() {
                return Err(Error::Usage("output gradient given for a truncated trace".into()));
            }
            gemm_g_w(go.as_slice(), &p[self.out_w()].data, &mut g_h, n, d, h);
            if let Some(gr) = grads.as_mut() {
                let gt = gr.tensors_mut();
                gemm_gt_a(
                    go.as_slice(),
                    &trace.hs[self.blocks],
                    &mut gt[self.out_w()].data,
                    n,
                    d,
                    h,
                );
                sum_rows_into(go.as_slice(), d, &mut gt[self.out_w() + 1].data);
            }
        }
        let tap = match tap_grad {
            Some((b, g)) => {
                g.ensure_shape(n, h, "feature gradient")?;
                if b > depth {
                    return Err(Error::Usage(format!("feature tap {b} beyond traced depth {depth}")));
                }
                if b == depth {
                    for (a, v) in g_h.iter_mut().zip(g.as_slice()) {
                        *a += v;
                    }
                }
                Some((b, g))
            }
            None => None,
        };

        let mut g_act = vec![0.0; n * h];
        let mut g_pre_in = vec![0.0; n * h];
        for i in (0..depth).rev() {
            let base = block_w1(i);
            let cache = &trace.blocks[i];
            // g_h is ∂L/∂h_{i+1}; the skip path passes it through unchanged.
            gemm_g_w(&g_h, &p[base + 2].data, &mut g_act, n, h, h);
            if let Some(gr) = grads.as_mut() {
                let gt = gr.tensors_mut();
                gemm_gt_a(&g_h, &cache.act, &mut gt[base + 2].data, n, h, h);
                sum_rows_into(&g_h, h, &mut gt[base + 3].data);
            }
            silu_backward(&cache.pre, &cache.sig, &mut g_act);
            if let Some(gr) = grads.as_mut() {
                let gt = gr.tensors_mut();
                gemm_gt_a(&g_act, &trace.hs[i], &mut gt[base].data, n, h, h);
                sum_rows_into(&g_act, h, &mut gt[base + 1].data);
            }
            gemm_g_w(&g_act, &p[base].data, &mut g_pre_in, n, h, h);
            for (a, v) in g_h.iter_mut().zip(&g_pre_in) {
                *a += v;
            }
            if let Some((b, g)) = tap {
                if b == i {
                    for (a, v) in g_h.iter_mut().zip(g.as_slice()) {
                        *a += v;
                    }
                }
            }
        }

        silu_backward(&trace.z0, &trace.sig0, &mut g_h);
        let mut g_input = vec![0.0; n * (d + 1)];
        gemm_g_w(&g_h, &p[IN_W].data, &mut g_input, n, h, d + 1);
        if let Some(gr) = grads.as_mut() {
            let gt = gr.tensors_mut();
            gemm_gt_a(&g_h, &trace.input, &mut gt[IN_W].data, n, h, d + 1);
            sum_rows_into(&g_h, h, &mut gt[IN_B].data);
        }
        let mut g_x = Vec::with_capacity(n * d);
        for row in g_input.chunks_exact(d + 1) {
            g_x.extend_from_slice(&row[..d]);
        }
        Ok(Gradients {
            params: grads,
            state: Matrix::from_vec(n, d, g_x)?,
        })
    }
}

struct BlockCache {
    pre: Vec<f64>,
    sig: Vec<f64>,
    act: Vec<f64>,
}

/// Activations kept from a forward pass.
pub struct Trace {
    rows: usize,
    input: Vec<f64>,
    z0: Vec<f64>,
    sig0: Vec<f64>,
    hs: Vec<Vec<f64>>,
    blocks: Vec<BlockCache>,
    output: Option<Matrix>,
}

impl Trace {
    pub fn output(&self) -> Option<&Matrix> {
        self.output.as_ref()
    }

    pub fn into_output(self) -> Option<Matrix> {
        self.output
    }

    /// Hidden state `h_b` (output of block `b`, `0` = input layer).
    pub fn feature(&self, b: usize, width: usize) -> Option<Matrix> {
        self.hs
            .get(b)
            .map(|h| Matrix::from_vec(self.rows, width, h.clone()).expect("trace widths are consistent"))
    }
}

pub struct Gradients {
    pub params: Option<ParamSet>,
    pub state: Matrix,
}

/// A residual MLP velocity field `v(x, t)`; used for both teacher and student.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityModel {
    shape: MlpShape,
    params: ParamSet,
}

impl VelocityModel {
    pub fn build(dim: usize, hidden: usize, blocks: usize, seed: u64) -> Result<Self> {
        let shape = MlpShape::new(dim, hidden, blocks)?;
        Ok(Self {
            params: shape.init(seed),
            shape,
        })
    }

    pub fn from_params(shape: MlpShape, params: ParamSet) -> Result<Self> {
        shape.check_params(&params)?;
        Ok(Self { shape, params })
    }

    pub fn shape(&self) -> MlpShape {
        self.shape
    }

    pub fn dim(&self) -> usize {
        self.shape.dim
    }

    pub fn hidden(&self) -> usize {
        self.shape.hidden
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    /// Velocities for a batch of states, each with its own time.
    pub fn eval_batch(&self, x: &Matrix, t: &[f64]) -> Result<Matrix> {
        let trace = self.shape.forward(&self.params, x, t, None)?;
        Ok(trace.into_output().expect("full forward has an output"))
    }

    /// Velocity at a single state.
    pub fn eval(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Usage(format!("time {t} outside [0, 1]")));
        }
        let out = self.eval_batch(&Matrix::from_vec(1, x.len(), x.to_vec())?, &[t])?;
        Ok(out.into_vec())
    }

    pub fn to_file(&self) -> ParamFile {
        ParamFile::new(self.shape.architecture(), self.params.clone())
    }

    pub fn from_file(file: ParamFile) -> Result<Self> {
        match file.architecture {
            Architecture::VelocityMlp {
                dim, hidden, blocks, ..
            } => Self::from_params(MlpShape::new(dim, hidden, blocks)?, file.params),
            other => Err(Error::Config(format!(
                "expected a velocity model file, found {other:?}"
            ))),
        }
    }
}
