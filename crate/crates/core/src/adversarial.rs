//! Discriminator side of the distillation: the frozen teacher as a
//! timestep-aware feature extractor, small per-key-time projection heads and
//! the GAN objective.

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    add_bias, gemm_a_wt, gemm_g_w, gemm_gt_a, sigmoid, silu_backward, silu_forward, sum_rows_into, Architecture,
    Matrix, MlpShape, Objective, ParamFile, ParamSet, Tensor, Trace, VelocityModel,
};
use crate::seed::rng_from_seed;

/// Probabilities are clamped to `[ε, 1 − ε]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Which teacher block output feeds the heads. Block `0` is the input layer,
/// block `R` the last residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureTapConfig {
    /// Used when the key time is above zero.
    pub noisy: usize,
    /// Used at `t = 0`.
    pub clean: usize,
}

impl FeatureTapConfig {
    /// Last block for noisy inputs, the middle block for clean ones.
    pub fn for_blocks(blocks: usize) -> Self {
        Self {
            noisy: blocks,
            clean: blocks / 2,
        }
    }

    pub fn layer_for(&self, t: f64) -> usize {
        if t > 0.0 {
            self.noisy
        } else {
            self.clean
        }
    }

    pub fn validate(&self, teacher: &VelocityModel) -> Result<()> {
        let blocks = teacher.shape().blocks;
        for (what, layer) in [("noisy", self.noisy), ("clean", self.clean)] {
            if layer > blocks {
                return Err(Error::Config(format!(
                    "{what} feature tap {layer} out of range (teacher has blocks 0..={blocks})"
                )));
            }
        }
        Ok(())
    }
}

/// Teacher hidden activations at the tap chosen for time `t`.
pub fn extract_features(teacher: &VelocityModel, x: &Matrix, t: f64, tap: &FeatureTapConfig) -> Result<Matrix> {
    Ok(FeatureTrace::new(teacher, x, t, tap)?.features)
}

/// Features plus what is needed to backpropagate to the input state.
struct FeatureTrace {
    layer: usize,
    trace: Trace,
    features: Matrix,
}

impl FeatureTrace {
    fn new(teacher: &VelocityModel, x: &Matrix, t: f64, tap: &FeatureTapConfig) -> Result<Self> {
        let layer = tap.layer_for(t);
        let trace = teacher
            .shape()
            .forward(teacher.params(), x, &vec![t; x.rows()], Some(layer))?;
        let features = trace.feature(layer, teacher.hidden()).expect("traced up to the tap");
        Ok(Self { layer, trace, features })
    }

    /// ∂L/∂x given ∂L/∂features; teacher parameters get no gradient.
    fn input_grad(&self, teacher: &VelocityModel, grad: &Matrix) -> Result<Matrix> {
        let g = teacher
            .shape()
            .backward(teacher.params(), &self.trace, None, Some((self.layer, grad)), false)?;
        Ok(g.state)
    }
}

/// Two-layer MLP `H → H/2 → 1` producing one real/fake logit per row.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    key_index: usize,
    input: usize,
    hidden: usize,
    params: ParamSet,
}

struct HeadTrace {
    pre: Vec<f64>,
    sig: Vec<f64>,
    act: Vec<f64>,
    logits: Vec<f64>,
}

impl ProjectionHead {
    /// Fan-in scaled first layer, zero output layer (every probability starts at ½).
    pub fn new(key_index: usize, input: usize, seed: u64) -> Result<Self> {
        if input == 0 {
            return Err(Error::Config("projection head needs a non-empty feature".into()));
        }
        let hidden = (input / 2).max(1);
        let mut rng = rng_from_seed(seed);
        let bound = 1.0 / (input as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let w1 = (0..hidden * input).map(|_| dist.sample(&mut rng)).collect();
        let b1 = (0..hidden).map(|_| dist.sample(&mut rng)).collect();
        let params = ParamSet::new(vec![
            Tensor {
                name: "fc1.weight".into(),
                shape: vec![hidden, input],
                data: w1,
            },
            Tensor {
                name: "fc1.bias".into(),
                shape: vec![hidden],
                data: b1,
            },
            Tensor::zeros("fc2.weight", vec![1, hidden]),
            Tensor::zeros("fc2.bias", vec![1]),
        ])?;
        Ok(Self {
            key_index,
            input,
            hidden,
            params,
        })
    }

    pub fn key_index(&self) -> usize {
        self.key_index
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn with_params(&self, params: ParamSet) -> Result<Self> {
        self.params.ensure_congruent(&params, "projection head")?;
        Ok(Self { params, ..self.clone() })
    }

    fn forward(&self, params: &ParamSet, features: &Matrix) -> Result<HeadTrace> {
        if features.cols() != self.input {
            return Err(Error::Shape(format!(
                "head {} expects {} features, got {}",
                self.key_index,
                self.input,
                features.cols()
            )));
        }
        let (n, h) = (features.rows(), self.hidden);
        let p = params.tensors();
        let mut pre = vec![0.0; n * h];
        gemm_a_wt(features.as_slice(), &p[0].data, &mut pre, n, self.input, h);
        add_bias(&mut pre, &p[1].data);
        let mut act = vec![0.0; n * h];
        let mut sig = vec![0.0; n * h];
        silu_forward(&pre, &mut act, &mut sig);
        let mut logits = vec![0.0; n];
        gemm_a_wt(&act, &p[2].data, &mut logits, n, h, 1);
        add_bias(&mut logits, &p[3].data);
        Ok(HeadTrace { pre, sig, act, logits })
    }

    /// Returns (parameter gradient, feature gradient) for ∂L/∂logit = `g`.
    fn backward(&self, params: &ParamSet, features: &Matrix, trace: &HeadTrace, g: &[f64]) -> (ParamSet, Matrix) {
        let (n, h, f) = (features.rows(), self.hidden, self.input);
        let p = params.tensors();
        let mut grads = params.zeros_like();
        let gt = grads.tensors_mut();
        gemm_gt_a(g, &trace.act, &mut gt[2].data, n, 1, h);
        sum_rows_into(g, 1, &mut gt[3].data);
        let mut g_act = vec![0.0; n * h];
        gemm_g_w(g, &p[2].data, &mut g_act, n, 1, h);
        silu_backward(&trace.pre, &trace.sig, &mut g_act);
        gemm_gt_a(&g_act, features.as_slice(), &mut gt[0].data, n, h, f);
        sum_rows_into(&g_act, h, &mut gt[1].data);
        let mut g_feat = vec![0.0; n * f];
        gemm_g_w(&g_act, &p[0].data, &mut g_feat, n, h, f);
        (grads, Matrix::from_vec(n, f, g_feat).expect("consistent"))
    }

    pub fn logits(&self, features: &Matrix) -> Result<Vec<f64>> {
        Ok(self.forward(&self.params, features)?.logits)
    }

    pub fn to_file(&self) -> ParamFile {
        ParamFile::new(
            Architecture::ProjectionHead {
                input: self.input,
                hidden: self.hidden,
                key_index: self.key_index,
            },
            self.params.clone(),
        )
    }

    pub fn from_file(file: ParamFile) -> Result<Self> {
        match file.architecture {
            Architecture::ProjectionHead { input, key_index, .. } => {
                Self::new(key_index, input, 0)?.with_params(file.params)
            }
            other => Err(Error::Config(format!(
                "expected a projection head file, found {other:?}"
            ))),
        }
    }
}

/// `sigmoid(H_k(features))` per row.
pub fn discriminate(head: &ProjectionHead, features: &Matrix) -> Result<Vec<f64>> {
    Ok(head.logits(features)?.into_iter().map(sigmoid).collect())
}

/// How the generator's adversarial term is written.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLoss {
    /// `−log D(fake)`
    #[default]
    NonSaturating,
    /// `log(1 − D(fake))`, the literal minimax form.
    Minimax,
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Discriminator and generator losses for one real/fake probability pair.
pub fn adv_losses(p_real: f64, p_fake: f64, form: GeneratorLoss) -> (f64, f64) {
    let (pr, pf) = (clamp_prob(p_real), clamp_prob(p_fake));
    let d_loss = -(pr.ln() + (1.0 - pf).ln());
    let g_loss = match form {
        GeneratorLoss::NonSaturating => -pf.ln(),
        GeneratorLoss::Minimax => (1.0 - pf).ln(),
    };
    (d_loss, g_loss)
}

/// ∂(−log p)/∂logit and ∂(−log(1−p))/∂logit, zero inside the clamp.
fn real_logit_grad(p: f64) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        0.0
    } else {
        -(1.0 - p)
    }
}

fn fake_logit_grad(p: f64) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        0.0
    } else {
        p
    }
}

fn generator_logit_grad(p: f64, form: GeneratorLoss) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return 0.0;
    }
    match form {
        GeneratorLoss::NonSaturating => -(1.0 - p),
        GeneratorLoss::Minimax => -p,
    }
}

/// Mean discriminator loss of one head over paired real and fake features,
/// as a function of the head's parameters.
pub struct DiscriminatorObjective<'a> {
    pub head: &'a ProjectionHead,
    pub real: &'a Matrix,
    pub fake: &'a Matrix,
}

impl DiscriminatorObjective<'_> {
    fn probs(&self, params: &ParamSet) -> Result<(HeadTrace, HeadTrace)> {
        if self.real.rows() == 0 || self.fake.rows() == 0 {
            return Err(Error::Usage("discriminator batch is empty".into()));
        }
        Ok((
            self.head.forward(params, self.real)?,
            self.head.forward(params, self.fake)?,
        ))
    }

    fn mean_loss(&self, real: &HeadTrace, fake: &HeadTrace) -> f64 {
        let lr: f64 = real.logits.iter().map(|&z| -clamp_prob(sigmoid(z)).ln()).sum::<f64>() / real.logits.len() as f64;
        let lf: f64 = fake
            .logits
            .iter()
            .map(|&z| -(1.0 - clamp_prob(sigmoid(z))).ln())
            .sum::<f64>()
            / fake.logits.len() as f64;
        lr + lf
    }
}

impl Objective for DiscriminatorObjective<'_> {
    fn value(&self, params: &ParamSet) -> Result<f64> {
        let (r, f) = self.probs(params)?;
        Ok(self.mean_loss(&r, &f))
    }

    fn value_and_grad(&self, params: &ParamSet) -> Result<(f64, ParamSet)> {
        let (r, f) = self.probs(params)?;
        let value = self.mean_loss(&r, &f);
        let nr = r.logits.len() as f64;
        let nf = f.logits.len() as f64;
        let gr: Vec<f64> = r.logits.iter().map(|&z| real_logit_grad(sigmoid(z)) / nr).collect();
        let gf: Vec<f64> = f.logits.iter().map(|&z| fake_logit_grad(sigmoid(z)) / nf).collect();
        let (mut grads, _) = self.head.backward(params, self.real, &r, &gr);
        let (gfake, _) = self.head.backward(params, self.fake, &f, &gf);
        grads.add_scaled(&gfake, 1.0);
        Ok((value, grads))
    }
}

/// Generator loss of latents produced by one student Euler step,
/// `x' = x + (t_to − t_from)·s(x, t_from)`, judged by `head` on frozen
/// teacher features at `t_to`. A function of the student parameters.
pub struct GeneratorObjective<'a> {
    pub student: MlpShape,
    pub teacher: &'a VelocityModel,
    pub head: &'a ProjectionHead,
    pub tap: FeatureTapConfig,
    pub from: &'a Matrix,
    pub t_from: f64,
    pub t_to: f64,
    pub form: GeneratorLoss,
}

struct GeneratorPass {
    student: Trace,
    generated: Matrix,
    features: FeatureTrace,
    head: HeadTrace,
}

impl GeneratorObjective<'_> {
    fn pass(&self, params: &ParamSet) -> Result<GeneratorPass> {
        if self.from.rows() == 0 {
            return Err(Error::Usage("generator batch is empty".into()));
        }
        let student = self
            .student
            .forward(params, self.from, &vec![self.t_from; self.from.rows()], None)?;
        let mut generated = self.from.clone();
        let dt = self.t_to - self.t_from;
        let v = student.output().expect("full forward");
        for (x, vi) in generated.as_mut_slice().iter_mut().zip(v.as_slice()) {
            *x += dt * vi;
        }
        let features = FeatureTrace::new(self.teacher, &generated, self.t_to, &self.tap)?;
        let head = self.head.forward(self.head.params(), &features.features)?;
        Ok(GeneratorPass {
            student,
            generated,
            features,
            head,
        })
    }

    fn mean_loss(&self, logits: &[f64]) -> f64 {
        logits
            .iter()
            .map(|&z| adv_losses(0.5, sigmoid(z), self.form).1)
            .sum::<f64>()
            / logits.len() as f64
    }

    /// The generated latents for the given student parameters.
    pub fn generated(&self, params: &ParamSet) -> Result<Matrix> {
        Ok(self.pass(params)?.generated)
    }
}

impl Objective for GeneratorObjective<'_> {
    fn value(&self, params: &ParamSet) -> Result<f64> {
        Ok(self.mean_loss(&self.pass(params)?.head.logits))
    }

    fn value_and_grad(&self, params: &ParamSet) -> Result<(f64, ParamSet)> {
        let pass = self.pass(params)?;
        let value = self.mean_loss(&pass.head.logits);
        let n = pass.head.logits.len() as f64;
        let g_logit: Vec<f64> = pass
            .head
            .logits
            .iter()
            .map(|&z| generator_logit_grad(sigmoid(z), self.form) / n)
            .collect();
        let (_, g_feat) = self
            .head
            .backward(self.head.params(), &pass.features.features, &pass.head, &g_logit);
        let mut g_state = pass.features.input_grad(self.teacher, &g_feat)?;
        let dt = self.t_to - self.t_from;
        g_state.as_mut_slice().iter_mut().for_each(|g| *g *= dt);
        let g = self
            .student
            .backward(params, &pass.student, Some(&g_state), None, true)?;
        Ok((value, g.params.expect("requested")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::gaussian;
    use crate::seed::rng_for;
    use rand::Rng;

    fn random_teacher() -> VelocityModel {
        let mut m = VelocityModel::build(1, 16, 4, 3).unwrap();
        let n = m.params().len();
        let mut rng = rng_for(3, "out");
        for v in &mut m.params_mut().tensors_mut()[n - 2].data {
            *v = rng.random_range(-0.3..0.3);
        }
        m
    }

    fn active_head(input: usize, seed: u64) -> ProjectionHead {
        let mut h = ProjectionHead::new(0, input, seed).unwrap();
        let mut rng = rng_for(seed, "head-out");
        for v in &mut h.params_mut().tensors_mut()[2].data {
            *v = rng.random_range(-1.0..1.0);
        }
        h
    }

    #[test]
    fn adversarial_losses_at_chance_and_extremes() {
        let (d, g) = adv_losses(0.5, 0.5, GeneratorLoss::NonSaturating);
        assert!((d - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!((g - 2f64.ln()).abs() < 1e-15);
        let (d, _) = adv_losses(1.0, 0.0, GeneratorLoss::NonSaturating);
        assert!(d < 1e-6);
        let (d, g) = adv_losses(0.0, 1.0, GeneratorLoss::NonSaturating);
        assert!(d.is_finite() && g.is_finite());
        let (_, gm) = adv_losses(0.5, 0.25, GeneratorLoss::Minimax);
        assert!((gm - 0.75f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_initialised_head_is_undecided() {
        let head = ProjectionHead::new(2, 16, 1).unwrap();
        let f = gaussian(5, 16, &mut rng_for(1, "f"));
        assert!(discriminate(&head, &f).unwrap().iter().all(|&p| p == 0.5));
        assert!(matches!(
            discriminate(&head, &gaussian(1, 3, &mut rng_for(1, "g"))),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn probability_is_monotone_in_the_logit() {
        let mut head = ProjectionHead::new(0, 4, 1).unwrap();
        let f = Matrix::from_rows(&[vec![0.1, 0.2, 0.3, 0.4]]).unwrap();
        let mut last = 0.0;
        for b in [-3.0, -1.0, 0.0, 2.0, 5.0] {
            head.params_mut().tensors_mut()[3].data[0] = b;
            let p = discriminate(&head, &f).unwrap()[0];
            assert!(p > last && p < 1.0);
            last = p;
        }
    }

    #[test]
    fn taps_select_layers_by_time() {
        let teacher = random_teacher();
        let tap = FeatureTapConfig::for_blocks(4);
        assert_eq!(tap, FeatureTapConfig { noisy: 4, clean: 2 });
        let x = Matrix::column(&[0.7, -1.1]);
        let noisy = extract_features(&teacher, &x, 0.2, &tap).unwrap();
        let clean = extract_features(&teacher, &x, 0.0, &tap).unwrap();
        assert_eq!(noisy.cols(), 16);
        assert_eq!(clean.cols(), 16);
        assert_ne!(noisy, clean);
        let bad = FeatureTapConfig { noisy: 5, clean: 0 };
        assert!(matches!(bad.validate(&teacher), Err(Error::Config(_))));
        assert!(extract_features(&teacher, &x, 0.5, &bad).is_err());
    }

    fn fd_check<O: Objective>(obj: &O, params: &ParamSet, stride: usize) {
        let (_, g) = obj.value_and_grad(params).unwrap();
        let h = 1e-5;
        for flat in (0..params.numel()).step_by(stride) {
            let v = params.get_flat(flat).unwrap();
            let mut p = params.clone();
            p.set_flat(flat, v + h);
            let up = obj.value(&p).unwrap();
            p.set_flat(flat, v - h);
            let down = obj.value(&p).unwrap();
            let fd = (up - down) / (2.0 * h);
            let an = g.get_flat(flat).unwrap();
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + fd.abs().max(an.abs())),
                "param {flat}: {fd} vs {an}"
            );
        }
    }

    #[test]
    fn discriminator_gradient_matches_finite_differences() {
        let head = active_head(16, 5);
        let real = gaussian(6, 16, &mut rng_for(5, "r"));
        let fake = gaussian(6, 16, &mut rng_for(5, "f"));
        let obj = DiscriminatorObjective {
            head: &head,
            real: &real,
            fake: &fake,
        };
        fd_check(&obj, head.params(), 3);
    }

    #[test]
    fn generator_gradient_matches_finite_differences() {
        let teacher = random_teacher();
        let mut student = teacher.clone();
        let n = student.params().len();
        for v in &mut student.params_mut().tensors_mut()[n - 2].data {
            *v += 0.1;
        }
        let head = active_head(16, 9);
        let from = gaussian(5, 1, &mut rng_for(9, "z"));
        for (t_from, t_to) in [(1.0, 0.8), (0.2, 0.0)] {
            for form in [GeneratorLoss::NonSaturating, GeneratorLoss::Minimax] {
                let obj = GeneratorObjective {
                    student: student.shape(),
                    teacher: &teacher,
                    head: &head,
                    tap: FeatureTapConfig::for_blocks(4),
                    from: &from,
                    t_from,
                    t_to,
                    form,
                };
                fd_check(&obj, student.params(), 13);
            }
        }
    }

    #[test]
    fn head_file_round_trip() {
        let head = active_head(8, 2);
        let back = ProjectionHead::from_file(head.to_file()).unwrap();
        assert_eq!(back, head);
    }
}
