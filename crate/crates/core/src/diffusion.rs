//! Latent diffusion: noise schedules, the forward noising process, the prior
//! shift of noisy latents and the noise-prediction objective.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::denoiser::Denoiser;
use crate::encoders::Stage1;
use crate::error::{Error, Result};
use crate::faceprior::FacePrior;
use crate::nn::Adam;
use crate::scalar::Scalar;
use crate::seed;
use crate::synthdata::PairedSample;
use crate::tensor::Tensor;

/// Step count the default beta range is quoted for.
pub const REFERENCE_STEPS: usize = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;
pub const DEFAULT_BETA_P: f64 = 0.01;
const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// `z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps` with linear betas.
    VariancePreserving,
    /// `z_t = a_t z_0 + (1 - a_t) eps` with `a_t` falling linearly from 1 to 0.
    PaperLiteral,
}

/// Serializable recipe from which a [`NoiseSchedule`] is rebuilt exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDescriptor {
    pub mode: ScheduleMode,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleDescriptor {
    /// The standard linear range, stretched by `1000 / steps` for shorter
    /// chains so the terminal latent is still close to pure noise.
    pub fn standard(steps: usize, mode: ScheduleMode) -> Self {
        let stretch = (REFERENCE_STEPS as f64 / steps.max(1) as f64).min(MAX_BETA / BETA_END);
        Self {
            mode,
            steps,
            beta_start: BETA_START * stretch,
            beta_end: BETA_END * stretch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("diffusion needs T >= 1".into()));
        }
        let ok = 0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0;
        if !ok || (self.steps > 1 && self.beta_start == self.beta_end) {
            return Err(Error::Config(format!(
                "beta range [{}, {}] must be increasing inside (0, 1)",
                self.beta_start, self.beta_end
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub descriptor: ScheduleDescriptor,
    /// Per-step betas for steps `1..=T` (index `t - 1`).
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn make_schedule(steps: usize, mode: ScheduleMode) -> Result<NoiseSchedule> {
    NoiseSchedule::from_descriptor(&ScheduleDescriptor::standard(steps, mode))
}

impl NoiseSchedule {
    pub fn from_descriptor(desc: &ScheduleDescriptor) -> Result<Self> {
        desc.validate()?;
        let n = desc.steps;
        let betas: Vec<f64> = (0..n)
            .map(|i| {
                let frac = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
                desc.beta_start + frac * (desc.beta_end - desc.beta_start)
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            descriptor: desc.clone(),
            betas,
            alphas,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.descriptor.steps
    }

    pub fn mode(&self) -> ScheduleMode {
        self.descriptor.mode
    }

    /// Cumulative signal retention for `t` in `0..=T` (1 at `t = 0`).
    pub fn cumulative(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// `(signal, noise)` coefficients of the forward process at `t`.
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        match self.mode() {
            ScheduleMode::VariancePreserving => {
                let ab = self.cumulative(t);
                (ab.sqrt(), (1.0 - ab).sqrt())
            }
            ScheduleMode::PaperLiteral => {
                let a = 1.0 - t as f64 / self.steps() as f64;
                (a, 1.0 - a)
            }
        }
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::Input(format!("step {t} outside [0, {}]", self.steps())));
        }
        Ok(())
    }
}

fn check_latents<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() || a.ndim() != 2 {
        return Err(Error::Input(format!(
            "{what}: shapes {:?} and {:?} must both be [B, d]",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Noises each row `z0[i]` to step `ts[i]` with the matching row of `eps`.
pub fn forward_diffuse<T: Scalar>(z0: &Tensor<T>, ts: &[usize], eps: &Tensor<T>, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    check_latents(z0, eps, "forward diffusion")?;
    if ts.len() != z0.dim(0) {
        return Err(Error::Input(format!("{} step indices for {} latents", ts.len(), z0.dim(0))));
    }
    let d = z0.dim(1);
    let mut out = Vec::with_capacity(z0.len());
    for (i, &t) in ts.iter().enumerate() {
        schedule.check_step(t)?;
        let (s, n) = schedule.coefficients(t);
        out.extend(
            z0.row(i)
                .iter()
                .zip(eps.row(i))
                .map(|(&z, &e)| T::of(s * z.f64() + n * e.f64())),
        );
    }
    Ok(Tensor::new(&[ts.len(), d], out))
}

/// A batch of latents at one step, tracking whether the prior shift is on.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState<T> {
    pub latent: Tensor<T>,
    pub t: usize,
    pub shifted: bool,
}

impl<T: Scalar> DiffusionState<T> {
    pub fn new(latent: Tensor<T>, t: usize) -> Self {
        Self {
            latent,
            t,
            shifted: false,
        }
    }

    /// Treats the current latent as unshifted without touching its values.
    pub fn forget_shift(mut self) -> Self {
        self.shifted = false;
        self
    }
}

fn offset_rows<T: Scalar>(latent: &Tensor<T>, prior: &FacePrior, weight: f64) -> Result<Tensor<T>> {
    if latent.ndim() != 2 || latent.dim(1) != prior.dim() {
        return Err(Error::Input(format!(
            "latent {:?} does not match a {}-dim prior",
            latent.shape(),
            prior.dim()
        )));
    }
    if weight == 0.0 {
        return Ok(latent.clone());
    }
    let d = prior.dim();
    let data = latent
        .data()
        .iter()
        .enumerate()
        .map(|(i, &z)| T::of(z.f64() + weight * prior.values[i % d]))
        .collect();
    Ok(Tensor::new(latent.shape(), data))
}

/// Adds `beta_p * prior` to every latent row. A zero weight leaves the
/// values bit-identical.
pub fn apply_prior_norm<T: Scalar>(state: DiffusionState<T>, prior: &FacePrior, beta_p: f64) -> Result<DiffusionState<T>> {
    if state.shifted {
        return Err(Error::State("the prior shift is already applied".into()));
    }
    Ok(DiffusionState {
        latent: offset_rows(&state.latent, prior, beta_p)?,
        t: state.t,
        shifted: true,
    })
}

pub fn remove_prior_norm<T: Scalar>(state: DiffusionState<T>, prior: &FacePrior, beta_p: f64) -> Result<DiffusionState<T>> {
    if !state.shifted {
        return Err(Error::State("the prior shift is not applied".into()));
    }
    Ok(DiffusionState {
        latent: offset_rows(&state.latent, prior, -beta_p)?,
        t: state.t,
        shifted: false,
    })
}

/// Mean squared error between true and predicted noise.
pub fn ldm_loss<T: Scalar>(eps_true: &Tensor<T>, eps_pred: &Tensor<T>) -> Result<f64> {
    if eps_true.shape() != eps_pred.shape() {
        return Err(Error::Input(format!(
            "noise shapes {:?} and {:?} differ",
            eps_true.shape(),
            eps_pred.shape()
        )));
    }
    if !eps_true.is_finite() || !eps_pred.is_finite() {
        return Err(Error::Numeric("noise contains non-finite values".into()));
    }
    let sum: f64 = eps_true
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(a, b)| (a.f64() - b.f64()).powi(2))
        .sum();
    Ok(sum / eps_true.len() as f64)
}

pub fn ldm_loss_graph<T: Scalar>(g: &mut Graph<T>, eps_true: Var, eps_pred: Var) -> Var {
    let diff = g.sub(eps_pred, eps_true);
    let sq = g.square(diff);
    g.mean_all(sq)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LdmConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: Option<f64>,
    pub beta_p: f64,
    pub log_every: usize,
}

impl Default for LdmConfig {
    fn default() -> Self {
        Self {
            steps: 20000,
            batch_size: 32,
            lr: 2e-5,
            grad_clip: Some(1.0),
            beta_p: DEFAULT_BETA_P,
            log_every: 50,
        }
    }
}

impl LdmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::validation("ldm.steps", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("ldm.batch_size", "must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::validation("ldm.lr", "must be positive"));
        }
        if !(self.beta_p >= 0.0 && self.beta_p.is_finite()) {
            return Err(Error::validation("ldm.beta_p", "must be >= 0"));
        }
        if self.log_every == 0 {
            return Err(Error::validation("ldm.log_every", "must be >= 1"));
        }
        Ok(())
    }
}

/// Frozen stage-1 embeddings of a paired set: face latents and speech
/// conditions, row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPairs<T> {
    pub faces: Tensor<T>,
    pub speech: Tensor<T>,
}

impl<T: Scalar> EncodedPairs<T> {
    pub fn len(&self) -> usize {
        self.faces.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn gather(t: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
        let d = t.dim(1);
        Tensor::new(&[idx.len(), d], idx.iter().flat_map(|&i| t.row(i).to_vec()).collect())
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            faces: Self::gather(&self.faces, idx),
            speech: Self::gather(&self.speech, idx),
        }
    }
}

pub fn encode_pairs<T: Scalar>(stage1: &Stage1<T>, samples: &[&PairedSample]) -> Result<EncodedPairs<T>> {
    let faces: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let specs: Vec<_> = samples.iter().map(|s| &s.spec).collect();
    Ok(EncodedPairs {
        faces: stage1.encode_faces(&faces)?,
        speech: stage1.encode_speech(&specs)?,
    })
}

/// Draws the step and noise for every item of a batch; item `i` of step
/// `step` owns its own seed stream.
pub fn draw_noise<T: Scalar>(batch: usize, d: usize, steps: usize, run_seed: u64, step: usize) -> (Vec<usize>, Tensor<T>) {
    let mut ts = Vec::with_capacity(batch);
    let mut eps = Vec::with_capacity(batch * d);
    for i in 0..batch {
        let mut rng = seed::rng(seed::seed_split(run_seed, "ldm-noise", (step * batch + i) as u64));
        ts.push(rng.gen_range(1..=steps));
        eps.extend(seed::normal_vec(&mut rng, d).into_iter().map(T::of));
    }
    (ts, Tensor::new(&[batch, d], eps))
}

/// One optimisation step of the denoiser on encoded pairs. Returns the
/// pre-update loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar>(
    denoiser: &mut Denoiser<T>,
    opt: &mut Adam<T>,
    schedule: &NoiseSchedule,
    prior: &FacePrior,
    beta_p: f64,
    batch: &EncodedPairs<T>,
    run_seed: u64,
    step: usize,
) -> Result<f64> {
    let (b, d) = (batch.len(), denoiser.cfg.latent_dim);
    let (ts, eps) = draw_noise::<T>(b, d, schedule.steps(), run_seed, step);
    let zt = forward_diffuse(&batch.faces, &ts, &eps, schedule)?;
    let shifted = apply_prior_norm(DiffusionState::new(zt, 0), prior, beta_p)?;
    let mut g = Graph::new();
    let z = g.constant(shifted.latent);
    let cond = g.constant(batch.speech.clone());
    let target = g.constant(eps);
    let pred = denoiser.forward(&mut g, z, &ts, cond)?;
    let loss = ldm_loss_graph(&mut g, target, pred);
    let value = g.value(loss).data()[0].f64();
    if !value.is_finite() {
        return Err(Error::Training {
            step,
            reason: format!("denoising loss is {value}"),
        });
    }
    let grads = g.backward(loss);
    opt.step(&mut denoiser.params, &g.param_grads(&grads));
    Ok(value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdmOutcome {
    /// Pre-update loss of every step.
    pub losses: Vec<f64>,
}

impl LdmOutcome {
    /// Mean loss over the `window` steps ending at `end` (exclusive).
    pub fn moving_average(&self, end: usize, window: usize) -> f64 {
        let end = end.min(self.losses.len());
        let start = end.saturating_sub(window);
        self.losses[start..end].iter().sum::<f64>() / (end - start).max(1) as f64
    }
}

/// Trains `denoiser` against the frozen stage-1 encoders. The prior must
/// come from the same face encoder, and the encoders must be unchanged when
/// training ends.
#[allow(clippy::too_many_arguments)]
pub fn train_denoiser<T: Scalar>(
    denoiser: &mut Denoiser<T>,
    stage1: &Stage1<T>,
    prior: &FacePrior,
    schedule: &NoiseSchedule,
    train: &[&PairedSample],
    cfg: &LdmConfig,
    run_seed: u64,
) -> Result<LdmOutcome> {
    cfg.validate()?;
    let encoder_hash = stage1.params.content_hash();
    prior.check_encoder(&encoder_hash)?;
    if train.is_empty() {
        return Err(Error::Input("no training pairs".into()));
    }
    let data = encode_pairs(stage1, train)?;
    let outcome = train_on_pairs(denoiser, &data, prior, schedule, cfg, run_seed)?;
    let after = stage1.params.content_hash();
    if after != encoder_hash {
        return Err(Error::hash_mismatch("frozen stage-1 encoders", &encoder_hash, &after));
    }
    Ok(outcome)
}

/// Training loop over pre-encoded pairs with per-epoch shuffling.
pub fn train_on_pairs<T: Scalar>(
    denoiser: &mut Denoiser<T>,
    data: &EncodedPairs<T>,
    prior: &FacePrior,
    schedule: &NoiseSchedule,
    cfg: &LdmConfig,
    run_seed: u64,
) -> Result<LdmOutcome> {
    cfg.validate()?;
    let mut opt = denoiser.optimizer(cfg.lr, cfg.grad_clip);
    let n = data.len();
    let bs = cfg.batch_size.min(n);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = n;
    let mut epoch = 0u64;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if cursor + bs > n {
            order = (0..n).collect();
            order.shuffle(&mut seed::rng(seed::seed_split(run_seed, "ldm-epoch", epoch)));
            epoch += 1;
            cursor = 0;
        }
        let batch = data.select(&order[cursor..cursor + bs]);
        cursor += bs;
        losses.push(train_step(denoiser, &mut opt, schedule, prior, cfg.beta_p, &batch, run_seed, step)?);
    }
    Ok(LdmOutcome { losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{Backbone, DenoiserConfig};
    use crate::encoders::EncoderConfig;
    use crate::faceprior::{compute_prior, BalanceRecord};
    use crate::gradcheck::check_input_grads;
    use crate::synthdata::{DataConfig, Split, StftConfig};

    fn prior(values: Vec<f64>) -> FacePrior {
        FacePrior {
            values,
            sample_count: 1,
            encoder_hash: "h".into(),
            balance: BalanceRecord { gender0: 1, gender1: 0 },
        }
    }

    fn randn(shape: &[usize], s: u64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, seed::normal_vec(&mut seed::rng(s), n))
    }

    #[test]
    fn default_schedule_endpoints() {
        let s = make_schedule(1000, ScheduleMode::VariancePreserving).unwrap();
        assert!(s.alpha_bar[999] < 0.01);
        assert!(s.alpha_bar[0] >= 0.999);
        assert!(s.betas.windows(2).all(|w| w[0] < w[1]));
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        let lit = make_schedule(10, ScheduleMode::PaperLiteral).unwrap();
        assert_eq!(lit.coefficients(0), (1.0, 0.0));
        assert_eq!(lit.coefficients(10), (0.0, 1.0));
        assert!(matches!(make_schedule(0, ScheduleMode::VariancePreserving), Err(Error::Config(_))));
    }

    #[test]
    fn cumulative_product_oracle() {
        let s = make_schedule(1000, ScheduleMode::VariancePreserving).unwrap();
        let log_sum: f64 = (0..1000).map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln()).sum();
        assert!((s.alpha_bar[999].ln() - log_sum).abs() < 1e-9);
    }

    #[test]
    fn short_chains_still_reach_noise() {
        let s = make_schedule(100, ScheduleMode::VariancePreserving).unwrap();
        assert!(s.cumulative(100) < 1e-3);
        assert!(s.cumulative(1) >= 0.99);
        let one = make_schedule(1, ScheduleMode::VariancePreserving).unwrap();
        assert_eq!(one.betas.len(), 1);
        assert!(one.betas[0] < 1.0);
    }

    #[test]
    fn step_zero_is_the_data() {
        let s = make_schedule(1000, ScheduleMode::VariancePreserving).unwrap();
        let z0 = randn(&[2, 5], 1);
        let eps = randn(&[2, 5], 2);
        let zt = forward_diffuse(&z0, &[0, 0], &eps, &s).unwrap();
        assert_eq!(zt, z0);
        let lit = make_schedule(10, ScheduleMode::PaperLiteral).unwrap();
        assert_eq!(forward_diffuse(&z0, &[0, 0], &eps, &lit).unwrap(), z0);
    }

    #[test]
    fn zero_noise_scales_the_data() {
        let s = make_schedule(1000, ScheduleMode::VariancePreserving).unwrap();
        let z0 = randn(&[1, 4], 3);
        let zt = forward_diffuse(&z0, &[400], &Tensor::zeros(&[1, 4]), &s).unwrap();
        let scale = s.cumulative(400).sqrt();
        for (a, b) in zt.data().iter().zip(z0.data()) {
            assert_eq!(*a, scale * b);
        }
    }

    #[test]
    fn paper_literal_is_the_linear_blend() {
        let s = make_schedule(10, ScheduleMode::PaperLiteral).unwrap();
        let z0 = randn(&[1, 3], 4);
        let eps = randn(&[1, 3], 5);
        let zt = forward_diffuse(&z0, &[3], &eps, &s).unwrap();
        for i in 0..3 {
            let expect = 0.7 * z0.data()[i] + 0.3 * eps.data()[i];
            assert!((zt.data()[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn terminal_marginal_is_standard_normal() {
        let s = make_schedule(1000, ScheduleMode::VariancePreserving).unwrap();
        let d = 4;
        let n = 10_000;
        let z0 = Tensor::new(&[n, d], (0..n).flat_map(|_| [2.0, -1.0, 0.5, 3.0]).collect());
        let eps = randn(&[n, d], 6);
        let zt = forward_diffuse(&z0, &vec![1000; n], &eps, &s).unwrap();
        for c in 0..d {
            let col: Vec<f64> = (0..n).map(|i| zt.data()[i * d + c]).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!(mean.abs() <= 0.05, "mean {mean}");
            assert!((var - 1.0).abs() <= 0.05, "var {var}");
        }
    }

    #[test]
    fn mismatched_dims_are_input_errors() {
        let s = make_schedule(10, ScheduleMode::VariancePreserving).unwrap();
        let r = forward_diffuse(&randn(&[1, 3], 1), &[1], &randn(&[1, 4], 2), &s);
        assert!(matches!(r, Err(Error::Input(_))));
        let r = forward_diffuse(&randn(&[1, 3], 1), &[11], &randn(&[1, 3], 2), &s);
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn prior_shift_formula_and_double_application() {
        let p = prior(vec![1.0, -2.0, 3.0]);
        let z = randn(&[2, 3], 7);
        let st = apply_prior_norm(DiffusionState::new(z.clone(), 5), &p, 0.01).unwrap();
        for i in 0..6 {
            assert!((st.latent.data()[i] - (z.data()[i] + 0.01 * p.values[i % 3])).abs() < 1e-15);
        }
        assert!(st.shifted);
        assert!(matches!(apply_prior_norm(st.clone(), &p, 0.01), Err(Error::State(_))));
        let zero = apply_prior_norm(DiffusionState::new(z.clone(), 5), &p, 0.0).unwrap();
        assert_eq!(zero.latent, z);
        let back = remove_prior_norm(st, &p, 0.01).unwrap();
        assert!(back.latent.max_abs_diff(&z) < 1e-15);
        assert!(matches!(remove_prior_norm(back, &p, 0.01), Err(Error::State(_))));
    }

    #[test]
    fn prior_shift_is_additive_in_weight() {
        let p = prior(vec![0.3, -0.7]);
        let z = randn(&[1, 2], 8);
        let once = apply_prior_norm(DiffusionState::new(z.clone(), 1), &p, 0.25).unwrap();
        let first = apply_prior_norm(DiffusionState::new(z, 1), &p, 0.1).unwrap().forget_shift();
        let twice = apply_prior_norm(first, &p, 0.15).unwrap();
        assert!(once.latent.max_abs_diff(&twice.latent) < 1e-14);
    }

    #[test]
    fn loss_values_and_errors() {
        let a = randn(&[2, 128], 9);
        assert_eq!(ldm_loss(&a, &a).unwrap(), 0.0);
        let ones = Tensor::<f64>::ones(&[1, 128]);
        assert_eq!(ldm_loss(&Tensor::zeros(&[1, 128]), &ones).unwrap(), 1.0);
        let b = randn(&[2, 128], 10);
        assert_eq!(ldm_loss(&a, &b).unwrap(), ldm_loss(&b, &a).unwrap());
        let nan = Tensor::new(&[1, 1], vec![f64::NAN]);
        assert!(matches!(ldm_loss(&nan, &nan), Err(Error::Numeric(_))));
    }

    #[test]
    fn loss_gradient_closed_form() {
        let truth = randn(&[1, 6], 11);
        let pred = randn(&[1, 6], 12);
        let mut g = Graph::new();
        let t = g.constant(truth.clone());
        let p = g.input(pred.clone());
        let l = ldm_loss_graph(&mut g, t, p);
        let grads = g.backward(l);
        let got = grads.get(p).unwrap();
        for i in 0..6 {
            let expect = 2.0 * (pred.data()[i] - truth.data()[i]) / 6.0;
            assert!((got.data()[i] - expect).abs() <= 1e-6 * expect.abs().max(1e-12));
        }
        check_input_grads(&[truth, pred], |g, v| ldm_loss_graph(g, v[0], v[1]));
    }

    #[test]
    fn noise_draws_are_per_item_streams() {
        let (ta, ea) = draw_noise::<f64>(4, 3, 100, 1, 0);
        let (tb, eb) = draw_noise::<f64>(4, 3, 100, 1, 0);
        assert_eq!((ta.clone(), ea.clone()), (tb, eb));
        assert!(ta.iter().all(|&t| (1..=100).contains(&t)));
        assert_ne!(ea.row(0), ea.row(1));
    }

    fn toy_setup() -> (Stage1<f32>, Vec<PairedSample>) {
        let data = DataConfig {
            train: 8,
            val: 0,
            test: 0,
            seed: 3,
            resolution: 16,
            duration: 0.25,
            sample_rate: 8000,
            stft: StftConfig {
                window_length: 64,
                hop_length: 32,
                fft_size: 64,
            },
        };
        let ds = crate::synthdata::generate_dataset(&data).unwrap();
        let samples: Vec<PairedSample> = ds.split(Split::Train).into_iter().cloned().collect();
        let (bins, frames) = samples[0].spec.shape();
        let cfg = EncoderConfig {
            latent_dim: 8,
            resolution: 16,
            face_widths: vec![4, 4],
            speech_widths: vec![4, 4],
            attention_after: 1,
            attention_reduction: 2,
            spec_bins: bins,
            spec_frames: frames,
        };
        (Stage1::new(cfg, 1).unwrap(), samples)
    }

    fn tiny_denoiser() -> Denoiser<f32> {
        Denoiser::new(
            DenoiserConfig {
                latent_dim: 8,
                width: 8,
                heads: 2,
                time_dim: 8,
                backbone: Backbone::Grid,
                grid: None,
            },
            2,
        )
        .unwrap()
    }

    #[test]
    fn training_freezes_encoders_and_is_deterministic() {
        let (stage1, samples) = toy_setup();
        let refs: Vec<&PairedSample> = samples.iter().collect();
        let p = compute_prior(&stage1, &refs, 8, 0).unwrap();
        let sched = make_schedule(50, ScheduleMode::VariancePreserving).unwrap();
        let cfg = LdmConfig {
            steps: 100,
            batch_size: 4,
            lr: 1e-3,
            ..LdmConfig::default()
        };
        let before = stage1.params.clone();
        let mut a = tiny_denoiser();
        let ra = train_denoiser(&mut a, &stage1, &p, &sched, &refs, &cfg, 9).unwrap();
        for ((_, x), (_, y)) in before.iter().zip(stage1.params.iter()) {
            assert_eq!(x.value.data(), y.value.data());
        }
        let mut b = tiny_denoiser();
        let rb = train_denoiser(&mut b, &stage1, &p, &sched, &refs, &cfg, 9).unwrap();
        assert_eq!(ra.losses, rb.losses);
        assert_eq!(a.params.content_hash(), b.params.content_hash());
    }

    #[test]
    fn prior_from_another_encoder_is_rejected() {
        let (stage1, samples) = toy_setup();
        let refs: Vec<&PairedSample> = samples.iter().collect();
        let sched = make_schedule(50, ScheduleMode::VariancePreserving).unwrap();
        let mut d = tiny_denoiser();
        let r = train_denoiser(&mut d, &stage1, &prior(vec![0.0; 8]), &sched, &refs, &LdmConfig::default(), 0);
        assert!(matches!(r, Err(Error::HashMismatch { .. })));
    }
}
