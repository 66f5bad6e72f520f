//! Reverse-process generation from the prior-shifted Gaussian.
//!
//! Each reverse step removes the prior shift, applies the unshifted update,
//! and shifts again, so the denoiser always sees latents distributed as in
//! training. The decoded latent is the unshifted one unless asked otherwise.

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserProvenance};
use crate::diffusion::{apply_prior_norm, remove_prior_norm, DiffusionState, NoiseSchedule, ScheduleMode};
use crate::encoders::Stage1;
use crate::error::{Error, Result};
use crate::faceprior::FacePrior;
use crate::scalar::Scalar;
use crate::seed;
use crate::synthdata::{FaceImage, Spectrogram};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Reverse steps; `None` runs every step of the chain.
    pub steps: Option<usize>,
    /// Prior weight; `None` uses the weight the denoiser was trained with.
    pub beta_p: Option<f64>,
    pub seed: u64,
    pub n_samples: usize,
    /// 1 is ancestral sampling, 0 is deterministic.
    pub eta: f64,
    /// Decode the shifted final latent instead of the unshifted one.
    pub decode_shifted: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: None,
            beta_p: None,
            seed: 0,
            n_samples: 3,
            eta: 1.0,
            decode_shifted: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, chain: usize) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::validation("sampler.n_samples", "must be >= 1"));
        }
        if let Some(s) = self.steps {
            if s == 0 || s > chain {
                return Err(Error::validation("sampler.steps", format!("must be in [1, {chain}]")));
            }
        }
        if let Some(b) = self.beta_p {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::validation("sampler.beta_p", "must be >= 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::validation("sampler.eta", "must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Descending visit order `t_k = round(k T / steps)` for `k = steps..=1`,
/// followed by 0. With `steps == T` every step is visited.
pub fn timesteps(chain: usize, steps: usize) -> Vec<usize> {
    let mut ts: Vec<usize> = (1..=steps)
        .rev()
        .map(|k| ((k * chain) as f64 / steps as f64).round() as usize)
        .collect();
    ts.push(0);
    ts
}

/// Draws `rows` latents from `N(beta_p * prior, I)`, row `i` from `seeds[i]`.
pub fn init_latent<T: Scalar>(prior: &FacePrior, beta_p: f64, seeds: &[u64], chain: usize) -> Result<DiffusionState<T>> {
    let d = prior.dim();
    let data = seeds
        .iter()
        .flat_map(|&s| seed::normal_vec(&mut seed::rng(seed::seed_split(s, "init", 0)), d))
        .map(T::of)
        .collect();
    let state = DiffusionState::new(Tensor::new(&[seeds.len(), d], data), chain);
    apply_prior_norm(state, prior, beta_p)
}

/// Update on unshifted latents from step `t` to `prev < t`.
pub fn posterior_step<T: Scalar>(
    z: &Tensor<T>,
    eps_pred: &Tensor<T>,
    schedule: &NoiseSchedule,
    t: usize,
    prev: usize,
    noise: Option<&Tensor<T>>,
    eta: f64,
) -> Tensor<T> {
    match schedule.mode() {
        ScheduleMode::VariancePreserving => {
            let (ab_t, ab_p) = (schedule.cumulative(t), schedule.cumulative(prev));
            let sigma = eta * ((1.0 - ab_p) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_p).sqrt();
            let dir = (1.0 - ab_p - sigma * sigma).max(0.0).sqrt();
            let (sa_t, sn_t, sa_p) = (ab_t.sqrt(), (1.0 - ab_t).sqrt(), ab_p.sqrt());
            let data = z
                .data()
                .iter()
                .zip(eps_pred.data())
                .enumerate()
                .map(|(i, (&zi, &ei))| {
                    let (zi, ei) = (zi.f64(), ei.f64());
                    let x0 = (zi - sn_t * ei) / sa_t;
                    let fresh = match noise {
                        Some(n) if sigma > 0.0 => sigma * n.data()[i].f64(),
                        _ => 0.0,
                    };
                    T::of(sa_p * x0 + dir * ei + fresh)
                })
                .collect();
            Tensor::new(z.shape(), data)
        }
        ScheduleMode::PaperLiteral => {
            let floor = 1.0 / schedule.steps() as f64;
            let (s_t, n_t) = schedule.coefficients(t);
            let (s_p, n_p) = schedule.coefficients(prev);
            let data = z
                .data()
                .iter()
                .zip(eps_pred.data())
                .map(|(&zi, &ei)| {
                    let x0 = (zi.f64() - n_t * ei.f64()) / s_t.max(floor);
                    T::of(s_p * x0 + n_p * ei.f64())
                })
                .collect();
            Tensor::new(z.shape(), data)
        }
    }
}

/// Shift-aware reverse step from `state.t` to `prev`.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step_to<T: Scalar>(
    state: DiffusionState<T>,
    eps_pred: &Tensor<T>,
    schedule: &NoiseSchedule,
    prev: usize,
    noise: Option<&Tensor<T>>,
    eta: f64,
    prior: &FacePrior,
    beta_p: f64,
) -> Result<DiffusionState<T>> {
    if state.t == 0 {
        return Err(Error::State("cannot step below t = 0".into()));
    }
    if !state.shifted {
        return Err(Error::State("reverse steps expect a shifted state".into()));
    }
    if prev >= state.t {
        return Err(Error::State(format!("step {} cannot move to {prev}", state.t)));
    }
    if eps_pred.shape() != state.latent.shape() {
        return Err(Error::Input("noise prediction shape differs from the latent".into()));
    }
    let t = state.t;
    let plain = remove_prior_norm(state, prior, beta_p)?;
    let next = posterior_step(&plain.latent, eps_pred, schedule, t, prev, noise, eta);
    apply_prior_norm(DiffusionState::new(next, prev), prior, beta_p)
}

pub fn reverse_step<T: Scalar>(
    state: DiffusionState<T>,
    eps_pred: &Tensor<T>,
    schedule: &NoiseSchedule,
    noise: Option<&Tensor<T>>,
    eta: f64,
    prior: &FacePrior,
    beta_p: f64,
) -> Result<DiffusionState<T>> {
    let prev = state.t.saturating_sub(1);
    reverse_step_to(state, eps_pred, schedule, prev, noise, eta, prior, beta_p)
}

/// Runs the reverse chain from `init` with `predict(latent, t)` as the noise
/// model. Row `i` draws its step noise from `seeds[i]`. Returns the final
/// (still shifted) state.
#[allow(clippy::too_many_arguments)]
pub fn run_chain<T: Scalar>(
    init: DiffusionState<T>,
    schedule: &NoiseSchedule,
    steps: usize,
    eta: f64,
    seeds: &[u64],
    prior: &FacePrior,
    beta_p: f64,
    mut predict: impl FnMut(&Tensor<T>, usize) -> Result<Tensor<T>>,
) -> Result<DiffusionState<T>> {
    let ts = timesteps(schedule.steps(), steps);
    let d = init.latent.dim(1);
    let mut state = init;
    for pair in ts.windows(2) {
        let (t, prev) = (pair[0], pair[1]);
        let eps = predict(&state.latent, t)?;
        let noise = (eta > 0.0).then(|| {
            let data = seeds
                .iter()
                .flat_map(|&s| seed::normal_vec(&mut seed::rng(seed::seed_split(s, "step", t as u64)), d))
                .map(T::of)
                .collect();
            Tensor::new(&[seeds.len(), d], data)
        });
        state = reverse_step_to(state, &eps, schedule, prev, noise.as_ref(), eta, prior, beta_p)?;
    }
    Ok(state)
}

/// The trained components needed for generation, checked for mutual
/// consistency on construction.
pub struct Generator<'a, T> {
    pub stage1: &'a Stage1<T>,
    pub prior: &'a FacePrior,
    pub denoiser: &'a Denoiser<T>,
    pub provenance: &'a DenoiserProvenance,
    pub schedule: NoiseSchedule,
}

impl<'a, T: Scalar> Generator<'a, T> {
    pub fn new(
        stage1: &'a Stage1<T>,
        prior: &'a FacePrior,
        denoiser: &'a Denoiser<T>,
        provenance: &'a DenoiserProvenance,
    ) -> Result<Self> {
        let encoder = stage1.params.content_hash();
        prior.check_encoder(&encoder)?;
        if provenance.stage1_hash != encoder {
            return Err(Error::hash_mismatch("denoiser stage-1 encoders", &provenance.stage1_hash, &encoder));
        }
        let prior_hash = prior.content_hash();
        if provenance.prior_hash != prior_hash {
            return Err(Error::hash_mismatch("denoiser face prior", &provenance.prior_hash, &prior_hash));
        }
        if denoiser.cfg.latent_dim != stage1.cfg.latent_dim {
            return Err(Error::Config("denoiser and encoders disagree on the latent size".into()));
        }
        Ok(Self {
            stage1,
            prior,
            denoiser,
            provenance,
            schedule: NoiseSchedule::from_descriptor(&provenance.schedule)?,
        })
    }

    /// Seeds of the samples for condition `key`.
    pub fn sample_seeds(cfg: &SamplerConfig, key: u64) -> Vec<u64> {
        let base = seed::seed_split(cfg.seed, "condition", key);
        (0..cfg.n_samples as u64).map(|k| seed::seed_split(base, "sample", k)).collect()
    }

    /// Final latents `[C * n, d]` for speech embeddings `cond` `[C, d]`;
    /// condition `c` is identified by `keys[c]` for seeding.
    pub fn sample_latents(&self, cond: &Tensor<T>, keys: &[u64], cfg: &SamplerConfig) -> Result<Tensor<T>> {
        cfg.validate(self.schedule.steps())?;
        if cond.ndim() != 2 || cond.dim(0) != keys.len() {
            return Err(Error::Input("one seed key is needed per condition".into()));
        }
        let beta_p = cfg.beta_p.unwrap_or(self.provenance.beta_p);
        let n = cfg.n_samples;
        let seeds: Vec<u64> = keys.iter().flat_map(|&k| Self::sample_seeds(cfg, k)).collect();
        let d = cond.dim(1);
        let cond_rows = Tensor::new(
            &[seeds.len(), d],
            (0..keys.len()).flat_map(|c| std::iter::repeat_n(cond.row(c).to_vec(), n).flatten()).collect(),
        );
        let init = init_latent::<T>(self.prior, beta_p, &seeds, self.schedule.steps())?;
        let steps = cfg.steps.unwrap_or(self.schedule.steps());
        let last = run_chain(init, &self.schedule, steps, cfg.eta, &seeds, self.prior, beta_p, |z, t| {
            self.denoiser.predict(z, &vec![t; z.dim(0)], &cond_rows)
        })?;
        if cfg.decode_shifted {
            Ok(last.latent)
        } else {
            Ok(remove_prior_norm(last, self.prior, beta_p)?.latent)
        }
    }

    /// `n_samples` faces for each spectrogram.
    pub fn generate(&self, specs: &[&Spectrogram], keys: &[u64], cfg: &SamplerConfig) -> Result<Vec<Vec<FaceImage>>> {
        let cond = self.stage1.encode_speech(specs)?;
        let z = self.sample_latents(&cond, keys, cfg)?;
        let faces = self.stage1.decode(&z)?;
        Ok(faces.chunks(cfg.n_samples).map(|c| c.to_vec()).collect())
    }
}

/// A two-dimensional Gaussian data distribution whose optimal noise
/// predictor is known exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearGaussian {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

impl LinearGaussian {
    /// `E[eps | z_t] = n (s^2 C + n^2 I)^-1 (z_t - s m)`.
    pub fn optimal_eps(&self, z: [f64; 2], t: usize, schedule: &NoiseSchedule) -> [f64; 2] {
        let (s, n) = schedule.coefficients(t);
        let c = self.cov;
        let m = [
            [s * s * c[0][0] + n * n, s * s * c[0][1]],
            [s * s * c[1][0], s * s * c[1][1] + n * n],
        ];
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let r = [z[0] - s * self.mean[0], z[1] - s * self.mean[1]];
        [
            n * (m[1][1] * r[0] - m[0][1] * r[1]) / det,
            n * (-m[1][0] * r[0] + m[0][0] * r[1]) / det,
        ]
    }

    pub fn predict<T: Scalar>(&self, z: &Tensor<T>, t: usize, schedule: &NoiseSchedule) -> Tensor<T> {
        let data = z
            .data()
            .chunks(2)
            .flat_map(|row| self.optimal_eps([row[0].f64(), row[1].f64()], t, schedule))
            .map(T::of)
            .collect();
        Tensor::new(z.shape(), data)
    }
}

/// Sample mean and covariance of `[n, 2]` rows.
pub fn moments2(x: &Tensor<f64>) -> ([f64; 2], [[f64; 2]; 2]) {
    let n = x.dim(0) as f64;
    let mut m = [0.0; 2];
    for row in x.data().chunks(2) {
        m[0] += row[0] / n;
        m[1] += row[1] / n;
    }
    let mut c = [[0.0; 2]; 2];
    for row in x.data().chunks(2) {
        let d = [row[0] - m[0], row[1] - m[1]];
        for i in 0..2 {
            for j in 0..2 {
                c[i][j] += d[i] * d[j] / (n - 1.0);
            }
        }
    }
    (m, c)
}
