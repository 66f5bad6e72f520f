//! Stage-1 collaborative pre-training: symmetric contrastive alignment of
//! speech and face embeddings plus face reconstruction.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoders::{face_batch, Stage1, FACE_DECODER, FACE_ENCODER, SPEECH_ENCODER, TEMPERATURE};
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::scalar::Scalar;
use crate::seed;
use crate::synthdata::{FaceImage, PairedSample};
use crate::tensor::Tensor;

/// Weight of the perceptual term inside the reconstruction loss.
pub const PERCEPTUAL_WEIGHT: f64 = 1.0;

const PERCEPTUAL_SCALES: usize = 3;
const PERCEPTUAL_CHANNELS: usize = 8;
const PERCEPTUAL_SEED_LABEL: &str = "perceptual-features";

/// Fails when any row of `z` has zero norm.
pub fn check_nonzero_rows<T: Scalar>(z: &Tensor<T>, what: &str) -> Result<()> {
    let w = *z.shape().last().unwrap_or(&0);
    if w == 0 {
        return Err(Error::Numeric(format!("{what} embeddings are empty")));
    }
    for (i, row) in z.data().chunks(w).enumerate() {
        if row.iter().all(|v| *v == T::zero()) {
            return Err(Error::Numeric(format!(
                "{what} embedding {i} has zero norm; cosine similarity is undefined"
            )));
        }
    }
    Ok(())
}

/// Symmetric cross-entropy over cosine logits scaled by `exp(log_scale)`.
///
/// `log_scale` is a one-element node holding `ln(1 / temperature)`.
pub fn contrastive_loss<T: Scalar>(g: &mut Graph<T>, speech: Var, face: Var, log_scale: Var) -> Result<Var> {
    check_nonzero_rows(g.value(speech), "speech")?;
    check_nonzero_rows(g.value(face), "face")?;
    if g.shape(speech) != g.shape(face) {
        return Err(Error::Input(format!(
            "embedding batches differ in shape: {:?} vs {:?}",
            g.shape(speech),
            g.shape(face)
        )));
    }
    let s = g.l2_normalize_rows(speech);
    let f = g.l2_normalize_rows(face);
    let cos = g.matmul_t(s, f, false, true);
    let scale = g.exp(log_scale);
    let scale = g.reshape(scale, &[1, 1]);
    let logits = g.mul(cos, scale);
    let rows = g.log_softmax_last(logits);
    let rows = g.diag_mean(rows);
    let lt = g.transpose2d(logits);
    let cols = g.log_softmax_last(lt);
    let cols = g.diag_mean(cols);
    let both = g.add(rows, cols);
    Ok(g.scale(both, T::of(-0.5)))
}

/// Value-only form of [`contrastive_loss`] at a fixed temperature.
pub fn contrastive_loss_value(speech: &Tensor<f64>, face: &Tensor<f64>, temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::Numeric(format!("temperature must be positive, got {temperature}")));
    }
    let mut g = Graph::new();
    let s = g.constant(speech.clone());
    let f = g.constant(face.clone());
    let t = g.constant(Tensor::new(&[1], vec![(1.0 / temperature).ln()]));
    let l = contrastive_loss(&mut g, s, f, t)?;
    Ok(g.value(l).data()[0])
}

/// Fixed random-convolution feature pyramid used as a perceptual surrogate.
#[derive(Debug, Clone)]
pub struct Perceptual<T> {
    kernels: Vec<Tensor<T>>,
}

impl<T: Scalar> Perceptual<T> {
    pub fn new() -> Self {
        let mut rng = seed::rng(seed::seed_split(0, PERCEPTUAL_SEED_LABEL, 0));
        let fan_in = FaceImage::CHANNELS * 9;
        let std = (2.0 / fan_in as f64).sqrt();
        let kernels = (0..PERCEPTUAL_SCALES)
            .map(|_| {
                let n = PERCEPTUAL_CHANNELS * fan_in;
                let data = seed::normal_vec(&mut rng, n).into_iter().map(|z| T::of(z * std)).collect();
                Tensor::new(&[PERCEPTUAL_CHANNELS, FaceImage::CHANNELS, 3, 3], data)
            })
            .collect();
        Self { kernels }
    }

    fn features(&self, g: &mut Graph<T>, x: Var) -> Vec<Var> {
        let mut cur = x;
        let mut out = Vec::with_capacity(self.kernels.len());
        for (s, k) in self.kernels.iter().enumerate() {
            if s > 0 {
                cur = g.avg_pool2x(cur);
            }
            let w = g.constant(k.clone());
            let f = g.conv2d(cur, w, None, 1, 1);
            out.push(g.relu(f));
        }
        out
    }

    /// Mean over scales of the per-scale feature MSE, for `[N, 3, R, R]`
    /// batches. Averaged over the batch as well.
    pub fn distance(&self, g: &mut Graph<T>, a: Var, b: Var) -> Var {
        let fa = self.features(g, a);
        let fb = self.features(g, b);
        let mut total: Option<Var> = None;
        for (x, y) in fa.into_iter().zip(fb) {
            let d = g.sub(x, y);
            let d = g.square(d);
            let m = g.mean_all(d);
            total = Some(match total {
                Some(t) => g.add(t, m),
                None => m,
            });
        }
        let total = total.expect("at least one scale");
        g.scale(total, T::of(1.0 / self.kernels.len() as f64))
    }
}

impl<T: Scalar> Default for Perceptual<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_same_resolution(a: &FaceImage, b: &FaceImage) -> Result<()> {
    if a.resolution != b.resolution {
        return Err(Error::Input(format!(
            "images differ in resolution: {} vs {}",
            a.resolution, b.resolution
        )));
    }
    Ok(())
}

pub fn perceptual_distance(a: &FaceImage, b: &FaceImage) -> Result<f64> {
    check_same_resolution(a, b)?;
    let p = Perceptual::<f64>::new();
    let mut g = Graph::new();
    let x = g.constant(face_batch(&[a]));
    let y = g.constant(face_batch(&[b]));
    let d = p.distance(&mut g, x, y);
    Ok(g.value(d).data()[0])
}

/// Mean absolute error plus weighted perceptual distance.
pub fn reconstruction_loss_graph<T: Scalar>(g: &mut Graph<T>, p: &Perceptual<T>, original: Var, recon: Var) -> Var {
    let d = g.sub(recon, original);
    let d = g.abs(d);
    let mae = g.mean_all(d);
    let perc = p.distance(g, original, recon);
    let perc = g.scale(perc, T::of(PERCEPTUAL_WEIGHT));
    g.add(mae, perc)
}

pub fn reconstruction_loss(original: &FaceImage, recon: &FaceImage) -> Result<f64> {
    check_same_resolution(original, recon)?;
    let p = Perceptual::<f64>::new();
    let mut g = Graph::new();
    let x = g.constant(face_batch(&[original]));
    let y = g.constant(face_batch(&[recon]));
    let l = reconstruction_loss_graph(&mut g, &p, x, y);
    Ok(g.value(l).data()[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainLosses {
    pub contrastive: f64,
    pub reconstruction: f64,
    pub total: f64,
}

/// Which terms drive stage 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage1Objective {
    /// Contrastive plus reconstruction.
    Collaborative,
    /// Face autoencoder only; the speech encoder keeps its initial weights.
    ReconstructionOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_face: f64,
    pub lr_speech: f64,
    pub lr_temperature: f64,
    pub grad_clip: Option<f64>,
    pub eval_every: usize,
    pub objective: Stage1Objective,
    /// Std of fresh Gaussian pixel noise added to each training image.
    pub pixel_noise: f64,
    /// Largest circular frame shift applied to each training spectrogram.
    pub max_frame_shift: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr_face: 1e-4,
            lr_speech: 1e-3,
            lr_temperature: 1e-3,
            grad_clip: Some(5.0),
            eval_every: 100,
            objective: Stage1Objective::Collaborative,
            pixel_noise: 0.0,
            max_frame_shift: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::validation("pretrain.batch_size", "must be at least 2"));
        }
        for (k, v) in [
            ("pretrain.lr_face", self.lr_face),
            ("pretrain.lr_speech", self.lr_speech),
            ("pretrain.lr_temperature", self.lr_temperature),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::validation(k, "must be finite and >= 0"));
            }
        }
        if !(self.pixel_noise >= 0.0) || !self.pixel_noise.is_finite() {
            return Err(Error::validation("pretrain.pixel_noise", "must be finite and >= 0"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::validation("pretrain.grad_clip", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn optimizer<T: Scalar>(&self) -> Adam<T> {
        let speech = match self.objective {
            Stage1Objective::Collaborative => self.lr_speech,
            Stage1Objective::ReconstructionOnly => 0.0,
        };
        let temp = match self.objective {
            Stage1Objective::Collaborative => self.lr_temperature,
            Stage1Objective::ReconstructionOnly => 0.0,
        };
        let lrs = BTreeMap::from([
            (FACE_ENCODER.to_string(), self.lr_face),
            (FACE_DECODER.to_string(), self.lr_face),
            (SPEECH_ENCODER.to_string(), speech),
            (TEMPERATURE.to_string(), temp),
        ]);
        Adam::new(lrs).with_clip(self.grad_clip)
    }
}

/// One gradient step on the stage-1 objective. Losses are those of the
/// parameters before the update.
pub fn pretrain_step<T: Scalar>(
    model: &mut Stage1<T>,
    opt: &mut Adam<T>,
    perceptual: &Perceptual<T>,
    batch: &[&PairedSample],
    objective: Stage1Objective,
) -> Result<PretrainLosses> {
    if batch.len() < 2 {
        return Err(Error::Input("pre-training needs a batch of at least 2 pairs".into()));
    }
    let images: Vec<&FaceImage> = batch.iter().map(|s| &s.image).collect();
    let specs: Vec<_> = batch.iter().map(|s| &s.spec).collect();
    let x = model.face_batch(&images)?;
    let s = model.speech_batch(&specs)?;

    let mut g = Graph::new();
    let xv = g.constant(x);
    let zf = model.face_encoder.forward(&mut g, &model.params, xv);
    let recon = model.face_decoder.forward(&mut g, &model.params, zf);
    let l_r = reconstruction_loss_graph(&mut g, perceptual, xv, recon);
    let sv = g.constant(s);
    let zs = model.speech_encoder.forward(&mut g, &model.params, sv);
    let lt = g.param(&model.params, model.log_temperature);
    let l_cl = contrastive_loss(&mut g, zs, zf, lt)?;
    let total = match objective {
        Stage1Objective::Collaborative => g.add(l_cl, l_r),
        Stage1Objective::ReconstructionOnly => l_r,
    };
    let losses = PretrainLosses {
        contrastive: g.value(l_cl).data()[0].f64(),
        reconstruction: g.value(l_r).data()[0].f64(),
        total: g.value(l_cl).data()[0].f64() + g.value(l_r).data()[0].f64(),
    };
    if ![losses.contrastive, losses.reconstruction].iter().all(|v| v.is_finite()) {
        return Err(Error::Training {
            step: opt.steps_taken() as usize,
            reason: format!("non-finite stage-1 loss {losses:?}"),
        });
    }
    let grads = g.backward(total);
    let pg = g.param_grads(&grads);
    opt.step(&mut model.params, &pg);
    clamp_log_temperature(model);
    Ok(losses)
}

fn clamp_log_temperature<T: Scalar>(model: &mut Stage1<T>) {
    let max = (1.0f64 / 0.01).ln();
    let v = model.params.get_mut(model.log_temperature);
    for x in v.data_mut() {
        *x = T::of(x.f64().clamp(0.0, max));
    }
}

/// Label-preserving jitter: fresh pixel noise and a circular time shift.
fn augment(sample: &PairedSample, cfg: &PretrainConfig, rng: &mut impl Rng) -> PairedSample {
    let mut out = sample.clone();
    if cfg.pixel_noise > 0.0 {
        let noise = Normal::new(0.0, cfg.pixel_noise).expect("validated std");
        for p in &mut out.image.pixels {
            *p = (*p as f64 + noise.sample(rng)).clamp(0.0, 1.0) as f32;
        }
    }
    if cfg.max_frame_shift > 0 {
        let k = cfg.max_frame_shift as i64;
        let shift = rng.gen_range(-k..=k).rem_euclid(out.spec.frames as i64) as usize;
        for row in out.spec.magnitudes.chunks_mut(out.spec.frames) {
            row.rotate_right(shift);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub top1: f64,
    pub top5: f64,
    pub queries: usize,
    pub pool: usize,
}

fn cosine_matrix(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<Vec<f64>> {
    let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
    (0..a.dim(0))
        .map(|i| {
            let ra = a.row(i);
            (0..b.dim(0))
                .map(|j| {
                    let rb = b.row(j);
                    let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                    dot / (norm(ra) * norm(rb)).max(f64::MIN_POSITIVE)
                })
                .collect()
        })
        .collect()
}

/// Speech-to-face retrieval accuracy. Rows are paired by index and split
/// into consecutive pools of `pool`; a trailing partial pool is scored over
/// its own members. Ties count against the true pair.
pub fn retrieval_eval<T: Scalar>(speech: &Tensor<T>, face: &Tensor<T>, pool: usize) -> Result<RetrievalReport> {
    if speech.shape() != face.shape() || speech.ndim() != 2 {
        return Err(Error::Input(format!(
            "retrieval needs equal [N, d] sets, got {:?} and {:?}",
            speech.shape(),
            face.shape()
        )));
    }
    let n = speech.dim(0);
    let pool = pool.max(1);
    let (s, f) = (speech.cast::<f64>(), face.cast::<f64>());
    let (mut hit1, mut hit5) = (0usize, 0usize);
    for start in (0..n).step_by(pool) {
        let end = (start + pool).min(n);
        let d = s.dim(1);
        let sub = |t: &Tensor<f64>| Tensor::new(&[end - start, d], t.data()[start * d..end * d].to_vec());
        let sims = cosine_matrix(&sub(&s), &sub(&f));
        for (i, row) in sims.iter().enumerate() {
            let rank = row.iter().enumerate().filter(|&(j, &v)| j != i && v >= row[i]).count();
            hit1 += usize::from(rank < 1);
            hit5 += usize::from(rank < 5);
        }
    }
    let q = n.max(1) as f64;
    Ok(RetrievalReport {
        top1: hit1 as f64 / q,
        top5: hit5 as f64 / q,
        queries: n,
        pool,
    })
}

/// Embeds both modalities of `samples` and scores retrieval.
pub fn evaluate_alignment<T: Scalar>(model: &Stage1<T>, samples: &[&PairedSample], pool: usize) -> Result<RetrievalReport> {
    let specs: Vec<_> = samples.iter().map(|s| &s.spec).collect();
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let zs = model.encode_speech(&specs)?;
    let zf = model.encode_faces(&images)?;
    retrieval_eval(&zs, &zf, pool)
}

/// Per-pixel MAE of `decode(encode(x))`.
pub fn autoencoder_mae<T: Scalar>(model: &Stage1<T>, images: &[&FaceImage]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Input("no images to reconstruct".into()));
    }
    let z = model.encode_faces(images)?;
    let recon = model.decode(&z)?;
    Ok(images
        .iter()
        .zip(&recon)
        .map(|(a, b)| a.mean_abs_diff(b))
        .sum::<f64>()
        / images.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub losses: PretrainLosses,
    pub retrieval_top1: Option<f64>,
}

pub const LOG_HEADER: &str = "step,l_cl,l_r,l_c,retrieval_top1";

/// CSV with one row per step; retrieval is blank on steps without an eval.
pub fn write_log(mut w: impl Write, rows: &[LogRow]) -> Result<()> {
    writeln!(w, "{LOG_HEADER}")?;
    for r in rows {
        let top1 = r.retrieval_top1.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(
            w,
            "{},{:.6},{:.6},{:.6},{}",
            r.step, r.losses.contrastive, r.losses.reconstruction, r.losses.total, top1
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub log: Vec<LogRow>,
    pub final_retrieval: Option<RetrievalReport>,
}

/// Runs `cfg.steps` stage-1 steps over `train`, reshuffling each epoch, with
/// periodic retrieval checks on `val` in pools of `pool`.
pub fn run_pretraining<T: Scalar>(
    model: &mut Stage1<T>,
    train: &[&PairedSample],
    val: &[&PairedSample],
    cfg: &PretrainConfig,
    pool: usize,
    run_seed: u64,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::Input("pre-training needs at least 2 training pairs".into()));
    }
    let batch = cfg.batch_size.min(train.len());
    let mut opt = cfg.optimizer::<T>();
    let perceptual = Perceptual::new();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut log = Vec::with_capacity(cfg.steps);
    let mut last = None;
    for step in 0..cfg.steps {
        if cursor + batch > order.len() {
            order = (0..train.len()).collect();
            order.shuffle(&mut seed::rng(seed::seed_split(run_seed, "pretrain-epoch", epoch)));
            epoch += 1;
            cursor = 0;
        }
        let items: Vec<&PairedSample> = order[cursor..cursor + batch].iter().map(|&i| train[i]).collect();
        cursor += batch;
        let losses = if cfg.pixel_noise > 0.0 || cfg.max_frame_shift > 0 {
            let mut rng = seed::rng(seed::seed_split(run_seed, "pretrain-augment", step as u64));
            let aug: Vec<PairedSample> = items.iter().map(|s| augment(s, cfg, &mut rng)).collect();
            let refs: Vec<&PairedSample> = aug.iter().collect();
            pretrain_step(model, &mut opt, &perceptual, &refs, cfg.objective)?
        } else {
            pretrain_step(model, &mut opt, &perceptual, &items, cfg.objective)?
        };
        let done = step + 1 == cfg.steps;
        let retrieval_top1 = if !val.is_empty() && cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || done) {
            let r = evaluate_alignment(model, val, pool)?;
            last = Some(r);
            Some(r.top1)
        } else {
            None
        };
        log.push(LogRow {
            step,
            losses,
            retrieval_top1,
        });
    }
    Ok(PretrainOutcome {
        log,
        final_retrieval: last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{speech_batch, EncoderConfig};
    use crate::gradcheck::{check_input_grads, param_grad_error, REL_TOL};
    use crate::synthdata::{generate_dataset, DataConfig, StftConfig};

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec())
    }

    fn randn(shape: &[usize], s: u64) -> Tensor<f64> {
        let mut rng = seed::rng(s);
        Tensor::new(shape, seed::normal_vec(&mut rng, shape.iter().product()))
    }

    #[test]
    fn orthonormal_pair_matches_closed_form() {
        let e = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let l = contrastive_loss_value(&e, &e, 1.0).unwrap();
        let want = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((l - want).abs() < 1e-12);
        assert!((want - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn singleton_batch_has_zero_loss() {
        let a = randn(&[1, 4], 1);
        let b = randn(&[1, 4], 2);
        assert_eq!(contrastive_loss_value(&a, &b, 0.07).unwrap(), 0.0);
    }

    #[test]
    fn loss_is_symmetric_and_nonnegative() {
        let a = randn(&[5, 6], 3);
        let b = randn(&[5, 6], 4);
        let ab = contrastive_loss_value(&a, &b, 0.1).unwrap();
        let ba = contrastive_loss_value(&b, &a, 0.1).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab >= 0.0);
    }

    #[test]
    fn zero_row_is_a_numeric_error() {
        let a = t(&[2, 2], &[0.0, 0.0, 1.0, 0.0]);
        let b = randn(&[2, 2], 1);
        assert!(matches!(contrastive_loss_value(&a, &b, 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        check_input_grads(&[randn(&[4, 3], 5), randn(&[4, 3], 6), t(&[1], &[0.7])], |g, v| {
            contrastive_loss(g, v[0], v[1], v[2]).unwrap()
        });
    }

    #[test]
    fn perceptual_identity_and_symmetry() {
        let id = crate::synthdata::generate_identity(3);
        let a = crate::synthdata::render_face(&id, 1, 16).unwrap();
        let b = crate::synthdata::render_face(&id, 2, 16).unwrap();
        assert_eq!(perceptual_distance(&a, &a).unwrap(), 0.0);
        let ab = perceptual_distance(&a, &b).unwrap();
        assert!(ab > 0.0);
        assert_eq!(ab, perceptual_distance(&b, &a).unwrap());
        let c = FaceImage::filled(32, 0.1);
        assert!(matches!(perceptual_distance(&a, &c), Err(Error::Input(_))));
    }

    #[test]
    fn reconstruction_loss_contract() {
        let zeros = FaceImage::filled(16, 0.0);
        let ones = FaceImage::filled(16, 1.0);
        assert_eq!(reconstruction_loss(&zeros, &zeros).unwrap(), 0.0);
        let l = reconstruction_loss(&zeros, &ones).unwrap();
        // MAE alone is exactly 1, the perceptual term only adds
        assert!(l >= 1.0);
        let mut g = Graph::new();
        let x = g.constant(face_batch::<f64>(&[&zeros]));
        let y = g.constant(face_batch::<f64>(&[&ones]));
        let d = g.sub(y, x);
        let d = g.abs(d);
        let mae = g.mean_all(d);
        assert_eq!(g.value(mae).data()[0], 1.0);
    }

    #[test]
    fn retrieval_chance_and_perfect_alignment() {
        let z = randn(&[100, 8], 9);
        let perfect = retrieval_eval(&z, &z, 100).unwrap();
        assert_eq!(perfect.top1, 1.0);
        let other = randn(&[100, 8], 10);
        let chance = retrieval_eval(&z, &other, 100).unwrap();
        // 1% expected; 6 hits is far outside a 99% binomial interval
        assert!(chance.top1 <= 0.06, "{}", chance.top1);
    }

    fn tiny_stage1() -> (Stage1<f64>, Vec<PairedSample>) {
        let data = DataConfig {
            train: 6,
            val: 0,
            test: 0,
            seed: 1,
            resolution: 16,
            duration: 0.05,
            stft: StftConfig::default(),
            ..DataConfig::default()
        };
        let ds = generate_dataset(&data).unwrap();
        let frames = ds.samples[0].spec.frames;
        let cfg = EncoderConfig {
            latent_dim: 8,
            resolution: 16,
            face_widths: vec![3, 4, 4],
            speech_widths: vec![2, 3, 3, 3],
            attention_after: 2,
            attention_reduction: 2,
            spec_bins: 257,
            spec_frames: frames,
        };
        (Stage1::new(cfg, 4).unwrap(), ds.samples)
    }

    #[test]
    fn stage1_objective_gradients_match_finite_differences() {
        let (mut m, samples) = tiny_stage1();
        let mut rng = seed::rng(12);
        let ids: Vec<_> = m.params.ids().collect();
        for id in ids {
            let p = m.params.get_mut(id);
            let noise = seed::normal_vec(&mut rng, p.len());
            p.data_mut().iter_mut().zip(noise).for_each(|(v, e)| *v += 0.1 * e);
        }
        let perceptual = Perceptual::<f64>::new();
        let imgs: Vec<_> = samples.iter().take(3).map(|s| &s.image).collect();
        let specs: Vec<_> = samples.iter().take(3).map(|s| &s.spec).collect();
        let x = face_batch::<f64>(&imgs);
        let s = speech_batch::<f64>(&specs);
        let err = param_grad_error(&m.params, 4, |g, store| {
            let xv = g.constant(x.clone());
            let zf = m.face_encoder.forward(g, store, xv);
            let r = m.face_decoder.forward(g, store, zf);
            let lr = reconstruction_loss_graph(g, &perceptual, xv, r);
            let sv = g.constant(s.clone());
            let zs = m.speech_encoder.forward(g, store, sv);
            let lt = g.param(store, m.log_temperature);
            let lc = contrastive_loss(g, zs, zf, lt).unwrap();
            g.add(lc, lr)
        });
        assert!(err <= REL_TOL, "max relative error {err:e}");
    }

    #[test]
    fn zero_rates_leave_parameters_untouched() {
        let (m, samples) = tiny_stage1();
        let mut m32 = Stage1::<f32>::new(m.cfg.clone(), 4).unwrap();
        let before = m32.params.content_hash();
        let cfg = PretrainConfig {
            lr_face: 0.0,
            lr_speech: 0.0,
            lr_temperature: 0.0,
            ..PretrainConfig::default()
        };
        let mut opt = cfg.optimizer();
        let batch: Vec<_> = samples.iter().take(4).collect();
        let l = pretrain_step(&mut m32, &mut opt, &Perceptual::new(), &batch, Stage1Objective::Collaborative).unwrap();
        assert!(l.total.is_finite() && l.total > 0.0);
        assert_eq!(m32.params.content_hash(), before);
    }

    #[test]
    fn training_is_deterministic_and_writes_a_log() {
        let (m, samples) = tiny_stage1();
        let train: Vec<_> = samples.iter().collect();
        let cfg = PretrainConfig {
            steps: 4,
            batch_size: 3,
            eval_every: 2,
            ..PretrainConfig::default()
        };
        let run = || {
            let mut mm = Stage1::<f32>::new(m.cfg.clone(), 4).unwrap();
            let out = run_pretraining(&mut mm, &train, &train, &cfg, 16, 7).unwrap();
            (out, mm.params.content_hash())
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(a.log, b.log);
        assert_eq!(ha, hb);
        let mut buf = Vec::new();
        write_log(&mut buf, &a.log).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().nth(2).unwrap().split(',').nth(4).unwrap().parse::<f64>().is_ok());
    }

    #[test]
    fn reconstruction_only_keeps_speech_encoder_fixed() {
        let (m, samples) = tiny_stage1();
        let mut mm = Stage1::<f32>::new(m.cfg.clone(), 4).unwrap();
        let speech_ids: Vec<_> = mm
            .params
            .iter()
            .filter(|(_, p)| p.group == SPEECH_ENCODER)
            .map(|(id, _)| id)
            .collect();
        let before: Vec<_> = speech_ids.iter().map(|&id| mm.params.get(id).clone()).collect();
        let cfg = PretrainConfig {
            steps: 2,
            batch_size: 3,
            objective: Stage1Objective::ReconstructionOnly,
            ..PretrainConfig::default()
        };
        let train: Vec<_> = samples.iter().collect();
        run_pretraining(&mut mm, &train, &[], &cfg, 16, 1).unwrap();
        for (id, b) in speech_ids.iter().zip(before) {
            assert_eq!(mm.params.get(*id), &b);
        }
    }
}
