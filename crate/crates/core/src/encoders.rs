//! Stage-1 networks: face encoder, face decoder and speech encoder, all
//! mapping into one shared latent space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, Linear, ParamId, ParamStore, RELU_GAIN};
use crate::scalar::Scalar;
use crate::seed;
use crate::synthdata::{FaceImage, Spectrogram};
use crate::tensor::Tensor;

pub const FACE_ENCODER: &str = "face_encoder";
pub const FACE_DECODER: &str = "face_decoder";
pub const SPEECH_ENCODER: &str = "speech_encoder";
pub const TEMPERATURE: &str = "temperature";

/// Initial contrastive temperature.
pub const INIT_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub latent_dim: usize,
    pub resolution: usize,
    /// One stride-2 stage per entry.
    pub face_widths: Vec<usize>,
    /// One stride-2 conv layer per entry.
    pub speech_widths: Vec<usize>,
    /// Number of speech conv layers before the attention block.
    pub attention_after: usize,
    pub attention_reduction: usize,
    pub spec_bins: usize,
    pub spec_frames: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            latent_dim: 128,
            resolution: 64,
            face_widths: vec![32, 64, 128, 256],
            speech_widths: vec![32, 64, 128, 128, 256],
            attention_after: 3,
            attention_reduction: 8,
            spec_bins: 257,
            spec_frames: 598,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::validation("model.latent_dim", "must be positive"));
        }
        if self.face_widths.is_empty() || self.face_widths.contains(&0) {
            return Err(Error::validation("model.face_widths", "needs at least one positive width"));
        }
        let down = 1usize << self.face_widths.len();
        if !self.resolution.is_multiple_of(down) {
            return Err(Error::validation(
                "data.resolution",
                format!("must be divisible by {down} for {} face stages", self.face_widths.len()),
            ));
        }
        if self.speech_widths.is_empty() || self.speech_widths.contains(&0) {
            return Err(Error::validation("model.speech_widths", "needs at least one positive width"));
        }
        if self.attention_after == 0 || self.attention_after > self.speech_widths.len() {
            return Err(Error::validation(
                "model.attention_after",
                format!("must lie in [1, {}]", self.speech_widths.len()),
            ));
        }
        if self.attention_reduction == 0 {
            return Err(Error::validation("model.attention_reduction", "must be positive"));
        }
        if self.spec_bins == 0 || self.spec_frames == 0 {
            return Err(Error::validation("data.duration", "spectrogram must be non-empty"));
        }
        Ok(())
    }

    /// Side length of the decoder's seed feature map.
    pub fn decoder_seed_size(&self) -> usize {
        self.resolution >> self.face_widths.len()
    }
}

/// Channel then spatial gating over a `[N, C, H, W]` feature map.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub squeeze: Linear,
    pub excite: Linear,
    pub spatial: Conv2d,
}

impl AttentionBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: &str,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = (channels / reduction).max(1);
        Self {
            squeeze: Linear::new(store, &format!("{name}.squeeze"), group, channels, hidden, Init::Fan(RELU_GAIN), rng),
            excite: Linear::new(store, &format!("{name}.excite"), group, hidden, channels, Init::Fan(1.0), rng),
            spatial: Conv2d::new(store, &format!("{name}.spatial"), group, 2, 1, 7, 1, Init::Fan(1.0), rng),
        }
    }

    /// `[N, C, 1, 1]` gate from average- and max-pooled descriptors.
    pub fn channel_gate<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let (n, c) = (g.shape(x)[0], g.shape(x)[1]);
        let avg = g.global_avg_pool(x);
        let max = g.max_spatial(x);
        let a = self.mlp(g, store, avg);
        let m = self.mlp(g, store, max);
        let s = g.add(a, m);
        let gate = g.sigmoid(s);
        g.reshape(gate, &[n, c, 1, 1])
    }

    /// `[N, 1, H, W]` gate from channel mean and max maps.
    pub fn spatial_gate<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let mean = g.mean_channels(x);
        let max = g.max_channels(x);
        let both = g.concat(&[mean, max], 1);
        let s = self.spatial.forward(g, store, both);
        g.sigmoid(s)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let cg = self.channel_gate(g, store, x);
        let x1 = g.mul(x, cg);
        let sg = self.spatial_gate(g, store, x1);
        g.mul(x1, sg)
    }

    fn mlp<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, v: Var) -> Var {
        let h = self.squeeze.forward(g, store, v);
        let h = g.relu(h);
        self.excite.forward(g, store, h)
    }

    /// Zeroes the gate weights and saturates their biases so both gates are
    /// exactly one.
    pub fn force_open<T: Scalar>(&self, store: &mut ParamStore<T>) {
        const SATURATED: f64 = 40.0;
        for (w, b) in [(self.excite.w, self.excite.b), (self.spatial.w, self.spatial.b)] {
            store.get_mut(w).data_mut().iter_mut().for_each(|v| *v = T::zero());
            store.get_mut(b).data_mut().iter_mut().for_each(|v| *v = T::of(SATURATED));
        }
    }
}

#[derive(Debug, Clone)]
pub struct FaceEncoder {
    pub stages: Vec<Conv2d>,
    pub head: Linear,
}

impl FaceEncoder {
    fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let mut in_ch = FaceImage::CHANNELS;
        let stages = cfg
            .face_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv2d::new(store, &format!("face_enc.conv{i}"), FACE_ENCODER, in_ch, w, 3, 2, Init::Fan(RELU_GAIN), rng);
                in_ch = w;
                c
            })
            .collect();
        let head = Linear::new(store, "face_enc.head", FACE_ENCODER, in_ch, cfg.latent_dim, Init::Fan(1.0), rng);
        Self { stages, head }
    }

    /// `[N, 3, R, R]` images to `[N, d]` embeddings.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, images: Var) -> Var {
        let mut h = images;
        for conv in &self.stages {
            h = conv.forward(g, store, h);
            h = g.relu(h);
        }
        let pooled = g.global_avg_pool(h);
        self.head.forward(g, store, pooled)
    }
}

#[derive(Debug, Clone)]
pub struct FaceDecoder {
    pub seed: Linear,
    pub stages: Vec<Conv2d>,
    pub out: Conv2d,
    seed_channels: usize,
    seed_size: usize,
}

impl FaceDecoder {
    fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let widths: Vec<usize> = cfg.face_widths.iter().rev().copied().collect();
        let seed_channels = widths[0];
        let seed_size = cfg.decoder_seed_size();
        let seed = Linear::new(
            store,
            "face_dec.seed",
            FACE_DECODER,
            cfg.latent_dim,
            seed_channels * seed_size * seed_size,
            Init::Fan(RELU_GAIN),
            rng,
        );
        let stages = (0..widths.len())
            .map(|i| {
                let out = widths[(i + 1).min(widths.len() - 1)];
                Conv2d::new(store, &format!("face_dec.conv{i}"), FACE_DECODER, widths[i], out, 3, 1, Init::Fan(RELU_GAIN), rng)
            })
            .collect();
        let last = *widths.last().unwrap();
        let out = Conv2d::new(store, "face_dec.out", FACE_DECODER, last, FaceImage::CHANNELS, 3, 1, Init::Fan(1.0), rng);
        Self {
            seed,
            stages,
            out,
            seed_channels,
            seed_size,
        }
    }

    /// `[N, d]` embeddings to `[N, 3, R, R]` images in `[0, 1]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var) -> Var {
        let n = g.shape(z)[0];
        let h = self.seed.forward(g, store, z);
        let h = g.relu(h);
        let mut h = g.reshape(h, &[n, self.seed_channels, self.seed_size, self.seed_size]);
        for conv in &self.stages {
            h = g.upsample2x(h);
            h = conv.forward(g, store, h);
            h = g.relu(h);
        }
        let y = self.out.forward(g, store, h);
        g.sigmoid(y)
    }
}

#[derive(Debug, Clone)]
pub struct SpeechEncoder {
    pub layers: Vec<Conv2d>,
    pub attention: AttentionBlock,
    pub attention_after: usize,
    pub head: Linear,
}

impl SpeechEncoder {
    fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let mut in_ch = 1;
        let layers = cfg
            .speech_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv2d::new(store, &format!("speech_enc.conv{i}"), SPEECH_ENCODER, in_ch, w, 3, 2, Init::Fan(RELU_GAIN), rng);
                in_ch = w;
                c
            })
            .collect();
        let attention = AttentionBlock::new(
            store,
            "speech_enc.attention",
            SPEECH_ENCODER,
            cfg.speech_widths[cfg.attention_after - 1],
            cfg.attention_reduction,
            rng,
        );
        let head = Linear::new(store, "speech_enc.head", SPEECH_ENCODER, in_ch, cfg.latent_dim, Init::Fan(1.0), rng);
        Self {
            layers,
            attention,
            attention_after: cfg.attention_after,
            head,
        }
    }

    /// `[N, 1, F, T]` log spectrograms to `[N, d]` embeddings.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, spec: Var) -> Var {
        let mut h = spec;
        for (i, conv) in self.layers.iter().enumerate() {
            h = conv.forward(g, store, h);
            h = g.relu(h);
            if i + 1 == self.attention_after {
                h = self.attention.forward(g, store, h);
            }
        }
        let pooled = g.global_avg_pool(h);
        self.head.forward(g, store, pooled)
    }
}

/// All stage-1 parameters and the layer layout that reads them.
#[derive(Debug, Clone)]
pub struct Stage1<T> {
    pub cfg: EncoderConfig,
    pub params: ParamStore<T>,
    pub face_encoder: FaceEncoder,
    pub face_decoder: FaceDecoder,
    pub speech_encoder: SpeechEncoder,
    pub log_temperature: ParamId,
}

const INFER_CHUNK: usize = 32;

impl<T: Scalar> Stage1<T> {
    pub fn new(cfg: EncoderConfig, init_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::rng(seed::seed_split(init_seed, "stage1-init", 0));
        let mut params = ParamStore::new();
        let face_encoder = FaceEncoder::new(&mut params, &cfg, &mut rng);
        let face_decoder = FaceDecoder::new(&mut params, &cfg, &mut rng);
        let speech_encoder = SpeechEncoder::new(&mut params, &cfg, &mut rng);
        let log_temperature = params.add(
            "log_temperature",
            TEMPERATURE,
            Tensor::scalar(T::of((1.0 / INIT_TEMPERATURE).ln())).reshape(&[1]),
        );
        Ok(Self {
            cfg,
            params,
            face_encoder,
            face_decoder,
            speech_encoder,
            log_temperature,
        })
    }

    /// Stored log-inverse-temperature as a temperature, clamped to `[0.01, 1]`.
    pub fn temperature(&self) -> f64 {
        clamp_temperature(self.params.get(self.log_temperature).data()[0].f64())
    }

    pub fn check_face(&self, img: &FaceImage) -> Result<()> {
        if img.resolution != self.cfg.resolution {
            return Err(Error::Config(format!(
                "face encoder expects {r}x{r} images, got {s}x{s}",
                r = self.cfg.resolution,
                s = img.resolution
            )));
        }
        Ok(())
    }

    pub fn check_spectrogram(&self, spec: &Spectrogram) -> Result<()> {
        if spec.shape() != (self.cfg.spec_bins, self.cfg.spec_frames) {
            return Err(Error::Config(format!(
                "speech encoder expects {}x{} spectrograms, got {}x{}",
                self.cfg.spec_bins, self.cfg.spec_frames, spec.bins, spec.frames
            )));
        }
        Ok(())
    }

    pub fn check_latent(&self, z: &Tensor<T>) -> Result<()> {
        if z.ndim() != 2 || z.dim(1) != self.cfg.latent_dim {
            return Err(Error::Config(format!(
                "expected [N, {}] latents, got {:?}",
                self.cfg.latent_dim,
                z.shape()
            )));
        }
        Ok(())
    }

    pub fn face_batch(&self, images: &[&FaceImage]) -> Result<Tensor<T>> {
        for img in images {
            self.check_face(img)?;
        }
        Ok(face_batch(images))
    }

    pub fn speech_batch(&self, specs: &[&Spectrogram]) -> Result<Tensor<T>> {
        for s in specs {
            self.check_spectrogram(s)?;
        }
        Ok(speech_batch(specs))
    }

    /// Face embeddings `[N, d]`, computed in fixed-size chunks.
    pub fn encode_faces(&self, images: &[&FaceImage]) -> Result<Tensor<T>> {
        let rows = images
            .chunks(INFER_CHUNK)
            .map(|chunk| {
                let x = self.face_batch(chunk)?;
                let mut g = Graph::new();
                let xv = g.constant(x);
                let z = self.face_encoder.forward(&mut g, &self.params, xv);
                Ok(g.value(z).clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(cat_rows(rows, self.cfg.latent_dim))
    }

    pub fn encode_speech(&self, specs: &[&Spectrogram]) -> Result<Tensor<T>> {
        let rows = specs
            .chunks(INFER_CHUNK)
            .map(|chunk| {
                let x = self.speech_batch(chunk)?;
                let mut g = Graph::new();
                let xv = g.constant(x);
                let z = self.speech_encoder.forward(&mut g, &self.params, xv);
                Ok(g.value(z).clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(cat_rows(rows, self.cfg.latent_dim))
    }

    /// Decodes `[N, d]` latents into images.
    pub fn decode(&self, z: &Tensor<T>) -> Result<Vec<FaceImage>> {
        self.check_latent(z)?;
        let d = self.cfg.latent_dim;
        let mut out = Vec::with_capacity(z.dim(0));
        for start in (0..z.dim(0)).step_by(INFER_CHUNK) {
            let end = (start + INFER_CHUNK).min(z.dim(0));
            let chunk = Tensor::new(&[end - start, d], z.data()[start * d..end * d].to_vec());
            let mut g = Graph::new();
            let zv = g.constant(chunk);
            let y = self.face_decoder.forward(&mut g, &self.params, zv);
            let y = g.value(y);
            out.extend((0..y.dim(0)).map(|i| FaceImage::from_tensor(&y.index0(i))));
        }
        Ok(out)
    }

    /// Hash over the parameter layout, independent of values.
    pub fn architecture_hash(&self) -> String {
        self.params.layout_hash()
    }
}

pub fn clamp_temperature(log_inv_temperature: f64) -> f64 {
    (-log_inv_temperature).exp().clamp(0.01, 1.0)
}

/// Stacks images into `[N, 3, R, R]`.
pub fn face_batch<T: Scalar>(images: &[&FaceImage]) -> Tensor<T> {
    Tensor::stack(&images.iter().map(|i| i.to_tensor()).collect::<Vec<_>>())
}

/// Stacks log spectrograms into `[N, 1, F, T]`.
pub fn speech_batch<T: Scalar>(specs: &[&Spectrogram]) -> Tensor<T> {
    Tensor::stack(&specs.iter().map(|s| s.to_log_tensor()).collect::<Vec<_>>())
}

fn cat_rows<T: Scalar>(parts: Vec<Tensor<T>>, width: usize) -> Tensor<T> {
    let n: usize = parts.iter().map(|p| p.dim(0)).sum();
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(&[n, width], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{jitter_params, param_grad_error, REL_TOL};
    use crate::synthdata::{generate_identity, render_face, spectrogram, synth_speech, StftConfig};

    pub(crate) fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            latent_dim: 8,
            resolution: 8,
            face_widths: vec![3, 4, 4],
            speech_widths: vec![3, 4, 4, 4],
            attention_after: 2,
            attention_reduction: 2,
            spec_bins: 9,
            spec_frames: 7,
        }
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let n = shape.iter().product();
        let mut rng = seed::rng(seed);
        Tensor::new(shape, seed::normal_vec(&mut rng, n))
    }

    /// Moves every parameter off exact zero so no ReLU sits on its kink.
    fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
        let w = g.constant(rand_tensor(g.shape(y), seed));
        let p = g.mul(y, w);
        g.sum_all(p)
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut m = Stage1::<f64>::new(tiny_cfg(), 1).unwrap();
        jitter_params(&mut m.params, 11);
        let img = rand_tensor(&[2, 3, 8, 8], 2).map(|v| v.abs().min(1.0));
        let spec = rand_tensor(&[2, 1, 9, 7], 3).map(f64::abs);
        let z = rand_tensor(&[2, 8], 4);
        let err = param_grad_error(&m.params, 6, |g, store| {
            let x = g.constant(img.clone());
            let s = g.constant(spec.clone());
            let zz = g.constant(z.clone());
            let a = m.face_encoder.forward(g, store, x);
            let b = m.speech_encoder.forward(g, store, s);
            let c = m.face_decoder.forward(g, store, zz);
            let la = weighted_sum(g, a, 5);
            let lb = weighted_sum(g, b, 6);
            let lc = weighted_sum(g, c, 7);
            let l = g.add(la, lb);
            g.add(l, lc)
        });
        assert!(err <= REL_TOL, "max relative error {err:e}");
    }

    #[test]
    fn embeddings_are_finite_and_deterministic() {
        let cfg = EncoderConfig {
            resolution: 32,
            latent_dim: 16,
            face_widths: vec![4, 8, 8, 8],
            speech_widths: vec![4, 4, 8, 8, 8],
            spec_bins: 257,
            spec_frames: 23,
            ..EncoderConfig::default()
        };
        let m = Stage1::<f32>::new(cfg, 0).unwrap();
        let id = generate_identity(9);
        let img = render_face(&id, 1, 32).unwrap();
        let wave = synth_speech(&id, 0.25, 16_000, 2).unwrap();
        let spec = spectrogram(&wave, &StftConfig::default()).unwrap();
        let a = m.encode_faces(&[&img, &img]).unwrap();
        assert_eq!(a.shape(), &[2, 16]);
        assert!(a.is_finite());
        assert_eq!(a.row(0), a.row(1));
        let s1 = m.encode_speech(&[&spec]).unwrap();
        let s2 = m.encode_speech(&[&spec]).unwrap();
        assert!(s1.is_finite());
        assert_eq!(s1, s2);

        let out = m.decode(&Tensor::zeros(&[1, 16])).unwrap();
        assert!(out[0].is_valid());
        assert_eq!(out[0].resolution, 32);
        let rand = m.decode(&Tensor::full(&[1, 16], 50.0)).unwrap();
        assert!(rand[0].is_valid());
    }

    #[test]
    fn shape_mismatches_are_config_errors() {
        let m = Stage1::<f32>::new(tiny_cfg(), 0).unwrap();
        let big = FaceImage::filled(16, 0.5);
        assert!(matches!(m.encode_faces(&[&big]), Err(Error::Config(_))));
        assert!(matches!(m.decode(&Tensor::zeros(&[1, 7])), Err(Error::Config(_))));
        let wave = synth_speech(&generate_identity(1), 0.1, 16_000, 0).unwrap();
        let spec = spectrogram(&wave, &StftConfig::default()).unwrap();
        assert!(matches!(m.encode_speech(&[&spec]), Err(Error::Config(_))));
        let bad = EncoderConfig { resolution: 12, ..tiny_cfg() };
        assert!(Stage1::<f32>::new(bad, 0).is_err());
    }

    #[test]
    fn round_trip_shapes_hold_at_every_resolution() {
        for res in [16, 32, 48, 64] {
            let cfg = EncoderConfig {
                resolution: res,
                latent_dim: 8,
                face_widths: vec![2, 2, 2, 2],
                ..tiny_cfg()
            };
            let m = Stage1::<f32>::new(cfg, 0).unwrap();
            let img = FaceImage::filled(res, 0.3);
            let z = m.encode_faces(&[&img]).unwrap();
            let back = m.decode(&z).unwrap();
            assert_eq!(back[0].resolution, res);
        }
    }

    #[test]
    fn open_gates_pass_input_through() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seed::rng(0);
        let block = AttentionBlock::new(&mut store, "a", "g", 4, 2, &mut rng);
        block.force_open(&mut store);
        let x = rand_tensor(&[2, 4, 5, 6], 1);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = block.forward(&mut g, &store, xv);
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn gates_never_amplify() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seed::rng(3);
        let block = AttentionBlock::new(&mut store, "a", "g", 6, 2, &mut rng);
        let x = rand_tensor(&[3, 6, 4, 4], 2);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = block.forward(&mut g, &store, xv);
        for (a, b) in g.value(y).data().iter().zip(x.data()) {
            assert!(a.abs() <= b.abs());
        }
    }

    #[test]
    fn channel_gate_prefers_energetic_channel() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seed::rng(5);
        let block = AttentionBlock::new(&mut store, "a", "g", 2, 2, &mut rng);
        for id in [block.squeeze.w, block.excite.w] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.1);
        }
        let gate_for = |energetic: usize| {
            let mut x = vec![0.0; 2 * 16];
            for v in x.iter_mut().skip(energetic * 16).take(16) {
                *v = 3.0;
            }
            let mut g = Graph::new();
            let xv = g.constant(Tensor::new(&[1, 2, 4, 4], x));
            let gate = block.channel_gate(&mut g, &store, xv);
            g.value(gate).data().to_vec()
        };
        // independent evaluation of sigmoid(mlp(avg) + mlp(max)) per channel
        let w1 = store.get(block.squeeze.w).data().to_vec();
        let w2 = store.get(block.excite.w).data().to_vec();
        let oracle = |v: [f64; 2]| -> Vec<f64> {
            let h = (v[0] * w1[0] + v[1] * w1[1]).max(0.0);
            (0..2).map(|c| 1.0 / (1.0 + (-(2.0 * h * w2[c])).exp())).collect()
        };
        let (a, b) = (gate_for(1), gate_for(0));
        for c in 0..2 {
            assert!((a[c] - oracle([0.0, 3.0])[c]).abs() < 1e-12);
            assert!((b[c] - oracle([3.0, 0.0])[c]).abs() < 1e-12);
        }
        // a channel's gate with zero energy never exceeds its gate with high energy
        let silent = gate_for(2);
        assert!(silent[1] <= a[1]);
        assert!(silent[0] <= b[0]);
        assert!(silent.iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }
}
