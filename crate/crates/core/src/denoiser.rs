//! The noise-prediction network: the latent is laid out as a small 2-D grid
//! and passed through residual blocks of convolution, self-attention over grid
//! positions and cross-attention onto the speech embedding.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{decode_params_into, encode_params, read_archive, write_archive, ParamsHeader};
use crate::diffusion::ScheduleDescriptor;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, Linear, ParamStore, RELU_GAIN};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Tensor;

pub const DENOISER: &str = "denoiser";
pub const DENOISER_KIND: &str = "denoiser";
const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Residual conv/attention blocks over the latent reshaped to a grid.
    Grid,
    /// Plain MLP on `[z, time, condition]`, kept as a baseline.
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub latent_dim: usize,
    pub width: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub backbone: Backbone,
    /// Grid `[rows, cols]`; derived from `latent_dim` when absent.
    pub grid: Option<[usize; 2]>,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_dim: 128,
            width: 64,
            heads: 4,
            time_dim: 64,
            backbone: Backbone::Grid,
            grid: None,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::validation("denoiser.latent_dim", "must be >= 1"));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::validation(
                "denoiser.heads",
                format!("width {} must be a positive multiple of the head count {}", self.width, self.heads),
            ));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::validation("denoiser.time_dim", "must be even and positive"));
        }
        let [r, c] = self.grid_shape();
        if r * c != self.latent_dim {
            return Err(Error::validation(
                "denoiser.grid",
                format!("{r}x{c} does not tile a {}-dim latent", self.latent_dim),
            ));
        }
        Ok(())
    }

    /// The configured grid, or the most square factorisation of the latent.
    pub fn grid_shape(&self) -> [usize; 2] {
        self.grid.unwrap_or_else(|| {
            let d = self.latent_dim;
            let rows = (1..=d).take_while(|r| r * r <= d).filter(|r| d.is_multiple_of(*r)).last().unwrap_or(1);
            [rows, d / rows]
        })
    }

    fn has_half_level(&self) -> bool {
        let [r, c] = self.grid_shape();
        r % 2 == 0 && c % 2 == 0
    }
}

/// Sinusoidal step embedding `[sin(t w_k).., cos(t w_k)..]` with geometric
/// frequencies `w_k = 10000^(-k / (dim/2))`.
pub fn time_embed(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("time embedding dim must be even, got {dim}")));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half).map(|k| 10000f64.powf(-(k as f64) / half as f64)).collect();
    let mut out: Vec<f64> = freqs.iter().map(|w| (t as f64 * w).sin()).collect();
    out.extend(freqs.iter().map(|w| (t as f64 * w).cos()));
    Ok(out)
}

fn time_batch<T: Scalar>(ts: &[usize], dim: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(time_embed(t, dim)?.into_iter().map(T::of));
    }
    Ok(Tensor::new(&[ts.len(), dim], data))
}

/// Splits `[B, n, C]` into `[B*h, n, C/h]`.
fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize) -> Var {
    let s = g.shape(x).to_vec();
    let (b, n, c) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[b, n, heads, c / heads]);
    let x = g.permute(x, &[0, 2, 1, 3]);
    g.reshape(x, &[b * heads, n, c / heads])
}

fn merge_heads<T: Scalar>(g: &mut Graph<T>, x: Var, batch: usize, heads: usize) -> Var {
    let s = g.shape(x).to_vec();
    let (n, dh) = (s[1], s[2]);
    let x = g.reshape(x, &[batch, heads, n, dh]);
    let x = g.permute(x, &[0, 2, 1, 3]);
    g.reshape(x, &[batch, n, heads * dh])
}

/// Scaled dot-product attention `softmax(QK^T / sqrt(dh)) V` per head.
/// `q` is `[B, n, C]`, `k` and `v` are `[B, m, C]`. Returns the merged output
/// `[B, n, C]` and the weights `[B*h, n, m]`.
pub fn multi_head_attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, heads: usize) -> (Var, Var) {
    let batch = g.shape(q)[0];
    let dh = g.shape(q)[2] / heads;
    let (q, k, v) = (split_heads(g, q, heads), split_heads(g, k, heads), split_heads(g, v, heads));
    let logits = g.matmul_t(q, k, false, true);
    let logits = g.scale(logits, T::of(1.0 / (dh as f64).sqrt()));
    let weights = g.softmax_last(logits);
    let out = g.matmul(weights, v);
    (merge_heads(g, out, batch, heads), weights)
}

/// Attention with query, key, value and (zero-initialised) output maps.
#[derive(Debug, Clone)]
pub struct Attention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl Attention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        context_dim: usize,
        heads: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        Self {
            heads,
            query: Linear::new(store, &format!("{name}.q"), DENOISER, width, width, Init::Fan(1.0), rng),
            key: Linear::new(store, &format!("{name}.k"), DENOISER, context_dim, width, Init::Fan(1.0), rng),
            value: Linear::new(store, &format!("{name}.v"), DENOISER, context_dim, width, Init::Fan(1.0), rng),
            out: Linear::new(store, &format!("{name}.o"), DENOISER, width, width, Init::Zeros, rng),
        }
    }

    /// Pre-residual output and attention weights. `x` is `[B, n, C]`,
    /// `context` is `[B, m, context_dim]`.
    pub fn attend<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, context: Var) -> (Var, Var) {
        let q = self.query.forward(g, store, x);
        let k = self.key.forward(g, store, context);
        let v = self.value.forward(g, store, context);
        let (o, w) = multi_head_attention(g, q, k, v, self.heads);
        (self.out.forward(g, store, o), w)
    }

    /// `x + attend(norm(x), norm(x))` over the tokens of `x`.
    pub fn self_attention<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = g.layer_norm(x, T::of(NORM_EPS));
        let (o, _) = self.attend(g, store, h, h);
        g.add(x, o)
    }

    /// `x + attend(norm(x), condition)` with one condition token per item;
    /// `condition` is `[B, d]`.
    pub fn cross_attention<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, condition: Var) -> Result<Var> {
        let cs = g.shape(condition).to_vec();
        if cs.len() != 2 || cs[1] != self.key.fan_in || cs[0] != g.shape(x)[0] {
            return Err(Error::Config(format!(
                "condition shape {cs:?} does not match a {}-dim condition for a batch of {}",
                self.key.fan_in,
                g.shape(x)[0]
            )));
        }
        let h = g.layer_norm(x, T::of(NORM_EPS));
        let c = g.reshape(condition, &[cs[0], 1, cs[1]]);
        let (o, _) = self.attend(g, store, h, c);
        Ok(g.add(x, o))
    }
}

/// Residual block: conv branch (with the step embedding added to its input),
/// then self-attention and cross-attention over grid positions.
#[derive(Debug, Clone)]
struct Block {
    time: Linear,
    conv_a: Conv2d,
    conv_b: Conv2d,
    self_attn: Attention,
    cross_attn: Attention,
}

impl Block {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &DenoiserConfig, rng: &mut impl rand::Rng) -> Self {
        let w = cfg.width;
        Self {
            time: Linear::new(store, &format!("{name}.time"), DENOISER, cfg.width, w, Init::Fan(1.0), rng),
            conv_a: Conv2d::new(store, &format!("{name}.conv_a"), DENOISER, w, w, 3, 1, Init::Fan(RELU_GAIN), rng),
            conv_b: Conv2d::new(store, &format!("{name}.conv_b"), DENOISER, w, w, 3, 1, Init::Zeros, rng),
            self_attn: Attention::new(store, &format!("{name}.self"), w, w, cfg.heads, rng),
            cross_attn: Attention::new(store, &format!("{name}.cross"), w, cfg.latent_dim, cfg.heads, rng),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, temb: Var, cond: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, c, r, w) = (s[0], s[1], s[2], s[3]);
        let te = self.time.forward(g, store, temb);
        let te = g.reshape(te, &[b, c, 1, 1]);
        let h = g.add(x, te);
        let h = g.silu(h);
        let h = self.conv_a.forward(g, store, h);
        let h = g.silu(h);
        let h = self.conv_b.forward(g, store, h);
        let x = g.add(x, h);

        let tokens = g.permute(x, &[0, 2, 3, 1]);
        let tokens = g.reshape(tokens, &[b, r * w, c]);
        let tokens = self.self_attn.self_attention(g, store, tokens);
        let tokens = self.cross_attn.cross_attention(g, store, tokens, cond)?;
        let x = g.reshape(tokens, &[b, r, w, c]);
        Ok(g.permute(x, &[0, 3, 1, 2]))
    }
}

#[derive(Debug, Clone)]
struct GridNet {
    input: Conv2d,
    down: Block,
    /// Half-resolution block and the zero-initialised merge back into the
    /// skip path; absent when the grid has an odd side.
    middle: Option<(Block, Conv2d)>,
    up: Block,
    head: Conv2d,
}

#[derive(Debug, Clone)]
struct MlpNet {
    layers: Vec<Linear>,
}

#[derive(Debug, Clone)]
enum Net {
    Grid(GridNet),
    Mlp(MlpNet),
}

#[derive(Debug, Clone)]
pub struct Denoiser<T> {
    pub cfg: DenoiserConfig,
    pub params: ParamStore<T>,
    time_fc1: Linear,
    time_fc2: Linear,
    net: Net,
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(cfg: DenoiserConfig, init_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::rng(seed::seed_split(init_seed, "denoiser-init", 0));
        let mut p = ParamStore::new();
        let w = cfg.width;
        let time_fc1 = Linear::new(&mut p, "time.fc1", DENOISER, cfg.time_dim, w, Init::Fan(1.0), &mut rng);
        let time_fc2 = Linear::new(&mut p, "time.fc2", DENOISER, w, w, Init::Fan(1.0), &mut rng);
        let net = match cfg.backbone {
            Backbone::Grid => Net::Grid(GridNet {
                input: Conv2d::new(&mut p, "input", DENOISER, 1, w, 3, 1, Init::Fan(1.0), &mut rng),
                down: Block::new(&mut p, "down", &cfg, &mut rng),
                middle: cfg.has_half_level().then(|| {
                    let block = Block::new(&mut p, "middle", &cfg, &mut rng);
                    let merge = Conv2d::new(&mut p, "merge", DENOISER, w, w, 1, 1, Init::Zeros, &mut rng);
                    (block, merge)
                }),
                up: Block::new(&mut p, "up", &cfg, &mut rng),
                head: Conv2d::new(&mut p, "head", DENOISER, w, 1, 1, 1, Init::Fan(1.0), &mut rng),
            }),
            Backbone::Mlp => {
                let d = cfg.latent_dim;
                let hidden = 4 * w;
                Net::Mlp(MlpNet {
                    layers: vec![
                        Linear::new(&mut p, "mlp.0", DENOISER, 2 * d + w, hidden, Init::Fan(RELU_GAIN), &mut rng),
                        Linear::new(&mut p, "mlp.1", DENOISER, hidden, hidden, Init::Fan(RELU_GAIN), &mut rng),
                        Linear::new(&mut p, "mlp.2", DENOISER, hidden, d, Init::Zeros, &mut rng),
                    ],
                })
            }
        };
        Ok(Self {
            cfg,
            params: p,
            time_fc1,
            time_fc2,
            net,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn optimizer(&self, lr: f64, clip: Option<f64>) -> crate::nn::Adam<T> {
        crate::nn::Adam::new([(DENOISER.to_string(), lr)].into_iter().collect()).with_clip(clip)
    }

    fn check_shapes(&self, z: &[usize], ts: usize, cond: &[usize]) -> Result<()> {
        let d = self.cfg.latent_dim;
        if z.len() != 2 || z[1] != d || cond != z || ts != z[0] {
            return Err(Error::Config(format!(
                "denoiser expects latent and condition [B, {d}] with B step indices, got {z:?}, {cond:?}, {ts} steps"
            )));
        }
        Ok(())
    }

    /// Builds the prediction for noisy latents `z` `[B, d]` at steps `ts`
    /// conditioned on speech embeddings `cond` `[B, d]`, reading parameters
    /// from `store`.
    pub fn forward_with(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var, ts: &[usize], cond: Var) -> Result<Var> {
        self.check_shapes(g.shape(z), ts.len(), g.shape(cond))?;
        let b = ts.len();
        let temb = g.constant(time_batch(ts, self.cfg.time_dim)?);
        let temb = self.time_fc1.forward(g, store, temb);
        let temb = g.silu(temb);
        let temb = self.time_fc2.forward(g, store, temb);
        let temb = g.silu(temb);
        match &self.net {
            Net::Grid(net) => {
                let [r, c] = self.cfg.grid_shape();
                let x = g.reshape(z, &[b, 1, r, c]);
                let x = net.input.forward(g, store, x);
                let skip = net.down.forward(g, store, x, temb, cond)?;
                let x = match &net.middle {
                    Some((block, merge)) => {
                        let h = g.avg_pool2x(skip);
                        let h = block.forward(g, store, h, temb, cond)?;
                        let h = g.upsample2x(h);
                        let h = merge.forward(g, store, h);
                        g.add(skip, h)
                    }
                    None => skip,
                };
                let x = net.up.forward(g, store, x, temb, cond)?;
                let x = g.silu(x);
                let x = net.head.forward(g, store, x);
                Ok(g.reshape(x, &[b, self.cfg.latent_dim]))
            }
            Net::Mlp(net) => {
                let mut h = g.concat(&[z, temb, cond], 1);
                for (i, layer) in net.layers.iter().enumerate() {
                    h = layer.forward(g, store, h);
                    if i + 1 < net.layers.len() {
                        h = g.silu(h);
                    }
                }
                Ok(h)
            }
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, z: Var, ts: &[usize], cond: Var) -> Result<Var> {
        self.forward_with(g, &self.params, z, ts, cond)
    }

    /// Predicted noise without gradient bookkeeping.
    pub fn predict(&self, z: &Tensor<T>, ts: &[usize], cond: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let cv = g.constant(cond.clone());
        let out = self.forward(&mut g, zv, ts, cv)?;
        Ok(g.value(out).clone())
    }

    /// Output of the input embedding followed directly by the head, which is
    /// what the whole grid network computes while every block output map is
    /// still zero.
    pub fn skip_path(&self, z: &Tensor<T>) -> Option<Tensor<T>> {
        let Net::Grid(net) = &self.net else { return None };
        let [r, c] = self.cfg.grid_shape();
        let b = z.dim(0);
        let mut g = Graph::new();
        let x = g.constant(z.clone().reshape(&[b, 1, r, c]));
        let x = net.input.forward(&mut g, &self.params, x);
        let x = g.silu(x);
        let x = net.head.forward(&mut g, &self.params, x);
        Some(g.value(x).clone().reshape(&[b, self.cfg.latent_dim]))
    }

    /// First block's attention modules, exposed for inspection.
    pub fn first_block_attention(&self) -> Option<(&Attention, &Attention)> {
        match &self.net {
            Net::Grid(net) => Some((&net.down.self_attn, &net.down.cross_attn)),
            Net::Mlp(_) => None,
        }
    }
}

/// Everything besides the weights that a denoiser checkpoint pins down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserProvenance {
    pub schedule: ScheduleDescriptor,
    pub beta_p: f64,
    pub prior_hash: String,
    pub stage1_hash: String,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserHeader {
    pub config: DenoiserConfig,
    pub provenance: DenoiserProvenance,
    pub params: ParamsHeader,
}

/// Writes the denoiser checkpoint and returns its parameter content hash.
pub fn save_denoiser<T: Scalar>(path: &Path, model: &Denoiser<T>, provenance: &DenoiserProvenance) -> Result<String> {
    let (params, payload) = encode_params(&model.params);
    let hash = params.content_hash.clone();
    let header = DenoiserHeader {
        config: model.cfg.clone(),
        provenance: provenance.clone(),
        params,
    };
    write_archive(path, DENOISER_KIND, &header, &payload)?;
    Ok(hash)
}

pub fn load_denoiser<T: Scalar>(path: &Path) -> Result<(Denoiser<T>, DenoiserHeader)> {
    let (header, payload): (DenoiserHeader, _) = read_archive(path, DENOISER_KIND)?;
    let mut model = Denoiser::new(header.config.clone(), 0)?;
    decode_params_into(&mut model.params, &header.params, &payload)?;
    Ok((model, header))
}
