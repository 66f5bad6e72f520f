//! Parameter storage, the two trainable layer primitives and the optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub group: String,
    pub value: Tensor<T>,
    pub frozen: bool,
}

/// Named, grouped parameter tensors. Groups carry learning rates and can be
/// frozen as a unit.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: &str, group: &str, value: Tensor<T>) -> ParamId {
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name: name.to_string(),
            group: group.to_string(),
            value,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn freeze_group(&mut self, group: &str, frozen: bool) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.frozen = frozen;
        }
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.frozen = true;
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn groups(&self) -> Vec<String> {
        let mut g: Vec<String> = self.params.iter().map(|p| p.group.clone()).collect();
        g.dedup();
        g.sort();
        g.dedup();
        g
    }

    /// Hash of names and shapes only.
    pub fn layout_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update(b":");
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(b";");
        }
        hex::encode(h.finalize())
    }

    /// Hash of names, shapes and values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.layout_hash().as_bytes());
        let mut buf = Vec::new();
        for p in &self.params {
            buf.clear();
            for &x in p.value.data() {
                x.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group.clone(),
                    value: p.value.cast(),
                    frozen: p.frozen,
                })
                .collect(),
        }
    }
}

/// Weight initialisation scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with std `gain / sqrt(fan_in)`.
    Fan(f64),
    Zeros,
    Constant(f64),
}

fn init_tensor<T: Scalar>(shape: &[usize], fan_in: usize, init: Init, rng: &mut impl Rng) -> Tensor<T> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Constant(c) => Tensor::full(shape, T::of(c)),
        Init::Fan(gain) => {
            let std = gain / (fan_in as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    T::of(z * std)
                })
                .collect();
            Tensor::new(shape, data)
        }
    }
}

pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// Affine map over the last axis; weight stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            group,
            init_tensor(&[fan_in, fan_out], fan_in, init, rng),
        );
        let b = store.add(&format!("{name}.b"), group, Tensor::zeros(&[fan_out]));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w);
        let rank = g.shape(y).len();
        let mut bshape = vec![1; rank];
        bshape[rank - 1] = self.fan_out;
        let b = g.reshape(b, &bshape);
        g.add(y, b)
    }
}

/// Square-kernel 2-D convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = store.add(
            &format!("{name}.w"),
            group,
            init_tensor(&[out_ch, in_ch, kernel, kernel], fan_in, init, rng),
        );
        let b = store.add(&format!("{name}.b"), group, Tensor::zeros(&[out_ch]));
        Self {
            w,
            b,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Adam with per-group learning rates and optional global-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lrs: BTreeMap<String, f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lrs: BTreeMap<String, f64>) -> Self {
        Self {
            lrs,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn with_clip(mut self, clip: Option<f64>) -> Self {
        self.clip_norm = clip;
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Frozen parameters are never touched; a group with
    /// no configured rate is a programming error.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) {
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let scale = match self.clip_norm {
            Some(c) => {
                let norm = grads
                    .iter()
                    .map(|(_, g)| g.data().iter().map(|x| x.f64() * x.f64()).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (id, grad) in grads {
            if store.is_frozen(*id) {
                continue;
            }
            let group = &store.param(*id).group;
            let lr = *self
                .lrs
                .get(group)
                .unwrap_or_else(|| panic!("no learning rate for group {group}"));
            if lr == 0.0 {
                continue;
            }
            let slot = self.moments[id.0].get_or_insert_with(|| {
                (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape()))
            });
            let (m, v) = (slot.0.data_mut(), slot.1.data_mut());
            let p = store.get_mut(*id).data_mut();
            let (tb1, tb2, teps) = (T::of(b1), T::of(b2), T::of(self.eps));
            let (one, tscale) = (T::one(), T::of(scale));
            let step = T::of(lr / bc1);
            let inv_bc2 = T::of(1.0 / bc2);
            for i in 0..p.len() {
                let gi = grad.data()[i] * tscale;
                m[i] = tb1 * m[i] + (one - tb1) * gi;
                v[i] = tb2 * v[i] + (one - tb2) * gi * gi;
                p[i] -= step * m[i] / ((v[i] * inv_bc2).sqrt() + teps);
            }
        }
    }
}
