//! Independent face probe: a small CNN trained on identities disjoint from the
//! generation pipeline. Its embedding layer is the feature space for the
//! similarity metrics and its heads are the attribute probes.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::sha256_hex;
use crate::error::{Error, Result};
use crate::nn::{Adam, Conv2d, Init, Linear, ParamStore, RELU_GAIN};
use crate::scalar::Scalar;
use crate::seed;
use crate::synthdata::{generate_identity, render_face, FaceImage, Identity};
use crate::tensor::Tensor;

pub const PROBE: &str = "probe";
pub const GENDER_FLOOR: f64 = 0.95;
pub const AGE_MAE_FLOOR: f64 = 0.1;
/// Outputs: gender logit, age, hue, four shape coordinates.
pub(crate) const OUTPUTS: usize = 7;
const INFER_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub train: usize,
    pub heldout: usize,
    pub widths: Vec<usize>,
    pub feature_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            train: 2000,
            heldout: 400,
            widths: vec![16, 32, 64],
            feature_dim: 64,
            steps: 1500,
            batch_size: 64,
            lr: 2e-3,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train < 2 || self.heldout < 2 {
            return Err(Error::validation("probe.train", "train and heldout need at least 2 faces"));
        }
        if self.widths.is_empty() || self.widths.contains(&0) || self.feature_dim == 0 {
            return Err(Error::validation("probe.widths", "must be non-empty and positive"));
        }
        if self.steps == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::validation("probe.steps", "steps, batch size and lr must be positive"));
        }
        Ok(())
    }
}

/// A face with its ground-truth attribute labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFace {
    pub image: FaceImage,
    pub identity_seed: u64,
    pub gender: u8,
    pub age: f64,
    pub hue: f64,
    pub shape: [f64; 4],
}

impl LabeledFace {
    pub fn new(image: FaceImage, identity: &Identity) -> Self {
        Self {
            image,
            identity_seed: identity.id_seed,
            gender: identity.gender,
            age: identity.age,
            hue: identity.hue,
            shape: identity.shape,
        }
    }

    pub(crate) fn targets(&self) -> [f64; OUTPUTS] {
        let s = self.shape;
        [self.gender as f64, self.age, self.hue, s[0], s[1], s[2], s[3]]
    }
}

/// `count` probe faces whose identities avoid every seed in `exclude`.
pub fn probe_faces(global_seed: u64, count: usize, resolution: usize, exclude: &HashSet<u64>) -> Result<Vec<LabeledFace>> {
    (0u64..)
        .map(|i| seed::seed_split(global_seed, "probe-identity", i))
        .filter(|s| !exclude.contains(s))
        .take(count)
        .map(|s| {
            let id = generate_identity(s);
            Ok(LabeledFace::new(render_face(&id, id.face_noise_seed(), resolution)?, &id))
        })
        .collect()
}

/// Order-independent hash of a set of identity seeds.
pub fn identity_set_hash(seeds: impl IntoIterator<Item = u64>) -> String {
    let mut v: Vec<u64> = seeds.into_iter().collect();
    v.sort_unstable();
    v.dedup();
    sha256_hex(&v.iter().flat_map(|s| s.to_le_bytes()).collect::<Vec<_>>())
}

#[derive(Debug, Clone)]
pub(crate) struct ProbeNet {
    stages: Vec<Conv2d>,
    embed: Linear,
    heads: Linear,
}

impl ProbeNet {
    pub(crate) fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ProbeConfig, rng: &mut impl rand::Rng) -> Self {
        let mut in_ch = 3;
        let stages = cfg
            .widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv2d::new(store, &format!("probe.conv{i}"), PROBE, in_ch, w, 3, 2, Init::Fan(RELU_GAIN), rng);
                in_ch = w;
                c
            })
            .collect();
        Self {
            stages,
            embed: Linear::new(store, "probe.embed", PROBE, in_ch, cfg.feature_dim, Init::Fan(RELU_GAIN), rng),
            heads: Linear::new(store, "probe.heads", PROBE, cfg.feature_dim, OUTPUTS, Init::Fan(1.0), rng),
        }
    }

    /// `(features [N, F], outputs [N, 7])`.
    pub(crate) fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> (Var, Var) {
        let mut h = x;
        for c in &self.stages {
            h = c.forward(g, store, h);
            h = g.relu(h);
        }
        let h = g.global_avg_pool(h);
        let feat = self.embed.forward(g, store, h);
        let act = g.relu(feat);
        (feat, self.heads.forward(g, store, act))
    }
}

/// Per-face probe readout.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutput {
    pub features: Vec<f64>,
    pub gender_prob: f64,
    pub age: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub trained_on: String,
    pub gender_accuracy: f64,
    pub age_mae: f64,
    pub params_hash: String,
}

#[derive(Debug, Clone)]
pub struct ProbeModel<T> {
    pub cfg: ProbeConfig,
    pub params: ParamStore<T>,
    net: ProbeNet,
    pub record: ProbeRecord,
    /// Identity seeds the probe was trained or validated on.
    pub identities: HashSet<u64>,
}

pub(crate) fn image_batch<T: Scalar>(faces: &[&FaceImage]) -> Tensor<T> {
    Tensor::stack(&faces.iter().map(|f| f.to_tensor()).collect::<Vec<_>>())
}

pub(crate) fn probe_loss<T: Scalar>(g: &mut Graph<T>, out: Var, targets: &Tensor<T>) -> Var {
    let n = targets.dim(0);
    let t = g.constant(targets.clone());
    // column masks select the gender logit from the regression outputs
    let mut gmask = vec![T::zero(); OUTPUTS];
    gmask[0] = T::one();
    let rmask: Vec<T> = gmask.iter().map(|&m| T::one() - m).collect();
    let gm = g.constant(Tensor::new(&[1, OUTPUTS], gmask));
    let rm = g.constant(Tensor::new(&[1, OUTPUTS], rmask));
    // binary cross-entropy: softplus(z) - y z
    let sp = g.softplus(out);
    let yz = g.mul(t, out);
    let bce = g.sub(sp, yz);
    let bce = g.mul(bce, gm);
    let diff = g.sub(out, t);
    let sq = g.square(diff);
    let sq = g.mul(sq, rm);
    let total = g.add(bce, sq);
    let s = g.sum_all(total);
    g.scale(s, T::of(1.0 / n as f64))
}

impl<T: Scalar> ProbeModel<T> {
    pub fn predict(&self, faces: &[&FaceImage]) -> Vec<ProbeOutput> {
        faces
            .chunks(INFER_CHUNK)
            .flat_map(|chunk| {
                let mut g = Graph::new();
                let x = g.constant(image_batch(chunk));
                let (f, o) = self.net.forward(&mut g, &self.params, x);
                let (f, o) = (g.value(f).clone(), g.value(o).clone());
                (0..chunk.len())
                    .map(|i| {
                        let logit = o.row(i)[0].f64();
                        ProbeOutput {
                            features: f.row(i).iter().map(|v| v.f64()).collect(),
                            gender_prob: 1.0 / (1.0 + (-logit).exp()),
                            age: o.row(i)[1].f64(),
                        }
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    pub fn features(&self, face: &FaceImage) -> Vec<f64> {
        self.predict(&[face]).remove(0).features
    }

    /// `(gender accuracy, age MAE)` against ground truth.
    pub fn score(&self, faces: &[LabeledFace]) -> (f64, f64) {
        let out = self.predict(&faces.iter().map(|f| &f.image).collect::<Vec<_>>());
        let n = faces.len() as f64;
        let correct = out
            .iter()
            .zip(faces)
            .filter(|(o, f)| u8::from(o.gender_prob >= 0.5) == f.gender)
            .count();
        let mae = out.iter().zip(faces).map(|(o, f)| (o.age - f.age).abs()).sum::<f64>() / n;
        (correct as f64 / n, mae)
    }
}

/// Trains the probe, then fails with [`Error::ProbeFloor`] when held-out
/// gender accuracy or age MAE misses its floor.
pub fn attribute_probe_train<T: Scalar>(train: &[LabeledFace], heldout: &[LabeledFace], cfg: &ProbeConfig) -> Result<ProbeModel<T>> {
    cfg.validate()?;
    let train_ids: HashSet<u64> = train.iter().map(|f| f.identity_seed).collect();
    if heldout.iter().any(|f| train_ids.contains(&f.identity_seed)) {
        return Err(Error::Input("probe held-out identities overlap its training identities".into()));
    }
    let mut rng = seed::rng(seed::seed_split(cfg.seed, "probe-init", 0));
    let mut params = ParamStore::new();
    let net = ProbeNet::new(&mut params, cfg, &mut rng);
    let mut opt = Adam::<T>::new([(PROBE.to_string(), cfg.lr)].into_iter().collect()).with_clip(Some(5.0));
    let bs = cfg.batch_size.min(train.len());
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = train.len();
    let mut epoch = 0u64;
    for step in 0..cfg.steps {
        if cursor + bs > train.len() {
            order = (0..train.len()).collect();
            order.shuffle(&mut seed::rng(seed::seed_split(cfg.seed, "probe-epoch", epoch)));
            epoch += 1;
            cursor = 0;
        }
        let idx = &order[cursor..cursor + bs];
        cursor += bs;
        let images: Vec<&FaceImage> = idx.iter().map(|&i| &train[i].image).collect();
        let targets = Tensor::new(
            &[bs, OUTPUTS],
            idx.iter().flat_map(|&i| train[i].targets()).map(T::of).collect(),
        );
        let mut g = Graph::new();
        let x = g.constant(image_batch(&images));
        let (_, out) = net.forward(&mut g, &params, x);
        let loss = probe_loss(&mut g, out, &targets);
        let value = g.value(loss).data()[0].f64();
        if !value.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("probe loss is {value}"),
            });
        }
        let grads = g.backward(loss);
        opt.step(&mut params, &g.param_grads(&grads));
    }
    let identities: HashSet<u64> = train_ids.iter().copied().chain(heldout.iter().map(|f| f.identity_seed)).collect();
    let mut model = ProbeModel {
        cfg: cfg.clone(),
        record: ProbeRecord {
            trained_on: identity_set_hash(identities.iter().copied()),
            gender_accuracy: 0.0,
            age_mae: f64::INFINITY,
            params_hash: params.content_hash(),
        },
        params,
        net,
        identities,
    };
    let (acc, mae) = model.score(heldout);
    model.record.gender_accuracy = acc;
    model.record.age_mae = mae;
    if acc < GENDER_FLOOR || mae > AGE_MAE_FLOOR {
        return Err(Error::ProbeFloor(format!(
            "held-out gender accuracy {:.1}% (floor {:.0}%), age MAE {mae:.3} (floor {AGE_MAE_FLOOR})",
            100.0 * acc,
            100.0 * GENDER_FLOOR
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{jitter_params, param_grad_error, REL_TOL};

    fn small_cfg() -> ProbeConfig {
        ProbeConfig {
            train: 400,
            heldout: 100,
            widths: vec![8, 16, 32],
            feature_dim: 32,
            steps: 300,
            batch_size: 32,
            lr: 2e-3,
            seed: 1,
        }
    }

    #[test]
    fn probe_faces_respect_exclusions() {
        let first = probe_faces(5, 3, 16, &HashSet::new()).unwrap();
        let excluded: HashSet<u64> = [first[0].identity_seed].into_iter().collect();
        let again = probe_faces(5, 3, 16, &excluded).unwrap();
        assert!(again.iter().all(|f| f.identity_seed != first[0].identity_seed));
        assert_eq!(again[0], first[1]);
    }

    #[test]
    fn identity_hash_ignores_order() {
        assert_eq!(identity_set_hash([3, 1, 2]), identity_set_hash([2, 3, 1]));
        assert_ne!(identity_set_hash([1, 2]), identity_set_hash([1, 3]));
    }

    #[test]
    fn probe_gradients_match_finite_differences() {
        let cfg = ProbeConfig {
            widths: vec![2, 3],
            feature_dim: 4,
            ..small_cfg()
        };
        let mut store = ParamStore::<f64>::new();
        let net = ProbeNet::new(&mut store, &cfg, &mut seed::rng(2));
        jitter_params(&mut store, 3);
        let faces = probe_faces(2, 2, 16, &HashSet::new()).unwrap();
        let x = image_batch::<f64>(&faces.iter().map(|f| &f.image).collect::<Vec<_>>());
        let t = Tensor::new(&[2, OUTPUTS], faces.iter().flat_map(|f| f.targets()).collect());
        let err = param_grad_error(&store, 8, |g, s| {
            let xv = g.constant(x.clone());
            let (_, out) = net.forward(g, s, xv);
            probe_loss(g, out, &t)
        });
        assert!(err <= REL_TOL, "relative error {err:e}");
    }

    #[test]
    fn shuffled_labels_hit_the_floor() {
        let cfg = small_cfg();
        let mut faces = probe_faces(7, cfg.train + cfg.heldout, 32, &HashSet::new()).unwrap();
        let mut genders: Vec<u8> = faces.iter().map(|f| f.gender).collect();
        genders.shuffle(&mut seed::rng(8));
        for (f, g) in faces.iter_mut().zip(genders) {
            f.gender = g;
        }
        let held = faces.split_off(cfg.train);
        let r = attribute_probe_train::<f32>(&faces, &held, &cfg);
        match r {
            Err(Error::ProbeFloor(msg)) => assert!(msg.contains("gender")),
            other => panic!("expected a floor error, got {other:?}"),
        }
    }

    #[test]
    fn overlapping_heldout_is_rejected() {
        let faces = probe_faces(9, 4, 16, &HashSet::new()).unwrap();
        let r = attribute_probe_train::<f32>(&faces[..3], &faces[2..], &small_cfg());
        assert!(matches!(r, Err(Error::Input(_))));
    }
}
