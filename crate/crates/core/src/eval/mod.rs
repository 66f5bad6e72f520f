//! Evaluation: probe-feature distances, attribute preservation, sample
//! diversity, and the ablation harness.
//!
//! Cosine distance is reported as `100 * (1 - cosine similarity)`, so it lies
//! in `[0, 200]`. Age counts as preserved when the probe's estimate is within
//! 0.125 of the source age on the `[0, 1]` scale (ten years of an assumed
//! eighty-year span).

pub mod ablation;
pub mod probe;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synthdata::{FaceImage, Identity};

pub use probe::{attribute_probe_train, probe_faces, LabeledFace, ProbeConfig, ProbeModel, ProbeRecord};

pub const AGE_BAND: f64 = 0.125;
pub const COS_CONVENTION: &str = "cos = 100 * (1 - cosine similarity); age within 0.125 of source age";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureDistances {
    pub l1: f64,
    pub l2: f64,
    pub cos: f64,
}

impl FeatureDistances {
    pub fn mean(items: &[FeatureDistances]) -> Self {
        let n = items.len().max(1) as f64;
        Self {
            l1: items.iter().map(|d| d.l1).sum::<f64>() / n,
            l2: items.iter().map(|d| d.l2).sum::<f64>() / n,
            cos: items.iter().map(|d| d.cos).sum::<f64>() / n,
        }
    }
}

/// L1, L2 and cosine distance between two feature vectors.
pub fn distances(u: &[f64], v: &[f64]) -> Result<FeatureDistances> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::Input(format!("feature lengths {} and {} differ", u.len(), v.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Numeric("zero-norm feature vector".into()));
    }
    if u == v {
        return Ok(FeatureDistances {
            l1: 0.0,
            l2: 0.0,
            cos: 0.0,
        });
    }
    let l1 = u.iter().zip(v).map(|(a, b)| (a - b).abs()).sum();
    let l2 = u.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let sim = (u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv)).clamp(-1.0, 1.0);
    Ok(FeatureDistances {
        l1,
        l2,
        cos: 100.0 * (1.0 - sim),
    })
}

pub fn feature_distances<T: Scalar>(true_face: &FaceImage, gen_face: &FaceImage, probe: &ProbeModel<T>) -> Result<FeatureDistances> {
    let out = probe.predict(&[true_face, gen_face]);
    distances(&out[0].features, &out[1].features)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeScores {
    pub gender_pct: f64,
    pub age_pct: f64,
}

/// Share of faces whose probed gender matches, and whose probed age lies
/// within [`AGE_BAND`] of, the source identity.
pub fn attribute_accuracy<T: Scalar>(faces: &[(&FaceImage, &Identity)], probe: &ProbeModel<T>) -> AttributeScores {
    let out = probe.predict(&faces.iter().map(|f| f.0).collect::<Vec<_>>());
    let n = faces.len().max(1) as f64;
    let gender = out
        .iter()
        .zip(faces)
        .filter(|(o, (_, id))| u8::from(o.gender_prob >= 0.5) == id.gender)
        .count();
    let age = out
        .iter()
        .zip(faces)
        .filter(|(o, (_, id))| (o.age - id.age).abs() <= AGE_BAND)
        .count();
    AttributeScores {
        gender_pct: 100.0 * gender as f64 / n,
        age_pct: 100.0 * age as f64 / n,
    }
}

/// Mean pairwise cosine distance between the probe features of samples that
/// share one condition.
pub fn intra_condition_diversity(features: &[Vec<f64>]) -> Result<f64> {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..features.len() {
        for j in i + 1..features.len() {
            total += distances(&features[i], &features[j])?.cos;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::Input("diversity needs at least two samples".into()));
    }
    Ok(total / pairs as f64)
}
