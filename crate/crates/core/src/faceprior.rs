//! Statistical face prior: the mean face-encoder embedding over a
//! gender-balanced face set, and the sample-size convergence diagnostic.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_archive, sha256_hex, write_archive};
use crate::encoders::Stage1;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;
use crate::synthdata::{generate_identity, render_face, FaceImage, PairedSample};
use crate::tensor::Tensor;

pub const PRIOR_KIND: &str = "face-prior";

/// Rows summed per partial accumulator before the partials are combined in
/// order, so the reduction is identical however the rows were produced.
const ACCUMULATION_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceRecord {
    /// Count of gender-0 faces.
    pub gender0: usize,
    /// Count of gender-1 faces.
    pub gender1: usize,
}

impl BalanceRecord {
    pub fn from_genders(genders: &[u8]) -> Self {
        let gender1 = genders.iter().filter(|&&g| g == 1).count();
        Self {
            gender0: genders.len() - gender1,
            gender1,
        }
    }

    pub fn is_balanced(&self) -> bool {
        self.gender0.abs_diff(self.gender1) <= 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacePrior {
    pub values: Vec<f64>,
    pub sample_count: usize,
    pub encoder_hash: String,
    pub balance: BalanceRecord,
}

impl FacePrior {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Identity of this prior for downstream checkpoints.
    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::with_capacity(self.values.len() * 8 + 64);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&(self.sample_count as u64).to_le_bytes());
        bytes.extend_from_slice(self.encoder_hash.as_bytes());
        sha256_hex(&bytes)
    }

    /// Fails unless this prior was computed with the encoder of hash `encoder_hash`.
    pub fn check_encoder(&self, encoder_hash: &str) -> Result<()> {
        if self.encoder_hash != encoder_hash {
            return Err(Error::hash_mismatch("face prior encoder", &self.encoder_hash, encoder_hash));
        }
        Ok(())
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(&[self.values.len()], self.values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn l1_distance(&self, other: &FacePrior) -> f64 {
        l1(&self.values, &other.values)
    }
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Row mean of `[N, d]` in f64 with a fixed reduction order.
pub fn mean_rows<T: Scalar>(rows: &Tensor<T>) -> Result<Vec<f64>> {
    if rows.ndim() != 2 || rows.dim(0) == 0 {
        return Err(Error::Input("the prior needs at least one embedding".into()));
    }
    let (n, d) = (rows.dim(0), rows.dim(1));
    let mut total = vec![0.0f64; d];
    for chunk in rows.data().chunks(ACCUMULATION_CHUNK * d) {
        let mut part = vec![0.0f64; d];
        for row in chunk.chunks(d) {
            for (p, v) in part.iter_mut().zip(row) {
                *p += v.f64();
            }
        }
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    Ok(total.into_iter().map(|s| s / n as f64).collect())
}

/// Prior from precomputed embeddings and the gender of each row.
pub fn prior_from_embeddings<T: Scalar>(embeddings: &Tensor<T>, genders: &[u8], encoder_hash: &str) -> Result<FacePrior> {
    if embeddings.ndim() == 2 && embeddings.dim(0) != genders.len() {
        return Err(Error::Input(format!(
            "{} embeddings but {} gender labels",
            embeddings.dim(0),
            genders.len()
        )));
    }
    let values = mean_rows(embeddings)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("face prior has non-finite entries".into()));
    }
    Ok(FacePrior {
        values,
        sample_count: genders.len(),
        encoder_hash: encoder_hash.to_string(),
        balance: BalanceRecord::from_genders(genders),
    })
}

/// Draws `n` samples with gender counts differing by at most one.
pub fn balanced_subset<'a>(pool: &[&'a PairedSample], n: usize, rng_seed: u64) -> Result<Vec<&'a PairedSample>> {
    let idx = balanced_indices(&pool.iter().map(|s| s.identity.gender).collect::<Vec<_>>(), n, rng_seed)?;
    Ok(idx.into_iter().map(|i| pool[i]).collect())
}

/// Indices of a gender-balanced draw of size `n` from `genders`.
pub fn balanced_indices(genders: &[u8], n: usize, rng_seed: u64) -> Result<Vec<usize>> {
    let mut rng = seed::rng(rng_seed);
    let mut by: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &g) in genders.iter().enumerate() {
        by[usize::from(g == 1)].push(i);
    }
    // the extra item of an odd draw goes to the larger group
    let (major, minor) = if by[0].len() >= by[1].len() { (0, 1) } else { (1, 0) };
    let want = [(major, n - n / 2), (minor, n / 2)];
    let mut out = Vec::with_capacity(n);
    for (g, k) in want {
        if by[g].len() < k {
            return Err(Error::Input(format!(
                "need {k} faces of gender {g} for a balanced set of {n}, only {} available",
                by[g].len()
            )));
        }
        by[g].shuffle(&mut rng);
        out.extend_from_slice(&by[g][..k]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Encodes a gender-balanced draw of `n` faces from `pool` with the frozen
/// stage-1 face encoder and averages the embeddings.
pub fn compute_prior<T: Scalar>(model: &Stage1<T>, pool: &[&PairedSample], n: usize, rng_seed: u64) -> Result<FacePrior> {
    if n == 0 {
        return Err(Error::Input("the prior needs N >= 1".into()));
    }
    let chosen = balanced_subset(pool, n, rng_seed)?;
    let images: Vec<_> = chosen.iter().map(|s| &s.image).collect();
    let genders: Vec<u8> = chosen.iter().map(|s| s.identity.gender).collect();
    let z = model.encode_faces(&images)?;
    prior_from_embeddings(&z, &genders, &model.params.content_hash())
}

/// Faces rendered for prior estimation, outside any dataset split.
#[derive(Debug, Clone)]
pub struct PriorPool {
    pub faces: Vec<FaceImage>,
    pub genders: Vec<u8>,
}

impl PriorPool {
    /// Renders `per_gender` faces of each gender from identities derived
    /// from `pool_seed`, skipping any identity seed in `exclude`.
    pub fn generate(pool_seed: u64, per_gender: usize, resolution: usize, exclude: &HashSet<u64>) -> Result<Self> {
        let mut quota = [per_gender; 2];
        let mut ids = Vec::with_capacity(2 * per_gender);
        let mut k = 0u64;
        while quota[0] + quota[1] > 0 {
            let id_seed = seed::seed_split(pool_seed, "prior-pool", k);
            k += 1;
            if exclude.contains(&id_seed) {
                continue;
            }
            let id = generate_identity(id_seed);
            let g = id.gender as usize;
            if quota[g] > 0 {
                quota[g] -= 1;
                ids.push(id);
            }
        }
        let faces = ids
            .par_iter()
            .map(|id| Ok(render_face(id, id.face_noise_seed(), resolution)?.quantized()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            faces,
            genders: ids.iter().map(|i| i.gender).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.faces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn embed<T: Scalar>(&self, model: &Stage1<T>) -> Result<Tensor<f64>> {
        let z = model.encode_faces(&self.faces.iter().collect::<Vec<_>>())?;
        Ok(Tensor::new(z.shape(), z.data().iter().map(|v| v.f64()).collect()))
    }
}

/// [`compute_prior`] over a rendered pool.
pub fn compute_prior_from_pool<T: Scalar>(model: &Stage1<T>, pool: &PriorPool, n: usize, rng_seed: u64) -> Result<FacePrior> {
    if n == 0 {
        return Err(Error::Input("the prior needs N >= 1".into()));
    }
    let idx = balanced_indices(&pool.genders, n, rng_seed)?;
    let images: Vec<&FaceImage> = idx.iter().map(|&i| &pool.faces[i]).collect();
    let genders: Vec<u8> = idx.iter().map(|&i| pool.genders[i]).collect();
    let z = model.encode_faces(&images)?;
    prior_from_embeddings(&z, &genders, &model.params.content_hash())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub n1: usize,
    pub n2: usize,
    pub mean_l1: f64,
}

/// For each consecutive pair of `ns`, the L1 distance between priors of two
/// independent balanced draws of sizes `n1` and `n2`, averaged over
/// `repetitions` seeds.
pub fn prior_convergence(
    embeddings: &Tensor<f64>,
    genders: &[u8],
    ns: &[usize],
    repetitions: usize,
    rng_seed: u64,
) -> Result<Vec<ConvergenceRow>> {
    if ns.windows(2).any(|w| w[0] >= w[1]) || ns.len() < 2 || ns[0] == 0 {
        return Err(Error::Input("N list must be positive and strictly increasing".into()));
    }
    let max = *ns.last().unwrap();
    if embeddings.dim(0) < max {
        return Err(Error::Input(format!(
            "{} faces cannot supply a subset of {max}",
            embeddings.dim(0)
        )));
    }
    if repetitions == 0 {
        return Err(Error::Input("at least one repetition is required".into()));
    }
    let d = embeddings.dim(1);
    let prior_of = |idx: &[usize]| -> Result<Vec<f64>> {
        let rows: Vec<f64> = idx.iter().flat_map(|&i| embeddings.row(i).iter().copied()).collect();
        mean_rows(&Tensor::new(&[idx.len(), d], rows))
    };
    ns.windows(2)
        .enumerate()
        .map(|(k, w)| {
            let mut total = 0.0;
            for r in 0..repetitions {
                let base = seed::seed_split(rng_seed, "prior-convergence", (k * repetitions + r) as u64);
                let a = balanced_indices(genders, w[0], seed::seed_split(base, "first", 0))?;
                let b = balanced_indices(genders, w[1], seed::seed_split(base, "second", 0))?;
                total += l1(&prior_of(&a)?, &prior_of(&b)?);
            }
            Ok(ConvergenceRow {
                n1: w[0],
                n2: w[1],
                mean_l1: total / repetitions as f64,
            })
        })
        .collect()
}

/// Least-squares slope of `ln(mean_l1)` against `ln(n1)`.
pub fn loglog_slope(rows: &[ConvergenceRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| ((r.n1 as f64).ln(), r.mean_l1.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Debug, Serialize, Deserialize)]
struct PriorHeader {
    n: usize,
    d: usize,
    encoder_hash: String,
    balance_record: BalanceRecord,
    dtype: String,
}

pub fn save_prior(path: &Path, prior: &FacePrior) -> Result<()> {
    let header = PriorHeader {
        n: prior.sample_count,
        d: prior.dim(),
        encoder_hash: prior.encoder_hash.clone(),
        balance_record: prior.balance,
        dtype: "f64".into(),
    };
    let payload: Vec<u8> = prior.values.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_archive(path, PRIOR_KIND, &header, &payload)
}

pub fn load_prior(path: &Path) -> Result<FacePrior> {
    let (h, payload): (PriorHeader, _) = read_archive(path, PRIOR_KIND)?;
    if payload.len() != h.d * 8 {
        return Err(Error::Input(format!("prior payload holds {} bytes, expected {}", payload.len(), h.d * 8)));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(FacePrior {
        values,
        sample_count: h.n,
        encoder_hash: h.encoder_hash,
        balance: h.balance_record,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randn(n: usize, d: usize, s: u64) -> Tensor<f64> {
        let mut rng = seed::rng(s);
        Tensor::new(&[n, d], seed::normal_vec(&mut rng, n * d))
    }

    #[test]
    fn single_face_prior_is_its_embedding() {
        let z = randn(1, 5, 1);
        let p = prior_from_embeddings(&z, &[1], "h").unwrap();
        assert_eq!(p.values, z.data());
        assert_eq!(p.sample_count, 1);
    }

    #[test]
    fn opposite_pair_averages_to_zero() {
        let v = randn(1, 6, 2);
        let mut data = v.data().to_vec();
        data.extend(v.data().iter().map(|x| -x));
        let p = prior_from_embeddings(&Tensor::new(&[2, 6], data), &[0, 1], "h").unwrap();
        assert!(p.values.iter().all(|&x| x == 0.0));
        assert!(p.balance.is_balanced());
    }

    #[test]
    fn empty_set_is_an_input_error() {
        let z = Tensor::<f64>::zeros(&[0, 3]);
        assert!(matches!(prior_from_embeddings(&z, &[], "h"), Err(Error::Input(_))));
    }

    #[test]
    fn balanced_draw_counts() {
        let genders: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        for n in [1, 2, 7, 20] {
            let idx = balanced_indices(&genders, n, 3).unwrap();
            let b = BalanceRecord::from_genders(&idx.iter().map(|&i| genders[i]).collect::<Vec<_>>());
            assert_eq!(idx.len(), n);
            assert!(b.is_balanced());
        }
        assert!(balanced_indices(&genders, 41, 3).is_err());
    }

    #[test]
    fn identical_subsets_have_zero_distance() {
        let z = randn(10, 4, 4);
        let g = vec![0u8; 10];
        let a = prior_from_embeddings(&z, &g, "h").unwrap();
        let b = prior_from_embeddings(&z, &g, "h").unwrap();
        assert_eq!(a.l1_distance(&b), 0.0);
    }

    #[test]
    fn convergence_follows_inverse_square_root() {
        let z = randn(1600, 16, 5);
        let genders: Vec<u8> = (0..1600).map(|i| (i % 2) as u8).collect();
        let rows = prior_convergence(&z, &genders, &[50, 100, 200, 400, 800], 5, 9).unwrap();
        assert!(rows.windows(2).all(|w| w[1].mean_l1 < w[0].mean_l1), "{rows:?}");
        let slope = loglog_slope(&rows);
        assert!((-0.7..=-0.3).contains(&slope), "slope {slope}");
    }

    #[test]
    fn convergence_rejects_bad_lists() {
        let z = randn(10, 2, 1);
        let g = vec![0u8; 10];
        assert!(prior_convergence(&z, &g, &[5, 5], 1, 0).is_err());
        assert!(prior_convergence(&z, &g, &[5, 20], 1, 0).is_err());
    }

    #[test]
    fn prior_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = prior_from_embeddings(&randn(4, 3, 6), &[0, 1, 0, 1], "abc").unwrap();
        let path = dir.path().join("prior.bin");
        save_prior(&path, &p).unwrap();
        let back = load_prior(&path).unwrap();
        assert_eq!(back, p);
        assert!(back.check_encoder("abc").is_ok());
        assert!(matches!(back.check_encoder("xyz"), Err(Error::HashMismatch { .. })));
    }
}
