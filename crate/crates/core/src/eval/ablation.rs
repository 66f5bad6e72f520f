//! Component and prior-weight ablations under one shared data and seed
//! protocol, plus generation metrics for a single trained pipeline.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::contrastive::{run_pretraining, PretrainConfig, Stage1Objective};
use crate::denoiser::{Denoiser, DenoiserConfig, DenoiserProvenance};
use crate::diffusion::{encode_pairs, train_on_pairs, LdmConfig, LdmOutcome, NoiseSchedule, ScheduleDescriptor};
use crate::encoders::{EncoderConfig, Stage1};
use crate::error::{Error, Result};
use crate::eval::probe::{identity_set_hash, ProbeModel, ProbeRecord};
use crate::eval::{attribute_accuracy, intra_condition_diversity, AttributeScores, FeatureDistances, COS_CONVENTION};
use crate::faceprior::{compute_prior_from_pool, FacePrior, PriorPool};
use crate::sampler::{Generator, SamplerConfig};
use crate::scalar::Scalar;
use crate::seed;
use crate::synthdata::{Dataset, FaceImage, PairedSample, Split};

/// Retrieval pool size for stage-1 held-out checks.
pub const RETRIEVAL_POOL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Reconstruction-only encoders, no prior shift.
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "+CP")]
    Cp,
    #[serde(rename = "+PN")]
    Pn,
    #[serde(rename = "+CP+PN")]
    CpPn,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::Cp, Variant::Pn, Variant::CpPn];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Cp => "+CP",
            Variant::Pn => "+PN",
            Variant::CpPn => "+CP+PN",
        }
    }

    pub fn collaborative(self) -> bool {
        matches!(self, Variant::Cp | Variant::CpPn)
    }

    pub fn uses_prior(self) -> bool {
        matches!(self, Variant::Pn | Variant::CpPn)
    }
}

/// Metrics of one trained pipeline on a set of held-out conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMetrics {
    pub distances: FeatureDistances,
    pub attributes: AttributeScores,
    pub diversity: f64,
    pub conditions: usize,
}

/// Generated samples for each condition alongside the condition's true face.
pub struct GeneratedSet {
    pub truth: Vec<FaceImage>,
    pub samples: Vec<Vec<FaceImage>>,
}

impl GeneratedSet {
    /// Contact-sheet rows: the true face followed by its samples.
    pub fn sheet_rows(&self, rows: usize) -> Vec<Vec<FaceImage>> {
        self.truth
            .iter()
            .zip(&self.samples)
            .take(rows)
            .map(|(t, s)| std::iter::once(t.clone()).chain(s.iter().cloned()).collect())
            .collect()
    }
}

/// Generates `cfg.n_samples` faces per condition and scores them with the
/// probe. Diversity averages over the first `diversity_conditions`.
pub fn evaluate_generation<T: Scalar, P: Scalar>(
    generator: &Generator<'_, T>,
    conditions: &[&PairedSample],
    cfg: &SamplerConfig,
    probe: &ProbeModel<P>,
    diversity_conditions: usize,
) -> Result<(GenerationMetrics, GeneratedSet)> {
    if conditions.is_empty() {
        return Err(Error::Input("no evaluation conditions".into()));
    }
    if cfg.n_samples < 2 {
        return Err(Error::validation("sampler.n_samples", "diversity needs at least 2 samples"));
    }
    let specs: Vec<_> = conditions.iter().map(|s| &s.spec).collect();
    let keys: Vec<u64> = conditions.iter().map(|s| s.identity.id_seed).collect();
    let samples = generator.generate(&specs, &keys, cfg)?;
    let truth: Vec<FaceImage> = conditions.iter().map(|s| s.image.clone()).collect();

    let mut dists = Vec::new();
    let mut pairs: Vec<(&FaceImage, &crate::synthdata::Identity)> = Vec::new();
    let mut diversity = Vec::new();
    for (c, (sample_set, cond)) in samples.iter().zip(conditions).enumerate() {
        let mut faces: Vec<&FaceImage> = vec![&cond.image];
        faces.extend(sample_set.iter());
        let out = probe.predict(&faces);
        for o in &out[1..] {
            dists.push(super::distances(&out[0].features, &o.features)?);
        }
        pairs.extend(sample_set.iter().map(|f| (f, &cond.identity)));
        if c < diversity_conditions {
            let feats: Vec<Vec<f64>> = out[1..].iter().map(|o| o.features.clone()).collect();
            diversity.push(intra_condition_diversity(&feats)?);
        }
    }
    let metrics = GenerationMetrics {
        distances: FeatureDistances::mean(&dists),
        attributes: attribute_accuracy(&pairs, probe),
        diversity: diversity.iter().sum::<f64>() / diversity.len().max(1) as f64,
        conditions: conditions.len(),
    };
    Ok((metrics, GeneratedSet { truth, samples }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    pub variants: Vec<Variant>,
    /// Prior weights swept with collaborative encoders.
    pub beta_sweep: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            beta_sweep: vec![0.0, 0.001, 0.01, 0.1],
            seeds: vec![0, 1, 2],
        }
    }
}

/// Everything shared by every run of an ablation.
pub struct AblationSetup<'a, P> {
    pub data: &'a Dataset,
    pub encoder: EncoderConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleDescriptor,
    pub prior_pool: &'a PriorPool,
    pub prior_n: usize,
    pub pretrain: PretrainConfig,
    pub ldm: LdmConfig,
    pub sampler: SamplerConfig,
    /// Prior weight of the `+PN` variants.
    pub beta_p: f64,
    pub conditions: usize,
    pub diversity_conditions: usize,
    pub probe: &'a ProbeModel<P>,
    pub max_seconds: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Component,
    BetaSweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub kind: RowKind,
    pub variant: String,
    pub collaborative: bool,
    pub beta_p: f64,
    pub seed: u64,
    pub metrics: GenerationMetrics,
    pub stage1_top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub kind: RowKind,
    pub variant: String,
    pub beta_p: f64,
    pub seeds: usize,
    pub l1: f64,
    pub l2: f64,
    pub cos: f64,
    pub gender_pct: f64,
    pub age_pct: f64,
    pub diversity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub convention: String,
    pub complete: bool,
    pub rows: Vec<AblationRow>,
    pub summary: Vec<SummaryRow>,
    pub probe: ProbeRecord,
    pub pipeline_identities: String,
    pub probe_disjoint: bool,
}

const CSV_HEADER: &str = "kind,variant,collaborative,beta_p,seed,l1,l2,cos,gender_pct,age_pct,diversity,stage1_top1";

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("# {COS_CONVENTION}\n{CSV_HEADER}\n");
        for r in &self.rows {
            let m = &r.metrics;
            let kind = match r.kind {
                RowKind::Component => "component",
                RowKind::BetaSweep => "beta_sweep",
            };
            writeln!(
                s,
                "{kind},{},{},{},{},{:.6},{:.6},{:.6},{:.4},{:.4},{:.6},{:.4}",
                r.variant,
                r.collaborative,
                r.beta_p,
                r.seed,
                m.distances.l1,
                m.distances.l2,
                m.distances.cos,
                m.attributes.gender_pct,
                m.attributes.age_pct,
                m.diversity,
                r.stage1_top1
            )
            .expect("string write");
        }
        s
    }

    pub fn summary_for(&self, kind: RowKind, variant: &str, beta_p: f64) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.kind == kind && r.variant == variant && r.beta_p == beta_p)
    }
}

fn summarize(rows: &[AblationRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(u8, String, u64), Vec<&AblationRow>> = BTreeMap::new();
    for r in rows {
        let k = match r.kind {
            RowKind::Component => 0,
            RowKind::BetaSweep => 1,
        };
        groups.entry((k, r.variant.clone(), r.beta_p.to_bits())).or_default().push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let n = g.len() as f64;
            let mean = |f: &dyn Fn(&GenerationMetrics) -> f64| g.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
            SummaryRow {
                kind: g[0].kind,
                variant: g[0].variant.clone(),
                beta_p: g[0].beta_p,
                seeds: g.len(),
                l1: mean(&|m| m.distances.l1),
                l2: mean(&|m| m.distances.l2),
                cos: mean(&|m| m.distances.cos),
                gender_pct: mean(&|m| m.attributes.gender_pct),
                age_pct: mean(&|m| m.attributes.age_pct),
                diversity: mean(&|m| m.diversity),
            }
        })
        .collect()
}

/// Trained stage-1 encoders and everything derived from them for one seed.
pub struct TrainedStage1 {
    pub model: Stage1<f32>,
    pub prior: FacePrior,
    pub top1: f64,
}

pub fn train_stage1(
    setup_data: &Dataset,
    encoder: &EncoderConfig,
    pretrain: &PretrainConfig,
    prior_pool: &PriorPool,
    prior_n: usize,
    run_seed: u64,
) -> Result<TrainedStage1> {
    let train = setup_data.split(Split::Train);
    let val = setup_data.split(Split::Val);
    let mut model = Stage1::<f32>::new(encoder.clone(), seed::seed_split(run_seed, "stage1-init", 0))?;
    let outcome = run_pretraining(
        &mut model,
        &train,
        &val,
        pretrain,
        RETRIEVAL_POOL,
        seed::seed_split(run_seed, "pretrain", 0),
    )?;
    let prior = compute_prior_from_pool(&model, prior_pool, prior_n, seed::seed_split(run_seed, "prior", 0))?;
    Ok(TrainedStage1 {
        model,
        prior,
        top1: outcome.final_retrieval.map(|r| r.top1).unwrap_or(f64::NAN),
    })
}

/// Trains one denoiser on top of `stage1` and returns it with its provenance
/// and loss curve.
pub fn train_variant(
    stage1: &TrainedStage1,
    train: &[&PairedSample],
    denoiser_cfg: &DenoiserConfig,
    schedule: &ScheduleDescriptor,
    ldm: &LdmConfig,
    run_seed: u64,
) -> Result<(Denoiser<f32>, DenoiserProvenance, LdmOutcome)> {
    let sched = NoiseSchedule::from_descriptor(schedule)?;
    let pairs = encode_pairs(&stage1.model, train)?;
    let mut den = Denoiser::<f32>::new(denoiser_cfg.clone(), seed::seed_split(run_seed, "denoiser-init", 0))?;
    let outcome = train_on_pairs(&mut den, &pairs, &stage1.prior, &sched, ldm, seed::seed_split(run_seed, "ldm", 0))?;
    let provenance = DenoiserProvenance {
        schedule: schedule.clone(),
        beta_p: ldm.beta_p,
        prior_hash: stage1.prior.content_hash(),
        stage1_hash: stage1.model.params.content_hash(),
        step: ldm.steps,
    };
    Ok((den, provenance, outcome))
}

/// Runs the grid. Every run of one seed shares the stage-1 initialisation,
/// denoiser initialisation and noise streams; runs stop early once
/// `max_seconds` is exceeded and the report is flagged incomplete.
pub fn ablation_run<P: Scalar>(setup: &AblationSetup<'_, P>, grid: &AblationGrid, mut progress: impl FnMut(&str)) -> Result<AblationReport> {
    let started = Instant::now();
    let over_budget = || setup.max_seconds.is_some_and(|m| started.elapsed().as_secs_f64() > m);
    let train = setup.data.split(Split::Train);
    let conditions: Vec<&PairedSample> = setup.data.split(Split::Test).into_iter().take(setup.conditions).collect();
    let pipeline_ids: Vec<u64> = setup.data.samples.iter().map(|s| s.identity.id_seed).collect();
    let probe_disjoint = pipeline_ids.iter().all(|s| !setup.probe.identities.contains(s));

    // (collaborative, beta_p) pairs and the rows that report each
    let mut jobs: Vec<(bool, f64, Vec<(RowKind, String)>)> = Vec::new();
    let mut add = |cp: bool, beta: f64, kind: RowKind, label: String| {
        match jobs.iter_mut().find(|j| j.0 == cp && j.1.to_bits() == beta.to_bits()) {
            Some(j) => j.2.push((kind, label)),
            None => jobs.push((cp, beta, vec![(kind, label)])),
        }
    };
    for v in &grid.variants {
        let beta = if v.uses_prior() { setup.beta_p } else { 0.0 };
        add(v.collaborative(), beta, RowKind::Component, v.label().to_string());
    }
    for &b in &grid.beta_sweep {
        add(true, b, RowKind::BetaSweep, "+CP".to_string());
    }

    let mut rows = Vec::new();
    let mut complete = true;
    'seeds: for &s in &grid.seeds {
        let mut stage1: BTreeMap<bool, TrainedStage1> = BTreeMap::new();
        for (cp, beta, labels) in &jobs {
            if over_budget() {
                complete = false;
                break 'seeds;
            }
            if !stage1.contains_key(cp) {
                let objective = if *cp {
                    Stage1Objective::Collaborative
                } else {
                    Stage1Objective::ReconstructionOnly
                };
                let cfg = PretrainConfig {
                    objective,
                    ..setup.pretrain.clone()
                };
                progress(&format!("seed {s}: stage 1 ({objective:?})"));
                stage1.insert(*cp, train_stage1(setup.data, &setup.encoder, &cfg, setup.prior_pool, setup.prior_n, s)?);
            }
            let st = &stage1[cp];
            progress(&format!("seed {s}: denoiser (collaborative={cp}, beta_p={beta})"));
            let ldm = LdmConfig {
                beta_p: *beta,
                ..setup.ldm.clone()
            };
            let (den, prov, _) = train_variant(st, &train, &setup.denoiser, &setup.schedule, &ldm, s)?;
            let gen = Generator::new(&st.model, &st.prior, &den, &prov)?;
            let sampler = SamplerConfig {
                seed: seed::seed_split(s, "sampler", 0),
                beta_p: None,
                ..setup.sampler.clone()
            };
            let (metrics, _) = evaluate_generation(&gen, &conditions, &sampler, setup.probe, setup.diversity_conditions)?;
            for (kind, label) in labels {
                rows.push(AblationRow {
                    kind: *kind,
                    variant: label.clone(),
                    collaborative: *cp,
                    beta_p: *beta,
                    seed: s,
                    metrics: metrics.clone(),
                    stage1_top1: st.top1,
                });
            }
        }
    }
    rows.sort_by(|a, b| {
        let key = |r: &AblationRow| (r.kind == RowKind::BetaSweep, r.variant.clone(), r.beta_p.to_bits(), r.seed);
        key(a).cmp(&key(b))
    });
    Ok(AblationReport {
        convention: COS_CONVENTION.to_string(),
        complete,
        summary: summarize(&rows),
        rows,
        probe: setup.probe.record.clone(),
        pipeline_identities: identity_set_hash(pipeline_ids),
        probe_disjoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(kind: RowKind, variant: &str, beta: f64, seed: u64, cos: f64) -> AblationRow {
        AblationRow {
            kind,
            variant: variant.into(),
            collaborative: true,
            beta_p: beta,
            seed,
            metrics: GenerationMetrics {
                distances: FeatureDistances { l1: 1.0, l2: 0.5, cos },
                attributes: AttributeScores {
                    gender_pct: 90.0,
                    age_pct: 80.0,
                },
                diversity: 3.0,
                conditions: 4,
            },
            stage1_top1: 0.9,
        }
    }

    #[test]
    fn summary_averages_over_seeds() {
        let rows = vec![
            row(RowKind::Component, "base", 0.0, 0, 10.0),
            row(RowKind::Component, "base", 0.0, 1, 20.0),
            row(RowKind::BetaSweep, "+CP", 0.1, 0, 5.0),
        ];
        let s = summarize(&rows);
        assert_eq!(s.len(), 2);
        let base = s.iter().find(|r| r.variant == "base").unwrap();
        assert_eq!(base.seeds, 2);
        assert_eq!(base.cos, 15.0);
    }

    #[test]
    fn csv_has_one_line_per_row() {
        let report = AblationReport {
            convention: COS_CONVENTION.into(),
            complete: true,
            rows: Variant::ALL
                .iter()
                .flat_map(|v| (0..3).map(move |s| row(RowKind::Component, v.label(), 0.0, s, 1.0)))
                .collect(),
            summary: vec![],
            probe: ProbeRecord {
                trained_on: String::new(),
                gender_accuracy: 1.0,
                age_mae: 0.0,
                params_hash: String::new(),
            },
            pipeline_identities: String::new(),
            probe_disjoint: true,
        };
        let csv = report.to_csv();
        assert_eq!(csv.lines().filter(|l| l.starts_with("component,")).count(), 12);
        assert!(csv.starts_with("# cos = 100"));
        assert_eq!(csv, report.to_csv());
    }

    #[test]
    fn variant_flags() {
        assert!(!Variant::Base.collaborative() && !Variant::Base.uses_prior());
        assert!(Variant::CpPn.collaborative() && Variant::CpPn.uses_prior());
        assert_eq!(serde_json::to_string(&Variant::CpPn).unwrap(), "\"+CP+PN\"");
    }
}
