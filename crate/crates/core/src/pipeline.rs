//! The experiment commands. Each reads its inputs from, and writes its
//! outputs into, a run directory and reports every file it touched to a
//! [`Recorder`].

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint::{load_stage1, save_stage1, write_atomic};
use crate::config::ExperimentConfig;
use crate::contrastive::{autoencoder_mae, evaluate_alignment, run_pretraining, write_log};
use crate::denoiser::{load_denoiser, save_denoiser};
use crate::encoders::Stage1;
use crate::error::{Error, Result};
use crate::eval::ablation::{
    ablation_run, evaluate_generation, train_variant, AblationSetup, TrainedStage1, RETRIEVAL_POOL,
};
use crate::eval::probe::{attribute_probe_train, probe_faces, ProbeModel};
use crate::eval::COS_CONVENTION;
use crate::faceprior::{
    compute_prior_from_pool, load_prior, loglog_slope, prior_convergence, save_prior, FacePrior, PriorPool,
};
use crate::io;
use crate::manifest::Recorder;
use crate::sampler::Generator;
use crate::seed::seed_split;
use crate::synthdata::{build_dataset, load_dataset, spectrogram, Dataset, DatasetManifest, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Datagen,
    Pretrain,
    Prior,
    Train,
    Sample,
    Eval,
    Ablate,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::Datagen => "datagen",
            CommandKind::Pretrain => "pretrain",
            CommandKind::Prior => "prior",
            CommandKind::Train => "train",
            CommandKind::Sample => "sample",
            CommandKind::Eval => "eval",
            CommandKind::Ablate => "ablate",
        }
    }
}

/// Where a command finds its inputs and puts its outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPaths {
    pub out: PathBuf,
    pub data: PathBuf,
    pub stage1: PathBuf,
    pub prior: PathBuf,
    pub denoiser: PathBuf,
}

impl RunPaths {
    /// Every input and output inside one directory.
    pub fn in_dir(out: &Path) -> Self {
        Self {
            out: out.to_path_buf(),
            data: out.join("data"),
            stage1: out.join("stage1.ckpt"),
            prior: out.join("prior.bin"),
            denoiser: out.join("denoiser.ckpt"),
        }
    }
}

/// Extra inputs of the `sample` command.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleRequest {
    /// WAV clips to condition on; empty uses the leading test clips.
    pub speech: Vec<PathBuf>,
}

fn write_json(path: &Path, value: &impl Serialize, rec: &mut Recorder) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    rec.produce(path);
    Ok(())
}

fn write_text(path: &Path, text: &str, rec: &mut Recorder) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    rec.produce(path);
    Ok(())
}

fn open_dataset(cfg: &ExperimentConfig, paths: &RunPaths, rec: &mut Recorder) -> Result<Dataset> {
    let manifest = paths.data.join("manifest.json");
    if !manifest.exists() {
        return Err(Error::Input(format!(
            "no dataset at {}; run `datagen` first",
            paths.data.display()
        )));
    }
    let ds = load_dataset(&paths.data)?;
    rec.consume(&manifest);
    if ds.config() != &cfg.data {
        return Err(Error::Config(format!(
            "dataset at {} was generated with a different data configuration",
            paths.data.display()
        )));
    }
    Ok(ds)
}

fn dataset_identities(paths: &RunPaths, rec: &mut Recorder) -> Result<HashSet<u64>> {
    let path = paths.data.join("manifest.json");
    let m: DatasetManifest = serde_json::from_str(&fs::read_to_string(&path).map_err(|e| {
        Error::Input(format!("cannot read dataset manifest {}: {e}", path.display()))
    })?)?;
    rec.consume(&path);
    Ok(m.records.iter().map(|r| r.identity.id_seed).collect())
}

fn open_stage1(cfg: &ExperimentConfig, paths: &RunPaths, rec: &mut Recorder) -> Result<Stage1<f32>> {
    let (model, _) = load_stage1::<f32>(&paths.stage1)?;
    rec.consume(&paths.stage1);
    if model.cfg != cfg.encoder_config() {
        return Err(Error::Config(format!(
            "{} was trained with a different encoder configuration",
            paths.stage1.display()
        )));
    }
    Ok(model)
}

fn open_prior(paths: &RunPaths, stage1: &Stage1<f32>, rec: &mut Recorder) -> Result<FacePrior> {
    let prior = load_prior(&paths.prior)?;
    rec.consume(&paths.prior);
    prior.check_encoder(&stage1.params.content_hash())?;
    Ok(prior)
}

/// Faces per gender in the prior pool: room for two independent draws of
/// the largest convergence size.
fn pool_per_gender(cfg: &ExperimentConfig) -> usize {
    let max_n = cfg.prior.convergence_ns.iter().copied().max().unwrap_or(0);
    cfg.prior.n.max(max_n)
}

pub fn prior_pool(cfg: &ExperimentConfig, exclude: &HashSet<u64>) -> Result<PriorPool> {
    PriorPool::generate(cfg.data.seed, pool_per_gender(cfg), cfg.data.resolution, exclude)
}

/// Trains the attribute probe on identities disjoint from the dataset.
pub fn train_probe(cfg: &ExperimentConfig, exclude: &HashSet<u64>) -> Result<ProbeModel<f32>> {
    let p = &cfg.eval.probe;
    let faces = probe_faces(p.seed, p.train + p.heldout, cfg.data.resolution, exclude)?;
    let (train, heldout) = faces.split_at(p.train);
    attribute_probe_train::<f32>(train, heldout, p)
}

pub fn run_command(
    kind: CommandKind,
    cfg: &ExperimentConfig,
    paths: &RunPaths,
    sample: &SampleRequest,
    rec: &mut Recorder,
    progress: &mut dyn FnMut(&str),
) -> Result<Value> {
    fs::create_dir_all(&paths.out)?;
    match kind {
        CommandKind::Datagen => datagen(cfg, paths, rec),
        CommandKind::Pretrain => pretrain(cfg, paths, rec),
        CommandKind::Prior => prior(cfg, paths, rec),
        CommandKind::Train => train(cfg, paths, rec),
        CommandKind::Sample => sample_faces(cfg, paths, sample, rec),
        CommandKind::Eval => evaluate(cfg, paths, rec),
        CommandKind::Ablate => ablate(cfg, paths, rec, progress),
    }
}

fn datagen(cfg: &ExperimentConfig, paths: &RunPaths, rec: &mut Recorder) -> Result<Value> {
    rec.seed("data", cfg.data.seed);
    let ds = build_dataset(&cfg.data, &paths.data)?;
    for r in &ds.manifest.records {
        rec.produce(&paths.data.join(&r.image));
        rec.produce(&paths.data.join(&r.audio));
    }
    rec.produce(&paths.data.join("manifest.json"));
    Ok(json!({
        "samples": ds.samples.len(),
        "gender_ratio": ds.manifest.gender_ratio,
    }))
}

fn pretrain(cfg: &ExperimentConfig, paths: &RunPaths, rec: &mut Recorder) -> Result<Value> {
    let ds = open_dataset(cfg, paths, rec)?;
    let train = ds.split(Split::Train);
    let val = ds.split(Split::Val);
    let test = ds.split(Split::Test);
    let init = rec.seed("stage1-init", seed_split(cfg.seed, "stage1-init", 0));
    let run = rec.seed("pretrain", seed_split(cfg.seed, "pretrain", 0));
    let mut model = Stage1::<f32>::new(cfg.encoder_config(), init)?;
    let outcome = run_pretraining(&mut model, &train, &val, &cfg.pretrain, RETRIEVAL_POOL, run)?;
    let hash = save_stage1(&paths.stage1, &model, cfg.pretrain.steps)?;
    rec.produce(&paths.stage1);

    let mut log = Vec::new();
    write_log(&mut log, &outcome.log)?;
    write_text(&paths.out.join("pretrain_log.csv"), &String::from_utf8_lossy(&log), rec)?;

    let heldout = evaluate_alignment(&model, &test, RETRIEVAL_POOL)?;
    let images: Vec<_> = test.iter().map(|s| &s.image).collect();
    let mae = autoencoder_mae(&model, &images)?;
    let summary = json!({
        "stage1_hash": hash,
        "val_retrieval": outcome.final_retrieval,
        "test_retrieval": heldout,
        "test_autoencoder_mae": mae,
        "temperature": model.temperature(),
    });
    write_json(&paths.out.join("stage1_metrics.json"), &summary, rec)?;
    Ok(summary)
}

fn prior(cfg: &ExperimentConfig, paths: &RunPaths, rec: &mut Recorder) -> Result<Value> {
    let model = open_stage1(cfg, paths, rec)?;
    let exclude = dataset_identities(paths, rec)?;
    rec.seed("prior-pool", cfg.data.seed);
    let pool = prior_pool(cfg, &exclude)?;
    let draw = rec.seed("prior", seed_split(cfg.seed, "prior", 0));
    let prior = compute_prior_from_pool(&model, &pool, cfg.prior.n, draw)?;
    save_prior(&paths.prior, &prior)?;
    rec.produce(&paths.prior);

    let conv_seed = rec.seed("prior-convergence", seed_split(cfg.seed, "prior-convergence", 0));
    let emb = pool.embed(&model)?;
    let rows = prior_convergence(
        &emb,
        &pool.genders,
        &cfg.prior.convergence_ns,
        cfg.prior.convergence_repetitions,
        conv_seed,
    )?;
    let mut csv = String::from("n1,n2,mean_l1\n");
    for r in &rows {
        writeln!(csv, "{},{},{:.8}", r.n1, r.n2, r.mean_l1).expect("string write");
    }
    write_text(&paths.out.join("prior_convergence.csv"), &csv, rec)?;
    Ok(json!({
        "prior_hash": prior.content_hash(),
        "n": prior.sample_count,
        "balance": prior.balance,
        "pool": pool.len(),
        "convergence": rows,
        "loglog_slope": loglog_slope(&rows),
    }))
}

fn train(cfg: &ExperimentConfig, paths: &RunPaths, rec: &mut Recorder) -> Result<Value> {
    let model = open_stage1(cfg, paths, rec)?;
    let prior = open_prior(paths, &model, rec)?;
    let ds = open_dataset(cfg, paths, rec)?;
    rec.seed("denoiser-init", seed_split(cfg.seed, "denoiser-init", 0));
    rec.seed("ldm", seed_split(cfg.seed, "ldm", 0));
    let stage1 = TrainedStage1 {
        model,
        prior,
        top1: f64::NAN,
    };
    let (den, provenance, outcome) = train_variant(
        &stage1,
        &ds.split(Split::Train),
        &cfg.denoiser_config(),
        &cfg.schedule(),
        &cfg.ldm,
        cfg.seed,
    )?;
    let hash = save_denoiser(&paths.denoiser, &den, &provenance)?;
    rec.produce(&paths.denoiser);
    let mut csv = String::from("step,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        writeln!(csv, "{i},{l:.8}").expect("string write");
    }
    write_text(&paths.out.join("ldm_losses.csv"), &csv, rec)?;
    let n = outcome.losses.len();
    Ok(json!({
        "denoiser_hash": hash,
        "parameters": den.num_params(),
        "first_loss": outcome.moving_average(cfg.ldm.log_every.min(n), cfg.ldm.log_every),
        "final_loss": outcome.moving_average(n, cfg.ldm.log_every),
    }))
}

fn sample_faces(cfg: &ExperimentConfig, paths: &RunPaths, req: &SampleRequest, rec: &mut Recorder) -> Result<Value> {
    let model = open_stage1(cfg, paths, rec)?;
    let prior = open_prior(paths, &model, rec)?;
    let (den, header) = load_denoiser::<f32>(&paths.denoiser)?;
    rec.consume(&paths.denoiser);
    let gen = Generator::new(&model, &prior, &den, &header.provenance)?;
    rec.seed("sampler", cfg.sampler.seed);

    let (names, specs, keys) = if req.speech.is_empty() {
        let ds = open_dataset(cfg, paths, rec)?;
        let test: Vec<_> = ds.split(Split::Test).into_iter().take(cfg.eval.contact_rows).cloned().collect();
        let names: Vec<String> = (0..test.len()).map(|i| format!("test_{i:05}")).collect();
        let keys: Vec<u64> = test.iter().map(|s| s.identity.id_seed).collect();
        (names, test.into_iter().map(|s| s.spec).collect::<Vec<_>>(), keys)
    } else {
        let mut specs = Vec::new();
        for p in &req.speech {
            let wave = io::read_wav(p)?;
            rec.consume(p);
            let spec = spectrogram(&wave, &cfg.data.stft)?;
            model.check_spectrogram(&spec)?;
            specs.push(spec);
        }
        let names = req
            .speech
            .iter()
            .map(|p| p.file_stem().map_or("clip".into(), |s| s.to_string_lossy().into_owned()))
            .collect();
        (names, specs, (0..req.speech.len() as u64).collect::<Vec<u64>>())
    };
    let spec_refs: Vec<_> = specs.iter().collect();
    let faces = gen.generate(&spec_refs, &keys, &cfg.sampler)?;
    let dir = paths.out.join("samples");
    fs::create_dir_all(&dir)?;
    let mut listing = Vec::new();
    for (c, (name, set)) in names.iter().zip(&faces).enumerate() {
        let mut files = Vec::new();
        for (k, face) in set.iter().enumerate() {
            let file = dir.join(format!("c{c:03}_{name}_s{k}.png"));
            io::write_png(&file, face)?;
            rec.produce(&file);
            files.push(format!("samples/{}", file.file_name().unwrap().to_string_lossy()));
        }
        listing.push(json!({ "condition": name, "key": keys[c], "files": files }));
    }
    let sheet = dir.join("sheet.png");
    io::write_contact_sheet(&sheet, &faces)?;
    rec.produce(&sheet);
    let summary = json!({
        "conditions": faces.len(),
        "samples_per_condition": cfg.sampler.n_samples,
        "beta_p": cfg.sampler.beta_p.unwrap_or(header.provenance.beta_p),
        "steps": cfg.sampler.steps.unwrap_or(header.provenance.schedule.steps),
        "samples": listing,
    });
    write_json(&dir.join("samples.json"), &summary, rec)?;
    Ok(summary)
}

fn evaluate(cfg: &ExperimentConfig, paths: &RunPaths, rec: &mut Recorder) -> Result<Value> {
    let model = open_stage1(cfg, paths, rec)?;
    let prior = open_prior(paths, &model, rec)?;
    let (den, header) = load_denoiser::<f32>(&paths.denoiser)?;
    rec.consume(&paths.denoiser);
    let gen = Generator::new(&model, &prior, &den, &header.provenance)?;
    let ds = open_dataset(cfg, paths, rec)?;
    let exclude: HashSet<u64> = ds.samples.iter().map(|s| s.identity.id_seed).collect();
    rec.seed("probe", cfg.eval.probe.seed);
    rec.seed("sampler", cfg.sampler.seed);
    let probe = train_probe(cfg, &exclude)?;

    let conditions: Vec<_> = ds.split(Split::Test).into_iter().take(cfg.eval.conditions).collect();
    let (metrics, set) = evaluate_generation(&gen, &conditions, &cfg.sampler, &probe, cfg.eval.diversity_conditions)?;
    let dir = paths.out.join("eval");
    fs::create_dir_all(&dir)?;
    io::write_contact_sheet(&dir.join("contact_sheet.png"), &set.sheet_rows(cfg.eval.contact_rows))?;
    rec.produce(&dir.join("contact_sheet.png"));

    let m = &metrics;
    let csv = format!(
        "# {COS_CONVENTION}\nl1,l2,cos,gender_pct,age_pct,diversity,conditions\n{:.6},{:.6},{:.6},{:.4},{:.4},{:.6},{}\n",
        m.distances.l1,
        m.distances.l2,
        m.distances.cos,
        m.attributes.gender_pct,
        m.attributes.age_pct,
        m.diversity,
        m.conditions
    );
    write_text(&dir.join("metrics.csv"), &csv, rec)?;
    let summary = json!({
        "convention": COS_CONVENTION,
        "metrics": metrics,
        "probe": probe.record,
        "beta_p": cfg.sampler.beta_p.unwrap_or(header.provenance.beta_p),
    });
    write_json(&dir.join("metrics.json"), &summary, rec)?;
    Ok(summary)
}

fn ablate(cfg: &ExperimentConfig, paths: &RunPaths, rec: &mut Recorder, progress: &mut dyn FnMut(&str)) -> Result<Value> {
    let ds = open_dataset(cfg, paths, rec)?;
    let exclude: HashSet<u64> = ds.samples.iter().map(|s| s.identity.id_seed).collect();
    rec.seed("probe", cfg.eval.probe.seed);
    rec.seed("prior-pool", cfg.data.seed);
    for &s in &cfg.ablation.seeds {
        rec.seed(&format!("run-{s}"), s);
    }
    let probe = train_probe(cfg, &exclude)?;
    let pool = prior_pool(cfg, &exclude)?;
    let setup = AblationSetup {
        data: &ds,
        encoder: cfg.encoder_config(),
        denoiser: cfg.denoiser_config(),
        schedule: cfg.schedule(),
        prior_pool: &pool,
        prior_n: cfg.prior.n,
        pretrain: cfg.pretrain.clone(),
        ldm: cfg.ldm.clone(),
        sampler: cfg.sampler.clone(),
        beta_p: cfg.ldm.beta_p,
        conditions: cfg.eval.conditions,
        diversity_conditions: cfg.eval.diversity_conditions,
        probe: &probe,
        max_seconds: cfg.ablation.max_seconds,
    };
    let report = ablation_run(&setup, &cfg.ablation.grid(), |m| progress(m))?;
    write_text(&paths.out.join("ablation.csv"), &report.to_csv(), rec)?;
    write_json(&paths.out.join("ablation.json"), &report, rec)?;
    Ok(json!({
        "complete": report.complete,
        "summary": report.summary,
    }))
}
