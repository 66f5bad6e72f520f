//! Command-line front end: argument parsing, run directories, manifests and
//! exit codes.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use scldm::config::{config_keys, resolve_config, Profile, ResolvedConfig};
use scldm::manifest::{Outcome, Recorder, RunManifest, Status, Timing, CODE_VERSION, MANIFEST_SCHEMA_VERSION};
use scldm::pipeline::{run_command, CommandKind, RunPaths, SampleRequest};
use scldm::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Environment variable naming the default root for run directories.
pub const OUTPUT_ROOT_ENV: &str = "SCLDM_OUTPUT_ROOT";

const OVERRIDE_HELP: &str = "\
Any configuration key may be overridden as `--key value` or `--key=value`,
using dotted paths (`--ldm.beta_p 0.1`, `--eval.probe.steps 500`) or the
aliases beta_p, d, T, N and resolution. Values are parsed as JSON and fall
back to plain strings (`--diffusion.mode paper_literal`).";

#[derive(Debug, Parser)]
#[command(name = "scldm", version, about = "Speech-conditioned face generation experiments", after_help = OVERRIDE_HELP, arg_required_else_help = true)]
pub struct Cli {
    /// Built-in defaults to start from.
    #[arg(long, global = true, default_value = "default", value_parser = parse_profile)]
    pub profile: Profile,
    /// JSON configuration file layered over the profile.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory; defaults to `<root>/<timestamp>-seed<seed>`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dataset directory; defaults to `<out>/data`.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// Stage-1 checkpoint; defaults to `<out>/stage1.ckpt`.
    #[arg(long, global = true)]
    pub stage1_ckpt: Option<PathBuf>,
    /// Face prior; defaults to `<out>/prior.bin`.
    #[arg(long, global = true)]
    pub prior_file: Option<PathBuf>,
    /// Denoiser checkpoint; defaults to `<out>/denoiser.ckpt`.
    #[arg(long, global = true)]
    pub denoiser_ckpt: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic paired face/speech dataset.
    Datagen,
    /// Train the speech and face encoders and the face decoder.
    Pretrain,
    /// Compute the face prior and its convergence table.
    Prior,
    /// Train the latent denoiser.
    Train,
    /// Generate faces for speech clips.
    Sample {
        /// WAV clip to condition on; repeatable. Defaults to test clips.
        #[arg(long)]
        speech: Vec<PathBuf>,
    },
    /// Score generated faces with the attribute probe.
    Eval,
    /// Run the component and prior-weight ablations.
    Ablate,
}

impl Command {
    pub fn kind(&self) -> CommandKind {
        match self {
            Command::Datagen => CommandKind::Datagen,
            Command::Pretrain => CommandKind::Pretrain,
            Command::Prior => CommandKind::Prior,
            Command::Train => CommandKind::Train,
            Command::Sample { .. } => CommandKind::Sample,
            Command::Eval => CommandKind::Eval,
            Command::Ablate => CommandKind::Ablate,
        }
    }
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Separates `--key value` configuration overrides from the arguments clap
/// understands. A flag is an override when its name is a configuration key.
pub fn split_overrides(args: &[String], keys: &BTreeSet<String>) -> Result<(Vec<String>, Vec<(String, String)>), String> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a.clone());
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (flag, None),
        };
        if !keys.contains(name) {
            rest.push(a.clone());
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().cloned().ok_or_else(|| format!("--{name} needs a value"))?,
        };
        overrides.push((name.to_string(), value));
    }
    Ok((rest, overrides))
}

fn default_run_dir(seed: u64) -> PathBuf {
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    root.join(format!("{stamp}-seed{seed}"))
}

fn run_paths(cli: &Cli, seed: u64) -> RunPaths {
    let out = cli.out.clone().unwrap_or_else(|| default_run_dir(seed));
    let mut p = RunPaths::in_dir(&out);
    if let Some(d) = &cli.data_dir {
        p.data = d.clone();
    }
    if let Some(d) = &cli.stage1_ckpt {
        p.stage1 = d.clone();
    }
    if let Some(d) = &cli.prior_file {
        p.prior = d.clone();
    }
    if let Some(d) = &cli.denoiser_ckpt {
        p.denoiser = d.clone();
    }
    p
}

/// Parses `argv` (without the program name), runs the command and returns
/// the process exit code.
pub fn dispatch(argv: &[String]) -> i32 {
    let (rest, overrides) = match split_overrides(argv, &config_keys()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(std::iter::once("scldm".to_string()).chain(rest)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let resolved = match resolve_config(cli.profile, cli.config.as_deref(), &overrides) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    if resolved.config.workers > 0 {
        // fails only if a pool already exists, which then stays in use
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(resolved.config.workers)
            .build_global();
    }
    let paths = run_paths(&cli, resolved.config.seed);
    match execute(&cli.command, &resolved, &paths) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn execute(command: &Command, resolved: &ResolvedConfig, paths: &RunPaths) -> scldm::Result<()> {
    let kind = command.kind();
    let name = kind.name();
    let sample = match command {
        Command::Sample { speech } => SampleRequest { speech: speech.clone() },
        _ => SampleRequest::default(),
    };
    std::fs::create_dir_all(&paths.out)?;
    eprintln!("{name}: writing to {}", paths.out.display());
    let started = SystemTime::now();
    let clock = Instant::now();
    let mut rec = Recorder::default();
    let result = run_command(kind, &resolved.config, paths, &sample, &mut rec, &mut |m| eprintln!("{name}: {m}"));

    let (status, message, summary) = match &result {
        Ok(v) => (Status::Ok, None, v.clone()),
        Err(e) => (Status::Error, Some(e.to_string()), serde_json::Value::Null),
    };
    let manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        command: name.to_string(),
        code_version: CODE_VERSION.to_string(),
        profile: resolved.profile,
        config: resolved.config.clone(),
        sources: resolved.sources.clone(),
        global_seed: resolved.config.seed,
        derived_seeds: rec.seeds.clone(),
        consumed: Recorder::records(&paths.out, &rec.consumed)?,
        produced: Recorder::records(&paths.out, &rec.produced)?,
        timing_file: RunManifest::timing_file_name(name),
        outcome: Outcome {
            status,
            message,
            summary,
        },
    };
    manifest.write(&paths.out)?;
    Timing {
        command: name.to_string(),
        started_unix_seconds: started.duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64()),
        elapsed_seconds: clock.elapsed().as_secs_f64(),
    }
    .write(&paths.out)?;
    result?;
    manifest.verify(&paths.out)?;
    eprintln!("{name}: done in {:.1}s", clock.elapsed().as_secs_f64());
    Ok(())
}

/// Reads the manifest a command left in `dir`.
pub fn read_manifest(dir: &Path, command: &str) -> scldm::Result<RunManifest> {
    RunManifest::read(&dir.join(RunManifest::file_name(command)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_are_split_from_cli_flags() {
        let keys = config_keys();
        let args = strings(&["--profile", "smoke", "train", "--ldm.beta_p", "0.1", "--out", "x", "--seed=4", "--T", "50"]);
        let (rest, over) = split_overrides(&args, &keys).unwrap();
        assert_eq!(rest, strings(&["--profile", "smoke", "train", "--out", "x"]));
        assert_eq!(
            over,
            vec![
                ("ldm.beta_p".to_string(), "0.1".to_string()),
                ("seed".to_string(), "4".to_string()),
                ("T".to_string(), "50".to_string())
            ]
        );
    }

    #[test]
    fn dangling_override_is_a_usage_error() {
        assert!(split_overrides(&strings(&["eval", "--beta_p"]), &config_keys()).is_err());
    }

    #[test]
    fn negative_values_are_taken_as_values() {
        let (_, over) = split_overrides(&strings(&["train", "--beta_p", "-1"]), &config_keys()).unwrap();
        assert_eq!(over[0].1, "-1");
    }
}
