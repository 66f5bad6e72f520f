use std::path::Path;
use std::process::{Command, Output};

use scldm::checkpoint::save_stage1;
use scldm::config::ExperimentConfig;
use scldm::encoders::Stage1;
use scldm::faceprior::{prior_from_embeddings, save_prior};
use scldm::manifest::{RunManifest, Status};
use scldm::Tensor;

fn scldm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scldm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let o = scldm(&[]);
    assert_eq!(o.status.code(), Some(2));
    let text = format!("{}{}", stderr(&o), String::from_utf8_lossy(&o.stdout));
    assert!(text.contains("Usage"), "{text}");
}

#[test]
fn unknown_command_is_a_usage_error() {
    let o = scldm(&["transmogrify"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_exits_0() {
    let o = scldm(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("ablate"));
}

#[test]
fn invalid_override_names_key_and_constraint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = scldm(&["datagen", "--out", out, "--beta_p", "-1"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("ldm.beta_p") && e.contains(">= 0"), "{e}");
    let o = scldm(&["datagen", "--out", out, "--ldm.no_such_key", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

fn write_smoke_stage1(path: &Path, init: u64) -> Stage1<f32> {
    let m = Stage1::<f32>::new(ExperimentConfig::smoke().encoder_config(), init).unwrap();
    save_stage1(path, &m, 0).unwrap();
    m
}

#[test]
fn prior_with_corrupted_checkpoint_exits_1_with_hash_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("stage1.ckpt");
    write_smoke_stage1(&ckpt, 0);
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x5a;
    std::fs::write(&ckpt, bytes).unwrap();

    let o = scldm(&["--profile", "smoke", "prior", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("hash mismatch"), "{}", stderr(&o));
    let m = RunManifest::read(&dir.path().join("manifest_prior.json")).unwrap();
    assert_eq!(m.outcome.status, Status::Error);
    assert!(m.produced.is_empty());
}

#[test]
fn prior_from_another_encoder_is_refused_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_smoke_stage1(&dir.path().join("other.ckpt"), 1);
    write_smoke_stage1(&dir.path().join("stage1.ckpt"), 2);
    let d = a.cfg.latent_dim;
    let prior = prior_from_embeddings(&Tensor::<f64>::ones(&[2, d]), &[0, 1], &a.params.content_hash()).unwrap();
    save_prior(&dir.path().join("prior.bin"), &prior).unwrap();

    let o = scldm(&["--profile", "smoke", "train", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("hash mismatch"), "{e}");
    assert!(!dir.path().join("denoiser.ckpt").exists());
}

#[test]
fn datagen_manifest_is_complete_and_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = |out: &str| {
        vec![
            "--profile".to_string(),
            "smoke".into(),
            "datagen".into(),
            "--out".into(),
            out.to_string(),
            "--data.train".into(),
            "6".into(),
            "--data.val".into(),
            "2".into(),
            "--data.test".into(),
            "2".into(),
            "--pretrain.batch_size=4".into(),
            "--eval.conditions".into(),
            "2".into(),
            "--eval.diversity_conditions".into(),
            "2".into(),
        ]
    };
    for dir in [&a, &b] {
        let argv = args(dir.path().to_str().unwrap());
        let o = scldm(&argv.iter().map(String::as_str).collect::<Vec<_>>());
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let ma = std::fs::read(a.path().join("manifest_datagen.json")).unwrap();
    let mb = std::fs::read(b.path().join("manifest_datagen.json")).unwrap();
    assert_eq!(ma, mb);

    let m = RunManifest::read(&a.path().join("manifest_datagen.json")).unwrap();
    m.verify(a.path()).unwrap();
    assert_eq!(m.outcome.status, Status::Ok);
    assert_eq!(m.config.data.train, 6);
    assert_eq!(m.sources["data.train"], scldm::config::ValueSource::Override);
    assert_eq!(m.sources["model.latent_dim"], scldm::config::ValueSource::Profile);
    // 10 images, 10 clips and the dataset manifest
    assert_eq!(m.produced.len(), 21);
    assert!(a.path().join("timing_datagen.json").exists());
}

#[test]
fn default_run_directory_uses_the_output_root() {
    let root = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_scldm"))
        .args(["--profile", "smoke", "datagen", "--seed", "7", "--data.train", "4", "--data.val", "0"])
        .args(["--data.test", "2", "--pretrain.batch_size", "2", "--eval.conditions", "2"])
        .args(["--eval.diversity_conditions", "2"])
        .env(scldm_cli::OUTPUT_ROOT_ENV, root.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let dirs: Vec<_> = std::fs::read_dir(root.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(dirs.len(), 1);
    assert!(dirs[0].to_string_lossy().ends_with("-seed7"));
}
