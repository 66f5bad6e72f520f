use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    generate_identity, render_face, spectrogram, synth_speech, FaceImage, Identity, Spectrogram,
    StftConfig, Waveform, MIN_RESOLUTION,
};
use crate::error::{Error, Result};
use crate::io;
use crate::seed;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    pub resolution: usize,
    pub duration: f64,
    pub sample_rate: u32,
    pub stft: StftConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: 1000,
            val: 100,
            test: 100,
            seed: 0,
            resolution: 64,
            duration: 6.0,
            sample_rate: 16_000,
            stft: StftConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < MIN_RESOLUTION {
            return Err(Error::validation(
                "data.resolution",
                format!("must be at least {MIN_RESOLUTION}"),
            ));
        }
        if !(self.duration > 0.0) {
            return Err(Error::validation("data.duration", "must be positive"));
        }
        if self.sample_rate == 0 {
            return Err(Error::validation("data.sample_rate", "must be positive"));
        }
        self.stft.validate()?;
        if Waveform::expected_len(self.sample_rate, self.duration) < self.stft.window_length {
            return Err(Error::validation(
                "data.duration",
                "clip is shorter than one STFT window",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub split: Split,
    pub identity: Identity,
    pub image: String,
    pub audio: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub config: DataConfig,
    pub global_seed: u64,
    /// Fraction of gender-1 identities per split, in train/val/test order.
    pub gender_ratio: [f64; 3],
    pub records: Vec<ManifestRecord>,
}

/// One identity with both rendered modalities, quantised as on disk.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub identity: Identity,
    pub split: Split,
    pub image: FaceImage,
    pub wave: Waveform,
    pub spec: Spectrogram,
}

impl PairedSample {
    pub fn generate(identity: Identity, split: Split, cfg: &DataConfig) -> Result<Self> {
        let image = render_face(&identity, identity.face_noise_seed(), cfg.resolution)?.quantized();
        let wave = synth_speech(&identity, cfg.duration, cfg.sample_rate, identity.speech_noise_seed())?
            .quantized();
        let spec = spectrogram(&wave, &cfg.stft)?;
        Ok(Self {
            identity,
            split,
            image,
            wave,
            spec,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<PairedSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&PairedSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn config(&self) -> &DataConfig {
        &self.manifest.config
    }
}

fn split_sizes(cfg: &DataConfig) -> [(Split, usize); 3] {
    [(Split::Train, cfg.train), (Split::Val, cfg.val), (Split::Test, cfg.test)]
}

/// Gender-stratified assignment of derived identity seeds to splits.
fn assign_identities(cfg: &DataConfig) -> Vec<(Split, Identity)> {
    let mut out = Vec::with_capacity(cfg.train + cfg.val + cfg.test);
    let mut seen = HashSet::new();
    let mut candidate = 0u64;
    for (split, n) in split_sizes(cfg) {
        // floor(n/2) of gender 1, the rest gender 0
        let mut quota = [n - n / 2, n / 2];
        while quota[0] + quota[1] > 0 {
            let id_seed = seed::seed_split(cfg.seed, "identity", candidate);
            candidate += 1;
            if !seen.insert(id_seed) {
                continue;
            }
            let id = generate_identity(id_seed);
            let g = id.gender as usize;
            if quota[g] > 0 {
                quota[g] -= 1;
                out.push((split, id));
            }
        }
    }
    out
}

fn gender_ratio(assigned: &[(Split, Identity)]) -> [f64; 3] {
    let mut r = [0.0; 3];
    for (k, split) in Split::ALL.iter().enumerate() {
        let ids: Vec<_> = assigned.iter().filter(|(s, _)| s == split).collect();
        if !ids.is_empty() {
            r[k] = ids.iter().map(|(_, i)| i.gender as f64).sum::<f64>() / ids.len() as f64;
        }
    }
    r
}

fn record_paths(split: Split, index: usize) -> (String, String) {
    (
        format!("images/{}_{index:05}.png", split.name()),
        format!("audio/{}_{index:05}.wav", split.name()),
    )
}

fn manifest_for(cfg: &DataConfig, assigned: &[(Split, Identity)]) -> DatasetManifest {
    let mut counters = [0usize; 3];
    let records = assigned
        .iter()
        .map(|(split, id)| {
            let k = Split::ALL.iter().position(|s| s == split).unwrap();
            let (image, audio) = record_paths(*split, counters[k]);
            counters[k] += 1;
            ManifestRecord {
                split: *split,
                identity: *id,
                image,
                audio,
            }
        })
        .collect();
    DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        config: cfg.clone(),
        global_seed: cfg.seed,
        gender_ratio: gender_ratio(assigned),
        records,
    }
}

/// Builds the dataset in memory.
pub fn generate_dataset(cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let assigned = assign_identities(cfg);
    let samples = assigned
        .par_iter()
        .map(|(split, id)| PairedSample::generate(*id, *split, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        manifest: manifest_for(cfg, &assigned),
        samples,
    })
}

/// Builds the dataset and writes images, clips and `manifest.json` under
/// `out`.
pub fn build_dataset(cfg: &DataConfig, out: &Path) -> Result<Dataset> {
    let ds = generate_dataset(cfg)?;
    fs::create_dir_all(out.join("images"))?;
    fs::create_dir_all(out.join("audio"))?;
    ds.manifest
        .records
        .par_iter()
        .zip(ds.samples.par_iter())
        .try_for_each(|(rec, s)| -> Result<()> {
            io::write_png(&out.join(&rec.image), &s.image)?;
            io::write_wav(&out.join(&rec.audio), &s.wave)
        })?;
    let json = serde_json::to_string_pretty(&ds.manifest)?;
    fs::write(out.join("manifest.json"), json)?;
    Ok(ds)
}

/// Loads a dataset written by [`build_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::Input(format!(
            "manifest schema {} is not supported (expected {MANIFEST_SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    let cfg = manifest.config.clone();
    let samples = manifest
        .records
        .par_iter()
        .map(|rec| {
            let image = io::read_png(&dir.join(&rec.image))?;
            let wave = io::read_wav(&dir.join(&rec.audio))?;
            let spec = spectrogram(&wave, &cfg.stft)?;
            Ok(PairedSample {
                identity: rec.identity,
                split: rec.split,
                image,
                wave,
                spec,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig {
            train: 100,
            val: 20,
            test: 20,
            seed: 3,
            resolution: 16,
            duration: 0.05,
            ..DataConfig::default()
        }
    }

    #[test]
    fn splits_are_disjoint_and_balanced() {
        let cfg = small();
        let assigned = assign_identities(&cfg);
        let seeds: HashSet<u64> = assigned.iter().map(|(_, i)| i.id_seed).collect();
        assert_eq!(seeds.len(), 140);
        for r in gender_ratio(&assigned) {
            assert!((0.45..=0.55).contains(&r));
        }
        let big = DataConfig { train: 1000, ..cfg };
        let r = gender_ratio(&assign_identities(&big));
        assert!((0.45..=0.55).contains(&r[0]));
    }

    #[test]
    fn manifest_is_reproducible_and_pairs_regenerate() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DataConfig { train: 6, val: 2, test: 2, ..small() };
        let a = build_dataset(&cfg, &dir.path().join("a")).unwrap();
        build_dataset(&cfg, &dir.path().join("b")).unwrap();
        let ma = fs::read(dir.path().join("a/manifest.json")).unwrap();
        let mb = fs::read(dir.path().join("b/manifest.json")).unwrap();
        assert_eq!(ma, mb);

        let loaded = load_dataset(&dir.path().join("a")).unwrap();
        for (l, s) in loaded.samples.iter().zip(&a.samples) {
            assert_eq!(l.image, s.image);
            assert_eq!(l.wave.samples, s.wave.samples);
            assert_eq!(l.spec, s.spec);
            // pairing: both modalities regenerate from the recorded id_seed
            assert_eq!(generate_identity(l.identity.id_seed), l.identity);
            let again = PairedSample::generate(l.identity, l.split, &cfg).unwrap();
            assert_eq!(again.image, l.image);
            assert_eq!(again.wave.samples, l.wave.samples);
        }
    }

    #[test]
    fn unwritable_output_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let cfg = DataConfig { train: 2, val: 0, test: 0, ..small() };
        assert!(matches!(build_dataset(&cfg, &blocker), Err(Error::Io(_))));
    }
}
