//! Binary archives: magic, a length-prefixed JSON header and a raw payload.
//!
//! Every archive records the SHA-256 of its payload; parameter archives also
//! record the layout and content hashes of the parameter store they hold.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{EncoderConfig, Stage1};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"SCLDMAR1";

#[derive(Debug, Serialize, Deserialize)]
struct Envelope<H> {
    kind: String,
    payload_sha256: String,
    payload_len: u64,
    body: H,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_archive<H: Serialize>(path: &Path, kind: &str, body: &H, payload: &[u8]) -> Result<()> {
    let env = Envelope {
        kind: kind.to_string(),
        payload_sha256: sha256_hex(payload),
        payload_len: payload.len() as u64,
        body,
    };
    let header = serde_json::to_vec(&env)?;
    let mut bytes = Vec::with_capacity(16 + header.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(payload);
    write_atomic(path, &bytes)
}

pub fn read_archive<H: DeserializeOwned>(path: &Path, kind: &str) -> Result<(H, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let bad = |why: &str| Error::Input(format!("{} is not a valid {kind} archive: {why}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let env: Envelope<H> = serde_json::from_slice(header)?;
    if env.kind != kind {
        return Err(bad(&format!("holds a {} archive", env.kind)));
    }
    let payload = bytes[16 + hlen..].to_vec();
    if payload.len() as u64 != env.payload_len {
        return Err(bad("truncated payload"));
    }
    let found = sha256_hex(&payload);
    if found != env.payload_sha256 {
        return Err(Error::hash_mismatch(&format!("{} payload", path.display()), &env.payload_sha256, &found));
    }
    Ok((env.body, payload))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsHeader {
    pub dtype: String,
    pub layout_hash: String,
    pub content_hash: String,
    pub entries: Vec<ParamEntry>,
}

pub fn encode_params<T: Scalar>(store: &ParamStore<T>) -> (ParamsHeader, Vec<u8>) {
    let mut payload = Vec::with_capacity(store.num_scalars() * T::BYTES);
    let entries = store
        .iter()
        .map(|(_, p)| {
            for &x in p.value.data() {
                x.write_le(&mut payload);
            }
            ParamEntry {
                name: p.name.clone(),
                group: p.group.clone(),
                shape: p.value.shape().to_vec(),
            }
        })
        .collect();
    let header = ParamsHeader {
        dtype: T::DTYPE.to_string(),
        layout_hash: store.layout_hash(),
        content_hash: store.content_hash(),
        entries,
    };
    (header, payload)
}

fn read_values<S: Scalar, T: Scalar>(payload: &[u8], n: usize) -> Vec<T> {
    payload
        .chunks_exact(S::BYTES)
        .take(n)
        .map(|c| T::of(S::read_le(c).f64()))
        .collect()
}

/// Fills `store` from a payload written by [`encode_params`]. The store
/// layout must match the recorded layout.
pub fn decode_params_into<T: Scalar>(store: &mut ParamStore<T>, header: &ParamsHeader, payload: &[u8]) -> Result<()> {
    let layout = store.layout_hash();
    if layout != header.layout_hash {
        return Err(Error::hash_mismatch("parameter layout", &header.layout_hash, &layout));
    }
    let total: usize = header.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    let values: Vec<T> = match header.dtype.as_str() {
        "f32" => read_values::<f32, T>(payload, total),
        "f64" => read_values::<f64, T>(payload, total),
        other => return Err(Error::Input(format!("unsupported parameter dtype {other}"))),
    };
    if values.len() != total {
        return Err(Error::Input("parameter payload is shorter than its header".into()));
    }
    let mut offset = 0;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get_mut(id);
        let n = t.len();
        t.data_mut().copy_from_slice(&values[offset..offset + n]);
        offset += n;
    }
    if header.dtype == T::DTYPE {
        let found = store.content_hash();
        if found != header.content_hash {
            return Err(Error::hash_mismatch("parameter content", &header.content_hash, &found));
        }
    }
    Ok(())
}

pub const STAGE1_KIND: &str = "stage1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Header {
    pub architecture_hash: String,
    pub latent_dim: usize,
    pub resolution: usize,
    pub step: usize,
    pub config: EncoderConfig,
    pub params: ParamsHeader,
}

/// Writes the stage-1 checkpoint and returns its content hash.
pub fn save_stage1<T: Scalar>(path: &Path, model: &Stage1<T>, step: usize) -> Result<String> {
    let (params, payload) = encode_params(&model.params);
    let hash = params.content_hash.clone();
    let header = Stage1Header {
        architecture_hash: model.architecture_hash(),
        latent_dim: model.cfg.latent_dim,
        resolution: model.cfg.resolution,
        step,
        config: model.cfg.clone(),
        params,
    };
    write_archive(path, STAGE1_KIND, &header, &payload)?;
    Ok(hash)
}

pub fn load_stage1<T: Scalar>(path: &Path) -> Result<(Stage1<T>, Stage1Header)> {
    let (header, payload): (Stage1Header, _) = read_archive(path, STAGE1_KIND)?;
    let mut model = Stage1::<T>::new(header.config.clone(), 0)?;
    let arch = model.architecture_hash();
    if arch != header.architecture_hash {
        return Err(Error::hash_mismatch("stage-1 architecture", &header.architecture_hash, &arch));
    }
    decode_params_into(&mut model.params, &header.params, &payload)?;
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            latent_dim: 4,
            resolution: 16,
            face_widths: vec![2, 2],
            speech_widths: vec![2, 2],
            attention_after: 1,
            attention_reduction: 1,
            spec_bins: 9,
            spec_frames: 5,
        }
    }

    #[test]
    fn stage1_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.ckpt");
        let m = Stage1::<f32>::new(cfg(), 3).unwrap();
        let h = save_stage1(&p, &m, 12).unwrap();
        let (back, header) = load_stage1::<f32>(&p).unwrap();
        assert_eq!(back.params.content_hash(), h);
        assert_eq!(header.step, 12);
        let (as64, _) = load_stage1::<f64>(&p).unwrap();
        assert_eq!(as64.params.num_scalars(), m.params.num_scalars());
    }

    #[test]
    fn corruption_is_a_hash_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.ckpt");
        save_stage1(&p, &Stage1::<f32>::new(cfg(), 3).unwrap(), 0).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_stage1::<f32>(&p), Err(Error::HashMismatch { .. })));
    }

    #[test]
    fn layout_change_is_rejected() {
        let a = Stage1::<f32>::new(cfg(), 0).unwrap();
        let (h, payload) = encode_params(&a.params);
        let mut other = ParamStore::<f32>::new();
        other.add("x", "g", Tensor::zeros(&[3]));
        assert!(matches!(
            decode_params_into(&mut other, &h, &payload),
            Err(Error::HashMismatch { .. })
        ));
    }

    #[test]
    fn wrong_kind_and_magic_are_input_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        write_archive(&p, "prior", &serde_json::json!({}), b"xyz").unwrap();
        assert!(matches!(read_archive::<serde_json::Value>(&p, "stage1"), Err(Error::Input(_))));
        fs::write(&p, b"nonsense").unwrap();
        assert!(matches!(read_archive::<serde_json::Value>(&p, "prior"), Err(Error::Input(_))));
    }
}
