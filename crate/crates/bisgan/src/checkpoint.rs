//! Checkpoint container: `BISG` magic, a u16 version, a length-prefixed
//! JSON metadata block, then every parameter as little-endian f32.

use std::fs;
use std::path::Path;

use bisgan_core::models::{Discriminator, Generator};
use bisgan_core::params::ParamStore;
use bisgan_core::{DiscriminatorConfig, DomainMode, GeneratorConfig, ModelCheckpoint, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BISG";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NetworkEntry {
    name: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    step: u64,
    config_digest: String,
    mode: DomainMode,
    generator: GeneratorConfig,
    discriminator: DiscriminatorConfig,
    networks: Vec<NetworkEntry>,
    payload_sha256: String,
}

pub fn encode(cp: &ModelCheckpoint) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut networks = Vec::new();
    for (name, store) in cp.networks() {
        let mut tensors = Vec::new();
        for (tname, t) in store.iter() {
            tensors.push(TensorEntry {
                name: tname.to_string(),
                shape: t.shape().to_vec(),
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        networks.push(NetworkEntry {
            name: name.to_string(),
            tensors,
        });
    }
    let meta = Metadata {
        step: cp.step,
        config_digest: hex::encode(cp.config_digest),
        mode: cp.mode,
        generator: cp.generator.clone(),
        discriminator: cp.discriminator.clone(),
        networks,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let meta = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut out = Vec::with_capacity(10 + meta.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&payload);
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ModelCheckpoint> {
    let corrupt = |reason: String| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        return Err(corrupt("missing BISG header".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let meta_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let meta_end = 10usize
        .checked_add(meta_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("truncated metadata".into()))?;
    let meta: Metadata = serde_json::from_slice(&bytes[10..meta_end]).map_err(|e| corrupt(format!("metadata: {e}")))?;
    let payload = &bytes[meta_end..];
    let expected: usize = meta
        .networks
        .iter()
        .flat_map(|n| &n.tensors)
        .map(|t| t.shape.iter().product::<usize>() * 4)
        .sum();
    if payload.len() != expected {
        return Err(corrupt(format!("payload holds {} bytes, manifest needs {expected}", payload.len())));
    }
    if hex::encode(Sha256::digest(payload)) != meta.payload_sha256 {
        return Err(corrupt("payload checksum mismatch".into()));
    }
    let digest: [u8; 32] = hex::decode(&meta.config_digest)
        .ok()
        .and_then(|d| d.try_into().ok())
        .ok_or_else(|| corrupt("config digest is not 32 hex bytes".into()))?;

    let (_, gen_template) = Generator::new::<f32>(&meta.generator, 0).map_err(|e| corrupt(e.to_string()))?;
    let (_, disc_template) = Discriminator::new::<f32>(&meta.discriminator, 0).map_err(|e| corrupt(e.to_string()))?;
    let order = ["gen_ab", "gen_ba", "disc_a", "disc_b"];
    if meta.networks.len() != 4 || meta.networks.iter().zip(order).any(|(n, o)| n.name != o) {
        return Err(corrupt(format!("expected networks {order:?}")));
    }
    let mut offset = 0;
    let mut stores = Vec::with_capacity(4);
    for (i, net) in meta.networks.iter().enumerate() {
        let mut store = if i < 2 { gen_template.clone() } else { disc_template.clone() };
        if store.len() != net.tensors.len() {
            return Err(corrupt(format!("{}: {} tensors, architecture has {}", net.name, net.tensors.len(), store.len())));
        }
        let mut tensors = Vec::with_capacity(net.tensors.len());
        for (entry, (name, template)) in net.tensors.iter().zip(store.iter()) {
            if entry.name != name || entry.shape != template.shape() {
                return Err(corrupt(format!("{}: tensor {} {:?} does not match architecture", net.name, entry.name, entry.shape)));
            }
            let n: usize = entry.shape.iter().product();
            let data = payload[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += 4 * n;
            tensors.push(Tensor::from_vec(&entry.shape, data).map_err(|e| corrupt(e.to_string()))?);
        }
        store.load_tensors(tensors).map_err(|e| corrupt(e.to_string()))?;
        stores.push(store);
    }
    let mut it = stores.into_iter();
    let mut next = || -> ParamStore<f32> { it.next().unwrap() };
    Ok(ModelCheckpoint {
        generator: meta.generator,
        discriminator: meta.discriminator,
        mode: meta.mode,
        gen_ab: next(),
        gen_ba: next(),
        disc_a: next(),
        disc_b: next(),
        step: meta.step,
        config_digest: digest,
    })
}

pub fn save_checkpoint(cp: &ModelCheckpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(cp)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Loads and requires the stored digest to equal `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &[u8; 32]) -> Result<ModelCheckpoint> {
    let cp = load_checkpoint(path)?;
    if &cp.config_digest != expected {
        return Err(Error::ConfigMismatch {
            expected: hex::encode(expected),
            found: hex::encode(cp.config_digest),
        });
    }
    Ok(cp)
}
