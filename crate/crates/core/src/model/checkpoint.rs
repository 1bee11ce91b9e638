//! `XMLA` checkpoint files: magic, `u32` version, `u64` metadata length,
//! JSON metadata, then `f32` payloads in directory order (all little-endian).

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Block, LmModel, ModelConfig};
use crate::attention::{AttentionWeights, LayerKind, LayerNormParams, MhaWeights, MlaWeights};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XMLA";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    config: ModelConfig,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the payload section.
    offset: u64,
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub(crate) fn write_atomic(path: &Path, write: impl FnOnce(&mut BufWriter<&File>) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let file = File::create(&tmp)?;
        {
            let mut w = BufWriter::new(&file);
            write(&mut w)?;
            w.flush()?;
        }
        file.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

impl LmModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.check()?;
        let named = self.named();
        if self.blocks.iter().any(|b| matches!(b.attn, AttentionWeights::MlaAbsorbed(_))) {
            return Err(Error::Unsupported("absorbed layers are inference-only and not saved".into()));
        }
        let mut offset = 0u64;
        let tensors = named
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.numel() as u64;
                e
            })
            .collect();
        let meta = serde_json::to_vec(&Metadata {
            config: self.config.clone(),
            tensors,
        })?;
        write_atomic(path.as_ref(), |w| {
            w.write_all(CHECKPOINT_MAGIC)?;
            w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
            w.write_all(&(meta.len() as u64).to_le_bytes())?;
            w.write_all(&meta)?;
            for (_, t) in &named {
                for &x in t.data() {
                    w.write_all(&(x as f32).to_le_bytes())?;
                }
            }
            Ok(())
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<LmModel> {
        let mut bytes = Vec::new();
        File::open(path.as_ref())?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<LmModel> {
        let fail = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fail("missing XMLA magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let meta_end = 16usize
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fail("truncated metadata"))?;
        let meta: Metadata = serde_json::from_slice(&bytes[16..meta_end])?;
        let payload = &bytes[meta_end..];

        let mut model = skeleton(meta.config)?;
        let mut slots = model.named_mut();
        if slots.len() != meta.tensors.len() {
            return Err(Error::Format(format!(
                "directory lists {} tensors, config implies {}",
                meta.tensors.len(),
                slots.len()
            )));
        }
        let mut expected_offset = 0u64;
        for (entry, (name, slot)) in meta.tensors.iter().zip(slots.iter_mut()) {
            if &entry.name != name || entry.shape != slot.shape() || entry.offset != expected_offset {
                return Err(Error::Format(format!("unexpected directory entry {}", entry.name)));
            }
            let start = entry.offset as usize;
            let end = start + 4 * slot.numel();
            let raw = payload.get(start..end).ok_or_else(|| fail("truncated payload"))?;
            for (dst, chunk) in slot.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            }
            expected_offset = end as u64;
        }
        if expected_offset as usize != payload.len() {
            return Err(fail("trailing bytes after payload"));
        }
        drop(slots);
        model.check()?;
        Ok(model)
    }
}

/// Zero-filled model with the shapes `config` implies.
fn skeleton(config: ModelConfig) -> Result<LmModel> {
    config.validate()?;
    let g = config.geometry;
    let d = g.d;
    let z = |shape: &[usize]| Tensor::zeros(shape);
    let blocks = (0..config.n_layers)
        .map(|i| {
            let lg = config.layer_geometry(i);
            let attn = match config.layer_kinds[i] {
                LayerKind::Attention => AttentionWeights::Mha(MhaWeights {
                    w_q: z(&[d, lg.n_h * lg.d_h]),
                    w_k: z(&[d, lg.n_kv * lg.d_h]),
                    w_v: z(&[d, lg.n_kv * lg.d_h]),
                    w_o: z(&[lg.n_h * lg.d_h, d]),
                }),
                LayerKind::Mla { r_q, r_kv } => {
                    let ln = |w| config.mla_layer_norm.then(|| LayerNormParams::identity(w));
                    AttentionWeights::Mla(MlaWeights {
                        w_dq: z(&[d, r_q]),
                        w_uq: z(&[r_q, lg.n_h * lg.d_qk]),
                        w_qr: z(&[r_q, lg.n_h * lg.d_r]),
                        w_dkv: z(&[d, r_kv]),
                        w_uk: z(&[r_kv, lg.n_h * lg.d_qk]),
                        w_uv: z(&[r_kv, lg.n_h * lg.d_h]),
                        w_kr: z(&[d, lg.d_r]),
                        w_o: z(&[lg.n_h * lg.d_h, d]),
                        ln_q: ln(r_q),
                        ln_kv: ln(r_kv),
                    })
                }
            };
            Block {
                attn_norm: z(&[d]),
                attn,
                mlp_norm: z(&[d]),
                w_gate: z(&[d, config.mlp_hidden]),
                w_up: z(&[d, config.mlp_hidden]),
                w_down: z(&[config.mlp_hidden, d]),
            }
        })
        .collect();
    Ok(LmModel {
        embed: z(&[config.vocab_size, d]),
        blocks,
        final_norm: z(&[d]),
        head: (!config.tie_embeddings).then(|| z(&[d, config.vocab_size])),
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionGeometry;
    use crate::upcycle::RankSpec;

    fn model() -> LmModel {
        let g = AttentionGeometry {
            d: 16,
            n_h: 2,
            n_kv: 2,
            d_h: 8,
            d_qk: 4,
            d_r: 4,
            r_q: 8,
            r_kv: 8,
        };
        let mut c = ModelConfig::attention_only(2, g, 20);
        c.tie_embeddings = false;
        let m = LmModel::new(c, 1).unwrap();
        let (u, _) = m
            .upcycle(&RankSpec::Fixed { r_q: 8, r_kv: 6 }, &"1".parse().unwrap(), true)
            .unwrap();
        u
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.xmla");
        let mut m = model();
        m.round_to_f32();
        m.save(&path).unwrap();
        let back = LmModel::load(&path).unwrap();
        assert_eq!(back, m);
        let p2 = dir.path().join("m2.xmla");
        back.save(&p2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(&fs::read(&path).unwrap()[..4], b"XMLA");
        // no temp files left behind
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 2);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.xmla");
        model().save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(matches!(LmModel::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        assert!(matches!(LmModel::from_bytes(b"NOPE0000000000000000"), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(LmModel::from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn failed_write_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("no/such/dir/m.xmla");
        assert!(model().save(&missing).is_err());
        let mut config = model().config;
        config.layer_kinds = vec![LayerKind::Attention; 2];
        config.mla_layer_norm = false;
        let plain = LmModel::new(config, 2).unwrap();
        let (mla, _) = plain
            .upcycle(&RankSpec::Fixed { r_q: 8, r_kv: 6 }, &"0".parse().unwrap(), false)
            .unwrap();
        let absorbed = mla.absorbed().unwrap();
        assert!(matches!(absorbed.save(dir.path().join("a.xmla")), Err(Error::Unsupported(_))));
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
