//! Checkpoint container, integers little-endian:
//!
//! ```text
//! "ZRCK" version:u32 header_len:u32 header(JSON)
//! parameter values as f32, in header order
//! text matrices as an embedded ZRLE container
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::semantics::{decode_zrle, encode_zrle, TextStore};

use super::config::TrainConfig;
use super::model::Model;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ZRCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: TrainConfig,
    pub dataset_fingerprint: String,
    pub n_entities: usize,
    pub n_base: usize,
    pub params: Vec<ParamEntry>,
    pub texts_len: usize,
}

pub fn encode_checkpoint(model: &Model, dataset_fingerprint: &str) -> Result<Vec<u8>> {
    let texts = encode_zrle(model.texts().d_w(), model.texts().matrices())?;
    let header = CheckpointHeader {
        config: model.cfg.clone(),
        dataset_fingerprint: dataset_fingerprint.to_owned(),
        n_entities: model.n_entities(),
        n_base: model.n_base(),
        params: model
            .params
            .ids()
            .map(|id| ParamEntry {
                name: model.params.name(id).to_owned(),
                shape: model.params.value(id).shape().to_vec(),
            })
            .collect(),
        texts_len: texts.len(),
    };
    let header = serde_json::to_vec(&header)?;
    let header_len =
        u32::try_from(header.len()).map_err(|_| Error::Format("header too large".into()))?;
    let mut out =
        Vec::with_capacity(12 + header.len() + 4 * model.params.num_elements() + texts.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    for id in model.params.ids() {
        for v in model.params.value(id).data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&texts);
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format(format!("checkpoint truncated in {what}")))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

fn u32_at(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32> {
    let b = take(bytes, pos, 4, what)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// Rebuilds the model exactly as saved.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, CheckpointHeader)> {
    let mut pos = 0;
    if take(bytes, &mut pos, 4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint".into()));
    }
    let version = u32_at(bytes, &mut pos, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let header_len = u32_at(bytes, &mut pos, "header length")? as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(take(bytes, &mut pos, header_len, "header")?)?;

    let mut values = Vec::with_capacity(header.params.len());
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        let raw = take(bytes, &mut pos, n * 4, &p.name)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        values.push(Tensor::new(&p.shape, data)?);
    }
    let blob = take(bytes, &mut pos, header.texts_len, "text matrices")?;
    if pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - pos
        )));
    }
    let (d_w, matrices) = decode_zrle(blob)?;
    let texts = TextStore::new(d_w, matrices, 2 * header.n_base)?;
    let mut model = Model::new(
        header.config.clone(),
        header.n_entities,
        header.n_base,
        texts,
    )?;
    if model.params.len() != header.params.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} parameters, model has {}",
            header.params.len(),
            model.params.len()
        )));
    }
    for (p, value) in header.params.iter().zip(values) {
        let id = model
            .params
            .id(&p.name)
            .ok_or_else(|| Error::Format(format!("unknown parameter `{}`", p.name)))?;
        if model.params.value(id).shape() != value.shape() {
            return Err(Error::Format(format!(
                "parameter `{}` has shape {:?}",
                p.name,
                value.shape()
            )));
        }
        *model.params.value_mut(id) = value;
    }
    Ok((model, header))
}

pub fn save_checkpoint(path: &Path, model: &Model, dataset_fingerprint: &str) -> Result<()> {
    let bytes = encode_checkpoint(model, dataset_fingerprint)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantics::mock_encode;

    fn model(cfg: TrainConfig) -> Model {
        let ms = (0..4)
            .map(|r| mock_encode(r, &format!("rel {r}"), 3, 2).unwrap())
            .collect();
        Model::new(cfg, 5, 2, TextStore::new(3, ms, 4).unwrap()).unwrap()
    }

    #[test]
    fn round_trip_restores_every_value() {
        let mut m = model(TrainConfig {
            dim: 4,
            gamma_mode: super::super::GammaMode::Learnable,
            ..TrainConfig::default()
        });
        for id in m.params.ids().collect::<Vec<_>>() {
            for (i, v) in m.params.value_mut(id).data_mut().iter_mut().enumerate() {
                *v += i as f32 * 0.01;
            }
        }
        let bytes = encode_checkpoint(&m, "abc").unwrap();
        let (back, header) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(header.dataset_fingerprint, "abc");
        assert_eq!(back.cfg, m.cfg);
        assert_eq!(back.texts(), m.texts());
        for id in m.params.ids() {
            let twin = back.params.id(m.params.name(id)).unwrap();
            assert_eq!(back.params.value(twin), m.params.value(id));
        }
        assert_eq!(encode_checkpoint(&back, "abc").unwrap(), bytes);
    }

    #[test]
    fn damaged_containers_are_format_errors() {
        let bytes = encode_checkpoint(
            &model(TrainConfig {
                dim: 3,
                ..TrainConfig::default()
            }),
            "x",
        )
        .unwrap();
        for cut in [0, 5, 11, 40, bytes.len() - 1] {
            assert!(decode_checkpoint(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'Q';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_checkpoint(&long), Err(Error::Format(_))));
    }
}
