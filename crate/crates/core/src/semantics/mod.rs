//! Frozen relation text matrices and their binary container.
//!
//! Container layout, all integers little-endian `u32`:
//!
//! ```text
//! "ZRLE" version d_w n_relations
//! repeated n_relations times: relation_id L  L·d_w × f32
//! ```

mod align;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use align::AlignmentNet;

use crate::data::RelationId;
use crate::error::{Error, Result};
use crate::rng::{component_rng, component_seed, SplitMix64};

pub const ZRLE_MAGIC: &[u8; 4] = b"ZRLE";
pub const ZRLE_VERSION: u32 = 1;

/// Token-level embedding rows of one relation's text.
#[derive(Clone, Debug, PartialEq)]
pub struct TextMatrix {
    pub relation: RelationId,
    pub d_w: usize,
    /// `L·d_w` values, row-major; `L ≥ 1`.
    pub data: Vec<f32>,
}

impl TextMatrix {
    pub fn new(relation: RelationId, d_w: usize, data: Vec<f32>) -> Result<Self> {
        if d_w == 0 || data.is_empty() || data.len() % d_w != 0 {
            return Err(Error::Format(format!(
                "relation {relation}: {} values do not form rows of width {d_w}",
                data.len()
            )));
        }
        Ok(Self {
            relation,
            d_w,
            data,
        })
    }

    pub fn tokens(&self) -> usize {
        self.data.len() / self.d_w
    }

    pub fn row(&self, l: usize) -> &[f32] {
        &self.data[l * self.d_w..(l + 1) * self.d_w]
    }
}

/// Text matrices for every relation of a vocabulary, indexed by relation id.
#[derive(Clone, Debug, PartialEq)]
pub struct TextStore {
    d_w: usize,
    matrices: Vec<TextMatrix>,
}

impl TextStore {
    /// Requires exactly one matrix per relation in `0..n_relations`.
    pub fn new(d_w: usize, matrices: Vec<TextMatrix>, n_relations: usize) -> Result<Self> {
        let mut slots: Vec<Option<TextMatrix>> = vec![None; n_relations];
        for m in matrices {
            if m.d_w != d_w {
                return Err(Error::Format(format!(
                    "relation {} has width {}, expected {d_w}",
                    m.relation, m.d_w
                )));
            }
            match slots.get_mut(m.relation) {
                Some(slot @ None) => *slot = Some(m),
                Some(Some(_)) => {
                    return Err(Error::Format(format!(
                        "relation {} appears twice",
                        m.relation
                    )))
                }
                // entries beyond the vocabulary are ignored
                None => {}
            }
        }
        let missing: Vec<usize> = (0..n_relations).filter(|&r| slots[r].is_none()).collect();
        if !missing.is_empty() {
            return Err(Error::Coverage { missing });
        }
        Ok(Self {
            d_w,
            matrices: slots.into_iter().flatten().collect(),
        })
    }

    pub fn d_w(&self) -> usize {
        self.d_w
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn get(&self, r: RelationId) -> &TextMatrix {
        &self.matrices[r]
    }

    pub fn matrices(&self) -> &[TextMatrix] {
        &self.matrices
    }

    /// SHA-256 of every stored value, in relation order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for m in &self.matrices {
            h.update((m.relation as u64).to_le_bytes());
            h.update((m.tokens() as u64).to_le_bytes());
            for v in &m.data {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

pub fn encode_zrle(d_w: usize, matrices: &[TextMatrix]) -> Result<Vec<u8>> {
    let u32_of = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds u32")))
    };
    let total: usize = matrices.iter().map(|m| 8 + 4 * m.data.len()).sum();
    let mut out = Vec::with_capacity(16 + total);
    out.extend_from_slice(ZRLE_MAGIC);
    out.extend_from_slice(&ZRLE_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(d_w, "d_w")?.to_le_bytes());
    out.extend_from_slice(&u32_of(matrices.len(), "relation count")?.to_le_bytes());
    for m in matrices {
        if m.d_w != d_w {
            return Err(Error::Format(format!(
                "relation {} has width {}, expected {d_w}",
                m.relation, m.d_w
            )));
        }
        out.extend_from_slice(&u32_of(m.relation, "relation id")?.to_le_bytes());
        out.extend_from_slice(&u32_of(m.tokens(), "token count")?.to_le_bytes());
        for v in &m.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::Format(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a container; returns its width and matrices in file order.
pub fn decode_zrle(bytes: &[u8]) -> Result<(usize, Vec<TextMatrix>)> {
    let mut rd = Reader { bytes, pos: 0 };
    if rd.take(4, "magic")? != ZRLE_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = rd.u32("version")?;
    if version != ZRLE_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let d_w = rd.u32("d_w")? as usize;
    let n = rd.u32("relation count")? as usize;
    if d_w == 0 {
        return Err(Error::Format("zero embedding width".into()));
    }
    let mut out = Vec::with_capacity(n.min(bytes.len() / 8));
    for _ in 0..n {
        let relation = rd.u32("relation id")? as usize;
        let l = rd.u32("token count")? as usize;
        if l == 0 {
            return Err(Error::Format(format!("relation {relation} has no tokens")));
        }
        let count = l
            .checked_mul(d_w)
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::Format("matrix size overflows".into()))?;
        let raw = rd.take(count, "matrix values")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push(TextMatrix {
            relation,
            d_w,
            data,
        });
    }
    if rd.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - rd.pos
        )));
    }
    Ok((d_w, out))
}

/// Reads a container and checks coverage of `0..n_relations` and, when
/// given, the expected width.
pub fn load_text_matrices(
    path: &Path,
    n_relations: usize,
    expected_d_w: Option<usize>,
) -> Result<TextStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (d_w, matrices) = decode_zrle(&bytes)?;
    if let Some(want) = expected_d_w.filter(|&w| w != d_w) {
        return Err(Error::Format(format!(
            "width {d_w} does not match expected {want}"
        )));
    }
    TextStore::new(d_w, matrices, n_relations)
}

pub fn save_text_matrices(path: &Path, store: &TextStore) -> Result<()> {
    let bytes = encode_zrle(store.d_w(), store.matrices())?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Sidecar entry describing the text behind one matrix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextRecord {
    pub text: String,
    pub erd: String,
}

pub type Sidecar = BTreeMap<String, TextRecord>;

fn normal(rng: &mut SplitMix64) -> f32 {
    let v: f64 = StandardNormal.sample(rng);
    v as f32
}

/// Deterministic stand-in encoder: one standard-normal row per whitespace
/// token, seeded by the token and `seed`, so equal tokens share rows.
pub fn mock_encode(relation: RelationId, text: &str, d_w: usize, seed: u64) -> Result<TextMatrix> {
    let mut data = Vec::new();
    for token in text.split_whitespace() {
        let mut rng = SplitMix64::seed_from_u64(component_seed(seed, token));
        data.extend((0..d_w).map(|_| normal(&mut rng)));
    }
    if data.is_empty() {
        return Err(Error::Config(format!("relation {relation} has empty text")));
    }
    TextMatrix::new(relation, d_w, data)
}

/// Random frozen matrices with the same token counts as `like`; the control
/// that removes all textual information.
pub fn random_frozen(like: &TextStore, seed: u64) -> TextStore {
    let matrices = like
        .matrices()
        .iter()
        .map(|m| {
            let mut rng = component_rng(seed, &format!("random_text.{}", m.relation));
            let data = (0..m.data.len()).map(|_| normal(&mut rng)).collect();
            TextMatrix {
                relation: m.relation,
                d_w: m.d_w,
                data,
            }
        })
        .collect();
    TextStore {
        d_w: like.d_w,
        matrices,
    }
}
