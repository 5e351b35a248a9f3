//! Text vectors for attribute names.
//!
//! A table file maps tokens to precomputed sentence-embedding vectors. Tokens
//! missing from the table (or every token, when no file is given) get a
//! deterministic pseudo-random unit vector derived from the token bytes.

use std::collections::HashMap;

use crate::error::{data_err, CoreError, Result};

/// Lowercased and trimmed; `None` for a token that is empty afterwards.
pub fn canonical_token(token: &str) -> Option<String> {
    let t = token.trim().to_lowercase();
    (!t.is_empty()).then_some(t)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct SplitMix64(u64);

impl SplitMix64 {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
}

/// Unit vector seeded by FNV-1a-64 of the canonical token and drawn from a
/// splitmix64 stream, each coordinate `(u >> 11) * 2^-53` mapped to [-1, 1].
/// `None` when the canonical token is empty.
pub fn fallback_embedding(token: &str, d_text: usize) -> Option<Vec<f32>> {
    let token = canonical_token(token)?;
    let mut rng = SplitMix64(fnv1a64(token.as_bytes()));
    let raw: Vec<f64> = (0..d_text).map(|_| (rng.next() >> 11) as f64 * 2f64.powi(-53) * 2.0 - 1.0).collect();
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    Some(raw.iter().map(|x| (x / norm) as f32).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    File,
    Fallback,
}

/// Result of looking up one attribute value. NULL and MASK are resolved to
/// learned vectors by the event encoder, not here.
#[derive(Clone, Debug, PartialEq)]
pub enum TextEmbedding {
    Vector(Vec<f32>, Provenance),
    Null,
    Mask,
}

/// Tokens a table file may not define.
pub const RESERVED_TOKENS: [&str; 2] = ["mask", "null"];

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeEmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f32>>,
}

impl AttributeEmbeddingTable {
    /// A table with no stored rows: every token takes the fallback path.
    pub fn fallback(dim: usize) -> Self {
        Self { dim, vectors: HashMap::new() }
    }

    /// `token<TAB>f1<TAB>...<TAB>fd`, one row per token.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut dim = None;
        let mut vectors = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i as u64 + 1;
            let err = |msg: String| CoreError::Parse { line: line_no, msg };
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let raw = fields.next().unwrap_or_default();
            let token = canonical_token(raw).ok_or_else(|| err("empty token".into()))?;
            if RESERVED_TOKENS.contains(&token.as_str()) {
                return Err(err(format!("token {raw:?} is reserved")));
            }
            let values = fields
                .map(|f| match f.trim().parse::<f32>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(err(format!("bad value {f:?}"))),
                })
                .collect::<Result<Vec<f32>>>()?;
            if values.is_empty() {
                return Err(err("row has no values".into()));
            }
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(err(format!("row has {} values, expected {d}", values.len())));
                }
                _ => {}
            }
            if vectors.insert(token.clone(), values).is_some() {
                return Err(err(format!("duplicate token {token:?}")));
            }
        }
        let dim = dim.ok_or_else(|| data_err("embedding table is empty"))?;
        Ok(Self { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Stored vector, else the fallback; `None` for an empty token.
    pub fn lookup(&self, token: &str) -> Option<(Vec<f32>, Provenance)> {
        let canon = canonical_token(token)?;
        match self.vectors.get(&canon) {
            Some(v) => Some((v.clone(), Provenance::File)),
            None => fallback_embedding(&canon, self.dim).map(|v| (v, Provenance::Fallback)),
        }
    }
}

/// Text embedding of one attribute value; `None` is the NULL attribute.
pub fn embed_attribute_text(token: Option<&str>, masked: bool, table: &AttributeEmbeddingTable) -> TextEmbedding {
    if masked {
        return TextEmbedding::Mask;
    }
    match token.and_then(|t| table.lookup(t)) {
        Some((v, p)) => TextEmbedding::Vector(v, p),
        None => TextEmbedding::Null,
    }
}

/// Interned canonical tokens with their text vectors.
#[derive(Clone, Debug)]
pub struct Lexicon {
    table: AttributeEmbeddingTable,
    index: HashMap<String, u32>,
    vectors: Vec<Vec<f32>>,
}

impl Lexicon {
    pub fn new(table: AttributeEmbeddingTable) -> Self {
        Self { table, index: HashMap::new(), vectors: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.table.dim()
    }

    pub fn table(&self) -> &AttributeEmbeddingTable {
        &self.table
    }

    /// Token id, or `None` for a NULL/empty attribute.
    pub fn intern(&mut self, token: Option<&str>) -> Option<u32> {
        let canon = canonical_token(token?)?;
        if let Some(&id) = self.index.get(&canon) {
            return Some(id);
        }
        let (v, _) = self.table.lookup(&canon)?;
        let id = self.vectors.len() as u32;
        self.vectors.push(v);
        self.index.insert(canon, id);
        Some(id)
    }

    pub fn vector(&self, id: u32) -> &[f32] {
        &self.vectors[id as usize]
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}
