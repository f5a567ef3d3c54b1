//! Text encoders: a seeded hashed character n-gram encoder and a lookup of
//! precomputed vectors (for plugging in embeddings from an external model).

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::query_id;
use crate::error::{Error, Result};
use crate::text::{normalize, stable_hash64};

pub const DEFAULT_ENCODER_SEED: u64 = 0x7175_6572_796c_6162;
pub const MIN_NGRAM: usize = 3;
pub const MAX_NGRAM: usize = 5;

/// Signed feature hashing of character 3..=5-grams, L2-normalized.
///
/// The normalized text is padded with one space on each side so word
/// boundaries produce their own n-grams.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HashedNgramEncoder {
    dim: usize,
    seed: u64,
}

impl HashedNgramEncoder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("encoder dimension must be positive".into()));
        }
        Ok(HashedNgramEncoder { dim, seed })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Sparse (index, value) pairs of the normalized vector, sorted by index.
    pub fn encode_sparse(&self, text: &str) -> Result<Vec<(usize, f64)>> {
        let norm = normalize(text);
        if norm.is_empty() {
            return Err(Error::InvalidArgument("cannot encode empty text".into()));
        }
        let padded: Vec<char> = std::iter::once(' ')
            .chain(norm.chars())
            .chain(std::iter::once(' '))
            .collect();
        let mut acc: HashMap<usize, f64> = HashMap::new();
        let mut buf = String::new();
        for n in MIN_NGRAM..=MAX_NGRAM {
            for window in padded.windows(n) {
                buf.clear();
                buf.extend(window);
                let h = stable_hash64(self.seed, buf.as_bytes());
                let idx = (h % self.dim as u64) as usize;
                let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
                *acc.entry(idx).or_default() += sign;
            }
        }
        let mut out: Vec<(usize, f64)> = acc.into_iter().filter(|(_, v)| *v != 0.0).collect();
        out.sort_by_key(|(i, _)| *i);
        let norm2 = out.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
        if norm2 == 0.0 {
            // every n-gram cancelled out; fall back to a single text-keyed coordinate
            let idx = (stable_hash64(self.seed ^ 1, norm.as_bytes()) % self.dim as u64) as usize;
            return Ok(vec![(idx, 1.0)]);
        }
        for (_, v) in &mut out {
            *v /= norm2;
        }
        Ok(out)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim];
        for (i, x) in self.encode_sparse(text)? {
            v[i] = x;
        }
        Ok(v)
    }
}

/// Vectors keyed by query id, loaded from JSON Lines
/// `{"id"?: string, "text"?: string, "vector": [f64, ...]}`.
/// When `id` is absent it is derived from `text`.
#[derive(Clone, Debug)]
pub struct PrecomputedVectors {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

#[derive(Deserialize)]
struct VectorLine {
    id: Option<String>,
    text: Option<String>,
    vector: Vec<f64>,
}

impl PrecomputedVectors {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut dim = None;
        let mut vectors = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: VectorLine =
                serde_json::from_str(&line).map_err(|e| Error::parse(i + 1, e.to_string()))?;
            let id = match (rec.id, rec.text) {
                (Some(id), _) => id,
                (None, Some(text)) => query_id(&text),
                (None, None) => return Err(Error::parse(i + 1, "vector line needs `id` or `text`")),
            };
            if rec.vector.iter().any(|x| !x.is_finite()) {
                return Err(Error::parse(i + 1, "vector has non-finite entries"));
            }
            match dim {
                None => dim = Some(rec.vector.len()),
                Some(d) if d != rec.vector.len() => {
                    return Err(Error::parse(
                        i + 1,
                        format!("vector length {} differs from {d}", rec.vector.len()),
                    ))
                }
                _ => {}
            }
            vectors.insert(id, rec.vector);
        }
        let dim = dim.ok_or(Error::Empty("vector file"))?;
        Ok(PrecomputedVectors { dim, vectors })
    }

    pub fn from_map(vectors: HashMap<String, Vec<f64>>) -> Result<Self> {
        let dim = vectors.values().next().map(Vec::len).ok_or(Error::Empty("vector map"))?;
        if vectors.values().any(|v| v.len() != dim) {
            return Err(Error::Shape("precomputed vectors have differing lengths".into()));
        }
        Ok(PrecomputedVectors { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lookup(&self, text: &str) -> Result<&[f64]> {
        let id = query_id(text);
        self.vectors
            .get(&id)
            .map(Vec::as_slice)
            .ok_or(Error::MissingEmbedding(id))
    }
}

/// Serializable description of an encoder, stored inside model files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum EncoderSpec {
    BuiltInHashedNgram { dim: usize, seed: u64 },
    PrecomputedVectors { path: String, dim: usize },
}

impl EncoderSpec {
    pub fn hashed(dim: usize) -> Self {
        EncoderSpec::BuiltInHashedNgram {
            dim,
            seed: DEFAULT_ENCODER_SEED,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            EncoderSpec::BuiltInHashedNgram { dim, .. } | EncoderSpec::PrecomputedVectors { dim, .. } => *dim,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Encoder {
    Hashed(HashedNgramEncoder),
    Precomputed(PrecomputedVectors),
}

impl Encoder {
    pub fn from_spec(spec: &EncoderSpec) -> Result<Self> {
        match spec {
            EncoderSpec::BuiltInHashedNgram { dim, seed } => {
                Ok(Encoder::Hashed(HashedNgramEncoder::new(*dim, *seed)?))
            }
            EncoderSpec::PrecomputedVectors { path, dim } => {
                let v = PrecomputedVectors::load(path)?;
                if v.dim() != *dim {
                    return Err(Error::Shape(format!(
                        "vector file {path} has dimension {}, expected {dim}",
                        v.dim()
                    )));
                }
                Ok(Encoder::Precomputed(v))
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Encoder::Hashed(e) => e.dim(),
            Encoder::Precomputed(v) => v.dim(),
        }
    }

    pub fn provider(&self) -> &'static str {
        match self {
            Encoder::Hashed(_) => "hashed-ngram",
            Encoder::Precomputed(_) => "precomputed",
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<f64>> {
        match self {
            Encoder::Hashed(e) => e.encode(text),
            Encoder::Precomputed(v) => {
                if normalize(text).is_empty() {
                    return Err(Error::InvalidArgument("cannot encode empty text".into()));
                }
                v.lookup(text).map(<[f64]>::to_vec)
            }
        }
    }

    /// Non-zero coordinates of [`encode`](Self::encode).
    pub fn encode_sparse(&self, text: &str) -> Result<Vec<(usize, f64)>> {
        match self {
            Encoder::Hashed(e) => e.encode_sparse(text),
            Encoder::Precomputed(_) => Ok(self
                .encode(text)?
                .into_iter()
                .enumerate()
                .filter(|(_, x)| *x != 0.0)
                .collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryEmbedding {
    pub vector: Vec<f64>,
    pub provider: String,
}

pub fn embed_query(encoder: &Encoder, text: &str) -> Result<QueryEmbedding> {
    Ok(QueryEmbedding {
        vector: encoder.encode(text)?,
        provider: encoder.provider().to_owned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shipped(dim: usize) -> Encoder {
        Encoder::from_spec(&EncoderSpec::hashed(dim)).unwrap()
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let enc = shipped(64);
        let a = embed_query(&enc, "comedy movies").unwrap();
        let b = embed_query(&enc, "Comedy   MOVIES").unwrap();
        assert_eq!(a, b);
        let norm = a.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn single_letters_differ_under_shipped_seed() {
        for dim in [64, 1024] {
            let enc = shipped(dim);
            assert_ne!(enc.encode("a").unwrap(), enc.encode("b").unwrap());
        }
    }

    #[test]
    fn empty_text_rejected() {
        assert!(shipped(16).encode("   ").is_err());
    }

    #[test]
    fn sparse_matches_dense() {
        let enc = shipped(128);
        let dense = enc.encode("tom hanks movies").unwrap();
        for (i, x) in enc.encode_sparse("tom hanks movies").unwrap() {
            assert_eq!(dense[i], x);
        }
    }

    #[test]
    fn precomputed_lookup_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vec.jsonl");
        std::fs::write(
            &path,
            "{\"text\":\"comedy movies\",\"vector\":[0.5,0.5]}\n{\"id\":\"abc\",\"vector\":[1,0]}\n",
        )
        .unwrap();
        let spec = EncoderSpec::PrecomputedVectors {
            path: path.display().to_string(),
            dim: 2,
        };
        let enc = Encoder::from_spec(&spec).unwrap();
        assert_eq!(enc.encode("Comedy Movies").unwrap(), vec![0.5, 0.5]);
        assert!(matches!(enc.encode("horror"), Err(Error::MissingEmbedding(_))));
        let wrong = EncoderSpec::PrecomputedVectors {
            path: path.display().to_string(),
            dim: 3,
        };
        assert!(Encoder::from_spec(&wrong).is_err());
    }
}
