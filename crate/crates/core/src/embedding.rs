use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Matrix, Vector};

/// A keyed speaker embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub key: String,
    pub vector: Vector,
}

impl Embedding {
    pub fn new(key: impl Into<String>, vector: impl Into<Vector>) -> Self {
        Embedding {
            key: key.into(),
            vector: vector.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.vector.dim()
    }
}

/// A noisy embedding together with the clean embedding it was derived from.
///
/// The same clean vector may appear in several pairs with different noisy
/// versions.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPair {
    pub key: String,
    pub noisy: Vector,
    pub clean: Vector,
    pub snr_db: Option<f64>,
    pub noise_id: Option<String>,
}

impl EmbeddingPair {
    pub fn new(
        key: impl Into<String>,
        noisy: impl Into<Vector>,
        clean: impl Into<Vector>,
    ) -> Result<Self> {
        let key = key.into();
        let (noisy, clean) = (noisy.into(), clean.into());
        if noisy.dim() != clean.dim() {
            return shape_err(format!(
                "pair `{key}`: noisy dim {} vs clean dim {}",
                noisy.dim(),
                clean.dim()
            ));
        }
        Ok(EmbeddingPair {
            key,
            noisy,
            clean,
            snr_db: None,
            noise_id: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.noisy.dim()
    }
}

/// Pairs packed into two row-aligned matrices: inputs (noisy) and targets (clean).
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl PairBatch {
    pub fn from_pairs(pairs: &[EmbeddingPair], dim: usize) -> Result<Self> {
        for p in pairs {
            if p.noisy.dim() != dim || p.clean.dim() != dim {
                return shape_err(format!(
                    "pair `{}` has dims ({}, {}), expected {dim}",
                    p.key,
                    p.noisy.dim(),
                    p.clean.dim()
                ));
            }
        }
        Ok(PairBatch {
            inputs: Matrix::stack_rows(dim, pairs.iter().map(|p| &p.noisy[..]))?,
            targets: Matrix::stack_rows(dim, pairs.iter().map(|p| &p.clean[..]))?,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `idx` gathered into a new batch.
    pub fn gather(&self, idx: &[usize]) -> PairBatch {
        let pick = |m: &Matrix| {
            Matrix::stack_rows(m.cols(), idx.iter().map(|&i| m.row(i)))
                .expect("rows of one matrix share a width")
        };
        PairBatch {
            inputs: pick(&self.inputs),
            targets: pick(&self.targets),
        }
    }
}

/// One row of a pair manifest: which noisy embedding derives from which clean one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub noisy_key: String,
    pub clean_key: String,
    pub snr_db: Option<f64>,
    pub noise_id: Option<String>,
}

/// One row of a label manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceLabel {
    pub key: String,
    pub speaker: String,
    pub duration_s: Option<f64>,
}

/// Resolves manifest rows against the noisy and clean archives.
pub fn resolve_pairs(
    records: &[PairRecord],
    noisy: &[Embedding],
    clean: &[Embedding],
) -> Result<Vec<EmbeddingPair>> {
    let noisy_idx: std::collections::HashMap<&str, &Vector> =
        noisy.iter().map(|e| (e.key.as_str(), &e.vector)).collect();
    let clean_idx: std::collections::HashMap<&str, &Vector> =
        clean.iter().map(|e| (e.key.as_str(), &e.vector)).collect();
    records
        .iter()
        .map(|r| {
            let n = noisy_idx
                .get(r.noisy_key.as_str())
                .ok_or_else(|| Error::UnknownKey(format!("{} (noisy archive)", r.noisy_key)))?;
            let c = clean_idx
                .get(r.clean_key.as_str())
                .ok_or_else(|| Error::UnknownKey(format!("{} (clean archive)", r.clean_key)))?;
            let mut pair = EmbeddingPair::new(r.noisy_key.clone(), (*n).clone(), (*c).clone())?;
            pair.snr_db = r.snr_db;
            pair.noise_id = r.noise_id.clone();
            Ok(pair)
        })
        .collect()
}

/// Checks that keys are unique, naming the first duplicate.
pub fn ensure_unique_keys<'a>(keys: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for k in keys {
        if !seen.insert(k) {
            return Err(Error::DuplicateKey(k.to_string()));
        }
    }
    Ok(())
}
