//! Behavior-description embeddings: loading precomputed vectors and an
//! offline hashing fallback.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::BehaviorTaxonomy;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding {
    pub label: String,
    pub vector: Vec<f64>,
}

impl TextEmbedding {
    fn validate(&self) -> Result<()> {
        if self.vector.is_empty() {
            return Err(Error::invalid(format!("embedding of {:?} is empty", self.label)));
        }
        if self.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("embedding of {:?} has non-finite entries", self.label)));
        }
        Ok(())
    }
}

/// Reads a JSON object `label -> vector` and returns one embedding per
/// taxonomy label, in taxonomy order. Extra labels in the file are ignored.
pub fn load_label_embeddings(path: impl AsRef<Path>, taxonomy: &BehaviorTaxonomy) -> Result<Vec<TextEmbedding>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map: BTreeMap<String, Vec<f64>> =
        serde_json::from_str(&text).map_err(|e| Error::json(format!("parsing {}", path.display()), e))?;
    let mut out = Vec::with_capacity(taxonomy.len());
    for label in taxonomy.labels() {
        let vector = map
            .remove(label)
            .ok_or_else(|| Error::invalid(format!("{}: no embedding for label {label:?}", path.display())))?;
        out.push(TextEmbedding {
            label: label.to_string(),
            vector,
        });
    }
    check_embeddings(&out)?;
    if let Some(e) = out.iter().find(|e| e.vector.iter().all(|&v| v == 0.0)) {
        return Err(Error::invalid(format!("embedding of {:?} is the zero vector", e.label)));
    }
    Ok(out)
}

/// Non-empty, finite vectors of one common width.
pub fn check_embeddings(embeddings: &[TextEmbedding]) -> Result<()> {
    for e in embeddings {
        e.validate()?;
    }
    if let Some(first) = embeddings.first() {
        if let Some(other) = embeddings.iter().find(|e| e.vector.len() != first.vector.len()) {
            return Err(Error::invalid(format!(
                "embedding width mismatch: {:?} has {}, {:?} has {}",
                first.label,
                first.vector.len(),
                other.label,
                other.vector.len()
            )));
        }
    }
    Ok(())
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Counts the lowercase character trigrams of `description` into `width`
/// hashed buckets and L2-normalizes the counts. Strings shorter than three
/// characters count as a single gram.
pub fn fallback_embed(description: &str, width: usize, seed: u64) -> Result<Vec<f64>> {
    if description.trim().is_empty() {
        return Err(Error::precondition("cannot embed an empty description"));
    }
    if width == 0 {
        return Err(Error::precondition("embedding width must be positive"));
    }
    let chars: Vec<char> = description.to_lowercase().chars().collect();
    let mut counts = vec![0.0; width];
    let grams: Vec<&[char]> = if chars.len() < 3 {
        vec![&chars[..]]
    } else {
        chars.windows(3).collect()
    };
    for gram in grams {
        let s: String = gram.iter().collect();
        counts[(fnv1a(seed, s.as_bytes()) % width as u64) as usize] += 1.0;
    }
    let norm = counts.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(counts.into_iter().map(|v| v / norm).collect())
}

/// Fallback embeddings of every taxonomy description, in taxonomy order.
pub fn fallback_embeddings(taxonomy: &BehaviorTaxonomy, width: usize, seed: u64) -> Result<Vec<TextEmbedding>> {
    taxonomy
        .classes
        .iter()
        .map(|c| {
            Ok(TextEmbedding {
                label: c.label.clone(),
                vector: fallback_embed(&c.description, width, seed)?,
            })
        })
        .collect()
}
