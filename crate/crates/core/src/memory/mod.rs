//! Per-leaf episodic memory banks.
//!
//! Training embeddings are routed to the leaf of their label and filtered
//! so that no two prototypes of one bank are more similar than `eta`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{build_interaction_graphs, Dataset, EdgePolicy, Instance, InteractionGraph};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::tree::Tree;

/// Cosine similarity clamped to `[-1, 1]`; `None` when either vector has
/// zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some((dot / (na * nb)).clamp(-1.0, 1.0))
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if (-1.0..=1.0).contains(&eta) {
        Ok(())
    } else {
        Err(Error::precondition(format!("eta must lie in [-1, 1], got {eta}")))
    }
}

/// Admission filter over one stream of features: the first is always kept,
/// each later one only if its largest cosine against everything kept so
/// far is at most `eta`. Returns the kept stream positions.
pub fn lnmf_filter<V: AsRef<[f64]>>(stream: &[V], eta: f64) -> Result<Vec<usize>> {
    check_eta(eta)?;
    let mut kept: Vec<usize> = Vec::new();
    for (i, f) in stream.iter().enumerate() {
        let f = f.as_ref();
        let mut v_max = f64::NEG_INFINITY;
        for &j in &kept {
            let c = cosine(f, stream[j].as_ref())
                .ok_or_else(|| Error::numeric(format!("feature {i} has zero norm")))?;
            v_max = v_max.max(c);
        }
        if kept.is_empty() || v_max <= eta {
            if f.iter().all(|&x| x == 0.0) {
                return Err(Error::numeric(format!("feature {i} has zero norm")));
            }
            kept.push(i);
        }
    }
    Ok(kept)
}

/// One stored training instance: its frozen embedding plus the raw states
/// and interaction graphs it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryPrototype {
    pub feature: Vec<f64>,
    pub instance_id: String,
    pub label: String,
    pub instance: Instance,
    pub graphs: Vec<InteractionGraph>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafMemoryBank {
    pub leaf_id: usize,
    pub label: String,
    pub eta: f64,
    pub prototypes: Vec<MemoryPrototype>,
    pub usage_counts: Vec<u64>,
}

impl LeafMemoryBank {
    /// `K_m`.
    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(format!("bank of leaf {}: {msg}", self.leaf_id)));
        if self.prototypes.is_empty() {
            return bad("no prototypes".into());
        }
        if self.usage_counts.len() != self.prototypes.len() {
            return bad(format!(
                "{} usage counts for {} prototypes",
                self.usage_counts.len(),
                self.prototypes.len()
            ));
        }
        let width = self.prototypes[0].feature.len();
        for p in &self.prototypes {
            if p.feature.len() != width || p.feature.iter().any(|v| !v.is_finite()) {
                return bad(format!("prototype {} has a malformed feature", p.instance_id));
            }
            if p.feature.iter().all(|&v| v == 0.0) {
                return bad(format!("prototype {} has a zero feature", p.instance_id));
            }
            if p.label != self.label {
                return bad(format!("prototype {} is labeled {:?}", p.instance_id, p.label));
            }
        }
        Ok(())
    }
}

/// One bank per tree leaf, indexed by leaf id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBankSet {
    pub banks: Vec<LeafMemoryBank>,
}

impl MemoryBankSet {
    pub fn validate(&self, tree: &Tree) -> Result<()> {
        if self.banks.len() != tree.leaf_count() {
            return Err(Error::invalid(format!(
                "{} banks for {} leaves",
                self.banks.len(),
                tree.leaf_count()
            )));
        }
        let width = self.banks[0].prototypes.first().map(|p| p.feature.len());
        for (m, bank) in self.banks.iter().enumerate() {
            if bank.leaf_id != m || bank.label != tree.leaf_label(m) {
                return Err(Error::invalid(format!(
                    "bank {m} belongs to leaf {} ({:?})",
                    bank.leaf_id, bank.label
                )));
            }
            bank.validate()?;
            if Some(bank.prototypes[0].feature.len()) != width {
                return Err(Error::invalid("banks disagree on feature width"));
            }
        }
        Ok(())
    }

    /// Total number of stored prototypes (`sum_m K_m`).
    pub fn total(&self) -> usize {
        self.banks.iter().map(LeafMemoryBank::len).sum()
    }

    pub fn feature_width(&self) -> usize {
        self.banks[0].prototypes[0].feature.len()
    }

    pub fn reset_usage(&mut self) {
        for bank in &mut self.banks {
            bank.usage_counts.fill(0);
        }
    }

    pub fn record_usage(&mut self, leaf: usize, prototype: usize) {
        self.banks[leaf].usage_counts[prototype] += 1;
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("serializing memory banks", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: MemoryBankSet = serde_json::from_str(text).map_err(|e| Error::json("parsing memory banks", e))?;
        if set.banks.is_empty() {
            return Err(Error::invalid("memory bank set is empty"));
        }
        for bank in &set.banks {
            bank.validate()?;
        }
        Ok(set)
    }
}

pub fn save_banks(banks: &MemoryBankSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, banks.to_json()? + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_banks(path: impl AsRef<Path>) -> Result<MemoryBankSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MemoryBankSet::from_json(&text)
}

/// Embeds every training instance with the frozen encoder and implants the
/// result; see [`implant_features`].
pub fn implant(train: &Dataset, encoder: &EncoderParams, tree: &Tree, eta: f64) -> Result<MemoryBankSet> {
    implant_with_threads(train, encoder, tree, eta, 0)
}

pub fn implant_with_threads(
    train: &Dataset,
    encoder: &EncoderParams,
    tree: &Tree,
    eta: f64,
    threads: usize,
) -> Result<MemoryBankSet> {
    check_eta(eta)?;
    let features: Vec<Vec<f64>> = encoder
        .embed_many(&train.instances, threads)?
        .into_iter()
        .map(|e| e.g)
        .collect();
    implant_features(train, &features, tree, eta, encoder.config().edge_policy)
}

/// Routes instance `i` (with embedding `features[i]`) to the leaf of its
/// label, in dataset order, and keeps it when it passes the admission
/// filter of that leaf.
pub fn implant_features(
    train: &Dataset,
    features: &[Vec<f64>],
    tree: &Tree,
    eta: f64,
    edge_policy: EdgePolicy,
) -> Result<MemoryBankSet> {
    check_eta(eta)?;
    if features.len() != train.len() {
        return Err(Error::precondition(format!(
            "{} features for {} instances",
            features.len(),
            train.len()
        )));
    }
    let mut streams: Vec<Vec<usize>> = vec![Vec::new(); tree.leaf_count()];
    for (i, inst) in train.instances.iter().enumerate() {
        let leaf = tree
            .leaf_of_label(&inst.label)
            .ok_or_else(|| Error::invalid(format!("label {:?} has no leaf in the tree", inst.label)))?;
        streams[leaf].push(i);
    }
    let mut banks = Vec::with_capacity(tree.leaf_count());
    for (leaf, stream) in streams.iter().enumerate() {
        let label = tree.leaf_label(leaf);
        if stream.is_empty() {
            return Err(Error::invalid(format!("no training instances for label {label:?}")));
        }
        let stream_features: Vec<&[f64]> = stream.iter().map(|&i| features[i].as_slice()).collect();
        let kept = lnmf_filter(&stream_features, eta)?;
        let prototypes: Vec<MemoryPrototype> = kept
            .into_iter()
            .map(|pos| {
                let inst = &train.instances[stream[pos]];
                MemoryPrototype {
                    feature: features[stream[pos]].clone(),
                    instance_id: inst.instance_id.clone(),
                    label: inst.label.clone(),
                    instance: inst.clone(),
                    graphs: build_interaction_graphs(inst, edge_policy),
                }
            })
            .collect();
        banks.push(LeafMemoryBank {
            leaf_id: leaf,
            label: label.to_string(),
            eta,
            usage_counts: vec![0; prototypes.len()],
            prototypes,
        });
    }
    Ok(MemoryBankSet { banks })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeafBankStats {
    pub leaf_id: usize,
    pub label: String,
    /// `K_m`.
    pub prototypes: usize,
    /// Mean cosine over unordered prototype pairs; `None` for a single
    /// prototype.
    pub mean_pairwise_cosine: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BankStats {
    pub leaves: Vec<LeafBankStats>,
    /// Total memory size `sum_m K_m`.
    pub total: usize,
}

pub fn bank_stats(banks: &MemoryBankSet) -> BankStats {
    let leaves = banks
        .banks
        .iter()
        .map(|bank| {
            let mut sum = 0.0;
            let mut pairs = 0usize;
            for (a, pa) in bank.prototypes.iter().enumerate() {
                for pb in &bank.prototypes[a + 1..] {
                    sum += cosine(&pa.feature, &pb.feature).unwrap_or(0.0);
                    pairs += 1;
                }
            }
            LeafBankStats {
                leaf_id: bank.leaf_id,
                label: bank.label.clone(),
                prototypes: bank.len(),
                mean_pairwise_cosine: (pairs > 0).then(|| sum / pairs as f64),
            }
        })
        .collect();
    BankStats {
        leaves,
        total: banks.total(),
    }
}

/// Shannon entropy (nats) of the normalized counts.
pub fn entropy_of_counts(counts: &[u64]) -> Result<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::precondition("no usage recorded"));
    }
    Ok(counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .fold(0.0, |acc, h| acc + h))
}

/// Entropy of how often each prototype of `bank` was the best match.
pub fn utilization_entropy(bank: &LeafMemoryBank) -> Result<f64> {
    entropy_of_counts(&bank.usage_counts)
        .map_err(|_| Error::precondition(format!("leaf {} ({}) has no recorded usage", bank.leaf_id, bank.label)))
}
