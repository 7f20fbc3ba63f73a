//! Neural decision tree over episodic memory.
//!
//! Every leaf owns a small transform `H`. An input embedding `g` is scored
//! against a leaf by the scaled cosine between `H(g)` and the transformed
//! prototypes of that leaf's bank. Scores are averaged bottom-up to every
//! inner node; top-down, each inner node turns its children's scores into
//! a softmax, and a leaf's probability is the product along its
//! root-to-leaf path.

mod infer;
mod train;
mod transform;

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::memory::MemoryBankSet;
use crate::params::{Layout, NamedTensor, ParamStore};
use crate::tree::Tree;

pub use infer::{
    explain, explain_embedding, leaf_similarity, lla, lla_with_child_probs, mpm, node_scores_from_leaves, predict,
    ChildProbability, ExplanationTrace, LeafDistribution, LeafScore, MatchedPrototype, NodeScores, PathStep, Predictor,
};
pub use train::{ndt_grad_check, ndt_loss, train_ndt, train_ndt_features, NdtTrainConfig, NdtTrainHistory};
pub use transform::LeafTransform;
use transform::TransformIds;

pub const NDT_FORMAT: &str = "emem-ndt/v1";

/// Reduction over a bank's prototype cosines.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    #[default]
    FanIn,
    /// Every transform maps every input to the same non-zero vector, so all
    /// cosines are 1 and each node splits its mass evenly between its
    /// children. Gradients vanish at this point; it is meant for
    /// calibration, not training.
    Symmetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NdtConfig {
    pub hidden: usize,
    pub out: usize,
    /// Cosine amplification, must exceed 1.
    pub rho: f64,
    pub aggregation: Aggregation,
    /// One transform for all leaves instead of one per leaf.
    pub shared_transform: bool,
    pub init: InitMode,
    pub seed: u64,
}

impl Default for NdtConfig {
    fn default() -> Self {
        NdtConfig {
            hidden: 64,
            out: 32,
            rho: 30.0,
            aggregation: Aggregation::Max,
            shared_transform: false,
            init: InitMode::FanIn,
            seed: 0,
        }
    }
}

impl NdtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho.is_finite() && self.rho > 1.0) {
            return Err(Error::invalid(format!("rho must be a finite number > 1, got {}", self.rho)));
        }
        if self.hidden == 0 || self.out == 0 {
            return Err(Error::invalid("transform widths must be positive"));
        }
        Ok(())
    }
}

fn build_layout(leaves: usize, input: usize, cfg: &NdtConfig) -> (Layout, Vec<TransformIds>) {
    let mut layout = Layout::default();
    let mut add = |prefix: String| TransformIds {
        w1: layout.add(format!("{prefix}.theta1.w"), &[cfg.hidden, input], 0),
        b1: layout.add(format!("{prefix}.theta1.b"), &[cfg.hidden], 0),
        w2: layout.add(format!("{prefix}.theta2.w"), &[cfg.out, cfg.hidden], 0),
        b2: layout.add(format!("{prefix}.theta2.b"), &[cfg.out], 0),
    };
    let ids = if cfg.shared_transform {
        vec![add("shared".into()); leaves]
    } else {
        (0..leaves).map(|m| add(format!("leaf{m}"))).collect()
    };
    (layout, ids)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EMemNdtModel {
    tree: Tree,
    banks: MemoryBankSet,
    config: NdtConfig,
    encoder_hash: String,
    params: ParamStore,
    transforms: Vec<TransformIds>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: String,
    encoder_hash: String,
    config: NdtConfig,
    tree: Tree,
    banks: MemoryBankSet,
    transforms: Vec<NamedTensor>,
}

impl EMemNdtModel {
    /// Fresh transforms over implanted `banks`; `encoder_hash` identifies
    /// the encoder whose embeddings the banks hold.
    pub fn new(tree: Tree, banks: MemoryBankSet, encoder_hash: impl Into<String>, config: NdtConfig) -> Result<Self> {
        config.validate()?;
        banks.validate(&tree)?;
        let (layout, transforms) = build_layout(tree.leaf_count(), banks.feature_width(), &config);
        let mut model = EMemNdtModel {
            tree,
            banks,
            config,
            encoder_hash: encoder_hash.into(),
            params: ParamStore::zeros(Arc::new(layout)),
            transforms,
        };
        model.initialize();
        Ok(model)
    }

    /// Convenience constructor recording the hash of `encoder`.
    pub fn for_encoder(tree: Tree, banks: MemoryBankSet, encoder: &EncoderParams, config: NdtConfig) -> Result<Self> {
        Self::new(tree, banks, encoder.content_hash()?, config)
    }

    fn initialize(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let layout = self.params.layout().clone();
        let mut uniform = |data: &mut [f64], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            data.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
        };
        match self.config.init {
            InitMode::FanIn => {
                for spec in layout.specs() {
                    if spec.shape.len() == 2 {
                        let fan_in = spec.shape[1];
                        uniform(&mut self.params.as_mut_slice()[spec.offset..spec.offset + spec.len()], fan_in);
                    }
                }
            }
            InitMode::Symmetric => {
                let first = self.transforms[0];
                let w1_spec = layout.spec(first.w1).clone();
                let b2_spec = layout.spec(first.b2).clone();
                let mut w1 = vec![0.0; w1_spec.len()];
                uniform(&mut w1, w1_spec.shape[1]);
                let mut b2 = vec![0.0; b2_spec.len()];
                uniform(&mut b2, self.config.hidden);
                for ids in self.transforms.clone() {
                    self.params.slice_mut(ids.w1).copy_from_slice(&w1);
                    self.params.slice_mut(ids.b2).copy_from_slice(&b2);
                }
            }
        }
    }

    pub fn tree(&self) -> &Tree {
        &self.tree
    }

    pub fn banks(&self) -> &MemoryBankSet {
        &self.banks
    }

    pub fn banks_mut(&mut self) -> &mut MemoryBankSet {
        &mut self.banks
    }

    pub fn config(&self) -> &NdtConfig {
        &self.config
    }

    pub fn rho(&self) -> f64 {
        self.config.rho
    }

    pub fn encoder_hash(&self) -> &str {
        &self.encoder_hash
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn input_width(&self) -> usize {
        self.banks.feature_width()
    }

    pub fn transform(&self, leaf: usize) -> LeafTransform<'_> {
        LeafTransform {
            ids: self.transforms[leaf],
            store: &self.params,
        }
    }

    /// Copy with the flat transform parameters replaced.
    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let mut out = self.clone();
        out.params.as_mut_slice().copy_from_slice(flat);
        out
    }

    /// Errors unless `encoder` is the one the banks were built with.
    pub fn check_encoder(&self, encoder: &EncoderParams) -> Result<()> {
        let hash = encoder.content_hash()?;
        if hash != self.encoder_hash {
            return Err(Error::invalid(format!(
                "model was built for encoder {}, got {hash}",
                self.encoder_hash
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            version: NDT_FORMAT.into(),
            encoder_hash: self.encoder_hash.clone(),
            config: self.config.clone(),
            tree: self.tree.clone(),
            banks: self.banks.clone(),
            transforms: self.params.to_named(),
        };
        serde_json::to_string(&file).map_err(|e| Error::json("serializing model", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::json("parsing model", e))?;
        let version = value.get("version").and_then(|v| v.as_str()).unwrap_or_default();
        if version != NDT_FORMAT {
            return Err(Error::invalid(format!("model version {version:?}, expected {NDT_FORMAT:?}")));
        }
        let file: ModelFile = serde_json::from_value(value).map_err(|e| Error::json("parsing model", e))?;
        file.config.validate()?;
        file.banks.validate(&file.tree)?;
        let (layout, transforms) = build_layout(file.tree.leaf_count(), file.banks.feature_width(), &file.config);
        let params = ParamStore::from_named(Arc::new(layout), &file.transforms)?;
        if !params.all_finite() {
            return Err(Error::invalid("model transforms contain non-finite values"));
        }
        Ok(EMemNdtModel {
            tree: file.tree,
            banks: file.banks,
            config: file.config,
            encoder_hash: file.encoder_hash,
            params,
            transforms,
        })
    }
}

pub fn save_model(model: &EMemNdtModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model.to_json()? + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<EMemNdtModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    EMemNdtModel::from_json(&text).map_err(|e| match e {
        Error::Io { .. } => e,
        other => Error::invalid(format!("{}: {other}", path.display())),
    })
}

#[cfg(test)]
mod tests;
