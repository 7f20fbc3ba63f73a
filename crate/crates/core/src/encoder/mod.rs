//! Base behavior-prediction model.
//!
//! Two branches read one instance:
//!
//! * a state transformer over the target's per-frame states and
//!   frame-to-frame displacements (multi-head
//!   self-attention + feed-forward blocks with learned residual scales,
//!   mean-pooled into `f_state`);
//! * a graph branch running one mean-aggregation GCN layer per frame whose
//!   weight matrix is evolved frame to frame by a gated recurrent cell; the
//!   target's node embedding per frame goes through a single-head
//!   attention on its own, then through a second single-head attention
//!   over the whole sequence, mean-pooled into `f_graph`.
//!
//! A sigmoid fusion layer maps `[f_state; f_graph]` to the instance
//! embedding `g`, and a softmax classifier (scaled-cosine by default,
//! linear by configuration) predicts the behavior. All gradients are
//! derived by hand in [`model`].

mod layers;
mod model;
mod train;

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{build_interaction_graphs, AgentClass, AgentState, EdgePolicy, Instance, InteractionGraph};
use crate::error::{Error, Result};
use crate::params::{Layout, NamedTensor, ParamStore, TensorId};

#[allow(unused_imports)]
pub(crate) use layers::softmax;
pub use model::EncoderInput;
pub use train::{encoder_grad_check, train_base, train_base_with_history, BaseTrainConfig, TrainHistory};

pub const ENCODER_FORMAT: &str = "encoder/v1";

/// Width of the learned agent-class embedding.
pub const CLASS_EMBED_WIDTH: usize = 4;
/// `x, y, z` (scaled) and `cos`, `sin` of the heading.
pub const NUMERIC_FEATURES: usize = 5;
/// Per-agent input width: class embedding followed by numeric features.
pub const FEATURE_WIDTH: usize = CLASS_EMBED_WIDTH + NUMERIC_FEATURES;
/// Frame-to-frame displacement `dx, dy` of the target.
pub const MOTION_FEATURES: usize = 2;
/// Width of one state token: agent features plus the target's motion.
pub const STATE_WIDTH: usize = FEATURE_WIDTH + MOTION_FEATURES;

/// Learning-rate groups of the encoder layout.
pub const GROUP_STATE: usize = 0;
pub const GROUP_GRAPH: usize = 1;
pub const GROUP_HEAD: usize = 2;

/// How the classifier turns the fused embedding into logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ClassifierHead {
    /// `W g + b`.
    Linear,
    /// `scale * cos(w_c, g) + b_c`; a zero-norm row or embedding scores 0.
    Cosine { scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_graph: usize,
    /// Hidden width of the transformer feed-forward blocks.
    pub d_ff: usize,
    /// Observation length `T`; 0 means "take it from the training data".
    pub frames: usize,
    /// Number of behavior classes `M`; 0 means "take it from the taxonomy".
    pub classes: usize,
    /// Positions are divided by this many meters before entering the model.
    pub pos_scale: f64,
    /// Per-frame displacements are divided by this many meters.
    pub motion_scale: f64,
    pub head: ClassifierHead,
    pub edge_policy: EdgePolicy,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            d_graph: 32,
            d_ff: 64,
            frames: 0,
            classes: 0,
            pos_scale: 5.0,
            motion_scale: 0.5,
            head: ClassifierHead::Cosine { scale: 10.0 },
            edge_policy: EdgePolicy::Complete,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::precondition(format!("encoder config: {msg}")));
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_graph", self.d_graph),
            ("d_ff", self.d_ff),
            ("frames", self.frames),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.classes < 2 {
            return bad(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(self.pos_scale.is_finite() && self.pos_scale > 0.0) {
            return bad("pos_scale must be positive".into());
        }
        if let ClassifierHead::Cosine { scale } = self.head {
            if !(scale.is_finite() && scale > 0.0) {
                return bad("cosine head scale must be positive".into());
            }
        }
        if !(self.motion_scale.is_finite() && self.motion_scale > 0.0) {
            return bad("motion_scale must be positive".into());
        }
        if let EdgePolicy::Radius { meters } = self.edge_policy {
            if !(meters.is_finite() && meters >= 0.0) {
                return bad("edge radius must be non-negative".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerIds {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
    pub bo: TensorId,
    pub attn_scale: TensorId,
    pub ff1_w: TensorId,
    pub ff1_b: TensorId,
    pub ff2_w: TensorId,
    pub ff2_b: TensorId,
    pub ff_scale: TensorId,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct EncoderIds {
    pub class_embed: TensorId,
    pub input_w: TensorId,
    pub input_b: TensorId,
    pub layers: Vec<LayerIds>,
    pub gcn_init: TensorId,
    pub evolve_uz: TensorId,
    pub evolve_ur: TensorId,
    pub evolve_h_in: TensorId,
    pub evolve_h_hid: TensorId,
    pub evolve_bz: TensorId,
    pub evolve_br: TensorId,
    pub evolve_bh: TensorId,
    pub inner_q: TensorId,
    pub inner_k: TensorId,
    pub inner_v: TensorId,
    pub outer_q: TensorId,
    pub outer_k: TensorId,
    pub outer_v: TensorId,
    pub fusion_w: TensorId,
    pub fusion_b: TensorId,
    pub classifier_w: TensorId,
    pub classifier_b: TensorId,
}

fn build_layout(cfg: &EncoderConfig) -> (Layout, EncoderIds) {
    let mut l = Layout::default();
    let (d, dg, dff) = (cfg.d_model, cfg.d_graph, cfg.d_ff);
    let class_embed = l.add("state.class_embed", &[AgentClass::COUNT, CLASS_EMBED_WIDTH], GROUP_STATE);
    let input_w = l.add("state.input.w", &[d, STATE_WIDTH], GROUP_STATE);
    let input_b = l.add("state.input.b", &[d], GROUP_STATE);
    let layers = (0..cfg.n_layers)
        .map(|i| {
            let p = format!("state.layer{i}");
            LayerIds {
                wq: l.add(format!("{p}.attn.wq"), &[d, d], GROUP_STATE),
                wk: l.add(format!("{p}.attn.wk"), &[d, d], GROUP_STATE),
                wv: l.add(format!("{p}.attn.wv"), &[d, d], GROUP_STATE),
                wo: l.add(format!("{p}.attn.wo"), &[d, d], GROUP_STATE),
                bo: l.add(format!("{p}.attn.bo"), &[d], GROUP_STATE),
                attn_scale: l.add(format!("{p}.attn.residual_scale"), &[1], GROUP_STATE),
                ff1_w: l.add(format!("{p}.ff1.w"), &[dff, d], GROUP_STATE),
                ff1_b: l.add(format!("{p}.ff1.b"), &[dff], GROUP_STATE),
                ff2_w: l.add(format!("{p}.ff2.w"), &[d, dff], GROUP_STATE),
                ff2_b: l.add(format!("{p}.ff2.b"), &[d], GROUP_STATE),
                ff_scale: l.add(format!("{p}.ff.residual_scale"), &[1], GROUP_STATE),
            }
        })
        .collect();
    let ids = EncoderIds {
        class_embed,
        input_w,
        input_b,
        layers,
        gcn_init: l.add("graph.gcn.w_init", &[dg, FEATURE_WIDTH], GROUP_GRAPH),
        evolve_uz: l.add("graph.evolve.uz", &[dg, dg], GROUP_GRAPH),
        evolve_ur: l.add("graph.evolve.ur", &[dg, dg], GROUP_GRAPH),
        evolve_h_in: l.add("graph.evolve.h_in", &[dg, dg], GROUP_GRAPH),
        evolve_h_hid: l.add("graph.evolve.h_hid", &[dg, dg], GROUP_GRAPH),
        evolve_bz: l.add("graph.evolve.bz", &[dg, FEATURE_WIDTH], GROUP_GRAPH),
        evolve_br: l.add("graph.evolve.br", &[dg, FEATURE_WIDTH], GROUP_GRAPH),
        evolve_bh: l.add("graph.evolve.bh", &[dg, FEATURE_WIDTH], GROUP_GRAPH),
        inner_q: l.add("graph.inner_att.wq", &[dg, dg], GROUP_GRAPH),
        inner_k: l.add("graph.inner_att.wk", &[dg, dg], GROUP_GRAPH),
        inner_v: l.add("graph.inner_att.wv", &[dg, dg], GROUP_GRAPH),
        outer_q: l.add("graph.outer_att.wq", &[dg, dg], GROUP_GRAPH),
        outer_k: l.add("graph.outer_att.wk", &[dg, dg], GROUP_GRAPH),
        outer_v: l.add("graph.outer_att.wv", &[dg, dg], GROUP_GRAPH),
        fusion_w: l.add("head.fusion.w", &[d, d + dg], GROUP_HEAD),
        fusion_b: l.add("head.fusion.b", &[d], GROUP_HEAD),
        classifier_w: l.add("head.classifier.w", &[cfg.classes, d], GROUP_HEAD),
        classifier_b: l.add("head.classifier.b", &[cfg.classes], GROUP_HEAD),
    };
    (l, ids)
}

/// Output of the fusion layer together with the two branch features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceEmbedding {
    pub g: Vec<f64>,
    pub f_state: Vec<f64>,
    pub f_graph: Vec<f64>,
}

/// All trainable weights of the encoder plus the label order of its
/// classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    labels: Vec<String>,
    store: ParamStore,
    ids: EncoderIds,
}

#[derive(Serialize, Deserialize)]
struct EncoderFile {
    version: String,
    config: EncoderConfig,
    labels: Vec<String>,
    tensors: Vec<NamedTensor>,
}

impl EncoderParams {
    /// All-zero parameters.
    pub fn zeros(config: EncoderConfig, labels: Vec<String>) -> Result<Self> {
        config.validate()?;
        if labels.len() != config.classes {
            return Err(Error::precondition(format!(
                "{} labels for {} classes",
                labels.len(),
                config.classes
            )));
        }
        let (layout, ids) = build_layout(&config);
        Ok(EncoderParams {
            config,
            labels,
            store: ParamStore::zeros(Arc::new(layout)),
            ids,
        })
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, zero biases,
    /// residual scales of one half.
    pub fn init(config: EncoderConfig, labels: Vec<String>, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(config, labels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = params.store.layout().clone();
        for spec in layout.specs() {
            let name = spec.name.as_str();
            let data = &mut params.store.as_mut_slice()[spec.offset..spec.offset + spec.len()];
            if name.ends_with("residual_scale") {
                data.fill(0.5);
            } else if name == "graph.evolve.bz" {
                // start with slowly drifting GCN weights
                data.fill(-1.0);
            } else if name == "state.class_embed" {
                data.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
            } else if spec.shape.len() == 2 && !name.starts_with("graph.evolve.b") {
                let bound = 1.0 / (spec.shape[1] as f64).sqrt();
                data.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
            }
        }
        Ok(params)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn layout(&self) -> &Layout {
        self.store.layout()
    }

    /// Looks up a tensor by its serialized name.
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let spec = self.store.layout().specs().iter().find(|s| s.name == name)?.clone();
        Some(&mut self.store.as_mut_slice()[spec.offset..spec.offset + spec.len()])
    }

    /// Copy of `self` with the flat parameter vector replaced.
    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let mut out = self.clone();
        out.store.as_mut_slice().copy_from_slice(flat);
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let file = EncoderFile {
            version: ENCODER_FORMAT.into(),
            config: self.config.clone(),
            labels: self.labels.clone(),
            tensors: self.store.to_named(),
        };
        serde_json::to_string(&file).map_err(|e| Error::json("serializing encoder", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: EncoderFile = serde_json::from_str(text).map_err(|e| Error::json("parsing encoder", e))?;
        if file.version != ENCODER_FORMAT {
            return Err(Error::invalid(format!(
                "encoder version {:?}, expected {ENCODER_FORMAT:?}",
                file.version
            )));
        }
        let mut params = Self::zeros(file.config, file.labels)?;
        params.store = ParamStore::from_named(params.store.layout().clone(), &file.tensors)?;
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// SHA-256 of the serialized parameters, hex encoded.
    pub fn content_hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_json()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Prepares the model input of `instance`, building its interaction
    /// graphs with the configured edge policy.
    pub fn input(&self, instance: &Instance) -> Result<EncoderInput> {
        if instance.len() != self.config.frames {
            return Err(Error::invalid(format!(
                "instance {} has {} frames, encoder expects {}",
                instance.instance_id,
                instance.len(),
                self.config.frames
            )));
        }
        let graphs = build_interaction_graphs(instance, self.config.edge_policy);
        EncoderInput::new(state_matrix(instance).view(), &graphs, &self.config)
    }

    pub fn embed(&self, instance: &Instance) -> Result<InstanceEmbedding> {
        Ok(self.forward(&self.input(instance)?).embedding())
    }

    /// Embeddings of many instances, in input order; `threads` as in
    /// [`crate::parallel::resolve_threads`].
    pub fn embed_many(&self, instances: &[Instance], threads: usize) -> Result<Vec<InstanceEmbedding>> {
        crate::parallel::map_ordered(instances, threads, |inst| self.embed(inst))
            .into_iter()
            .collect()
    }

    /// Softmax class probabilities of the base classifier.
    pub fn predict_proba(&self, instance: &Instance) -> Result<Array1<f64>> {
        Ok(self.forward(&self.input(instance)?).probs().to_owned())
    }

    /// Index into [`labels`](Self::labels) of the ground-truth label.
    pub fn label_index(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::invalid(format!("label {label:?} unknown to the encoder")))
    }
}

/// `T x 6` matrix of the target's states: uid, class index, x, y, z,
/// orientation.
pub fn state_matrix(instance: &Instance) -> Array2<f64> {
    let mut out = Array2::zeros((instance.len(), 6));
    for (t, frame) in instance.frames.iter().enumerate() {
        let a = frame.target();
        out.row_mut(t).assign(&ndarray::arr1(&[
            a.uid as f64,
            a.class.index() as f64,
            a.x,
            a.y,
            a.z,
            a.orientation,
        ]));
    }
    out
}

pub(crate) fn numeric_features(agent: &AgentState, pos_scale: f64) -> [f64; NUMERIC_FEATURES] {
    [
        agent.x / pos_scale,
        agent.y / pos_scale,
        agent.z / pos_scale,
        agent.orientation.cos(),
        agent.orientation.sin(),
    ]
}

/// Transformer branch: `f_state` of a `T x 6` state matrix.
pub fn encode_states(states: ArrayView2<f64>, params: &EncoderParams) -> Result<Array1<f64>> {
    let input = EncoderInput::from_states(states, &params.config)?;
    Ok(params.forward_state(&input).0)
}

/// Graph branch: `f_graph` of one interaction graph per frame.
pub fn encode_graphs(graphs: &[InteractionGraph], params: &EncoderParams) -> Result<Array1<f64>> {
    let frames = EncoderInput::graph_frames(graphs, &params.config)?;
    Ok(params.forward_graph(&frames).0)
}

/// Fusion layer and softmax classifier.
pub fn fuse_and_classify(
    f_state: ArrayView1<f64>,
    f_graph: ArrayView1<f64>,
    params: &EncoderParams,
) -> Result<(InstanceEmbedding, Array1<f64>)> {
    if f_state.len() != params.config.d_model || f_graph.len() != params.config.d_graph {
        return Err(Error::precondition(format!(
            "branch widths {}/{} do not match d_model {} / d_graph {}",
            f_state.len(),
            f_graph.len(),
            params.config.d_model,
            params.config.d_graph
        )));
    }
    if f_state.iter().chain(f_graph.iter()).any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite branch features"));
    }
    let head = params.forward_head(f_state, f_graph);
    let embedding = InstanceEmbedding {
        g: head.g.to_vec(),
        f_state: f_state.to_vec(),
        f_graph: f_graph.to_vec(),
    };
    Ok((embedding, head.probs))
}
