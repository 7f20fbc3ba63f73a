//! Scoring, soft inference and explanation traces.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use super::EMemNdtModel;
use super::Aggregation;
use crate::data::{Instance, InteractionGraph};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::tree::{NodeKind, Tree};

/// Score of one leaf for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafScore {
    /// `rho` times the aggregated cosine.
    pub gamma: f64,
    /// Prototype with the largest cosine (smallest index on ties).
    pub best: usize,
    pub best_cosine: f64,
    pub cosines: Vec<f64>,
}

/// Score of every tree node, indexed by node id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeScores {
    pub gamma: Vec<f64>,
}

/// Probability of every leaf, indexed by leaf id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafDistribution {
    pub s: Vec<f64>,
}

impl LeafDistribution {
    /// Most probable leaf; the smallest id wins exact ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.s.iter().enumerate() {
            if p > self.s[best] {
                best = i;
            }
        }
        best
    }
}

/// Inner-node scores as the mean of their children's, given leaf scores.
pub fn node_scores_from_leaves(tree: &Tree, leaf_gammas: &[f64]) -> Result<NodeScores> {
    if leaf_gammas.len() != tree.leaf_count() {
        return Err(Error::precondition(format!(
            "{} leaf scores for {} leaves",
            leaf_gammas.len(),
            tree.leaf_count()
        )));
    }
    let mut gamma = vec![0.0; tree.node_count()];
    gamma[..leaf_gammas.len()].copy_from_slice(leaf_gammas);
    for node in tree.inner_post_order() {
        let children = tree.children(node);
        if children.len() < 2 {
            return Err(Error::invalid(format!("inner node {node} has fewer than two children")));
        }
        gamma[node] = children.iter().map(|&c| gamma[c]).sum::<f64>() / children.len() as f64;
    }
    Ok(NodeScores { gamma })
}

pub(crate) fn softmax_slice(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Leaf distribution plus the child softmax of every node (empty for
/// leaves), in each node's child order.
pub fn lla_with_child_probs(scores: &NodeScores, tree: &Tree) -> (LeafDistribution, Vec<Vec<f64>>) {
    let mut reach = vec![0.0; tree.node_count()];
    let mut child_probs = vec![Vec::new(); tree.node_count()];
    reach[tree.root_id()] = 1.0;
    for node in tree.inner_post_order().into_iter().rev() {
        let children = tree.children(node);
        let gammas: Vec<f64> = children.iter().map(|&c| scores.gamma[c]).collect();
        let probs = softmax_slice(&gammas);
        for (&c, &p) in children.iter().zip(&probs) {
            reach[c] = reach[node] * p;
        }
        child_probs[node] = probs;
    }
    reach.truncate(tree.leaf_count());
    (LeafDistribution { s: reach }, child_probs)
}

/// Top-down leaf probabilities: per-node softmax, multiplied along paths.
pub fn lla(scores: &NodeScores, tree: &Tree) -> LeafDistribution {
    lla_with_child_probs(scores, tree).0
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Transformed prototypes of every bank, cached for repeated inference.
pub struct Predictor<'a> {
    model: &'a EMemNdtModel,
    protos: Vec<Array2<f64>>,
    norms: Vec<Vec<f64>>,
}

impl<'a> Predictor<'a> {
    pub fn new(model: &'a EMemNdtModel) -> Result<Self> {
        let mut protos = Vec::with_capacity(model.tree.leaf_count());
        let mut norms = Vec::with_capacity(model.tree.leaf_count());
        for leaf in 0..model.tree.leaf_count() {
            let (v, n) = prototype_outputs(model, leaf)?;
            protos.push(v);
            norms.push(n);
        }
        Ok(Predictor { model, protos, norms })
    }

    pub fn model(&self) -> &EMemNdtModel {
        self.model
    }

    fn check_input(&self, g: &[f64]) -> Result<()> {
        if g.len() != self.model.input_width() {
            return Err(Error::precondition(format!(
                "embedding has width {}, model expects {}",
                g.len(),
                self.model.input_width()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("embedding has non-finite entries"));
        }
        Ok(())
    }

    pub fn leaf_score(&self, g: &[f64], leaf: usize) -> Result<LeafScore> {
        self.check_input(g)?;
        let x = ArrayView1::from(g).insert_axis(Axis(0));
        let u = self.model.transform(leaf).apply(x).remove_axis(Axis(0));
        let nu = norm(u.view());
        if nu == 0.0 {
            return Err(Error::numeric(format!("transform of leaf {leaf} maps the input to zero")));
        }
        let dots = self.protos[leaf].dot(&u);
        let cosines: Vec<f64> = dots.iter().zip(&self.norms[leaf]).map(|(d, nv)| d / (nu * nv)).collect();
        let mut best = 0;
        for (k, &c) in cosines.iter().enumerate() {
            if c > cosines[best] {
                best = k;
            }
        }
        let agg = match self.model.config.aggregation {
            Aggregation::Max => cosines[best],
            Aggregation::Mean => cosines.iter().sum::<f64>() / cosines.len() as f64,
        };
        Ok(LeafScore {
            gamma: self.model.config.rho * agg,
            best,
            best_cosine: cosines[best],
            cosines,
        })
    }

    pub fn leaf_scores(&self, g: &[f64]) -> Result<Vec<LeafScore>> {
        (0..self.model.tree.leaf_count()).map(|m| self.leaf_score(g, m)).collect()
    }

    pub fn node_scores(&self, g: &[f64]) -> Result<NodeScores> {
        let gammas: Vec<f64> = self.leaf_scores(g)?.iter().map(|s| s.gamma).collect();
        node_scores_from_leaves(&self.model.tree, &gammas)
    }

    pub fn distribution(&self, g: &[f64]) -> Result<LeafDistribution> {
        Ok(lla(&self.node_scores(g)?, &self.model.tree))
    }

    /// Predicted leaf and the full distribution.
    pub fn predict(&self, g: &[f64]) -> Result<(usize, LeafDistribution)> {
        let dist = self.distribution(g)?;
        Ok((dist.argmax(), dist))
    }

    pub fn explain(&self, instance_id: &str, g: &[f64]) -> Result<ExplanationTrace> {
        let tree = &self.model.tree;
        let leaf_scores = self.leaf_scores(g)?;
        let gammas: Vec<f64> = leaf_scores.iter().map(|s| s.gamma).collect();
        let scores = node_scores_from_leaves(tree, &gammas)?;
        let (dist, child_probs) = lla_with_child_probs(&scores, tree);
        let leaf = dist.argmax();
        let ids = tree.path_to(leaf);
        let mut reach = 1.0;
        let mut path = Vec::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            let node = tree.node(id).expect("path nodes exist");
            let children: Vec<ChildProbability> = node
                .children
                .iter()
                .zip(&child_probs[id])
                .map(|(&c, &p)| ChildProbability {
                    node_id: c,
                    probability: p,
                })
                .collect();
            let next_reach = ids
                .get(i + 1)
                .and_then(|next| children.iter().find(|c| c.node_id == *next))
                .map_or(reach, |c| reach * c.probability);
            path.push(PathStep {
                node_id: id,
                kind: node.kind,
                name: node.name.clone(),
                label: node.label.clone(),
                gamma: scores.gamma[id],
                reach_probability: reach,
                children,
            });
            reach = next_reach;
        }
        let best = &leaf_scores[leaf];
        let proto = &self.model.banks.banks[leaf].prototypes[best.best];
        Ok(ExplanationTrace {
            instance_id: instance_id.to_string(),
            predicted_label: tree.leaf_label(leaf).to_string(),
            predicted_leaf: leaf,
            leaf_probability: dist.s[leaf],
            path,
            prototype: MatchedPrototype {
                leaf_id: leaf,
                index: best.best,
                instance_id: proto.instance_id.clone(),
                label: proto.label.clone(),
                cosine: best.best_cosine,
                gamma: self.model.config.rho * best.best_cosine,
                instance: proto.instance.clone(),
                graphs: proto.graphs.clone(),
            },
            leaf_probabilities: dist.s,
        })
    }
}

/// `H_m(e_k)` for every prototype of leaf `m`, with norms.
fn prototype_outputs(model: &EMemNdtModel, leaf: usize) -> Result<(Array2<f64>, Vec<f64>)> {
    let bank = &model.banks.banks[leaf];
    let width = model.input_width();
    let mut e = Array2::zeros((bank.len(), width));
    for (k, p) in bank.prototypes.iter().enumerate() {
        e.row_mut(k).assign(&Array1::from(p.feature.clone()));
    }
    let v = model.transform(leaf).apply(e.view());
    let norms: Vec<f64> = v.rows().into_iter().map(norm).collect();
    if let Some(k) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::numeric(format!(
            "transform of leaf {leaf} maps prototype {} to zero",
            bank.prototypes[k].instance_id
        )));
    }
    Ok((v, norms))
}

/// Scaled similarity of `g` to the bank of `leaf` and the index of the best
/// matching prototype.
pub fn leaf_similarity(g: &[f64], leaf: usize, model: &EMemNdtModel) -> Result<(f64, usize)> {
    if leaf >= model.tree.leaf_count() {
        return Err(Error::precondition(format!("no leaf {leaf}")));
    }
    let (v, n) = prototype_outputs(model, leaf)?;
    let predictor = Predictor {
        model,
        protos: vec![Array2::zeros((0, 0)); leaf].into_iter().chain([v]).collect(),
        norms: vec![Vec::new(); leaf].into_iter().chain([n]).collect(),
    };
    let s = predictor.leaf_score(g, leaf)?;
    Ok((s.gamma, s.best))
}

/// Bottom-up scores of every node for input `g`.
pub fn mpm(g: &[f64], model: &EMemNdtModel) -> Result<NodeScores> {
    Predictor::new(model)?.node_scores(g)
}

/// Label of the most probable leaf together with the leaf distribution.
pub fn predict(g: &[f64], model: &EMemNdtModel) -> Result<(String, LeafDistribution)> {
    let (leaf, dist) = Predictor::new(model)?.predict(g)?;
    Ok((model.tree.leaf_label(leaf).to_string(), dist))
}

pub fn explain(instance: &Instance, encoder: &EncoderParams, model: &EMemNdtModel) -> Result<ExplanationTrace> {
    let g = encoder.embed(instance)?.g;
    explain_embedding(&instance.instance_id, &g, model)
}

pub fn explain_embedding(instance_id: &str, g: &[f64], model: &EMemNdtModel) -> Result<ExplanationTrace> {
    Predictor::new(model)?.explain(instance_id, g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChildProbability {
    pub node_id: usize,
    pub probability: f64,
}

/// One node on the root-to-leaf path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathStep {
    pub node_id: usize,
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub gamma: f64,
    /// Probability mass reaching this node.
    pub reach_probability: f64,
    /// Softmax over this node's children (empty at the leaf).
    pub children: Vec<ChildProbability>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPrototype {
    pub leaf_id: usize,
    /// Position in the leaf's bank.
    pub index: usize,
    pub instance_id: String,
    pub label: String,
    pub cosine: f64,
    pub gamma: f64,
    pub instance: Instance,
    pub graphs: Vec<InteractionGraph>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationTrace {
    pub instance_id: String,
    pub predicted_label: String,
    pub predicted_leaf: usize,
    pub leaf_probability: f64,
    pub path: Vec<PathStep>,
    pub prototype: MatchedPrototype,
    pub leaf_probabilities: Vec<f64>,
}

impl ExplanationTrace {
    /// Checks the trace against a fresh computation for embedding `g`: the
    /// path runs from the root to the most probable leaf through parent-child
    /// links, and the prototype belongs to that leaf's bank and attains its
    /// largest cosine.
    pub fn verify(&self, model: &EMemNdtModel, g: &[f64]) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(format!("trace of {}: {msg}", self.instance_id)));
        let tree = model.tree();
        let predictor = Predictor::new(model)?;
        let (leaf, _) = predictor.predict(g)?;
        if self.predicted_leaf != leaf || self.predicted_label != tree.leaf_label(leaf) {
            return bad(format!("predicted leaf {} but argmax is {leaf}", self.predicted_leaf));
        }
        let ids: Vec<usize> = self.path.iter().map(|s| s.node_id).collect();
        if ids.first() != Some(&tree.root_id()) {
            return bad("path does not start at the root".into());
        }
        if ids.last() != Some(&leaf) {
            return bad("path does not end at the predicted leaf".into());
        }
        if let Some(w) = ids.windows(2).find(|w| tree.parent(w[1]) != Some(w[0])) {
            return bad(format!("{} is not a child of {}", w[1], w[0]));
        }
        let bank = &model.banks().banks[leaf];
        let p = &self.prototype;
        if p.leaf_id != leaf || p.index >= bank.len() || bank.prototypes[p.index].instance_id != p.instance_id {
            return bad(format!("prototype {} is not in the bank of leaf {leaf}", p.instance_id));
        }
        let score = predictor.leaf_score(g, leaf)?;
        let max = score.cosines.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if score.cosines[p.index] != max {
            return bad(format!("prototype {} does not attain the bank maximum", p.instance_id));
        }
        Ok(())
    }
}
