//! Negative log-likelihood of the ground-truth leaf and its gradient with
//! respect to the leaf transforms.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use super::infer::{node_scores_from_leaves, softmax_slice, NodeScores, Predictor};
use super::{Aggregation, EMemNdtModel};
use crate::data::Dataset;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::gradcheck::{check_epsilon, finite_difference_check, sample_coordinates, GradCheckReport};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tree::Tree;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NdtTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Worker threads for embedding the training set; 0 uses every core.
    pub threads: usize,
}

impl Default for NdtTrainConfig {
    fn default() -> Self {
        NdtTrainConfig {
            epochs: 5,
            lr: 5e-5,
            weight_decay: 1e-6,
            batch_size: 64,
            seed: 0,
            threads: 0,
        }
    }
}

impl NdtTrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::precondition("epochs and batch_size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::precondition("lr must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::precondition("weight_decay must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct NdtTrainHistory {
    pub epoch_loss: Vec<f64>,
}

/// `-log s_leaf` accumulated edge by edge along the root-to-leaf path.
pub(crate) fn path_nll(tree: &Tree, scores: &NodeScores, leaf: usize) -> f64 {
    let path = tree.path_to(leaf);
    path.windows(2)
        .map(|w| {
            let gammas: Vec<f64> = tree.children(w[0]).iter().map(|&c| scores.gamma[c]).collect();
            let max = gammas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = gammas.iter().map(|g| (g - max).exp()).sum::<f64>().ln() + max;
            lse - scores.gamma[w[1]]
        })
        .sum()
}

fn check_batch(model: &EMemNdtModel, batch: &[(Vec<f64>, usize)]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::precondition("empty batch"));
    }
    if let Some((_, leaf)) = batch.iter().find(|(_, leaf)| *leaf >= model.tree().leaf_count()) {
        return Err(Error::precondition(format!("no leaf {leaf}")));
    }
    Ok(())
}

/// Mean negative log-likelihood of the ground-truth leaves.
pub fn ndt_loss(batch: &[(Vec<f64>, usize)], model: &EMemNdtModel) -> Result<f64> {
    check_batch(model, batch)?;
    let predictor = Predictor::new(model)?;
    let mut total = 0.0;
    for (g, leaf) in batch {
        total += path_nll(model.tree(), &predictor.node_scores(g)?, *leaf);
    }
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::numeric("non-finite tree loss"));
    }
    Ok(loss)
}

/// Prototype features of every bank as matrices.
fn bank_matrices(model: &EMemNdtModel) -> Vec<Array2<f64>> {
    model
        .banks()
        .banks
        .iter()
        .map(|bank| {
            let mut e = Array2::zeros((bank.len(), model.input_width()));
            for (k, p) in bank.prototypes.iter().enumerate() {
                e.row_mut(k).assign(&ArrayView1::from(&p.feature));
            }
            e
        })
        .collect()
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Mean loss and its gradient over `batch`.
pub(crate) fn batch_loss_and_grad(
    model: &EMemNdtModel,
    banks: &[Array2<f64>],
    batch: &[(&[f64], usize)],
) -> Result<(f64, ParamStore)> {
    let tree = model.tree();
    let leaves = tree.leaf_count();
    let rho = model.rho();
    let mut grads = model.params().zeros_like();

    let mut proto_hidden = Vec::with_capacity(leaves);
    let mut proto_out = Vec::with_capacity(leaves);
    let mut proto_norm = Vec::with_capacity(leaves);
    for (m, e) in banks.iter().enumerate() {
        let (h, v) = model.transform(m).forward_rows(e.view());
        let n: Vec<f64> = v.rows().into_iter().map(norm).collect();
        if n.contains(&0.0) {
            return Err(Error::numeric(format!("transform of leaf {m} maps a prototype to zero")));
        }
        proto_hidden.push(h);
        proto_out.push(v);
        proto_norm.push(n);
    }
    let mut dproto: Vec<Array2<f64>> = proto_out.iter().map(|v| Array2::zeros(v.raw_dim())).collect();
    let top_down: Vec<usize> = tree.inner_post_order().into_iter().rev().collect();

    let mut total = 0.0;
    for &(g, target) in batch {
        let x = ArrayView1::from(g).insert_axis(Axis(0));
        let mut inputs = Vec::with_capacity(leaves);
        let mut gammas = Vec::with_capacity(leaves);
        for m in 0..leaves {
            let (h, u) = model.transform(m).forward_rows(x);
            let u = u.remove_axis(Axis(0));
            let nu = norm(u.view());
            if nu == 0.0 {
                return Err(Error::numeric(format!("transform of leaf {m} maps the input to zero")));
            }
            let cos: Array1<f64> = proto_out[m].dot(&u) / (&Array1::from(proto_norm[m].clone()) * nu);
            let mut best = 0;
            for (k, &c) in cos.iter().enumerate() {
                if c > cos[best] {
                    best = k;
                }
            }
            gammas.push(
                rho * match model.config().aggregation {
                    Aggregation::Max => cos[best],
                    Aggregation::Mean => cos.mean().expect("bank is non-empty"),
                },
            );
            inputs.push((h, u, nu, cos, best));
        }
        let scores = node_scores_from_leaves(tree, &gammas)?;
        total += path_nll(tree, &scores, target);

        // d loss / d gamma for every node
        let mut dgamma = vec![0.0; tree.node_count()];
        let path = tree.path_to(target);
        for w in path.windows(2) {
            let children = tree.children(w[0]);
            let cg: Vec<f64> = children.iter().map(|&c| scores.gamma[c]).collect();
            for (&c, p) in children.iter().zip(softmax_slice(&cg)) {
                dgamma[c] += p - f64::from(u8::from(c == w[1]));
            }
        }
        for &node in &top_down {
            let children = tree.children(node);
            let share = dgamma[node] / children.len() as f64;
            for &c in children {
                dgamma[c] += share;
            }
        }

        for (m, (h, u, nu, cos, best)) in inputs.into_iter().enumerate() {
            if dgamma[m] == 0.0 {
                continue;
            }
            let k_count = cos.len();
            let dcos: Vec<(usize, f64)> = match model.config().aggregation {
                Aggregation::Max => vec![(best, rho * dgamma[m])],
                Aggregation::Mean => (0..k_count).map(|k| (k, rho * dgamma[m] / k_count as f64)).collect(),
            };
            let mut du = Array1::<f64>::zeros(u.len());
            for (k, dc) in dcos {
                let v = proto_out[m].row(k);
                let nv = proto_norm[m][k];
                let c = cos[k];
                du.scaled_add(dc / (nu * nv), &v);
                du.scaled_add(-dc * c / (nu * nu), &u);
                let mut dv = dproto[m].row_mut(k);
                dv.scaled_add(dc / (nu * nv), &u);
                dv.scaled_add(-dc * c / (nv * nv), &v);
            }
            model
                .transform(m)
                .backward_rows(x, &h, du.view().insert_axis(Axis(0)), &mut grads);
        }
    }
    for m in 0..leaves {
        model
            .transform(m)
            .backward_rows(banks[m].view(), &proto_hidden[m], dproto[m].view(), &mut grads);
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

/// Trains the leaf transforms on frozen encoder embeddings of `train`.
pub fn train_ndt(
    model: &EMemNdtModel,
    train: &Dataset,
    encoder: &EncoderParams,
    config: &NdtTrainConfig,
) -> Result<EMemNdtModel> {
    let features: Vec<Vec<f64>> = encoder
        .embed_many(&train.instances, config.threads)?
        .into_iter()
        .map(|e| e.g)
        .collect();
    let leaves = train
        .instances
        .iter()
        .map(|inst| {
            model
                .tree()
                .leaf_of_label(&inst.label)
                .ok_or_else(|| Error::invalid(format!("label {:?} has no leaf in the tree", inst.label)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(train_ndt_features(model, &features, &leaves, config)?.0)
}

/// Trains on precomputed embeddings `features[i]` with ground-truth leaf
/// `leaves[i]`.
pub fn train_ndt_features(
    model: &EMemNdtModel,
    features: &[Vec<f64>],
    leaves: &[usize],
    config: &NdtTrainConfig,
) -> Result<(EMemNdtModel, NdtTrainHistory)> {
    config.validate()?;
    if features.is_empty() || features.len() != leaves.len() {
        return Err(Error::precondition(format!(
            "{} features for {} targets",
            features.len(),
            leaves.len()
        )));
    }
    let mut model = model.clone();
    let banks = bank_matrices(&model);
    let mut adam = Adam::new(model.params(), vec![config.lr], config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut history = NdtTrainHistory::default();
    let mut batch_index = 0usize;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| (features[i].as_slice(), leaves[i])).collect();
            let (loss, grads) = batch_loss_and_grad(&model, &banks, &batch)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::numeric(format!(
                    "non-finite tree loss or gradient in epoch {epoch}, batch {batch_index}"
                )));
            }
            adam.step(model.params_mut(), &grads);
            epoch_loss += loss * batch.len() as f64;
            batch_index += 1;
            debug!(epoch, batch = batch_index, loss, "tree batch");
        }
        let mean = epoch_loss / features.len() as f64;
        info!(epoch, loss = mean, "tree epoch");
        history.epoch_loss.push(mean);
    }
    Ok((model, history))
}

/// Central-difference check of the batch loss gradient over `samples`
/// transform coordinates (at least 100).
pub fn ndt_grad_check(
    model: &EMemNdtModel,
    batch: &[(Vec<f64>, usize)],
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    check_epsilon(epsilon)?;
    check_batch(model, batch)?;
    let banks = bank_matrices(model);
    let refs: Vec<(&[f64], usize)> = batch.iter().map(|(g, l)| (g.as_slice(), *l)).collect();
    let (_, grads) = batch_loss_and_grad(model, &banks, &refs)?;
    let layout = model.params().layout();
    let coords = sample_coordinates(layout, samples.max(100), seed);
    finite_difference_check(
        layout,
        model.params().as_slice(),
        grads.as_slice(),
        &coords,
        epsilon,
        |flat| ndt_loss(batch, &model.with_flat(flat)),
    )
}
