use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use super::{EncoderConfig, EncoderInput, EncoderParams, GROUP_GRAPH, GROUP_HEAD, GROUP_STATE};
use crate::data::{Dataset, Instance};
use crate::error::{Error, Result};
use crate::gradcheck::{check_epsilon, finite_difference_check, sample_coordinates, GradCheckReport};
use crate::optim::Adam;
use crate::parallel::map_ordered;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseTrainConfig {
    pub epochs: usize,
    /// Learning rate of the state transformer.
    pub lr_state: f64,
    /// Learning rate of the evolving graph branch.
    pub lr_graph: f64,
    /// Learning rate of the fusion layer and classifier.
    pub lr_head: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Worker threads for per-instance gradients; 0 uses every core.
    pub threads: usize,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        BaseTrainConfig {
            epochs: 80,
            lr_state: 0.0005,
            lr_graph: 0.005,
            lr_head: 0.005,
            weight_decay: 1e-5,
            batch_size: 64,
            seed: 0,
            threads: 0,
        }
    }
}

impl BaseTrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::precondition("epochs and batch_size must be positive"));
        }
        for (name, v) in [
            ("lr_state", self.lr_state),
            ("lr_graph", self.lr_graph),
            ("lr_head", self.lr_head),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::precondition(format!("{name} must be positive")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::precondition("weight_decay must be non-negative"));
        }
        Ok(())
    }

    pub(crate) fn group_lrs(&self) -> Vec<f64> {
        let mut lrs = vec![0.0; 3];
        lrs[GROUP_STATE] = self.lr_state;
        lrs[GROUP_GRAPH] = self.lr_graph;
        lrs[GROUP_HEAD] = self.lr_head;
        lrs
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    /// Mean training loss of each epoch.
    pub epoch_loss: Vec<f64>,
}

/// Prepared inputs and class indices for every instance of `data`.
pub(crate) fn prepare(params: &EncoderParams, data: &Dataset, threads: usize) -> Result<Vec<(EncoderInput, usize)>> {
    map_ordered(&data.instances, threads, |inst: &Instance| {
        Ok((params.input(inst)?, params.label_index(&inst.label)?))
    })
    .into_iter()
    .collect()
}

pub fn train_base(train: &Dataset, config: &BaseTrainConfig, enc_config: &EncoderConfig) -> Result<EncoderParams> {
    Ok(train_base_with_history(train, config, enc_config)?.0)
}

/// Trains the encoder with softmax cross-entropy and returns the per-epoch
/// mean loss alongside the parameters.
///
/// Per-instance gradients are computed in parallel but always summed in
/// batch order, so the result depends only on the seed.
pub fn train_base_with_history(
    train: &Dataset,
    config: &BaseTrainConfig,
    enc_config: &EncoderConfig,
) -> Result<(EncoderParams, TrainHistory)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::precondition("cannot train on an empty dataset"));
    }
    let frames = train.uniform_len()?;
    let mut enc_config = enc_config.clone();
    if enc_config.frames == 0 {
        enc_config.frames = frames;
    }
    if enc_config.classes == 0 {
        enc_config.classes = train.taxonomy.len();
    }
    if enc_config.frames != frames || enc_config.classes != train.taxonomy.len() {
        return Err(Error::precondition(format!(
            "encoder config expects T={} M={}, data has T={frames} M={}",
            enc_config.frames,
            enc_config.classes,
            train.taxonomy.len()
        )));
    }
    let labels = train.taxonomy.labels().map(String::from).collect();
    let mut params = EncoderParams::init(enc_config, labels, config.seed)?;
    let samples = prepare(&params, train, config.threads)?;

    let mut adam = Adam::new(params.store(), config.group_lrs(), config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = TrainHistory::default();
    let mut batch_index = 0usize;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results = map_ordered(batch, config.threads, |&i| {
                let (input, label) = &samples[i];
                params.loss_and_grad(input, *label)
            });
            let mut grads = params.store().zeros_like();
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l;
                grads.add_assign(g);
            }
            let n = batch.len() as f64;
            grads.scale(1.0 / n);
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss or gradient in epoch {epoch}, batch {batch_index}"
                )));
            }
            adam.step(params.store_mut(), &grads);
            epoch_loss += loss;
            batch_index += 1;
            debug!(epoch, batch = batch_index, loss = loss / n, "base batch");
        }
        let mean = epoch_loss / samples.len() as f64;
        info!(epoch, loss = mean, "base epoch");
        history.epoch_loss.push(mean);
    }
    Ok((params, history))
}

/// Central-difference check of the cross-entropy gradient of one instance
/// over `samples` parameter coordinates (at least 100).
pub fn encoder_grad_check(
    params: &EncoderParams,
    instance: &Instance,
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    check_epsilon(epsilon)?;
    let input = params.input(instance)?;
    let label = params.label_index(&instance.label)?;
    let (_, grads) = params.loss_and_grad(&input, label);
    let coords = sample_coordinates(params.layout(), samples.max(100), seed);
    finite_difference_check(
        params.layout(),
        params.store().as_slice(),
        grads.as_slice(),
        &coords,
        epsilon,
        |flat| Ok(params.with_flat(flat).loss(&input, label)),
    )
}
