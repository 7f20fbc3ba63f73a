//! Metrics and experiment harness.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::data::Dataset;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::memory::{entropy_of_counts, implant_features};
use crate::ndt::{train_ndt_features, EMemNdtModel, NdtConfig, NdtTrainConfig, Predictor};
use crate::parallel::map_ordered;
use crate::tree::Tree;

/// Counts with rows as ground truth and columns as predictions, both in
/// taxonomy order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>) -> Self {
        let m = labels.len();
        ConfusionMatrix {
            labels,
            counts: vec![vec![0; m]; m],
        }
    }

    pub fn from_counts(labels: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        if counts.len() != labels.len() || counts.iter().any(|r| r.len() != labels.len()) {
            return Err(Error::precondition("confusion counts must be square over the labels"));
        }
        Ok(ConfusionMatrix { labels, counts })
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }

    /// Header row of predicted labels, then one row per true label.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("truth\\predicted");
        for l in &self.labels {
            out.push(',');
            out.push_str(&csv_field(l));
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            out.push_str(&csv_field(l));
            for c in row {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
    /// Unweighted mean over classes with nonzero support.
    #[serde(rename = "macro")]
    pub macro_avg: Averages,
    #[serde(rename = "micro")]
    pub micro_avg: Averages,
    pub accuracy: f64,
    pub total: u64,
    /// Classes left out of the macro average for lack of support.
    pub excluded_from_macro: Vec<String>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let m = cm.labels.len();
        let mut classes = Vec::with_capacity(m);
        for i in 0..m {
            let tp = cm.counts[i][i];
            let support: u64 = cm.counts[i].iter().sum();
            let predicted: u64 = (0..m).map(|r| cm.counts[r][i]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            classes.push(ClassMetrics {
                label: cm.labels[i].clone(),
                precision,
                recall,
                f1: f1(precision, recall),
                support,
            });
        }
        let supported: Vec<&ClassMetrics> = classes.iter().filter(|c| c.support > 0).collect();
        let excluded: Vec<String> = classes.iter().filter(|c| c.support == 0).map(|c| c.label.clone()).collect();
        if !excluded.is_empty() {
            warn!(?excluded, "classes without support are excluded from macro averages");
        }
        let mean = |f: fn(&ClassMetrics) -> f64| {
            if supported.is_empty() {
                0.0
            } else {
                supported.iter().map(|c| f(c)).sum::<f64>() / supported.len() as f64
            }
        };
        let accuracy = ratio(cm.correct(), cm.total());
        MetricsReport {
            macro_avg: Averages {
                precision: mean(|c| c.precision),
                recall: mean(|c| c.recall),
                f1: mean(|c| c.f1),
            },
            micro_avg: Averages {
                precision: accuracy,
                recall: accuracy,
                f1: accuracy,
            },
            accuracy,
            total: cm.total(),
            excluded_from_macro: excluded,
            classes,
        }
    }

    pub fn class(&self, label: &str) -> Option<&ClassMetrics> {
        self.classes.iter().find(|c| c.label == label)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("serializing metrics", e))
    }

    pub fn to_text(&self) -> String {
        let width = self.classes.iter().map(|c| c.label.len()).chain([5]).max().unwrap_or(5);
        let mut out = format!(
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>7}\n",
            "class", "precision", "recall", "f1", "support"
        );
        for c in &self.classes {
            let _ = writeln!(
                out,
                "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}",
                c.label, c.precision, c.recall, c.f1, c.support
            );
        }
        for (name, a) in [("macro", self.macro_avg), ("micro", self.micro_avg)] {
            let _ = writeln!(
                out,
                "{name:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}",
                a.precision, a.recall, a.f1, self.total
            );
        }
        out
    }
}

fn truth_indices(test: &Dataset) -> Result<Vec<usize>> {
    if test.is_empty() {
        return Err(Error::precondition("cannot evaluate on an empty dataset"));
    }
    test.instances
        .iter()
        .map(|inst| {
            test.taxonomy
                .index_of(&inst.label)
                .ok_or_else(|| Error::invalid(format!("instance {}: label {:?} is outside the taxonomy", inst.instance_id, inst.label)))
        })
        .collect()
}

fn labels_of(test: &Dataset) -> Vec<String> {
    test.taxonomy.labels().map(String::from).collect()
}

/// Taxonomy index of each leaf of the model's tree.
fn leaf_to_class(model: &EMemNdtModel, test: &Dataset) -> Result<Vec<usize>> {
    model.tree().check_taxonomy(&test.taxonomy)?;
    model
        .tree()
        .leaf_labels()
        .map(|l| {
            test.taxonomy
                .index_of(l)
                .ok_or_else(|| Error::invalid(format!("tree leaf {l:?} is outside the taxonomy")))
        })
        .collect()
}

/// Per-instance predicted leaf and the best prototype of that leaf.
fn ndt_predictions(model: &EMemNdtModel, encoder: &EncoderParams, test: &Dataset, threads: usize) -> Result<Vec<(usize, usize)>> {
    model.check_encoder(encoder)?;
    let predictor = Predictor::new(model)?;
    let embeddings = encoder.embed_many(&test.instances, threads)?;
    map_ordered(&embeddings, threads, |e| {
        let (leaf, _) = predictor.predict(&e.g)?;
        Ok((leaf, predictor.leaf_score(&e.g, leaf)?.best))
    })
    .into_iter()
    .collect()
}

fn confusion_from(labels: Vec<String>, truth: &[usize], predicted: impl Iterator<Item = usize>) -> (ConfusionMatrix, MetricsReport) {
    let mut cm = ConfusionMatrix::new(labels);
    for (&t, p) in truth.iter().zip(predicted) {
        cm.record(t, p);
    }
    let report = MetricsReport::from_confusion(&cm);
    (cm, report)
}

pub fn evaluate(model: &EMemNdtModel, encoder: &EncoderParams, test: &Dataset) -> Result<(ConfusionMatrix, MetricsReport)> {
    evaluate_with_threads(model, encoder, test, 0)
}

pub fn evaluate_with_threads(
    model: &EMemNdtModel,
    encoder: &EncoderParams,
    test: &Dataset,
    threads: usize,
) -> Result<(ConfusionMatrix, MetricsReport)> {
    let truth = truth_indices(test)?;
    let classes = leaf_to_class(model, test)?;
    let preds = ndt_predictions(model, encoder, test, threads)?;
    Ok(confusion_from(labels_of(test), &truth, preds.iter().map(|&(leaf, _)| classes[leaf])))
}

/// Like [`evaluate_with_threads`], and also counts, for every instance, the
/// best-matching prototype of its predicted leaf as used.
pub fn evaluate_recording_usage(
    model: &mut EMemNdtModel,
    encoder: &EncoderParams,
    test: &Dataset,
    threads: usize,
) -> Result<(ConfusionMatrix, MetricsReport)> {
    let truth = truth_indices(test)?;
    let classes = leaf_to_class(model, test)?;
    let preds = ndt_predictions(model, encoder, test, threads)?;
    for &(leaf, best) in &preds {
        model.banks_mut().record_usage(leaf, best);
    }
    Ok(confusion_from(labels_of(test), &truth, preds.iter().map(|&(leaf, _)| classes[leaf])))
}

/// Metrics of the encoder's own softmax classifier.
pub fn evaluate_base(encoder: &EncoderParams, test: &Dataset, threads: usize) -> Result<(ConfusionMatrix, MetricsReport)> {
    let truth = truth_indices(test)?;
    let classes = encoder
        .labels()
        .iter()
        .map(|l| {
            test.taxonomy
                .index_of(l)
                .ok_or_else(|| Error::invalid(format!("encoder label {l:?} is outside the taxonomy")))
        })
        .collect::<Result<Vec<_>>>()?;
    let preds = map_ordered(&test.instances, threads, |inst| {
        let p = encoder.predict_proba(inst)?;
        let mut best = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = i;
            }
        }
        Ok(classes[best])
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(confusion_from(labels_of(test), &truth, preds.into_iter()))
}

/// Rows of `report` for `labels`, in the order given.
pub fn few_shot_report(report: &MetricsReport, labels: &[String]) -> Result<Vec<ClassMetrics>> {
    labels
        .iter()
        .map(|l| {
            report
                .class(l)
                .cloned()
                .ok_or_else(|| Error::precondition(format!("unknown label {l:?}")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaRow {
    pub eta: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Prototypes over all leaves.
    pub total_emb: usize,
}

/// For each threshold: implant, train the tree and evaluate on `test`.
/// Embeddings are computed once and shared by every threshold.
pub fn sweep_eta(
    train: &Dataset,
    test: &Dataset,
    encoder: &EncoderParams,
    tree: &Tree,
    etas: &[f64],
    ndt_config: &NdtConfig,
    train_config: &NdtTrainConfig,
) -> Result<Vec<EtaRow>> {
    if let Some(bad) = etas.iter().find(|e| !(-1.0..=1.0).contains(*e)) {
        return Err(Error::precondition(format!("eta must lie in [-1, 1], got {bad}")));
    }
    let threads = train_config.threads;
    let features: Vec<Vec<f64>> = encoder
        .embed_many(&train.instances, threads)?
        .into_iter()
        .map(|e| e.g)
        .collect();
    let leaves = train
        .instances
        .iter()
        .map(|inst| {
            tree.leaf_of_label(&inst.label)
                .ok_or_else(|| Error::invalid(format!("label {:?} has no leaf in the tree", inst.label)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(etas.len());
    for &eta in etas {
        let banks = implant_features(train, &features, tree, eta, encoder.config().edge_policy)?;
        let total_emb = banks.total();
        let model = EMemNdtModel::for_encoder(tree.clone(), banks, encoder, ndt_config.clone())?;
        let (model, _) = train_ndt_features(&model, &features, &leaves, train_config)?;
        let (_, report) = evaluate_with_threads(&model, encoder, test, threads)?;
        info!(eta, total_emb, f1 = report.macro_avg.f1, "sweep point");
        rows.push(EtaRow {
            eta,
            precision: report.macro_avg.precision,
            recall: report.macro_avg.recall,
            f1: report.macro_avg.f1,
            total_emb,
        });
    }
    Ok(rows)
}

pub fn sweep_to_text(rows: &[EtaRow]) -> String {
    let mut out = format!("{:>6}  {:>9}  {:>9}  {:>9}  {:>9}\n", "eta", "precision", "recall", "f1", "total_emb");
    for r in rows {
        let _ = writeln!(
            out,
            "{:>6.3}  {:>9.4}  {:>9.4}  {:>9.4}  {:>9}",
            r.eta, r.precision, r.recall, r.f1, r.total_emb
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeUse {
    pub index: usize,
    pub instance_id: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafUtilization {
    pub leaf_id: usize,
    pub label: String,
    /// Bank size `K_m`.
    pub prototypes: usize,
    /// Entropy in nats of the usage frequencies; `None` for an unused leaf.
    pub entropy: Option<f64>,
    /// Up to three most used prototypes, ties toward the lower index.
    pub top: Vec<PrototypeUse>,
    pub zero_usage_fraction: f64,
}

pub fn utilization_report(model: &EMemNdtModel) -> Result<Vec<LeafUtilization>> {
    let banks = &model.banks().banks;
    if banks.iter().all(|b| b.usage_counts.iter().all(|&c| c == 0)) {
        return Err(Error::precondition("no usage recorded"));
    }
    Ok(banks
        .iter()
        .map(|bank| {
            let mut order: Vec<usize> = (0..bank.len()).filter(|&k| bank.usage_counts[k] > 0).collect();
            order.sort_by(|&a, &b| bank.usage_counts[b].cmp(&bank.usage_counts[a]).then(a.cmp(&b)));
            let zero = bank.usage_counts.iter().filter(|&&c| c == 0).count();
            LeafUtilization {
                leaf_id: bank.leaf_id,
                label: bank.label.clone(),
                prototypes: bank.len(),
                entropy: entropy_of_counts(&bank.usage_counts).ok(),
                top: order
                    .into_iter()
                    .take(3)
                    .map(|k| PrototypeUse {
                        index: k,
                        instance_id: bank.prototypes[k].instance_id.clone(),
                        count: bank.usage_counts[k],
                    })
                    .collect(),
                zero_usage_fraction: zero as f64 / bank.len() as f64,
            }
        })
        .collect())
}

pub fn utilization_to_text(rows: &[LeafUtilization]) -> String {
    let width = rows.iter().map(|r| r.label.len()).chain([5]).max().unwrap_or(5);
    let mut out = format!(
        "{:>4}  {:<width$}  {:>4}  {:>8}  {:>6}  top\n",
        "leaf", "label", "K", "entropy", "unused"
    );
    for r in rows {
        let entropy = r.entropy.map_or_else(|| "-".to_string(), |e| format!("{e:.4}"));
        let top: Vec<String> = r.top.iter().map(|t| format!("{}:{}", t.index, t.count)).collect();
        let _ = writeln!(
            out,
            "{:>4}  {:<width$}  {:>4}  {:>8}  {:>6.3}  {}",
            r.leaf_id,
            r.label,
            r.prototypes,
            entropy,
            r.zero_usage_fraction,
            top.join(" ")
        );
    }
    out
}

#[cfg(test)]
mod tests;
