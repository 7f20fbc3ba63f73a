use super::*;
use crate::data::{generate_synthetic, SyntheticConfig};
use crate::memory::{LeafMemoryBank, MemoryBankSet, MemoryPrototype};
use crate::tree::{build_tree, Linkage, TextEmbedding};

fn labels(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("c{i}")).collect()
}

#[test]
fn two_class_example() {
    let cm = ConfusionMatrix::from_counts(labels(2), vec![vec![8, 2], vec![1, 9]]).unwrap();
    let r = MetricsReport::from_confusion(&cm);
    let c0 = &r.classes[0];
    assert!((c0.precision - 8.0 / 9.0).abs() < 1e-12);
    assert!((c0.recall - 0.8).abs() < 1e-12);
    assert!((c0.f1 - 0.842).abs() < 1e-3);
    assert_eq!(c0.support, 10);
    assert_eq!(r.total, 20);
    assert!((r.accuracy - 0.85).abs() < 1e-12);
    assert_eq!(r.micro_avg.f1, r.accuracy);
    let c1 = &r.classes[1];
    let macro_f1 = (c0.f1 + c1.f1) / 2.0;
    assert!((r.macro_avg.f1 - macro_f1).abs() < 1e-12);
}

#[test]
fn perfect_predictions() {
    let cm = ConfusionMatrix::from_counts(labels(3), vec![vec![4, 0, 0], vec![0, 2, 0], vec![0, 0, 7]]).unwrap();
    let r = MetricsReport::from_confusion(&cm);
    for c in &r.classes {
        assert_eq!((c.precision, c.recall, c.f1), (1.0, 1.0, 1.0));
    }
    assert_eq!(r.macro_avg.f1, 1.0);
}

#[test]
fn unsupported_classes_leave_the_macro_average() {
    let cm = ConfusionMatrix::from_counts(labels(3), vec![vec![5, 0, 0], vec![0, 5, 0], vec![0, 0, 0]]).unwrap();
    let r = MetricsReport::from_confusion(&cm);
    assert_eq!(r.excluded_from_macro, vec!["c2".to_string()]);
    assert_eq!(r.macro_avg.f1, 1.0);
    assert_eq!(r.classes[2].f1, 0.0);
}

#[test]
fn never_predicted_class_scores_zero() {
    let cm = ConfusionMatrix::from_counts(labels(2), vec![vec![3, 0], vec![2, 0]]).unwrap();
    let r = MetricsReport::from_confusion(&cm);
    assert_eq!((r.classes[1].precision, r.classes[1].recall, r.classes[1].f1), (0.0, 0.0, 0.0));
    for c in &r.classes {
        assert!([c.precision, c.recall, c.f1].iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn counts_do_not_depend_on_order() {
    let pairs = [(0, 0), (0, 1), (1, 1), (2, 0), (2, 2), (1, 1)];
    let mut a = ConfusionMatrix::new(labels(3));
    let mut b = ConfusionMatrix::new(labels(3));
    for &(t, p) in &pairs {
        a.record(t, p);
    }
    for &(t, p) in pairs.iter().rev() {
        b.record(t, p);
    }
    assert_eq!(a, b);
    assert_eq!(MetricsReport::from_confusion(&a), MetricsReport::from_confusion(&b));
}

#[test]
fn csv_and_text_layouts() {
    let cm = ConfusionMatrix::from_counts(vec!["a".into(), "b,c".into()], vec![vec![1, 2], vec![3, 4]]).unwrap();
    assert_eq!(cm.to_csv(), "truth\\predicted,a,\"b,c\"\na,1,2\n\"b,c\",3,4\n");
    let text = MetricsReport::from_confusion(&cm).to_text();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines.iter().all(|l| l.len() == lines[0].len()), "{text}");
    assert!(ConfusionMatrix::from_counts(labels(2), vec![vec![1]]).is_err());
}

#[test]
fn report_json_round_trip() {
    let cm = ConfusionMatrix::from_counts(labels(2), vec![vec![8, 2], vec![1, 9]]).unwrap();
    let r = MetricsReport::from_confusion(&cm);
    let back: MetricsReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert_eq!(back, r);
    assert!(r.to_json().unwrap().contains("\"macro\""));
}

#[test]
fn few_shot_subsets() {
    let cm = ConfusionMatrix::from_counts(labels(3), vec![vec![4, 0, 0], vec![1, 2, 0], vec![0, 0, 7]]).unwrap();
    let r = MetricsReport::from_confusion(&cm);
    let rows = few_shot_report(&r, &["c2".into(), "c0".into()]).unwrap();
    assert_eq!(rows.iter().map(|c| c.label.as_str()).collect::<Vec<_>>(), ["c2", "c0"]);
    assert!(few_shot_report(&r, &[]).unwrap().is_empty());
    assert!(few_shot_report(&r, &["nope".into()]).is_err());
}

fn usage_model(counts: Vec<Vec<u64>>) -> EMemNdtModel {
    let embs: Vec<TextEmbedding> = (0..counts.len())
        .map(|i| TextEmbedding {
            label: format!("c{i}"),
            vector: vec![i as f64, 0.0],
        })
        .collect();
    let tree = build_tree(&embs, Linkage::Average).unwrap();
    let inst = generate_synthetic(&SyntheticConfig::uniform(1), 0).unwrap().instances[0].clone();
    let banks = MemoryBankSet {
        banks: counts
            .into_iter()
            .enumerate()
            .map(|(m, usage)| LeafMemoryBank {
                leaf_id: m,
                label: format!("c{m}"),
                eta: 1.0,
                prototypes: (0..usage.len())
                    .map(|k| MemoryPrototype {
                        feature: vec![1.0, k as f64],
                        instance_id: format!("p{m}-{k}"),
                        label: format!("c{m}"),
                        instance: inst.clone(),
                        graphs: Vec::new(),
                    })
                    .collect(),
                usage_counts: usage,
            })
            .collect(),
    };
    let cfg = NdtConfig {
        hidden: 4,
        out: 3,
        ..NdtConfig::default()
    };
    EMemNdtModel::new(tree, banks, "h", cfg).unwrap()
}

#[test]
fn utilization_rows() {
    let model = usage_model(vec![vec![5], vec![2, 2, 2, 2], vec![1, 0, 7, 3, 7]]);
    let rows = utilization_report(&model).unwrap();
    assert_eq!(rows[0].entropy, Some(0.0));
    assert!((rows[1].entropy.unwrap() - 4f64.ln()).abs() < 1e-12);
    assert_eq!(rows[1].zero_usage_fraction, 0.0);
    let top: Vec<(usize, u64)> = rows[2].top.iter().map(|t| (t.index, t.count)).collect();
    assert_eq!(top, [(2, 7), (4, 7), (3, 3)]);
    assert!((rows[2].zero_usage_fraction - 0.2).abs() < 1e-12);
    assert_eq!(rows[2].prototypes, 5);
    assert_eq!(utilization_to_text(&rows).lines().count(), 4);
}

#[test]
fn utilization_needs_usage() {
    let model = usage_model(vec![vec![0], vec![0, 0]]);
    assert!(utilization_report(&model).is_err());
    let partly = usage_model(vec![vec![0], vec![0, 3]]);
    assert_eq!(utilization_report(&partly).unwrap()[0].entropy, None);
}

#[test]
fn sweep_rejects_out_of_range_eta() {
    let data = generate_synthetic(&SyntheticConfig::uniform(1), 0).unwrap();
    let enc = crate::encoder::EncoderParams::zeros(
        crate::encoder::EncoderConfig {
            frames: data.uniform_len().unwrap(),
            classes: data.taxonomy.len(),
            ..Default::default()
        },
        data.taxonomy.labels().map(String::from).collect(),
    )
    .unwrap();
    let tree = usage_model(vec![vec![1], vec![1]]).tree().clone();
    let err = sweep_eta(&data, &data, &enc, &tree, &[0.5, 1.5], &NdtConfig::default(), &NdtTrainConfig::default());
    assert!(err.unwrap_err().to_string().contains("1.5"));
}
