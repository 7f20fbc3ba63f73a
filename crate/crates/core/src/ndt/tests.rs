use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::infer::LeafDistribution;
use super::train::path_nll;
use super::*;
use crate::data::{generate_synthetic, synthetic_taxonomy, Instance, SyntheticConfig};
use crate::memory::{LeafMemoryBank, MemoryPrototype};
use crate::tree::{build_tree, fallback_embeddings, Linkage, NodeKind, TextEmbedding, TreeNode};

fn some_instance() -> Instance {
    generate_synthetic(&SyntheticConfig::uniform(1), 0).unwrap().instances[0].clone()
}

fn point_tree(points: &[(f64, f64)]) -> Tree {
    let embs: Vec<TextEmbedding> = points
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| TextEmbedding {
            label: format!("b{i}"),
            vector: vec![x, y],
        })
        .collect();
    build_tree(&embs, Linkage::Average).unwrap()
}

/// Root with children (inner 3, leaf 2); node 3 has leaves 0 and 1.
fn lopsided_tree() -> Tree {
    let leaf = |i: usize| TreeNode::leaf(i, format!("b{i}"));
    let inner = |id: usize, kind, children: Vec<usize>| TreeNode {
        node_id: id,
        kind,
        children,
        label: None,
        name: None,
    };
    Tree::new(
        vec![leaf(0), leaf(1), leaf(2), inner(3, NodeKind::Inner, vec![0, 1]), inner(4, NodeKind::Root, vec![3, 2])],
        4,
    )
    .unwrap()
}

fn banks_for(tree: &Tree, features: Vec<Vec<Vec<f64>>>) -> MemoryBankSet {
    let inst = some_instance();
    MemoryBankSet {
        banks: features
            .into_iter()
            .enumerate()
            .map(|(m, feats)| LeafMemoryBank {
                leaf_id: m,
                label: tree.leaf_label(m).to_string(),
                eta: 1.0,
                usage_counts: vec![0; feats.len()],
                prototypes: feats
                    .into_iter()
                    .enumerate()
                    .map(|(k, f)| MemoryPrototype {
                        feature: f,
                        instance_id: format!("leaf{m}-proto{k}"),
                        label: tree.leaf_label(m).to_string(),
                        instance: inst.clone(),
                        graphs: Vec::new(),
                    })
                    .collect(),
            })
            .collect(),
    }
}

fn random_vec(rng: &mut ChaCha8Rng, width: usize) -> Vec<f64> {
    (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn random_model(tree: Tree, width: usize, per_leaf: usize, config: NdtConfig, seed: u64) -> EMemNdtModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = (0..tree.leaf_count())
        .map(|_| (0..per_leaf).map(|_| random_vec(&mut rng, width)).collect())
        .collect();
    let banks = banks_for(&tree, features);
    EMemNdtModel::new(tree, banks, "test-encoder", config).unwrap()
}

fn small_config() -> NdtConfig {
    NdtConfig {
        hidden: 8,
        out: 5,
        ..NdtConfig::default()
    }
}

/// Two-leaf model whose transforms are `tanh` followed by the identity, so
/// hand-picked hidden activations fix every cosine.
fn identity_model(g_hidden: [f64; 2], protos_hidden: Vec<[f64; 2]>) -> (EMemNdtModel, Vec<f64>) {
    let tree = point_tree(&[(0.0, 0.0), (1.0, 0.0)]);
    let atanh = |h: [f64; 2]| vec![h[0].atanh(), h[1].atanh()];
    let feats = vec![protos_hidden.iter().map(|&h| atanh(h)).collect(), vec![vec![1.0, 1.0]]];
    let banks = banks_for(&tree, feats);
    let cfg = NdtConfig {
        hidden: 2,
        out: 2,
        ..NdtConfig::default()
    };
    let mut model = EMemNdtModel::new(tree, banks, "h", cfg).unwrap();
    let eye = [1.0, 0.0, 0.0, 1.0];
    for leaf in 0..2 {
        let ids = model.transforms[leaf];
        model.params_mut().slice_mut(ids.w1).copy_from_slice(&eye);
        model.params_mut().slice_mut(ids.w2).copy_from_slice(&eye);
        model.params_mut().slice_mut(ids.b1).fill(0.0);
        model.params_mut().slice_mut(ids.b2).fill(0.0);
    }
    (model, atanh(g_hidden))
}

#[test]
fn identical_transformed_vectors_score_rho() {
    let (model, g) = identity_model([0.3, -0.4], vec![[0.3, -0.4]]);
    let (gamma, best) = leaf_similarity(&g, 0, &model).unwrap();
    assert!((gamma - 30.0).abs() < 1e-12);
    assert_eq!(best, 0);
}

#[test]
fn orthogonal_transformed_vectors_score_zero() {
    let (model, g) = identity_model([0.6, 0.0], vec![[0.0, 0.5]]);
    assert_eq!(leaf_similarity(&g, 0, &model).unwrap().0, 0.0);
}

#[test]
fn max_aggregation_of_two_cosines() {
    let r: f64 = 0.6;
    let (model, g) = identity_model([r, 0.0], vec![[0.5 * r, 0.75f64.sqrt() * r], [0.8 * r, 0.6 * r]]);
    let (gamma, best) = leaf_similarity(&g, 0, &model).unwrap();
    assert!((gamma - 24.0).abs() < 1e-9, "{gamma}");
    assert_eq!(best, 1);

    let mut mean_model = model.clone();
    mean_model.config.aggregation = Aggregation::Mean;
    let (gamma, best) = leaf_similarity(&g, 0, &mean_model).unwrap();
    assert!((gamma - 19.5).abs() < 1e-9, "{gamma}");
    assert_eq!(best, 1);
}

#[test]
fn node_scores_are_child_means() {
    let pair = point_tree(&[(0.0, 0.0), (1.0, 0.0)]);
    assert_eq!(node_scores_from_leaves(&pair, &[24.0, 12.0]).unwrap().gamma[2], 18.0);
    let four = point_tree(&[(0.0, 0.0), (0.0, 1.0), (10.0, 0.0), (10.0, 1.0)]);
    let scores = node_scores_from_leaves(&four, &[10.0, 20.0, 30.0, 40.0]).unwrap();
    assert_eq!(scores.gamma[4], 15.0);
    assert_eq!(scores.gamma[5], 35.0);
    assert_eq!(scores.gamma[6], 25.0);
    assert!(node_scores_from_leaves(&four, &[1.0]).is_err());
}

#[test]
fn equal_children_split_evenly() {
    let pair = point_tree(&[(0.0, 0.0), (1.0, 0.0)]);
    let dist = lla(&NodeScores { gamma: vec![3.0, 3.0, 3.0] }, &pair);
    assert_eq!(dist.s, vec![0.5, 0.5]);
}

#[test]
fn depth_two_products() {
    let tree = lopsided_tree();
    // root sees (inner 3, leaf 2) = (2, 0); node 3 sees (1, 1)
    let dist = lla(&NodeScores { gamma: vec![1.0, 1.0, 0.0, 2.0, 0.0] }, &tree);
    let top = 1.0 / (1.0 + (-2.0f64).exp());
    assert!((top - 0.8808).abs() < 1e-4);
    assert!((dist.s[0] - top * 0.5).abs() < 1e-12);
    assert!((dist.s[1] - top * 0.5).abs() < 1e-12);
    assert!((dist.s[2] - (1.0 - top)).abs() < 1e-12);
}

#[test]
fn distributions_normalize() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tree = fallback_tree();
    for _ in 0..50 {
        let leaf: Vec<f64> = (0..8).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let scores = node_scores_from_leaves(&tree, &leaf).unwrap();
        let (dist, child) = lla_with_child_probs(&scores, &tree);
        assert!((dist.s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(dist.s.iter().all(|&p| p > 0.0 && p < 1.0));
        for probs in child.iter().filter(|c| !c.is_empty()) {
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn scaling_scores_keeps_every_nodes_choice() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tree = fallback_tree();
    for _ in 0..50 {
        let leaf: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let base = lla_with_child_probs(&node_scores_from_leaves(&tree, &leaf).unwrap(), &tree).1;
        let factor = rng.gen_range(1.0..50.0);
        let scaled: Vec<f64> = leaf.iter().map(|g| g * factor).collect();
        let after = lla_with_child_probs(&node_scores_from_leaves(&tree, &scaled).unwrap(), &tree).1;
        for (a, b) in base.iter().zip(&after).filter(|(a, _)| !a.is_empty()) {
            assert_eq!(a[0] >= a[1], b[0] >= b[1]);
        }
    }
}

#[test]
fn argmax_breaks_ties_toward_the_smaller_leaf() {
    assert_eq!(LeafDistribution { s: vec![0.7, 0.2, 0.1] }.argmax(), 0);
    assert_eq!(LeafDistribution { s: vec![0.5, 0.5] }.argmax(), 0);
    assert_eq!(LeafDistribution { s: vec![0.2, 0.4, 0.4] }.argmax(), 1);
}

fn fallback_tree() -> Tree {
    build_tree(&fallback_embeddings(&synthetic_taxonomy(), 256, 0).unwrap(), Linkage::Average).unwrap()
}

#[test]
fn prediction_matches_recomputed_composition() {
    let model = random_model(fallback_tree(), 6, 3, small_config(), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let g = random_vec(&mut rng, 6);
        let (label, dist) = predict(&g, &model).unwrap();
        let again = lla(&mpm(&g, &model).unwrap(), model.tree());
        assert_eq!(dist, again);
        let best = (0..8).fold(0, |b, i| if again.s[i] > again.s[b] { i } else { b });
        assert_eq!(label, model.tree().leaf_label(best));
    }
}

#[test]
fn symmetric_initialization_is_uniform_on_a_balanced_tree() {
    let cfg = NdtConfig {
        init: InitMode::Symmetric,
        ..small_config()
    };
    let model = random_model(fallback_tree(), 6, 4, cfg, 3);
    let g = vec![0.3, -0.1, 0.5, 0.2, -0.7, 0.9];
    let (_, dist) = predict(&g, &model).unwrap();
    assert!(dist.s.iter().all(|&p| (p - 0.125).abs() < 1e-12), "{:?}", dist.s);
    let batch: Vec<(Vec<f64>, usize)> = (0..8).map(|leaf| (g.clone(), leaf)).collect();
    assert!((ndt_loss(&batch, &model).unwrap() - 8f64.ln()).abs() < 1e-12);
}

#[test]
fn loss_examples() {
    let cfg = NdtConfig {
        init: InitMode::Symmetric,
        ..small_config()
    };
    let model = random_model(lopsided_tree(), 4, 2, cfg, 3);
    let g = vec![0.1, 0.2, 0.3, 0.4];
    // uniform splits: s = (0.25, 0.25, 0.5)
    let batch = vec![(g.clone(), 2), (g.clone(), 0)];
    let loss = ndt_loss(&batch, &model).unwrap();
    assert!((loss - 1.0397).abs() < 1e-4, "{loss}");
    assert!(ndt_loss(&[], &model).is_err());

    let certain = NodeScores {
        gamma: vec![1000.0, 0.0, 0.0, 1000.0, 0.0],
    };
    assert_eq!(path_nll(model.tree(), &certain, 0), 0.0);
}

fn grad_batch(width: usize, leaves: usize, n: usize, seed: u64) -> Vec<(Vec<f64>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| (random_vec(&mut rng, width), i % leaves)).collect()
}

#[test]
fn gradients_match_finite_differences() {
    for (aggregation, shared) in [(Aggregation::Max, false), (Aggregation::Mean, false), (Aggregation::Max, true)] {
        let cfg = NdtConfig {
            aggregation,
            shared_transform: shared,
            ..small_config()
        };
        let model = random_model(fallback_tree(), 6, 3, cfg, 7);
        let batch = grad_batch(6, 8, 5, 8);
        let report = ndt_grad_check(&model, &batch, 1e-5, 150, 9).unwrap();
        assert!(report.coordinates.len() >= 100);
        assert!(
            report.max_rel_error <= 1e-4,
            "{aggregation:?} shared={shared}: {:?}",
            report.worst
        );
    }
}

#[test]
fn grad_check_epsilon_range() {
    let model = random_model(fallback_tree(), 6, 3, small_config(), 7);
    let batch = grad_batch(6, 8, 2, 8);
    assert!(ndt_grad_check(&model, &batch, 0.1, 100, 0).is_err());
}

#[test]
fn one_small_step_decreases_the_batch_loss() {
    let model = random_model(fallback_tree(), 6, 3, small_config(), 11);
    let batch = grad_batch(6, 8, 16, 12);
    let (features, leaves): (Vec<Vec<f64>>, Vec<usize>) = batch.iter().cloned().unzip();
    let cfg = NdtTrainConfig {
        epochs: 1,
        lr: 1e-4,
        batch_size: 64,
        ..NdtTrainConfig::default()
    };
    let (trained, history) = train_ndt_features(&model, &features, &leaves, &cfg).unwrap();
    assert_eq!(history.epoch_loss.len(), 1);
    assert!(ndt_loss(&batch, &trained).unwrap() < ndt_loss(&batch, &model).unwrap());
    assert_eq!(trained.banks(), model.banks());
}

#[test]
fn training_is_deterministic() {
    let model = random_model(fallback_tree(), 6, 3, small_config(), 11);
    let batch = grad_batch(6, 8, 40, 12);
    let (features, leaves): (Vec<Vec<f64>>, Vec<usize>) = batch.into_iter().unzip();
    let cfg = NdtTrainConfig {
        epochs: 2,
        batch_size: 16,
        seed: 3,
        ..NdtTrainConfig::default()
    };
    let a = train_ndt_features(&model, &features, &leaves, &cfg).unwrap().0;
    let b = train_ndt_features(&model, &features, &leaves, &cfg).unwrap().0;
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_ne!(a.params(), model.params());
}

#[test]
fn defaults() {
    let t = NdtTrainConfig::default();
    assert_eq!((t.epochs, t.lr, t.weight_decay, t.batch_size), (5, 5e-5, 1e-6, 64));
    let c = NdtConfig::default();
    assert_eq!((c.hidden, c.out, c.rho, c.aggregation), (64, 32, 30.0, Aggregation::Max));
}

#[test]
fn save_load_save_is_byte_identical() {
    let mut model = random_model(fallback_tree(), 6, 3, small_config(), 13);
    model.banks_mut().record_usage(2, 1);
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a.json");
    let second = dir.path().join("b.json");
    save_model(&model, &first).unwrap();
    let loaded = load_model(&first).unwrap();
    save_model(&loaded, &second).unwrap();
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
    assert_eq!(loaded, model);
    let g = vec![0.2, 0.1, -0.3, 0.5, 0.0, 0.4];
    assert_eq!(predict(&g, &loaded).unwrap(), predict(&g, &model).unwrap());
}

#[test]
fn load_rejects_bad_rho_and_version() {
    let model = random_model(point_tree(&[(0.0, 0.0), (1.0, 0.0)]), 3, 1, small_config(), 1);
    let mut value: serde_json::Value = serde_json::from_str(&model.to_json().unwrap()).unwrap();
    value["config"]["rho"] = serde_json::json!(0.5);
    let err = EMemNdtModel::from_json(&value.to_string()).unwrap_err().to_string();
    assert!(err.contains("rho"), "{err}");
    value["config"]["rho"] = serde_json::json!(30.0);
    value["version"] = serde_json::json!("emem-ndt/v0");
    assert!(EMemNdtModel::from_json(&value.to_string()).is_err());
    assert!(EMemNdtModel::new(
        model.tree().clone(),
        model.banks().clone(),
        "x",
        NdtConfig {
            rho: 1.0,
            ..small_config()
        }
    )
    .is_err());
}

#[test]
fn traces_are_sound() {
    let model = random_model(fallback_tree(), 6, 4, small_config(), 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for i in 0..20 {
        let g = random_vec(&mut rng, 6);
        let trace = explain_embedding(&format!("q{i}"), &g, &model).unwrap();
        trace.verify(&model, &g).unwrap();
        assert_eq!(trace.path.len(), model.tree().depth(trace.predicted_leaf) + 1);
        assert!(trace.prototype.instance_id.starts_with(&format!("leaf{}-", trace.predicted_leaf)));
        let reach = trace.path.last().unwrap().reach_probability;
        assert!((reach - trace.leaf_probability).abs() < 1e-12);

        let mut forged = trace.clone();
        forged.prototype.index = (trace.prototype.index + 1) % 4;
        forged.prototype.instance_id = format!("leaf{}-proto{}", trace.predicted_leaf, forged.prototype.index);
        assert!(forged.verify(&model, &g).is_err());
    }
}

#[test]
fn zero_transform_output_is_a_numeric_error() {
    let mut model = random_model(point_tree(&[(0.0, 0.0), (1.0, 0.0)]), 3, 1, small_config(), 1);
    model.params_mut().as_mut_slice().fill(0.0);
    let err = predict(&[1.0, 0.0, 0.0], &model).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
}

#[test]
fn prototype_matrix_shapes() {
    let model = random_model(fallback_tree(), 6, 3, small_config(), 1);
    let t = model.transform(0);
    assert_eq!((t.hidden_width(), t.output_width()), (8, 5));
    assert_eq!(t.apply(Array2::zeros((3, 6)).view()).dim(), (3, 5));
}
