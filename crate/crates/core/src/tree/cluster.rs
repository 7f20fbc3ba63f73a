//! Agglomerative clustering of label embeddings into a binary tree.

use serde::{Deserialize, Serialize};

use super::text::{check_embeddings, TextEmbedding};
use super::{NodeKind, Tree, TreeNode};
use crate::error::{Error, Result};

/// Inter-cluster distance derived from Euclidean point distances.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    #[default]
    Average,
    Single,
    Complete,
}

impl Linkage {
    /// Linkage distance between two clusters given as leaf index sets.
    pub fn distance(self, dist: &[Vec<f64>], a: &[usize], b: &[usize]) -> f64 {
        let pairs = a.iter().flat_map(|&i| b.iter().map(move |&j| dist[i][j]));
        match self {
            Linkage::Average => pairs.sum::<f64>() / (a.len() * b.len()) as f64,
            Linkage::Single => pairs.fold(f64::INFINITY, f64::min),
            Linkage::Complete => pairs.fold(0.0, f64::max),
        }
    }
}

impl std::str::FromStr for Linkage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Linkage::Average),
            "single" => Ok(Linkage::Single),
            "complete" => Ok(Linkage::Complete),
            other => Err(Error::precondition(format!(
                "unknown linkage {other:?} (expected average, single or complete)"
            ))),
        }
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Merges the closest pair of clusters until one remains. Leaf `i` is
/// `embeddings[i]`; inner nodes are numbered `M, M+1, ...` in merge order.
/// Equal distances go to the lexicographically smallest node-id pair.
pub fn build_tree(embeddings: &[TextEmbedding], linkage: Linkage) -> Result<Tree> {
    let m = embeddings.len();
    if m < 2 {
        return Err(Error::precondition(format!("need at least 2 embeddings, got {m}")));
    }
    check_embeddings(embeddings)?;
    let dist: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|a| embeddings.iter().map(|b| euclidean(&a.vector, &b.vector)).collect())
        .collect();

    let mut nodes: Vec<TreeNode> = embeddings
        .iter()
        .enumerate()
        .map(|(i, e)| TreeNode::leaf(i, e.label.clone()))
        .collect();
    // (node id, member leaves), kept sorted by node id
    let mut active: Vec<(usize, Vec<usize>)> = (0..m).map(|i| (i, vec![i])).collect();
    while active.len() > 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for x in 0..active.len() {
            for y in x + 1..active.len() {
                let d = linkage.distance(&dist, &active[x].1, &active[y].1);
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, x, y));
                }
            }
        }
        let (_, x, y) = best.expect("two or more active clusters");
        let (id_b, members_b) = active.remove(y);
        let (id_a, mut members_a) = active.remove(x);
        members_a.extend(members_b);
        let id = nodes.len();
        let kind = if active.is_empty() { NodeKind::Root } else { NodeKind::Inner };
        nodes.push(TreeNode {
            node_id: id,
            kind,
            children: vec![id_a, id_b],
            label: None,
            name: None,
        });
        active.push((id, members_a));
    }
    Tree::new(nodes, active[0].0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points(coords: &[(f64, f64)]) -> Vec<TextEmbedding> {
        coords
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| TextEmbedding {
                label: format!("p{i}"),
                vector: vec![x, y],
            })
            .collect()
    }

    #[test]
    fn two_leaves_join_at_the_root() {
        let tree = build_tree(&points(&[(0.0, 0.0), (3.0, 4.0)]), Linkage::Average).unwrap();
        assert_eq!(tree.root_id(), 2);
        assert_eq!(tree.children(2), &[0, 1]);
    }

    #[test]
    fn two_tight_pairs_merge_first() {
        let tree = build_tree(
            &points(&[(0.0, 0.0), (0.0, 1.0), (10.0, 0.0), (10.0, 1.0)]),
            Linkage::Average,
        )
        .unwrap();
        assert_eq!(tree.children(4), &[0, 1]);
        assert_eq!(tree.children(5), &[2, 3]);
        assert_eq!(tree.children(6), &[4, 5]);
        assert_eq!(tree.root_id(), 6);
    }

    #[test]
    fn five_leaves_give_four_inner_nodes_in_merge_order() {
        let tree = build_tree(
            &points(&[(0.0, 0.0), (5.0, 0.0), (0.0, 1.5), (9.0, 9.0), (5.0, 2.5)]),
            Linkage::Complete,
        )
        .unwrap();
        assert_eq!(tree.leaf_count(), 5);
        assert_eq!(tree.node_count(), 9);
        let inner: Vec<usize> = tree.nodes().iter().filter(|n| n.kind != NodeKind::Leaf).map(|n| n.node_id).collect();
        assert_eq!(inner, vec![5, 6, 7, 8]);
        assert_eq!(tree.children(5), &[0, 2]);
        assert_eq!(tree.children(6), &[1, 4]);
    }

    #[test]
    fn exact_ties_take_the_smallest_pair() {
        // unit square: four equal nearest distances
        let tree = build_tree(
            &points(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]),
            Linkage::Single,
        )
        .unwrap();
        assert_eq!(tree.children(4), &[0, 1]);
        assert_eq!(tree.children(5), &[2, 3]);
    }

    #[test]
    fn linkages_differ_on_a_chain() {
        let dist = vec![vec![0.0, 1.0, 4.0], vec![1.0, 0.0, 2.0], vec![4.0, 2.0, 0.0]];
        assert_eq!(Linkage::Single.distance(&dist, &[0, 1], &[2]), 2.0);
        assert_eq!(Linkage::Complete.distance(&dist, &[0, 1], &[2]), 4.0);
        assert_eq!(Linkage::Average.distance(&dist, &[0, 1], &[2]), 3.0);
    }

    #[test]
    fn fewer_than_two_embeddings_is_an_error() {
        assert!(build_tree(&points(&[(0.0, 1.0)]), Linkage::Average).is_err());
    }
}
