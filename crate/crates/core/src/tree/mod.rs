//! Behavior taxonomy tree: one leaf per behavior label, binary inner nodes
//! obtained by clustering the label-description embeddings.

mod cluster;
mod text;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::BehaviorTaxonomy;
use crate::error::{Error, Result};

pub use cluster::{build_tree, euclidean, Linkage};
pub use text::{check_embeddings, fallback_embed, fallback_embeddings, load_label_embeddings, TextEmbedding};

pub const TREE_FORMAT: &str = "tree/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Leaf,
    Inner,
    Root,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub node_id: usize,
    pub kind: NodeKind,
    #[serde(default)]
    pub children: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl TreeNode {
    pub fn leaf(node_id: usize, label: String) -> Self {
        TreeNode {
            node_id,
            kind: NodeKind::Leaf,
            children: Vec::new(),
            label: Some(label),
            name: None,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.kind == NodeKind::Leaf
    }
}

/// A validated binary tree whose leaves are nodes `0..M` and whose inner
/// nodes are `M..2M-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<TreeNode>,
    root_id: usize,
    leaf_count: usize,
    parents: Vec<Option<usize>>,
}

#[derive(Serialize, Deserialize)]
struct TreeFile {
    version: String,
    root_id: usize,
    nodes: Vec<TreeNode>,
}

impl Tree {
    /// Checks every structural invariant; `nodes` may come in any order.
    pub fn new(mut nodes: Vec<TreeNode>, root_id: usize) -> Result<Self> {
        let bad = |msg: String| Err(Error::invalid(format!("tree: {msg}")));
        nodes.sort_by_key(|n| n.node_id);
        let total = nodes.len();
        let leaf_count = nodes.iter().filter(|n| n.is_leaf()).count();
        if leaf_count < 2 {
            return bad(format!("need at least 2 leaves, found {leaf_count}"));
        }
        if let Some(n) = nodes.iter().find(|n| !n.is_leaf() && n.children.len() != 2) {
            return bad(format!(
                "inner node {} has {} children; inner nodes must be binary",
                n.node_id,
                n.children.len()
            ));
        }
        if total != 2 * leaf_count - 1 {
            return bad(format!(
                "{leaf_count} leaves need {} inner nodes, found {}",
                leaf_count - 1,
                total - leaf_count
            ));
        }
        for (i, n) in nodes.iter().enumerate() {
            if n.node_id != i {
                return bad(format!("node ids must be 0..{total} without gaps or duplicates"));
            }
            if n.is_leaf() != (i < leaf_count) {
                return bad(format!("leaves must be nodes 0..{leaf_count}, node {i} breaks this"));
            }
            if n.is_leaf() {
                if !n.children.is_empty() {
                    return bad(format!("leaf {i} has children"));
                }
                match &n.label {
                    Some(l) if !l.is_empty() => {}
                    _ => return bad(format!("leaf {i} has no behavior label")),
                }
                if n.name.is_some() {
                    return bad(format!("leaf {i} carries a name; leaves are named by their label"));
                }
            } else if n.label.is_some() {
                return bad(format!("inner node {i} carries a behavior label"));
            }
        }
        let mut parents = vec![None; total];
        for n in &nodes {
            for &c in &n.children {
                if c >= total {
                    return bad(format!("node {} lists unknown child {c}", n.node_id));
                }
                if c == n.node_id {
                    return bad(format!("node {c} is its own child"));
                }
                if let Some(p) = parents[c] {
                    return bad(format!("node {c} has two parents ({p} and {})", n.node_id));
                }
                parents[c] = Some(n.node_id);
            }
        }
        let roots: Vec<usize> = (0..total).filter(|&i| parents[i].is_none()).collect();
        if roots != [root_id] {
            return bad(format!("root_id is {root_id} but parentless nodes are {roots:?}"));
        }
        for n in &nodes {
            let want_root = n.node_id == root_id;
            if !n.is_leaf() && want_root != (n.kind == NodeKind::Root) {
                return bad(format!("node {} has kind {:?}", n.node_id, n.kind));
            }
        }
        // one parent each plus a unique root: the tree is acyclic iff every
        // node is reachable from the root
        let mut seen = vec![false; total];
        let mut stack = vec![root_id];
        while let Some(id) = stack.pop() {
            if std::mem::replace(&mut seen[id], true) {
                return bad(format!("cycle through node {id}"));
            }
            stack.extend(&nodes[id].children);
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return bad(format!("node {i} is not reachable from the root (cycle)"));
        }
        let mut labels: Vec<&str> = nodes[..leaf_count].iter().filter_map(|n| n.label.as_deref()).collect();
        labels.sort_unstable();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return bad(format!("label {:?} appears on two leaves", w[0]));
        }
        Ok(Tree {
            nodes,
            root_id,
            leaf_count,
            parents,
        })
    }

    pub fn root_id(&self) -> usize {
        self.root_id
    }

    /// Number of leaves `M`.
    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> Option<&TreeNode> {
        self.nodes.get(id)
    }

    pub fn children(&self, id: usize) -> &[usize] {
        &self.nodes[id].children
    }

    pub fn parent(&self, id: usize) -> Option<usize> {
        self.parents[id]
    }

    pub fn leaf_label(&self, leaf: usize) -> &str {
        self.nodes[leaf].label.as_deref().expect("leaves carry labels")
    }

    pub fn leaf_labels(&self) -> impl Iterator<Item = &str> {
        (0..self.leaf_count).map(|i| self.leaf_label(i))
    }

    pub fn leaf_of_label(&self, label: &str) -> Option<usize> {
        (0..self.leaf_count).find(|&i| self.leaf_label(i) == label)
    }

    /// Node ids from the root down to `node`, both included.
    pub fn path_to(&self, node: usize) -> Vec<usize> {
        let mut path = vec![node];
        let mut cur = node;
        while let Some(p) = self.parents[cur] {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    pub fn depth(&self, node: usize) -> usize {
        self.path_to(node).len() - 1
    }

    /// Inner nodes ordered so that every node comes after its children.
    pub fn inner_post_order(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.leaf_count - 1);
        let mut stack = vec![(self.root_id, false)];
        while let Some((id, expanded)) = stack.pop() {
            if self.nodes[id].is_leaf() {
                continue;
            }
            if expanded {
                order.push(id);
            } else {
                stack.push((id, true));
                for &c in self.children(id).iter().rev() {
                    stack.push((c, false));
                }
            }
        }
        order
    }

    /// Leaf labels must be exactly the taxonomy labels.
    pub fn check_taxonomy(&self, taxonomy: &BehaviorTaxonomy) -> Result<()> {
        for label in taxonomy.labels() {
            if self.leaf_of_label(label).is_none() {
                return Err(Error::invalid(format!("taxonomy label {label:?} has no leaf in the tree")));
            }
        }
        if self.leaf_count != taxonomy.len() {
            return Err(Error::invalid(format!(
                "tree has {} leaves, taxonomy has {} labels",
                self.leaf_count,
                taxonomy.len()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = TreeFile {
            version: TREE_FORMAT.into(),
            root_id: self.root_id,
            nodes: self.nodes.clone(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::json("serializing tree", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TreeFile = serde_json::from_str(text).map_err(|e| Error::json("parsing tree", e))?;
        if file.version != TREE_FORMAT {
            return Err(Error::invalid(format!(
                "tree version {:?}, expected {TREE_FORMAT:?}",
                file.version
            )));
        }
        Tree::new(file.nodes, file.root_id)
    }
}

impl Serialize for Tree {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        TreeFile {
            version: TREE_FORMAT.into(),
            root_id: self.root_id,
            nodes: self.nodes.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Tree {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let file = TreeFile::deserialize(deserializer)?;
        if file.version != TREE_FORMAT {
            return Err(serde::de::Error::custom(format!("tree version {:?}", file.version)));
        }
        Tree::new(file.nodes, file.root_id).map_err(serde::de::Error::custom)
    }
}

pub fn load_tree(path: impl AsRef<Path>) -> Result<Tree> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Tree::from_json(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

pub fn save_tree(tree: &Tree, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, tree.to_json()? + "\n").map_err(|e| Error::io(path, e))
}

/// Copy of `tree` with a human-readable name on an inner or root node.
pub fn annotate_node(tree: &Tree, node_id: usize, name: &str) -> Result<Tree> {
    let node = tree
        .node(node_id)
        .ok_or_else(|| Error::precondition(format!("no node {node_id} in the tree")))?;
    if node.is_leaf() {
        return Err(Error::precondition(format!(
            "node {node_id} is a leaf; its name is the behavior label {:?}",
            node.label.as_deref().unwrap_or_default()
        )));
    }
    let mut out = tree.clone();
    out.nodes[node_id].name = Some(name.to_string());
    Ok(out)
}
