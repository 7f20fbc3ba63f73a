use serde::{Deserialize, Serialize};

use super::{AgentState, Instance};

/// Rule deciding which agent pairs in a frame are connected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EdgePolicy {
    /// Every pair of agents present in the frame.
    #[default]
    Complete,
    /// Pairs whose 3D center distance is at most `meters`.
    Radius { meters: f64 },
}

/// Per-frame interaction graph. Edges are undirected and stored once with
/// the lower uid first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionGraph {
    pub vertices: Vec<AgentState>,
    pub edges: Vec<(i64, i64)>,
    pub target_uid: i64,
}

impl InteractionGraph {
    pub fn target_index(&self) -> usize {
        self.vertices
            .iter()
            .position(|v| v.uid == self.target_uid)
            .expect("graph contains its target")
    }

    /// Vertex indices adjacent to `index`, in edge order.
    pub fn neighbors(&self, index: usize) -> Vec<usize> {
        let uid = self.vertices[index].uid;
        let position = |u: i64| self.vertices.iter().position(|v| v.uid == u);
        self.edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == uid {
                    position(b)
                } else if b == uid {
                    position(a)
                } else {
                    None
                }
            })
            .collect()
    }
}

/// One graph per frame of `instance`; vertices are the frame's agents.
pub fn build_interaction_graphs(instance: &Instance, policy: EdgePolicy) -> Vec<InteractionGraph> {
    instance
        .frames
        .iter()
        .map(|frame| {
            let agents = &frame.agents;
            let mut edges = Vec::new();
            for i in 0..agents.len() {
                for j in i + 1..agents.len() {
                    let connected = match policy {
                        EdgePolicy::Complete => true,
                        EdgePolicy::Radius { meters } => agents[i].distance(&agents[j]) <= meters,
                    };
                    if connected {
                        let (a, b) = (agents[i].uid, agents[j].uid);
                        edges.push((a.min(b), a.max(b)));
                    }
                }
            }
            edges.sort_unstable();
            InteractionGraph {
                vertices: agents.clone(),
                edges,
                target_uid: frame.target_uid,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AgentClass, Frame};

    fn agent(uid: i64, x: f64, y: f64) -> AgentState {
        AgentState {
            uid,
            class: AgentClass::Car,
            x,
            y,
            z: 0.0,
            orientation: 0.0,
        }
    }

    fn instance(agents: Vec<AgentState>) -> Instance {
        Instance {
            instance_id: "g".into(),
            frame_rate_hz: 10.0,
            ttb_frames: 1,
            label: "l".into(),
            frames: vec![Frame {
                t: 0,
                target_uid: agents[0].uid,
                agents,
            }],
        }
    }

    #[test]
    fn complete_policy_connects_every_pair() {
        let inst = instance(vec![agent(3, 0.0, 0.0), agent(1, 5.0, 0.0), agent(2, 9.0, 9.0)]);
        let graphs = build_interaction_graphs(&inst, EdgePolicy::Complete);
        assert_eq!(graphs.len(), 1);
        assert_eq!(graphs[0].edges, vec![(1, 2), (1, 3), (2, 3)]);
        assert_eq!(graphs[0].vertices.len(), 3);
    }

    #[test]
    fn lone_target_has_no_edges() {
        let inst = instance(vec![agent(7, 0.0, 0.0)]);
        let g = &build_interaction_graphs(&inst, EdgePolicy::Complete)[0];
        assert!(g.edges.is_empty());
        assert_eq!(g.vertices.len(), 1);
        assert!(g.neighbors(0).is_empty());
    }

    #[test]
    fn radius_policy_keeps_close_pairs_only() {
        // right triangle with legs 30 and 40: pairwise distances 30, 40, 50,
        // so only the 30 m pair survives a 30 m radius
        let inst = instance(vec![agent(1, 0.0, 0.0), agent(2, 30.0, 0.0), agent(3, 0.0, 40.0)]);
        let g = &build_interaction_graphs(&inst, EdgePolicy::Radius { meters: 30.0 })[0];
        assert_eq!(g.edges, vec![(1, 2)]);

        // pairwise 10, 40, 50: agents on a line at 0, 10, 50
        let inst = instance(vec![agent(1, 0.0, 0.0), agent(2, 10.0, 0.0), agent(3, 50.0, 0.0)]);
        let g = &build_interaction_graphs(&inst, EdgePolicy::Radius { meters: 30.0 })[0];
        assert_eq!(g.edges, vec![(1, 2)]);
        assert_eq!(g.neighbors(g.target_index()), vec![1]);
    }
}
