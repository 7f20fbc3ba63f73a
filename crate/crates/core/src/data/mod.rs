//! Instances, frames, agents and behavior taxonomies.
//!
//! An [`Instance`] is one target vehicle observed for `T` consecutive
//! frames together with the behavior label it exhibits `ttb_frames` frames
//! after the last observation.

mod graph;
mod io;
mod split;
mod synthetic;

use std::collections::BTreeSet;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use graph::{build_interaction_graphs, EdgePolicy, InteractionGraph};
pub use io::{load_dataset, load_dataset_with_taxonomy, load_taxonomy, save_dataset, save_taxonomy};
pub use split::split;
pub use synthetic::{generate_synthetic, synthetic_taxonomy, SyntheticConfig, SYNTHETIC_LABELS};

/// Road agent category. Vehicles plus vulnerable road users.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentClass {
    Car,
    Van,
    Truck,
    Bus,
    Cyclist,
    Pedestrian,
}

impl AgentClass {
    pub const ALL: [AgentClass; 6] = [
        AgentClass::Car,
        AgentClass::Van,
        AgentClass::Truck,
        AgentClass::Bus,
        AgentClass::Cyclist,
        AgentClass::Pedestrian,
    ];

    pub const COUNT: usize = Self::ALL.len();

    /// Row of the class in embedding tables.
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Maps an angle onto `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly 2*pi
    if r >= PI {
        r - 2.0 * PI
    } else {
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub uid: i64,
    pub class: AgentClass,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Heading in radians, `[-pi, pi)`.
    pub orientation: f64,
}

impl AgentState {
    pub fn distance(&self, other: &AgentState) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    fn validate(&self) -> std::result::Result<(), String> {
        for (name, v) in [("x", self.x), ("y", self.y), ("z", self.z)] {
            if !v.is_finite() {
                return Err(format!("agent {} has non-finite {name}", self.uid));
            }
        }
        if !(self.orientation.is_finite() && (-PI..PI).contains(&self.orientation)) {
            return Err(format!(
                "agent {} orientation {} outside [-pi, pi)",
                self.uid, self.orientation
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub t: u32,
    pub target_uid: i64,
    pub agents: Vec<AgentState>,
}

impl Frame {
    pub fn target(&self) -> &AgentState {
        self.agents
            .iter()
            .find(|a| a.uid == self.target_uid)
            .expect("validated frame contains its target")
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.agents.is_empty() {
            return Err("frame has no agents".into());
        }
        let mut seen = BTreeSet::new();
        for agent in &self.agents {
            if !seen.insert(agent.uid) {
                return Err(format!("duplicate agent uid {}", agent.uid));
            }
            agent.validate()?;
        }
        if !seen.contains(&self.target_uid) {
            return Err(format!("target_uid {} not among the agents", self.target_uid));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub instance_id: String,
    pub frame_rate_hz: f64,
    /// Prediction horizon in frames.
    pub ttb_frames: u32,
    pub label: String,
    pub frames: Vec<Frame>,
}

impl Instance {
    /// Observation length `T`.
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn target_uid(&self) -> i64 {
        self.frames[0].target_uid
    }

    /// Prediction horizon in seconds.
    pub fn ttb_seconds(&self) -> f64 {
        self.ttb_frames as f64 / self.frame_rate_hz
    }

    /// Checks every structural invariant, naming the instance and the
    /// offending field or frame on failure.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::invalid(format!("instance {}: {msg}", self.instance_id)));
        if self.instance_id.is_empty() {
            return Err(Error::invalid("instance with empty instance_id"));
        }
        if !(self.frame_rate_hz.is_finite() && self.frame_rate_hz > 0.0) {
            return fail(format!("frame_rate_hz must be positive, got {}", self.frame_rate_hz));
        }
        if self.ttb_frames < 1 {
            return fail("ttb_frames must be >= 1".into());
        }
        if self.label.is_empty() {
            return fail("empty label".into());
        }
        if self.frames.is_empty() {
            return fail("no frames".into());
        }
        let target = self.frames[0].target_uid;
        for (i, frame) in self.frames.iter().enumerate() {
            if let Err(msg) = frame.validate() {
                return fail(format!("frame {i}: {msg}"));
            }
            if frame.target_uid != target {
                return fail(format!(
                    "frame {i}: target_uid {} differs from {target}",
                    frame.target_uid
                ));
            }
            if i > 0 && frame.t != self.frames[i - 1].t + 1 {
                return fail(format!(
                    "frame {i}: t = {} does not follow t = {}",
                    frame.t,
                    self.frames[i - 1].t
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorClass {
    pub label: String,
    pub description: String,
}

/// Ordered set of behavior labels with their text descriptions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BehaviorTaxonomy {
    pub classes: Vec<BehaviorClass>,
}

impl BehaviorTaxonomy {
    pub fn new(classes: Vec<BehaviorClass>) -> Result<Self> {
        let taxonomy = BehaviorTaxonomy { classes };
        taxonomy.validate()?;
        Ok(taxonomy)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::invalid(format!(
                "taxonomy needs at least 2 labels, got {}",
                self.classes.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for class in &self.classes {
            if class.label.is_empty() {
                return Err(Error::invalid("taxonomy contains an empty label"));
            }
            if class.description.trim().is_empty() {
                return Err(Error::invalid(format!(
                    "taxonomy label {:?} has an empty description",
                    class.label
                )));
            }
            if !seen.insert(class.label.as_str()) {
                return Err(Error::invalid(format!("duplicate taxonomy label {:?}", class.label)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(|c| c.label.as_str())
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.label == label)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub instances: Vec<Instance>,
    pub taxonomy: BehaviorTaxonomy,
}

impl Dataset {
    pub fn new(instances: Vec<Instance>, taxonomy: BehaviorTaxonomy) -> Result<Self> {
        let dataset = Dataset {
            instances,
            taxonomy,
        };
        dataset.validate()?;
        Ok(dataset)
    }

    pub fn validate(&self) -> Result<()> {
        self.taxonomy.validate()?;
        let mut ids = BTreeSet::new();
        for inst in &self.instances {
            inst.validate()?;
            if !ids.insert(inst.instance_id.as_str()) {
                return Err(Error::invalid(format!("duplicate instance_id {}", inst.instance_id)));
            }
            if self.taxonomy.index_of(&inst.label).is_none() {
                return Err(Error::invalid(format!(
                    "instance {}: label {:?} not in taxonomy",
                    inst.instance_id, inst.label
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// The common observation length, or an error when instances disagree.
    pub fn uniform_len(&self) -> Result<usize> {
        let first = self
            .instances
            .first()
            .ok_or_else(|| Error::precondition("dataset is empty"))?
            .len();
        if let Some(bad) = self.instances.iter().find(|i| i.len() != first) {
            return Err(Error::invalid(format!(
                "instance {} has {} frames, expected uniform T = {first}",
                bad.instance_id,
                bad.len()
            )));
        }
        Ok(first)
    }

    /// Per-label instance counts in taxonomy order.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.taxonomy.len()];
        for inst in &self.instances {
            if let Some(i) = self.taxonomy.index_of(&inst.label) {
                counts[i] += 1;
            }
        }
        counts
    }
}
