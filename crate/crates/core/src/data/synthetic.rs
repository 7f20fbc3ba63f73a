//! Deterministic kinematic scenario generator.
//!
//! Each instance places the target vehicle at the origin heading along +x
//! at frame 0 and rolls it forward with the kinematic template of its
//! class. Neighbors drive (or walk) with constant velocity and may enter or
//! leave the scene part-way through the observation window.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{wrap_angle, AgentClass, AgentState, BehaviorClass, BehaviorTaxonomy, Dataset, Frame, Instance};
use crate::error::{Error, Result};

/// Built-in behavior labels, in taxonomy order.
pub const SYNTHETIC_LABELS: [&str; 8] = [
    "stopping",
    "lane-keeping",
    "accelerating-straight",
    "decelerating-straight",
    "turn-left",
    "turn-right",
    "lane-change-left",
    "lane-change-right",
];

/// Worded so that related behaviors share phrasing: the straight-line
/// classes pair up by speed trend, the lateral ones by maneuver.
const DESCRIPTIONS: [&str; 8] = [
    "the vehicle drives straight and slows down to a full stop",
    "the vehicle drives straight and keeps its speed steady",
    "the vehicle drives straight and keeps speeding up",
    "the vehicle drives straight and slows down gradually",
    "the vehicle steers into a turn to the left at the intersection",
    "the vehicle steers into a turn to the right at the intersection",
    "the vehicle steers into a lane change to the left",
    "the vehicle steers into a lane change to the right",
];

pub fn synthetic_taxonomy() -> BehaviorTaxonomy {
    BehaviorTaxonomy {
        classes: SYNTHETIC_LABELS
            .iter()
            .zip(DESCRIPTIONS)
            .map(|(l, d)| BehaviorClass {
                label: l.to_string(),
                description: d.to_string(),
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    /// Observation length `T` in frames.
    pub frames: usize,
    pub ttb_frames: u32,
    pub frame_rate_hz: f64,
    /// Instances per label; labels must come from [`SYNTHETIC_LABELS`].
    pub class_counts: BTreeMap<String, usize>,
    /// Standard deviation of the additive position noise, meters.
    pub sigma_pos: f64,
    pub min_neighbors: usize,
    pub max_neighbors: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig::uniform(100)
    }
}

impl SyntheticConfig {
    /// `per_class` instances of each of the eight built-in classes.
    pub fn uniform(per_class: usize) -> Self {
        SyntheticConfig {
            frames: 10,
            ttb_frames: 10,
            frame_rate_hz: 10.0,
            class_counts: SYNTHETIC_LABELS.iter().map(|l| (l.to_string(), per_class)).collect(),
            sigma_pos: 0.05,
            min_neighbors: 1,
            max_neighbors: 4,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::precondition(format!("synthetic config: {msg}")));
        if self.frames == 0 {
            return bad("frames must be positive".into());
        }
        if self.ttb_frames == 0 {
            return bad("ttb_frames must be positive".into());
        }
        if !(self.frame_rate_hz.is_finite() && self.frame_rate_hz > 0.0) {
            return bad("frame_rate_hz must be positive".into());
        }
        if !(self.sigma_pos.is_finite() && self.sigma_pos >= 0.0) {
            return bad("sigma_pos must be non-negative".into());
        }
        if self.min_neighbors > self.max_neighbors {
            return bad("min_neighbors exceeds max_neighbors".into());
        }
        if self.class_counts.is_empty() {
            return bad("no class counts given".into());
        }
        for (label, &count) in &self.class_counts {
            if !SYNTHETIC_LABELS.contains(&label.as_str()) {
                return bad(format!("unknown class {label:?}"));
            }
            if count == 0 {
                return bad(format!("class {label:?} has a non-positive count"));
            }
        }
        Ok(())
    }
}

/// Target pose at time `t` seconds: (x, y, heading).
type Pose = (f64, f64, f64);

enum Template {
    Straight { v0: f64, accel: f64, yaw_rate: f64 },
    Stop { v0: f64, stop_time: f64 },
    Turn { v0: f64, yaw_rate: f64 },
    LaneChange { v0: f64, offset: f64, duration: f64 },
}

impl Template {
    fn sample(label: &str, horizon: f64, observed: f64, rng: &mut ChaCha8Rng) -> Template {
        let v0 = rng.gen_range(7.0..13.0);
        match label {
            "stopping" => Template::Stop {
                v0,
                stop_time: rng.gen_range(0.6..0.95) * horizon,
            },
            "lane-keeping" => Template::Straight {
                v0,
                accel: rng.gen_range(-0.3..0.3),
                yaw_rate: rng.gen_range(-0.02..0.02),
            },
            "accelerating-straight" => Template::Straight {
                v0,
                accel: rng.gen_range(1.5..3.0),
                yaw_rate: 0.0,
            },
            "decelerating-straight" => Template::Straight {
                v0,
                accel: -rng.gen_range(1.5..3.0f64).min(0.9 * v0 / horizon),
                yaw_rate: 0.0,
            },
            "turn-left" => Template::Turn {
                v0,
                yaw_rate: rng.gen_range(0.25..0.5),
            },
            "turn-right" => Template::Turn {
                v0,
                yaw_rate: -rng.gen_range(0.25..0.5),
            },
            "lane-change-left" | "lane-change-right" => {
                let sign = if label.ends_with("left") { 1.0 } else { -1.0 };
                Template::LaneChange {
                    v0,
                    offset: sign * rng.gen_range(3.0..3.8),
                    duration: rng.gen_range(0.9..1.3) * observed,
                }
            }
            other => unreachable!("validated label {other}"),
        }
    }

    fn pose(&self, t: f64) -> Pose {
        match *self {
            Template::Straight { v0, accel, yaw_rate } => {
                let s = v0 * t + 0.5 * accel * t * t;
                let yaw = yaw_rate * t;
                if yaw.abs() < 1e-9 {
                    (s, 0.0, yaw)
                } else {
                    // arc of length s with constant curvature
                    let r = s / yaw;
                    (r * yaw.sin(), r * (1.0 - yaw.cos()), yaw)
                }
            }
            Template::Stop { v0, stop_time } => {
                let tc = t.min(stop_time);
                (v0 * tc - 0.5 * v0 / stop_time * tc * tc, 0.0, 0.0)
            }
            Template::Turn { v0, yaw_rate } => {
                let yaw = yaw_rate * t;
                let r = v0 / yaw_rate;
                (r * yaw.sin(), r * (1.0 - yaw.cos()), yaw)
            }
            Template::LaneChange {
                v0,
                offset,
                duration,
            } => {
                let tc = t.min(duration);
                let phase = std::f64::consts::PI * tc / duration;
                let y = 0.5 * offset * (1.0 - phase.cos());
                let dy = if t < duration {
                    0.5 * offset * std::f64::consts::PI / duration * phase.sin()
                } else {
                    0.0
                };
                (v0 * t, y, dy.atan2(v0))
            }
        }
    }
}

struct Neighbor {
    uid: i64,
    class: AgentClass,
    x0: f64,
    y0: f64,
    heading: f64,
    speed: f64,
    first: usize,
    last: usize,
}

impl Neighbor {
    fn sample(uid: i64, frames: usize, rng: &mut ChaCha8Rng) -> Neighbor {
        const CLASSES: [AgentClass; 8] = [
            AgentClass::Car,
            AgentClass::Car,
            AgentClass::Car,
            AgentClass::Van,
            AgentClass::Truck,
            AgentClass::Bus,
            AgentClass::Cyclist,
            AgentClass::Pedestrian,
        ];
        let class = *CLASSES.choose(rng).expect("non-empty");
        let (y0, heading, speed) = match class {
            AgentClass::Pedestrian => (
                *[-10.0, 10.0].choose(rng).expect("non-empty") + rng.gen_range(-1.0..1.0),
                rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
                rng.gen_range(0.5..1.5),
            ),
            AgentClass::Cyclist => (rng.gen_range(-8.0..-6.0), 0.0, rng.gen_range(3.0..6.0)),
            _ => {
                let lane = *[-7.0, -3.5, 3.5, 7.0].choose(rng).expect("non-empty");
                let heading = if lane > 5.0 { std::f64::consts::PI } else { 0.0 };
                (lane + rng.gen_range(-0.4..0.4), heading, rng.gen_range(5.0..14.0))
            }
        };
        let (first, last) = if frames > 1 && rng.gen_bool(0.3) {
            let first = rng.gen_range(0..frames / 2 + 1);
            let last = rng.gen_range(first..frames);
            (first, last)
        } else {
            (0, frames - 1)
        };
        Neighbor {
            uid,
            class,
            x0: rng.gen_range(-30.0..40.0),
            y0,
            heading,
            speed,
            first,
            last,
        }
    }
}

/// Generates a dataset that is a pure function of `(config, seed)`.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = 1.0 / config.frame_rate_hz;
    let observed = config.frames as f64 * dt;
    let horizon = (config.frames as f64 + config.ttb_frames as f64) * dt;
    let noise = Normal::new(0.0, config.sigma_pos).map_err(|e| Error::precondition(e.to_string()))?;

    let mut instances = Vec::new();
    for label in SYNTHETIC_LABELS {
        let Some(&count) = config.class_counts.get(label) else {
            continue;
        };
        for _ in 0..count {
            let template = Template::sample(label, horizon, observed, &mut rng);
            let n_neighbors = rng.gen_range(config.min_neighbors..=config.max_neighbors);
            let neighbors: Vec<Neighbor> = (0..n_neighbors)
                .map(|k| Neighbor::sample(2 + k as i64, config.frames, &mut rng))
                .collect();
            let mut frames = Vec::with_capacity(config.frames);
            for k in 0..config.frames {
                let t = k as f64 * dt;
                let (x, y, yaw) = template.pose(t);
                let mut agents = vec![AgentState {
                    uid: 1,
                    class: AgentClass::Car,
                    x: x + noise.sample(&mut rng),
                    y: y + noise.sample(&mut rng),
                    z: noise.sample(&mut rng),
                    orientation: wrap_angle(yaw),
                }];
                for nb in neighbors.iter().filter(|nb| (nb.first..=nb.last).contains(&k)) {
                    agents.push(AgentState {
                        uid: nb.uid,
                        class: nb.class,
                        x: nb.x0 + nb.speed * nb.heading.cos() * t + noise.sample(&mut rng),
                        y: nb.y0 + nb.speed * nb.heading.sin() * t + noise.sample(&mut rng),
                        z: noise.sample(&mut rng),
                        orientation: wrap_angle(nb.heading),
                    });
                }
                frames.push(Frame {
                    t: k as u32,
                    target_uid: 1,
                    agents,
                });
            }
            instances.push(Instance {
                instance_id: String::new(),
                frame_rate_hz: config.frame_rate_hz,
                ttb_frames: config.ttb_frames,
                label: label.to_string(),
                frames,
            });
        }
    }
    instances.shuffle(&mut rng);
    let width = instances.len().to_string().len().max(4);
    for (i, inst) in instances.iter_mut().enumerate() {
        inst.instance_id = format!("syn-{i:0width$}");
    }
    Dataset::new(instances, synthetic_taxonomy())
}
