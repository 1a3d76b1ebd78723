//! Rule-based scene synthesis: place every agent of a structured scene on a
//! lane of the map, then roll the agents forward with unicycle kinematics.

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{boxes_intersect, normalize_angle, OrientedBox, Point2};
use crate::rng;
use crate::scenario::{AgentPose, AgentTrack, MapRegion, Scenario};
use crate::structured::{Action, Orientation, StructuredAgentSpec, StructuredScene};

/// Spacing of candidate placement points along a lane.
const PLACEMENT_STEP: f64 = 0.25;
/// Coordinates this close to an ego-frame axis count as on it.
const AXIS_SNAP: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub timestep: f64,
    pub horizon: usize,
    pub default_length: f64,
    pub default_width: f64,
    /// m/s².
    pub accel_rate: f64,
    /// rad/s.
    pub turn_rate: f64,
    /// Turning, accelerating and decelerating last this long, seconds.
    pub action_duration: f64,
    pub max_speed: f64,
    /// Largest lane/requested heading mismatch accepted at placement, radians.
    pub orientation_tolerance: f64,
    /// Uniform shift along the lane applied to non-ego agents, ± metres.
    pub position_jitter: f64,
    /// Draw speeds uniformly inside their bin instead of at the midpoint.
    pub speed_jitter: bool,
    pub rng_seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            timestep: 0.1,
            horizon: 50,
            default_length: 4.5,
            default_width: 2.0,
            accel_rate: 2.5,
            turn_rate: 0.35,
            action_duration: 2.0,
            max_speed: 30.0,
            orientation_tolerance: 30f64.to_radians(),
            position_jitter: 0.0,
            speed_jitter: false,
            rng_seed: 0,
        }
    }
}

/// An agent's initial state and footprint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacedAgent {
    pub pose: AgentPose,
    pub length: f64,
    pub width: f64,
}

/// Quadrant (1-4) of an ego-frame point; `None` at the origin.
///
/// Half-axes belong to the quadrant counter-clockwise of them, so the lane
/// straight ahead is quadrant 1 and straight behind is quadrant 3.
pub fn quadrant_of(p: Point2) -> Option<u8> {
    let x = if p.x.abs() < AXIS_SNAP { 0.0 } else { p.x };
    let y = if p.y.abs() < AXIS_SNAP { 0.0 } else { p.y };
    match (x, y) {
        (x, y) if x > 0.0 && y >= 0.0 => Some(1),
        (x, y) if x <= 0.0 && y > 0.0 => Some(2),
        (x, y) if x < 0.0 && y <= 0.0 => Some(3),
        (x, y) if x >= 0.0 && y < 0.0 => Some(4),
        _ => None,
    }
}

fn lane_heading(map: &MapRegion, lane: usize) -> f64 {
    let d = map.segments[lane].direction();
    d.y.atan2(d.x)
}

fn draw_speed(spec: &StructuredAgentSpec, cfg: &SynthesisConfig, rng: &mut rng::Rng) -> f64 {
    if cfg.speed_jitter {
        let (lo, hi) = spec.speed_range();
        rng.gen_range(lo..hi)
    } else {
        spec.speed_midpoint()
    }
}

/// Initial poses and dimensions for the ego (index 0) and every other agent.
pub fn place_agents(
    scene: &StructuredScene,
    map: &MapRegion,
    cfg: &SynthesisConfig,
) -> Result<Vec<PlacedAgent>> {
    scene.validate()?;
    let mut rng = rng::seeded(cfg.rng_seed);
    let (ego_lane, _) = map
        .nearest_lane(Point2::ORIGIN)
        .ok_or_else(|| Error::NoCompatibleLane {
            agent: 0,
            reason: "map has no lanes".into(),
        })?;
    let seg = map.segments[ego_lane].segment()?;
    let ego_pos = seg.point_at(seg.project(Point2::ORIGIN));
    let ego_heading = normalize_angle(lane_heading(map, ego_lane));
    let ego = AgentPose::new(ego_pos.x, ego_pos.y, ego_heading, draw_speed(&scene.ego, cfg, &mut rng));
    let mut placed = vec![PlacedAgent {
        pose: ego,
        length: cfg.default_length,
        width: cfg.default_width,
    }];
    let mut boxes = vec![OrientedBox::new(ego_pos, ego_heading, cfg.default_length, cfg.default_width)?];

    for (i, spec) in scene.others.iter().enumerate() {
        let agent = i + 1;
        let pose = place_one(spec, agent, map, &ego, &boxes, cfg, &mut rng)?;
        boxes.push(OrientedBox::new(pose.position(), pose.heading, cfg.default_length, cfg.default_width)?);
        placed.push(PlacedAgent {
            pose,
            length: cfg.default_length,
            width: cfg.default_width,
        });
    }
    Ok(placed)
}

fn place_one(
    spec: &StructuredAgentSpec,
    agent: usize,
    map: &MapRegion,
    ego: &AgentPose,
    occupied: &[OrientedBox],
    cfg: &SynthesisConfig,
    rng: &mut rng::Rng,
) -> Result<AgentPose> {
    let wanted = ego.heading + spec.orientation.relative_heading();
    let target = spec.distance_midpoint();
    let mut best: Option<(f64, usize, f64)> = None;
    let mut any_lane = false;
    for (li, lane) in map.segments.iter().enumerate() {
        let heading = lane_heading(map, li);
        if normalize_angle(heading - wanted).abs() > cfg.orientation_tolerance {
            continue;
        }
        any_lane = true;
        let seg = lane.segment()?;
        let len = seg.length();
        let steps = (len / PLACEMENT_STEP).ceil() as usize;
        for k in 0..=steps {
            let t = (k as f64 * PLACEMENT_STEP / len).min(1.0);
            let p = seg.point_at(t);
            let rel = AgentPose::new(p.x, p.y, 0.0, 0.0).to_frame(ego).position();
            if quadrant_of(rel) != Some(spec.quadrant) {
                continue;
            }
            let b = OrientedBox::new(p, heading, cfg.default_length, cfg.default_width)?;
            if occupied.iter().any(|o| boxes_intersect(o, &b)) {
                continue;
            }
            let score = (rel.norm() - target).abs();
            if best.is_none_or(|(s, _, _)| score < s) {
                best = Some((score, li, t));
            }
        }
    }
    let Some((_, li, mut t)) = best else {
        let reason = if any_lane {
            format!("no free point in quadrant {} on a lane oriented {:?}", spec.quadrant, spec.orientation)
        } else {
            format!("no lane oriented {:?} within tolerance", spec.orientation)
        };
        return Err(Error::NoCompatibleLane { agent, reason });
    };

    let seg = map.segments[li].segment()?;
    let heading = normalize_angle(lane_heading(map, li));
    if cfg.position_jitter > 0.0 {
        let shift = rng.gen_range(-cfg.position_jitter..=cfg.position_jitter);
        let shifted = (t + shift / seg.length()).clamp(0.0, 1.0);
        let b = OrientedBox::new(seg.point_at(shifted), heading, cfg.default_length, cfg.default_width)?;
        if !occupied.iter().any(|o| boxes_intersect(o, &b)) {
            t = shifted;
        }
    }
    let p = seg.point_at(t);
    Ok(AgentPose::new(p.x, p.y, heading, draw_speed(spec, cfg, rng)))
}

/// Integrates every agent for `cfg.horizon` poses under its action.
///
/// Position advances with the current speed and heading, then heading and
/// speed are updated. Turns and speed changes last `cfg.action_duration`
/// seconds; `Stop` brakes at `accel_rate` until standstill.
pub fn rollout_motion(
    initial: &[PlacedAgent],
    actions: &[Action],
    map: &MapRegion,
    cfg: &SynthesisConfig,
) -> Result<Scenario> {
    if initial.len() != actions.len() {
        return Err(Error::Dimension(format!(
            "{} agents but {} actions",
            initial.len(),
            actions.len()
        )));
    }
    let dt = cfg.timestep;
    let action_steps = (cfg.action_duration / dt).round() as usize;
    let tracks = initial
        .iter()
        .zip(actions)
        .enumerate()
        .map(|(id, (agent, &action))| {
            let mut poses = Vec::with_capacity(cfg.horizon);
            let mut p = agent.pose;
            p.heading = normalize_angle(p.heading);
            for step in 0..cfg.horizon {
                poses.push(p);
                let active = step < action_steps;
                let (yaw_rate, accel) = match action {
                    Action::TurnLeft if active => (cfg.turn_rate, 0.0),
                    Action::TurnRight if active => (-cfg.turn_rate, 0.0),
                    Action::Accelerate if active => (0.0, cfg.accel_rate),
                    Action::Decelerate if active => (0.0, -cfg.accel_rate),
                    Action::Stop => (0.0, -cfg.accel_rate),
                    _ => (0.0, 0.0),
                };
                let (s, c) = p.heading.sin_cos();
                p.x += p.speed * c * dt;
                p.y += p.speed * s * dt;
                p.heading = normalize_angle(p.heading + yaw_rate * dt);
                let v = (p.speed + accel * dt).clamp(0.0, cfg.max_speed);
                p.speed = if v < 1e-9 { 0.0 } else { v };
            }
            AgentTrack {
                agent_id: id as u32,
                length: agent.length,
                width: agent.width,
                poses,
            }
        })
        .collect();
    Ok(Scenario {
        map: map.clone(),
        tracks,
        timestep: dt,
        horizon: cfg.horizon,
    })
}

pub fn synthesize(scene: &StructuredScene, map: &MapRegion, cfg: &SynthesisConfig) -> Result<Scenario> {
    let placed = place_agents(scene, map, cfg)?;
    let actions: Vec<Action> = std::iter::once(scene.ego.action)
        .chain(scene.others.iter().map(|o| o.action))
        .collect();
    rollout_motion(&placed, &actions, map, cfg)
}

/// A random everyday scene: lane-following traffic and an ego that mostly
/// cruises but sometimes brakes, speeds up or swerves. Agents that cannot
/// be placed on `map` are dropped.
pub fn random_regular_scene(map: &MapRegion, cfg: &SynthesisConfig, rng: &mut rng::Rng) -> StructuredScene {
    let ego_action = match rng.gen_range(0..100) {
        0..=34 => Action::KeepSpeed,
        35..=49 => Action::Accelerate,
        50..=64 => Action::Decelerate,
        65..=74 => Action::Stop,
        75..=87 => Action::TurnLeft,
        _ => Action::TurnRight,
    };
    let ego = StructuredAgentSpec {
        quadrant: 1,
        distance_bin: 0,
        orientation: Orientation::ParallelSame,
        speed_bin: rng.gen_range(1..=4),
        action: ego_action,
    };
    let mut scene = StructuredScene { ego, others: Vec::new() };
    let wanted = rng.gen_range(1..=6);
    for _ in 0..wanted {
        let orientation = if rng.gen_bool(0.5) {
            Orientation::ParallelSame
        } else {
            Orientation::ParallelOpposite
        };
        let action = [Action::KeepSpeed, Action::KeepSpeed, Action::Accelerate, Action::Decelerate]
            [rng.gen_range(0..4)];
        scene.others.push(StructuredAgentSpec {
            quadrant: rng.gen_range(1..=4),
            distance_bin: rng.gen_range(0..=3),
            orientation,
            speed_bin: rng.gen_range(1..=5),
            action,
        });
        if place_agents(&scene, map, cfg).is_err() {
            scene.others.pop();
        }
    }
    scene
}

/// First step at which the ego box meets another agent's box.
pub fn first_ego_contact(s: &Scenario) -> Result<Option<(usize, u32)>> {
    let Some(ego) = s.ego() else { return Ok(None) };
    for step in 0..s.horizon {
        let eb = ego.box_at(step)?;
        for other in s.others() {
            if boxes_intersect(&eb, &other.box_at(step)?) {
                return Ok(Some((step, other.agent_id)));
            }
        }
    }
    Ok(None)
}

pub fn bundled_map(name: &str) -> Option<MapRegion> {
    let text = match name {
        "straight_bidir" => include_str!("../data/straight_bidir.map.json"),
        "crossroads" => include_str!("../data/crossroads.map.json"),
        _ => return None,
    };
    Some(serde_json::from_str(text).expect("bundled map parses"))
}

pub const BUNDLED_MAPS: [&str; 2] = ["straight_bidir", "crossroads"];

/// Heading of `p` relative to the ego heading, in `[0, π]`.
pub fn relative_heading_error(p: &AgentPose, ego_heading: f64, wanted: Orientation) -> f64 {
    normalize_angle(p.heading - ego_heading - wanted.relative_heading()).abs().min(PI)
}
