//! Maps, agent tracks and scenarios, with their JSON file formats.
//!
//! A scenario file is one JSON document with the top-level keys `map`,
//! `tracks`, `timestep` and `horizon`. Floats are written in shortest
//! round-trip form, so `load(save(s))` is bit-identical. A dataset is a
//! directory of `<id>.scenario.json` files plus a `manifest.json` listing
//! every id with its split.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{normalize_angle, point_segment_distance, OrientedBox, Point2, Segment2};
use crate::io;

pub const MAX_LANES: usize = 384;
pub const MAX_AGENTS: usize = 32;
pub const DEFAULT_TIMESTEP: f64 = 0.1;
pub const DEFAULT_HORIZON: usize = 50;
pub const EGO_ID: u32 = 0;
/// Poses in a planned ego trajectory (4 s at 10 Hz).
pub const EGO_TRAJECTORY_LEN: usize = 40;
pub const DEFAULT_CORRIDOR_HALF_WIDTH: f64 = 2.0;
/// Allowed mismatch between a step's displacement and speed × timestep.
pub const MOTION_CONSISTENCY_TOL: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaneSegment {
    pub id: u32,
    pub start: Point2,
    pub end: Point2,
}

impl LaneSegment {
    pub fn new(id: u32, start: Point2, end: Point2) -> Self {
        Self { id, start, end }
    }

    pub fn segment(&self) -> Result<Segment2> {
        Segment2::new(self.start, self.end)
            .map_err(|e| Error::Geometry(format!("lane {}: {e}", self.id)))
    }

    /// Travel direction (`end - start`).
    pub fn direction(&self) -> Point2 {
        self.end.sub(self.start)
    }

    fn distance_to(&self, p: Point2) -> f64 {
        // Degenerate lanes are rejected by validation; treat them as points.
        match Segment2::new(self.start, self.end) {
            Ok(s) => point_segment_distance(p, &s),
            Err(_) => p.distance(self.start),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapRegion {
    pub segments: Vec<LaneSegment>,
    #[serde(default = "default_corridor")]
    pub corridor_half_width: f64,
}

fn default_corridor() -> f64 {
    DEFAULT_CORRIDOR_HALF_WIDTH
}

impl MapRegion {
    pub fn new(segments: Vec<LaneSegment>, corridor_half_width: f64) -> Result<Self> {
        let map = Self {
            segments,
            corridor_half_width,
        };
        let mut v = Vec::new();
        validate_map(&map, &mut v);
        if v.is_empty() {
            Ok(map)
        } else {
            Err(Error::Validation(v.iter().map(ToString::to_string).collect()))
        }
    }

    /// Index and distance of the lane closest to `p`; ties go to the lower index.
    pub fn nearest_lane(&self, p: Point2) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, lane) in self.segments.iter().enumerate() {
            let d = lane.distance_to(p);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best
    }

    pub fn load(path: &Path) -> Result<Self> {
        let map: MapRegion = io::read_json(path)?;
        let mut v = Vec::new();
        validate_map(&map, &mut v);
        if !v.is_empty() {
            return Err(Error::Validation(v.iter().map(ToString::to_string).collect()));
        }
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentPose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

impl AgentPose {
    pub fn new(x: f64, y: f64, heading: f64, speed: f64) -> Self {
        Self {
            x,
            y,
            heading,
            speed,
        }
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    pub fn heading_vector(&self) -> Point2 {
        Point2::from_heading(self.heading)
    }

    pub fn velocity(&self) -> Point2 {
        self.heading_vector().scale(self.speed)
    }

    /// Expresses this world-frame pose in the frame whose origin is `frame`.
    pub fn to_frame(&self, frame: &AgentPose) -> AgentPose {
        let rel = self.position().sub(frame.position()).rotate(-frame.heading);
        AgentPose::new(rel.x, rel.y, normalize_angle(self.heading - frame.heading), self.speed)
    }

    /// Inverse of [`AgentPose::to_frame`].
    pub fn from_frame(&self, frame: &AgentPose) -> AgentPose {
        let w = self.position().rotate(frame.heading).add(frame.position());
        AgentPose::new(w.x, w.y, normalize_angle(self.heading + frame.heading), self.speed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentTrack {
    pub agent_id: u32,
    pub length: f64,
    pub width: f64,
    pub poses: Vec<AgentPose>,
}

impl AgentTrack {
    pub fn box_at(&self, step: usize) -> Result<OrientedBox> {
        let p = &self.poses[step];
        OrientedBox::new(p.position(), p.heading, self.length, self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub map: MapRegion,
    pub tracks: Vec<AgentTrack>,
    pub timestep: f64,
    pub horizon: usize,
}

impl Scenario {
    /// The first track with the ego id.
    pub fn ego(&self) -> Option<&AgentTrack> {
        self.tracks.iter().find(|t| t.agent_id == EGO_ID)
    }

    pub fn others(&self) -> impl Iterator<Item = &AgentTrack> {
        self.tracks.iter().filter(|t| t.agent_id != EGO_ID)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn to_json(&self) -> String {
        io::to_json_string(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario =
            serde_json::from_str(text).map_err(|e| Error::json("scenario", &e))?;
        s.checked()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: Scenario = io::read_json(path)?;
        s.checked()
    }

    fn checked(self) -> Result<Self> {
        let report = validate_scenario(&self);
        if report.is_empty() {
            Ok(self)
        } else {
            Err(Error::Validation(report.iter().map(ToString::to_string).collect()))
        }
    }
}

/// A planned ego trajectory of exactly [`EGO_TRAJECTORY_LEN`] poses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<AgentPose>", into = "Vec<AgentPose>")]
pub struct EgoTrajectory {
    poses: Vec<AgentPose>,
}

impl EgoTrajectory {
    pub fn new(poses: Vec<AgentPose>) -> Result<Self> {
        if poses.len() != EGO_TRAJECTORY_LEN {
            return Err(Error::Dimension(format!(
                "ego trajectory needs {EGO_TRAJECTORY_LEN} poses, got {}",
                poses.len()
            )));
        }
        Ok(Self { poses })
    }

    pub fn poses(&self) -> &[AgentPose] {
        &self.poses
    }

    pub fn into_poses(self) -> Vec<AgentPose> {
        self.poses
    }

    /// Travelled path length.
    pub fn arc_length(&self) -> f64 {
        self.poses
            .windows(2)
            .map(|w| w[0].position().distance(w[1].position()))
            .sum()
    }
}

impl TryFrom<Vec<AgentPose>> for EgoTrajectory {
    type Error = Error;
    fn try_from(poses: Vec<AgentPose>) -> Result<Self> {
        EgoTrajectory::new(poses)
    }
}

impl From<EgoTrajectory> for Vec<AgentPose> {
    fn from(t: EgoTrajectory) -> Self {
        t.poses
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

fn validate_map(map: &MapRegion, out: &mut Vec<Violation>) {
    let n = map.segments.len();
    if n == 0 || n > MAX_LANES {
        out.push(Violation::new(
            "map.segments",
            format!("lane count must be in 1..={MAX_LANES}, got {n}"),
        ));
    }
    if !(map.corridor_half_width > 0.0 && map.corridor_half_width.is_finite()) {
        out.push(Violation::new("map.corridor_half_width", "must be positive"));
    }
    let mut ids = BTreeSet::new();
    for (i, s) in map.segments.iter().enumerate() {
        if !ids.insert(s.id) {
            out.push(Violation::new(format!("map.segments[{i}].id"), "duplicate lane id"));
        }
        if !s.start.is_finite() || !s.end.is_finite() {
            out.push(Violation::new(format!("map.segments[{i}]"), "non-finite endpoint"));
        } else if s.start == s.end {
            out.push(Violation::new(format!("map.segments[{i}]"), "degenerate lane"));
        }
    }
}

/// Checks every scenario invariant; an empty report means the scenario is valid.
pub fn validate_scenario(s: &Scenario) -> Vec<Violation> {
    let mut out = Vec::new();
    validate_map(&s.map, &mut out);

    if !(s.timestep > 0.0 && s.timestep.is_finite()) {
        out.push(Violation::new("timestep", "must be positive"));
    }
    if s.horizon == 0 {
        out.push(Violation::new("horizon", "must be at least 1"));
    }
    if s.tracks.len() > MAX_AGENTS {
        out.push(Violation::new(
            "tracks",
            format!("at most {MAX_AGENTS} agents, got {}", s.tracks.len()),
        ));
    }
    let egos = s.tracks.iter().filter(|t| t.agent_id == EGO_ID).count();
    if egos == 0 {
        out.push(Violation::new("tracks", "missing ego"));
    } else if egos > 1 {
        out.push(Violation::new("tracks", "duplicate ego"));
    }
    let mut ids = BTreeSet::new();
    for (ti, t) in s.tracks.iter().enumerate() {
        let f = |name: &str| format!("tracks[{ti}].{name}");
        if t.agent_id != EGO_ID && !ids.insert(t.agent_id) {
            out.push(Violation::new(f("agent_id"), "duplicate agent id"));
        }
        if !(t.length > 0.0 && t.length.is_finite()) {
            out.push(Violation::new(f("length"), "length > 0"));
        }
        if !(t.width > 0.0 && t.width.is_finite()) {
            out.push(Violation::new(f("width"), "width > 0"));
        }
        if t.poses.len() != s.horizon {
            out.push(Violation::new(
                f("poses"),
                format!("track length mismatch: {} poses, horizon {}", t.poses.len(), s.horizon),
            ));
        }
        for (pi, p) in t.poses.iter().enumerate() {
            let pf = format!("tracks[{ti}].poses[{pi}]");
            if !(p.x.is_finite() && p.y.is_finite() && p.heading.is_finite() && p.speed.is_finite()) {
                out.push(Violation::new(pf, "non-finite value"));
                continue;
            }
            if p.speed < 0.0 {
                out.push(Violation::new(format!("{pf}.speed"), "speed ≥ 0"));
            }
            if normalize_angle(p.heading) != p.heading {
                out.push(Violation::new(format!("{pf}.heading"), "heading not normalized to [-π, π)"));
            }
        }
        for (pi, w) in t.poses.windows(2).enumerate() {
            let moved = w[0].position().distance(w[1].position());
            let expected = 0.5 * (w[0].speed + w[1].speed) * s.timestep;
            if (moved - expected).abs() > MOTION_CONSISTENCY_TOL {
                out.push(Violation::new(
                    format!("tracks[{ti}].poses[{}]", pi + 1),
                    format!("displacement {moved:.3} m inconsistent with speed × timestep {expected:.3} m"),
                ));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub scenarios: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub id: String,
    pub split: Split,
    pub scenario: Scenario,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn scenario_file_name(id: &str) -> String {
    format!("{id}.scenario.json")
}

pub fn write_dataset(dir: &Path, entries: &[DatasetEntry]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::default();
    for e in entries {
        e.scenario.save(&dir.join(scenario_file_name(&e.id)))?;
        manifest.scenarios.push(ManifestEntry {
            id: e.id.clone(),
            split: e.split,
        });
    }
    io::write_json(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<DatasetEntry>> {
    let manifest: Manifest = io::read_json(&dir.join(MANIFEST_FILE))?;
    manifest
        .scenarios
        .into_iter()
        .map(|m| {
            let scenario = Scenario::load(&dir.join(scenario_file_name(&m.id))).map_err(|e| {
                Error::Scenario {
                    scenario: m.id.clone(),
                    source: Box::new(e),
                }
            })?;
            Ok(DatasetEntry {
                id: m.id,
                split: m.split,
                scenario,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn straight_track(id: u32, y: f64, speed: f64, horizon: usize) -> AgentTrack {
        AgentTrack {
            agent_id: id,
            length: 4.5,
            width: 2.0,
            poses: (0..horizon)
                .map(|t| AgentPose::new(speed * 0.1 * t as f64, y, 0.0, speed))
                .collect(),
        }
    }

    fn two_agent() -> Scenario {
        Scenario {
            map: MapRegion::new(
                vec![LaneSegment::new(0, Point2::new(-100.0, 0.0), Point2::new(100.0, 0.0))],
                2.0,
            )
            .unwrap(),
            tracks: vec![straight_track(0, 0.0, 5.0, 50), straight_track(1, 0.0, 5.0, 50)],
            timestep: 0.1,
            horizon: 50,
        }
    }

    fn has_rule(report: &[Violation], needle: &str) -> bool {
        report.iter().any(|v| v.rule.contains(needle))
    }

    #[test]
    fn well_formed_is_clean() {
        assert!(validate_scenario(&two_agent()).is_empty());
    }

    #[test]
    fn duplicate_ego_reported() {
        let mut s = two_agent();
        s.tracks[1].agent_id = 0;
        assert!(has_rule(&validate_scenario(&s), "duplicate ego"));
    }

    #[test]
    fn short_track_reported() {
        let mut s = two_agent();
        s.tracks[1].poses.pop();
        assert!(has_rule(&validate_scenario(&s), "track length mismatch"));
    }

    #[test]
    fn inconsistent_motion_reported() {
        let mut s = two_agent();
        s.tracks[1].poses[10].x += 3.0;
        assert!(has_rule(&validate_scenario(&s), "inconsistent"));
    }

    #[test]
    fn negative_speed_rejected_on_load() {
        let mut s = two_agent();
        s.tracks[0].poses[0].speed = -1.0;
        let err = Scenario::from_json(&s.to_json()).unwrap_err();
        assert!(err.to_string().contains("speed ≥ 0"), "{err}");
    }

    #[test]
    fn truncated_file_names_offset() {
        let text = two_agent().to_json();
        let err = Scenario::from_json(&text[..text.len() / 2]).unwrap_err();
        match err {
            Error::Parse { line, column, .. } => assert!(line > 0 && column > 0),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![
            DatasetEntry { id: "a".into(), split: Split::Train, scenario: two_agent() },
            DatasetEntry { id: "b".into(), split: Split::Test, scenario: two_agent() },
        ];
        write_dataset(dir.path(), &entries).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), entries);
    }

    #[test]
    fn ego_trajectory_length_enforced() {
        assert!(EgoTrajectory::new(vec![AgentPose::new(0.0, 0.0, 0.0, 0.0); 39]).is_err());
        let bad = serde_json::to_string(&vec![AgentPose::new(0.0, 0.0, 0.0, 0.0); 3]).unwrap();
        assert!(serde_json::from_str::<EgoTrajectory>(&bad).is_err());
    }

    #[test]
    fn frame_roundtrip() {
        let frame = AgentPose::new(3.0, -2.0, 0.7, 1.0);
        let p = AgentPose::new(10.0, 4.0, -2.0, 3.0);
        let back = p.to_frame(&frame).from_frame(&frame);
        assert!((back.x - p.x).abs() < 1e-12 && (back.y - p.y).abs() < 1e-12);
        assert!((back.heading - p.heading).abs() < 1e-12);
    }

    fn arb_scenario() -> impl Strategy<Value = Scenario> {
        let pose = (-1e4..1e4f64, -1e4..1e4f64, -3.0..3.0f64, 0.0..30.0f64);
        (
            1usize..4,
            1usize..6,
            proptest::collection::vec(pose, 1..4),
            0.5..5.0f64,
        )
            .prop_map(|(lanes, agents, poses, chw)| {
                let segments = (0..lanes)
                    .map(|i| {
                        LaneSegment::new(i as u32, Point2::new(i as f64 * 0.1 + 1e-7, 1.0 / 3.0), Point2::new(50.0, i as f64))
                    })
                    .collect();
                let horizon = poses.len();
                let tracks = (0..agents)
                    .map(|a| AgentTrack {
                        agent_id: a as u32,
                        length: 4.5 + a as f64 / 7.0,
                        width: 2.0,
                        poses: poses
                            .iter()
                            .map(|&(x, y, h, v)| AgentPose::new(x, y, h, v))
                            .collect(),
                    })
                    .collect();
                Scenario { map: MapRegion { segments, corridor_half_width: chw }, tracks, timestep: 0.1, horizon }
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn json_roundtrip_is_identity(s in arb_scenario()) {
            let text = s.to_json();
            let back: Scenario = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(back, s);
        }
    }
}
