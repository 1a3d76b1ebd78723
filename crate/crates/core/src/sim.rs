//! Non-reactive closed-loop scoring of ego trajectories.
//!
//! A candidate trajectory is first made dynamically feasible from the ego's
//! current state, then replayed against the logged tracks of every other
//! agent. Six sub-metrics are evaluated per trajectory and combined into
//! the PDM score `NC · DAC · DDC · (5·TTC + 2·C + 5·EP) / 12`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{boxes_intersect, heading_alignment_angle, normalize_angle, OrientedBox, Point2};
use crate::par::{self, Exec};
use crate::scenario::{AgentPose, EgoTrajectory, Scenario};
use crate::vocab::TrajectoryVocabulary;

pub const METRIC_COUNT: usize = 6;
/// Storage order of sub-metrics in score tables and model outputs.
pub const METRIC_NAMES: [&str; METRIC_COUNT] = ["nc", "dac", "ddc", "ttc", "comfort", "ep"];
const BOUND_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Seconds; TTC passes only if every projected contact is later than this.
    pub ttc_threshold: f64,
    pub ttc_lookahead: f64,
    pub ttc_substep: f64,
    /// m/s², bounds both the follower's longitudinal clamp and comfort.
    pub max_abs_accel: f64,
    /// rad/s.
    pub max_abs_yaw_rate: f64,
    /// Radians between ego heading and the nearest lane direction.
    pub ddc_angle_limit: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            ttc_threshold: 1.0,
            ttc_lookahead: 3.0,
            ttc_substep: 0.1,
            max_abs_accel: 4.0,
            max_abs_yaw_rate: 0.8,
            ddc_angle_limit: 2.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.ttc_threshold,
            self.ttc_lookahead,
            self.ttc_substep,
            self.max_abs_accel,
            self.max_abs_yaw_rate,
            self.ddc_angle_limit,
        ];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config("simulator parameters must be positive".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub nc: f64,
    pub dac: f64,
    pub ddc: f64,
    pub ttc: f64,
    pub comfort: f64,
    pub ep: f64,
}

impl ScoreVector {
    pub fn to_array(&self) -> [f64; METRIC_COUNT] {
        [self.nc, self.dac, self.ddc, self.ttc, self.comfort, self.ep]
    }

    pub fn from_array(a: [f64; METRIC_COUNT]) -> Self {
        Self {
            nc: a[0],
            dac: a[1],
            ddc: a[2],
            ttc: a[3],
            comfort: a[4],
            ep: a[5],
        }
    }
}

pub fn pdm_score(v: &ScoreVector) -> f64 {
    v.nc * v.dac * v.ddc * (5.0 * v.ttc + 2.0 * v.comfort + 5.0 * v.ep) / 12.0
}

/// Re-integrates a candidate (in the ego frame) from the ego's current world pose.
///
/// Each step steers toward the next candidate position and takes the speed
/// that reaches its projection on the new heading. Speed and heading changes
/// are clamped to `max_abs_accel` and `max_abs_yaw_rate`.
pub fn make_feasible(candidate: &EgoTrajectory, current: &AgentPose, timestep: f64, cfg: &SimConfig) -> EgoTrajectory {
    let world: Vec<AgentPose> = candidate.poses().iter().map(|p| p.from_frame(current)).collect();
    let max_dv = cfg.max_abs_accel * timestep;
    let max_dh = cfg.max_abs_yaw_rate * timestep;
    let mut state = AgentPose::new(current.x, current.y, normalize_angle(current.heading), current.speed.max(0.0));
    let mut out = Vec::with_capacity(world.len());
    out.push(state);
    for target in &world[1..] {
        let d = target.position().sub(state.position());
        let (s0, c0) = state.heading.sin_cos();
        // a target behind is braked for, not turned towards
        let dh = if d.norm() > 1e-9 && d.x * c0 + d.y * s0 >= 0.0 {
            normalize_angle(d.y.atan2(d.x) - state.heading).clamp(-max_dh, max_dh)
        } else {
            0.0
        };
        let heading = normalize_angle(state.heading + dh);
        let (s, c) = heading.sin_cos();
        let wanted_speed = (d.x * c + d.y * s).max(0.0) / timestep;
        let speed = (state.speed + (wanted_speed - state.speed).clamp(-max_dv, max_dv)).max(0.0);
        state = AgentPose::new(state.x + speed * c * timestep, state.y + speed * s * timestep, heading, speed);
        out.push(state);
    }
    EgoTrajectory::new(out).expect("same length as the candidate")
}

/// Pass/fail sub-metrics plus raw progress, before progress normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawEvaluation {
    pub nc: bool,
    pub dac: bool,
    pub ddc: bool,
    pub ttc: bool,
    pub comfort: bool,
    /// Path length travelled, metres.
    pub progress: f64,
}

impl RawEvaluation {
    /// `ep` is progress over `reference`, clamped to [0, 1]; 1 when the reference is 0.
    pub fn scored(&self, reference: f64) -> ScoreVector {
        let b = |v: bool| if v { 1.0 } else { 0.0 };
        let ep = if reference > 0.0 {
            (self.progress / reference).clamp(0.0, 1.0)
        } else {
            1.0
        };
        ScoreVector {
            nc: b(self.nc),
            dac: b(self.dac),
            ddc: b(self.ddc),
            ttc: b(self.ttc),
            comfort: b(self.comfort),
            ep,
        }
    }
}

/// Earliest projected contact time under constant velocities, if any within
/// the lookahead (sampled every `substep`, starting at 0).
pub fn time_to_collision(
    ego: &AgentPose,
    ego_dims: (f64, f64),
    other: &AgentPose,
    other_dims: (f64, f64),
    cfg: &SimConfig,
) -> Result<Option<f64>> {
    let reach = (ego.speed + other.speed) * cfg.ttc_lookahead
        + ego_dims.0.hypot(ego_dims.1) / 2.0
        + other_dims.0.hypot(other_dims.1) / 2.0;
    if ego.position().distance(other.position()) > reach {
        return Ok(None);
    }
    let (ve, vo) = (ego.velocity(), other.velocity());
    let n = (cfg.ttc_lookahead / cfg.ttc_substep).round() as usize;
    for k in 0..=n {
        let t = k as f64 * cfg.ttc_substep;
        let a = OrientedBox::new(ego.position().add(ve.scale(t)), ego.heading, ego_dims.0, ego_dims.1)?;
        let b = OrientedBox::new(other.position().add(vo.scale(t)), other.heading, other_dims.0, other_dims.1)?;
        if boxes_intersect(&a, &b) {
            return Ok(Some(t));
        }
    }
    Ok(None)
}

/// Replays `traj` (world frame) in `scenario` and evaluates every sub-metric.
pub fn evaluate_raw(scenario: &Scenario, traj: &EgoTrajectory, cfg: &SimConfig) -> Result<RawEvaluation> {
    let poses = traj.poses();
    if poses.len() > scenario.horizon {
        return Err(Error::Dimension(format!(
            "horizon mismatch: trajectory has {} poses, scenario {}",
            poses.len(),
            scenario.horizon
        )));
    }
    let ego = scenario
        .ego()
        .ok_or_else(|| Error::Validation(vec!["tracks: missing ego".into()]))?;
    let ego_dims = (ego.length, ego.width);
    let others: Vec<_> = scenario.others().collect();
    let dac_limit = scenario.map.corridor_half_width + ego.width / 2.0;
    let dt = scenario.timestep;

    let mut r = RawEvaluation {
        nc: true,
        dac: true,
        ddc: true,
        ttc: true,
        comfort: true,
        progress: traj.arc_length(),
    };
    for (step, p) in poses.iter().enumerate() {
        let ego_box = OrientedBox::new(p.position(), p.heading, ego.length, ego.width)?;
        for o in &others {
            let op = &o.poses[step];
            if r.nc && boxes_intersect(&ego_box, &o.box_at(step)?) {
                r.nc = false;
            }
            if r.ttc {
                if let Some(t) = time_to_collision(p, ego_dims, op, (o.length, o.width), cfg)? {
                    if t <= cfg.ttc_threshold {
                        r.ttc = false;
                    }
                }
            }
        }
        match scenario.map.nearest_lane(p.position()) {
            Some((lane, d)) => {
                if d > dac_limit {
                    r.dac = false;
                }
                let dir = scenario.map.segments[lane].direction();
                if heading_alignment_angle(p.heading_vector(), dir)? > cfg.ddc_angle_limit {
                    r.ddc = false;
                }
            }
            None => {
                r.dac = false;
                r.ddc = false;
            }
        }
    }
    for w in poses.windows(3) {
        let accel = w[2].position().sub(w[1].position().scale(2.0)).add(w[0].position()).norm() / (dt * dt);
        if accel > cfg.max_abs_accel + BOUND_SLACK {
            r.comfort = false;
        }
    }
    for w in poses.windows(2) {
        let yaw_rate = normalize_angle(w[1].heading - w[0].heading).abs() / dt;
        if yaw_rate > cfg.max_abs_yaw_rate + BOUND_SLACK {
            r.comfort = false;
        }
    }
    Ok(r)
}

/// Scores one world-frame trajectory against a known progress reference.
pub fn evaluate(scenario: &Scenario, traj: &EgoTrajectory, cfg: &SimConfig, ep_reference: f64) -> Result<ScoreVector> {
    Ok(evaluate_raw(scenario, traj, cfg)?.scored(ep_reference))
}

/// Scores every vocabulary entry, in vocabulary order.
///
/// Progress is normalized by the best progress among collision-free entries.
pub fn score_vocabulary(scenario: &Scenario, vocab: &TrajectoryVocabulary, cfg: &SimConfig) -> Result<Vec<ScoreVector>> {
    score_vocabulary_with(scenario, vocab, cfg, Exec::default())
}

pub fn score_vocabulary_with(
    scenario: &Scenario,
    vocab: &TrajectoryVocabulary,
    cfg: &SimConfig,
    exec: Exec,
) -> Result<Vec<ScoreVector>> {
    let ego = scenario
        .ego()
        .ok_or_else(|| Error::Validation(vec!["tracks: missing ego".into()]))?;
    let start = ego.poses[0];
    let raws = par::map(exec, vocab.entries(), |entry| {
        evaluate_raw(scenario, &make_feasible(entry, &start, scenario.timestep, cfg), cfg)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let reference = raws
        .iter()
        .filter(|r| r.nc)
        .map(|r| r.progress)
        .fold(0.0, f64::max);
    Ok(raws.iter().map(|r| r.scored(reference)).collect())
}

/// Corpus means in report column order: NC, DAC, DDC, EP, TTC, COMF, Total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub nc: f64,
    pub dac: f64,
    pub ddc: f64,
    pub ep: f64,
    pub ttc: f64,
    pub comfort: f64,
    /// Mean of per-scenario PDM scores (not the PDM score of the means).
    pub total: f64,
    pub count: usize,
}

pub const SUMMARY_COLUMNS: [&str; 7] = ["NC", "DAC", "DDC", "EP", "TTC", "COMF", "Total"];

impl ScoreSummary {
    pub fn from_scores(scores: &[ScoreVector]) -> Self {
        let n = scores.len().max(1) as f64;
        let mean = |f: fn(&ScoreVector) -> f64| scores.iter().map(f).sum::<f64>() / n;
        Self {
            nc: mean(|s| s.nc),
            dac: mean(|s| s.dac),
            ddc: mean(|s| s.ddc),
            ep: mean(|s| s.ep),
            ttc: mean(|s| s.ttc),
            comfort: mean(|s| s.comfort),
            total: mean(pdm_score),
            count: scores.len(),
        }
    }

    pub fn columns(&self) -> [f64; 7] {
        [self.nc, self.dac, self.ddc, self.ep, self.ttc, self.comfort, self.total]
    }
}

/// A point's lateral offset from the nearest lane, signed left-positive.
pub fn signed_lane_offset(scenario: &Scenario, p: Point2) -> Option<f64> {
    let (lane, _) = scenario.map.nearest_lane(p)?;
    let seg = scenario.map.segments[lane].segment().ok()?;
    let foot = seg.point_at(seg.project(p));
    let dir = seg.direction();
    Some(dir.cross(p.sub(foot)).signum() * p.distance(foot))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{AgentTrack, LaneSegment, MapRegion, EGO_TRAJECTORY_LEN};
    use crate::vocab::BuildMeta;

    fn road() -> MapRegion {
        MapRegion::new(
            vec![
                LaneSegment::new(0, Point2::new(-100.0, 0.0), Point2::new(200.0, 0.0)),
                LaneSegment::new(1, Point2::new(200.0, 3.5), Point2::new(-100.0, 3.5)),
            ],
            2.0,
        )
        .unwrap()
    }

    fn track(id: u32, start: Point2, heading: f64, speed: f64) -> AgentTrack {
        let v = Point2::from_heading(heading).scale(speed * 0.1);
        AgentTrack {
            agent_id: id,
            length: 4.5,
            width: 2.0,
            poses: (0..50)
                .map(|t| {
                    let p = start.add(v.scale(t as f64));
                    AgentPose::new(p.x, p.y, heading, speed)
                })
                .collect(),
        }
    }

    fn scenario(tracks: Vec<AgentTrack>) -> Scenario {
        Scenario { map: road(), tracks, timestep: 0.1, horizon: 50 }
    }

    fn straight_candidate(speed: f64) -> EgoTrajectory {
        EgoTrajectory::new(
            (0..EGO_TRAJECTORY_LEN)
                .map(|i| AgentPose::new(speed * 0.1 * i as f64, 0.0, 0.0, speed))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn pdm_examples() {
        let ones = ScoreVector::from_array([1.0; 6]);
        assert_eq!(pdm_score(&ones), 1.0);
        assert_eq!(pdm_score(&ScoreVector { nc: 0.0, ..ones }), 0.0);
        let v = ScoreVector { ttc: 0.5, ep: 0.5, ..ones };
        assert!((pdm_score(&v) - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn feasible_candidate_passes_through() {
        let cfg = SimConfig::default();
        let current = AgentPose::new(5.0, -1.0, 0.4, 8.0);
        let cand = straight_candidate(8.0);
        let out = make_feasible(&cand, &current, 0.1, &cfg);
        for (o, c) in out.poses().iter().zip(cand.poses()) {
            let w = c.from_frame(&current);
            assert!(o.position().distance(w.position()) < 1e-6);
        }
    }

    #[test]
    fn heading_jump_is_rate_limited() {
        let cfg = SimConfig::default();
        let cand = EgoTrajectory::new(
            (0..EGO_TRAJECTORY_LEN)
                .map(|i| AgentPose::new(0.0, i as f64, std::f64::consts::FRAC_PI_2, 10.0))
                .collect(),
        )
        .unwrap();
        let out = make_feasible(&cand, &AgentPose::new(0.0, 0.0, 0.0, 10.0), 0.1, &cfg);
        for w in out.poses().windows(2) {
            let dh = normalize_angle(w[1].heading - w[0].heading).abs();
            assert!(dh <= cfg.max_abs_yaw_rate * 0.1 + 1e-12);
            assert!((w[1].speed - w[0].speed).abs() <= cfg.max_abs_accel * 0.1 + 1e-12);
        }
    }

    #[test]
    fn straight_from_moving_history_matches_hand_integration() {
        let out = make_feasible(&straight_candidate(12.0), &AgentPose::new(1.0, 2.0, 0.0, 12.0), 0.1, &SimConfig::default());
        for (i, p) in out.poses().iter().enumerate() {
            assert!((p.x - (1.0 + 1.2 * i as f64)).abs() < 1e-9);
            assert!((p.y - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stationary_clear_road() {
        let s = scenario(vec![track(0, Point2::ORIGIN, 0.0, 0.0), track(1, Point2::new(-80.0, 3.5), 0.0, 0.0)]);
        let traj = make_feasible(&straight_candidate(0.0), &s.tracks[0].poses[0], 0.1, &SimConfig::default());
        let v = evaluate(&s, &traj, &SimConfig::default(), 20.0).unwrap();
        assert_eq!(v, ScoreVector { nc: 1.0, dac: 1.0, ddc: 1.0, ttc: 1.0, comfort: 1.0, ep: 0.0 });
    }

    #[test]
    fn progress_ratio() {
        let s = scenario(vec![track(0, Point2::ORIGIN, 0.0, 0.0)]);
        let poses: Vec<_> = (0..EGO_TRAJECTORY_LEN)
            .map(|i| AgentPose::new(10.0 * i as f64 / 39.0, 0.0, 0.0, 100.0 / 39.0))
            .collect();
        let v = evaluate(&s, &EgoTrajectory::new(poses).unwrap(), &SimConfig::default(), 20.0).unwrap();
        assert!((v.ep - 0.5).abs() < 1e-12);
        assert_eq!(v.nc, 1.0);
    }

    #[test]
    fn oncoming_in_own_lane_collides() {
        let s = scenario(vec![track(0, Point2::ORIGIN, 0.0, 8.0), track(1, Point2::new(60.0, 0.0), std::f64::consts::PI, 8.0)]);
        let traj = make_feasible(&straight_candidate(8.0), &s.tracks[0].poses[0], 0.1, &SimConfig::default());
        let v = evaluate(&s, &traj, &SimConfig::default(), 1.0).unwrap();
        assert_eq!(v.nc, 0.0);
        assert_eq!(v.ttc, 0.0);
    }

    #[test]
    fn wrong_way_fails_ddc_and_off_road_fails_dac() {
        let s = scenario(vec![track(0, Point2::ORIGIN, 0.0, 0.0)]);
        let back: Vec<_> = (0..EGO_TRAJECTORY_LEN)
            .map(|i| AgentPose::new(-0.5 * i as f64, 0.0, -std::f64::consts::PI, 5.0))
            .collect();
        let r = evaluate_raw(&s, &EgoTrajectory::new(back).unwrap(), &SimConfig::default()).unwrap();
        assert!(!r.ddc && r.dac);
        let off: Vec<_> = (0..EGO_TRAJECTORY_LEN).map(|_| AgentPose::new(0.0, -3.5, 0.0, 0.0)).collect();
        let r = evaluate_raw(&s, &EgoTrajectory::new(off).unwrap(), &SimConfig::default()).unwrap();
        assert!(!r.dac && r.ddc);
    }

    #[test]
    fn horizon_mismatch() {
        let mut s = scenario(vec![track(0, Point2::ORIGIN, 0.0, 0.0)]);
        s.horizon = 30;
        s.tracks[0].poses.truncate(30);
        assert!(evaluate_raw(&s, &straight_candidate(1.0), &SimConfig::default()).is_err());
    }

    fn vocab(entries: Vec<EgoTrajectory>) -> TrajectoryVocabulary {
        TrajectoryVocabulary::new(entries, BuildMeta { sample_count: 0, seed: 0, iterations: 0 }).unwrap()
    }

    #[test]
    fn ego_only_all_collision_free_and_permutation_equivariant() {
        let s = scenario(vec![track(0, Point2::ORIGIN, 0.0, 6.0)]);
        let entries: Vec<_> = [2.0, 6.0, 9.0].iter().map(|&v| straight_candidate(v)).collect();
        let a = score_vocabulary(&s, &vocab(entries.clone()), &SimConfig::default()).unwrap();
        assert!(a.iter().all(|v| v.nc == 1.0));
        let rev: Vec<_> = entries.into_iter().rev().collect();
        let b = score_vocabulary(&s, &vocab(rev), &SimConfig::default()).unwrap();
        assert_eq!(a.iter().rev().copied().collect::<Vec<_>>(), b);
    }

    #[test]
    fn corpus_total_is_mean_of_totals() {
        let ones = ScoreVector::from_array([1.0; 6]);
        let zero_nc = ScoreVector { nc: 0.0, ..ones };
        let summary = ScoreSummary::from_scores(&[ones, zero_nc]);
        assert_eq!(summary.total, 0.5);
        let of_means = ScoreVector::from_array([summary.nc, summary.dac, summary.ddc, summary.ttc, summary.comfort, summary.ep]);
        assert_eq!(pdm_score(&of_means), 0.5);
        // heterogeneous gates break the equality
        let zero_dac = ScoreVector { dac: 0.0, ..ones };
        let s = ScoreSummary::from_scores(&[zero_nc, zero_dac]);
        let of_means = ScoreVector::from_array([s.nc, s.dac, s.ddc, s.ttc, s.comfort, s.ep]);
        assert_eq!(s.total, 0.0);
        assert_eq!(pdm_score(&of_means), 0.25);
    }
}
