//! Two-step collision-scenario filter.
//!
//! Step 1 keeps scenarios whose generated agents stay within `d_thres` of a
//! lane centerline and within `theta_thres` of its direction, and in which
//! the ego actually collides with something. Step 2 keeps those in which at
//! least one vocabulary trajectory avoids every collision.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{boxes_intersect, heading_alignment_angle};
use crate::par::{self, Exec};
use crate::scenario::{AgentTrack, DatasetEntry, MapRegion, Scenario};
use crate::sim::{score_vocabulary_with, SimConfig};
use crate::vocab::TrajectoryVocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Metres.
    pub d_thres: f64,
    /// Radians.
    pub theta_thres: f64,
    /// Also hold the ego's logged track to the lane checks.
    pub check_ego: bool,
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_thres > 0.0 && self.theta_thres > 0.0 {
            Ok(())
        } else {
            Err(Error::Config("filter thresholds must be positive".into()))
        }
    }
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            d_thres: 3.0,
            theta_thres: 10f64.to_radians(),
            check_ego: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStage {
    LaneAdherence,
    DirectionAlignment,
    NoCollision,
    NoFeasibleAvoidance,
    Passed,
}

/// Outcome of a per-step lane check; `first_violation` is `(step, value)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneCheck {
    pub passed: bool,
    pub first_violation: Option<(usize, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contact {
    pub step: usize,
    pub agent_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub passed: bool,
    pub stage: FilterStage,
    pub details: Vec<String>,
}

fn require_lanes(map: &MapRegion) -> Result<()> {
    if map.segments.is_empty() {
        Err(Error::Validation(vec!["map.segments: empty map".into()]))
    } else {
        Ok(())
    }
}

/// Passes iff every pose lies within `d_thres` of some lane segment.
pub fn check_lane_adherence(track: &AgentTrack, map: &MapRegion, d_thres: f64) -> Result<LaneCheck> {
    require_lanes(map)?;
    for (step, p) in track.poses.iter().enumerate() {
        let (_, d) = map.nearest_lane(p.position()).expect("non-empty map");
        if d > d_thres {
            return Ok(LaneCheck {
                passed: false,
                first_violation: Some((step, d)),
            });
        }
    }
    Ok(LaneCheck {
        passed: true,
        first_violation: None,
    })
}

/// Passes iff every heading is within `theta_thres` of its nearest lane's direction.
pub fn check_direction_alignment(track: &AgentTrack, map: &MapRegion, theta_thres: f64) -> Result<LaneCheck> {
    require_lanes(map)?;
    for (step, p) in track.poses.iter().enumerate() {
        let (lane, _) = map.nearest_lane(p.position()).expect("non-empty map");
        let angle = heading_alignment_angle(p.heading_vector(), map.segments[lane].direction())?;
        if angle > theta_thres {
            return Ok(LaneCheck {
                passed: false,
                first_violation: Some((step, angle)),
            });
        }
    }
    Ok(LaneCheck {
        passed: true,
        first_violation: None,
    })
}

/// First step and agent at which the logged ego box touches another box.
pub fn check_collision_involvement(scenario: &Scenario) -> Result<Option<Contact>> {
    let ego = scenario
        .ego()
        .ok_or_else(|| Error::Validation(vec!["tracks: missing ego".into()]))?;
    for step in 0..scenario.horizon {
        let eb = ego.box_at(step)?;
        for o in scenario.others() {
            if boxes_intersect(&eb, &o.box_at(step)?) {
                return Ok(Some(Contact {
                    step,
                    agent_id: o.agent_id,
                }));
            }
        }
    }
    Ok(None)
}

/// Indices of vocabulary entries that finish without a collision.
pub fn check_avoidance_feasibility(
    scenario: &Scenario,
    vocab: &TrajectoryVocabulary,
    sim: &SimConfig,
) -> Result<(bool, Vec<usize>)> {
    check_avoidance_feasibility_with(scenario, vocab, sim, Exec::default())
}

pub fn check_avoidance_feasibility_with(
    scenario: &Scenario,
    vocab: &TrajectoryVocabulary,
    sim: &SimConfig,
    exec: Exec,
) -> Result<(bool, Vec<usize>)> {
    let scores = score_vocabulary_with(scenario, vocab, sim, exec)?;
    let survivors: Vec<usize> = scores
        .iter()
        .enumerate()
        .filter(|(_, s)| s.nc == 1.0)
        .map(|(i, _)| i)
        .collect();
    Ok((!survivors.is_empty(), survivors))
}

/// Runs the checks in order and reports the first one that fails.
pub fn filter_scenario(
    scenario: &Scenario,
    cfg: &FilterConfig,
    vocab: &TrajectoryVocabulary,
    sim: &SimConfig,
) -> Result<FilterVerdict> {
    filter_scenario_with(scenario, cfg, vocab, sim, Exec::default())
}

pub fn filter_scenario_with(
    scenario: &Scenario,
    cfg: &FilterConfig,
    vocab: &TrajectoryVocabulary,
    sim: &SimConfig,
    exec: Exec,
) -> Result<FilterVerdict> {
    cfg.validate()?;
    let fail = |stage, detail: String| FilterVerdict {
        passed: false,
        stage,
        details: vec![detail],
    };
    let checked: Vec<&AgentTrack> = scenario
        .tracks
        .iter()
        .filter(|t| cfg.check_ego || t.agent_id != crate::scenario::EGO_ID)
        .collect();
    for t in &checked {
        let c = check_lane_adherence(t, &scenario.map, cfg.d_thres)?;
        if let Some((step, d)) = c.first_violation {
            return Ok(fail(
                FilterStage::LaneAdherence,
                format!("agent {} is {d:.3} m from the nearest lane at step {step}", t.agent_id),
            ));
        }
    }
    for t in &checked {
        let c = check_direction_alignment(t, &scenario.map, cfg.theta_thres)?;
        if let Some((step, a)) = c.first_violation {
            return Ok(fail(
                FilterStage::DirectionAlignment,
                format!("agent {} is {:.2}° off its lane at step {step}", t.agent_id, a.to_degrees()),
            ));
        }
    }
    let Some(contact) = check_collision_involvement(scenario)? else {
        return Ok(fail(FilterStage::NoCollision, "the ego never touches another agent".into()));
    };
    let (feasible, survivors) = check_avoidance_feasibility_with(scenario, vocab, sim, exec)?;
    let collision = format!("ego meets agent {} at step {}", contact.agent_id, contact.step);
    if !feasible {
        return Ok(FilterVerdict {
            passed: false,
            stage: FilterStage::NoFeasibleAvoidance,
            details: vec![collision, "every vocabulary trajectory collides".into()],
        });
    }
    Ok(FilterVerdict {
        passed: true,
        stage: FilterStage::Passed,
        details: vec![collision, format!("{} of {} trajectories avoid the collision", survivors.len(), vocab.k())],
    })
}

/// Per-scenario verdicts plus the stage histogram and step counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub total: usize,
    pub after_step1: usize,
    pub after_step2: usize,
    pub stages: BTreeMap<FilterStage, usize>,
    pub verdicts: BTreeMap<String, FilterVerdict>,
}

/// Filters a corpus; scenarios are independent, so the report does not
/// depend on evaluation order.
pub fn filter_corpus(
    corpus: &[DatasetEntry],
    cfg: &FilterConfig,
    vocab: &TrajectoryVocabulary,
    sim: &SimConfig,
    exec: Exec,
) -> Result<FilterReport> {
    let verdicts = par::map(exec, corpus, |e| {
        filter_scenario_with(&e.scenario, cfg, vocab, sim, Exec::Sequential).map_err(|err| Error::Scenario {
            scenario: e.id.clone(),
            source: Box::new(err),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut stages = BTreeMap::new();
    let mut after_step1 = 0;
    let mut after_step2 = 0;
    let mut by_id = BTreeMap::new();
    for (e, v) in corpus.iter().zip(verdicts) {
        *stages.entry(v.stage).or_insert(0) += 1;
        if matches!(v.stage, FilterStage::NoFeasibleAvoidance | FilterStage::Passed) {
            after_step1 += 1;
        }
        if v.passed {
            after_step2 += 1;
        }
        by_id.insert(e.id.clone(), v);
    }
    Ok(FilterReport {
        total: corpus.len(),
        after_step1,
        after_step2,
        stages,
        verdicts: by_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{point_segment_distance, Point2};
    use crate::scenario::{AgentPose, LaneSegment};

    fn map() -> MapRegion {
        MapRegion::new(
            vec![
                LaneSegment::new(0, Point2::new(-50.0, 0.0), Point2::new(50.0, 0.0)),
                LaneSegment::new(1, Point2::new(50.0, 0.0), Point2::new(90.0, 30.0)),
            ],
            2.0,
        )
        .unwrap()
    }

    fn track(poses: Vec<AgentPose>) -> AgentTrack {
        AgentTrack { agent_id: 1, length: 4.5, width: 2.0, poses }
    }

    fn line(y: f64, heading: f64) -> AgentTrack {
        track((0..50).map(|t| AgentPose::new(-20.0 + 0.5 * t as f64, y, heading, 5.0)).collect())
    }

    #[test]
    fn on_centerline_passes() {
        assert!(check_lane_adherence(&line(0.0, 0.0), &map(), 3.0).unwrap().passed);
        assert!(check_direction_alignment(&line(0.0, 0.0), &map(), 10f64.to_radians()).unwrap().passed);
    }

    #[test]
    fn lateral_offset_fails_at_step_zero() {
        let c = check_lane_adherence(&line(3.5, 0.0), &map(), 3.0).unwrap();
        assert!(!c.passed);
        let (step, d) = c.first_violation.unwrap();
        assert_eq!(step, 0);
        assert!((d - 3.5).abs() < 1e-12);
    }

    #[test]
    fn fifteen_degrees_off_fails() {
        let c = check_direction_alignment(&line(0.0, 15f64.to_radians()), &map(), 10f64.to_radians()).unwrap();
        assert!(!c.passed);
        assert_eq!(c.first_violation.unwrap().0, 0);
    }

    // Per-step brute force: nearest over every segment, recomputed directly.
    fn oracle(track: &AgentTrack, m: &MapRegion, d: f64, theta: f64) -> (Option<usize>, Option<usize>) {
        let mut adh = None;
        let mut ali = None;
        for (i, p) in track.poses.iter().enumerate() {
            let dists: Vec<f64> = m
                .segments
                .iter()
                .map(|s| point_segment_distance(p.position(), &s.segment().unwrap()))
                .collect();
            let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let j = dists.iter().position(|&x| x == min).unwrap();
            if adh.is_none() && min > d {
                adh = Some(i);
            }
            let dir = m.segments[j].direction();
            let cos = (p.heading.cos() * dir.x + p.heading.sin() * dir.y) / dir.norm();
            if ali.is_none() && cos.clamp(-1.0, 1.0).acos() > theta {
                ali = Some(i);
            }
        }
        (adh, ali)
    }

    #[test]
    fn curved_track_near_junction_matches_oracle() {
        let m = map();
        for (bend, offset) in [(0.3, 0.0), (0.6, 1.0), (0.1, -2.5), (0.9, 2.0)] {
            let poses: Vec<_> = (0..50)
                .map(|t| {
                    let s = t as f64;
                    let heading = (bend * (s - 25.0) / 25.0).max(0.0);
                    AgentPose::new(30.0 + s, offset + 0.02 * s * s * bend, heading, 10.0)
                })
                .collect();
            let tr = track(poses);
            let (adh, ali) = oracle(&tr, &m, 3.0, 10f64.to_radians());
            let a = check_lane_adherence(&tr, &m, 3.0).unwrap();
            let b = check_direction_alignment(&tr, &m, 10f64.to_radians()).unwrap();
            assert_eq!(a.first_violation.map(|v| v.0), adh);
            assert_eq!(b.first_violation.map(|v| v.0), ali);
        }
    }

    #[test]
    fn thresholds_are_monotone() {
        let m = map();
        for y in [0.0, 1.0, 2.9, 3.1, 5.0] {
            let t = line(y, 0.12);
            for d in [1.0, 2.0, 3.0, 4.0] {
                if check_lane_adherence(&t, &m, d).unwrap().passed {
                    assert!(check_lane_adherence(&t, &m, d + 0.5).unwrap().passed);
                }
            }
            for th in [0.05, 0.1, 0.2] {
                if check_direction_alignment(&t, &m, th).unwrap().passed {
                    assert!(check_direction_alignment(&t, &m, th * 2.0).unwrap().passed);
                }
            }
        }
    }

    #[test]
    fn empty_map_errors() {
        let m = MapRegion { segments: vec![], corridor_half_width: 2.0 };
        assert!(check_lane_adherence(&line(0.0, 0.0), &m, 3.0).is_err());
    }

    #[test]
    fn adjacent_lanes_do_not_collide() {
        // 1 m gap between 2 m wide boxes side by side
        let ego = AgentTrack { agent_id: 0, ..line(0.0, 0.0) };
        let other = line(3.0, 0.0);
        let s = Scenario { map: map(), tracks: vec![ego, other], timestep: 0.1, horizon: 50 };
        assert_eq!(check_collision_involvement(&s).unwrap(), None);
    }
}
