//! Planning vocabulary: ego trajectories sampled from a corpus and reduced to
//! `k` representatives by Lloyd's k-means.
//!
//! Trajectories are compared as 120-dimensional vectors of
//! `(x, y, heading)` per pose in the ego frame at the first pose, heading
//! weighted 1 m/rad.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::par::{self, Exec};
use crate::rng;
use crate::scenario::{AgentPose, EgoTrajectory, Scenario, EGO_TRAJECTORY_LEN};

pub const HEADING_WEIGHT: f64 = 1.0;
pub const FLAT_DIM: usize = EGO_TRAJECTORY_LEN * 3;
pub const DEFAULT_K: usize = 256;
pub const DEFAULT_SAMPLES: usize = 10_000;
pub const DEFAULT_MAX_ITERS: usize = 100;
const CONVERGENCE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildMeta {
    pub sample_count: usize,
    pub seed: u64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryVocabulary {
    entries: Vec<EgoTrajectory>,
    pub build_meta: BuildMeta,
}

impl TrajectoryVocabulary {
    pub fn new(entries: Vec<EgoTrajectory>, build_meta: BuildMeta) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Clustering("vocabulary needs at least one entry".into()));
        }
        Ok(Self { entries, build_meta })
    }

    pub fn k(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[EgoTrajectory] {
        &self.entries
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabularyFile {
            k: self.k(),
            entries: self
                .entries
                .iter()
                .map(|e| {
                    e.poses()
                        .iter()
                        .flat_map(|p| [p.x, p.y, p.heading, p.speed])
                        .collect()
                })
                .collect(),
            build_meta: self.build_meta.clone(),
        };
        io::write_json(path, &file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: VocabularyFile = io::read_json(path)?;
        Self::from_file(file)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabularyFile =
            serde_json::from_str(text).map_err(|e| Error::json("vocabulary", &e))?;
        Self::from_file(file)
    }

    fn from_file(file: VocabularyFile) -> Result<Self> {
        if file.k != file.entries.len() {
            return Err(Error::Validation(vec![format!(
                "k is {} but the file holds {} entries",
                file.k,
                file.entries.len()
            )]));
        }
        let entries = file
            .entries
            .into_iter()
            .enumerate()
            .map(|(i, flat)| {
                if flat.len() != EGO_TRAJECTORY_LEN * 4 {
                    return Err(Error::Validation(vec![format!(
                        "entry {i} has {} values, expected {}",
                        flat.len(),
                        EGO_TRAJECTORY_LEN * 4
                    )]));
                }
                EgoTrajectory::new(
                    flat.chunks_exact(4)
                        .map(|c| AgentPose::new(c[0], c[1], c[2], c[3]))
                        .collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries, file.build_meta)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabularyFile {
    k: usize,
    /// Per entry: `x, y, heading, speed` for each pose, concatenated.
    entries: Vec<Vec<f64>>,
    build_meta: BuildMeta,
}

/// Draws `n` 40-pose ego windows uniformly over every valid (scenario, offset)
/// pair and re-expresses each in the frame of its first pose.
pub fn sample_ego_trajectories(corpus: &[Scenario], n: usize, seed: u64) -> Result<Vec<EgoTrajectory>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if corpus.is_empty() {
        return Err(Error::Clustering("cannot sample from an empty corpus".into()));
    }
    let mut windows = Vec::new();
    for (si, s) in corpus.iter().enumerate() {
        let ego = s
            .ego()
            .ok_or_else(|| Error::Clustering(format!("scenario {si} has no ego track")))?;
        if ego.poses.len() < EGO_TRAJECTORY_LEN {
            return Err(Error::Clustering(format!(
                "scenario {si} is too short: {} poses, need {EGO_TRAJECTORY_LEN}",
                ego.poses.len()
            )));
        }
        for offset in 0..=ego.poses.len() - EGO_TRAJECTORY_LEN {
            windows.push((si, offset));
        }
    }
    let mut rng = rng::seeded(seed);
    (0..n)
        .map(|_| {
            let (si, offset) = windows[rng.gen_range(0..windows.len())];
            let poses = &corpus[si].ego().expect("checked above").poses;
            let frame = poses[offset];
            EgoTrajectory::new(
                poses[offset..offset + EGO_TRAJECTORY_LEN]
                    .iter()
                    .map(|p| p.to_frame(&frame))
                    .collect(),
            )
        })
        .collect()
}

pub fn flatten(t: &EgoTrajectory) -> Vec<f64> {
    t.poses()
        .iter()
        .flat_map(|p| [p.x, p.y, HEADING_WEIGHT * p.heading])
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Result of a k-means run over flat vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centers: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Inertia after every assignment and the final mean update.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeans {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().expect("at least one entry")
    }
}

fn assign(points: &[Vec<f64>], centers: &[Vec<f64>], exec: Exec) -> (Vec<usize>, Vec<f64>) {
    par::map(exec, points, |p| {
        let mut best = (0, f64::INFINITY);
        for (ci, c) in centers.iter().enumerate() {
            let d = sq_dist(p, c);
            if d < best.1 {
                best = (ci, d);
            }
        }
        best
    })
    .into_iter()
    .unzip()
}

/// Moves the farthest point of a multi-member cluster into each empty cluster.
fn reseed_empty(points: &[Vec<f64>], centers: &mut [Vec<f64>], assignment: &mut [usize], dists: &mut [f64]) {
    let k = centers.len();
    let mut counts = vec![0usize; k];
    for &a in assignment.iter() {
        counts[a] += 1;
    }
    for c in 0..k {
        if counts[c] != 0 {
            continue;
        }
        let mut pick: Option<usize> = None;
        for i in 0..points.len() {
            if counts[assignment[i]] > 1 && pick.is_none_or(|p| dists[i] > dists[p]) {
                pick = Some(i);
            }
        }
        let i = pick.expect("k <= n leaves a cluster with spare members");
        counts[assignment[i]] -= 1;
        counts[c] = 1;
        assignment[i] = c;
        dists[i] = 0.0;
        centers[c] = points[i].clone();
    }
}

fn means(points: &[Vec<f64>], assignment: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignment) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        for v in s.iter_mut() {
            *v /= c as f64;
        }
    }
    sums
}

fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    let mut centers = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if r < w {
                        break;
                    }
                    r -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // Every point coincides with a center; take the first unused one.
            (0..n).find(|&i| !chosen[i]).expect("k <= n")
        };
        chosen[next] = true;
        centers.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[next]));
        }
    }
    centers
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Stops when the assignment is stable, when no center moves more than
/// 1e-6, or after `max_iters` updates. The returned centers are always the
/// means of the returned assignment.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize, exec: Exec) -> Result<KMeans> {
    let n = points.len();
    if k == 0 {
        return Err(Error::Clustering("k must be at least 1".into()));
    }
    if k > n {
        return Err(Error::Clustering(format!("k = {k} exceeds the {n} input points")));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Dimension("points of unequal length".into()));
    }
    let mut rng = rng::seeded(seed);
    let mut centers = kmeans_plus_plus(points, k, &mut rng);
    let (mut assignment, mut dists) = assign(points, &centers, exec);
    let mut history = vec![dists.iter().sum::<f64>()];
    let mut iterations = 0;
    for iter in 1..=max_iters {
        reseed_empty(points, &mut centers, &mut assignment, &mut dists);
        let updated = means(points, &assignment, k);
        let movement = centers
            .iter()
            .zip(&updated)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centers = updated;
        iterations = iter;
        let (next, next_dists) = assign(points, &centers, exec);
        let stable = next == assignment;
        assignment = next;
        dists = next_dists;
        history.push(dists.iter().sum());
        if stable || movement < CONVERGENCE_TOL {
            break;
        }
    }
    reseed_empty(points, &mut centers, &mut assignment, &mut dists);
    centers = means(points, &assignment, k);
    let final_inertia: f64 = points
        .iter()
        .zip(&assignment)
        .map(|(p, &a)| sq_dist(p, &centers[a]))
        .sum();
    history.push(final_inertia.min(*history.last().unwrap()));
    Ok(KMeans {
        centers,
        assignment,
        inertia_history: history,
        iterations,
    })
}

/// Clusters trajectories into a vocabulary of `k` mean trajectories.
pub fn kmeans_cluster(points: &[EgoTrajectory], k: usize, seed: u64, max_iters: usize) -> Result<TrajectoryVocabulary> {
    kmeans_cluster_with(points, k, seed, max_iters, Exec::default())
}

pub fn kmeans_cluster_with(
    points: &[EgoTrajectory],
    k: usize,
    seed: u64,
    max_iters: usize,
    exec: Exec,
) -> Result<TrajectoryVocabulary> {
    let flat: Vec<Vec<f64>> = points.iter().map(flatten).collect();
    let km = kmeans(&flat, k, seed, max_iters, exec)?;
    let mut speed_sum = vec![vec![0.0; EGO_TRAJECTORY_LEN]; k];
    let mut counts = vec![0usize; k];
    for (t, &a) in points.iter().zip(&km.assignment) {
        counts[a] += 1;
        for (s, p) in speed_sum[a].iter_mut().zip(t.poses()) {
            *s += p.speed;
        }
    }
    let entries = km
        .centers
        .iter()
        .enumerate()
        .map(|(c, center)| {
            EgoTrajectory::new(
                center
                    .chunks_exact(3)
                    .zip(&speed_sum[c])
                    .map(|(xyh, s)| AgentPose::new(xyh[0], xyh[1], xyh[2] / HEADING_WEIGHT, s / counts[c] as f64))
                    .collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    TrajectoryVocabulary::new(
        entries,
        BuildMeta {
            sample_count: points.len(),
            seed,
            iterations: km.iterations,
        },
    )
}
