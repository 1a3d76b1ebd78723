//! Realism metrics between a real and a generated scenario corpus.
//!
//! Attribute distributions are compared with a Gaussian-kernel MMD², agent
//! tracks with Hungarian-matched average and final displacement errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, write_atomic, write_json};
use crate::par::{self, Exec};
use crate::scenario::{AgentPose, Scenario};

pub const REPORT_COLUMNS: [&str; 6] = ["Position", "Heading", "Speed", "Size", "mADE", "mFDE"];

/// Kernel bandwidths per attribute class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sigmas {
    pub position: f64,
    pub heading: f64,
    pub speed: f64,
    pub size: f64,
}

impl Default for Sigmas {
    fn default() -> Self {
        Self {
            position: 5.0,
            heading: 0.5,
            speed: 2.0,
            size: 1.0,
        }
    }
}

/// Per-agent attribute vectors of one scenario set, split by class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttributeSamples {
    pub position: Vec<Vec<f64>>,
    /// Unit vectors, so wrap-around never matters.
    pub heading: Vec<Vec<f64>>,
    pub speed: Vec<Vec<f64>>,
    pub size: Vec<Vec<f64>>,
}

impl AttributeSamples {
    /// Initial states of every non-ego agent, in the ego frame at t = 0.
    pub fn from_corpus(corpus: &[Scenario]) -> Self {
        let mut s = Self::default();
        for sc in corpus {
            let Some(frame) = sc.ego().and_then(|e| e.poses.first()) else { continue };
            for t in sc.others() {
                let Some(p) = t.poses.first() else { continue };
                let r = p.to_frame(frame);
                s.position.push(vec![r.x, r.y]);
                s.heading.push(vec![r.heading.cos(), r.heading.sin()]);
                s.speed.push(vec![r.speed]);
                s.size.push(vec![t.length, t.width]);
            }
        }
        s
    }
}

fn kernel_sum(a: &[Vec<f64>], b: &[Vec<f64>], gamma: f64, exec: Exec) -> f64 {
    par::map(exec, a, |x| {
        b.iter()
            .map(|y| {
                let d2: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
                (-gamma * d2).exp()
            })
            .sum::<f64>()
    })
    .iter()
    .sum()
}

/// Biased (V-statistic) MMD² with `k(a, b) = exp(−‖a − b‖² / 2σ²)`.
pub fn mmd_squared(x: &[Vec<f64>], y: &[Vec<f64>], sigma: f64) -> Result<f64> {
    mmd_squared_with(x, y, sigma, Exec::default())
}

pub fn mmd_squared_with(x: &[Vec<f64>], y: &[Vec<f64>], sigma: f64, exec: Exec) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Validation(vec!["mmd: empty sample set".into()]));
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::Range(format!("sigma {sigma} must be positive")));
    }
    let dim = x[0].len();
    if x.iter().chain(y).any(|v| v.len() != dim) {
        return Err(Error::Dimension("mmd: inconsistent sample dimension".into()));
    }
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let (n, m) = (x.len() as f64, y.len() as f64);
    let kxx = kernel_sum(x, x, gamma, exec) / (n * n);
    let kyy = kernel_sum(y, y, gamma, exec) / (m * m);
    let kxy = kernel_sum(x, y, gamma, exec) / (n * m);
    Ok(kxx + kyy - 2.0 * kxy)
}

/// Minimum-cost assignment; `assignment[row]` is the matched column.
///
/// With more rows than columns the problem is solved on the transpose, so
/// `min(n, m)` rows are matched and the rest map to `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub assignment: Vec<Option<usize>>,
    pub total_cost: f64,
}

pub fn hungarian(cost: &[Vec<f64>]) -> Result<MatchResult> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::Dimension("cost matrix rows differ in length".into()));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Validation(vec!["cost: non-finite entry".into()]));
    }
    if n == 0 || m == 0 {
        return Ok(MatchResult {
            assignment: vec![None; n],
            total_cost: 0.0,
        });
    }
    if n > m {
        let t: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| cost[i][j]).collect()).collect();
        let r = hungarian(&t)?;
        let mut assignment = vec![None; n];
        for (j, i) in r.assignment.iter().enumerate() {
            if let Some(i) = i {
                assignment[*i] = Some(j);
            }
        }
        return Ok(MatchResult {
            assignment,
            total_cost: r.total_cost,
        });
    }
    // potentials u (rows), v (cols); p[j] = row matched to column j, 1-based
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = Some(j - 1);
        }
    }
    let total_cost = assignment
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| cost[i][j]))
        .sum();
    Ok(MatchResult { assignment, total_cost })
}

fn relative_track(poses: &[AgentPose]) -> Vec<AgentPose> {
    let origin = poses[0];
    poses.iter().map(|p| p.to_frame(&origin)).collect()
}

/// `(mADE, mFDE)` between Hungarian-matched agents of two scenarios.
///
/// Agents are matched on their initial positions in each scenario's own ego
/// frame. Each matched track is then expressed relative to its initial pose;
/// displacements are averaged over steps 1 onward (step 0 is the origin for
/// both) up to the shorter horizon, and the final one is taken at that step.
pub fn made_mfde(real: &Scenario, generated: &Scenario) -> Result<(f64, f64)> {
    let anchor = |s: &Scenario| -> Result<AgentPose> {
        s.ego()
            .and_then(|e| e.poses.first().copied())
            .ok_or_else(|| Error::Validation(vec!["tracks: missing ego".into()]))
    };
    let (fr, fg) = (anchor(real)?, anchor(generated)?);
    let starts = |s: &Scenario, f: &AgentPose| -> Vec<_> {
        s.tracks.iter().map(|t| t.poses[0].to_frame(f).position()).collect()
    };
    let (pr, pg) = (starts(real, &fr), starts(generated, &fg));
    let cost: Vec<Vec<f64>> = pr.iter().map(|a| pg.iter().map(|b| a.distance(*b)).collect()).collect();
    let matched = hungarian(&cost)?;
    let steps = real.horizon.min(generated.horizon);
    if steps < 2 {
        return Err(Error::Validation(vec!["horizon: need at least two steps".into()]));
    }
    let (mut ade, mut fde, mut pairs) = (0.0, 0.0, 0usize);
    for (i, j) in matched.assignment.iter().enumerate() {
        let Some(j) = *j else { continue };
        let a = relative_track(&real.tracks[i].poses[..steps]);
        let b = relative_track(&generated.tracks[j].poses[..steps]);
        let d: Vec<f64> = (1..steps).map(|t| a[t].position().distance(b[t].position())).collect();
        ade += d.iter().sum::<f64>() / d.len() as f64;
        fde += d[d.len() - 1];
        pairs += 1;
    }
    if pairs == 0 {
        return Err(Error::Validation(vec!["no matched agent pairs".into()]));
    }
    Ok((ade / pairs as f64, fde / pairs as f64))
}

/// One row in the layout Position, Heading, Speed, Size, mADE, mFDE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealismReport {
    #[serde(rename = "Position")]
    pub position: f64,
    #[serde(rename = "Heading")]
    pub heading: f64,
    #[serde(rename = "Speed")]
    pub speed: f64,
    #[serde(rename = "Size")]
    pub size: f64,
    #[serde(rename = "mADE")]
    pub made: f64,
    #[serde(rename = "mFDE")]
    pub mfde: f64,
}

impl RealismReport {
    pub fn values(&self) -> [f64; 6] {
        [self.position, self.heading, self.speed, self.size, self.made, self.mfde]
    }

    pub fn to_csv(&self) -> String {
        let widths: Vec<usize> = REPORT_COLUMNS.iter().map(|c| c.len().max(10)).collect();
        let head: Vec<String> = REPORT_COLUMNS.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let vals: Vec<String> = self.values().iter().zip(&widths).map(|(v, w)| format!("{v:>w$.6}")).collect();
        format!("{}\n{}\n", head.join(","), vals.join(","))
    }

    pub fn save(&self, json: &Path, csv: &Path) -> Result<()> {
        write_json(json, self)?;
        write_atomic(csv, self.to_csv().as_bytes())
    }

    pub fn load(json: &Path) -> Result<Self> {
        read_json(json)
    }
}

/// MMD² for each attribute class plus displacement errors averaged over
/// scenario pairs `(real[i], generated[i])`.
pub fn realism_report(real: &[Scenario], generated: &[Scenario], sigmas: &Sigmas, exec: Exec) -> Result<RealismReport> {
    let (a, b) = (AttributeSamples::from_corpus(real), AttributeSamples::from_corpus(generated));
    let pairs = real.len().min(generated.len());
    if pairs == 0 {
        return Err(Error::Validation(vec!["realism: empty corpus".into()]));
    }
    let disp = par::map_range(exec, pairs, |i| made_mfde(&real[i], &generated[i]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(RealismReport {
        position: mmd_squared_with(&a.position, &b.position, sigmas.position, exec)?,
        heading: mmd_squared_with(&a.heading, &b.heading, sigmas.heading, exec)?,
        speed: mmd_squared_with(&a.speed, &b.speed, sigmas.speed, exec)?,
        size: mmd_squared_with(&a.size, &b.size, sigmas.size, exec)?,
        made: disp.iter().map(|d| d.0).sum::<f64>() / pairs as f64,
        mfde: disp.iter().map(|d| d.1).sum::<f64>() / pairs as f64,
    })
}
