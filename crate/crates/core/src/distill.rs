//! Score-head distillation over a trajectory vocabulary.
//!
//! A small feed-forward network maps a handcrafted scene encoding to one
//! sigmoid output per (vocabulary entry, sub-metric) and is trained with
//! summed binary cross-entropy against simulator scores. Each training step
//! draws its batch from the regular set with probability `p_r`, otherwise
//! from the collision set, and weights the loss accordingly.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::point_segment_distance;
use crate::io::{read_json, write_atomic, write_json};
use crate::par::{self, Exec};
use crate::rng::substream;
use crate::scenario::{DatasetEntry, EgoTrajectory, Scenario};
use crate::sim::{pdm_score, score_vocabulary_with, ScoreSummary, ScoreVector, SimConfig, METRIC_COUNT, METRIC_NAMES};
use crate::vocab::TrajectoryVocabulary;

pub const EGO_FEATURES: usize = 3;
pub const AGENT_SLOTS: usize = 8;
pub const AGENT_FEATURES: usize = 7;
pub const LANE_SLOTS: usize = 4;
pub const LANE_FEATURES: usize = 5;
/// 3 ego + 8 × 7 agent + 4 × 5 lane features.
pub const FEATURE_DIM: usize = EGO_FEATURES + AGENT_SLOTS * AGENT_FEATURES + LANE_SLOTS * LANE_FEATURES;
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];
pub const PROB_CLAMP: f64 = 1e-7;

const POSITION_SCALE: f64 = 20.0;
const SPEED_SCALE: f64 = 10.0;
const OFFSET_SCALE: f64 = 5.0;
const LANE_DISTANCE_SCALE: f64 = 10.0;

const CHECKPOINT_FORMAT: &str = "collide-score-head";
const CHECKPOINT_VERSION: u32 = 1;

/// Scene encoding at t = 0, expressed in the ego frame.
///
/// Layout: `[ego speed, cos, sin of ego heading relative to its nearest lane]`,
/// then per nearest agent `[x, y, vx, vy, cos, sin, present]` (relative
/// position, relative velocity, relative heading), then per nearest lane
/// `[cos, sin, lateral offset, distance, present]`. Missing slots are zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn from_scenario(scenario: &Scenario) -> Result<Self> {
        let ego = scenario
            .ego()
            .ok_or_else(|| Error::Validation(vec!["tracks: missing ego".into()]))?;
        let e = ego.poses.first().ok_or_else(|| Error::Validation(vec!["tracks[0].poses: empty".into()]))?;
        let mut v = Vec::with_capacity(FEATURE_DIM);

        let mut lanes = Vec::with_capacity(scenario.map.segments.len());
        for (i, lane) in scenario.map.segments.iter().enumerate() {
            let seg = lane.segment()?;
            lanes.push((point_segment_distance(e.position(), &seg), i, seg));
        }
        lanes.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        v.push(e.speed / SPEED_SCALE);
        match lanes.first() {
            Some((_, _, seg)) => {
                let d = seg.direction().rotate(-e.heading);
                let n = d.norm();
                v.extend([d.x / n, d.y / n]);
            }
            None => v.extend([0.0, 0.0]),
        }

        let mut others: Vec<_> = scenario
            .others()
            .filter_map(|t| t.poses.first())
            .map(|p| (p.position().distance(e.position()), p.to_frame(e)))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0));
        for slot in 0..AGENT_SLOTS {
            match others.get(slot) {
                Some((_, r)) => {
                    let (s, c) = r.heading.sin_cos();
                    v.extend([
                        r.x / POSITION_SCALE,
                        r.y / POSITION_SCALE,
                        (r.speed * c - e.speed) / SPEED_SCALE,
                        r.speed * s / SPEED_SCALE,
                        c,
                        s,
                        1.0,
                    ]);
                }
                None => v.extend([0.0; AGENT_FEATURES]),
            }
        }

        for slot in 0..LANE_SLOTS {
            match lanes.get(slot) {
                Some((dist, _, seg)) => {
                    let dir = seg.direction();
                    let u = dir.scale(1.0 / dir.norm());
                    let local = u.rotate(-e.heading);
                    let lateral = u.cross(e.position().sub(seg.start()));
                    v.extend([local.x, local.y, lateral / OFFSET_SCALE, dist / LANE_DISTANCE_SCALE, 1.0]);
                }
                None => v.extend([0.0; LANE_FEATURES]),
            }
        }
        debug_assert_eq!(v.len(), FEATURE_DIM);
        Ok(Self(v))
    }

    pub fn zeros() -> Self {
        Self(vec![0.0; FEATURE_DIM])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Feed-forward network with tanh hidden layers and sigmoid outputs.
///
/// Parameters are stored flat, layer by layer, each layer as its
/// `out × in` row-major weight matrix followed by its bias vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreHeadModel {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    sizes: Vec<usize>,
    params: Vec<f64>,
}

pub fn default_sizes(k: usize) -> Vec<usize> {
    let mut s = vec![FEATURE_DIM];
    s.extend(DEFAULT_HIDDEN);
    s.push(k * METRIC_COUNT);
    s
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ScoreHeadModel {
    /// Xavier-uniform weights and zero biases.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        Self::check_sizes(sizes)?;
        let mut rng = substream(seed, 0);
        let mut params = Vec::with_capacity(param_count(sizes));
        for w in sizes.windows(2) {
            let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
            for _ in 0..w[0] * w[1] {
                params.push(rng.gen_range(-bound..bound));
            }
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Ok(Self { sizes: sizes.to_vec(), params })
    }

    pub fn with_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        Self::check_sizes(sizes)?;
        if params.len() != param_count(sizes) {
            return Err(Error::Dimension(format!(
                "expected {} parameters for sizes {sizes:?}, got {}",
                param_count(sizes),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Validation(vec!["params: non-finite value".into()]));
        }
        Ok(Self { sizes: sizes.to_vec(), params })
    }

    fn check_sizes(sizes: &[usize]) -> Result<()> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Dimension(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(())
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!("model expects {} inputs, got {}", self.input_dim(), x.len())));
        }
        Ok(())
    }

    /// All layer activations, input first.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        let mut off = 0;
        let last = self.sizes.len() - 2;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.params[off..off + n_in * n_out];
            let bias = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let a = acts.last().unwrap();
            let mut z: Vec<f64> = (0..n_out)
                .map(|o| bias[o] + weights[o * n_in..(o + 1) * n_in].iter().zip(a).map(|(w, x)| w * x).sum::<f64>())
                .collect();
            for v in &mut z {
                *v = if l == last { sigmoid(*v) } else { v.tanh() };
            }
            acts.push(z);
            off += n_in * n_out + n_out;
        }
        acts
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.activations(x).pop().unwrap())
    }

    /// Adds `scale · ∂L/∂θ` into `grad` and returns the unscaled loss `L`.
    pub fn loss_and_grad(&self, x: &[f64], target: &[f64], scale: f64, grad: &mut [f64]) -> Result<f64> {
        self.check_input(x)?;
        if grad.len() != self.params.len() {
            return Err(Error::Dimension("gradient buffer size".into()));
        }
        let acts = self.activations(x);
        let out = acts.last().unwrap();
        let loss = bce_loss(out, target)?;
        // d(bce)/dz through the sigmoid is p − t, zero where the clamp is active
        let mut delta: Vec<f64> = out
            .iter()
            .zip(target)
            .map(|(&p, &t)| if p > PROB_CLAMP && p < 1.0 - PROB_CLAMP { scale * (p - t) } else { 0.0 })
            .collect();
        let mut off = self.params.len();
        for l in (0..self.sizes.len() - 1).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            off -= n_in * n_out + n_out;
            let a = &acts[l];
            for o in 0..n_out {
                let d = delta[o];
                if d != 0.0 {
                    let row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                    for (g, x) in row.iter_mut().zip(a) {
                        *g += d * x;
                    }
                }
                grad[off + n_in * n_out + o] += d;
            }
            if l > 0 {
                let weights = &self.params[off..off + n_in * n_out];
                let mut prev = vec![0.0; n_in];
                for o in 0..n_out {
                    let d = delta[o];
                    if d != 0.0 {
                        for (p, w) in prev.iter_mut().zip(&weights[o * n_in..(o + 1) * n_in]) {
                            *p += d * w;
                        }
                    }
                }
                for (p, a) in prev.iter_mut().zip(a) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            }
        }
        Ok(loss)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(
            path,
            &Checkpoint {
                format: CHECKPOINT_FORMAT.into(),
                version: CHECKPOINT_VERSION,
                sizes: self.sizes.clone(),
                params: self.params.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Checkpoint = read_json(path)?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::Validation(vec![format!(
                "checkpoint: unsupported format {} v{}",
                c.format, c.version
            )]));
        }
        Self::with_params(&c.sizes, c.params)
    }
}

/// Summed binary cross-entropy; predictions are clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce_loss(predicted: &[f64], target: &[f64]) -> Result<f64> {
    if predicted.len() != target.len() {
        return Err(Error::Dimension(format!(
            "prediction has {} values, target {}",
            predicted.len(),
            target.len()
        )));
    }
    Ok(predicted
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum())
}

/// Ground-truth sub-scores per scenario id, one row per vocabulary entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub k: usize,
    pub metrics: Vec<String>,
    pub scores: BTreeMap<String, Vec<[f64; METRIC_COUNT]>>,
}

impl ScoreTable {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            metrics: METRIC_NAMES.iter().map(|s| s.to_string()).collect(),
            scores: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.metrics.iter().map(String::as_str).ne(METRIC_NAMES) {
            errs.push(format!("metrics: expected {METRIC_NAMES:?}"));
        }
        for (id, rows) in &self.scores {
            if rows.len() != self.k {
                errs.push(format!("scores.{id}: {} rows, expected {}", rows.len(), self.k));
            }
            if rows.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
                errs.push(format!("scores.{id}: value outside [0, 1]"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    /// Flat `k × 6` target row, entry-major.
    pub fn target(&self, id: &str) -> Option<Vec<f64>> {
        self.scores.get(id).map(|rows| rows.iter().flatten().copied().collect())
    }

    /// Merges `other` into `self`; ids must not repeat.
    pub fn merge(&mut self, other: ScoreTable) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Dimension(format!("cannot merge tables with k {} and {}", self.k, other.k)));
        }
        for (id, rows) in other.scores {
            if self.scores.insert(id.clone(), rows).is_some() {
                return Err(Error::Validation(vec![format!("scores.{id}: duplicate scenario id")]));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t: Self = read_json(path)?;
        t.validate()?;
        Ok(t)
    }
}

pub fn build_score_table(
    dataset: &[DatasetEntry],
    vocab: &TrajectoryVocabulary,
    sim: &SimConfig,
    exec: Exec,
) -> Result<ScoreTable> {
    let rows = par::map(exec, dataset, |e| {
        score_vocabulary_with(&e.scenario, vocab, sim, Exec::Sequential)
            .map(|s| s.iter().map(ScoreVector::to_array).collect::<Vec<_>>())
            .map_err(|err| Error::Scenario {
                scenario: e.id.clone(),
                source: Box::new(err),
            })
    });
    let mut table = ScoreTable::new(vocab.k());
    for (e, r) in dataset.iter().zip(rows) {
        if table.scores.insert(e.id.clone(), r?).is_some() {
            return Err(Error::Validation(vec![format!("{}: duplicate scenario id", e.id)]));
        }
    }
    Ok(table)
}

/// Encoded scenes paired with their flattened score-table rows.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub ids: Vec<String>,
    pub features: Vec<FeatureVector>,
    pub targets: Vec<Vec<f64>>,
}

impl TrainingSet {
    pub fn from_table(entries: &[DatasetEntry], table: &ScoreTable) -> Result<Self> {
        let mut set = Self::default();
        for e in entries {
            let target = table
                .target(&e.id)
                .ok_or_else(|| Error::Validation(vec![format!("{}: not in score table", e.id)]))?;
            set.ids.push(e.id.clone());
            set.features.push(FeatureVector::from_scenario(&e.scenario)?);
            set.targets.push(target);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixConfig {
    pub p_r: f64,
    pub w_r: f64,
    pub w_c: f64,
}

impl MixConfig {
    /// `regular:collision` ratio, e.g. 10:1 gives `p_r = 10/11`.
    pub fn from_ratio(regular: f64, collision: f64) -> Result<Self> {
        if !(regular >= 0.0 && collision >= 0.0 && regular + collision > 0.0) {
            return Err(Error::Config(format!("invalid mixing ratio {regular}:{collision}")));
        }
        Ok(Self {
            p_r: regular / (regular + collision),
            w_r: 1.0,
            w_c: 1.0,
        })
    }

    /// Parses `"10:1"`.
    pub fn parse_ratio(text: &str) -> Result<Self> {
        let bad = || Error::Config(format!("ratio must look like 10:1, got {text:?}"));
        let (a, b) = text.split_once(':').ok_or_else(bad)?;
        let a: f64 = a.trim().parse().map_err(|_| bad())?;
        let b: f64 = b.trim().parse().map_err(|_| bad())?;
        Self::from_ratio(a, b)
    }

    pub fn p_c(&self) -> f64 {
        1.0 - self.p_r
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_r) {
            return Err(Error::Config("p_r must lie in [0, 1]".into()));
        }
        if !(self.w_r >= 0.0 && self.w_c >= 0.0 && self.w_r.is_finite() && self.w_c.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

impl Default for MixConfig {
    fn default() -> Self {
        Self::from_ratio(10.0, 1.0).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 2e-4,
            batch: 32,
            seed: 0,
            optimizer: Optimizer::Adam,
            hidden: DEFAULT_HIDDEN.to_vec(),
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Regular,
    Collision,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Regular => "regular",
            Source::Collision => "collision",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub source: Source,
    /// Weighted batch-mean loss.
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ScoreHeadModel,
    pub log: Vec<LogEntry>,
}

pub fn log_csv(log: &[LogEntry]) -> String {
    let mut s = String::from("step,source,loss\n");
    for e in log {
        s.push_str(&format!("{},{},{}\n", e.step, e.source, e.loss));
    }
    s
}

pub fn write_log_csv(path: &Path, log: &[LogEntry]) -> Result<()> {
    write_atomic(path, log_csv(log).as_bytes())
}

/// Trains a fresh head; single-threaded so a fixed seed reproduces bit for bit.
pub fn train(regular: &TrainingSet, collision: &TrainingSet, mix: &MixConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let k_out = regular.targets.first().map(Vec::len).unwrap_or(0);
    let mut sizes = vec![FEATURE_DIM];
    sizes.extend(&cfg.hidden);
    sizes.push(k_out.max(1));
    let model = ScoreHeadModel::new(&sizes, cfg.seed)?;
    train_from(model, regular, collision, mix, cfg)
}

/// Continues training `model` in place of a fresh initialization.
pub fn train_from(
    mut model: ScoreHeadModel,
    regular: &TrainingSet,
    collision: &TrainingSet,
    mix: &MixConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    mix.validate()?;
    if regular.is_empty() || collision.is_empty() {
        return Err(Error::Training("both training sets must be non-empty".into()));
    }
    if cfg.batch == 0 || cfg.lr.is_nan() || cfg.lr <= 0.0 {
        return Err(Error::Config("batch must be positive and lr > 0".into()));
    }
    let out = model.output_dim();
    if regular.targets.iter().chain(&collision.targets).any(|t| t.len() != out) {
        return Err(Error::Dimension(format!("score-table rows do not match {out} model outputs")));
    }
    let mut rng = substream(cfg.seed, 1);
    let n = model.params.len();
    let mut grad = vec![0.0; n];
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let r: f64 = rng.gen();
        let (set, weight, source) = if r < mix.p_r {
            (regular, mix.w_r, Source::Regular)
        } else {
            (collision, mix.w_c, Source::Collision)
        };
        grad.iter_mut().for_each(|g| *g = 0.0);
        let scale = weight / cfg.batch as f64;
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let i = rng.gen_range(0..set.len());
            loss += model.loss_and_grad(set.features[i].as_slice(), &set.targets[i], scale, &mut grad)?;
        }
        let loss = weight * loss / cfg.batch as f64;
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss at step {step}")));
        }
        log.push(LogEntry { step, source, loss });
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (p, g) in model.params.iter_mut().zip(&grad) {
                    *p -= cfg.lr * g;
                }
            }
            Optimizer::Adam => {
                let t = (step + 1) as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for i in 0..n {
                    let g = grad[i];
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                    model.params[i] -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
    Ok(TrainOutcome { model, log })
}

/// PDM aggregate of each entry's predicted sub-scores.
pub fn aggregate(predicted: &[f64]) -> Vec<f64> {
    predicted
        .chunks_exact(METRIC_COUNT)
        .map(|c| pdm_score(&ScoreVector::from_array(c.try_into().unwrap())))
        .collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub index: usize,
    pub trajectory: EgoTrajectory,
    pub predicted: ScoreVector,
}

pub fn plan(scenario: &Scenario, model: &ScoreHeadModel, vocab: &TrajectoryVocabulary) -> Result<Plan> {
    if model.output_dim() != vocab.k() * METRIC_COUNT {
        return Err(Error::Dimension(format!(
            "model has {} outputs, vocabulary needs {}",
            model.output_dim(),
            vocab.k() * METRIC_COUNT
        )));
    }
    let pred = model.forward(FeatureVector::from_scenario(scenario)?.as_slice())?;
    let index = argmax(&aggregate(&pred));
    let row: [f64; METRIC_COUNT] = pred[index * METRIC_COUNT..(index + 1) * METRIC_COUNT].try_into().unwrap();
    Ok(Plan {
        index,
        trajectory: vocab.entries()[index].clone(),
        predicted: ScoreVector::from_array(row),
    })
}

/// Plans every scenario and scores the chosen entries in closed loop.
pub fn evaluate_planner(
    model: &ScoreHeadModel,
    vocab: &TrajectoryVocabulary,
    testset: &[DatasetEntry],
    sim: &SimConfig,
    exec: Exec,
) -> Result<(ScoreSummary, Vec<ScoreVector>)> {
    let scores = par::map(exec, testset, |e| {
        let wrap = |err| Error::Scenario {
            scenario: e.id.clone(),
            source: Box::new(err),
        };
        let p = plan(&e.scenario, model, vocab).map_err(wrap)?;
        let all = score_vocabulary_with(&e.scenario, vocab, sim, Exec::Sequential).map_err(wrap)?;
        Ok(all[p.index])
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok((ScoreSummary::from_scores(&scores), scores))
}

/// Largest relative error between the analytic gradient and a central
/// difference, `|a − n| / max(|a|, |n|, 1)`, over all parameters.
pub fn finite_difference_check(model: &ScoreHeadModel, x: &[f64], target: &[f64], epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(Error::Range(format!("epsilon {epsilon} outside (0, 1e-3]")));
    }
    let mut analytic = vec![0.0; model.params.len()];
    model.loss_and_grad(x, target, 1.0, &mut analytic)?;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.params[i];
        probe.params[i] = orig + epsilon;
        let up = bce_loss(&probe.forward(x)?, target)?;
        probe.params[i] = orig - epsilon;
        let down = bce_loss(&probe.forward(x)?, target)?;
        probe.params[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_regular_corpus;
    use crate::scenario::{AgentPose, AgentTrack, Split};
    use crate::structured::{Action, Orientation, StructuredAgentSpec, StructuredScene};
    use crate::synth::{bundled_map, synthesize, SynthesisConfig};
    use crate::vocab::{kmeans_cluster, sample_ego_trajectories};
    use proptest::prelude::*;

    fn ego_only() -> Scenario {
        let scene = StructuredScene {
            ego: StructuredAgentSpec {
                quadrant: 1,
                distance_bin: 0,
                orientation: Orientation::ParallelSame,
                speed_bin: 3,
                action: Action::KeepSpeed,
            },
            others: vec![],
        };
        synthesize(&scene, &bundled_map("straight_bidir").unwrap(), &SynthesisConfig::default()).unwrap()
    }

    fn small_vocab(k: usize) -> TrajectoryVocabulary {
        let map = bundled_map("straight_bidir").unwrap();
        let corpus = generate_regular_corpus(&map, 40, 9, &SynthesisConfig::default(), 0.0).unwrap();
        let scen: Vec<Scenario> = corpus.into_iter().map(|e| e.scenario).collect();
        kmeans_cluster(&sample_ego_trajectories(&scen, 200, 3).unwrap(), k, 3, 50).unwrap()
    }

    fn entry(id: &str, scenario: Scenario) -> DatasetEntry {
        DatasetEntry {
            id: id.into(),
            split: Split::Train,
            scenario,
        }
    }

    fn sgd(steps: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            steps,
            lr,
            batch: 4,
            seed: 11,
            optimizer: Optimizer::Sgd,
            hidden: vec![8],
        }
    }

    fn toy_set(k: usize, n: usize, seed: u64) -> TrainingSet {
        let mut rng = substream(seed, 99);
        let mut set = TrainingSet::default();
        for i in 0..n {
            set.ids.push(format!("s{i}"));
            set.features.push(FeatureVector((0..FEATURE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()));
            set.targets.push((0..k * METRIC_COUNT).map(|_| rng.gen_range(0.0..1.0)).collect());
        }
        set
    }

    #[test]
    fn bce_closed_forms() {
        let k = 4;
        let half = vec![0.5; k * METRIC_COUNT];
        let l = bce_loss(&half, &half).unwrap();
        assert!((l - (k * METRIC_COUNT) as f64 * 2f64.ln()).abs() < 1e-12);
        let l = bce_loss(&[1.0 - 1e-7], &[1.0]).unwrap();
        assert!((l - 1e-7).abs() < 1e-13);
        assert!(matches!(bce_loss(&[0.5; 6], &[0.5; 12]), Err(Error::Dimension(_))));
    }

    #[test]
    fn bce_matches_elementwise_oracle() {
        let mut rng = substream(4, 4);
        let p: Vec<f64> = (0..18).map(|_| rng.gen_range(0.01..0.99)).collect();
        let t: Vec<f64> = (0..18).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut oracle = 0.0;
        for i in 0..3 {
            for m in 0..6 {
                let (p, t) = (p[i * 6 + m], t[i * 6 + m]);
                oracle -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
            }
        }
        assert!((bce_loss(&p, &t).unwrap() - oracle).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn bce_non_negative_zero_only_at_binary_match(bits in prop::collection::vec(any::<bool>(), 6), p in prop::collection::vec(0.0..1.0f64, 6)) {
            let t: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            prop_assert!(bce_loss(&p, &t).unwrap() >= 0.0);
            prop_assert!(bce_loss(&t, &t).unwrap() < 1e-6);
        }
    }

    #[test]
    fn feature_vector_shape() {
        let f = FeatureVector::from_scenario(&ego_only()).unwrap();
        assert_eq!(f.as_slice().len(), FEATURE_DIM);
        assert!(f.as_slice().iter().all(|v| v.is_finite()));
        let agents = &f.as_slice()[EGO_FEATURES..EGO_FEATURES + AGENT_SLOTS * AGENT_FEATURES];
        assert!(agents.iter().all(|&v| v == 0.0));
        assert!((f.as_slice()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn score_table_columns_and_roundtrip() {
        let vocab = small_vocab(8);
        let free = ego_only();
        let mut blocked = free.clone();
        let e = blocked.tracks[0].poses[0];
        blocked.tracks.push(AgentTrack {
            agent_id: 1,
            length: 4.5,
            width: 2.0,
            poses: vec![AgentPose::new(e.x, e.y, e.heading, 0.0); blocked.horizon],
        });
        let data = vec![entry("free", free), entry("blocked", blocked)];
        let table = build_score_table(&data, &vocab, &SimConfig::default(), Exec::Parallel).unwrap();
        assert!(table.scores["free"].iter().all(|r| r[0] == 1.0));
        assert!(table.scores["blocked"].iter().all(|r| r[0] == 0.0));
        let seq = build_score_table(&data, &vocab, &SimConfig::default(), Exec::Sequential).unwrap();
        assert_eq!(seq, table);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        table.save(&path).unwrap();
        assert_eq!(ScoreTable::load(&path).unwrap(), table);
    }

    #[test]
    fn memorizes_one_scenario() {
        let set = toy_set(4, 1, 1);
        let cfg = TrainConfig {
            steps: 200,
            lr: 1e-3,
            batch: 2,
            seed: 0,
            optimizer: Optimizer::Adam,
            hidden: vec![16, 16],
        };
        let out = train(&set, &set, &MixConfig::from_ratio(1.0, 0.0).unwrap(), &cfg).unwrap();
        assert!(out.log.iter().all(|e| e.source == Source::Regular));
        for w in out.log.windows(51) {
            assert!(w[50].loss < w[0].loss);
        }
    }

    #[test]
    fn zero_weight_leaves_parameters() {
        let set = toy_set(2, 3, 2);
        let mix = MixConfig { p_r: 0.0, w_r: 1.0, w_c: 0.0 };
        for optimizer in [Optimizer::Adam, Optimizer::Sgd] {
            let cfg = TrainConfig { optimizer, ..sgd(20, 0.1) };
            let start = ScoreHeadModel::new(&[FEATURE_DIM, 8, 12], cfg.seed).unwrap();
            let out = train(&set, &set, &mix, &cfg).unwrap();
            assert_eq!(out.model, start);
        }
    }

    #[test]
    fn weight_scaling_is_linear_under_sgd() {
        let (r, c) = (toy_set(2, 5, 3), toy_set(2, 4, 4));
        let base = MixConfig { p_r: 0.6, w_r: 1.0, w_c: 3.0 };
        let a = train(&r, &c, &base, &sgd(60, 0.05)).unwrap();
        let scaled = MixConfig { w_r: 4.0, w_c: 12.0, ..base };
        let b = train(&r, &c, &scaled, &sgd(60, 0.05 / 4.0)).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        for (x, y) in a.log.iter().zip(&b.log) {
            assert_eq!(x.source, y.source);
            assert_eq!(4.0 * x.loss, y.loss);
        }
    }

    #[test]
    fn training_is_reproducible() {
        let (r, c) = (toy_set(3, 6, 5), toy_set(3, 6, 6));
        let cfg = TrainConfig { steps: 50, hidden: vec![8], ..Default::default() };
        let a = train(&r, &c, &MixConfig::default(), &cfg).unwrap();
        let b = train(&r, &c, &MixConfig::default(), &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(log_csv(&a.log), log_csv(&b.log));
    }

    #[test]
    fn empty_set_is_an_error() {
        let r = toy_set(1, 2, 0);
        let err = train(&r, &TrainingSet::default(), &MixConfig::default(), &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Training(_)));
    }

    fn rigged_model(k: usize, winner: Option<usize>) -> ScoreHeadModel {
        let sizes = [FEATURE_DIM, k * METRIC_COUNT];
        let mut params = vec![0.0; param_count(&sizes)];
        let bias = FEATURE_DIM * k * METRIC_COUNT;
        for o in 0..k * METRIC_COUNT {
            params[bias + o] = match winner {
                Some(w) if o / METRIC_COUNT == w => 40.0,
                Some(_) => -40.0,
                None => 0.3,
            };
        }
        ScoreHeadModel::with_params(&sizes, params).unwrap()
    }

    #[test]
    fn plan_picks_rigged_entry_and_breaks_ties_low() {
        let vocab = small_vocab(8);
        let s = ego_only();
        let p = plan(&s, &rigged_model(8, Some(7)), &vocab).unwrap();
        assert_eq!(p.index, 7);
        assert_eq!(&p.trajectory, &vocab.entries()[7]);
        assert!(p.predicted.nc > 0.99);
        assert_eq!(plan(&s, &rigged_model(8, None), &vocab).unwrap().index, 0);
        assert!(matches!(plan(&s, &rigged_model(5, None), &vocab), Err(Error::Dimension(_))));
    }

    #[test]
    fn plan_after_memorizing_matches_table_argmax() {
        let vocab = small_vocab(8);
        let map = bundled_map("straight_bidir").unwrap();
        let data = generate_regular_corpus(&map, 3, 21, &SynthesisConfig::default(), 0.0).unwrap();
        let table = build_score_table(&data[..1], &vocab, &SimConfig::default(), Exec::Sequential).unwrap();
        let set = TrainingSet::from_table(&data[..1], &table).unwrap();
        let cfg = TrainConfig { steps: 1500, lr: 3e-3, batch: 1, ..Default::default() };
        let out = train(&set, &set, &MixConfig::from_ratio(1.0, 0.0).unwrap(), &cfg).unwrap();
        let truth: Vec<f64> = table.scores[&data[0].id]
            .iter()
            .map(|r| pdm_score(&ScoreVector::from_array(*r)))
            .collect();
        assert_eq!(plan(&data[0].scenario, &out.model, &vocab).unwrap().index, argmax(&truth));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let set = toy_set(3, 1, 8);
        let (x, t) = (set.features[0].as_slice(), &set.targets[0]);
        let linear = ScoreHeadModel::new(&[FEATURE_DIM, 18], 1).unwrap();
        assert!(finite_difference_check(&linear, x, t, 1e-5).unwrap() < 1e-8);
        let deep = ScoreHeadModel::new(&default_sizes(3), 2).unwrap();
        assert!(finite_difference_check(&deep, x, t, 1e-5).unwrap() < 1e-4);
        let zero = finite_difference_check(&deep, FeatureVector::zeros().as_slice(), t, 1e-5).unwrap();
        assert!(zero.is_finite());
        assert!(finite_difference_check(&deep, x, t, 1e-2).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = ScoreHeadModel::new(&default_sizes(2), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        assert_eq!(ScoreHeadModel::load(&path).unwrap(), m);
        let text = std::fs::read_to_string(&path).unwrap().replace("\"version\": 1", "\"version\": 9");
        std::fs::write(&path, text).unwrap();
        assert!(ScoreHeadModel::load(&path).is_err());
    }

    #[test]
    fn ratio_parsing() {
        let m = MixConfig::parse_ratio("10:1").unwrap();
        assert!((m.p_r - 10.0 / 11.0).abs() < 1e-15);
        assert!((m.p_c() - 1.0 / 11.0).abs() < 1e-15);
        assert!(MixConfig::parse_ratio("10").is_err());
        assert!(MixConfig::parse_ratio("0:0").is_err());
    }
}
