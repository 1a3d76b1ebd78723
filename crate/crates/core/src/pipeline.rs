//! File-level pipeline stages, one per command-line subcommand.
//!
//! Each stage reads its inputs from disk, delegates to the owning module and
//! writes its artifacts atomically. Given the same inputs and seed, every
//! stage writes byte-identical files.

use std::path::{Path, PathBuf};

use crate::corpus::{generate_collision_corpus, generate_regular_corpus, Failure};
use crate::distill::{
    build_score_table, evaluate_planner, plan, train, write_log_csv, MixConfig, ScoreHeadModel, ScoreTable,
    TrainConfig, TrainOutcome, TrainingSet,
};
use crate::error::{Error, Result};
use crate::filter::{filter_corpus, FilterConfig, FilterReport};
use crate::io::{write_atomic, write_json};
use crate::par::Exec;
use crate::realism::{realism_report, RealismReport, Sigmas};
use crate::render::{render_svg, review_html};
use crate::scenario::{read_dataset, write_dataset, DatasetEntry, MapRegion, Scenario, Split};
use crate::sim::{make_feasible, ScoreSummary, SimConfig, SUMMARY_COLUMNS};
use crate::structured::TemplateCatalog;
use crate::synth::{bundled_map, SynthesisConfig, BUNDLED_MAPS};
use crate::vocab::{kmeans_cluster_with, sample_ego_trajectories, TrajectoryVocabulary};

pub const FILTER_REPORT_FILE: &str = "filter_report.json";
pub const REVIEW_FILE: &str = "review.html";

/// A bundled map name or a path to a map JSON file; returns the name used
/// to match templates and the map.
pub fn resolve_map(spec: &str) -> Result<(String, MapRegion)> {
    let path = Path::new(spec);
    if path.is_file() {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .map(|n| n.trim_end_matches(".json").trim_end_matches(".map").to_string())
            .unwrap_or_default();
        return Ok((name, MapRegion::load(path)?));
    }
    bundled_map(spec).map(|m| (spec.to_string(), m)).ok_or_else(|| {
        Error::Config(format!(
            "{spec:?} is neither a map file nor a bundled map ({})",
            BUNDLED_MAPS.join(", ")
        ))
    })
}

fn split_or_all(entries: Vec<DatasetEntry>, split: Split) -> Vec<DatasetEntry> {
    if entries.iter().any(|e| e.split == split) {
        entries.into_iter().filter(|e| e.split == split).collect()
    } else {
        entries
    }
}

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    /// `None` uses the built-in catalog.
    pub templates: Option<PathBuf>,
    pub map: String,
    pub out: PathBuf,
    pub count: usize,
    pub seed: u64,
    pub template: Option<String>,
    /// Everyday traffic instead of collision templates.
    pub regular: bool,
    pub synthesis: SynthesisConfig,
    pub test_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct GenerateSummary {
    pub written: usize,
    pub failures: Vec<Failure>,
}

pub fn generate(opts: &GenerateOptions) -> Result<GenerateSummary> {
    if !(0.0..=1.0).contains(&opts.test_fraction) {
        return Err(Error::Config("test fraction must lie in [0, 1]".into()));
    }
    let (map_name, map) = resolve_map(&opts.map)?;
    let (entries, failures) = if opts.regular {
        (
            generate_regular_corpus(&map, opts.count, opts.seed, &opts.synthesis, opts.test_fraction)?,
            Vec::new(),
        )
    } else {
        let catalog = match &opts.templates {
            Some(p) => TemplateCatalog::load(p)?,
            None => TemplateCatalog::builtin(),
        };
        generate_collision_corpus(
            &catalog,
            &map_name,
            &map,
            opts.count,
            opts.seed,
            opts.template.as_deref(),
            &opts.synthesis,
            opts.test_fraction,
        )?
    };
    if opts.count > 0 && entries.is_empty() {
        return Err(Error::Template(format!("all {} scenarios failed to synthesize", opts.count)));
    }
    write_dataset(&opts.out, &entries)?;
    Ok(GenerateSummary {
        written: entries.len(),
        failures,
    })
}

#[derive(Debug, Clone)]
pub struct FilterOptions {
    pub input: PathBuf,
    pub out: PathBuf,
    pub vocab: PathBuf,
    pub filter: FilterConfig,
    pub sim: SimConfig,
    pub exec: Exec,
}

/// Writes the retained scenarios, `filter_report.json` and a review sheet
/// of the retained scenarios to `out`.
pub fn filter(opts: &FilterOptions) -> Result<FilterReport> {
    let entries = read_dataset(&opts.input)?;
    let vocab = TrajectoryVocabulary::load(&opts.vocab)?;
    let report = filter_corpus(&entries, &opts.filter, &vocab, &opts.sim, opts.exec)?;
    let kept: Vec<DatasetEntry> = entries.into_iter().filter(|e| report.verdicts[&e.id].passed).collect();
    write_dataset(&opts.out, &kept)?;
    write_json(&opts.out.join(FILTER_REPORT_FILE), &report)?;
    let items: Vec<_> = kept
        .iter()
        .map(|e| {
            let lines = report.verdicts[&e.id].details.clone();
            (e.id.clone(), lines, render_svg(&e.scenario, None, &e.id))
        })
        .collect();
    write_atomic(&opts.out.join(REVIEW_FILE), review_html(&items).as_bytes())?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct ClusterOptions {
    pub input: PathBuf,
    pub out: PathBuf,
    pub k: usize,
    pub samples: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub exec: Exec,
}

/// Clusters ego windows of the training split (or the whole dataset if it
/// has no training split).
pub fn cluster(opts: &ClusterOptions) -> Result<TrajectoryVocabulary> {
    let scenarios: Vec<Scenario> = split_or_all(read_dataset(&opts.input)?, Split::Train)
        .into_iter()
        .map(|e| e.scenario)
        .collect();
    let samples = sample_ego_trajectories(&scenarios, opts.samples, opts.seed)?;
    let vocab = kmeans_cluster_with(&samples, opts.k, opts.seed, opts.max_iters, opts.exec)?;
    vocab.save(&opts.out)?;
    Ok(vocab)
}

pub fn score(input: &Path, vocab: &Path, out: &Path, sim: &SimConfig, exec: Exec) -> Result<ScoreTable> {
    let entries = read_dataset(input)?;
    let vocab = TrajectoryVocabulary::load(vocab)?;
    let table = build_score_table(&entries, &vocab, sim, exec)?;
    table.save(out)?;
    Ok(table)
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub regular: PathBuf,
    pub collision: PathBuf,
    /// Merged by scenario id.
    pub tables: Vec<PathBuf>,
    pub mix: MixConfig,
    pub train: TrainConfig,
    pub out: PathBuf,
    pub log: Option<PathBuf>,
}

fn training_set(dir: &Path, table: &ScoreTable) -> Result<TrainingSet> {
    let entries: Vec<DatasetEntry> = read_dataset(dir)?.into_iter().filter(|e| e.split == Split::Train).collect();
    if entries.is_empty() {
        return Err(Error::Validation(vec![format!("{}: no training-split scenarios", dir.display())]));
    }
    TrainingSet::from_table(&entries, table)
}

/// Trains on the training splits of both datasets.
pub fn train_model(opts: &TrainOptions) -> Result<TrainOutcome> {
    let mut tables = opts.tables.iter();
    let first = tables
        .next()
        .ok_or_else(|| Error::Config("at least one score table is required".into()))?;
    let mut table = ScoreTable::load(first)?;
    for p in tables {
        table.merge(ScoreTable::load(p)?)?;
    }
    let regular = training_set(&opts.regular, &table)?;
    let collision = training_set(&opts.collision, &table)?;
    let outcome = train(&regular, &collision, &opts.mix, &opts.train)?;
    outcome.model.save(&opts.out)?;
    if let Some(log) = &opts.log {
        write_log_csv(log, &outcome.log)?;
    }
    Ok(outcome)
}

/// Closed-loop scores of the model's plans on the test split (or the whole
/// dataset if it has no test split).
pub fn eval(model: &Path, testset: &Path, vocab: &Path, sim: &SimConfig, exec: Exec) -> Result<ScoreSummary> {
    let model = ScoreHeadModel::load(model)?;
    let vocab = TrajectoryVocabulary::load(vocab)?;
    let entries = split_or_all(read_dataset(testset)?, Split::Test);
    if entries.is_empty() {
        return Err(Error::Validation(vec![format!("{}: empty test set", testset.display())]));
    }
    Ok(evaluate_planner(&model, &vocab, &entries, sim, exec)?.0)
}

/// Header and value rows in the order NC, DAC, DDC, EP, TTC, COMF, Total.
pub fn format_summary(s: &ScoreSummary) -> String {
    let head: Vec<String> = SUMMARY_COLUMNS.iter().map(|c| format!("{c:>7}")).collect();
    let vals: Vec<String> = s.columns().iter().map(|v| format!("{v:>7.4}")).collect();
    format!("{}\n{}\n", head.join(" "), vals.join(" "))
}

/// Pairs scenarios in manifest order. With `out`, writes the JSON report
/// there and the CSV next to it.
pub fn eval_realism(
    real: &Path,
    generated: &Path,
    sigmas: &Sigmas,
    out: Option<&Path>,
    exec: Exec,
) -> Result<RealismReport> {
    let load = |p: &Path| -> Result<Vec<Scenario>> { Ok(read_dataset(p)?.into_iter().map(|e| e.scenario).collect()) };
    let report = realism_report(&load(real)?, &load(generated)?, sigmas, exec)?;
    if let Some(out) = out {
        report.save(out, &out.with_extension("csv"))?;
    }
    Ok(report)
}

/// Renders a scenario file; with a model and vocabulary, overlays the plan
/// the model selects after the feasibility pass.
pub fn render(scenario: &Path, out: &Path, planner: Option<(&Path, &Path)>, sim: &SimConfig) -> Result<()> {
    let s = Scenario::load(scenario)?;
    let planned = match planner {
        Some((model, vocab)) => {
            let model = ScoreHeadModel::load(model)?;
            let vocab = TrajectoryVocabulary::load(vocab)?;
            let p = plan(&s, &model, &vocab)?;
            let start = s.ego().expect("validated scenario has an ego").poses[0];
            Some(make_feasible(&p.trajectory, &start, s.timestep, sim).into_poses())
        }
        None => None,
    };
    let title = scenario.file_name().and_then(|n| n.to_str()).unwrap_or("scenario");
    write_atomic(out, render_svg(&s, planned.as_deref(), title).as_bytes())
}
