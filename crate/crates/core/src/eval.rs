//! C-way K-shot episodes, accuracy and macro-F1, and multi-run reports.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use log::info;
use rand::seq::SliceRandom;

use crate::config::{pair, parse_value, Pairs, Settings};
use crate::error::{Error, Result};
use crate::pretrain::TrainedModel;
use crate::prompting::{few_shot_tune, ClassPromptSet, Prediction, Predictor, TuneConfig};
use crate::rng::{stream_rng, Stream};
use crate::tag::TextAttributedGraph;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    /// Sorted class ids.
    pub classes: Vec<usize>,
    /// `(node, label)` pairs, `K` per class.
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

/// Draws `ways` classes among those with at least `shots + 1` nodes, then
/// `shots` support nodes per class; the rest of those classes' nodes form
/// the query set.
pub fn sample_episode(graph: &TextAttributedGraph, ways: usize, shots: usize, seed: u64) -> Result<Episode> {
    sample_episode_from(graph, ways, shots, seed, Stream::Episode)
}

/// Like [`sample_episode`], on the validation stream.
pub fn sample_validation_episode(graph: &TextAttributedGraph, ways: usize, shots: usize, seed: u64) -> Result<Episode> {
    sample_episode_from(graph, ways, shots, seed, Stream::Validation)
}

fn sample_episode_from(graph: &TextAttributedGraph, ways: usize, shots: usize, seed: u64, stream: Stream) -> Result<Episode> {
    if ways == 0 {
        return Err(Error::config("ways", "must be at least 1"));
    }
    let by_class = graph.nodes_by_class();
    let eligible: Vec<usize> = (0..by_class.len()).filter(|&c| by_class[c].len() > shots).collect();
    if eligible.len() < ways {
        return Err(Error::config(
            "ways",
            format!("{} classes requested but only {} have more than {} nodes", ways, eligible.len(), shots),
        ));
    }
    let mut rng = stream_rng(seed, stream);
    let mut classes: Vec<usize> = eligible.choose_multiple(&mut rng, ways).copied().collect();
    classes.sort_unstable();
    let mut support = Vec::with_capacity(ways * shots);
    let mut query = Vec::new();
    for &c in &classes {
        let mut nodes = by_class[c].clone();
        nodes.shuffle(&mut rng);
        let (s, q) = nodes.split_at(shots);
        support.extend(s.iter().map(|&n| (n, c)));
        query.extend(q.iter().map(|&n| (n, c)));
    }
    query.sort_unstable();
    Ok(Episode { classes, support, query })
}

/// Accuracy and macro-F1, averaging per-class F1 over the classes present
/// in `truths`.
pub fn evaluate(predictions: &[usize], truths: &[usize]) -> Result<(f64, f64)> {
    if predictions.is_empty() {
        return Err(Error::invalid("no predictions to evaluate"));
    }
    if predictions.len() != truths.len() {
        return Err(Error::Shape {
            op: "evaluate",
            left: vec![predictions.len()],
            right: vec![truths.len()],
        });
    }
    let correct = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    let accuracy = correct as f64 / truths.len() as f64;
    let classes: BTreeSet<usize> = truths.iter().copied().collect();
    let mut f1_sum = 0.0;
    for &c in &classes {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (&p, &t) in predictions.iter().zip(truths) {
            match (p == c, t == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        f1_sum += 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
    }
    Ok((accuracy, f1_sum / classes.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub runs: Vec<RunMetrics>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_f1: f64,
    pub std_f1: f64,
}

/// Mean and sample standard deviation; the deviation of one value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl MetricsReport {
    pub fn from_runs(runs: Vec<RunMetrics>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::invalid("no runs to report"));
        }
        let acc: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
        let f1: Vec<f64> = runs.iter().map(|r| r.macro_f1).collect();
        let (mean_accuracy, std_accuracy) = mean_std(&acc);
        let (mean_f1, std_f1) = mean_std(&f1);
        Ok(Self {
            runs,
            mean_accuracy,
            std_accuracy,
            mean_f1,
            std_f1,
        })
    }

    /// Per-run `run acc f1` lines and a `mean±std` footer, 4 decimals.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, r) in self.runs.iter().enumerate() {
            let _ = writeln!(out, "{}\t{:.4}\t{:.4}", i, r.accuracy, r.macro_f1);
        }
        let _ = writeln!(
            out,
            "mean±std\t{:.4}±{:.4}\t{:.4}±{:.4}",
            self.mean_accuracy, self.std_accuracy, self.mean_f1, self.std_f1
        );
        out
    }
}

/// Runs `run(base_seed + i)` for `i < num_runs` and aggregates.
pub fn run_trials<F>(num_runs: usize, base_seed: u64, mut run: F) -> Result<MetricsReport>
where
    F: FnMut(u64) -> Result<RunMetrics>,
{
    if num_runs == 0 {
        return Err(Error::config("runs", "must be at least 1"));
    }
    let runs = (0..num_runs as u64)
        .map(|i| run(base_seed.wrapping_add(i)))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_runs(runs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub ways: usize,
    /// 0 for zero-shot.
    pub shots: usize,
    pub runs: usize,
    /// Zero-shot decisions with the negative encoder's probabilities.
    pub prob_average: bool,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            ways: 5,
            shots: 0,
            runs: 5,
            prob_average: false,
        }
    }
}

impl Settings for TaskConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "ways" => self.ways = parse_value(key, value)?,
            "shots" => self.shots = parse_value(key, value)?,
            "runs" => self.runs = parse_value(key, value)?,
            "prob_average" => self.prob_average = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Pairs {
        vec![
            pair("ways", self.ways),
            pair("shots", self.shots),
            pair("runs", self.runs),
            pair("prob_average", self.prob_average),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub metrics: RunMetrics,
    pub support_size: usize,
    /// `(node, true label, prediction)` per query node.
    pub predictions: Vec<(usize, usize, Prediction)>,
}

/// Samples one episode, tunes a prompt on its support set when `shots > 0`,
/// and scores the query nodes.
pub fn run_episode(
    model: &TrainedModel,
    graph: &TextAttributedGraph,
    task: &TaskConfig,
    tune: &TuneConfig,
    seed: u64,
) -> Result<EpisodeResult> {
    if task.prob_average && task.shots > 0 {
        return Err(Error::config("prob_average", "applies to zero-shot episodes only"));
    }
    let episode = sample_episode(graph, task.ways, task.shots, seed)?;
    if episode.query.is_empty() {
        return Err(Error::invalid("episode has no query nodes"));
    }
    let mut prompts = ClassPromptSet::from_template(graph, &episode.classes, &tune.template)?;
    if task.shots > 0 {
        let outcome = few_shot_tune(model, graph, &episode.support, &prompts, tune, seed)?;
        prompts = prompts.with_vectors(outcome.vectors);
    }
    let predictor = Predictor::new(model, graph, &prompts, task.prob_average)?;
    let predictions = episode
        .query
        .iter()
        .map(|&(node, truth)| Ok((node, truth, predictor.predict(node)?)))
        .collect::<Result<Vec<_>>>()?;
    let preds: Vec<usize> = predictions.iter().map(|p| p.2.label).collect();
    let truths: Vec<usize> = predictions.iter().map(|p| p.1).collect();
    let (accuracy, macro_f1) = evaluate(&preds, &truths)?;
    info!(
        "episode seed {}: {}-way {}-shot, support {}, query {}, acc {:.4}",
        seed,
        task.ways,
        task.shots,
        episode.support.len(),
        episode.query.len(),
        accuracy
    );
    Ok(EpisodeResult {
        metrics: RunMetrics { accuracy, macro_f1 },
        support_size: episode.support.len(),
        predictions,
    })
}

/// `task.runs` episodes with seeds `base_seed + i`.
pub fn evaluate_model(
    model: &TrainedModel,
    graph: &TextAttributedGraph,
    task: &TaskConfig,
    tune: &TuneConfig,
    base_seed: u64,
) -> Result<MetricsReport> {
    run_trials(task.runs, base_seed, |seed| {
        run_episode(model, graph, task, tune, seed).map(|r| r.metrics)
    })
}
