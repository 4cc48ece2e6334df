use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::info;

use tagshot::autodiff::{checkpoint, GradCheckOptions};
use tagshot::eval::{run_episode, run_trials, sample_episode};
use tagshot::losses::check_gradients;
use tagshot::pretrain::{metrics_stream, pretrain, TrainedModel};
use tagshot::prompting::{few_shot_tune, format_predictions, ClassPromptSet, PROMPT_PARAM};
use tagshot::tag::{load_tag, save_tag, synth_tag};
use tagshot::{Error, Result};

use crate::run_config::RunConfig;

pub const METRICS_FILE: &str = "metrics.tsv";
pub const REPORT_FILE: &str = "report.txt";
pub const PROMPT_FILE: &str = "prompt.ckpt";
pub const TUNE_FILE: &str = "tune.tsv";
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let graph = synth_tag(&cfg.synth, cfg.seed)?;
    save_tag(&graph, &cfg.out)?;
    println!(
        "wrote {} nodes, {} edges, {} classes to {}",
        graph.num_nodes(),
        graph.edges().len(),
        graph.num_classes(),
        cfg.out.display()
    );
    Ok(())
}

pub fn pretrain_cmd(cfg: &RunConfig) -> Result<()> {
    let graph = load_tag(&cfg.data)?;
    let model = pretrain(&graph, &cfg.pretrain)?;
    model.save(&cfg.out)?;
    write(&cfg.out.join(METRICS_FILE), &metrics_stream(&model.trace))?;
    if let Some(last) = model.trace.last() {
        println!("{}", last.metrics_line());
    }
    println!("checkpoint written to {}", cfg.out.display());
    Ok(())
}

pub fn tune(cfg: &RunConfig) -> Result<()> {
    if cfg.task.shots == 0 {
        return Err(Error::config("shots", "tuning needs at least one support node per class"));
    }
    let graph = load_tag(&cfg.data)?;
    let model = TrainedModel::load(&cfg.model)?;
    let episode = sample_episode(&graph, cfg.task.ways, cfg.task.shots, cfg.seed)?;
    info!("support size {}", episode.support.len());
    let prompts = ClassPromptSet::from_template(&graph, &episode.classes, &cfg.tune.template)?;
    let outcome = few_shot_tune(&model, &graph, &episode.support, &prompts, &cfg.tune, cfg.seed)?;

    create_dir(&cfg.out)?;
    let mut tensors = BTreeMap::new();
    tensors.insert(PROMPT_PARAM.to_string(), outcome.vectors);
    checkpoint::save(&tensors, cfg.out.join(PROMPT_FILE))?;
    let mut history = String::new();
    for (epoch, (ce, acc)) in outcome.history.iter().enumerate() {
        let _ = writeln!(history, "{}\t{:.8e}\t{:.4}", epoch, ce, acc);
    }
    write(&cfg.out.join(TUNE_FILE), &history)?;
    println!("best epoch {} of {}", outcome.best_epoch, cfg.tune.epochs);
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let graph = load_tag(&cfg.data)?;
    let model = TrainedModel::load(&cfg.model)?;
    create_dir(&cfg.out)?;
    let mut index = 0;
    let report = run_trials(cfg.task.runs, cfg.seed, |seed| {
        let result = run_episode(&model, &graph, &cfg.task, &cfg.tune, seed)?;
        info!("run {}: support size {}", index, result.support_size);
        write(
            &cfg.out.join(format!("predictions_{}.tsv", index)),
            &format_predictions(&result.predictions),
        )?;
        index += 1;
        Ok(result.metrics)
    })?;
    let body = report.render();
    write(&cfg.out.join(REPORT_FILE), &body)?;
    print!("{}", body);
    Ok(())
}

/// Returns whether every loss stayed under the tolerance.
pub fn gradcheck(cfg: &RunConfig, flip_sign: bool) -> Result<bool> {
    let mut opts = GradCheckOptions::new(cfg.gradcheck_eps);
    opts.flip_sign = flip_sign;
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut order = Vec::new();
    for i in 0..cfg.gradcheck_seeds.max(1) {
        for (name, report) in check_gradients(cfg.seed.wrapping_add(i), opts)? {
            if !worst.contains_key(name) {
                order.push(name);
            }
            let slot = worst.entry(name).or_insert(0.0);
            *slot = slot.max(report.max_rel_error);
        }
    }
    let mut ok = true;
    for name in order {
        let err = worst[name];
        let pass = err < GRADCHECK_TOLERANCE;
        ok &= pass;
        println!("{}\t{:.3e}\t{}", name, err, if pass { "ok" } else { "FAIL" });
    }
    Ok(ok)
}
