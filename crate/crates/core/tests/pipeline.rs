use tagshot::eval::{evaluate_model, TaskConfig};
use tagshot::losses::Mode;
use tagshot::pretrain::{metrics_stream, pretrain, PretrainConfig, TrainedModel};
use tagshot::prompting::TuneConfig;
use tagshot::tag::{load_tag, save_tag, synth_tag, validate, SynthConfig};

// Pinned by running the default fewshot configuration once on the default
// synthetic graph (data seed 1, training seed 1).
const FIRST_CONTRASTIVE: f64 = 3.232476854702316;
const LAST_CONTRASTIVE: f64 = 0.6525638853316407;

#[test]
fn contrastive_loss_falls_over_a_full_run() {
    let g = synth_tag(&SynthConfig::default(), 1).unwrap();
    let cfg = PretrainConfig { mode: Mode::FewShot, seed: 1, ..PretrainConfig::default() };
    let model = pretrain(&g, &cfg).unwrap();
    assert_eq!(model.trace.len(), 500);
    assert!(model.trace.iter().all(|s| s.total.is_finite()));
    let first = model.trace[0].values.contrastive;
    let last = model.trace[499].values.contrastive;
    assert!(last < first);
    assert!((first - FIRST_CONTRASTIVE).abs() < 1e-9);
    assert!((last - LAST_CONTRASTIVE).abs() < 1e-6);
}

fn small_config(mode: Mode) -> PretrainConfig {
    let mut cfg = PretrainConfig { mode, steps: 30, batch_size: 8, learning_rate: 2e-3, seed: 5, ..PretrainConfig::default() };
    cfg.neg_prompt_len = 4;
    cfg.text.max_len = 16;
    cfg
}

#[test]
fn dataset_and_checkpoint_round_trip_preserve_results() {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig { num_nodes: 80, num_classes: 4, ..SynthConfig::default() };
    let g = synth_tag(&synth, 3).unwrap();
    assert!(validate(&g).is_empty());
    save_tag(&g, dir.path().join("data")).unwrap();
    let loaded = load_tag(dir.path().join("data")).unwrap();
    assert_eq!(loaded, g);

    let model = pretrain(&loaded, &small_config(Mode::ZeroShot)).unwrap();
    model.save(dir.path().join("model")).unwrap();
    let back = TrainedModel::load(dir.path().join("model")).unwrap();

    let task = TaskConfig { ways: 4, shots: 0, runs: 2, prob_average: true };
    let tune = TuneConfig::default();
    let a = evaluate_model(&model, &g, &task, &tune, 7).unwrap();
    let b = evaluate_model(&back, &g, &task, &tune, 7).unwrap();
    assert_eq!(a.render(), b.render());
}

#[test]
fn reruns_are_identical() {
    let g = synth_tag(&SynthConfig { num_nodes: 60, num_classes: 3, ..SynthConfig::default() }, 8).unwrap();
    let cfg = small_config(Mode::FewShot);
    let a = pretrain(&g, &cfg).unwrap();
    let b = pretrain(&g, &cfg).unwrap();
    assert_eq!(metrics_stream(&a.trace), metrics_stream(&b.trace));

    let task = TaskConfig { ways: 3, shots: 2, runs: 2, prob_average: false };
    let tune = TuneConfig { epochs: 5, prompt_len: 2, ..TuneConfig::default() };
    let ra = evaluate_model(&a, &g, &task, &tune, 1).unwrap();
    let rb = evaluate_model(&b, &g, &task, &tune, 1).unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn probability_average_needs_a_zeroshot_model() {
    let g = synth_tag(&SynthConfig { num_nodes: 60, num_classes: 3, ..SynthConfig::default() }, 8).unwrap();
    let model = pretrain(&g, &PretrainConfig { steps: 2, ..small_config(Mode::FewShot) }).unwrap();
    let task = TaskConfig { ways: 3, shots: 0, runs: 1, prob_average: true };
    assert!(evaluate_model(&model, &g, &task, &TuneConfig::default(), 0).is_err());
}
