//! Joint pre-training: batch assembly, perturbed views, text-bank
//! matching, semantic negation, Adam updates and checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::rc::Rc;

use log::{debug, info};
use rand::seq::index::sample;
use rand::RngCore;

use crate::augment::{perturb, EmbeddingBatch, PerturbConfig, TextBank};
use crate::autodiff::{checkpoint, Graph, ParamSet, SparseMatrix, Tensor, Var};
use crate::config::{pair, parse_pairs, parse_value, render_pairs, Pairs, Settings};
use crate::encoders::{
    feature_table, node_features, normalized_adjacency, GraphEncoder, GraphEncoderConfig, TextEncoder,
    TextEncoderConfig, GRAPH_PREFIX, NEG_PROMPT_PARAM, NEG_TEXT_PREFIX, TEXT_PREFIX,
};
use crate::error::{Error, Result};
use crate::losses::{
    contrastive_loss, margin_loss, node_perturbation_loss, semantics_opposite_loss, text_matching_loss, total_loss,
    LossTerms, LossValues, LossWeights, Mode, LOG_TAU_PARAM,
};
use crate::rng::{indexed_rng, stream_rng, Stream};
use crate::tag::TextAttributedGraph;
use crate::text::{batch_texts, build_vocab, TokenSeq, Vocab};

pub const MODEL_FILE: &str = "model.ckpt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CONFIG_FILE: &str = "config.txt";
pub const FEATURE_TABLE: &str = "features.table";

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub mode: Mode,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub perturb: PerturbConfig,
    /// Retrieved texts per node for text matching.
    pub num_matches: usize,
    pub bank_capacity: usize,
    pub neg_prompt_len: usize,
    pub max_vocab: usize,
    pub graph: GraphEncoderConfig,
    /// `vocab_size` is replaced by the size of the built vocabulary.
    pub text: TextEncoderConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::ZeroShot,
            steps: 500,
            batch_size: 16,
            learning_rate: 2e-4,
            weights: LossWeights::default(),
            perturb: PerturbConfig::default(),
            num_matches: 1,
            bank_capacity: 4096,
            neg_prompt_len: 16,
            max_vocab: 5000,
            graph: GraphEncoderConfig::default(),
            text: TextEncoderConfig::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.num_matches == 0 {
            return Err(Error::config("num_matches", "must be at least 1"));
        }
        if self.bank_capacity == 0 {
            return Err(Error::config("bank_capacity", "must be at least 1"));
        }
        if self.graph.output_dim != self.text.output_dim {
            return Err(Error::config("embed_dim", "graph and text output widths differ"));
        }
        if self.neg_prompt_len >= self.text.max_len {
            return Err(Error::config("neg_prompt_len", "leaves no room for tokens within text_max_len"));
        }
        self.weights.validate()?;
        self.perturb.validate()
    }

    pub fn gamma(&self) -> f64 {
        self.weights.gamma(self.mode)
    }
}

impl Settings for PretrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "mode" => self.mode = value.parse()?,
            "steps" => self.steps = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "alpha" => self.weights.alpha = parse_value(key, value)?,
            "beta" => self.weights.beta = parse_value(key, value)?,
            "gamma" => {
                self.weights.gamma_override = match value {
                    "auto" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "margin" => self.weights.margin = parse_value(key, value)?,
            "tau" => self.weights.init_tau = parse_value(key, value)?,
            "drop_prob" => self.perturb.drop_prob = parse_value(key, value)?,
            "add_prob" => self.perturb.add_prob = parse_value(key, value)?,
            "num_views" => self.perturb.num_views = parse_value(key, value)?,
            "num_matches" => self.num_matches = parse_value(key, value)?,
            "bank_capacity" => self.bank_capacity = parse_value(key, value)?,
            "neg_prompt_len" => self.neg_prompt_len = parse_value(key, value)?,
            "max_vocab" => self.max_vocab = parse_value(key, value)?,
            "graph_layers" => self.graph.num_layers = parse_value(key, value)?,
            "graph_input_dim" => self.graph.input_dim = parse_value(key, value)?,
            "embed_dim" => {
                let d = parse_value(key, value)?;
                self.graph.output_dim = d;
                self.text.output_dim = d;
            }
            "text_max_len" => self.text.max_len = parse_value(key, value)?,
            "text_layers" => self.text.num_layers = parse_value(key, value)?,
            "text_heads" => self.text.num_heads = parse_value(key, value)?,
            "text_model_dim" => self.text.model_dim = parse_value(key, value)?,
            "text_ff_dim" => self.text.ff_dim = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Pairs {
        vec![
            pair("mode", self.mode),
            pair("steps", self.steps),
            pair("batch_size", self.batch_size),
            pair("learning_rate", self.learning_rate),
            pair("alpha", self.weights.alpha),
            pair("beta", self.weights.beta),
            pair("gamma", self.weights.gamma_override.map_or("auto".to_string(), |g| g.to_string())),
            pair("margin", self.weights.margin),
            pair("tau", self.weights.init_tau),
            pair("drop_prob", self.perturb.drop_prob),
            pair("add_prob", self.perturb.add_prob),
            pair("num_views", self.perturb.num_views),
            pair("num_matches", self.num_matches),
            pair("bank_capacity", self.bank_capacity),
            pair("neg_prompt_len", self.neg_prompt_len),
            pair("max_vocab", self.max_vocab),
            pair("graph_layers", self.graph.num_layers),
            pair("graph_input_dim", self.graph.input_dim),
            pair("embed_dim", self.graph.output_dim),
            pair("text_max_len", self.text.max_len),
            pair("text_layers", self.text.num_layers),
            pair("text_heads", self.text.num_heads),
            pair("text_model_dim", self.text.model_dim),
            pair("text_ff_dim", self.text.ff_dim),
            pair("seed", self.seed),
        ]
    }
}

/// Values of every objective at one step; inactive terms are 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub step: usize,
    pub values: LossValues,
    pub total: f64,
}

/// Formats `x` with 9 significant digits in scientific notation.
pub fn format_sig9(x: f64) -> String {
    format!("{:.8e}", x)
}

impl StepLosses {
    /// `step L_CL L_NP L_TM L_ML L_SO total`, tab separated.
    pub fn metrics_line(&self) -> String {
        let v = &self.values;
        let cols = [v.contrastive, v.perturbation, v.text_matching, v.margin, v.semantics_opposite, self.total];
        let mut line = self.step.to_string();
        for c in cols {
            line.push('\t');
            line.push_str(&format_sig9(c));
        }
        line
    }
}

pub fn metrics_stream(trace: &[StepLosses]) -> String {
    let mut out = String::new();
    for s in trace {
        let _ = writeln!(out, "{}", s.metrics_line());
    }
    out
}

/// Encoders, negative prompt, temperature and everything needed to embed
/// nodes and texts of a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: PretrainConfig,
    pub vocab: Vocab,
    pub params: ParamSet,
    /// Frozen token table behind graph-encoder input features.
    pub feature_table: Tensor,
    pub trace: Vec<StepLosses>,
}

impl TrainedModel {
    pub fn graph_encoder(&self) -> Result<GraphEncoder> {
        GraphEncoder::new(self.config.graph.clone())
    }

    pub fn text_encoder(&self) -> Result<TextEncoder> {
        TextEncoder::new(self.config.text.clone(), TEXT_PREFIX)
    }

    pub fn negative_text_encoder(&self) -> Result<TextEncoder> {
        TextEncoder::new(self.config.text.clone(), NEG_TEXT_PREFIX)
    }

    pub fn tau(&self) -> f64 {
        self.params.get(LOG_TAU_PARAM).map_or(self.config.weights.init_tau, |t| t.data()[0].exp())
    }

    pub fn negative_prompt(&self) -> &Tensor {
        self.params.get(NEG_PROMPT_PARAM).expect("initialized models carry a negative prompt")
    }

    pub fn node_features(&self, graph: &TextAttributedGraph) -> Result<Tensor> {
        node_features(graph, &self.vocab, self.config.text.max_len, &self.feature_table)
    }

    /// Parameters of the negative encoder and its prompt.
    pub fn negative_params(&self) -> ParamSet {
        let mut ps = self.params.with_prefix(&format!("{}.", NEG_TEXT_PREFIX));
        ps.insert(NEG_PROMPT_PARAM, self.negative_prompt().clone()).expect("disjoint names");
        ps
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors: BTreeMap<String, Tensor> = self.params.clone().into_map();
        tensors.insert(FEATURE_TABLE.to_string(), self.feature_table.clone());
        checkpoint::save(&tensors, dir.join(MODEL_FILE))?;
        self.vocab.save(dir.join(VOCAB_FILE))?;
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, render_pairs(&self.config.entries())).map_err(|e| Error::io(&path, e))
    }

    /// Loads a model written by [`TrainedModel::save`]. The loss trace is
    /// not part of the checkpoint.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let cfg_path = dir.join(CONFIG_FILE);
        let body = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let mut config = PretrainConfig::default();
        config.apply_all(&parse_pairs(&body)?)?;
        let vocab = Vocab::load(dir.join(VOCAB_FILE))?;
        config.text.vocab_size = vocab.len();
        let mut tensors = checkpoint::load(dir.join(MODEL_FILE))?;
        let feature_table = tensors
            .remove(FEATURE_TABLE)
            .ok_or_else(|| Error::invalid(format!("{}: missing {}", MODEL_FILE, FEATURE_TABLE)))?;
        Ok(Self {
            config,
            vocab,
            params: ParamSet::from_map(tensors),
            feature_table,
            trace: Vec::new(),
        })
    }
}

/// Vocabulary over node texts and class names.
pub fn graph_vocab(graph: &TextAttributedGraph, max_size: usize) -> Result<Vocab> {
    let corpus: Vec<&str> = graph
        .texts()
        .iter()
        .chain(graph.class_names())
        .map(String::as_str)
        .collect();
    build_vocab(&corpus, max_size)
}

/// Fresh parameters: graph encoder, text encoder, an independently drawn
/// negative encoder and prompt, log-temperature, and the feature table.
pub fn init_params(config: &PretrainConfig, vocab: Vocab) -> Result<TrainedModel> {
    let mut config = config.clone();
    config.text.vocab_size = vocab.len();
    config.validate()?;
    let mut rng = stream_rng(config.seed, Stream::Init);
    let genc = GraphEncoder::new(config.graph.clone())?;
    let tenc = TextEncoder::new(config.text.clone(), TEXT_PREFIX)?;
    let nenc = TextEncoder::new(config.text.clone(), NEG_TEXT_PREFIX)?;

    let mut params = genc.init(&mut rng);
    params.merge(tenc.init(&mut rng))?;
    params.merge(nenc.init(&mut rng))?;
    params.insert(NEG_PROMPT_PARAM, nenc.init_prompt(config.neg_prompt_len, &mut rng))?;
    params.insert(LOG_TAU_PARAM, config.weights.log_tau_tensor())?;
    let feature_table = feature_table(vocab.len(), config.graph.input_dim, &mut rng);
    Ok(TrainedModel {
        config,
        vocab,
        params,
        feature_table,
        trace: Vec::new(),
    })
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u32,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update of every parameter named in `grads`:
/// `m = b1 m + (1 - b1) g`, `v = b2 v + (1 - b2) g^2`,
/// `p -= lr (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)`.
pub fn optimizer_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Tensor>,
    learning_rate: f64,
    state: &mut AdamState,
) -> Result<()> {
    for (name, grad) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {}", name)))?;
        if p.shape() != grad.shape() {
            return Err(Error::Shape {
                op: "optimizer_step",
                left: p.shape().to_vec(),
                right: grad.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, grad) in grads {
        let n = grad.len();
        let m = state.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let p = params.get_mut(name).expect("checked above").data_mut();
        for i in 0..n {
            let g = grad.data()[i];
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= learning_rate * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

fn view_seed(seed: u64, step: usize, view: usize) -> u64 {
    indexed_rng(seed, Stream::Perturb, ((step as u64) << 16) | view as u64).next_u64()
}

struct StepContext<'a> {
    graph: &'a TextAttributedGraph,
    config: &'a PretrainConfig,
    genc: GraphEncoder,
    tenc: TextEncoder,
    nenc: TextEncoder,
    adj: Rc<SparseMatrix>,
    features: Tensor,
    tokens: Vec<TokenSeq>,
}

impl StepContext<'_> {
    fn nodes(&self, g: &mut Graph, params: &ParamSet, adj: &Rc<SparseMatrix>, ids: &[usize]) -> Result<Var> {
        let x = g.constant(&self.features);
        let all = self.genc.forward(g, params, adj, x)?;
        g.gather_rows(all, ids)
    }

    /// Builds the step's objective and returns it with the loss values.
    fn build(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        step: usize,
        ids: &[usize],
        bank: &mut TextBank,
    ) -> Result<(Var, LossValues)> {
        let cfg = self.config;
        let w = &cfg.weights;
        let gamma = cfg.gamma();
        let log_tau = g.param(params, LOG_TAU_PARAM)?;
        let nodes = self.nodes(g, params, &self.adj, ids)?;
        let seqs: Vec<TokenSeq> = ids.iter().map(|&i| self.tokens[i].clone()).collect();
        let texts = self.tenc.forward(g, params, &seqs, None)?;
        let mut values = LossValues::default();

        let contrastive = contrastive_loss(g, nodes, texts, log_tau)?;
        values.contrastive = g.scalar_value(contrastive)?;

        let mut perturbation = None;
        if w.alpha > 0.0 {
            let mut views = Vec::with_capacity(cfg.perturb.num_views);
            for v in 0..cfg.perturb.num_views {
                let edges = perturb(self.graph, &cfg.perturb, view_seed(cfg.seed, step, v))?;
                let adj = normalized_adjacency(self.graph.num_nodes(), &edges);
                views.push(self.nodes(g, params, &adj, ids)?);
            }
            let l = node_perturbation_loss(g, &views, texts, log_tau)?;
            values.perturbation = g.scalar_value(l)?;
            perturbation = Some(l);
        }

        let mut text_matching = None;
        if w.beta > 0.0 {
            let batch = EmbeddingBatch::new(ids.to_vec(), g.tensor(texts))?;
            bank.push(&batch)?;
            let mut matched = Vec::with_capacity(ids.len());
            let mut cold = false;
            for (r, &id) in ids.iter().enumerate() {
                match bank.topk(batch.values.row(r), cfg.num_matches, Some(id)) {
                    Ok(found) => {
                        let rows: Vec<Vec<f64>> = found.into_iter().map(|m| m.vector).collect();
                        matched.push(g.constant(&Tensor::from_rows(&rows)?));
                    }
                    Err(_) => {
                        cold = true;
                        break;
                    }
                }
            }
            if cold {
                debug!("step {}: text bank has no match yet, skipping text matching", step);
            } else {
                let l = text_matching_loss(g, nodes, &matched, texts, log_tau)?;
                values.text_matching = g.scalar_value(l)?;
                text_matching = Some(l);
            }
        }

        let (mut margin, mut opposite) = (None, None);
        if gamma != 0.0 {
            // only the negative encoder and prompt learn from these terms
            let node_values = g.constant(&g.tensor(nodes));
            let text_values = g.constant(&g.tensor(texts));
            let prompt = g.param(params, NEG_PROMPT_PARAM)?;
            let neg = self.nenc.forward(g, params, &seqs, Some(prompt))?;
            let ml = margin_loss(g, node_values, neg, w.margin)?;
            let so = semantics_opposite_loss(g, text_values, neg)?;
            values.margin = g.scalar_value(ml)?;
            values.semantics_opposite = g.scalar_value(so)?;
            margin = Some(ml);
            opposite = Some(so);
        }

        let terms = LossTerms {
            contrastive,
            perturbation,
            text_matching,
            margin,
            semantics_opposite: opposite,
        };
        let total = total_loss(g, &terms, w, cfg.mode)?;
        Ok((total, values))
    }
}

fn at_step(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("step {}: {}", step, msg)),
        other => other,
    }
}

/// Names of the parameters updated during pre-training.
fn active_params(model: &TrainedModel) -> ParamSet {
    let mut active = model.params.with_prefix(&format!("{}.", GRAPH_PREFIX));
    active.merge(model.params.with_prefix(&format!("{}.", TEXT_PREFIX))).expect("disjoint prefixes");
    active
        .insert(LOG_TAU_PARAM, model.params.get(LOG_TAU_PARAM).expect("initialized").clone())
        .expect("disjoint names");
    if model.config.gamma() != 0.0 {
        active.merge(model.negative_params()).expect("disjoint prefixes");
    }
    active
}

pub fn pretrain(graph: &TextAttributedGraph, config: &PretrainConfig) -> Result<TrainedModel> {
    let vocab = graph_vocab(graph, config.max_vocab)?;
    let model = init_params(config, vocab)?;
    pretrain_from(graph, model)
}

/// Trains an initialized model in place of its current parameters.
pub fn pretrain_from(graph: &TextAttributedGraph, mut model: TrainedModel) -> Result<TrainedModel> {
    let config = model.config.clone();
    config.validate()?;
    if config.batch_size > graph.num_nodes() {
        return Err(Error::config(
            "batch_size",
            format!("{} exceeds the {} nodes of the graph", config.batch_size, graph.num_nodes()),
        ));
    }
    let ctx = StepContext {
        graph,
        config: &config,
        genc: model.graph_encoder()?,
        tenc: model.text_encoder()?,
        nenc: model.negative_text_encoder()?,
        adj: normalized_adjacency(graph.num_nodes(), graph.edges()),
        features: model.node_features(graph)?,
        tokens: batch_texts(graph.texts(), &model.vocab, config.text.max_len)?,
    };
    let mut bank = TextBank::new(config.bank_capacity);
    let mut adam = AdamState::new();
    let mut trace = Vec::with_capacity(config.steps);
    info!(
        "pretraining {} steps, mode {}, batch {}, {} parameters",
        config.steps,
        config.mode,
        config.batch_size,
        model.params.len()
    );

    for step in 0..config.steps {
        let mut rng = indexed_rng(config.seed, Stream::Batch, step as u64);
        let ids = sample(&mut rng, graph.num_nodes(), config.batch_size).into_vec();
        let active = active_params(&model);

        let mut g = Graph::new();
        let (loss, values) = ctx.build(&mut g, &model.params, step, &ids, &mut bank).map_err(|e| at_step(step, e))?;
        let total = g.scalar_value(loss)?;
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("step {}: loss {}", step, total)));
        }
        let grads = g.backward(loss, &active)?;
        optimizer_step(&mut model.params, &grads, config.learning_rate, &mut adam)?;
        if let Some((name, _)) = model.params.iter().find(|(_, t)| !t.all_finite()) {
            return Err(Error::NonFinite(format!("step {}: parameter {}", step, name)));
        }
        let record = StepLosses { step, values, total };
        debug!("{}", record.metrics_line());
        trace.push(record);
    }
    model.trace = trace;
    Ok(model)
}
