//! Class-description prompts, zero-shot probabilities, probability-average
//! decisions and few-shot tuning of continuous prompt vectors.

use std::fmt::Write as _;

use log::debug;

use crate::autodiff::{Graph, ParamSet, Tensor};
use crate::config::{pair, parse_value, Pairs, Settings};
use crate::encoders::{encode_negative_texts, encode_nodes, normalized_adjacency, TextEncoder};
use crate::error::{Error, Result};
use crate::losses::Mode;
use crate::pretrain::{optimizer_step, AdamState, TrainedModel};
use crate::rng::{stream_rng, Stream};
use crate::tag::TextAttributedGraph;
use crate::text::{tokenize, TokenSeq};

pub const DEFAULT_TEMPLATE: &str = "a node of {class_name}";
pub const TEMPLATE_SLOT: &str = "{class_name}";
pub const PROMPT_PARAM: &str = "prompt.vectors";

#[derive(Debug, Clone, PartialEq)]
pub struct TuneConfig {
    pub prompt_len: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub template: String,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            prompt_len: 8,
            epochs: 50,
            learning_rate: 0.01,
            template: DEFAULT_TEMPLATE.to_string(),
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("tune_lr", "must be positive"));
        }
        if !self.template.contains(TEMPLATE_SLOT) {
            return Err(Error::config("template", format!("must contain {}", TEMPLATE_SLOT)));
        }
        Ok(())
    }
}

impl Settings for TuneConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "prompt_len" => self.prompt_len = parse_value(key, value)?,
            "tune_epochs" => self.epochs = parse_value(key, value)?,
            "tune_lr" => self.learning_rate = parse_value(key, value)?,
            "template" => self.template = value.to_string(),
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Pairs {
        vec![
            pair("prompt_len", self.prompt_len),
            pair("tune_epochs", self.epochs),
            pair("tune_lr", self.learning_rate),
            pair("template", &self.template),
        ]
    }
}

/// One description per class, plus optional learnable vectors placed in
/// front of every description.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPromptSet {
    pub class_ids: Vec<usize>,
    pub descriptions: Vec<String>,
    /// `M x model_dim` rows, shared by all classes.
    pub vectors: Option<Tensor>,
}

impl ClassPromptSet {
    pub fn from_template(graph: &TextAttributedGraph, class_ids: &[usize], template: &str) -> Result<Self> {
        let descriptions = class_ids
            .iter()
            .map(|&c| {
                graph
                    .class_names()
                    .get(c)
                    .map(|name| template.replace(TEMPLATE_SLOT, name))
                    .ok_or_else(|| Error::invalid(format!("class {} out of range", c)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            class_ids: class_ids.to_vec(),
            descriptions,
            vectors: None,
        })
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn prompt_len(&self) -> usize {
        self.vectors.as_ref().map_or(0, Tensor::rows)
    }

    pub fn with_vectors(&self, vectors: Tensor) -> Self {
        Self {
            vectors: Some(vectors),
            ..self.clone()
        }
    }

    /// Tokenized descriptions, rejecting any that would not fit next to
    /// `reserved` prompt positions.
    fn token_rows(&self, model: &TrainedModel, reserved: usize) -> Result<Vec<TokenSeq>> {
        let max_len = model.config.text.max_len;
        self.descriptions
            .iter()
            .map(|d| {
                let words = d.split_whitespace().count();
                if words == 0 {
                    return Err(Error::invalid("empty class description"));
                }
                if words + reserved > max_len {
                    return Err(Error::config(
                        "prompt_len",
                        format!(
                            "class description of {} tokens plus {} prompt vectors exceeds max_len {}",
                            words, reserved, max_len
                        ),
                    ));
                }
                Ok(tokenize(d, &model.vocab, max_len))
            })
            .collect()
    }
}

/// `g_c = psi([e_1..e_M, D_c])`, one unit row per class.
pub fn class_embeddings(model: &TrainedModel, prompts: &ClassPromptSet) -> Result<Tensor> {
    let enc = model.text_encoder()?;
    let seqs = prompts.token_rows(model, prompts.prompt_len())?;
    let mut g = Graph::new();
    let prompt = match &prompts.vectors {
        Some(v) if v.rows() > 0 => Some(g.constant(v)),
        _ => None,
    };
    let out = enc.forward(&mut g, &model.params, &seqs, prompt)?;
    Ok(g.tensor(out))
}

/// Class descriptions through the negative encoder and its prompt.
pub fn negative_class_embeddings(model: &TrainedModel, prompts: &ClassPromptSet) -> Result<Tensor> {
    let enc = model.negative_text_encoder()?;
    let prompt = model.negative_prompt();
    let seqs = prompts.token_rows(model, prompt.rows())?;
    encode_negative_texts(&seqs, &model.params, &enc, prompt)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// `softmax_c(sim(node, g_c) / tau)`.
pub fn zero_shot_probs(node: &[f64], class_embs: &Tensor, tau: f64) -> Result<Vec<f64>> {
    let c = class_embs.rows();
    if c < 2 {
        return Err(Error::invalid(format!("zero-shot classification needs at least 2 classes, got {}", c)));
    }
    if class_embs.cols() != node.len() {
        return Err(Error::Shape {
            op: "zero_shot_probs",
            left: vec![node.len()],
            right: class_embs.shape().to_vec(),
        });
    }
    if !(tau > 0.0) {
        return Err(Error::config("tau", "must be positive"));
    }
    let logits: Vec<f64> = (0..c).map(|k| cosine(node, class_embs.row(k)) / tau).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / s).collect())
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// `argmax_c (p_c + 1 - p_neg_c) / 2`, lowest index on ties.
pub fn probability_average(p: &[f64], p_neg: &[f64]) -> Result<usize> {
    if p.len() != p_neg.len() || p.is_empty() {
        return Err(Error::Shape {
            op: "probability_average",
            left: vec![p.len()],
            right: vec![p_neg.len()],
        });
    }
    let scores: Vec<f64> = p.iter().zip(p_neg).map(|(a, b)| (a + 1.0 - b) / 2.0).collect();
    Ok(argmax(&scores))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub neg_probs: Option<Vec<f64>>,
    /// Global class id.
    pub label: usize,
}

/// Frozen node and class embeddings for repeated predictions.
#[derive(Debug, Clone)]
pub struct Predictor {
    class_ids: Vec<usize>,
    nodes: Tensor,
    classes: Tensor,
    neg_classes: Option<Tensor>,
    tau: f64,
}

impl Predictor {
    /// With `prob_average`, decisions combine the negative encoder's
    /// probabilities; this needs a model pre-trained in zero-shot mode.
    pub fn new(model: &TrainedModel, graph: &TextAttributedGraph, prompts: &ClassPromptSet, prob_average: bool) -> Result<Self> {
        if prob_average && model.config.mode == Mode::FewShot {
            return Err(Error::config(
                "prob_average",
                "the negative encoder of a fewshot-mode model is untrained",
            ));
        }
        let features = model.node_features(graph)?;
        let nodes = encode_nodes(graph, &features, &model.params, &model.graph_encoder()?)?;
        let classes = class_embeddings(model, prompts)?;
        let neg_classes = if prob_average {
            Some(negative_class_embeddings(model, prompts)?)
        } else {
            None
        };
        Ok(Self {
            class_ids: prompts.class_ids.clone(),
            nodes,
            classes,
            neg_classes,
            tau: model.tau(),
        })
    }

    pub fn predict(&self, node: usize) -> Result<Prediction> {
        if node >= self.nodes.rows() {
            return Err(Error::invalid(format!("node {} out of range", node)));
        }
        let row = self.nodes.row(node);
        let probs = zero_shot_probs(row, &self.classes, self.tau)?;
        let (index, neg_probs) = match &self.neg_classes {
            Some(neg) => {
                let pn = zero_shot_probs(row, neg, self.tau)?;
                (probability_average(&probs, &pn)?, Some(pn))
            }
            None => (argmax(&probs), None),
        };
        Ok(Prediction {
            probs,
            neg_probs,
            label: self.class_ids[index],
        })
    }
}

/// `node_id true_label pred_label p_0 .. p_{C-1}`, tab separated.
pub fn format_predictions(rows: &[(usize, usize, Prediction)]) -> String {
    let mut out = String::new();
    for (node, truth, p) in rows {
        let _ = write!(out, "{}\t{}\t{}", node, truth, p.label);
        for v in &p.probs {
            let _ = write!(out, "\t{:.6}", v);
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneOutcome {
    pub vectors: Tensor,
    /// `(cross entropy, support accuracy)` before each update and after
    /// the last one.
    pub history: Vec<(f64, f64)>,
    pub best_epoch: usize,
}

/// Tunes `prompt_len` vectors placed before every class description by
/// full-batch cross entropy on the support nodes. Encoders stay frozen.
/// Returns the vectors with the best support accuracy, latest on ties.
pub fn few_shot_tune(
    model: &TrainedModel,
    graph: &TextAttributedGraph,
    support: &[(usize, usize)],
    prompts: &ClassPromptSet,
    config: &TuneConfig,
    seed: u64,
) -> Result<TuneOutcome> {
    config.validate()?;
    if support.is_empty() {
        return Err(Error::invalid("few-shot tuning needs a non-empty support set"));
    }
    let targets = support
        .iter()
        .map(|&(node, label)| {
            prompts
                .class_ids
                .iter()
                .position(|&c| c == label)
                .map(|k| (node, k))
                .ok_or_else(|| Error::invalid(format!("support label {} not among prompt classes", label)))
        })
        .collect::<Result<Vec<_>>>()?;
    let c = prompts.len();
    let s = targets.len();
    let enc: TextEncoder = model.text_encoder()?;
    let seqs = prompts.token_rows(model, config.prompt_len)?;

    let features = model.node_features(graph)?;
    let mut sg = Graph::new();
    let x = sg.constant(&features);
    let adj = normalized_adjacency(graph.num_nodes(), graph.edges());
    let all = model.graph_encoder()?.forward(&mut sg, &model.params, &adj, x)?;
    let ids: Vec<usize> = targets.iter().map(|t| t.0).collect();
    let picked = sg.gather_rows(all, &ids)?;
    let support_nodes = sg.tensor(picked);
    let mut one_hot = vec![0.0; s * c];
    for (i, &(_, k)) in targets.iter().enumerate() {
        one_hot[i * c + k] = 1.0;
    }
    let one_hot = Tensor::matrix(s, c, one_hot)?;
    let inv_tau = 1.0 / model.tau();

    let mut rng = stream_rng(seed, Stream::Tune);
    let mut prompt = ParamSet::new();
    prompt.insert(PROMPT_PARAM, enc.init_prompt(config.prompt_len, &mut rng))?;
    let mut adam = AdamState::new();
    let mut history = Vec::with_capacity(config.epochs + 1);
    let mut best: Option<(f64, usize, Tensor)> = None;

    for epoch in 0..=config.epochs {
        let mut g = Graph::new();
        let nodes = g.constant(&support_nodes);
        let pv = if config.prompt_len > 0 {
            Some(g.param(&prompt, PROMPT_PARAM)?)
        } else {
            None
        };
        let classes = enc.forward(&mut g, &model.params, &seqs, pv)?;
        let sims = g.cosine_matrix(nodes, classes)?;
        let logits = g.scale(sims, inv_tau);
        let lse = g.logsumexp_rows(logits, None)?;
        let oh = g.constant(&one_hot);
        let masked = g.mul(logits, oh)?;
        let target = g.sum_cols(masked);
        let nll = g.sub(lse, target)?;
        let loss = g.mean(nll);

        let lv = g.value(logits).to_vec();
        let correct = targets
            .iter()
            .enumerate()
            .filter(|(i, &(_, k))| argmax(&lv[i * c..(i + 1) * c]) == k)
            .count();
        let acc = correct as f64 / s as f64;
        let ce = g.scalar_value(loss)?;
        if !ce.is_finite() {
            return Err(Error::NonFinite(format!("tuning epoch {}: loss {}", epoch, ce)));
        }
        history.push((ce, acc));
        debug!("tune epoch {}: ce {:.6} acc {:.4}", epoch, ce, acc);
        if best.as_ref().map_or(true, |(b, _, _)| acc >= *b) {
            best = Some((acc, epoch, prompt.get(PROMPT_PARAM).expect("inserted").clone()));
        }
        if epoch < config.epochs && config.prompt_len > 0 {
            let grads = g.backward(loss, &prompt)?;
            optimizer_step(&mut prompt, &grads, config.learning_rate, &mut adam)?;
        }
    }
    let (_, best_epoch, vectors) = best.expect("at least one epoch evaluated");
    Ok(TuneOutcome {
        vectors,
        history,
        best_epoch,
    })
}
