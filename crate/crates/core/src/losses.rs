//! Training objectives over autodiff variables.
//!
//! Every similarity is cosine. Temperatures enter as a 1x1 log-temperature
//! variable so `tau = exp(log_tau)` stays positive.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check_with, GradCheckOptions, GradCheckReport, Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};

pub const LOG_TAU_PARAM: &str = "temperature.log_tau";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    FewShot,
    ZeroShot,
}

impl Mode {
    /// Weight of the semantics-negation terms implied by the mode.
    pub fn gamma(self) -> f64 {
        match self {
            Mode::FewShot => 0.0,
            Mode::ZeroShot => 1.0,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::FewShot => "fewshot",
            Mode::ZeroShot => "zeroshot",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fewshot" => Ok(Mode::FewShot),
            "zeroshot" => Ok(Mode::ZeroShot),
            other => Err(Error::config("mode", format!("expected fewshot or zeroshot, got {:?}", other))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    /// Replaces the mode-implied gamma, for ablations only.
    pub gamma_override: Option<f64>,
    pub margin: f64,
    pub init_tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma_override: None,
            margin: 0.2,
            init_tau: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("alpha", self.alpha), ("beta", self.beta), ("margin", self.margin)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("{} must be a finite non-negative number", v)));
            }
        }
        if let Some(gm) = self.gamma_override {
            if !(gm >= 0.0 && gm.is_finite()) {
                return Err(Error::config("gamma", format!("{} must be a finite non-negative number", gm)));
            }
        }
        if !(self.init_tau > 0.0 && self.init_tau.is_finite()) {
            return Err(Error::config("tau", format!("{} must be positive", self.init_tau)));
        }
        Ok(())
    }

    pub fn gamma(&self, mode: Mode) -> f64 {
        self.gamma_override.unwrap_or_else(|| mode.gamma())
    }

    /// Initial value of the log-temperature parameter.
    pub fn log_tau_tensor(&self) -> Tensor {
        Tensor::scalar(self.init_tau.ln())
    }
}

fn check_batch(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<usize> {
    let (ra, ca) = g.shape(a);
    let (rb, cb) = g.shape(b);
    if ra != rb || ca != cb {
        return Err(Error::Shape {
            op,
            left: vec![ra, ca],
            right: vec![rb, cb],
        });
    }
    if ra < 2 {
        return Err(Error::invalid(format!("{} needs a batch of at least 2 rows, got {}", op, ra)));
    }
    Ok(ra)
}

fn off_diagonal(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k / n != k % n).collect()
}

/// `S / tau` for the cosine matrix `S` of `a` against `b`.
fn scaled_similarities(g: &mut Graph, a: Var, b: Var, log_tau: Var) -> Result<Var> {
    let s = g.cosine_matrix(a, b)?;
    let neg = g.neg(log_tau);
    let inv_tau = g.exp(neg)?;
    g.scale_by(s, inv_tau)
}

/// `log sum_{j != i} exp(sim(n_i, t_j) / tau)` for each row, given the
/// scaled similarity matrix.
fn off_diagonal_lse(g: &mut Graph, logits: Var, n: usize) -> Result<Var> {
    g.logsumexp_rows(logits, Some(off_diagonal(n)))
}

/// InfoNCE over matched rows, with the `j = i` term left out of the
/// denominator. Can be negative.
pub fn contrastive_loss(g: &mut Graph, nodes: Var, texts: Var, log_tau: Var) -> Result<Var> {
    let n = check_batch(g, "contrastive_loss", nodes, texts)?;
    let logits = scaled_similarities(g, nodes, texts, log_tau)?;
    let pos = g.diag(logits)?;
    let denom = off_diagonal_lse(g, logits, n)?;
    let terms = g.sub(denom, pos)?;
    Ok(g.mean(terms))
}

/// Mean over perturbed views of the contrastive loss.
pub fn node_perturbation_loss(g: &mut Graph, views: &[Var], texts: Var, log_tau: Var) -> Result<Var> {
    if views.is_empty() {
        return Err(Error::invalid("node_perturbation_loss needs at least one view"));
    }
    let mut acc: Option<Var> = None;
    for &view in views {
        let l = contrastive_loss(g, view, texts, log_tau)?;
        acc = Some(match acc {
            None => l,
            Some(a) => g.add(a, l)?,
        });
    }
    let total = acc.expect("non-empty views");
    Ok(g.scale(total, 1.0 / views.len() as f64))
}

/// Contrastive loss whose numerator sums over the retrieved texts
/// `matched[i]` (a `k_i x d` block per node) instead of the own text.
pub fn text_matching_loss(g: &mut Graph, nodes: Var, matched: &[Var], texts: Var, log_tau: Var) -> Result<Var> {
    let n = check_batch(g, "text_matching_loss", nodes, texts)?;
    if matched.len() != n {
        return Err(Error::Shape {
            op: "text_matching_loss",
            left: vec![n],
            right: vec![matched.len()],
        });
    }
    let mut owners = Vec::new();
    for (i, &m) in matched.iter().enumerate() {
        let (k, _) = g.shape(m);
        if k == 0 {
            return Err(Error::invalid(format!("node {} has no matched texts", i)));
        }
        owners.extend(std::iter::repeat(i).take(k));
    }
    let all = g.concat_rows(matched)?;
    let num_logits = scaled_similarities(g, nodes, all, log_tau)?;
    let total = owners.len();
    let mask = (0..n * total).map(|k| owners[k % total] == k / total).collect();
    let num = g.logsumexp_rows(num_logits, Some(mask))?;

    let logits = scaled_similarities(g, nodes, texts, log_tau)?;
    let denom = off_diagonal_lse(g, logits, n)?;
    let terms = g.sub(denom, num)?;
    Ok(g.mean(terms))
}

/// Mean over `i` and `j != i` of
/// `max(0, m + sim(n_i, neg_i) - sim(n_i, neg_j))`.
pub fn margin_loss(g: &mut Graph, nodes: Var, neg_texts: Var, margin: f64) -> Result<Var> {
    let n = check_batch(g, "margin_loss", nodes, neg_texts)?;
    let s = g.cosine_matrix(nodes, neg_texts)?;
    let own = g.diag(s)?;
    let neg_s = g.neg(s);
    let gap = g.add_col(neg_s, own)?;
    let shifted = g.add_const(gap, margin);
    let hinge = g.relu(shifted);
    let mask = g.constant_matrix(n, n, off_diagonal(n).into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect())?;
    let kept = g.mul(hinge, mask)?;
    let total = g.sum(kept);
    Ok(g.scale(total, 1.0 / (n * (n - 1)) as f64))
}

/// `-(1/|B|) sum_i ||t_i - neg_i||_2`.
pub fn semantics_opposite_loss(g: &mut Graph, texts: Var, neg_texts: Var) -> Result<Var> {
    let (ra, ca) = g.shape(texts);
    let (rb, cb) = g.shape(neg_texts);
    if ra != rb || ca != cb || ra == 0 {
        return Err(Error::Shape {
            op: "semantics_opposite_loss",
            left: vec![ra, ca],
            right: vec![rb, cb],
        });
    }
    let diff = g.sub(texts, neg_texts)?;
    let norms = g.row_norm(diff);
    let m = g.mean(norms);
    Ok(g.neg(m))
}

/// The individual objectives of one training step. Missing terms count
/// as zero.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub contrastive: Var,
    pub perturbation: Option<Var>,
    pub text_matching: Option<Var>,
    pub margin: Option<Var>,
    pub semantics_opposite: Option<Var>,
}

/// `L_CL + alpha L_NP + beta L_TM + gamma (L_ML + L_SO)`.
pub fn total_loss(g: &mut Graph, terms: &LossTerms, weights: &LossWeights, mode: Mode) -> Result<Var> {
    let gamma = weights.gamma(mode);
    let mut total = terms.contrastive;
    let weighted = [
        (terms.perturbation, weights.alpha),
        (terms.text_matching, weights.beta),
        (terms.margin, gamma),
        (terms.semantics_opposite, gamma),
    ];
    for (term, w) in weighted {
        if let Some(t) = term {
            if w != 0.0 {
                let scaled = g.scale(t, w);
                total = g.add(total, scaled)?;
            }
        }
    }
    Ok(total)
}

/// Scalar values of each objective, in the order
/// contrastive, perturbation, text matching, margin, semantics-opposite.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValues {
    pub contrastive: f64,
    pub perturbation: f64,
    pub text_matching: f64,
    pub margin: f64,
    pub semantics_opposite: f64,
}

impl LossValues {
    pub fn total(&self, weights: &LossWeights, mode: Mode) -> f64 {
        let gamma = weights.gamma(mode);
        self.contrastive
            + weights.alpha * self.perturbation
            + weights.beta * self.text_matching
            + gamma * (self.margin + self.semantics_opposite)
    }
}

/// Names of the objectives reported by [`check_gradients`].
pub const CHECKED_LOSSES: [&str; 6] = [
    "contrastive",
    "node_perturbation",
    "text_matching",
    "margin",
    "semantics_opposite",
    "total",
];

/// Finite-difference check of every objective and their weighted sum on
/// a random batch of 4 rows in 6 dimensions drawn from `seed`.
pub fn check_gradients(seed: u64, opts: GradCheckOptions) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, d, k) = (4, 6, 2);
    let mut params = ParamSet::new();
    let mut draw = |name: String, rows: usize, params: &mut ParamSet| -> Result<()> {
        let data = (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        params.insert(name, Tensor::matrix(rows, d, data)?)
    };
    for name in ["n", "t", "neg", "v0", "v1"] {
        draw(name.to_string(), b, &mut params)?;
    }
    for i in 0..b {
        draw(format!("m{}", i), k, &mut params)?;
    }
    params.insert(LOG_TAU_PARAM, Tensor::scalar(-0.5))?;
    let weights = LossWeights {
        alpha: 0.7,
        beta: 0.4,
        margin: 0.3,
        ..LossWeights::default()
    };

    let build = |which: &str, g: &mut Graph, p: &ParamSet| -> Result<Var> {
        let n = g.param(p, "n")?;
        let t = g.param(p, "t")?;
        let neg = g.param(p, "neg")?;
        let views = [g.param(p, "v0")?, g.param(p, "v1")?];
        let matched = (0..b).map(|i| g.param(p, &format!("m{}", i))).collect::<Result<Vec<_>>>()?;
        let lt = g.param(p, LOG_TAU_PARAM)?;
        match which {
            "contrastive" => contrastive_loss(g, n, t, lt),
            "node_perturbation" => node_perturbation_loss(g, &views, t, lt),
            "text_matching" => text_matching_loss(g, n, &matched, t, lt),
            "margin" => margin_loss(g, n, neg, weights.margin),
            "semantics_opposite" => semantics_opposite_loss(g, t, neg),
            _ => {
                let terms = LossTerms {
                    contrastive: contrastive_loss(g, n, t, lt)?,
                    perturbation: Some(node_perturbation_loss(g, &views, t, lt)?),
                    text_matching: Some(text_matching_loss(g, n, &matched, t, lt)?),
                    margin: Some(margin_loss(g, n, neg, weights.margin)?),
                    semantics_opposite: Some(semantics_opposite_loss(g, t, neg)?),
                };
                total_loss(g, &terms, &weights, Mode::ZeroShot)
            }
        }
    };
    CHECKED_LOSSES
        .iter()
        .map(|&name| Ok((name, grad_check_with(|g, p| build(name, g, p), &params, opts)?)))
        .collect()
}
