//! Graph encoder (normalised-propagation GCN), transformer text encoder and
//! the prompt-prefixed variant used for negative texts and continuous
//! class prompts.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamSet, SparseMatrix, Tensor, Var};
use crate::error::{Error, Result};
use crate::tag::TextAttributedGraph;
use crate::text::{tokenize, TokenSeq, Vocab};

pub const GRAPH_PREFIX: &str = "graph";
pub const TEXT_PREFIX: &str = "text";
pub const NEG_TEXT_PREFIX: &str = "negtext";
pub const NEG_PROMPT_PARAM: &str = "negprompt.vectors";

#[derive(Debug, Clone, PartialEq)]
pub struct GraphEncoderConfig {
    pub num_layers: usize,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Default for GraphEncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            input_dim: 32,
            output_dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub output_dim: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 2,
            max_len: 32,
            num_layers: 2,
            num_heads: 2,
            model_dim: 32,
            ff_dim: 64,
            output_dim: 32,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("shape matches count")
}

/// Linear weight `[fan_in, fan_out]` drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
fn linear(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    uniform(rng, vec![fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
}

/// `D^{-1/2} (A + I) D^{-1/2}` for an undirected edge list.
pub fn normalized_adjacency(num_nodes: usize, edges: &[(usize, usize)]) -> Rc<SparseMatrix> {
    let mut degree = vec![1.0f64; num_nodes];
    for &(a, b) in edges {
        degree[a] += 1.0;
        degree[b] += 1.0;
    }
    let mut triplets = Vec::with_capacity(num_nodes + 2 * edges.len());
    for (i, d) in degree.iter().enumerate() {
        triplets.push((i, i, 1.0 / d));
    }
    for &(a, b) in edges {
        let w = 1.0 / (degree[a] * degree[b]).sqrt();
        triplets.push((a, b, w));
        triplets.push((b, a, w));
    }
    Rc::new(SparseMatrix::from_triplets(num_nodes, triplets))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphEncoder {
    pub config: GraphEncoderConfig,
}

impl GraphEncoder {
    pub fn new(config: GraphEncoderConfig) -> Result<Self> {
        if config.num_layers == 0 {
            return Err(Error::config("graph_layers", "need at least one layer"));
        }
        if config.input_dim == 0 || config.output_dim == 0 {
            return Err(Error::config("embed_dim", "dimensions must be positive"));
        }
        Ok(Self { config })
    }

    pub fn weight_name(layer: usize) -> String {
        format!("{}.w{}", GRAPH_PREFIX, layer)
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> ParamSet {
        let mut ps = ParamSet::new();
        let mut fan_in = self.config.input_dim;
        for l in 0..self.config.num_layers {
            ps.insert(Self::weight_name(l), linear(rng, fan_in, self.config.output_dim))
                .expect("fresh names");
            fan_in = self.config.output_dim;
        }
        ps
    }

    /// `H <- relu(A_hat H W)` per layer, no activation after the last, then
    /// unit-normalised rows.
    pub fn forward(&self, g: &mut Graph, params: &ParamSet, adj: &Rc<SparseMatrix>, features: Var) -> Result<Var> {
        let (rows, cols) = g.shape(features);
        if rows != adj.size() {
            return Err(Error::Shape {
                op: "encode_nodes",
                left: vec![adj.size()],
                right: vec![rows, cols],
            });
        }
        let mut h = features;
        for l in 0..self.config.num_layers {
            let w = g.param(params, &Self::weight_name(l))?;
            let agg = g.propagate(adj, h)?;
            h = g.matmul(agg, w)?;
            if l + 1 < self.config.num_layers {
                h = g.relu(h);
            }
        }
        g.normalize_rows(h)
    }
}

/// One forward pass of the graph encoder over `graph`, outside any training
/// tape.
pub fn encode_nodes(
    graph: &TextAttributedGraph,
    node_features: &Tensor,
    params: &ParamSet,
    encoder: &GraphEncoder,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let adj = normalized_adjacency(graph.num_nodes(), graph.edges());
    let x = g.constant(node_features);
    let out = encoder.forward(&mut g, params, &adj, x)?;
    Ok(g.tensor(out))
}

/// Frozen random token table used to derive graph-encoder input features.
pub fn feature_table(vocab_size: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    uniform(rng, vec![vocab_size, dim], 1.0)
}

/// Each node's feature row is the mean of its text tokens' rows in `table`.
pub fn node_features(graph: &TextAttributedGraph, vocab: &Vocab, max_len: usize, table: &Tensor) -> Result<Tensor> {
    let dim = table.cols();
    let mut data = Vec::with_capacity(graph.num_nodes() * dim);
    for node in 0..graph.num_nodes() {
        let seq = tokenize(graph.text(node), vocab, max_len);
        let ids = seq.real_ids();
        if ids.is_empty() {
            return Err(Error::invalid(format!("node {} has no tokens", node)));
        }
        let mut row = vec![0.0; dim];
        for &id in ids {
            if id >= table.rows() {
                return Err(Error::invalid(format!("token id {} outside feature table", id)));
            }
            for (r, v) in row.iter_mut().zip(table.row(id)) {
                *r += v;
            }
        }
        data.extend(row.into_iter().map(|v| v / ids.len() as f64));
    }
    Tensor::matrix(graph.num_nodes(), dim, data)
}

/// Pre-norm transformer encoder with masked mean pooling and a linear
/// projection to the shared embedding width.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    prefix: String,
}

impl TextEncoder {
    pub fn new(config: TextEncoderConfig, prefix: impl Into<String>) -> Result<Self> {
        if config.num_heads == 0 || config.model_dim % config.num_heads != 0 {
            return Err(Error::config(
                "text_heads",
                format!("model dim {} not divisible by {} heads", config.model_dim, config.num_heads),
            ));
        }
        if config.max_len == 0 || config.vocab_size < 2 || config.output_dim == 0 || config.ff_dim == 0 {
            return Err(Error::config("text", "sizes must be positive"));
        }
        Ok(Self {
            config,
            prefix: prefix.into(),
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{}", self.prefix, suffix)
    }

    fn layer_name(&self, layer: usize, suffix: &str) -> String {
        format!("{}.l{}.{}", self.prefix, layer, suffix)
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> ParamSet {
        let c = &self.config;
        let dm = c.model_dim;
        let emb_bound = 1.0 / (dm as f64).sqrt();
        let mut ps = ParamSet::new();
        let mut put = |name: String, t: Tensor| ps.insert(name, t).expect("fresh names");
        put(self.name("tok_emb"), uniform(rng, vec![c.vocab_size, dm], emb_bound));
        put(self.name("pos_emb"), uniform(rng, vec![c.max_len, dm], emb_bound));
        for l in 0..c.num_layers {
            for w in ["wq", "wk", "wv", "wo"] {
                put(self.layer_name(l, w), linear(rng, dm, dm));
            }
            put(self.layer_name(l, "ff1"), linear(rng, dm, c.ff_dim));
            put(self.layer_name(l, "ff1_b"), Tensor::zeros(vec![1, c.ff_dim]));
            put(self.layer_name(l, "ff2"), linear(rng, c.ff_dim, dm));
            put(self.layer_name(l, "ff2_b"), Tensor::zeros(vec![1, dm]));
            for ln in ["ln1", "ln2"] {
                put(self.layer_name(l, &format!("{}_g", ln)), Tensor::matrix(1, dm, vec![1.0; dm]).expect("shape"));
                put(self.layer_name(l, &format!("{}_b", ln)), Tensor::zeros(vec![1, dm]));
            }
        }
        put(self.name("lnf_g"), Tensor::matrix(1, dm, vec![1.0; dm]).expect("shape"));
        put(self.name("lnf_b"), Tensor::zeros(vec![1, dm]));
        put(self.name("proj"), linear(rng, dm, c.output_dim));
        ps
    }

    /// Random prompt vectors sized for this encoder's token embeddings.
    pub fn init_prompt(&self, len: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let dm = self.config.model_dim;
        uniform(rng, vec![len, dm], 1.0 / (dm as f64).sqrt())
    }

    fn affine_norm(&self, g: &mut Graph, params: &ParamSet, x: Var, gain: &str, bias: &str) -> Result<Var> {
        let n = g.layer_norm(x);
        let gv = g.param(params, gain)?;
        let bv = g.param(params, bias)?;
        let scaled = g.mul_row(n, gv)?;
        g.add_row(scaled, bv)
    }

    /// Encodes a batch of token rows. When `prompt` (an `M x model_dim`
    /// variable) is given, its rows are spliced in front of each row's
    /// token embeddings and count as real positions.
    pub fn forward(&self, g: &mut Graph, params: &ParamSet, batch: &[TokenSeq], prompt: Option<Var>) -> Result<Var> {
        let c = &self.config;
        let dm = c.model_dim;
        if batch.is_empty() {
            return Err(Error::invalid("empty text batch"));
        }
        let prompt_len = match prompt {
            Some(p) => {
                let (m, pc) = g.shape(p);
                if pc != dm {
                    return Err(Error::Shape {
                        op: "prompt",
                        left: vec![m, pc],
                        right: vec![m, dm],
                    });
                }
                m
            }
            None => 0,
        };
        let seq_len = batch[0].len();
        if seq_len > c.max_len {
            return Err(Error::config("max_len", format!("row length {} exceeds {}", seq_len, c.max_len)));
        }

        let tok_emb = g.param(params, &self.name("tok_emb"))?;
        let mut inputs = Vec::with_capacity(batch.len());
        let mut masks = Vec::with_capacity(batch.len());
        for (i, seq) in batch.iter().enumerate() {
            if seq.len() != seq_len {
                return Err(Error::invalid(format!("row {} has length {}, expected {}", i, seq.len(), seq_len)));
            }
            let real = seq.real_len();
            if real == 0 {
                return Err(Error::invalid(format!("row {} has no real tokens", i)));
            }
            if prompt_len + real > seq_len {
                return Err(Error::invalid(format!(
                    "row {}: prompt of {} plus {} tokens overflows max_len {}",
                    i, prompt_len, real, seq_len
                )));
            }
            if let Some(&bad) = seq.ids.iter().find(|&&id| id >= c.vocab_size) {
                return Err(Error::invalid(format!("token id {} outside vocabulary of {}", bad, c.vocab_size)));
            }
            let kept = &seq.ids[..seq_len - prompt_len];
            let toks = g.gather_rows(tok_emb, kept)?;
            let x = match prompt {
                Some(p) if prompt_len > 0 => g.concat_rows(&[p, toks])?,
                _ => toks,
            };
            let mut mask = vec![true; prompt_len];
            mask.extend_from_slice(&seq.mask[..seq_len - prompt_len]);
            inputs.push(x);
            masks.push(mask);
        }

        let pos_table = g.param(params, &self.name("pos_emb"))?;
        let pos = g.slice_rows(pos_table, 0, seq_len)?;
        let pos_all: Vec<Var> = vec![pos; batch.len()];
        let pos_all = g.concat_rows(&pos_all)?;
        let stacked = g.concat_rows(&inputs)?;
        let mut x = g.add(stacked, pos_all)?;

        let head_dim = dm / c.num_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        for l in 0..c.num_layers {
            let h = self.affine_norm(g, params, x, &self.layer_name(l, "ln1_g"), &self.layer_name(l, "ln1_b"))?;
            let wq = g.param(params, &self.layer_name(l, "wq"))?;
            let wk = g.param(params, &self.layer_name(l, "wk"))?;
            let wv = g.param(params, &self.layer_name(l, "wv"))?;
            let wo = g.param(params, &self.layer_name(l, "wo"))?;
            let q = g.matmul(h, wq)?;
            let k = g.matmul(h, wk)?;
            let v = g.matmul(h, wv)?;
            let mut per_seq = Vec::with_capacity(batch.len());
            for (b, mask) in masks.iter().enumerate() {
                let qs = g.slice_rows(q, b * seq_len, seq_len)?;
                let ks = g.slice_rows(k, b * seq_len, seq_len)?;
                let vs = g.slice_rows(v, b * seq_len, seq_len)?;
                let mut heads = Vec::with_capacity(c.num_heads);
                for hd in 0..c.num_heads {
                    let qh = g.slice_cols(qs, hd * head_dim, head_dim)?;
                    let kh = g.slice_cols(ks, hd * head_dim, head_dim)?;
                    let vh = g.slice_cols(vs, hd * head_dim, head_dim)?;
                    let kt = g.transpose(kh);
                    let scores = g.matmul(qh, kt)?;
                    let scores = g.scale(scores, scale);
                    let attn = g.softmax_rows_masked(scores, Some(mask))?;
                    heads.push(g.matmul(attn, vh)?);
                }
                per_seq.push(if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? });
            }
            let attn_out = g.concat_rows(&per_seq)?;
            let attn_out = g.matmul(attn_out, wo)?;
            x = g.add(x, attn_out)?;

            let h = self.affine_norm(g, params, x, &self.layer_name(l, "ln2_g"), &self.layer_name(l, "ln2_b"))?;
            let w1 = g.param(params, &self.layer_name(l, "ff1"))?;
            let b1 = g.param(params, &self.layer_name(l, "ff1_b"))?;
            let w2 = g.param(params, &self.layer_name(l, "ff2"))?;
            let b2 = g.param(params, &self.layer_name(l, "ff2_b"))?;
            let f = g.matmul(h, w1)?;
            let f = g.add_row(f, b1)?;
            let f = g.relu(f);
            let f = g.matmul(f, w2)?;
            let f = g.add_row(f, b2)?;
            x = g.add(x, f)?;
        }
        let x = self.affine_norm(g, params, x, &self.name("lnf_g"), &self.name("lnf_b"))?;

        let mut pooled = Vec::with_capacity(batch.len());
        for (b, mask) in masks.iter().enumerate() {
            let xs = g.slice_rows(x, b * seq_len, seq_len)?;
            pooled.push(g.masked_mean_rows(xs, mask)?);
        }
        let pooled = g.concat_rows(&pooled)?;
        let proj = g.param(params, &self.name("proj"))?;
        let out = g.matmul(pooled, proj)?;
        g.normalize_rows(out)
    }
}

/// Text embeddings for `batch`, one unit row per text.
pub fn encode_texts(batch: &[TokenSeq], params: &ParamSet, encoder: &TextEncoder) -> Result<Tensor> {
    let mut g = Graph::new();
    let out = encoder.forward(&mut g, params, batch, None)?;
    Ok(g.tensor(out))
}

/// Negative-text embeddings: `prompt` rows are prepended to every text
/// before encoding with the negative encoder.
pub fn encode_negative_texts(batch: &[TokenSeq], params: &ParamSet, encoder: &TextEncoder, prompt: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = if prompt.rows() == 0 || prompt.is_empty() {
        None
    } else {
        Some(g.constant(prompt))
    };
    let out = encoder.forward(&mut g, params, batch, p)?;
    Ok(g.tensor(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use crate::text::build_vocab;

    fn tiny_text_config(vocab_size: usize, max_len: usize) -> TextEncoderConfig {
        TextEncoderConfig {
            vocab_size,
            max_len,
            num_layers: 1,
            num_heads: 1,
            model_dim: 2,
            ff_dim: 2,
            output_dim: 2,
        }
    }

    fn set(ps: &mut ParamSet, name: &str, vals: &[f64]) {
        let t = ps.get_mut(name).unwrap_or_else(|| panic!("{}", name));
        assert_eq!(t.len(), vals.len(), "{}", name);
        t.data_mut().copy_from_slice(vals);
    }

    fn ln_plain(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * gain[i] + bias[i])
            .collect()
    }

    fn vecmat(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
        (0..cols).map(|j| x.iter().enumerate().map(|(i, v)| v * w[i * cols + j]).sum()).collect()
    }

    /// Plain-arithmetic single-position transformer: with one attended
    /// position the attention weights are exactly 1.
    fn one_position_oracle(ps: &ParamSet, prefix: &str, x0: &[f64]) -> Vec<f64> {
        let p = |n: &str| ps.get(&format!("{}.{}", prefix, n)).unwrap().data().to_vec();
        let mut x = x0.to_vec();
        let h = ln_plain(&x, &p("l0.ln1_g"), &p("l0.ln1_b"));
        let v = vecmat(&h, &p("l0.wv"), 2);
        let o = vecmat(&v, &p("l0.wo"), 2);
        x = x.iter().zip(&o).map(|(a, b)| a + b).collect();
        let h = ln_plain(&x, &p("l0.ln2_g"), &p("l0.ln2_b"));
        let f: Vec<f64> = vecmat(&h, &p("l0.ff1"), 2).iter().zip(p("l0.ff1_b")).map(|(a, b)| (a + b).max(0.0)).collect();
        let f: Vec<f64> = vecmat(&f, &p("l0.ff2"), 2).iter().zip(p("l0.ff2_b")).map(|(a, b)| a + b).collect();
        x = x.iter().zip(&f).map(|(a, b)| a + b).collect();
        let x = ln_plain(&x, &p("lnf_g"), &p("lnf_b"));
        let out = vecmat(&x, &p("proj"), 2);
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.iter().map(|v| v / norm).collect()
    }

    fn hand_fixed_text_encoder(prefix: &str) -> (TextEncoder, ParamSet) {
        let enc = TextEncoder::new(tiny_text_config(3, 2), prefix).unwrap();
        let mut ps = enc.init(&mut stream_rng(0, Stream::Init));
        let n = |s: &str| format!("{}.{}", prefix, s);
        set(&mut ps, &n("tok_emb"), &[0.0, 0.0, 0.1, 0.1, 0.7, -0.4]);
        set(&mut ps, &n("pos_emb"), &[0.2, -0.1, 0.05, 0.3]);
        set(&mut ps, &n("l0.wq"), &[0.3, -0.2, 0.4, 0.1]);
        set(&mut ps, &n("l0.wk"), &[-0.5, 0.2, 0.1, 0.6]);
        set(&mut ps, &n("l0.wv"), &[0.9, 0.1, -0.3, 0.8]);
        set(&mut ps, &n("l0.wo"), &[0.5, -0.6, 0.2, 0.4]);
        set(&mut ps, &n("l0.ff1"), &[1.0, -0.5, 0.25, 0.75]);
        set(&mut ps, &n("l0.ff1_b"), &[0.1, -0.2]);
        set(&mut ps, &n("l0.ff2"), &[0.6, 0.3, -0.4, 0.2]);
        set(&mut ps, &n("l0.ff2_b"), &[0.05, 0.0]);
        set(&mut ps, &n("l0.ln1_g"), &[1.5, 0.5]);
        set(&mut ps, &n("l0.ln2_b"), &[0.1, -0.1]);
        set(&mut ps, &n("proj"), &[0.8, -0.3, 0.2, 0.9]);
        (enc, ps)
    }

    fn seq(ids: &[usize], len: usize) -> TokenSeq {
        let mut full = ids.to_vec();
        full.resize(len, 0);
        TokenSeq {
            ids: full,
            mask: (0..len).map(|i| i < ids.len()).collect(),
        }
    }

    #[test]
    fn gcn_single_layer_matches_hand_computation() {
        let graph = TextAttributedGraph::new(2, vec![(0, 1)], vec!["a".into(), "b".into()], vec![0, 0], vec!["x".into()]).unwrap();
        let enc = GraphEncoder::new(GraphEncoderConfig { num_layers: 1, input_dim: 2, output_dim: 2 }).unwrap();
        let mut ps = enc.init(&mut stream_rng(1, Stream::Init));
        let w = [0.5, -1.0, 2.0, 0.25];
        set(&mut ps, "graph.w0", &w);
        let x = [1.0, 2.0, -1.0, 0.5];
        let features = Tensor::matrix(2, 2, x.to_vec()).unwrap();
        let out = encode_nodes(&graph, &features, &ps, &enc).unwrap();

        // both degrees are 2 with the self-loop, so A_hat = [[.5,.5],[.5,.5]]
        let ax = [(x[0] + x[2]) / 2.0, (x[1] + x[3]) / 2.0];
        let h = [ax[0] * w[0] + ax[1] * w[2], ax[0] * w[1] + ax[1] * w[3]];
        let n = (h[0] * h[0] + h[1] * h[1]).sqrt();
        for r in 0..2 {
            assert!((out.get(r, 0) - h[0] / n).abs() < 1e-14);
            assert!((out.get(r, 1) - h[1] / n).abs() < 1e-14);
        }
    }

    #[test]
    fn gcn_edgeless_identical_features_give_identical_rows() {
        let graph = TextAttributedGraph::new(3, vec![], vec!["a".into(), "b".into(), "c".into()], vec![0; 3], vec!["x".into()]).unwrap();
        let enc = GraphEncoder::new(GraphEncoderConfig { num_layers: 2, input_dim: 3, output_dim: 4 }).unwrap();
        let ps = enc.init(&mut stream_rng(2, Stream::Init));
        let f = Tensor::matrix(3, 3, vec![0.3, -0.2, 0.9, 0.3, -0.2, 0.9, 1.0, 0.0, 0.0]).unwrap();
        let out = encode_nodes(&graph, &f, &ps, &enc).unwrap();
        assert_eq!(out.row(0), out.row(1));
        assert_ne!(out.row(0), out.row(2));
    }

    #[test]
    fn gcn_permutation_equivariant_and_order_invariant() {
        let n = 6;
        let edges = vec![(0, 1), (1, 2), (2, 3), (0, 4), (4, 5), (1, 5)];
        let texts: Vec<String> = (0..n).map(|i| format!("t{}", i)).collect();
        let graph = TextAttributedGraph::new(n, edges.clone(), texts.clone(), vec![0; n], vec!["x".into()]).unwrap();
        let enc = GraphEncoder::new(GraphEncoderConfig { num_layers: 2, input_dim: 3, output_dim: 3 }).unwrap();
        let ps = enc.init(&mut stream_rng(3, Stream::Init));
        let mut rng = stream_rng(4, Stream::Data);
        let feats = uniform(&mut rng, vec![n, 3], 1.0);
        let out = encode_nodes(&graph, &feats, &ps, &enc).unwrap();

        let perm = [3, 0, 5, 1, 4, 2]; // new id of old node i
        let p_edges: Vec<_> = edges.iter().rev().map(|&(a, b)| (perm[b], perm[a])).collect();
        let mut p_feats = vec![0.0; n * 3];
        for i in 0..n {
            p_feats[perm[i] * 3..perm[i] * 3 + 3].copy_from_slice(feats.row(i));
        }
        let p_graph = TextAttributedGraph::new(n, p_edges, texts, vec![0; n], vec!["x".into()]).unwrap();
        let p_out = encode_nodes(&p_graph, &Tensor::matrix(n, 3, p_feats).unwrap(), &ps, &enc).unwrap();
        for i in 0..n {
            for (a, b) in out.row(i).iter().zip(p_out.row(perm[i])) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gcn_rejects_feature_mismatch() {
        let graph = TextAttributedGraph::new(2, vec![], vec!["a".into(), "b".into()], vec![0, 0], vec!["x".into()]).unwrap();
        let enc = GraphEncoder::new(GraphEncoderConfig { num_layers: 1, input_dim: 2, output_dim: 2 }).unwrap();
        let ps = enc.init(&mut stream_rng(1, Stream::Init));
        assert!(encode_nodes(&graph, &Tensor::zeros(vec![3, 2]), &ps, &enc).is_err());
    }

    #[test]
    fn text_single_token_matches_hand_computation() {
        let (enc, ps) = hand_fixed_text_encoder("text");
        let out = encode_texts(&[seq(&[2], 2)], &ps, &enc).unwrap();
        let tok = &ps.get("text.tok_emb").unwrap().data()[4..6];
        let pos = &ps.get("text.pos_emb").unwrap().data()[0..2];
        let x0: Vec<f64> = tok.iter().zip(pos).map(|(a, b)| a + b).collect();
        let expect = one_position_oracle(&ps, "text", &x0);
        for (a, b) in out.row(0).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{:?} vs {:?}", out.row(0), expect);
        }
    }

    #[test]
    fn negative_prompt_single_token_matches_hand_computation() {
        // max_len 2: prompt occupies position 0, the token position 1.
        // A 1-token text with a 1-row prompt still attends over 2 positions,
        // so use an oracle that runs the full two-position attention.
        let (enc, ps) = hand_fixed_text_encoder("negtext");
        let prompt = Tensor::matrix(1, 2, vec![0.4, -0.25]).unwrap();
        let out = encode_negative_texts(&[seq(&[2], 2)], &ps, &enc, &prompt).unwrap();
        let expect = two_position_oracle(&ps, "negtext", &[0.4, -0.25], 2);
        for (a, b) in out.row(0).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{:?} vs {:?}", out.row(0), expect);
        }
    }

    fn two_position_oracle(ps: &ParamSet, prefix: &str, prompt: &[f64], token: usize) -> Vec<f64> {
        let p = |n: &str| ps.get(&format!("{}.{}", prefix, n)).unwrap().data().to_vec();
        let tok = p("tok_emb");
        let pos = p("pos_emb");
        let mut xs = vec![
            vec![prompt[0] + pos[0], prompt[1] + pos[1]],
            vec![tok[token * 2] + pos[2], tok[token * 2 + 1] + pos[3]],
        ];
        let hs: Vec<Vec<f64>> = xs.iter().map(|x| ln_plain(x, &p("l0.ln1_g"), &p("l0.ln1_b"))).collect();
        let q: Vec<Vec<f64>> = hs.iter().map(|h| vecmat(h, &p("l0.wq"), 2)).collect();
        let k: Vec<Vec<f64>> = hs.iter().map(|h| vecmat(h, &p("l0.wk"), 2)).collect();
        let v: Vec<Vec<f64>> = hs.iter().map(|h| vecmat(h, &p("l0.wv"), 2)).collect();
        let scale = 1.0 / 2f64.sqrt();
        for i in 0..2 {
            let s: Vec<f64> = (0..2).map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) * scale).collect();
            let m = s[0].max(s[1]);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z = e[0] + e[1];
            let a: Vec<f64> = (0..2).map(|c| (e[0] * v[0][c] + e[1] * v[1][c]) / z).collect();
            let o = vecmat(&a, &p("l0.wo"), 2);
            xs[i] = xs[i].iter().zip(&o).map(|(x, y)| x + y).collect();
        }
        for x in xs.iter_mut() {
            let h = ln_plain(x, &p("l0.ln2_g"), &p("l0.ln2_b"));
            let f: Vec<f64> = vecmat(&h, &p("l0.ff1"), 2).iter().zip(p("l0.ff1_b")).map(|(a, b)| (a + b).max(0.0)).collect();
            let f: Vec<f64> = vecmat(&f, &p("l0.ff2"), 2).iter().zip(p("l0.ff2_b")).map(|(a, b)| a + b).collect();
            *x = x.iter().zip(&f).map(|(a, b)| a + b).collect();
        }
        let finals: Vec<Vec<f64>> = xs.iter().map(|x| ln_plain(x, &p("lnf_g"), &p("lnf_b"))).collect();
        let pooled = [(finals[0][0] + finals[1][0]) / 2.0, (finals[0][1] + finals[1][1]) / 2.0];
        let out = vecmat(&pooled, &p("proj"), 2);
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.iter().map(|v| v / norm).collect()
    }

    fn default_text(vocab: &Vocab, prefix: &str, seed: u64) -> (TextEncoder, ParamSet) {
        let enc = TextEncoder::new(
            TextEncoderConfig {
                vocab_size: vocab.len(),
                max_len: 12,
                ..TextEncoderConfig::default()
            },
            prefix,
        )
        .unwrap();
        let ps = enc.init(&mut stream_rng(seed, Stream::Init));
        (enc, ps)
    }

    #[test]
    fn text_padding_and_duplicates() {
        let vocab = build_vocab(&["red green blue red", "blue sky"], 20).unwrap();
        let (enc, ps) = default_text(&vocab, "text", 5);
        let short = crate::text::batch_texts(&["red green blue", "red green blue", "blue sky"], &vocab, 6).unwrap();
        let long = crate::text::batch_texts(&["red green blue", "red green blue", "blue sky"], &vocab, 12).unwrap();
        let a = encode_texts(&short, &ps, &enc).unwrap();
        let b = encode_texts(&long, &ps, &enc).unwrap();
        assert_eq!(a.row(0), a.row(1));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for r in 0..a.rows() {
            let n: f64 = a.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn text_rejects_all_pad() {
        let vocab = build_vocab(&["a b"], 10).unwrap();
        let (enc, ps) = default_text(&vocab, "text", 5);
        let batch = crate::text::batch_texts(&["a", ""], &vocab, 4).unwrap();
        assert!(encode_texts(&batch, &ps, &enc).is_err());
    }

    #[test]
    fn empty_prompt_with_same_weights_reduces_to_plain_encoder() {
        let vocab = build_vocab(&["a b c d"], 10).unwrap();
        let (enc, ps) = default_text(&vocab, "text", 6);
        let batch = crate::text::batch_texts(&["a b", "c d a"], &vocab, 8).unwrap();
        let plain = encode_texts(&batch, &ps, &enc).unwrap();
        let neg = encode_negative_texts(&batch, &ps, &enc, &Tensor::zeros(vec![0, 32])).unwrap();
        assert_eq!(plain, neg);
    }

    #[test]
    fn shared_prompt_outputs_differ_iff_texts_differ() {
        let vocab = build_vocab(&["a b c d"], 10).unwrap();
        let (enc, ps) = default_text(&vocab, "negtext", 7);
        let prompt = enc.init_prompt(3, &mut stream_rng(8, Stream::Init));
        let batch = crate::text::batch_texts(&["a b", "c d", "a b"], &vocab, 8).unwrap();
        let out = encode_negative_texts(&batch, &ps, &enc, &prompt).unwrap();
        assert_eq!(out.row(0), out.row(2));
        assert_ne!(out.row(0), out.row(1));
    }

    #[test]
    fn prompt_overflow_rejected() {
        let vocab = build_vocab(&["a b c d"], 10).unwrap();
        let (enc, ps) = default_text(&vocab, "negtext", 7);
        let prompt = enc.init_prompt(5, &mut stream_rng(8, Stream::Init));
        let batch = crate::text::batch_texts(&["a b c d"], &vocab, 8).unwrap();
        assert!(encode_negative_texts(&batch, &ps, &enc, &prompt).is_err());
    }

    #[test]
    fn heads_must_divide_model_dim() {
        let cfg = TextEncoderConfig {
            num_heads: 3,
            ..TextEncoderConfig::default()
        };
        assert!(TextEncoder::new(cfg, "text").is_err());
    }

    #[test]
    fn node_features_are_token_means() {
        let graph = TextAttributedGraph::new(2, vec![], vec!["a b".into(), "b".into()], vec![0, 0], vec!["x".into()]).unwrap();
        let vocab = build_vocab(graph.texts(), 10).unwrap();
        let table = feature_table(vocab.len(), 3, &mut stream_rng(1, Stream::Init));
        let f = node_features(&graph, &vocab, 8, &table).unwrap();
        let (a, b) = (table.row(vocab.id("a")), table.row(vocab.id("b")));
        for j in 0..3 {
            assert!((f.get(0, j) - (a[j] + b[j]) / 2.0).abs() < 1e-15);
            assert_eq!(f.get(1, j), b[j]);
        }
    }
}
