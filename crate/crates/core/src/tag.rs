//! Text-attributed graphs: storage, validation, TSV file IO and a seeded
//! planted-partition generator.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::{pair, parse_value, Pairs, Settings};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub const NODES_FILE: &str = "nodes.tsv";
pub const EDGES_FILE: &str = "edges.tsv";
pub const CLASSES_FILE: &str = "classes.tsv";

/// Word substituted for class keywords by the synthetic generator.
pub const NOISE_WORD: &str = "noise";

/// A graph whose nodes each carry one text and one class label.
///
/// Edges are undirected and stored once with the smaller endpoint first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextAttributedGraph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    texts: Vec<String>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

/// One broken invariant, naming the offending field and position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub index: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.index {
            Some(i) => write!(f, "{}[{}]: {}", self.field, i, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

impl TextAttributedGraph {
    /// Builds a graph, canonicalising edge orientation, and rejects it if any
    /// invariant fails.
    pub fn new(
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        texts: Vec<String>,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let graph = Self::new_unchecked(num_nodes, edges, texts, labels, class_names);
        let violations = validate(&graph);
        if violations.is_empty() {
            Ok(graph)
        } else {
            Err(Error::InvalidGraph(
                violations.iter().map(ToString::to_string).collect(),
            ))
        }
    }

    /// Same as [`TextAttributedGraph::new`] without validation. Used to
    /// exercise [`validate`] on broken inputs.
    pub fn new_unchecked(
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        texts: Vec<String>,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Self {
        let edges = edges
            .into_iter()
            .map(|(a, b)| if a <= b { (a, b) } else { (b, a) })
            .collect();
        Self {
            num_nodes,
            edges,
            texts,
            labels,
            class_names,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn text(&self, node: usize) -> &str {
        &self.texts[node]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, node: usize) -> usize {
        self.labels[node]
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Node ids grouped by label, ascending within each class.
    pub fn nodes_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_classes()];
        for (node, &label) in self.labels.iter().enumerate() {
            if label < groups.len() {
                groups[label].push(node);
            }
        }
        groups
    }
}

fn bad_text(s: &str) -> bool {
    s.contains('\t') || s.contains('\n') || s.contains('\r')
}

/// Lists every invariant violation; empty iff the graph is valid.
pub fn validate(graph: &TextAttributedGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = graph.num_nodes;
    if graph.texts.len() != n {
        out.push(Violation {
            field: "texts",
            index: None,
            message: format!("has {} entries, expected {}", graph.texts.len(), n),
        });
    }
    if graph.labels.len() != n {
        out.push(Violation {
            field: "labels",
            index: None,
            message: format!("has {} entries, expected {}", graph.labels.len(), n),
        });
    }
    for (i, text) in graph.texts.iter().enumerate() {
        if text.trim().is_empty() {
            out.push(Violation {
                field: "texts",
                index: Some(i),
                message: "missing text".into(),
            });
        } else if bad_text(text) {
            out.push(Violation {
                field: "texts",
                index: Some(i),
                message: "contains tab or newline".into(),
            });
        }
    }
    for (i, &label) in graph.labels.iter().enumerate() {
        if label >= graph.class_names.len() {
            out.push(Violation {
                field: "labels",
                index: Some(i),
                message: format!(
                    "label {} out of range for {} classes",
                    label,
                    graph.class_names.len()
                ),
            });
        }
    }
    for (i, name) in graph.class_names.iter().enumerate() {
        if name.trim().is_empty() || bad_text(name) {
            out.push(Violation {
                field: "class_names",
                index: Some(i),
                message: "empty or contains tab/newline".into(),
            });
        }
    }
    let mut seen = HashSet::new();
    for (i, &(a, b)) in graph.edges.iter().enumerate() {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        if hi >= n {
            out.push(Violation {
                field: "edges",
                index: Some(i),
                message: format!("edge ({}, {}) endpoint out of range for {} nodes", a, b, n),
            });
        } else if lo == hi {
            out.push(Violation {
                field: "edges",
                index: Some(i),
                message: format!("self-loop ({}, {})", a, b),
            });
        } else if !seen.insert((lo, hi)) {
            out.push(Violation {
                field: "edges",
                index: Some(i),
                message: format!("duplicate pair ({}, {})", lo, hi),
            });
        }
    }
    out
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(file: &str, index: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_string(),
        index,
        message: message.into(),
    }
}

fn parse_id(file: &str, index: usize, field: &str, raw: &str) -> Result<usize> {
    raw.parse::<usize>()
        .map_err(|_| parse_err(file, index, format!("bad {} {:?}", field, raw)))
}

/// Reads `nodes.tsv`, `edges.tsv` and `classes.tsv` from `dir`.
pub fn load_tag(dir: impl AsRef<Path>) -> Result<TextAttributedGraph> {
    let dir = dir.as_ref();

    let mut class_names = Vec::new();
    for (i, line) in read_file(&dir.join(CLASSES_FILE))?.lines().enumerate() {
        let (id, name) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(CLASSES_FILE, i, "expected class_id<TAB>class_name"))?;
        let id = parse_id(CLASSES_FILE, i, "class id", id)?;
        if id != i {
            return Err(parse_err(CLASSES_FILE, i, format!("class id {} out of sequence", id)));
        }
        class_names.push(name.to_string());
    }

    let mut texts = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in read_file(&dir.join(NODES_FILE))?.lines().enumerate() {
        let mut parts = line.splitn(3, '\t');
        let (id, label, text) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(parse_err(NODES_FILE, i, "expected id<TAB>label<TAB>text")),
        };
        let id = parse_id(NODES_FILE, i, "node id", id)?;
        if id != i {
            return Err(parse_err(NODES_FILE, i, format!("node id {} out of sequence", id)));
        }
        let label = parse_id(NODES_FILE, i, "label", label)?;
        if label >= class_names.len() {
            return Err(parse_err(
                NODES_FILE,
                i,
                format!("label {} out of range for {} classes", label, class_names.len()),
            ));
        }
        if text.contains('\t') {
            return Err(parse_err(NODES_FILE, i, "tab inside text"));
        }
        labels.push(label);
        texts.push(text.to_string());
    }
    let num_nodes = texts.len();

    let mut edges = Vec::new();
    for (i, line) in read_file(&dir.join(EDGES_FILE))?.lines().enumerate() {
        let (src, dst) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(EDGES_FILE, i, "expected src<TAB>dst"))?;
        let src = parse_id(EDGES_FILE, i, "src", src)?;
        let dst = parse_id(EDGES_FILE, i, "dst", dst)?;
        if src >= num_nodes || dst >= num_nodes {
            return Err(parse_err(
                EDGES_FILE,
                i,
                format!("edge ({}, {}) endpoint out of range for {} nodes", src, dst, num_nodes),
            ));
        }
        if src >= dst {
            return Err(parse_err(EDGES_FILE, i, format!("edge ({}, {}) needs src < dst", src, dst)));
        }
        edges.push((src, dst));
    }

    TextAttributedGraph::new(num_nodes, edges, texts, labels, class_names)
}

/// Writes the three TSV files into `dir` (created if needed). Nothing is
/// written when the graph is invalid.
pub fn save_tag(graph: &TextAttributedGraph, dir: impl AsRef<Path>) -> Result<()> {
    let violations = validate(graph);
    if !violations.is_empty() {
        return Err(Error::InvalidGraph(
            violations.iter().map(ToString::to_string).collect(),
        ));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut nodes = String::new();
    for (i, (label, text)) in graph.labels.iter().zip(&graph.texts).enumerate() {
        let _ = writeln!(nodes, "{}\t{}\t{}", i, label, text);
    }
    let mut edges = String::new();
    for (a, b) in &graph.edges {
        let _ = writeln!(edges, "{}\t{}", a, b);
    }
    let mut classes = String::new();
    for (i, name) in graph.class_names.iter().enumerate() {
        let _ = writeln!(classes, "{}\t{}", i, name);
    }
    for (name, body) in [(NODES_FILE, nodes), (EDGES_FILE, edges), (CLASSES_FILE, classes)] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Knobs for [`synth_tag`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub intra_edge_prob: f64,
    pub inter_edge_prob: f64,
    pub keywords_per_class: usize,
    pub text_length: usize,
    pub noise_word_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_nodes: 300,
            num_classes: 5,
            intra_edge_prob: 0.05,
            inter_edge_prob: 0.002,
            keywords_per_class: 6,
            text_length: 12,
            noise_word_prob: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, p) in [
            ("intra_edge_prob", self.intra_edge_prob),
            ("inter_edge_prob", self.inter_edge_prob),
            ("noise_word_prob", self.noise_word_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(key, format!("probability {} outside [0, 1]", p)));
            }
        }
        for (key, c) in [
            ("num_nodes", self.num_nodes),
            ("num_classes", self.num_classes),
            ("keywords_per_class", self.keywords_per_class),
            ("text_length", self.text_length),
        ] {
            if c == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.num_classes > self.num_nodes {
            return Err(Error::config(
                "num_classes",
                format!("{} classes exceed {} nodes", self.num_classes, self.num_nodes),
            ));
        }
        Ok(())
    }
}

impl Settings for SynthConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "num_nodes" => self.num_nodes = parse_value(key, value)?,
            "num_classes" => self.num_classes = parse_value(key, value)?,
            "intra_edge_prob" => self.intra_edge_prob = parse_value(key, value)?,
            "inter_edge_prob" => self.inter_edge_prob = parse_value(key, value)?,
            "keywords_per_class" => self.keywords_per_class = parse_value(key, value)?,
            "text_length" => self.text_length = parse_value(key, value)?,
            "noise_word_prob" => self.noise_word_prob = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Pairs {
        vec![
            pair("num_nodes", self.num_nodes),
            pair("num_classes", self.num_classes),
            pair("intra_edge_prob", self.intra_edge_prob),
            pair("inter_edge_prob", self.inter_edge_prob),
            pair("keywords_per_class", self.keywords_per_class),
            pair("text_length", self.text_length),
            pair("noise_word_prob", self.noise_word_prob),
        ]
    }
}

pub fn class_keyword(class: usize, index: usize) -> String {
    format!("c{}w{}", class, index)
}

/// Planted-partition graph whose texts are drawn from per-class keyword
/// pools. Class names are the keyword pools joined by spaces.
pub fn synth_tag(config: &SynthConfig, seed: u64) -> Result<TextAttributedGraph> {
    config.validate()?;
    let mut rng = stream_rng(seed, Stream::Data);
    let n = config.num_nodes;
    let c = config.num_classes;

    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    labels.shuffle(&mut rng);

    let pools: Vec<Vec<String>> = (0..c)
        .map(|k| (0..config.keywords_per_class).map(|j| class_keyword(k, j)).collect())
        .collect();
    let class_names = pools.iter().map(|p| p.join(" ")).collect();

    let texts = labels
        .iter()
        .map(|&label| {
            (0..config.text_length)
                .map(|_| {
                    if rng.gen::<f64>() < config.noise_word_prob {
                        NOISE_WORD
                    } else {
                        pools[label][rng.gen_range(0..config.keywords_per_class)].as_str()
                    }
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();

    let mut edges = Vec::new();
    for a in 0..n {
        for b in (a + 1)..n {
            let p = if labels[a] == labels[b] {
                config.intra_edge_prob
            } else {
                config.inter_edge_prob
            };
            if rng.gen::<f64>() < p {
                edges.push((a, b));
            }
        }
    }

    TextAttributedGraph::new(n, edges, texts, labels, class_names)
}
