//! Edge perturbation and the bounded FIFO text bank.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashSet, VecDeque};

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{indexed_rng, Stream};
use crate::tag::TextAttributedGraph;

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbConfig {
    pub drop_prob: f64,
    pub add_prob: f64,
    pub num_views: usize,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            drop_prob: 0.2,
            add_prob: 0.1,
            num_views: 1,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, p) in [("drop_prob", self.drop_prob), ("add_prob", self.add_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(key, format!("probability {} outside [0, 1]", p)));
            }
        }
        if self.num_views == 0 {
            return Err(Error::config("num_views", "must be at least 1"));
        }
        Ok(())
    }
}

/// Drops each edge with `drop_prob` and adds `round(add_prob * |E|)`
/// uniformly drawn non-edges. Returns a sorted canonical edge list.
pub fn perturb(graph: &TextAttributedGraph, config: &PerturbConfig, seed: u64) -> Result<Vec<(usize, usize)>> {
    config.validate()?;
    let mut rng = indexed_rng(seed, Stream::Perturb, 0);
    let original: HashSet<(usize, usize)> = graph.edges().iter().copied().collect();

    let mut out: BTreeSet<(usize, usize)> = BTreeSet::new();
    for &e in graph.edges() {
        if rng.gen::<f64>() >= config.drop_prob {
            out.insert(e);
        }
    }

    let n = graph.num_nodes();
    let total_pairs = n * n.saturating_sub(1) / 2;
    let non_edges = total_pairs - original.len();
    let wanted = ((config.add_prob * original.len() as f64).round() as usize).min(non_edges);
    if wanted > 0 {
        if 2 * wanted > non_edges {
            // dense regime: enumerate and subsample
            let mut candidates = Vec::with_capacity(non_edges);
            for a in 0..n {
                for b in (a + 1)..n {
                    if !original.contains(&(a, b)) {
                        candidates.push((a, b));
                    }
                }
            }
            for i in sample(&mut rng, candidates.len(), wanted) {
                out.insert(candidates[i]);
            }
        } else {
            let mut added = 0;
            let mut chosen = HashSet::new();
            while added < wanted {
                let a = rng.gen_range(0..n);
                let b = rng.gen_range(0..n);
                if a == b {
                    continue;
                }
                let pair = (a.min(b), a.max(b));
                if original.contains(&pair) || !chosen.insert(pair) {
                    continue;
                }
                out.insert(pair);
                added += 1;
            }
        }
    }
    Ok(out.into_iter().collect())
}

/// Rows of embeddings, each tagged with the id of the node or text it
/// belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub ids: Vec<usize>,
    pub values: Tensor,
}

impl EmbeddingBatch {
    pub fn new(ids: Vec<usize>, values: Tensor) -> Result<Self> {
        if ids.len() != values.rows() {
            return Err(Error::Shape {
                op: "embedding_batch",
                left: vec![ids.len()],
                right: values.shape().to_vec(),
            });
        }
        Ok(Self { ids, values })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub id: usize,
    pub vector: Vec<f64>,
}

/// A retrieved bank entry with its similarity to the query.
#[derive(Debug, Clone, PartialEq)]
pub struct Match {
    pub id: usize,
    pub similarity: f64,
    pub vector: Vec<f64>,
}

/// Fixed-capacity store of detached text embeddings, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBank {
    capacity: usize,
    entries: VecDeque<BankEntry>,
}

const NORM_TOL: f64 = 1e-6;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl TextBank {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &BankEntry> {
        self.entries.iter()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.front().map(|e| e.vector.len())
    }

    /// Appends copies of the batch rows in order, evicting the oldest
    /// entries beyond capacity.
    pub fn push(&mut self, batch: &EmbeddingBatch) -> Result<()> {
        if batch.is_empty() {
            return Ok(());
        }
        if let Some(d) = self.dim() {
            if d != batch.dim() {
                return Err(Error::Shape {
                    op: "bank_push",
                    left: vec![self.len(), d],
                    right: batch.values.shape().to_vec(),
                });
            }
        }
        for (r, &id) in batch.ids.iter().enumerate() {
            let row = batch.values.row(r);
            let norm = dot(row, row).sqrt();
            if (norm - 1.0).abs() > NORM_TOL {
                return Err(Error::invalid(format!("bank row {} has norm {}, expected unit length", r, norm)));
            }
            self.entries.push_back(BankEntry { id, vector: row.to_vec() });
        }
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    /// Exact top-`k` entries by cosine similarity to `query`, skipping
    /// entries whose id equals `exclude_id`. Equal similarities rank the
    /// older entry first.
    pub fn topk(&self, query: &[f64], k: usize, exclude_id: Option<usize>) -> Result<Vec<Match>> {
        if k == 0 {
            return Err(Error::config("k", "must be at least 1"));
        }
        if let Some(d) = self.dim() {
            if d != query.len() {
                return Err(Error::Shape {
                    op: "bank_topk",
                    left: vec![d],
                    right: vec![query.len()],
                });
            }
        }

        // min-heap on (similarity, -age) keeps the k best seen so far
        #[derive(PartialEq)]
        struct Ranked(f64, usize);
        impl Eq for Ranked {}
        impl PartialOrd for Ranked {
            fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
                Some(self.cmp(other))
            }
        }
        impl Ord for Ranked {
            // "greater" = worse, so the heap top is the weakest kept entry
            fn cmp(&self, other: &Self) -> Ordering {
                other.0.total_cmp(&self.0).then(self.1.cmp(&other.1))
            }
        }

        let mut heap: BinaryHeap<Ranked> = BinaryHeap::with_capacity(k + 1);
        let mut eligible = 0usize;
        for (pos, e) in self.entries.iter().enumerate() {
            if exclude_id == Some(e.id) {
                continue;
            }
            eligible += 1;
            // + 0.0 folds -0.0 into 0.0 so orthogonal entries tie by age
            let cand = Ranked(dot(&e.vector, query) + 0.0, pos);
            if heap.len() < k {
                heap.push(cand);
            } else if let Some(worst) = heap.peek() {
                if cand < *worst {
                    heap.pop();
                    heap.push(cand);
                }
            }
        }
        if eligible == 0 {
            return Err(Error::invalid("text bank has no entries after exclusion"));
        }
        let ranked = heap.into_sorted_vec();
        Ok(ranked
            .into_iter()
            .map(|Ranked(similarity, pos)| {
                let e = &self.entries[pos];
                Match {
                    id: e.id,
                    similarity,
                    vector: e.vector.clone(),
                }
            })
            .collect())
    }

    /// Bank contents as a checkpointable `(ids, vectors)` pair.
    pub fn snapshot(&self) -> Option<(Tensor, Tensor)> {
        let d = self.dim()?;
        let ids = Tensor::vector(self.entries.iter().map(|e| e.id as f64).collect());
        let vecs = Tensor::matrix(self.len(), d, self.entries.iter().flat_map(|e| e.vector.iter().copied()).collect())
            .expect("rows share the bank dimension");
        Some((ids, vecs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tag::{synth_tag, SynthConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = dot(v, v).sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn batch(ids: &[usize], rows: &[Vec<f64>]) -> EmbeddingBatch {
        EmbeddingBatch::new(ids.to_vec(), Tensor::from_rows(rows).unwrap()).unwrap()
    }

    /// Full sort by (similarity desc, insertion order asc).
    fn oracle(entries: &[(usize, Vec<f64>)], query: &[f64], k: usize, exclude: Option<usize>) -> Vec<(usize, Vec<f64>)> {
        let mut scored: Vec<(f64, usize, &(usize, Vec<f64>))> = entries
            .iter()
            .enumerate()
            .filter(|(_, e)| Some(e.0) != exclude)
            .map(|(i, e)| (dot(&e.1, query), i, e))
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        scored.into_iter().take(k).map(|(_, _, e)| e.clone()).collect()
    }

    fn ring_graph(n: usize) -> TextAttributedGraph {
        let edges = (0..n).map(|i| (i, (i + 1) % n)).collect();
        TextAttributedGraph::new(n, edges, vec!["t".to_string(); n], vec![0; n], vec!["c".into()]).unwrap()
    }

    #[test]
    fn identity_perturbation() {
        let g = synth_tag(&SynthConfig::default(), 1).unwrap();
        let cfg = PerturbConfig { drop_prob: 0.0, add_prob: 0.0, num_views: 1 };
        let mut expect = g.edges().to_vec();
        expect.sort();
        assert_eq!(perturb(&g, &cfg, 9).unwrap(), expect);
    }

    #[test]
    fn drop_everything() {
        let g = ring_graph(10);
        let cfg = PerturbConfig { drop_prob: 1.0, add_prob: 0.0, num_views: 1 };
        assert!(perturb(&g, &cfg, 3).unwrap().is_empty());
    }

    #[test]
    fn adds_round_of_fraction_without_duplicates() {
        let g = ring_graph(20);
        let cfg = PerturbConfig { drop_prob: 0.0, add_prob: 0.25, num_views: 1 };
        let out = perturb(&g, &cfg, 5).unwrap();
        assert_eq!(out.len(), 20 + 5);
        // dense case: more requested than half the non-edges
        let g = ring_graph(5);
        let cfg = PerturbConfig { drop_prob: 0.0, add_prob: 1.0, num_views: 1 };
        assert_eq!(perturb(&g, &cfg, 5).unwrap().len(), 10);
    }

    #[test]
    fn drop_fraction_monte_carlo() {
        let g = ring_graph(1000);
        let cfg = PerturbConfig { drop_prob: 0.5, add_prob: 0.0, num_views: 1 };
        let mut total = 0.0;
        for seed in 0..200 {
            let kept = perturb(&g, &cfg, seed).unwrap().len();
            total += 1.0 - kept as f64 / 1000.0;
        }
        let mean = total / 200.0;
        assert!((mean - 0.5).abs() < 0.05, "{}", mean);
    }

    #[test]
    fn perturb_rejects_bad_probability() {
        let cfg = PerturbConfig { drop_prob: 1.5, add_prob: 0.0, num_views: 1 };
        assert!(perturb(&ring_graph(4), &cfg, 0).is_err());
    }

    #[test]
    fn fifo_eviction() {
        let mut bank = TextBank::new(2);
        for id in 1..=3 {
            bank.push(&batch(&[id], &[vec![1.0, 0.0]])).unwrap();
        }
        let ids: Vec<_> = bank.entries().map(|e| e.id).collect();
        assert_eq!(ids, vec![2, 3]);

        let mut bank = TextBank::new(2);
        bank.push(&batch(&[7, 8, 9], &[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]])).unwrap();
        let ids: Vec<_> = bank.entries().map(|e| e.id).collect();
        assert_eq!(ids, vec![8, 9]);

        let before = bank.clone();
        bank.push(&EmbeddingBatch::new(vec![], Tensor::zeros(vec![0, 2])).unwrap()).unwrap();
        assert_eq!(bank, before);
    }

    #[test]
    fn push_rejects_dimension_change() {
        let mut bank = TextBank::new(4);
        bank.push(&batch(&[1], &[vec![1.0, 0.0]])).unwrap();
        assert!(bank.push(&batch(&[2], &[vec![1.0, 0.0, 0.0]])).is_err());
    }

    #[test]
    fn topk_basic_cases() {
        let mut bank = TextBank::new(8);
        bank.push(&batch(&[1, 2], &[vec![1.0, 0.0], vec![0.0, 1.0]])).unwrap();
        let top = bank.topk(&[1.0, 0.0], 1, None).unwrap();
        assert_eq!(top.len(), 1);
        assert_eq!(top[0].id, 1);

        let all = bank.topk(&[0.0, 1.0], 5, None).unwrap();
        assert_eq!(all.iter().map(|m| m.id).collect::<Vec<_>>(), vec![2, 1]);

        let excl = bank.topk(&[1.0, 0.0], 1, Some(1)).unwrap();
        assert_eq!(excl[0].id, 2);

        let mut lone = TextBank::new(2);
        lone.push(&batch(&[4], &[vec![1.0, 0.0]])).unwrap();
        assert!(lone.topk(&[1.0, 0.0], 1, Some(4)).is_err());
        assert!(TextBank::new(2).topk(&[1.0, 0.0], 1, None).is_err());
    }

    #[test]
    fn topk_ties_prefer_older() {
        let mut bank = TextBank::new(8);
        bank.push(&batch(&[5, 6, 7], &[vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]])).unwrap();
        let top = bank.topk(&[1.0, 0.0], 1, None).unwrap();
        assert_eq!(top[0].id, 6);
    }

    #[test]
    fn signed_zero_similarities_still_tie() {
        let mut bank = TextBank::new(8);
        // first entry scores 0.0, second -0.0 against the query
        bank.push(&batch(&[1, 2], &[vec![0.0, 1.0], vec![0.0, -1.0]])).unwrap();
        let top = bank.topk(&[1.0, 0.0], 2, None).unwrap();
        assert_eq!(top.iter().map(|m| m.id).collect::<Vec<_>>(), vec![1, 2]);
        let mut bank = TextBank::new(8);
        bank.push(&batch(&[1, 2], &[vec![0.0, -1.0], vec![0.0, 1.0]])).unwrap();
        let top = bank.topk(&[1.0, 0.0], 2, None).unwrap();
        assert_eq!(top.iter().map(|m| m.id).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn topk_matches_sort_oracle_on_random_bank() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut bank = TextBank::new(1000);
        let mut mirror = Vec::new();
        for id in 0..100 {
            let v = unit(&(0..8).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
            bank.push(&batch(&[id], &[v.clone()])).unwrap();
            mirror.push((id, v));
        }
        let q = unit(&(0..8).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
        let got: Vec<_> = bank.topk(&q, 5, None).unwrap().into_iter().map(|m| (m.id, m.vector)).collect();
        assert_eq!(got, oracle(&mirror, &q, 5, None));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn bank_size_is_min_of_capacity_and_pushed(cap in 1usize..20, pushes in proptest::collection::vec(0usize..6, 0..12)) {
            let mut bank = TextBank::new(cap);
            let mut total = 0;
            for (i, n) in pushes.iter().enumerate() {
                let rows: Vec<Vec<f64>> = (0..*n).map(|_| vec![0.6, 0.8]).collect();
                let ids: Vec<usize> = (0..*n).map(|j| i * 10 + j).collect();
                bank.push(&EmbeddingBatch::new(ids, Tensor::matrix(*n, 2, rows.concat()).unwrap()).unwrap()).unwrap();
                total += n;
                prop_assert_eq!(bank.len(), cap.min(total));
            }
        }

        #[test]
        fn perturb_never_makes_loops_or_duplicates(seed in 0u64..500, drop in 0.0f64..1.0, add in 0.0f64..1.0) {
            let g = synth_tag(&SynthConfig { num_nodes: 30, num_classes: 3, intra_edge_prob: 0.3, ..SynthConfig::default() }, seed).unwrap();
            let out = perturb(&g, &PerturbConfig { drop_prob: drop, add_prob: add, num_views: 1 }, seed).unwrap();
            let set: HashSet<_> = out.iter().copied().collect();
            prop_assert_eq!(set.len(), out.len());
            prop_assert!(out.iter().all(|&(a, b)| a < b && b < 30));
        }
    }
}
