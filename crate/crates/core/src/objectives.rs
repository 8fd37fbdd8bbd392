//! Losses, similarity scoring and evaluation metrics.
//!
//! Ranking ties are always broken in favour of the lower index.

use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Video-to-text similarities with the matching candidate of every query row.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Tensor,
    ground_truth: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn new(values: Tensor, ground_truth: Vec<usize>) -> Result<Self> {
        if values.rank() != 2 {
            return Err(shape_err!("similarity matrix must be 2-D, got {:?}", values.shape()));
        }
        let (rows, cols) = (values.shape()[0], values.shape()[1]);
        if !ground_truth.is_empty() && ground_truth.len() != rows {
            return Err(shape_err!("{} ground-truth entries for {} queries", ground_truth.len(), rows));
        }
        if let Some(&bad) = ground_truth.iter().find(|&&g| g >= cols) {
            return Err(shape_err!("ground truth {} outside {} candidates", bad, cols));
        }
        Ok(Self { values, ground_truth })
    }

    /// Square matrix whose i-th query matches the i-th candidate.
    pub fn paired(values: Tensor) -> Result<Self> {
        if values.rank() != 2 || values.shape()[0] != values.shape()[1] {
            return Err(shape_err!("paired batch needs a square matrix, got {:?}", values.shape()));
        }
        let n = values.shape()[0];
        Self::new(values, (0..n).collect())
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn ground_truth(&self) -> &[usize] {
        &self.ground_truth
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.data()[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values.data()[i * c..(i + 1) * c]
    }

    fn is_diagonal(&self) -> bool {
        self.rows() == self.cols() && self.ground_truth.iter().enumerate().all(|(i, &g)| i == g)
    }

    /// The other retrieval direction: candidates become queries.
    ///
    /// Needs a one-to-one ground truth.
    pub fn transposed(&self) -> Result<Self> {
        let (r, c) = (self.rows(), self.cols());
        if r != c || self.ground_truth.len() != r {
            return Err(Error::Usage("only a one-to-one matching can be transposed".into()));
        }
        let mut inverse = vec![usize::MAX; c];
        for (i, &g) in self.ground_truth.iter().enumerate() {
            if inverse[g] != usize::MAX {
                return Err(Error::Usage(format!("candidate {g} matches two queries")));
            }
            inverse[g] = i;
        }
        let values = Tensor::from_fn(&[c, r], |k| self.get(k % r, k / r));
        Self::new(values, inverse)
    }
}

fn row_norms(x: &Tensor, what: &str) -> Result<Vec<f64>> {
    if x.rank() != 2 {
        return Err(shape_err!("{what} embeddings must be 2-D, got {:?}", x.shape()));
    }
    let d = x.shape()[1];
    x.data()
        .chunks(d)
        .enumerate()
        .map(|(i, r)| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                Err(Error::Param(format!("{what} row {i} has zero norm")))
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Cosine similarities of `[N_v, D]` video and `[N_t, D]` text embeddings.
///
/// Ground truth is the diagonal when `N_v == N_t`, otherwise left empty.
pub fn cosine_sim_matrix(video: &Tensor, text: &Tensor) -> Result<SimilarityMatrix> {
    let nv = row_norms(video, "video")?;
    let nt = row_norms(text, "text")?;
    let d = video.shape()[1];
    if text.shape()[1] != d {
        return Err(shape_err!("embedding widths {:?} and {:?}", video.shape(), text.shape()));
    }
    let (rv, rt) = (nv.len(), nt.len());
    let values = Tensor::from_fn(&[rv, rt], |k| {
        let (i, j) = (k / rt, k % rt);
        let a = &video.data()[i * d..(i + 1) * d];
        let b = &text.data()[j * d..(j + 1) * d];
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        (dot / (nv[i] * nt[j])).clamp(-1.0, 1.0)
    });
    let gt = if rv == rt { (0..rv).collect() } else { Vec::new() };
    SimilarityMatrix::new(values, gt)
}

/// Differentiable cosine similarities `[N_v, N_t]`.
pub fn cosine_similarity(g: &mut Graph, video: Var, text: Var) -> Result<Var> {
    let v = g.l2_normalize(video)?;
    let t = g.l2_normalize(text)?;
    let tt = g.transpose(t)?;
    g.matmul(v, tt)
}

/// Symmetric InfoNCE over a square `[N, N]` similarity node, diagonal positives.
pub fn nce_loss(g: &mut Graph, sim: Var, temperature: f64) -> Result<Var> {
    let s = g.shape(sim).to_vec();
    if s.len() != 2 || s[0] != s[1] {
        return Err(shape_err!("contrastive loss needs a square batch, got {:?}", s));
    }
    if !(temperature > 0.0) {
        return Err(Error::Param(format!("temperature must be positive, got {temperature}")));
    }
    let diag: Vec<usize> = (0..s[0]).collect();
    let logits = g.scale(sim, 1.0 / temperature);
    let rows = g.log_softmax(logits, 1)?;
    let rows = g.pick(rows, &diag)?;
    let rows = g.mean_all(rows);
    let cols = g.log_softmax(logits, 0)?;
    let cols = g.transpose(cols)?;
    let cols = g.pick(cols, &diag)?;
    let cols = g.mean_all(cols);
    let total = g.add(rows, cols)?;
    Ok(g.scale(total, -0.5))
}

/// [`nce_loss`] evaluated on a similarity matrix.
pub fn nce_loss_value(sim: &SimilarityMatrix, temperature: f64) -> Result<f64> {
    if !sim.is_diagonal() {
        return Err(Error::Usage("contrastive loss needs a paired batch".into()));
    }
    let mut g = Graph::new();
    let s = g.constant(sim.values.clone());
    let l = nce_loss(&mut g, s, temperature)?;
    Ok(g.value(l).item())
}

/// Mean negative log-softmax at the label of each `[N, C]` row.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(shape_err!("{} labels for logits {:?}", labels.len(), s));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(Error::Param(format!("label {bad} out of range for {} classes", s[1])));
    }
    let lp = g.log_softmax(logits, 1)?;
    let picked = g.pick(lp, labels)?;
    let m = g.mean_all(picked);
    Ok(g.scale(m, -1.0))
}

/// Whether a computation happens while training or at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Training,
    Inference,
}

/// Dual-softmax reweighting: each entry is scaled by the softmax over queries
/// (down its column) of `values / temperature`.
pub fn dsl_transform(sim: &SimilarityMatrix, temperature: f64, phase: Phase) -> Result<SimilarityMatrix> {
    if phase == Phase::Training {
        return Err(Error::Usage("dual-softmax reweighting is inference-only".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Param(format!("temperature must be positive, got {temperature}")));
    }
    let (r, c) = (sim.rows(), sim.cols());
    let mut out = sim.values.data().to_vec();
    for j in 0..c {
        let col: Vec<f64> = (0..r).map(|i| sim.get(i, j) / temperature).collect();
        let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = col.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for i in 0..r {
            out[i * c + j] = e[i] / z * sim.get(i, j);
        }
    }
    SimilarityMatrix::new(Tensor::new(&[r, c], out)?, sim.ground_truth.clone())
}

/// 1-based rank of `target` in `scores`, descending, ties to the lower index.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < target))
        .count()
}

/// Rank of the ground-truth candidate for every query.
pub fn ground_truth_ranks(sim: &SimilarityMatrix) -> Result<Vec<usize>> {
    if sim.ground_truth.len() != sim.rows() {
        return Err(Error::Usage("retrieval metrics need ground truth for every query".into()));
    }
    Ok((0..sim.rows())
        .map(|i| rank_of(sim.row(i), sim.ground_truth[i]))
        .collect())
}

/// Median of 1-based ranks; the mean of the two middle ranks for even counts.
pub fn median_rank(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Usage("median of no ranks".into()));
    }
    let mut r = ranks.to_vec();
    r.sort_unstable();
    let n = r.len();
    Ok(if n % 2 == 1 {
        r[n / 2] as f64
    } else {
        (r[n / 2 - 1] + r[n / 2]) as f64 / 2.0
    })
}

/// R@K for each K and the median rank, from already computed ranks.
///
/// Ranks from several shards can be concatenated before finalizing.
pub fn metrics_from_ranks(ranks: &[usize], ks: &[usize]) -> Result<MetricsReport> {
    let mdr = median_rank(ranks)?;
    let n = ranks.len() as f64;
    let r_at = ks
        .iter()
        .map(|&k| (k, 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
        .collect();
    Ok(MetricsReport {
        r_at,
        median_rank: Some(mdr),
        ..MetricsReport::default()
    })
}

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// R@K and median rank of the ground truth.
pub fn retrieval_metrics(sim: &SimilarityMatrix, ks: &[usize]) -> Result<MetricsReport> {
    metrics_from_ranks(&ground_truth_ranks(sim)?, ks)
}

/// Percentage of rows whose label is among the `k` largest logits.
pub fn topk_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() || labels.is_empty() {
        return Err(shape_err!("{} labels for logits {:?}", labels.len(), logits.shape()));
    }
    let c = logits.shape()[1];
    if k == 0 || k > c {
        return Err(Error::Param(format!("k = {k} outside 1..={c}")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Param(format!("label {bad} out of range for {c} classes")));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| rank_of(&logits.data()[i * c..(i + 1) * c], y) <= k)
        .count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// Mean positive similarity and mean margin of the positive over the mean negative.
pub fn alignment_diagnostics(sim: &SimilarityMatrix) -> Result<(f64, f64)> {
    if sim.ground_truth.len() != sim.rows() {
        return Err(Error::Usage("alignment needs ground truth for every query".into()));
    }
    let c = sim.cols();
    if c < 2 {
        return Err(Error::Usage("margin is undefined with a single candidate".into()));
    }
    let (mut pos, mut margin) = (0.0, 0.0);
    for i in 0..sim.rows() {
        let g = sim.ground_truth[i];
        let row = sim.row(i);
        let neg = (row.iter().sum::<f64>() - row[g]) / (c - 1) as f64;
        pos += row[g];
        margin += row[g] - neg;
    }
    let n = sim.rows() as f64;
    Ok((pos / n, margin / n))
}

/// Evaluation results; fields not measured by a task are `None`/empty.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    /// Recall at K, in percent.
    pub r_at: BTreeMap<usize, f64>,
    pub median_rank: Option<f64>,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub avg_pos_sim: Option<f64>,
    pub avg_margin: Option<f64>,
    /// Accuracy restricted to the time-reversal class pairs, in percent.
    pub reverse_pair_acc: Option<f64>,
}

impl MetricsReport {
    /// `(name, value)` pairs in a fixed order.
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = self.r_at.iter().map(|(k, v)| (format!("R@{k}"), *v)).collect();
        let named = [
            ("MdR", self.median_rank),
            ("top1", self.top1),
            ("top5", self.top5),
            ("reverse_pair_acc", self.reverse_pair_acc),
            ("avg_pos_sim", self.avg_pos_sim),
            ("avg_margin", self.avg_margin),
        ];
        out.extend(named.into_iter().filter_map(|(n, v)| v.map(|v| (n.to_string(), v))));
        out
    }

    /// The number a suite compares rows by: R@1 for retrieval, top-1 otherwise.
    pub fn headline(&self) -> Option<f64> {
        self.r_at.get(&1).copied().or(self.top1)
    }
}
