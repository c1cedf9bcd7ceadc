//! Intra-modal retrieval: projected cosine similarity, mAP and Precision@K,
//! positive/negative similarity overlap, and the `(k_t, k_b)` sweep.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{self, BandSelection, Modality, ProjectorPair};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::Matrix;

/// Rows whose projected norm falls below this are rejected.
pub const DEGENERATE_NORM: f64 = 1e-12;
/// Pair budget for overlap histograms before uniform subsampling kicks in.
pub const MAX_HISTOGRAM_PAIRS: usize = 10_000_000;
pub const HISTOGRAM_SEED: u64 = 0x150c_11b0;

/// Pre-projection features with labels and a query/gallery split.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    pub name: String,
    /// `N × d_pre`
    pub features: Matrix,
    pub labels: Vec<i64>,
    pub query_idx: Vec<usize>,
    pub gallery_idx: Vec<usize>,
    /// Drop a query's own row from its ranking (matched by row index).
    pub exclude_self: bool,
}

impl EmbeddingDataset {
    pub fn new(
        name: impl Into<String>,
        features: Matrix,
        labels: Vec<i64>,
        query_idx: Vec<usize>,
        gallery_idx: Vec<usize>,
        exclude_self: bool,
    ) -> Result<Self> {
        let n = features.nrows();
        if labels.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {n} feature rows",
                labels.len()
            )));
        }
        if let Some(&bad) = query_idx.iter().chain(&gallery_idx).find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange {
                index: bad as i64,
                len: n,
            });
        }
        Ok(Self {
            name: name.into(),
            features,
            labels,
            query_idx,
            gallery_idx,
            exclude_self,
        })
    }

    /// Every row is both query and gallery; self-matches excluded.
    pub fn all_vs_all(name: impl Into<String>, features: Matrix, labels: Vec<i64>) -> Result<Self> {
        let n = features.nrows();
        Self::new(
            name,
            features,
            labels,
            (0..n).collect(),
            (0..n).collect(),
            true,
        )
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn ranking_task(&self) -> RankingTask {
        let query_labels = self.query_idx.iter().map(|&i| self.labels[i]).collect();
        let gallery_labels = self.gallery_idx.iter().map(|&i| self.labels[i]).collect();
        let task = RankingTask::new(query_labels, gallery_labels);
        if !self.exclude_self {
            return task;
        }
        let position: HashMap<usize, usize> = self
            .gallery_idx
            .iter()
            .enumerate()
            .map(|(pos, &row)| (row, pos))
            .collect();
        let matches = self
            .query_idx
            .iter()
            .map(|row| position.get(row).copied())
            .collect();
        task.with_self_matches(matches)
            .expect("one entry per query by construction")
    }
}

/// Labels for the two sides of a similarity matrix, plus the gallery column
/// (if any) holding each query's own item.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingTask {
    pub query_labels: Vec<i64>,
    pub gallery_labels: Vec<i64>,
    pub self_match: Vec<Option<usize>>,
}

impl RankingTask {
    pub fn new(query_labels: Vec<i64>, gallery_labels: Vec<i64>) -> Self {
        let self_match = vec![None; query_labels.len()];
        Self {
            query_labels,
            gallery_labels,
            self_match,
        }
    }

    pub fn with_self_matches(mut self, matches: Vec<Option<usize>>) -> Result<Self> {
        if matches.len() != self.query_labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} self matches for {} queries",
                matches.len(),
                self.query_labels.len()
            )));
        }
        if let Some(bad) = matches
            .iter()
            .flatten()
            .find(|&&g| g >= self.gallery_labels.len())
        {
            return Err(Error::IndexOutOfRange {
                index: *bad as i64,
                len: self.gallery_labels.len(),
            });
        }
        self.self_match = matches;
        Ok(self)
    }

    fn check(&self, s: &Matrix) -> Result<()> {
        if s.shape() != (self.query_labels.len(), self.gallery_labels.len()) {
            return Err(Error::ShapeMismatch(format!(
                "similarity matrix {:?} vs {} queries x {} gallery",
                s.shape(),
                self.query_labels.len(),
                self.gallery_labels.len()
            )));
        }
        Ok(())
    }

    /// Gallery indices for query `q`, most similar first. Ties keep gallery
    /// order; the self match is dropped.
    pub fn ranking(&self, s: &Matrix, q: usize) -> Vec<usize> {
        let skip = self.self_match[q];
        let mut order: Vec<usize> = (0..s.ncols()).filter(|&g| Some(g) != skip).collect();
        order.sort_by(|&a, &b| s[(q, b)].total_cmp(&s[(q, a)]));
        order
    }
}

/// Accumulation precision for similarity dot products.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EvalOptions {
    pub precision: Precision,
    pub exec: Execution,
}

/// Projects each feature row with `w` and scales it to unit L2 norm.
/// Returns an `N × d` matrix.
pub fn project_and_normalize(w: &Matrix, features: &Matrix) -> Result<Matrix> {
    if w.ncols() != features.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "projector expects {} inputs, features have {}",
            w.ncols(),
            features.ncols()
        )));
    }
    let mut out = features * w.transpose();
    for (row, mut r) in out.row_iter_mut().enumerate() {
        let norm = r.norm();
        if norm.is_nan() || norm < DEGENERATE_NORM {
            return Err(Error::DegenerateEmbedding { row });
        }
        r /= norm;
    }
    Ok(out)
}

fn rows_f64(m: &Matrix) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Dot product with eight independent accumulators combined in a fixed
/// order, so the result does not depend on how rows are scheduled.
fn dot<T>(a: &[T], b: &[T]) -> T
where
    T: Copy + Default + std::ops::Add<Output = T> + std::ops::Mul<Output = T>,
{
    let mut lanes = [T::default(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] = lanes[k] + x[k] * y[k];
        }
    }
    let mut tail = T::default();
    for (x, y) in ra.iter().zip(rb) {
        tail = tail + *x * *y;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5]))
        + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]))
        + tail
}

/// Dot products between the rows of `q` and `g` (cosine similarity for unit rows).
pub fn similarity_matrix(q: &Matrix, g: &Matrix, opts: EvalOptions) -> Result<Matrix> {
    if q.ncols() != g.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "query dim {} vs gallery dim {}",
            q.ncols(),
            g.ncols()
        )));
    }
    let d = q.ncols();
    let (nq, ng) = (q.nrows(), g.nrows());
    let qr = rows_f64(q);
    let gr = rows_f64(g);
    let rows: Vec<Vec<f64>> = match opts.precision {
        Precision::F64 => opts.exec.map(nq, |a| {
            let qa = &qr[a * d..(a + 1) * d];
            gr.chunks_exact(d.max(1))
                .take(ng)
                .map(|gb| dot(qa, gb))
                .collect()
        }),
        Precision::F32 => {
            let qr: Vec<f32> = qr.iter().map(|&x| x as f32).collect();
            let gr: Vec<f32> = gr.iter().map(|&x| x as f32).collect();
            opts.exec.map(nq, |a| {
                let qa = &qr[a * d..(a + 1) * d];
                gr.chunks_exact(d.max(1))
                    .take(ng)
                    .map(|gb| dot(qa, gb) as f64)
                    .collect()
            })
        }
    };
    let mut s = Matrix::zeros(nq, ng);
    if d == 0 {
        return Ok(s);
    }
    for (a, row) in rows.iter().enumerate() {
        for (b, &v) in row.iter().enumerate() {
            s[(a, b)] = v;
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub map: f64,
    /// `None` for queries without any positive in the gallery.
    pub per_query_ap: Vec<Option<f64>>,
    pub precision_at_k: BTreeMap<usize, f64>,
    pub num_queries_scored: usize,
}

/// Average precision of one ranked relevance list, `None` without positives.
fn average_precision(relevant: impl Iterator<Item = bool>) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0f64;
    for (k, rel) in relevant.enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Mean over queries with at least one positive of AP, where AP averages
/// precision at the rank of each positive.
pub fn mean_average_precision(
    s: &Matrix,
    task: &RankingTask,
    exec: Execution,
) -> Result<RetrievalReport> {
    task.check(s)?;
    let per_query_ap = exec.map(s.nrows(), |q| {
        let label = task.query_labels[q];
        average_precision(
            task.ranking(s, q)
                .into_iter()
                .map(|g| task.gallery_labels[g] == label),
        )
    });
    let scored: Vec<f64> = per_query_ap.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(Error::NoPositives);
    }
    let map = scored.iter().sum::<f64>() / scored.len() as f64;
    Ok(RetrievalReport {
        map,
        num_queries_scored: scored.len(),
        per_query_ap,
        precision_at_k: BTreeMap::new(),
    })
}

/// Mean over all queries of the fraction of positives among the top `K`.
pub fn precision_at_k(
    s: &Matrix,
    task: &RankingTask,
    ks: &[usize],
    exec: Execution,
) -> Result<BTreeMap<usize, f64>> {
    task.check(s)?;
    let nq = s.nrows();
    if nq == 0 {
        return Err(Error::InvalidParameter("no queries".into()));
    }
    let kmax = ks.iter().copied().max().unwrap_or(0);
    let prefix_hits = exec.try_map(nq, |q| {
        let ranking = task.ranking(s, q);
        if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k > ranking.len()) {
            return Err(Error::KOutOfRange {
                k: bad,
                available: ranking.len(),
                query: q,
            });
        }
        let label = task.query_labels[q];
        let mut hits = Vec::with_capacity(kmax);
        let mut acc = 0usize;
        for &g in ranking.iter().take(kmax) {
            acc += usize::from(task.gallery_labels[g] == label);
            hits.push(acc);
        }
        Ok(hits)
    })?;
    Ok(ks
        .iter()
        .map(|&k| {
            let total: f64 = prefix_hits.iter().map(|h| h[k - 1] as f64 / k as f64).sum();
            (k, total / nq as f64)
        })
        .collect())
}

/// mAP plus Precision@K for each `ks` entry.
pub fn evaluate(
    s: &Matrix,
    task: &RankingTask,
    ks: &[usize],
    exec: Execution,
) -> Result<RetrievalReport> {
    let mut report = mean_average_precision(s, task, exec)?;
    if !ks.is_empty() {
        report.precision_at_k = precision_at_k(s, task, ks, exec)?;
    }
    Ok(report)
}

/// Query-vs-gallery similarities of `dataset` under projector `w`.
pub fn dataset_similarities(
    w: &Matrix,
    dataset: &EmbeddingDataset,
    opts: EvalOptions,
) -> Result<Matrix> {
    let projected = project_and_normalize(w, &dataset.features)?;
    let q = projected.select_rows(dataset.query_idx.iter());
    let g = projected.select_rows(dataset.gallery_idx.iter());
    similarity_matrix(&q, &g, opts)
}

/// Image-to-image (or text-to-text) retrieval of `dataset` under projector `w`.
pub fn retrieve(
    w: &Matrix,
    dataset: &EmbeddingDataset,
    ks: &[usize],
    opts: EvalOptions,
) -> Result<RetrievalReport> {
    let s = dataset_similarities(w, dataset, opts)?;
    evaluate(&s, &dataset.ranking_task(), ks, opts.exec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub bins: usize,
    /// Probability mass per bin over `[-1, 1]`.
    pub pos_hist: Vec<f64>,
    pub neg_hist: Vec<f64>,
    pub iou: f64,
    pub pos_mean: f64,
    pub neg_mean: f64,
    pub pos_pairs: usize,
    pub neg_pairs: usize,
}

impl OverlapReport {
    pub fn bin_edges(&self, b: usize) -> (f64, f64) {
        let width = 2.0 / self.bins as f64;
        (-1.0 + b as f64 * width, -1.0 + (b + 1) as f64 * width)
    }
}

/// Intersection-over-union of two histograms: `Σ min / Σ max`.
pub fn histogram_iou(a: &[f64], b: &[f64]) -> f64 {
    let (inter, union) = a
        .iter()
        .zip(b)
        .fold((0.0, 0.0), |(i, u), (&x, &y)| (i + x.min(y), u + x.max(y)));
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn bin_of(x: f64, bins: usize) -> usize {
    let b = ((x + 1.0) / 2.0 * bins as f64).floor();
    (b.max(0.0) as usize).min(bins - 1)
}

/// Histograms of same-label (positive) and different-label (negative) pair
/// similarities and their overlap.
pub fn overlap_report(s: &Matrix, task: &RankingTask, bins: usize) -> Result<OverlapReport> {
    overlap_report_with_budget(s, task, bins, MAX_HISTOGRAM_PAIRS)
}

pub fn overlap_report_with_budget(
    s: &Matrix,
    task: &RankingTask,
    bins: usize,
    max_pairs: usize,
) -> Result<OverlapReport> {
    task.check(s)?;
    if bins == 0 {
        return Err(Error::InvalidParameter(
            "histogram needs at least one bin".into(),
        ));
    }
    let (nq, ng) = s.shape();
    let excluded = task.self_match.iter().flatten().count();
    let total = nq * ng - excluded;

    let mut pos = vec![0usize; bins];
    let mut neg = vec![0usize; bins];
    let (mut pos_sum, mut neg_sum) = (0.0f64, 0.0f64);
    let mut add = |q: usize, g: usize| {
        let x = s[(q, g)];
        if task.query_labels[q] == task.gallery_labels[g] {
            pos[bin_of(x, bins)] += 1;
            pos_sum += x;
        } else {
            neg[bin_of(x, bins)] += 1;
            neg_sum += x;
        }
    };
    if total <= max_pairs {
        for q in 0..nq {
            for g in 0..ng {
                if task.self_match[q] != Some(g) {
                    add(q, g);
                }
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(HISTOGRAM_SEED);
        let mut drawn = 0;
        while drawn < max_pairs {
            let q = rng.random_range(0..nq);
            let g = rng.random_range(0..ng);
            if task.self_match[q] != Some(g) {
                add(q, g);
                drawn += 1;
            }
        }
    }

    let pos_pairs: usize = pos.iter().sum();
    let neg_pairs: usize = neg.iter().sum();
    if pos_pairs == 0 {
        return Err(Error::EmptyPairClass("positive"));
    }
    if neg_pairs == 0 {
        return Err(Error::EmptyPairClass("negative"));
    }
    let pos_hist: Vec<f64> = pos.iter().map(|&c| c as f64 / pos_pairs as f64).collect();
    let neg_hist: Vec<f64> = neg.iter().map(|&c| c as f64 / neg_pairs as f64).collect();
    Ok(OverlapReport {
        bins,
        iou: histogram_iou(&pos_hist, &neg_hist),
        pos_hist,
        neg_hist,
        pos_mean: pos_sum / pos_pairs as f64,
        neg_mean: neg_sum / neg_pairs as f64,
        pos_pairs,
        neg_pairs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub k_t: usize,
    pub k_b: usize,
    /// `None` when `k_t + k_b ≥ r`.
    pub map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best_k_t: usize,
    pub best_k_b: usize,
    pub best_map: f64,
    pub rank: usize,
    /// Row-major over `(k_t, k_b)` in grid order.
    pub cells: Vec<SweepCell>,
}

/// Retrieval mAP for every `(k_t, k_b)` grid point. The best point breaks ties
/// by smaller `k_t`, then smaller `k_b`.
pub fn sweep_band(
    pair: &ProjectorPair,
    dataset: &EmbeddingDataset,
    modality: Modality,
    k_t_grid: &[usize],
    k_b_grid: &[usize],
    opts: EvalOptions,
) -> Result<SweepResult> {
    if k_t_grid.is_empty() || k_b_grid.is_empty() {
        return Err(Error::InvalidParameter(
            "sweep grids must be non-empty".into(),
        ));
    }
    let op = align::inter_modal_operator(pair)?;
    let rank = op.rank();
    let points: Vec<(usize, usize)> = k_t_grid
        .iter()
        .flat_map(|&t| k_b_grid.iter().map(move |&b| (t, b)))
        .collect();
    let cells = opts.exec.try_map(points.len(), |i| {
        let (k_t, k_b) = points[i];
        let map = match BandSelection::new(rank, k_t, k_b) {
            Ok(band) => {
                let aligned = align::align_projectors(pair, &op, &band)?;
                Some(retrieve(aligned.projector(modality), dataset, &[], opts)?.map)
            }
            Err(_) => None,
        };
        Ok::<_, Error>(SweepCell { k_t, k_b, map })
    })?;

    let best = cells
        .iter()
        .filter_map(|c| c.map.map(|m| (c.k_t, c.k_b, m)))
        .fold(None::<(usize, usize, f64)>, |best, cand| match best {
            None => Some(cand),
            Some(b) => {
                let better = cand.2 > b.2 || (cand.2 == b.2 && (cand.0, cand.1) < (b.0, b.1));
                Some(if better { cand } else { b })
            }
        })
        .ok_or(Error::InfeasibleGrid(rank))?;
    Ok(SweepResult {
        best_k_t: best.0,
        best_k_b: best.1,
        best_map: best.2,
        rank,
        cells,
    })
}
