//! Binding accuracy, Recall@K, similarity distributions and modality gap.
//!
//! Every metric takes an optional [`AlignmentModel`]; `None` means plain
//! cosine similarity between the frozen embeddings. With a model the text
//! side is replaced by `A t` before the cosine. The temperature is a positive
//! scale and never changes a ranking, so it is ignored here.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{AlignmentModel, EmbeddingDataset, Split};
use crate::error::{Error, Result};
use crate::numerics::{dot, norm, DenseMatrix};

pub const DEFAULT_BINS: usize = 50;

fn transformed(text: DenseMatrix, model: Option<&AlignmentModel>) -> Result<DenseMatrix> {
    match model {
        None => Ok(text),
        Some(m) => {
            if m.dim() != text.cols() {
                return Err(Error::Shape(format!(
                    "alignment model has dim {}, dataset has dim {}",
                    m.dim(),
                    text.cols()
                )));
            }
            text.matmul_nt(&m.matrix().to_dense())
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = norm(a) * norm(b);
    if denom == 0.0 {
        0.0
    } else {
        (dot(a, b) / denom).clamp(-1.0, 1.0)
    }
}

fn split_indices(ds: &EmbeddingDataset, split: Option<Split>) -> Result<Vec<usize>> {
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(idx)
}

fn negative_indices(ds: &EmbeddingDataset, split: Option<Split>) -> Result<Vec<usize>> {
    if ds.negatives().is_none() {
        return Err(Error::NoValidNegative("dataset has no negatives file".into()));
    }
    let idx = ds.indices_with_negatives(split);
    if idx.is_empty() {
        let name = split.map_or("dataset", Split::as_str);
        return Err(Error::NoValidNegative(format!("no valid negatives in {name}")));
    }
    Ok(idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BindingAccuracy {
    pub accuracy: f64,
    pub tie_rate: f64,
    pub loss_rate: f64,
    pub n: usize,
}

/// Fraction of images whose positive caption outscores the permuted one.
/// Ties count as failures.
pub fn binding_accuracy(
    ds: &EmbeddingDataset,
    model: Option<&AlignmentModel>,
    split: Option<Split>,
) -> Result<BindingAccuracy> {
    let idx = negative_indices(ds, split)?;
    let img = ds.image_embeddings().dense_rows(&idx);
    let pos = transformed(ds.text_embeddings().dense_rows(&idx), model)?;
    let neg = transformed(ds.negatives().expect("checked").embeddings.dense_rows(&idx), model)?;
    let (mut wins, mut ties, mut losses) = (0usize, 0usize, 0usize);
    for r in 0..idx.len() {
        let sp = cosine(img.row(r), pos.row(r));
        let sn = cosine(img.row(r), neg.row(r));
        match sp.partial_cmp(&sn) {
            Some(std::cmp::Ordering::Greater) => wins += 1,
            Some(std::cmp::Ordering::Equal) => ties += 1,
            _ => losses += 1,
        }
    }
    let n = idx.len();
    let nf = n as f64;
    Ok(BindingAccuracy {
        accuracy: wins as f64 / nf,
        tie_rate: ties as f64 / nf,
        loss_rate: losses as f64 / nf,
        n,
    })
}

/// Which captions compete in retrieval.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecallPool {
    /// Unique captions of the whole dataset.
    #[default]
    Dataset,
    /// Unique captions of the evaluated split only.
    Split,
}

/// Recall@K from a precomputed `queries x pool` score matrix. `targets[q]`
/// is the pool index of the correct candidate. Ties rank by pool order.
pub fn recall_from_scores(scores: &DenseMatrix, targets: &[usize], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    if scores.cols() == 0 {
        return Err(Error::Data("empty retrieval pool".into()));
    }
    if scores.rows() != targets.len() || scores.rows() == 0 {
        return Err(Error::Shape(format!(
            "{} score rows for {} targets",
            scores.rows(),
            targets.len()
        )));
    }
    let ranks: Vec<usize> = (0..scores.rows())
        .map(|q| {
            let row = scores.row(q);
            let t = targets[q];
            let st = row[t];
            row.iter()
                .enumerate()
                .filter(|&(j, &s)| s > st || (s == st && j < t))
                .count()
        })
        .collect();
    let n = ranks.len() as f64;
    Ok(ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r < k).count() as f64 / n))
        .collect())
}

/// Image-to-text Recall@K over deduplicated caption strings.
pub fn recall_at_k(
    ds: &EmbeddingDataset,
    model: Option<&AlignmentModel>,
    split: Option<Split>,
    ks: &[usize],
    pool: RecallPool,
) -> Result<BTreeMap<usize, f64>> {
    let queries = split_indices(ds, split)?;
    let pool_idx = match pool {
        RecallPool::Dataset => ds.indices(None),
        RecallPool::Split => queries.clone(),
    };
    // the sample with the smallest id represents a caption string
    let mut by_caption: BTreeMap<&str, usize> = BTreeMap::new();
    for &i in &pool_idx {
        let rep = by_caption.entry(ds.samples()[i].caption_text.as_str()).or_insert(i);
        if ds.samples()[i].id < ds.samples()[*rep].id {
            *rep = i;
        }
    }
    let captions: Vec<&str> = by_caption.keys().copied().collect();
    let reps: Vec<usize> = by_caption.values().copied().collect();
    let position: BTreeMap<&str, usize> = captions.iter().enumerate().map(|(p, c)| (*c, p)).collect();

    let cand = unit_rows(&transformed(ds.text_embeddings().dense_rows(&reps), model)?);
    let img = unit_rows(&ds.image_embeddings().dense_rows(&queries));
    let scores = img.matmul_nt(&cand)?;
    let targets: Vec<usize> = queries
        .iter()
        .map(|&i| {
            position
                .get(ds.samples()[i].caption_text.as_str())
                .copied()
                .ok_or_else(|| Error::Data(format!("caption of sample {i} is not in the pool")))
        })
        .collect::<Result<_>>()?;
    recall_from_scores(&scores, &targets, ks)
}

/// Rows scaled to unit norm; zero rows stay zero.
fn unit_rows(m: &DenseMatrix) -> DenseMatrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Histogram {
    /// Uniform bins over [-1, 1]; the top edge is inclusive.
    pub fn from_values(values: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let edges = (0..=bins).map(|b| -1.0 + 2.0 * b as f64 / bins as f64).collect();
        let mut counts = vec![0u64; bins];
        for &v in values {
            let pos = ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * bins as f64).floor() as usize;
            counts[pos.min(bins - 1)] += 1;
        }
        let n = values.len();
        let (mean, std) = if n == 0 {
            (0.0, 0.0)
        } else {
            let mean = values.iter().sum::<f64>() / n as f64;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            (mean, var.sqrt())
        };
        Self {
            edges,
            counts,
            mean,
            std,
            n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeforeAfter {
    pub before: Histogram,
    pub after: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDistReport {
    /// Positive caption vs its permuted negative.
    pub t2t: BeforeAfter,
    pub i2t_positive: BeforeAfter,
    pub i2t_negative: BeforeAfter,
}

/// Cosine similarity distributions before and after the text transform.
pub fn simdist(
    ds: &EmbeddingDataset,
    model: Option<&AlignmentModel>,
    split: Option<Split>,
    bins: usize,
) -> Result<SimDistReport> {
    let idx = negative_indices(ds, split)?;
    let img = ds.image_embeddings().dense_rows(&idx);
    let pos = ds.text_embeddings().dense_rows(&idx);
    let neg = ds.negatives().expect("checked").embeddings.dense_rows(&idx);
    let pos_a = transformed(pos.clone(), model)?;
    let neg_a = transformed(neg.clone(), model)?;
    let pairs = |a: &DenseMatrix, b: &DenseMatrix| -> Vec<f64> {
        (0..idx.len()).into_par_iter().map(|r| cosine(a.row(r), b.row(r))).collect()
    };
    let both = |a0: &DenseMatrix, b0: &DenseMatrix, a1: &DenseMatrix, b1: &DenseMatrix| BeforeAfter {
        before: Histogram::from_values(&pairs(a0, b0), bins),
        after: Histogram::from_values(&pairs(a1, b1), bins),
    };
    Ok(SimDistReport {
        t2t: both(&pos, &neg, &pos_a, &neg_a),
        i2t_positive: both(&img, &pos, &img, &pos_a),
        i2t_negative: both(&img, &neg, &img, &neg_a),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityGap {
    pub before: f64,
    pub after: f64,
}

fn column_mean(m: &DenseMatrix) -> Vec<f64> {
    let mut mean = vec![0.0; m.cols()];
    for row in m.iter_rows() {
        for (acc, v) in mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let n = m.rows() as f64;
    mean.iter_mut().for_each(|v| *v /= n);
    mean
}

fn mean_distance(x: &DenseMatrix, y: &DenseMatrix, normalize: bool) -> f64 {
    let (x, y) = if normalize {
        (unit_rows(x), unit_rows(y))
    } else {
        (x.clone(), y.clone())
    };
    let diff: Vec<f64> = column_mean(&x).iter().zip(column_mean(&y)).map(|(a, b)| a - b).collect();
    norm(&diff)
}

/// Euclidean distance between the mean image and mean text embedding.
pub fn modality_gap(
    ds: &EmbeddingDataset,
    model: Option<&AlignmentModel>,
    split: Option<Split>,
    normalize: bool,
) -> Result<ModalityGap> {
    let idx = split_indices(ds, split)?;
    let img = ds.image_embeddings().dense_rows(&idx);
    let txt = ds.text_embeddings().dense_rows(&idx);
    let before = mean_distance(&img, &txt, normalize);
    let after = mean_distance(&img, &transformed(txt, model)?, normalize);
    Ok(ModalityGap { before, after })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Recall(usize),
    Gap,
    Simdist,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "accuracy" => return Ok(Metric::Accuracy),
            "gap" => return Ok(Metric::Gap),
            "simdist" => return Ok(Metric::Simdist),
            _ => {}
        }
        s.strip_prefix("recall@")
            .and_then(|k| k.parse::<usize>().ok())
            .filter(|&k| k > 0)
            .map(Metric::Recall)
            .ok_or_else(|| Error::Usage(format!("unknown metric '{s}'")))
    }
}

/// Parses a comma-separated metric list.
pub fn parse_metrics(s: &str) -> Result<Vec<Metric>> {
    let mut out: Vec<Metric> = s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(Error::Usage("no metrics requested".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub metrics: Vec<Metric>,
    /// Splits that get accuracy and recall columns.
    pub splits: Vec<Split>,
    /// Split used for the gap and similarity distributions.
    pub distribution_split: Split,
    pub recall_pool: RecallPool,
    pub gap_normalize: bool,
    pub histogram_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metrics: vec![Metric::Accuracy, Metric::Recall(1), Metric::Gap, Metric::Simdist],
            splits: vec![Split::Train, Split::Test],
            distribution_split: Split::Test,
            recall_pool: RecallPool::Dataset,
            gap_normalize: true,
            histogram_bins: DEFAULT_BINS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub binding_accuracy: Option<BindingAccuracy>,
    /// Keyed by K.
    pub recall_at_k: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub identity_model: bool,
    pub splits: BTreeMap<Split, SplitMetrics>,
    pub modality_gap: Option<ModalityGap>,
    pub simdist: Option<SimDistReport>,
}

/// Runs every requested metric. Empty splits are left out.
pub fn evaluate(ds: &EmbeddingDataset, model: Option<&AlignmentModel>, cfg: &EvalConfig) -> Result<EvalReport> {
    let ks: Vec<usize> = cfg
        .metrics
        .iter()
        .filter_map(|m| match m {
            Metric::Recall(k) => Some(*k),
            _ => None,
        })
        .collect();
    let wants = |m: Metric| cfg.metrics.contains(&m);
    let mut splits = BTreeMap::new();
    for &split in &cfg.splits {
        if ds.indices(Some(split)).is_empty() {
            continue;
        }
        let mut sm = SplitMetrics::default();
        if wants(Metric::Accuracy) {
            sm.binding_accuracy = Some(binding_accuracy(ds, model, Some(split))?);
        }
        if !ks.is_empty() {
            sm.recall_at_k = recall_at_k(ds, model, Some(split), &ks, cfg.recall_pool)?;
        }
        splits.insert(split, sm);
    }
    let dist_split = (!ds.indices(Some(cfg.distribution_split)).is_empty()).then_some(cfg.distribution_split);
    let modality_gap = if wants(Metric::Gap) {
        Some(modality_gap(ds, model, dist_split, cfg.gap_normalize)?)
    } else {
        None
    };
    let simdist = if wants(Metric::Simdist) {
        Some(simdist(ds, model, dist_split, cfg.histogram_bins)?)
    } else {
        None
    };
    Ok(EvalReport {
        config: cfg.clone(),
        identity_model: model.is_none_or(AlignmentModel::is_identity),
        splits,
        modality_gap,
        simdist,
    })
}

/// Text table with one row per metric and one column per split.
pub fn render_table(report: &EvalReport) -> String {
    let cols: Vec<Split> = report.splits.keys().copied().collect();
    let mut rows: Vec<(String, Vec<String>)> = Vec::new();
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
    if report.config.metrics.contains(&Metric::Accuracy) {
        rows.push((
            "Accuracy".into(),
            cols.iter()
                .map(|s| fmt(report.splits[s].binding_accuracy.map(|b| b.accuracy)))
                .collect(),
        ));
    }
    for m in &report.config.metrics {
        if let Metric::Recall(k) = m {
            rows.push((
                format!("Recall@{k}"),
                cols.iter().map(|s| fmt(report.splits[s].recall_at_k.get(k).copied())).collect(),
            ));
        }
    }
    let label_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = write!(out, "{:label_w$}", "");
    for s in &cols {
        let _ = write!(out, "  {:>7}", s.as_str());
    }
    out.push('\n');
    for (label, vals) in &rows {
        let _ = write!(out, "{label:label_w$}");
        for v in vals {
            let _ = write!(out, "  {v:>7}");
        }
        out.push('\n');
    }
    if let Some(g) = report.modality_gap {
        let _ = writeln!(out, "modality gap: {:.4} -> {:.4}", g.before, g.after);
    }
    if let Some(sd) = &report.simdist {
        for (name, ba) in [
            ("t2t pos/neg", &sd.t2t),
            ("i2t positive", &sd.i2t_positive),
            ("i2t negative", &sd.i2t_negative),
        ] {
            let _ = writeln!(
                out,
                "{name}: mean {:.4} (sd {:.4}) -> {:.4} (sd {:.4})",
                ba.before.mean, ba.before.std, ba.after.mean, ba.after.std
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{NegativeSet, SampleRecord, StoredMatrix};

    fn sample(i: usize, caption: &str, split: Split) -> SampleRecord {
        SampleRecord {
            id: format!("s{i}"),
            caption_text: caption.into(),
            structured: None,
            token_tags: None,
            combo_id: caption.into(),
            split,
        }
    }

    fn tiny(img: Vec<f32>, txt: Vec<f32>, neg: Vec<f32>, captions: &[&str]) -> EmbeddingDataset {
        let n = captions.len();
        let d = img.len() / n;
        let samples = captions.iter().enumerate().map(|(i, c)| sample(i, c, Split::Test)).collect();
        let negs = NegativeSet {
            embeddings: StoredMatrix::new(n, d, neg).unwrap(),
            valid: vec![true; n],
        };
        EmbeddingDataset::new(
            samples,
            StoredMatrix::new(n, d, img).unwrap(),
            StoredMatrix::new(n, d, txt).unwrap(),
            Some(negs),
        )
        .unwrap()
    }

    #[test]
    fn positive_equal_to_image_is_perfect() {
        let img = vec![1.0, 0.0, 0.0, 1.0];
        let ds = tiny(img.clone(), img, vec![1.0, 1.0, 1.0, -1.0], &["a", "b"]);
        let b = binding_accuracy(&ds, None, None).unwrap();
        assert_eq!(b.accuracy, 1.0);
        assert_eq!(b.accuracy + b.tie_rate + b.loss_rate, 1.0);
    }

    #[test]
    fn ties_count_as_failures() {
        let v = vec![1.0, 0.0, 0.0, 1.0];
        let ds = tiny(v.clone(), v.clone(), v, &["a", "b"]);
        let b = binding_accuracy(&ds, None, None).unwrap();
        assert_eq!((b.accuracy, b.tie_rate), (0.0, 1.0));
    }

    #[test]
    fn recall_pool_deduplicates_and_k_pool_is_total() {
        let img = vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.1];
        let ds = tiny(img.clone(), img.clone(), img, &["x", "y", "x"]);
        let r = recall_at_k(&ds, None, None, &[1, 2], RecallPool::Dataset).unwrap();
        assert_eq!(r[&2], 1.0);
        assert!(r[&1] >= 2.0 / 3.0);
    }

    #[test]
    fn recall_tie_goes_to_lower_pool_index() {
        let s = DenseMatrix::from_rows(&[[0.5, 0.5, 0.1]]).unwrap();
        assert_eq!(recall_from_scores(&s, &[0], &[1]).unwrap()[&1], 1.0);
        assert_eq!(recall_from_scores(&s, &[1], &[1]).unwrap()[&1], 0.0);
        assert_eq!(recall_from_scores(&s, &[1], &[2]).unwrap()[&2], 1.0);
    }

    #[test]
    fn gap_is_zero_for_identical_modalities() {
        let img = vec![1.0, 2.0, -3.0, 0.5];
        let ds = tiny(img.clone(), img.clone(), img, &["a", "b"]);
        let g = modality_gap(&ds, None, None, true).unwrap();
        assert_eq!((g.before, g.after), (0.0, 0.0));
    }

    #[test]
    fn histogram_edges_and_counts() {
        let h = Histogram::from_values(&[-1.0, 0.0, 1.0, 0.99], 4);
        assert_eq!(h.edges, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert_eq!(h.counts, vec![1, 0, 1, 2]);
        assert_eq!(h.counts.iter().sum::<u64>(), 4);
    }

    #[test]
    fn metric_parsing() {
        assert_eq!(
            parse_metrics("accuracy,recall@5,gap,recall@1").unwrap(),
            vec![Metric::Accuracy, Metric::Recall(1), Metric::Recall(5), Metric::Gap]
        );
        assert!(parse_metrics("recall@0").is_err());
        assert!(parse_metrics("bleu").is_err());
    }

    #[test]
    fn missing_negatives_error() {
        let v = vec![1.0f32, 0.0];
        let ds = EmbeddingDataset::new(
            vec![sample(0, "a", Split::Test)],
            StoredMatrix::new(1, 2, v.clone()).unwrap(),
            StoredMatrix::new(1, 2, v).unwrap(),
            None,
        )
        .unwrap();
        assert!(matches!(binding_accuracy(&ds, None, None), Err(Error::NoValidNegative(_))));
    }
}
