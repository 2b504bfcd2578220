//! Contrastive training of a linear text-side alignment matrix.
//!
//! Image and text encoders stay frozen; only the `D x D` matrix `A` and a
//! log-scale temperature `tau` are learned. A batch of `B` pairs produces the
//! score matrix
//!
//! ```text
//! S[i, j] = exp(tau) * <normalize(img_i), normalize(A t_j)>
//! ```
//!
//! over `B` positive text columns (standard batch) or `B` positives followed
//! by `B` permuted-caption negatives (hard-negative batch, `B x 2B`). The
//! loss is image-to-text cross-entropy over every column plus text-to-image
//! cross-entropy over the positive columns, each averaged over the batch.
//! Gradients are derived by hand and checked against finite differences.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::captions::{detect_article_mode, permute_attributes, render, shuffle_tagged};
use crate::datamodel::{AlignmentModel, EmbeddingDataset, NegativeSet, Split, StoredMatrix};
use crate::error::{Error, Result};
use crate::eval;
use crate::numerics::{dot, grad_check, l2_normalize_rows, norm, softmax_ce, DenseMatrix, OptimizerKind, OptimizerState};
use crate::synth::{mix_seed, negative_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchMode {
    /// Positives only, `B x B` scores.
    Sb,
    /// Positives plus permuted-caption negatives, `B x 2B` scores.
    Hnb,
}

impl std::str::FromStr for BatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sb" => Ok(BatchMode::Sb),
            "hnb" => Ok(BatchMode::Hnb),
            _ => Err(Error::Usage(format!("unknown batch mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignTrainConfig {
    pub mode: BatchMode,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Products run with a fixed summation order. Always honoured; kept so
    /// configs record it.
    pub deterministic: bool,
    /// Re-normalize `A t` before the inner product.
    pub normalize_after_transform: bool,
    pub learn_temperature: bool,
}

impl Default for AlignTrainConfig {
    fn default() -> Self {
        Self {
            mode: BatchMode::Hnb,
            batch_size: 256,
            epochs: 20,
            learning_rate: 1e-3,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            deterministic: true,
            normalize_after_transform: true,
            learn_temperature: true,
        }
    }
}

impl AlignTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Usage(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Usage(format!("bad learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Captions of the hard negatives, `None` where no permutation exists.
///
/// Structured captions get their attributes permuted; unstructured ones with
/// token tags get nouns and adjectives shuffled.
pub fn negative_captions(ds: &EmbeddingDataset, seed: u64) -> Vec<Option<String>> {
    ds.samples()
        .iter()
        .map(|s| {
            let nseed = negative_seed(seed, &s.caption_text);
            if let Some(c) = &s.structured {
                let mode = detect_article_mode(c, &s.caption_text)?;
                permute_attributes(c, nseed).ok().map(|p| render(&p, mode))
            } else if let Some(tags) = &s.token_tags {
                shuffle_tagged(tags, nseed).ok()
            } else {
                None
            }
        })
        .collect()
}

/// Looks up the embedding of every sample's negative caption in `cache`.
/// Samples without a valid negative are flagged invalid and zero-filled.
pub fn build_negatives(
    ds: &EmbeddingDataset,
    cache: &HashMap<String, Vec<f32>>,
    seed: u64,
) -> Result<NegativeSet> {
    let d = ds.dim();
    let caps = negative_captions(ds, seed);
    let mut data = Vec::with_capacity(ds.len() * d);
    let mut valid = Vec::with_capacity(ds.len());
    for neg in caps {
        match neg {
            Some(text) => {
                let row = cache
                    .get(&text)
                    .ok_or_else(|| Error::Data(format!("no cached embedding for '{text}'")))?;
                if row.len() != d {
                    return Err(Error::Shape(format!(
                        "cached embedding for '{text}' has dim {}, expected {d}",
                        row.len()
                    )));
                }
                data.extend_from_slice(row);
                valid.push(true);
            }
            None => {
                data.extend(std::iter::repeat_n(0.0, d));
                valid.push(false);
            }
        }
    }
    Ok(NegativeSet {
        embeddings: StoredMatrix::new(ds.len(), d, data)?,
        valid,
    })
}

/// Score matrix plus the intermediates needed for the backward pass.
#[derive(Debug, Clone)]
pub struct Scores {
    /// `B x K` with `K = B` or `2B`.
    pub logits: DenseMatrix,
    batch: usize,
    scale: f64,
    image_unit: DenseMatrix,
    /// Text rows fed to `A`, already unit norm; `K x D`.
    text_in: DenseMatrix,
    /// `A t` rows, unit norm when renormalizing; `K x D`.
    text_out: DenseMatrix,
    /// Norms of `A t` before renormalizing.
    out_norms: Vec<f64>,
    normalized_after: bool,
}

impl Scores {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.logits.rows(), self.logits.cols())
    }
}

/// Computes LABCLIP scores for a batch.
///
/// `images`, `positives` and `negatives` are raw `B x D` embeddings; rows are
/// L2-normalized here.
pub fn labclip_scores(
    transform: &DenseMatrix,
    log_temperature: f64,
    images: &DenseMatrix,
    positives: &DenseMatrix,
    negatives: Option<&DenseMatrix>,
    normalize_after_transform: bool,
) -> Result<Scores> {
    let b = images.rows();
    let d = images.cols();
    if positives.rows() != b || positives.cols() != d {
        return Err(Error::Shape(format!(
            "images are {b}x{d} but positives are {}x{}",
            positives.rows(),
            positives.cols()
        )));
    }
    if transform.rows() != d || transform.cols() != d {
        return Err(Error::Shape(format!(
            "transform is {}x{}, embeddings have dim {d}",
            transform.rows(),
            transform.cols()
        )));
    }
    let mut text_rows: Vec<&[f64]> = positives.iter_rows().collect();
    if let Some(n) = negatives {
        if n.rows() != b || n.cols() != d {
            return Err(Error::Shape(format!(
                "negatives are {}x{}, expected {b}x{d}",
                n.rows(),
                n.cols()
            )));
        }
        text_rows.extend(n.iter_rows());
    }
    let image_unit = l2_normalize_rows(images)?;
    let text_in = l2_normalize_rows(&DenseMatrix::from_rows(&text_rows)?)?;
    // row j of text_in · A^T is A t_j
    let mut text_out = text_in.matmul_nt(transform)?;
    let mut out_norms = Vec::with_capacity(text_out.rows());
    for j in 0..text_out.rows() {
        let row = text_out.row_mut(j);
        let n = norm(row);
        if normalize_after_transform {
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Numerical(format!("transformed text row {j} has norm {n}")));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        out_norms.push(n);
    }
    let scale = log_temperature.exp();
    let mut logits = image_unit.matmul_nt(&text_out)?;
    logits.data_mut().iter_mut().for_each(|v| *v *= scale);
    Ok(Scores {
        logits,
        batch: b,
        scale,
        image_unit,
        text_in,
        text_out,
        out_norms,
        normalized_after: normalize_after_transform,
    })
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub image_to_text: f64,
    pub text_to_image: f64,
    pub grad_transform: DenseMatrix,
    pub grad_log_temperature: f64,
}

/// Symmetric contrastive loss and its gradients with respect to `A` and `tau`.
pub fn labclip_loss(scores: &Scores) -> Result<LossOutput> {
    let b = scores.batch;
    let (rows, k) = scores.shape();
    let bf = b as f64;
    let s = &scores.logits;
    let mut g = DenseMatrix::zeros(rows, k);

    let mut i2t = 0.0;
    for i in 0..b {
        let (l, grad) = softmax_ce(s.row(i), i)?;
        i2t += l / bf;
        for (gj, dj) in g.row_mut(i).iter_mut().zip(grad) {
            *gj += dj / bf;
        }
    }
    let mut t2i = 0.0;
    let mut col = vec![0.0; b];
    for j in 0..b {
        for (i, c) in col.iter_mut().enumerate() {
            *c = s.get(i, j);
        }
        let (l, grad) = softmax_ce(&col, j)?;
        t2i += l / bf;
        for (i, di) in grad.into_iter().enumerate() {
            g.set(i, j, g.get(i, j) + di / bf);
        }
    }
    let loss = i2t + t2i;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("contrastive loss is {loss}")));
    }

    let grad_log_temperature = dot(g.data(), s.data());
    // dL/d(text_out_j) = scale * sum_i G[i, j] * image_unit_i
    let mut grad_out = g.transpose().matmul(&scores.image_unit)?;
    grad_out.data_mut().iter_mut().for_each(|v| *v *= scores.scale);
    if scores.normalized_after {
        for j in 0..k {
            let unit = scores.text_out.row(j);
            let proj = dot(unit, grad_out.row(j));
            let inv = 1.0 / scores.out_norms[j];
            for (gv, &u) in grad_out.row_mut(j).iter_mut().zip(unit) {
                *gv = (*gv - u * proj) * inv;
            }
        }
    }
    // out_j = A in_j  =>  dL/dA = sum_j dL/dout_j in_j^T
    let grad_transform = grad_out.transpose().matmul(&scores.text_in)?;
    Ok(LossOutput {
        loss,
        image_to_text: i2t,
        text_to_image: t2i,
        grad_transform,
        grad_log_temperature,
    })
}

/// Worst relative errors from a finite-difference check of [`labclip_loss`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub dim: usize,
    pub batch: usize,
    pub mode: BatchMode,
    pub seed: u64,
    pub max_rel_error_transform: f64,
    pub max_rel_error_temperature: f64,
    pub max_rel_error: f64,
}

/// Checks analytic gradients on a random batch at a random point near the
/// identity.
pub fn gradcheck(dim: usize, batch: usize, mode: BatchMode, seed: u64, h: f64) -> Result<GradCheckReport> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    if dim == 0 || batch < 2 {
        return Err(Error::Usage("gradcheck needs dim >= 1 and batch >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |r: usize, c: usize| {
        DenseMatrix::from_vec(r, c, (0..r * c).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .expect("shape")
    };
    let images = gauss(batch, dim);
    let pos = gauss(batch, dim);
    let neg = gauss(batch, dim);
    let mut a = DenseMatrix::identity(dim);
    let perturb = gauss(dim, dim);
    for (x, p) in a.data_mut().iter_mut().zip(perturb.data()) {
        *x += 0.3 * p;
    }
    let tau = 0.5 * gauss(1, 1).get(0, 0);
    let neg = (mode == BatchMode::Hnb).then_some(&neg);

    let objective = |theta: &[f64]| -> f64 {
        let a = DenseMatrix::from_vec(dim, dim, theta[..dim * dim].to_vec()).expect("shape");
        labclip_scores(&a, theta[dim * dim], &images, &pos, neg, true)
            .and_then(|s| labclip_loss(&s))
            .map(|o| o.loss)
            .unwrap_or(f64::NAN)
    };
    let out = labclip_loss(&labclip_scores(&a, tau, &images, &pos, neg, true)?)?;
    let mut theta = a.data().to_vec();
    theta.push(tau);
    let mut analytic = out.grad_transform.data().to_vec();
    analytic.push(out.grad_log_temperature);

    // split the report between the matrix and the temperature coordinates
    let err_a = grad_check(
        |t: &[f64]| {
            let mut full = t.to_vec();
            full.push(tau);
            objective(&full)
        },
        &analytic[..dim * dim],
        &theta[..dim * dim],
        h,
    )?;
    let err_tau = grad_check(
        |t: &[f64]| {
            let mut full = a.data().to_vec();
            full.push(t[0]);
            objective(&full)
        },
        &analytic[dim * dim..],
        &theta[dim * dim..],
        h,
    )?;
    Ok(GradCheckReport {
        dim,
        batch,
        mode,
        seed,
        max_rel_error_transform: err_a,
        max_rel_error_temperature: err_tau,
        max_rel_error: err_a.max(err_tau),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub log_temperature: f64,
    pub val_binding_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model after the last epoch, or the last finite model on divergence.
    pub model: AlignmentModel,
    pub log: Vec<EpochLog>,
    /// Set when training stopped on a non-finite loss or gradient.
    pub diverged: Option<String>,
}

/// Trains `A` and `tau` from identity / zero on the training split.
///
/// In hard-negative mode, samples without a valid negative are skipped.
pub fn train_alignment(ds: &EmbeddingDataset, cfg: &AlignTrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let d = ds.dim();
    let mut train = match cfg.mode {
        BatchMode::Sb => ds.indices(Some(Split::Train)),
        BatchMode::Hnb => {
            if ds.negatives().is_none() {
                return Err(Error::Data("hard-negative training needs a negatives file".into()));
            }
            ds.indices_with_negatives(Some(Split::Train))
        }
    };
    if train.len() < 2 {
        return Err(Error::Data(format!(
            "{} usable training samples; need at least 2",
            train.len()
        )));
    }
    let images = ds.image_embeddings();
    let texts = ds.text_embeddings();
    let negs = ds.negatives().map(|n| &n.embeddings);
    let has_val = !ds.indices_with_negatives(Some(Split::Val)).is_empty();

    let mut transform = DenseMatrix::identity(d);
    let mut tau = 0.0f64;
    let n_params = d * d + 1;
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate, n_params)?;
    let mut params = vec![0.0; n_params];
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut last_good = AlignmentModel::identity(d);

    for epoch in 0..cfg.epochs {
        train.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64)));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in train.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let img = images.dense_rows(chunk);
            let pos = texts.dense_rows(chunk);
            let neg = match cfg.mode {
                BatchMode::Hnb => Some(negs.expect("checked above").dense_rows(chunk)),
                BatchMode::Sb => None,
            };
            let step = labclip_scores(&transform, tau, &img, &pos, neg.as_ref(), cfg.normalize_after_transform)
                .and_then(|s| labclip_loss(&s));
            let out = match step {
                Ok(o) => o,
                Err(e @ Error::Numerical(_)) => {
                    return Ok(TrainOutcome {
                        model: last_good,
                        log,
                        diverged: Some(e.to_string()),
                    })
                }
                Err(e) => return Err(e),
            };
            params[..d * d].copy_from_slice(transform.data());
            params[d * d] = tau;
            let mut grads = out.grad_transform.into_data();
            grads.push(if cfg.learn_temperature { out.grad_log_temperature } else { 0.0 });
            if let Err(e) = opt.step(&mut params, &grads) {
                return match e {
                    Error::Numerical(msg) => Ok(TrainOutcome {
                        model: last_good,
                        log,
                        diverged: Some(msg),
                    }),
                    other => Err(other),
                };
            }
            if params.iter().any(|p| !p.is_finite()) {
                return Ok(TrainOutcome {
                    model: last_good,
                    log,
                    diverged: Some("parameters became non-finite".into()),
                });
            }
            transform.data_mut().copy_from_slice(&params[..d * d]);
            tau = params[d * d];
            loss_sum += out.loss;
            batches += 1;
        }
        let model = AlignmentModel::from_dense(&transform, tau)?;
        let val_binding_accuracy = if has_val {
            Some(eval::binding_accuracy(ds, Some(&model), Some(Split::Val))?.accuracy)
        } else {
            None
        };
        log::debug!("epoch {epoch}: loss {:.5}", loss_sum / batches.max(1) as f64);
        log.push(EpochLog {
            epoch,
            mean_loss: loss_sum / batches.max(1) as f64,
            log_temperature: tau,
            val_binding_accuracy,
        });
        last_good = model;
    }
    Ok(TrainOutcome {
        model: last_good,
        log,
        diverged: None,
    })
}
