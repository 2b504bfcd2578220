//! Per-object linear probes on frozen embeddings.
//!
//! For a target object `o`, the dataset is filtered to samples whose caption
//! contains `o`, and a linear classifier predicts the attribute bound to `o`
//! from the raw (never normalized) image or text embedding. High accuracy
//! means the embedding carries attribute-object binding for that modality.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{EmbeddingDataset, LinearProbe, Modality, ProbeMode, Split, StoredMatrix};
use crate::error::{Error, Result};
use crate::numerics::{argmax, sigmoid, sigmoid_bce, softmax_ce};
use crate::synth::mix_seed;

/// One filtered sample: its dataset index and the sorted attributes bound to
/// the target object (one entry per instance of the object).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeExample {
    pub index: usize,
    pub labels: Vec<String>,
}

/// Samples whose structured caption mentions `object`.
pub fn filter_for_object(ds: &EmbeddingDataset, object: &str) -> Result<Vec<ProbeExample>> {
    let out: Vec<ProbeExample> = ds
        .samples()
        .iter()
        .enumerate()
        .filter_map(|(index, s)| {
            let c = s.structured.as_ref()?;
            let mut labels: Vec<String> =
                c.slots.iter().filter(|sl| sl.obj == object).map(|sl| sl.attr.clone()).collect();
            if labels.is_empty() {
                return None;
            }
            labels.sort();
            Some(ProbeExample { index, labels })
        })
        .collect();
    if out.is_empty() {
        return Err(Error::Data(format!("object '{object}' does not occur in the dataset")));
    }
    Ok(out)
}

/// Objects mentioned by any structured caption, sorted.
pub fn dataset_objects(ds: &EmbeddingDataset) -> Vec<String> {
    ds.samples()
        .iter()
        .filter_map(|s| s.structured.as_ref())
        .flat_map(|c| c.slots.iter().map(|sl| sl.obj.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// `None` picks multilabel when any caption holds the object twice.
    pub mode: Option<ProbeMode>,
    pub batch_size: usize,
    pub learning_rates: Vec<f64>,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            mode: None,
            batch_size: 32,
            learning_rates: vec![0.1, 0.01, 0.001],
            epochs: 100,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Usage("probe batch size must be positive".into()));
        }
        if self.learning_rates.is_empty() || self.learning_rates.iter().any(|lr| !(*lr > 0.0 && lr.is_finite())) {
            return Err(Error::Usage(format!("bad learning-rate grid {:?}", self.learning_rates)));
        }
        Ok(())
    }
}

/// A trained probe plus what the selection saw.
#[derive(Debug, Clone)]
pub struct TrainedProbe {
    pub probe: LinearProbe,
    pub learning_rate: f64,
    pub val_accuracy: Option<f64>,
    /// The training split held a single label; the probe is trivial.
    pub degenerate: bool,
}

fn resolve_mode(examples: &[ProbeExample], mode: Option<ProbeMode>) -> ProbeMode {
    mode.unwrap_or(if examples.iter().any(|e| e.labels.len() > 1) {
        ProbeMode::Multilabel
    } else {
        ProbeMode::Softmax
    })
}

struct Encoded {
    x: Vec<Vec<f64>>,
    /// Softmax: class index per sample. Multilabel: class membership.
    targets: Vec<Vec<bool>>,
    single: Vec<Option<usize>>,
}

fn encode(ds: &EmbeddingDataset, modality: Modality, examples: &[ProbeExample], classes: &[String]) -> Encoded {
    let emb = ds.embeddings(modality);
    let mut enc = Encoded {
        x: Vec::with_capacity(examples.len()),
        targets: Vec::with_capacity(examples.len()),
        single: Vec::with_capacity(examples.len()),
    };
    for e in examples {
        enc.x.push(emb.row(e.index).iter().map(|&v| v as f64).collect());
        let mut t = vec![false; classes.len()];
        for l in &e.labels {
            if let Ok(c) = classes.binary_search(l) {
                t[c] = true;
            }
        }
        enc.targets.push(t);
        enc.single.push(match e.labels.as_slice() {
            [l] => classes.binary_search(l).ok(),
            _ => None,
        });
    }
    enc
}

fn correct(probe: &LinearProbe, x: &[f32], target: &[bool], single: Option<usize>) -> bool {
    let z = probe.logits(x);
    match probe.mode {
        ProbeMode::Softmax => single.is_some_and(|c| argmax(&z) == c),
        ProbeMode::Multilabel => z.iter().zip(target).all(|(&zi, &t)| (sigmoid(zi) > 0.5) == t),
    }
}

fn accuracy_on(probe: &LinearProbe, ds: &EmbeddingDataset, modality: Modality, examples: &[ProbeExample]) -> f64 {
    let enc = encode(ds, modality, examples, &probe.classes);
    let emb = ds.embeddings(modality);
    let hits = examples
        .iter()
        .enumerate()
        .filter(|&(k, e)| correct(probe, emb.row(e.index), &enc.targets[k], enc.single[k]))
        .count();
    hits as f64 / examples.len() as f64
}

fn fit(
    enc: &Encoded,
    mode: ProbeMode,
    n_classes: usize,
    dim: usize,
    lr: f64,
    cfg: &ProbeConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut w = vec![0.0; n_classes * dim];
    let mut b = vec![0.0; n_classes];
    let mut order: Vec<usize> = (0..enc.x.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gw = vec![0.0; n_classes * dim];
    let mut gb = vec![0.0; n_classes];
    let mut z = vec![0.0; n_classes];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            gw.iter_mut().for_each(|v| *v = 0.0);
            gb.iter_mut().for_each(|v| *v = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &s in batch {
                let x = &enc.x[s];
                for (c, zc) in z.iter_mut().enumerate() {
                    *zc = b[c] + x.iter().zip(&w[c * dim..(c + 1) * dim]).map(|(a, b)| a * b).sum::<f64>();
                }
                let dz: Vec<f64> = match mode {
                    ProbeMode::Softmax => {
                        let target = enc.single[s].ok_or_else(|| {
                            Error::Data("softmax probe needs exactly one label per sample".into())
                        })?;
                        softmax_ce(&z, target)?.1
                    }
                    ProbeMode::Multilabel => z.iter().zip(&enc.targets[s]).map(|(&zc, &t)| sigmoid_bce(zc, t).1).collect(),
                };
                for (c, &d) in dz.iter().enumerate() {
                    gb[c] += d * scale;
                    for (g, &xi) in gw[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                        *g += d * xi * scale;
                    }
                }
            }
            w.iter_mut().zip(&gw).for_each(|(p, g)| *p -= lr * g);
            b.iter_mut().zip(&gb).for_each(|(p, g)| *p -= lr * g);
        }
    }
    if w.iter().chain(&b).any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("probe weights diverged at learning rate {lr}")));
    }
    Ok((w, b))
}

fn to_probe(object: &str, mode: ProbeMode, classes: &[String], dim: usize, w: &[f64], b: &[f64]) -> Result<LinearProbe> {
    LinearProbe::new(
        object.to_string(),
        mode,
        classes.to_vec(),
        StoredMatrix::new(classes.len(), dim, w.iter().map(|&v| v as f32).collect())?,
        b.iter().map(|&v| v as f32).collect(),
    )
}

/// Trains one probe per learning rate on the training split and keeps the
/// one with the best validation accuracy (first in grid order on ties).
/// Without validation samples, training accuracy decides.
pub fn train_probe(ds: &EmbeddingDataset, object: &str, modality: Modality, cfg: &ProbeConfig) -> Result<TrainedProbe> {
    cfg.validate()?;
    let all = filter_for_object(ds, object)?;
    let mode = resolve_mode(&all, cfg.mode);
    let classes: Vec<String> = all.iter().flat_map(|e| e.labels.iter().cloned()).collect::<BTreeSet<_>>().into_iter().collect();
    let in_split = |s: Split| -> Vec<ProbeExample> {
        all.iter().filter(|e| ds.samples()[e.index].split == s).cloned().collect()
    };
    let train = in_split(Split::Train);
    if train.is_empty() {
        return Err(Error::Data(format!("no training samples contain '{object}'")));
    }
    let val = in_split(Split::Val);
    let degenerate = train.iter().map(|e| &e.labels).collect::<BTreeSet<_>>().len() == 1;
    if degenerate {
        log::warn!("probe for '{object}': training split has a single label");
    }
    let enc = encode(ds, modality, &train, &classes);
    let dim = ds.dim();
    let mut best: Option<(f64, TrainedProbe)> = None;
    for &lr in &cfg.learning_rates {
        let (w, b) = match fit(&enc, mode, classes.len(), dim, lr, cfg) {
            Ok(p) => p,
            Err(Error::Numerical(msg)) => {
                log::warn!("{msg}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let probe = to_probe(object, mode, &classes, dim, &w, &b)?;
        let val_accuracy = (!val.is_empty()).then(|| accuracy_on(&probe, ds, modality, &val));
        let score = val_accuracy.unwrap_or_else(|| accuracy_on(&probe, ds, modality, &train));
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((
                score,
                TrainedProbe {
                    probe,
                    learning_rate: lr,
                    val_accuracy,
                    degenerate,
                },
            ));
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| Error::Numerical(format!("every learning rate diverged for '{object}'")))
}

/// Accuracy of `probe` on the samples of `split` that contain its object.
/// Softmax probes score argmax; multilabel probes need the exact attribute
/// set at threshold 0.5.
pub fn eval_probe(probe: &LinearProbe, ds: &EmbeddingDataset, modality: Modality, split: Option<Split>) -> Result<f64> {
    if probe.dim() != ds.dim() {
        return Err(Error::Shape(format!("probe has dim {}, dataset has dim {}", probe.dim(), ds.dim())));
    }
    let examples: Vec<ProbeExample> = filter_for_object(ds, &probe.object)?
        .into_iter()
        .filter(|e| split.is_none_or(|s| ds.samples()[e.index].split == s))
        .collect();
    if examples.is_empty() {
        let name = split.map_or("dataset", Split::as_str);
        return Err(Error::Data(format!("no samples with '{}' in {name}", probe.object)));
    }
    Ok(accuracy_on(probe, ds, modality, &examples))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectResult {
    pub object: String,
    pub mode: ProbeMode,
    pub classes: usize,
    pub learning_rate: f64,
    pub degenerate: bool,
    /// Accuracy per split; splits without the object are absent.
    pub accuracy: BTreeMap<Split, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSweep {
    pub modality: Modality,
    pub config: ProbeConfig,
    pub objects: Vec<ObjectResult>,
    /// Mean over objects that have samples in the split.
    pub mean: BTreeMap<Split, f64>,
}

fn evaluate_object(ds: &EmbeddingDataset, object: &str, modality: Modality, cfg: &ProbeConfig) -> Result<ObjectResult> {
    let trained = train_probe(ds, object, modality, cfg)?;
    let mut accuracy = BTreeMap::new();
    for s in Split::ALL {
        match eval_probe(&trained.probe, ds, modality, Some(s)) {
            Ok(a) => {
                accuracy.insert(s, a);
            }
            Err(Error::Data(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(ObjectResult {
        object: object.to_string(),
        mode: trained.probe.mode,
        classes: trained.probe.classes.len(),
        learning_rate: trained.learning_rate,
        degenerate: trained.degenerate,
        accuracy,
    })
}

fn mean_per_split(results: &[ObjectResult]) -> BTreeMap<Split, f64> {
    Split::ALL
        .iter()
        .filter_map(|&s| {
            let v: Vec<f64> = results.iter().filter_map(|r| r.accuracy.get(&s).copied()).collect();
            (!v.is_empty()).then(|| (s, v.iter().sum::<f64>() / v.len() as f64))
        })
        .collect()
}

/// Trains and evaluates one probe per object, in parallel.
pub fn probe_sweep(ds: &EmbeddingDataset, objects: &[String], modality: Modality, cfg: &ProbeConfig) -> Result<ProbeSweep> {
    if objects.is_empty() {
        return Err(Error::Usage("probe sweep needs at least one object".into()));
    }
    let results: Vec<ObjectResult> = objects
        .par_iter()
        .map(|o| evaluate_object(ds, o, modality, cfg))
        .collect::<Result<_>>()?;
    Ok(ProbeSweep {
        modality,
        config: cfg.clone(),
        mean: mean_per_split(&results),
        objects: results,
    })
}

/// Mean accuracy of softmax probes with standard-normal weights and zero
/// bias, averaged over `draws` independent draws.
pub fn random_probe_accuracy(
    ds: &EmbeddingDataset,
    object: &str,
    modality: Modality,
    split: Option<Split>,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let all = filter_for_object(ds, object)?;
    let classes: Vec<String> = all.iter().flat_map(|e| e.labels.iter().cloned()).collect::<BTreeSet<_>>().into_iter().collect();
    let d = ds.dim();
    let mut total = 0.0;
    for k in 0..draws.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, k as u64));
        let w: Vec<f32> = (0..classes.len() * d).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
        let probe = LinearProbe::new(
            object.to_string(),
            ProbeMode::Softmax,
            classes.clone(),
            StoredMatrix::new(classes.len(), d, w)?,
            vec![0.0; classes.len()],
        )?;
        total += eval_probe(&probe, ds, modality, split)?;
    }
    Ok(total / draws.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{SampleRecord, Slot, StructuredCaption};

    fn ds_from(captions: &[(&[(&str, &str)], Split)], emb: Vec<Vec<f32>>) -> EmbeddingDataset {
        let d = emb[0].len();
        let samples = captions
            .iter()
            .enumerate()
            .map(|(i, (slots, split))| {
                let c = StructuredCaption::new("", slots.iter().map(|(a, o)| Slot::new(*a, *o)).collect());
                SampleRecord {
                    id: format!("s{i}"),
                    caption_text: crate::captions::render(&c, crate::captions::ArticleMode::None),
                    combo_id: c.combo_id(),
                    structured: Some(c),
                    token_tags: None,
                    split: *split,
                }
            })
            .collect();
        let m = StoredMatrix::from_rows(&emb, d).unwrap();
        EmbeddingDataset::new(samples, m.clone(), m, None).unwrap()
    }

    #[test]
    fn filter_reads_slots() {
        let ds = ds_from(
            &[
                (&[("red", "cube"), ("blue", "sphere")], Split::Train),
                (&[("green", "sphere"), ("red", "cube")], Split::Train),
            ],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        );
        let f = filter_for_object(&ds, "cube").unwrap();
        assert_eq!(f.iter().map(|e| e.index).collect::<Vec<_>>(), vec![0, 1]);
        assert!(f.iter().all(|e| e.labels == vec!["red".to_string()]));
        assert!(filter_for_object(&ds, "pyramid").is_err());
    }

    #[test]
    fn repeated_object_gives_multiset_and_multilabel() {
        let ds = ds_from(
            &[(&[("blue", "cube"), ("blue", "cube"), ("green", "sphere")], Split::Train)],
            vec![vec![1.0, 0.0]],
        );
        let f = filter_for_object(&ds, "cube").unwrap();
        assert_eq!(f[0].labels, vec!["blue".to_string(), "blue".to_string()]);
        assert_eq!(resolve_mode(&f, None), ProbeMode::Multilabel);
    }

    #[test]
    fn zero_probe_scores_class_zero_frequency() {
        // class 0 ("blue") is the majority: 3 of 5
        let caps: Vec<(&[(&str, &str)], Split)> = vec![
            (&[("blue", "cube")], Split::Test),
            (&[("blue", "cube")], Split::Test),
            (&[("blue", "cube")], Split::Test),
            (&[("red", "cube")], Split::Test),
            (&[("green", "cube")], Split::Test),
        ];
        let ds = ds_from(&caps, (0..5).map(|i| vec![i as f32, 1.0]).collect());
        let probe = LinearProbe::new(
            "cube",
            ProbeMode::Softmax,
            vec!["blue".into(), "green".into(), "red".into()],
            StoredMatrix::new(3, 2, vec![0.0; 6]).unwrap(),
            vec![0.0; 3],
        )
        .unwrap();
        assert_eq!(eval_probe(&probe, &ds, Modality::Image, None).unwrap(), 0.6);
    }

    #[test]
    fn constant_label_is_degenerate_but_perfect() {
        let caps: Vec<(&[(&str, &str)], Split)> =
            (0..6).map(|i| (&[("red", "cube")][..], if i < 4 { Split::Train } else { Split::Test })).collect();
        let ds = ds_from(&caps, (0..6).map(|i| vec![i as f32 * 0.1, 1.0]).collect());
        let t = train_probe(&ds, "cube", Modality::Image, &ProbeConfig::default()).unwrap();
        assert!(t.degenerate);
        assert_eq!(eval_probe(&t.probe, &ds, Modality::Image, Some(Split::Test)).unwrap(), 1.0);
    }

    #[test]
    fn separable_data_is_memorized() {
        let mut caps: Vec<(&[(&str, &str)], Split)> = Vec::new();
        let mut emb = Vec::new();
        for i in 0..40 {
            if i % 2 == 0 {
                caps.push((&[("red", "cube")], Split::Train));
                emb.push(vec![1.0 + (i as f32) * 0.01, 0.2]);
            } else {
                caps.push((&[("blue", "cube")], Split::Train));
                emb.push(vec![-1.0 - (i as f32) * 0.01, 0.2]);
            }
        }
        let ds = ds_from(&caps, emb);
        let before = ds.image_embeddings().clone();
        let t = train_probe(&ds, "cube", Modality::Image, &ProbeConfig::default()).unwrap();
        assert_eq!(eval_probe(&t.probe, &ds, Modality::Image, Some(Split::Train)).unwrap(), 1.0);
        assert_eq!(ds.image_embeddings(), &before);
    }
}
