//! Ground-truth datasets from a synthetic embedding oracle.
//!
//! The oracle stands in for a pair of frozen encoders whose binding
//! structure is known exactly:
//!
//! * **binding** mode embeds a caption as the normalized sum of one random
//!   unit vector per `(attribute, object)` pair, so which attribute belongs to
//!   which object is linearly recoverable.
//! * **bow** mode sums independent attribute vectors and object vectors, so
//!   the pairing is absent by construction.
//!
//! Text embeddings additionally pass through a fixed cross-modal transform
//! `W` before noise is added. With `W` a random rotation, cosine matching
//! between modalities is at chance while each modality alone still carries
//! the binding, and `A = W^T` is a linear fix.
//!
//! Image noise is drawn per sample (each render differs). Text noise is a
//! function of the caption string, so equal captions embed identically, as a
//! deterministic text encoder would.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::captions::{
    enumerate_combinations, permute_attributes, render, sample_combinations, split_by_group,
    ArticleMode, ComboRules, SplitRatios, Vocabulary,
};
use crate::datamodel::{
    combo_id, EmbeddingDataset, Modality, NegativeSet, SampleRecord, Slot, Split, StoredMatrix,
    StructuredCaption,
};
use crate::error::{Error, Result};
use crate::numerics::{dot, DenseMatrix};

pub const MIN_ORACLE_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleMode {
    Binding,
    Bow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossModalTransform {
    Identity,
    RandomOrthogonal,
    /// Random orthogonal and skew-symmetric: every vector is mapped to an
    /// orthogonal direction.
    RandomQuarterTurn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub dim: usize,
    pub mode: OracleMode,
    pub noise_sigma: f64,
    pub cross_modal_transform: CrossModalTransform,
    pub transform_seed: u64,
    /// Seeds the concept vectors and the text noise.
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            mode: OracleMode::Binding,
            noise_sigma: 0.05,
            cross_modal_transform: CrossModalTransform::RandomOrthogonal,
            transform_seed: 1,
            seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < MIN_ORACLE_DIM {
            return Err(Error::Usage(format!(
                "oracle dimension must be at least {MIN_ORACLE_DIM}, got {}",
                self.dim
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Usage(format!("bad noise_sigma {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// 64-bit FNV-1a; stable across platforms and toolchains.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from two inputs.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    splitmix64(a ^ splitmix64(b))
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v = gaussian_vec(rng, dim);
    let n = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Orthogonal factor of the QR decomposition of a seeded Gaussian matrix,
/// with the sign convention that `R` has a positive diagonal.
pub fn random_orthogonal(dim: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DenseMatrix::from_vec(dim, dim, gaussian_vec(&mut rng, dim * dim)).expect("square");
    // modified Gram-Schmidt on columns, two passes for stability
    let mut cols: Vec<Vec<f64>> = (0..dim).map(|j| (0..dim).map(|i| g.get(i, j)).collect()).collect();
    for j in 0..dim {
        for _ in 0..2 {
            for k in 0..j {
                let (done, rest) = cols.split_at_mut(j);
                let r = dot(&done[k], &rest[0]);
                rest[0].iter_mut().zip(&done[k]).for_each(|(x, q)| *x -= r * q);
            }
        }
        let n = dot(&cols[j], &cols[j]).sqrt();
        cols[j].iter_mut().for_each(|x| *x /= n);
    }
    let mut q = DenseMatrix::zeros(dim, dim);
    for (j, c) in cols.iter().enumerate() {
        for (i, &v) in c.iter().enumerate() {
            q.set(i, j, v);
        }
    }
    q
}

/// `Q J Q^T` where `Q` is [`random_orthogonal`] and `J` rotates each
/// coordinate plane `(2k, 2k+1)` by a quarter turn. The result is orthogonal
/// with `W^T = -W`, so `<x, W x> = 0` for every `x`. Needs an even dimension.
pub fn random_quarter_turn(dim: usize, seed: u64) -> Result<DenseMatrix> {
    if dim % 2 != 0 {
        return Err(Error::Usage(format!("quarter-turn transform needs an even dimension, got {dim}")));
    }
    let q = random_orthogonal(dim, seed);
    // (Q J)[:, 2k] = Q[:, 2k+1], (Q J)[:, 2k+1] = -Q[:, 2k]
    let mut qj = DenseMatrix::zeros(dim, dim);
    for i in 0..dim {
        for k in (0..dim).step_by(2) {
            qj.set(i, k, q.get(i, k + 1));
            qj.set(i, k + 1, -q.get(i, k));
        }
    }
    qj.matmul_nt(&q)
}

/// Concept vectors plus the cross-modal transform.
#[derive(Debug, Clone)]
pub struct Oracle {
    cfg: OracleConfig,
    vocab: Vocabulary,
    /// Binding mode: one vector per (attribute, object) pair, object-major.
    pair_vectors: Vec<Vec<f64>>,
    /// Bow mode: independent attribute and object vectors.
    attr_vectors: Vec<Vec<f64>>,
    obj_vectors: Vec<Vec<f64>>,
    transform: DenseMatrix,
    attr_index: HashMap<String, usize>,
    obj_index: HashMap<String, usize>,
}

impl Oracle {
    pub fn new(vocab: &Vocabulary, cfg: &OracleConfig) -> Result<Self> {
        cfg.validate()?;
        vocab.validate()?;
        let d = cfg.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (mut pair_vectors, mut attr_vectors, mut obj_vectors) = (Vec::new(), Vec::new(), Vec::new());
        match cfg.mode {
            OracleMode::Binding => {
                for _ in 0..vocab.objects.len() * vocab.attributes.len() {
                    pair_vectors.push(unit_vec(&mut rng, d));
                }
            }
            OracleMode::Bow => {
                for _ in &vocab.attributes {
                    attr_vectors.push(unit_vec(&mut rng, d));
                }
                for _ in &vocab.objects {
                    obj_vectors.push(unit_vec(&mut rng, d));
                }
            }
        }
        let transform = match cfg.cross_modal_transform {
            CrossModalTransform::Identity => DenseMatrix::identity(d),
            CrossModalTransform::RandomOrthogonal => random_orthogonal(d, cfg.transform_seed),
            CrossModalTransform::RandomQuarterTurn => random_quarter_turn(d, cfg.transform_seed)?,
        };
        let index = |v: &[String]| v.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Ok(Self {
            cfg: cfg.clone(),
            vocab: vocab.clone(),
            pair_vectors,
            attr_vectors,
            obj_vectors,
            transform,
            attr_index: index(&vocab.attributes),
            obj_index: index(&vocab.objects),
        })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.cfg
    }

    pub fn transform(&self) -> &DenseMatrix {
        &self.transform
    }

    fn lookup(&self, slot: &Slot) -> Result<(usize, usize)> {
        let a = *self
            .attr_index
            .get(&slot.attr)
            .ok_or_else(|| Error::Data(format!("attribute '{}' not in vocabulary", slot.attr)))?;
        let o = *self
            .obj_index
            .get(&slot.obj)
            .ok_or_else(|| Error::Data(format!("object '{}' not in vocabulary", slot.obj)))?;
        Ok((a, o))
    }

    /// Noise-free concept sum before the cross-modal transform. Terms are
    /// added in a canonical order so the result is bitwise independent of
    /// slot order.
    pub fn concept_sum(&self, c: &StructuredCaption) -> Result<Vec<f64>> {
        let n_attr = self.vocab.attributes.len();
        let mut terms: Vec<(u8, usize)> = Vec::with_capacity(2 * c.slots.len());
        for slot in &c.slots {
            let (a, o) = self.lookup(slot)?;
            match self.cfg.mode {
                OracleMode::Binding => terms.push((0, o * n_attr + a)),
                OracleMode::Bow => {
                    terms.push((1, a));
                    terms.push((2, o));
                }
            }
        }
        terms.sort_unstable();
        let mut s = vec![0.0; self.cfg.dim];
        for (kind, i) in terms {
            let v = match kind {
                0 => &self.pair_vectors[i],
                1 => &self.attr_vectors[i],
                _ => &self.obj_vectors[i],
            };
            s.iter_mut().zip(v).for_each(|(x, y)| *x += y);
        }
        Ok(s)
    }

    /// Embeds `c` for `modality` using Gaussian noise seeded by `noise_seed`.
    /// The result has unit norm.
    pub fn embed(&self, c: &StructuredCaption, modality: Modality, noise_seed: u64) -> Result<Vec<f64>> {
        let s = self.concept_sum(c)?;
        let mut v = match modality {
            Modality::Image => s,
            Modality::Text => (0..self.cfg.dim).map(|i| dot(self.transform.row(i), &s)).collect(),
        };
        if self.cfg.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            for x in v.iter_mut() {
                *x += self.cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let n = dot(&v, &v).sqrt();
        if n == 0.0 {
            return Err(Error::Numerical("oracle produced a zero embedding".into()));
        }
        v.iter_mut().for_each(|x| *x /= n);
        Ok(v)
    }

    /// Text embedding keyed by the rendered caption string.
    pub fn embed_text(&self, c: &StructuredCaption, caption_text: &str) -> Result<Vec<f64>> {
        self.embed(c, Modality::Text, text_noise_seed(self.cfg.seed, caption_text))
    }

    /// Echo of the configuration and the concept vectors, for the manifest.
    pub fn manifest_section(&self) -> serde_json::Value {
        serde_json::json!({
            "config": self.cfg,
            "vocabulary": self.vocab,
            "pair_vectors": self.pair_vectors,
            "attribute_vectors": self.attr_vectors,
            "object_vectors": self.obj_vectors,
        })
    }
}

pub fn text_noise_seed(oracle_seed: u64, caption_text: &str) -> u64 {
    mix_seed(oracle_seed ^ 0x7465_7874, stable_hash(caption_text))
}

pub fn image_noise_seed(dataset_seed: u64, sample_index: usize) -> u64 {
    mix_seed(dataset_seed ^ 0x696d_6167, sample_index as u64)
}

/// Seed of the permutation applied to a caption; a function of the caption
/// string so repeated captions share one negative.
pub fn negative_seed(dataset_seed: u64, caption_text: &str) -> u64 {
    mix_seed(dataset_seed ^ 0x6e65_6761, stable_hash(caption_text))
}

/// Full generator configuration (the `gen-synthetic` config file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub vocabulary: Vocabulary,
    /// Objects per caption.
    pub m: usize,
    pub rules: ComboRules,
    pub n_per_combo: usize,
    /// Draw this many random combinations instead of enumerating all.
    pub sample_combos: Option<usize>,
    pub prefix: String,
    pub article_mode: ArticleMode,
    pub ratios: SplitRatios,
    /// Keep each combination in the same split as the combinations its
    /// hard negatives come from.
    pub group_negative_orbits: bool,
    pub seed: u64,
    pub oracle: OracleConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocabulary: Vocabulary::clevr(),
            m: 2,
            rules: ComboRules::CLEVR_PAIRS,
            n_per_combo: 10,
            sample_combos: None,
            prefix: String::new(),
            article_mode: ArticleMode::None,
            ratios: SplitRatios::default(),
            group_negative_orbits: true,
            seed: 0,
            oracle: OracleConfig::default(),
        }
    }
}

/// Caption stubs: `n_per_combo` samples per combination.
///
/// Each combination gets one seeded random slot order shared by all of its
/// samples, so a combination maps to a single caption string.
pub fn gen_captions(cfg: &SynthConfig) -> Result<Vec<SampleRecord>> {
    if cfg.n_per_combo == 0 {
        return Err(Error::Usage("n_per_combo must be positive".into()));
    }
    let combos = match cfg.sample_combos {
        Some(k) => sample_combinations(&cfg.vocabulary, cfg.m, cfg.rules, k, mix_seed(cfg.seed, 1))?,
        None => enumerate_combinations(&cfg.vocabulary, cfg.m, cfg.rules)?,
    };
    if combos.is_empty() {
        return Err(Error::Data("no combinations to generate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 2));
    let mut out = Vec::with_capacity(combos.len() * cfg.n_per_combo);
    for mut slots in combos {
        if cfg.rules.order_insensitive {
            slots.shuffle(&mut rng);
        }
        let c = StructuredCaption::new(cfg.prefix.clone(), slots);
        let text = render(&c, cfg.article_mode);
        let id = combo_id(&c.slots);
        for _ in 0..cfg.n_per_combo {
            out.push(SampleRecord {
                id: format!("s{:06}", out.len()),
                caption_text: text.clone(),
                structured: Some(c.clone()),
                token_tags: None,
                combo_id: id.clone(),
                split: Split::Train,
            });
        }
    }
    Ok(out)
}

/// Generates a complete dataset: captions, combination splits, image and
/// text embeddings, and permuted-caption negatives.
pub fn gen_dataset(cfg: &SynthConfig) -> Result<EmbeddingDataset> {
    let oracle = Oracle::new(&cfg.vocabulary, &cfg.oracle)?;
    let samples = gen_captions(cfg)?;
    let n = samples.len();
    let d = cfg.oracle.dim;

    let rows: Vec<(Vec<f32>, Vec<f32>, Option<(String, Vec<f32>)>)> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let c = s.structured.as_ref().expect("generated captions are structured");
            let img = oracle.embed(c, Modality::Image, image_noise_seed(cfg.seed, i))?;
            let txt = oracle.embed_text(c, &s.caption_text)?;
            let neg = match permute_attributes(c, negative_seed(cfg.seed, &s.caption_text)) {
                Ok(p) => Some((p.combo_id(), oracle.embed_text(&p, &render(&p, cfg.article_mode))?)),
                Err(Error::NoValidNegative(_)) => None,
                Err(e) => return Err(e),
            };
            let f = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
            Ok((f(img), f(txt), neg.map(|(id, v)| (id, f(v)))))
        })
        .collect::<Result<_>>()?;

    let mut img = Vec::with_capacity(n * d);
    let mut txt = Vec::with_capacity(n * d);
    let mut neg = Vec::with_capacity(n * d);
    let mut valid = Vec::with_capacity(n);
    let mut orbits = Orbits::default();
    for ((i, t, ng), s) in rows.into_iter().zip(&samples) {
        img.extend(i);
        txt.extend(t);
        valid.push(ng.is_some());
        match ng {
            Some((neg_combo, v)) => {
                orbits.union(&s.combo_id, &neg_combo);
                neg.extend(v);
            }
            None => {
                orbits.union(&s.combo_id, &s.combo_id);
                neg.extend(std::iter::repeat_n(0.0, d));
            }
        }
    }
    let groups: Vec<String> = if cfg.group_negative_orbits {
        samples.iter().map(|s| orbits.root(&s.combo_id)).collect()
    } else {
        samples.iter().map(|s| s.combo_id.clone()).collect()
    };
    let ds = EmbeddingDataset::new(
        samples,
        StoredMatrix::new(n, d, img)?,
        StoredMatrix::new(n, d, txt)?,
        Some(NegativeSet {
            embeddings: StoredMatrix::new(n, d, neg)?,
            valid,
        }),
    )?
    .with_source("synthetic oracle")
    .with_oracle(serde_json::json!({
        "generator": cfg,
        "vectors": oracle.manifest_section(),
    }));
    split_by_group(&ds, &groups, cfg.ratios, mix_seed(cfg.seed, 3))
}

/// Union-find over combination ids; the root of a set is its smallest id.
#[derive(Default)]
struct Orbits {
    parent: HashMap<String, String>,
}

impl Orbits {
    fn root(&mut self, id: &str) -> String {
        let mut cur = id.to_string();
        loop {
            let p = self.parent.entry(cur.clone()).or_insert_with(|| cur.clone()).clone();
            if p == cur {
                break;
            }
            cur = p;
        }
        self.parent.insert(id.to_string(), cur.clone());
        cur
    }

    fn union(&mut self, a: &str, b: &str) {
        let (ra, rb) = (self.root(a), self.root(b));
        match ra.cmp(&rb) {
            std::cmp::Ordering::Less => {
                self.parent.insert(rb, ra);
            }
            std::cmp::Ordering::Greater => {
                self.parent.insert(ra, rb);
            }
            std::cmp::Ordering::Equal => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cosine_matrix;

    fn cap(slots: &[(&str, &str)]) -> StructuredCaption {
        StructuredCaption::new("", slots.iter().map(|(a, o)| Slot::new(*a, *o)).collect())
    }

    fn oracle(mode: OracleMode, noise: f64, w: CrossModalTransform) -> Oracle {
        let cfg = OracleConfig {
            mode,
            noise_sigma: noise,
            cross_modal_transform: w,
            ..OracleConfig::default()
        };
        Oracle::new(&Vocabulary::clevr(), &cfg).unwrap()
    }

    #[test]
    fn orthogonal_transform_is_orthogonal_and_deterministic() {
        let q = random_orthogonal(16, 4);
        let qtq = q.transpose().matmul(&q).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((qtq.get(i, j) - e).abs() < 1e-12);
            }
        }
        assert_eq!(q, random_orthogonal(16, 4));
        assert_ne!(q, random_orthogonal(16, 5));
    }

    #[test]
    fn noiseless_identity_transform_matches_modalities() {
        let o = oracle(OracleMode::Binding, 0.0, CrossModalTransform::Identity);
        let c = cap(&[("red", "cube"), ("blue", "sphere")]);
        assert_eq!(
            o.embed(&c, Modality::Image, 1).unwrap(),
            o.embed(&c, Modality::Text, 2).unwrap()
        );
    }

    #[test]
    fn binding_mode_distinguishes_swapped_pairs() {
        let o = oracle(OracleMode::Binding, 0.0, CrossModalTransform::Identity);
        let a = o.embed(&cap(&[("red", "cube"), ("blue", "sphere")]), Modality::Image, 0).unwrap();
        let b = o.embed(&cap(&[("blue", "cube"), ("red", "sphere")]), Modality::Image, 0).unwrap();
        let m = cosine_matrix(
            &DenseMatrix::from_rows(&[a]).unwrap(),
            &DenseMatrix::from_rows(&[b]).unwrap(),
        )
        .unwrap();
        assert!(m.get(0, 0) < 0.99);
    }

    #[test]
    fn bow_mode_ignores_pairing() {
        let o = oracle(OracleMode::Bow, 0.0, CrossModalTransform::RandomOrthogonal);
        for m in [Modality::Image, Modality::Text] {
            let a = o.embed(&cap(&[("red", "cube"), ("blue", "sphere")]), m, 0).unwrap();
            let b = o.embed(&cap(&[("blue", "cube"), ("red", "sphere")]), m, 0).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn embedding_is_deterministic() {
        let o = oracle(OracleMode::Binding, 0.05, CrossModalTransform::RandomOrthogonal);
        let c = cap(&[("gray", "cylinder"), ("cyan", "cube")]);
        let a = o.embed(&c, Modality::Text, 77).unwrap();
        let b = o.embed(&c, Modality::Text, 77).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn inverse_transform_recovers_self_similarity() {
        let o = oracle(OracleMode::Binding, 0.0, CrossModalTransform::RandomOrthogonal);
        let c = cap(&[("red", "cube"), ("blue", "sphere")]);
        let img = o.embed(&c, Modality::Image, 0).unwrap();
        let txt = o.embed(&c, Modality::Text, 0).unwrap();
        let wt = o.transform().transpose();
        let back: Vec<f64> = (0..64).map(|i| dot(wt.row(i), &txt)).collect();
        assert!((dot(&img, &back) - 1.0).abs() < 1e-12);
        assert!(dot(&img, &txt).abs() < 0.9);
    }

    #[test]
    fn small_dimension_rejected() {
        let cfg = OracleConfig { dim: 4, ..OracleConfig::default() };
        assert!(Oracle::new(&Vocabulary::clevr(), &cfg).is_err());
    }

    #[test]
    fn caption_counts() {
        let cfg = SynthConfig { n_per_combo: 1, ..SynthConfig::default() };
        let caps = gen_captions(&cfg).unwrap();
        let ids: std::collections::HashSet<_> = caps.iter().map(|s| s.combo_id.clone()).collect();
        assert_eq!(ids.len(), 192);

        let cfg = SynthConfig {
            vocabulary: Vocabulary::animals(),
            rules: ComboRules::DISTINCT_PAIRS,
            n_per_combo: 1,
            ..SynthConfig::default()
        };
        let ids: std::collections::HashSet<_> =
            gen_captions(&cfg).unwrap().into_iter().map(|s| s.combo_id).collect();
        assert_eq!(ids.len(), 3696);

        let cfg = SynthConfig { m: 1, n_per_combo: 1, ..SynthConfig::default() };
        assert_eq!(gen_captions(&cfg).unwrap().len(), 3 * 8);
    }

    #[test]
    fn generated_dataset_is_consistent() {
        let cfg = SynthConfig { n_per_combo: 2, ..SynthConfig::default() };
        let ds = gen_dataset(&cfg).unwrap();
        assert_eq!(ds.len(), 384);
        let neg = ds.negatives().unwrap();
        let oracle = Oracle::new(&cfg.vocabulary, &cfg.oracle).unwrap();
        for (i, s) in ds.samples().iter().enumerate() {
            let c = s.structured.as_ref().unwrap();
            assert_eq!(render(c, ArticleMode::None), s.caption_text);
            let same_attr = c.slots[0].attr == c.slots[1].attr;
            assert_eq!(neg.valid[i], !same_attr);
            if neg.valid[i] {
                let p = permute_attributes(c, negative_seed(cfg.seed, &s.caption_text)).unwrap();
                let expect: Vec<f32> = oracle
                    .embed_text(&p, &render(&p, ArticleMode::None))
                    .unwrap()
                    .into_iter()
                    .map(|v| v as f32)
                    .collect();
                assert_eq!(neg.embeddings.row(i), &expect[..]);
            }
        }
        // combo-disjoint splits
        let mut owner = HashMap::new();
        for s in ds.samples() {
            assert_eq!(*owner.entry(s.combo_id.clone()).or_insert(s.split), s.split);
        }
        assert_eq!(gen_dataset(&cfg).unwrap(), ds);
    }
}
