use labalign::align::{labclip_loss, labclip_scores, train_alignment, AlignTrainConfig, BatchMode};
use labalign::datamodel::{
    AlignmentModel, EmbeddingDataset, Modality, NegativeSet, SampleRecord, Split, StoredMatrix,
};
use labalign::eval::{binding_accuracy, evaluate, modality_gap, recall_at_k, EvalConfig, RecallPool};
use labalign::numerics::DenseMatrix;
use labalign::probes::{dataset_objects, eval_probe, filter_for_object, probe_sweep, train_probe, ProbeConfig};
use labalign::synth::{gen_dataset, random_orthogonal, CrossModalTransform, SynthConfig};
use proptest::prelude::*;

fn dataset(n: usize, d: usize, values: &[f32], captions: &[u8], order: Option<&[usize]>) -> EmbeddingDataset {
    let idx: Vec<usize> = order.map_or_else(|| (0..n).collect(), |o| o.to_vec());
    let pick = |base: usize| -> Vec<f32> {
        idx.iter().flat_map(|&i| values[base + i * d..base + (i + 1) * d].iter().copied()).collect()
    };
    let samples = idx
        .iter()
        .map(|&i| SampleRecord {
            id: format!("s{i}"),
            caption_text: format!("caption {}", captions[i]),
            structured: None,
            token_tags: None,
            combo_id: format!("c{}", captions[i]),
            split: Split::Test,
        })
        .collect();
    EmbeddingDataset::new(
        samples,
        StoredMatrix::new(n, d, pick(0)).unwrap(),
        StoredMatrix::new(n, d, pick(n * d)).unwrap(),
        Some(NegativeSet {
            embeddings: StoredMatrix::new(n, d, pick(2 * n * d)).unwrap(),
            valid: vec![true; n],
        }),
    )
    .unwrap()
}

fn arb_dataset() -> impl Strategy<Value = (usize, usize, Vec<f32>, Vec<u8>)> {
    (2usize..12, 2usize..6).prop_flat_map(|(n, d)| {
        (
            Just(n),
            Just(d),
            prop::collection::vec(prop_oneof![-1.0f32..-0.1, 0.1f32..1.0], 3 * n * d),
            prop::collection::vec(0u8..5, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identity_metrics_ignore_sample_order((n, d, values, caps) in arb_dataset(), seed in any::<u64>()) {
        let mut order: Vec<usize> = (0..n).collect();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let a = dataset(n, d, &values, &caps, None);
        let b = dataset(n, d, &values, &caps, Some(&order));
        let cfg = EvalConfig { splits: vec![Split::Test], ..EvalConfig::default() };
        let ra = evaluate(&a, None, &cfg).unwrap();
        let rb = evaluate(&b, None, &cfg).unwrap();
        prop_assert_eq!(
            ra.splits[&Split::Test].binding_accuracy.unwrap().accuracy,
            rb.splits[&Split::Test].binding_accuracy.unwrap().accuracy
        );
        prop_assert_eq!(&ra.splits[&Split::Test].recall_at_k, &rb.splits[&Split::Test].recall_at_k);
        let (ga, gb) = (ra.modality_gap.unwrap(), rb.modality_gap.unwrap());
        prop_assert!((ga.before - gb.before).abs() < 1e-12);
        let (sa, sb) = (ra.simdist.unwrap(), rb.simdist.unwrap());
        prop_assert_eq!(sa.t2t.before.counts, sb.t2t.before.counts);
    }

    #[test]
    fn binding_outcomes_partition((n, d, values, caps) in arb_dataset()) {
        let ds = dataset(n, d, &values, &caps, None);
        let b = binding_accuracy(&ds, None, None).unwrap();
        let wins = (b.accuracy * n as f64).round();
        let ties = (b.tie_rate * n as f64).round();
        let losses = (b.loss_rate * n as f64).round();
        prop_assert_eq!(wins + ties + losses, n as f64);
        prop_assert!((0.0..=1.0).contains(&b.accuracy));
    }

    #[test]
    fn recall_is_monotone_in_k((n, d, values, caps) in arb_dataset()) {
        let ds = dataset(n, d, &values, &caps, None);
        let ks: Vec<usize> = (1..=6).collect();
        let r = recall_at_k(&ds, None, Some(Split::Test), &ks, RecallPool::Split).unwrap();
        for w in ks.windows(2) {
            prop_assert!(r[&w[0]] <= r[&w[1]]);
        }
        let pool = caps.iter().collect::<std::collections::BTreeSet<_>>().len();
        let full = recall_at_k(&ds, None, Some(Split::Test), &[pool], RecallPool::Split).unwrap();
        prop_assert_eq!(full[&pool], 1.0);
    }

    #[test]
    fn gap_is_invariant_under_common_rotation((n, d, values, caps) in arb_dataset(), seed in any::<u64>()) {
        let ds = dataset(n, d, &values, &caps, None);
        let q = random_orthogonal(d, seed);
        let img = ds.image_embeddings().to_dense().matmul_nt(&q).unwrap();
        let txt = ds.text_embeddings().to_dense().matmul_nt(&q).unwrap();
        // compare in f64 to avoid the f32 storage rounding
        let gap = |x: &DenseMatrix, y: &DenseMatrix| {
            let unit = |m: &DenseMatrix| labalign::numerics::l2_normalize_rows(m).unwrap();
            let (x, y) = (unit(x), unit(y));
            let mean = |m: &DenseMatrix| -> Vec<f64> {
                (0..m.cols()).map(|j| (0..m.rows()).map(|i| m.get(i, j)).sum::<f64>() / m.rows() as f64).collect()
            };
            let (mx, my) = (mean(&x), mean(&y));
            mx.iter().zip(&my).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        let base = modality_gap(&ds, None, None, true).unwrap().before;
        let direct = gap(&ds.image_embeddings().to_dense(), &ds.text_embeddings().to_dense());
        prop_assert!((base - direct).abs() < 1e-10);
        prop_assert!((gap(&img, &txt) - direct).abs() < 1e-10);
    }

    #[test]
    fn identity_model_equals_plain_cosine((n, d, values, caps) in arb_dataset()) {
        let ds = dataset(n, d, &values, &caps, None);
        let cfg = EvalConfig { splits: vec![Split::Test], ..EvalConfig::default() };
        let a = evaluate(&ds, None, &cfg).unwrap();
        let b = evaluate(&ds, Some(&AlignmentModel::identity(d)), &cfg).unwrap();
        prop_assert_eq!(a.splits, b.splits);
        prop_assert_eq!(a.modality_gap, b.modality_gap);
        prop_assert_eq!(a.simdist, b.simdist);
    }

    #[test]
    fn loss_is_non_negative_and_finite(seed in any::<u64>(), b in 2usize..6, d in 2usize..6, hnb in any::<bool>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut m = |r: usize, c: usize| DenseMatrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(0.1..1.0)).collect()).unwrap();
        let (img, pos, neg) = (m(b, d), m(b, d), m(b, d));
        let s = labclip_scores(&DenseMatrix::identity(d), 0.0, &img, &pos, hnb.then_some(&neg), true).unwrap();
        let out = labclip_loss(&s).unwrap();
        prop_assert!(out.loss.is_finite() && out.loss >= 0.0);
        prop_assert!(out.grad_transform.is_finite());
    }
}

fn small_fixture() -> SynthConfig {
    let mut cfg = SynthConfig::default();
    cfg.n_per_combo = 4;
    cfg.oracle.dim = 32;
    cfg
}

#[test]
fn zero_epochs_returns_identity() {
    let ds = gen_dataset(&small_fixture()).unwrap();
    for mode in [BatchMode::Sb, BatchMode::Hnb] {
        let cfg = AlignTrainConfig { mode, epochs: 0, ..AlignTrainConfig::default() };
        let out = train_alignment(&ds, &cfg).unwrap();
        assert!(out.model.is_identity());
        assert_eq!(out.model.log_temperature, 0.0);
        assert!(out.log.is_empty());
        assert_eq!(
            binding_accuracy(&ds, Some(&out.model), Some(Split::Test)).unwrap(),
            binding_accuracy(&ds, None, Some(Split::Test)).unwrap()
        );
    }
}

#[test]
fn training_is_reproducible_and_leaves_embeddings_alone() {
    let ds = gen_dataset(&small_fixture()).unwrap();
    let before = (ds.image_embeddings().clone(), ds.text_embeddings().clone());
    let cfg = AlignTrainConfig { epochs: 2, batch_size: 64, ..AlignTrainConfig::default() };
    let a = train_alignment(&ds, &cfg).unwrap();
    let b = train_alignment(&ds, &cfg).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.log, b.log);
    assert_eq!((ds.image_embeddings().clone(), ds.text_embeddings().clone()), before);
}

#[test]
fn identity_transform_fixture_is_already_aligned() {
    let mut cfg = small_fixture();
    cfg.oracle.cross_modal_transform = CrossModalTransform::Identity;
    let ds = gen_dataset(&cfg).unwrap();
    assert!(binding_accuracy(&ds, None, Some(Split::Test)).unwrap().accuracy >= 0.95);
}

/// Nearest class mean over the training split, an independent check that
/// attribute labels are linearly separable in the embeddings.
fn nearest_class_mean_accuracy(ds: &EmbeddingDataset, object: &str, modality: Modality) -> f64 {
    let examples = filter_for_object(ds, object).unwrap();
    let emb = ds.embeddings(modality);
    let mut sums: std::collections::BTreeMap<&str, (Vec<f64>, usize)> = Default::default();
    for e in examples.iter().filter(|e| ds.samples()[e.index].split == Split::Train) {
        let entry = sums.entry(e.labels[0].as_str()).or_insert((vec![0.0; ds.dim()], 0));
        entry.0.iter_mut().zip(emb.row(e.index)).for_each(|(s, &v)| *s += v as f64);
        entry.1 += 1;
    }
    let test: Vec<_> = examples.iter().filter(|e| ds.samples()[e.index].split == Split::Test).collect();
    let hits = test
        .iter()
        .filter(|e| {
            let x = emb.row(e.index);
            let best = sums
                .iter()
                .map(|(label, (s, c))| {
                    let dist: f64 = s.iter().zip(x).map(|(m, &v)| (m / *c as f64 - v as f64).powi(2)).sum();
                    (dist, *label)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap();
            best.1 == e.labels[0]
        })
        .count();
    hits as f64 / test.len() as f64
}

#[test]
fn binding_probes_agree_with_nearest_class_mean() {
    let ds = gen_dataset(&SynthConfig::default()).unwrap();
    for modality in [Modality::Image, Modality::Text] {
        for o in dataset_objects(&ds) {
            assert!(nearest_class_mean_accuracy(&ds, &o, modality) >= 0.9, "{o} {modality:?}");
        }
        let sweep = probe_sweep(&ds, &dataset_objects(&ds), modality, &ProbeConfig::default()).unwrap();
        assert!(sweep.mean[&Split::Test] >= 0.95);
    }
}

#[test]
fn probes_are_reproducible() {
    let ds = gen_dataset(&small_fixture()).unwrap();
    let cfg = ProbeConfig { epochs: 5, ..ProbeConfig::default() };
    let a = train_probe(&ds, "sphere", Modality::Text, &cfg).unwrap();
    let b = train_probe(&ds, "sphere", Modality::Text, &cfg).unwrap();
    assert_eq!(a.probe, b.probe);
    assert_eq!(
        eval_probe(&a.probe, &ds, Modality::Text, Some(Split::Test)).unwrap(),
        eval_probe(&b.probe, &ds, Modality::Text, Some(Split::Test)).unwrap()
    );
}
