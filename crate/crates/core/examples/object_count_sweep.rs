//! Probe accuracy as captions mention more objects.

use labalign::captions::{ComboRules, SplitRatios};
use labalign::datamodel::{Modality, Split};
use labalign::probes::{dataset_objects, probe_sweep, ProbeConfig};
use labalign::synth::{gen_dataset, SynthConfig};

fn main() -> labalign::Result<()> {
    for m in [2, 4, 6, 8, 10] {
        let mut cfg = SynthConfig::default();
        cfg.m = m;
        cfg.rules = ComboRules::MULTISET;
        cfg.sample_combos = Some(300);
        cfg.n_per_combo = 16;
        cfg.ratios = SplitRatios { train: 0.6, val: 0.2, test: 0.2 };
        cfg.group_negative_orbits = false;
        let ds = gen_dataset(&cfg)?;
        let sweep = probe_sweep(&ds, &dataset_objects(&ds), Modality::Image, &ProbeConfig::default())?;
        println!("m = {m:>2}: {} samples, test accuracy {:.3}", ds.len(), sweep.mean[&Split::Test]);
    }
    Ok(())
}
