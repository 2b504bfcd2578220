//! Linear probes recover which attribute belongs to which object when
//! embeddings bind pairs, but not from a bag of words.

use labalign::datamodel::{Modality, Split};
use labalign::probes::{dataset_objects, probe_sweep, ProbeConfig};
use labalign::synth::{gen_dataset, OracleMode, SynthConfig};

fn main() -> labalign::Result<()> {
    for mode in [OracleMode::Binding, OracleMode::Bow] {
        let mut cfg = SynthConfig::default();
        cfg.oracle.mode = mode;
        let ds = gen_dataset(&cfg)?;
        let objects = dataset_objects(&ds);
        for modality in [Modality::Image, Modality::Text] {
            let sweep = probe_sweep(&ds, &objects, modality, &ProbeConfig::default())?;
            println!("{mode:?} {modality:?}: test accuracy {:.3}", sweep.mean[&Split::Test]);
            for r in &sweep.objects {
                println!("    {:<10} lr {:<6} {:.3}", r.object, r.learning_rate, r.accuracy[&Split::Test]);
            }
        }
    }
    Ok(())
}
