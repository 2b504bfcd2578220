//! Generate a small synthetic dataset, write it to disk and read it back.

use labalign::datamodel::{load_dataset, save_dataset, Split};
use labalign::synth::{gen_dataset, SynthConfig};

fn main() -> labalign::Result<()> {
    let mut cfg = SynthConfig::default();
    cfg.n_per_combo = 2;
    cfg.oracle.dim = 16;
    let ds = gen_dataset(&cfg)?;

    let dir = std::env::temp_dir().join("labalign-dataset-io");
    let manifest = save_dataset(&ds, &dir)?;
    let back = load_dataset(&manifest)?;
    assert_eq!(back.samples(), ds.samples());
    assert_eq!(back.image_embeddings(), ds.image_embeddings());

    println!("wrote {} samples of dim {} to {}", back.len(), back.dim(), dir.display());
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("  {:<5} {}", split.as_str(), back.indices(Some(split)).len());
    }
    for s in back.samples().iter().take(3) {
        println!("  {} {:?} [{}]", s.id, s.caption_text, s.combo_id);
    }
    Ok(())
}
