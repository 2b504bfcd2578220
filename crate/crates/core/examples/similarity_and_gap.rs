//! Similarity histograms and the modality gap before and after alignment.

use labalign::align::{train_alignment, AlignTrainConfig};
use labalign::datamodel::Split;
use labalign::eval::{evaluate, render_table, EvalConfig, Histogram};
use labalign::synth::{gen_dataset, CrossModalTransform, SynthConfig};

fn sparkline(h: &Histogram) -> String {
    let max = h.counts.iter().copied().max().unwrap_or(0).max(1);
    h.counts
        .iter()
        .map(|&c| [' ', '.', ':', '-', '=', '#'][(c * 5).div_ceil(max) as usize])
        .collect()
}

fn main() -> labalign::Result<()> {
    let mut cfg = SynthConfig::default();
    cfg.oracle.cross_modal_transform = CrossModalTransform::RandomQuarterTurn;
    let ds = gen_dataset(&cfg)?;
    let model = train_alignment(&ds, &AlignTrainConfig::default())?.model;

    let report = evaluate(&ds, Some(&model), &EvalConfig { splits: vec![Split::Test], ..Default::default() })?;
    print!("{}", render_table(&report));

    let sd = report.simdist.as_ref().expect("simdist requested by default");
    for (name, d) in [("text-text", &sd.t2t), ("image-pos", &sd.i2t_positive), ("image-neg", &sd.i2t_negative)] {
        println!("{name:<10} before |{}| mean {:+.3}", sparkline(&d.before), d.before.mean);
        println!("{:<10} after  |{}| mean {:+.3}", "", sparkline(&d.after), d.after.mean);
    }
    Ok(())
}
