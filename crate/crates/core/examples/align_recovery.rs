//! Learn a linear map that undoes a hidden rotation between image and text
//! embeddings, then compare binding accuracy and recall before and after.

use labalign::align::{train_alignment, AlignTrainConfig, BatchMode};
use labalign::datamodel::Split;
use labalign::eval::{binding_accuracy, recall_at_k, RecallPool};
use labalign::synth::{gen_dataset, CrossModalTransform, SynthConfig};

fn main() -> labalign::Result<()> {
    let mut cfg = SynthConfig::default();
    cfg.oracle.cross_modal_transform = CrossModalTransform::RandomQuarterTurn;
    let ds = gen_dataset(&cfg)?;

    let before = binding_accuracy(&ds, None, Some(Split::Test))?;
    let r1 = recall_at_k(&ds, None, Some(Split::Test), &[1, 5], RecallPool::Dataset)?;
    println!("identity  binding {:.3}  R@1 {:.3}  R@5 {:.3}", before.accuracy, r1[&1], r1[&5]);

    for mode in [BatchMode::Sb, BatchMode::Hnb] {
        let out = train_alignment(&ds, &AlignTrainConfig { mode, ..Default::default() })?;
        if let Some(e) = &out.diverged {
            eprintln!("{mode:?} diverged: {e}");
        }
        let last = out.log.last().expect("at least one epoch");
        let acc = binding_accuracy(&ds, Some(&out.model), Some(Split::Test))?;
        let r = recall_at_k(&ds, Some(&out.model), Some(Split::Test), &[1, 5], RecallPool::Dataset)?;
        println!(
            "{:<9} binding {:.3}  R@1 {:.3}  R@5 {:.3}  loss {:.4}",
            format!("{mode:?}"), acc.accuracy, r[&1], r[&5], last.mean_loss
        );
    }
    Ok(())
}
