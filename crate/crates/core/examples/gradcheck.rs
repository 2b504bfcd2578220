//! Finite-difference check of the alignment loss gradients.

use labalign::align::{gradcheck, BatchMode};

fn main() -> labalign::Result<()> {
    for mode in [BatchMode::Sb, BatchMode::Hnb] {
        for seed in 0..3 {
            let r = gradcheck(8, 4, mode, seed, 1e-5)?;
            println!(
                "{mode:?} seed {seed}: transform {:.2e}, temperature {:.2e}",
                r.max_rel_error_transform, r.max_rel_error_temperature
            );
        }
    }
    Ok(())
}
