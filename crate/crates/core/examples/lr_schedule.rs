//! Cosine decay shared by the two learning-rate groups.

use regionvqa::train::{cosine_lr, TrainConfig};

fn main() -> regionvqa::Result<()> {
    let cfg = TrainConfig::default();
    let total = 20;
    println!("step   base        language");
    for step in (0..=total).step_by(4) {
        let base = cosine_lr(step, total, cfg.base_lr, 0.0)?;
        let lang = cosine_lr(step, total, cfg.language_lr, 0.0)?;
        println!("{step:>4}   {base:.3e}   {lang:.3e}");
    }
    Ok(())
}
