//! The full toy ablation: detector variants, GRU vs transformer encoder,
//! and the ensemble of every row. Takes about half a minute in release.

use regionvqa::data::SyntheticSpec;
use regionvqa::pipeline::{run_ablation, standard_settings, AblationConfig};
use regionvqa::train::render_table;

fn main() -> regionvqa::Result<()> {
    let spec = SyntheticSpec {
        train_images: 24,
        val_images: 12,
        ..SyntheticSpec::default()
    };
    let run = run_ablation(&AblationConfig::toy(spec), &standard_settings())?;
    println!("{}", render_table(&run.rows));
    Ok(())
}
