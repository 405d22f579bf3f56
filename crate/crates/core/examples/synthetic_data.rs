//! Generate a synthetic shapes dataset and print a few questions.
//!
//! cargo run --release --example synthetic_data [out_dir]

use regionvqa::data::{generate, write_dataset, SyntheticSpec};

fn main() -> regionvqa::Result<()> {
    let spec = SyntheticSpec {
        train_images: 4,
        val_images: 2,
        ..SyntheticSpec::default()
    };
    let (train, val) = generate(&spec)?;
    println!("{} train / {} val questions", train.len(), val.len());
    for ex in train.iter().take(6) {
        println!(
            "image {:>2} ({} objects, {} candidates) [{}] {:<28} -> {}",
            ex.image.id,
            ex.image.objects.len(),
            ex.candidates.len(),
            ex.qtype.tag(),
            ex.question_text,
            ex.answer
        );
    }
    if let Some(dir) = std::env::args().nth(1) {
        write_dataset(&spec, dir.as_ref())?;
        println!("wrote {dir}");
    }
    Ok(())
}
