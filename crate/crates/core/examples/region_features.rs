//! Region features from the toy detector, written as an RVQF file.
//!
//! cargo run --release --example region_features [out.rvqf]

use regionvqa::data::{generate, render, SyntheticSpec};
use regionvqa::region::rvqf::{read_rvqf, write_rvqf};
use regionvqa::region::{Detector, DetectorConfig};

fn main() -> regionvqa::Result<()> {
    let spec = SyntheticSpec {
        train_images: 1,
        val_images: 1,
        ..SyntheticSpec::default()
    };
    let (train, _) = generate(&spec)?;
    let ex = &train[0];
    let image = render::<f32>(&ex.image);
    let cands = ex.candidates.iter().map(|c| c.to_bbox()).collect::<Result<Vec<_>, _>>()?;

    let det = Detector::new(DetectorConfig::toy())?;
    let store = det.init_params::<f32>(0);
    let out = det.extract(&store, &image, &cands)?;
    println!("{} candidates -> {} regions x {} ({:?})", cands.len(), out.regions.len(), out.regions.dim(), out.status);
    for b in &out.regions.boxes {
        println!("  [{:5.1} {:5.1} {:5.1} {:5.1}] class {} p={:.3}", b.x1, b.y1, b.x2, b.y2, b.category, b.score);
    }

    let mut bytes = Vec::new();
    write_rvqf(&mut bytes, &out.regions)?;
    assert_eq!(read_rvqf(&bytes[..])?.features(), out.regions.features());
    if let Some(path) = std::env::args().nth(1) {
        std::fs::write(&path, &bytes)?;
        println!("wrote {} bytes to {path}", bytes.len());
    }
    Ok(())
}
