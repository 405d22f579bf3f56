//! Per-category suppression and RoIAlign on a hand-made feature map.

use regionvqa::numerics::Tensor;
use regionvqa::region::{nms_per_category, roi_align, BBox};

fn scored(x1: f32, y1: f32, x2: f32, y2: f32, score: f32, category: u32) -> BBox {
    BBox {
        score,
        category,
        ..BBox::region(x1, y1, x2, y2).unwrap()
    }
}

fn main() -> regionvqa::Result<()> {
    let boxes = [
        scored(0.0, 0.0, 10.0, 10.0, 0.9, 0),
        scored(1.0, 1.0, 11.0, 11.0, 0.8, 0),
        scored(1.0, 1.0, 11.0, 11.0, 0.7, 1),
        scored(20.0, 20.0, 30.0, 30.0, 0.6, 0),
    ];
    for thr in [0.3, 0.5, 0.7] {
        println!("iou {thr}: keep {:?}", nms_per_category(&boxes, thr));
    }

    // 8x8 map at stride 4 holding x + 2y at each cell centre.
    let (h, w, stride) = (8, 8, 4.0);
    let mut data = Vec::new();
    for r in 0..h {
        for c in 0..w {
            data.push((c as f64 + 0.5) * stride + 2.0 * (r as f64 + 0.5) * stride);
        }
    }
    let level = Tensor::new(&[1, h, w], data)?;
    let b = BBox::region(4.0, 6.0, 20.0, 18.0)?;
    let pooled = roi_align(&level, &b, (2, 2), 2, 1.0 / stride)?;
    println!("pooled {:?}", pooled.data());
    println!("bin centres give {:?}", [8.0 + 18.0, 16.0 + 18.0, 8.0 + 30.0, 16.0 + 30.0]);
    Ok(())
}
