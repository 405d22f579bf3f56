//! Bilinear attention over 6 regions and a 5-token question.

use regionvqa::ban::{Ban, BanConfig};
use regionvqa::numerics::{Graph, ParamStore};

fn main() -> regionvqa::Result<()> {
    let cfg = BanConfig {
        glimpses: 2,
        ..BanConfig::new(8, 6, 10, 4)
    };
    let ban = Ban::new(cfg)?;
    let store = ban.init_params::<f64>(1);
    let mut inputs = ParamStore::<f64>::new();
    inputs.init_normal("v", &[6, 8], 1.0, 2);
    inputs.init_normal("q", &[5, 6], 1.0, 3);
    // Last slot is padding.
    let mask = [true, true, true, true, false];

    let mut g = Graph::new();
    let v = g.input(inputs.get("v").unwrap().clone());
    let q = g.input(inputs.get("q").unwrap().clone());
    let out = ban.forward(&mut g, &store, v, q, &mask)?;
    for (i, &m) in out.maps.iter().enumerate() {
        let a = g.value(m);
        println!("glimpse {i}: map {:?}, total mass {:.6}", a.shape(), a.data().iter().sum::<f64>());
        for row in a.data().chunks(5) {
            println!("  {}", row.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" "));
        }
    }
    let logits = ban.answer_logits(&mut g, &store, out.fused)?;
    println!("logits {:?}", g.value(logits).data());
    Ok(())
}
