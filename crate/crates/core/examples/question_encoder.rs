//! Transformer and GRU question encoders.

use regionvqa::language::{encode_question, param_count, BertEncoder, EncoderConfig, GruConfig, GruEncoder};
use regionvqa::numerics::Graph;

fn main() -> regionvqa::Result<()> {
    for (name, cfg) in [("base", EncoderConfig::base()), ("large", EncoderConfig::large())] {
        println!("{name}: {} parameters", param_count(&cfg));
    }

    let cfg = EncoderConfig::toy(40, 16, 2, 4);
    let seq = encode_question(&[5, 9, 12, 7], &cfg)?;
    let bert = BertEncoder::new(cfg.clone())?;
    let store = bert.init_params::<f64>(0);
    let mut g = Graph::new();
    let out = bert.encode(&mut g, &store, &seq)?;
    println!("tokens {:?} -> states {:?}", seq.ids, g.shape(out.states));
    let att = g.value(out.attention[1][0]);
    println!("last layer, head 0, [CLS] row: {:?}", &att.data()[..seq.len()]);

    let gru = GruEncoder::new(GruConfig {
        hidden: 24,
        ..GruConfig::standard(40)
    })?;
    let gs = gru.init_params::<f64>(0);
    let mut g = Graph::new();
    let h = gru.encode(&mut g, &gs, &seq)?;
    println!("gru states {:?}", g.shape(h));
    Ok(())
}
