//! Train two answer models on synthetic questions, evaluate each and
//! their probability-averaging ensemble, and round-trip a checkpoint.

use regionvqa::data::SyntheticSpec;
use regionvqa::pipeline::{overfit_setup, overfit_train_config};
use regionvqa::train::{evaluate, evaluate_ensemble, render_table, train, Member, TableRow, VqaModel};

fn main() -> regionvqa::Result<()> {
    let (model, samples) = overfit_setup(&SyntheticSpec::default(), 0)?;
    let (fit, held_out) = samples.split_at(48);
    let mut stores = Vec::new();
    let mut rows = Vec::new();
    for seed in [1, 2] {
        let cfg = regionvqa::train::TrainConfig {
            seed,
            max_epochs: 60,
            stop_at_accuracy: None,
            ..overfit_train_config()
        };
        let out = train(&model, model.init_params(seed), fit, &cfg)?;
        println!("seed {seed}: loss {:.4} -> {:.4}", out.epoch_losses[0], out.epoch_losses.last().unwrap());
        rows.push(row(&model, format!("seed {seed}"), evaluate(&model, &out.store, held_out)?));
        stores.push(out.store);
    }
    let members: Vec<Member<'_, f32>> = stores
        .iter()
        .map(|store| Member {
            model: &model,
            store,
            samples: held_out,
        })
        .collect();
    rows.push(row(&model, "Ensemble (2 models)".into(), evaluate_ensemble(&members)?));
    println!("{}", render_table(&rows));

    let dir = std::env::temp_dir().join("regionvqa-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.rvqw");
    model.save(&path, &stores[0], &Default::default())?;
    let (loaded, store, _) = VqaModel::load(&path)?;
    println!("reloaded {}: {:?}", path.display(), evaluate(&loaded, &store, held_out)?.overall);
    Ok(())
}

fn row(model: &VqaModel, backbone: String, report: regionvqa::train::eval::EvalReport) -> TableRow {
    TableRow {
        split: "held-out".into(),
        backbone,
        fpn_dim: None,
        attribute: None,
        language: Some(model.language_name().to_string()),
        report,
    }
}
