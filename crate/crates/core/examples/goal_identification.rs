//! Train the sparse factored goal model briefly and print what it grounded.
use compgen::dataset::{build_dataset, DatasetConfig};
use compgen::discrim::{train_goalid, DiscriminatorConfig};
use compgen::eval::{correlation_report, format_table};
use compgen::goalid::{GoalIdConfig, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(1500);
    let bundle = build_dataset(&DatasetConfig::with_n_per_goal(60))?;
    let cfg = DiscriminatorConfig {
        steps,
        batch: 256,
        eval_period: (steps / 4).max(1),
        ..Default::default()
    };
    let r = train_goalid(
        &bundle.train,
        &bundle.v_id,
        &bundle.v_ood,
        GoalIdConfig::new(Variant::SparseFactored),
        &cfg,
        None,
    )?;
    for row in &r.log {
        println!("step {:5}  loss {:.4}  f1 v_ID {:.3}  v_OOD {:.3}", row.step, row.loss.total, row.f1_vid, row.f1_vood);
    }
    let rep = correlation_report(&r.system.model, &r.params)?;
    let rows: Vec<Vec<String>> = rep
        .words
        .iter()
        .map(|w| vec![w.word.to_string(), w.expected.to_string(), w.predicted.to_string()])
        .collect();
    print!("{}", format_table(&["word", "expected", "argmax"], &rows));
    println!("off-target mass {:.3}", rep.off_target_mass);
    Ok(())
}
