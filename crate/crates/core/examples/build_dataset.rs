//! Generate the smallest dataset and save it to a directory.
use compgen::dataset::{build_dataset, group_by_goal, save, DatasetConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/demo-data".into());
    let bundle = build_dataset(&DatasetConfig::with_n_per_goal(60))?;
    let m = &bundle.manifest;
    println!(
        "train {} v_id {} v_ood {} from {} seeds",
        m.train_count, m.v_id_count, m.v_ood_count, m.seeds_scanned
    );
    for (goal, idx) in group_by_goal(&bundle.v_ood).into_iter().take(3) {
        let lens: Vec<usize> = idx.iter().map(|&i| bundle.v_ood[i].len()).collect();
        let mean = lens.iter().sum::<usize>() as f64 / lens.len() as f64;
        println!("held-out goal {goal}: {} demos, mean length {mean:.1}", lens.len());
    }
    save(&bundle, std::path::Path::new(&out))?;
    println!("saved to {out}");
    Ok(())
}
