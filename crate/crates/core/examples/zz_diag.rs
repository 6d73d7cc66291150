use compgen::dataset::*;
use compgen::discrim::*;
use compgen::goalid::*;
use compgen::gridworld::*;
use std::path::Path;

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let dir = Path::new(&a[1]);
    let ck = if a[2] == "final" { None } else { Some(a[2].as_str()) };
    let n: usize = a[3].parse().unwrap();
    let (_, sys, p) = load_goalid(dir, ck).unwrap();
    let b = build_dataset(&DatasetConfig::with_n_per_goal(n)).unwrap();
    println!("alpha {:.3} beta {:.3}", p.get(sys.model.alpha).data()[0], p.get(sys.model.beta).data()[0]);
    for (name, split) in [("v_id", &b.v_id), ("v_ood", &b.v_ood)] {
        let f = evaluate_f1(&sys.model, &p, split).unwrap();
        let mut sorted = f.clone();
        sorted.sort_by(f64::total_cmp);
        println!("{name}: mean {:.4} iqm {:.4} p10 {:.3} p25 {:.3} p50 {:.3}", f.iter().sum::<f64>() / f.len() as f64, compgen::eval::iqm(&f).unwrap(), sorted[f.len() / 10], sorted[f.len() / 4], sorted[f.len() / 2]);
        let grids: Vec<&FactoredGrid> = split.iter().map(|t| t.final_state()).collect();
        let goals: Vec<_> = split.iter().map(|t| t.goal).collect();
        let maps = sys.model.predict(&p, &grids, &goals).unwrap();
        // empty wall same-color same-type other agent goal
        let mut acc = [(0.0, 0usize); 7];
        let mut mass = [0.0; 7];
        for ((g, m), goal) in grids.iter().zip(&maps).zip(&goals) {
            let truth = g.goal_cells(*goal);
            for c in 0..64 {
                let k = if truth[c] {
                    6
                } else {
                    match g.kind(c) {
                        EMPTY => 0,
                        WALL => 1,
                        AGENT => 5,
                        kind if g.color(c) == goal.color => { let _ = kind; 2 }
                        kind if kind == goal.kind => 3,
                        _ => 4,
                    }
                };
                acc[k].0 += m[c];
                acc[k].1 += 1;
                mass[k] += m[c];
            }
        }
        print!("{name}: ");
        for (k, (s, n)) in acc.iter().enumerate() {
            if *n > 0 {
                print!("[{} mean {:.4} tot/ep {:.3}] ", ["empty", "wall", "samecol", "sametype", "other", "agent", "goal"][k], s / *n as f64, mass[k] / grids.len() as f64);
            }
        }
        println!();
    }
    for m in interaction_matrix(&sys.model, &p) {
        println!("factor {}: {:?}", m.factor, m.values);
        for (w, row) in VOCAB.iter().zip(&m.entries) {
            print!("{w:>7}");
            for v in row {
                print!(" {v:+.2}");
            }
            println!();
        }
    }
}
