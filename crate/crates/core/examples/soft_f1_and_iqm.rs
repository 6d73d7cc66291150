//! Soft-F1 of a few hand-made goal maps and the bootstrap IQM interval.
use compgen::eval::{iqm_ci, soft_f1};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut truth = vec![false; 64];
    truth[27] = true;
    let mut scores = Vec::new();
    for sharpness in [0.5, 0.8, 0.95, 0.99] {
        let s: Vec<f64> = (0..64).map(|i| if i == 27 { sharpness } else { (1.0 - sharpness) / 8.0 }).collect();
        let f = soft_f1(&s, &truth)?;
        println!("peak {sharpness:.2}: precision {:.3} recall {:.3} f1 {:.3}", f.precision, f.recall, f.f1);
        scores.push(f.f1);
    }
    let ci = iqm_ci(&scores, 2000, 0.95, 0)?;
    println!("iqm {:.3} [{:.3}, {:.3}]", ci.iqm, ci.lo, ci.hi);
    Ok(())
}
