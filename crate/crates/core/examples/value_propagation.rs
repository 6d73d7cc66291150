//! Max-value propagation from one source around a wall.
use compgen::gridworld::{CELLS, GRID};
use compgen::planner::propagate_values;
use diffcore::{Tape, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut v0 = vec![0.0; CELLS];
    v0[GRID + 1] = 1.0;
    let mut phi = vec![0.9; CELLS];
    for r in 0..GRID - 2 {
        phi[r * GRID + 4] = 0.0;
    }
    let mut t = Tape::new();
    let v0 = t.constant(Tensor::new(vec![1, CELLS], v0)?);
    let phi = t.constant(Tensor::new(vec![1, CELLS], phi)?);
    let values = propagate_values(&mut t, v0, phi, 14)?;
    let last = t.value(*values.last().expect("k > 0")).data();
    for r in 0..GRID {
        let row: Vec<String> = (0..GRID).map(|c| format!("{:.2}", last[r * GRID + c])).collect();
        println!("{}", row.join(" "));
    }
    Ok(())
}
