//! Reset one episode, plan it with the expert and replay the plan.
use compgen::expert::plan;
use compgen::gridworld::{encode_observation, reset, step, EnvConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(7);
    let mut state = reset(seed, &EnvConfig::default())?;
    println!("seed {seed}: {}", state.instruction().words().join(" "));
    println!("{}", encode_observation(&state).render());
    let actions = plan(&state)?;
    println!("plan: {actions:?}");
    for a in actions {
        let out = step(&state, a)?;
        state = out.state;
        if out.terminated {
            println!("reward {} after {} steps", out.reward, state.step_count);
        }
    }
    println!("{}", encode_observation(&state).render());
    Ok(())
}
