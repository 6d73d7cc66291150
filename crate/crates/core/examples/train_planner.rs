//! Train a small value-propagation planner on top of a briefly trained goal
//! model, then roll it out on held-out seeds.
use compgen::dataset::{build_dataset, subsample, DatasetConfig};
use compgen::discrim::{train_goalid, DiscriminatorConfig};
use compgen::goalid::{GoalIdConfig, Variant};
use compgen::planner::{rollout, spread_seeds, train_planner, GoalSource, PlannerConfig, Validation};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bundle = build_dataset(&DatasetConfig::with_n_per_goal(60))?;
    let dcfg = DiscriminatorConfig {
        steps: 1500,
        batch: 256,
        eval_period: 1500,
        ..Default::default()
    };
    let g = train_goalid(&bundle.train, &bundle.v_id, &bundle.v_ood, GoalIdConfig::new(Variant::SparseFactored), &dcfg, None)?;
    let goals = GoalSource {
        model: &g.system.model,
        params: &g.params,
    };
    let env = bundle.config.effective_env();
    let val = Validation {
        v_id: &bundle.v_id,
        v_ood: &bundle.v_ood,
        env: &env,
    };
    let cfg = PlannerConfig {
        steps: 600,
        eval_period: 200,
        eval_seeds: 24,
        width: 16,
        blocks: 2,
        ..Default::default()
    };
    let train = subsample(&bundle.train, 20)?;
    let p = train_planner(&train, goals, &val, &cfg, None)?;
    for row in &p.log {
        println!("step {:4}  loss {:.4}  success v_ID {:.2}  v_OOD {:.2}", row.step, row.loss, row.success_vid, row.success_vood);
    }
    let seeds = spread_seeds(&bundle.v_ood, 48);
    let rep = rollout(goals, &p.net, &p.params, &seeds, &env)?;
    println!("held-out success {:.2} on {} seeds", rep.rate(), seeds.len());
    Ok(())
}
