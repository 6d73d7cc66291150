//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero only if some criterion could not be evaluated.
//!
//! Long training runs are cached under `target/acceptance/<config hash>/`;
//! delete that directory to retrain from scratch. Set `CGC_ACCEPT_THREADS`
//! to train independent runs concurrently.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use compgen::cli::{best_checkpoint, pooled_f1};
use compgen::dataset::*;
use compgen::discrim::*;
use compgen::eval::{correlation_report, iqm, soft_f1};
use compgen::expert::plan;
use compgen::gridworld::*;
use compgen::goalid::{GoalIdConfig, Variant};
use compgen::nn::GridBatch;
use compgen::planner::*;
use compgen::rng::fnv1a;
use diffcore::gradcheck::check_piecewise_gradients;
use diffcore::{ParamStore, Tape, Tensor};

const GOALID_SEEDS: [u64; 3] = [0, 1, 2];

struct Line {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn line(id: &'static str, pass: bool, detail: impl Into<String>) -> Line {
    let l = Line { id, pass, detail: detail.into() };
    println!("{} {} {}", if l.pass { "PASS" } else { "FAIL" }, l.id, l.detail);
    l
}

fn cache_root() -> PathBuf {
    let target = std::env::var_os("CARGO_TARGET_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target"));
    target.join("acceptance")
}

fn keyed_dir<T: Serialize>(kind: &str, cfg: &T) -> PathBuf {
    let json = serde_json::to_string(cfg).expect("config serializes");
    cache_root().join(format!("{kind}-{:016x}", fnv1a(json.as_bytes())))
}

// ---------------------------------------------------------------- criterion 1

fn brute_force_propagation(v0: &[f64], phi: &[f64], k: usize) -> Vec<Vec<f64>> {
    let mut out = vec![v0.to_vec()];
    for _ in 0..k {
        let v = out.last().unwrap();
        let mut next = v.clone();
        for r in 0..GRID as i32 {
            for c in 0..GRID as i32 {
                let mut best = 0.0f64;
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (nr, nc) = (r + dr, c + dc);
                        if (dr, dc) != (0, 0) && (0..GRID as i32).contains(&nr) && (0..GRID as i32).contains(&nc) {
                            best = best.max(v[(nr * GRID as i32 + nc) as usize]);
                        }
                    }
                }
                let i = (r * GRID as i32 + c) as usize;
                next[i] = v[i].max(phi[i] * best);
            }
        }
        out.push(next);
    }
    out
}

fn pose_bfs(s: &EpisodeState) -> Option<usize> {
    let offs = [(-1i32, 0i32), (0, 1), (1, 0), (0, -1)];
    let key = |r: usize, c: usize, d: usize| (r * GRID + c) * 4 + d;
    let mut dist = vec![usize::MAX; CELLS * 4];
    let start = (s.agent.0, s.agent.1, s.direction as usize);
    dist[key(start.0, start.1, start.2)] = 0;
    let mut q = std::collections::VecDeque::from([start]);
    while let Some((r, c, d)) = q.pop_front() {
        let here = dist[key(r, c, d)];
        let (fr, fc) = ((r as i32 + offs[d].0) as usize, (c as i32 + offs[d].1) as usize);
        let front = s.grid[fr][fc];
        if front.kind == s.goal.kind && front.color == s.goal.color {
            return Some(here);
        }
        let fwd = if front.kind == EMPTY { (fr, fc, d) } else { (r, c, d) };
        for n in [(r, c, (d + 3) % 4), (r, c, (d + 1) % 4), fwd] {
            if dist[key(n.0, n.1, n.2)] == usize::MAX {
                dist[key(n.0, n.1, n.2)] = here + 1;
                q.push_back(n);
            }
        }
    }
    None
}

fn jitter_biases(p: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for id in p.ids().collect::<Vec<_>>() {
        let name = p.name(id).to_string();
        if name.ends_with(".b") || name.ends_with(".bias") {
            for v in p.get_mut(id).data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
}

fn correctness_core() -> Result<Line> {
    let t0 = Instant::now();
    let mut failures = Vec::new();
    let bundle = build_dataset(&DatasetConfig::with_n_per_goal(60))?;

    // gradient checks: goal map, L1, L_int and L_img through the joint loss
    let sampler = DiscriminatorSampler::new(&bundle.train)?;
    let tuples = sampler.sample_batch(&mut ChaCha8Rng::seed_from_u64(5), 8);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for variant in Variant::ALL {
        let mut p = ParamStore::new();
        let sys = GoalIdSystem::new(&mut p, 3, GoalIdConfig::new(variant), 4);
        jitter_biases(&mut p, &mut rng);
        let r = check_piecewise_gradients(&p, 1e-4, 12, 1e-5, |t, p| {
            Ok(discriminator_loss(t, p, &sys, &sampler, &tuples, false)?.0)
        })?;
        worst = worst.max(r.max_rel_error);
        if r.max_rel_error > 1e-4 || r.skipped * 10 > r.checked {
            failures.push(format!("{variant} gradcheck {r:?}"));
        }
    }
    // MVProp + Q-head with L_VIN, and the CNN head with cross-entropy
    let bc = BcSampler::new(&bundle.train[..6], 0.9)?;
    let samples = bc.sample_batch(&mut ChaCha8Rng::seed_from_u64(4), 3);
    for kind in [PolicyKind::Mvprop, PolicyKind::Cnn] {
        let cfg = PlannerConfig {
            kind,
            width: 6,
            blocks: 1,
            k: 4,
            ..Default::default()
        };
        let mut p = ParamStore::new();
        let net = PlannerNet::new(&mut p, &cfg);
        jitter_biases(&mut p, &mut rng);
        let v0 = p.add("v0", Tensor::new(vec![3, CELLS], (0..3 * CELLS).map(|_| rng.random::<f64>()).collect())?);
        let grids: Vec<&FactoredGrid> = samples.iter().map(|s| bc.state(s.state)).collect();
        let actions: Vec<u8> = samples.iter().map(|s| s.action).collect();
        let returns: Vec<f64> = samples.iter().map(|s| s.ret).collect();
        let r = check_piecewise_gradients(&p, 1e-4, 6, 1e-5, |t, p| {
            let batch = GridBatch::new(grids.iter().copied());
            let v = t.param(p, v0);
            let s = net.scores(t, p, &batch, v)?;
            match kind {
                PolicyKind::Mvprop => vin_loss(t, s, &actions, &returns, 0.7),
                PolicyKind::Cnn => cross_entropy(t, s, &actions),
            }
        })?;
        worst = worst.max(r.max_rel_error);
        if r.max_rel_error > 1e-4 || r.skipped * 5 > r.checked {
            failures.push(format!("{kind:?} gradcheck {r:?}"));
        }
    }

    // propagation against the scalar recursion
    let mut prng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let k = prng.random_range(1..=12);
        let v0: Vec<f64> = (0..CELLS).map(|_| if prng.random_bool(0.1) { prng.random() } else { 0.0 }).collect();
        let phi: Vec<f64> = (0..CELLS).map(|_| prng.random()).collect();
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![1, CELLS], v0.clone())?);
        let b = t.constant(Tensor::new(vec![1, CELLS], phi.clone())?);
        let got = propagate_values(&mut t, a, b, k)?;
        let want = brute_force_propagation(&v0, &phi, k);
        for (i, (g, w)) in got.iter().zip(&want).enumerate() {
            if t.value(*g).data() != &w[..] {
                failures.push(format!("propagation differs at step {i}"));
            }
            if i > 0 && t.value(*g).data().iter().zip(t.value(got[i - 1]).data()).any(|(x, y)| x < y) {
                failures.push("propagation not monotone".into());
            }
        }
    }

    // expert against BFS
    let env = EnvConfig::default();
    for seed in 0..500 {
        let s = reset(seed, &env)?;
        if Some(plan(&s)?.len()) != pose_bfs(&s).map(|d| d + 1) {
            failures.push(format!("expert plan length differs from BFS on seed {seed}"));
        }
    }

    // soft-F1 cases
    let mut truth = vec![false; CELLS];
    truth[10] = true;
    let onehot: Vec<f64> = truth.iter().map(|&b| b as u8 as f64).collect();
    let f_id = soft_f1(&onehot, &truth)?.f1;
    let f_zero = soft_f1(&[0.0; CELLS], &truth)?.f1;
    let f_half = soft_f1(&[0.5; CELLS], &truth)?.f1;
    if f_id != 1.0 || f_zero != 0.0 || (f_half - 1.0 / 33.0).abs() > 1e-12 {
        failures.push(format!("soft-F1 cases {f_id} {f_zero} {f_half}"));
    }

    // dataset invariants
    let split = &bundle.config.split;
    let mut ood = split.ood_combinations.clone();
    ood.sort();
    let mut named = vec![(2, BALL), (3, BOX), (1, KEY), (5, BALL), (6, BOX), (4, KEY)];
    named.sort();
    let seeds: std::collections::HashSet<u64> =
        bundle.train.iter().chain(&bundle.v_id).chain(&bundle.v_ood).map(|t| t.seed).collect();
    let checks = [
        (ood == named, "held-out combinations"),
        (split.id_goals().len() == 24 && split.ood_goals().len() == 12, "24/12 goal partition"),
        (bundle.v_id.len() == 24 * 20 && bundle.v_ood.len() == 12 * 40, "validation sizes"),
        (seeds.len() == bundle.train.len() + bundle.v_id.len() + bundle.v_ood.len(), "split disjointness"),
        (bundle.train.iter().chain(&bundle.v_id).all(|t| !split.is_ood(t.goal)), "ID splits hold ID goals"),
    ];
    for (ok, what) in checks {
        if !ok {
            failures.push(what.to_string());
        }
    }

    let secs = t0.elapsed().as_secs_f64();
    if secs > 120.0 {
        failures.push(format!("took {secs:.0}s"));
    }
    let detail = if failures.is_empty() {
        format!("gradcheck max rel err {worst:.1e}; propagation, BFS, soft-F1, dataset checks ok ({secs:.0}s)")
    } else {
        failures.join("; ")
    };
    Ok(line("1 correctness core", failures.is_empty(), detail))
}

// ------------------------------------------------------------ goal-id runs

#[derive(Serialize)]
struct GoalidKey<'a> {
    data: &'a DatasetConfig,
    model: &'a GoalIdConfig,
    training: &'a DiscriminatorConfig,
}

fn goalid_config(seed: u64) -> DiscriminatorConfig {
    DiscriminatorConfig {
        steps: 20_000,
        batch: 1024,
        seed,
        ..Default::default()
    }
}

/// Trains (or reuses) one goal model and returns its directory.
fn goalid_run(bundle: &DatasetBundle, variant: Variant, seed: u64) -> Result<PathBuf> {
    let model = GoalIdConfig::new(variant);
    let training = goalid_config(seed);
    let dir = keyed_dir(
        &format!("goalid-{variant}-s{seed}"),
        &GoalidKey {
            data: &bundle.config,
            model: &model,
            training: &training,
        },
    );
    if dir.join("goalid.json").is_file() {
        return Ok(dir);
    }
    let tmp = dir.with_extension("partial");
    let _ = fs::remove_dir_all(&tmp);
    let t0 = Instant::now();
    train_goalid(&bundle.train, &bundle.v_id, &bundle.v_ood, model, &training, Some(&tmp))
        .with_context(|| format!("training {variant} seed {seed}"))?;
    fs::rename(&tmp, &dir)?;
    eprintln!("trained {variant} seed {seed} in {:.0}s", t0.elapsed().as_secs_f64());
    Ok(dir)
}

fn train_all_goalid(bundle: &DatasetBundle) -> Result<Vec<(Variant, u64, PathBuf)>> {
    let jobs: Vec<(Variant, u64)> = Variant::ALL.iter().flat_map(|&v| GOALID_SEEDS.map(|s| (v, s))).collect();
    let threads: usize = std::env::var("CGC_ACCEPT_THREADS").ok().and_then(|s| s.parse().ok()).unwrap_or(1);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results = std::sync::Mutex::new(Vec::new());
    std::thread::scope(|sc| {
        for _ in 0..threads.max(1) {
            sc.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let Some(&(v, s)) = jobs.get(i) else { break };
                let r = goalid_run(bundle, v, s);
                results.lock().unwrap().push((i, v, s, r));
            });
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|r| r.0);
    results.into_iter().map(|(_, v, s, r)| r.map(|d| (v, s, d))).collect()
}

#[derive(Serialize, Deserialize)]
struct F1Summary {
    vid: f64,
    vood: f64,
}

fn pooled_iqm(dirs: &[PathBuf], bundle: &DatasetBundle) -> Result<F1Summary> {
    Ok(F1Summary {
        vid: iqm(&pooled_f1(dirs, &bundle.v_id)?)?,
        vood: iqm(&pooled_f1(dirs, &bundle.v_ood)?)?,
    })
}

fn goalid_ordering(bundle: &DatasetBundle, runs: &[(Variant, u64, PathBuf)]) -> Result<Line> {
    let dirs = |v: Variant| -> Vec<PathBuf> { runs.iter().filter(|r| r.0 == v).map(|r| r.2.clone()).collect() };
    let sf = pooled_iqm(&dirs(Variant::SparseFactored), bundle)?;
    let f = pooled_iqm(&dirs(Variant::Factored), bundle)?;
    let s = pooled_iqm(&dirs(Variant::Sparse), bundle)?;
    let pass = sf.vid >= 0.90
        && sf.vood >= 0.90
        && (0.4..=0.9).contains(&f.vood)
        && f.vood < sf.vood
        && s.vood <= 0.25;
    Ok(line(
        "2 goal-identification ordering",
        pass,
        format!(
            "IQM F1 v_ID/v_OOD: sparse-factored {:.3}/{:.3} (≥0.90/≥0.90), factored {:.3}/{:.3} (v_OOD in [0.4,0.9], < sf), sparse {:.3}/{:.3} (v_OOD ≤0.25)",
            sf.vid, sf.vood, f.vid, f.vood, s.vid, s.vood
        ),
    ))
}

fn symbol_grounding(runs: &[(Variant, u64, PathBuf)]) -> Result<Line> {
    let mut good = 0;
    let mut parts = Vec::new();
    for (_, seed, dir) in runs.iter().filter(|r| r.0 == Variant::SparseFactored) {
        let (manifest, _, _) = load_goalid(dir, None)?;
        let (_, sys, p) = load_goalid(dir, best_checkpoint(&manifest).as_deref())?;
        let rep = correlation_report(&sys.model, &p)?;
        if rep.correct() == 9 && rep.off_target_mass <= 0.15 {
            good += 1;
        }
        parts.push(format!("seed {seed}: {}/9 off-target {:.3}", rep.correct(), rep.off_target_mass));
    }
    Ok(line(
        "3 symbol grounding",
        good >= 2,
        format!("{} (need 9/9 and ≤0.15 in ≥2 seeds)", parts.join(", ")),
    ))
}

fn held_out_end_states(bundle: &DatasetBundle, n: usize) -> Vec<&FactoredGrid> {
    let all: Vec<&Trajectory> = bundle.v_id.iter().chain(&bundle.v_ood).collect();
    (0..n).map(|i| all[i * all.len() / n].final_state()).collect()
}

fn discriminator_behaviour(bundle: &DatasetBundle, runs: &[(Variant, u64, PathBuf)]) -> Result<Line> {
    let held: Vec<Trajectory> = bundle.v_id.iter().chain(&bundle.v_ood).cloned().collect();
    let sampler = DiscriminatorSampler::new(&held)?;
    let tuples = sampler.sample_batch(&mut ChaCha8Rng::seed_from_u64(17), 2000);
    let ends = held_out_end_states(bundle, 500);
    let mut pass = true;
    let mut parts = Vec::new();
    for (_, seed, dir) in runs.iter().filter(|r| r.0 == Variant::SparseFactored) {
        let (manifest, _, _) = load_goalid(dir, None)?;
        let (_, sys, p) = load_goalid(dir, best_checkpoint(&manifest).as_deref())?;
        let acc = mask_accuracy(&sys.mask, &p, &ends)?;
        let (pos, neg) = score_separation(&sys, &p, &sampler, &tuples)?;
        pass &= acc >= 0.95 && pos - neg >= 0.3;
        parts.push(format!("seed {seed}: mask {acc:.3} gap {:.3}", pos - neg));
    }
    Ok(line(
        "5 discriminator behaviour",
        pass,
        format!("{} (mask ≥0.95 on 500 held-out end states, gap ≥0.3)", parts.join(", ")),
    ))
}

// ------------------------------------------------------------- planner runs

#[derive(Serialize)]
struct PlannerKey<'a> {
    data: &'a DatasetConfig,
    goalid: String,
    planner: &'a PlannerConfig,
    n: usize,
}

#[derive(Serialize, Deserialize)]
struct Success {
    vid: f64,
    vood: f64,
}

const PLANNER_N: usize = 100;

fn planner_run(bundle: &DatasetBundle, goalid_dir: &Path, kind: PolicyKind) -> Result<Success> {
    let (manifest, _, _) = load_goalid(goalid_dir, None)?;
    let ckpt = best_checkpoint(&manifest);
    let (_, sys, gp) = load_goalid(goalid_dir, ckpt.as_deref())?;
    let cfg = PlannerConfig {
        kind,
        steps: 20_000,
        ..Default::default()
    };
    let dir = keyed_dir(
        &format!("planner-{}", kind.name()),
        &PlannerKey {
            data: &bundle.config,
            goalid: format!("{}:{}", goalid_dir.display(), ckpt.clone().unwrap_or_default()),
            planner: &cfg,
            n: PLANNER_N,
        },
    );
    let summary = dir.join("success.json");
    if summary.is_file() {
        return Ok(serde_json::from_slice(&fs::read(summary)?)?);
    }
    let goals = GoalSource {
        model: &sys.model,
        params: &gp,
    };
    let env = bundle.config.effective_env();
    let val = Validation {
        v_id: &bundle.v_id,
        v_ood: &bundle.v_ood,
        env: &env,
    };
    let train = subsample(&bundle.train, PLANNER_N)?;
    let pm = PlannerManifest {
        config: cfg.clone(),
        n_per_goal: PLANNER_N,
        goalid_dir: Some(goalid_dir.display().to_string()),
        goalid_checkpoint: ckpt,
    };
    let t0 = Instant::now();
    let r = train_planner(&train, goals, &val, &cfg, Some((&dir, pm)))?;
    let rate = |trajs: &[Trajectory]| -> Result<f64> {
        let seeds: Vec<u64> = trajs.iter().map(|t| t.seed).collect();
        Ok(rollout(goals, &r.net, &r.params, &seeds, &env)?.rate())
    };
    let s = Success {
        vid: rate(&bundle.v_id)?,
        vood: rate(&bundle.v_ood)?,
    };
    fs::write(&summary, serde_json::to_string_pretty(&s)?)?;
    eprintln!("trained {} planner in {:.0}s", kind.name(), t0.elapsed().as_secs_f64());
    Ok(s)
}

fn sample_efficiency(bundle: &DatasetBundle, runs: &[(Variant, u64, PathBuf)]) -> Result<Line> {
    let gdir = &runs.iter().find(|r| r.0 == Variant::SparseFactored && r.1 == 0).expect("seed 0 run").2;
    let mv = planner_run(bundle, gdir, PolicyKind::Mvprop)?;
    let cnn = planner_run(bundle, gdir, PolicyKind::Cnn)?;
    let pass = mv.vid >= 0.85 && mv.vood >= 0.80 && cnn.vood < mv.vood;
    Ok(line(
        "4 end-to-end sample efficiency",
        pass,
        format!(
            "N={PLANNER_N}: mvprop v_ID {:.3} (≥0.85) v_OOD {:.3} (≥0.80); cnn v_ID {:.3} v_OOD {:.3} (< mvprop)",
            mv.vid, mv.vood, cnn.vid, cnn.vood
        ),
    ))
}

// ------------------------------------------------------------ criterion 6

fn reproducibility(bundle: &DatasetBundle) -> Result<Line> {
    let train = subsample(&bundle.train, 100)?;
    let work = tempfile::tempdir()?;
    let goal_cfg = DiscriminatorConfig {
        steps: 300,
        batch: 256,
        eval_period: 100,
        seed: 4,
        ..Default::default()
    };
    let mut goal_csv = Vec::new();
    for run in 0..2 {
        let dir = work.path().join(format!("goalid{run}"));
        train_goalid(&train, &bundle.v_id, &bundle.v_ood, GoalIdConfig::new(Variant::SparseFactored), &goal_cfg, Some(&dir))?;
        goal_csv.push(fs::read(dir.join("metrics.csv"))?);
    }
    let (_, sys, gp) = load_goalid(&work.path().join("goalid0"), None)?;
    let goals = GoalSource {
        model: &sys.model,
        params: &gp,
    };
    let env = bundle.config.effective_env();
    let val = Validation {
        v_id: &bundle.v_id,
        v_ood: &bundle.v_ood,
        env: &env,
    };
    let cfg = PlannerConfig {
        steps: 200,
        eval_period: 100,
        eval_seeds: 16,
        seed: 4,
        ..Default::default()
    };
    let mut plan_csv = Vec::new();
    for run in 0..2 {
        let dir = work.path().join(format!("planner{run}"));
        let pm = PlannerManifest {
            config: cfg.clone(),
            n_per_goal: 100,
            goalid_dir: None,
            goalid_checkpoint: None,
        };
        train_planner(&train, goals, &val, &cfg, Some((&dir, pm)))?;
        plan_csv.push(fs::read(dir.join("metrics.csv"))?);
    }
    let same_goal = goal_csv[0] == goal_csv[1] && goal_csv[0].iter().filter(|&&b| b == b'\n').count() == 4;
    let same_plan = plan_csv[0] == plan_csv[1] && plan_csv[0].iter().filter(|&&b| b == b'\n').count() == 3;
    Ok(line(
        "6 reproducibility",
        same_goal && same_plan,
        format!("goal-id metrics identical: {same_goal}; planner metrics identical: {same_plan}"),
    ))
}

/// Large allocations are recycled instead of returned to the kernel; the
/// training loops otherwise spend a third of their time in page faults.
const MALLOC_TUNABLES: &str = "glibc.malloc.mmap_threshold=1073741824:glibc.malloc.trim_threshold=17179869184";

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if cfg!(target_os = "linux") && std::env::var_os("GLIBC_TUNABLES").is_none() {
        if let Ok(exe) = std::env::current_exe() {
            let status = std::process::Command::new(exe)
                .args(&args[1..])
                .env("GLIBC_TUNABLES", MALLOC_TUNABLES)
                .status()
                .expect("re-executing acceptance run");
            std::process::exit(status.code().unwrap_or(1));
        }
    }
    // `cargo test -- --list` and filtered runs should not start training
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let t0 = Instant::now();
    let mut lines = Vec::new();
    let mut errors = Vec::new();
    let record = |r: Result<Line>, what: &str, lines: &mut Vec<Line>, errors: &mut Vec<String>| match r {
        Ok(l) => lines.push(l),
        Err(e) => errors.push(format!("{what}: {e:#}")),
    };
    record(correctness_core(), "criterion 1", &mut lines, &mut errors);

    let bundle = build_dataset(&DatasetConfig::default()).expect("dataset builds");
    match train_all_goalid(&bundle) {
        Ok(runs) => {
            record(goalid_ordering(&bundle, &runs), "criterion 2", &mut lines, &mut errors);
            record(symbol_grounding(&runs), "criterion 3", &mut lines, &mut errors);
            record(sample_efficiency(&bundle, &runs), "criterion 4", &mut lines, &mut errors);
            record(discriminator_behaviour(&bundle, &runs), "criterion 5", &mut lines, &mut errors);
        }
        Err(e) => errors.push(format!("goal-id training: {e:#}")),
    }
    record(reproducibility(&bundle), "criterion 6", &mut lines, &mut errors);

    for e in &errors {
        println!("FAIL {e}");
    }
    let passed = lines.iter().filter(|l| l.pass).count();
    println!(
        "acceptance: {passed}/6 criteria passed in {:.0}s",
        t0.elapsed().as_secs_f64()
    );
    // a criterion that misses its threshold is reported above; only a run
    // that could not evaluate every criterion fails the test target
    if !errors.is_empty() {
        std::process::exit(1);
    }
}
