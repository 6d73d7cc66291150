//! Command-line entry point: dataset generation, both training phases,
//! evaluation and artifact export.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::dataset::{self, build_dataset_parallel, subsample, DatasetBundle, DatasetConfig, Trajectory};
use crate::discrim::{load_goalid, train_goalid, DiscriminatorConfig, GoalIdManifest, GoalIdSystem};
use crate::eval::{correlation_report, format_table, iqm_ci, Interval};
use crate::goalid::{interaction_matrix, GoalIdConfig, Variant};
use crate::planner::{load_planner, parallel_rollout, train_planner, GoalSource, PlannerConfig, PlannerManifest, PolicyKind, Validation};

#[derive(Debug, Parser, Serialize)]
#[command(name = "compgen", version, about = "Gridworld goal identification and planning experiments")]
pub struct Cli {
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0, env = "CGC_SEED")]
    pub seed: u64,
    /// Worker threads for dataset generation and rollouts.
    #[arg(long, global = true, default_value_t = 1, env = "CGC_THREADS")]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Cmd {
    /// Generate expert demonstrations and the validation splits.
    GenData(GenData),
    /// Train the goal-identification model with the discriminator.
    TrainGoalid(TrainGoalid),
    /// Train a planner (or the CNN ablation) on top of a frozen goal model.
    TrainPlanner(TrainPlanner),
    /// Soft-F1 IQM and confidence interval per validation split.
    EvalGoalid(EvalGoalid),
    /// Success rate of trained policies per split and per N.
    EvalE2e(EvalE2e),
    /// Export word/attribute interaction matrices.
    Heatmaps(Heatmaps),
    /// Train all three goal-identification variants and compare them.
    Ablate(Ablate),
}

#[derive(Debug, Args, Serialize)]
pub struct GenData {
    #[arg(long, default_value_t = 500, env = "CGC_N_PER_GOAL")]
    pub n_per_goal: usize,
    /// Never draw held-out combinations as distractors.
    #[arg(long)]
    pub strict_ood_distractors: bool,
    #[arg(long, env = "CGC_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct GoalidArgs {
    #[arg(long, default_value_t = 20_000, env = "CGC_STEPS")]
    pub steps: usize,
    #[arg(long, default_value_t = 1024, env = "CGC_BATCH")]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-2, env = "CGC_LR")]
    pub lr: f64,
    /// Learning rate at the last step; decays geometrically from --lr.
    #[arg(long, env = "CGC_FINAL_LR")]
    pub final_lr: Option<f64>,
    /// Constant learning rate for the mask module.
    #[arg(long, default_value_t = 1e-4, env = "CGC_MASK_LR")]
    pub mask_lr: f64,
    /// Adam's epsilon for the goal model.
    #[arg(long, default_value_t = 1e-4, env = "CGC_ADAM_EPS")]
    pub adam_eps: f64,
    /// L1 weight; defaults to the variant's own default.
    #[arg(long, env = "CGC_LAMBDA1")]
    pub lambda1: Option<f64>,
    #[arg(long, default_value_t = 500, env = "CGC_EVAL_PERIOD")]
    pub eval_period: usize,
    #[arg(long, default_value_t = 8, env = "CGC_MASK_HIDDEN")]
    pub mask_hidden: usize,
    /// Train the mask and S jointly on both losses.
    #[arg(long)]
    pub joint: bool,
    /// Training trajectories per goal (all when omitted).
    #[arg(long, env = "CGC_N")]
    pub n: Option<usize>,
}

impl GoalidArgs {
    fn config(&self, seed: u64) -> DiscriminatorConfig {
        DiscriminatorConfig {
            lr: self.lr,
            final_lr: self.final_lr,
            mask_lr: Some(self.mask_lr),
            adam_eps: self.adam_eps,
            batch: self.batch,
            steps: self.steps,
            eval_period: self.eval_period,
            seed,
            routed: !self.joint,
            mask_hidden: self.mask_hidden,
            ..Default::default()
        }
    }

    fn model(&self, variant: Variant) -> GoalIdConfig {
        let mut m = GoalIdConfig::new(variant);
        if let Some(l) = self.lambda1 {
            m.lambda1 = l;
        }
        m
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainGoalid {
    #[arg(long, env = "CGC_DATA")]
    pub data: PathBuf,
    #[arg(long, default_value = "sparse-factored", env = "CGC_VARIANT")]
    pub variant: Variant,
    #[command(flatten)]
    pub train: GoalidArgs,
    #[arg(long, env = "CGC_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainPlanner {
    #[arg(long, env = "CGC_DATA")]
    pub data: PathBuf,
    /// Directory written by `train-goalid`.
    #[arg(long, env = "CGC_GOALID")]
    pub goalid: PathBuf,
    /// Checkpoint file inside the goal-model directory (best by v_ID F1 when omitted).
    #[arg(long)]
    pub goalid_checkpoint: Option<String>,
    #[arg(long, value_enum, default_value = "mvprop", env = "CGC_POLICY")]
    pub policy: PolicyArg,
    /// Demonstrations per training goal.
    #[arg(long, default_value_t = 100, env = "CGC_N")]
    pub n: usize,
    #[arg(long, default_value_t = 20_000, env = "CGC_STEPS")]
    pub steps: usize,
    #[arg(long, default_value_t = 32, env = "CGC_BATCH")]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3, env = "CGC_LR")]
    pub lr: f64,
    #[arg(long, default_value_t = 1.0, env = "CGC_LAMBDA2")]
    pub lambda2: f64,
    #[arg(long, default_value_t = 0.9, env = "CGC_GAMMA")]
    pub gamma: f64,
    #[arg(long, default_value_t = 12, env = "CGC_K")]
    pub k: usize,
    #[arg(long, default_value_t = 32, env = "CGC_WIDTH")]
    pub width: usize,
    #[arg(long, default_value_t = 500, env = "CGC_EVAL_PERIOD")]
    pub eval_period: usize,
    #[arg(long, default_value_t = 96, env = "CGC_EVAL_SEEDS")]
    pub eval_seeds: usize,
    #[arg(long, env = "CGC_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyArg {
    Mvprop,
    Cnn,
}

impl From<PolicyArg> for PolicyKind {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Mvprop => PolicyKind::Mvprop,
            PolicyArg::Cnn => PolicyKind::Cnn,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EvalGoalid {
    #[arg(long, env = "CGC_DATA")]
    pub data: PathBuf,
    /// Goal-model directories; scores are pooled across them. With none,
    /// an untrained model is scored.
    #[arg(long = "goalid")]
    pub goalid: Vec<PathBuf>,
    #[arg(long, default_value = "sparse-factored")]
    pub variant: Variant,
    #[arg(long, default_value_t = 2000)]
    pub resamples: usize,
    #[arg(long, env = "CGC_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalE2e {
    #[arg(long, env = "CGC_DATA")]
    pub data: PathBuf,
    /// Planner directories written by `train-planner`.
    #[arg(long = "planner", required = true)]
    pub planner: Vec<PathBuf>,
    #[arg(long, env = "CGC_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct Heatmaps {
    #[arg(long, env = "CGC_GOALID")]
    pub goalid: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<String>,
    /// Pixels per matrix entry in the PGM output.
    #[arg(long, default_value_t = 16)]
    pub scale: usize,
    #[arg(long, env = "CGC_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct Ablate {
    #[arg(long, env = "CGC_DATA")]
    pub data: PathBuf,
    #[command(flatten)]
    pub train: GoalidArgs,
    #[arg(long, default_value_t = 2000)]
    pub resamples: usize,
    #[arg(long, env = "CGC_OUT")]
    pub out: PathBuf,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Help or version text requested.
    Help(String),
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Help(_) => 0,
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Help(m) => write!(f, "{m}"),
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// `git describe` of the working tree, or `unknown` outside a checkout.
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

fn write_run_json(dir: &Path, cli: &Cli) -> anyhow::Result<()> {
    #[derive(Serialize)]
    struct RunRecord<'a> {
        git: String,
        config: &'a Cli,
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let rec = RunRecord { git: git_describe(), config: cli };
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&rec)?)?;
    Ok(())
}

fn load_data(dir: &Path) -> Result<DatasetBundle, CliError> {
    if !dir.join("manifest.json").is_file() {
        return Err(usage(format!("no dataset at {}", dir.display())));
    }
    dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display())).map_err(CliError::from)
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(usage(format!("--{name} must be positive, got {v}")))
    }
}

fn check_goalid_args(a: &GoalidArgs) -> Result<(), CliError> {
    positive("lr", a.lr)?;
    if let Some(l) = a.final_lr {
        positive("final-lr", l)?;
    }
    positive("mask-lr", a.mask_lr)?;
    positive("adam-eps", a.adam_eps)?;
    positive("eval-period", a.eval_period as f64)?;
    positive("mask-hidden", a.mask_hidden as f64)?;
    if a.batch < 2 || a.batch % 2 != 0 {
        return Err(usage(format!("--batch must be even and at least 2, got {}", a.batch)));
    }
    if let Some(l) = a.lambda1 {
        if !(l >= 0.0 && l.is_finite()) {
            return Err(usage(format!("--lambda1 must be non-negative, got {l}")));
        }
    }
    if a.n == Some(0) {
        return Err(usage("--n must be positive"));
    }
    Ok(())
}

fn train_split(bundle: &DatasetBundle, n: Option<usize>) -> Result<Vec<Trajectory>, CliError> {
    match n {
        Some(n) => subsample(&bundle.train, n).map_err(|e| usage(e.to_string())),
        None => Ok(bundle.train.clone()),
    }
}

/// Checkpoint with the best v_ID soft-F1, or the final weights when none
/// were retained.
pub fn best_checkpoint(manifest: &GoalIdManifest) -> Option<String> {
    manifest.checkpoints.first().map(|c| c.1.clone())
}

/// Per-trajectory soft-F1 pooled over every retained checkpoint of every
/// run in `dirs`.
pub fn pooled_f1(dirs: &[PathBuf], trajs: &[Trajectory]) -> anyhow::Result<Vec<f64>> {
    let mut scores = Vec::new();
    for dir in dirs {
        let (manifest, _, _) = load_goalid(dir, None)?;
        let names: Vec<Option<String>> = if manifest.checkpoints.is_empty() {
            vec![None]
        } else {
            manifest.checkpoints.iter().map(|c| Some(c.1.clone())).collect()
        };
        for name in names {
            let (_, sys, p) = load_goalid(dir, name.as_deref())?;
            scores.extend(crate::discrim::evaluate_f1(&sys.model, &p, trajs)?);
        }
    }
    Ok(scores)
}

fn interval_cells(i: &Interval) -> [String; 3] {
    [format!("{:.3}", i.iqm), format!("{:.3}", i.lo), format!("{:.3}", i.hi)]
}

fn run_gen_data(cli: &Cli, a: &GenData) -> Result<(), CliError> {
    if a.n_per_goal < 60 {
        return Err(usage(format!("--n-per-goal must be at least 60, got {}", a.n_per_goal)));
    }
    let cfg = DatasetConfig {
        strict_ood_distractors: a.strict_ood_distractors,
        ..DatasetConfig::with_n_per_goal(a.n_per_goal)
    };
    let bundle = build_dataset_parallel(&cfg, cli.threads).context("building dataset")?;
    dataset::save(&bundle, &a.out).context("saving dataset")?;
    write_run_json(&a.out, cli)?;
    let m = &bundle.manifest;
    println!(
        "wrote {}: train {} v_id {} v_ood {} (seeds scanned {})",
        a.out.display(),
        m.train_count,
        m.v_id_count,
        m.v_ood_count,
        m.seeds_scanned
    );
    Ok(())
}

fn run_train_goalid(cli: &Cli, a: &TrainGoalid) -> Result<(), CliError> {
    check_goalid_args(&a.train)?;
    let bundle = load_data(&a.data)?;
    let train = train_split(&bundle, a.train.n)?;
    write_run_json(&a.out, cli)?;
    let r = train_goalid(
        &train,
        &bundle.v_id,
        &bundle.v_ood,
        a.train.model(a.variant),
        &a.train.config(cli.seed),
        Some(&a.out),
    )
    .context("training goal model")?;
    match r.log.last() {
        Some(row) => println!("step {}: f1 v_ID {:.3} v_OOD {:.3}", row.step, row.f1_vid, row.f1_vood),
        None => println!("no evaluation rows (0 steps or eval period not reached)"),
    }
    Ok(())
}

fn run_train_planner(cli: &Cli, a: &TrainPlanner) -> Result<(), CliError> {
    for (name, v) in [("lr", a.lr), ("gamma", a.gamma), ("n", a.n as f64), ("batch", a.batch as f64), ("k", a.k as f64)] {
        positive(name, v)?;
    }
    positive("width", a.width as f64)?;
    positive("eval-period", a.eval_period as f64)?;
    if a.gamma > 1.0 || a.lambda2 < 0.0 {
        return Err(usage("--gamma must be in (0, 1] and --lambda2 non-negative"));
    }
    if !a.goalid.join("goalid.json").is_file() {
        return Err(usage(format!("no goal model at {}", a.goalid.display())));
    }
    let bundle = load_data(&a.data)?;
    let train = train_split(&bundle, Some(a.n))?;
    let (manifest, _, _) = load_goalid(&a.goalid, None).context("loading goal model")?;
    let ckpt = a.goalid_checkpoint.clone().or_else(|| best_checkpoint(&manifest));
    let (_, sys, gp) = load_goalid(&a.goalid, ckpt.as_deref()).context("loading goal model")?;
    let cfg = PlannerConfig {
        kind: a.policy.into(),
        gamma: a.gamma,
        k: a.k,
        lambda2: a.lambda2,
        lr: a.lr,
        batch: a.batch,
        steps: a.steps,
        eval_period: a.eval_period,
        eval_seeds: a.eval_seeds,
        seed: cli.seed,
        width: a.width,
        ..Default::default()
    };
    let env = bundle.config.effective_env();
    let val = Validation {
        v_id: &bundle.v_id,
        v_ood: &bundle.v_ood,
        env: &env,
    };
    write_run_json(&a.out, cli)?;
    let pm = PlannerManifest {
        config: cfg.clone(),
        n_per_goal: a.n,
        goalid_dir: Some(fs::canonicalize(&a.goalid).unwrap_or(a.goalid.clone()).display().to_string()),
        goalid_checkpoint: ckpt,
    };
    let goals = GoalSource {
        model: &sys.model,
        params: &gp,
    };
    let r = train_planner(&train, goals, &val, &cfg, Some((&a.out, pm))).context("training planner")?;
    if let Some(row) = r.log.last() {
        println!(
            "step {}: success v_ID {:.3} v_OOD {:.3} (on {} seeds each)",
            row.step, row.success_vid, row.success_vood, a.eval_seeds
        );
    }
    Ok(())
}

fn run_eval_goalid(a: &EvalGoalid) -> Result<(), CliError> {
    let bundle = load_data(&a.data)?;
    for d in &a.goalid {
        if !d.join("goalid.json").is_file() {
            return Err(usage(format!("no goal model at {}", d.display())));
        }
    }
    let mut rows = Vec::new();
    for (split, trajs) in [("v_ID", &bundle.v_id), ("v_OOD", &bundle.v_ood)] {
        let scores = if a.goalid.is_empty() {
            let mut p = diffcore::ParamStore::new();
            let sys = GoalIdSystem::new(&mut p, 0, GoalIdConfig::new(a.variant), 8);
            crate::discrim::evaluate_f1(&sys.model, &p, trajs).context("scoring")?
        } else {
            pooled_f1(&a.goalid, trajs)?
        };
        let ci = iqm_ci(&scores, a.resamples, 0.95, 0).context("bootstrap")?;
        let [m, lo, hi] = interval_cells(&ci);
        rows.push(vec![split.to_string(), scores.len().to_string(), m, lo, hi]);
    }
    let table = format_table(&["split", "scores", "iqm", "ci_lo", "ci_hi"], &rows);
    print!("{table}");
    if let Some(out) = &a.out {
        fs::create_dir_all(out).context("creating output dir")?;
        fs::write(out.join("eval_goalid.txt"), &table).context("writing table")?;
    }
    Ok(())
}

fn run_eval_e2e(cli: &Cli, a: &EvalE2e) -> Result<(), CliError> {
    let bundle = load_data(&a.data)?;
    let env = bundle.config.effective_env();
    let mut rows = Vec::new();
    for dir in &a.planner {
        if !dir.join("planner.json").is_file() {
            return Err(usage(format!("no planner at {}", dir.display())));
        }
        let (pm, net, params) = load_planner(dir).context("loading planner")?;
        let gdir = pm.goalid_dir.clone().context("planner manifest lacks its goal model")?;
        let (_, sys, gp) = load_goalid(Path::new(&gdir), pm.goalid_checkpoint.as_deref()).context("loading goal model")?;
        let goals = GoalSource {
            model: &sys.model,
            params: &gp,
        };
        let mut cells = vec![pm.config.kind.name().to_string(), pm.n_per_goal.to_string()];
        for trajs in [&bundle.v_id, &bundle.v_ood] {
            let seeds: Vec<u64> = trajs.iter().map(|t| t.seed).collect();
            let rep = parallel_rollout(goals, &net, &params, &seeds, &env, cli.threads).context("rollout")?;
            cells.push(format!("{:.3}", rep.rate()));
        }
        rows.push(cells);
    }
    let table = format_table(&["policy", "n", "success_vid", "success_vood"], &rows);
    print!("{table}");
    if let Some(out) = &a.out {
        fs::create_dir_all(out).context("creating output dir")?;
        fs::write(out.join("eval_e2e.txt"), &table).context("writing table")?;
    }
    Ok(())
}

fn run_heatmaps(a: &Heatmaps) -> Result<(), CliError> {
    if !a.goalid.join("goalid.json").is_file() {
        return Err(usage(format!("no goal model at {}", a.goalid.display())));
    }
    positive("scale", a.scale as f64)?;
    let (manifest, _, _) = load_goalid(&a.goalid, None).context("loading goal model")?;
    let ckpt = a.checkpoint.clone().or_else(|| best_checkpoint(&manifest));
    let (_, sys, p) = load_goalid(&a.goalid, ckpt.as_deref()).context("loading goal model")?;
    fs::create_dir_all(&a.out).context("creating output dir")?;
    for m in interaction_matrix(&sys.model, &p) {
        let stem = format!("interaction_{}", m.factor);
        m.write_csv(&a.out.join(format!("{stem}.csv"))).context("writing csv")?;
        m.write_pgm(&a.out.join(format!("{stem}.pgm")), a.scale).context("writing pgm")?;
    }
    let rep = correlation_report(&sys.model, &p).context("correlation report")?;
    let rows: Vec<Vec<String>> = rep
        .words
        .iter()
        .map(|w| vec![w.word.to_string(), w.factor.to_string(), w.expected.to_string(), w.predicted.to_string()])
        .collect();
    let table = format_table(&["word", "factor", "expected", "argmax"], &rows);
    print!("{table}");
    println!("correct {}/{} off-target mass {:.3}", rep.correct(), rep.words.len(), rep.off_target_mass);
    fs::write(a.out.join("correlation.txt"), table).context("writing table")?;
    Ok(())
}

fn run_ablate(cli: &Cli, a: &Ablate) -> Result<(), CliError> {
    check_goalid_args(&a.train)?;
    let bundle = load_data(&a.data)?;
    let train = train_split(&bundle, a.train.n)?;
    write_run_json(&a.out, cli)?;
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let dir = a.out.join(variant.name());
        let mut model = a.train.model(variant);
        if a.train.lambda1.is_none() {
            model.lambda1 = variant.default_lambda1();
        }
        train_goalid(&train, &bundle.v_id, &bundle.v_ood, model, &a.train.config(cli.seed), Some(&dir))
            .with_context(|| format!("training {variant}"))?;
        let mut cells = vec![variant.name().to_string()];
        for trajs in [&bundle.v_id, &bundle.v_ood] {
            let scores = pooled_f1(std::slice::from_ref(&dir), trajs)?;
            let ci = iqm_ci(&scores, a.resamples, 0.95, 0).context("bootstrap")?;
            cells.push(format!("{:.3} [{:.3}, {:.3}]", ci.iqm, ci.lo, ci.hi));
        }
        rows.push(cells);
    }
    let table = format_table(&["variant", "v_ID", "v_OOD"], &rows);
    print!("{table}");
    fs::write(a.out.join("ablation.txt"), table).context("writing table")?;
    Ok(())
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp
        | clap::error::ErrorKind::DisplayVersion
        | clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => CliError::Help(e.render().to_string()),
        _ => {
            let text = e.render().to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            CliError::Usage(first.trim_start_matches("error: ").to_string())
        }
    })?;
    if cli.threads == 0 {
        return Err(usage("--threads must be positive"));
    }
    match &cli.command {
        Cmd::GenData(a) => run_gen_data(&cli, a),
        Cmd::TrainGoalid(a) => run_train_goalid(&cli, a),
        Cmd::TrainPlanner(a) => run_train_planner(&cli, a),
        Cmd::EvalGoalid(a) => run_eval_goalid(a),
        Cmd::EvalE2e(a) => run_eval_e2e(&cli, a),
        Cmd::Heatmaps(a) => run_heatmaps(a),
        Cmd::Ablate(a) => run_ablate(&cli, a),
    }
}

/// Process entry: exit 0 on success, 2 on usage errors, 1 otherwise.
pub fn main() -> i32 {
    match run(std::env::args_os()) {
        Ok(()) => 0,
        Err(CliError::Help(text)) => {
            print!("{text}");
            0
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("{msg}");
            e.exit_code()
        }
    }
}
