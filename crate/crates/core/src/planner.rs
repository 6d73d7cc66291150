//! Value propagation over the goal map and the Q-head that reads it,
//! trained by regressing demonstrated returns. Also the convolutional
//! policy that sees the goal map directly.

use std::fs;
use std::io::Write;
use std::path::Path;

use diffcore::{adam_step, save_checkpoint, AdamConfig, AdamState, Error, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{BcSample, BcSampler, Trajectory};
use crate::discrim::TrainError;
use crate::eval::{argmax, success_rate, EvalError, Policy, SuccessReport};
use crate::gridworld::{encode_observation, Action, EnvConfig, EpisodeState, FactoredGrid, Goal, CELLS, GRID, NUM_ACTIONS, NUM_COLORS, NUM_TYPES};
use crate::goalid::InteractionModel;
use crate::nn::{embedding, neighbours, Conv, Factor, GridBatch, Linear, LookupConv, EMBED_DIM};
use crate::rng::stream;

const FEATURES: [(Factor, usize); 2] = [(Factor::Type, EMBED_DIM), (Factor::Color, EMBED_DIM)];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    /// Value propagation plus Q-head, regressed on returns.
    Mvprop,
    /// Goal map as one input plane, cross-entropy on expert actions.
    Cnn,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Mvprop => "mvprop",
            PolicyKind::Cnn => "cnn",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub kind: PolicyKind,
    pub gamma: f64,
    pub k: usize,
    pub lambda2: f64,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub eval_period: usize,
    /// Validation seeds per split rolled out at each periodic evaluation.
    pub eval_seeds: usize,
    pub seed: u64,
    pub width: usize,
    pub blocks: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            kind: PolicyKind::Mvprop,
            gamma: 0.9,
            k: 12,
            lambda2: 1.0,
            lr: 1e-3,
            batch: 32,
            steps: 20_000,
            eval_period: 500,
            eval_seeds: 96,
            seed: 0,
            width: 32,
            blocks: 3,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.gamma > 0.0
            && self.gamma <= 1.0
            && self.k > 0
            && self.lambda2 >= 0.0
            && self.lr > 0.0
            && self.batch > 0
            && self.eval_period > 0
            && self.width > 0;
        if ok {
            Ok(())
        } else {
            Err(TrainError::Config(format!("invalid planner config {self:?}")))
        }
    }
}

/// `V_{k+1}(c) = max(V_k(c), φ(c) · max_{n ∈ N₈(c)} V_k(n))` for `k` steps,
/// zero outside the grid. `v0` and `phi` are `[B, 64]`; returns every `V_k`.
pub fn propagate_values(t: &mut Tape, v0: Var, phi: Var, k: usize) -> Result<Vec<Var>, Error> {
    let b = t.shape(v0)[0];
    let nb = neighbours();
    let zero = b * CELLS;
    let mut idx = Vec::with_capacity(b * CELLS * 8);
    for bi in 0..b {
        for cell_nb in nb.iter() {
            for (j, n) in cell_nb.iter().enumerate() {
                if j != 4 {
                    idx.push(n.map_or(zero, |n| bi * CELLS + n));
                }
            }
        }
    }
    let pad = t.constant(Tensor::zeros(&[1, 1]));
    let mut values = vec![v0];
    for _ in 0..k {
        let v = *values.last().expect("non-empty");
        let col = t.reshape(v, &[b * CELLS, 1])?;
        let table = t.concat(&[col, pad], 0)?;
        let around = t.embedding(table, &idx, &[b, CELLS, 8])?;
        let around = t.reshape(around, &[b, CELLS, 8])?;
        let best = t.max_axis(around, 2)?;
        let gated = t.mul(phi, best)?;
        values.push(t.maximum(v, gated)?);
    }
    Ok(values)
}

/// Per-cell propagation weight `φ ∈ (0, 1)`.
#[derive(Clone, Debug)]
pub struct PropagationNet {
    pub conv1: LookupConv,
    pub conv2: Conv,
}

impl PropagationNet {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, width: usize) -> Self {
        PropagationNet {
            conv1: LookupConv::new(store, rng, "phi.conv1", &FEATURES, false, width),
            conv2: Conv::new(store, rng, "phi.conv2", width, 1, 1.0),
        }
    }

    /// `[B, 64]`.
    pub fn phi(&self, t: &mut Tape, p: &ParamStore, embeds: &[Var], batch: &GridBatch) -> Result<Var, Error> {
        let h = self.conv1.apply(t, p, embeds, batch)?;
        let h = t.relu(h)?;
        let h = t.reshape(h, &[batch.len, GRID, GRID, self.conv1.out])?;
        let h = self.conv2.apply(t, p, h)?;
        let h = t.reshape(h, &[batch.len, CELLS])?;
        t.sigmoid(h)
    }
}

/// Residual conv stack, global max pool and a two-layer head to 7 outputs.
#[derive(Clone, Debug)]
pub struct Trunk {
    pub blocks: Vec<(Conv, Conv)>,
    pub fc1: Linear,
    pub fc2: Linear,
    pub width: usize,
}

impl Trunk {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, width: usize, blocks: usize) -> Self {
        let blocks = (0..blocks)
            .map(|i| {
                (
                    Conv::new(store, rng, &format!("{name}.block{i}.a"), width, width, 1.0),
                    Conv::new(store, rng, &format!("{name}.block{i}.b"), width, width, 0.5),
                )
            })
            .collect();
        Trunk {
            blocks,
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), width, width, 1.0),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), width, NUM_ACTIONS, 0.5),
            width,
        }
    }

    /// `x` is the post-activation `[B, 8, 8, width]` input; returns `[B, 7]`.
    pub fn apply(&self, t: &mut Tape, p: &ParamStore, mut x: Var) -> Result<Var, Error> {
        let b = t.shape(x)[0];
        for (c1, c2) in &self.blocks {
            let h = c1.apply(t, p, x)?;
            let h = t.relu(h)?;
            let h = c2.apply(t, p, h)?;
            let h = t.add(x, h)?;
            x = t.relu(h)?;
        }
        let x = t.reshape(x, &[b, CELLS, self.width])?;
        let pooled = t.max_axis(x, 1)?;
        let h = self.fc1.apply(t, p, pooled)?;
        let h = t.relu(h)?;
        self.fc2.apply(t, p, h)
    }
}

/// Q-values from visual features, direction, `V_0` and `V_K`.
#[derive(Clone, Debug)]
pub struct QHead {
    pub input: LookupConv,
    pub values: Conv,
    pub trunk: Trunk,
}

impl QHead {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, width: usize, blocks: usize) -> Self {
        QHead {
            input: LookupConv::new(store, rng, "q.input", &FEATURES, true, width),
            values: Conv::new(store, rng, "q.values", 2, width, 1.0),
            trunk: Trunk::new(store, rng, "q", width, blocks),
        }
    }

    pub fn q_values(
        &self,
        t: &mut Tape,
        p: &ParamStore,
        embeds: &[Var],
        batch: &GridBatch,
        v0: Var,
        vk: Var,
    ) -> Result<Var, Error> {
        let b = batch.len;
        let w = self.trunk.width;
        let feat = self.input.apply(t, p, embeds, batch)?;
        let feat = t.reshape(feat, &[b, GRID, GRID, w])?;
        let a = t.reshape(v0, &[b, GRID, GRID, 1])?;
        let z = t.reshape(vk, &[b, GRID, GRID, 1])?;
        let planes = t.concat(&[a, z], 3)?;
        let vals = self.values.apply(t, p, planes)?;
        let x = t.add(feat, vals)?;
        let x = t.relu(x)?;
        self.trunk.apply(t, p, x)
    }
}

/// Conv policy over features, direction and the goal map as one plane.
#[derive(Clone, Debug)]
pub struct CnnHead {
    pub input: LookupConv,
    pub goal: Conv,
    pub trunk: Trunk,
}

impl CnnHead {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, width: usize, blocks: usize) -> Self {
        CnnHead {
            input: LookupConv::new(store, rng, "cnn.input", &FEATURES, true, width),
            goal: Conv::new(store, rng, "cnn.goal", 1, width, 1.0),
            trunk: Trunk::new(store, rng, "cnn", width, blocks),
        }
    }

    /// Action logits `[B, 7]`.
    pub fn logits(&self, t: &mut Tape, p: &ParamStore, embeds: &[Var], batch: &GridBatch, goal_map: Var) -> Result<Var, Error> {
        let b = batch.len;
        let w = self.trunk.width;
        let feat = self.input.apply(t, p, embeds, batch)?;
        let feat = t.reshape(feat, &[b, GRID, GRID, w])?;
        let g = t.reshape(goal_map, &[b, GRID, GRID, 1])?;
        let g = self.goal.apply(t, p, g)?;
        let x = t.add(feat, g)?;
        let x = t.relu(x)?;
        self.trunk.apply(t, p, x)
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Mvprop { phi: PropagationNet, q: QHead, k: usize },
    Cnn(CnnHead),
}

/// A trainable policy: shared cell embeddings plus one of the two heads.
#[derive(Clone, Debug)]
pub struct PlannerNet {
    pub types: ParamId,
    pub colors: ParamId,
    pub head: Head,
}

impl PlannerNet {
    pub fn new(store: &mut ParamStore, cfg: &PlannerConfig) -> Self {
        let mut rng = stream(cfg.seed, "planner.init");
        let types = embedding(store, &mut rng, "planner.types", NUM_TYPES, EMBED_DIM);
        let colors = embedding(store, &mut rng, "planner.colors", NUM_COLORS, EMBED_DIM);
        let head = match cfg.kind {
            PolicyKind::Mvprop => Head::Mvprop {
                phi: PropagationNet::new(store, &mut rng, EMBED_DIM),
                q: QHead::new(store, &mut rng, cfg.width, cfg.blocks),
                k: cfg.k,
            },
            PolicyKind::Cnn => Head::Cnn(CnnHead::new(store, &mut rng, cfg.width, cfg.blocks)),
        };
        PlannerNet { types, colors, head }
    }

    /// Q-values or logits, `[B, 7]`; `goal_map` is `[B, 64]`.
    pub fn scores(&self, t: &mut Tape, p: &ParamStore, batch: &GridBatch, goal_map: Var) -> Result<Var, Error> {
        let embeds = [t.param(p, self.types), t.param(p, self.colors)];
        match &self.head {
            Head::Mvprop { phi, q, k } => {
                let phi = phi.phi(t, p, &embeds, batch)?;
                let values = propagate_values(t, goal_map, phi, *k)?;
                let vk = *values.last().expect("non-empty");
                q.q_values(t, p, &embeds, batch, goal_map, vk)
            }
            Head::Cnn(h) => h.logits(t, p, &embeds, batch, goal_map),
        }
    }

    pub fn kind(&self) -> PolicyKind {
        match self.head {
            Head::Mvprop { .. } => PolicyKind::Mvprop,
            Head::Cnn(_) => PolicyKind::Cnn,
        }
    }
}

/// Mean over the batch of `(R − q[a])² + λ₂ Σ_{a' ≠ a} q[a']²`.
pub fn vin_loss(t: &mut Tape, q: Var, actions: &[u8], returns: &[f64], lambda2: f64) -> Result<Var, Error> {
    let b = actions.len();
    if t.shape(q) != [b, NUM_ACTIONS] || returns.len() != b {
        return Err(Error::invalid("vin_loss", format!("q {:?} for {b} actions", t.shape(q))));
    }
    let mut target = vec![0.0; b * NUM_ACTIONS];
    let mut weight = vec![lambda2; b * NUM_ACTIONS];
    for (i, (&a, &r)) in actions.iter().zip(returns).enumerate() {
        if a as usize >= NUM_ACTIONS {
            return Err(Error::invalid("vin_loss", format!("action {a}")));
        }
        target[i * NUM_ACTIONS + a as usize] = r;
        weight[i * NUM_ACTIONS + a as usize] = 1.0;
    }
    let target = t.constant(Tensor::new(vec![b, NUM_ACTIONS], target)?);
    let weight = t.constant(Tensor::new(vec![b, NUM_ACTIONS], weight)?);
    let err = t.sub(q, target)?;
    let err = t.square(err)?;
    let err = t.mul(err, weight)?;
    let total = t.sum_all(err)?;
    t.scale(total, 1.0 / b as f64)
}

/// Mean negative log-likelihood of `actions` under `logits`.
pub fn cross_entropy(t: &mut Tape, logits: Var, actions: &[u8]) -> Result<Var, Error> {
    let b = actions.len();
    if t.shape(logits) != [b, NUM_ACTIONS] {
        return Err(Error::invalid("cross_entropy", format!("logits {:?} for {b} actions", t.shape(logits))));
    }
    let mut pick = vec![0.0; b * NUM_ACTIONS];
    for (i, &a) in actions.iter().enumerate() {
        if a as usize >= NUM_ACTIONS {
            return Err(Error::invalid("cross_entropy", format!("action {a}")));
        }
        pick[i * NUM_ACTIONS + a as usize] = -1.0 / b as f64;
    }
    let lp = t.log_softmax(logits)?;
    let pick = t.constant(Tensor::new(vec![b, NUM_ACTIONS], pick)?);
    let picked = t.mul(lp, pick)?;
    t.sum_all(picked)
}

/// Argmax over action scores, lowest id on ties.
pub fn act(scores: &[f64]) -> Action {
    Action::ALL[argmax(&scores[..NUM_ACTIONS])]
}

/// Frozen goal-identification model feeding a planner.
#[derive(Clone, Copy)]
pub struct GoalSource<'a> {
    pub model: &'a InteractionModel,
    pub params: &'a ParamStore,
}

impl GoalSource<'_> {
    pub fn goal_maps(&self, grids: &[&FactoredGrid], goals: &[Goal]) -> Result<Vec<[f64; CELLS]>, Error> {
        self.model.predict(self.params, grids, goals)
    }
}

fn map_tensor(maps: &[[f64; CELLS]]) -> Tensor {
    Tensor::new(vec![maps.len(), CELLS], maps.iter().flatten().copied().collect()).expect("shape matches")
}

/// Action scores for a batch of observations, without recording gradients
/// into any store.
pub fn score_batch(net: &PlannerNet, p: &ParamStore, grids: &[&FactoredGrid], maps: &[[f64; CELLS]]) -> Result<Vec<[f64; NUM_ACTIONS]>, Error> {
    let mut out = Vec::with_capacity(grids.len());
    for (g, m) in grids.chunks(256).zip(maps.chunks(256)) {
        let mut t = Tape::new();
        let batch = GridBatch::new(g.iter().copied());
        let v0 = t.constant(map_tensor(m));
        let s = net.scores(&mut t, p, &batch, v0)?;
        for row in t.value(s).data().chunks(NUM_ACTIONS) {
            out.push(row.try_into().expect("7 actions"));
        }
    }
    Ok(out)
}

/// Goal identification followed by a trained planner, acting greedily.
pub struct PlannerPolicy<'a> {
    pub goals: GoalSource<'a>,
    pub net: &'a PlannerNet,
    pub params: &'a ParamStore,
}

impl Policy for PlannerPolicy<'_> {
    fn act_batch(&mut self, states: &[&EpisodeState]) -> Result<Vec<Action>, EvalError> {
        let grids: Vec<FactoredGrid> = states.iter().map(|s| encode_observation(s)).collect();
        let refs: Vec<&FactoredGrid> = grids.iter().collect();
        let goals: Vec<Goal> = states.iter().map(|s| s.goal).collect();
        let maps = self.goals.goal_maps(&refs, &goals)?;
        let scores = score_batch(self.net, self.params, &refs, &maps)?;
        Ok(scores.iter().map(|q| act(q)).collect())
    }
}

/// `n` seeds spread evenly over `trajs` (all of them when `n` is larger).
pub fn spread_seeds(trajs: &[Trajectory], n: usize) -> Vec<u64> {
    if n >= trajs.len() {
        return trajs.iter().map(|t| t.seed).collect();
    }
    (0..n).map(|i| trajs[i * trajs.len() / n].seed).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlannerRow {
    pub step: usize,
    pub loss: f64,
    pub success_vid: f64,
    pub success_vood: f64,
}

pub const PLANNER_HEADER: &str = "step,loss,success_vid,success_vood";

impl PlannerRow {
    pub fn csv(&self) -> String {
        format!("{},{:.9},{:.6},{:.6}", self.step, self.loss, self.success_vid, self.success_vood)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerManifest {
    pub config: PlannerConfig,
    pub n_per_goal: usize,
    pub goalid_dir: Option<String>,
    pub goalid_checkpoint: Option<String>,
}

pub struct TrainedPlanner {
    pub net: PlannerNet,
    pub params: ParamStore,
    pub log: Vec<PlannerRow>,
}

/// Data a training run evaluates against.
pub struct Validation<'a> {
    pub v_id: &'a [Trajectory],
    pub v_ood: &'a [Trajectory],
    pub env: &'a EnvConfig,
}

pub fn rollout(
    goals: GoalSource<'_>,
    net: &PlannerNet,
    params: &ParamStore,
    seeds: &[u64],
    env: &EnvConfig,
) -> Result<SuccessReport, EvalError> {
    let mut policy = PlannerPolicy { goals, net, params };
    success_rate(&mut policy, seeds, env)
}

/// [`rollout`] with the seeds sharded over `threads` workers; the report
/// keeps seed order.
pub fn parallel_rollout(
    goals: GoalSource<'_>,
    net: &PlannerNet,
    params: &ParamStore,
    seeds: &[u64],
    env: &EnvConfig,
    threads: usize,
) -> Result<SuccessReport, EvalError> {
    let threads = threads.clamp(1, seeds.len().max(1));
    if threads == 1 {
        return rollout(goals, net, params, seeds, env);
    }
    let per = seeds.len().div_ceil(threads);
    let parts: Vec<Result<SuccessReport, EvalError>> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .chunks(per)
            .map(|chunk| s.spawn(move || rollout(goals, net, params, chunk, env)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("rollout worker panicked")).collect()
    });
    let mut out = SuccessReport {
        seeds: Vec::new(),
        success: Vec::new(),
        steps: Vec::new(),
    };
    for part in parts {
        let part = part?;
        out.seeds.extend(part.seeds);
        out.success.extend(part.success);
        out.steps.extend(part.steps);
    }
    Ok(out)
}

fn batch_loss(
    t: &mut Tape,
    net: &PlannerNet,
    p: &ParamStore,
    cfg: &PlannerConfig,
    sampler: &BcSampler<'_>,
    maps: &[Vec<[f64; CELLS]>],
    samples: &[BcSample],
) -> Result<Var, Error> {
    let grids = samples.iter().map(|s| sampler.state(s.state));
    let batch = GridBatch::new(grids);
    let rows: Vec<[f64; CELLS]> = samples.iter().map(|s| maps[s.state.trajectory][s.state.step]).collect();
    let v0 = t.constant(map_tensor(&rows));
    let scores = net.scores(t, p, &batch, v0)?;
    let actions: Vec<u8> = samples.iter().map(|s| s.action).collect();
    match net.kind() {
        PolicyKind::Mvprop => {
            let returns: Vec<f64> = samples.iter().map(|s| s.ret).collect();
            vin_loss(t, scores, &actions, &returns, cfg.lambda2)
        }
        PolicyKind::Cnn => cross_entropy(t, scores, &actions),
    }
}

/// Goal maps of every state of every trajectory under the frozen model.
pub fn precompute_goal_maps(goals: GoalSource<'_>, trajs: &[Trajectory]) -> Result<Vec<Vec<[f64; CELLS]>>, Error> {
    let grids: Vec<&FactoredGrid> = trajs.iter().flat_map(|t| t.states.iter()).collect();
    let gs: Vec<Goal> = trajs.iter().flat_map(|t| std::iter::repeat_n(t.goal, t.states.len())).collect();
    let flat = goals.goal_maps(&grids, &gs)?;
    let mut it = flat.into_iter();
    Ok(trajs.iter().map(|t| it.by_ref().take(t.states.len()).collect()).collect())
}

/// Adam over the planner only; the goal model is read, never updated.
/// Every `eval_period` steps, rolls out `eval_seeds` seeds per split.
/// With `out`, writes `metrics.csv`, `planner_final.cgck` and `planner.json`.
pub fn train_planner(
    train: &[Trajectory],
    goals: GoalSource<'_>,
    val: &Validation<'_>,
    cfg: &PlannerConfig,
    out: Option<(&Path, PlannerManifest)>,
) -> Result<TrainedPlanner, TrainError> {
    cfg.validate()?;
    let sampler = BcSampler::new(train, cfg.gamma)?;
    let maps = precompute_goal_maps(goals, train)?;
    let mut params = ParamStore::new();
    let net = PlannerNet::new(&mut params, cfg);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &params);
    let mut rng = stream(cfg.seed, "planner.batches");
    let vid_seeds = spread_seeds(val.v_id, cfg.eval_seeds);
    let vood_seeds = spread_seeds(val.v_ood, cfg.eval_seeds);

    let mut csv = match &out {
        Some((dir, _)) => {
            fs::create_dir_all(dir)?;
            let mut f = fs::File::create(dir.join("metrics.csv"))?;
            writeln!(f, "{PLANNER_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let mut log = Vec::new();
    for step in 0..cfg.steps {
        let samples = sampler.sample_batch(&mut rng, cfg.batch);
        let mut t = Tape::new();
        let loss = batch_loss(&mut t, &net, &params, cfg, &sampler, &maps, &samples)
            .map_err(|e| TrainError::NonFinite { step, source: e })?;
        let grads = t.backward(loss)?;
        adam_step(&mut params, &grads, &mut adam).map_err(|e| TrainError::NonFinite { step, source: e })?;

        if (step + 1) % cfg.eval_period == 0 {
            let row = PlannerRow {
                step: step + 1,
                loss: t.value(loss).item(),
                success_vid: rollout(goals, &net, &params, &vid_seeds, val.env)?.rate(),
                success_vood: rollout(goals, &net, &params, &vood_seeds, val.env)?.rate(),
            };
            if let Some(f) = csv.as_mut() {
                writeln!(f, "{}", row.csv())?;
            }
            log.push(row);
        }
    }
    if let Some((dir, manifest)) = out {
        save_checkpoint(&dir.join("planner_final.cgck"), &params, Some(&adam))?;
        fs::write(
            dir.join("planner.json"),
            serde_json::to_string_pretty(&manifest).map_err(|e| TrainError::Config(e.to_string()))?,
        )?;
    }
    Ok(TrainedPlanner { net, params, log })
}

/// Mean loss over `samples`, for tests and diagnostics.
pub fn evaluate_loss(
    net: &PlannerNet,
    p: &ParamStore,
    cfg: &PlannerConfig,
    sampler: &BcSampler<'_>,
    maps: &[Vec<[f64; CELLS]>],
    samples: &[BcSample],
) -> Result<f64, Error> {
    let mut t = Tape::new();
    let l = batch_loss(&mut t, net, p, cfg, sampler, maps, samples)?;
    Ok(t.value(l).item())
}

pub fn load_planner(dir: &Path) -> Result<(PlannerManifest, PlannerNet, ParamStore), TrainError> {
    let manifest: PlannerManifest = serde_json::from_slice(&fs::read(dir.join("planner.json"))?)
        .map_err(|e| TrainError::Config(format!("{}: {e}", dir.join("planner.json").display())))?;
    let mut params = ParamStore::new();
    let net = PlannerNet::new(&mut params, &manifest.config);
    let (loaded, _) = diffcore::load_checkpoint(&dir.join("planner_final.cgck"))?;
    params.load_from(&loaded)?;
    Ok((manifest, net, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, subsample, DatasetBundle, DatasetConfig};
    use crate::discrim::GoalIdSystem;
    use crate::goalid::{GoalIdConfig, Variant};
    use diffcore::gradcheck::check_piecewise_gradients;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    fn bundle() -> &'static DatasetBundle {
        static B: OnceLock<DatasetBundle> = OnceLock::new();
        B.get_or_init(|| build_dataset(&DatasetConfig::with_n_per_goal(60)).unwrap())
    }

    fn goal_system() -> &'static (GoalIdSystem, ParamStore) {
        static G: OnceLock<(GoalIdSystem, ParamStore)> = OnceLock::new();
        G.get_or_init(|| {
            let mut p = ParamStore::new();
            let s = GoalIdSystem::new(&mut p, 3, GoalIdConfig::new(Variant::SparseFactored), 4);
            (s, p)
        })
    }

    fn source() -> GoalSource<'static> {
        let (s, p) = goal_system();
        GoalSource { model: &s.model, params: p }
    }

    // independent scalar recursion
    fn oracle(v0: &[f64], phi: &[f64], k: usize) -> Vec<f64> {
        let mut v = v0.to_vec();
        for _ in 0..k {
            let mut next = v.clone();
            for r in 0..8i32 {
                for c in 0..8i32 {
                    let mut best = f64::NEG_INFINITY;
                    for dr in -1..=1 {
                        for dc in -1..=1 {
                            if dr == 0 && dc == 0 {
                                continue;
                            }
                            let (nr, nc) = (r + dr, c + dc);
                            let x = if (0..8).contains(&nr) && (0..8).contains(&nc) { v[(nr * 8 + nc) as usize] } else { 0.0 };
                            best = best.max(x);
                        }
                    }
                    let i = (r * 8 + c) as usize;
                    next[i] = v[i].max(phi[i] * best);
                }
            }
            v = next;
        }
        v
    }

    fn run(v0: &[f64], phi: &[f64], k: usize) -> Vec<Vec<f64>> {
        let b = v0.len() / CELLS;
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![b, CELLS], v0.to_vec()).unwrap());
        let f = t.constant(Tensor::new(vec![b, CELLS], phi.to_vec()).unwrap());
        let vs = propagate_values(&mut t, a, f, k).unwrap();
        vs.iter().map(|&v| t.value(v).data().to_vec()).collect()
    }

    #[test]
    fn propagation_matches_scalar_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut v0 = Vec::new();
        let mut phi = Vec::new();
        for _ in 0..100 {
            v0.extend((0..CELLS).map(|_| rng.random::<f64>()));
            phi.extend((0..CELLS).map(|_| rng.random::<f64>()));
        }
        let got = run(&v0, &phi, 12);
        let last = got.last().unwrap();
        for i in 0..100 {
            let want = oracle(&v0[i * CELLS..][..CELLS], &phi[i * CELLS..][..CELLS], 12);
            assert_eq!(&last[i * CELLS..][..CELLS], &want[..], "instance {i}");
        }
    }

    #[test]
    fn propagation_examples() {
        let mut v0 = vec![0.0; CELLS];
        v0[3 * 8 + 3] = 1.0;
        let off = run(&v0, &[1e-12; CELLS], 12);
        assert!(off.last().unwrap().iter().zip(&v0).all(|(a, b)| (a - b).abs() < 1e-11));

        let v = run(&v0, &[0.9; CELLS], 2).pop().unwrap();
        for cell in 0..CELLS {
            let d = (cell / 8).abs_diff(3).max((cell % 8).abs_diff(3));
            let want = match d {
                0 => 1.0,
                1 => 0.9,
                2 => 0.81,
                _ => 0.0,
            };
            assert!((v[cell] - want).abs() < 1e-15, "cell {cell}");
        }

        // a row of φ = 0 cuts the grid in two
        let mut phi = [0.9; CELLS];
        phi[4 * 8..5 * 8].fill(0.0);
        let mut v0 = vec![0.0; CELLS];
        v0[8 + 2] = 1.0;
        let v = run(&v0, &phi, 20).pop().unwrap();
        for cell in 4 * 8..CELLS {
            assert_eq!(v[cell], v0[cell], "cell {cell}");
        }
        assert!(v[3 * 8] > 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn propagation_is_monotone_bounded_and_settles(
            v0 in prop::collection::vec(0.0f64..1.0, CELLS),
            phi in prop::collection::vec(0.0f64..0.999, CELLS),
        ) {
            let vs = run(&v0, &phi, 16);
            let top = v0.iter().cloned().fold(0.0, f64::max);
            for w in vs.windows(2) {
                for (a, b) in w[0].iter().zip(&w[1]) {
                    prop_assert!(b >= a);
                    prop_assert!(*b <= top);
                }
            }
            if let Some(k) = (1..vs.len()).find(|&k| vs[k] == vs[k - 1]) {
                for later in &vs[k..] {
                    prop_assert_eq!(later, &vs[k]);
                }
            }
        }
    }

    fn q_for(v0: &[f64]) -> Vec<f64> {
        let mut p = ParamStore::new();
        let net = PlannerNet::new(&mut p, &PlannerConfig { width: 8, blocks: 1, ..Default::default() });
        let grids = [&bundle().train[0].states[0]];
        let maps: [[f64; CELLS]; 1] = [v0.try_into().unwrap()];
        score_batch(&net, &p, &grids, &maps).unwrap()[0].to_vec()
    }

    #[test]
    fn q_values_shape_determinism_and_goal_sensitivity() {
        let traj = &bundle().train[0];
        let mut v0 = [0.01; CELLS];
        let goal_cell = traj.final_state().faced_pos().unwrap();
        v0[goal_cell] = 0.9;
        let q = q_for(&v0);
        assert_eq!(q.len(), NUM_ACTIONS);
        assert_eq!(q, q_for(&v0));
        let mut bumped = v0;
        bumped[goal_cell] += 1e-3;
        let q2 = q_for(&bumped);
        assert!(q.iter().zip(&q2).any(|(a, b)| a != b));
    }

    fn vin(q: &[f64], a: u8, r: f64, l2: f64) -> f64 {
        let mut t = Tape::new();
        let qv = t.constant(Tensor::new(vec![1, NUM_ACTIONS], q.to_vec()).unwrap());
        let l = vin_loss(&mut t, qv, &[a], &[r], l2).unwrap();
        t.value(l).item()
    }

    #[test]
    fn vin_loss_examples() {
        let mut q = [0.0; NUM_ACTIONS];
        q[4] = 0.7;
        assert_eq!(vin(&q, 4, 0.7, 1.0), 0.0);
        assert_eq!(vin(&[0.0; NUM_ACTIONS], 2, 1.0, 1.0), 1.0);
        assert!((vin(&[0.5; NUM_ACTIONS], 3, 1.0, 1.0) - 1.75).abs() < 1e-15);
        assert!((vin(&[0.5; NUM_ACTIONS], 3, 1.0, 0.5) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn conservative_loss_minimiser() {
        let mut p = ParamStore::new();
        let id = p.add("q", Tensor::new(vec![1, NUM_ACTIONS], vec![0.3, -0.8, 1.2, 0.1, 0.5, -0.2, 0.9]).unwrap());
        let mut adam = AdamState::new(AdamConfig::with_lr(0.05), &p);
        for _ in 0..3000 {
            let mut t = Tape::new();
            let q = t.param(&p, id);
            let l = vin_loss(&mut t, q, &[5], &[0.729], 0.3).unwrap();
            let g = t.backward(l).unwrap();
            adam_step(&mut p, &g, &mut adam).unwrap();
        }
        for (a, &v) in p.get(id).data().iter().enumerate() {
            let want = if a == 5 { 0.729 } else { 0.0 };
            assert!((v - want).abs() < 1e-4, "action {a}: {v}");
        }
    }

    #[test]
    fn act_takes_lowest_argmax() {
        let mut q = [0.1; NUM_ACTIONS];
        q[Action::Forward as usize] = 0.8;
        assert_eq!(act(&q), Action::Forward);
        assert_eq!(act(&[0.4; NUM_ACTIONS]), Action::Left);
        q[Action::Done as usize] = 0.8;
        assert_eq!(act(&q), Action::Forward);
    }

    fn jitter(p: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let ids: Vec<_> = p.ids().collect();
        for id in ids {
            let name = p.name(id).to_string();
            if name.ends_with(".b") || name.ends_with(".bias") {
                for v in p.get_mut(id).data_mut() {
                    *v = rng.random_range(-0.3..0.3);
                }
            }
        }
    }

    #[test]
    fn planner_losses_match_finite_differences() {
        let b = bundle();
        let sampler = BcSampler::new(&b.train[..6], 0.9).unwrap();
        let samples = sampler.sample_batch(&mut ChaCha8Rng::seed_from_u64(4), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [PolicyKind::Mvprop, PolicyKind::Cnn] {
            let cfg = PlannerConfig { kind, width: 6, blocks: 1, k: 4, ..Default::default() };
            let mut p = ParamStore::new();
            let net = PlannerNet::new(&mut p, &cfg);
            jitter(&mut p, &mut rng);
            // V_0 as a parameter with distinct entries, so no max ties
            let v0 = p.add("v0", Tensor::new(vec![3, CELLS], (0..3 * CELLS).map(|_| rng.random::<f64>()).collect()).unwrap());
            let grids: Vec<&FactoredGrid> = samples.iter().map(|s| sampler.state(s.state)).collect();
            let actions: Vec<u8> = samples.iter().map(|s| s.action).collect();
            let returns: Vec<f64> = samples.iter().map(|s| s.ret).collect();
            let report = check_piecewise_gradients(&p, 1e-4, 6, 1e-5, |t, p| {
                let batch = GridBatch::new(grids.iter().copied());
                let v = t.param(p, v0);
                let s = net.scores(t, p, &batch, v)?;
                match kind {
                    PolicyKind::Mvprop => vin_loss(t, s, &actions, &returns, 0.7),
                    PolicyKind::Cnn => cross_entropy(t, s, &actions),
                }
            })
            .unwrap();
            assert!(report.max_rel_error <= 1e-4, "{kind:?}: {report:?}");
            assert!(report.skipped * 5 <= report.checked, "{kind:?}: {report:?}");
        }
    }

    #[test]
    fn training_leaves_goal_model_untouched_and_is_reproducible() {
        let b = bundle();
        let (_, gp) = goal_system();
        let before = gp.clone();
        let env = b.config.effective_env();
        let val = Validation { v_id: &b.v_id, v_ood: &b.v_ood, env: &env };
        let cfg = PlannerConfig { width: 8, blocks: 1, steps: 6, eval_period: 3, eval_seeds: 4, ..Default::default() };
        let train = subsample(&b.train, 2).unwrap();
        let a = train_planner(&train, source(), &val, &cfg, None).unwrap();
        let c = train_planner(&train, source(), &val, &cfg, None).unwrap();
        assert_eq!(a.log, c.log);
        assert_eq!(a.log.len(), 2);
        for ((_, _, x), (_, _, y)) in before.iter().zip(gp.iter()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn policy_is_a_pure_function_of_state() {
        let mut p = ParamStore::new();
        let net = PlannerNet::new(&mut p, &PlannerConfig { width: 8, blocks: 1, ..Default::default() });
        let env = EnvConfig::default();
        let s = crate::gridworld::reset(17, &env).unwrap();
        let mut policy = PlannerPolicy { goals: source(), net: &net, params: &p };
        let a = policy.act_batch(&[&s, &s]).unwrap();
        assert_eq!(a[0], a[1]);
        assert_eq!(a, policy.act_batch(&[&s, &s]).unwrap());
    }
}
