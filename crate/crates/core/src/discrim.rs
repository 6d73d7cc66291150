//! Self-supervised training of `S(s, g)`: a mask module picks the cell the
//! agent faces, the discriminator scores `Σ M(s)·S(s, g)`, and an
//! image-matching loss on mask-weighted cell features trains the mask.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use diffcore::{adam_step, save_checkpoint, AdamConfig, AdamState, Error, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error as ThisError;

use crate::dataset::{DatasetError, DiscriminatorSampler, DiscriminatorTuple, Trajectory};
use crate::eval::soft_f1;
use crate::gridworld::{goal_to_instruction, FactoredGrid, Goal, Instruction, CELLS, GRID, NUM_COLORS, NUM_TYPES};
use crate::goalid::{GoalIdConfig, InteractionModel};
use crate::nn::{embedding, gather_rows, Conv, Factor, GridBatch, LookupConv, EMBED_DIM};
use crate::rng::stream;

pub const SCORE_CLAMP: f64 = 1e-6;

#[derive(Debug, ThisError)]
pub enum TrainError {
    #[error("non-finite loss at step {step}: {source}")]
    NonFinite { step: usize, source: Error },
    #[error(transparent)]
    Model(#[from] Error),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(String),
}

/// Convolutional spatial-softmax attention over cells.
#[derive(Clone, Debug)]
pub struct MaskModule {
    pub types: diffcore::ParamId,
    pub colors: diffcore::ParamId,
    pub conv1: LookupConv,
    pub conv2: Conv,
    pub conv3: Conv,
}

impl MaskModule {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, hidden: usize) -> Self {
        let types = embedding(store, rng, "mask.types", NUM_TYPES, EMBED_DIM);
        let colors = embedding(store, rng, "mask.colors", NUM_COLORS, EMBED_DIM);
        let conv1 = LookupConv::new(
            store,
            rng,
            "mask.conv1",
            &[(Factor::Type, EMBED_DIM), (Factor::Color, EMBED_DIM)],
            true,
            hidden,
        );
        let conv2 = Conv::new(store, rng, "mask.conv2", hidden, hidden, 1.0);
        let conv3 = Conv::new(store, rng, "mask.conv3", hidden, 1, 1.0);
        MaskModule {
            types,
            colors,
            conv1,
            conv2,
            conv3,
        }
    }

    /// Pre-softmax scores, `[B, 64]`.
    pub fn logits(&self, t: &mut Tape, p: &ParamStore, batch: &GridBatch) -> Result<Var, Error> {
        let et = t.param(p, self.types);
        let ec = t.param(p, self.colors);
        let h = self.conv1.apply(t, p, &[et, ec], batch)?;
        let h = t.relu(h)?;
        let h = t.reshape(h, &[batch.len, GRID, GRID, self.conv1.out])?;
        let h = self.conv2.apply(t, p, h)?;
        let h = t.relu(h)?;
        let h = self.conv3.apply(t, p, h)?;
        t.reshape(h, &[batch.len, CELLS])
    }

    /// `M(s)`: a distribution over the 64 cells per observation.
    pub fn mask(&self, t: &mut Tape, p: &ParamStore, batch: &GridBatch) -> Result<Var, Error> {
        let l = self.logits(t, p, batch)?;
        t.softmax(l, 1)
    }

    /// `I(s) = Σ M(s) ⊙ F(s)` with `F` the concatenated type and color
    /// embeddings of each cell; `[B, 64]`.
    pub fn image(&self, t: &mut Tape, p: &ParamStore, batch: &GridBatch, mask: Var) -> Result<Var, Error> {
        let et = t.param(p, self.types);
        let ec = t.param(p, self.colors);
        let it = t.embedding_bag(et, &batch.kinds, Some(mask), CELLS, &[batch.len])?;
        let ic = t.embedding_bag(ec, &batch.colors, Some(mask), CELLS, &[batch.len])?;
        t.concat(&[it, ic], 1)
    }
}

/// `D̂ = Σ M·S` per row, clamped to `[1e-6, 1 − 1e-6]`. Both inputs `[N, 64]`.
pub fn discriminator_score(t: &mut Tape, mask: Var, goal_map: Var) -> Result<Var, Error> {
    let prod = t.mul(mask, goal_map)?;
    let d = t.sum_axis(prod, 1)?;
    t.clamp(d, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
}

/// Mean binary cross-entropy of scores `d` (`[N]`) against `labels`.
pub fn interaction_loss(t: &mut Tape, d: Var, labels: &[bool]) -> Result<Var, Error> {
    let n = labels.len();
    let y = t.constant(Tensor::vector(labels.iter().map(|&l| f64::from(u8::from(l))).collect()));
    let not_y = t.constant(Tensor::vector(labels.iter().map(|&l| f64::from(u8::from(!l))).collect()));
    let log_d = t.log(d)?;
    let one_minus = t.scale(d, -1.0)?;
    let one_minus = t.offset(one_minus, 1.0)?;
    let log_1md = t.log(one_minus)?;
    let a = t.mul(y, log_d)?;
    let b = t.mul(not_y, log_1md)?;
    let s = t.add(a, b)?;
    let s = t.sum_all(s)?;
    t.scale(s, -1.0 / n as f64)
}

/// Mean of `(Î(s₁)·Î(s₂) − y)²` over rows of two `[N, D]` images.
pub fn image_matching_loss(t: &mut Tape, img1: Var, img2: Var, labels: &[bool]) -> Result<Var, Error> {
    for &img in &[img1, img2] {
        let d = t.shape(img)[1];
        if let Some(r) = t.value(img).data().chunks_exact(d).position(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-12) {
            return Err(Error::invalid("image_matching_loss", format!("mask-weighted image {r} has zero norm")));
        }
    }
    let a = t.l2_normalize(img1)?;
    let b = t.l2_normalize(img2)?;
    let prod = t.mul(a, b)?;
    let cos = t.sum_axis(prod, 1)?;
    let y = t.constant(Tensor::vector(labels.iter().map(|&l| f64::from(u8::from(l))).collect()));
    let err = t.sub(cos, y)?;
    let sq = t.square(err)?;
    t.mean_all(sq)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub lr: f64,
    /// Learning rate reached at the last step, decayed geometrically from
    /// `lr`; constant when absent.
    #[serde(default)]
    pub final_lr: Option<f64>,
    /// Leading steps that train the mask alone, so `S` is only fitted once
    /// the mask points at single cells.
    #[serde(default)]
    pub mask_warmup: usize,
    /// Separate constant learning rate for the mask module.
    #[serde(default)]
    pub mask_lr: Option<f64>,
    /// Adam's ε. Large enough that parameters seeing only tiny, noisy
    /// gradients are not pushed a full learning rate per step.
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    pub batch: usize,
    pub steps: usize,
    pub eval_period: usize,
    pub seed: u64,
    /// Stop `L_int` gradients at the mask and keep `L_img` off `S`.
    pub routed: bool,
    pub mask_hidden: usize,
    pub keep_top: usize,
}

fn default_eps() -> f64 {
    1e-4
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            lr: 1e-2,
            final_lr: None,
            mask_warmup: 0,
            mask_lr: Some(1e-4),
            adam_eps: default_eps(),
            batch: 1024,
            steps: 20_000,
            eval_period: 500,
            seed: 0,
            routed: true,
            mask_hidden: 8,
            keep_top: 10,
        }
    }
}

/// Both trainable halves, registered in one store.
#[derive(Clone, Debug)]
pub struct GoalIdSystem {
    pub model: InteractionModel,
    pub mask: MaskModule,
}

impl GoalIdSystem {
    pub fn new(store: &mut ParamStore, seed: u64, config: GoalIdConfig, mask_hidden: usize) -> Self {
        let mut rng = stream(seed, "goalid.init");
        let model = InteractionModel::new(store, &mut rng, config);
        let mask = MaskModule::new(store, &mut rng, mask_hidden);
        GoalIdSystem { model, mask }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub l_int: f64,
    pub l_img: f64,
    pub l1: f64,
}

/// Builds `L_int + L_img + L1` for one batch of tuples.
pub fn discriminator_loss(
    t: &mut Tape,
    p: &ParamStore,
    sys: &GoalIdSystem,
    sampler: &DiscriminatorSampler<'_>,
    tuples: &[DiscriminatorTuple],
    routed: bool,
) -> Result<(Var, [Var; 3]), Error> {
    // each anchor appears in two consecutive tuples; index unique states
    let mut refs = Vec::with_capacity(tuples.len() * 3 / 2);
    let mut first = Vec::with_capacity(tuples.len());
    let mut second = Vec::with_capacity(tuples.len());
    let mut anchor_slot = 0;
    for (i, tu) in tuples.iter().enumerate() {
        if i == 0 || tuples[i - 1].anchor != tu.anchor {
            anchor_slot = refs.len();
            refs.push(tu.anchor);
        }
        first.push(anchor_slot);
        refs.push(tu.comparison);
        second.push(refs.len() - 1);
    }
    let grids: Vec<&FactoredGrid> = refs.iter().map(|&r| sampler.state(r)).collect();
    let batch = GridBatch::new(grids.iter().copied());
    let labels: Vec<bool> = tuples.iter().map(|t| t.label).collect();

    let mask = sys.mask.mask(t, p, &batch)?;
    let image = sys.mask.image(t, p, &batch, mask)?;
    let i1 = gather_rows(t, image, &first)?;
    let i2 = gather_rows(t, image, &second)?;
    let l_img = image_matching_loss(t, i1, i2, &labels)?;

    let mask_for_int = if routed { t.detach(mask) } else { mask };
    let m2 = gather_rows(t, mask_for_int, &second)?;
    let s2: Vec<&FactoredGrid> = second.iter().map(|&i| grids[i]).collect();
    let instr: Vec<Instruction> = tuples.iter().map(|tu| goal_to_instruction(tu.goal)).collect();
    let s_map = sys.model.goal_map(t, p, &s2, &instr)?;
    let d = discriminator_score(t, m2, s_map)?;
    let l_int = interaction_loss(t, d, &labels)?;

    let l1 = sys.model.l1_penalty(t, p)?;
    let total = t.add(l_int, l_img)?;
    let total = t.add(total, l1)?;
    Ok((total, [l_int, l_img, l1]))
}

/// Per-trajectory soft-F1 of `S` on each trajectory's final state.
pub fn evaluate_f1(model: &InteractionModel, p: &ParamStore, trajs: &[Trajectory]) -> Result<Vec<f64>, TrainError> {
    let grids: Vec<&FactoredGrid> = trajs.iter().map(|t| t.final_state()).collect();
    let goals: Vec<Goal> = trajs.iter().map(|t| t.goal).collect();
    let maps = model.predict(p, &grids, &goals)?;
    maps.iter()
        .zip(&grids)
        .zip(&goals)
        .map(|((m, g), goal)| Ok(soft_f1(m, &g.goal_cells(*goal))?.f1))
        .collect()
}

/// Fraction of observations whose mask argmax is the cell the agent faces.
pub fn mask_accuracy(mask: &MaskModule, p: &ParamStore, grids: &[&FactoredGrid]) -> Result<f64, Error> {
    let mut hits = 0;
    for chunk in grids.chunks(512) {
        let mut t = Tape::new();
        let batch = GridBatch::new(chunk.iter().copied());
        let l = mask.logits(&mut t, p, &batch)?;
        for (row, g) in t.value(l).data().chunks(CELLS).zip(chunk) {
            if g.faced_pos() == Some(crate::eval::argmax(row)) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / grids.len().max(1) as f64)
}

/// Mean `D̂` over positive and over negative tuples.
pub fn score_separation(
    sys: &GoalIdSystem,
    p: &ParamStore,
    sampler: &DiscriminatorSampler<'_>,
    tuples: &[DiscriminatorTuple],
) -> Result<(f64, f64), Error> {
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for chunk in tuples.chunks(512) {
        let mut t = Tape::new();
        let grids: Vec<&FactoredGrid> = chunk.iter().map(|tu| sampler.state(tu.comparison)).collect();
        let batch = GridBatch::new(grids.iter().copied());
        let instr: Vec<Instruction> = chunk.iter().map(|tu| goal_to_instruction(tu.goal)).collect();
        let m = sys.mask.mask(&mut t, p, &batch)?;
        let s = sys.model.goal_map(&mut t, p, &grids, &instr)?;
        let d = discriminator_score(&mut t, m, s)?;
        for (&v, tu) in t.value(d).data().iter().zip(chunk) {
            if tu.label { pos.push(v) } else { neg.push(v) }
        }
    }
    Ok((mean(&pos), mean(&neg)))
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub loss: LossTerms,
    pub f1_vid: f64,
    pub f1_vood: f64,
}

pub const METRIC_HEADER: &str = "step,loss,l_int,l_img,l1,f1_vid,f1_vood";

impl MetricRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.9},{:.9},{:.9},{:.9},{:.6},{:.6}",
            self.step, self.loss.total, self.loss.l_int, self.loss.l_img, self.loss.l1, self.f1_vid, self.f1_vood
        )
    }
}

#[derive(Clone, Debug)]
pub struct Snapshot {
    pub step: usize,
    pub f1_vid: f64,
    pub f1_vood: f64,
    pub params: ParamStore,
}

#[derive(Clone, Debug)]
pub struct TrainedGoalId {
    pub system: GoalIdSystem,
    pub params: ParamStore,
    pub log: Vec<MetricRow>,
    /// Best checkpoints by mean v_ID soft-F1, best first.
    pub top: Vec<Snapshot>,
}

/// Written next to checkpoints so they can be rebuilt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalIdManifest {
    pub model: GoalIdConfig,
    pub training: DiscriminatorConfig,
    pub checkpoints: Vec<(usize, String, f64, f64)>,
}

/// `lr · (final_lr / lr)^(step / (steps − 1))`.
pub fn scheduled_lr(cfg: &DiscriminatorConfig, step: usize) -> f64 {
    match cfg.final_lr {
        Some(end) if cfg.steps > 1 => cfg.lr * (end / cfg.lr).powf(step as f64 / (cfg.steps - 1) as f64),
        _ => cfg.lr,
    }
}

pub fn checkpoint_name(step: usize) -> String {
    format!("goalid_step{step:06}.cgck")
}

/// Adam on `L_int + L_img + L1`, evaluating mean soft-F1 every
/// `eval_period` steps and retaining the best `keep_top` snapshots.
/// With `out`, writes `metrics.csv`, the retained checkpoints,
/// `goalid_final.cgck` and `goalid.json`.
pub fn train_goalid(
    train: &[Trajectory],
    v_id: &[Trajectory],
    v_ood: &[Trajectory],
    model_cfg: GoalIdConfig,
    cfg: &DiscriminatorConfig,
    out: Option<&Path>,
) -> Result<TrainedGoalId, TrainError> {
    if cfg.batch < 2 || cfg.batch % 2 != 0 || cfg.eval_period == 0 || cfg.mask_hidden == 0 {
        return Err(TrainError::Config("batch must be even and ≥ 2; eval period and mask width positive".into()));
    }
    if cfg.final_lr.is_some_and(|l| !(l > 0.0)) || cfg.mask_lr.is_some_and(|l| !(l > 0.0)) || !(cfg.adam_eps > 0.0) {
        return Err(TrainError::Config("learning rates must be positive".into()));
    }
    let sampler = DiscriminatorSampler::new(train)?;
    let mut params = ParamStore::new();
    let system = GoalIdSystem::new(&mut params, cfg.seed, model_cfg.clone(), cfg.mask_hidden);
    let adam_cfg = AdamConfig {
        eps: cfg.adam_eps,
        ..AdamConfig::with_lr(cfg.lr)
    };
    let mut adam = AdamState::new(adam_cfg, &params);
    let mask_ids: Vec<_> = params.iter().filter(|(_, name, _)| name.starts_with("mask.")).map(|(id, _, _)| id).collect();
    let mut rng = stream(cfg.seed, "goalid.batches");

    let mut csv = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut f = fs::File::create(dir.join("metrics.csv"))?;
            writeln!(f, "{METRIC_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut top: Vec<Snapshot> = Vec::new();
    for step in 0..cfg.steps {
        adam.config.lr = scheduled_lr(cfg, step);
        let tuples = sampler.sample_batch(&mut rng, cfg.batch);
        let mut t = Tape::new();
        let (total, [l_int, l_img, l1]) = discriminator_loss(&mut t, &params, &system, &sampler, &tuples, cfg.routed)
            .map_err(|e| TrainError::NonFinite { step, source: e })?;
        let grads = t.backward(if step < cfg.mask_warmup { l_img } else { total })?;
        let before: Vec<Tensor> = match cfg.mask_lr {
            Some(_) => mask_ids.iter().map(|&id| params.get(id).clone()).collect(),
            None => Vec::new(),
        };
        adam_step(&mut params, &grads, &mut adam).map_err(|e| TrainError::NonFinite { step, source: e })?;
        if let Some(mask_lr) = cfg.mask_lr {
            // an Adam update is linear in the learning rate
            let ratio = mask_lr / adam.config.lr;
            for (&id, old) in mask_ids.iter().zip(&before) {
                for (new, &o) in params.get_mut(id).data_mut().iter_mut().zip(old.data()) {
                    *new = o + ratio * (*new - o);
                }
            }
        }

        if (step + 1) % cfg.eval_period == 0 {
            let f1_vid = mean(&evaluate_f1(&system.model, &params, v_id)?);
            let f1_vood = mean(&evaluate_f1(&system.model, &params, v_ood)?);
            let row = MetricRow {
                step: step + 1,
                loss: LossTerms {
                    total: t.value(total).item(),
                    l_int: t.value(l_int).item(),
                    l_img: t.value(l_img).item(),
                    l1: t.value(l1).item(),
                },
                f1_vid,
                f1_vood,
            };
            if let Some(f) = csv.as_mut() {
                writeln!(f, "{}", row.csv())?;
            }
            log.push(row);
            top.push(Snapshot {
                step: step + 1,
                f1_vid,
                f1_vood,
                params: params.clone(),
            });
            // stable: earlier checkpoints win ties
            top.sort_by(|a, b| b.f1_vid.total_cmp(&a.f1_vid));
            top.truncate(cfg.keep_top);
        }
    }

    if let Some(dir) = out {
        let mut entries = Vec::new();
        for s in &top {
            let name = checkpoint_name(s.step);
            save_checkpoint(&dir.join(&name), &s.params, None)?;
            entries.push((s.step, name, s.f1_vid, s.f1_vood));
        }
        save_checkpoint(&dir.join("goalid_final.cgck"), &params, Some(&adam))?;
        let manifest = GoalIdManifest {
            model: model_cfg,
            training: cfg.clone(),
            checkpoints: entries,
        };
        fs::write(
            dir.join("goalid.json"),
            serde_json::to_string_pretty(&manifest).map_err(|e| TrainError::Config(e.to_string()))?,
        )?;
    }
    Ok(TrainedGoalId {
        system,
        params,
        log,
        top,
    })
}

/// Rebuilds the model described by `goalid.json` in `dir` and loads one
/// checkpoint (`None` for the final weights).
pub fn load_goalid(dir: &Path, checkpoint: Option<&str>) -> Result<(GoalIdManifest, GoalIdSystem, ParamStore), TrainError> {
    let manifest: GoalIdManifest = serde_json::from_slice(&fs::read(dir.join("goalid.json"))?)
        .map_err(|e| TrainError::Config(format!("{}: {e}", dir.join("goalid.json").display())))?;
    let mut params = ParamStore::new();
    let system = GoalIdSystem::new(&mut params, manifest.training.seed, manifest.model.clone(), manifest.training.mask_hidden);
    let path: PathBuf = dir.join(checkpoint.unwrap_or("goalid_final.cgck"));
    let (loaded, _) = diffcore::load_checkpoint(&path)?;
    params.load_from(&loaded)?;
    Ok((manifest, system, params))
}
