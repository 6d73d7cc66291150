//! Demonstration corpora: the seed scan, the ID/OOD goal split, on-disk
//! format, and the batch samplers used by both learners.
//!
//! Split files are little-endian:
//!
//! ```text
//! "CGTR" | version u32 | trajectory count u32
//! per trajectory: seed u64 | article u8 | color u8 | type u8 | length u16
//!   per step:   192 grid bytes | direction u8 | action u8 | reward f32
//!   final state: 192 grid bytes | direction u8
//! ```
//!
//! with a `manifest.json` alongside.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::expert::Trajectory;
use crate::expert::{rollout_expert, ExpertError};
use crate::gridworld::{Article, EnvConfig, FactoredGrid, Goal, BALL, BOX, CELLS, KEY, NUM_GOALS};
use crate::rng::fnv1a;

pub const MAGIC: &[u8; 4] = b"CGTR";
pub const FORMAT_VERSION: u32 = 1;
pub const MIN_LENGTH: usize = 7;
pub const V_ID_PER_GOAL: usize = 20;
pub const V_OOD_PER_GOAL: usize = 40;
/// Sample sizes per goal used for sample-efficiency sweeps.
pub const N_GRID: [usize; 10] = [1, 5, 10, 50, 100, 250, 500, 1000, 2500, 10000];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(String),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("insufficient data: {0}")]
    Insufficient(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Expert(#[from] ExpertError),
}

/// Which (color, type) combinations are held out as goals.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ood_combinations: Vec<(u8, u8)>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        // red ball, green box, blue key, purple ball, grey box, yellow key
        SplitSpec {
            ood_combinations: vec![(2, BALL), (3, BOX), (1, KEY), (5, BALL), (6, BOX), (4, KEY)],
        }
    }
}

impl SplitSpec {
    pub fn is_ood(&self, goal: Goal) -> bool {
        self.ood_combinations.contains(&goal.combination())
    }

    pub fn id_goals(&self) -> Vec<Goal> {
        Goal::all().filter(|g| !self.is_ood(*g)).collect()
    }

    pub fn ood_goals(&self) -> Vec<Goal> {
        Goal::all().filter(|g| self.is_ood(*g)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_per_goal: usize,
    pub env: EnvConfig,
    pub split: SplitSpec,
    pub strict_ood_distractors: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_per_goal: 500,
            env: EnvConfig::default(),
            split: SplitSpec::default(),
            strict_ood_distractors: false,
        }
    }
}

impl DatasetConfig {
    pub fn with_n_per_goal(n_per_goal: usize) -> Self {
        DatasetConfig {
            n_per_goal,
            ..Default::default()
        }
    }

    /// Environment settings actually used for the seed scan.
    pub fn effective_env(&self) -> EnvConfig {
        let mut env = self.env.clone();
        if self.strict_ood_distractors {
            env.excluded_distractors = self.split.ood_combinations.clone();
        }
        env
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a(json.as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub n_per_goal: usize,
    pub seeds_scanned: u64,
    pub train_goals: usize,
    pub ood_goals: usize,
    pub train_count: usize,
    pub v_id_count: usize,
    pub v_ood_count: usize,
    pub ood_combinations: Vec<(u8, u8)>,
    pub num_objects: usize,
    pub strict_ood_distractors: bool,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub config: DatasetConfig,
    /// ID-goal trajectories, grouped by goal index, seed order within a goal.
    pub train: Vec<Trajectory>,
    pub v_id: Vec<Trajectory>,
    pub v_ood: Vec<Trajectory>,
    pub manifest: Manifest,
}

const SCAN_BLOCK: u64 = 2048;

fn scan_block(start: u64, env: &EnvConfig) -> Result<Vec<Trajectory>, ExpertError> {
    (start..start + SCAN_BLOCK).map(|s| rollout_expert(s, env)).collect()
}

/// Scans seeds `0, 1, 2, …` until every goal holds `n_per_goal`
/// demonstrations of at least [`MIN_LENGTH`] actions, then splits them.
pub fn build_dataset(config: &DatasetConfig) -> Result<DatasetBundle, DatasetError> {
    build_dataset_parallel(config, 1)
}

/// Same output as [`build_dataset`]; seed blocks are rolled out on
/// `threads` workers and merged in seed order.
pub fn build_dataset_parallel(config: &DatasetConfig, threads: usize) -> Result<DatasetBundle, DatasetError> {
    let n = config.n_per_goal;
    if n < V_OOD_PER_GOAL.max(V_ID_PER_GOAL) + 20 {
        return Err(DatasetError::Config(format!("n_per_goal must be at least 60, got {n}")));
    }
    let env = config.effective_env();
    env.validate().map_err(|e| DatasetError::Config(e.to_string()))?;
    let threads = threads.max(1) as u64;

    let mut per_goal: Vec<Vec<Trajectory>> = vec![Vec::new(); NUM_GOALS];
    let mut remaining = NUM_GOALS;
    let mut next_seed = 0u64;
    let mut seeds_scanned;
    'scan: loop {
        let starts: Vec<u64> = (0..threads).map(|i| next_seed + i * SCAN_BLOCK).collect();
        next_seed += threads * SCAN_BLOCK;
        let blocks: Vec<Result<Vec<Trajectory>, ExpertError>> = if threads == 1 {
            vec![scan_block(starts[0], &env)]
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = starts
                    .iter()
                    .map(|&s| {
                        let env = &env;
                        scope.spawn(move || scan_block(s, env))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("scan worker")).collect()
            })
        };
        for block in blocks {
            for traj in block? {
                seeds_scanned = traj.seed + 1;
                if traj.len() < MIN_LENGTH {
                    continue;
                }
                let bucket = &mut per_goal[traj.goal.index()];
                if bucket.len() < n {
                    bucket.push(traj);
                    if bucket.len() == n {
                        remaining -= 1;
                        if remaining == 0 {
                            break 'scan;
                        }
                    }
                }
            }
        }
    }

    let mut train = Vec::new();
    let mut v_id = Vec::new();
    let mut v_ood = Vec::new();
    let mut train_goals = 0;
    let mut ood_goals = 0;
    for (gi, mut bucket) in per_goal.into_iter().enumerate() {
        let goal = Goal::from_index(gi);
        if config.split.is_ood(goal) {
            ood_goals += 1;
            v_ood.extend(bucket.split_off(n - V_OOD_PER_GOAL));
        } else {
            train_goals += 1;
            v_id.extend(bucket.split_off(n - V_ID_PER_GOAL));
            train.extend(bucket);
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        n_per_goal: n,
        seeds_scanned,
        train_goals,
        ood_goals,
        train_count: train.len(),
        v_id_count: v_id.len(),
        v_ood_count: v_ood.len(),
        ood_combinations: config.split.ood_combinations.clone(),
        num_objects: config.env.num_objects,
        strict_ood_distractors: config.strict_ood_distractors,
        config_hash: config.hash(),
    };
    Ok(DatasetBundle {
        config: config.clone(),
        train,
        v_id,
        v_ood,
        manifest,
    })
}

/// Goal index → positions in `trajs`, goals in index order.
pub fn group_by_goal(trajs: &[Trajectory]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, t) in trajs.iter().enumerate() {
        groups.entry(t.goal.index()).or_default().push(i);
    }
    groups
}

/// First `n` training trajectories per goal, in seed-scan order.
pub fn subsample(train: &[Trajectory], n: usize) -> Result<Vec<Trajectory>, DatasetError> {
    let groups = group_by_goal(train);
    let mut out = Vec::with_capacity(groups.len() * n);
    for (gi, idx) in &groups {
        if idx.len() < n {
            return Err(DatasetError::Insufficient(format!(
                "goal `{}` has {} trajectories, {n} requested",
                Goal::from_index(*gi),
                idx.len()
            )));
        }
        out.extend(idx[..n].iter().map(|&i| train[i].clone()));
    }
    Ok(out)
}

/// Position of one state inside a trajectory list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StateRef {
    pub trajectory: usize,
    pub step: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiscriminatorTuple {
    pub anchor: StateRef,
    pub comparison: StateRef,
    pub goal: Goal,
    pub label: bool,
    /// Negative whose comparison state was drawn from before the end of
    /// its trajectory.
    pub mid_trajectory: bool,
}

pub struct DiscriminatorSampler<'a> {
    trajs: &'a [Trajectory],
    groups: Vec<Vec<usize>>,
    replace_prob: f64,
}

impl<'a> DiscriminatorSampler<'a> {
    pub fn new(trajs: &'a [Trajectory]) -> Result<Self, DatasetError> {
        let groups: Vec<Vec<usize>> = group_by_goal(trajs).into_values().collect();
        if groups.len() < 2 {
            return Err(DatasetError::Insufficient("need at least two goals".into()));
        }
        if let Some(g) = groups.iter().find(|g| g.len() < 2) {
            return Err(DatasetError::Insufficient(format!(
                "goal `{}` has fewer than two trajectories",
                trajs[g[0]].goal
            )));
        }
        Ok(DiscriminatorSampler {
            trajs,
            groups,
            replace_prob: 1.0 / NUM_GOALS as f64,
        })
    }

    pub fn state(&self, r: StateRef) -> &FactoredGrid {
        &self.trajs[r.trajectory].states[r.step]
    }

    fn end_state(&self, traj: usize) -> StateRef {
        StateRef {
            trajectory: traj,
            step: self.trajs[traj].len() - 1,
        }
    }

    /// `batch / 2` positive/negative pairs, emitted positive first.
    pub fn sample_batch<R: Rng>(&self, rng: &mut R, batch: usize) -> Vec<DiscriminatorTuple> {
        let mut out = Vec::with_capacity(batch);
        for _ in 0..batch / 2 {
            let picks = rand::seq::index::sample(rng, self.groups.len(), 2);
            let (pos_group, neg_group) = (&self.groups[picks.index(0)], &self.groups[picks.index(1)]);
            let pair = rand::seq::index::sample(rng, pos_group.len(), 2);
            let anchor = self.end_state(pos_group[pair.index(0)]);
            let positive = self.end_state(pos_group[pair.index(1)]);
            let neg_traj = *neg_group.choose(rng).expect("non-empty group");
            let mut negative = self.end_state(neg_traj);
            let mut mid_trajectory = false;
            if rng.random_bool(self.replace_prob) {
                // states before the rewarding pose
                negative.step = rng.random_range(0..self.trajs[neg_traj].len() - 1);
                mid_trajectory = true;
            }
            let goal = self.trajs[anchor.trajectory].goal;
            out.push(DiscriminatorTuple {
                anchor,
                comparison: positive,
                goal,
                label: true,
                mid_trajectory: false,
            });
            out.push(DiscriminatorTuple {
                anchor,
                comparison: negative,
                goal,
                label: false,
                mid_trajectory,
            });
        }
        out
    }
}

/// One behavioural-cloning transition with its discounted return.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BcSample {
    pub state: StateRef,
    pub action: u8,
    pub ret: f64,
}

/// `γ^(T−1−t) · r_T` for step `t` of a trajectory with `T` actions.
pub fn discounted_return(traj: &Trajectory, t: usize, gamma: f64) -> f64 {
    let last = traj.len() - 1;
    gamma.powi((last - t) as i32) * *traj.rewards.last().expect("non-empty") as f64
}

pub struct BcSampler<'a> {
    trajs: &'a [Trajectory],
    steps: Vec<StateRef>,
    gamma: f64,
}

impl<'a> BcSampler<'a> {
    pub fn new(trajs: &'a [Trajectory], gamma: f64) -> Result<Self, DatasetError> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(DatasetError::Config(format!("gamma must be in (0, 1], got {gamma}")));
        }
        let steps: Vec<StateRef> = trajs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.len()).map(move |s| StateRef { trajectory: i, step: s }))
            .collect();
        if steps.is_empty() {
            return Err(DatasetError::Insufficient("no transitions".into()));
        }
        Ok(BcSampler { trajs, steps, gamma })
    }

    pub fn transitions(&self) -> usize {
        self.steps.len()
    }

    pub fn state(&self, r: StateRef) -> &FactoredGrid {
        &self.trajs[r.trajectory].states[r.step]
    }

    pub fn goal(&self, r: StateRef) -> Goal {
        self.trajs[r.trajectory].goal
    }

    pub fn sample_batch<R: Rng>(&self, rng: &mut R, batch: usize) -> Vec<BcSample> {
        (0..batch)
            .map(|_| {
                let r = *self.steps.choose(rng).expect("non-empty");
                let traj = &self.trajs[r.trajectory];
                BcSample {
                    state: r,
                    action: traj.actions[r.step],
                    ret: discounted_return(traj, r.step, self.gamma),
                }
            })
            .collect()
    }
}

fn write_split<W: Write>(w: &mut W, trajs: &[Trajectory]) -> Result<(), DatasetError> {
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(FORMAT_VERSION)?;
    w.write_u32::<LE>(trajs.len() as u32)?;
    for t in trajs {
        w.write_u64::<LE>(t.seed)?;
        w.write_u8(match t.goal.article {
            Article::A => 0,
            Article::The => 1,
        })?;
        w.write_u8(t.goal.color)?;
        w.write_u8(t.goal.kind)?;
        w.write_u16::<LE>(t.len() as u16)?;
        for i in 0..t.len() {
            w.write_all(&t.states[i].to_bytes())?;
            w.write_u8(t.actions[i])?;
            w.write_f32::<LE>(t.rewards[i])?;
        }
        w.write_all(&t.final_state().to_bytes())?;
    }
    Ok(())
}

fn read_state<R: Read>(r: &mut R) -> Result<FactoredGrid, DatasetError> {
    let mut buf = [0u8; CELLS * 3 + 1];
    r.read_exact(&mut buf)?;
    FactoredGrid::from_bytes(&buf).ok_or_else(|| DatasetError::Format("bad state record".into()))
}

fn read_split<R: Read>(r: &mut R) -> Result<Vec<Trajectory>, DatasetError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DatasetError::Format(format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LE>()?;
    if version != FORMAT_VERSION {
        return Err(DatasetError::Format(format!("unsupported version {version}")));
    }
    let count = r.read_u32::<LE>()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let seed = r.read_u64::<LE>()?;
        let article = match r.read_u8()? {
            0 => Article::A,
            1 => Article::The,
            a => return Err(DatasetError::Format(format!("bad article {a}"))),
        };
        let color = r.read_u8()?;
        let kind = r.read_u8()?;
        if !(1..=6).contains(&color) || !(BOX..=KEY).contains(&kind) {
            return Err(DatasetError::Format(format!("bad goal ({color}, {kind})")));
        }
        let goal = Goal::new(article, color, kind);
        let len = r.read_u16::<LE>()? as usize;
        let mut t = Trajectory {
            seed,
            goal,
            states: Vec::with_capacity(len + 1),
            actions: Vec::with_capacity(len),
            rewards: Vec::with_capacity(len),
        };
        for _ in 0..len {
            t.states.push(read_state(r)?);
            t.actions.push(r.read_u8()?);
            t.rewards.push(r.read_f32::<LE>()?);
        }
        t.states.push(read_state(r)?);
        out.push(t);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(DatasetError::Format("trailing bytes after last trajectory".into()));
    }
    Ok(out)
}

pub const SPLIT_FILES: [&str; 3] = ["train.cgtr", "v_id.cgtr", "v_ood.cgtr"];

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    manifest: Manifest,
    config: DatasetConfig,
}

pub fn save(bundle: &DatasetBundle, dir: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(dir)?;
    for (name, trajs) in SPLIT_FILES.iter().zip([&bundle.train, &bundle.v_id, &bundle.v_ood]) {
        let mut buf = Vec::new();
        write_split(&mut buf, trajs)?;
        fs::write(dir.join(name), buf)?;
    }
    let file = ManifestFile {
        manifest: bundle.manifest.clone(),
        config: bundle.config.clone(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<DatasetBundle, DatasetError> {
    let file: ManifestFile = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let mut splits = Vec::with_capacity(3);
    for name in SPLIT_FILES {
        let bytes = fs::read(dir.join(name))?;
        splits.push(read_split(&mut bytes.as_slice()).map_err(|e| match e {
            DatasetError::Format(m) => DatasetError::Format(format!("{name}: {m}")),
            DatasetError::Io(io) => DatasetError::Format(format!("{name}: truncated ({io})")),
            other => other,
        })?);
    }
    let v_ood = splits.pop().expect("three splits");
    let v_id = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    let m = &file.manifest;
    if m.train_count != train.len() || m.v_id_count != v_id.len() || m.v_ood_count != v_ood.len() {
        return Err(DatasetError::Format(format!(
            "manifest counts ({}, {}, {}) disagree with files ({}, {}, {})",
            m.train_count,
            m.v_id_count,
            m.v_ood_count,
            train.len(),
            v_id.len(),
            v_ood.len()
        )));
    }
    Ok(DatasetBundle {
        config: file.config,
        train,
        v_id,
        v_ood,
        manifest: file.manifest,
    })
}
