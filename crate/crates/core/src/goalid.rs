//! Goal-identification scorers `S(s, g)`: per-factor normalized word/attribute
//! attention combined by a product over factors, with an L1 penalty on the
//! full word × attribute cosine matrix.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use diffcore::{ParamId, ParamStore, Result, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::gridworld::{
    color_word, goal_to_instruction, type_word, FactoredGrid, Goal, Instruction, AGENT, BALL, BOX, CELLS,
    COLOR_NAMES, EMPTY, INSTRUCTION_LEN, KEY, NUM_COLORS, NUM_TYPES, TYPE_NAMES, VOCAB, VOCAB_SIZE, WALL,
};
use crate::nn::{embedding, GridBatch, EMBED_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    SparseFactored,
    Factored,
    Sparse,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::SparseFactored, Variant::Factored, Variant::Sparse];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SparseFactored => "sparse-factored",
            Variant::Factored => "factored",
            Variant::Sparse => "sparse",
        }
    }

    pub fn default_lambda1(self) -> f64 {
        match self {
            Variant::Factored => 0.0,
            _ => 0.03,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant `{s}` (expected sparse-factored, factored or sparse)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalIdConfig {
    pub variant: Variant,
    pub lambda1: f64,
    pub include_held: bool,
}

impl GoalIdConfig {
    pub fn new(variant: Variant) -> Self {
        GoalIdConfig {
            variant,
            lambda1: variant.default_lambda1(),
            include_held: false,
        }
    }
}

/// Attribute values a cell can show in the non-factored variant: empty,
/// wall, agent and the 18 coloured objects.
pub fn realizable_combinations() -> Vec<(u8, u8)> {
    let mut out = vec![(EMPTY, 0), (WALL, 0), (AGENT, 0)];
    for kind in [BOX, BALL, KEY] {
        for color in 1..NUM_COLORS as u8 {
            out.push((kind, color));
        }
    }
    out
}

const HELD_VALUES: usize = 2;

#[derive(Clone, Debug)]
pub struct InteractionModel {
    pub config: GoalIdConfig,
    pub words: ParamId,
    pub types: ParamId,
    pub colors: ParamId,
    pub held: Option<ParamId>,
    pub alpha: ParamId,
    pub beta: ParamId,
}

impl InteractionModel {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, config: GoalIdConfig) -> Self {
        let word_dim = match config.variant {
            Variant::Sparse => 2 * EMBED_DIM,
            _ => EMBED_DIM,
        };
        let words = embedding(store, rng, "goalid.words", VOCAB_SIZE, word_dim);
        let types = embedding(store, rng, "goalid.types", NUM_TYPES, EMBED_DIM);
        let colors = embedding(store, rng, "goalid.colors", NUM_COLORS, EMBED_DIM);
        let held = (config.include_held && config.variant != Variant::Sparse)
            .then(|| embedding(store, rng, "goalid.held", HELD_VALUES, EMBED_DIM));
        let alpha = store.add("goalid.alpha", Tensor::vector(vec![1.0]));
        let beta = store.add("goalid.beta", Tensor::vector(vec![0.0]));
        InteractionModel {
            config,
            words,
            types,
            colors,
            held,
            alpha,
            beta,
        }
    }

    /// Row-normalized attribute tables scored against words: one per factor,
    /// or the single concatenated table for the non-factored variant.
    fn attribute_tables(&self, t: &mut Tape, p: &ParamStore, realizable_only: bool) -> Result<Vec<Var>> {
        let types = t.param(p, self.types);
        let colors = t.param(p, self.colors);
        match self.config.variant {
            Variant::Sparse => {
                let combos: Vec<(usize, usize)> = if realizable_only {
                    realizable_combinations().iter().map(|&(k, c)| (k as usize, c as usize)).collect()
                } else {
                    (0..NUM_TYPES).flat_map(|k| (0..NUM_COLORS).map(move |c| (k, c))).collect()
                };
                let ki: Vec<usize> = combos.iter().map(|c| c.0).collect();
                let ci: Vec<usize> = combos.iter().map(|c| c.1).collect();
                let et = t.embedding(types, &ki, &[ki.len()])?;
                let ec = t.embedding(colors, &ci, &[ci.len()])?;
                let cat = t.concat(&[et, ec], 1)?;
                Ok(vec![t.l2_normalize(cat)?])
            }
            _ => {
                let mut out = vec![t.l2_normalize(types)?, t.l2_normalize(colors)?];
                if let Some(h) = self.held {
                    let h = t.param(p, h);
                    out.push(t.l2_normalize(h)?);
                }
                Ok(out)
            }
        }
    }

    /// Per-cell attribute index into each table of `attribute_tables(.., false)`.
    fn cell_values(&self, batch: &GridBatch, held: &[usize]) -> Vec<(Vec<usize>, usize)> {
        match self.config.variant {
            Variant::Sparse => {
                let idx = batch.kinds.iter().zip(&batch.colors).map(|(k, c)| k * NUM_COLORS + c).collect();
                vec![(idx, NUM_TYPES * NUM_COLORS)]
            }
            _ => {
                let mut out = vec![(batch.kinds.clone(), NUM_TYPES), (batch.colors.clone(), NUM_COLORS)];
                if self.held.is_some() {
                    out.push((held.to_vec(), HELD_VALUES));
                }
                out
            }
        }
    }

    /// `S(s, g)` for each `(grids[i], instructions[i])` as a `[B, 64]` map.
    pub fn goal_map(
        &self,
        t: &mut Tape,
        p: &ParamStore,
        grids: &[&FactoredGrid],
        instructions: &[Instruction],
    ) -> Result<Var> {
        assert_eq!(grids.len(), instructions.len(), "one instruction per grid");
        let b = grids.len();
        let batch = GridBatch::new(grids.iter().copied());
        let held: Vec<usize> = grids.iter().flat_map(|g| g.cells.iter().map(|c| c[2].min(1) as usize)).collect();

        let words = t.param(p, self.words);
        let words = t.l2_normalize(words)?;
        let tokens: Vec<usize> = instructions.iter().flat_map(|i| i.tokens().map(|w| w as usize)).collect();
        let query = t.embedding_bag(words, &tokens, None, INSTRUCTION_LEN, &[b])?;

        let alpha = t.param(p, self.alpha);
        let beta = t.param(p, self.beta);
        let tables = self.attribute_tables(t, p, false)?;
        let values = self.cell_values(&batch, &held);
        let mut log_parts = Vec::with_capacity(tables.len());
        let mut idx = vec![0usize; b * CELLS * tables.len()];
        let mut base = 0;
        for (f, (table, (cell_vals, nvals))) in tables.into_iter().zip(values).enumerate() {
            let tt = t.transpose(table)?;
            let dots = t.matmul(query, tt)?;
            let a = t.broadcast_to(alpha, &[b, nvals])?;
            let bb = t.broadcast_to(beta, &[b, nvals])?;
            let z = t.mul(dots, a)?;
            let z = t.add(z, bb)?;
            let ls = t.log_sigmoid(z)?;
            log_parts.push(t.reshape(ls, &[b * nvals, 1])?);
            let nf = idx.len() / (b * CELLS);
            for (cell, &v) in cell_vals.iter().enumerate() {
                let sample = cell / CELLS;
                idx[cell * nf + f] = base + sample * nvals + v;
            }
            base += b * nvals;
        }
        let nf = log_parts.len();
        let table = t.concat(&log_parts, 0)?;
        let summed = t.embedding_bag(table, &idx, None, nf, &[b, CELLS])?;
        let summed = t.reshape(summed, &[b, CELLS])?;
        t.exp(summed)
    }

    /// `λ₁ Σ |ĉ·ĝ|` over every attribute value and word.
    pub fn l1_penalty(&self, t: &mut Tape, p: &ParamStore) -> Result<Var> {
        if self.config.lambda1 == 0.0 {
            return Ok(t.constant(Tensor::scalar(0.0)));
        }
        let words = t.param(p, self.words);
        let words = t.l2_normalize(words)?;
        let wt = t.transpose(words)?;
        let mut total: Option<Var> = None;
        for table in self.attribute_tables(t, p, true)? {
            let m = t.matmul(table, wt)?;
            let m = t.abs(m)?;
            let s = t.sum_all(m)?;
            total = Some(match total {
                Some(acc) => t.add(acc, s)?,
                None => s,
            });
        }
        t.scale(total.expect("at least one factor"), self.config.lambda1)
    }

    /// Goal maps without gradients, one per `(grid, goal)` pair.
    pub fn predict(&self, p: &ParamStore, grids: &[&FactoredGrid], goals: &[Goal]) -> Result<Vec<[f64; CELLS]>> {
        let mut out = Vec::with_capacity(grids.len());
        for (gs, ks) in grids.chunks(1024).zip(goals.chunks(1024)) {
            let mut t = Tape::new();
            let instr: Vec<Instruction> = ks.iter().map(|g| goal_to_instruction(*g)).collect();
            let m = self.goal_map(&mut t, p, gs, &instr)?;
            for row in t.value(m).data().chunks_exact(CELLS) {
                out.push(row.try_into().expect("64 cells"));
            }
        }
        Ok(out)
    }
}

/// Normalized word × attribute dot products for one factor.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorMatrix {
    pub factor: String,
    pub values: Vec<String>,
    /// `VOCAB_SIZE` rows of `values.len()` entries.
    pub entries: Vec<Vec<f64>>,
}

impl FactorMatrix {
    pub fn get(&self, word: usize, value: usize) -> f64 {
        self.entries[word][value]
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = fs::File::create(path)?;
        writeln!(f, "word,{}", self.values.join(","))?;
        for (w, row) in self.entries.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(f, "{},{}", VOCAB[w], cells.join(","))?;
        }
        Ok(())
    }

    /// 8-bit greyscale heatmap, `scale` pixels per entry; |value| maps to brightness.
    pub fn write_pgm(&self, path: &Path, scale: usize) -> std::io::Result<()> {
        let (rows, cols) = (self.entries.len(), self.values.len());
        let (w, h) = (cols * scale, rows * scale);
        let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
        for y in 0..h {
            for x in 0..w {
                let v = self.entries[y / scale][x / scale].abs().min(1.0);
                buf.push((v * 255.0).round() as u8);
            }
        }
        fs::write(path, buf)
    }
}

fn normalized_rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data()
        .chunks_exact(t.shape()[1])
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(diffcore::NORM_FLOOR);
            r.iter().map(|x| x / n).collect()
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Entry `(w, v)` is `ĝ_w · ĉ_v`, one matrix per factor (a single matrix
/// over realizable type/color combinations for the non-factored variant).
pub fn interaction_matrix(model: &InteractionModel, p: &ParamStore) -> Vec<FactorMatrix> {
    let words = normalized_rows(p.get(model.words));
    let build = |factor: &str, values: Vec<String>, attrs: Vec<Vec<f64>>| FactorMatrix {
        factor: factor.to_string(),
        values,
        entries: words.iter().map(|w| attrs.iter().map(|a| dot(w, a)).collect()).collect(),
    };
    let types = normalized_rows(p.get(model.types));
    let colors = normalized_rows(p.get(model.colors));
    match model.config.variant {
        Variant::Sparse => {
            let combos = realizable_combinations();
            let names = combos
                .iter()
                .map(|&(k, c)| match k {
                    BOX | BALL | KEY => format!("{} {}", COLOR_NAMES[c as usize], TYPE_NAMES[k as usize]),
                    _ => TYPE_NAMES[k as usize].to_string(),
                })
                .collect();
            let raw = p.get(model.types).data().chunks_exact(EMBED_DIM).collect::<Vec<_>>();
            let rawc = p.get(model.colors).data().chunks_exact(EMBED_DIM).collect::<Vec<_>>();
            let attrs = combos
                .iter()
                .map(|&(k, c)| {
                    let cat: Vec<f64> = raw[k as usize].iter().chain(rawc[c as usize]).copied().collect();
                    let n = cat.iter().map(|x| x * x).sum::<f64>().sqrt().max(diffcore::NORM_FLOOR);
                    cat.iter().map(|x| x / n).collect()
                })
                .collect();
            vec![build("combination", names, attrs)]
        }
        _ => {
            let mut out = vec![
                build("type", TYPE_NAMES.iter().map(|s| s.to_string()).collect(), types),
                build("color", COLOR_NAMES.iter().map(|s| s.to_string()).collect(), colors),
            ];
            if let Some(h) = model.held {
                out.push(build("held", vec!["no".into(), "yes".into()], normalized_rows(p.get(h))));
            }
            out
        }
    }
}

/// The nine (word, factor, value) pairs a perfect learner grounds.
pub fn ground_truth_pairs() -> Vec<(usize, &'static str, usize)> {
    let mut out: Vec<(usize, &'static str, usize)> =
        (1..NUM_COLORS as u8).map(|c| (color_word(c), "color", c as usize)).collect();
    out.extend([BOX, BALL, KEY].map(|k| (type_word(k), "type", k as usize)));
    out
}
