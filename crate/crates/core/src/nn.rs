//! Layers shared by the mask module, the propagation network and the
//! policy heads.

use diffcore::{ParamId, ParamStore, Result, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::gridworld::{FactoredGrid, CELLS, GRID};

pub const EMBED_DIM: usize = 32;

pub fn gaussian<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("shape matches")
}

/// Embedding table initialised with scale `1/√dim`.
pub fn embedding<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, rows: usize, dim: usize) -> ParamId {
    store.add(name, gaussian(rng, &[rows, dim], 1.0 / (dim as f64).sqrt()))
}

/// Categorical planes of a batch of observations, flattened cell-major.
#[derive(Clone, Debug, Default)]
pub struct GridBatch {
    pub len: usize,
    pub kinds: Vec<usize>,
    pub colors: Vec<usize>,
    pub directions: Vec<usize>,
}

impl GridBatch {
    pub fn new<'a>(grids: impl IntoIterator<Item = &'a FactoredGrid>) -> Self {
        let mut b = GridBatch::default();
        for g in grids {
            b.len += 1;
            b.kinds.extend(g.cells.iter().map(|c| c[0] as usize));
            b.colors.extend(g.cells.iter().map(|c| c[1] as usize));
            b.directions.push(g.direction as usize);
        }
        b
    }

    pub fn factor(&self, f: Factor) -> &[usize] {
        match f {
            Factor::Type => &self.kinds,
            Factor::Color => &self.colors,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Factor {
    Type,
    Color,
}

/// `NEIGHBOURS[cell][k]` is the cell at 3×3 offset `k = (dr+1)*3 + (dc+1)`.
pub fn neighbours() -> &'static [[Option<usize>; 9]; CELLS] {
    use std::sync::OnceLock;
    static N: OnceLock<[[Option<usize>; 9]; CELLS]> = OnceLock::new();
    N.get_or_init(|| {
        let mut out = [[None; 9]; CELLS];
        for (cell, row) in out.iter_mut().enumerate() {
            let (r, c) = ((cell / GRID) as isize, (cell % GRID) as isize);
            for (k, slot) in row.iter_mut().enumerate() {
                let (nr, nc) = (r + k as isize / 3 - 1, c + k as isize % 3 - 1);
                if (0..GRID as isize).contains(&nr) && (0..GRID as isize).contains(&nc) {
                    *slot = Some((nr * GRID as isize + nc) as usize);
                }
            }
        }
        out
    })
}

/// A 3×3 same-padded convolution whose input is a stack of embedded
/// categorical planes and (optionally) one-hot direction planes.
///
/// Each factor's kernel is folded into its embedding table, so the layer
/// becomes a sum of 9 gathered rows per plane instead of a dense conv.
#[derive(Clone, Debug)]
pub struct LookupConv {
    pub factors: Vec<(Factor, ParamId)>,
    pub direction: Option<ParamId>,
    pub bias: ParamId,
    pub out: usize,
}

impl LookupConv {
    /// `factors` pairs each plane with its embedding width.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        factors: &[(Factor, usize)],
        direction: bool,
        out: usize,
    ) -> Self {
        let fan_in = 9 * (factors.iter().map(|f| f.1).sum::<usize>() + if direction { 4 } else { 0 });
        let std = (2.0 / fan_in as f64).sqrt();
        let factors = factors
            .iter()
            .map(|&(f, dim)| {
                let tag = match f {
                    Factor::Type => "type",
                    Factor::Color => "color",
                };
                (f, store.add(format!("{name}.k_{tag}"), gaussian(rng, &[dim, 9 * out], std)))
            })
            .collect();
        let direction = direction.then(|| store.add(format!("{name}.k_dir"), gaussian(rng, &[4, 9 * out], std)));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out]));
        LookupConv {
            factors,
            direction,
            bias,
            out,
        }
    }

    /// `embeds[i]` is the `[values, dim]` table for `self.factors[i]`.
    /// Returns `[B, 64, out]` pre-activations.
    pub fn apply(&self, t: &mut Tape, p: &ParamStore, embeds: &[Var], batch: &GridBatch) -> Result<Var> {
        let h = self.out;
        let mut parts = Vec::new();
        let mut offsets = Vec::new();
        let mut rows = 0;
        for (&(_, kernel), &emb) in self.factors.iter().zip(embeds) {
            let k = t.param(p, kernel);
            let folded = t.matmul(emb, k)?;
            let v = t.shape(emb)[0];
            parts.push(t.reshape(folded, &[v * 9, h])?);
            offsets.push(rows);
            rows += v * 9;
        }
        let dir_offset = rows;
        if let Some(d) = self.direction {
            let k = t.param(p, d);
            parts.push(t.reshape(k, &[36, h])?);
            rows += 36;
        }
        let zero_row = rows;
        parts.push(t.constant(Tensor::zeros(&[1, h])));
        let table = t.concat(&parts, 0)?;

        let nb = neighbours();
        let bag = 9 * (self.factors.len() + usize::from(self.direction.is_some()));
        let mut idx = Vec::with_capacity(batch.len * CELLS * bag);
        for b in 0..batch.len {
            for cell_nb in nb.iter() {
                for (fi, &(f, _)) in self.factors.iter().enumerate() {
                    let values = &batch.factor(f)[b * CELLS..(b + 1) * CELLS];
                    for (k, n) in cell_nb.iter().enumerate() {
                        idx.push(n.map_or(zero_row, |n| offsets[fi] + values[n] * 9 + k));
                    }
                }
                if self.direction.is_some() {
                    let d = batch.directions[b];
                    for (k, n) in cell_nb.iter().enumerate() {
                        idx.push(n.map_or(zero_row, |_| dir_offset + d * 9 + k));
                    }
                }
            }
        }
        let out = t.embedding_bag(table, &idx, None, bag, &[batch.len, CELLS])?;
        let bias = t.param(p, self.bias);
        let bias = t.broadcast_to(bias, &[batch.len, CELLS, h])?;
        t.add(out, bias)
    }
}

/// Dense 3×3 same-padded convolution with bias over `[B, 8, 8, C]`.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub out: usize,
}

impl Conv {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cin: usize, out: usize, gain: f64) -> Self {
        let std = gain * (2.0 / (9 * cin) as f64).sqrt();
        Conv {
            weight: store.add(format!("{name}.w"), gaussian(rng, &[3, 3, cin, out], std)),
            bias: store.add(format!("{name}.b"), Tensor::zeros(&[out])),
            out,
        }
    }

    pub fn apply(&self, t: &mut Tape, p: &ParamStore, x: Var) -> Result<Var> {
        let w = t.param(p, self.weight);
        let y = t.conv2d(x, w)?;
        let shape = t.shape(y).to_vec();
        let b = t.param(p, self.bias);
        let b = t.broadcast_to(b, &shape)?;
        t.add(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cin: usize, out: usize, gain: f64) -> Self {
        let std = gain * (2.0 / cin as f64).sqrt();
        Linear {
            weight: store.add(format!("{name}.w"), gaussian(rng, &[cin, out], std)),
            bias: store.add(format!("{name}.b"), Tensor::zeros(&[out])),
        }
    }

    /// `x` is `[B, cin]`.
    pub fn apply(&self, t: &mut Tape, p: &ParamStore, x: Var) -> Result<Var> {
        let w = t.param(p, self.weight);
        let y = t.matmul(x, w)?;
        let shape = t.shape(y).to_vec();
        let b = t.param(p, self.bias);
        let b = t.broadcast_to(b, &shape)?;
        t.add(y, b)
    }
}

/// Rows `indices` of a `[N, …]` value, as `[indices.len(), …]`.
pub fn gather_rows(t: &mut Tape, x: Var, indices: &[usize]) -> Result<Var> {
    t.embedding(x, indices, &[indices.len()])
}
