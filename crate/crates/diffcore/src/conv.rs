//! NHWC convolution as one GEMM against the tap-folded kernel followed by
//! a shifted sum, processed in image chunks so buffers stay bounded.

use crate::gemm::gemm;

const CHUNK_ROWS: usize = 2048;

pub(crate) struct Geometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub cin: usize,
    pub k: usize,
    pub cout: usize,
}

impl Geometry {
    fn pixels(&self) -> usize {
        self.height * self.width
    }

    fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.pixels() * self.cin
    }

    pub fn weight_len(&self) -> usize {
        self.patch() * self.cout
    }

    fn images_per_chunk(&self) -> usize {
        (CHUNK_ROWS / self.pixels().max(1)).max(1)
    }
}

/// `[k, k, ci, co]` as `[ci, k·k·co]`.
fn fold_weight(geom: &Geometry, weight: &[f64]) -> Vec<f64> {
    let (ci, co, taps) = (geom.cin, geom.cout, geom.k * geom.k);
    let mut out = vec![0.0; ci * taps * co];
    for tap in 0..taps {
        for c in 0..ci {
            let src = &weight[(tap * ci + c) * co..][..co];
            out[(c * taps + tap) * co..][..co].copy_from_slice(src);
        }
    }
    out
}

fn unfold_weight_into(geom: &Geometry, folded: &[f64], d_weight: &mut [f64]) {
    let (ci, co, taps) = (geom.cin, geom.cout, geom.k * geom.k);
    for tap in 0..taps {
        for c in 0..ci {
            let src = &folded[(c * taps + tap) * co..][..co];
            for (d, s) in d_weight[(tap * ci + c) * co..][..co].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}

/// Calls `f(out_pixel, src_pixel, tap)` for every in-bounds kernel tap of
/// `count` images, pixel indices relative to the chunk.
fn for_each_tap(geom: &Geometry, count: usize, mut f: impl FnMut(usize, usize, usize)) {
    let (h, w, k) = (geom.height, geom.width, geom.k);
    let pad = (k / 2) as isize;
    for img in 0..count {
        for y in 0..h {
            for x in 0..w {
                let out_px = (img * h + y) * w + x;
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = x as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        f(out_px, (img * h + sy as usize) * w + sx as usize, ky * k + kx);
                    }
                }
            }
        }
    }
}

// Each input pixel is multiplied by the folded kernel once, giving its
// contribution to every tap; outputs then sum the shifted contributions.
pub(crate) fn forward(geom: &Geometry, input: &[f64], weight: &[f64]) -> Vec<f64> {
    let px = geom.pixels();
    let (ci, co, taps) = (geom.cin, geom.cout, geom.k * geom.k);
    let folded = fold_weight(geom, weight);
    let mut out = vec![0.0; geom.batch * px * co];
    let per = geom.images_per_chunk();
    let mut z = vec![0.0; per.min(geom.batch) * px * taps * co];
    let mut first = 0;
    while first < geom.batch {
        let count = per.min(geom.batch - first);
        let rows = count * px;
        let x = &input[first * px * ci..(first + count) * px * ci];
        gemm(rows, ci, taps * co, x, false, &folded, false, &mut z[..rows * taps * co], 0.0);
        let dst = &mut out[first * px * co..(first + count) * px * co];
        for_each_tap(geom, count, |o, s, tap| {
            let src = &z[(s * taps + tap) * co..][..co];
            for (d, v) in dst[o * co..(o + 1) * co].iter_mut().zip(src) {
                *d += v;
            }
        });
        first += count;
    }
    out
}

pub(crate) fn backward(
    geom: &Geometry,
    input: &[f64],
    weight: &[f64],
    d_out: &[f64],
    mut d_input: Option<&mut [f64]>,
    d_weight: Option<&mut [f64]>,
) {
    let px = geom.pixels();
    let (ci, co, taps) = (geom.cin, geom.cout, geom.k * geom.k);
    let folded = fold_weight(geom, weight);
    let mut d_folded = d_weight.as_ref().map(|_| vec![0.0; folded.len()]);
    let per = geom.images_per_chunk();
    let mut dz = vec![0.0; per.min(geom.batch) * px * taps * co];
    let mut first = 0;
    while first < geom.batch {
        let count = per.min(geom.batch - first);
        let rows = count * px;
        let g = &d_out[first * px * co..(first + count) * px * co];
        let dz = &mut dz[..rows * taps * co];
        dz.fill(0.0);
        for_each_tap(geom, count, |o, s, tap| {
            dz[(s * taps + tap) * co..][..co].copy_from_slice(&g[o * co..(o + 1) * co]);
        });
        let x = &input[first * px * ci..(first + count) * px * ci];
        if let Some(dw) = d_folded.as_deref_mut() {
            gemm(ci, rows, taps * co, x, true, dz, false, dw, 1.0);
        }
        if let Some(di) = d_input.as_deref_mut() {
            let di = &mut di[first * px * ci..(first + count) * px * ci];
            gemm(rows, taps * co, ci, dz, false, &folded, true, di, 1.0);
        }
        first += count;
    }
    if let (Some(dw), Some(folded)) = (d_weight, d_folded) {
        unfold_weight_into(geom, &folded, dw);
    }
}
