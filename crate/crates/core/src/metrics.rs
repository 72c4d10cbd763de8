//! Overlap and boundary-distance metrics on binary masks. A pixel is
//! positive when its value exceeds 0.5.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

fn dims(a: &Tensor, b: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    match a.shape() {
        [h, w] => Ok((*h, *w)),
        s => Err(Error::dim(op, s, &[])),
    }
}

/// `2|P∩T| / (|P| + |T|)`, and 1 when both masks are empty.
pub fn dice_score(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::dim("dice_score", pred.shape(), target.shape()));
    }
    let (mut inter, mut np, mut nt) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let (p, t) = (p > 0.5, t > 0.5);
        inter += (p && t) as usize;
        np += p as usize;
        nt += t as usize;
    }
    if np + nt == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + nt) as f64)
}

/// Positive pixels with at least one non-positive 4-neighbour; pixels on
/// the image border always qualify.
pub fn boundary(mask: &Tensor) -> Vec<bool> {
    let (h, w) = match mask.shape() {
        [h, w] => (*h, *w),
        _ => return Vec::new(),
    };
    let on = |y: isize, x: isize| {
        y >= 0
            && x >= 0
            && (y as usize) < h
            && (x as usize) < w
            && mask.data()[y as usize * w + x as usize] > 0.5
    };
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if on(y, x) && !(on(y - 1, x) && on(y + 1, x) && on(y, x - 1) && on(y, x + 1)) {
                out[y as usize * w + x as usize] = true;
            }
        }
    }
    out
}

const FAR: f64 = 1e20;

/// Exact squared Euclidean distance transform of one line
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let meet = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64)
    };
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s = meet(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = meet(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared distance from every pixel to the nearest `true` site.
fn squared_distance_map(sites: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let n = h.max(w);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// Symmetric Hausdorff distance, in pixels, between the boundaries of two
/// non-empty masks.
pub fn hausdorff_distance(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let (h, w) = dims(pred, target, "hausdorff_distance")?;
    let bp = boundary(pred);
    let bt = boundary(target);
    if !bp.iter().any(|&b| b) || !bt.iter().any(|&b| b) {
        return Err(Error::UndefinedMetric("Hausdorff distance of an empty mask"));
    }
    let to_t = squared_distance_map(&bt, h, w);
    let to_p = squared_distance_map(&bp, h, w);
    let directed = |sites: &[bool], dist: &[f64]| {
        sites
            .iter()
            .zip(dist)
            .filter(|(s, _)| **s)
            .map(|(_, d)| *d)
            .fold(0.0, f64::max)
    };
    let d2 = directed(&bp, &to_t).max(directed(&bt, &to_p));
    Ok(d2.sqrt())
}
