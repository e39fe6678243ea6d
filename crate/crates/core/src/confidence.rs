use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::{CoreError, PatchGrid, Result};

/// Per-patch statistics of one view's prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSummary {
    /// `K×C`: mean logit of each class over each patch.
    pub z: Array2<f64>,
    /// Length `K`: mean over each patch of the per-pixel max class probability.
    pub a: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Least confident patch (first under ties).
    pub ind_min: usize,
    /// The `n` most confident patches, most confident first, ties by index.
    pub ind_top: Vec<usize>,
}

/// Outcome of the divergence search over candidate patches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Similar {
    pub index: usize,
    /// Divergence of every candidate, in candidate order.
    pub kl_values: Vec<f64>,
}

/// Softmax over the class axis of a `C×H×W` logit map, in `f64`.
pub fn softmax_map<F: Copy + Into<f64>>(logits: ArrayView3<'_, F>) -> Array3<f64> {
    let (c, h, w) = logits.dim();
    let mut out = Array3::zeros((c, h, w));
    let mut buf = vec![0.0f64; c];
    for r in 0..h {
        for col in 0..w {
            for (k, b) in buf.iter_mut().enumerate() {
                *b = logits[[k, r, col]].into();
            }
            let m = buf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for b in buf.iter_mut() {
                *b = (*b - m).exp();
                sum += *b;
            }
            for (k, b) in buf.iter().enumerate() {
                out[[k, r, col]] = b / sum;
            }
        }
    }
    out
}

/// Resamples a `C×h×w` map to `C×height×width` with bilinear interpolation
/// (half-pixel centres). Maps already at the target size are copied as is.
pub fn align_to_input(map: ArrayView3<'_, f64>, height: usize, width: usize) -> Array3<f64> {
    let (c, h, w) = map.dim();
    if (h, w) == (height, width) {
        return map.to_owned();
    }
    let coord = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(src_len - 1);
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Array3::zeros((c, height, width));
    for r in 0..height {
        let (r0, r1, fr) = coord(r, h, height);
        for col in 0..width {
            let (c0, c1, fc) = coord(col, w, width);
            for k in 0..c {
                let top = map[[k, r0, c0]] * (1.0 - fc) + map[[k, r0, c1]] * fc;
                let bot = map[[k, r1, c0]] * (1.0 - fc) + map[[k, r1, c1]] * fc;
                out[[k, r, col]] = top * (1.0 - fr) + bot * fr;
            }
        }
    }
    out
}

/// Patch means of logits and of max-probability confidence.
pub fn summarize<F: Copy + Into<f64>>(
    logits: ArrayView3<'_, F>,
    probs: ArrayView3<'_, f64>,
    grid: &PatchGrid,
) -> Result<PatchSummary> {
    let (c, h, w) = logits.dim();
    if c < 2 {
        return Err(CoreError::Config(format!("need at least 2 classes, got {c}")));
    }
    if (h, w) != (grid.height, grid.width) || probs.dim() != logits.dim() {
        return Err(CoreError::Shape(format!(
            "logits {:?} / probs {:?} do not match a {}x{} grid",
            logits.dim(),
            probs.dim(),
            grid.height,
            grid.width
        )));
    }
    let area = grid.patch_area() as f64;
    let mut z = Array2::zeros((grid.k_patches, c));
    let mut a = Array1::zeros(grid.k_patches);
    for j in 0..grid.k_patches {
        let win = grid.window(j)?;
        let mut conf = 0.0;
        for r in win.row0..win.row0 + win.h {
            for col in win.col0..win.col0 + win.w {
                let mut best = f64::NEG_INFINITY;
                for k in 0..c {
                    z[[j, k]] += logits[[k, r, col]].into();
                    best = best.max(probs[[k, r, col]]);
                }
                conf += best;
            }
        }
        for k in 0..c {
            z[[j, k]] /= area;
        }
        a[j] = conf / area;
    }
    Ok(PatchSummary { z, a })
}

/// Summary of a logit map, with probabilities from its softmax aligned to
/// the grid resolution.
pub fn summarize_logits<F: Copy + Into<f64>>(logits: ArrayView3<'_, F>, grid: &PatchGrid) -> Result<PatchSummary> {
    let (c, h, w) = logits.dim();
    if (h, w) == (grid.height, grid.width) {
        let probs = softmax_map(logits);
        return summarize(logits, probs.view(), grid);
    }
    let as_f64 = logits.mapv(|v| v.into());
    let aligned = align_to_input(as_f64.view(), grid.height, grid.width);
    let probs = softmax_map(aligned.view());
    debug_assert_eq!(probs.len_of(Axis(0)), c);
    summarize(aligned.view(), probs.view(), grid)
}

pub fn select_min_and_top(summary: &PatchSummary, n: usize) -> Result<SelectionResult> {
    let k = summary.a.len();
    if n == 0 || n > k {
        return Err(CoreError::Config(format!("top_n = {n} must lie in 1..={k}")));
    }
    let a = &summary.a;
    let mut ind_min = 0;
    for j in 1..k {
        if a[j] < a[ind_min] {
            ind_min = j;
        }
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| a[j].total_cmp(&a[i]).then(i.cmp(&j)));
    order.truncate(n);
    Ok(SelectionResult { ind_min, ind_top: order })
}

fn log_softmax(z: ArrayView1<'_, f64>) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - m - lse).collect()
}

/// `KL(softmax(z_a) || softmax(z_b))`, natural log.
pub fn kl_div(z_a: ArrayView1<'_, f64>, z_b: ArrayView1<'_, f64>) -> Result<f64> {
    if z_a.len() != z_b.len() {
        return Err(CoreError::Shape(format!("class counts differ: {} vs {}", z_a.len(), z_b.len())));
    }
    if z_a.iter().chain(z_b.iter()).any(|v| !v.is_finite()) {
        return Err(CoreError::Numeric("non-finite logit in divergence input".into()));
    }
    let (lp, lq) = (log_softmax(z_a), log_softmax(z_b));
    Ok(lp.iter().zip(&lq).map(|(p, q)| p.exp() * (p - q)).sum())
}

/// Picks the candidate patch of `src` whose mean-logit distribution is
/// closest (in KL) to patch `dst_min` of `dst`. Ties keep candidate order.
pub fn select_similar(
    src: &PatchSummary,
    candidates: &[usize],
    dst: &PatchSummary,
    dst_min: usize,
) -> Result<Similar> {
    if candidates.is_empty() {
        return Err(CoreError::Config("candidate list is empty".into()));
    }
    let k = src.z.nrows();
    if dst_min >= dst.z.nrows() {
        return Err(CoreError::Bounds { index: dst_min, len: dst.z.nrows() });
    }
    let target = dst.z.row(dst_min);
    let mut kl_values = Vec::with_capacity(candidates.len());
    for &j in candidates {
        if j >= k {
            return Err(CoreError::Bounds { index: j, len: k });
        }
        kl_values.push(kl_div(src.z.row(j), target)?);
    }
    let mut best = 0;
    for i in 1..kl_values.len() {
        if kl_values[i] < kl_values[best] {
            best = i;
        }
    }
    Ok(Similar { index: candidates[best], kl_values })
}
