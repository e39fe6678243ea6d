use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

fn same_dim(a: &ArrayView2<'_, bool>, b: &ArrayView2<'_, bool>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(CoreError::Shape(format!("mask shapes differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn counts(pred: &ArrayView2<'_, bool>, gt: &ArrayView2<'_, bool>) -> (usize, usize, usize) {
    let (mut inter, mut np, mut ng) = (0, 0, 0);
    Zip::from(pred).and(gt).for_each(|&p, &g| {
        inter += (p && g) as usize;
        np += p as usize;
        ng += g as usize;
    });
    (inter, np, ng)
}

/// `2|P∩G| / (|P| + |G|)`; 1 when both masks are empty.
pub fn dsc(pred: ArrayView2<'_, bool>, gt: ArrayView2<'_, bool>) -> Result<f64> {
    same_dim(&pred, &gt)?;
    let (inter, np, ng) = counts(&pred, &gt);
    Ok(if np + ng == 0 { 1.0 } else { 2.0 * inter as f64 / (np + ng) as f64 })
}

/// `|P∩G| / |P∪G|`; 1 when both masks are empty.
pub fn jaccard(pred: ArrayView2<'_, bool>, gt: ArrayView2<'_, bool>) -> Result<f64> {
    same_dim(&pred, &gt)?;
    let (inter, np, ng) = counts(&pred, &gt);
    let union = np + ng - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mask pixels with at least one 4-neighbour outside the mask; pixels on the
/// image border count as having a background neighbour.
pub fn boundary(mask: ArrayView2<'_, bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        mask[[r, c]]
            && (r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask[[r - 1, c]]
                || !mask[[r + 1, c]]
                || !mask[[r, c - 1]]
                || !mask[[r, c + 1]])
    })
}

/// Exact 1-D squared distance transform (lower envelope of parabolas).
/// Entries equal to `f64::INFINITY` are not sites.
fn dt1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + (q * q) as f64;
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            // The first parabola's boundary is -inf, so the stack never empties here.
            if s <= z[z.len() - 1] {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    z.push(f64::INFINITY);
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` site.
pub fn squared_distance_transform(sites: ArrayView2<'_, bool>) -> Array2<f64> {
    let (h, w) = sites.dim();
    let mut cols = Array2::from_elem((h, w), f64::INFINITY);
    let mut fbuf = vec![0.0; h.max(w)];
    let mut obuf = vec![0.0; h.max(w)];
    for c in 0..w {
        for r in 0..h {
            fbuf[r] = if sites[[r, c]] { 0.0 } else { f64::INFINITY };
        }
        dt1d(&fbuf[..h], &mut obuf[..h]);
        for r in 0..h {
            cols[[r, c]] = obuf[r];
        }
    }
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            fbuf[c] = cols[[r, c]];
        }
        dt1d(&fbuf[..w], &mut obuf[..w]);
        for c in 0..w {
            out[[r, c]] = obuf[c];
        }
    }
    out
}

/// Distances from each boundary pixel of either mask to the nearest boundary
/// pixel of the other, both directions pooled. `None` if a mask is empty.
pub fn surface_distances(pred: ArrayView2<'_, bool>, gt: ArrayView2<'_, bool>) -> Result<Option<Vec<f64>>> {
    same_dim(&pred, &gt)?;
    let (bp, bg) = (boundary(pred), boundary(gt));
    if !bp.iter().any(|&v| v) || !bg.iter().any(|&v| v) {
        return Ok(None);
    }
    let (dp, dg) = (squared_distance_transform(bp.view()), squared_distance_transform(bg.view()));
    let mut d = Vec::new();
    for (&on, &sq) in bp.iter().zip(dg.iter()) {
        if on {
            d.push(sq.sqrt());
        }
    }
    for (&on, &sq) in bg.iter().zip(dp.iter()) {
        if on {
            d.push(sq.sqrt());
        }
    }
    Ok(Some(d))
}

/// Percentile `q ∈ [0, 100]` with linear interpolation between order
/// statistics at rank `q/100 · (n − 1)`.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (rank - lo as f64))
}

/// 95th percentile of the pooled surface distances; `None` if a mask is empty.
pub fn hd95(pred: ArrayView2<'_, bool>, gt: ArrayView2<'_, bool>) -> Result<Option<f64>> {
    Ok(surface_distances(pred, gt)?.and_then(|d| percentile(&d, 95.0)))
}

/// Mean of the pooled surface distances; `None` if a mask is empty.
pub fn asd(pred: ArrayView2<'_, bool>, gt: ArrayView2<'_, bool>) -> Result<Option<f64>> {
    Ok(surface_distances(pred, gt)?.map(|d| d.iter().sum::<f64>() / d.len() as f64))
}

/// Metrics of one class on one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub dsc: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

pub fn class_metrics(pred: ArrayView2<'_, bool>, gt: ArrayView2<'_, bool>) -> Result<ClassMetrics> {
    let d = surface_distances(pred, gt)?;
    Ok(ClassMetrics {
        dsc: dsc(pred, gt)?,
        jaccard: jaccard(pred, gt)?,
        hd95: d.as_ref().and_then(|d| percentile(d, 95.0)),
        asd: d.map(|d| d.iter().sum::<f64>() / d.len() as f64),
    })
}

/// Per-class metrics of one label map against another, classes `0..num_classes`.
pub fn image_metrics(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>, num_classes: usize) -> Result<Vec<ClassMetrics>> {
    if pred.dim() != gt.dim() {
        return Err(CoreError::Shape(format!("mask shapes differ: {:?} vs {:?}", pred.dim(), gt.dim())));
    }
    (0..num_classes)
        .map(|k| {
            let p = pred.mapv(|v| v as usize == k);
            let g = gt.mapv(|v| v as usize == k);
            class_metrics(p.view(), g.view())
        })
        .collect()
}

/// Averages over images; distances average only where defined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub dsc: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    /// Number of (image, class) cases left out of the distance averages
    /// because a mask was empty.
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub num_images: usize,
    pub per_class: BTreeMap<usize, MetricSummary>,
    /// Mean of the per-class summaries over classes `1..C`.
    pub mean_foreground: MetricSummary,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (mut sum, mut n, mut missing) = (0.0, 0usize, 0usize);
    for v in values {
        match v {
            Some(x) => {
                sum += x;
                n += 1;
            }
            None => missing += 1,
        }
    }
    ((n > 0).then(|| sum / n as f64), missing)
}

/// Per image, then mean over images per class, then mean over foreground classes.
pub fn aggregate(per_image: &[Vec<ClassMetrics>]) -> Result<EvalResult> {
    let num_images = per_image.len();
    if num_images == 0 {
        return Err(CoreError::Validation("no images to aggregate".into()));
    }
    let c = per_image[0].len();
    if c < 2 || per_image.iter().any(|m| m.len() != c) {
        return Err(CoreError::Validation("every image needs the same number (>= 2) of classes".into()));
    }
    let mut per_class = BTreeMap::new();
    for k in 0..c {
        let col = || per_image.iter().map(move |m| m[k]);
        let (hd, ex) = mean_defined(col().map(|m| m.hd95));
        let (asd, _) = mean_defined(col().map(|m| m.asd));
        per_class.insert(
            k,
            MetricSummary {
                dsc: col().map(|m| m.dsc).sum::<f64>() / num_images as f64,
                jaccard: col().map(|m| m.jaccard).sum::<f64>() / num_images as f64,
                hd95: hd,
                asd,
                excluded: ex,
            },
        );
    }
    let fg: Vec<MetricSummary> = (1..c).map(|k| per_class[&k]).collect();
    let nf = fg.len() as f64;
    let mean_foreground = MetricSummary {
        dsc: fg.iter().map(|m| m.dsc).sum::<f64>() / nf,
        jaccard: fg.iter().map(|m| m.jaccard).sum::<f64>() / nf,
        hd95: mean_defined(fg.iter().map(|m| m.hd95)).0,
        asd: mean_defined(fg.iter().map(|m| m.asd)).0,
        excluded: fg.iter().map(|m| m.excluded).sum(),
    };
    Ok(EvalResult { num_images, per_class, mean_foreground })
}

/// Evaluates predicted label maps against ground truth.
pub fn evaluate_masks(preds: &[Array2<u8>], gts: &[Array2<u8>], num_classes: usize) -> Result<EvalResult> {
    if preds.len() != gts.len() {
        return Err(CoreError::Shape(format!("{} predictions for {} labels", preds.len(), gts.len())));
    }
    let per_image = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| image_metrics(p.view(), g.view(), num_classes))
        .collect::<Result<Vec<_>>>()?;
    aggregate(&per_image)
}

impl EvalResult {
    /// Plain-text table with one row per class and a foreground mean row.
    pub fn table(&self) -> String {
        let fmt_opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"));
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>8} {:>8} {:>8} {:>8} {:>9}", "class", "dsc", "jaccard", "hd95", "asd", "excluded");
        let mut row = |name: String, m: &MetricSummary| {
            let _ = writeln!(
                s,
                "{:<8} {:>8.4} {:>8.4} {:>8} {:>8} {:>9}",
                name,
                m.dsc,
                m.jaccard,
                fmt_opt(m.hd95),
                fmt_opt(m.asd),
                m.excluded
            );
        };
        for (k, m) in &self.per_class {
            row(k.to_string(), m);
        }
        row("mean_fg".into(), &self.mean_foreground);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn mask(rows: &[&str]) -> Array2<bool> {
        let h = rows.len();
        let w = rows[0].len();
        Array2::from_shape_fn((h, w), |(r, c)| rows[r].as_bytes()[c] == b'#')
    }

    #[test]
    fn overlap_examples() {
        let g = mask(&["##..", "##..", "....", "...."]);
        assert_eq!(dsc(g.view(), g.view()).unwrap(), 1.0);
        assert_eq!(jaccard(g.view(), g.view()).unwrap(), 1.0);
        let other = mask(&["....", "....", "..##", "..##"]);
        assert_eq!(dsc(g.view(), other.view()).unwrap(), 0.0);
        assert_eq!(jaccard(g.view(), other.view()).unwrap(), 0.0);
        let half = mask(&["##..", "....", "....", "...."]);
        assert!((dsc(half.view(), g.view()).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(jaccard(half.view(), g.view()).unwrap(), 0.5);
        let empty = Array2::from_elem((4, 4), false);
        assert_eq!(dsc(empty.view(), empty.view()).unwrap(), 1.0);
        assert_eq!(jaccard(empty.view(), empty.view()).unwrap(), 1.0);
    }

    #[test]
    fn distance_examples() {
        let g = mask(&["....", ".##.", ".##.", "...."]);
        assert_eq!(hd95(g.view(), g.view()).unwrap(), Some(0.0));
        assert_eq!(asd(g.view(), g.view()).unwrap(), Some(0.0));
        let a = mask(&["#...", "....", "....", "...."]);
        let b = mask(&["...#", "....", "....", "...."]);
        assert_eq!(hd95(a.view(), b.view()).unwrap(), Some(3.0));
        assert_eq!(asd(a.view(), b.view()).unwrap(), Some(3.0));
        let empty = Array2::from_elem((4, 4), false);
        assert_eq!(hd95(a.view(), empty.view()).unwrap(), None);
    }

    #[test]
    fn boundary_of_filled_square() {
        let m = mask(&[".....", ".###.", ".###.", ".###.", "....."]);
        let b = boundary(m.view());
        assert_eq!(b, mask(&[".....", ".###.", ".#.#.", ".###.", "....."]));
        let full = Array2::from_elem((3, 3), true);
        assert_eq!(boundary(full.view()), mask(&["###", "#.#", "###"]));
    }

    #[test]
    fn distance_transform_small_case() {
        let sites = mask(&["#..", "...", "..#"]);
        let d = squared_distance_transform(sites.view());
        assert_eq!(d, arr2(&[[0.0, 1.0, 4.0], [1.0, 2.0, 1.0], [4.0, 1.0, 0.0]]));
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0, 5.0], 50.0), Some(3.0));
        assert!((percentile(&[0.0, 10.0], 95.0).unwrap() - 9.5).abs() < 1e-12);
        assert_eq!(percentile(&[], 95.0), None);
    }

    #[test]
    fn aggregation_counts_exclusions() {
        let gt = arr2(&[[0u8, 1], [1, 0]]);
        let pred = arr2(&[[0u8, 0], [0, 0]]);
        let r = evaluate_masks(&[pred], &[gt.clone()], 2).unwrap();
        assert_eq!(r.mean_foreground.dsc, 0.0);
        assert_eq!(r.mean_foreground.hd95, None);
        assert_eq!(r.mean_foreground.excluded, 1);
        let r = evaluate_masks(&[gt.clone()], &[gt], 2).unwrap();
        assert_eq!(r.mean_foreground.dsc, 1.0);
        assert!(r.table().contains("mean_fg"));
    }
}
