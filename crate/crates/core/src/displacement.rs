use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::confidence::{select_min_and_top, select_similar, summarize_logits, PatchSummary, SelectionResult};
use crate::patch_grid::transplant;
use crate::{CoreError, PatchGrid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Strong-view patch pasted into the weak view.
    SToW,
    /// Weak-view patch pasted into the strong view.
    WToS,
}

/// How source and target patches are chosen for unlabeled pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Uniformly random target and source positions.
    Random,
    /// The source view's most confident patch replaces the same position.
    Same,
    /// A seeded coin picks `Same` or `Reliable` on each call.
    SameReliable,
    /// Least confident target, source chosen among the most confident
    /// candidates by closest mean-logit distribution.
    #[default]
    Reliable,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Random => "random",
            Strategy::Same => "same",
            Strategy::SameReliable => "same_reliable",
            Strategy::Reliable => "reliable",
        })
    }
}

impl FromStr for Strategy {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace(['-', '+'], "_").as_str() {
            "random" => Ok(Strategy::Random),
            "same" => Ok(Strategy::Same),
            "same_reliable" => Ok(Strategy::SameReliable),
            "reliable" => Ok(Strategy::Reliable),
            other => Err(CoreError::Config(format!("unknown displacement strategy '{other}'"))),
        }
    }
}

/// One swap: window `target_index` of the destination view receives the
/// other view's window `source_index`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplacementPlan {
    pub direction: Direction,
    pub target_index: usize,
    pub source_index: usize,
    /// Strategy that produced the indices (`same_reliable` resolves to one
    /// of its two halves).
    pub strategy: Strategy,
    /// Divergences of the candidates considered, empty when none were scored.
    pub kl_values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisplacedPair {
    pub x_s_to_w: Array3<f32>,
    pub x_w_to_s: Array3<f32>,
    /// `[s_to_w, w_to_s]`.
    pub plans: [DisplacementPlan; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisplacedLabeledPair {
    pub x_s_to_w: Array3<f32>,
    pub x_w_to_s: Array3<f32>,
    pub y_s_to_w: Array2<u8>,
    pub y_w_to_s: Array2<u8>,
    /// `[s_to_w, w_to_s]`.
    pub plans: [DisplacementPlan; 2],
}

fn check_views(x_w: &ArrayView3<'_, f32>, x_s: &ArrayView3<'_, f32>, grid: &PatchGrid) -> Result<()> {
    if x_w.dim() != x_s.dim() {
        return Err(CoreError::Shape(format!("weak view {:?} and strong view {:?} differ", x_w.dim(), x_s.dim())));
    }
    let (_, h, w) = x_w.dim();
    if (h, w) != (grid.height, grid.width) {
        return Err(CoreError::Shape(format!("views are {h}x{w}, grid is {}x{}", grid.height, grid.width)));
    }
    Ok(())
}

fn check_logits(lw: &ArrayView3<'_, f32>, ls: &ArrayView3<'_, f32>) -> Result<()> {
    if lw.dim() != ls.dim() {
        return Err(CoreError::Shape(format!("logit maps {:?} and {:?} differ", lw.dim(), ls.dim())));
    }
    Ok(())
}

struct Views {
    w: PatchSummary,
    s: PatchSummary,
}

impl Views {
    fn new(lw: ArrayView3<'_, f32>, ls: ArrayView3<'_, f32>, grid: &PatchGrid) -> Result<Self> {
        check_logits(&lw, &ls)?;
        Ok(Self { w: summarize_logits(lw, grid)?, s: summarize_logits(ls, grid)? })
    }
}

fn plan(direction: Direction, target: usize, source: usize, strategy: Strategy, kl: Vec<f64>) -> DisplacementPlan {
    DisplacementPlan { direction, target_index: target, source_index: source, strategy, kl_values: kl }
}

fn reliable_plans(v: &Views, n: usize) -> Result<[DisplacementPlan; 2]> {
    let sel_w: SelectionResult = select_min_and_top(&v.w, n)?;
    let sel_s = select_min_and_top(&v.s, n)?;
    // Strong candidate closest to the weak view's weakest patch, and vice versa.
    let from_s = select_similar(&v.s, &sel_s.ind_top, &v.w, sel_w.ind_min)?;
    let from_w = select_similar(&v.w, &sel_w.ind_top, &v.s, sel_s.ind_min)?;
    Ok([
        plan(Direction::SToW, sel_w.ind_min, from_s.index, Strategy::Reliable, from_s.kl_values),
        plan(Direction::WToS, sel_s.ind_min, from_w.index, Strategy::Reliable, from_w.kl_values),
    ])
}

fn same_plans(v: &Views) -> Result<[DisplacementPlan; 2]> {
    let s_max = select_min_and_top(&v.s, 1)?.ind_top[0];
    let w_max = select_min_and_top(&v.w, 1)?.ind_top[0];
    Ok([
        plan(Direction::SToW, s_max, s_max, Strategy::Same, Vec::new()),
        plan(Direction::WToS, w_max, w_max, Strategy::Same, Vec::new()),
    ])
}

/// Chooses the two swaps for an unlabeled view pair without building images.
pub fn plan_abd_r<R: Rng + ?Sized>(
    logits_w: ArrayView3<'_, f32>,
    logits_s: ArrayView3<'_, f32>,
    grid: &PatchGrid,
    n: usize,
    strategy: Strategy,
    rng: &mut R,
) -> Result<[DisplacementPlan; 2]> {
    if n == 0 || n > grid.k_patches {
        return Err(CoreError::Config(format!("top_n = {n} must lie in 1..={}", grid.k_patches)));
    }
    match strategy {
        Strategy::Random => {
            check_logits(&logits_w, &logits_s)?;
            let k = grid.k_patches;
            let (t1, s1) = (rng.random_range(0..k), rng.random_range(0..k));
            let (t2, s2) = (rng.random_range(0..k), rng.random_range(0..k));
            Ok([
                plan(Direction::SToW, t1, s1, Strategy::Random, Vec::new()),
                plan(Direction::WToS, t2, s2, Strategy::Random, Vec::new()),
            ])
        }
        Strategy::Same => same_plans(&Views::new(logits_w, logits_s, grid)?),
        Strategy::Reliable => reliable_plans(&Views::new(logits_w, logits_s, grid)?, n),
        Strategy::SameReliable => {
            let use_same = rng.random_bool(0.5);
            let v = Views::new(logits_w, logits_s, grid)?;
            if use_same {
                same_plans(&v)
            } else {
                reliable_plans(&v, n)
            }
        }
    }
}

/// Bidirectional displacement for an unlabeled weak/strong pair.
#[allow(clippy::too_many_arguments)]
pub fn abd_r<R: Rng + ?Sized>(
    x_w: ArrayView3<'_, f32>,
    x_s: ArrayView3<'_, f32>,
    logits_w: ArrayView3<'_, f32>,
    logits_s: ArrayView3<'_, f32>,
    grid: &PatchGrid,
    n: usize,
    strategy: Strategy,
    rng: &mut R,
) -> Result<DisplacedPair> {
    check_views(&x_w, &x_s, grid)?;
    let plans = plan_abd_r(logits_w, logits_s, grid, n, strategy, rng)?;
    let x_s_to_w = transplant(x_w, x_s, grid, plans[0].target_index, plans[0].source_index)?;
    let x_w_to_s = transplant(x_s, x_w, grid, plans[1].target_index, plans[1].source_index)?;
    Ok(DisplacedPair { x_s_to_w, x_w_to_s, plans })
}

/// Chooses the two swaps for a labeled view pair: each view's most confident
/// patch is replaced by the other view's least confident one.
pub fn plan_abd_i(
    logits_w: ArrayView3<'_, f32>,
    logits_s: ArrayView3<'_, f32>,
    grid: &PatchGrid,
) -> Result<[DisplacementPlan; 2]> {
    let v = Views::new(logits_w, logits_s, grid)?;
    let sel_w = select_min_and_top(&v.w, 1)?;
    let sel_s = select_min_and_top(&v.s, 1)?;
    Ok([
        plan(Direction::SToW, sel_w.ind_top[0], sel_s.ind_min, Strategy::Reliable, Vec::new()),
        plan(Direction::WToS, sel_s.ind_top[0], sel_w.ind_min, Strategy::Reliable, Vec::new()),
    ])
}

/// Displacement for a labeled pair; label windows move with the image windows.
pub fn abd_i(
    x_w: ArrayView3<'_, f32>,
    x_s: ArrayView3<'_, f32>,
    y: ArrayView2<'_, u8>,
    logits_w: ArrayView3<'_, f32>,
    logits_s: ArrayView3<'_, f32>,
    grid: &PatchGrid,
) -> Result<DisplacedLabeledPair> {
    check_views(&x_w, &x_s, grid)?;
    if y.dim() != (grid.height, grid.width) {
        return Err(CoreError::Shape(format!("label {:?} does not match image {}x{}", y.dim(), grid.height, grid.width)));
    }
    let plans = plan_abd_i(logits_w, logits_s, grid)?;
    let [p1, p2] = &plans;
    Ok(DisplacedLabeledPair {
        x_s_to_w: transplant(x_w, x_s, grid, p1.target_index, p1.source_index)?,
        x_w_to_s: transplant(x_s, x_w, grid, p2.target_index, p2.source_index)?,
        y_s_to_w: transplant(y, y, grid, p1.target_index, p1.source_index)?,
        y_w_to_s: transplant(y, y, grid, p2.target_index, p2.source_index)?,
        plans,
    })
}
