use ndarray::{Array, ArrayView, Dimension, Slice};
use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

/// Row-major partition of an `H×W` plane into `grid_side × grid_side`
/// equal, non-overlapping windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    pub k_patches: usize,
    pub grid_side: usize,
    pub patch_h: usize,
    pub patch_w: usize,
}

/// Pixel bounds of one patch: rows `row0..row0+h`, columns `col0..col0+w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub row0: usize,
    pub col0: usize,
    pub h: usize,
    pub w: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, k_patches: usize) -> Result<Self> {
        let side = exact_sqrt(k_patches)
            .ok_or_else(|| CoreError::Config(format!("k_patches = {k_patches} is not a positive perfect square")))?;
        if height == 0 || height % side != 0 {
            return Err(CoreError::Config(format!("height {height} is not divisible by grid side {side}")));
        }
        if width == 0 || width % side != 0 {
            return Err(CoreError::Config(format!("width {width} is not divisible by grid side {side}")));
        }
        Ok(Self { height, width, k_patches, grid_side: side, patch_h: height / side, patch_w: width / side })
    }

    pub fn window(&self, j: usize) -> Result<Window> {
        if j >= self.k_patches {
            return Err(CoreError::Bounds { index: j, len: self.k_patches });
        }
        let (row, col) = (j / self.grid_side, j % self.grid_side);
        Ok(Window { row0: row * self.patch_h, col0: col * self.patch_w, h: self.patch_h, w: self.patch_w })
    }

    /// Number of pixels in one patch.
    pub fn patch_area(&self) -> usize {
        self.patch_h * self.patch_w
    }

    fn check_plane(&self, shape: &[usize]) -> Result<()> {
        let n = shape.len();
        if n < 2 || shape[n - 2] != self.height || shape[n - 1] != self.width {
            return Err(CoreError::Shape(format!(
                "array shape {shape:?} does not end in the grid's {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Alias for [`PatchGrid::new`].
pub fn make_grid(height: usize, width: usize, k_patches: usize) -> Result<PatchGrid> {
    PatchGrid::new(height, width, k_patches)
}

fn exact_sqrt(k: usize) -> Option<usize> {
    if k == 0 {
        return None;
    }
    let r = (k as f64).sqrt().round() as usize;
    (r * r == k).then_some(r)
}

fn window_slice(nd: usize, axis: usize, win: Window) -> Slice {
    if axis == nd - 2 {
        Slice::from(win.row0..win.row0 + win.h)
    } else if axis == nd - 1 {
        Slice::from(win.col0..win.col0 + win.w)
    } else {
        Slice::from(..)
    }
}

/// Copies window `j` out of an array whose trailing two axes are `H×W`.
pub fn extract_patch<A: Clone, D: Dimension>(x: ArrayView<'_, A, D>, grid: &PatchGrid, j: usize) -> Result<Array<A, D>> {
    grid.check_plane(x.shape())?;
    let win = grid.window(j)?;
    let nd = x.ndim();
    Ok(x.slice_each_axis(|ax| window_slice(nd, ax.axis.index(), win)).to_owned())
}

/// Returns a copy of `x` whose window `j` holds `patch`.
pub fn replace_patch<A: Clone, D: Dimension>(
    x: ArrayView<'_, A, D>,
    grid: &PatchGrid,
    j: usize,
    patch: ArrayView<'_, A, D>,
) -> Result<Array<A, D>> {
    grid.check_plane(x.shape())?;
    let win = grid.window(j)?;
    let mut out = x.to_owned();
    let expected: Vec<usize> = {
        let mut s = x.shape().to_vec();
        let n = s.len();
        s[n - 2] = win.h;
        s[n - 1] = win.w;
        s
    };
    if patch.shape() != expected.as_slice() {
        return Err(CoreError::Shape(format!("patch shape {:?}, expected {expected:?}", patch.shape())));
    }
    let nd = out.ndim();
    out.slice_each_axis_mut(|ax| window_slice(nd, ax.axis.index(), win)).assign(&patch);
    Ok(out)
}

/// Returns a copy of `dst` whose window `target` holds `src`'s window `source`.
pub fn transplant<A: Clone, D: Dimension>(
    dst: ArrayView<'_, A, D>,
    src: ArrayView<'_, A, D>,
    grid: &PatchGrid,
    target: usize,
    source: usize,
) -> Result<Array<A, D>> {
    if dst.shape() != src.shape() {
        return Err(CoreError::Shape(format!("views differ in shape: {:?} vs {:?}", dst.shape(), src.shape())));
    }
    let patch = extract_patch(src, grid, source)?;
    replace_patch(dst, grid, target, patch.view())
}
