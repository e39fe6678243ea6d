use ndarray::{Array2, Array4, ArrayView4, Axis};

use crate::Scalar;

/// A batch of feature maps stored channel-major as a `(C, B·H·W)` matrix.
#[derive(Clone, Debug)]
pub struct Act<F> {
    pub data: Array2<F>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl<F: Scalar> Act<F> {
    pub fn from_bchw(x: ArrayView4<'_, F>) -> Self {
        let (b, c, h, w) = x.dim();
        let data = x
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, b * h * w))
            .expect("standard layout");
        Self { data, batch: b, height: h, width: w }
    }

    pub fn to_bchw(&self) -> Array4<F> {
        let c = self.channels();
        self.data
            .view()
            .into_shape_with_order((c, self.batch, self.height, self.width))
            .expect("contiguous activation")
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned()
    }

    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub(crate) fn with_data(&self, data: Array2<F>) -> Self {
        Self { data, batch: self.batch, height: self.height, width: self.width }
    }

    /// Stack two activations with identical geometry along the channel axis.
    pub(crate) fn concat(a: &Self, b: &Self) -> Self {
        debug_assert_eq!((a.batch, a.height, a.width), (b.batch, b.height, b.width));
        let data = ndarray::concatenate(Axis(0), &[a.data.view(), b.data.view()])
            .expect("matching columns");
        a.with_data(data)
    }
}
