use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{cast, Act, Scalar};

/// A trainable tensor flattened to one dimension, with its gradient and the
/// optimizer's velocity buffer.
#[derive(Clone, Debug)]
pub struct Param<F> {
    pub value: Array1<F>,
    pub grad: Array1<F>,
    pub velocity: Array1<F>,
}

impl<F: Scalar> Param<F> {
    pub fn new(value: Array1<F>) -> Self {
        let n = value.len();
        Self { value, grad: Array1::zeros(n), velocity: Array1::zeros(n) }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    fn matrix(&self, rows: usize, cols: usize) -> ArrayView2<'_, F> {
        self.value.view().into_shape_with_order((rows, cols)).expect("contiguous param")
    }

    fn grad_matrix(&mut self, rows: usize, cols: usize) -> ArrayViewMut2<'_, F> {
        self.grad.view_mut().into_shape_with_order((rows, cols)).expect("contiguous grad")
    }
}

/// Square convolution, stride 1, "same" zero padding. Kernel size 1 or 3.
#[derive(Clone, Debug)]
pub struct Conv2d<F> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
}

impl<F: Scalar> Conv2d<F> {
    /// Kaiming-normal weights (fan-in, ReLU gain), zero bias.
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        assert!(kernel == 1 || kernel == 3, "only 1x1 and 3x3 kernels are supported");
        let fan_in = in_channels * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = Array1::from_shape_fn(out_channels * fan_in, |_| {
            let z: f64 = StandardNormal.sample(rng);
            cast::<F>(z * std)
        });
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: Param::new(weight),
            bias: bias.then(|| Param::new(Array1::zeros(out_channels))),
        }
    }

    fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn forward(&self, x: &Act<F>) -> Act<F> {
        debug_assert_eq!(x.channels(), self.in_channels);
        let mut y = if self.kernel == 1 {
            let w = self.weight.matrix(self.out_channels, self.fan_in());
            let mut y = Array2::zeros((self.out_channels, x.data.ncols()));
            general_mat_mul(F::one(), &w, &x.data, F::zero(), &mut y);
            y
        } else {
            conv3_forward(x, self.weight.value.as_slice().expect("contiguous"), self.out_channels)
        };
        if let Some(b) = &self.bias {
            for (mut row, &bv) in y.axis_iter_mut(Axis(0)).zip(b.value.iter()) {
                row.mapv_inplace(|v| v + bv);
            }
        }
        x.with_data(y)
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(&mut self, x: &Act<F>, dy: &Array2<F>, need_input_grad: bool) -> Option<Array2<F>> {
        let (cout, k) = (self.out_channels, self.fan_in());
        if let Some(b) = &mut self.bias {
            Zip::from(&mut b.grad).and(dy.rows()).for_each(|g, row| *g += row.sum());
        }
        if self.kernel == 1 {
            general_mat_mul(F::one(), dy, &x.data.t(), F::one(), &mut self.weight.grad_matrix(cout, k));
            need_input_grad.then(|| self.weight.matrix(cout, k).t().dot(dy))
        } else {
            let weight = self.weight.value.as_slice().expect("contiguous");
            let grad = self.weight.grad.as_slice_mut().expect("contiguous");
            conv3_backward(x, dy, weight, grad, need_input_grad)
        }
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

// 3x3 convolutions work on zero-padded planes of width `W + 2`. Shifting a
// flat padded plane by `ky * (W + 2) + kx` aligns every tap with the output,
// so each (output, input, tap) triple is one contiguous axpy or dot product.
// Outputs are produced on "wide" rows of `W + 2` values; the two trailing
// columns of each row are scratch and get discarded.

struct PaddedPlanes<F> {
    data: Vec<F>,
    stride: usize,
    pw: usize,
    wide_len: usize,
}

impl<F: Scalar> PaddedPlanes<F> {
    fn from_act(x: &Act<F>) -> Self {
        let (h, w) = (x.height, x.width);
        let pw = w + 2;
        // two slack values so the last tap of the last wide row stays in bounds
        let stride = (h + 2) * pw + 2;
        let planes = x.channels() * x.batch;
        let mut data = vec![F::zero(); planes * stride];
        let src = x.data.as_slice().expect("contiguous activation");
        for (p, plane) in src.chunks_exact(h * w).enumerate() {
            let dst = &mut data[p * stride..];
            for (y, row) in plane.chunks_exact(w).enumerate() {
                dst[(y + 1) * pw + 1..(y + 1) * pw + 1 + w].copy_from_slice(row);
            }
        }
        Self { data, stride, pw, wide_len: h * pw }
    }

    fn plane(&self, p: usize) -> &[F] {
        &self.data[p * self.stride..(p + 1) * self.stride]
    }
}

/// `dst[o] += Σ_t taps[t] · src[o + offsets[t]]` over the 3x3 neighbourhood.
#[inline]
fn gather9<F: Scalar>(dst: &mut [F], taps: &[F], src: &[F], offsets: &[usize; 9]) {
    const BLOCK: usize = 256;
    let len = dst.len();
    let mut start = 0;
    while start < len {
        let end = (start + BLOCK).min(len);
        let d = &mut dst[start..end];
        for (k, &off) in offsets.iter().enumerate() {
            let t = taps[k];
            let s = &src[off + start..off + end];
            for (a, &v) in d.iter_mut().zip(s) {
                *a += t * v;
            }
        }
        start = end;
    }
}

/// `grad[t] += Σ_o d[o] · src[o + offsets[t]]`.
#[inline]
fn correlate9<F: Scalar>(grad: &mut [F], d: &[F], src: &[F], offsets: &[usize; 9]) {
    const L: usize = 8;
    let len = d.len();
    for (g, &off) in grad.iter_mut().zip(offsets) {
        let s = &src[off..off + len];
        let mut acc = [F::zero(); L];
        let (dc, sc) = (d.chunks_exact(L), s.chunks_exact(L));
        let tail: F = dc.remainder().iter().zip(sc.remainder()).map(|(&a, &b)| a * b).sum();
        for (dv, sv) in dc.zip(sc) {
            for l in 0..L {
                acc[l] += dv[l] * sv[l];
            }
        }
        *g += acc.iter().fold(F::zero(), |a, &v| a + v) + tail;
    }
}

fn tap_offsets(pw: usize) -> [usize; 9] {
    std::array::from_fn(|t| (t / 3) * pw + t % 3)
}

fn conv3_forward<F: Scalar>(x: &Act<F>, weight: &[F], cout: usize) -> Array2<F> {
    let (cin, b, h, w) = (x.channels(), x.batch, x.height, x.width);
    let padded = PaddedPlanes::from_act(x);
    let (pw, len) = (padded.pw, padded.wide_len);
    let offsets = tap_offsets(pw);
    let mut out = Array2::zeros((cout, b * h * w));
    let mut wide = vec![F::zero(); len];
    for co in 0..cout {
        let mut row = out.row_mut(co);
        let row = row.as_slice_mut().expect("contiguous row");
        for bi in 0..b {
            wide.fill(F::zero());
            for ci in 0..cin {
                let taps = &weight[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
                gather9(&mut wide, taps, padded.plane(ci * b + bi), &offsets);
            }
            let dst = &mut row[bi * h * w..(bi + 1) * h * w];
            for (y, d) in dst.chunks_exact_mut(w).enumerate() {
                d.copy_from_slice(&wide[y * pw..y * pw + w]);
            }
        }
    }
    out
}

fn conv3_backward<F: Scalar>(
    x: &Act<F>,
    dy: &Array2<F>,
    weight: &[F],
    grad: &mut [F],
    need_input_grad: bool,
) -> Option<Array2<F>> {
    let (cin, b, h, w) = (x.channels(), x.batch, x.height, x.width);
    let cout = dy.nrows();
    let padded = PaddedPlanes::from_act(x);
    let (pw, len) = (padded.pw, padded.wide_len);
    let offsets = tap_offsets(pw);
    // dy on wide rows with zeroed scratch columns, preceded by `lead` zeros so
    // the transposed convolution can also be written as a gather.
    let lead = 2 * pw + 2;
    let dstride = lead + (h + 2) * pw + 2;
    let mut dwide = vec![F::zero(); cout * b * dstride];
    let dys = dy.as_standard_layout();
    let dys = dys.as_slice().expect("standard layout");
    for (p, plane) in dys.chunks_exact(h * w).enumerate() {
        let dst = &mut dwide[p * dstride + lead..];
        for (y, row) in plane.chunks_exact(w).enumerate() {
            dst[y * pw..y * pw + w].copy_from_slice(row);
        }
    }
    let dplane = |co: usize, bi: usize| &dwide[(co * b + bi) * dstride..(co * b + bi + 1) * dstride];
    for co in 0..cout {
        for ci in 0..cin {
            let g = &mut grad[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
            for bi in 0..b {
                let d = &dplane(co, bi)[lead..lead + len];
                correlate9(g, d, padded.plane(ci * b + bi), &offsets);
            }
        }
    }
    if !need_input_grad {
        return None;
    }
    // dx_pad[q] = Σ_t w[t] · dwide[q - off_t]; with the lead padding that is a
    // gather at offset `lead - off_t`, i.e. the flipped kernel.
    let flipped: [usize; 9] = std::array::from_fn(|t| lead - offsets[t]);
    let plen = (h + 2) * pw;
    let mut dx = Array2::zeros((cin, b * h * w));
    let out = dx.as_slice_mut().expect("fresh array");
    let mut acc = vec![F::zero(); plen];
    for ci in 0..cin {
        for bi in 0..b {
            acc.fill(F::zero());
            for co in 0..cout {
                let taps = &weight[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
                gather9(&mut acc, taps, dplane(co, bi), &flipped);
            }
            let dst = &mut out[(ci * b + bi) * h * w..(ci * b + bi + 1) * h * w];
            for (y, row) in dst.chunks_exact_mut(w).enumerate() {
                row.copy_from_slice(&acc[(y + 1) * pw + 1..(y + 1) * pw + 1 + w]);
            }
        }
    }
    Some(dx)
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub(crate) struct BnCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
    batch_mean: Array1<F>,
    batch_var: Array1<F>,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Array1::ones(channels)),
            beta: Param::new(Array1::zeros(channels)),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Normalizes with batch statistics. Running statistics are left alone;
    /// see [`BatchNorm2d::update_running`].
    pub(crate) fn forward_train(&self, x: &Array2<F>) -> (Array2<F>, BnCache<F>) {
        let (c, n) = x.dim();
        let nf = cast::<F>(n as f64);
        let eps = cast::<F>(self.eps);
        let mut xhat = Array2::zeros((c, n));
        let mut y = Array2::zeros((c, n));
        let mut inv_std = Array1::zeros(c);
        let mut batch_mean = Array1::zeros(c);
        let mut batch_var = Array1::zeros(c);
        for ch in 0..c {
            let row = x.row(ch);
            let mean = row.sum() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let is = F::one() / (var + eps).sqrt();
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            Zip::from(xhat.row_mut(ch)).and(y.row_mut(ch)).and(row).for_each(|xh, yo, &v| {
                *xh = (v - mean) * is;
                *yo = g * *xh + b;
            });
            inv_std[ch] = is;
            batch_mean[ch] = mean;
            batch_var[ch] = var;
        }
        (y, BnCache { xhat, inv_std, batch_mean, batch_var })
    }

    pub(crate) fn forward_eval(&self, x: &Array2<F>) -> Array2<F> {
        let eps = cast::<F>(self.eps);
        let mut y = x.clone();
        for (ch, mut row) in y.axis_iter_mut(Axis(0)).enumerate() {
            let is = F::one() / (self.running_var[ch] + eps).sqrt();
            let (m, g, b) = (self.running_mean[ch], self.gamma.value[ch], self.beta.value[ch]);
            row.mapv_inplace(|v| g * (v - m) * is + b);
        }
        y
    }

    pub(crate) fn update_running(&mut self, cache: &BnCache<F>, count: usize) {
        let m = cast::<F>(self.momentum);
        let keep = F::one() - m;
        let unbias = cast::<F>(count as f64 / (count.max(2) - 1) as f64);
        Zip::from(&mut self.running_mean).and(&cache.batch_mean).for_each(|r, &v| *r = keep * *r + m * v);
        Zip::from(&mut self.running_var)
            .and(&cache.batch_var)
            .for_each(|r, &v| *r = keep * *r + m * v * unbias);
    }

    pub(crate) fn backward(&mut self, cache: &BnCache<F>, dy: &Array2<F>) -> Array2<F> {
        let (c, n) = dy.dim();
        let nf = cast::<F>(n as f64);
        let mut dx = Array2::zeros((c, n));
        for ch in 0..c {
            let dyr = dy.row(ch);
            let xh = cache.xhat.row(ch);
            let sum_dy = dyr.sum();
            let sum_dy_xh = Zip::from(dyr).and(xh).fold(F::zero(), |acc, &a, &b| acc + a * b);
            self.gamma.grad[ch] += sum_dy_xh;
            self.beta.grad[ch] += sum_dy;
            let scale = self.gamma.value[ch] * cache.inv_std[ch] / nf;
            Zip::from(dx.row_mut(ch)).and(dyr).and(xh).for_each(|d, &g, &h| {
                *d = scale * (nf * g - sum_dy - h * sum_dy_xh);
            });
        }
        dx
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// conv3x3 → batch norm → ReLU, applied twice.
#[derive(Clone, Debug)]
pub(crate) struct DoubleConv<F> {
    pub(crate) conv1: Conv2d<F>,
    pub(crate) bn1: BatchNorm2d<F>,
    pub(crate) conv2: Conv2d<F>,
    pub(crate) bn2: BatchNorm2d<F>,
}

#[derive(Clone, Debug)]
pub(crate) struct DoubleConvCache<F> {
    input: Act<F>,
    bn1: BnCache<F>,
    mid: Act<F>,
    bn2: BnCache<F>,
    out: Array2<F>,
}

impl<F: Scalar> DoubleConv<F> {
    pub(crate) fn new<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(cin, cout, 3, false, rng),
            bn1: BatchNorm2d::new(cout),
            conv2: Conv2d::new(cout, cout, 3, false, rng),
            bn2: BatchNorm2d::new(cout),
        }
    }

    pub(crate) fn forward_train(&self, x: Act<F>) -> (Act<F>, DoubleConvCache<F>) {
        let h1 = self.conv1.forward(&x);
        let (mut a1, bn1) = self.bn1.forward_train(&h1.data);
        a1.mapv_inplace(relu);
        let mid = x.with_data(a1);
        let h2 = self.conv2.forward(&mid);
        let (mut a2, bn2) = self.bn2.forward_train(&h2.data);
        a2.mapv_inplace(relu);
        let out = x.with_data(a2);
        let cache = DoubleConvCache { input: x, bn1, mid, bn2, out: out.data.clone() };
        (out, cache)
    }

    pub(crate) fn forward_eval(&self, x: &Act<F>) -> Act<F> {
        let mut a1 = self.bn1.forward_eval(&self.conv1.forward(x).data);
        a1.mapv_inplace(relu);
        let mid = x.with_data(a1);
        let mut a2 = self.bn2.forward_eval(&self.conv2.forward(&mid).data);
        a2.mapv_inplace(relu);
        x.with_data(a2)
    }

    pub(crate) fn update_running(&mut self, cache: &DoubleConvCache<F>) {
        let n = cache.out.ncols();
        self.bn1.update_running(&cache.bn1, n);
        self.bn2.update_running(&cache.bn2, n);
    }

    pub(crate) fn backward(&mut self, cache: &DoubleConvCache<F>, dy: Array2<F>, need_input_grad: bool) -> Option<Array2<F>> {
        let d2 = relu_backward(dy, &cache.out);
        let d2 = self.bn2.backward(&cache.bn2, &d2);
        let dmid = self.conv2.backward(&cache.mid, &d2, true).expect("requested");
        let d1 = relu_backward(dmid, &cache.mid.data);
        let d1 = self.bn1.backward(&cache.bn1, &d1);
        self.conv1.backward(&cache.input, &d1, need_input_grad)
    }

    pub(crate) fn params(&self) -> Vec<&Param<F>> {
        let mut p = self.conv1.params();
        p.extend(self.bn1.params());
        p.extend(self.conv2.params());
        p.extend(self.bn2.params());
        p
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut p = self.conv1.params_mut();
        p.extend(self.bn1.params_mut());
        p.extend(self.conv2.params_mut());
        p.extend(self.bn2.params_mut());
        p
    }

    pub(crate) fn buffers(&self) -> Vec<&Array1<F>> {
        vec![&self.bn1.running_mean, &self.bn1.running_var, &self.bn2.running_mean, &self.bn2.running_var]
    }

    pub(crate) fn buffers_mut(&mut self) -> Vec<&mut Array1<F>> {
        vec![
            &mut self.bn1.running_mean,
            &mut self.bn1.running_var,
            &mut self.bn2.running_mean,
            &mut self.bn2.running_var,
        ]
    }
}

#[inline]
fn relu<F: Scalar>(v: F) -> F {
    if v > F::zero() {
        v
    } else {
        F::zero()
    }
}

fn relu_backward<F: Scalar>(mut dy: Array2<F>, out: &Array2<F>) -> Array2<F> {
    Zip::from(&mut dy).and(out).for_each(|d, &o| {
        if o <= F::zero() {
            *d = F::zero();
        }
    });
    dy
}

/// 2x2 max pooling. Returns the pooled activation and, per output cell, the
/// offset (0..4, row-major inside the window) of the selected input.
pub(crate) fn max_pool2<F: Scalar>(x: &Act<F>) -> (Act<F>, Vec<u8>) {
    let (c, h, w) = (x.channels(), x.height, x.width);
    let (oh, ow) = (h / 2, w / 2);
    let out_n = x.batch * oh * ow;
    let mut out = Array2::zeros((c, out_n));
    let mut arg = vec![0u8; c * out_n];
    let src = x.data.as_slice().expect("contiguous activation");
    let dst = out.as_slice_mut().expect("fresh array");
    let n = x.data.ncols();
    for ci in 0..c {
        for b in 0..x.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = ci * n + b * h * w + 2 * oy * w + 2 * ox;
                    let cand = [src[base], src[base + 1], src[base + w], src[base + w + 1]];
                    let mut best = 0;
                    for (i, &v) in cand.iter().enumerate().skip(1) {
                        if v > cand[best] {
                            best = i;
                        }
                    }
                    let o = ci * out_n + b * oh * ow + oy * ow + ox;
                    dst[o] = cand[best];
                    arg[o] = best as u8;
                }
            }
        }
    }
    (Act { data: out, batch: x.batch, height: oh, width: ow }, arg)
}

pub(crate) fn max_pool2_backward<F: Scalar>(dy: &Array2<F>, arg: &[u8], input: &Act<F>) -> Array2<F> {
    let (c, h, w) = (input.channels(), input.height, input.width);
    let (oh, ow) = (h / 2, w / 2);
    let n = input.data.ncols();
    let out_n = dy.ncols();
    let mut dx = Array2::zeros((c, n));
    let d = dx.as_slice_mut().expect("fresh array");
    let g = dy.as_standard_layout();
    let g = g.as_slice().expect("standard layout");
    for ci in 0..c {
        for b in 0..input.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = ci * out_n + b * oh * ow + oy * ow + ox;
                    let k = arg[o] as usize;
                    let idx = ci * n + b * h * w + (2 * oy + k / 2) * w + 2 * ox + k % 2;
                    d[idx] += g[o];
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub(crate) fn upsample2<F: Scalar>(x: &Act<F>) -> Act<F> {
    let (c, h, w) = (x.channels(), x.height, x.width);
    let (oh, ow) = (2 * h, 2 * w);
    let n = x.data.ncols();
    let out_n = x.batch * oh * ow;
    let mut out = Array2::zeros((c, out_n));
    let src = x.data.as_slice().expect("contiguous activation");
    let dst = out.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for b in 0..x.batch {
            for oy in 0..oh {
                let srow = ci * n + b * h * w + (oy / 2) * w;
                let drow = ci * out_n + b * oh * ow + oy * ow;
                for ox in 0..ow {
                    dst[drow + ox] = src[srow + ox / 2];
                }
            }
        }
    }
    Act { data: out, batch: x.batch, height: oh, width: ow }
}

pub(crate) fn upsample2_backward<F: Scalar>(dy: &Array2<F>, small: &Act<F>) -> Array2<F> {
    let (c, h, w) = (small.channels(), small.height, small.width);
    let (oh, ow) = (2 * h, 2 * w);
    let n = small.data.ncols();
    let out_n = dy.ncols();
    let mut dx = Array2::zeros((c, n));
    let d = dx.as_slice_mut().expect("fresh array");
    let g = dy.as_standard_layout();
    let g = g.as_slice().expect("standard layout");
    for ci in 0..c {
        for b in 0..small.batch {
            for oy in 0..oh {
                let srow = ci * n + b * h * w + (oy / 2) * w;
                let grow = ci * out_n + b * oh * ow + oy * ow;
                for ox in 0..ow {
                    d[srow + ox / 2] += g[grow + ox];
                }
            }
        }
    }
    dx
}
