//! Strided, dilated, zero-padded convolution over 1 to 3 spatial axes.
//!
//! Inputs are channels-last `[*spatial, c_in]`, weights `[*kernel, c_in, c_out]`,
//! bias `[c_out]`. Per axis, with total padding `p` split as `p / 2` before and
//! the remainder after:
//!
//! ```text
//! out = (in + p - dilation * (kernel - 1) - 1) / stride + 1
//! ```
//!
//! `Padding::Same` picks the smallest `p` for which `out == ceil(in / stride)`.
//!
//! Kernels lower to im2col + GEMM. Column order is `(tap, c_in)` with taps in
//! row-major kernel order, which matches the flattened weight layout, so the
//! weight tensor is used as a `(taps * c_in) x c_out` matrix without copying.

use crate::error::{shape_err, Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    /// `(before, after)` per spatial axis.
    Explicit(Vec<(usize, usize)>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvConfig {
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub dilation: Vec<usize>,
    pub padding: Padding,
    pub has_bias: bool,
}

impl ConvConfig {
    /// Stride-1, undilated, "same"-padded conv with a bias.
    pub fn same(kernel: &[usize]) -> Self {
        Self {
            kernel: kernel.to_vec(),
            stride: vec![1; kernel.len()],
            dilation: vec![1; kernel.len()],
            padding: Padding::Same,
            has_bias: true,
        }
    }

    /// Cubic (or square) kernel of edge `k` over `dims` spatial axes.
    pub fn cube(dims: usize, k: usize) -> Self {
        Self::same(&vec![k; dims])
    }

    pub fn pointwise(dims: usize) -> Self {
        Self::same(&vec![1; dims])
    }

    pub fn with_stride(mut self, stride: &[usize]) -> Self {
        self.stride = stride.to_vec();
        self
    }

    pub fn with_dilation(mut self, dilation: &[usize]) -> Self {
        self.dilation = dilation.to_vec();
        self
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn spatial_rank(&self) -> usize {
        self.kernel.len()
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.kernel.len();
        if r == 0 || r > 3 {
            return Err(TensorError::InvalidConfig(format!(
                "convolution needs 1..=3 spatial axes, got {r}"
            )));
        }
        if self.stride.len() != r || self.dilation.len() != r {
            return Err(TensorError::InvalidConfig(
                "kernel, stride and dilation must have one entry per axis".into(),
            ));
        }
        if let Padding::Explicit(p) = &self.padding {
            if p.len() != r {
                return Err(TensorError::InvalidConfig(
                    "explicit padding needs one (before, after) pair per axis".into(),
                ));
            }
        }
        let all = self.kernel.iter().chain(&self.stride).chain(&self.dilation);
        if all.into_iter().any(|&v| v == 0) {
            return Err(TensorError::InvalidConfig(
                "kernel, stride and dilation must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Resolved `(before, after)` padding for the given input extents.
    pub fn resolve_padding(&self, input: &[usize]) -> Result<Vec<(usize, usize)>> {
        self.validate()?;
        if input.len() != self.spatial_rank() {
            return shape_err(format!(
                "conv expects {} spatial axes, input has {}",
                self.spatial_rank(),
                input.len()
            ));
        }
        Ok(match &self.padding {
            Padding::Explicit(p) => p.clone(),
            Padding::Same => (0..input.len())
                .map(|a| {
                    let out = input[a].div_ceil(self.stride[a]);
                    let span = self.dilation[a] * (self.kernel[a] - 1) + 1;
                    let need = ((out - 1) * self.stride[a] + span).saturating_sub(input[a]);
                    (need / 2, need - need / 2)
                })
                .collect(),
        })
    }

    /// Output spatial extents, or a shape error when an axis would be empty.
    pub fn output_extents(&self, input: &[usize]) -> Result<Vec<usize>> {
        let pad = self.resolve_padding(input)?;
        (0..input.len())
            .map(|a| {
                let span = self.dilation[a] * (self.kernel[a] - 1) + 1;
                let padded = input[a] + pad[a].0 + pad[a].1;
                if padded < span {
                    shape_err(format!(
                        "axis {a}: padded extent {padded} smaller than kernel span {span}"
                    ))
                } else {
                    Ok((padded - span) / self.stride[a] + 1)
                }
            })
            .collect()
    }

    /// Expected weight shape `[*kernel, c_in, c_out]`.
    pub fn weight_shape(&self, c_in: usize, c_out: usize) -> Vec<usize> {
        let mut s = self.kernel.clone();
        s.push(c_in);
        s.push(c_out);
        s
    }
}

/// Geometry normalized to three spatial axes (missing leading axes have extent 1).
#[derive(Clone, Debug)]
pub(crate) struct Geometry {
    pub in_sp: [usize; 3],
    pub out_sp: [usize; 3],
    pub k: [usize; 3],
    pub s: [usize; 3],
    pub d: [usize; 3],
    pub pad: [usize; 3],
    pub c_in: usize,
    pub c_out: usize,
}

impl Geometry {
    pub fn new(input: &[usize], weights: &[usize], cfg: &ConvConfig) -> Result<Self> {
        cfg.validate()?;
        let r = cfg.spatial_rank();
        if input.len() != r + 1 {
            return shape_err(format!(
                "conv with {r} spatial axes needs an order-{} input, got {input:?}",
                r + 1
            ));
        }
        if weights.len() != r + 2 || weights[..r] != cfg.kernel[..] {
            return shape_err(format!(
                "weights {weights:?} do not match kernel {:?}",
                cfg.kernel
            ));
        }
        let c_in = input[r];
        if weights[r] != c_in {
            return Err(TensorError::ChannelMismatch {
                input: c_in,
                expected: weights[r],
            });
        }
        let out = cfg.output_extents(&input[..r])?;
        let pad = cfg.resolve_padding(&input[..r])?;
        let lift = |v: &[usize]| -> [usize; 3] {
            let mut a = [1; 3];
            a[3 - r..].copy_from_slice(v);
            a
        };
        let before: Vec<usize> = pad.iter().map(|p| p.0).collect();
        let mut pad3 = lift(&before);
        for p in pad3.iter_mut().take(3 - r) {
            *p = 0;
        }
        Ok(Self {
            in_sp: lift(&input[..r]),
            out_sp: lift(&out),
            k: lift(&cfg.kernel),
            s: lift(&cfg.stride),
            d: lift(&cfg.dilation),
            pad: pad3,
            c_in,
            c_out: weights[r + 1],
        })
    }

    pub fn out_sites(&self) -> usize {
        self.out_sp.iter().product()
    }

    pub fn taps(&self) -> usize {
        self.k.iter().product()
    }

    pub fn cols(&self) -> usize {
        self.taps() * self.c_in
    }

    /// True when the input matrix can be used as the column matrix directly.
    pub fn is_pointwise(&self) -> bool {
        self.k == [1; 3] && self.s == [1; 3] && self.pad == [0; 3]
    }

    /// Input index along one axis for every (output index, tap), `NONE` in padding.
    fn axis_table(&self, axis: usize) -> Vec<usize> {
        let (k, s, d, p) = (self.k[axis], self.s[axis], self.d[axis], self.pad[axis]);
        let n_in = self.in_sp[axis];
        let mut t = Vec::with_capacity(self.out_sp[axis] * k);
        for o in 0..self.out_sp[axis] {
            for j in 0..k {
                let i = (o * s + j * d) as isize - p as isize;
                t.push(if i >= 0 && (i as usize) < n_in { i as usize } else { NONE });
            }
        }
        t
    }

    /// For each (output site, tap) that lands inside the input: `f(row, tap, site)`.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [_, ih, iw] = self.in_sp;
        let [od, oh, ow] = self.out_sp;
        let [kd, kh, kw] = self.k;
        let (tz, ty, tx) = (self.axis_table(0), self.axis_table(1), self.axis_table(2));
        let mut row = 0;
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let mut t = 0;
                    for &zi in &tz[z * kd..(z + 1) * kd] {
                        for &yi in &ty[y * kh..(y + 1) * kh] {
                            let plane = if zi == NONE || yi == NONE { NONE } else { (zi * ih + yi) * iw };
                            for &xi in &tx[x * kw..(x + 1) * kw] {
                                if plane != NONE && xi != NONE {
                                    f(row, t, plane + xi);
                                }
                                t += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Lower the input to an (output sites x taps*c_in) matrix.
    pub fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let ci = self.c_in;
        let ncols = self.cols();
        let mut cols = vec![0.0; self.out_sites() * ncols];
        self.for_each_tap(|row, t, s| {
            let dst = row * ncols + t * ci;
            copy_small(&mut cols[dst..dst + ci], &input[s * ci..(s + 1) * ci]);
        });
        cols
    }

    /// Scatter-add a column-gradient matrix back onto input sites.
    pub fn col2im(&self, cols: &[f64], grad_in: &mut [f64]) {
        let ci = self.c_in;
        let ncols = self.cols();
        self.for_each_tap(|row, t, s| {
            let src = row * ncols + t * ci;
            for (g, v) in grad_in[s * ci..(s + 1) * ci].iter_mut().zip(&cols[src..src + ci]) {
                *g += v;
            }
        });
    }
}

const NONE: usize = usize::MAX;

#[inline]
fn copy_small(dst: &mut [f64], src: &[f64]) {
    if dst.len() <= 8 {
        for (a, b) in dst.iter_mut().zip(src) {
            *a = *b;
        }
    } else {
        dst.copy_from_slice(src);
    }
}

/// `c = a (m x k) * b (k x n)`, optionally transposing either operand, all row-major.
/// Accumulates into `c` when `accumulate` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // a is stored as (m x k) or, when transposed, as (k x m).
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above address exactly the asserted buffer lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn output_shape(input: &Tensor, geo: &Geometry) -> Vec<usize> {
    let r = input.rank() - 1;
    let mut shape = geo.out_sp[3 - r..].to_vec();
    shape.push(geo.c_out);
    shape
}

/// Column matrix for `input`, or `None` when the conv is pointwise and the
/// input itself serves as the column matrix.
pub(crate) fn lower(input: &Tensor, weights: &Tensor, cfg: &ConvConfig) -> Result<Option<Vec<f64>>> {
    let geo = Geometry::new(input.shape(), weights.shape(), cfg)?;
    Ok((!geo.is_pointwise()).then(|| geo.im2col(input.data())))
}

/// Forward convolution.
pub fn conv_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    cfg: &ConvConfig,
) -> Result<Tensor> {
    let cols = lower(input, weights, cfg)?;
    conv_forward_lowered(input, weights, bias, cfg, cols.as_deref())
}

pub(crate) fn conv_forward_lowered(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    cfg: &ConvConfig,
    cols: Option<&[f64]>,
) -> Result<Tensor> {
    let geo = Geometry::new(input.shape(), weights.shape(), cfg)?;
    if let Some(b) = bias {
        if b.shape() != [geo.c_out] {
            return shape_err(format!(
                "bias shape {:?} does not match {} output channels",
                b.shape(),
                geo.c_out
            ));
        }
    }
    let m = geo.out_sites();
    let mut out = vec![0.0; m * geo.c_out];
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(geo.c_out) {
            row.copy_from_slice(b.data());
        }
    }
    let a = if geo.is_pointwise() { input.data() } else { cols.expect("column matrix") };
    gemm(m, geo.cols(), geo.c_out, a, false, weights.data(), false, &mut out, bias.is_some());
    Tensor::new(&output_shape(input, &geo), out)
}

pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Option<Tensor>,
}

/// Gradients of a convolution given the upstream gradient of its output.
pub fn conv_backward(
    input: &Tensor,
    weights: &Tensor,
    has_bias: bool,
    cfg: &ConvConfig,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    let cols = lower(input, weights, cfg)?;
    conv_backward_lowered(input, weights, has_bias, cfg, grad_out, cols.as_deref())
}

pub(crate) fn conv_backward_lowered(
    input: &Tensor,
    weights: &Tensor,
    has_bias: bool,
    cfg: &ConvConfig,
    grad_out: &Tensor,
    cols: Option<&[f64]>,
) -> Result<ConvGrads> {
    let geo = Geometry::new(input.shape(), weights.shape(), cfg)?;
    if grad_out.shape() != output_shape(input, &geo).as_slice() {
        return shape_err("upstream gradient does not match conv output");
    }
    let m = geo.out_sites();
    let kc = geo.cols();
    let co = geo.c_out;
    let g = grad_out.data();

    let mut grad_w = vec![0.0; kc * co];
    let mut grad_in = vec![0.0; input.len()];
    if geo.is_pointwise() {
        gemm(kc, m, co, input.data(), true, g, false, &mut grad_w, false);
        gemm(m, co, kc, g, false, weights.data(), true, &mut grad_in, false);
    } else {
        gemm(kc, m, co, cols.expect("column matrix"), true, g, false, &mut grad_w, false);
        let mut grad_cols = vec![0.0; m * kc];
        gemm(m, co, kc, g, false, weights.data(), true, &mut grad_cols, false);
        geo.col2im(&grad_cols, &mut grad_in);
    }
    let bias = has_bias.then(|| {
        let mut gb = vec![0.0; co];
        for row in g.chunks_exact(co) {
            for (a, b) in gb.iter_mut().zip(row) {
                *a += b;
            }
        }
        Tensor::new(&[co], gb).expect("bias gradient shape")
    });
    Ok(ConvGrads {
        input: Tensor::new(input.shape(), grad_in)?,
        weights: Tensor::new(weights.shape(), grad_w)?,
        bias,
    })
}
