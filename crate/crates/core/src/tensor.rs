//! Dense row-major tensors and the numeric kernels shared by the autodiff
//! graph and the eager inference paths.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Floating point element type of a [`Tensor`].
///
/// Training runs in `f32`; gradient checks run in `f64`.
pub trait Scalar:
    Float + FromPrimitive + Sum + Default + Debug + Send + Sync + 'static
{
    /// Raw strided GEMM: `c = alpha * a * b + beta * c`.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping buffers of
    /// the stated dimensions.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A borrowed strided matrix view used as a GEMM operand.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Contiguous row-major matrix.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, row_stride: cols, col_stride: 1 }
    }

    /// Contiguous row-major block of `rows` rows out of a wider matrix whose
    /// rows are `stride` apart.
    pub fn strided(data: &'a [T], rows: usize, cols: usize, stride: usize) -> Self {
        Self { data, rows, cols, row_stride: stride, col_stride: 1 }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// `c = a * b + beta * c` where `c` is a row-major block with row stride
/// `ldc`.
pub fn gemm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T], ldc: usize) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(ldc >= n);
    assert!((m - 1) * ldc + n <= c.len(), "gemm output too small");
    if k == 0 {
        for row in 0..m {
            for v in &mut c[row * ldc..row * ldc + n] {
                *v = beta * *v;
            }
        }
        return;
    }
    assert!(a.max_index() < a.data.len(), "gemm lhs out of bounds");
    assert!(b.max_index() < b.data.len(), "gemm rhs out of bounds");
    // SAFETY: extents were checked against every buffer above, and `c` is a
    // unique borrow so it cannot alias the inputs.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a tensor of {} elements", self.data.len());
        self.data[0]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Dimensions of a `[C, H, W]` tensor.
    pub fn chw(&self) -> (usize, usize, usize) {
        match self.shape[..] {
            [c, h, w] => (c, h, w),
            _ => panic!("expected a [C, H, W] tensor, got {:?}", self.shape),
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const COL_BUDGET: usize = 1 << 22;

fn rows_per_chunk(col_rows: usize, width: usize, height: usize) -> usize {
    (COL_BUDGET / (col_rows * width).max(1)).clamp(1, height.max(1))
}

/// Fills `col` (`[C*k*k, rows*W]`) with the zero-padded patches feeding
/// output rows `y0..y0+rows` of a stride-1 "same" convolution.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, y0: usize, rows: usize, col: &mut [T]) {
    let pad = k / 2;
    let n = rows * w;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let dst = &mut col[r * n..(r + 1) * n];
                // valid output columns: 0 <= ox + kx - pad < w
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                for oy in 0..rows {
                    let iy = (y0 + oy + ky) as isize - pad as isize;
                    let row = &mut dst[oy * w..(oy + 1) * w];
                    if iy < 0 || iy >= h as isize || x_lo >= x_hi {
                        row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    row[..x_lo].fill(T::zero());
                    row[x_hi..].fill(T::zero());
                    let off = x_lo + kx - pad;
                    row[x_lo..x_hi].copy_from_slice(&src[off..off + (x_hi - x_lo)]);
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, k: usize, y0: usize, rows: usize, dx: &mut [T]) {
    let pad = k / 2;
    let n = rows * w;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let src = &col[r * n..(r + 1) * n];
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for oy in 0..rows {
                    let iy = (y0 + oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let off = x_lo + kx - pad;
                    let dst = &mut plane[iy as usize * w + off..iy as usize * w + off + (x_hi - x_lo)];
                    for (d, &s) in dst.iter_mut().zip(&src[oy * w + x_lo..oy * w + x_hi]) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

/// Stride-1 "same" convolution of `x: [C, H, W]` with `weight: [O, C, k, k]`
/// (odd `k`) plus `bias: [O]`, optionally rectified.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, relu: bool) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let (o, k) = conv_dims(weight, c);
    let mut out = vec![T::zero(); o * h * w];
    for oc in 0..o {
        out[oc * h * w..(oc + 1) * h * w].fill(bias.data[oc]);
    }
    let ck = c * k * k;
    let chunk = rows_per_chunk(ck, w, h);
    let mut col = vec![T::zero(); ck * chunk * w];
    let wmat = MatRef::new(weight.data(), o, ck);
    let mut y0 = 0;
    while y0 < h {
        let rows = chunk.min(h - y0);
        let n = rows * w;
        im2col(x.data(), c, h, w, k, y0, rows, &mut col[..ck * n]);
        gemm(wmat, MatRef::new(&col[..ck * n], ck, n), T::one(), &mut out[y0 * w..], h * w);
        y0 += rows;
    }
    if relu {
        for v in &mut out {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
    }
    Tensor::new(vec![o, h, w], out)
}

fn conv_dims<T: Scalar>(weight: &Tensor<T>, c: usize) -> (usize, usize) {
    match weight.shape()[..] {
        [o, wc, k, k2] if wc == c && k == k2 && k % 2 == 1 => (o, k),
        _ => panic!("conv weight {:?} incompatible with {c} input channels", weight.shape()),
    }
}

/// Gradients of [`conv2d_forward`] given the (already rectifier-masked)
/// output gradient. Returns `(dx, dweight, dbias)`, each only when asked.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad: &Tensor<T>,
    want_x: bool,
    want_params: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (c, h, w) = x.chw();
    let (o, k) = conv_dims(weight, c);
    let ck = c * k * k;
    let chunk = rows_per_chunk(ck, w, h);
    let mut col = vec![T::zero(); ck * chunk * w];
    let mut dx = want_x.then(|| vec![T::zero(); c * h * w]);
    let mut dw = want_params.then(|| vec![T::zero(); o * ck]);
    let wmat = MatRef::new(weight.data(), o, ck);
    let g = grad.data();
    let mut y0 = 0;
    while y0 < h {
        let rows = chunk.min(h - y0);
        let n = rows * w;
        let gmat = MatRef::strided(&g[y0 * w..], o, n, h * w);
        if let Some(dw) = dw.as_mut() {
            im2col(x.data(), c, h, w, k, y0, rows, &mut col[..ck * n]);
            gemm(gmat, MatRef::new(&col[..ck * n], ck, n).t(), T::one(), dw, ck);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(wmat.t(), gmat, T::zero(), &mut col[..ck * n], n);
            col2im_add(&col[..ck * n], c, h, w, k, y0, rows, dx);
        }
        y0 += rows;
    }
    let db = want_params.then(|| {
        let data = (0..o).map(|oc| g[oc * h * w..(oc + 1) * h * w].iter().copied().sum()).collect();
        Tensor::new(vec![o], data)
    });
    (
        dx.map(|d| Tensor::new(vec![c, h, w], d)),
        dw.map(|d| Tensor::new(weight.shape().to_vec(), d)),
        db,
    )
}

/// 2x2 stride-2 max pooling with ceil rounding; partial windows at the
/// border pool over the pixels they cover. Returns the argmax index (into
/// the input) of every output element.
pub fn max_pool2_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (c, h, w) = x.chw();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    let data = x.data();
    for ci in 0..c {
        let base = ci * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let (iy, ix) = (2 * oy + dy, 2 * ox + dx);
                    if iy < h && ix < w {
                        let j = base + iy * w + ix;
                        if data[j] > data[best] {
                            best = j;
                        }
                    }
                }
                out.push(data[best]);
                idx.push(best as u32);
            }
        }
    }
    (Tensor::new(vec![c, oh, ow], out), idx)
}

/// `out[c] = r * x[c] * colsᵀ` for every channel of `x: [C, H, W]`, with
/// `r: [H', H]` and `cols: [W', W]`.
pub fn separable_apply<T: Scalar>(x: &Tensor<T>, r: &Tensor<T>, cols: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let (oh, ow) = (r.shape()[0], cols.shape()[0]);
    assert_eq!(r.shape(), [oh, h]);
    assert_eq!(cols.shape(), [ow, w]);
    let mut tmp = vec![T::zero(); oh * w];
    let mut out = vec![T::zero(); c * oh * ow];
    for ci in 0..c {
        let plane = &x.data()[ci * h * w..(ci + 1) * h * w];
        gemm(MatRef::new(r.data(), oh, h), MatRef::new(plane, h, w), T::zero(), &mut tmp, w);
        gemm(
            MatRef::new(&tmp, oh, w),
            MatRef::new(cols.data(), ow, w).t(),
            T::zero(),
            &mut out[ci * oh * ow..],
            ow,
        );
    }
    Tensor::new(vec![c, oh, ow], out)
}
