//! Dense row-major `f32` tensors and the handful of kernels the rest of the
//! crate is built on.
//!
//! Every reduction accumulates in a fixed ascending order so that results are
//! reproducible run to run. Public operations reject NaN/Inf on their outputs;
//! the `kernels` used inside training loops do not check.

use std::cell::Cell;
use std::fmt;

use crate::error::{Error, Result};

thread_local! {
    static LIVE_BYTES: Cell<i64> = const { Cell::new(0) };
    static PEAK_BYTES: Cell<i64> = const { Cell::new(0) };
}

/// High-water accounting of tensor payload bytes on the current thread.
///
/// This is an estimate of tensor storage only (not OS RSS). Tensors moved to
/// and dropped on another thread are credited there, so measurements are
/// meaningful only for single-threaded sections.
pub mod mem {
    use super::{LIVE_BYTES, PEAK_BYTES};

    pub(super) fn alloc(bytes: usize) {
        LIVE_BYTES.with(|live| {
            let now = live.get() + bytes as i64;
            live.set(now);
            PEAK_BYTES.with(|peak| {
                if now > peak.get() {
                    peak.set(now);
                }
            });
        });
    }

    pub(super) fn free(bytes: usize) {
        LIVE_BYTES.with(|live| live.set(live.get() - bytes as i64));
    }

    /// Bytes currently held by live tensors created on this thread.
    pub fn live_bytes() -> i64 {
        LIVE_BYTES.with(|l| l.get())
    }

    /// Highest value `live_bytes` reached since the last reset.
    pub fn peak_bytes() -> i64 {
        PEAK_BYTES.with(|p| p.get())
    }

    /// Resets the high-water mark to the current live total.
    pub fn reset_peak() {
        let live = live_bytes();
        PEAK_BYTES.with(|p| p.set(live));
    }
}

pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, validating the extent product and element finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!("zero extent in {shape:?}")));
        }
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Self::from_parts(shape, data))
    }

    /// Internal constructor without validation.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        mem::alloc(data.len() * 4);
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn into_data(mut self) -> Vec<f32> {
        mem::free(self.data.len() * 4);
        std::mem::take(&mut self.data)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    /// Bitwise equality of shape and every element.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Size of the trailing extents, i.e. the length of one leading-axis row.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let r = self.row_len();
        &self.data[i * r..(i + 1) * r]
    }

    /// Gathers leading-axis rows in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let r = self.row_len();
        let mut data = Vec::with_capacity(rows.len() * r);
        for &i in rows {
            data.extend_from_slice(&self.data[i * r..(i + 1) * r]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor::from_parts(shape, data)
    }

    pub fn nbytes(&self) -> usize {
        self.data.len() * 4
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Self::from_parts(self.shape.clone(), self.data.clone())
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        mem::free(self.data.len() * 4);
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        let head = &self.data[..self.data.len().min(SHOW)];
        if self.data.len() > SHOW {
            write!(f, "{head:?}..")
        } else {
            write!(f, "{head:?}")
        }
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul needs 2-d operands, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner dimensions {k} vs {k2}"
        )));
    }
    let mut out = vec![0.0; m * n];
    kernels::gemm_nn(m, k, n, &a.data, &b.data, &mut out);
    Tensor::from_parts(vec![m, n], out).check_finite("matmul")
}

/// Output extent of a strided, zero-padded sliding window.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel > input + 2 * padding {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

/// Cross-correlation of `input[b×i×H×W]` with `kernel[o×i×h×w]`, zero padded.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    if input.ndim() != 4 || kernel.ndim() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d needs 4-d input and kernel, got {:?} and {:?}",
            input.shape, kernel.shape
        )));
    }
    let [b, c, h, w] = [input.shape[0], input.shape[1], input.shape[2], input.shape[3]];
    let [o, ci, kh, kw] = [kernel.shape[0], kernel.shape[1], kernel.shape[2], kernel.shape[3]];
    if c != ci {
        return Err(Error::ShapeMismatch(format!(
            "conv2d input has {c} channels, kernel expects {ci}"
        )));
    }
    let geom = kernels::ConvGeom::new(c, h, w, kh, kw, stride, padding).ok_or_else(|| {
        Error::ShapeMismatch(format!(
            "kernel {kh}x{kw} (stride {stride}, pad {padding}) does not fit input {h}x{w}"
        ))
    })?;
    let mut out = vec![0.0; b * o * geom.out_len()];
    kernels::conv_forward(&geom, b, o, &input.data, &kernel.data, None, &mut out);
    Tensor::from_parts(vec![b, o, geom.oh, geom.ow], out).check_finite("conv2d")
}

/// L2 norm of every leading-axis row (for conv kernels the flattened filter),
/// optionally folding in the matching bias element.
pub fn row_l2_norms(w: &Tensor, bias: Option<&Tensor>, include_bias: bool) -> Result<Tensor> {
    let m = w.shape[0];
    if let Some(b) = bias {
        if b.len() != m {
            return Err(Error::ShapeMismatch(format!(
                "bias has {} elements for {m} rows",
                b.len()
            )));
        }
    }
    let norms = (0..m)
        .map(|i| {
            let mut acc: f64 = w.row(i).iter().map(|&v| (v as f64) * (v as f64)).sum();
            if include_bias {
                if let Some(b) = bias {
                    let bv = b.data[i] as f64;
                    acc += bv * bv;
                }
            }
            acc.sqrt() as f32
        })
        .collect();
    Ok(Tensor::from_parts(vec![m], norms))
}

/// Unchecked slice kernels shared by the layer implementations.
pub(crate) mod kernels {
    /// `c[m×n] = a[m×k] · b[k×n]`, accumulation in ascending `k`.
    pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
        c[..m * n].fill(0.0);
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            let arow = &a[i * k..(i + 1) * k];
            for (l, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b[l * n..(l + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }

    /// `c[m×n] = a[m×k] · b[n×k]ᵀ`.
    pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = 0.0f32;
                for (x, y) in arow.iter().zip(brow) {
                    acc += x * y;
                }
                c[i * n + j] = acc;
            }
        }
    }

    /// `c[m×n] += a[k×m]ᵀ · b[k×n]`.
    pub fn gemm_tn_acc(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
        for l in 0..k {
            let arow = &a[l * m..(l + 1) * m];
            let brow = &b[l * n..(l + 1) * n];
            for (i, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let crow = &mut c[i * n..(i + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }

    #[derive(Clone, Copy, Debug)]
    pub struct ConvGeom {
        pub c: usize,
        pub h: usize,
        pub w: usize,
        pub kh: usize,
        pub kw: usize,
        pub stride: usize,
        pub pad: usize,
        pub oh: usize,
        pub ow: usize,
    }

    impl ConvGeom {
        pub fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
            let oh = super::conv_out_extent(h, kh, stride, pad)?;
            let ow = super::conv_out_extent(w, kw, stride, pad)?;
            Some(Self { c, h, w, kh, kw, stride, pad, oh, ow })
        }

        pub fn in_len(&self) -> usize {
            self.c * self.h * self.w
        }

        pub fn out_len(&self) -> usize {
            self.oh * self.ow
        }

        pub fn patch_len(&self) -> usize {
            self.c * self.kh * self.kw
        }
    }

    /// Unrolls one sample into a `(c·kh·kw) × (oh·ow)` column matrix.
    pub fn im2col(g: &ConvGeom, x: &[f32], cols: &mut [f32]) {
        let p = g.out_len();
        for ch in 0..g.c {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let row = (ch * g.kh + ki) * g.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            dst[oy * g.ow + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                x[(ch * g.h + iy as usize) * g.w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatters a column matrix back onto an input-shaped gradient (accumulating).
    pub fn col2im(g: &ConvGeom, cols: &[f32], dx: &mut [f32]) {
        let p = g.out_len();
        for ch in 0..g.c {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let row = (ch * g.kh + ki) * g.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy as usize >= g.h {
                            continue;
                        }
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix < 0 || ix as usize >= g.w {
                                continue;
                            }
                            dx[(ch * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }

    /// Batched convolution forward: `out[b×o×oh×ow]`.
    pub fn conv_forward(
        g: &ConvGeom,
        batch: usize,
        out_channels: usize,
        x: &[f32],
        weight: &[f32],
        bias: Option<&[f32]>,
        out: &mut [f32],
    ) {
        let p = g.out_len();
        let mut cols = vec![0.0; g.patch_len() * p];
        for s in 0..batch {
            im2col(g, &x[s * g.in_len()..(s + 1) * g.in_len()], &mut cols);
            let dst = &mut out[s * out_channels * p..(s + 1) * out_channels * p];
            gemm_nn(out_channels, g.patch_len(), p, weight, &cols, dst);
            if let Some(b) = bias {
                for (o, &bv) in b.iter().enumerate() {
                    for v in &mut dst[o * p..(o + 1) * p] {
                        *v += bv;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut RngStream) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    out[i * n + j] += a.data()[i * k + l] as f64 * b.data()[l * n + j] as f64;
                }
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn naive_conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
        let [b, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let [o, _, kh, kw] = [k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]];
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; b * o * oh * ow];
        for s in 0..b {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f64;
                        for ic in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                        continue;
                                    }
                                    let xv = x.data()[((s * c + ic) * h + iy as usize) * w + ix as usize];
                                    let kv = k.data()[((oc * c + ic) * kh + ki) * kw + kj];
                                    acc += xv as f64 * kv as f64;
                                }
                            }
                        }
                        out[((s * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        (vec![b, o, oh, ow], out)
    }

    fn max_rel_err(got: &[f32], want: &[f64]) -> f64 {
        got.iter()
            .zip(want)
            .map(|(&g, &w)| (g as f64 - w).abs() / w.abs().max(1.0))
            .fold(0.0, f64::max)
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let i = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(matmul(&i, &b).unwrap().data(), &[5.0, 6.0, 7.0, 8.0]);
        let r = matmul(&t(&[1, 2], &[1.0, 2.0]), &t(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(r.shape(), &[1, 1]);
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = RngStream::new(7, "test/matmul");
        let a = random(&[7, 5], &mut rng);
        let b = random(&[5, 3], &mut rng);
        let got = matmul(&a, &b).unwrap();
        assert!(max_rel_err(got.data(), &naive_matmul(&a, &b)) <= 1e-6);
    }

    #[test]
    fn matmul_and_conv_match_loop_oracles_on_100_instances() {
        let mut rng = RngStream::new(11, "test/oracle-sweep");
        for case in 0..100 {
            let (m, k, n) = (1 + case % 9, 1 + case % 7, 1 + case % 5);
            let a = random(&[m, k], &mut rng);
            let b = random(&[k, n], &mut rng);
            assert!(max_rel_err(matmul(&a, &b).unwrap().data(), &naive_matmul(&a, &b)) <= 1e-5);

            let stride = 1 + case % 2;
            let pad = case % 3 / 2;
            let x = random(&[2, 1 + case % 3, 5, 6], &mut rng);
            let kern = random(&[1 + case % 4, 1 + case % 3, 1 + case % 3, 2], &mut rng);
            let got = conv2d(&x, &kern, stride, pad).unwrap();
            let (shape, want) = naive_conv(&x, &kern, stride, pad);
            assert_eq!(got.shape(), shape.as_slice());
            assert!(max_rel_err(got.data(), &want) <= 1e-5, "case {case}");
        }
    }

    #[test]
    fn conv_identity_and_sum_kernels() {
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let one = t(&[1, 1, 1, 1], &[1.0]);
        assert!(conv2d(&x, &one, 1, 0).unwrap().bit_eq(&x));

        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let ones = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &ones, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn conv_rejects_channel_disagreement() {
        let err = conv2d(&Tensor::zeros(&[1, 2, 3, 3]), &Tensor::zeros(&[1, 3, 1, 1]), 1, 0).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn row_norms_hand_values() {
        let n = row_l2_norms(&t(&[1, 2], &[3.0, 4.0]), None, false).unwrap();
        assert_eq!(n.data(), &[5.0]);
        let z = row_l2_norms(&Tensor::zeros(&[4, 3]), None, true).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let with_bias = row_l2_norms(&t(&[1, 1], &[3.0]), Some(&t(&[1], &[4.0])), true).unwrap();
        assert_eq!(with_bias.data(), &[5.0]);
    }

    #[test]
    fn row_norms_match_scalar_loop() {
        let mut rng = RngStream::new(3, "test/norms");
        let w = random(&[8, 6], &mut rng);
        let got = row_l2_norms(&w, None, false).unwrap();
        for i in 0..8 {
            let mut s = 0.0f64;
            for j in 0..6 {
                let v = w.data()[i * 6 + j] as f64;
                s += v * v;
            }
            assert!((got.data()[i] as f64 - s.sqrt()).abs() <= 1e-6);
        }
    }

    #[test]
    fn new_rejects_non_finite_and_bad_lengths() {
        assert!(matches!(Tensor::new(vec![2], vec![1.0, f32::NAN]), Err(Error::NonFinite(_))));
        assert!(matches!(Tensor::new(vec![3], vec![1.0]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn memory_accounting_tracks_peak() {
        mem::reset_peak();
        let base = mem::live_bytes();
        {
            let _a = Tensor::zeros(&[256]);
            let _b = Tensor::zeros(&[256]);
            assert_eq!(mem::live_bytes() - base, 2048);
        }
        assert_eq!(mem::live_bytes(), base);
        assert!(mem::peak_bytes() - base >= 2048);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn row_norms_permutation_equivariant(seed in 0u64..1000, rows in 1usize..10, cols in 1usize..8) {
                let mut rng = RngStream::new(seed, "prop/norms");
                let w = random(&[rows, cols], &mut rng);
                let mut perm: Vec<usize> = (0..rows).collect();
                rng.shuffle(&mut perm);
                let base = row_l2_norms(&w, None, true).unwrap();
                let permuted = row_l2_norms(&w.select_rows(&perm), None, true).unwrap();
                for (dst, &src) in perm.iter().enumerate() {
                    prop_assert_eq!(permuted.data()[dst].to_bits(), base.data()[src].to_bits());
                }
            }
        }
    }
}
