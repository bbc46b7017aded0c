use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Real;

/// Dense row-major array: the last axis is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct NdArray<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> NdArray<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(NdArray {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        NdArray {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn scalar(v: T) -> Self {
        NdArray {
            shape: vec![],
            data: vec![v],
        }
    }

    /// Standard normal draws scaled by `std`. The draws are taken in `f64`,
    /// so both widths see the same stream.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        NdArray {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
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

    /// Value of a one-element array.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {:?}", self.shape, shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        NdArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> NdArray<U> {
        NdArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Adds `other` in place; shapes must match.
    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_nn<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let bp = &b[p * n..(p + 1) * n];
            for (cv, &bv) in ci.iter_mut().zip(bp) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// Dot product over eight fixed lanes, summed in a fixed order so the
/// result is reproducible while the loop still vectorizes.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s = s + x * y;
    }
    s
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn gemm_nt<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = c[i * n + j] + dot(ai, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub(crate) fn gemm_tn<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p in 0..k {
        let bp = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let ci = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in ci.iter_mut().zip(bp) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// Geometry of a 3D convolution over `[N, C, D, H, W]` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: usize,
    pub pad: usize,
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x_shape.len() != 5 || w_shape.len() != 5 {
            return Err(Error::Shape(format!(
                "conv3d wants 5-D input and kernel, got {x_shape:?} and {w_shape:?}"
            )));
        }
        if x_shape[1] != w_shape[1] {
            return Err(Error::Shape(format!(
                "conv3d channels: input {x_shape:?} vs kernel {w_shape:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv3d stride must be positive".into()));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let span = x_shape[2 + a] + 2 * pad;
            let k = w_shape[2 + a];
            if k == 0 || span < k {
                return Err(Error::Shape(format!(
                    "conv3d kernel {w_shape:?} larger than padded input {x_shape:?}"
                )));
            }
            output[a] = (span - k) / stride + 1;
        }
        Ok(ConvGeom {
            in_ch: x_shape[1],
            out_ch: w_shape[0],
            input: [x_shape[2], x_shape[3], x_shape[4]],
            kernel: [w_shape[2], w_shape[3], w_shape[4]],
            stride,
            pad,
            output,
        })
    }

    pub fn in_len(&self) -> usize {
        self.in_ch * self.input.iter().product::<usize>()
    }

    pub fn out_spatial(&self) -> usize {
        self.output.iter().product()
    }

    pub fn col_rows(&self) -> usize {
        self.in_ch * self.kernel.iter().product::<usize>()
    }

    /// For each kernel offset along `axis`, the input coordinate read by every
    /// output coordinate (`None` inside the zero padding).
    fn axis_table(&self, axis: usize) -> Vec<Vec<Option<usize>>> {
        (0..self.kernel[axis])
            .map(|k| {
                (0..self.output[axis])
                    .map(|o| {
                        let p = (o * self.stride + k) as isize - self.pad as isize;
                        (p >= 0 && p < self.input[axis] as isize).then_some(p as usize)
                    })
                    .collect()
            })
            .collect()
    }

    /// Visits `(column row, output index, input offset)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let tables = [self.axis_table(0), self.axis_table(1), self.axis_table(2)];
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.output;
        let [_, h, w] = self.input;
        let plane = self.input.iter().product::<usize>();
        let mut r = 0;
        for c in 0..self.in_ch {
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let mut j = 0;
                        for &z in &tables[0][a] {
                            for &y in &tables[1][b] {
                                if let (Some(z), Some(y)) = (z, y) {
                                    let base = c * plane + (z * h + y) * w;
                                    for (k, &x) in tables[2][e].iter().enumerate() {
                                        if let Some(x) = x {
                                            f(r, j + k, base + x);
                                        }
                                    }
                                }
                                j += ow;
                            }
                        }
                        debug_assert_eq!(j, od * oh * ow);
                        r += 1;
                    }
                }
            }
        }
    }

    /// Unfolds one sample into `[col_rows, out_spatial]`.
    pub(crate) fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let ns = self.out_spatial();
        col.iter_mut().for_each(|v| *v = T::zero());
        self.for_each_tap(|r, j, s| col[r * ns + j] = x[s]);
    }

    /// Scatter-adds columns back onto one sample.
    pub(crate) fn col2im<T: Real>(&self, col: &[T], dx: &mut [T]) {
        let ns = self.out_spatial();
        self.for_each_tap(|r, j, s| dx[s] = dx[s] + col[r * ns + j]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(NdArray::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        let a = NdArray::<f64>::new(&[2, 3], vec![1.0; 6]).unwrap();
        assert!(a.clone().reshape(&[4]).is_err());
        assert_eq!(a.reshape(&[3, 2]).unwrap().shape(), &[3, 2]);
    }

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm_nn(2, 4, 3, &a, &b, &mut c);
        let mut want = vec![0.0; 8];
        for i in 0..2 {
            for j in 0..4 {
                for p in 0..3 {
                    want[i * 4 + j] += a[i * 3 + p] * b[p * 4 + j];
                }
            }
        }
        assert_eq!(c, want);
        // bᵀ stored as 4x3
        let bt: Vec<f64> = (0..12).map(|i| b[(i % 3) * 4 + i / 3]).collect();
        let mut c2 = vec![0.0; 8];
        gemm_nt(2, 4, 3, &a, &bt, &mut c2);
        assert_eq!(c2, want);
        let at: Vec<f64> = (0..6).map(|i| a[(i % 2) * 3 + i / 2]).collect();
        let mut c3 = vec![0.0; 8];
        gemm_tn(2, 4, 3, &at, &b, &mut c3);
        assert_eq!(c3, want);
    }

    #[test]
    fn randn_widths_share_stream() {
        let a = NdArray::<f32>::randn(&[16], 1.0, &mut crate::rng::rng_from_seed(1));
        let b = NdArray::<f64>::randn(&[16], 1.0, &mut crate::rng::rng_from_seed(1));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, *y as f32);
        }
    }
}
