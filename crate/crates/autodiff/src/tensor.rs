use crate::error::{AdError, Result};

/// Dense row-major `f64` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(AdError::InvalidShape {
                op: "tensor",
                shape,
                detail: "extents must be positive".into(),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(AdError::InvalidShape {
                op: "tensor",
                shape,
                detail: format!("expected {n} elements, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len().max(1)],
            data: if data.is_empty() { vec![0.0] } else { data },
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(AdError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `out[m,n] += a[m,k] * b[k,n]` with strides, each output accumulated in
/// increasing `k` order regardless of `m`. Results therefore do not depend
/// on how many rows are batched together, nor on which kernel variant runs
/// (no fused multiply-add is ever emitted).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_rs: usize,
    a_cs: usize,
    b: &[f64],
    b_rs: usize,
    b_cs: usize,
    out: &mut [f64],
) {
    if b_cs != 1 || b_rs != n {
        let mut packed = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                packed[p * n + j] = b[p * b_rs + j * b_cs];
            }
        }
        return gemm(m, k, n, a, a_rs, a_cs, &packed, n, 1, out);
    }
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            unsafe { gemm_avx2(m, k, n, a, a_rs, a_cs, b, out) };
            return;
        }
    }
    gemm_kernel(m, k, n, a, a_rs, a_cs, b, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_avx2(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_rs: usize,
    a_cs: usize,
    b: &[f64],
    out: &mut [f64],
) {
    gemm_kernel(m, k, n, a, a_rs, a_cs, b, out);
}

/// Register-blocked kernel over a row-major `b` with row stride `n`.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gemm_kernel(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_rs: usize,
    a_cs: usize,
    b: &[f64],
    out: &mut [f64],
) {
    const MR: usize = 4;
    const NR: usize = 8;
    let mut i0 = 0;
    while i0 < m {
        let mr = MR.min(m - i0);
        let mut j0 = 0;
        while j0 < n {
            let nr = NR.min(n - j0);
            if mr == MR && nr == NR {
                let mut acc = [[0.0f64; NR]; MR];
                for (r, row) in acc.iter_mut().enumerate() {
                    row.copy_from_slice(&out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
                }
                for p in 0..k {
                    let bp: &[f64; NR] = b[p * n + j0..p * n + j0 + NR].try_into().unwrap();
                    for (r, row) in acc.iter_mut().enumerate() {
                        let av = a[(i0 + r) * a_rs + p * a_cs];
                        for c in 0..NR {
                            row[c] += av * bp[c];
                        }
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
                }
            } else {
                for r in 0..mr {
                    for c in 0..nr {
                        let o = (i0 + r) * n + j0 + c;
                        let mut acc = out[o];
                        for p in 0..k {
                            acc += a[(i0 + r) * a_rs + p * a_cs] * b[p * n + j0 + c];
                        }
                        out[o] = acc;
                    }
                }
            }
            j0 += NR;
        }
        i0 += MR;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn gemm_matches_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect();
        let mut out = vec![0.0; 8];
        gemm(2, 3, 4, &a, 3, 1, &b, 4, 1, &mut out);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(out[i * 4 + j], want);
            }
        }
    }
}
