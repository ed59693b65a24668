//! Dense products with a fixed accumulation order.
//!
//! Every output row is built as `Σ_k a[i,k] · b[k,:]` with `k` ascending and
//! zero coefficients skipped, so a dense product against a matrix with zeros
//! rounds exactly like the sparse product over its nonzeros.

use ndarray::{Array2, ArrayView2};

/// `a · b`
pub(crate) fn matmul(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let (n, k) = a.dim();
    assert_eq!(k, b.nrows());
    let m = b.ncols();
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let (a, b) = (a.as_slice().unwrap(), b.as_slice().unwrap());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[kk * m..(kk + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    Array2::from_shape_vec((n, m), out).unwrap()
}

/// `aᵀ · b`
pub(crate) fn matmul_tn(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let (k, n) = a.dim();
    assert_eq!(k, b.nrows());
    let m = b.ncols();
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let (a, b) = (a.as_slice().unwrap(), b.as_slice().unwrap());
    let mut out = vec![0.0; n * m];
    for kk in 0..k {
        let b_row = &b[kk * m..(kk + 1) * m];
        for (i, &aki) in a[kk * n..(kk + 1) * n].iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let out_row = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aki * bv;
            }
        }
    }
    Array2::from_shape_vec((n, m), out).unwrap()
}

/// `a · bᵀ`
pub(crate) fn matmul_nt(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let (n, k) = a.dim();
    assert_eq!(k, b.ncols());
    let m = b.nrows();
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let (a, b) = (a.as_slice().unwrap(), b.as_slice().unwrap());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * m + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    Array2::from_shape_vec((n, m), out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn kernels_agree_with_ndarray() {
        let a = array![[1.0, 2.0, 0.0], [-1.0, 0.5, 3.0]];
        let b = array![[2.0, 1.0], [0.0, -1.0], [4.0, 0.25]];
        assert_eq!(matmul(a.view(), b.view()), a.dot(&b));
        assert_eq!(matmul_tn(a.t(), b.view()), a.dot(&b));
        assert_eq!(matmul_nt(a.view(), b.t()), a.dot(&b));
    }
}
