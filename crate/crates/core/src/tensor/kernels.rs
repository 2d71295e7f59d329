//! Untracked numeric kernels shared by the tape and by callers.

use crate::error::{invalid, Result};

/// `c (+)= op(a) * op(b)` with `op(a)` m×k and `op(b)` k×n, all row-major.
///
/// `a_t`/`b_t` say the stored buffer is the transpose of the operand.
#[allow(clippy::too_many_arguments)]
pub fn matmul_into(
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    m: usize,
    k: usize,
    n: usize,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above pin every buffer to exactly the extent the
    // strides address, and `c` does not alias `a` or `b` (distinct borrows).
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

/// Indices of the `k` largest values in descending order, lower index first on ties.
pub fn topk_indices(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > values.len() {
        return Err(invalid(format!("top-k with k = {k} over {} values", values.len())));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Interpolation taps along one axis: output cell `o` reads
/// `(1 - frac[o]) * in[lo[o]] + frac[o] * in[hi[o]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

/// Half-pixel-centre taps (the `align_corners = false` convention).
pub fn bilinear_taps(input: usize, output: usize) -> AxisTaps {
    let scale = input as f64 / output as f64;
    let mut taps = AxisTaps {
        lo: Vec::with_capacity(output),
        hi: Vec::with_capacity(output),
        frac: Vec::with_capacity(output),
    };
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(input - 1);
        let hi = (lo + 1).min(input - 1);
        let frac = if hi == lo { 0.0 } else { src - lo as f64 };
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.frac.push(frac);
    }
    taps
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_operands() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        matmul_into(&a, false, &b, false, 2, 3, 2, &mut c, false);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);

        // aᵀ stored as 3×2
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c2 = [0.0; 4];
        matmul_into(&at, true, &bt, true, 2, 3, 2, &mut c2, false);
        assert_eq!(c2, c);
        matmul_into(&at, true, &bt, true, 2, 3, 2, &mut c2, true);
        assert_eq!(c2, [8.0, 10.0, 20.0, 22.0]);
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_indices(&[5.0, 1.0, 9.0], 1).unwrap(), vec![2]);
        assert_eq!(topk_indices(&[7.0, 7.0, 7.0], 2).unwrap(), vec![0, 1]);
        assert!(topk_indices(&[1.0], 0).is_err());
        assert!(topk_indices(&[1.0], 2).is_err());
    }

    #[test]
    fn identity_taps() {
        let taps = bilinear_taps(5, 5);
        assert_eq!(taps.lo, vec![0, 1, 2, 3, 4]);
        assert!(taps.frac.iter().all(|&f| f == 0.0));
    }
}
