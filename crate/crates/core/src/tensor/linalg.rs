use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transpose {
    No,
    Yes,
}

impl Transpose {
    fn is(self) -> bool {
        self == Transpose::Yes
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major slices.
///
/// `a` is stored as `[m, k]` (or `[k, m]` when transposed), `b` as `[k, n]`
/// (or `[n, k]`), `c` as `[m, n]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: Transpose,
    b: &[f64],
    tb: Transpose,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta.is() { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb.is() { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted slice lengths cover every index reachable through
    // the given strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

fn split_matrix<'a>(shape: &'a [usize], op: &'static str) -> Result<(&'a [usize], usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, shape, &[2]));
    }
    let (lead, mat) = shape.split_at(shape.len() - 2);
    Ok((lead, mat[0], mat[1]))
}

/// Batched `op(a) · op(b)` over shared leading axes.
pub fn bmm(a: &Tensor, ta: Transpose, b: &Tensor, tb: Transpose) -> Result<Tensor> {
    let (lead_a, ra, ca) = split_matrix(a.shape(), "bmm")?;
    let (lead_b, rb, cb) = split_matrix(b.shape(), "bmm")?;
    if lead_a != lead_b {
        return Err(Error::shape("bmm", a.shape(), b.shape()));
    }
    let (m, ka) = if ta.is() { (ca, ra) } else { (ra, ca) };
    let (kb, n) = if tb.is() { (cb, rb) } else { (rb, cb) };
    if ka != kb {
        return Err(Error::shape("bmm", a.shape(), b.shape()));
    }
    let batch: usize = lead_a.iter().product();
    let mut shape = lead_a.to_vec();
    shape.extend([m, n]);
    let mut out = vec![0.0; batch * m * n];
    let (sa, sb) = (ra * ca, rb * cb);
    for i in 0..batch {
        gemm(
            m,
            ka,
            n,
            1.0,
            &a.data()[i * sa..(i + 1) * sa],
            ta,
            &b.data()[i * sb..(i + 1) * sb],
            tb,
            0.0,
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    Tensor::new(&shape, out)
}

/// Standard matrix product, batched over shared leading axes.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    bmm(a, Transpose::No, b, Transpose::No)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn zero_annihilates() {
        let b = t(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
        let c = matmul(&Tensor::zeros(&[4, 3]), &b).unwrap();
        assert_eq!(c, Tensor::zeros(&[4, 2]));
    }

    #[test]
    fn identity_is_neutral() {
        let b = t(&[2, 3], &[1., -2., 3., 0.5, 5., 6.]);
        assert_eq!(matmul(&Tensor::eye(2), &b).unwrap(), b);
    }

    #[test]
    fn small_product() {
        let a = t(&[2, 3], &[1., 1., 0., 0., 1., 1.]);
        let b = t(&[3, 2], &[1., 0., 0., 1., 1., 1.]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[1., 1., 1., 2.]);
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn transposed_operands() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[2, 3], &[1., 0., 2., 0., 1., 1.]);
        // a · bᵀ
        let c = bmm(&a, Transpose::No, &b, Transpose::Yes).unwrap();
        assert_eq!(c.data(), &[7., 5., 16., 11.]);
        // aᵀ · b
        let d = bmm(&a, Transpose::Yes, &b, Transpose::No).unwrap();
        let expect = matmul(&a.transpose().unwrap(), &b).unwrap();
        assert_eq!(d, expect);
    }

    #[test]
    fn batched() {
        let a = Tensor::from_fn(&[2, 2, 2], |i| i as f64);
        let b = Tensor::stack(&[Tensor::eye(2), Tensor::eye(2).scale(2.0)]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[0., 1., 2., 3., 8., 10., 12., 14.]);
    }
}
