//! Plain `ndarray` compute kernels backing the tape ops.
//!
//! Everything here is shape-polymorphic over `ArrayD<f64>` and free of any
//! autodiff bookkeeping; the tape layer decides what to record.

use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn};

/// NumPy-style broadcast shape of two operand shapes.
///
/// Panics if the shapes are incompatible; callers validate user-facing
/// shapes before reaching this point.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast: {:?} vs {:?}",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

fn broadcast_view<'a>(a: &'a ArrayD<f64>, shape: &[usize]) -> ArrayViewD<'a, f64> {
    a.broadcast(IxDyn(shape))
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", a.shape(), shape))
}

pub fn binary(a: &ArrayD<f64>, b: &ArrayD<f64>, f: impl Fn(f64, f64) -> f64) -> ArrayD<f64> {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = broadcast_view(a, &shape);
    let bv = broadcast_view(b, &shape);
    let mut out = ArrayD::zeros(IxDyn(&shape));
    ndarray::Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

pub fn unary(a: &ArrayD<f64>, f: impl Fn(f64) -> f64) -> ArrayD<f64> {
    a.mapv(f)
}

/// Reduce `a` back to `target` shape by summing broadcast axes.
///
/// Inverse of broadcasting: leading extra axes are summed away, then any
/// axis where the target length is 1 but the source is larger is summed
/// with the axis kept.
pub fn sum_to(a: &ArrayD<f64>, target: &[usize]) -> ArrayD<f64> {
    let mut cur = a.clone();
    while cur.ndim() > target.len() {
        cur = cur.sum_axis(Axis(0));
    }
    for (ax, &t) in target.iter().enumerate() {
        if t == 1 && cur.shape()[ax] != 1 {
            cur = cur.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    assert_eq!(cur.shape(), target, "sum_to shape mismatch");
    cur
}

pub fn broadcast_to(a: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    broadcast_view(a, shape).to_owned()
}

/// Sum over the given axes, optionally keeping them as length-1 dims.
pub fn sum_axes(a: &ArrayD<f64>, axes: &[usize], keep: bool) -> ArrayD<f64> {
    let mut sorted: Vec<usize> = axes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut cur = a.clone();
    for &ax in sorted.iter().rev() {
        cur = cur.sum_axis(Axis(ax));
        if keep {
            cur = cur.insert_axis(Axis(ax));
        }
    }
    cur
}

/// Shape after `sum_axes(.., keep = true)`.
pub fn keepdim_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let mut out = shape.to_vec();
    for &ax in axes {
        out[ax] = 1;
    }
    out
}

pub fn reshape(a: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let numel: usize = shape.iter().product();
    assert_eq!(a.len(), numel, "reshape {:?} -> {:?}", a.shape(), shape);
    let flat: Vec<f64> = if a.is_standard_layout() {
        a.as_slice().unwrap().to_vec()
    } else {
        a.iter().copied().collect()
    };
    ArrayD::from_shape_vec(IxDyn(shape), flat).unwrap()
}

pub fn permute(a: &ArrayD<f64>, axes: &[usize]) -> ArrayD<f64> {
    a.view().permuted_axes(IxDyn(axes)).to_owned()
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &ax) in axes.iter().enumerate() {
        inv[ax] = i;
    }
    inv
}

pub fn slice_axis(a: &ArrayD<f64>, axis: usize, start: usize, len: usize) -> ArrayD<f64> {
    a.slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
        .to_owned()
}

pub fn pad_zero_axis(a: &ArrayD<f64>, axis: usize, before: usize, after: usize) -> ArrayD<f64> {
    let mut shape = a.shape().to_vec();
    shape[axis] += before + after;
    let mut out = ArrayD::zeros(IxDyn(&shape));
    out.slice_axis_mut(
        Axis(axis),
        ndarray::Slice::from(before..before + a.shape()[axis]),
    )
    .assign(a);
    out
}

pub fn concat(parts: &[&ArrayD<f64>], axis: usize) -> ArrayD<f64> {
    let views: Vec<ArrayViewD<f64>> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch")
}

/// Row-major matrix multiply via `matrixmultiply::dgemm`.
///
/// `a` is M x K, `b` is K x N, both standard layout; writes into a fresh
/// M x N buffer.
pub fn matmul2(a: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
    assert_eq!(a.ndim(), 2, "matmul lhs must be 2-d");
    assert_eq!(b.ndim(), 2, "matmul rhs must be 2-d");
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, k2, "matmul inner dims: {:?} x {:?}", a.shape(), b.shape());
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let mut out = vec![0.0f64; m * n];
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    ArrayD::from_shape_vec(IxDyn(&[m, n]), out).unwrap()
}

/// Batched matmul over the leading axis: [B,M,K] x [B,K,N] -> [B,M,N].
pub fn bmm(a: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
    assert_eq!(a.ndim(), 3, "bmm lhs must be 3-d");
    assert_eq!(b.ndim(), 3, "bmm rhs must be 3-d");
    let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (bs2, k2, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
    assert_eq!(bs, bs2, "bmm batch dims differ");
    assert_eq!(k, k2, "bmm inner dims differ");
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let asl = a.as_slice().unwrap();
    let bsl = b.as_slice().unwrap();
    let mut out = vec![0.0f64; bs * m * n];
    for i in 0..bs {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                asl[i * m * k..].as_ptr(),
                k as isize,
                1,
                bsl[i * k * n..].as_ptr(),
                n as isize,
                1,
                0.0,
                out[i * m * n..].as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[bs, m, n]), out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[3, 1], &[1, 4]), vec![3, 4]);
        assert_eq!(broadcast_shape(&[], &[2, 2]), vec![2, 2]);
        assert_eq!(broadcast_shape(&[5], &[2, 5]), vec![2, 5]);
    }

    #[test]
    fn sum_to_inverts_broadcast() {
        let a = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = broadcast_to(&a.clone().into_shape_with_order(IxDyn(&[1, 2, 3])).unwrap(), &[4, 2, 3]);
        let s = sum_to(&b, &[1, 2, 3]);
        assert_eq!(s.shape(), &[1, 2, 3]);
        assert_eq!(s[[0, 0, 0]], 4.0);
        assert_eq!(s[[0, 1, 2]], 24.0);
    }

    #[test]
    fn matmul_matches_ndarray_dot() {
        let a = arr2(&[[1., 2.], [3., 4.], [5., 6.]]);
        let b = arr2(&[[7., 8., 9.], [10., 11., 12.]]);
        let got = matmul2(&a.clone().into_dyn(), &b.clone().into_dyn());
        let want = a.dot(&b);
        assert_eq!(got.shape(), &[3, 3]);
        for i in 0..3 {
            for j in 0..3 {
                assert!((got[[i, j]] - want[[i, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bmm_per_batch() {
        let a = ArrayD::from_shape_vec(IxDyn(&[2, 1, 2]), vec![1., 2., 3., 4.]).unwrap();
        let b = ArrayD::from_shape_vec(IxDyn(&[2, 2, 1]), vec![5., 6., 7., 8.]).unwrap();
        let c = bmm(&a, &b);
        assert_eq!(c.shape(), &[2, 1, 1]);
        assert_eq!(c[[0, 0, 0]], 17.0);
        assert_eq!(c[[1, 0, 0]], 53.0);
    }

    #[test]
    fn pad_and_slice_roundtrip() {
        let a = ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1., 2., 3., 4.]).unwrap();
        let p = pad_zero_axis(&a, 1, 1, 2);
        assert_eq!(p.shape(), &[2, 5]);
        assert_eq!(p[[0, 0]], 0.0);
        assert_eq!(p[[0, 1]], 1.0);
        let s = slice_axis(&p, 1, 1, 2);
        assert_eq!(s, a);
    }
}
