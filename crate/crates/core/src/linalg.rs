//! Small complex linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

pub const J: C64 = C64::new(0.0, 1.0);

/// `u vᴴ`
pub fn outer(u: &CVec, v: &CVec) -> CMat {
    u * v.adjoint()
}

pub fn hermitian_part(m: &CMat) -> CMat {
    (m + m.adjoint()).scale(0.5)
}

/// `Re tr(A B)` without forming the product.
pub fn re_trace_product(a: &CMat, b: &CMat) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for k in 0..a.ncols() {
            let x = a[(i, k)];
            let y = b[(k, i)];
            acc += x.re * y.re - x.im * y.im;
        }
    }
    acc
}

pub fn trace_re(m: &CMat) -> f64 {
    (0..m.nrows()).map(|i| m[(i, i)].re).sum()
}

/// Eigen-decomposition of a Hermitian matrix with eigenvalues in ascending order.
pub fn hermitian_eigen(m: &CMat) -> (Vec<f64>, CMat) {
    let n = m.nrows();
    if n == 0 {
        return (Vec::new(), CMat::zeros(0, 0));
    }
    let eig = hermitian_part(m).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = CMat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Largest eigenvalue and its unit eigenvector.
pub fn principal_component(m: &CMat) -> (f64, CVec) {
    let (values, vectors) = hermitian_eigen(m);
    let n = values.len();
    (values[n - 1], vectors.column(n - 1).into_owned())
}

pub fn min_eigenvalue(m: &CMat) -> f64 {
    hermitian_eigen(m).0[0]
}

/// Projects onto the PSD cone by clipping negative eigenvalues.
pub fn psd_projection(m: &CMat) -> CMat {
    let (values, vectors) = hermitian_eigen(m);
    let mut out = CMat::zeros(m.nrows(), m.ncols());
    for (i, &v) in values.iter().enumerate() {
        if v > 0.0 {
            let u = vectors.column(i).into_owned();
            out += outer(&u, &u).scale(v);
        }
    }
    out
}

/// `tr(Q) − λ_max(Q)`, the rank-one gap of a PSD matrix.
pub fn rank_one_gap(q: &CMat) -> f64 {
    if q.nrows() == 0 {
        return 0.0;
    }
    let (values, _) = hermitian_eigen(q);
    let tr: f64 = values.iter().sum();
    (tr - values[values.len() - 1]).max(0.0)
}

pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> C64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(s * re, s * im)
}

pub fn complex_normal_vector<R: Rng + ?Sized>(rng: &mut R, n: usize, variance: f64) -> CVec {
    CVec::from_fn(n, |_, _| complex_normal(rng, variance))
}

/// Random Hermitian PSD matrix `G Gᴴ` with `G` of size `n × rank`.
pub fn random_psd<R: Rng + ?Sized>(rng: &mut R, n: usize, rank: usize) -> CMat {
    let g = CMat::from_fn(n, rank, |_, _| complex_normal(rng, 1.0));
    &g * g.adjoint()
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0) * 1e-3
}

pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * (w / 1e-3).log10()
}

/// Inverse of a real symmetric positive definite matrix through Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    sym.cholesky().map(|c| c.inverse())
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}
