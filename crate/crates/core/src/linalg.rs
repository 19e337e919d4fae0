//! Dense Hermitian eigensolvers and the Gaussian test function.

use std::f64::consts::PI;

pub use faer::c64;
use faer::{Mat, Side};

use crate::error::{Error, Result};

pub type CMat = Mat<c64>;

/// Forces faer into single-threaded mode. Parallelism lives one level up
/// (over q points and shifts), which keeps every reduction order fixed.
pub fn init_sequential_kernels() {
    faer::set_global_parallelism(faer::Par::Seq);
}

/// faer's wide-vector kernels can return with the upper vector registers
/// dirty, after which every legacy-SSE instruction (libm's `exp` among them)
/// pays a state-transition penalty of two orders of magnitude.
#[inline]
fn clear_upper_state() {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: AVX support was checked just above.
        unsafe { zero_upper() }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn zero_upper() {
    std::arch::x86_64::_mm256_zeroupper();
}

/// `φ_{εκ}(x)`, the unit-mass Gaussian of centre `eps` and width `kappa`.
#[inline]
pub fn gaussian(x: f64, eps: f64, kappa: f64) -> f64 {
    let z = (x - eps) / kappa;
    // Below e^-600 the value only produces subnormal products downstream.
    if z * z > 1200.0 {
        return 0.0;
    }
    (-0.5 * z * z).exp() / ((2.0 * PI).sqrt() * kappa)
}

/// `Σ_n φ_{εκ}(λ_n)`.
pub fn gaussian_smear(eigenvalues: &[f64], eps: f64, kappa: f64) -> f64 {
    eigenvalues.iter().map(|&l| gaussian(l, eps, kappa)).sum()
}

/// Ascending eigenvalues of a Hermitian matrix (lower triangle is read).
pub fn eigenvalues(m: &CMat) -> Result<Vec<f64>> {
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    let vals = m.self_adjoint_eigenvalues(Side::Lower);
    clear_upper_state();
    let mut vals = vals.map_err(|_| Error::Eigen)?;
    vals.sort_by(f64::total_cmp);
    Ok(vals)
}

#[derive(Debug, Clone)]
pub struct Eigen {
    pub values: Vec<f64>,
    /// Columns are the normalised eigenvectors, in the order of `values`.
    pub vectors: CMat,
}

impl Eigen {
    /// `|v_{i n}|²`, the weight of eigenvector `n` on basis state `i`.
    #[inline]
    pub fn weight(&self, i: usize, n: usize) -> f64 {
        self.vectors[(i, n)].norm_sqr()
    }
}

pub fn eigen(m: &CMat) -> Result<Eigen> {
    let n = m.nrows();
    if n == 0 {
        return Ok(Eigen {
            values: Vec::new(),
            vectors: CMat::zeros(0, 0),
        });
    }
    let evd = m.self_adjoint_eigen(Side::Lower);
    clear_upper_state();
    let evd = evd.map_err(|_| Error::Eigen)?;
    let s = evd.S();
    let u = evd.U();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| s[a].re.total_cmp(&s[b].re));
    let values = order.iter().map(|&k| s[k].re).collect();
    let vectors = CMat::from_fn(n, n, |i, k| u[(i, order[k])]);
    Ok(Eigen { values, vectors })
}

/// Largest singular value of a general complex matrix.
pub fn spectral_norm(m: &CMat) -> Result<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(0.0);
    }
    let sv = m.singular_values();
    clear_upper_state();
    let sv = sv.map_err(|_| Error::Eigen)?;
    Ok(sv.into_iter().fold(0.0, f64::max))
}

/// `max_{ij} |m_ij − conj(m_ji)|`.
pub fn hermitian_defect(m: &CMat) -> f64 {
    let n = m.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..=i {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}
