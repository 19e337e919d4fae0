//! Monolayer Bloch matrices, band structures and the monolayer density of
//! states in its real-space and Brillouin-zone forms.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{BilayerGeometry, Layer, Vec2};
use crate::linalg::{c64, eigenvalues, gaussian_smear, CMat};
use crate::tb_model::{HoppingModel, IntraHoppingTable};

#[derive(Debug, Clone)]
pub struct BlochMatrix {
    pub q: Vec2,
    pub block: CMat,
}

/// `𝓖h(q) = Σ_R h(R) e^{-iq·R}`.
pub fn bloch_matrix(table: &IntraHoppingTable, q: Vec2) -> BlochMatrix {
    let m = table.n_orbitals();
    let mut block = CMat::zeros(m, m);
    for e in table.entries() {
        let phase = c64::from_polar(1.0, -q.dot(&table.basis().point(e.n)));
        for a in 0..m {
            for b in 0..m {
                block[(a, b)] += e.block[a * m + b] * phase;
            }
        }
    }
    BlochMatrix { q, block }
}

/// Ascending eigenvalues `ε_{q1} ≤ … ≤ ε_{q|A|}`.
pub fn bloch_eigenvalues(table: &IntraHoppingTable, q: Vec2) -> Result<Vec<f64>> {
    eigenvalues(&bloch_matrix(table, q).block)
}

#[derive(Debug, Clone, Default)]
pub struct BandTable {
    pub rows: Vec<(Vec2, Vec<f64>)>,
}

pub fn band_structure(table: &IntraHoppingTable, q_path: &[Vec2]) -> Result<BandTable> {
    if q_path.is_empty() {
        return Err(Error::InvalidArgument("band structure needs at least one q point".into()));
    }
    let rows = q_path
        .par_iter()
        .map(|&q| bloch_eigenvalues(table, q).map(|e| (q, e)))
        .collect::<Result<Vec<_>>>()?;
    Ok(BandTable { rows })
}

/// Midpoints of a uniform `n×n` grid over the reciprocal cell.
pub fn bz_grid(table: &IntraHoppingTable, n: usize) -> Vec<Vec2> {
    let b = table.basis().reciprocal();
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(b * Vec2::new((i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64));
        }
    }
    out
}

/// Monolayer DoS per orbital, `(|A||Γ*|)^{-1} Σ_α ∫_{Γ*} [φ_{εκ}(𝓖h(q))]_{αα} dq`,
/// for every energy in `energies`, using the `grid_n×grid_n` midpoint rule.
pub fn monolayer_dos(table: &IntraHoppingTable, energies: &[f64], kappa: f64, grid_n: usize) -> Result<Vec<f64>> {
    if !(kappa > 0.0) {
        return Err(Error::InvalidArgument(format!("κ must be positive, got {kappa}")));
    }
    if grid_n < 4 {
        return Err(Error::InvalidArgument(format!("grid_n must be at least 4, got {grid_n}")));
    }
    let qs = bz_grid(table, grid_n);
    let bands = qs
        .par_iter()
        .map(|&q| bloch_eigenvalues(table, q))
        .collect::<Result<Vec<_>>>()?;
    let norm = 1.0 / (table.n_orbitals() as f64 * qs.len() as f64);
    Ok(energies
        .iter()
        .map(|&e| bands.iter().map(|b| gaussian_smear(b, e, kappa)).sum::<f64>() * norm)
        .collect())
}

/// Which normalisation of the bilayer DoS the decoupled limit is compared to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// `ν Σ_j |A_j||Γ_{F_j}| D_j`, the shift-averaged real-space form.
    Real,
    /// `ν* Σ_j |A_j||Γ_j*| D_j`, the Brillouin-zone form.
    Momentum,
}

/// Weighted combination of the two monolayer DoS, which is what every
/// bilayer estimator must return when the interlayer coupling vanishes.
pub fn decoupled_dos(
    geometry: &BilayerGeometry,
    model: &HoppingModel,
    energies: &[f64],
    kappa: f64,
    grid_n: usize,
    weighting: Weighting,
) -> Result<Vec<f64>> {
    let layout = model.layout();
    let mut out = vec![0.0; energies.len()];
    for layer in Layer::BOTH {
        let area = match weighting {
            Weighting::Real => geometry.layer(layer.other()).cell_area(),
            Weighting::Momentum => geometry.layer(layer).reciprocal_cell_area(),
        };
        let nu = match weighting {
            Weighting::Real => geometry.nu_real(&layout),
            Weighting::Momentum => geometry.nu_momentum(&layout),
        };
        let w = nu * layout.count(layer) as f64 * area;
        let d = monolayer_dos(model.intra(layer), energies, kappa, grid_n)?;
        for (o, v) in out.iter_mut().zip(d) {
            *o += w * v;
        }
    }
    Ok(out)
}

type SparseVec = BTreeMap<[i64; 2], Vec<c64>>;

fn apply_truncated(table: &IntraHoppingTable, psi: &SparseVec, r: f64) -> SparseVec {
    let m = table.n_orbitals();
    let mut out: SparseVec = BTreeMap::new();
    for (site, amp) in psi {
        for e in table.entries() {
            let target = [site[0] + e.n[0], site[1] + e.n[1]];
            if table.basis().point(target).norm() > r * (1.0 + 1e-12) {
                continue;
            }
            let slot = out.entry(target).or_insert_with(|| vec![c64::new(0.0, 0.0); m]);
            for a in 0..m {
                for b in 0..m {
                    slot[a] += e.block[a * m + b] * amp[b];
                }
            }
        }
    }
    out
}

/// `n`-th spectral moment computed twice: `|A|^{-1} Σ_α [Hⁿ]_{0α,0α}` by
/// repeated convolution on the disk of radius `r`, and
/// `(|A||Γ*|)^{-1} Σ_α ∫ [𝓖h(q)ⁿ]_{αα} dq` on a `grid_n×grid_n` grid.
pub fn moment_equivalence_check(table: &IntraHoppingTable, n: u32, r: f64, grid_n: usize) -> Result<(f64, f64)> {
    let required = n as f64 * table.support_radius();
    if r < required {
        return Err(Error::TruncationTooSmall { radius: r, required });
    }
    let m = table.n_orbitals();
    let mut real = 0.0;
    for alpha in 0..m {
        let mut psi: SparseVec = BTreeMap::new();
        let mut unit = vec![c64::new(0.0, 0.0); m];
        unit[alpha] = c64::new(1.0, 0.0);
        psi.insert([0, 0], unit);
        for _ in 0..n {
            psi = apply_truncated(table, &psi, r);
        }
        real += psi.get(&[0, 0]).map_or(0.0, |v| v[alpha].re);
    }
    real /= m as f64;

    let qs = bz_grid(table, grid_n.max(1));
    let traces: Vec<f64> = qs
        .par_iter()
        .map(|&q| {
            let b = bloch_matrix(table, q).block;
            let mut p = CMat::identity(m, m);
            for _ in 0..n {
                p = &p * &b;
            }
            (0..m).map(|a| p[(a, a)].re).sum::<f64>()
        })
        .collect();
    let momentum = traces.iter().sum::<f64>() / (m as f64 * qs.len() as f64);
    Ok((real, momentum))
}
