//! Real-space method: finite-cluster bilayer Hamiltonians centred on a shifted
//! layer, Chebyshev (KPM) evaluation of local densities, and the
//! shift-averaged DoS.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::time::Instant;

use rayon::prelude::*;

use crate::curve::{DosCurve, Method};
use crate::error::{Error, Result};
use crate::geometry::{lattice_disk, BilayerGeometry, Layer, Vec2};
use crate::linalg::{c64, gaussian, CMat};
use crate::tb_model::{HoppingModel, DROP_TOL};

/// Default spectral rescaling bound in eV.
pub const DEFAULT_E_B: f64 = 13.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SiteDof {
    pub layer: Layer,
    pub n: [i64; 2],
    pub orbital: usize,
}

/// Degrees of freedom of `H_j(b)` inside the disk of radius `r`.
#[derive(Debug, Clone)]
pub struct FiniteCluster {
    pub dofs: Vec<SiteDof>,
    /// Lattice-point positions, with the sheet `F_j` displaced by `b`.
    pub positions: Vec<Vec2>,
    pub center: Layer,
    pub shift: Vec2,
    pub radius: f64,
    index: HashMap<SiteDof, usize>,
}

impl FiniteCluster {
    pub fn len(&self) -> usize {
        self.dofs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dofs.is_empty()
    }

    pub fn index_of(&self, dof: &SiteDof) -> Option<usize> {
        self.index.get(dof).copied()
    }

    /// Index of `0α` on the centre layer.
    pub fn origin(&self, orbital: usize) -> usize {
        self.index[&SiteDof {
            layer: self.center,
            n: [0, 0],
            orbital,
        }]
    }
}

#[derive(Debug, Clone)]
enum Values {
    Real(Vec<f64>),
    Complex(Vec<c64>),
}

/// Hermitian matrix in CSR form with both triangles stored. Values are kept
/// as `f64` until a complex entry appears.
#[derive(Debug, Clone)]
pub struct SparseHermitian {
    dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Values,
}

/// Row-by-row CSR assembly.
struct CsrBuilder {
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Values,
}

impl CsrBuilder {
    fn new() -> Self {
        Self {
            row_ptr: vec![0],
            cols: Vec::new(),
            vals: Values::Real(Vec::new()),
        }
    }

    /// Appends the next row; duplicate columns are summed.
    fn push_row(&mut self, row: &mut Vec<(usize, c64)>) {
        row.sort_by_key(|e| e.0);
        let mut last: Option<usize> = None;
        for &(c, v) in row.iter() {
            if v.im != 0.0 {
                if let Values::Real(re) = &self.vals {
                    self.vals = Values::Complex(re.iter().map(|&x| c64::new(x, 0.0)).collect());
                }
            }
            let merge = last == Some(c);
            match &mut self.vals {
                Values::Real(re) => {
                    if merge {
                        *re.last_mut().unwrap() += v.re;
                    } else {
                        re.push(v.re);
                    }
                }
                Values::Complex(cv) => {
                    if merge {
                        *cv.last_mut().unwrap() += v;
                    } else {
                        cv.push(v);
                    }
                }
            }
            if !merge {
                self.cols.push(c as u32);
                last = Some(c);
            }
        }
        self.row_ptr.push(self.cols.len());
        row.clear();
    }

    fn finish(self) -> SparseHermitian {
        SparseHermitian {
            dim: self.row_ptr.len() - 1,
            row_ptr: self.row_ptr,
            cols: self.cols,
            vals: self.vals,
        }
    }
}

impl SparseHermitian {
    /// Builds the matrix from unsorted triplets; duplicates are summed.
    pub fn from_triplets(dim: usize, mut trip: Vec<(usize, usize, c64)>) -> Self {
        assert!(dim <= u32::MAX as usize, "dimension exceeds the column index range");
        trip.sort_by_key(|&(r, c, _)| (r, c));
        let mut b = CsrBuilder::new();
        let mut row = Vec::new();
        let mut it = trip.into_iter().peekable();
        for r in 0..dim {
            while let Some(&(tr, c, v)) = it.peek() {
                if tr != r {
                    break;
                }
                row.push((c, v));
                it.next();
            }
            b.push_row(&mut row);
        }
        b.finish()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn is_real(&self) -> bool {
        matches!(self.vals, Values::Real(_))
    }

    #[inline]
    fn value(&self, k: usize) -> c64 {
        match &self.vals {
            Values::Real(re) => c64::new(re[k], 0.0),
            Values::Complex(cv) => cv[k],
        }
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, c64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (self.cols[k] as usize, self.value(k)))
    }

    pub fn get(&self, i: usize, j: usize) -> c64 {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[range.clone()].binary_search(&(j as u32)) {
            Ok(k) => self.value(range.start + k),
            Err(_) => c64::new(0.0, 0.0),
        }
    }

    /// `max_i Σ_j |H_ij|`, which bounds the spectral radius.
    pub fn gershgorin_radius(&self) -> f64 {
        (0..self.dim)
            .map(|i| self.row(i).map(|(_, v)| v.norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn hermitian_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.dim {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i).conj()).norm());
            }
        }
        worst
    }

    pub fn to_dense(&self) -> CMat {
        let mut m = CMat::zeros(self.dim, self.dim);
        for i in 0..self.dim {
            for (j, v) in self.row(i) {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// `y = s·H x`.
    pub fn matvec(&self, x: &[c64], s: f64, y: &mut [c64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = c64::new(0.0, 0.0);
            for (j, v) in self.row(i) {
                acc += v * x[j];
            }
            *yi = acc * s;
        }
    }

    /// `x_prev ← 2s·H x − x_prev` (one Chebyshev step, in place).
    fn cheb_step_complex(&self, x: &[c64], s: f64, x_prev: &mut [c64]) {
        for (i, p) in x_prev.iter_mut().enumerate() {
            let mut acc = c64::new(0.0, 0.0);
            for (j, v) in self.row(i) {
                acc += v * x[j];
            }
            *p = acc * (2.0 * s) - *p;
        }
    }

    fn cheb_step_real(&self, re: &[f64], x: &[f64], s: f64, x_prev: &mut [f64]) {
        for (i, p) in x_prev.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += re[k] * x[self.cols[k] as usize];
            }
            *p = 2.0 * s * acc - *p;
        }
    }
}

/// Assembles `H_j(b)` on the disk of radius `r` (Å).
///
/// Sites of the centre layer `j` sit at `R`, sites of `F_j` at `R + b`;
/// an interlayer entry is `h(x)` with `x` the difference of these positions.
pub fn assemble_real_h(
    geometry: &BilayerGeometry,
    model: &HoppingModel,
    b: Vec2,
    j: Layer,
    r: f64,
) -> Result<(FiniteCluster, SparseHermitian)> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::InvalidArgument(format!("cluster radius must be positive, got {r}")));
    }
    let shift_of = |layer: Layer| if layer == j { Vec2::zeros() } else { b };
    let mut dofs = Vec::new();
    let mut positions = Vec::new();
    for layer in Layer::BOTH {
        let basis = geometry.layer(layer).direct();
        let s = shift_of(layer);
        let norb = model.intra(layer).n_orbitals();
        for p in lattice_disk(basis, -s, r)? {
            for orbital in 0..norb {
                dofs.push(SiteDof { layer, n: p.n, orbital });
                positions.push(p.x + s);
            }
        }
    }
    let index: HashMap<SiteDof, usize> = dofs.iter().enumerate().map(|(i, d)| (*d, i)).collect();
    let cluster = FiniteCluster {
        dofs,
        positions,
        center: j,
        shift: b,
        radius: r,
        index,
    };

    let inter = model.inter();
    let cutoff = inter.cutoff();
    let zero_inter = inter.is_zero();
    let mut builder = CsrBuilder::new();
    let mut entries = Vec::new();
    for (row, dof) in cluster.dofs.iter().enumerate() {
        let table = model.intra(dof.layer);
        let m = table.n_orbitals();
        for e in table.entries() {
            let n2 = [dof.n[0] - e.n[0], dof.n[1] - e.n[1]];
            for a2 in 0..m {
                let v = e.block[dof.orbital * m + a2];
                if v.norm() < DROP_TOL {
                    continue;
                }
                if let Some(&col) = cluster.index.get(&SiteDof {
                    layer: dof.layer,
                    n: n2,
                    orbital: a2,
                }) {
                    entries.push((col, v));
                }
            }
        }
        if zero_inter {
            builder.push_row(&mut entries);
            continue;
        }
        let other = dof.layer.other();
        let s_other = shift_of(other);
        let x_row = cluster.positions[row];
        for p in lattice_disk(geometry.layer(other).direct(), x_row - s_other, cutoff)? {
            let x_col = p.x + s_other;
            if x_col.norm() > r * (1.0 + 1e-12) + 1e-12 {
                continue;
            }
            for a2 in 0..model.intra(other).n_orbitals() {
                let Some(&col) = cluster.index.get(&SiteDof {
                    layer: other,
                    n: p.n,
                    orbital: a2,
                }) else {
                    continue;
                };
                let v = match dof.layer {
                    Layer::One => inter.eval(dof.orbital, a2, x_row - x_col),
                    Layer::Two => inter.eval(a2, dof.orbital, x_col - x_row),
                };
                if v.abs() >= DROP_TOL {
                    entries.push((col, c64::new(v, 0.0)));
                }
            }
        }
        builder.push_row(&mut entries);
    }
    let h = builder.finish();
    Ok((cluster, h))
}

/// Chebyshev expansion parameters.
#[derive(Debug, Clone)]
pub struct KpmPlan {
    order: usize,
    bound: f64,
}

impl KpmPlan {
    pub fn new(order: usize, bound: f64) -> Result<Self> {
        if order < 8 {
            return Err(Error::InvalidArgument(format!("KPM order must be at least 8, got {order}")));
        }
        if !(bound > 0.0) {
            return Err(Error::InvalidArgument(format!("E_b must be positive, got {bound}")));
        }
        Ok(Self { order, bound })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn check(&self, h: &SparseHermitian) -> Result<()> {
        let radius = h.gershgorin_radius();
        if radius >= self.bound {
            return Err(Error::SpectrumBound {
                radius,
                bound: self.bound,
            });
        }
        Ok(())
    }

    fn nodes(&self) -> usize {
        2 * self.order
    }

    /// Chebyshev coefficients `c_n` of `x ↦ φ_{εκ}(E_b x)` from Chebyshev–Gauss
    /// quadrature on `2p` nodes.
    pub fn coefficients(&self, eps: f64, kappa: f64) -> Vec<f64> {
        let nn = self.nodes();
        let f: Vec<f64> = (0..nn)
            .map(|k| gaussian(self.bound * node_angle(k, nn).cos(), eps, kappa))
            .collect();
        (0..self.order)
            .map(|n| {
                let s: f64 = (0..nn).map(|k| f[k] * (n as f64 * node_angle(k, nn)).cos()).sum();
                s * if n == 0 { 1.0 } else { 2.0 } / nn as f64
            })
            .collect()
    }

    /// `Σ_n c_n(ε) μ_n` for every energy. Moments are first folded onto the
    /// quadrature nodes, `g_k = N^{-1} Σ_n (2 − δ_{n0}) μ_n T_n(x_k)`, so the
    /// per-energy cost is one pass over the nodes.
    pub fn evaluate(&self, moments: &[f64], energies: &[f64], kappa: f64) -> Vec<f64> {
        let nn = self.nodes();
        let g: Vec<f64> = (0..nn)
            .map(|k| {
                let t = node_angle(k, nn);
                let s: f64 = moments
                    .iter()
                    .enumerate()
                    .map(|(n, &mu)| if n == 0 { mu } else { 2.0 * mu * (n as f64 * t).cos() })
                    .sum();
                s / nn as f64
            })
            .collect();
        let xs: Vec<f64> = (0..nn).map(|k| self.bound * node_angle(k, nn).cos()).collect();
        energies
            .iter()
            .map(|&e| xs.iter().zip(&g).map(|(&x, &gk)| gaussian(x, e, kappa) * gk).sum())
            .collect()
    }
}

#[inline]
fn node_angle(k: usize, n: usize) -> f64 {
    PI * (k as f64 + 0.5) / n as f64
}

/// Chebyshev moments `μ_n = ⟨e_i|T_n(H/E_b)|e_i⟩`, `n < p`, using
/// `μ_{2k} = 2⟨v_k|v_k⟩ − μ_0` and `μ_{2k+1} = 2⟨v_{k+1}|v_k⟩ − μ_1`.
pub fn kpm_moments(h: &SparseHermitian, dof: usize, plan: &KpmPlan) -> Result<Vec<f64>> {
    Ok(kpm_moments_block(h, &[dof], plan)?.pop().unwrap_or_default())
}

/// Moments for several unit vectors, one per entry of `dofs`. Real
/// matrices advance all columns in a single sweep over the stored entries,
/// since the recurrence is bound by memory traffic rather than arithmetic.
pub fn kpm_moments_block(h: &SparseHermitian, dofs: &[usize], plan: &KpmPlan) -> Result<Vec<Vec<f64>>> {
    plan.check(h)?;
    if let Some(d) = dofs.iter().find(|&&d| d >= h.dim()) {
        return Err(Error::InvalidArgument(format!("dof {d} outside a {}-dimensional matrix", h.dim())));
    }
    match &h.vals {
        Values::Real(re) => Ok(real_block_moments(h, re, dofs, plan)),
        Values::Complex(_) => Ok(dofs.iter().map(|&d| complex_moments(h, d, plan)).collect()),
    }
}

/// Columns are processed in groups of at most four.
fn real_block_moments(h: &SparseHermitian, re: &[f64], dofs: &[usize], plan: &KpmPlan) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(dofs.len());
    for group in dofs.chunks(4) {
        out.extend(match group.len() {
            1 => real_moments_w::<1>(h, re, group, plan),
            2 => real_moments_w::<2>(h, re, group, plan),
            3 => real_moments_w::<3>(h, re, group, plan),
            _ => real_moments_w::<4>(h, re, group, plan),
        });
    }
    out
}

/// `W` columns stored row-interleaved, so one pass over the stored entries
/// advances all of them.
fn real_moments_w<const W: usize>(h: &SparseHermitian, re: &[f64], dofs: &[usize], plan: &KpmPlan) -> Vec<Vec<f64>> {
    let (n, p) = (h.dim(), plan.order);
    let s = 1.0 / plan.bound;
    let half = p / 2 + 1;
    let mut mu = vec![vec![0.0; p]; W];
    let mut prev = vec![[0.0f64; W]; n];
    let mut cur = vec![[0.0f64; W]; n];
    for (c, &d) in dofs.iter().enumerate() {
        prev[d][c] = 1.0;
    }
    let row_times = |x: &[[f64; W]], i: usize| -> [f64; W] {
        let mut acc = [0.0; W];
        for k in h.row_ptr[i]..h.row_ptr[i + 1] {
            let (v, xc) = (re[k], &x[h.cols[k] as usize]);
            for c in 0..W {
                acc[c] += v * xc[c];
            }
        }
        acc
    };
    for i in 0..n {
        let acc = row_times(&prev, i);
        for c in 0..W {
            cur[i][c] = s * acc[c];
        }
    }
    for (c, &d) in dofs.iter().enumerate() {
        mu[c][0] = 1.0;
        mu[c][1] = cur[d][c];
    }
    // Iteration k holds v_k in `cur` and v_{k-1} in `prev`; the dot products
    // for k and the step to v_{k+1} (written over `prev`) share one pass.
    for k in 1..half {
        let step = k + 1 < half;
        let (mut vv, mut vp) = ([0.0; W], [0.0; W]);
        for i in 0..n {
            let (x, y) = (cur[i], prev[i]);
            for c in 0..W {
                vv[c] += x[c] * x[c];
                vp[c] += x[c] * y[c];
            }
            if step {
                let acc = row_times(&cur, i);
                for c in 0..W {
                    prev[i][c] = 2.0 * s * acc[c] - y[c];
                }
            }
        }
        for c in 0..W {
            if 2 * k < p {
                mu[c][2 * k] = 2.0 * vv[c] - mu[c][0];
            }
            if 2 * k - 1 < p && 2 * k - 1 >= 2 {
                mu[c][2 * k - 1] = 2.0 * vp[c] - mu[c][1];
            }
        }
        if step {
            std::mem::swap(&mut prev, &mut cur);
        }
    }
    mu.truncate(dofs.len());
    mu
}

fn complex_moments(h: &SparseHermitian, dof: usize, plan: &KpmPlan) -> Vec<f64> {
    let p = plan.order;
    let s = 1.0 / plan.bound;
    let half = p / 2 + 1;
    let mut mu = vec![0.0; p];
    let zero = c64::new(0.0, 0.0);
    let mut prev = vec![zero; h.dim()];
    prev[dof] = c64::new(1.0, 0.0);
    let mut cur = vec![zero; h.dim()];
    h.matvec(&prev, s, &mut cur);
    mu[0] = 1.0;
    mu[1] = cur[dof].re;
    for k in 1..half {
        let vk_vk: f64 = cur.iter().map(|x| x.norm_sqr()).sum();
        let vk_vkm1: f64 = cur.iter().zip(&prev).map(|(a, b)| (b.conj() * a).re).sum();
        if 2 * k < p {
            mu[2 * k] = 2.0 * vk_vk - mu[0];
        }
        if 2 * k - 1 < p && 2 * k - 1 >= 2 {
            mu[2 * k - 1] = 2.0 * vk_vkm1 - mu[1];
        }
        if k + 1 < half {
            h.cheb_step_complex(&cur, s, &mut prev);
            std::mem::swap(&mut prev, &mut cur);
        }
    }
    mu
}

/// `[φ_{εκ}(H)]_{dof,dof}` for every energy.
pub fn kpm_diagonal(h: &SparseHermitian, dof: usize, plan: &KpmPlan, energies: &[f64], kappa: f64) -> Result<Vec<f64>> {
    let mu = kpm_moments(h, dof, plan)?;
    Ok(plan.evaluate(&mu, energies, kappa))
}

/// `|[φ_{εκ}(H)]_{i,dof}|` for every row `i`, by the Chebyshev recurrence
/// on the column `Σ_n c_n T_n(H/E_b) e_dof`.
pub fn kpm_column(h: &SparseHermitian, dof: usize, plan: &KpmPlan, eps: f64, kappa: f64) -> Result<Vec<f64>> {
    plan.check(h)?;
    if dof >= h.dim() {
        return Err(Error::InvalidArgument(format!("dof {dof} outside a {}-dimensional matrix", h.dim())));
    }
    let c = plan.coefficients(eps, kappa);
    let s = 1.0 / plan.bound;
    let n = h.dim();
    match &h.vals {
        Values::Real(re) => {
            let mut prev = vec![0.0; n];
            prev[dof] = 1.0;
            let mut cur = vec![0.0; n];
            for i in 0..n {
                let mut acc = 0.0;
                for k in h.row_ptr[i]..h.row_ptr[i + 1] {
                    acc += re[k] * prev[h.cols[k] as usize];
                }
                cur[i] = s * acc;
            }
            let mut out: Vec<f64> = prev.iter().zip(&cur).map(|(a, b)| c[0] * a + c[1] * b).collect();
            for &cn in &c[2..] {
                h.cheb_step_real(re, &cur, s, &mut prev);
                std::mem::swap(&mut prev, &mut cur);
                for (o, v) in out.iter_mut().zip(&cur) {
                    *o += cn * v;
                }
            }
            Ok(out.into_iter().map(f64::abs).collect())
        }
        Values::Complex(_) => {
            let zero = c64::new(0.0, 0.0);
            let mut prev = vec![zero; n];
            prev[dof] = c64::new(1.0, 0.0);
            let mut cur = vec![zero; n];
            h.matvec(&prev, s, &mut cur);
            let mut out: Vec<c64> = prev.iter().zip(&cur).map(|(a, b)| a * c[0] + b * c[1]).collect();
            for &cn in &c[2..] {
                h.cheb_step_complex(&cur, s, &mut prev);
                std::mem::swap(&mut prev, &mut cur);
                for (o, v) in out.iter_mut().zip(&cur) {
                    *o += v * cn;
                }
            }
            Ok(out.into_iter().map(|z| z.norm()).collect())
        }
    }
}

/// Envelope of the column `[φ_{εκ}(H_j(b))]_{x,0α}`: for each shell
/// `[k·dr, (k+1)·dr)` of site distance from the origin, the largest magnitude.
#[allow(clippy::too_many_arguments)]
pub fn locality_profile(
    geometry: &BilayerGeometry,
    model: &HoppingModel,
    b: Vec2,
    j: Layer,
    alpha: usize,
    r: f64,
    plan: &KpmPlan,
    eps: f64,
    kappa: f64,
    dr: f64,
) -> Result<Vec<(f64, f64)>> {
    if !(dr > 0.0) {
        return Err(Error::InvalidArgument(format!("shell width must be positive, got {dr}")));
    }
    let (cluster, h) = assemble_real_h(geometry, model, b, j, r)?;
    let col = kpm_column(&h, cluster.origin(alpha), plan, eps, kappa)?;
    let shells = (r / dr).ceil() as usize + 1;
    let mut env = vec![0.0f64; shells];
    for (x, v) in cluster.positions.iter().zip(&col) {
        let k = (x.norm() / dr) as usize;
        env[k] = env[k].max(*v);
    }
    Ok(env.into_iter().enumerate().map(|(k, v)| ((k as f64 + 0.5) * dr, v)).collect())
}

/// Parameters of a shift-averaged real-space run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RealParams {
    pub kappa: f64,
    /// Cluster radius in Å.
    pub r: f64,
    pub order: usize,
    pub n_b: usize,
    pub e_b: f64,
}

/// Midpoints of the `n×n` shift grid over the unit cell of `F_j`.
pub fn shift_grid(geometry: &BilayerGeometry, j: Layer, n: usize) -> Vec<Vec2> {
    let a = geometry.layer(j.other()).direct();
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for k in 0..n {
            out.push(a * Vec2::new((i as f64 + 0.5) / n as f64, (k as f64 + 0.5) / n as f64));
        }
    }
    out
}

/// `ν Σ_j Σ_α ∫_{Γ_{F_j}} [φ_{εκ}(H_j(b))]_{0α,0α} db` by the `N_b×N_b`
/// midpoint rule over shifts and KPM local densities.
pub fn dos_real(
    geometry: &BilayerGeometry,
    model: &HoppingModel,
    energies: &[f64],
    params: &RealParams,
) -> Result<DosCurve> {
    if params.n_b == 0 {
        return Err(Error::InvalidArgument("N_b must be at least 1".into()));
    }
    if !(params.kappa > 0.0) {
        return Err(Error::InvalidArgument(format!("κ must be positive, got {}", params.kappa)));
    }
    let start = Instant::now();
    let plan = KpmPlan::new(params.order, params.e_b)?;
    let layout = model.layout();
    let nu = geometry.nu_real(&layout);
    let mut jobs = Vec::new();
    for j in Layer::BOTH {
        let weight = nu * geometry.layer(j.other()).cell_area() / (params.n_b * params.n_b) as f64;
        for b in shift_grid(geometry, j, params.n_b) {
            jobs.push((j, b, weight));
        }
    }
    struct Partial {
        moments: Vec<f64>,
        dim: usize,
        assembly: f64,
        kpm: f64,
    }
    let partials = jobs
        .par_iter()
        .map(|&(j, b, weight)| -> Result<Partial> {
            let t0 = Instant::now();
            let (cluster, h) = assemble_real_h(geometry, model, b, j, params.r)?;
            let assembly = t0.elapsed().as_secs_f64();
            let t1 = Instant::now();
            let mut moments = vec![0.0; params.order];
            let origins: Vec<usize> = (0..layout.count(j)).map(|a| cluster.origin(a)).collect();
            for mu in kpm_moments_block(&h, &origins, &plan)? {
                for (acc, m) in moments.iter_mut().zip(mu) {
                    *acc += weight * m;
                }
            }
            Ok(Partial {
                moments,
                dim: cluster.len(),
                assembly,
                kpm: t1.elapsed().as_secs_f64(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut moments = vec![0.0; params.order];
    let (mut assembly, mut kpm, mut dim) = (0.0, 0.0, 0);
    for p in &partials {
        for (acc, m) in moments.iter_mut().zip(&p.moments) {
            *acc += m;
        }
        assembly += p.assembly;
        kpm += p.kpm;
        dim = dim.max(p.dim);
    }
    let t2 = Instant::now();
    let values = plan.evaluate(&moments, energies, params.kappa);
    let quadrature = t2.elapsed().as_secs_f64();
    let mut curve = DosCurve::new(Method::Real, energies.to_vec(), values, params.kappa)?;
    curve.r = params.r;
    curve.grid = params.n_b;
    curve.dof_count = dim;
    curve.add_phase("assembly", assembly);
    curve.add_phase("kpm", kpm);
    curve.add_phase("quadrature", quadrature);
    curve.wall_s = start.elapsed().as_secs_f64();
    Ok(curve)
}

/// Local density `[φ_{εκ}(H_j(b))]_{0α,0α}` on a single cluster.
pub fn ldos_real(
    geometry: &BilayerGeometry,
    model: &HoppingModel,
    b: Vec2,
    j: Layer,
    alpha: usize,
    r: f64,
    plan: &KpmPlan,
    energies: &[f64],
    kappa: f64,
) -> Result<Vec<f64>> {
    let (cluster, h) = assemble_real_h(geometry, model, b, j, r)?;
    kpm_diagonal(&h, cluster.origin(alpha), plan, energies, kappa)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::twist_bilayer;
    use crate::linalg::{eigen, gaussian};
    use crate::monolayer::{decoupled_dos, Weighting};
    use crate::tb_model::{InterHoppingProfile, IntraHoppingTable};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn model(w: f64, twist_deg: f64) -> (BilayerGeometry, HoppingModel) {
        let t = IntraHoppingTable::graphene_nn(-2.7, 2.46).unwrap();
        let g = twist_bilayer(t.basis().direct(), twist_deg.to_radians()).unwrap();
        let inter = InterHoppingProfile::gaussian(2, 2, w, 0.8).unwrap();
        let m = HoppingModel::new(&g, &t, &t, inter).unwrap();
        (g, m)
    }

    fn dense_ldos(h: &SparseHermitian, dof: usize, energies: &[f64], kappa: f64) -> Vec<f64> {
        let e = eigen(&h.to_dense()).unwrap();
        energies
            .iter()
            .map(|&eps| (0..h.dim()).map(|n| e.weight(dof, n) * gaussian(e.values[n], eps, kappa)).sum())
            .collect()
    }

    #[test]
    fn kpm_column_matches_dense() {
        let (g, m) = model(0.3, 7.0);
        let (c, h) = assemble_real_h(&g, &m, Vec2::new(0.2, 0.1), Layer::Two, 9.0).unwrap();
        let plan = KpmPlan::new(600, 13.0).unwrap();
        let (eps, kappa) = (0.4, 0.3);
        let col = kpm_column(&h, c.origin(1), &plan, eps, kappa).unwrap();
        let e = eigen(&h.to_dense()).unwrap();
        for i in 0..h.dim() {
            let want: c64 = (0..h.dim())
                .map(|n| e.vectors[(i, n)] * e.vectors[(c.origin(1), n)].conj() * gaussian(e.values[n], eps, kappa))
                .sum();
            assert!((col[i] - want.norm()).abs() < 1e-8);
        }
    }

    #[test]
    fn locality_envelope_decays() {
        let (g, m) = model(0.165, 3.0);
        let plan = KpmPlan::new(700, 13.0).unwrap();
        // Gaussian smearing of width κ confines φ(H) to |x| ≲ v_F/κ ≈ 6 Å.
        let env = locality_profile(&g, &m, Vec2::zeros(), Layer::One, 0, 40.0, &plan, 0.0, 1.0, 5.0).unwrap();
        assert!(env[6].1 < 1e-4 * env[0].1, "{env:?}");
    }

    #[test]
    fn zero_interlayer_is_block_diagonal() {
        let (g, m) = model(0.0, 5.0);
        let (c, h) = assemble_real_h(&g, &m, Vec2::new(0.3, 0.7), Layer::One, 12.0).unwrap();
        for i in 0..h.dim() {
            for (j, _) in h.row(i) {
                assert_eq!(c.dofs[i].layer, c.dofs[j].layer);
            }
        }
        // Each layer is a plain honeycomb flake: every row has at most three neighbours.
        assert!((0..h.dim()).all(|i| h.row(i).count() <= 3));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn hermitian_with_bounded_moments_for_any_shift(bx in -2.0f64..2.0, by in -2.0f64..2.0, second in any::<bool>()) {
            let (g, m) = model(0.3, 5.0);
            let j = if second { Layer::Two } else { Layer::One };
            let (cluster, h) = assemble_real_h(&g, &m, Vec2::new(bx, by), j, 10.0).unwrap();
            prop_assert!(h.hermitian_defect() < 1e-12);
            prop_assert!(h.is_real());
            // Chebyshev moments of a unit vector lie in [-1, 1].
            let mu = kpm_moments(&h, cluster.origin(0), &KpmPlan::new(64, DEFAULT_E_B).unwrap()).unwrap();
            prop_assert!((mu[0] - 1.0).abs() < 1e-14);
            prop_assert!(mu.iter().all(|x| x.abs() <= 1.0 + 1e-12));
        }

        #[test]
        fn csr_matches_dense(seed in 0u64..10_000, dim in 1usize..12, count in 0usize..40) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut dense = CMat::zeros(dim, dim);
            let mut trip = Vec::new();
            for _ in 0..count {
                let (i, k) = (rng.gen_range(0..dim), rng.gen_range(0..dim));
                let im = if rng.gen_bool(0.5) { rng.gen_range(-1.0..1.0) } else { 0.0 };
                let v = c64::new(rng.gen_range(-1.0..1.0), if i == k { 0.0 } else { im });
                trip.push((i, k, v));
                dense[(i, k)] += v;
                if i != k {
                    trip.push((k, i, v.conj()));
                    dense[(k, i)] += v.conj();
                }
            }
            let h = SparseHermitian::from_triplets(dim, trip);
            prop_assert!(h.hermitian_defect() < 1e-14);
            let x: Vec<c64> = (0..dim).map(|_| c64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
            let mut y = vec![c64::new(0.0, 0.0); dim];
            h.matvec(&x, 0.5, &mut y);
            for i in 0..dim {
                prop_assert!((h.get(i, i) - dense[(i, i)]).norm() < 1e-14);
                let mut want = c64::new(0.0, 0.0);
                for k in 0..dim {
                    want += dense[(i, k)] * x[k];
                }
                prop_assert!((y[i] - want * 0.5).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_shift_clusters_agree() {
        let (g, m) = model(0.3, 5.0);
        let (c1, h1) = assemble_real_h(&g, &m, Vec2::zeros(), Layer::One, 9.0).unwrap();
        let (c2, h2) = assemble_real_h(&g, &m, Vec2::zeros(), Layer::Two, 9.0).unwrap();
        // With b = 0 both clusters are the same set of sites; compare entrywise.
        assert_eq!(c1.len(), c2.len());
        for i in 0..c1.len() {
            let i2 = c2.index_of(&c1.dofs[i]).unwrap();
            for (j, v) in h1.row(i) {
                let j2 = c2.index_of(&c1.dofs[j]).unwrap();
                assert!((h2.get(i2, j2) - v).norm() < 1e-15);
            }
            assert_eq!(h1.row(i).count(), h2.row(i2).count());
        }
    }

    #[test]
    fn interlayer_entries_follow_profile() {
        let (g, m) = model(0.3, 5.0);
        let b = Vec2::new(0.4, -0.2);
        let (c, h) = assemble_real_h(&g, &m, b, Layer::Two, 8.0).unwrap();
        for i in 0..c.len() {
            for (j, v) in h.row(i) {
                let (di, dj) = (c.dofs[i], c.dofs[j]);
                if di.layer == Layer::One && dj.layer == Layer::Two {
                    // Layer 1 is F_2 here and sits at R + b; orbital offsets included.
                    let x1 = g.layer(Layer::One).point(di.n) + b + m.intra(Layer::One).orbital_position(di.orbital);
                    let x2 = g.layer(Layer::Two).point(dj.n) + m.intra(Layer::Two).orbital_position(dj.orbital);
                    let expected = 0.3 * (-(x1 - x2).norm_squared() / (2.0 * 0.64)).exp();
                    assert!((v.re - expected).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn block_moments_match_single_columns() {
        let (g, m) = model(0.3, 5.0);
        let (cluster, h) = assemble_real_h(&g, &m, Vec2::new(0.4, -0.2), Layer::Two, 12.0).unwrap();
        let plan = KpmPlan::new(97, DEFAULT_E_B).unwrap();
        let dofs = [cluster.origin(1), 7, cluster.origin(0)];
        let block = kpm_moments_block(&h, &dofs, &plan).unwrap();
        for (mu, &d) in block.iter().zip(&dofs) {
            let single = kpm_moments(&h, d, &plan).unwrap();
            assert_eq!(mu.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), single.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
        assert!(kpm_moments_block(&h, &[h.dim()], &plan).is_err());
    }

    #[test]
    fn kpm_scalar_case() {
        let h = SparseHermitian::from_triplets(1, vec![(0, 0, c64::new(0.7, 0.0))]);
        let plan = KpmPlan::new(64, DEFAULT_E_B).unwrap();
        let energies = [0.5, 0.7, 1.0];
        let got = kpm_diagonal(&h, 0, &plan, &energies, 3.0).unwrap();
        for (v, e) in got.iter().zip(energies) {
            assert!((v - gaussian(0.7, e, 3.0)).abs() < 1e-10, "{v}");
        }
    }

    #[test]
    fn kpm_matches_dense_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let n = 20;
        let mut trip = Vec::new();
        for i in 0..n {
            for j in 0..=i {
                let v = if i == j {
                    c64::new(rng.gen_range(-2.0..2.0), 0.0)
                } else {
                    c64::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5))
                };
                trip.push((i, j, v));
                if i != j {
                    trip.push((j, i, v.conj()));
                }
            }
        }
        let h = SparseHermitian::from_triplets(n, trip);
        assert!(!h.is_real());
        let plan = KpmPlan::new(512, DEFAULT_E_B).unwrap();
        let kappa = 0.1 * DEFAULT_E_B;
        let energies: Vec<f64> = (0..9).map(|i| -4.0 + i as f64).collect();
        for dof in [0, 7, 19] {
            let a = kpm_diagonal(&h, dof, &plan, &energies, kappa).unwrap();
            let b = dense_ldos(&h, dof, &energies, kappa);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn kpm_order_doubling_converged() {
        let (g, m) = model(0.3, 5.0);
        let (c, h) = assemble_real_h(&g, &m, Vec2::new(0.2, 0.1), Layer::One, 15.0).unwrap();
        let kappa = 0.3;
        // Gaussian coefficients decay as exp(-(nκ/E_b)²/2), so the doubled-order
        // tail is below 1e-10 once p exceeds a few E_bπ/κ.
        let p = (3.0 * DEFAULT_E_B * PI / kappa).round() as usize;
        let energies = [-1.0, 0.0, 0.4];
        let a = kpm_diagonal(&h, c.origin(0), &KpmPlan::new(p, DEFAULT_E_B).unwrap(), &energies, kappa).unwrap();
        let b = kpm_diagonal(&h, c.origin(0), &KpmPlan::new(2 * p, DEFAULT_E_B).unwrap(), &energies, kappa).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn coefficients_and_node_evaluation_agree() {
        let plan = KpmPlan::new(128, 10.0).unwrap();
        let mu: Vec<f64> = (0..128).map(|n| (0.3 * n as f64).cos() * (-0.01 * n as f64).exp()).collect();
        let eps = 0.8;
        let c = plan.coefficients(eps, 0.5);
        let direct: f64 = c.iter().zip(&mu).map(|(a, b)| a * b).sum();
        let folded = plan.evaluate(&mu, &[eps], 0.5)[0];
        assert!((direct - folded).abs() < 1e-12);
    }

    #[test]
    fn spectrum_bound_enforced() {
        let h = SparseHermitian::from_triplets(1, vec![(0, 0, c64::new(14.0, 0.0))]);
        let plan = KpmPlan::new(16, DEFAULT_E_B).unwrap();
        assert!(matches!(kpm_moments(&h, 0, &plan), Err(Error::SpectrumBound { .. })));
        assert!(KpmPlan::new(4, 13.0).is_err());
    }

    #[test]
    fn kpm_path_matches_dense_on_small_cluster() {
        let (g, m) = model(0.3, 6.0);
        let (c, h) = assemble_real_h(&g, &m, Vec2::new(0.5, 0.3), Layer::Two, 9.0).unwrap();
        let kappa = 0.3;
        let p = (3.0 * DEFAULT_E_B * PI / kappa).round() as usize;
        let plan = KpmPlan::new(p, DEFAULT_E_B).unwrap();
        let energies = [-2.0, -0.5, 0.0, 0.7];
        for alpha in 0..2 {
            let a = kpm_diagonal(&h, c.origin(alpha), &plan, &energies, kappa).unwrap();
            let b = dense_ldos(&h, c.origin(alpha), &energies, kappa);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn decoupled_limit_matches_monolayers() {
        let (g, m) = model(0.0, 5.0);
        let kappa = 0.3;
        let energies = [-1.0, -0.3, 0.5, 1.2];
        let p = (2.0 * DEFAULT_E_B * PI / kappa).round() as usize;
        let params = RealParams { kappa, r: 60.0, order: p, n_b: 1, e_b: DEFAULT_E_B };
        let curve = dos_real(&g, &m, &energies, &params).unwrap();
        let reference = decoupled_dos(&g, &m, &energies, kappa, 256, Weighting::Real).unwrap();
        let err = crate::curve::relative_sup_error(&curve.values, &reference);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn worker_count_does_not_change_bits() {
        let (g, m) = model(0.3, 6.0);
        let params = RealParams { kappa: 0.5, r: 10.0, order: 120, n_b: 2, e_b: DEFAULT_E_B };
        let energies = [-0.5, 0.0, 0.5];
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| dos_real(&g, &m, &energies, &params).unwrap().values)
        };
        assert_eq!(run(1), run(3));
    }
}
