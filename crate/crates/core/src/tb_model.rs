//! Hopping functions: lattice-indexed intralayer tables and analytic
//! interlayer profiles together with their Fourier transforms.
//!
//! Fourier convention: `ĥ(ξ) = (2π)^{-2} ∫ h(x) e^{-iξ·x} dx`, so that
//! `h(x) = ∫ ĥ(ξ) e^{iξ·x} dξ`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{lattice_disk, BilayerGeometry, Layer, LatticeBasis, OrbitalLayout, Vec2};
use crate::linalg::{c64, spectral_norm, CMat};

/// Entries with magnitude below this (eV) are treated as structural zeros.
pub const DROP_TOL: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct HopBlock {
    pub n: [i64; 2],
    /// Row-major `|A|×|A|` block.
    pub block: Vec<c64>,
}

/// Intralayer hopping `h_{αα'}(R)` on a finite set of lattice vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct IntraHoppingTable {
    basis: LatticeBasis,
    orbitals: Vec<Vec2>,
    entries: Vec<HopBlock>,
    support_radius: f64,
}

impl IntraHoppingTable {
    /// `orbitals` are in-cell positions in fractional coordinates of `basis`.
    /// Every stored `R` must come with its Hermitian partner at `-R`.
    pub fn new(basis: LatticeBasis, orbitals: Vec<Vec2>, mut entries: Vec<HopBlock>) -> Result<Self> {
        let m = orbitals.len();
        if m == 0 {
            return Err(Error::InvalidArgument("a hopping table needs at least one orbital".into()));
        }
        entries.sort_by_key(|e| e.n);
        for w in entries.windows(2) {
            if w[0].n == w[1].n {
                return Err(Error::InvalidArgument(format!("duplicate hopping entry at {:?}", w[0].n)));
            }
        }
        for e in &entries {
            if e.block.len() != m * m {
                return Err(Error::InvalidArgument(format!(
                    "hopping block at {:?} has {} entries, expected {}",
                    e.n,
                    e.block.len(),
                    m * m
                )));
            }
            if e.block.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                return Err(Error::InvalidArgument(format!("non-finite hopping at {:?}", e.n)));
            }
        }
        for e in &entries {
            let neg = [-e.n[0], -e.n[1]];
            let partner = entries
                .binary_search_by_key(&neg, |p| p.n)
                .map(|k| &entries[k])
                .map_err(|_| Error::NonHermitianTable { offset: e.n })?;
            let scale = e.block.iter().map(|z| z.norm()).fold(1.0, f64::max);
            for a in 0..m {
                for b in 0..m {
                    if (e.block[a * m + b] - partner.block[b * m + a].conj()).norm() > 1e-12 * scale {
                        return Err(Error::NonHermitianTable { offset: e.n });
                    }
                }
            }
        }
        let support_radius = entries.iter().map(|e| basis.point(e.n).norm()).fold(0.0, f64::max);
        Ok(Self {
            basis,
            orbitals,
            entries,
            support_radius,
        })
    }

    /// Like [`IntraHoppingTable::new`] but adds the missing `-R` partners.
    pub fn with_hermitian_partners(basis: LatticeBasis, orbitals: Vec<Vec2>, entries: Vec<HopBlock>) -> Result<Self> {
        let m = orbitals.len();
        let mut all = entries.clone();
        for e in &entries {
            let neg = [-e.n[0], -e.n[1]];
            if neg == e.n {
                continue;
            }
            if !entries.iter().any(|p| p.n == neg) {
                let mut block = vec![c64::new(0.0, 0.0); m * m];
                for a in 0..m {
                    for b in 0..m {
                        block[b * m + a] = e.block.get(a * m + b).copied().unwrap_or_default().conj();
                    }
                }
                all.push(HopBlock { n: neg, block });
            }
        }
        Self::new(basis, orbitals, all)
    }

    /// Nearest-neighbour honeycomb model: hexagonal lattice with constant `a`,
    /// orbital A at the origin and B at `(a1 + a2)/3`, hopping `t`, zero on-site.
    pub fn graphene_nn(t: f64, a: f64) -> Result<Self> {
        if !(a > 0.0) {
            return Err(Error::InvalidArgument(format!("lattice constant must be positive, got {a}")));
        }
        let basis = LatticeBasis::hexagonal(a)?;
        let z = c64::new(0.0, 0.0);
        let tt = c64::new(t, 0.0);
        let entries = vec![
            HopBlock { n: [0, 0], block: vec![z, tt, tt.conj(), z] },
            HopBlock { n: [1, 0], block: vec![z, tt, z, z] },
            HopBlock { n: [0, 1], block: vec![z, tt, z, z] },
        ];
        Self::with_hermitian_partners(basis, vec![Vec2::zeros(), Vec2::new(1.0 / 3.0, 1.0 / 3.0)], entries)
    }

    /// Single-orbital nearest-neighbour square lattice.
    pub fn square_nn(t: f64, a: f64) -> Result<Self> {
        let basis = LatticeBasis::square(a)?;
        let entries = [[1, 0], [0, 1]]
            .into_iter()
            .map(|n| HopBlock {
                n,
                block: vec![c64::new(t, 0.0)],
            })
            .collect();
        Self::with_hermitian_partners(basis, vec![Vec2::zeros()], entries)
    }

    pub fn n_orbitals(&self) -> usize {
        self.orbitals.len()
    }

    pub fn basis(&self) -> &LatticeBasis {
        &self.basis
    }

    pub fn entries(&self) -> &[HopBlock] {
        &self.entries
    }

    pub fn support_radius(&self) -> f64 {
        self.support_radius
    }

    pub fn orbital_frac(&self, alpha: usize) -> Vec2 {
        self.orbitals[alpha]
    }

    /// Cartesian in-cell offset `τ_α`.
    pub fn orbital_position(&self, alpha: usize) -> Vec2 {
        self.basis.direct() * self.orbitals[alpha]
    }

    pub fn block(&self, n: [i64; 2]) -> Option<&[c64]> {
        self.entries
            .binary_search_by_key(&n, |e| e.n)
            .ok()
            .map(|k| self.entries[k].block.as_slice())
    }

    pub fn is_real(&self) -> bool {
        self.entries.iter().all(|e| e.block.iter().all(|z| z.im == 0.0))
    }

    /// Re-attaches the integer-indexed table to another basis with the same
    /// metric (for example the rotated sheet of a bilayer).
    pub fn rebased(&self, basis: LatticeBasis) -> Result<Self> {
        let g_old = self.basis.direct().transpose() * self.basis.direct();
        let g_new = basis.direct().transpose() * basis.direct();
        if (g_old - g_new).norm() > 1e-9 * g_old.norm() {
            return Err(Error::InvalidArgument(
                "hopping table basis is not congruent to the target lattice".into(),
            ));
        }
        let mut out = self.clone();
        out.basis = basis;
        Ok(out)
    }
}

/// Radial interlayer shape `f(ρ)` with amplitude 1; the pair amplitude `w` multiplies it.
#[derive(Clone)]
pub struct RadialProfile {
    name: String,
    f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    range: f64,
    nodes: usize,
}

impl RadialProfile {
    /// `range` is the distance beyond which `|f| < 1e-14`; `nodes` the
    /// number of Simpson panels used by the numerical Hankel transform.
    pub fn new(name: impl Into<String>, range: f64, nodes: usize, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            f: Arc::new(f),
            range,
            nodes: nodes.max(16) & !1,
        }
    }

    /// `f(ρ) = exp(-ρ/λ)`.
    pub fn exponential(lambda: f64) -> Self {
        let range = lambda * (1.0 / DROP_TOL).ln();
        Self::new("exponential", range, 6000, move |r| (-r / lambda).exp())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self, rho: f64) -> f64 {
        if rho > self.range {
            0.0
        } else {
            (self.f)(rho)
        }
    }

    /// `(2π)^{-1} ∫₀^∞ f(ρ) J₀(kρ) ρ dρ` by composite Simpson.
    pub fn hankel(&self, k: f64) -> f64 {
        let n = self.nodes;
        let h = self.range / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let rho = i as f64 * h;
            let wgt = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += wgt * (self.f)(rho) * bessel_j0(k * rho) * rho;
        }
        acc * h / 3.0 / (2.0 * PI)
    }
}

impl fmt::Debug for RadialProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RadialProfile")
            .field("name", &self.name)
            .field("range", &self.range)
            .finish()
    }
}

/// `J₀(z) = π^{-1} ∫₀^π cos(z sin t) dt`; the trapezoid rule is spectrally
/// accurate for this periodic integrand once the node count exceeds `z/2`.
pub fn bessel_j0(z: f64) -> f64 {
    let z = z.abs();
    // Period π, so an n-point trapezoid sum over [0, π) has error ~ 2 J_{2n}(z).
    let n = 24 + (0.75 * z).ceil() as usize;
    let h = PI / n as f64;
    (0..n).map(|i| (z * (i as f64 * h).sin()).cos()).sum::<f64>() / n as f64
}

#[derive(Debug, Clone)]
pub enum InterFamily {
    /// `h(x) = w exp(-|x + τ_α - τ_α'|²/(2σ²))`.
    Gaussian,
    /// `h(x) = w f(|x + τ_α - τ_α'|)`, transformed numerically (slow).
    Radial(RadialProfile),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairParams {
    /// Amplitude in eV.
    pub w: f64,
    /// Width in Å (Gaussian family only).
    pub sigma: f64,
}

/// Interlayer hopping between layer-1 orbital `α` and layer-2 orbital `α'`.
#[derive(Debug, Clone)]
pub struct InterHoppingProfile {
    family: InterFamily,
    n1: usize,
    n2: usize,
    pairs: Vec<PairParams>,
    tau1: Vec<Vec2>,
    tau2: Vec<Vec2>,
}

impl InterHoppingProfile {
    /// Per-pair Gaussian parameters, row-major over `(α, α')`.
    pub fn gaussian_pairs(n1: usize, n2: usize, pairs: Vec<PairParams>) -> Result<Self> {
        if pairs.len() != n1 * n2 {
            return Err(Error::InvalidArgument(format!(
                "expected {} interlayer pair parameters, got {}",
                n1 * n2,
                pairs.len()
            )));
        }
        for p in &pairs {
            if !p.w.is_finite() || !(p.sigma > 0.0) || !p.sigma.is_finite() {
                return Err(Error::InvalidArgument(format!("invalid Gaussian pair {p:?}")));
            }
        }
        Ok(Self {
            family: InterFamily::Gaussian,
            n1,
            n2,
            pairs,
            tau1: vec![Vec2::zeros(); n1],
            tau2: vec![Vec2::zeros(); n2],
        })
    }

    pub fn gaussian(n1: usize, n2: usize, w: f64, sigma: f64) -> Result<Self> {
        Self::gaussian_pairs(n1, n2, vec![PairParams { w, sigma }; n1 * n2])
    }

    pub fn zero(n1: usize, n2: usize) -> Self {
        Self::gaussian(n1, n2, 0.0, 1.0).expect("unit width is valid")
    }

    pub fn radial(n1: usize, n2: usize, w: f64, profile: RadialProfile) -> Result<Self> {
        if !w.is_finite() {
            return Err(Error::InvalidArgument("non-finite interlayer amplitude".into()));
        }
        Ok(Self {
            family: InterFamily::Radial(profile),
            n1,
            n2,
            pairs: vec![PairParams { w, sigma: 0.0 }; n1 * n2],
            tau1: vec![Vec2::zeros(); n1],
            tau2: vec![Vec2::zeros(); n2],
        })
    }

    /// Sets the Cartesian in-cell offsets `τ_α` of both layers.
    pub fn with_offsets(mut self, tau1: Vec<Vec2>, tau2: Vec<Vec2>) -> Result<Self> {
        if tau1.len() != self.n1 || tau2.len() != self.n2 {
            return Err(Error::InvalidArgument("orbital offset count mismatch".into()));
        }
        self.tau1 = tau1;
        self.tau2 = tau2;
        Ok(self)
    }

    /// Multiplies every amplitude by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        for p in &mut out.pairs {
            p.w *= c;
        }
        out
    }

    pub fn family(&self) -> &InterFamily {
        &self.family
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n1, self.n2)
    }

    pub fn pair(&self, a1: usize, a2: usize) -> PairParams {
        self.pairs[a1 * self.n2 + a2]
    }

    pub fn pairs(&self) -> &[PairParams] {
        &self.pairs
    }

    pub fn is_zero(&self) -> bool {
        self.pairs.iter().all(|p| p.w == 0.0)
    }

    /// `τ_α - τ_α'` for layer-1 orbital `a1` and layer-2 orbital `a2`.
    pub fn offset(&self, a1: usize, a2: usize) -> Vec2 {
        self.tau1[a1] - self.tau2[a2]
    }

    /// `h_{αα'}(x)` with `x = R₁ - R₂` the difference of lattice points.
    pub fn eval(&self, a1: usize, a2: usize, x: Vec2) -> f64 {
        let p = self.pair(a1, a2);
        if p.w == 0.0 {
            return 0.0;
        }
        let rho = (x + self.offset(a1, a2)).norm();
        match &self.family {
            InterFamily::Gaussian => p.w * (-rho * rho / (2.0 * p.sigma * p.sigma)).exp(),
            InterFamily::Radial(f) => p.w * f.value(rho),
        }
    }

    /// Distance `|x + τ_α - τ_α'|` beyond which every pair is below [`DROP_TOL`].
    pub fn range(&self) -> f64 {
        self.pairs
            .iter()
            .map(|p| {
                if p.w.abs() <= DROP_TOL {
                    return 0.0;
                }
                match &self.family {
                    InterFamily::Gaussian => p.sigma * (2.0 * (p.w.abs() / DROP_TOL).ln()).sqrt(),
                    InterFamily::Radial(f) => f.range,
                }
            })
            .fold(0.0, f64::max)
    }

    /// Bound on `|x|` for lattice differences with a non-negligible entry.
    pub fn cutoff(&self) -> f64 {
        let max_off = (0..self.n1)
            .flat_map(|a| (0..self.n2).map(move |b| (a, b)))
            .map(|(a, b)| self.offset(a, b).norm())
            .fold(0.0, f64::max);
        self.range() + max_off
    }

    /// Radial part of `ĥ` (offset phase excluded) for one pair.
    fn fourier_radial(&self, a1: usize, a2: usize, k: f64) -> f64 {
        let p = self.pair(a1, a2);
        if p.w == 0.0 {
            return 0.0;
        }
        match &self.family {
            InterFamily::Gaussian => {
                let s2 = p.sigma * p.sigma;
                p.w * s2 / (2.0 * PI) * (-0.5 * s2 * k * k).exp()
            }
            InterFamily::Radial(f) => p.w * f.hankel(k),
        }
    }

    /// `ĥ_{αα'}(ξ)`.
    pub fn fourier_entry(&self, a1: usize, a2: usize, xi: Vec2) -> c64 {
        let radial = self.fourier_radial(a1, a2, xi.norm());
        if radial == 0.0 {
            return c64::new(0.0, 0.0);
        }
        // e^{-iξ·(τ_α' - τ_α)} = e^{iξ·offset}
        let phase = xi.dot(&self.offset(a1, a2));
        c64::from_polar(radial, phase)
    }

    /// `ĥ(ξ)` as an `|A₁|×|A₂|` block.
    pub fn eval_fourier(&self, xi: Vec2) -> CMat {
        CMat::from_fn(self.n1, self.n2, |a, b| self.fourier_entry(a, b, xi))
    }
}

/// Intralayer tables for both sheets, the interlayer profile and the cached
/// coupling strength `η`.
#[derive(Debug, Clone)]
pub struct HoppingModel {
    intra: [IntraHoppingTable; 2],
    inter: InterHoppingProfile,
    eta: Option<f64>,
}

impl HoppingModel {
    /// Attaches the tables to the geometry's layer bases and fills the
    /// profile's orbital offsets from the tables' in-cell positions.
    pub fn new(
        geometry: &BilayerGeometry,
        intra1: &IntraHoppingTable,
        intra2: &IntraHoppingTable,
        inter: InterHoppingProfile,
    ) -> Result<Self> {
        let t1 = intra1.rebased(*geometry.layer(Layer::One))?;
        let t2 = intra2.rebased(*geometry.layer(Layer::Two))?;
        if inter.dims() != (t1.n_orbitals(), t2.n_orbitals()) {
            return Err(Error::InvalidArgument(format!(
                "interlayer profile is {:?} but the layers have {} and {} orbitals",
                inter.dims(),
                t1.n_orbitals(),
                t2.n_orbitals()
            )));
        }
        let tau1 = (0..t1.n_orbitals()).map(|a| t1.orbital_position(a)).collect();
        let tau2 = (0..t2.n_orbitals()).map(|a| t2.orbital_position(a)).collect();
        let inter = inter.with_offsets(tau1, tau2)?;
        Ok(Self {
            intra: [t1, t2],
            inter,
            eta: None,
        })
    }

    pub fn intra(&self, layer: Layer) -> &IntraHoppingTable {
        &self.intra[layer.index()]
    }

    pub fn inter(&self) -> &InterHoppingProfile {
        &self.inter
    }

    pub fn layout(&self) -> OrbitalLayout {
        OrbitalLayout::new(self.intra[0].n_orbitals(), self.intra[1].n_orbitals()).expect("tables are nonempty")
    }

    /// A copy with the interlayer amplitudes scaled by `c`; the `η` cache is
    /// scaled along with it (the block norm is homogeneous).
    pub fn with_inter_scaled(&self, c: f64) -> Self {
        Self {
            intra: self.intra.clone(),
            inter: self.inter.scaled(c),
            eta: self.eta.map(|e| e * c.abs()),
        }
    }

    pub fn eta(&self) -> Result<f64> {
        self.eta
            .ok_or_else(|| Error::InvalidArgument("interlayer strength η has not been estimated".into()))
    }

    pub fn set_eta(&mut self, eta: f64) {
        self.eta = Some(eta);
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = Some(eta);
        self
    }

    /// Estimates `η` and caches it.
    pub fn estimate_eta(&mut self, geometry: &BilayerGeometry, grid: usize, probe_radius: f64) -> Result<f64> {
        let eta = eta_estimate(self, geometry, grid, probe_radius)?;
        self.eta = Some(eta);
        Ok(eta)
    }

    pub fn is_real(&self) -> bool {
        // Interlayer amplitudes are real by construction.
        self.intra.iter().all(IntraHoppingTable::is_real)
    }
}

fn interlayer_block_norm(
    model: &HoppingModel,
    geometry: &BilayerGeometry,
    q: Vec2,
    rows: &[Vec2],
    cols: &[Vec2],
) -> Result<f64> {
    let (n1, n2) = model.inter.dims();
    let pref = (geometry.layer(Layer::One).reciprocal_cell_area() * geometry.layer(Layer::Two).reciprocal_cell_area()).sqrt();
    let m = CMat::from_fn(rows.len() * n1, cols.len() * n2, |i, j| {
        let (r, a) = (i / n1, i % n1);
        let (c, b) = (j / n2, j % n2);
        model.inter.fourier_entry(a, b, q + rows[r] + cols[c]) * pref
    });
    spectral_norm(&m)
}

fn eta_at(model: &HoppingModel, geometry: &BilayerGeometry, grid: usize, probe: f64) -> Result<f64> {
    // Layer-1 momentum dofs sit on the layer-2 reciprocal lattice and vice versa.
    let rows: Vec<Vec2> = lattice_disk(geometry.layer(Layer::Two).reciprocal(), Vec2::zeros(), probe)?
        .into_iter()
        .map(|p| p.x)
        .collect();
    let cols: Vec<Vec2> = lattice_disk(geometry.layer(Layer::One).reciprocal(), Vec2::zeros(), probe)?
        .into_iter()
        .map(|p| p.x)
        .collect();
    let mut qs = Vec::with_capacity(2 * grid * grid);
    for layer in Layer::BOTH {
        let b = geometry.layer(layer).reciprocal();
        for i in 0..grid {
            for j in 0..grid {
                let f = Vec2::new((i as f64 + 0.5) / grid as f64, (j as f64 + 0.5) / grid as f64);
                qs.push(b * f);
            }
        }
    }
    let norms: Vec<Result<f64>> = qs
        .par_iter()
        .map(|&q| interlayer_block_norm(model, geometry, q, &rows, &cols))
        .collect();
    let mut best: f64 = 0.0;
    for n in norms {
        best = best.max(n?);
    }
    Ok(best)
}

/// `η ≈ sup_q ‖interlayer block of Ĥ(q) on Ω*_probe‖₂`, with `q` on a
/// uniform `grid×grid` midpoint grid over each layer's reciprocal cell.
/// The result must change by less than 1% when the probe radius grows by 25%.
pub fn eta_estimate(model: &HoppingModel, geometry: &BilayerGeometry, grid: usize, probe_radius: f64) -> Result<f64> {
    if grid == 0 || !(probe_radius > 0.0) {
        return Err(Error::InvalidArgument("η estimate needs a positive grid and probe radius".into()));
    }
    if model.inter.is_zero() {
        return Ok(0.0);
    }
    // A 25% enlargement that adds no lattice points would pass vacuously, so
    // keep enlarging until the comparison set actually grows.
    let count = |r: f64| -> Result<usize> {
        Ok(Layer::BOTH
            .iter()
            .map(|&l| lattice_disk(geometry.layer(l).reciprocal(), Vec2::zeros(), r).map(|v| v.len()))
            .collect::<Result<Vec<_>>>()?
            .iter()
            .sum())
    };
    let mut wider_radius = 1.25 * probe_radius;
    let base_count = count(probe_radius)?;
    for _ in 0..64 {
        if count(wider_radius)? > base_count {
            break;
        }
        wider_radius *= 1.25;
    }
    let base = eta_at(model, geometry, grid, probe_radius)?;
    let wider = eta_at(model, geometry, grid, wider_radius)?;
    let change = (wider - base).abs() / wider.max(f64::MIN_POSITIVE);
    if change >= 0.01 {
        return Err(Error::NonConvergence(format!(
            "η changed by {:.2}% when the probe radius grew from {probe_radius} to {wider_radius}",
            100.0 * change
        )));
    }
    Ok(base.max(wider))
}
