//! Coupled Bloch-wave Hamiltonian `Ĥ(q)`, the circular-cutoff and
//! energy-adaptive momentum-space DoS estimators, and the numerical check of
//! the real-space to momentum-space intertwining identity.

use std::collections::BTreeMap;
use std::time::Instant;

use log::warn;
use rayon::prelude::*;

use crate::curve::{DosCurve, Method};
use crate::error::{Error, Result};
use crate::geometry::{BilayerGeometry, Layer, Vec2};
use crate::linalg::{c64, eigen, gaussian, CMat, Eigen};
use crate::monolayer::bloch_matrix;
use crate::realspace::{assemble_real_h, SiteDof};
use crate::region::{adaptive_dofs, component_anchors, level_region, wrap_report, MomDof, MomentumDofSet, RegionMask, RegionSpec};
use crate::tb_model::{HoppingModel, DROP_TOL};

/// Default cap on the size of an adaptive dof set.
pub const DEFAULT_MAX_DOFS: usize = 4000;

#[derive(Debug, Clone)]
pub struct MomentumHamiltonian {
    pub anchor: Vec2,
    pub matrix: CMat,
}

/// Precomputed dof geometry for repeated assembly of `Ĥ(q)` on one dof set.
pub struct MomentumAssembler<'a> {
    model: &'a HoppingModel,
    dofs: Vec<MomDof>,
    positions: Vec<Vec2>,
    /// Dofs sharing a layer and a reciprocal point, as `(layer, R*, [(α, index)])`.
    groups: Vec<(Layer, Vec2, Vec<(usize, usize)>)>,
    layer1: Vec<usize>,
    layer2: Vec<usize>,
    scale: f64,
}

impl<'a> MomentumAssembler<'a> {
    pub fn new(geometry: &BilayerGeometry, model: &'a HoppingModel, set: &MomentumDofSet) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::InvalidArgument("momentum dof set is empty".into()));
        }
        for d in &set.dofs {
            if d.orbital >= model.intra(d.layer).n_orbitals() {
                return Err(Error::InvalidArgument(format!(
                    "orbital {} out of range for layer {}",
                    d.orbital,
                    d.layer.number()
                )));
            }
        }
        let positions: Vec<Vec2> = set.dofs.iter().map(|d| d.position(geometry)).collect();
        let mut by_site: BTreeMap<(Layer, [i64; 2]), Vec<(usize, usize)>> = BTreeMap::new();
        for (i, d) in set.dofs.iter().enumerate() {
            by_site.entry((d.layer, d.n)).or_default().push((d.orbital, i));
        }
        let groups = by_site
            .into_iter()
            .map(|((layer, _), members)| {
                let pos = positions[members[0].1];
                (layer, pos, members)
            })
            .collect();
        let of_layer = |l: Layer| -> Vec<usize> { (0..set.len()).filter(|&i| set.dofs[i].layer == l).collect() };
        let scale = (geometry.layer(Layer::One).reciprocal_cell_area() * geometry.layer(Layer::Two).reciprocal_cell_area()).sqrt();
        Ok(Self {
            model,
            dofs: set.dofs.clone(),
            positions,
            groups,
            layer1: of_layer(Layer::One),
            layer2: of_layer(Layer::Two),
            scale,
        })
    }

    pub fn dim(&self) -> usize {
        self.dofs.len()
    }

    pub fn dofs(&self) -> &[MomDof] {
        &self.dofs
    }

    /// `Ĥ(q)`: intralayer blocks `𝓖_k h(q + R*)` on the diagonal and
    /// interlayer entries `√(|Γ₁*||Γ₂*|) ĥ(q + R* + R̃*)`.
    pub fn assemble(&self, q: Vec2) -> CMat {
        let n = self.dim();
        let mut h = CMat::zeros(n, n);
        for (layer, pos, members) in &self.groups {
            let block = bloch_matrix(self.model.intra(*layer), q + pos).block;
            for &(a, i) in members {
                for &(b, k) in members {
                    let v = block[(a, b)];
                    if v.norm() >= DROP_TOL {
                        h[(i, k)] = v;
                    }
                }
            }
        }
        let inter = self.model.inter();
        if !inter.is_zero() {
            for &i in &self.layer1 {
                for &k in &self.layer2 {
                    let xi = q + self.positions[i] + self.positions[k];
                    let v = inter.fourier_entry(self.dofs[i].orbital, self.dofs[k].orbital, xi) * self.scale;
                    if v.norm() >= DROP_TOL {
                        h[(i, k)] = v;
                        h[(k, i)] = v.conj();
                    }
                }
            }
        }
        h
    }
}

pub fn assemble_momentum_h(
    geometry: &BilayerGeometry,
    model: &HoppingModel,
    q: Vec2,
    set: &MomentumDofSet,
) -> Result<MomentumHamiltonian> {
    let asm = MomentumAssembler::new(geometry, model, set)?;
    Ok(MomentumHamiltonian {
        anchor: q,
        matrix: asm.assemble(q),
    })
}

/// Adds `weight Σ_n (Σ_{i∈rows} |v_{in}|²) φ_{εκ}(λ_n)` to `out`.
fn accumulate(out: &mut [f64], energies: &[f64], kappa: f64, e: &Eigen, rows: &[usize], weight: f64) {
    for (n, &lambda) in e.values.iter().enumerate() {
        let w: f64 = rows.iter().map(|&i| e.weight(i, n)).sum();
        if w == 0.0 {
            continue;
        }
        for (o, &eps) in out.iter_mut().zip(energies) {
            *o += weight * w * gaussian(lambda, eps, kappa);
        }
    }
}

#[derive(Default)]
struct Timing {
    assembly: f64,
    eigensolve: f64,
    smearing: f64,
}

/// Partial sums for one quadrature row; rows are summed in index order so
/// the result does not depend on the worker count.
fn quadrature_row(
    asm: &MomentumAssembler,
    points: impl Iterator<Item = Vec2>,
    rows: &[usize],
    weight: f64,
    energies: &[f64],
    kappa: f64,
) -> Result<(Vec<f64>, Timing)> {
    let mut out = vec![0.0; energies.len()];
    let mut t = Timing::default();
    for q in points {
        let t0 = Instant::now();
        let h = asm.assemble(q);
        let t1 = Instant::now();
        let e = eigen(&h)?;
        let t2 = Instant::now();
        accumulate(&mut out, energies, kappa, &e, rows, weight);
        t.assembly += (t1 - t0).as_secs_f64();
        t.eigensolve += (t2 - t1).as_secs_f64();
        t.smearing += t2.elapsed().as_secs_f64();
    }
    Ok((out, t))
}

fn reduce(parts: Vec<(Vec<f64>, Timing)>, len: usize) -> (Vec<f64>, Timing) {
    let mut values = vec![0.0; len];
    let mut t = Timing::default();
    for (v, pt) in parts {
        for (a, b) in values.iter_mut().zip(v) {
            *a += b;
        }
        t.assembly += pt.assembly;
        t.eigensolve += pt.eigensolve;
        t.smearing += pt.smearing;
    }
    (values, t)
}

fn check_kappa(kappa: f64) -> Result<()> {
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(Error::InvalidArgument(format!("κ must be positive, got {kappa}")));
    }
    Ok(())
}

/// `ν* Σ_j Σ_α ∫_{Γ_j*} [φ_{εκ}(Ĥ_r(q))]_{0α,0α} dq` on the circular dof set
/// `|R*| ≤ r`, with an `N_q×N_q` midpoint rule on each `Γ_j*`.
pub fn dos_momentum_naive(
    geometry: &BilayerGeometry,
    model: &HoppingModel,
    energies: &[f64],
    kappa: f64,
    r: f64,
    n_q: usize,
) -> Result<DosCurve> {
    check_kappa(kappa)?;
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::InvalidArgument(format!("momentum cutoff must be positive, got {r}")));
    }
    if n_q == 0 {
        return Err(Error::InvalidArgument("N_q must be at least 1".into()));
    }
    let start = Instant::now();
    let layout = model.layout();
    let orbitals = [layout.count(Layer::One), layout.count(Layer::Two)];
    let set = MomentumDofSet::circular(geometry, orbitals, Vec2::zeros(), r)?;
    let asm = MomentumAssembler::new(geometry, model, &set)?;
    let nu = geometry.nu_momentum(&layout);
    let mut jobs = Vec::new();
    for j in Layer::BOTH {
        let rows: Vec<usize> = (0..set.len()).filter(|&i| set.dofs[i].layer == j && set.dofs[i].n == [0, 0]).collect();
        let weight = nu * geometry.layer(j).reciprocal_cell_area() / (n_q * n_q) as f64;
        for i in 0..n_q {
            jobs.push((j, i, weight, rows.clone()));
        }
    }
    let parts = jobs
        .par_iter()
        .map(|(j, i, weight, rows)| {
            let b = *geometry.layer(*j).reciprocal();
            let points = (0..n_q).map(move |k| b * Vec2::new((*i as f64 + 0.5) / n_q as f64, (k as f64 + 0.5) / n_q as f64));
            quadrature_row(&asm, points, rows, *weight, energies, kappa)
        })
        .collect::<Result<Vec<_>>>()?;
    let (values, t) = reduce(parts, energies.len());
    let mut curve = DosCurve::new(Method::MomentumNaive, energies.to_vec(), values, kappa)?;
    curve.r = r;
    curve.grid = n_q;
    curve.dof_count = set.len();
    curve.add_phase("assembly", t.assembly);
    curve.add_phase("eigensolve", t.eigensolve);
    curve.add_phase("smearing", t.smearing);
    curve.wall_s = start.elapsed().as_secs_f64();
    Ok(curve)
}

/// One component anchor with its dof set and the anchor-layer dofs whose
/// momentum tile belongs to that component.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub layer: Layer,
    pub component: u32,
    pub q: Vec2,
    pub set: MomentumDofSet,
    pub owned: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct AdaptivePlan {
    pub mask: RegionMask,
    pub anchors: Vec<AnchorSet>,
}

impl AdaptivePlan {
    pub fn max_dofs(&self) -> usize {
        self.anchors.iter().map(|a| a.set.len()).max().unwrap_or(0)
    }
}

/// Builds the region, its anchors and one dof set per anchor.
pub fn plan_adaptive(
    geometry: &BilayerGeometry,
    model: &HoppingModel,
    spec: &RegionSpec,
    max_dofs: usize,
) -> Result<AdaptivePlan> {
    let mask = level_region(model, geometry, spec)?;
    if mask.wraps() {
        warn!("{}", wrap_report(&mask).message);
        return Err(Error::WrappingRegion);
    }
    let layout = model.layout();
    let orbitals = [layout.count(Layer::One), layout.count(Layer::Two)];
    let mut anchors = Vec::new();
    for layer in Layer::BOTH {
        let lm = mask.layer(layer);
        for (component, q) in component_anchors(geometry, lm)? {
            let set = adaptive_dofs(geometry, orbitals, &mask, q, max_dofs)?;
            let owned = (0..set.len())
                .filter(|&i| {
                    let d = set.dofs[i];
                    d.layer == layer && lm.component_at(geometry.layer(layer).reciprocal_frac(q + d.position(geometry))) == Some(component)
                })
                .collect();
            anchors.push(AnchorSet {
                layer,
                component,
                q,
                set,
                owned,
            });
        }
    }
    Ok(AdaptivePlan { mask, anchors })
}

/// `ν* Σ_k ∫_{Λ*} Tr_k[φ_{εκ}(Ĥ_{Jr}(q_k + q))] dq`, where `Tr_k` runs over
/// the anchor-layer dofs owned by component `k`.
///
/// Each such dof stands for one `Λ*` tile of the component, so the sum over
/// components and tiles covers every resonant momentum once.
pub fn dos_momentum_adaptive(
    geometry: &BilayerGeometry,
    model: &HoppingModel,
    spec: &RegionSpec,
    energies: &[f64],
    kappa: f64,
    n_lambda: usize,
    max_dofs: usize,
) -> Result<DosCurve> {
    check_kappa(kappa)?;
    let (lo, hi) = spec.window;
    let tol = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
    if let Some(e) = energies.iter().find(|&&e| e < lo - tol || e > hi + tol) {
        return Err(Error::InvalidArgument(format!("energy {e} lies outside the window [{lo}, {hi}]")));
    }
    let start = Instant::now();
    let plan = plan_adaptive(geometry, model, spec, max_dofs)?;
    let region_s = start.elapsed().as_secs_f64();
    let mut curve = dos_on_plan(geometry, model, &plan, energies, kappa, n_lambda)?;
    curve.r = spec.r;
    curve.add_phase("region", region_s);
    curve.wall_s = start.elapsed().as_secs_f64();
    Ok(curve)
}

/// The `Λ*` quadrature on an already built plan.
pub fn dos_on_plan(
    geometry: &BilayerGeometry,
    model: &HoppingModel,
    plan: &AdaptivePlan,
    energies: &[f64],
    kappa: f64,
    n_lambda: usize,
) -> Result<DosCurve> {
    check_kappa(kappa)?;
    if n_lambda == 0 {
        return Err(Error::InvalidArgument("N_Λ must be at least 1".into()));
    }
    let start = Instant::now();
    if plan.anchors.is_empty() {
        warn!("{}", wrap_report(&plan.mask).message);
    }
    let nu = geometry.nu_momentum(&model.layout());
    let weight = nu * geometry.moire_cell_area() / (n_lambda * n_lambda) as f64;
    let lambda = *geometry.moire_recip();
    let assemblers = plan
        .anchors
        .iter()
        .map(|a| MomentumAssembler::new(geometry, model, &a.set))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..plan.anchors.len()).flat_map(|a| (0..n_lambda).map(move |i| (a, i))).collect();
    let parts = jobs
        .par_iter()
        .map(|&(a, i)| {
            let anchor = &plan.anchors[a];
            let q0 = anchor.q;
            let points = (0..n_lambda).map(move |k| {
                let f = Vec2::new((i as f64 + 0.5) / n_lambda as f64 - 0.5, (k as f64 + 0.5) / n_lambda as f64 - 0.5);
                q0 + lambda * f
            });
            quadrature_row(&assemblers[a], points, &anchor.owned, weight, energies, kappa)
        })
        .collect::<Result<Vec<_>>>()?;
    let (values, t) = reduce(parts, energies.len());
    let mut curve = DosCurve::new(Method::MomentumAdaptive, energies.to_vec(), values, kappa)?;
    curve.grid = n_lambda;
    curve.dof_count = plan.max_dofs();
    curve.add_phase("assembly", t.assembly);
    curve.add_phase("eigensolve", t.eigensolve);
    curve.add_phase("smearing", t.smearing);
    curve.wall_s = start.elapsed().as_secs_f64();
    Ok(curve)
}

/// `G_q^{bj}` applied to a real-space vector on the cluster of `H_j(b)`:
/// for a dof `(R*, k, α)`,
/// `|Γ_k*|^{-1/2} e^{(-1)^{j+k} i b·(q/2 + R*)} Σ_R ψ_{kα}(R) e^{-i(q+R*)·R}`.
fn bloch_transform(
    geometry: &BilayerGeometry,
    set: &MomentumDofSet,
    sites: &[(SiteDof, c64)],
    b: Vec2,
    j: Layer,
    q: Vec2,
) -> Vec<c64> {
    set.dofs
        .iter()
        .map(|d| {
            let k = d.layer;
            let rs = d.position(geometry);
            let sign = if k == j { 1.0 } else { -1.0 };
            let pre = c64::from_polar(
                geometry.layer(k).reciprocal_cell_area().powf(-0.5),
                sign * b.dot(&(0.5 * q + rs)),
            );
            let p = q + rs;
            let mut acc = c64::new(0.0, 0.0);
            for (s, v) in sites {
                if s.layer == k && s.orbital == d.orbital {
                    acc += v * c64::from_polar(1.0, -p.dot(&geometry.layer(k).point(s.n)));
                }
            }
            pre * acc
        })
        .collect()
}

/// `max |G_q^{bj}(H_j(b)ψ) − Ĥ(q) G_q^{bj}ψ|` over the dofs with
/// `|R*| ≤ r_mom/2`, with `H_j(b)` on the disk of radius `r_real` and `Ĥ(q)`
/// on the circular set of radius `r_mom`.
#[allow(clippy::too_many_arguments)]
pub fn intertwining_residual(
    geometry: &BilayerGeometry,
    model: &HoppingModel,
    b: Vec2,
    j: Layer,
    q: Vec2,
    r_real: f64,
    r_mom: f64,
    psi: &[(SiteDof, c64)],
) -> Result<f64> {
    let (cluster, h) = assemble_real_h(geometry, model, b, j, r_real)?;
    let reach = model
        .inter()
        .cutoff()
        .max(model.intra(Layer::One).support_radius())
        .max(model.intra(Layer::Two).support_radius());
    let mut x = vec![c64::new(0.0, 0.0); cluster.len()];
    for (site, v) in psi {
        let Some(i) = cluster.index_of(site) else {
            return Err(Error::SupportViolation(format!("site {site:?} lies outside the cluster of radius {r_real}")));
        };
        let dist = cluster.positions[i].norm();
        if dist + reach > r_real {
            return Err(Error::SupportViolation(format!(
                "site at distance {dist:.3} Å is within the interaction reach {reach:.3} Å of the cluster edge {r_real} Å"
            )));
        }
        x[i] += v;
    }
    let mut hx = vec![c64::new(0.0, 0.0); cluster.len()];
    h.matvec(&x, 1.0, &mut hx);
    let collect = |v: &[c64]| -> Vec<(SiteDof, c64)> {
        v.iter()
            .enumerate()
            .filter(|(_, a)| a.norm() > 0.0)
            .map(|(i, a)| (cluster.dofs[i], *a))
            .collect()
    };
    let layout = model.layout();
    let set = MomentumDofSet::circular(geometry, [layout.count(Layer::One), layout.count(Layer::Two)], q, r_mom)?;
    let lhs = bloch_transform(geometry, &set, &collect(&hx), b, j, q);
    let g_psi = bloch_transform(geometry, &set, &collect(&x), b, j, q);
    let hm = MomentumAssembler::new(geometry, model, &set)?.assemble(q);
    let mut worst: f64 = 0.0;
    for (i, d) in set.dofs.iter().enumerate() {
        if d.position(geometry).norm() > 0.5 * r_mom {
            continue;
        }
        let mut rhs = c64::new(0.0, 0.0);
        for (k, g) in g_psi.iter().enumerate() {
            rhs += hm[(i, k)] * g;
        }
        worst = worst.max((lhs[i] - rhs).norm());
    }
    Ok(worst)
}
