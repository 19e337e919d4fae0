//! Energy-adaptive momentum regions: the resonance indicator `Q`, superlevel
//! masks on each layer's Brillouin-zone torus, their dilation and component
//! structure, and the lift of a mask to a finite set of momentum dofs.

use std::collections::{HashMap, VecDeque};

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{lattice_disk, wrap_unit, BilayerGeometry, Layer, Mat2, Vec2};
use crate::monolayer::bloch_eigenvalues;
use crate::tb_model::HoppingModel;

/// `Q(ε,q) = η max_j dist(ε, spec 𝓖_j h(q))^{-1}`; `+∞` on an exact hit.
pub fn q_function(model: &HoppingModel, eps: f64, q: Vec2) -> Result<f64> {
    let eta = model.eta()?;
    let mut worst: f64 = 0.0;
    for layer in Layer::BOTH {
        let d = bloch_eigenvalues(model.intra(layer), q)?
            .iter()
            .map(|l| (eps - l).abs())
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(resonance(eta, d));
    }
    Ok(worst)
}

fn resonance(eta: f64, dist: f64) -> f64 {
    if eta == 0.0 {
        0.0
    } else if dist == 0.0 {
        f64::INFINITY
    } else {
        eta / dist
    }
}

/// Distance from `lambda` to the interval `[lo, hi]`.
fn dist_to_window(lambda: f64, lo: f64, hi: f64) -> f64 {
    if lambda < lo {
        lo - lambda
    } else if lambda > hi {
        lambda - hi
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionSpec {
    /// Energy window `J = [lo, hi]` in eV.
    pub window: (f64, f64),
    pub beta: f64,
    /// Dilation radius in units of `θ`.
    pub r: f64,
    /// Torus grid points per axis.
    pub resolution: usize,
}

impl RegionSpec {
    pub fn validate(&self, theta: f64) -> Result<()> {
        let (lo, hi) = self.window;
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!("invalid energy window [{lo}, {hi}]")));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::InvalidArgument(format!("β must lie in (0,1), got {}", self.beta)));
        }
        if !(self.r >= 0.0) || !self.r.is_finite() {
            return Err(Error::InvalidArgument(format!("r must be non-negative, got {}", self.r)));
        }
        if self.resolution < 32 {
            return Err(Error::InvalidArgument(format!(
                "torus resolution must be at least 32, got {}",
                self.resolution
            )));
        }
        if theta >= 0.1 * (1.0 / self.beta - 1.0) {
            warn!(
                "θ = {theta:.4} is not small against β⁻¹ − 1 = {:.4}; region estimates may be loose",
                1.0 / self.beta - 1.0
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ComponentInfo {
    pub cells: usize,
    /// Winding detected along the first and second reciprocal axes.
    pub wraps: [bool; 2],
}

impl ComponentInfo {
    pub fn wraps_any(&self) -> bool {
        self.wraps[0] || self.wraps[1]
    }
}

/// Result of labelling a boolean torus grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Labels {
    /// Component id per cell, `None` outside the mask.
    pub ids: Vec<Option<u32>>,
    /// Unwrapped integer coordinates assigned during traversal.
    pub unwrapped: Vec<[i64; 2]>,
    pub components: Vec<ComponentInfo>,
}

/// 8-neighbour labelling on an `n×n` torus; a component wraps when two
/// traversal paths reach the same cell with different winding.
pub fn label_torus(mask: &[bool], n: usize) -> Labels {
    let mut ids = vec![None; n * n];
    let mut unwrapped = vec![[0i64; 2]; n * n];
    let mut components = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n * n {
        if !mask[start] || ids[start].is_some() {
            continue;
        }
        let id = components.len() as u32;
        let mut info = ComponentInfo::default();
        ids[start] = Some(id);
        unwrapped[start] = [(start / n) as i64, (start % n) as i64];
        queue.push_back(start);
        while let Some(cell) = queue.pop_front() {
            info.cells += 1;
            let u = unwrapped[cell];
            for di in -1i64..=1 {
                for dk in -1i64..=1 {
                    if di == 0 && dk == 0 {
                        continue;
                    }
                    let v = [u[0] + di, u[1] + dk];
                    let idx = (v[0].rem_euclid(n as i64) as usize) * n + v[1].rem_euclid(n as i64) as usize;
                    if !mask[idx] {
                        continue;
                    }
                    match ids[idx] {
                        None => {
                            ids[idx] = Some(id);
                            unwrapped[idx] = v;
                            queue.push_back(idx);
                        }
                        Some(_) => {
                            let w = unwrapped[idx];
                            if w[0] != v[0] {
                                info.wraps[0] = true;
                            }
                            if w[1] != v[1] {
                                info.wraps[1] = true;
                            }
                        }
                    }
                }
            }
        }
        components.push(info);
    }
    Labels {
        ids,
        unwrapped,
        components,
    }
}

/// Mask and diagnostics on one layer's torus `Γ_j*`.
#[derive(Debug, Clone)]
pub struct LayerMask {
    pub layer: Layer,
    pub n: usize,
    /// `sup_{ε∈J} Q_j` per grid point (row-major, first index along `b1`).
    pub q_values: Vec<f64>,
    /// Cells with `Q > β` before dilation.
    pub core: Vec<bool>,
    pub mask: Vec<bool>,
    pub labels: Labels,
    pub core_labels: Labels,
}

impl LayerMask {
    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }

    pub fn wraps(&self) -> bool {
        self.labels.components.iter().any(ComponentInfo::wraps_any)
    }

    pub fn core_wraps(&self) -> bool {
        self.core_labels.components.iter().any(ComponentInfo::wraps_any)
    }

    pub fn frac(&self, cell: usize) -> Vec2 {
        Vec2::new((cell / self.n) as f64 / self.n as f64, (cell % self.n) as f64 / self.n as f64)
    }

    /// Periodic bilinear interpolation of the 0/1 mask at fractional `f`.
    pub fn interpolate(&self, f: Vec2) -> f64 {
        let n = self.n as f64;
        let x = wrap_unit(f[0]) * n;
        let y = wrap_unit(f[1]) * n;
        let (i0, k0) = (x.floor(), y.floor());
        let (tx, ty) = (x - i0, y - k0);
        let at = |i: f64, k: f64| {
            let i = (i as i64).rem_euclid(self.n as i64) as usize;
            let k = (k as i64).rem_euclid(self.n as i64) as usize;
            if self.mask[i * self.n + k] {
                1.0
            } else {
                0.0
            }
        };
        (1.0 - tx) * (1.0 - ty) * at(i0, k0)
            + tx * (1.0 - ty) * at(i0 + 1.0, k0)
            + (1.0 - tx) * ty * at(i0, k0 + 1.0)
            + tx * ty * at(i0 + 1.0, k0 + 1.0)
    }

    pub fn contains_frac(&self, f: Vec2) -> bool {
        self.interpolate(f) >= 0.5
    }

    /// Component owning fractional point `f`: the label of the nearest grid
    /// point, or of a labelled corner of the surrounding grid square.
    pub fn component_at(&self, f: Vec2) -> Option<u32> {
        let n = self.n as f64;
        let x = wrap_unit(f[0]) * n;
        let y = wrap_unit(f[1]) * n;
        let idx = |i: f64, k: f64| {
            let i = (i as i64).rem_euclid(self.n as i64) as usize;
            let k = (k as i64).rem_euclid(self.n as i64) as usize;
            i * self.n + k
        };
        if let Some(id) = self.labels.ids[idx(x.round(), y.round())] {
            return Some(id);
        }
        let (i0, k0) = (x.floor(), y.floor());
        [(i0, k0), (i0 + 1.0, k0), (i0, k0 + 1.0), (i0 + 1.0, k0 + 1.0)]
            .into_iter()
            .find_map(|(i, k)| self.labels.ids[idx(i, k)])
    }
}

#[derive(Debug, Clone)]
pub struct RegionMask {
    pub spec: RegionSpec,
    pub theta: f64,
    pub layers: [LayerMask; 2],
}

impl RegionMask {
    pub fn layer(&self, layer: Layer) -> &LayerMask {
        &self.layers[layer.index()]
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(LayerMask::is_empty)
    }

    pub fn wraps(&self) -> bool {
        self.layers.iter().any(LayerMask::wraps)
    }

    pub fn core_wraps(&self) -> bool {
        self.layers.iter().any(LayerMask::core_wraps)
    }
}

/// Superlevel set of `sup_{ε∈J} Q` on each torus, dilated by `rθ`.
///
/// The supremum over the window is taken exactly: for a grid point with
/// bands `λ_n`, `sup_{ε∈J} Q_j = η / min_n dist(λ_n, J)`.
pub fn level_region(model: &HoppingModel, geometry: &BilayerGeometry, spec: &RegionSpec) -> Result<RegionMask> {
    let theta = geometry.theta_param();
    spec.validate(theta)?;
    let eta = model.eta()?;
    let layers = [
        layer_mask(model, geometry, spec, eta, Layer::One)?,
        layer_mask(model, geometry, spec, eta, Layer::Two)?,
    ];
    Ok(RegionMask {
        spec: *spec,
        theta,
        layers,
    })
}

fn layer_mask(model: &HoppingModel, geometry: &BilayerGeometry, spec: &RegionSpec, eta: f64, layer: Layer) -> Result<LayerMask> {
    let n = spec.resolution;
    let b = *geometry.layer(layer).reciprocal();
    let table = model.intra(layer);
    let (lo, hi) = spec.window;
    let rows = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|k| {
                    let q = b * Vec2::new(i as f64 / n as f64, k as f64 / n as f64);
                    let d = bloch_eigenvalues(table, q)?
                        .iter()
                        .map(|&l| dist_to_window(l, lo, hi))
                        .fold(f64::INFINITY, f64::min);
                    Ok(resonance(eta, d))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let q_values: Vec<f64> = rows.into_iter().flatten().collect();
    let core: Vec<bool> = q_values.iter().map(|&q| q > spec.beta).collect();

    let radius = spec.r * geometry.theta_param();
    let spacing = (b.column(0).norm().max(b.column(1).norm())) / n as f64;
    if spec.r > 0.0 && radius < 2.0 * spacing {
        warn!(
            "dilation radius {radius:.4} Å⁻¹ spans fewer than two grid cells ({spacing:.4} Å⁻¹); increase the torus resolution"
        );
    }
    let mask = dilate(&core, n, &b, radius)?;
    let labels = label_torus(&mask, n);
    let core_labels = label_torus(&core, n);
    Ok(LayerMask {
        layer,
        n,
        q_values,
        core,
        mask,
        labels,
        core_labels,
    })
}

/// Marks every cell within Cartesian distance `radius` of a marked cell,
/// measured with the torus metric induced by the cell basis `b`.
pub fn dilate(core: &[bool], n: usize, b: &Mat2, radius: f64) -> Result<Vec<bool>> {
    if radius <= 0.0 {
        return Ok(core.to_vec());
    }
    let stencil: Vec<[i64; 2]> = lattice_disk(&(b / n as f64), Vec2::zeros(), radius)?
        .into_iter()
        .map(|p| p.n)
        .collect();
    let mut out = vec![false; n * n];
    let ni = n as i64;
    for (cell, _) in core.iter().enumerate().filter(|(_, &c)| c) {
        let (i, k) = ((cell / n) as i64, (cell % n) as i64);
        for s in &stencil {
            let a = (i + s[0]).rem_euclid(ni) as usize;
            let c = (k + s[1]).rem_euclid(ni) as usize;
            out[a * n + c] = true;
        }
    }
    Ok(out)
}

/// Component counts at the given and at doubled resolution; a mismatch
/// means the grid does not resolve the region.
pub fn resolution_check(model: &HoppingModel, geometry: &BilayerGeometry, spec: &RegionSpec) -> Result<bool> {
    let coarse = level_region(model, geometry, spec)?;
    let fine = level_region(
        model,
        geometry,
        &RegionSpec {
            resolution: 2 * spec.resolution,
            ..*spec
        },
    )?;
    let counts = |m: &RegionMask| -> Vec<usize> { m.layers.iter().map(|l| l.labels.components.len()).collect() };
    let ok = counts(&coarse) == counts(&fine);
    if !ok {
        warn!(
            "component counts {:?} change to {:?} at doubled resolution",
            counts(&coarse),
            counts(&fine)
        );
    }
    Ok(ok)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Advantageous,
    RLimited,
    NotAdvantageous,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Advisory {
    pub verdict: Verdict,
    pub message: String,
}

pub fn wrap_report(mask: &RegionMask) -> Advisory {
    let (verdict, message) = if mask.core_wraps() {
        (
            Verdict::NotAdvantageous,
            "not advantageous: the resonant region already wraps around the torus at r = 0, so its lift is unbounded; use the real-space method or the circular momentum cutoff",
        )
    } else if mask.wraps() {
        (
            Verdict::RLimited,
            "r-limited: the region wraps only after dilation; reduce r to keep the momentum dof set finite",
        )
    } else if mask.is_empty() {
        (
            Verdict::Advantageous,
            "advantageous: the region is empty, so the momentum-space contribution vanishes",
        )
    } else {
        (
            Verdict::Advantageous,
            "advantageous: every region component is bounded on the torus",
        )
    };
    Advisory {
        verdict,
        message: message.to_string(),
    }
}

/// A momentum dof: a reciprocal-lattice point of the other sheet, a layer and an orbital.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MomDof {
    pub layer: Layer,
    /// Integer coordinates in the reciprocal basis of `F_layer`.
    pub n: [i64; 2],
    pub orbital: usize,
}

impl MomDof {
    pub fn position(&self, geometry: &BilayerGeometry) -> Vec2 {
        geometry.layer(self.layer.other()).reciprocal_point(self.n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentumDofSet {
    pub anchor: Vec2,
    pub dofs: Vec<MomDof>,
}

impl MomentumDofSet {
    pub fn new(anchor: Vec2, mut dofs: Vec<MomDof>) -> Self {
        dofs.sort();
        dofs.dedup();
        Self { anchor, dofs }
    }

    pub fn len(&self) -> usize {
        self.dofs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dofs.is_empty()
    }

    pub fn contains(&self, d: &MomDof) -> bool {
        self.dofs.binary_search(d).is_ok()
    }

    /// Union of two sets anchored at the same point.
    pub fn union(&self, other: &MomentumDofSet) -> MomentumDofSet {
        let mut all = self.dofs.clone();
        all.extend_from_slice(&other.dofs);
        MomentumDofSet::new(self.anchor, all)
    }

    /// `Ω*_r`: every dof with `|R*| ≤ r`.
    pub fn circular(geometry: &BilayerGeometry, orbitals: [usize; 2], anchor: Vec2, r: f64) -> Result<Self> {
        let mut dofs = Vec::new();
        for layer in Layer::BOTH {
            for p in lattice_disk(geometry.layer(layer.other()).reciprocal(), Vec2::zeros(), r)? {
                for orbital in 0..orbitals[layer.index()] {
                    dofs.push(MomDof { layer, n: p.n, orbital });
                }
            }
        }
        Ok(Self::new(anchor, dofs))
    }
}

/// Fractional coordinates of a layer-`k` Bloch momentum in `Γ_k*`; the mask
/// of any layer is read at the same fractional point.
fn bloch_frac(geometry: &BilayerGeometry, layer: Layer, momentum: Vec2) -> Vec2 {
    geometry.layer(layer).reciprocal_frac(momentum)
}

/// `λ_j(q + O)` restricted to the disk of radius `radius`: the dof
/// `(R*, k, α)` carries Bloch momentum `q + R*` and is kept when that momentum,
/// reduced into `Γ_k*`, falls inside the mask of layer `j`.
pub fn lambda_lift(
    geometry: &BilayerGeometry,
    orbitals: [usize; 2],
    mask: &LayerMask,
    q: Vec2,
    radius: f64,
) -> Result<MomentumDofSet> {
    let mut dofs = Vec::new();
    if mask.is_empty() {
        return Ok(MomentumDofSet::new(q, dofs));
    }
    for layer in Layer::BOTH {
        for p in lattice_disk(geometry.layer(layer.other()).reciprocal(), Vec2::zeros(), radius)? {
            if mask.contains_frac(bloch_frac(geometry, layer, q + p.x)) {
                for orbital in 0..orbitals[layer.index()] {
                    dofs.push(MomDof { layer, n: p.n, orbital });
                }
            }
        }
    }
    Ok(MomentumDofSet::new(q, dofs))
}

/// Keeps the dofs reachable from the `0α` dofs of layer `j` through hops of
/// length `|R* − R'*| < μ`.
pub fn connected_prune(geometry: &BilayerGeometry, set: &MomentumDofSet, j: Layer, mu: f64) -> MomentumDofSet {
    let pos: Vec<Vec2> = set.dofs.iter().map(|d| d.position(geometry)).collect();
    let key = |x: &Vec2| [(x[0] / mu).floor() as i64, (x[1] / mu).floor() as i64];
    let mut buckets: HashMap<[i64; 2], Vec<usize>> = HashMap::new();
    for (i, x) in pos.iter().enumerate() {
        buckets.entry(key(x)).or_default().push(i);
    }
    let mut seen = vec![false; set.len()];
    let mut queue: VecDeque<usize> = set
        .dofs
        .iter()
        .enumerate()
        .filter(|(_, d)| d.layer == j && d.n == [0, 0])
        .map(|(i, _)| i)
        .collect();
    for &i in &queue {
        seen[i] = true;
    }
    while let Some(i) = queue.pop_front() {
        let c = key(&pos[i]);
        for da in -1..=1 {
            for db in -1..=1 {
                let Some(list) = buckets.get(&[c[0] + da, c[1] + db]) else {
                    continue;
                };
                for &k in list {
                    if !seen[k] && (pos[k] - pos[i]).norm() < mu {
                        seen[k] = true;
                        queue.push_back(k);
                    }
                }
            }
        }
    }
    let dofs = set.dofs.iter().zip(&seen).filter(|(_, &s)| s).map(|(d, _)| *d).collect();
    MomentumDofSet::new(set.anchor, dofs)
}

/// `P_j[λ_j(q + O_j)]` with the enumeration disk grown until the pruned set
/// stays clear of its boundary.
pub fn lift_and_prune(
    geometry: &BilayerGeometry,
    orbitals: [usize; 2],
    mask: &LayerMask,
    q: Vec2,
    max_dofs: usize,
) -> Result<MomentumDofSet> {
    let mu = geometry.mu_theta();
    let mut radius = 4.0 * mu;
    loop {
        let lifted = lambda_lift(geometry, orbitals, mask, q, radius)?;
        let pruned = connected_prune(geometry, &lifted, mask.layer, mu);
        let reach = pruned
            .dofs
            .iter()
            .map(|d| d.position(geometry).norm())
            .fold(0.0, f64::max);
        if pruned.len() > max_dofs {
            if !mask.wraps() {
                warn!("bounded region lifted to more than {max_dofs} dofs");
            }
            return Err(Error::UnboundedRegion {
                dofs: pruned.len(),
                max: max_dofs,
            });
        }
        if reach + mu < radius {
            return Ok(pruned);
        }
        radius *= 2.0;
    }
}

/// `Ω*_{Jr}(q) = ∪_j P_j[λ_j(q + O_j)]`.
pub fn adaptive_dofs(
    geometry: &BilayerGeometry,
    orbitals: [usize; 2],
    mask: &RegionMask,
    q: Vec2,
    max_dofs: usize,
) -> Result<MomentumDofSet> {
    let mut set = MomentumDofSet::new(q, Vec::new());
    for layer in Layer::BOTH {
        let part = lift_and_prune(geometry, orbitals, mask.layer(layer), q, max_dofs)?;
        set = set.union(&part);
    }
    if set.len() > max_dofs {
        return Err(Error::UnboundedRegion {
            dofs: set.len(),
            max: max_dofs,
        });
    }
    Ok(set)
}

/// Anchor of each component of a layer mask, as a Cartesian momentum in `Γ_j*`,
/// paired with the component id.
pub fn component_anchors(geometry: &BilayerGeometry, mask: &LayerMask) -> Result<Vec<(u32, Vec2)>> {
    if mask.wraps() {
        return Err(Error::WrappingRegion);
    }
    let n = mask.n;
    let b = geometry.layer(mask.layer).reciprocal();
    let mut out = Vec::new();
    for (id, _) in mask.labels.components.iter().enumerate() {
        let cells: Vec<usize> = (0..n * n).filter(|&c| mask.labels.ids[c] == Some(id as u32)).collect();
        let mut centroid = [0.0f64; 2];
        for &c in &cells {
            let u = mask.labels.unwrapped[c];
            centroid[0] += u[0] as f64;
            centroid[1] += u[1] as f64;
        }
        centroid[0] /= cells.len() as f64;
        centroid[1] /= cells.len() as f64;
        let dist = |c: usize| {
            let u = mask.labels.unwrapped[c];
            (u[0] as f64 - centroid[0]).powi(2) + (u[1] as f64 - centroid[1]).powi(2)
        };
        let edge_clear = |c: usize| {
            let (i, k) = (c / n, c % n);
            i >= 2 && k >= 2 && i + 2 < n && k + 2 < n
        };
        let pick = cells
            .iter()
            .copied()
            .filter(|&c| edge_clear(c))
            .min_by(|&a, &c| dist(a).total_cmp(&dist(c)).then(a.cmp(&c)))
            .or_else(|| {
                warn!("component {id} of layer {} has no cell clear of the cell edge", mask.layer.number());
                cells.iter().copied().min_by(|&a, &c| dist(a).total_cmp(&dist(c)).then(a.cmp(&c)))
            })
            .expect("components are nonempty");
        out.push((id as u32, b * mask.frac(pick)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{twist_bilayer, LatticeBasis};
    use crate::linalg::c64;
    use crate::tb_model::{HopBlock, InterHoppingProfile, IntraHoppingTable};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn graphene(eta: f64, twist_deg: f64) -> (BilayerGeometry, HoppingModel) {
        let t = IntraHoppingTable::graphene_nn(-2.7, 2.46).unwrap();
        let g = twist_bilayer(t.basis().direct(), twist_deg.to_radians()).unwrap();
        let m = HoppingModel::new(&g, &t, &t, InterHoppingProfile::gaussian(2, 2, 0.2, 0.8).unwrap())
            .unwrap()
            .with_eta(eta);
        (g, m)
    }

    fn flat(e0: f64, eta: f64) -> (BilayerGeometry, HoppingModel) {
        let t = IntraHoppingTable::new(
            LatticeBasis::hexagonal(2.46).unwrap(),
            vec![Vec2::zeros()],
            vec![HopBlock { n: [0, 0], block: vec![c64::new(e0, 0.0)] }],
        )
        .unwrap();
        let g = twist_bilayer(t.basis().direct(), 3f64.to_radians()).unwrap();
        let m = HoppingModel::new(&g, &t, &t, InterHoppingProfile::gaussian(1, 1, 0.1, 0.8).unwrap())
            .unwrap()
            .with_eta(eta);
        (g, m)
    }

    fn spec(lo: f64, hi: f64, r: f64, n: usize) -> RegionSpec {
        RegionSpec { window: (lo, hi), beta: 0.5, r, resolution: n }
    }

    #[test]
    fn q_for_flat_model() {
        let (_, m) = flat(0.3, 0.2);
        let q = q_function(&m, 0.8, Vec2::new(0.4, 1.1)).unwrap();
        assert!((q - 0.2 / 0.5).abs() < 1e-14);
        assert!(q_function(&m, 0.3, Vec2::zeros()).unwrap().is_infinite());
        let (_, m) = flat(0.3, 0.0);
        assert_eq!(q_function(&m, 0.8, Vec2::zeros()).unwrap(), 0.0);
    }

    #[test]
    fn q_matches_eigensolve_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let basis = LatticeBasis::hexagonal(2.46).unwrap();
        let z = c64::new(0.0, 0.0);
        let t = IntraHoppingTable::with_hermitian_partners(
            basis,
            vec![Vec2::zeros(), Vec2::new(0.3, 0.4)],
            vec![
                HopBlock { n: [0, 0], block: vec![c64::new(0.2, 0.0), c64::new(0.5, 0.3), c64::new(0.5, -0.3), c64::new(-0.4, 0.0)] },
                HopBlock { n: [1, 0], block: vec![c64::new(-0.7, 0.0), c64::new(0.1, 0.2), z, c64::new(0.3, 0.1)] },
            ],
        )
        .unwrap();
        let g = twist_bilayer(basis.direct(), 4f64.to_radians()).unwrap();
        let m = HoppingModel::new(&g, &t, &t, InterHoppingProfile::gaussian(2, 2, 0.1, 0.8).unwrap())
            .unwrap()
            .with_eta(0.13);
        for _ in 0..20 {
            let q = Vec2::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let eps = rng.gen_range(-2.0..2.0);
            let mut best: f64 = 0.0;
            for layer in Layer::BOTH {
                // Oracle: explicit 2×2 Bloch sum and closed-form eigenvalues.
                let mut h = [[c64::new(0.0, 0.0); 2]; 2];
                for e in m.intra(layer).entries() {
                    let ph = c64::from_polar(1.0, -q.dot(&m.intra(layer).basis().point(e.n)));
                    for a in 0..2 {
                        for b in 0..2 {
                            h[a][b] += e.block[2 * a + b] * ph;
                        }
                    }
                }
                let tr = (h[0][0].re + h[1][1].re) / 2.0;
                let disc = (((h[0][0].re - h[1][1].re) / 2.0).powi(2) + h[0][1].norm_sqr()).sqrt();
                let d = (eps - tr - disc).abs().min((eps - tr + disc).abs());
                best = best.max(0.13 / d);
            }
            let got = q_function(&m, eps, q).unwrap();
            assert!((got - best).abs() <= 1e-10 * best);
        }
    }

    #[test]
    fn flat_model_far_window_is_empty() {
        let (g, m) = flat(0.0, 0.1);
        // |ε − ε₀| > η/β everywhere on J.
        let mask = level_region(&m, &g, &spec(0.5, 0.8, 1.0, 32)).unwrap();
        assert!(mask.is_empty());
        assert_eq!(wrap_report(&mask).verdict, Verdict::Advantageous);
    }

    #[test]
    fn labelling_detects_winding() {
        let n = 8;
        // A horizontal band of cells wraps along the second axis only.
        let mut band = vec![false; n * n];
        for k in 0..n {
            band[3 * n + k] = true;
        }
        let l = label_torus(&band, n);
        assert_eq!(l.components.len(), 1);
        assert_eq!(l.components[0].wraps, [false, true]);
        // A blob straddling the cell corner is one non-wrapping component.
        let mut blob = vec![false; n * n];
        for (i, k) in [(0, 0), (0, 7), (7, 0), (7, 7), (1, 0)] {
            blob[i * n + k] = true;
        }
        let l = label_torus(&blob, n);
        assert_eq!(l.components.len(), 1);
        assert!(!l.components[0].wraps_any());
        // A diagonal line winds along both axes.
        let mut diag = vec![false; n * n];
        for i in 0..n {
            diag[i * n + i] = true;
        }
        let l = label_torus(&diag, n);
        assert_eq!(l.components.len(), 1);
        assert_eq!(l.components[0].wraps, [true, true]);
    }

    fn random_mask(seed: u64, density: f64, n: usize) -> Vec<bool> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n * n).map(|_| rng.gen_bool(density)).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn labelling_is_a_partition(seed in 0u64..10_000, density in 0.05f64..0.6) {
            let n = 24;
            let mask = random_mask(seed, density, n);
            let l = label_torus(&mask, n);
            let total: usize = l.components.iter().map(|c| c.cells).sum();
            assert_eq!(total, mask.iter().filter(|&&m| m).count());
            for c in 0..n * n {
                assert_eq!(l.ids[c].is_some(), mask[c]);
            }
            // Oracle: union-find over 8-neighbour torus adjacency.
            let mut parent: Vec<usize> = (0..n * n).collect();
            fn find(p: &mut [usize], x: usize) -> usize {
                let mut r = x;
                while p[r] != r {
                    r = p[r];
                }
                let mut y = x;
                while p[y] != r {
                    let nx = p[y];
                    p[y] = r;
                    y = nx;
                }
                r
            }
            for c in 0..n * n {
                if !mask[c] {
                    continue;
                }
                let (i, k) = (c / n, c % n);
                for di in [n - 1, 0, 1] {
                    for dk in [n - 1, 0, 1] {
                        let d = ((i + di) % n) * n + (k + dk) % n;
                        if mask[d] {
                            let (a, b) = (find(&mut parent, c), find(&mut parent, d));
                            parent[a] = b;
                        }
                    }
                }
            }
            for a in 0..n * n {
                for b in 0..n * n {
                    if mask[a] && mask[b] {
                        assert_eq!(l.ids[a] == l.ids[b], find(&mut parent, a) == find(&mut parent, b));
                    }
                }
            }
        }

        #[test]
        fn labelling_is_invariant_under_torus_shifts(
            seed in 0u64..10_000,
            density in 0.05f64..0.6,
            si in 0usize..24,
            sk in 0usize..24,
        ) {
            let n = 24;
            let mask = random_mask(seed, density, n);
            let mut shifted = vec![false; n * n];
            for c in 0..n * n {
                shifted[((c / n + si) % n) * n + (c % n + sk) % n] = mask[c];
            }
            let summary = |m: &[bool]| {
                let mut v: Vec<(usize, [bool; 2])> = label_torus(m, n).components.iter().map(|c| (c.cells, c.wraps)).collect();
                v.sort();
                v
            };
            prop_assert_eq!(summary(&mask), summary(&shifted));
        }
    }

    #[test]
    fn dirac_pockets_bounded_and_match_fine_grid() {
        let (g, m) = graphene(0.05, 3.0);
        let s = spec(-0.1, 0.1, 0.0, 48);
        let coarse = level_region(&m, &g, &s).unwrap();
        let l = coarse.layer(Layer::One);
        assert_eq!(l.labels.components.len(), 2);
        assert!(!coarse.wraps());
        assert_eq!(wrap_report(&coarse).verdict, Verdict::Advantageous);
        // Dense recomputation at 4× resolution: every coarse cell agrees with the
        // fine cell at the same point unless the fine grid shows a boundary nearby.
        let fine = level_region(&m, &g, &RegionSpec { resolution: 192, ..s }).unwrap();
        let fl = fine.layer(Layer::One);
        for c in 0..48 * 48 {
            let (i, k) = (c / 48, c % 48);
            let fc = (4 * i) * 192 + 4 * k;
            if l.core[c] != fl.core[fc] {
                let near_edge = (-2i64..=2).any(|a| {
                    (-2i64..=2).any(|b| {
                        let ii = (4 * i as i64 + a).rem_euclid(192) as usize;
                        let kk = (4 * k as i64 + b).rem_euclid(192) as usize;
                        fl.core[ii * 192 + kk] != fl.core[fc]
                    })
                });
                assert!(near_edge);
            }
            if l.core[c] {
                assert!(l.q_values[c] > 0.5);
            }
        }
    }

    #[test]
    fn ring_energy_wraps_at_zero_radius() {
        // Near the van Hove energy |t| the constant-energy contour is a
        // network of lines that winds around the torus.
        let (g, m) = graphene(0.05, 2.0);
        let mask = level_region(&m, &g, &spec(2.6, 2.8, 0.0, 64)).unwrap();
        assert!(mask.core_wraps());
        assert_eq!(wrap_report(&mask).verdict, Verdict::NotAdvantageous);
        assert!(matches!(component_anchors(&g, mask.layer(Layer::One)), Err(Error::WrappingRegion)));
    }

    #[test]
    fn dilation_can_create_winding() {
        let (g, m) = graphene(0.05, 3.0);
        let mask = level_region(&m, &g, &spec(-0.5, 0.5, 12.0, 64)).unwrap();
        assert!(!mask.core_wraps());
        assert!(mask.wraps());
        assert_eq!(wrap_report(&mask).verdict, Verdict::RLimited);
    }

    #[test]
    fn monotone_in_r_and_window() {
        let (g, m) = graphene(0.1, 3.0);
        let a = level_region(&m, &g, &spec(-0.1, 0.1, 0.5, 64)).unwrap();
        let b = level_region(&m, &g, &spec(-0.1, 0.1, 1.5, 64)).unwrap();
        let c = level_region(&m, &g, &spec(-0.2, 0.3, 0.5, 64)).unwrap();
        for layer in Layer::BOTH {
            for i in 0..64 * 64 {
                if a.layer(layer).mask[i] {
                    assert!(b.layer(layer).mask[i] && c.layer(layer).mask[i]);
                }
            }
        }
        let orb = [2, 2];
        let q = component_anchors(&g, a.layer(Layer::One)).unwrap()[0].1;
        let sa = adaptive_dofs(&g, orb, &a, q, 5000).unwrap();
        let sb = adaptive_dofs(&g, orb, &b, q, 5000).unwrap();
        assert!(sa.dofs.iter().all(|d| sb.contains(d)));
        assert!(sb.len() > sa.len());
    }

    #[test]
    fn dilation_threshold_consistency() {
        let (g, m) = graphene(0.1, 3.0);
        let r = 1.0;
        let n = 96;
        let mask = level_region(&m, &g, &spec(-0.1, 0.1, r, n)).unwrap();
        let l = mask.layer(Layer::One);
        let b = *g.layer(Layer::One).reciprocal();
        let cell = b.column(0).norm().max(b.column(1).norm()) / n as f64;
        let far = (r + 1.0) * g.theta_param() + 2.0 * cell;
        let core: Vec<usize> = (0..n * n).filter(|&c| l.core[c]).collect();
        for c in 0..n * n {
            if !l.mask[c] {
                continue;
            }
            // Distance on the torus to the nearest core cell.
            let d = core
                .iter()
                .map(|&k| {
                    let mut f = l.frac(c) - l.frac(k);
                    f[0] -= f[0].round();
                    f[1] -= f[1].round();
                    (b * f).norm()
                })
                .fold(f64::INFINITY, f64::min);
            assert!(d <= far);
        }
    }

    #[test]
    fn empty_and_full_lifts() {
        let (g, m) = flat(0.0, 0.1);
        let empty = level_region(&m, &g, &spec(0.5, 0.8, 0.0, 32)).unwrap();
        let s = lambda_lift(&g, [1, 1], empty.layer(Layer::One), Vec2::zeros(), 20.0).unwrap();
        assert!(s.is_empty());
        let full = level_region(&m, &g, &spec(-0.1, 0.1, 0.0, 32)).unwrap();
        assert!(full.layer(Layer::One).mask.iter().all(|&x| x));
        let s = lambda_lift(&g, [1, 1], full.layer(Layer::One), Vec2::zeros(), 20.0).unwrap();
        let circ = MomentumDofSet::circular(&g, [1, 1], Vec2::zeros(), 20.0).unwrap();
        assert_eq!(s, circ);
    }

    #[test]
    fn lift_preserves_disjointness() {
        let (g, m) = graphene(0.05, 3.0);
        let mask = level_region(&m, &g, &spec(-0.1, 0.1, 1.0, 64)).unwrap();
        let l = mask.layer(Layer::One);
        assert_eq!(l.labels.components.len(), 2);
        let q = Vec2::new(0.013, -0.021);
        let only = |id: u32| {
            let mut c = l.clone();
            for (cell, v) in c.mask.iter_mut().enumerate() {
                *v = l.labels.ids[cell] == Some(id);
            }
            c
        };
        let (m0, m1) = (only(0), only(1));
        let s0 = lambda_lift(&g, [2, 2], &m0, q, 60.0).unwrap();
        let s1 = lambda_lift(&g, [2, 2], &m1, q, 60.0).unwrap();
        assert!(!s0.is_empty() && !s1.is_empty());
        assert!(s0.dofs.iter().all(|d| !s1.contains(d)));
        // Brute-force membership per dof.
        for d in &s0.dofs {
            let f = g.layer(d.layer).reciprocal_frac(q + d.position(&g));
            assert!(m0.interpolate(f) >= 0.5);
        }
    }

    #[test]
    fn prune_examples() {
        let (g, _) = graphene(0.05, 3.0);
        let mu = g.mu_theta();
        let mk = |layer, n| MomDof { layer, n, orbital: 0 };
        // Origin absent.
        let set = MomentumDofSet::new(Vec2::zeros(), vec![mk(Layer::One, [1, 0]), mk(Layer::One, [1, 1])]);
        assert!(connected_prune(&g, &set, Layer::One, mu).is_empty());
        // Nearest neighbours are within μ_θ of each other.
        let near = MomentumDofSet::new(
            Vec2::zeros(),
            vec![mk(Layer::One, [0, 0]), mk(Layer::One, [1, 0]), mk(Layer::Two, [0, 1])],
        );
        assert_eq!(connected_prune(&g, &near, Layer::One, mu), near);
        // A far cluster is dropped.
        let mut dofs = near.dofs.clone();
        dofs.push(mk(Layer::One, [9, 0]));
        dofs.push(mk(Layer::One, [10, 0]));
        let pruned = connected_prune(&g, &MomentumDofSet::new(Vec2::zeros(), dofs), Layer::One, mu);
        assert_eq!(pruned, near);
    }

    #[test]
    fn prune_matches_union_find() {
        let (g, _) = graphene(0.05, 3.0);
        let mu = g.mu_theta();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        for _ in 0..5 {
            let mut dofs = vec![MomDof { layer: Layer::Two, n: [0, 0], orbital: 0 }];
            for _ in 0..150 {
                let layer = if rng.gen_bool(0.5) { Layer::One } else { Layer::Two };
                dofs.push(MomDof { layer, n: [rng.gen_range(-8..8), rng.gen_range(-8..8)], orbital: 0 });
            }
            let set = MomentumDofSet::new(Vec2::zeros(), dofs);
            let pruned = connected_prune(&g, &set, Layer::Two, mu);
            let pos: Vec<Vec2> = set.dofs.iter().map(|d| d.position(&g)).collect();
            let mut parent: Vec<usize> = (0..set.len()).collect();
            fn root(p: &mut [usize], mut x: usize) -> usize {
                while p[x] != x {
                    p[x] = p[p[x]];
                    x = p[x];
                }
                x
            }
            for a in 0..set.len() {
                for b in 0..a {
                    if (pos[a] - pos[b]).norm() < mu {
                        let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
                        parent[ra] = rb;
                    }
                }
            }
            let origin = set.dofs.iter().position(|d| d.layer == Layer::Two && d.n == [0, 0]).unwrap();
            let ro = root(&mut parent, origin);
            for (i, d) in set.dofs.iter().enumerate() {
                assert_eq!(pruned.contains(d), root(&mut parent, i) == ro);
            }
        }
    }

    #[test]
    fn anchors_of_symmetric_pockets() {
        let (g, m) = graphene(0.05, 3.0);
        let mask = level_region(&m, &g, &spec(-0.1, 0.1, 0.0, 96)).unwrap();
        let anchors = component_anchors(&g, mask.layer(Layer::One)).unwrap();
        assert_eq!(anchors.len(), 2);
        let b = g.layer(Layer::One).reciprocal();
        let fr: Vec<Vec2> = anchors.iter().map(|(_, q)| g.layer(Layer::One).reciprocal_frac(*q)).collect();
        // K and K' sit at (1/3, 2/3) and (2/3, 1/3); anchors mirror each other.
        let cell = 1.0 / 96.0;
        assert!((fr[0][0] - fr[1][1]).abs() <= 1.5 * cell && (fr[0][1] - fr[1][0]).abs() <= 1.5 * cell);
        for f in &fr {
            let k1 = (b * (f - Vec2::new(1.0 / 3.0, 2.0 / 3.0))).norm();
            let k2 = (b * (f - Vec2::new(2.0 / 3.0, 1.0 / 3.0))).norm();
            assert!(k1.min(k2) < 2.0 * b.column(0).norm() * cell);
        }
    }

    #[test]
    fn translated_anchor_gives_translated_set() {
        let (g, m) = graphene(0.1, 3.0);
        let mask = level_region(&m, &g, &spec(-0.1, 0.1, 1.0, 128)).unwrap();
        let q = component_anchors(&g, mask.layer(Layer::One)).unwrap()[0].1;
        let base = adaptive_dofs(&g, [2, 2], &mask, q, 5000).unwrap();
        // Shift the anchor by a layer-2 reciprocal vector, i.e. by a layer-1 dof.
        let shift = [1i64, 0];
        let moved = adaptive_dofs(&g, [2, 2], &mask, q + g.layer(Layer::Two).reciprocal_point(shift), 5000).unwrap();
        let translated: Vec<MomDof> = base
            .dofs
            .iter()
            .filter(|d| d.layer == Layer::One)
            .map(|d| MomDof { n: [d.n[0] - shift[0], d.n[1] - shift[1]], ..*d })
            .collect();
        let moved_l1: Vec<MomDof> = moved.dofs.iter().filter(|d| d.layer == Layer::One).copied().collect();
        let missing = translated.iter().filter(|d| !moved_l1.contains(d)).count();
        let extra = moved_l1.len() as i64 - (translated.len() - missing) as i64;
        // Grid-resolution boundary effects only.
        assert!(missing <= translated.len() / 10 && extra <= (translated.len() / 10) as i64);
    }
}
