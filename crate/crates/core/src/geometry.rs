//! Bravais lattices, reciprocal lattices and the twisted-bilayer construction.
//!
//! Lattice bases are stored column-wise: the columns of `A` are the primitive
//! vectors `a1`, `a2` in Å and the reciprocal basis is `2π A^{-T}` in Å⁻¹.
//! Unit cells are always the half-open fractional square `[0,1)²`.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Mat2 = Matrix2<f64>;

/// One of the two sheets of the bilayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Layer {
    One,
    Two,
}

impl Layer {
    pub const BOTH: [Layer; 2] = [Layer::One, Layer::Two];

    pub fn index(self) -> usize {
        match self {
            Layer::One => 0,
            Layer::Two => 1,
        }
    }

    /// The transposition `F_j` exchanging the sheets.
    pub fn other(self) -> Layer {
        match self {
            Layer::One => Layer::Two,
            Layer::Two => Layer::One,
        }
    }

    pub fn number(self) -> u8 {
        self.index() as u8 + 1
    }

    pub fn from_number(n: u8) -> Option<Layer> {
        match n {
            1 => Some(Layer::One),
            2 => Some(Layer::Two),
            _ => None,
        }
    }
}

pub fn rotation(angle: f64) -> Mat2 {
    let (s, c) = angle.sin_cos();
    Mat2::new(c, -s, s, c)
}

/// Largest singular value of a 2×2 matrix.
pub fn spectral_norm(m: &Mat2) -> f64 {
    let fro2 = m.norm_squared();
    let det = m.determinant();
    let disc = (fro2 * fro2 - 4.0 * det * det).max(0.0);
    ((fro2 + disc.sqrt()) / 2.0).sqrt()
}

/// Smallest singular value of a 2×2 matrix.
pub fn smallest_singular_value(m: &Mat2) -> f64 {
    let fro2 = m.norm_squared();
    let det = m.determinant();
    let disc = (fro2 * fro2 - 4.0 * det * det).max(0.0);
    ((fro2 - disc.sqrt()) / 2.0).max(0.0).sqrt()
}

fn check_invertible(a: &Mat2) -> Result<f64> {
    let det = a.determinant();
    let scale = a.norm_squared();
    if !det.is_finite() || det.abs() <= 1e-12 * scale || scale == 0.0 {
        return Err(Error::SingularBasis { det });
    }
    Ok(det)
}

/// `2π A^{-T}`.
pub fn reciprocal_basis(a: &Mat2) -> Result<Mat2> {
    check_invertible(a)?;
    let inv = a.try_inverse().ok_or(Error::SingularBasis {
        det: a.determinant(),
    })?;
    Ok(inv.transpose() * (2.0 * PI))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeBasis {
    direct: Mat2,
    reciprocal: Mat2,
}

impl LatticeBasis {
    pub fn new(direct: Mat2) -> Result<Self> {
        let reciprocal = reciprocal_basis(&direct)?;
        Ok(Self { direct, reciprocal })
    }

    pub fn from_vectors(a1: Vec2, a2: Vec2) -> Result<Self> {
        Self::new(Mat2::from_columns(&[a1, a2]))
    }

    /// Triangular lattice with `a1 = (a, 0)` and `a2 = (a/2, √3 a/2)`.
    pub fn hexagonal(a: f64) -> Result<Self> {
        Self::from_vectors(
            Vec2::new(a, 0.0),
            Vec2::new(0.5 * a, 0.5 * 3f64.sqrt() * a),
        )
    }

    pub fn square(a: f64) -> Result<Self> {
        Self::from_vectors(Vec2::new(a, 0.0), Vec2::new(0.0, a))
    }

    pub fn rotated(&self, angle: f64) -> Result<Self> {
        Self::new(rotation(angle) * self.direct)
    }

    pub fn direct(&self) -> &Mat2 {
        &self.direct
    }

    pub fn reciprocal(&self) -> &Mat2 {
        &self.reciprocal
    }

    /// `|Γ|`, area of the real-space unit cell in Å².
    pub fn cell_area(&self) -> f64 {
        self.direct.determinant().abs()
    }

    /// `|Γ*|`, area of the reciprocal cell in Å⁻².
    pub fn reciprocal_cell_area(&self) -> f64 {
        self.reciprocal.determinant().abs()
    }

    pub fn point(&self, n: [i64; 2]) -> Vec2 {
        self.direct * Vec2::new(n[0] as f64, n[1] as f64)
    }

    pub fn reciprocal_point(&self, n: [i64; 2]) -> Vec2 {
        self.reciprocal * Vec2::new(n[0] as f64, n[1] as f64)
    }

    /// Fractional coordinates of `q` with respect to the reciprocal basis.
    pub fn reciprocal_frac(&self, q: Vec2) -> Vec2 {
        self.direct.transpose() * q / (2.0 * PI)
    }

    /// Fractional coordinates of `x` with respect to the direct basis.
    pub fn direct_frac(&self, x: Vec2) -> Vec2 {
        self.reciprocal.transpose() * x / (2.0 * PI)
    }
}

/// Reduces `f` into `[0,1)`, mapping values that round up to 1 back to 0.
pub fn wrap_unit(f: f64) -> f64 {
    let w = f - f.floor();
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

/// Maps `x` into the half-open cell spanned by the columns of `basis`.
pub fn mod_cell(basis: &Mat2, x: Vec2) -> Result<Vec2> {
    check_invertible(basis)?;
    let inv = basis.try_inverse().ok_or(Error::SingularBasis {
        det: basis.determinant(),
    })?;
    let f = inv * x;
    Ok(basis * Vec2::new(wrap_unit(f[0]), wrap_unit(f[1])))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticePoint {
    pub n: [i64; 2],
    pub x: Vec2,
}

/// All points `B n` within distance `r` of `center`, ordered lexicographically by `n`.
pub fn lattice_disk(basis: &Mat2, center: Vec2, r: f64) -> Result<Vec<LatticePoint>> {
    if !(r >= 0.0) || !r.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "disk radius must be finite and non-negative, got {r}"
        )));
    }
    check_invertible(basis)?;
    let inv = basis.try_inverse().ok_or(Error::SingularBasis {
        det: basis.determinant(),
    })?;
    let c = inv * center;
    let reach = |row: usize| r * inv.row(row).norm();
    let (lo0, hi0) = ((c[0] - reach(0)).floor() as i64, (c[0] + reach(0)).ceil() as i64);
    let (lo1, hi1) = ((c[1] - reach(1)).floor() as i64, (c[1] + reach(1)).ceil() as i64);
    let tol = 1e-12 * r.max(1.0);
    let mut out = Vec::new();
    for n0 in lo0..=hi0 {
        for n1 in lo1..=hi1 {
            let x = basis * Vec2::new(n0 as f64, n1 as f64);
            if (x - center).norm() <= r + tol {
                out.push(LatticePoint { n: [n0, n1], x });
            }
        }
    }
    Ok(out)
}

/// Orbital counts per layer with contiguous, disjoint global index ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OrbitalLayout {
    counts: [usize; 2],
}

impl OrbitalLayout {
    pub fn new(n1: usize, n2: usize) -> Result<Self> {
        if n1 == 0 || n2 == 0 {
            return Err(Error::InvalidArgument(
                "each layer needs at least one orbital".into(),
            ));
        }
        Ok(Self { counts: [n1, n2] })
    }

    pub fn count(&self, layer: Layer) -> usize {
        self.counts[layer.index()]
    }

    pub fn total(&self) -> usize {
        self.counts[0] + self.counts[1]
    }

    pub fn range(&self, layer: Layer) -> std::ops::Range<usize> {
        match layer {
            Layer::One => 0..self.counts[0],
            Layer::Two => self.counts[0]..self.total(),
        }
    }
}

/// Geometry of an incommensurate bilayer and its moiré reciprocal cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BilayerGeometry {
    layers: [LatticeBasis; 2],
    twist: f64,
    theta_param: f64,
    moire_recip: Mat2,
    mu_theta: f64,
}

impl BilayerGeometry {
    /// Builds the geometry from two arbitrary layer bases.
    pub fn new(layer1: LatticeBasis, layer2: LatticeBasis) -> Result<Self> {
        let inv1t = layer1.reciprocal / (2.0 * PI);
        let inv2t = layer2.reciprocal / (2.0 * PI);
        let diff = inv1t - inv2t;
        let det = diff.determinant();
        if det.abs() < 1e-14 {
            return Err(Error::DegenerateMoire(format!(
                "|det(A1^-T - A2^-T)| = {:e}",
                det.abs()
            )));
        }
        // Identical lattices (e.g. a twist by a symmetry angle) have no moiré.
        let rel = layer2.direct.try_inverse().unwrap() * layer1.direct;
        if rel.iter().all(|v| (v - v.round()).abs() < 1e-9) && rel.determinant().round().abs() == 1.0 {
            return Err(Error::DegenerateMoire(
                "layer 1 is a relabelling of layer 2".into(),
            ));
        }
        let theta_param = 2.0 * PI * spectral_norm(&diff);
        let moire_recip = diff * (2.0 * PI);
        let a1 = layer1.direct.column(0);
        let a2 = layer2.direct.column(0);
        let twist = (a2[0] * a1[1] - a2[1] * a1[0]).atan2(a2.dot(&a1));
        let mu_theta = mu_theta(&[layer1, layer2]);
        Ok(Self {
            layers: [layer1, layer2],
            twist,
            theta_param,
            moire_recip,
            mu_theta,
        })
    }

    pub fn layer(&self, layer: Layer) -> &LatticeBasis {
        &self.layers[layer.index()]
    }

    pub fn twist(&self) -> f64 {
        self.twist
    }

    /// `θ = 2π ‖A1^{-T} − A2^{-T}‖₂` in Å⁻¹.
    pub fn theta_param(&self) -> f64 {
        self.theta_param
    }

    /// Basis of the moiré reciprocal cell `Λ*`.
    pub fn moire_recip(&self) -> &Mat2 {
        &self.moire_recip
    }

    pub fn moire_cell_area(&self) -> f64 {
        self.moire_recip.determinant().abs()
    }

    /// Hop-distance scale used for connectivity in momentum space.
    pub fn mu_theta(&self) -> f64 {
        self.mu_theta
    }

    /// `ν = (|A1||Γ2| + |A2||Γ1|)^{-1}`.
    pub fn nu_real(&self, orbitals: &OrbitalLayout) -> f64 {
        1.0 / (orbitals.count(Layer::One) as f64 * self.layers[1].cell_area()
            + orbitals.count(Layer::Two) as f64 * self.layers[0].cell_area())
    }

    /// `ν* = (|A1||Γ1*| + |A2||Γ2*|)^{-1}`.
    pub fn nu_momentum(&self, orbitals: &OrbitalLayout) -> f64 {
        1.0 / (orbitals.count(Layer::One) as f64 * self.layers[0].reciprocal_cell_area()
            + orbitals.count(Layer::Two) as f64 * self.layers[1].reciprocal_cell_area())
    }
}

/// Layer 1 is `R(twist)·A`, layer 2 is `A`.
pub fn twist_bilayer(a: &Mat2, twist: f64) -> Result<BilayerGeometry> {
    let base = LatticeBasis::new(*a)?;
    let mut geom = BilayerGeometry::new(base.rotated(twist)?, base)?;
    geom.twist = twist;
    Ok(geom)
}

fn mu_theta(layers: &[LatticeBasis; 2]) -> f64 {
    let mut longest_edge: f64 = 0.0;
    let mut longest_diag: f64 = 0.0;
    for basis in layers {
        let b1 = basis.reciprocal.column(0).into_owned();
        let mut b2 = basis.reciprocal.column(1).into_owned();
        if b1.dot(&b2) < 0.0 {
            b2 = -b2;
        }
        longest_edge = longest_edge.max(b1.norm()).max(b2.norm());
        longest_diag = longest_diag.max((b1 + b2).norm());
    }
    0.5 * (longest_edge + longest_diag)
}
