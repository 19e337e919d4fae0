//! JSON run configuration.
//!
//! Lengths are in Å, energies in eV, momenta in Å⁻¹ and angles in degrees.
//! Every section except `geometry` may be omitted; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{twist_bilayer, BilayerGeometry, LatticeBasis, Vec2};
use crate::linalg::c64;
use crate::realspace::RealParams;
use crate::region::RegionSpec;
use crate::study::{cluster_radius, kpm_order, lambda_points};
use crate::tb_model::{HopBlock, HoppingModel, InterHoppingProfile, IntraHoppingTable, RadialProfile};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub energies: EnergyGrid,
    /// Energy window `J` for the adaptive momentum method.
    #[serde(default = "default_window")]
    pub window: [f64; 2],
    #[serde(default)]
    pub real: RealConfig,
    #[serde(default)]
    pub momentum: MomentumConfig,
    #[serde(default)]
    pub naive: NaiveConfig,
    #[serde(default)]
    pub monolayer: MonolayerConfig,
    #[serde(default)]
    pub lemma: LemmaConfig,
    #[serde(default)]
    pub study: StudyConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub workers: Option<usize>,
    /// Only consumed by randomised model generation in tests.
    #[serde(default)]
    pub seed: u64,
}

fn default_window() -> [f64; 2] {
    [-0.25, 0.25]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub lattice: LatticeConfig,
    pub twist_deg: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LatticeConfig {
    Hexagonal { a: f64 },
    Square { a: f64 },
    /// Columns `a1`, `a2` of the layer-1 lattice matrix.
    Matrix { a1: [f64; 2], a2: [f64; 2] },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_intra")]
    pub intra: IntraConfig,
    /// Layer-2 table; the layer-1 table is reused when absent.
    #[serde(default)]
    pub intra2: Option<IntraConfig>,
    #[serde(default = "default_inter")]
    pub inter: InterConfig,
    /// Fixed `η`; estimated from the interlayer profile when absent.
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default = "default_eta_grid")]
    pub eta_grid: usize,
    #[serde(default = "default_eta_probe")]
    pub eta_probe: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            intra: default_intra(),
            intra2: None,
            inter: default_inter(),
            eta: None,
            eta_grid: default_eta_grid(),
            eta_probe: default_eta_probe(),
        }
    }
}

fn default_intra() -> IntraConfig {
    IntraConfig::Graphene { t: -2.7 }
}

fn default_inter() -> InterConfig {
    InterConfig::Gaussian { w: 0.165, sigma: 0.8 }
}

fn default_eta_grid() -> usize {
    6
}

fn default_eta_probe() -> f64 {
    10.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum IntraConfig {
    /// Nearest-neighbour honeycomb with orbitals at fractional 0 and (1/3, 1/3).
    Graphene { t: f64 },
    /// Single-orbital nearest-neighbour model.
    Square { t: f64 },
    Table {
        /// Fractional in-cell positions.
        orbitals: Vec<[f64; 2]>,
        entries: Vec<HopEntry>,
        /// Add `h(−R) = h(R)†` for every listed `R ≠ 0`.
        #[serde(default)]
        hermitian_partners: bool,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HopEntry {
    pub n: [i64; 2],
    /// Row-major real parts.
    pub re: Vec<f64>,
    #[serde(default)]
    pub im: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InterConfig {
    Gaussian { w: f64, sigma: f64 },
    Exponential { w: f64, lambda: f64 },
    Zero,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EnergyGrid {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Default for EnergyGrid {
    fn default() -> Self {
        Self {
            min: -0.25,
            max: 0.25,
            count: 51,
        }
    }
}

impl EnergyGrid {
    pub fn values(&self) -> Vec<f64> {
        match self.count {
            0 => Vec::new(),
            1 => vec![self.min],
            n => (0..n)
                .map(|i| self.min + (self.max - self.min) * i as f64 / (n - 1) as f64)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RealConfig {
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    /// Cluster radius; the schedule value `r_p` when absent.
    #[serde(default)]
    pub r: Option<f64>,
    /// KPM order; `round(E_b π / κ)` when absent.
    #[serde(default)]
    pub order: Option<usize>,
    #[serde(default = "default_n_b")]
    pub n_b: usize,
    #[serde(default = "default_e_b")]
    pub e_b: f64,
}

impl Default for RealConfig {
    fn default() -> Self {
        Self {
            kappa: default_kappa(),
            r: None,
            order: None,
            n_b: default_n_b(),
            e_b: default_e_b(),
        }
    }
}

impl RealConfig {
    pub fn params(&self) -> RealParams {
        let order = self.order.unwrap_or_else(|| kpm_order(self.kappa, self.e_b));
        RealParams {
            kappa: self.kappa,
            r: self.r.unwrap_or_else(|| cluster_radius(order)),
            order,
            n_b: self.n_b,
            e_b: self.e_b,
        }
    }
}

fn default_kappa() -> f64 {
    0.05
}

fn default_n_b() -> usize {
    3
}

fn default_e_b() -> f64 {
    13.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MomentumConfig {
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Dilation radius in units of `θ`.
    #[serde(default = "default_r")]
    pub r: f64,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    /// `Λ*` grid points per axis; `N_κ` from the schedule when absent.
    #[serde(default)]
    pub n_lambda: Option<usize>,
    #[serde(default = "default_max_dofs")]
    pub max_dofs: usize,
}

impl Default for MomentumConfig {
    fn default() -> Self {
        Self {
            kappa: default_kappa(),
            beta: default_beta(),
            r: default_r(),
            resolution: default_resolution(),
            n_lambda: None,
            max_dofs: default_max_dofs(),
        }
    }
}

impl MomentumConfig {
    pub fn n_lambda(&self) -> usize {
        self.n_lambda.unwrap_or_else(|| lambda_points(self.kappa))
    }
}

fn default_beta() -> f64 {
    0.5
}

fn default_r() -> f64 {
    1.0
}

fn default_resolution() -> usize {
    256
}

fn default_max_dofs() -> usize {
    crate::momentum::DEFAULT_MAX_DOFS
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NaiveConfig {
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    /// Circular cutoff `|R*| ≤ r` in Å⁻¹.
    #[serde(default = "default_naive_r")]
    pub r: f64,
    #[serde(default = "default_n_q")]
    pub n_q: usize,
}

impl Default for NaiveConfig {
    fn default() -> Self {
        Self {
            kappa: default_kappa(),
            r: default_naive_r(),
            n_q: default_n_q(),
        }
    }
}

fn default_naive_r() -> f64 {
    1.0
}

fn default_n_q() -> usize {
    64
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MonolayerConfig {
    #[serde(default = "default_layer")]
    pub layer: u8,
    /// Band path corners in fractional reciprocal coordinates of the layer.
    #[serde(default = "default_path")]
    pub path: Vec<[f64; 2]>,
    #[serde(default = "default_points")]
    pub points_per_segment: usize,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    /// Brillouin-zone grid points per axis for the DoS.
    #[serde(default = "default_bz_grid")]
    pub grid: usize,
}

impl Default for MonolayerConfig {
    fn default() -> Self {
        Self {
            layer: default_layer(),
            path: default_path(),
            points_per_segment: default_points(),
            kappa: default_kappa(),
            grid: default_bz_grid(),
        }
    }
}

impl MonolayerConfig {
    /// Corners joined by straight segments, each sampled at
    /// `points_per_segment` points with the final corner appended.
    pub fn path_points(&self, basis: &LatticeBasis) -> Vec<Vec2> {
        let corners: Vec<Vec2> = self.path.iter().map(|c| basis.reciprocal() * Vec2::new(c[0], c[1])).collect();
        let n = self.points_per_segment.max(1);
        let mut out = Vec::new();
        for w in corners.windows(2) {
            for i in 0..n {
                out.push(w[0] + (w[1] - w[0]) * (i as f64 / n as f64));
            }
        }
        out.extend(corners.last());
        out
    }
}

fn default_bz_grid() -> usize {
    300
}

fn default_layer() -> u8 {
    1
}

/// Γ → K → M → Γ for the hexagonal basis.
fn default_path() -> Vec<[f64; 2]> {
    vec![[0.0, 0.0], [2.0 / 3.0, 1.0 / 3.0], [0.5, 0.5], [0.0, 0.0]]
}

fn default_points() -> usize {
    60
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LemmaConfig {
    #[serde(default = "default_shift")]
    pub b: [f64; 2],
    #[serde(default = "default_layer")]
    pub layer: u8,
    /// Fractional coordinates in the layer's reciprocal cell.
    #[serde(default = "default_q")]
    pub q: [f64; 2],
    /// `(r_real Å, r_mom Å⁻¹)` pairs.
    #[serde(default = "default_truncations")]
    pub truncations: Vec<[f64; 2]>,
}

impl Default for LemmaConfig {
    fn default() -> Self {
        Self {
            b: default_shift(),
            layer: default_layer(),
            q: default_q(),
            truncations: default_truncations(),
        }
    }
}

fn default_shift() -> [f64; 2] {
    [0.3, 0.5]
}

fn default_q() -> [f64; 2] {
    [0.21, 0.37]
}

fn default_truncations() -> Vec<[f64; 2]> {
    vec![[20.0, 6.0], [20.0, 10.0], [20.0, 14.0], [20.0, 18.0]]
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    /// Run indices; `κ = (m+1)/100`.
    #[serde(default = "default_m")]
    pub m: Vec<u32>,
    /// Energies at which errors are reported; must lie in `window`.
    #[serde(default = "default_marked")]
    pub marked_energies: Vec<f64>,
    #[serde(default = "default_n_b")]
    pub real_n_b: usize,
    /// Cluster radius as a multiple of `r_p`.
    #[serde(default = "default_factor")]
    pub real_r_factor: f64,
    #[serde(default = "default_r")]
    pub momentum_r: f64,
    #[serde(default)]
    pub reference: ReferenceConfig,
    /// When false every wall-clock column is written as zero.
    #[serde(default = "default_true")]
    pub record_wall_time: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            m: default_m(),
            marked_energies: default_marked(),
            real_n_b: default_n_b(),
            real_r_factor: default_factor(),
            momentum_r: default_r(),
            reference: ReferenceConfig::default(),
            record_wall_time: true,
        }
    }
}

fn default_m() -> Vec<u32> {
    vec![1, 2, 3, 4]
}

fn default_marked() -> Vec<f64> {
    vec![-0.2, -0.1, 0.1, 0.2]
}

fn default_factor() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

/// The adaptive momentum run every study run is compared against.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    /// `κ_ref = κ_min / kappa_divisor`.
    #[serde(default = "default_divisor")]
    pub kappa_divisor: f64,
    /// `r_ref = r_factor · momentum_r`.
    #[serde(default = "default_ref_factor")]
    pub r_factor: f64,
    /// `Λ*` points per axis; `N_κ(κ_min)` when absent.
    #[serde(default)]
    pub n_lambda: Option<usize>,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            kappa_divisor: default_divisor(),
            r_factor: default_ref_factor(),
            n_lambda: None,
        }
    }
}

fn default_divisor() -> f64 {
    4.0
}

fn default_ref_factor() -> f64 {
    2.0
}

impl EngineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !self.geometry.twist_deg.is_finite() {
            return bad("twist_deg must be finite".into());
        }
        let [lo, hi] = self.window;
        if !(lo <= hi) {
            return bad(format!("window [{lo}, {hi}] is empty"));
        }
        let e = &self.energies;
        if !(e.min <= e.max) || !e.min.is_finite() || !e.max.is_finite() {
            return bad(format!("energy grid [{}, {}] is invalid", e.min, e.max));
        }
        for (name, k) in [
            ("real", self.real.kappa),
            ("momentum", self.momentum.kappa),
            ("naive", self.naive.kappa),
            ("monolayer", self.monolayer.kappa),
        ] {
            if !(k > 0.0) || !k.is_finite() {
                return bad(format!("{name}.kappa must be positive, got {k}"));
            }
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        if !matches!(self.monolayer.layer, 1 | 2) || !matches!(self.lemma.layer, 1 | 2) {
            return bad("layer numbers must be 1 or 2".into());
        }
        if self.study.m.is_empty() {
            return bad("study.m must list at least one run".into());
        }
        if let Some(eta) = self.model.eta {
            if !(eta >= 0.0) {
                return bad(format!("model.eta must be non-negative, got {eta}"));
            }
        }
        Ok(())
    }

    pub fn build_geometry(&self) -> Result<BilayerGeometry> {
        let basis = self.geometry.lattice.basis()?;
        twist_bilayer(basis.direct(), self.geometry.twist_deg.to_radians())
    }

    /// The hopping model with `η` fixed from the config or estimated.
    pub fn build_model(&self, geometry: &BilayerGeometry) -> Result<HoppingModel> {
        let basis = *geometry.layer(crate::geometry::Layer::One);
        let t1 = self.model.intra.table(basis)?;
        let t2 = match &self.model.intra2 {
            Some(c) => c.table(basis)?,
            None => t1.clone(),
        };
        let inter = self.model.inter.profile(t1.n_orbitals(), t2.n_orbitals())?;
        let mut model = HoppingModel::new(geometry, &t1, &t2, inter)?;
        match self.model.eta {
            Some(eta) => model.set_eta(eta),
            None => {
                let eta = model.estimate_eta(geometry, self.model.eta_grid, self.model.eta_probe)?;
                info!("estimated η = {eta:.6} eV");
            }
        }
        Ok(model)
    }

    pub fn region_spec(&self) -> RegionSpec {
        RegionSpec {
            window: (self.window[0], self.window[1]),
            beta: self.momentum.beta,
            r: self.momentum.r,
            resolution: self.momentum.resolution,
        }
    }
}

impl LatticeConfig {
    pub fn basis(&self) -> Result<LatticeBasis> {
        match *self {
            LatticeConfig::Hexagonal { a } => LatticeBasis::hexagonal(positive(a, "a")?),
            LatticeConfig::Square { a } => LatticeBasis::square(positive(a, "a")?),
            LatticeConfig::Matrix { a1, a2 } => {
                LatticeBasis::from_vectors(Vec2::new(a1[0], a1[1]), Vec2::new(a2[0], a2[1]))
            }
        }
    }
}

fn positive(x: f64, name: &str) -> Result<f64> {
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Config(format!("{name} must be positive, got {x}")))
    }
}

impl IntraConfig {
    /// The table on `basis`. Named models need the matching lattice shape.
    pub fn table(&self, basis: LatticeBasis) -> Result<IntraHoppingTable> {
        let a = basis.direct().column(0).norm();
        let shape = |name: &str| Error::Config(format!("the {name} model needs a {name} lattice"));
        match self {
            IntraConfig::Graphene { t } => IntraHoppingTable::graphene_nn(*t, a)?
                .rebased(basis)
                .map_err(|_| shape("hexagonal")),
            IntraConfig::Square { t } => IntraHoppingTable::square_nn(*t, a)?
                .rebased(basis)
                .map_err(|_| shape("square")),
            IntraConfig::Table {
                orbitals,
                entries,
                hermitian_partners,
            } => {
                let m = orbitals.len();
                let blocks = entries
                    .iter()
                    .map(|e| {
                        if e.re.len() != m * m || !(e.im.is_empty() || e.im.len() == m * m) {
                            return Err(Error::Config(format!(
                                "hopping block at {:?} must have {} entries",
                                e.n,
                                m * m
                            )));
                        }
                        let block = (0..m * m)
                            .map(|k| c64::new(e.re[k], e.im.get(k).copied().unwrap_or(0.0)))
                            .collect();
                        Ok(HopBlock { n: e.n, block })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let orbitals = orbitals.iter().map(|o| Vec2::new(o[0], o[1])).collect();
                if *hermitian_partners {
                    IntraHoppingTable::with_hermitian_partners(basis, orbitals, blocks)
                } else {
                    IntraHoppingTable::new(basis, orbitals, blocks)
                }
            }
        }
    }
}

impl InterConfig {
    pub fn profile(&self, n1: usize, n2: usize) -> Result<InterHoppingProfile> {
        match *self {
            InterConfig::Gaussian { w, sigma } => InterHoppingProfile::gaussian(n1, n2, w, positive(sigma, "sigma")?),
            InterConfig::Exponential { w, lambda } => {
                InterHoppingProfile::radial(n1, n2, w, RadialProfile::exponential(positive(lambda, "lambda")?))
            }
            InterConfig::Zero => Ok(InterHoppingProfile::zero(n1, n2)),
        }
    }
}
