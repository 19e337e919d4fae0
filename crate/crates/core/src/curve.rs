//! Sampled density-of-states curves with run metadata.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Real,
    MomentumNaive,
    MomentumAdaptive,
    Monolayer,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Real => "real",
            Method::MomentumNaive => "momentum-naive",
            Method::MomentumAdaptive => "momentum",
            Method::Monolayer => "monolayer",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        [
            Method::Real,
            Method::MomentumNaive,
            Method::MomentumAdaptive,
            Method::Monolayer,
        ]
        .into_iter()
        .find(|m| m.tag() == tag)
    }
}

/// Wall-clock seconds spent in one phase of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTime {
    pub phase: String,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DosCurve {
    pub method: Method,
    pub energies: Vec<f64>,
    pub values: Vec<f64>,
    pub kappa: f64,
    /// Truncation radius: Å for the real-space method, Å⁻¹ for the circular
    /// momentum cutoff, dilation steps for the adaptive method.
    pub r: f64,
    /// Quadrature points per axis (shift grid or `Λ*` grid).
    pub grid: usize,
    pub dof_count: usize,
    pub wall_s: f64,
    pub phases: Vec<PhaseTime>,
}

/// DoS values may dip below zero by rounding (or, for KPM without a damping
/// kernel, by a tiny Gibbs undershoot); anything beyond this is an error.
pub const NEGATIVITY_TOL: f64 = -1e-10;

impl DosCurve {
    pub fn new(method: Method, energies: Vec<f64>, values: Vec<f64>, kappa: f64) -> Result<Self> {
        if energies.len() != values.len() {
            return Err(Error::InvalidArgument(format!(
                "{} energies but {} values",
                energies.len(),
                values.len()
            )));
        }
        Ok(Self {
            method,
            energies,
            values,
            kappa,
            r: 0.0,
            grid: 0,
            dof_count: 0,
            wall_s: 0.0,
            phases: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn add_phase(&mut self, phase: &str, wall_s: f64) {
        if let Some(p) = self.phases.iter_mut().find(|p| p.phase == phase) {
            p.wall_s += wall_s;
        } else {
            self.phases.push(PhaseTime {
                phase: phase.to_string(),
                wall_s,
            });
        }
    }
}

/// `max_i |a_i − b_i| / max_i |b_i|`.
pub fn relative_sup_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff / scale
    }
}
