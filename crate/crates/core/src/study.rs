//! Convergence and cost study over the κ schedule.
//!
//! Run `m` uses `κ = (m+1)/100` with KPM order `p = round(E_b π/κ)`, cluster
//! radius `r_p = (3/200) p log p` Å and `N_κ = ⌈(2/3) κ⁻¹ log κ⁻¹⌉` points
//! per axis of the `Λ*` grid. Every run is compared with a sharper adaptive
//! momentum reference.

use std::path::Path;

use log::info;

use crate::config::EngineConfig;
use crate::curve::{DosCurve, Method};
use crate::error::{Error, Result};
use crate::geometry::BilayerGeometry;
use crate::io::{write_convergence_csv, write_dos_csv_many, write_timing_csv, ConvergenceRow, TimingRow};
use crate::momentum::dos_momentum_adaptive;
use crate::realspace::{dos_real, RealParams};
use crate::region::RegionSpec;
use crate::tb_model::HoppingModel;

/// Momentum cutoff in dilation steps, recorded with each run.
pub const R_KAPPA: f64 = 7.0;
/// Shift-grid points per axis of the full-scale schedule.
pub const N_P: usize = 10;

pub fn kappa_of(m: u32) -> f64 {
    (m as f64 + 1.0) / 100.0
}

pub fn kpm_order(kappa: f64, e_b: f64) -> usize {
    ((e_b * std::f64::consts::PI / kappa).round() as usize).max(2)
}

pub fn cluster_radius(order: usize) -> f64 {
    let p = order as f64;
    0.015 * p * p.ln()
}

pub fn lambda_points(kappa: f64) -> usize {
    let x = (2.0 / 3.0) * (1.0 / kappa) * (1.0 / kappa).ln();
    (x.ceil() as usize).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleEntry {
    pub m: u32,
    pub kappa: f64,
    pub order: usize,
    pub r_p: f64,
    pub n_kappa: usize,
    pub r_kappa: f64,
    pub n_p: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudySchedule {
    pub e_b: f64,
    pub entries: Vec<ScheduleEntry>,
}

impl StudySchedule {
    /// Entries are sorted by decreasing κ (increasing cost).
    pub fn new(ms: &[u32], e_b: f64) -> Result<Self> {
        if ms.is_empty() {
            return Err(Error::InvalidArgument("the schedule needs at least one run".into()));
        }
        let mut ms = ms.to_vec();
        ms.sort_unstable();
        ms.dedup();
        let entries = ms
            .iter()
            .rev()
            .map(|&m| {
                let kappa = kappa_of(m);
                let order = kpm_order(kappa, e_b);
                ScheduleEntry {
                    m,
                    kappa,
                    order,
                    r_p: cluster_radius(order),
                    n_kappa: lambda_points(kappa),
                    r_kappa: R_KAPPA,
                    n_p: N_P,
                }
            })
            .collect();
        Ok(Self { e_b, entries })
    }

    pub fn kappa_min(&self) -> f64 {
        self.entries.iter().map(|e| e.kappa).fold(f64::INFINITY, f64::min)
    }
}

/// Least-squares slope of `ln y` against `ln x` over the positive pairs;
/// `None` with fewer than two usable points.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0 && a.is_finite() && b.is_finite())
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSlopes {
    pub method: Method,
    pub error: Option<f64>,
    pub cost: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct StudyReport {
    pub schedule: StudySchedule,
    pub reference: Option<DosCurve>,
    pub curves: Vec<DosCurve>,
    pub convergence: Vec<ConvergenceRow>,
    pub timing: Vec<TimingRow>,
    pub slopes: Vec<MethodSlopes>,
}

impl StudyReport {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut curves = self.curves.clone();
        curves.extend(self.reference.clone());
        write_dos_csv_many(&dir.join("dos.csv"), &curves)?;
        write_timing_csv(&dir.join("timing.csv"), &self.timing)?;
        if self.reference.is_some() {
            write_convergence_csv(&dir.join("convergence.csv"), &self.convergence)?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for e in &self.schedule.entries {
            s += &format!(
                "m={} κ={:.3} p={} r_p={:.1} Å N_κ={} r_κ={} N_p={}\n",
                e.m, e.kappa, e.order, e.r_p, e.n_kappa, e.r_kappa, e.n_p
            );
        }
        let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.3}"));
        for sl in &self.slopes {
            s += &format!(
                "{}: error slope {} cost slope {}\n",
                sl.method.tag(),
                fmt(sl.error),
                fmt(sl.cost)
            );
        }
        s
    }
}

struct Plan<'a> {
    cfg: &'a EngineConfig,
    schedule: StudySchedule,
}

impl Plan<'_> {
    fn real_params(&self, e: &ScheduleEntry) -> RealParams {
        RealParams {
            kappa: e.kappa,
            r: self.cfg.study.real_r_factor * e.r_p,
            order: e.order,
            n_b: self.cfg.study.real_n_b,
            e_b: self.schedule.e_b,
        }
    }

    fn spec(&self, r: f64) -> RegionSpec {
        RegionSpec {
            r,
            ..self.cfg.region_spec()
        }
    }

    fn runs(&self, geometry: &BilayerGeometry, model: &HoppingModel, energies: &[f64]) -> Result<Vec<DosCurve>> {
        let mut curves = Vec::new();
        let spec = self.spec(self.cfg.study.momentum_r);
        for e in &self.schedule.entries {
            info!("κ = {:.3}: real space, p = {}, r = {:.1} Å", e.kappa, e.order, self.real_params(e).r);
            let mut real = dos_real(geometry, model, energies, &self.real_params(e))?;
            info!("κ = {:.3}: real space took {:.2} s", e.kappa, real.wall_s);
            info!("κ = {:.3}: momentum space, N_κ = {}", e.kappa, e.n_kappa);
            let mut mom = dos_momentum_adaptive(
                geometry,
                model,
                &spec,
                energies,
                e.kappa,
                e.n_kappa,
                self.cfg.momentum.max_dofs,
            )?;
            info!("κ = {:.3}: momentum space took {:.2} s", e.kappa, mom.wall_s);
            if !self.cfg.study.record_wall_time {
                clear_times(&mut real);
                clear_times(&mut mom);
            }
            curves.push(real);
            curves.push(mom);
        }
        Ok(curves)
    }
}

fn clear_times(c: &mut DosCurve) {
    c.wall_s = 0.0;
    for p in &mut c.phases {
        p.wall_s = 0.0;
    }
}

fn slopes(curves: &[DosCurve], errors: &[(Method, f64, f64)]) -> Vec<MethodSlopes> {
    [Method::Real, Method::MomentumAdaptive]
        .into_iter()
        .map(|method| {
            let runs: Vec<&DosCurve> = curves.iter().filter(|c| c.method == method).collect();
            let kappas: Vec<f64> = runs.iter().map(|c| c.kappa).collect();
            let walls: Vec<f64> = runs.iter().map(|c| c.wall_s).collect();
            let errs: Vec<f64> = kappas
                .iter()
                .map(|k| {
                    errors
                        .iter()
                        .find(|(m, kk, _)| *m == method && kk == k)
                        .map_or(f64::NAN, |e| e.2)
                })
                .collect();
            MethodSlopes {
                method,
                error: loglog_slope(&kappas, &errs),
                cost: loglog_slope(&kappas, &walls),
            }
        })
        .collect()
}

fn timing_rows(curves: &[DosCurve]) -> Vec<TimingRow> {
    curves.iter().flat_map(TimingRow::from_curve).collect()
}

/// Both methods at every scheduled κ, evaluated at the marked energies and
/// compared pointwise with the reference.
pub fn run_converge_study(cfg: &EngineConfig, geometry: &BilayerGeometry, model: &HoppingModel) -> Result<StudyReport> {
    let schedule = StudySchedule::new(&cfg.study.m, cfg.real.e_b)?;
    let marked = &cfg.study.marked_energies;
    if marked.is_empty() {
        return Err(Error::Config("study.marked_energies is empty".into()));
    }
    let kappa_ref = schedule.kappa_min() / cfg.study.reference.kappa_divisor;
    let r_ref = cfg.study.reference.r_factor * cfg.study.momentum_r;
    if !(kappa_ref < schedule.kappa_min()) || !(kappa_ref > 0.0) {
        return Err(Error::WeakReference(format!(
            "κ_ref = {kappa_ref} is not below the smallest study κ = {}",
            schedule.kappa_min()
        )));
    }
    if !(r_ref >= cfg.study.momentum_r) {
        return Err(Error::WeakReference(format!(
            "r_ref = {r_ref} is below the study cutoff r = {}",
            cfg.study.momentum_r
        )));
    }
    let plan = Plan { cfg, schedule };
    let n_ref = cfg
        .study
        .reference
        .n_lambda
        .unwrap_or_else(|| lambda_points(plan.schedule.kappa_min()));
    info!("reference: κ = {kappa_ref}, r = {r_ref}, N = {n_ref}");
    let mut reference = dos_momentum_adaptive(
        geometry,
        model,
        &plan.spec(r_ref),
        marked,
        kappa_ref,
        n_ref,
        cfg.momentum.max_dofs,
    )?;
    if !cfg.study.record_wall_time {
        clear_times(&mut reference);
    }
    let curves = plan.runs(geometry, model, marked)?;
    let mut convergence = Vec::new();
    let mut mean_errors = Vec::new();
    for c in &curves {
        let mut sum = 0.0;
        for (k, &e) in marked.iter().enumerate() {
            let rel_error = (c.values[k] - reference.values[k]).abs() / reference.values[k].abs();
            sum += rel_error;
            convergence.push(ConvergenceRow {
                kappa: c.kappa,
                energy: e,
                method: c.method,
                rel_error,
                wall_s: c.wall_s,
            });
        }
        mean_errors.push((c.method, c.kappa, sum / marked.len() as f64));
    }
    let slopes = slopes(&curves, &mean_errors);
    Ok(StudyReport {
        timing: timing_rows(&curves),
        slopes,
        schedule: plan.schedule,
        reference: Some(reference),
        curves,
        convergence,
    })
}

/// Cost-only variant: no reference and no error columns.
pub fn run_bench(cfg: &EngineConfig, geometry: &BilayerGeometry, model: &HoppingModel) -> Result<StudyReport> {
    let schedule = StudySchedule::new(&cfg.study.m, cfg.real.e_b)?;
    let plan = Plan { cfg, schedule };
    let curves = plan.runs(geometry, model, &cfg.study.marked_energies)?;
    Ok(StudyReport {
        timing: timing_rows(&curves),
        slopes: slopes(&curves, &[]),
        schedule: plan.schedule,
        reference: None,
        curves,
        convergence: Vec::new(),
    })
}
