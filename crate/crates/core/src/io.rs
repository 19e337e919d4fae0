//! CSV emission and parsing for every table the engine produces.
//!
//! Floats are written with `{:.16e}` (17 significant digits) so that a
//! written-then-read value is bitwise identical. Non-finite values are
//! spelled `inf`, `-inf` and `NaN`, which `f64::from_str` accepts.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::curve::{DosCurve, Method};
use crate::error::{Error, Result};
use crate::geometry::{BilayerGeometry, Vec2};
use crate::monolayer::BandTable;
use crate::region::{MomentumDofSet, RegionMask};

pub const DOS_HEADER: &str = "energy_eV,dos,method,kappa_eV,r,dof_count,wall_s";
pub const BANDS_HEADER: &str = "qx,qy,band_index,energy_eV";
pub const REGION_HEADER: &str = "layer,frac_x,frac_y,Q_value,in_mask,component_id,wraps";
pub const DOFSET_HEADER: &str = "R*_x,R*_y,layer,orbital";
pub const CONVERGENCE_HEADER: &str = "kappa_eV,energy_eV,method,rel_error,wall_s";
pub const TIMING_HEADER: &str = "method,kappa_eV,phase,wall_s,dof_count";

pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

fn write_table(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |line: &str| -> std::io::Result<()> {
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")
    };
    put(header).map_err(|e| Error::io(path, e))?;
    for row in rows {
        put(&row).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Rows of a CSV file with the given header, split on commas.
fn read_table(path: &Path, header: &str) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let first = lines.next().ok_or_else(|| csv_err(path, "empty file"))?;
    if first != header {
        return Err(csv_err(path, &format!("expected header `{header}`, found `{first}`")));
    }
    let width = header.split(',').count();
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(str::to_string).collect();
        if fields.len() != width {
            return Err(csv_err(path, &format!("line {}: {} fields, expected {width}", k + 2, fields.len())));
        }
        rows.push(fields);
    }
    Ok(rows)
}

fn csv_err(path: &Path, msg: &str) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

fn parse<T: std::str::FromStr>(path: &Path, field: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| csv_err(path, &format!("cannot parse `{field}`")))
}

fn dos_rows(curve: &DosCurve) -> impl Iterator<Item = String> + '_ {
    curve.energies.iter().zip(&curve.values).map(move |(e, v)| {
        format!(
            "{},{},{},{},{},{},{}",
            fmt_f64(*e),
            fmt_f64(*v),
            curve.method.tag(),
            fmt_f64(curve.kappa),
            fmt_f64(curve.r),
            curve.dof_count,
            fmt_f64(curve.wall_s)
        )
    })
}

pub fn write_dos_csv(path: &Path, curve: &DosCurve) -> Result<()> {
    write_dos_csv_many(path, std::slice::from_ref(curve))
}

/// Several curves in one file; rows are told apart by method, κ and r.
pub fn write_dos_csv_many(path: &Path, curves: &[DosCurve]) -> Result<()> {
    write_table(path, DOS_HEADER, curves.iter().flat_map(dos_rows))
}

/// Groups consecutive rows sharing method, κ, r, dof count and wall time
/// back into curves. Phase timings and the quadrature grid are not stored.
pub fn read_dos_csv(path: &Path) -> Result<Vec<DosCurve>> {
    let mut out: Vec<DosCurve> = Vec::new();
    for f in read_table(path, DOS_HEADER)? {
        let method = Method::from_tag(&f[2]).ok_or_else(|| csv_err(path, &format!("unknown method `{}`", f[2])))?;
        let (e, v): (f64, f64) = (parse(path, &f[0])?, parse(path, &f[1])?);
        let (kappa, r): (f64, f64) = (parse(path, &f[3])?, parse(path, &f[4])?);
        let dofs: usize = parse(path, &f[5])?;
        let wall: f64 = parse(path, &f[6])?;
        let same = out.last().is_some_and(|c| {
            c.method == method
                && c.kappa.to_bits() == kappa.to_bits()
                && c.r.to_bits() == r.to_bits()
                && c.dof_count == dofs
                && c.wall_s.to_bits() == wall.to_bits()
        });
        if !same {
            let mut c = DosCurve::new(method, vec![], vec![], kappa)?;
            c.r = r;
            c.dof_count = dofs;
            c.wall_s = wall;
            out.push(c);
        }
        let c = out.last_mut().expect("pushed above");
        c.energies.push(e);
        c.values.push(v);
    }
    Ok(out)
}

pub fn write_bands_csv(path: &Path, bands: &BandTable) -> Result<()> {
    let rows = bands.rows.iter().flat_map(|(q, es)| {
        es.iter()
            .enumerate()
            .map(move |(n, e)| format!("{},{},{n},{}", fmt_f64(q.x), fmt_f64(q.y), fmt_f64(*e)))
    });
    write_table(path, BANDS_HEADER, rows)
}

pub fn read_bands_csv(path: &Path) -> Result<BandTable> {
    let mut table = BandTable::default();
    for f in read_table(path, BANDS_HEADER)? {
        let q = Vec2::new(parse(path, &f[0])?, parse(path, &f[1])?);
        let n: usize = parse(path, &f[2])?;
        let e: f64 = parse(path, &f[3])?;
        let fresh = table.rows.last().is_none_or(|(p, es)| *p != q || es.len() != n);
        if fresh {
            if n != 0 {
                return Err(csv_err(path, "band indices must start at 0 for each q"));
            }
            table.rows.push((q, Vec::new()));
        }
        table.rows.last_mut().expect("pushed above").1.push(e);
    }
    Ok(table)
}

/// One row per grid cell and layer. `Q_value` is the sup over the window
/// before dilation; `component_id` is −1 outside the dilated mask.
pub fn write_region_csv(path: &Path, mask: &RegionMask) -> Result<()> {
    let mut rows = Vec::new();
    for lm in &mask.layers {
        let n = lm.n;
        for cell in 0..n * n {
            let f = lm.frac(cell);
            let (id, wraps) = match lm.labels.ids[cell] {
                Some(c) => (c as i64, lm.labels.components[c as usize].wraps.iter().any(|&w| w)),
                None => (-1, false),
            };
            rows.push(format!(
                "{},{},{},{},{},{id},{}",
                lm.layer.number(),
                fmt_f64(f.x),
                fmt_f64(f.y),
                fmt_f64(lm.q_values[cell]),
                u8::from(lm.mask[cell]),
                u8::from(wraps)
            ));
        }
    }
    write_table(path, REGION_HEADER, rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionRow {
    pub layer: u8,
    pub frac: Vec2,
    pub q_value: f64,
    pub in_mask: bool,
    pub component: Option<u32>,
    pub wraps: bool,
}

pub fn read_region_csv(path: &Path) -> Result<Vec<RegionRow>> {
    read_table(path, REGION_HEADER)?
        .into_iter()
        .map(|f| {
            let id: i64 = parse(path, &f[5])?;
            Ok(RegionRow {
                layer: parse(path, &f[0])?,
                frac: Vec2::new(parse(path, &f[1])?, parse(path, &f[2])?),
                q_value: parse(path, &f[3])?,
                in_mask: parse::<u8>(path, &f[4])? != 0,
                component: u32::try_from(id).ok(),
                wraps: parse::<u8>(path, &f[6])? != 0,
            })
        })
        .collect()
}

/// Dofs of several anchored sets; positions are Cartesian `R*` in Å⁻¹.
pub fn write_dofset_csv(path: &Path, geometry: &BilayerGeometry, sets: &[MomentumDofSet]) -> Result<()> {
    let rows = sets.iter().flat_map(|s| {
        s.dofs.iter().map(|d| {
            let x = d.position(geometry);
            format!("{},{},{},{}", fmt_f64(x.x), fmt_f64(x.y), d.layer.number(), d.orbital)
        })
    });
    write_table(path, DOFSET_HEADER, rows)
}

pub fn read_dofset_csv(path: &Path) -> Result<Vec<(Vec2, u8, usize)>> {
    read_table(path, DOFSET_HEADER)?
        .into_iter()
        .map(|f| {
            Ok((
                Vec2::new(parse(path, &f[0])?, parse(path, &f[1])?),
                parse(path, &f[2])?,
                parse(path, &f[3])?,
            ))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub kappa: f64,
    pub energy: f64,
    pub method: Method,
    pub rel_error: f64,
    pub wall_s: f64,
}

pub fn write_convergence_csv(path: &Path, rows: &[ConvergenceRow]) -> Result<()> {
    let lines = rows.iter().map(|r| {
        format!(
            "{},{},{},{},{}",
            fmt_f64(r.kappa),
            fmt_f64(r.energy),
            r.method.tag(),
            fmt_f64(r.rel_error),
            fmt_f64(r.wall_s)
        )
    });
    write_table(path, CONVERGENCE_HEADER, lines)
}

pub fn read_convergence_csv(path: &Path) -> Result<Vec<ConvergenceRow>> {
    read_table(path, CONVERGENCE_HEADER)?
        .into_iter()
        .map(|f| {
            Ok(ConvergenceRow {
                kappa: parse(path, &f[0])?,
                energy: parse(path, &f[1])?,
                method: Method::from_tag(&f[2]).ok_or_else(|| csv_err(path, &format!("unknown method `{}`", f[2])))?,
                rel_error: parse(path, &f[3])?,
                wall_s: parse(path, &f[4])?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub method: Method,
    pub kappa: f64,
    pub phase: String,
    pub wall_s: f64,
    pub dof_count: usize,
}

impl TimingRow {
    /// The curve's phases followed by a `total` row.
    pub fn from_curve(curve: &DosCurve) -> Vec<TimingRow> {
        let row = |phase: &str, wall_s| TimingRow {
            method: curve.method,
            kappa: curve.kappa,
            phase: phase.to_string(),
            wall_s,
            dof_count: curve.dof_count,
        };
        let mut out: Vec<_> = curve.phases.iter().map(|p| row(&p.phase, p.wall_s)).collect();
        out.push(row("total", curve.wall_s));
        out
    }
}

pub fn write_timing_csv(path: &Path, rows: &[TimingRow]) -> Result<()> {
    let lines = rows.iter().map(|r| {
        format!(
            "{},{},{},{},{}",
            r.method.tag(),
            fmt_f64(r.kappa),
            r.phase,
            fmt_f64(r.wall_s),
            r.dof_count
        )
    });
    write_table(path, TIMING_HEADER, lines)
}

pub fn read_timing_csv(path: &Path) -> Result<Vec<TimingRow>> {
    read_table(path, TIMING_HEADER)?
        .into_iter()
        .map(|f| {
            Ok(TimingRow {
                method: Method::from_tag(&f[0]).ok_or_else(|| csv_err(path, &format!("unknown method `{}`", f[0])))?,
                kappa: parse(path, &f[1])?,
                phase: f[2].clone(),
                wall_s: parse(path, &f[3])?,
                dof_count: parse(path, &f[4])?,
            })
        })
        .collect()
}
