//! File formats.
//!
//! * Transition matrices: Matrix Market coordinate files of shape
//!   `(n + 1) × n`, where row `n + 1` holds the outside (absorbing) mass, plus
//!   a TOML sidecar `<file>.meta.toml` describing the state space.
//! * Fields: CSV `ix,iy,value` or the binary layout below.
//! * Tables (spectra, reduced models, curves, series): CSV with a header row.
//!
//! Every text file starts with a comment line carrying the config hash and
//! seed. Binary fields, little endian:
//!
//! ```text
//! offset  size  content
//! 0       4     magic "SFLD"
//! 4       4     format version (u32, currently 1)
//! 8       4     nx (u32)
//! 12      4     ny (u32)
//! 16      32    lo.x, lo.y, hi.x, hi.y (f64)
//! 48      8·n   values, index ix + nx·iy (f64)
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{FieldError, GridPartition, ScalarField};
use crate::reduce::{LillieforsCurve, ReduceError, ReducedModel};
use crate::spectral::SpectrumResult;
use crate::stats::TimeSeries;
use crate::ulam::{Domain, TransitionMatrix, UlamError};

const FIELD_MAGIC: &[u8; 4] = b"SFLD";
const FIELD_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Ulam(#[from] UlamError),
    #[error(transparent)]
    Reduce(#[from] ReduceError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, msg: impl Into<String>) -> IoError {
    IoError::Parse {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Identifies the run that produced a file.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed,
        }
    }

    fn comment(&self, lead: &str) -> String {
        format!("{lead} config_hash={} seed={}\n", self.config_hash, self.seed)
    }
}

fn write_text(path: &Path, body: &str) -> Result<(), IoError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    fs::write(path, body).map_err(io_err(path))
}

/// Reads data lines of a CSV file, skipping `#` comments and the header.
fn read_csv_rows(path: &Path) -> Result<Vec<Vec<String>>, IoError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    let mut header_seen = false;
    for line in BufReader::new(f).lines() {
        let line = line.map_err(io_err(path))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        if !header_seen {
            header_seen = true;
            continue;
        }
        rows.push(t.split(',').map(|s| s.trim().to_string()).collect());
    }
    Ok(rows)
}

fn num<T: std::str::FromStr>(path: &Path, s: &str) -> Result<T, IoError> {
    s.parse().map_err(|_| parse_err(path, format!("bad number {s:?}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum DomainMeta {
    Grid { lo: [f64; 2], hi: [f64; 2], nx: usize, ny: usize },
    FiberBins { nbins: usize, length: f64 },
    Abstract { states: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixMeta {
    config_hash: String,
    seed: u64,
    samples_per_box: usize,
    steps: usize,
    tau: f64,
    outside_total: f64,
    nnz: usize,
    domain: DomainMeta,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.toml");
    PathBuf::from(s)
}

pub fn write_matrix(path: &Path, p: &TransitionMatrix, prov: &Provenance) -> Result<(), IoError> {
    let n = p.dim();
    let extra = p.outside().iter().filter(|&&v| v > 0.0).count();
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    let mut head = String::from("%%MatrixMarket matrix coordinate real general\n");
    head.push_str(&prov.comment("%"));
    let _ = writeln!(head, "% row {} is the outside state", n + 1);
    let _ = writeln!(head, "{} {} {}", n + 1, n, p.nnz() + extra);
    w.write_all(head.as_bytes()).map_err(io_err(path))?;
    for j in 0..n {
        let (rows, vals) = p.column(j);
        for (&i, &v) in rows.iter().zip(vals) {
            writeln!(w, "{} {} {}", i + 1, j + 1, v).map_err(io_err(path))?;
        }
        let o = p.outside()[j];
        if o > 0.0 {
            writeln!(w, "{} {} {}", n + 1, j + 1, o).map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))?;

    let domain = match p.domain() {
        Domain::Grid(g) => DomainMeta::Grid {
            lo: g.lo(),
            hi: g.hi(),
            nx: g.nx(),
            ny: g.ny(),
        },
        Domain::FiberBins { nbins, length } => DomainMeta::FiberBins {
            nbins: *nbins,
            length: *length,
        },
        Domain::Abstract(k) => DomainMeta::Abstract { states: *k },
    };
    let meta = MatrixMeta {
        config_hash: prov.config_hash.clone(),
        seed: p.seed(),
        samples_per_box: p.samples_per_box(),
        steps: p.steps(),
        tau: p.tau(),
        outside_total: p.outside_total(),
        nnz: p.nnz(),
        domain,
    };
    let text = toml::to_string(&meta).map_err(|e| parse_err(path, e.to_string()))?;
    write_text(&sidecar_path(path), &text)
}

pub fn read_matrix(path: &Path) -> Result<TransitionMatrix, IoError> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(io_err(&side))?;
    let meta: MatrixMeta = toml::from_str(&text).map_err(|e| parse_err(&side, e.to_string()))?;
    let domain = match meta.domain {
        DomainMeta::Grid { lo, hi, nx, ny } => Domain::Grid(GridPartition::new(lo, hi, nx, ny)?),
        DomainMeta::FiberBins { nbins, length } => Domain::FiberBins { nbins, length },
        DomainMeta::Abstract { states } => Domain::Abstract(states),
    };
    let n = domain.len();
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut outside = vec![0.0; n];
    let mut size_seen = false;
    for line in BufReader::new(f).lines() {
        let line = line.map_err(io_err(path))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('%') {
            continue;
        }
        let parts: Vec<&str> = t.split_whitespace().collect();
        if !size_seen {
            size_seen = true;
            if parts.len() != 3 || num::<usize>(path, parts[0])? != n + 1 || num::<usize>(path, parts[1])? != n {
                return Err(parse_err(path, "size line does not match the sidecar domain"));
            }
            continue;
        }
        if parts.len() != 3 {
            return Err(parse_err(path, format!("bad entry line {t:?}")));
        }
        let i: usize = num(path, parts[0])?;
        let j: usize = num(path, parts[1])?;
        let v: f64 = num(path, parts[2])?;
        if i == 0 || j == 0 || j > n || i > n + 1 {
            return Err(parse_err(path, format!("index out of range in {t:?}")));
        }
        if i == n + 1 {
            outside[j - 1] = v;
        } else {
            cols[j - 1].push((i - 1, v));
        }
    }
    Ok(TransitionMatrix::from_columns(
        domain,
        cols,
        outside,
        meta.samples_per_box,
        meta.steps,
        meta.tau,
        meta.seed,
    )?)
}

pub fn write_field_csv(path: &Path, f: &ScalarField, prov: &Provenance) -> Result<(), IoError> {
    let g = f.grid();
    let mut s = prov.comment("#");
    let lo = g.lo();
    let hi = g.hi();
    let _ = writeln!(s, "# grid lo={},{} hi={},{} nx={} ny={}", lo[0], lo[1], hi[0], hi[1], g.nx(), g.ny());
    s.push_str("ix,iy,value\n");
    for iy in 0..g.ny() {
        for ix in 0..g.nx() {
            let _ = writeln!(s, "{ix},{iy},{}", f.value(ix, iy));
        }
    }
    write_text(path, &s)
}

/// Reads a field CSV onto a known grid.
pub fn read_field_csv(path: &Path, grid: &GridPartition) -> Result<ScalarField, IoError> {
    let mut values = vec![f64::NAN; grid.len()];
    for row in read_csv_rows(path)? {
        if row.len() != 3 {
            return Err(parse_err(path, "expected ix,iy,value"));
        }
        let ix: usize = num(path, &row[0])?;
        let iy: usize = num(path, &row[1])?;
        if ix >= grid.nx() || iy >= grid.ny() {
            return Err(parse_err(path, format!("box ({ix}, {iy}) outside the grid")));
        }
        values[grid.index(ix, iy)] = num(path, &row[2])?;
    }
    Ok(ScalarField::new(grid.clone(), values)?)
}

pub fn write_field_binary(path: &Path, f: &ScalarField) -> Result<(), IoError> {
    let g = f.grid();
    let mut buf = Vec::with_capacity(48 + 8 * g.len());
    buf.extend_from_slice(FIELD_MAGIC);
    buf.extend_from_slice(&FIELD_VERSION.to_le_bytes());
    buf.extend_from_slice(&(g.nx() as u32).to_le_bytes());
    buf.extend_from_slice(&(g.ny() as u32).to_le_bytes());
    for c in [g.lo()[0], g.lo()[1], g.hi()[0], g.hi()[1]] {
        buf.extend_from_slice(&c.to_le_bytes());
    }
    for v in f.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_field_binary(path: &Path) -> Result<ScalarField, IoError> {
    let b = fs::read(path).map_err(io_err(path))?;
    if b.len() < 48 || &b[0..4] != FIELD_MAGIC {
        return Err(parse_err(path, "not a binary field file"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(b[o..o + 8].try_into().unwrap());
    if u32_at(4) != FIELD_VERSION {
        return Err(parse_err(path, format!("unsupported version {}", u32_at(4))));
    }
    let (nx, ny) = (u32_at(8) as usize, u32_at(12) as usize);
    if b.len() != 48 + 8 * nx * ny {
        return Err(parse_err(path, "truncated value block"));
    }
    let grid = GridPartition::new([f64_at(16), f64_at(24)], [f64_at(32), f64_at(40)], nx, ny)?;
    let values = (0..nx * ny).map(|k| f64_at(48 + 8 * k)).collect();
    Ok(ScalarField::new(grid, values)?)
}

pub fn write_spectrum_csv(path: &Path, s: &SpectrumResult, prov: &Provenance) -> Result<(), IoError> {
    let mut out = prov.comment("#");
    let _ = writeln!(out, "# tau={}", s.tau);
    out.push_str("index,re,im,abs,rate,residual\n");
    for (i, l) in s.eigenvalues.iter().enumerate() {
        let _ = writeln!(out, "{},{},{},{},{},{}", i + 1, l.re, l.im, l.norm(), s.rates[i], s.residuals[i]);
    }
    write_text(path, &out)
}

pub fn write_reduced_model(path: &Path, rm: &ReducedModel, prov: &Provenance) -> Result<(), IoError> {
    let mut out = prov.comment("#");
    let _ = writeln!(out, "# k={} dt={} q={} seed={}", rm.k(), rm.dt(), rm.q, rm.seed);
    if !rm.skipped.is_empty() {
        let skipped: Vec<String> = rm.skipped.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "# skipped_levels={}", skipped.join(";"));
    }
    out.push_str("v,alpha_k,beta_k,alpha,beta\n");
    let h = rm.horizon();
    for ((v, a), b) in rm.knots().iter().zip(rm.alpha_k()).zip(rm.beta_k()) {
        let _ = writeln!(out, "{v},{a},{b},{},{}", a / h, b / h);
    }
    write_text(path, &out)
}

pub fn read_reduced_model(path: &Path) -> Result<ReducedModel, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut k = None;
    let mut dt = None;
    let mut q = 0;
    let mut seed = 0;
    for line in text.lines().filter(|l| l.starts_with("# k=")) {
        for kv in line.trim_start_matches('#').split_whitespace() {
            match kv.split_once('=') {
                Some(("k", v)) => k = Some(num::<usize>(path, v)?),
                Some(("dt", v)) => dt = Some(num::<f64>(path, v)?),
                Some(("q", v)) => q = num(path, v)?,
                Some(("seed", v)) => seed = num(path, v)?,
                _ => {}
            }
        }
    }
    let (k, dt) = k.zip(dt).ok_or_else(|| parse_err(path, "missing k/dt metadata line"))?;
    let (mut v, mut a, mut b) = (Vec::new(), Vec::new(), Vec::new());
    for row in read_csv_rows(path)? {
        if row.len() != 5 {
            return Err(parse_err(path, "expected v,alpha_k,beta_k,alpha,beta"));
        }
        v.push(num(path, &row[0])?);
        a.push(num(path, &row[1])?);
        b.push(num(path, &row[2])?);
    }
    let mut rm = ReducedModel::new(v, a, b, k, dt)?;
    rm.q = q;
    rm.seed = seed;
    Ok(rm)
}

pub fn write_lilliefors_csv(path: &Path, c: &LillieforsCurve, prov: &Provenance) -> Result<(), IoError> {
    let mut out = prov.comment("#");
    let _ = writeln!(out, "# best_k={} best_statistic={}", c.best_k, c.best_statistic);
    out.push_str("k,statistic\n");
    for (k, s) in &c.points {
        match s {
            Some(s) => {
                let _ = writeln!(out, "{k},{s}");
            }
            None => {
                let _ = writeln!(out, "{k},");
            }
        }
    }
    write_text(path, &out)
}

pub fn write_series_csv(path: &Path, s: &TimeSeries, prov: &Provenance) -> Result<(), IoError> {
    let mut out = prov.comment("#");
    out.push_str("time,value\n");
    for (i, v) in s.values().iter().enumerate() {
        let _ = writeln!(out, "{},{v}", i as f64 * s.interval());
    }
    write_text(path, &out)
}

pub fn read_series_csv(path: &Path) -> Result<TimeSeries, IoError> {
    let rows = read_csv_rows(path)?;
    let times: Vec<f64> = rows.iter().map(|r| num(path, &r[0])).collect::<Result<_, _>>()?;
    let values: Vec<f64> = rows
        .iter()
        .map(|r| r.get(1).ok_or_else(|| parse_err(path, "missing value column")).and_then(|v| num(path, v)))
        .collect::<Result<_, _>>()?;
    let interval = if times.len() > 1 { times[1] - times[0] } else { 1.0 };
    TimeSeries::new(values, interval).map_err(|e| parse_err(path, e.to_string()))
}

/// Generic numeric table with named columns.
pub fn write_table(path: &Path, columns: &[&str], rows: &[Vec<f64>], prov: &Provenance) -> Result<(), IoError> {
    let mut out = prov.comment("#");
    out.push_str(&columns.join(","));
    out.push('\n');
    for r in rows {
        let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    write_text(path, &out)
}
