//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigError, ExperimentConfig, PRESETS};
use crate::fiber::detect::MultiscaleReport;
use crate::io::{self, Provenance};
use crate::pipeline::{self, Detection, Result};
use crate::reduce::{LillieforsCurve, ReducedModel};
use crate::spectral::{DensityResult, SpectrumResult, SweepReport};
use crate::stats::{SeriesSummary, TimeSeries};
use crate::ulam::TransitionMatrix;

#[derive(Debug, Parser)]
#[command(name = "slowfast", version, about = "Multiscale detection and reduction for stochastic systems")]
pub struct Cli {
    /// Worker threads; defaults to all cores. Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Source {
    /// Experiment config file (TOML).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub config: Option<PathBuf>,
    /// Name of a shipped preset (see `slowfast presets`).
    #[arg(long)]
    pub preset: Option<String>,
    /// Output directory; overrides the config's `output`.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the Ulam matrix and write matrix, density and spectrum.
    Operator {
        #[command(flatten)]
        source: Source,
    },
    /// Compare full and fiber dynamics spectra.
    Detect {
        #[command(flatten)]
        source: Source,
        /// Reuse a matrix written by `operator`.
        #[arg(long)]
        matrix: Option<PathBuf>,
    },
    /// Estimate the reduced drift-diffusion model.
    Reduce {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        matrix: Option<PathBuf>,
    },
    /// Simulate the reduced model.
    Simulate {
        #[command(flatten)]
        source: Source,
        /// Reduced model written by `reduce`.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        matrix: Option<PathBuf>,
    },
    /// Switching statistics of the full and reduced dynamics.
    Compare {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        matrix: Option<PathBuf>,
        /// Skip the full-dynamics integration.
        #[arg(long)]
        reduced_only: bool,
    },
    /// Flow-time convergence sweep over `ulam.sweep`.
    Sweep {
        #[command(flatten)]
        source: Source,
    },
    /// List the shipped presets.
    Presets,
}

/// Parses `std::env::args` and runs; returns the process exit code.
pub fn run() -> i32 {
    run_with(std::env::args_os())
}

pub fn run_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return 1;
        }
    };
    match pool.install(|| execute(&cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    prov: Provenance,
}

impl Ctx {
    fn new(source: &Source) -> Result<Self> {
        let cfg = match (&source.config, &source.preset) {
            (Some(p), _) => ExperimentConfig::from_file(p)?,
            (None, Some(name)) => ExperimentConfig::preset(name)?,
            (None, None) => return Err(ConfigError::Invalid("pass --config or --preset".into()).into()),
        };
        let out = source.output.clone().unwrap_or_else(|| cfg.output.clone());
        std::fs::create_dir_all(&out).map_err(|source| io::IoError::Io {
            path: out.clone(),
            source,
        })?;
        let prov = Provenance::new(cfg.hash(), cfg.ulam.seed);
        Ok(Self { cfg, out, prov })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn report(&self, name: &str, lines: &[(&str, String)]) -> Result<()> {
        let rows = lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect::<String>();
        let text = format!("# config_hash={} seed={}\n{rows}", self.prov.config_hash, self.prov.seed);
        std::fs::write(self.path(name), text).map_err(|source| io::IoError::Io {
            path: self.path(name),
            source,
        })?;
        print!("{rows}");
        Ok(())
    }

    fn operator(&self, matrix: Option<&Path>) -> Result<TransitionMatrix> {
        match matrix {
            Some(path) => {
                let p = io::read_matrix(path)?;
                pipeline::check_operator(&self.cfg, &p)?;
                Ok(p)
            }
            None => {
                let op = pipeline::build_operator(&self.cfg)?;
                if let Some(s) = &op.sweep {
                    self.write_sweep(s)?;
                }
                Ok(op.matrix)
            }
        }
    }

    fn write_sweep(&self, s: &SweepReport) -> Result<()> {
        let rows: Vec<Vec<f64>> = s
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let (d, f) = s.differences.get(i).copied().unwrap_or((f64::NAN, None));
                vec![e.tau, e.steps as f64, e.eigenvalues[1].re, d, f.unwrap_or(f64::NAN)]
            })
            .collect();
        io::write_table(
            &self.path("sweep.csv"),
            &["tau", "steps", "lambda2", "density_diff_next", "phi2_diff_next"],
            &rows,
            &self.prov,
        )?;
        println!("sweep: chosen tau = {}", s.chosen_tau());
        Ok(())
    }

    fn write_spectrum(&self, name: &str, s: &SpectrumResult) -> Result<()> {
        Ok(io::write_spectrum_csv(&self.path(name), s, &self.prov)?)
    }

    fn slow_stage(&self, p: &TransitionMatrix) -> Result<(SpectrumResult, DensityResult)> {
        let spec = pipeline::spectrum(&self.cfg, p)?;
        let dens = pipeline::density(p)?;
        Ok((spec, dens))
    }

    fn reduce(&self, matrix: Option<&Path>) -> Result<ReducedModel> {
        let p = self.operator(matrix)?;
        let (spec, dens) = self.slow_stage(&p)?;
        let model = self.cfg.system()?;
        let theta = pipeline::slow_coordinate(&spec)?;
        io::write_field_csv(&self.path("theta.csv"), theta.field(), &self.prov)?;
        io::write_field_binary(&self.path("theta.bin"), theta.field())?;
        let curve = pipeline::lilliefors(&self.cfg, &model, &theta, &dens)?;
        if let Some(c) = &curve {
            io::write_lilliefors_csv(&self.path("lilliefors.csv"), c, &self.prov)?;
        }
        let k = pipeline::chosen_k(&self.cfg, curve.as_ref());
        let rm = pipeline::reduced_model(&self.cfg, &model, &theta, &dens, k)?;
        io::write_reduced_model(&self.path("reduced_model.csv"), &rm, &self.prov)?;
        let mut lines = vec![
            ("k", k.to_string()),
            ("knots", rm.knots().len().to_string()),
            ("skipped_levels", rm.skipped.len().to_string()),
        ];
        if let Some(LillieforsCurve {
            best_k, best_statistic, ..
        }) = &curve
        {
            lines.push(("lilliefors_best_k", best_k.to_string()));
            lines.push(("lilliefors_best_statistic", best_statistic.to_string()));
        }
        self.report("reduce.txt", &lines)?;
        Ok(rm)
    }

    fn reduced_model(&self, model: Option<&Path>, matrix: Option<&Path>) -> Result<ReducedModel> {
        match model {
            Some(path) => Ok(io::read_reduced_model(path)?),
            None => self.reduce(matrix),
        }
    }

    fn write_series(&self, tag: &str, s: &TimeSeries) -> Result<()> {
        Ok(io::write_series_csv(&self.path(&format!("{tag}_series.csv")), s, &self.prov)?)
    }

    fn write_summary(&self, tag: &str, s: &SeriesSummary) -> Result<()> {
        let dwell: Vec<Vec<f64>> = s.switching.dwell_times.iter().map(|&d| vec![d]).collect();
        io::write_table(&self.path(&format!("dwell_{tag}.csv")), &["dwell"], &dwell, &self.prov)?;
        let fit: Vec<Vec<f64>> = s.fit.points.iter().map(|&(x, y)| vec![x, y, s.fit.tau0 * x]).collect();
        io::write_table(
            &self.path(&format!("fit_{tag}.csv")),
            &["exp_quantile", "dwell", "fit"],
            &fit,
            &self.prov,
        )?;
        Ok(())
    }
}

fn summary_lines(tag: &str, s: &SeriesSummary) -> Vec<(String, String)> {
    vec![
        (format!("{tag}_lower"), s.classification.lower.to_string()),
        (format!("{tag}_upper"), s.classification.upper.to_string()),
        (format!("{tag}_switches"), s.switching.switches.to_string()),
        (format!("{tag}_mean_switching_time"), s.switching.mean.to_string()),
        (format!("{tag}_tau0_fit"), s.fit.tau0.to_string()),
        (format!("{tag}_r_squared"), s.fit.r_squared.to_string()),
    ]
}

fn detect_lines(r: &MultiscaleReport, d: &Detection) -> Vec<(&'static str, String)> {
    let v = &d.validity;
    vec![
        ("level", r.curve.level().to_string()),
        ("fiber_length", r.curve.length().to_string()),
        ("geometric_mean_ratio", r.geometric_mean.to_string()),
        ("threshold", r.threshold.to_string()),
        ("verdict", if r.multiscale { "multiscale" } else { "not multiscale" }.to_string()),
        ("fiber_outside_mass", r.fiber_outside_mass.to_string()),
        ("validity_mean_step", v.mean_step.to_string()),
        ("validity_mean_residual", v.mean_residual.to_string()),
        ("validity_max_residual", v.max_residual.to_string()),
        ("validity_residual_ratio", v.residual_ratio().to_string()),
        ("validity_failures", v.failures.to_string()),
    ]
}

/// Common-bin histogram of two dwell lists.
fn dwell_histogram(a: &[f64], b: &[f64], bins: usize) -> Vec<Vec<f64>> {
    let max = a.iter().chain(b).fold(0.0f64, |m, &x| m.max(x));
    let width = if max > 0.0 { max / bins as f64 } else { 1.0 };
    let count = |v: &[f64], i: usize| {
        v.iter()
            .filter(|&&x| ((x / width) as usize).min(bins - 1) == i)
            .count() as f64
    };
    (0..bins)
        .map(|i| vec![i as f64 * width, (i + 1) as f64 * width, count(a, i), count(b, i)])
        .collect()
}

fn execute(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Presets => {
            for (name, text) in PRESETS {
                let summary = text.lines().next().unwrap_or("").trim_start_matches('#').trim();
                println!("{name:16} {summary}");
            }
            Ok(())
        }
        Command::Operator { source } => {
            let ctx = Ctx::new(source)?;
            let p = ctx.operator(None)?;
            io::write_matrix(&ctx.path("matrix.mtx"), &p, &ctx.prov)?;
            let (spec, dens) = ctx.slow_stage(&p)?;
            ctx.write_spectrum("spectrum.csv", &spec)?;
            io::write_field_csv(&ctx.path("density.csv"), &dens.density, &ctx.prov)?;
            io::write_field_binary(&ctx.path("density.bin"), &dens.density)?;
            if let Some(phi) = spec.eigenfunction(1) {
                io::write_field_csv(&ctx.path("phi2.csv"), &phi, &ctx.prov)?;
                io::write_field_binary(&ctx.path("phi2.bin"), &phi)?;
            }
            let l = &spec.eigenvalues;
            ctx.report(
                "operator.txt",
                &[
                    ("tau", p.tau().to_string()),
                    ("nnz", p.nnz().to_string()),
                    ("outside_mass", p.outside_total().to_string()),
                    ("lambda2", format!("{}", l[1])),
                    ("density_degenerate", dens.degenerate.to_string()),
                ],
            )
        }
        Command::Sweep { source } => {
            let ctx = Ctx::new(source)?;
            if ctx.cfg.ulam.sweep.is_none() {
                return Err(ConfigError::Invalid("ulam.sweep is not set".into()).into());
            }
            ctx.operator(None).map(|_| ())
        }
        Command::Detect { source, matrix } => {
            let ctx = Ctx::new(source)?;
            let p = ctx.operator(matrix.as_deref())?;
            let dens = pipeline::density(&p)?;
            let det = pipeline::detect(&ctx.cfg, &p, &dens)?;
            let r = &det.report;
            ctx.write_spectrum("spectrum.csv", &r.full)?;
            ctx.write_spectrum("fiber_spectrum.csv", &r.fiber)?;
            let rows: Vec<Vec<f64>> = r
                .ratios
                .iter()
                .enumerate()
                .map(|(i, &q)| vec![(i + 2) as f64, r.full.rates[i + 1], r.fiber.rates[i + 1], q])
                .collect();
            io::write_table(&ctx.path("ratios.csv"), &["index", "full_rate", "fiber_rate", "ratio"], &rows, &ctx.prov)?;
            let verts: Vec<Vec<f64>> = r
                .curve
                .vertices()
                .iter()
                .zip(r.curve.arc_lengths())
                .map(|(v, s)| vec![v[0], v[1], *s])
                .collect();
            io::write_table(&ctx.path("fiber.csv"), &["x", "y", "arc"], &verts, &ctx.prov)?;
            if let Some(levels) = &ctx.cfg.fiber.levels {
                let mut rows = Vec::new();
                for &v in levels {
                    let d = pipeline::detect_at(&ctx.cfg, &p, &dens, v)?;
                    rows.push(vec![
                        v,
                        d.report.geometric_mean,
                        f64::from(u8::from(d.report.multiscale)),
                        d.validity.residual_ratio(),
                    ]);
                }
                io::write_table(
                    &ctx.path("detect_levels.csv"),
                    &["level", "geometric_mean_ratio", "multiscale", "residual_ratio"],
                    &rows,
                    &ctx.prov,
                )?;
            }
            ctx.report("detect.txt", &detect_lines(r, &det))
        }
        Command::Reduce { source, matrix } => {
            let ctx = Ctx::new(source)?;
            ctx.reduce(matrix.as_deref()).map(|_| ())
        }
        Command::Simulate { source, model, matrix } => {
            let ctx = Ctx::new(source)?;
            let rm = ctx.reduced_model(model.as_deref(), matrix.as_deref())?;
            let run = pipeline::reduced_run(&ctx.cfg, &rm)?;
            ctx.write_series("reduced", &run.series)?;
            let mut lines = vec![
                ("samples".to_string(), run.series.len().to_string()),
                ("clamped_diffusion_steps".to_string(), run.clamped.to_string()),
            ];
            if let Ok(s) = pipeline::summary(&ctx.cfg, &run.series) {
                ctx.write_summary("reduced", &s)?;
                lines.extend(summary_lines("reduced", &s));
            }
            let lines: Vec<(&str, String)> = lines.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
            ctx.report("simulate.txt", &lines)
        }
        Command::Compare {
            source,
            model,
            matrix,
            reduced_only,
        } => {
            let ctx = Ctx::new(source)?;
            let rm = ctx.reduced_model(model.as_deref(), matrix.as_deref())?;
            let run = pipeline::reduced_run(&ctx.cfg, &rm)?;
            ctx.write_series("reduced", &run.series)?;
            let reduced = pipeline::summary(&ctx.cfg, &run.series)?;
            ctx.write_summary("reduced", &reduced)?;
            let mut lines = summary_lines("reduced", &reduced);
            if !reduced_only {
                let full_series = pipeline::full_series(&ctx.cfg)?;
                ctx.write_series("full", &full_series)?;
                let full = pipeline::summary(&ctx.cfg, &full_series)?;
                ctx.write_summary("full", &full)?;
                let hist = dwell_histogram(&full.switching.dwell_times, &reduced.switching.dwell_times, 40);
                io::write_table(
                    &ctx.path("dwell_histogram.csv"),
                    &["lo", "hi", "full", "reduced"],
                    &hist,
                    &ctx.prov,
                )?;
                let mut both = summary_lines("full", &full);
                both.push((
                    "relative_difference".into(),
                    ((reduced.switching.mean - full.switching.mean) / full.switching.mean).to_string(),
                ));
                both.extend(lines);
                lines = both;
            }
            let lines: Vec<(&str, String)> = lines.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
            ctx.report("compare.txt", &lines)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts_everything() {
        let h = dwell_histogram(&[1.0, 2.0, 10.0], &[5.0], 4);
        assert_eq!(h.iter().map(|r| r[2]).sum::<f64>(), 3.0);
        assert_eq!(h.iter().map(|r| r[3]).sum::<f64>(), 1.0);
        assert_eq!(h[3][2], 1.0);
    }

    #[test]
    fn bad_arguments_exit_nonzero() {
        assert_eq!(run_with(["slowfast", "operator"]), 1);
        assert_eq!(run_with(["slowfast", "detect", "--preset", "nope"]), 2);
    }
}
