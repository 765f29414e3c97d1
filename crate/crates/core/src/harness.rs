//! Config-driven experiment runs behind the `wicksell` binary.
//!
//! Every run is a pure function of its [`ExperimentConfig`]: replication `r`
//! draws from its own random stream, results are gathered in replication
//! order, and numbers are printed with 17 significant digits, so output files
//! are byte-identical across reruns and thread counts.

use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp_limit::{self, GpSpec, NormalFit};
use crate::isotonic::{self, ConcaveMajorant};
use crate::lan::{self, LanReport, PathTemplate, PerturbationSpec};
use crate::models::{CdfModel, ObservationModel};
use crate::rng::{mix64, RngStream};
use crate::sampler::{self, Provenance, SampleSet, Sampler};
use crate::svg::{self, Series, Style};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Estimate,
    Simulate,
    McVariance,
    FlatRate,
    GpLimit,
    LanCheck,
}

impl FromStr for Command {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "estimate" => Command::Estimate,
            "simulate" => Command::Simulate,
            "mc-variance" => Command::McVariance,
            "flat-rate" => Command::FlatRate,
            "gp-limit" => Command::GpLimit,
            "lan-check" => Command::LanCheck,
            _ => return Err(Error::Config(format!("unknown command `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    Svg,
}

impl FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            "svg" => Ok(Format::Svg),
            _ => Err(Error::Config(format!("unknown format `{s}` (csv, json or svg)"))),
        }
    }
}

/// Evaluation grid: `lo:hi:step` or an explicit comma-separated list.
#[derive(Debug, Clone, PartialEq)]
pub enum Grid {
    Range { lo: f64, hi: f64, step: f64 },
    Points(Vec<f64>),
}

impl Grid {
    pub fn points(&self) -> Vec<f64> {
        match self {
            Grid::Points(p) => p.clone(),
            Grid::Range { lo, hi, step } => {
                let count = ((hi - lo) / step + 1e-9).floor() as usize;
                (0..=count).map(|k| lo + k as f64 * step).collect()
            }
        }
    }
}

impl FromStr for Grid {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::Config(format!("grid `{s}`: {why}"));
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad("not a number"));
        let grid = if s.contains(':') {
            let parts: Vec<&str> = s.split(':').collect();
            if parts.len() != 3 {
                return Err(bad("expected lo:hi:step"));
            }
            let (lo, hi, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
            if !(step > 0.0 && hi >= lo && lo.is_finite() && hi.is_finite()) {
                return Err(bad("need lo <= hi and step > 0"));
            }
            if (hi - lo) / step > 1e7 {
                return Err(bad("more than 10^7 points"));
            }
            Grid::Range { lo, hi, step }
        } else {
            let pts = s.split(',').map(num).collect::<Result<Vec<f64>>>()?;
            if pts.is_empty() || pts.iter().any(|p| !p.is_finite()) {
                return Err(bad("need finite points"));
            }
            Grid::Points(pts)
        };
        Ok(grid)
    }
}

fn parse_pair(s: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = s.split(',').collect();
    let bad = || Error::Config(format!("expected `h1,h2`, got `{s}`"));
    if parts.len() != 2 {
        return Err(bad());
    }
    let a = parts[0].trim().parse::<f64>().map_err(|_| bad())?;
    let b = parts[1].trim().parse::<f64>().map_err(|_| bad())?;
    Ok((a, b))
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| Error::Config(format!("`{t}` in `{s}` is not a number"))))
        .collect()
}

/// Settings as given on the command line or in a JSON config file, all
/// optional. Keys mirror the long flag names.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Overrides {
    pub command: Option<Command>,
    pub model: Option<String>,
    pub x: Option<f64>,
    pub n: Option<usize>,
    pub reps: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
    pub threads: Option<usize>,
    pub grid: Option<String>,
    pub h: Option<String>,
    pub eta: Option<f64>,
    pub squared: Option<bool>,
    pub gamma0: Option<f64>,
    pub gammax: Option<f64>,
    pub input: Option<PathBuf>,
    pub paths: Option<usize>,
    pub ladder: Option<String>,
    pub ks_n: Option<usize>,
    pub ks_reps: Option<usize>,
}

impl Overrides {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Overrides::from_json(&text)
    }

    /// Fields set in `self` win over those in `file`.
    pub fn over(self, file: Overrides) -> Overrides {
        Overrides {
            command: self.command.or(file.command),
            model: self.model.or(file.model),
            x: self.x.or(file.x),
            n: self.n.or(file.n),
            reps: self.reps.or(file.reps),
            seed: self.seed.or(file.seed),
            out: self.out.or(file.out),
            format: self.format.or(file.format),
            threads: self.threads.or(file.threads),
            grid: self.grid.or(file.grid),
            h: self.h.or(file.h),
            eta: self.eta.or(file.eta),
            squared: self.squared.or(file.squared),
            gamma0: self.gamma0.or(file.gamma0),
            gammax: self.gammax.or(file.gammax),
            input: self.input.or(file.input),
            paths: self.paths.or(file.paths),
            ladder: self.ladder.or(file.ladder),
            ks_n: self.ks_n.or(file.ks_n),
            ks_reps: self.ks_reps.or(file.ks_reps),
        }
    }
}

/// A fully resolved run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub command: Command,
    pub model: String,
    pub x: f64,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub grid: Option<Grid>,
    pub h: (f64, f64),
    pub gamma0: Option<f64>,
    pub gammax: Option<f64>,
    pub eta: Option<f64>,
    pub out: Option<PathBuf>,
    pub format: Format,
    pub threads: Option<usize>,
    pub squared: bool,
    pub input: Option<PathBuf>,
    /// Paths written by `gp-limit`; L_x draws in `flat-rate`.
    pub paths: usize,
    /// Sample sizes for the rate fit (`flat-rate`) or the Hadamard ladder (`lan-check`).
    pub ladder: Vec<f64>,
    pub ks_n: usize,
    pub ks_reps: usize,
}

impl ExperimentConfig {
    /// Per-command defaults for everything not given.
    pub fn resolve(o: Overrides) -> Result<Self> {
        let command = o.command.ok_or_else(|| Error::Config("no command given".into()))?;
        use Command::*;
        let (model, x, n, reps, format) = match command {
            Estimate => ("uniform01", 0.5, 200, 1, Format::Csv),
            Simulate => ("uniform01", 0.5, 200, 1, Format::Csv),
            McVariance => ("uniform01", 0.5, 100_000, 1000, Format::Json),
            FlatRate => ("flat:default", 2.5, 10_000, 500, Format::Json),
            GpLimit => ("flat:default", 2.5, 1, 2000, Format::Json),
            LanCheck => ("uniform01", 0.5, 100_000, 500, Format::Json),
        };
        let ladder = match (&o.ladder, command) {
            (Some(s), _) => parse_list(s)?,
            (None, LanCheck) => vec![1e4, 1e6, 1e8, 1e10],
            (None, _) => vec![1e3, 1e4, 1e5],
        };
        let cfg = ExperimentConfig {
            command,
            model: o.model.unwrap_or_else(|| model.to_string()),
            x: o.x.unwrap_or(x),
            n: o.n.unwrap_or(n),
            reps: o.reps.unwrap_or(reps),
            seed: o.seed.unwrap_or(1),
            grid: o.grid.as_deref().map(Grid::from_str).transpose()?,
            h: o.h.as_deref().map(parse_pair).transpose()?.unwrap_or((1.0, 1.0)),
            gamma0: o.gamma0,
            gammax: o.gammax,
            eta: o.eta,
            out: o.out,
            format: o.format.unwrap_or(format),
            threads: o.threads,
            squared: o.squared.unwrap_or(false),
            input: o.input,
            paths: o.paths.unwrap_or(if command == GpLimit { 200 } else { 2000 }),
            ladder,
            ks_n: o.ks_n.unwrap_or(10_000),
            ks_reps: o.ks_reps.unwrap_or(2000),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n < 1 || self.reps < 1 || self.paths < 1 || self.ks_n < 1 || self.ks_reps < 1 {
            return fail("n, reps, paths, ks-n and ks-reps must be at least 1");
        }
        if self.threads == Some(0) {
            return fail("threads must be at least 1");
        }
        if !self.x.is_finite() {
            return fail("x must be finite");
        }
        if self.ladder.is_empty() || self.ladder.iter().any(|n| !(*n >= 1.0)) {
            return fail("ladder sizes must be at least 1");
        }
        Ok(())
    }

    pub fn cdf_model(&self) -> Result<CdfModel> {
        self.model.parse()
    }

    /// `(γ_0, γ_x)` from flags or from the model's declared smoothness at `x`.
    fn gammas(&self, model: &CdfModel) -> Result<(f64, f64)> {
        let declared = model.declared_smoothness(self.x);
        let g0 = self.gamma0.or(declared.map(|s| s.gamma0));
        let gx = self.gammax.or(declared.map(|s| s.gammax));
        match (g0, gx) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(Error::Config(format!(
                "{model} declares no smoothness at x = {}; pass --gamma0 and --gammax",
                self.x
            ))),
        }
    }
}

/// Process exit code for an error: 2 for usage problems, 3 for numeric failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Input { .. }
        | Error::Io(_)
        | Error::ModelSpec { .. }
        | Error::InvalidModel(_)
        | Error::EmptySample => 2,
        Error::Replication { source, .. } => exit_code(source),
        _ => 3,
    }
}

// ---- formatting -------------------------------------------------------------

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

/// JSON formatter that writes floats with [`fmt_num`] and indents like the
/// pretty printer.
struct Sig17(serde_json::ser::PrettyFormatter<'static>);

impl serde_json::ser::Formatter for Sig17 {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        w.write_all(fmt_num(v).as_bytes())
    }
    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Sig17(serde_json::ser::PrettyFormatter::new()));
    value.serialize(&mut ser).map_err(|e| Error::Io(e.to_string()))?;
    buf.push(b'\n');
    String::from_utf8(buf).map_err(|e| Error::Io(e.to_string()))
}

fn csv_table(header: &str, rows: impl Iterator<Item = Vec<f64>>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.into_iter().map(fmt_num).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

// ---- shared helpers -----------------------------------------------------------

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance (denominator `n - 1`); `None` for a single value.
fn variance(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v);
    Some(v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let (mx, my) = (mean(&lx), mean(&ly));
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Runs `f` on a pool with the requested thread count (rayon's default if none).
fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Replications `0..reps` in parallel, gathered in order; the lowest failing
/// index is reported.
fn replicate<T: Send>(reps: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let results: Vec<Result<T>> = (0..reps).into_par_iter().map(&f).collect();
    results
        .into_iter()
        .enumerate()
        .map(|(index, r)| r.map_err(|e| Error::Replication { index, source: Box::new(e) }))
        .collect()
}

// Stream tags keep the random streams of different experiment parts disjoint.
const TAG_MAIN: u64 = 0;
const TAG_KS: u64 = 1 << 32;

fn lx_seed(seed: u64) -> u64 {
    mix64(seed ^ 0x4c5f_7864_7261_7773)
}

// ---- input ----------------------------------------------------------------------

/// Parses a one-column observation file. A header `z` marks squared radii and
/// `radius` plain radii; without a header `squared` decides. Plain radii are
/// squared here. Rows are numbered from 1.
pub fn parse_observations(text: &str, squared: bool) -> Result<Vec<f64>> {
    let mut values = Vec::new();
    let mut squared = squared;
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        let cell = line.trim();
        let bad = |reason: String| Error::Input { row, reason };
        if cell.is_empty() {
            return Err(bad("empty row".into()));
        }
        if cell.contains(',') {
            return Err(bad(format!("expected one column, got `{cell}`")));
        }
        match cell.parse::<f64>() {
            Ok(v) => {
                if !v.is_finite() || v < 0.0 {
                    return Err(bad(format!("value {cell} must be finite and nonnegative")));
                }
                values.push(if squared { v } else { v * v });
            }
            Err(_) if row == 1 && cell.eq_ignore_ascii_case("z") => squared = true,
            Err(_) if row == 1 && cell.eq_ignore_ascii_case("radius") => {
                if squared {
                    return Err(bad("header `radius` contradicts --squared".into()));
                }
            }
            Err(_) => return Err(bad(format!("`{cell}` is not a number"))),
        }
    }
    if values.is_empty() {
        return Err(Error::EmptySample);
    }
    Ok(values)
}

pub fn read_observations(path: &Path, squared: bool) -> Result<SampleSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let values = parse_observations(&text, squared)?;
    SampleSet::new(values, None, Provenance::Ingested { file: path.display().to_string() })
}

// ---- estimate -------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateRow {
    pub x: f64,
    pub f_hat: f64,
    pub v_hat: f64,
    /// NaN where the naive estimator is undefined.
    pub f_naive: f64,
}

/// IIE and naive estimates on a grid for one sample.
pub fn estimate_table(sample: &SampleSet, grid: &[f64]) -> Result<Vec<EstimateRow>> {
    let maj: ConcaveMajorant = isotonic::lcm(sample)?;
    grid.iter()
        .map(|&x| {
            let f_naive = match isotonic::f_naive(sample, x) {
                Ok(v) => v,
                Err(Error::NaiveUndefined(_)) => f64::NAN,
                Err(e) => return Err(e),
            };
            Ok(EstimateRow { x, f_hat: maj.f_hat(x)?, v_hat: maj.v_hat(x), f_naive })
        })
        .collect()
}

fn default_estimate_grid(sample: &SampleSet) -> Vec<f64> {
    let top = sample.max();
    (0..=200).map(|k| top * (k as f64 / 200.0)).collect()
}

/// Loads `--input` or simulates `n` observations from the model.
fn estimate_sample(cfg: &ExperimentConfig) -> Result<SampleSet> {
    match &cfg.input {
        Some(path) => read_observations(path, cfg.squared),
        None => sampler::sample_dataset(&cfg.cdf_model()?, cfg.n, cfg.seed),
    }
}

pub fn run_estimate(cfg: &ExperimentConfig) -> Result<Vec<EstimateRow>> {
    let sample = estimate_sample(cfg)?;
    let grid = match &cfg.grid {
        Some(g) => g.points(),
        None => default_estimate_grid(&sample),
    };
    estimate_table(&sample, &grid)
}

pub fn estimate_csv(rows: &[EstimateRow]) -> String {
    csv_table("x,f_hat,v_hat,f_naive", rows.iter().map(|r| vec![r.x, r.f_hat, r.v_hat, r.f_naive]))
}

fn estimate_plot(rows: &[EstimateRow]) -> Vec<Series> {
    vec![
        Series::new("IIE", rows.iter().map(|r| (r.x, r.f_hat)).collect(), Style::Step),
        Series::new("naive", rows.iter().map(|r| (r.x, r.f_naive)).collect(), Style::Line),
    ]
}

// ---- simulate -------------------------------------------------------------------

pub fn run_simulate(cfg: &ExperimentConfig) -> Result<SampleSet> {
    let sampler = Sampler::new(&cfg.cdf_model()?)?;
    sampler.dataset(cfg.n, RngStream::new(cfg.seed, TAG_MAIN))
}

// ---- mc-variance ----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McReport {
    pub model: String,
    pub x: f64,
    pub n: usize,
    pub replications: usize,
    pub seed: u64,
    pub gamma0: f64,
    pub gammax: f64,
    /// `F(x)`.
    pub truth: f64,
    /// `√(n / log n)`.
    pub scale: f64,
    pub estimates: Vec<f64>,
    pub naive_estimates: Vec<f64>,
    /// `√(n / log n) (F̂_n(x) - F(x))`.
    pub errors: Vec<f64>,
    pub naive_errors: Vec<f64>,
    pub variance: Option<f64>,
    pub naive_variance: Option<f64>,
    /// `Var(naive) / Var(IIE)`.
    pub ratio: Option<f64>,
    pub theory_variance: f64,
    /// KS of the IIE errors against their fitted normal.
    pub normal_fit: Option<NormalFit>,
}

pub fn run_mc_variance(cfg: &ExperimentConfig) -> Result<McReport> {
    let model = cfg.cdf_model()?;
    let x = cfg.x;
    if !(x > 0.0) {
        return Err(Error::Config(format!("mc-variance needs x > 0, got {x}")));
    }
    let (gamma0, gammax) = cfg.gammas(&model)?;
    let obs = ObservationModel::new(model.clone())?;
    let theory_variance = lan::efficient_variance(&obs, x, gamma0, gammax)?;
    let sampler = Sampler::new(&model)?;
    let n = cfg.n;
    if n < 2 {
        return Err(Error::Config("mc-variance needs n >= 2 for the √(n / log n) scaling".into()));
    }
    let base = RngStream::new(cfg.seed, TAG_MAIN);
    let pairs = with_threads(cfg.threads, || {
        replicate(cfg.reps, |r| {
            let sample = sampler.dataset(n, base.substream(r as u64))?;
            let f_hat = isotonic::lcm(&sample)?.f_hat(x)?;
            let naive = isotonic::f_naive(&sample, x)?;
            Ok((f_hat, naive))
        })
    })??;
    let truth = model.cdf(x);
    let nf = n as f64;
    let scale = (nf / nf.ln()).sqrt();
    let estimates: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let naive_estimates: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let errors: Vec<f64> = estimates.iter().map(|e| scale * (e - truth)).collect();
    let naive_errors: Vec<f64> = naive_estimates.iter().map(|e| scale * (e - truth)).collect();
    let variance = variance(&errors);
    let naive_variance = self::variance(&naive_errors);
    let ratio = match (variance, naive_variance) {
        (Some(v), Some(w)) if v > 0.0 => Some(w / v),
        _ => None,
    };
    let normal_fit = if errors.len() >= 3 { gp_limit::ks_fit_normal(&errors).ok() } else { None };
    Ok(McReport {
        model: model.to_string(),
        x,
        n,
        replications: cfg.reps,
        seed: cfg.seed,
        gamma0,
        gammax,
        truth,
        scale,
        estimates,
        naive_estimates,
        errors,
        naive_errors,
        variance,
        naive_variance,
        ratio,
        theory_variance,
        normal_fit,
    })
}

fn ecdf_series(label: &str, values: &[f64]) -> Series {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() as f64;
    Series::new(label, v.iter().enumerate().map(|(i, &x)| (x, (i + 1) as f64 / m)).collect(), Style::Step)
}

fn normal_series(mean: f64, sd: f64, lo: f64, hi: f64) -> Series {
    let pts = (0..=200)
        .map(|k| {
            let x = lo + (hi - lo) * k as f64 / 200.0;
            (x, gp_limit::normal_cdf((x - mean) / sd))
        })
        .collect();
    Series::new("fitted normal", pts, Style::Line)
}

// ---- flat-rate --------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LadderPoint {
    pub n: usize,
    /// `√n (V̂_n(x) - V(x))` per replication.
    pub statistics: Vec<f64>,
    pub mean: f64,
    /// Sd of the scaled statistic.
    pub sd: f64,
    /// Sd of `V̂_n(x) - V(x)`.
    pub sd_raw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlatRateReport {
    pub model: String,
    pub x: f64,
    pub flat_interval: (f64, f64),
    pub seed: u64,
    pub v_true: f64,
    pub ladder: Vec<LadderPoint>,
    /// Log-log slope of the scaled sd against `n`.
    pub slope: f64,
    /// Log-log slope of the unscaled sd against `n`.
    pub slope_raw: f64,
    pub ks_n: usize,
    pub ks_sample: Vec<f64>,
    pub l_x: Vec<f64>,
    /// Two-sample KS distance between `ks_sample` and `l_x`.
    pub ks_distance: f64,
}

fn scaled_v_stats(sampler: &Sampler, n: usize, reps: usize, x: f64, v_true: f64, base: RngStream) -> Result<Vec<f64>> {
    let root = (n as f64).sqrt();
    replicate(reps, |r| {
        let sample = sampler.dataset(n, base.substream(r as u64))?;
        Ok(root * (isotonic::lcm(&sample)?.v_hat(x) - v_true))
    })
}

pub fn run_flat_rate(cfg: &ExperimentConfig) -> Result<FlatRateReport> {
    let model = cfg.cdf_model()?;
    let x = cfg.x;
    let flat_interval = model
        .flat_interval(x)
        .ok_or_else(|| Error::Config(format!("{model} is not flat around x = {x}")))?;
    let obs = ObservationModel::new(model.clone())?;
    let v_true = obs.v_exact(x)?;
    let sampler = Sampler::new(&model)?;
    let ns: Vec<usize> = cfg.ladder.iter().map(|&n| n as usize).collect();
    if ns.len() < 2 {
        return Err(Error::Config("the rate fit needs at least two ladder sizes".into()));
    }
    let spec = GpSpec::new(obs, x)?;
    let (ladder, ks_sample, l_x) = with_threads(cfg.threads, || -> Result<_> {
        let mut ladder = Vec::new();
        for (k, &n) in ns.iter().enumerate() {
            let statistics = scaled_v_stats(&sampler, n, cfg.reps, x, v_true, RngStream::new(cfg.seed, k as u64 + 1))?;
            let sd = variance(&statistics).map_or(f64::NAN, f64::sqrt);
            ladder.push(LadderPoint { n, mean: mean(&statistics), sd, sd_raw: sd / (n as f64).sqrt(), statistics });
        }
        let ks_sample = scaled_v_stats(&sampler, cfg.ks_n, cfg.ks_reps, x, v_true, RngStream::new(cfg.seed, TAG_KS))?;
        let l_x = gp_limit::l_x_distribution(&spec, cfg.paths, lx_seed(cfg.seed))?.values;
        Ok((ladder, ks_sample, l_x))
    })??;
    let nsf: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let slope = log_log_slope(&nsf, &ladder.iter().map(|p| p.sd).collect::<Vec<_>>());
    let slope_raw = log_log_slope(&nsf, &ladder.iter().map(|p| p.sd_raw).collect::<Vec<_>>());
    let ks_distance = sampler::ks_two_sample(&ks_sample, &l_x);
    Ok(FlatRateReport {
        model: model.to_string(),
        x,
        flat_interval,
        seed: cfg.seed,
        v_true,
        ladder,
        slope,
        slope_raw,
        ks_n: cfg.ks_n,
        ks_sample,
        l_x,
        ks_distance,
    })
}

// ---- gp-limit ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GpDiagnostics {
    pub model: String,
    pub x: f64,
    pub flat_interval: (f64, f64),
    pub grid_points: usize,
    pub jitter: f64,
    pub seed: u64,
    pub paths: usize,
    pub l_x_draws: usize,
    /// Largest `|path(x)|` over the written paths; 0 by construction.
    pub max_abs_at_anchor: f64,
    pub mean: f64,
    pub sd: f64,
    pub ks: f64,
    pub p: f64,
}

#[derive(Debug, Clone)]
pub struct GpRun {
    pub spec: GpSpec,
    pub paths: Vec<Vec<f64>>,
    pub l_x: Vec<f64>,
    pub diagnostics: GpDiagnostics,
}

pub fn run_gp_limit(cfg: &ExperimentConfig) -> Result<GpRun> {
    let model = cfg.cdf_model()?;
    let x = cfg.x;
    let obs = ObservationModel::new(model.clone())?;
    let spec = match &cfg.grid {
        None => GpSpec::new(obs, x)?,
        Some(g) => {
            let flat = model
                .flat_interval(x)
                .ok_or_else(|| Error::Config(format!("{model} is not flat around x = {x}")))?;
            GpSpec::with_grid(obs, x, flat, g.points())?
        }
    };
    let (paths, l_x) = with_threads(cfg.threads, || -> Result<_> {
        let paths = gp_limit::sample_paths(&spec, cfg.paths, cfg.seed);
        let l_x = gp_limit::l_x_distribution(&spec, cfg.reps, cfg.seed)?.values;
        Ok((paths, l_x))
    })??;
    let fit = gp_limit::ks_fit_normal(&l_x)?;
    let anchor = spec.grid().iter().position(|&s| s == spec.x()).unwrap_or(0);
    let max_abs_at_anchor = paths.iter().map(|p| p[anchor].abs()).fold(0.0, f64::max);
    let diagnostics = GpDiagnostics {
        model: model.to_string(),
        x: spec.x(),
        flat_interval: spec.flat_interval(),
        grid_points: spec.grid().len(),
        jitter: spec.jitter(),
        seed: cfg.seed,
        paths: cfg.paths,
        l_x_draws: cfg.reps,
        max_abs_at_anchor,
        mean: fit.mean,
        sd: fit.sd,
        ks: fit.ks,
        p: fit.p_value,
    };
    Ok(GpRun { spec, paths, l_x, diagnostics })
}

fn kernel_csv(spec: &GpSpec) -> String {
    let cov = spec.covariance();
    let grid = spec.grid();
    let mut header = String::from("s");
    for t in grid {
        let _ = write!(header, ",{}", fmt_num(*t));
    }
    csv_table(&header, (0..grid.len()).map(|i| {
        let mut row = vec![grid[i]];
        row.extend((0..grid.len()).map(|j| cov[(i, j)]));
        row
    }))
}

fn paths_csv(spec: &GpSpec, paths: &[Vec<f64>]) -> String {
    let mut header = String::from("s");
    for p in 0..paths.len() {
        let _ = write!(header, ",path_{p}");
    }
    csv_table(&header, spec.grid().iter().enumerate().map(|(i, &s)| {
        let mut row = vec![s];
        row.extend(paths.iter().map(|p| p[i]));
        row
    }))
}

// ---- lan-check ----------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LanCheckReport {
    pub model: String,
    pub x: f64,
    pub h: (f64, f64),
    pub n: usize,
    pub seed: u64,
    pub gamma0: f64,
    pub gammax: f64,
    pub eta: f64,
    pub truncation: (f64, f64),
    pub loglik: Vec<f64>,
    pub deltas: Vec<(f64, f64)>,
    pub summary: LanReport,
    pub ladder_n: Vec<f64>,
    pub ladder: Vec<f64>,
    /// `hᵀ ψ̇`, the limit of the ladder.
    pub ladder_limit: f64,
}

pub fn run_lan_check(cfg: &ExperimentConfig) -> Result<LanCheckReport> {
    let model = cfg.cdf_model()?;
    let (gamma0, gammax) = cfg.gammas(&model)?;
    let obs = ObservationModel::new(model.clone())?;
    let x = cfg.x;
    let spec = PerturbationSpec::new(obs.clone(), x, cfg.h, cfg.n as f64, gamma0, gammax, cfg.eta)?;
    spec.check_monotone_default().map_err(|e| {
        Error::Perturbation(format!("{e}; the path is not a cdf at n = {}, try a larger n", cfg.n))
    })?;
    let j = lan::j_matrix(&obs, x, gamma0, gammax)?;
    let sampler = Sampler::new(&model)?;
    let base = RngStream::new(cfg.seed, TAG_MAIN);
    let reps = with_threads(cfg.threads, || {
        replicate(cfg.reps, |r| {
            let sample = sampler.dataset(cfg.n, base.substream(r as u64))?;
            Ok((spec.loglik_sum(&sample)?, spec.delta_n(&sample)?))
        })
    })??;
    let loglik: Vec<f64> = reps.iter().map(|r| r.0).collect();
    let deltas: Vec<(f64, f64)> = reps.iter().map(|r| r.1).collect();
    let summary = LanReport::from_replications(&loglik, &deltas, j, cfg.h);
    let template = PathTemplate { obs, x, h: cfg.h, gamma0, gammax, eta: cfg.eta };
    let ladder = lan::hadamard_ladder(&template, &cfg.ladder)?;
    Ok(LanCheckReport {
        model: model.to_string(),
        x,
        h: cfg.h,
        n: cfg.n,
        seed: cfg.seed,
        gamma0,
        gammax,
        eta: spec.eta(),
        truncation: spec.truncation(),
        loglik,
        deltas,
        summary,
        ladder_n: cfg.ladder.clone(),
        ladder,
        ladder_limit: template.limit(),
    })
}

// ---- dispatch -----------------------------------------------------------------------

/// One output artifact: a file name (relative to `--out` for multi-file
/// commands) and its contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub contents: String,
}

fn single(name: &str, contents: String) -> Vec<Artifact> {
    vec![Artifact { name: name.to_string(), contents }]
}

/// Runs the configured command and renders its artifacts.
pub fn execute(cfg: &ExperimentConfig) -> Result<Vec<Artifact>> {
    let fmt = cfg.format;
    Ok(match cfg.command {
        Command::Estimate => {
            let rows = run_estimate(cfg)?;
            match fmt {
                Format::Csv => single("estimate.csv", estimate_csv(&rows)),
                Format::Json => single("estimate.json", to_json(&rows)?),
                Format::Svg => single("estimate.svg", svg::render(&estimate_plot(&rows), "estimate")?),
            }
        }
        Command::Simulate => {
            let sample = run_simulate(cfg)?;
            match fmt {
                Format::Csv => single("sample.csv", csv_table("z", sample.values().iter().map(|&z| vec![z]))),
                Format::Json => single("sample.json", to_json(&sample.values())?),
                Format::Svg => single("sample.svg", svg::render(&[ecdf_series("observations", sample.values())], "sample")?),
            }
        }
        Command::McVariance => {
            let rep = run_mc_variance(cfg)?;
            match fmt {
                Format::Json => single("mc_variance.json", to_json(&rep)?),
                Format::Csv => single(
                    "mc_variance.csv",
                    csv_table(
                        "rep,f_hat,f_naive,error,naive_error",
                        (0..rep.replications).map(|r| {
                            vec![r as f64, rep.estimates[r], rep.naive_estimates[r], rep.errors[r], rep.naive_errors[r]]
                        }),
                    ),
                ),
                Format::Svg => {
                    let mut series = vec![ecdf_series("IIE errors", &rep.errors)];
                    if let Some(fit) = rep.normal_fit {
                        let lo = rep.errors.iter().copied().fold(f64::INFINITY, f64::min);
                        let hi = rep.errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        series.push(normal_series(fit.mean, fit.sd, lo, hi));
                    }
                    single("mc_variance.svg", svg::render(&series, "scaled IIE errors")?)
                }
            }
        }
        Command::FlatRate => {
            let rep = run_flat_rate(cfg)?;
            match fmt {
                Format::Json => single("flat_rate.json", to_json(&rep)?),
                Format::Csv => single(
                    "flat_rate.csv",
                    csv_table("n,mean,sd,sd_raw", rep.ladder.iter().map(|p| vec![p.n as f64, p.mean, p.sd, p.sd_raw])),
                ),
                Format::Svg => {
                    let pts = rep.ladder.iter().map(|p| ((p.n as f64).log10(), p.sd_raw.log10())).collect();
                    let series = vec![
                        Series::new("log10 sd", pts, Style::Line),
                        ecdf_series("scaled statistic", &rep.ks_sample),
                        ecdf_series("L_x", &rep.l_x),
                    ];
                    single("flat_rate.svg", svg::render(&series, "flat regime")?)
                }
            }
        }
        Command::GpLimit => {
            let run = run_gp_limit(cfg)?;
            let mut out = vec![
                Artifact { name: "diagnostics.json".into(), contents: to_json(&run.diagnostics)? },
                Artifact { name: "kernel.csv".into(), contents: kernel_csv(&run.spec) },
                Artifact { name: "paths.csv".into(), contents: paths_csv(&run.spec, &run.paths) },
                Artifact { name: "l_x.csv".into(), contents: csv_table("l_x", run.l_x.iter().map(|&v| vec![v])) },
            ];
            if fmt == Format::Svg {
                let series: Vec<Series> = run
                    .paths
                    .iter()
                    .take(20)
                    .enumerate()
                    .map(|(p, path)| {
                        Series::new(format!("path {p}"), run.spec.grid().iter().copied().zip(path.iter().copied()).collect(), Style::Line)
                    })
                    .collect();
                out.push(Artifact { name: "paths.svg".into(), contents: svg::render(&series, "sample paths")? });
            }
            out
        }
        Command::LanCheck => {
            let rep = run_lan_check(cfg)?;
            match fmt {
                Format::Json => single("lan_check.json", to_json(&rep)?),
                Format::Csv => single(
                    "lan_check.csv",
                    csv_table(
                        "rep,loglik,delta1,delta2",
                        rep.loglik.iter().zip(&rep.deltas).enumerate().map(|(r, (l, d))| vec![r as f64, *l, d.0, d.1]),
                    ),
                ),
                Format::Svg => {
                    let pts = rep.ladder_n.iter().zip(&rep.ladder).map(|(n, v)| (n.log10(), *v)).collect();
                    let lim = rep.ladder_n.iter().map(|n| (n.log10(), rep.ladder_limit)).collect();
                    let series = vec![Series::new("ladder", pts, Style::Line), Series::new("limit", lim, Style::Line)];
                    single("lan_check.svg", svg::render(&series, "Hadamard ladder")?)
                }
            }
        }
    })
}

/// Writes artifacts: a single one to `--out` itself, several into the
/// directory `--out`. Without `--out` the first artifact goes to stdout.
pub fn write_artifacts(cfg: &ExperimentConfig, artifacts: &[Artifact]) -> Result<()> {
    let io_err = |p: &Path, e: io::Error| Error::Io(format!("{}: {e}", p.display()));
    match &cfg.out {
        None => {
            use io::Write;
            let first = artifacts.first().map(|a| a.contents.as_str()).unwrap_or("");
            io::stdout().write_all(first.as_bytes()).map_err(|e| Error::Io(e.to_string()))
        }
        Some(out) if artifacts.len() == 1 => std::fs::write(out, &artifacts[0].contents).map_err(|e| io_err(out, e)),
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            for a in artifacts {
                let p = dir.join(&a.name);
                std::fs::write(&p, &a.contents).map_err(|e| io_err(&p, e))?;
            }
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(command: Command) -> ExperimentConfig {
        ExperimentConfig::resolve(Overrides { command: Some(command), ..Default::default() }).unwrap()
    }

    #[test]
    fn estimate_two_rows() {
        let sample = SampleSet::from_values(vec![1.0, 4.0]).unwrap();
        let rows = estimate_table(&sample, &[0.0, 2.0, 5.0]).unwrap();
        assert_eq!(rows[0].f_hat, 0.0);
        assert!((rows[1].f_hat - 0.544_658_198_738_520_5).abs() < 1e-12);
        assert_eq!(rows[2].f_hat, 1.0);
        let csv = estimate_csv(&rows);
        assert!(csv.starts_with("x,f_hat,v_hat,f_naive\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn squared_flag_matches_raw_radii() {
        let raw = parse_observations("1\n2\n", false).unwrap();
        let sq = parse_observations("1\n4\n", true).unwrap();
        assert_eq!(raw, sq);
        assert_eq!(parse_observations("z\n1\n4\n", false).unwrap(), sq);
        assert_eq!(parse_observations("radius\n1\n2\n", false).unwrap(), sq);
    }

    #[test]
    fn input_errors_name_the_row() {
        assert_eq!(parse_observations("", false), Err(Error::EmptySample));
        assert_eq!(parse_observations("radius\n", false), Err(Error::EmptySample));
        assert_eq!(Error::EmptySample.to_string(), "no observations");
        assert!(matches!(parse_observations("1\n-2\n", false), Err(Error::Input { row: 2, .. })));
        assert!(matches!(parse_observations("1\nabc\n", false), Err(Error::Input { row: 2, .. })));
        assert!(matches!(parse_observations("1\n\n3\n", false), Err(Error::Input { row: 2, .. })));
        assert!(matches!(parse_observations("1,2\n", false), Err(Error::Input { row: 1, .. })));
        let e = parse_observations("0.5\nfoo", true).unwrap_err();
        assert!(e.to_string().contains("row 2"), "{e}");
    }

    #[test]
    fn all_zero_data_errors() {
        let sample = SampleSet::from_values(vec![0.0, 0.0]).unwrap();
        assert_eq!(estimate_table(&sample, &[0.5]), Err(Error::AllZero));
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(Grid::from_str("0:1:0.25").unwrap().points(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(Grid::from_str("0,2,5").unwrap().points(), vec![0.0, 2.0, 5.0]);
        assert!(Grid::from_str("1:0:0.1").is_err());
        assert!(Grid::from_str("0:1").is_err());
        assert!(Grid::from_str("a,b").is_err());
    }

    #[test]
    fn flags_override_file() {
        let file = Overrides::from_json(r#"{"command": "mc-variance", "n": 500, "seed": 9, "h": "0.5,1"}"#).unwrap();
        let flags = Overrides { n: Some(1000), ..Default::default() };
        let c = ExperimentConfig::resolve(flags.over(file)).unwrap();
        assert_eq!((c.command, c.n, c.seed, c.h), (Command::McVariance, 1000, 9, (0.5, 1.0)));
        assert!(Overrides::from_json(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = |o: Overrides| ExperimentConfig::resolve(o).is_err();
        assert!(bad(Overrides::default()));
        assert!(bad(Overrides { command: Some(Command::Estimate), n: Some(0), ..Default::default() }));
        assert!(bad(Overrides { command: Some(Command::Estimate), reps: Some(0), ..Default::default() }));
        assert!(bad(Overrides { command: Some(Command::Estimate), h: Some("1".into()), ..Default::default() }));
    }

    #[test]
    fn numbers_have_17_significant_digits() {
        assert_eq!(fmt_num(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_num(0.1).parse::<f64>().unwrap(), 0.1);
        let json = to_json(&vec![0.5, f64::NAN]).unwrap();
        assert!(json.contains("5.0000000000000000e-1") && json.contains("null"), "{json}");
    }

    #[test]
    fn single_replication_has_no_variance() {
        let mut c = cfg(Command::McVariance);
        c.reps = 1;
        c.n = 500;
        let r = run_mc_variance(&c).unwrap();
        assert_eq!(r.estimates.len(), 1);
        assert!(r.variance.is_none() && r.ratio.is_none() && r.normal_fit.is_none());
        assert!((r.theory_variance - 0.129_30).abs() < 5e-6, "{}", r.theory_variance);
    }

    #[test]
    fn mc_variance_independent_of_threads() {
        let mut c = cfg(Command::McVariance);
        c.reps = 6;
        c.n = 2000;
        c.threads = Some(1);
        let a = to_json(&run_mc_variance(&c).unwrap()).unwrap();
        c.threads = Some(3);
        let b = to_json(&run_mc_variance(&c).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_direction_gives_zero_loglik() {
        let mut c = cfg(Command::LanCheck);
        c.h = (0.0, 0.0);
        c.n = 1000;
        c.reps = 4;
        let r = run_lan_check(&c).unwrap();
        assert!(r.loglik.iter().all(|&l| l == 0.0));
        assert_eq!((r.summary.loglik_mean, r.summary.loglik_var), (0.0, 0.0));
    }

    #[test]
    fn lan_ladder_limit() {
        let mut c = cfg(Command::LanCheck);
        c.reps = 2;
        c.n = 1000;
        let r = run_lan_check(&c).unwrap();
        assert!((r.ladder_limit + 0.25).abs() < 1e-12);
        assert_eq!(r.ladder.len(), 4);
    }

    #[test]
    fn flat_rate_needs_flat_model() {
        let mut c = cfg(Command::FlatRate);
        c.model = "uniform01".into();
        c.x = 0.5;
        assert!(matches!(run_flat_rate(&c), Err(Error::Config(_))));
    }

    #[test]
    fn flat_rate_report_shape() {
        let mut c = cfg(Command::FlatRate);
        c.reps = 20;
        c.ks_reps = 20;
        c.ks_n = 500;
        c.paths = 50;
        let r = run_flat_rate(&c).unwrap();
        assert_eq!(r.ladder.iter().map(|p| p.n).collect::<Vec<_>>(), vec![1000, 10_000, 100_000]);
        assert!(r.slope.is_finite() && (r.slope_raw - (r.slope - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn gp_limit_paths_vanish_at_x() {
        let mut c = cfg(Command::GpLimit);
        c.reps = 50;
        let run = run_gp_limit(&c).unwrap();
        assert_eq!(run.paths.len(), 200);
        assert_eq!(run.spec.grid().len(), 241);
        assert_eq!(run.diagnostics.max_abs_at_anchor, 0.0);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Factorization("x".into())), 3);
        let wrapped = Error::Replication { index: 3, source: Box::new(Error::AllZero) };
        assert_eq!(exit_code(&wrapped), 3);
    }
}
