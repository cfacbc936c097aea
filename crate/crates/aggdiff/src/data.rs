//! Synthetic observation generation and file I/O.
//!
//! Downsampling evaluates the trigonometric interpolant of a solved profile
//! at evenly spaced locations; noise is an independent clipped Gaussian per
//! point drawn from a counter-based generator keyed by `(seed, point index)`,
//! so draws are reproducible regardless of iteration order or thread count.
//! Noisy projections are renormalized to unit mass before they meet a loss:
//! the fixed-point map always outputs unit mass, and unnormalized data would
//! carry an irreducible residual floor unrelated to parameter error.

use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridFunction, PeriodicGrid};

/// splitmix64; used to fan a master seed out to independent components.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E3779B97F4A7C15);
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Derive a component seed from a master seed and a component name.
pub fn derive_seed(master: u64, component: &str, index: u64) -> u64 {
    // FNV-1a over the component name, then splitmix with the index.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in component.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    mix_seed(master ^ h, index)
}

/// One standard-normal draw for (seed, counter).
fn normal_draw(seed: u64, counter: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, counter));
    rng.sample(StandardNormal)
}

/// Interpolation strategies for projecting samples onto the solver grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterpMethod {
    /// Trigonometric interpolation; exact for band-limited data on uniform
    /// samples but amplifies noise.
    Trig,
    /// Periodic piecewise-linear interpolation; the default for noisy data.
    LinearPeriodic,
}

/// Provenance of an observation, mirrored into observation manifests.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ObservationMeta {
    pub instance: String,
    pub state_id: usize,
    pub noise_sigma: f64,
    pub n_samples: usize,
    pub rng_seed: u64,
}

/// Sparse, possibly noisy samples of a steady-state profile.
#[derive(Clone, Debug)]
pub struct Observation {
    samples: Vec<(f64, f64)>,
    pub meta: ObservationMeta,
}

impl Observation {
    /// Samples must have strictly increasing x within one period and
    /// nonnegative values.
    pub fn new(samples: Vec<(f64, f64)>, meta: ObservationMeta) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Input("observation needs at least two samples".into()));
        }
        for pair in samples.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::Input(format!(
                    "sample locations must be strictly increasing, got {} after {}",
                    pair[1].0, pair[0].0
                )));
            }
        }
        if samples.iter().any(|&(_, u)| u < 0.0) {
            return Err(Error::Input("observation values must be nonnegative".into()));
        }
        Ok(Observation { samples, meta })
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    /// Project the samples onto a solver grid and renormalize to unit mass.
    pub fn interpolate(&self, grid: &PeriodicGrid, method: InterpMethod) -> Result<GridFunction> {
        interpolate(&self.samples, grid, method)
    }
}

/// Evaluate `u` at `n` evenly spaced sample locations starting at the left
/// domain edge, by trigonometric interpolation (exact at solver nodes).
pub fn downsample(u: &GridFunction, n: usize) -> Result<Vec<(f64, f64)>> {
    let grid = u.grid();
    if n < 2 || n > grid.n_points() {
        return Err(Error::Input(format!(
            "sample count {n} out of range 2..={}",
            grid.n_points()
        )));
    }
    let l = grid.length();
    let step = l / n as f64;
    let ratio = grid.n_points() / n;
    let exact_subset = grid.n_points() % n == 0;
    Ok((0..n)
        .map(|s| {
            let x = -l / 2.0 + s as f64 * step;
            let v = if exact_subset {
                u.values()[s * ratio]
            } else {
                u.eval_trig(x)
            };
            (x, v)
        })
        .collect())
}

/// Replace each value with an independent `N(value, sigma)` draw clipped at
/// zero. Deterministic given the seed.
pub fn add_noise(samples: &[(f64, f64)], noise_sigma: f64, seed: u64) -> Result<Vec<(f64, f64)>> {
    if noise_sigma < 0.0 {
        return Err(Error::Input(format!(
            "noise sigma must be nonnegative, got {noise_sigma}"
        )));
    }
    if noise_sigma == 0.0 {
        return Ok(samples.to_vec());
    }
    Ok(samples
        .iter()
        .enumerate()
        .map(|(i, &(x, u))| {
            let z = normal_draw(seed, i as u64);
            (x, (u + noise_sigma * z).max(0.0))
        })
        .collect())
}

/// Interpolate samples onto the solver grid and renormalize to unit mass.
pub fn interpolate(
    samples: &[(f64, f64)],
    grid: &PeriodicGrid,
    method: InterpMethod,
) -> Result<GridFunction> {
    if samples.len() < 2 {
        return Err(Error::Input("need at least two samples to interpolate".into()));
    }
    for pair in samples.windows(2) {
        if pair[1].0 == pair[0].0 {
            return Err(Error::Input(format!("duplicate sample location {}", pair[0].0)));
        }
        if pair[1].0 < pair[0].0 {
            return Err(Error::Input("sample locations must be increasing".into()));
        }
    }
    let l = grid.length();
    let span = samples.last().unwrap().0 - samples[0].0;
    if span >= l {
        return Err(Error::Input(format!(
            "samples span {span:.6} exceeds one period {l:.6}"
        )));
    }
    let raw = match method {
        InterpMethod::Trig => {
            let n = samples.len();
            let step = l / n as f64;
            let uniform = samples
                .windows(2)
                .all(|p| ((p[1].0 - p[0].0) - step).abs() < 1e-9 * l);
            if !uniform {
                return Err(Error::Input(
                    "trig interpolation requires evenly spaced samples".into(),
                ));
            }
            // Treat the samples as nodes of a coarse periodic grid aligned at
            // the same left edge, then evaluate its interpolant on the target.
            if n % 2 == 0 && n >= 8 {
                let coarse = PeriodicGrid::new(l, n)?;
                let cf = coarse.from_values(samples.iter().map(|&(_, u)| u).collect());
                let shift = samples[0].0 + l / 2.0;
                grid.sample(|x| cf.eval_trig(wrap_periodic(x - shift, l)))
            } else {
                // Few or odd sample counts: direct DFT interpolation.
                let vals: Vec<f64> = samples.iter().map(|&(_, u)| u).collect();
                let x0 = samples[0].0;
                let nn = vals.len();
                grid.sample(|x| {
                    let j = (x - x0) / step;
                    dft_interp(&vals, j, nn)
                })
            }
        }
        InterpMethod::LinearPeriodic => grid.sample(|x| {
            let x0 = samples[0].0;
            let pos = wrap_into(x - x0, l);
            // Find the bracketing pair, wrapping the last interval.
            let idx = match samples.binary_search_by(|&(sx, _)| {
                sx.partial_cmp(&(x0 + pos)).unwrap()
            }) {
                Ok(i) => return samples[i].1,
                Err(i) => i,
            };
            if idx == 0 || idx == samples.len() {
                // Between last sample and first sample + L.
                let (xa, ua) = *samples.last().unwrap();
                let (xb, ub) = (samples[0].0 + l, samples[0].1);
                let t = (x0 + pos + if idx == 0 { l } else { 0.0 } - xa) / (xb - xa);
                ua + t * (ub - ua)
            } else {
                let (xa, ua) = samples[idx - 1];
                let (xb, ub) = samples[idx];
                let t = (x0 + pos - xa) / (xb - xa);
                ua + t * (ub - ua)
            }
        }),
    };
    let mass = raw.integrate();
    if !(mass.is_finite() && mass > 0.0) {
        return Err(Error::Input(format!(
            "interpolated profile has nonpositive mass {mass}"
        )));
    }
    Ok(raw.scale(1.0 / mass))
}

fn wrap_periodic(mut x: f64, l: f64) -> f64 {
    while x <= -l / 2.0 {
        x += l;
    }
    while x > l / 2.0 {
        x -= l;
    }
    x
}

fn wrap_into(mut d: f64, l: f64) -> f64 {
    while d < 0.0 {
        d += l;
    }
    while d >= l {
        d -= l;
    }
    d
}

/// Symmetric DFT interpolation of periodic samples at fractional index `j`.
fn dft_interp(vals: &[f64], j: f64, n: usize) -> f64 {
    let mut acc = 0.0;
    let nf = n as f64;
    let mean: f64 = vals.iter().sum::<f64>() / nf;
    acc += mean;
    let half = n / 2;
    for k in 1..=half {
        let (mut re, mut im) = (0.0, 0.0);
        for (m, &v) in vals.iter().enumerate() {
            let ph = 2.0 * std::f64::consts::PI * (k * m) as f64 / nf;
            re += v * ph.cos();
            im -= v * ph.sin();
        }
        re /= nf;
        im /= nf;
        let ph = 2.0 * std::f64::consts::PI * k as f64 * j / nf;
        let weight = if 2 * k == n { 0.5 } else { 1.0 };
        acc += 2.0 * weight * (re * ph.cos() - im * ph.sin());
    }
    acc
}

/// Write samples (or a whole grid function) as CSV with header `x,u`.
pub fn write_solution_csv<P: AsRef<Path>>(path: P, samples: &[(f64, f64)]) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    let mut wtr = BufWriter::new(file);
    writeln!(wtr, "x,u")?;
    for &(x, u) in samples {
        // Shortest round-trip float formatting keeps the file lossless.
        writeln!(wtr, "{x},{u}")?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_grid_function_csv<P: AsRef<Path>>(path: P, f: &GridFunction) -> Result<()> {
    let samples: Vec<(f64, f64)> = f
        .grid()
        .nodes()
        .iter()
        .cloned()
        .zip(f.values().iter().cloned())
        .collect();
    write_solution_csv(path, &samples)
}

/// Read an `x,u` CSV. Negative values are accepted (validation is the
/// consumer's job) but reported back as warnings; unsorted x is an error.
pub fn read_solution_csv<P: AsRef<Path>>(path: P) -> Result<(Vec<(f64, f64)>, Vec<String>)> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    {
        let headers = rdr.headers().map_err(|e| csv_err(path, 1, e))?;
        if headers.len() < 2 || headers[0].to_ascii_lowercase() != "x" || headers[1].to_ascii_lowercase() != "u" {
            return Err(Error::Csv {
                file: path.to_path_buf(),
                line: 1,
                message: format!("expected header `x,u`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
            });
        }
    }
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() < 2 {
            return Err(csv_err(path, line, "expected two columns `x,u`"));
        }
        let x: f64 = record[0]
            .parse()
            .map_err(|_| csv_err(path, line, format!("bad x value `{}`", &record[0])))?;
        let u: f64 = record[1]
            .parse()
            .map_err(|_| csv_err(path, line, format!("bad u value `{}`", &record[1])))?;
        if u < 0.0 {
            warnings.push(format!("{}:{line}: negative u value {u}", path.display()));
        }
        if let Some(&(prev, _)) = out.last() {
            if x <= prev {
                return Err(csv_err(path, line, format!("x values must be increasing ({x} after {prev})")));
            }
        }
        out.push((x, u));
    }
    if out.is_empty() {
        return Err(Error::Input(format!("{}: no data rows", path.display())));
    }
    Ok((out, warnings))
}

fn csv_err<M: std::fmt::Display>(path: &Path, line: u64, message: M) -> Error {
    Error::Csv {
        file: path.to_path_buf(),
        line,
        message: message.to_string(),
    }
}

/// Read a CSV straight onto a grid: exact when the file holds node samples,
/// otherwise interpolated (trig for exact node counts, linear otherwise).
pub fn read_grid_function_csv<P: AsRef<Path>>(
    path: P,
    grid: &PeriodicGrid,
) -> Result<(GridFunction, Vec<String>)> {
    let (samples, warnings) = read_solution_csv(&path)?;
    if samples.len() == grid.n_points() {
        let matches_nodes = samples
            .iter()
            .zip(grid.nodes())
            .all(|(&(x, _), &nx)| (x - nx).abs() < 1e-9 * grid.length());
        if matches_nodes {
            let values = samples.iter().map(|&(_, u)| u).collect();
            return Ok((grid.from_values(values), warnings));
        }
    }
    // General case: periodic linear interpolation, no renormalization (this
    // loader serves tabulated kernels/potentials, not observations).
    let l = grid.length();
    let x0 = samples[0].0;
    let f = grid.sample(|x| {
        let pos = wrap_into(x - x0, l);
        let target = x0 + pos;
        match samples.binary_search_by(|&(sx, _)| sx.partial_cmp(&target).unwrap()) {
            Ok(i) => samples[i].1,
            Err(i) => {
                if i == 0 || i == samples.len() {
                    let (xa, ua) = *samples.last().unwrap();
                    let (xb, ub) = (samples[0].0 + l, samples[0].1);
                    let t = (target + if i == 0 { l } else { 0.0 } - xa) / (xb - xa);
                    ua + t * (ub - ua)
                } else {
                    let (xa, ua) = samples[i - 1];
                    let (xb, ub) = samples[i];
                    let t = (target - xa) / (xb - xa);
                    ua + t * (ub - ua)
                }
            }
        }
    });
    Ok((f, warnings))
}

/// Manifest written next to generated observation files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObservationManifest {
    pub files: Vec<String>,
    pub noise_sigma: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub instance: String,
}
