//! Built-in kernel and potential families, normalization, and assembly of
//! concrete PDE instances from JSON configs.
//!
//! Realized kernels are normalized to be even and nonpositive with maximum
//! exactly zero (symmetrize, then shift); realized potentials are normalized
//! to zero quadrature mean. Built-ins and approximators therefore live on
//! the same contract, and vertical shifts — which the dynamics cannot see —
//! are fixed deterministically.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::approx::{Approximator, ApproximatorSpec, Role};
use crate::data;
use crate::error::{Error, Result};
use crate::grid::{GridFunction, PeriodicGrid};

/// Interaction-kernel families. Formula parameters follow the published
/// forms; every realization is symmetrized and shifted to max zero.
#[derive(Clone, Debug)]
pub enum KernelSpec {
    /// `-exp(-d x^2) cos(n x / 2)^2`
    Multimodal { n: f64, d: f64 },
    /// `|x| - w` inside `|x| <= w`, zero outside
    Triangle { w: f64 },
    /// `-1` inside `|x| <= w`, zero outside
    Tophat { w: f64 },
    /// `exp(-L/2) - exp(-|x|)`
    Exponential,
    /// Pieces applied on successive `|x|` intervals.
    Piecewise(Vec<KernelPiece>),
    /// Fixed samples (e.g. loaded from CSV); resampled onto the target grid.
    Tabulated(GridFunction),
    /// Parameter-backed approximator with frozen parameter values.
    Approximator {
        spec: ApproximatorSpec,
        values: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
pub struct KernelPiece {
    /// Upper bound on `|x|` for this piece; `None` extends to the domain edge.
    pub up_to: Option<f64>,
    pub kernel: Box<KernelSpec>,
}

/// External-potential families; realizations are mean-subtracted.
#[derive(Clone, Debug)]
pub enum PotentialSpec {
    Constant,
    /// `tanh(a sin(2 n x))`
    Plateau { a: f64, n: f64 },
    /// `-cos((4/pi) tanh(w x) / tanh(w pi / 2))`
    Sink { w: f64 },
    /// `-cos(2 n x) + cos(6 n x) / d`
    Wave { n: f64, d: f64 },
    /// `sin(2 n x)^(1 + 2 m)`
    Mountain { m: u32, n: f64 },
    Tabulated(GridFunction),
    Approximator {
        spec: ApproximatorSpec,
        values: Vec<f64>,
    },
}

impl KernelSpec {
    fn validate(&self, grid: &PeriodicGrid) -> Result<()> {
        let half = grid.length() / 2.0;
        match self {
            KernelSpec::Multimodal { n, d } => {
                if !(*n >= 1.0 && n.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "multimodal n must satisfy n >= 1, got {n}"
                    )));
                }
                if !(*d > 0.0 && d.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "multimodal d must be positive, got {d}"
                    )));
                }
            }
            KernelSpec::Triangle { w } | KernelSpec::Tophat { w } => {
                if !(*w > 0.0 && *w <= half) {
                    return Err(Error::InvalidParameter(format!(
                        "width must lie in (0, L/2] = (0, {half}], got {w}"
                    )));
                }
            }
            KernelSpec::Exponential => {}
            KernelSpec::Piecewise(pieces) => {
                if pieces.is_empty() {
                    return Err(Error::InvalidParameter("piecewise kernel needs pieces".into()));
                }
                let mut prev = 0.0;
                for p in pieces {
                    if let Some(b) = p.up_to {
                        if b <= prev || b > half {
                            return Err(Error::InvalidParameter(format!(
                                "piece bounds must increase within (0, L/2], got {b}"
                            )));
                        }
                        prev = b;
                    }
                    p.kernel.validate(grid)?;
                }
            }
            KernelSpec::Tabulated(_) => {}
            KernelSpec::Approximator { spec, values } => {
                spec.validate()?;
                if spec.role() != Role::Kernel {
                    return Err(Error::InvalidParameter(
                        "kernel approximator must have kernel role".into(),
                    ));
                }
                if values.len() != spec.param_count() {
                    return Err(Error::InvalidParameter(format!(
                        "kernel approximator expects {} values, got {}",
                        spec.param_count(),
                        values.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Point evaluation of the raw (pre-normalization) family formula.
    fn eval_raw(&self, x: f64, grid: &PeriodicGrid) -> Result<f64> {
        Ok(match self {
            KernelSpec::Multimodal { n, d } => {
                -(-d * x * x).exp() * (n * x / 2.0).cos().powi(2)
            }
            KernelSpec::Triangle { w } => {
                if x.abs() <= *w {
                    x.abs() - w
                } else {
                    0.0
                }
            }
            KernelSpec::Tophat { w } => {
                if x.abs() <= *w {
                    -1.0
                } else {
                    0.0
                }
            }
            KernelSpec::Exponential => (-grid.length() / 2.0).exp() - (-x.abs()).exp(),
            KernelSpec::Piecewise(pieces) => {
                let ax = x.abs();
                let mut val = None;
                for p in pieces {
                    match p.up_to {
                        Some(b) if ax <= b => {
                            val = Some(p.kernel.eval_raw(x, grid)?);
                            break;
                        }
                        None => {
                            val = Some(p.kernel.eval_raw(x, grid)?);
                            break;
                        }
                        _ => continue,
                    }
                }
                val.unwrap_or(0.0)
            }
            KernelSpec::Tabulated(f) => {
                if f.grid() == grid {
                    // exact node lookup below through realize; here fall back
                    // to interpolation for off-node x
                    f.eval_trig(x)
                } else {
                    f.eval_trig(x)
                }
            }
            KernelSpec::Approximator { spec, values } => {
                let a = Approximator::new(spec.clone(), grid)?;
                a.eval_raw_at(values, x)?
            }
        })
    }
}

impl PotentialSpec {
    fn validate(&self) -> Result<()> {
        match self {
            PotentialSpec::Constant => {}
            PotentialSpec::Plateau { a, n } => {
                if !a.is_finite() || !(*n > 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "plateau parameters must be finite with n > 0, got a={a}, n={n}"
                    )));
                }
            }
            PotentialSpec::Sink { w } => {
                if !(*w > 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "sink width must be positive, got {w}"
                    )));
                }
            }
            PotentialSpec::Wave { n, d } => {
                if !(*n > 0.0) || *d == 0.0 || !d.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "wave needs n > 0 and d != 0, got n={n}, d={d}"
                    )));
                }
            }
            PotentialSpec::Mountain { n, .. } => {
                if !(*n > 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "mountain needs n > 0, got {n}"
                    )));
                }
            }
            PotentialSpec::Tabulated(_) => {}
            PotentialSpec::Approximator { spec, values } => {
                spec.validate()?;
                if spec.role() != Role::Potential {
                    return Err(Error::InvalidParameter(
                        "potential approximator must have potential role".into(),
                    ));
                }
                if values.len() != spec.param_count() {
                    return Err(Error::InvalidParameter(format!(
                        "potential approximator expects {} values, got {}",
                        spec.param_count(),
                        values.len()
                    )));
                }
            }
        }
        Ok(())
    }

    fn eval_raw(&self, x: f64, grid: &PeriodicGrid) -> Result<f64> {
        Ok(match self {
            PotentialSpec::Constant => 0.0,
            PotentialSpec::Plateau { a, n } => (a * (2.0 * n * x).sin()).tanh(),
            PotentialSpec::Sink { w } => {
                let half_pi = std::f64::consts::FRAC_PI_2;
                -((4.0 / std::f64::consts::PI) * (w * x).tanh() / (w * half_pi).tanh()).cos()
            }
            PotentialSpec::Wave { n, d } => -(2.0 * n * x).cos() + (6.0 * n * x).cos() / d,
            PotentialSpec::Mountain { m, n } => (2.0 * n * x).sin().powi(1 + 2 * *m as i32),
            PotentialSpec::Tabulated(f) => f.eval_trig(x),
            PotentialSpec::Approximator { spec, values } => {
                let a = Approximator::new(spec.clone(), grid)?;
                a.eval_raw_at(values, x)?
            }
        })
    }
}

/// Evaluate a kernel family on the grid, symmetrize, and shift to max zero.
pub fn realize_kernel(spec: &KernelSpec, grid: &PeriodicGrid) -> Result<GridFunction> {
    spec.validate(grid)?;
    let raw = match spec {
        KernelSpec::Tabulated(f) if f.grid() == grid => f.clone(),
        KernelSpec::Approximator { spec, values } => {
            let a = Approximator::new(spec.clone(), grid)?;
            a.eval_raw(values)?
        }
        _ => {
            let mut values = Vec::with_capacity(grid.n_points());
            for &x in grid.nodes() {
                values.push(spec.eval_raw(x, grid)?);
            }
            grid.from_values(values)
        }
    };
    let sym = raw.add(&raw.reflect()).scale(0.5);
    let max = sym.max();
    Ok(sym.map(|v| v - max))
}

/// Evaluate a potential family on the grid and subtract the quadrature mean.
pub fn realize_potential(spec: &PotentialSpec, grid: &PeriodicGrid) -> Result<GridFunction> {
    spec.validate()?;
    let raw = match spec {
        PotentialSpec::Tabulated(f) if f.grid() == grid => f.clone(),
        PotentialSpec::Approximator { spec, values } => {
            let a = Approximator::new(spec.clone(), grid)?;
            a.eval_raw(values)?
        }
        _ => {
            let mut values = Vec::with_capacity(grid.n_points());
            for &x in grid.nodes() {
                values.push(spec.eval_raw(x, grid)?);
            }
            grid.from_values(values)
        }
    };
    let mean = raw.mean();
    Ok(raw.map(|v| v - mean))
}

/// A concrete PDE: realized kernel and potential on a grid, with interaction
/// strength `kappa` and diffusion `sigma`.
#[derive(Clone, Debug)]
pub struct ModelInstance {
    grid: PeriodicGrid,
    kernel: GridFunction,
    potential: GridFunction,
    kappa: f64,
    sigma: f64,
}

impl ModelInstance {
    pub fn new(
        grid: PeriodicGrid,
        kernel_spec: &KernelSpec,
        potential_spec: &PotentialSpec,
        kappa: f64,
        sigma: f64,
    ) -> Result<Self> {
        let kernel = realize_kernel(kernel_spec, &grid)?;
        let potential = realize_potential(potential_spec, &grid)?;
        Self::from_realized(grid, kernel, potential, kappa, sigma)
    }

    /// Assemble from already-realized grid functions (fitted components, the
    /// non-identifiability construction, etc.). Normalization is NOT applied.
    pub fn from_realized(
        grid: PeriodicGrid,
        kernel: GridFunction,
        potential: GridFunction,
        kappa: f64,
        sigma: f64,
    ) -> Result<Self> {
        if !(kappa >= 0.0 && kappa.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "kappa must be nonnegative, got {kappa}"
            )));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        if kernel.grid() != &grid || potential.grid() != &grid {
            return Err(Error::InvalidParameter(
                "kernel/potential grids do not match the instance grid".into(),
            ));
        }
        Ok(ModelInstance {
            grid,
            kernel,
            potential,
            kappa,
            sigma,
        })
    }

    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }

    pub fn kernel(&self) -> &GridFunction {
        &self.kernel
    }

    pub fn potential(&self) -> &GridFunction {
        &self.potential
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn with_kappa(&self, kappa: f64) -> Result<Self> {
        Self::from_realized(
            self.grid.clone(),
            self.kernel.clone(),
            self.potential.clone(),
            kappa,
            self.sigma,
        )
    }
}

// ---------------------------------------------------------------------------
// JSON config schema
// ---------------------------------------------------------------------------

/// Default domain length. The published functional forms are all periodic
/// with period 2*pi (the plateau potential in particular is not periodic on
/// any shorter torus), so that is the default; override per config.
pub const DEFAULT_DOMAIN_LENGTH: f64 = 2.0 * std::f64::consts::PI;

fn default_domain_length() -> f64 {
    DEFAULT_DOMAIN_LENGTH
}

fn default_grid_points() -> usize {
    PeriodicGrid::DEFAULT_N
}

fn default_sigma() -> f64 {
    1.0
}

/// On-disk instance description.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceConfig {
    #[serde(default = "default_domain_length")]
    pub domain_length: f64,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    pub kappa: f64,
    #[serde(rename = "W")]
    pub w: FunctionConfig,
    #[serde(rename = "V")]
    pub v: FunctionConfig,
}

/// One functional component in a config: a family name plus its parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionConfig {
    pub family: String,
    #[serde(default)]
    pub params: serde_json::Map<String, serde_json::Value>,
}

fn cfg_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

fn get_f64(
    params: &serde_json::Map<String, serde_json::Value>,
    key: &str,
    path: &str,
) -> Result<f64> {
    params
        .get(key)
        .ok_or_else(|| cfg_err(path, format!("missing parameter `{key}`")))?
        .as_f64()
        .ok_or_else(|| cfg_err(path, format!("parameter `{key}` must be a number")))
}

impl FunctionConfig {
    fn known_keys(family: &str) -> &'static [&'static str] {
        match family {
            "multimodal" => &["n", "d"],
            "triangle" | "tophat" => &["w"],
            "exponential" | "constant" => &[],
            "piecewise" => &["pieces"],
            "plateau" => &["a", "n"],
            "sink" => &["w"],
            "wave" => &["n", "d"],
            "mountain" => &["m", "n"],
            "tabulated" => &["path"],
            "approximator" => &["spec", "values"],
            _ => &[],
        }
    }

    fn check_keys(&self, path: &str) -> Result<()> {
        let known = Self::known_keys(&self.family);
        for key in self.params.keys() {
            if !known.contains(&key.as_str()) {
                return Err(cfg_err(
                    &format!("{path}.params.{key}"),
                    format!("unknown parameter for family `{}`", self.family),
                ));
            }
        }
        Ok(())
    }

    /// Build a kernel spec; `base_dir` anchors tabulated CSV paths.
    pub fn to_kernel_spec(&self, grid: &PeriodicGrid, base_dir: &Path, path: &str) -> Result<KernelSpec> {
        self.check_keys(path)?;
        let p = &self.params;
        let spec = match self.family.as_str() {
            "multimodal" => KernelSpec::Multimodal {
                n: get_f64(p, "n", path)?,
                d: get_f64(p, "d", path)?,
            },
            "triangle" => KernelSpec::Triangle {
                w: get_f64(p, "w", path)?,
            },
            "tophat" => KernelSpec::Tophat {
                w: get_f64(p, "w", path)?,
            },
            "exponential" => KernelSpec::Exponential,
            "piecewise" => {
                let pieces = p
                    .get("pieces")
                    .ok_or_else(|| cfg_err(path, "missing parameter `pieces`"))?
                    .as_array()
                    .ok_or_else(|| cfg_err(path, "`pieces` must be an array"))?;
                let mut out = Vec::new();
                for (i, piece) in pieces.iter().enumerate() {
                    let ppath = format!("{path}.params.pieces[{i}]");
                    let obj = piece
                        .as_object()
                        .ok_or_else(|| cfg_err(&ppath, "piece must be an object"))?;
                    let up_to = match obj.get("up_to") {
                        None => None,
                        Some(v) => Some(v.as_f64().ok_or_else(|| {
                            cfg_err(&format!("{ppath}.up_to"), "must be a number")
                        })?),
                    };
                    let kernel_cfg: FunctionConfig = serde_json::from_value(
                        obj.get("kernel")
                            .ok_or_else(|| cfg_err(&ppath, "missing `kernel`"))?
                            .clone(),
                    )
                    .map_err(|e| cfg_err(&format!("{ppath}.kernel"), e.to_string()))?;
                    let inner =
                        kernel_cfg.to_kernel_spec(grid, base_dir, &format!("{ppath}.kernel"))?;
                    out.push(KernelPiece {
                        up_to,
                        kernel: Box::new(inner),
                    });
                }
                KernelSpec::Piecewise(out)
            }
            "tabulated" => {
                let rel = p
                    .get("path")
                    .and_then(|v| v.as_str())
                    .ok_or_else(|| cfg_err(path, "tabulated needs a string `path`"))?;
                let full = base_dir.join(rel);
                let (f, _warnings) = data::read_grid_function_csv(&full, grid)?;
                KernelSpec::Tabulated(f)
            }
            "approximator" => {
                let spec: ApproximatorSpec = serde_json::from_value(
                    p.get("spec")
                        .ok_or_else(|| cfg_err(path, "approximator needs `spec`"))?
                        .clone(),
                )
                .map_err(|e| cfg_err(&format!("{path}.params.spec"), e.to_string()))?;
                let values: Vec<f64> = serde_json::from_value(
                    p.get("values")
                        .ok_or_else(|| cfg_err(path, "approximator needs `values`"))?
                        .clone(),
                )
                .map_err(|e| cfg_err(&format!("{path}.params.values"), e.to_string()))?;
                KernelSpec::Approximator { spec, values }
            }
            other => {
                return Err(cfg_err(
                    &format!("{path}.family"),
                    format!("unknown kernel family `{other}`"),
                ))
            }
        };
        spec.validate(grid).map_err(|e| cfg_err(path, e.to_string()))?;
        Ok(spec)
    }

    pub fn to_potential_spec(&self, grid: &PeriodicGrid, base_dir: &Path, path: &str) -> Result<PotentialSpec> {
        self.check_keys(path)?;
        let p = &self.params;
        let spec = match self.family.as_str() {
            "constant" => PotentialSpec::Constant,
            "plateau" => PotentialSpec::Plateau {
                a: get_f64(p, "a", path)?,
                n: get_f64(p, "n", path)?,
            },
            "sink" => PotentialSpec::Sink {
                w: get_f64(p, "w", path)?,
            },
            "wave" => PotentialSpec::Wave {
                n: get_f64(p, "n", path)?,
                d: get_f64(p, "d", path)?,
            },
            "mountain" => {
                let m = get_f64(p, "m", path)?;
                if m < 0.0 || m.fract() != 0.0 {
                    return Err(cfg_err(
                        &format!("{path}.params.m"),
                        "must be a nonnegative integer",
                    ));
                }
                PotentialSpec::Mountain {
                    m: m as u32,
                    n: get_f64(p, "n", path)?,
                }
            }
            "tabulated" => {
                let rel = p
                    .get("path")
                    .and_then(|v| v.as_str())
                    .ok_or_else(|| cfg_err(path, "tabulated needs a string `path`"))?;
                let full = base_dir.join(rel);
                let (f, _warnings) = data::read_grid_function_csv(&full, grid)?;
                PotentialSpec::Tabulated(f)
            }
            "approximator" => {
                let spec: ApproximatorSpec = serde_json::from_value(
                    p.get("spec")
                        .ok_or_else(|| cfg_err(path, "approximator needs `spec`"))?
                        .clone(),
                )
                .map_err(|e| cfg_err(&format!("{path}.params.spec"), e.to_string()))?;
                let values: Vec<f64> = serde_json::from_value(
                    p.get("values")
                        .ok_or_else(|| cfg_err(path, "approximator needs `values`"))?
                        .clone(),
                )
                .map_err(|e| cfg_err(&format!("{path}.params.values"), e.to_string()))?;
                PotentialSpec::Approximator { spec, values }
            }
            other => {
                return Err(cfg_err(
                    &format!("{path}.family"),
                    format!("unknown potential family `{other}`"),
                ))
            }
        };
        spec.validate().map_err(|e| cfg_err(path, e.to_string()))?;
        Ok(spec)
    }
}

impl InstanceConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| cfg_err("instance", e.to_string()))
    }

    pub fn build(&self, base_dir: &Path) -> Result<ModelInstance> {
        let grid = PeriodicGrid::new(self.domain_length, self.grid_points)
            .map_err(|e| cfg_err("domain", e.to_string()))?;
        let w = self.w.to_kernel_spec(&grid, base_dir, "W")?;
        let v = self.v.to_potential_spec(&grid, base_dir, "V")?;
        ModelInstance::new(grid, &w, &v, self.kappa, self.sigma)
            .map_err(|e| cfg_err("instance", e.to_string()))
    }
}

/// Parse a JSON instance config and realize it.
pub fn instance_from_config(json: &str, base_dir: &Path) -> Result<ModelInstance> {
    InstanceConfig::from_json(json)?.build(base_dir)
}
