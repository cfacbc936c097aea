//! Configuration schemas and the operations behind the `aggdiff` binary:
//! solve, synth, fit, bifurcate, and diagnose.
//!
//! Every command validates its config fully before computing, writes its
//! outputs plus exactly one `manifest.json`, and derives all randomness from
//! the master seed through named streams, so identical configs and seeds
//! reproduce identical output files regardless of thread count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::approx::{Approximator, ApproximatorSpec};
use crate::data::{
    self, add_noise, derive_seed, downsample, read_solution_csv, write_grid_function_csv,
    write_solution_csv, InterpMethod, ObservationManifest,
};
use crate::error::{Error, Result};
use crate::grid::GridFunction;
use crate::inference::{
    deconvolve_kernel, identifiability_band, multistart_fit, nonidentifiability_construct,
    recovery_error, spectrum_report, ComponentSource, InferenceProblem, KappaSpec, LossKind,
    MultistartSchedule, ObservationEntry,
};
use crate::model::{InstanceConfig, ModelInstance};
use crate::steady::{
    bifurcation_points, continue_branch, enumerate_steady_states, free_energy, fp_residual,
    translation_distance, EnumerateOptions, NewtonOptions,
};

/// Run record written once per command invocation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: String,
    pub master_seed: u64,
    pub tool_version: String,
    /// sha256 of the config and of every input file, keyed by path.
    pub input_hashes: BTreeMap<String, String>,
    /// Every file the command wrote, relative to the output directory.
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
    /// Command-specific summary data.
    pub payload: serde_json::Value,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

struct RunContext {
    command: String,
    config_path: PathBuf,
    out_dir: PathBuf,
    master_seed: u64,
    started: Instant,
    input_hashes: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl RunContext {
    fn new(command: &str, config_path: &Path, out_dir: &Path, master_seed: u64) -> Result<Self> {
        std::fs::create_dir_all(out_dir)?;
        let mut input_hashes = BTreeMap::new();
        input_hashes.insert(
            config_path.display().to_string(),
            sha256_file(config_path)?,
        );
        Ok(RunContext {
            command: command.to_string(),
            config_path: config_path.to_path_buf(),
            out_dir: out_dir.to_path_buf(),
            master_seed,
            started: Instant::now(),
            input_hashes,
            outputs: Vec::new(),
        })
    }

    fn record_input(&mut self, path: &Path) -> Result<()> {
        self.input_hashes
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    fn out_path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.out_dir.join(name)
    }

    fn finish(self, payload: serde_json::Value) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: self.command,
            config_path: self.config_path.display().to_string(),
            master_seed: self.master_seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            input_hashes: self.input_hashes,
            outputs: self.outputs,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            payload,
        };
        let path = self.out_dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Solver knobs shared by the commands; maps onto enumeration options.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub random_seeds: usize,
    pub dedup_tol: f64,
    pub tol: f64,
    pub k_seed_max: usize,
    pub amplitudes: Vec<f64>,
    pub picard_steps: usize,
    pub picard_damping: f64,
    pub max_newton: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let e = EnumerateOptions::default();
        SolverConfig {
            random_seeds: e.random_seeds,
            dedup_tol: e.dedup_tol,
            tol: e.newton.tol,
            k_seed_max: e.k_seed_max,
            amplitudes: e.amplitudes,
            picard_steps: e.picard_steps,
            picard_damping: e.picard_damping,
            max_newton: e.newton.max_newton,
        }
    }
}

impl SolverConfig {
    fn to_options(&self, master_seed: u64) -> EnumerateOptions {
        EnumerateOptions {
            random_seeds: self.random_seeds,
            rng_seed: derive_seed(master_seed, "enumerate", 0),
            dedup_tol: self.dedup_tol,
            k_seed_max: self.k_seed_max,
            amplitudes: self.amplitudes.clone(),
            picard_steps: self.picard_steps,
            picard_damping: self.picard_damping,
            newton: NewtonOptions {
                tol: self.tol,
                max_newton: self.max_newton,
                ..NewtonOptions::default()
            },
        }
    }
}

// ---------------------------------------------------------------------------
// solve
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveConfig {
    pub instance: InstanceConfig,
    #[serde(default)]
    pub solver: SolverConfig,
}

#[derive(Serialize)]
struct StateRecord {
    file: String,
    residual_fp: f64,
    residual_pde: f64,
    branch_diag: f64,
    free_energy: f64,
}

/// Enumerate the steady states of a configured instance and write one CSV
/// per state plus the manifest.
pub fn cmd_solve(config_path: &Path, out_dir: &Path, master_seed: u64) -> Result<RunManifest> {
    let config: SolveConfig = read_config(config_path)?;
    let mut ctx = RunContext::new("solve", config_path, out_dir, master_seed)?;
    let base_dir = config_path.parent().unwrap_or(Path::new("."));
    let inst = config.instance.build(base_dir)?;
    let opts = config.solver.to_options(master_seed);
    let set = enumerate_steady_states(&inst, &opts)?;
    let mut records = Vec::new();
    for (i, st) in set.states.iter().enumerate() {
        let name = format!("state_{i:03}.csv");
        write_grid_function_csv(ctx.out_path(&name), &st.profile)?;
        records.push(StateRecord {
            file: name,
            residual_fp: st.residual_fp,
            residual_pde: st.residual_pde,
            branch_diag: st.branch_diag,
            free_energy: free_energy(&st.profile, &inst)?,
        });
    }
    println!("{:<14} {:>12} {:>12} {:>12} {:>12}", "state", "residual_fp", "residual_pde", "branch_diag", "free_energy");
    for r in &records {
        println!(
            "{:<14} {:>12.3e} {:>12.3e} {:>12.6} {:>12.6}",
            r.file, r.residual_fp, r.residual_pde, r.branch_diag, r.free_energy
        );
    }
    ctx.finish(serde_json::json!({ "states": records }))
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub n_samples: usize,
    pub noise_sigma: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub instance: InstanceConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    pub data: Vec<DataSpec>,
}

/// Solve the instance inline, then write downsampled noisy observation files
/// for every state and every `(n, sigma)` pair, with one observation
/// manifest per pair.
pub fn cmd_synth(config_path: &Path, out_dir: &Path, master_seed: u64) -> Result<RunManifest> {
    let config: SynthConfig = read_config(config_path)?;
    if config.data.is_empty() {
        return Err(Error::Config {
            path: "data".into(),
            message: "at least one (n_samples, noise_sigma) entry is required".into(),
        });
    }
    let mut ctx = RunContext::new("synth", config_path, out_dir, master_seed)?;
    let base_dir = config_path.parent().unwrap_or(Path::new("."));
    let inst = config.instance.build(base_dir)?;
    let opts = config.solver.to_options(master_seed);
    let set = enumerate_steady_states(&inst, &opts)?;
    let instance_tag = format!(
        "L={} N={} kappa={}",
        inst.grid().length(),
        inst.grid().n_points(),
        inst.kappa()
    );
    let mut groups = Vec::new();
    for (gi, spec) in config.data.iter().enumerate() {
        let mut files = Vec::new();
        let group_seed = derive_seed(master_seed, "synth", gi as u64);
        for (si, st) in set.states.iter().enumerate() {
            let clean = downsample(&st.profile, spec.n_samples)?;
            let seed = derive_seed(group_seed, "state", si as u64);
            let noisy = add_noise(&clean, spec.noise_sigma, seed)?;
            let name = format!("obs_g{gi}_s{si:03}.csv");
            write_solution_csv(ctx.out_path(&name), &noisy)?;
            files.push(name);
        }
        let manifest = ObservationManifest {
            files: files.clone(),
            noise_sigma: spec.noise_sigma,
            n_samples: spec.n_samples,
            seed: group_seed,
            instance: instance_tag.clone(),
        };
        let name = format!("obs_manifest_g{gi}.json");
        std::fs::write(ctx.out_path(&name), serde_json::to_string_pretty(&manifest)?)?;
        groups.push(manifest);
    }
    ctx.finish(serde_json::json!({
        "n_states": set.len(),
        "groups": groups,
    }))
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FitApproximators {
    #[serde(rename = "W")]
    pub w: Option<ApproximatorSpec>,
    #[serde(rename = "V")]
    pub v: Option<ApproximatorSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub instance: InstanceConfig,
    pub observations: Vec<String>,
    pub unknowns: Vec<String>,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default = "default_starts")]
    pub starts: usize,
    #[serde(default)]
    pub adam: Option<crate::inference::AdamOptions>,
    #[serde(default)]
    pub lbfgs: Option<crate::inference::LbfgsOptions>,
    #[serde(default = "default_threshold")]
    pub threshold_factor: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub approximators: FitApproximators,
    /// Known per-observation kappa values (multi-kappa sampling).
    #[serde(default)]
    pub obs_kappas: Option<Vec<f64>>,
    #[serde(default)]
    pub interp: Option<InterpMethod>,
    /// Re-enumerate steady states under the fitted parameters and compare.
    #[serde(default)]
    pub resolve: bool,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default = "default_informed")]
    pub informed_start: bool,
}

fn default_informed() -> bool {
    true
}

fn default_loss() -> LossKind {
    LossKind::Fp
}
fn default_starts() -> usize {
    8
}
fn default_threshold() -> f64 {
    2.0
}
fn default_init_scale() -> f64 {
    0.01
}

#[derive(Serialize)]
struct RunRecord {
    seed: u64,
    final_loss: f64,
    failed: bool,
    accepted: bool,
}

/// Load an observation CSV onto the solver grid: exact node data is taken
/// as-is (mass renormalized); anything else is interpolated.
pub fn load_observation(
    path: &Path,
    grid: &crate::grid::PeriodicGrid,
    method: Option<InterpMethod>,
) -> Result<GridFunction> {
    let (samples, warnings) = read_solution_csv(path)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    let node_exact = samples.len() == grid.n_points()
        && samples
            .iter()
            .zip(grid.nodes())
            .all(|(&(x, _), &nx)| (x - nx).abs() < 1e-9 * grid.length());
    if node_exact && method.is_none() {
        let f = grid.from_values(samples.iter().map(|&(_, u)| u).collect());
        let mass = f.integrate();
        if !(mass.is_finite() && mass > 0.0) {
            return Err(Error::Input(format!(
                "{}: profile has nonpositive mass",
                path.display()
            )));
        }
        return Ok(f.scale(1.0 / mass));
    }
    let method = method.unwrap_or(InterpMethod::LinearPeriodic);
    data::interpolate(&samples, grid, method)
}

/// Fit the configured unknowns to the observations by multi-start
/// optimization; write the fit result, per-run traces, and the
/// identifiability band.
pub fn cmd_fit(
    config_path: &Path,
    out_dir: &Path,
    master_seed_cli: Option<u64>,
) -> Result<RunManifest> {
    let config: FitConfig = read_config(config_path)?;
    let master_seed = master_seed_cli.or(config.seed).unwrap_or(0);
    let mut ctx = RunContext::new("fit", config_path, out_dir, master_seed)?;
    let base_dir = config_path.parent().unwrap_or(Path::new("."));
    let inst = config.instance.build(base_dir)?;
    let grid = inst.grid().clone();

    for u in &config.unknowns {
        if !["W", "V", "kappa"].contains(&u.as_str()) {
            return Err(Error::Config {
                path: "unknowns".into(),
                message: format!("unknown component `{u}` (expected W, V, kappa)"),
            });
        }
    }
    if config.observations.is_empty() {
        return Err(Error::Config {
            path: "observations".into(),
            message: "at least one observation file is required".into(),
        });
    }
    if let Some(ks) = &config.obs_kappas {
        if ks.len() != config.observations.len() {
            return Err(Error::Config {
                path: "obs_kappas".into(),
                message: format!(
                    "{} kappa values for {} observations",
                    ks.len(),
                    config.observations.len()
                ),
            });
        }
    }

    let mut observations = Vec::new();
    for (i, rel) in config.observations.iter().enumerate() {
        let path = base_dir.join(rel);
        ctx.record_input(&path)?;
        let profile = load_observation(&path, &grid, config.interp)?;
        let mut entry = ObservationEntry::new(profile);
        if let Some(ks) = &config.obs_kappas {
            entry.kappa = Some(ks[i]);
        }
        observations.push(entry);
    }

    let fit_w = config.unknowns.iter().any(|u| u == "W");
    let fit_v = config.unknowns.iter().any(|u| u == "V");
    let fit_kappa = config.unknowns.iter().any(|u| u == "kappa");
    let w_source = if fit_w {
        let spec = config
            .approximators
            .w
            .clone()
            .unwrap_or_else(ApproximatorSpec::default_kernel_fourier);
        ComponentSource::Unknown(Approximator::new(spec, &grid)?)
    } else {
        ComponentSource::Known(inst.kernel().clone())
    };
    let v_source = if fit_v {
        let spec = config
            .approximators
            .v
            .clone()
            .unwrap_or_else(ApproximatorSpec::default_potential_fourier);
        ComponentSource::Unknown(Approximator::new(spec, &grid)?)
    } else {
        ComponentSource::Known(inst.potential().clone())
    };
    let kappa_spec = if fit_kappa {
        KappaSpec::Unknown
    } else {
        KappaSpec::Known(inst.kappa())
    };
    let problem = InferenceProblem::new(
        &grid,
        inst.sigma(),
        observations.clone(),
        w_source,
        v_source,
        kappa_spec,
        config.loss,
    )?;
    let schedule = MultistartSchedule {
        adam: config.adam.clone().unwrap_or_default(),
        lbfgs: config.lbfgs.clone().unwrap_or_default(),
        threshold_factor: config.threshold_factor,
        init_scale: config.init_scale,
        informed_start: config.informed_start,
    };
    let ensemble = match multistart_fit(&problem, config.starts, &schedule, master_seed) {
        Ok(e) => e,
        Err(e) => {
            // Best-effort output for post-mortems, then the failure.
            let path = ctx.out_path("fit_result.json");
            std::fs::write(
                &path,
                serde_json::json!({ "failed": true, "error": e.to_string() }).to_string(),
            )?;
            ctx.finish(serde_json::json!({ "failed": true }))?;
            return Err(e);
        }
    };

    for (i, run) in ensemble.runs.iter().enumerate() {
        let name = format!("trace_run{i:02}.csv");
        let mut text = String::from("iter,best_loss\n");
        for (it, loss) in &run.trace {
            text.push_str(&format!("{it},{loss}\n"));
        }
        std::fs::write(ctx.out_path(&name), text)?;
    }

    let best = ensemble.best();
    let recovered = best
        .recovered
        .as_ref()
        .ok_or_else(|| Error::Input("best run has no realized components".into()))?;
    let (band_w, band_v) = identifiability_band(&ensemble)?;
    // Heuristic identifiability: the accepted ensemble's spread stays well
    // inside the fitted functions' own range.
    let mut identifiable = true;
    if fit_w {
        let range = band_w.best.max() - band_w.best.min();
        identifiable &= band_w.width <= 0.25 * range.max(1e-12);
    }
    if fit_v {
        let range = band_v.best.max() - band_v.best.min();
        identifiable &= band_v.width <= 0.25 * range.max(1e-12);
    }

    let mut band_text = String::from("x,W_min,W_max,W_best,V_min,V_max,V_best\n");
    for (j, &x) in grid.nodes().iter().enumerate() {
        band_text.push_str(&format!(
            "{x},{},{},{},{},{},{}\n",
            band_w.lower.values()[j],
            band_w.upper.values()[j],
            band_w.best.values()[j],
            band_v.lower.values()[j],
            band_v.upper.values()[j],
            band_v.best.values()[j],
        ));
    }
    std::fs::write(ctx.out_path("band.csv"), band_text)?;

    write_grid_function_csv(ctx.out_path("W_star.csv"), &recovered.kernel)?;
    write_grid_function_csv(ctx.out_path("V_star.csv"), &recovered.potential)?;

    let run_records: Vec<RunRecord> = ensemble
        .runs
        .iter()
        .enumerate()
        .map(|(i, r)| RunRecord {
            seed: r.seed,
            final_loss: r.final_loss,
            failed: r.failed,
            accepted: ensemble.accepted.contains(&i),
        })
        .collect();
    let truth_error = recovery_error(
        if fit_w { Some(&recovered.kernel) } else { None },
        if fit_v { Some(&recovered.potential) } else { None },
        if fit_w { Some(inst.kernel()) } else { None },
        if fit_v { Some(inst.potential()) } else { None },
    );
    let fit_result = serde_json::json!({
        "params": serde_json::from_str::<serde_json::Value>(&best.params.to_json())?,
        "final_loss": best.final_loss,
        "kappa_star": recovered.kappa,
        "runs": run_records,
        "identifiable": identifiable,
        "band_width_w": band_w.width,
        "band_width_v": band_v.width,
        "recovery_error_vs_config_truth": truth_error,
        "loss": config.loss,
    });
    std::fs::write(
        ctx.out_path("fit_result.json"),
        serde_json::to_string_pretty(&fit_result)?,
    )?;

    let mut payload = serde_json::json!({
        "final_loss": best.final_loss,
        "kappa_star": recovered.kappa,
        "identifiable": identifiable,
    });
    if config.resolve {
        let refit = ModelInstance::from_realized(
            grid.clone(),
            recovered.kernel.clone(),
            recovered.potential.clone(),
            recovered.kappa,
            inst.sigma(),
        )?;
        let opts = SolverConfig::default().to_options(master_seed);
        let resolved = enumerate_steady_states(&refit, &opts)?;
        let mut files = Vec::new();
        for (i, st) in resolved.states.iter().enumerate() {
            let name = format!("resolved_state_{i:03}.csv");
            write_grid_function_csv(ctx.out_path(&name), &st.profile)?;
            files.push(name);
        }
        // How close does each observation come to its nearest re-solved state?
        let match_distances: Vec<f64> = observations
            .iter()
            .map(|o| {
                resolved
                    .states
                    .iter()
                    .map(|s| translation_distance(&o.profile, &s.profile))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        payload["resolved"] = serde_json::json!({
            "files": files,
            "observation_match_distances": match_distances,
        });
    }
    ctx.finish(payload)
}

// ---------------------------------------------------------------------------
// bifurcate
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BifurcateConfig {
    pub instance: InstanceConfig,
    pub kappa_range: [f64; 2],
    pub steps: usize,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default)]
    pub solver: SolverConfig,
}

fn default_k_max() -> usize {
    8
}

/// Closed-form onset predictions plus a natural-continuation sweep over the
/// kappa range; writes `branch.csv` and `predictions.csv`.
pub fn cmd_bifurcate(config_path: &Path, out_dir: &Path, master_seed: u64) -> Result<RunManifest> {
    let config: BifurcateConfig = read_config(config_path)?;
    let mut ctx = RunContext::new("bifurcate", config_path, out_dir, master_seed)?;
    let base_dir = config_path.parent().unwrap_or(Path::new("."));
    let inst = config.instance.build(base_dir)?;
    let predictions = bifurcation_points(inst.kernel(), inst.sigma(), config.k_max)?;
    let mut pred_text = String::from("k,kappa_star\n");
    for &(k, ks) in &predictions {
        pred_text.push_str(&format!("{k},{ks}\n"));
    }
    std::fs::write(ctx.out_path("predictions.csv"), pred_text)?;

    let opts = config.solver.to_options(master_seed);
    let branch = continue_branch(
        &inst,
        (config.kappa_range[0], config.kappa_range[1]),
        config.steps,
        &opts,
    )?;
    let mut text = String::from("kappa,branch_diag,state_id\n");
    for pt in &branch {
        for &(id, bd, _res) in &pt.states {
            text.push_str(&format!("{},{},{}\n", pt.kappa, bd, id));
        }
    }
    std::fs::write(ctx.out_path("branch.csv"), text)?;
    ctx.finish(serde_json::json!({
        "predictions": predictions,
        "points": branch.len(),
    }))
}

// ---------------------------------------------------------------------------
// diagnose
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QModeConfig {
    pub k: usize,
    pub amplitude: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub instance: InstanceConfig,
    /// State CSV paths; solved inline when absent.
    #[serde(default)]
    pub states: Option<Vec<String>>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default = "default_true")]
    pub deconvolve: bool,
    /// Run the kernel/potential compensation construction with this mode.
    #[serde(default)]
    pub q_mode: Option<QModeConfig>,
}

fn default_true() -> bool {
    true
}

/// Spectrum reports, kernel deconvolution tables, and the compensation
/// (non-identifiability) verification for each state.
pub fn cmd_diagnose(config_path: &Path, out_dir: &Path, master_seed: u64) -> Result<RunManifest> {
    let config: DiagnoseConfig = read_config(config_path)?;
    let mut ctx = RunContext::new("diagnose", config_path, out_dir, master_seed)?;
    let base_dir = config_path.parent().unwrap_or(Path::new("."));
    let inst = config.instance.build(base_dir)?;
    let grid = inst.grid().clone();
    let profiles: Vec<GridFunction> = match &config.states {
        Some(paths) => {
            let mut out = Vec::new();
            for rel in paths {
                let path = base_dir.join(rel);
                ctx.record_input(&path)?;
                out.push(load_observation(&path, &grid, None)?);
            }
            out
        }
        None => {
            let opts = config.solver.to_options(master_seed);
            enumerate_steady_states(&inst, &opts)?
                .states
                .into_iter()
                .map(|s| s.profile)
                .collect()
        }
    };

    let mut payload_states = Vec::new();
    for (i, u) in profiles.iter().enumerate() {
        let report = spectrum_report(u);
        let mut text = String::from("k,magnitude,blind\n");
        for e in &report {
            text.push_str(&format!("{},{},{}\n", e.k, e.magnitude, e.blind));
        }
        let name = format!("spectrum_{i:03}.csv");
        std::fs::write(ctx.out_path(&name), text)?;
        let blind_modes: Vec<usize> = report
            .iter()
            .filter(|e| e.blind && e.k > 0)
            .map(|e| e.k)
            .collect();

        let mut state_payload = serde_json::json!({
            "spectrum_file": name,
            "blind_modes_below_nyquist": blind_modes.len(),
        });

        if config.deconvolve && inst.kappa() > 0.0 {
            let coeffs = deconvolve_kernel(u, inst.potential(), inst.kappa(), inst.sigma())?;
            let mut text = String::from("k,w_coeff,true_coeff,blind\n");
            let mut max_err: f64 = 0.0;
            let mut loud = 0usize;
            for (k, c) in &coeffs {
                let truth = inst.kernel().cosine_coeff(*k).unwrap_or(f64::NAN);
                match c {
                    Some(c) => {
                        text.push_str(&format!("{k},{c},{truth},false\n"));
                        max_err = max_err.max((c - truth).abs());
                        loud += 1;
                    }
                    None => text.push_str(&format!("{k},,{truth},true\n")),
                }
            }
            let name = format!("deconvolved_{i:03}.csv");
            std::fs::write(ctx.out_path(&name), text)?;
            state_payload["deconvolution"] = serde_json::json!({
                "file": name,
                "loud_modes": loud,
                "max_abs_error_vs_true_kernel": max_err,
            });
        }

        if let Some(q) = &config.q_mode {
            let qf = grid.basis_fn(q.k).scale(q.amplitude);
            let (w0, v0) = nonidentifiability_construct(
                inst.kernel(),
                inst.potential(),
                u,
                inst.kappa(),
                &qf,
            )?;
            let alt =
                ModelInstance::from_realized(grid.clone(), w0, v0, inst.kappa(), inst.sigma())?;
            let res = fp_residual(u, &alt)?;
            state_payload["compensation_residual"] = serde_json::json!(res);
        }
        payload_states.push(state_payload);
    }

    let report_path = ctx.out_path("diagnose_report.json");
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&serde_json::json!({ "states": payload_states }))?,
    )?;
    ctx.finish(serde_json::json!({ "states": payload_states }))
}

// ---------------------------------------------------------------------------
// dispatch
// ---------------------------------------------------------------------------

/// The subcommands exposed by the binary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Solve,
    Synth,
    Fit,
    Bifurcate,
    Diagnose,
}

/// Exit codes: 0 success, 2 config error, 3 solver failure, 4 optimizer
/// total failure.
pub fn exit_code_for(command: Command, err: &Error) -> i32 {
    match (command, err) {
        (Command::Fit, Error::NoConvergence { .. }) => 4,
        (_, Error::NoConvergence { .. }) => 3,
        _ => 2,
    }
}

/// Run a command with the given thread budget; errors map to exit codes via
/// [`exit_code_for`].
pub fn run(
    command: Command,
    config: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    threads: Option<usize>,
) -> Result<RunManifest> {
    let work = || -> Result<RunManifest> {
        match command {
            Command::Solve => cmd_solve(config, out_dir, seed.unwrap_or(0)),
            Command::Synth => cmd_synth(config, out_dir, seed.unwrap_or(0)),
            Command::Fit => cmd_fit(config, out_dir, seed),
            Command::Bifurcate => cmd_bifurcate(config, out_dir, seed.unwrap_or(0)),
            Command::Diagnose => cmd_diagnose(config, out_dir, seed.unwrap_or(0)),
        }
    };
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Input(format!("thread pool: {e}")))?;
            pool.install(work)
        }
        None => work(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(path: &Path, text: &str) {
        std::fs::write(path, text).unwrap();
    }

    const FOUR_STATE_INSTANCE: &str = r#"{
        "kappa": 13.0,
        "W": {"family": "multimodal", "params": {"n": 3, "d": 1}},
        "V": {"family": "constant"}
    }"#;

    #[test]
    fn solve_writes_states_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("solve.json");
        write(
            &config,
            &format!(r#"{{"instance": {FOUR_STATE_INSTANCE}}}"#),
        );
        let out = dir.path().join("out");
        let manifest = cmd_solve(&config, &out, 1).unwrap();
        assert_eq!(manifest.command, "solve");
        let states = manifest.payload["states"].as_array().unwrap();
        assert_eq!(states.len(), 4);
        for s in states {
            assert!(s["residual_fp"].as_f64().unwrap() <= 1e-9);
            let file = s["file"].as_str().unwrap();
            assert!(out.join(file).exists());
        }
        assert!(out.join("manifest.json").exists());
    }

    #[test]
    fn solve_gibbs_matches_analytic_state() {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("solve.json");
        write(
            &config,
            r#"{"instance": {
                "kappa": 1.0,
                "W": {"family": "triangle", "params": {"w": 1e-14}},
                "V": {"family": "plateau", "params": {"a": 2, "n": 1.5}}
            }}"#,
        );
        let out = dir.path().join("out");
        let manifest = cmd_solve(&config, &out, 1).unwrap();
        let states = manifest.payload["states"].as_array().unwrap();
        assert_eq!(states.len(), 1);
        let (samples, _) =
            read_solution_csv(out.join(states[0]["file"].as_str().unwrap())).unwrap();
        let grid = crate::grid::PeriodicGrid::new(2.0 * std::f64::consts::PI, 256).unwrap();
        let v = crate::model::realize_potential(
            &crate::model::PotentialSpec::Plateau { a: 2.0, n: 1.5 },
            &grid,
        )
        .unwrap();
        let gibbs = {
            let w = v.map(|x| (-x).exp());
            let z = w.integrate();
            w.scale(1.0 / z)
        };
        for (j, &(_, u)) in samples.iter().enumerate() {
            assert!((u - gibbs.values()[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn synth_outputs_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("synth.json");
        write(
            &config,
            &format!(
                r#"{{"instance": {FOUR_STATE_INSTANCE},
                     "data": [{{"n_samples": 100, "noise_sigma": 0.01}},
                              {{"n_samples": 100, "noise_sigma": 0.0}}]}}"#
            ),
        );
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        cmd_synth(&config, &out_a, 42).unwrap();
        cmd_synth(&config, &out_b, 42).unwrap();
        let mut names: Vec<_> = std::fs::read_dir(&out_a)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| n.ends_with(".csv"))
            .collect();
        names.sort();
        assert!(names.len() >= 8);
        for n in &names {
            let a = std::fs::read(out_a.join(n)).unwrap();
            let b = std::fs::read(out_b.join(n)).unwrap();
            assert_eq!(a, b, "{n} differs between identical runs");
        }
        // Different seeds decorrelate the noisy files but not the clean ones.
        let out_c = dir.path().join("c");
        cmd_synth(&config, &out_c, 43).unwrap();
        let noisy = names.iter().find(|n| n.starts_with("obs_g0")).unwrap();
        let clean = names.iter().find(|n| n.starts_with("obs_g1")).unwrap();
        assert_ne!(
            std::fs::read(out_a.join(noisy)).unwrap(),
            std::fs::read(out_c.join(noisy)).unwrap()
        );
        assert_eq!(
            std::fs::read(out_a.join(clean)).unwrap(),
            std::fs::read(out_c.join(clean)).unwrap()
        );
    }

    #[test]
    fn bifurcate_zero_kernel_has_no_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("bif.json");
        write(
            &config,
            r#"{"instance": {
                "kappa": 1.0,
                "W": {"family": "triangle", "params": {"w": 1e-14}},
                "V": {"family": "constant"}
            }, "kappa_range": [0.5, 1.5], "steps": 3,
               "solver": {"random_seeds": 2}}"#,
        );
        let out = dir.path().join("out");
        let manifest = cmd_bifurcate(&config, &out, 1).unwrap();
        assert_eq!(manifest.payload["predictions"].as_array().unwrap().len(), 0);
        let branch = std::fs::read_to_string(out.join("branch.csv")).unwrap();
        // Constant branch only: every diagnostic is ~0.
        for line in branch.lines().skip(1) {
            let bd: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
            assert!(bd < 1e-10);
        }
    }

    #[test]
    fn fit_rejects_bad_unknowns() {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("fit.json");
        write(
            &config,
            &format!(
                r#"{{"instance": {FOUR_STATE_INSTANCE},
                     "observations": ["missing.csv"],
                     "unknowns": ["Q"]}}"#
            ),
        );
        let err = cmd_fit(&config, &dir.path().join("out"), Some(1)).unwrap_err();
        assert_eq!(exit_code_for(Command::Fit, &err), 2);
    }

    #[test]
    fn diagnose_constant_state_flags_all_modes_blind() {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("diag.json");
        write(
            &config,
            r#"{"instance": {
                "kappa": 0.0,
                "W": {"family": "tophat", "params": {"w": 0.5}},
                "V": {"family": "constant"}
            }, "deconvolve": false, "solver": {"random_seeds": 2}}"#,
        );
        let out = dir.path().join("out");
        let manifest = cmd_diagnose(&config, &out, 1).unwrap();
        let states = manifest.payload["states"].as_array().unwrap();
        assert_eq!(states.len(), 1);
        let blind = states[0]["blind_modes_below_nyquist"].as_u64().unwrap();
        assert_eq!(blind, 127);
    }
}
