// Scratch probe 12: informed-start joint fit; noisy fits without the
// deep-vacuum state.
use aggdiff::approx::{Approximator, ApproximatorSpec, Role};
use aggdiff::data::{add_noise, derive_seed, downsample, interpolate, InterpMethod};
use aggdiff::inference::*;
use aggdiff::model::{KernelSpec, ModelInstance, PotentialSpec};
use aggdiff::steady::{enumerate_steady_states, EnumerateOptions};
use aggdiff::PeriodicGrid;

fn main() {
    let grid = PeriodicGrid::new(2.0 * std::f64::consts::PI, 256).unwrap();

    // Joint (W, V, kappa) with the informed start.
    let fig4 = ModelInstance::new(
        grid.clone(),
        &KernelSpec::Multimodal { n: 2.0, d: 1.5 },
        &PotentialSpec::Plateau { a: 2.0, n: 1.5 },
        5.0,
        1.0,
    )
    .unwrap();
    let f4states = enumerate_steady_states(&fig4, &EnumerateOptions::default()).unwrap();
    let obs: Vec<ObservationEntry> = f4states
        .states
        .iter()
        .map(|s| ObservationEntry::new(s.profile.clone()))
        .collect();
    let wk = Approximator::new(ApproximatorSpec::default_kernel_fourier(), &grid).unwrap();
    let vp = Approximator::new(ApproximatorSpec::default_potential_fourier(), &grid).unwrap();
    let problem = InferenceProblem::new(
        &grid,
        1.0,
        obs,
        ComponentSource::Unknown(wk),
        ComponentSource::Unknown(vp),
        KappaSpec::Unknown,
        LossKind::Fp,
    )
    .unwrap();
    // Inspect the raw algebraic seed quality first.
    if let Some(seed) = algebraic_seed(&problem) {
        let loss = problem.loss(&seed).unwrap();
        let rec = problem.realize(&seed).unwrap();
        let err = recovery_error(
            Some(&rec.kernel),
            Some(&rec.potential),
            Some(fig4.kernel()),
            Some(fig4.potential()),
        );
        println!(
            "algebraic seed: loss {:.3e}, kappa0 {:.4}, rec_err {:.3e}",
            loss, rec.kappa, err
        );
    } else {
        println!("algebraic seed unavailable!");
    }
    let schedule = MultistartSchedule {
        adam: AdamOptions {
            lr: 1e-3,
            iters: 50_000,
            ..AdamOptions::default()
        },
        lbfgs: LbfgsOptions::default(),
        threshold_factor: 3.0,
        init_scale: 0.01,
        informed_start: true,
    };
    let t0 = std::time::Instant::now();
    let ens = multistart_fit(&problem, 8, &schedule, 5).unwrap();
    let best = ens.best();
    let rec = best.recovered.as_ref().unwrap();
    let err = recovery_error(
        Some(&rec.kernel),
        Some(&rec.potential),
        Some(fig4.kernel()),
        Some(fig4.potential()),
    );
    let scale = fig4.kernel().norm_l2().powi(2) + fig4.potential().norm_l2().powi(2);
    println!(
        "joint best: loss {:.2e}, kappa* {:.4}, rec_err {:.3e} (bound {:.3e}), accepted {}/{} [{:.0}s]",
        best.final_loss,
        rec.kappa,
        err,
        1e-2 * scale,
        ens.accepted.len(),
        ens.runs.len(),
        t0.elapsed().as_secs_f64()
    );

    // Noisy kernel-only fits on the four-state instance without the bump.
    let four = ModelInstance::new(
        grid.clone(),
        &KernelSpec::Multimodal { n: 3.0, d: 1.0 },
        &PotentialSpec::Constant,
        13.0,
        1.0,
    )
    .unwrap();
    let states = enumerate_steady_states(&four, &EnumerateOptions::default()).unwrap();
    let mins: Vec<f64> = states.states.iter().map(|s| s.profile.min()).collect();
    println!("state minima: {mins:?}");
    for sigma in [0.0, 0.01, 0.025, 0.05] {
        let obs: Vec<ObservationEntry> = states
            .states
            .iter()
            .take(3) // constant, 3-peak, 2-peak: skip the near-vacuum bump
            .enumerate()
            .map(|(si, s)| {
                let clean = downsample(&s.profile, 100).unwrap();
                let noisy = add_noise(&clean, sigma, derive_seed(1000, "noise", si as u64)).unwrap();
                let method = if sigma == 0.0 {
                    InterpMethod::Trig
                } else {
                    InterpMethod::LinearPeriodic
                };
                ObservationEntry::new(interpolate(&noisy, &grid, method).unwrap())
            })
            .collect();
        let approx = Approximator::new(
            ApproximatorSpec::Fourier {
                role: Role::Kernel,
                k_max: 10,
            },
            &grid,
        )
        .unwrap();
        let problem = InferenceProblem::new(
            &grid,
            1.0,
            obs,
            ComponentSource::Unknown(approx),
            ComponentSource::Known(four.potential().clone()),
            KappaSpec::Known(four.kappa()),
            LossKind::Fp,
        )
        .unwrap();
        let schedule = MultistartSchedule {
            adam: AdamOptions {
                lr: 1e-3,
                iters: 30_000,
                ..AdamOptions::default()
            },
            lbfgs: LbfgsOptions::default(),
            threshold_factor: 2.0,
            init_scale: 0.01,
            informed_start: true,
        };
        let ens = multistart_fit(&problem, 4, &schedule, 77).unwrap();
        let w_star = &ens.best().recovered.as_ref().unwrap().kernel;
        let rel = w_star.sub(four.kernel()).norm_l2() / four.kernel().norm_l2();
        let err = recovery_error(Some(w_star), None, Some(four.kernel()), None);
        println!(
            "no-bump K=10 sigma={sigma}: rel {:.3}, rec_err {:.3e}, loss {:.2e}",
            rel,
            err,
            ens.best().final_loss
        );
    }
}
