// Scratch probe 9: dissect the noisy-fit failure and the joint-fit ridge.
use aggdiff::approx::{Approximator, ApproximatorSpec};
use aggdiff::data::{add_noise, derive_seed, downsample, interpolate, InterpMethod};
use aggdiff::inference::*;
use aggdiff::model::{KernelSpec, ModelInstance, PotentialSpec};
use aggdiff::steady::{enumerate_steady_states, EnumerateOptions};
use aggdiff::{GridFunction, PeriodicGrid};

fn true_kernel_params(w: &GridFunction, k_max: usize) -> Vec<f64> {
    let l = w.grid().length();
    let neg = w.scale(-1.0);
    let mut params = vec![0.0; k_max + 1];
    params[0] = neg.mean();
    for k in 1..=k_max {
        let om = 2.0 * std::f64::consts::PI * k as f64 / l;
        params[k] = neg.grid().sample(|x| (om * x).cos()).mul(&neg).integrate() * 2.0 / l;
    }
    params
}

fn main() {
    let grid = PeriodicGrid::new(2.0 * std::f64::consts::PI, 256).unwrap();
    let four = ModelInstance::new(
        grid.clone(),
        &KernelSpec::Multimodal { n: 3.0, d: 1.0 },
        &PotentialSpec::Constant,
        13.0,
        1.0,
    )
    .unwrap();
    let states = enumerate_steady_states(&four, &EnumerateOptions::default()).unwrap();

    // --- noisy diagnostics ---
    println!("== noisy (sigma 0.01, n=100) ==");
    let make_obs = |mode: usize| -> Vec<ObservationEntry> {
        states
            .states
            .iter()
            .enumerate()
            .map(|(si, s)| {
                let (samples, method) = match mode {
                    0 => (downsample(&s.profile, 100).unwrap(), InterpMethod::LinearPeriodic),
                    1 => (downsample(&s.profile, 100).unwrap(), InterpMethod::Trig),
                    _ => (downsample(&s.profile, 256).unwrap(), InterpMethod::Trig),
                };
                let noisy = add_noise(&samples, 0.01, derive_seed(1000, "noise", si as u64)).unwrap();
                ObservationEntry::new(interpolate(&noisy, &grid, method).unwrap())
            })
            .collect()
    };
    for (mode, label) in [(0usize, "n100 linear"), (1, "n100 trig"), (2, "n256 trig")] {
        let obs = make_obs(mode);
        let approx = Approximator::new(ApproximatorSpec::default_kernel_fourier(), &grid).unwrap();
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
        // loss at truth
        let truth = true_kernel_params(four.kernel(), 20);
        let pv = aggdiff::approx::ParamVector::from_parts(problem.layout().to_vec(), truth).unwrap();
        let loss_truth = problem.loss(&pv).unwrap();
        let schedule = MultistartSchedule {
            adam: AdamOptions { lr: 1e-3, iters: 30_000, ..AdamOptions::default() },
            lbfgs: LbfgsOptions::default(),
            threshold_factor: 2.0,
            init_scale: 0.01,
        };
        let ens = multistart_fit(&problem, 4, &schedule, 77).unwrap();
        let best = ens.best();
        let w_star = &best.recovered.as_ref().unwrap().kernel;
        let rel = w_star.sub(four.kernel()).norm_l2() / four.kernel().norm_l2();
        println!(
            "{label}: loss(truth) {:.3e}, loss(fit) {:.3e}, rel err {:.3}, W* min {:.3}, W min {:.3}",
            loss_truth,
            best.final_loss,
            rel,
            w_star.min(),
            four.kernel().min()
        );
    }

    // --- joint fit diagnostics ---
    println!("== joint (W,V,kappa) on three-state instance ==");
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
    for (lr, iters) in [(1e-3, 50_000usize), (3e-3, 100_000), (1e-2, 100_000)] {
        let schedule = MultistartSchedule {
            adam: AdamOptions { lr, iters, ..AdamOptions::default() },
            lbfgs: LbfgsOptions::default(),
            threshold_factor: 3.0,
            init_scale: 0.01,
        };
        let t0 = std::time::Instant::now();
        let ens = multistart_fit(&problem, 6, &schedule, 5).unwrap();
        let mut rows = Vec::new();
        for r in &ens.runs {
            let rec = r.recovered.as_ref().unwrap();
            rows.push(format!(
                "(loss {:.1e}, k* {:.2}, Wmin {:.2}, |V|max {:.2})",
                r.final_loss,
                rec.kappa,
                rec.kernel.min(),
                rec.potential.norm_max()
            ));
        }
        println!("lr {lr} iters {iters} [{:.0}s]:", t0.elapsed().as_secs_f64());
        for row in rows {
            println!("   {row}");
        }
    }
}
