// Scratch probe 10: gauge-anchored joint fit; truncation order vs noise.
use aggdiff::approx::{Approximator, ApproximatorSpec, Role};
use aggdiff::data::{add_noise, derive_seed, downsample, interpolate, InterpMethod};
use aggdiff::inference::*;
use aggdiff::model::{KernelSpec, ModelInstance, PotentialSpec};
use aggdiff::steady::{enumerate_steady_states, EnumerateOptions};
use aggdiff::PeriodicGrid;

fn main() {
    let grid = PeriodicGrid::new(2.0 * std::f64::consts::PI, 256).unwrap();

    // joint (W, V, kappa) with the depth anchor
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
    for (lr, iters) in [(1e-3, 50_000usize), (3e-3, 100_000)] {
        let schedule = MultistartSchedule {
            adam: AdamOptions { lr, iters, ..AdamOptions::default() },
            lbfgs: LbfgsOptions::default(),
            threshold_factor: 3.0,
            init_scale: 0.01,
        };
        let t0 = std::time::Instant::now();
        let ens = multistart_fit(&problem, 8, &schedule, 5).unwrap();
        println!("joint lr {lr} iters {iters} [{:.0}s]:", t0.elapsed().as_secs_f64());
        for r in &ens.runs {
            let rec = r.recovered.as_ref().unwrap();
            let err = recovery_error(
                Some(&rec.kernel),
                Some(&rec.potential),
                Some(fig4.kernel()),
                Some(fig4.potential()),
            );
            println!(
                "   loss {:.1e}, k* {:.3}, Wmin {:.3}, rec_err {:.2e}",
                r.final_loss,
                rec.kappa,
                rec.kernel.min(),
                err
            );
        }
    }

    // truncation order vs noise for kernel-only recovery (four-state case)
    let four = ModelInstance::new(
        grid.clone(),
        &KernelSpec::Multimodal { n: 3.0, d: 1.0 },
        &PotentialSpec::Constant,
        13.0,
        1.0,
    )
    .unwrap();
    let states = enumerate_steady_states(&four, &EnumerateOptions::default()).unwrap();
    for k_max in [8usize, 10, 12] {
        for sigma in [0.0, 0.01, 0.025] {
            let obs: Vec<ObservationEntry> = states
                .states
                .iter()
                .enumerate()
                .map(|(si, s)| {
                    let clean = downsample(&s.profile, 100).unwrap();
                    let noisy =
                        add_noise(&clean, sigma, derive_seed(1000, "noise", si as u64)).unwrap();
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
                    k_max,
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
                adam: AdamOptions { lr: 1e-3, iters: 30_000, ..AdamOptions::default() },
                lbfgs: LbfgsOptions::default(),
                threshold_factor: 2.0,
                init_scale: 0.01,
            };
            let ens = multistart_fit(&problem, 4, &schedule, 77).unwrap();
            let w_star = &ens.best().recovered.as_ref().unwrap().kernel;
            let rel = w_star.sub(four.kernel()).norm_l2() / four.kernel().norm_l2();
            println!(
                "K={k_max} sigma={sigma}: rel {:.3}, loss {:.2e}",
                rel,
                ens.best().final_loss
            );
        }
    }
}
