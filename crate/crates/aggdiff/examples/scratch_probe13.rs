// Scratch probe 13: potential truncation for the joint fit; gentle-regime
// instance for the noisy study.
use aggdiff::approx::{Approximator, ApproximatorSpec, Role};
use aggdiff::data::{add_noise, derive_seed, downsample, interpolate, InterpMethod};
use aggdiff::inference::*;
use aggdiff::model::{KernelSpec, ModelInstance, PotentialSpec};
use aggdiff::steady::{enumerate_steady_states, EnumerateOptions};
use aggdiff::PeriodicGrid;

fn main() {
    let grid = PeriodicGrid::new(2.0 * std::f64::consts::PI, 256).unwrap();

    // Joint fit with a potential approximator that can represent the target.
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
    for kv in [16usize, 24] {
        let wk = Approximator::new(ApproximatorSpec::default_kernel_fourier(), &grid).unwrap();
        let vp = Approximator::new(
            ApproximatorSpec::Fourier {
                role: Role::Potential,
                k_max: kv,
            },
            &grid,
        )
        .unwrap();
        let problem = InferenceProblem::new(
            &grid,
            1.0,
            obs.clone(),
            ComponentSource::Unknown(wk),
            ComponentSource::Unknown(vp),
            KappaSpec::Unknown,
            LossKind::Fp,
        )
        .unwrap();
        if let Some(seed) = algebraic_seed(&problem) {
            println!("K_V={kv} seed loss {:.3e}", problem.loss(&seed).unwrap());
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
            "K_V={kv}: best loss {:.2e}, kappa* {:.4}, rec_err {:.3e} (bound {:.3e}), accepted {}/{} [{:.0}s]",
            best.final_loss,
            rec.kappa,
            err,
            1e-2 * scale,
            ens.accepted.len(),
            ens.runs.len(),
            t0.elapsed().as_secs_f64()
        );
    }

    // Gentle-regime candidates for the noisy study.
    for kappa in [5.5f64, 6.0, 6.5, 7.0] {
        let inst = ModelInstance::new(
            grid.clone(),
            &KernelSpec::Multimodal { n: 3.0, d: 1.0 },
            &PotentialSpec::Constant,
            kappa,
            1.0,
        )
        .unwrap();
        let set = enumerate_steady_states(&inst, &EnumerateOptions::default()).unwrap();
        let info: Vec<String> = set
            .states
            .iter()
            .map(|s| format!("(bd {:.3}, min {:.4}, max {:.3})", s.branch_diag, s.profile.min(), s.profile.max()))
            .collect();
        println!("kappa {kappa}: {} states {:?}", set.len(), info);
    }

    // Noisy sweep at the most promising gentle kappa.
    let kappa = std::env::args().nth(1).and_then(|v| v.parse().ok()).unwrap_or(6.0);
    let inst = ModelInstance::new(
        grid.clone(),
        &KernelSpec::Multimodal { n: 3.0, d: 1.0 },
        &PotentialSpec::Constant,
        kappa,
        1.0,
    )
    .unwrap();
    let set = enumerate_steady_states(&inst, &EnumerateOptions::default()).unwrap();
    for sigma in [0.0, 0.01, 0.025, 0.05] {
        let mut rels = Vec::new();
        for rep in 0..5u64 {
            let obs: Vec<ObservationEntry> = set
                .states
                .iter()
                .enumerate()
                .map(|(si, s)| {
                    let clean = downsample(&s.profile, 100).unwrap();
                    let noisy = add_noise(
                        &clean,
                        sigma,
                        derive_seed(900 + rep, "noise", si as u64),
                    )
                    .unwrap();
                    let method = if sigma == 0.0 {
                        InterpMethod::Trig
                    } else {
                        InterpMethod::LinearPeriodic
                    };
                    ObservationEntry::new(interpolate(&noisy, &grid, method).unwrap())
                })
                .collect();
            let k_max: usize = std::env::args().nth(2).and_then(|v| v.parse().ok()).unwrap_or(6);
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
                ComponentSource::Known(inst.potential().clone()),
                KappaSpec::Known(inst.kappa()),
                LossKind::Fp,
            )
            .unwrap();
            let schedule = MultistartSchedule {
                adam: AdamOptions {
                    lr: 1e-3,
                    iters: 50_000,
                    ..AdamOptions::default()
                },
                lbfgs: LbfgsOptions::default(),
                threshold_factor: 2.0,
                init_scale: 0.01,
                informed_start: true,
            };
            let ens = multistart_fit(&problem, 8, &schedule, 70 + rep).unwrap();
            let w_star = &ens.best().recovered.as_ref().unwrap().kernel;
            let rel = w_star.sub(inst.kernel()).norm_l2() / inst.kernel().norm_l2();
            rels.push((rel * 1000.0).round() / 1000.0);
        }
        println!("gentle kappa {kappa} sigma {sigma}: rels {rels:?}");
    }
}
