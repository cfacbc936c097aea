// Scratch probe 8: calibrate noisy recovery, triple recovery, and band-width
// comparisons for the acceptance criteria.
use aggdiff::approx::{Approximator, ApproximatorSpec};
use aggdiff::data::{add_noise, derive_seed, downsample, interpolate, InterpMethod};
use aggdiff::inference::*;
use aggdiff::model::{KernelSpec, ModelInstance, PotentialSpec};
use aggdiff::steady::{enumerate_steady_states, EnumerateOptions};
use aggdiff::PeriodicGrid;

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
    println!("four-state instance: {} states", states.len());

    // (a) noisy kernel recovery across sigma levels, 2 repeats each
    let schedule = MultistartSchedule {
        adam: AdamOptions {
            lr: 1e-3,
            iters: 30_000,
            ..AdamOptions::default()
        },
        lbfgs: LbfgsOptions::default(),
        threshold_factor: 2.0,
        init_scale: 0.01,
    };
    for sigma in [0.0, 0.01, 0.025, 0.05] {
        let mut errs = Vec::new();
        for rep in 0..2u64 {
            let t0 = std::time::Instant::now();
            let obs: Vec<ObservationEntry> = states
                .states
                .iter()
                .enumerate()
                .map(|(si, s)| {
                    let clean = downsample(&s.profile, 100).unwrap();
                    let seed = derive_seed(1000 + rep, "noise", si as u64);
                    let noisy = add_noise(&clean, sigma, seed).unwrap();
                    let method = if sigma == 0.0 {
                        InterpMethod::Trig
                    } else {
                        InterpMethod::LinearPeriodic
                    };
                    ObservationEntry::new(interpolate(&noisy, &grid, method).unwrap())
                })
                .collect();
            let approx =
                Approximator::new(ApproximatorSpec::default_kernel_fourier(), &grid).unwrap();
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
            let ens = multistart_fit(&problem, 4, &schedule, 77 + rep).unwrap();
            let w_star = &ens.best().recovered.as_ref().unwrap().kernel;
            let err = recovery_error(Some(w_star), None, Some(four.kernel()), None);
            let rel = w_star.sub(four.kernel()).norm_l2() / four.kernel().norm_l2();
            errs.push((err, rel, t0.elapsed().as_secs_f64()));
        }
        println!("sigma {sigma}: {errs:?}");
    }

    // (b) triple recovery on the three-state instance
    let fig4 = ModelInstance::new(
        grid.clone(),
        &KernelSpec::Multimodal { n: 2.0, d: 1.5 },
        &PotentialSpec::Plateau { a: 2.0, n: 1.5 },
        5.0,
        1.0,
    )
    .unwrap();
    let f4states = enumerate_steady_states(&fig4, &EnumerateOptions::default()).unwrap();
    println!("three-state instance: {} states", f4states.len());
    let obs: Vec<ObservationEntry> = f4states
        .states
        .iter()
        .map(|s| ObservationEntry::new(s.profile.clone()))
        .collect();
    let t0 = std::time::Instant::now();
    let wk = Approximator::new(ApproximatorSpec::default_kernel_fourier(), &grid).unwrap();
    let vp = Approximator::new(ApproximatorSpec::default_potential_fourier(), &grid).unwrap();
    let problem = InferenceProblem::new(
        &grid,
        1.0,
        obs.clone(),
        ComponentSource::Unknown(wk.clone()),
        ComponentSource::Unknown(vp.clone()),
        KappaSpec::Unknown,
        LossKind::Fp,
    )
    .unwrap();
    let schedule_triple = MultistartSchedule {
        adam: AdamOptions {
            lr: 1e-3,
            iters: 50_000,
            ..AdamOptions::default()
        },
        lbfgs: LbfgsOptions::default(),
        threshold_factor: 3.0,
        init_scale: 0.01,
    };
    let ens = multistart_fit(&problem, 8, &schedule_triple, 5).unwrap();
    let rec = ens.best().recovered.as_ref().unwrap();
    let err = recovery_error(
        Some(&rec.kernel),
        Some(&rec.potential),
        Some(fig4.kernel()),
        Some(fig4.potential()),
    );
    let scale = fig4.kernel().norm_l2().powi(2) + fig4.potential().norm_l2().powi(2);
    println!(
        "triple: kappa* {:.4} (true 5.0), rec err {:.3e} vs 1e-2*scale {:.3e}, loss {:.2e} [{:.0}s]",
        rec.kappa,
        err,
        1e-2 * scale,
        ens.best().final_loss,
        t0.elapsed().as_secs_f64()
    );

    // (c) band widths: {W,V} from one profile vs two profiles (kappa known)
    for count in [1usize, 2] {
        let t0 = std::time::Instant::now();
        let obs: Vec<ObservationEntry> = f4states
            .states
            .iter()
            .rev()
            .take(count)
            .map(|s| ObservationEntry::new(s.profile.clone()))
            .collect();
        let problem = InferenceProblem::new(
            &grid,
            1.0,
            obs,
            ComponentSource::Unknown(wk.clone()),
            ComponentSource::Unknown(vp.clone()),
            KappaSpec::Known(5.0),
            LossKind::Fp,
        )
        .unwrap();
        let schedule_band = MultistartSchedule {
            adam: AdamOptions {
                lr: 1e-3,
                iters: 30_000,
                ..AdamOptions::default()
            },
            lbfgs: LbfgsOptions::default(),
            threshold_factor: 3.0,
            init_scale: 0.1,
        };
        let ens = multistart_fit(&problem, 8, &schedule_band, 9).unwrap();
        let (bw, bv) = identifiability_band(&ens).unwrap();
        println!(
            "{count} obs: band widths W {:.4} V {:.4}, accepted {}/{}, best loss {:.2e} [{:.0}s]",
            bw.width,
            bv.width,
            ens.accepted.len(),
            ens.runs.len(),
            ens.best().final_loss,
            t0.elapsed().as_secs_f64()
        );
    }
}
