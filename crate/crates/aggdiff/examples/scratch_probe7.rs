// Scratch probe 7: init scale, learning rate, and polish length for the
// four-state kernel recovery.
use aggdiff::approx::{Approximator, ApproximatorSpec, InitScheme, ParamVector, Segment};
use aggdiff::inference::*;
use aggdiff::model::{KernelSpec, ModelInstance, PotentialSpec};
use aggdiff::steady::{enumerate_steady_states, EnumerateOptions};
use aggdiff::PeriodicGrid;

fn main() {
    let grid = PeriodicGrid::new(2.0 * std::f64::consts::PI, 256).unwrap();
    let inst = ModelInstance::new(
        grid.clone(),
        &KernelSpec::Multimodal { n: 3.0, d: 1.0 },
        &PotentialSpec::Constant,
        13.0,
        1.0,
    )
    .unwrap();
    let set = enumerate_steady_states(&inst, &EnumerateOptions::default()).unwrap();
    let obs: Vec<ObservationEntry> = set
        .states
        .iter()
        .map(|s| ObservationEntry::new(s.profile.clone()))
        .collect();
    let approx = Approximator::new(ApproximatorSpec::default_kernel_fourier(), &grid).unwrap();
    let problem = InferenceProblem::new(
        &grid,
        1.0,
        obs,
        ComponentSource::Unknown(approx.clone()),
        ComponentSource::Known(inst.potential().clone()),
        KappaSpec::Known(inst.kappa()),
        LossKind::Fp,
    )
    .unwrap();

    for (init_scale, lr, iters, lbfgs_iters) in [
        (0.01, 1e-3, 50_000usize, 2000usize),
        (0.01, 3e-3, 50_000, 2000),
        (0.003, 3e-3, 50_000, 2000),
        (0.01, 3e-3, 100_000, 2000),
    ] {
        let t0 = std::time::Instant::now();
        let mut results = Vec::new();
        for seed in 0..4u64 {
            let init = approx.init_params(seed, InitScheme::SmallNormal(init_scale));
            let p0 = ParamVector::from_parts(
                vec![Segment { name: "w".into(), len: init.len() }],
                init,
            )
            .unwrap();
            let adam = adam_run(
                &problem,
                &p0,
                &AdamOptions {
                    lr,
                    iters,
                    ..AdamOptions::default()
                },
            );
            let pol = lbfgs_polish(
                &problem,
                &adam.params,
                &LbfgsOptions {
                    max_iters: lbfgs_iters,
                    ..LbfgsOptions::default()
                },
            );
            let final_fit = if pol.final_loss <= adam.final_loss { pol } else { adam };
            let w_star = &final_fit.recovered.as_ref().unwrap().kernel;
            let rel = w_star.sub(inst.kernel()).norm_l2() / inst.kernel().norm_l2();
            results.push((final_fit.final_loss, rel));
        }
        results.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        println!(
            "init {init_scale} lr {lr} adam {iters} lbfgs {lbfgs_iters}: best (loss {:.2e}, rel {:.4}); all rels {:?} [{:.0}s]",
            results[0].0,
            results[0].1,
            results.iter().map(|r| (r.1 * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            t0.elapsed().as_secs_f64()
        );
    }
}
