// Scratch probe 6: desk-scale kernel recovery quality vs budget.
use aggdiff::approx::{Approximator, ApproximatorSpec};
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
    println!("{} states", set.len());
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
        ComponentSource::Unknown(approx),
        ComponentSource::Known(inst.potential().clone()),
        KappaSpec::Known(inst.kappa()),
        LossKind::Fp,
    )
    .unwrap();
    for iters in [5_000usize, 20_000, 50_000] {
        let schedule = MultistartSchedule {
            adam: AdamOptions {
                lr: 1e-3,
                iters,
                ..AdamOptions::default()
            },
            lbfgs: LbfgsOptions {
                max_iters: 300,
                ..LbfgsOptions::default()
            },
            threshold_factor: 2.0,
        };
        let t0 = std::time::Instant::now();
        let ens = multistart_fit(&problem, 4, &schedule, 2024).unwrap();
        let best = ens.best();
        let w_star = &best.recovered.as_ref().unwrap().kernel;
        let rel = w_star.sub(inst.kernel()).norm_l2() / inst.kernel().norm_l2();
        println!(
            "adam {iters}: best loss {:.3e}, rel W err {:.4}, accepted {}/{}, wall {:.1}s",
            best.final_loss,
            rel,
            ens.accepted.len(),
            ens.runs.len(),
            t0.elapsed().as_secs_f64()
        );
    }
}
