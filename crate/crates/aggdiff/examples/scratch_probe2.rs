// Scratch probe 2: hunt for subcritical multi-peak states of the fig-1 case.
use aggdiff::model::{KernelSpec, ModelInstance, PotentialSpec};
use aggdiff::steady::{
    enumerate_steady_states_with_seeds, newton_krylov_solve, picard_iterate, EnumerateOptions,
    NewtonOptions,
};
use aggdiff::PeriodicGrid;

fn main() {
    let l = 2.0 * std::f64::consts::PI;
    let grid = PeriodicGrid::new(l, 256).unwrap();
    for kappa in [8.0, 9.0, 10.0, 11.0, 12.0] {
        let inst = ModelInstance::new(
            grid.clone(),
            &KernelSpec::Multimodal { n: 3.0, d: 1.0 },
            &PotentialSpec::Constant,
            kappa,
            1.0,
        )
        .unwrap();
        // Peaked ansatz seeds: m equal peaks, normalized exp(a cos(m x)).
        let mut extra = Vec::new();
        for m in 1..=4usize {
            for a in [0.5, 1.0, 2.0, 4.0] {
                let raw = grid.sample(move |x| (a * (m as f64 * x).cos()).exp());
                let mass = raw.integrate();
                extra.push(raw.scale(1.0 / mass));
            }
        }
        let opts = EnumerateOptions::default();
        let set = enumerate_steady_states_with_seeds(&inst, &opts, &extra).unwrap();
        let diags: Vec<String> = set
            .states
            .iter()
            .map(|s| format!("bd {:.3}", s.branch_diag))
            .collect();
        println!("kappa {kappa}: {} states {:?}", set.len(), diags);
        // Direct Newton from each ansatz without picard warm-up.
        for m in 2..=3usize {
            for a in [1.0f64, 2.0, 3.0] {
                let raw = grid.sample(move |x| (a * (m as f64 * x).cos()).exp());
                let mass = raw.integrate();
                let seed = raw.scale(1.0 / mass);
                let direct = newton_krylov_solve(&seed, &inst, &NewtonOptions::default());
                let warm = picard_iterate(&seed, &inst, 1.0, 40, 1e-9)
                    .and_then(|p| newton_krylov_solve(&p.profile, &inst, &NewtonOptions::default()));
                let fmt = |r: &aggdiff::Result<aggdiff::steady::SteadyState>| match r {
                    Ok(s) => format!("bd {:.3}", s.branch_diag),
                    Err(_) => "fail".to_string(),
                };
                println!("  m={m} a={a}: newton {} | picard+newton {}", fmt(&direct), fmt(&warm));
            }
        }
    }
}
