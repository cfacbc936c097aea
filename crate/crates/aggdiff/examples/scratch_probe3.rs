// Scratch probe 3: fig-1 instance on L = pi; onset ladder and state counts.
use aggdiff::model::{KernelSpec, ModelInstance, PotentialSpec};
use aggdiff::steady::{
    bifurcation_points, enumerate_steady_states_with_seeds, EnumerateOptions,
};
use aggdiff::PeriodicGrid;

fn main() {
    for (l, n) in [(std::f64::consts::PI, 256usize), (2.0 * std::f64::consts::PI, 256)] {
        let grid = PeriodicGrid::new(l, n).unwrap();
        let inst = ModelInstance::new(
            grid.clone(),
            &KernelSpec::Multimodal { n: 3.0, d: 1.0 },
            &PotentialSpec::Constant,
            8.0,
            1.0,
        )
        .unwrap();
        let pts = bifurcation_points(inst.kernel(), 1.0, 8).unwrap();
        println!("L = {l:.4}: onsets {:?}", pts.iter().map(|&(k, ks)| format!("k{k}:{ks:.2}")).collect::<Vec<_>>());
        for kappa in [6.0, 7.0, 8.0, 8.5] {
            let inst = inst.with_kappa(kappa).unwrap();
            let mut extra = Vec::new();
            for m in 1..=4usize {
                for a in [0.5, 1.0, 2.0, 4.0, 6.0] {
                    let raw = grid.sample(move |x| {
                        (a * (2.0 * std::f64::consts::PI * m as f64 * x / l).cos()).exp()
                    });
                    let mass = raw.integrate();
                    extra.push(raw.scale(1.0 / mass));
                }
            }
            let opts = EnumerateOptions::default();
            match enumerate_steady_states_with_seeds(&inst, &opts, &extra) {
                Ok(set) => {
                    let diags: Vec<String> = set
                        .states
                        .iter()
                        .map(|s| format!("bd {:.3} pde {:.1e}", s.branch_diag, s.residual_pde / s.profile.norm_l2()))
                        .collect();
                    println!("  kappa {kappa}: {} states {:?}", set.len(), diags);
                }
                Err(e) => println!("  kappa {kappa}: ERR {e}"),
            }
        }
    }
}
