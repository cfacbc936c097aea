// Scratch probe 5: default-seed enumeration at candidate fig-1-like kappas,
// and residual_pde versus N for the three problem instances.
use aggdiff::model::{KernelPiece, KernelSpec, ModelInstance, PotentialSpec};
use aggdiff::steady::{enumerate_steady_states, EnumerateOptions};
use aggdiff::PeriodicGrid;

fn main() {
    let l = 2.0 * std::f64::consts::PI;
    let grid = PeriodicGrid::new(l, 256).unwrap();
    for kappa in [12.0, 13.0, 14.0, 16.0] {
        let inst = ModelInstance::new(
            grid.clone(),
            &KernelSpec::Multimodal { n: 3.0, d: 1.0 },
            &PotentialSpec::Constant,
            kappa,
            1.0,
        )
        .unwrap();
        let set = enumerate_steady_states(&inst, &EnumerateOptions::default()).unwrap();
        let diags: Vec<String> = set
            .states
            .iter()
            .map(|s| format!("bd {:.3} min {:.3} max {:.2}", s.branch_diag, s.profile.min(), s.profile.max()))
            .collect();
        println!("default seeds, kappa {kappa}: {} states {:?}", set.len(), diags);
    }

    for n in [256usize, 512, 1024] {
        let grid = PeriodicGrid::new(l, n).unwrap();
        let cases: Vec<(&str, KernelSpec, PotentialSpec, f64)> = vec![
            (
                "tri08_sink_k6",
                KernelSpec::Triangle { w: 0.8 },
                PotentialSpec::Sink { w: 1.0 },
                6.0,
            ),
            (
                "th05_mount_k20",
                KernelSpec::Tophat { w: 0.5 },
                PotentialSpec::Mountain { m: 2, n: 2.0 },
                20.0,
            ),
            (
                "pw1_const_k20",
                KernelSpec::Piecewise(vec![
                    KernelPiece {
                        up_to: Some(0.25),
                        kernel: Box::new(KernelSpec::Tophat { w: 0.5 }),
                    },
                    KernelPiece {
                        up_to: None,
                        kernel: Box::new(KernelSpec::Multimodal { n: 3.0, d: 1.5 }),
                    },
                ]),
                PotentialSpec::Constant,
                20.0,
            ),
        ];
        for (name, w, v, kappa) in cases {
            let inst = ModelInstance::new(grid.clone(), &w, &v, kappa, 1.0).unwrap();
            match enumerate_steady_states(&inst, &EnumerateOptions::default()) {
                Ok(set) => {
                    let worst = set
                        .states
                        .iter()
                        .map(|s| s.residual_pde / s.profile.norm_l2())
                        .fold(0.0f64, f64::max);
                    println!("N={n} {name}: {} states, worst pde/|u| {:.2e}", set.len(), worst);
                }
                Err(e) => println!("N={n} {name}: ERR {e}"),
            }
        }
    }
}
