// Scratch probe: state counts and residual magnitudes per instance.
use aggdiff::model::{KernelPiece, KernelSpec, ModelInstance, PotentialSpec};
use aggdiff::steady::{enumerate_steady_states, free_energy, EnumerateOptions};
use aggdiff::PeriodicGrid;

fn main() {
    let n: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(256);
    let l: f64 = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(2.0 * std::f64::consts::PI);
    let grid = PeriodicGrid::new(l, n).unwrap();
    let pw1 = KernelSpec::Piecewise(vec![
        KernelPiece { up_to: Some(0.25), kernel: Box::new(KernelSpec::Tophat { w: 0.5 }) },
        KernelPiece { up_to: None, kernel: Box::new(KernelSpec::Multimodal { n: 3.0, d: 1.5 }) },
    ]);
    let pw2 = KernelSpec::Piecewise(vec![
        KernelPiece { up_to: Some(0.15), kernel: Box::new(KernelSpec::Tophat { w: 0.5 }) },
        KernelPiece { up_to: None, kernel: Box::new(KernelSpec::Multimodal { n: 3.0, d: 1.5 }) },
    ]);
    let cases: Vec<(&str, KernelSpec, PotentialSpec, f64)> = vec![
        ("tri06_const_k10", KernelSpec::Triangle { w: 0.6 }, PotentialSpec::Constant, 10.0),
        ("th05_const_k6", KernelSpec::Tophat { w: 0.5 }, PotentialSpec::Constant, 6.0),
        ("mm52_const_k10", KernelSpec::Multimodal { n: 5.0, d: 2.0 }, PotentialSpec::Constant, 10.0),
        ("pw1_const_k20", pw1, PotentialSpec::Constant, 20.0),
        ("exp_const_k10", KernelSpec::Exponential, PotentialSpec::Constant, 10.0),
        ("pw2_const_k10", pw2, PotentialSpec::Constant, 10.0),
        ("mm5_05_const_k20", KernelSpec::Multimodal { n: 5.0, d: 0.5 }, PotentialSpec::Constant, 20.0),
        ("mm32_const_k6", KernelSpec::Multimodal { n: 3.0, d: 2.0 }, PotentialSpec::Constant, 6.0),
        ("FIG1_mm31_const_k8", KernelSpec::Multimodal { n: 3.0, d: 1.0 }, PotentialSpec::Constant, 8.0),
        ("FIG4_mm2_15_plat_k5", KernelSpec::Multimodal { n: 2.0, d: 1.5 }, PotentialSpec::Plateau { a: 2.0, n: 1.5 }, 5.0),
        ("mm13_const_k30", KernelSpec::Multimodal { n: 1.0, d: 3.0 }, PotentialSpec::Constant, 30.0),
        ("mm32_const_k8", KernelSpec::Multimodal { n: 3.0, d: 2.0 }, PotentialSpec::Constant, 8.0),
        ("tri04_const_k19", KernelSpec::Triangle { w: 0.4 }, PotentialSpec::Constant, 19.0),
        ("tri08_sink_k6", KernelSpec::Triangle { w: 0.8 }, PotentialSpec::Sink { w: 1.0 }, 6.0),
        ("tri08_wave_k10", KernelSpec::Triangle { w: 0.8 }, PotentialSpec::Wave { n: 1.0, d: 1.0 }, 10.0),
        ("mm13_plat22_k20", KernelSpec::Multimodal { n: 1.0, d: 3.0 }, PotentialSpec::Plateau { a: 2.0, n: 2.0 }, 20.0),
        ("th05_mount_k20", KernelSpec::Tophat { w: 0.5 }, PotentialSpec::Mountain { m: 2, n: 2.0 }, 20.0),
    ];
    println!("L = {l:.4}, N = {n}");
    for (name, w, v, kappa) in cases {
        let inst = match ModelInstance::new(grid.clone(), &w, &v, kappa, 1.0) {
            Ok(i) => i,
            Err(e) => {
                println!("{name}: REALIZE ERROR {e}");
                continue;
            }
        };
        let t0 = std::time::Instant::now();
        match enumerate_steady_states(&inst, &EnumerateOptions::default()) {
            Ok(set) => {
                let worst_rel = set
                    .states
                    .iter()
                    .map(|s| s.residual_pde / s.profile.norm_l2())
                    .fold(0.0f64, f64::max);
                let diags: Vec<String> = set
                    .states
                    .iter()
                    .map(|s| {
                        format!(
                            "(bd {:.3e}, fp {:.1e}, pde/|u| {:.1e}, F {:.4})",
                            s.branch_diag,
                            s.residual_fp,
                            s.residual_pde / s.profile.norm_l2(),
                            free_energy(&s.profile, &inst).unwrap()
                        )
                    })
                    .collect();
                println!(
                    "{name}: {} states, worst pde/|u| {:.2e}, {:?} [{:.2}s]",
                    set.len(),
                    worst_rel,
                    diags,
                    t0.elapsed().as_secs_f64()
                );
            }
            Err(e) => println!("{name}: ENUM ERROR {e}"),
        }
    }
}
