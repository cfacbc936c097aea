// Scratch probe 4: broad mixed-mode seed sweep at kappa = 8, plus downward
// fold tracking of the 2- and 3-peak branches.
use aggdiff::model::{KernelSpec, ModelInstance, PotentialSpec};
use aggdiff::steady::{
    newton_krylov_solve, translation_distance, NewtonOptions,
};
use aggdiff::{GridFunction, PeriodicGrid};

fn distinct(states: &mut Vec<GridFunction>, cand: GridFunction, tol: f64) {
    if !states.iter().any(|s| translation_distance(s, &cand) < tol) {
        states.push(cand);
    }
}

fn main() {
    let l = 2.0 * std::f64::consts::PI;
    let grid = PeriodicGrid::new(l, 256).unwrap();
    let base = ModelInstance::new(
        grid.clone(),
        &KernelSpec::Multimodal { n: 3.0, d: 1.0 },
        &PotentialSpec::Constant,
        8.0,
        1.0,
    )
    .unwrap();

    // Mixed-mode seed sweep at kappa = 8.
    let inst = base.clone();
    let mut found: Vec<GridFunction> = Vec::new();
    let amps = [-4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0];
    let mut tried = 0;
    for &a in &amps {
        for &b in &amps {
            for &c in &[0.0, 1.0, 2.0, 4.0] {
                tried += 1;
                let raw = grid.sample(move |x| (a * x.cos() + b * (2.0 * x).cos() + c * (3.0 * x).cos()).exp());
                let m = raw.integrate();
                let seed = raw.scale(1.0 / m);
                if let Ok(st) = newton_krylov_solve(&seed, &inst, &NewtonOptions::default()) {
                    distinct(&mut found, st.profile, 1e-3);
                }
            }
        }
    }
    println!("kappa 8, L=2pi: {} distinct states from {tried} mixed seeds", found.len());
    for s in &found {
        println!("  bd {:.4}, max {:.3}", aggdiff::steady::branch_diagnostic(s), s.max());
    }

    // Track the 2-peak branch downward from kappa = 10.
    for (m, kappa_hi) in [(2usize, 10.0f64), (3, 12.0)] {
        let raw = grid.sample(move |x| (2.0 * (m as f64 * x).cos()).exp());
        let mass = raw.integrate();
        let mut profile = raw.scale(1.0 / mass);
        let mut kappa = kappa_hi;
        let inst_hi = base.with_kappa(kappa).unwrap();
        match newton_krylov_solve(&profile, &inst_hi, &NewtonOptions::default()) {
            Ok(st) => profile = st.profile,
            Err(e) => {
                println!("m={m}: seed failed at kappa {kappa}: {e}");
                continue;
            }
        }
        let mut last_good = kappa;
        while kappa > 7.0 {
            kappa -= 0.05;
            let inst = base.with_kappa(kappa).unwrap();
            match newton_krylov_solve(&profile, &inst, &NewtonOptions::default()) {
                Ok(st) => {
                    // Guard against collapsing onto a different branch.
                    let bd = st.branch_diag;
                    if bd < 1e-6 {
                        println!("m={m}-peak branch merged with constant at kappa {kappa:.2}");
                        break;
                    }
                    let k_peaks = count_peaks(&st.profile);
                    if k_peaks != m {
                        println!("m={m}-peak branch switched to {k_peaks} peaks at kappa {kappa:.2}");
                        break;
                    }
                    profile = st.profile;
                    last_good = kappa;
                }
                Err(_) => {
                    println!("m={m}-peak branch lost (fold) near kappa {:.2}", kappa + 0.05);
                    break;
                }
            }
        }
        println!("m={m}: branch followed down to kappa {last_good:.2}");
    }
}

fn count_peaks(u: &GridFunction) -> usize {
    let v = u.values();
    let n = v.len();
    let mean = u.mean();
    let mut peaks = 0;
    for j in 0..n {
        let prev = v[(j + n - 1) % n];
        let next = v[(j + 1) % n];
        if v[j] > prev && v[j] >= next && v[j] > 1.2 * mean {
            peaks += 1;
        }
    }
    peaks
}
