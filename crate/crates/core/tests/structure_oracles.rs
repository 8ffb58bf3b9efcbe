use ionprep::species::SpeciesData;
use ionprep::structure::{dressed_states, FieldConfig, BOHR_MAGNETON_HZ_PER_T};
use std::f64::consts::PI;

/// Closed-form J = 1/2 energies (rad/s) for total projection m; the first
/// entry belongs to F = I + 1/2 (the root carries the sign of A).
fn breit_rabi(a: f64, g_j: f64, g_i: f64, i: f64, m: f64, b: f64) -> Vec<f64> {
    let mu = 2.0 * PI * BOHR_MAGNETON_HZ_PER_T;
    if (m.abs() - (i + 0.5)).abs() < 1e-12 {
        let s = m.signum();
        return vec![a * i / 2.0 + mu * b * (s * g_j / 2.0 + s * g_i * i)];
    }
    let de = a * (i + 0.5);
    let x = (g_j - g_i) * mu * b / de;
    let root = 0.5 * de * (1.0 + 4.0 * m * x / (2.0 * i + 1.0) + x * x).sqrt();
    let base = -de / (2.0 * (2.0 * i + 1.0)) + g_i * mu * b * m;
    vec![base + root, base - root]
}

#[test]
fn breit_rabi_matches_diagonalisation() {
    for name in SpeciesData::builtin_names() {
        let sp = SpeciesData::builtin(name).unwrap();
        let i = sp.nuclear_spin.value();
        for level in sp.levels.iter().filter(|l| l.j.twice() == 1) {
            let a = 2.0 * PI * level.a_mhz * 1e6;
            for k in 0..20 {
                let b = 1e-4 * (1e3f64).powf(k as f64 / 19.0);
                let states = dressed_states(level, &sp, &FieldConfig::new(b).unwrap()).unwrap();
                let mut m2 = -(2.0 * i as f64 + 1.0) as i32;
                while m2 <= (2.0 * i + 1.0) as i32 {
                    let m = m2 as f64 / 2.0;
                    let expect = breit_rabi(a, level.g_j, sp.nuclear_g_factor, i, m, b);
                    let got: Vec<_> = states.iter().filter(|s| s.label.m.twice() == m2).collect();
                    assert_eq!(got.len(), expect.len(), "{name} {} m={m}", level.name);
                    let scale = a.abs() * (i + 0.5);
                    for e in &expect {
                        let best = got.iter().map(|s| (s.energy - e).abs()).fold(f64::INFINITY, f64::min);
                        assert!(best <= 1e-9 * scale.max(e.abs()), "{name} {} B={b} m={m}: off by {best}", level.name);
                    }
                    if expect.len() == 2 {
                        let upper_f = expect[0];
                        let s = got.iter().find(|s| s.label.f.twice() as f64 == 2.0 * i + 1.0).unwrap();
                        assert!((s.energy - upper_f).abs() <= 1e-9 * scale, "{name} {} B={b} m={m}: label", level.name);
                    }
                    m2 += 2;
                }
            }
        }
    }
}

#[test]
fn eigenvalue_sum_equals_trace() {
    use ionprep::structure::build_hamiltonian;
    let sp = SpeciesData::builtin("Ca43").unwrap();
    for level in &sp.levels {
        for mt in [0.1, 14.6, 28.8, 100.0] {
            let field = FieldConfig::from_millitesla(mt).unwrap();
            let h = build_hamiltonian(level, &sp, &field).unwrap();
            let states = dressed_states(level, &sp, &field).unwrap();
            let sum: f64 = states.iter().map(|s| s.energy).sum();
            let scale = h.iter().fold(0.0f64, |m, v| m.max(v.abs())) * h.nrows() as f64;
            assert!((sum - h.trace()).abs() <= 1e-9 * scale, "{} at {mt} mT", level.name);
        }
    }
}
