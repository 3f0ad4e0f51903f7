use endow_core::*;
use std::time::Instant;

#[test]
fn scratch_mc() {
    // regime 2 reference set at full criterion scale
    let mp = MarketParams::from_aux(1.0, 1.0, 0.4, 0.5, None, 1.0, 1.0, 1.0).unwrap();
    let pol = Policy::build(&mp).unwrap();
    let t0 = Instant::now();
    let cfg = SimConfig {
        dt: 1e-3,
        horizon: suggested_horizon(&pol, 1e-4),
        npaths: 100_000,
        seed: 2024,
        scheme: Scheme::SymmetrizedEuler,
    };
    println!("horizon = {}", cfg.horizon);
    let (coarse, fine) = mc_value_refined(&pol, &cfg).unwrap();
    println!(
        "R2 coarse: est={:.6} +/- {:.6} z={:+.2}   [{:?}]",
        coarse.estimate, coarse.stderr, coarse.z_score, t0.elapsed()
    );
    println!(
        "R2 fine:   est={:.6} +/- {:.6} z={:+.2}  |diff|/se = {:.2}",
        fine.estimate, fine.stderr, fine.z_score,
        (coarse.estimate - fine.estimate).abs() / coarse.stderr
    );

    // regime 3 set with b2 > 1
    let mp3 = MarketParams::from_aux(1.0, 1.3, 1.2, 0.5, None, 1.0, 1.0, 1.0).unwrap();
    let pol3 = Policy::build(&mp3).unwrap();
    let t0 = Instant::now();
    let cfg3 = SimConfig {
        dt: 1e-3,
        horizon: suggested_horizon(&pol3, 1e-4),
        npaths: 100_000,
        seed: 2025,
        scheme: Scheme::SymmetrizedEuler,
    };
    println!("R3 horizon = {}", cfg3.horizon);
    let (c3, f3) = mc_value_refined(&pol3, &cfg3).unwrap();
    println!(
        "R3 coarse: est={:.6} +/- {:.6} z={:+.2}   [{:?}]",
        c3.estimate, c3.stderr, c3.z_score, t0.elapsed()
    );
    println!(
        "R3 fine:   est={:.6} +/- {:.6} z={:+.2}  |diff|/se = {:.2}",
        f3.estimate, f3.stderr, f3.z_score,
        (c3.estimate - f3.estimate).abs() / c3.stderr
    );

    // regime 1
    let mp1 = MarketParams::from_aux(1.0, 1.3, -0.5, 0.5, None, 1.0, 1.0, 1.0).unwrap();
    let pol1 = Policy::build(&mp1).unwrap();
    let t0 = Instant::now();
    let cfg1 = SimConfig {
        dt: 1e-3,
        horizon: (1e6f64).ln() / (pol1.aux.b1 / (pol1.aux.b4 * 0.5)),
        npaths: 100_000,
        seed: 2026,
        scheme: Scheme::SymmetrizedEuler,
    };
    println!("R1 horizon = {}", cfg1.horizon);
    let (c1, f1) = mc_value_refined(&pol1, &cfg1).unwrap();
    println!(
        "R1 coarse: est={:.6} +/- {:.6} z={:+.2}   [{:?}]",
        c1.estimate, c1.stderr, c1.z_score, t0.elapsed()
    );
    println!(
        "R1 fine:   z={:+.2}  |diff|/se = {:.2}",
        f1.z_score,
        (c1.estimate - f1.estimate).abs() / c1.stderr
    );
}
