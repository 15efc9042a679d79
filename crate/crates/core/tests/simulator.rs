use gwlab_core::offspring::OffspringLaw;
use gwlab_core::series::Engine;
use gwlab_core::sim::{
    mc_conditional_reduced, mc_small_dev, mc_zubkov, replicate_rng, simulate_population,
    simulate_tree, write_replicate_log, Conditioning, McConfig, PopulationOutcome,
    ReducedTreeSampler, SimOutcome,
};

fn stable(alpha: f64, c: f64) -> OffspringLaw {
    OffspringLaw::stable_frac(alpha, c).unwrap()
}

#[test]
fn population_mean_stays_one() {
    for law in [OffspringLaw::geometric(), stable(1.0, 0.5)] {
        let (n, runs) = (20, 200_000u64);
        let (mut s, mut s2, mut overflow, mut kept) = (0.0, 0.0, 0u64, 0u64);
        for r in 0..runs {
            match simulate_population(&law, n, 1_000_000, &mut replicate_rng(7, r)) {
                PopulationOutcome::Extinct { .. } => kept += 1,
                PopulationOutcome::Survived { z_final } => {
                    let z = z_final as f64;
                    s += z;
                    s2 += z * z;
                    kept += 1;
                }
                PopulationOutcome::Overflow { .. } => overflow += 1,
            }
        }
        assert!((overflow as f64) < 0.001 * runs as f64);
        let mean = s / kept as f64;
        let se = ((s2 / kept as f64 - mean * mean) / kept as f64).sqrt();
        assert!((mean - 1.0).abs() < 5.0 * se, "{law}: mean {mean} ± {se}");
    }
}

#[test]
fn survival_frequency_matches_exact() {
    let law = stable(0.8, 1.0 / 1.8);
    let (n, runs) = (64, 200_000u64);
    let alive = (0..runs)
        .filter(|&r| {
            matches!(
                simulate_population(&law, n, 10_000_000, &mut replicate_rng(3, r)),
                PopulationOutcome::Survived { .. }
            )
        })
        .count() as f64;
    let q = Engine::new(&law).extinction_sequence(n).survival(n);
    let se = (q * (1.0 - q) / runs as f64).sqrt();
    assert!(
        (alive / runs as f64 - q).abs() < 4.0 * se,
        "{} vs {q}",
        alive / runs as f64
    );
}

/// `P(Z(m,n)=j | Z(n)>0)` and the law of `d(n)` from forward trees and from
/// the reduced-tree sampler, both against the exact engine.
#[test]
fn reduced_sampler_and_forward_trees_agree_with_exact() {
    let law = stable(0.5, 2.0 / 3.0);
    let engine = Engine::new(&law);
    let (n, m) = (12, 6);
    let q = engine.extinction_sequence(n).survival(n);
    let exact = engine.reduced_joint(n, m, 64).unwrap();
    let cdf = engine.mrca_distance_cdf(n);

    let mut fwd_width = [0u64; 5];
    let mut fwd_d = vec![0u64; n + 1];
    let mut fwd_n = 0u64;
    let mut seed = 0;
    while fwd_n < 40_000 {
        if let SimOutcome::Survived(run) = simulate_tree(&law, n, seed, 10_000_000) {
            fwd_n += 1;
            fwd_width[(run.reduced_counts[m] as usize).min(4)] += 1;
            fwd_d[run.mrca_distance] += 1;
        }
        seed += 1;
    }
    let sampler = ReducedTreeSampler::new(&law, n).unwrap();
    let draws = 200_000u64;
    let mut red_width = [0u64; 5];
    let mut red_d = vec![0u64; n + 1];
    for r in 0..draws {
        let s = sampler.sample(u64::MAX, m, &mut replicate_rng(21, r));
        red_width[(s.width as usize).min(4)] += 1;
        red_d[s.mrca_distance] += 1;
    }
    for j in 1..4 {
        let p = exact.pmf_reduced[j] / q;
        for (counts, total) in [(&fwd_width, fwd_n), (&red_width, draws)] {
            let f = counts[j] as f64 / total as f64;
            let se = (p * (1.0 - p) / total as f64).sqrt();
            assert!((f - p).abs() < 4.5 * se, "j={j}: {f} vs {p}");
        }
    }
    for r in 1..n {
        let p = cdf[r];
        for (counts, total) in [(&fwd_d, fwd_n), (&red_d, draws)] {
            let f = counts[..=r].iter().sum::<u64>() as f64 / total as f64;
            let se = (p * (1.0 - p) / total as f64).sqrt().max(1e-9);
            assert!((f - p).abs() < 4.5 * se, "r={r}: {f} vs {p}");
        }
    }
}

#[test]
fn both_conditionings_estimate_small_deviation() {
    let law = stable(0.8, 1.0 / 1.8);
    let (n, phi) = (64, 4);
    let exact = Engine::new(&law)
        .small_deviation_prob(n, phi)
        .unwrap()
        .probability;
    for cond in [Conditioning::Forward, Conditioning::ReducedTree] {
        let est = mc_small_dev(
            &law,
            n,
            phi,
            &McConfig::new(300_000, 17).with_conditioning(cond),
        )
        .unwrap();
        let r = &est.result;
        assert_eq!(r.conditioning, cond);
        assert_eq!(r.indeterminate_count, 0);
        assert!(
            (r.estimate - exact).abs() < 4.0 * r.stderr,
            "{cond:?}: {} ± {} vs {exact}",
            r.estimate,
            r.stderr
        );
    }
}

#[test]
fn conditional_histogram_is_close_in_total_variation() {
    let law = stable(0.8, 1.0 / 1.8);
    let engine = Engine::new(&law);
    let x = 1.0;
    // plain forward rejection is only workable at small n
    for (cond, n, phi, reps) in [
        (Conditioning::ReducedTree, 256, 6, 400_000),
        (Conditioning::Forward, 64, 4, 400_000),
    ] {
        let est = mc_conditional_reduced(
            &law,
            n,
            phi,
            x,
            6,
            &McConfig::new(reps, 5).with_conditioning(cond),
        )
        .unwrap();
        assert!(!est.too_few_accepted, "{cond:?}: {} accepted", est.accepted);
        let exact = engine.reduced_joint(n, est.m, est.t).unwrap();
        let top = est.t.min(6);
        let tv: f64 = (1..=top)
            .map(|j| 0.5 * (est.pmf[j] - exact.cond_j_given_h[j]).abs())
            .sum();
        let se: f64 = est.stderr[1..=top].iter().sum();
        assert!(tv <= 3.0 * se, "{cond:?}: TV {tv} vs 3·Σse {}", 3.0 * se);
    }
}

#[test]
fn zubkov_estimate_is_seed_deterministic_and_near_uniform() {
    let law = stable(0.8, 1.0 / 1.8);
    let cfg = McConfig::new(50_000, 8);
    let a = mc_zubkov(&law, 512, &cfg).unwrap();
    let b = mc_zubkov(&law, 512, &cfg).unwrap();
    assert_eq!(a.cdf, b.cdf);
    assert!(a.sup_deviation < 0.05);
}

#[test]
fn replicate_log_has_expected_header() {
    let law = stable(0.8, 1.0 / 1.8);
    let mut cfg = McConfig::new(500, 2);
    cfg.keep_log = true;
    let est = mc_small_dev(&law, 32, 3, &cfg).unwrap();
    assert_eq!(est.log.len(), 500);
    let mut buf = Vec::new();
    write_replicate_log(&est.log, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next(), Some("replicate,z_final,d_n,accepted"));
    assert_eq!(text.lines().count(), 501);
}
