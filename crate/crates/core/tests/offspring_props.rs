use gwlab_core::offspring::{LawSpec, OffspringLaw, Param};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn stable(alpha: f64, c: f64) -> OffspringLaw {
    OffspringLaw::stable_frac(alpha, c).unwrap()
}

/// Valid `c` lies in `(0, 1/(1+α)]`.
fn law_strategy() -> impl Strategy<Value = OffspringLaw> {
    (0.05f64..0.999, 0.05f64..1.0).prop_map(|(a, frac)| stable(a, frac / (1.0 + a)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pmf_and_tail_partition_unity(law in law_strategy(), t in 0u64..2000) {
        let head: f64 = (0..=t).map(|j| law.pmf(j)).sum();
        prop_assert!((head + law.tail(t + 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tail_differences_are_pmf(law in law_strategy(), j in 0u64..10_000) {
        let d = law.tail(j) - law.tail(j + 1);
        prop_assert!((d - law.pmf(j)).abs() < 1e-12, "j={} diff={} pmf={}", j, d, law.pmf(j));
    }

    #[test]
    fn derivative_at_zero_recovers_pmf(law in law_strategy(), k in 0u32..=30) {
        let fact: f64 = (1..=k).map(f64::from).product();
        let v = law.derivative(k, 0.0).unwrap() / fact;
        let p = law.pmf(u64::from(k));
        prop_assert!((v - p).abs() <= 1e-12 * p.max(1e-300) + 1e-300, "k={} {} vs {}", k, v, p);
    }

    #[test]
    fn pgf_matches_power_sum(law in law_strategy(), s in 0.0f64..0.9) {
        let direct: f64 = (0..4000u64).map(|j| law.pmf(j) * s.powi(j as i32)).sum();
        prop_assert!((law.pgf(s).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip(a in 0.05f64..0.999, num in 1i64..50) {
        let den = ((1.0 + a) * num as f64).ceil() as i64 + 1;
        let spec = LawSpec::stable_frac(Param::Float(a), Param::Ratio { num, den });
        let law = spec.build().unwrap();
        let back = OffspringLaw::from_json(&law.to_json()).unwrap();
        prop_assert_eq!(back.spec(), law.spec());
        prop_assert_eq!(back.pmf(7).to_bits(), law.pmf(7).to_bits());
    }
}

#[test]
fn scaled_tail_stabilizes() {
    for (a, c) in [(0.5, 2.0 / 3.0), (0.8, 1.0 / 1.8), (0.2, 0.5)] {
        let law = stable(a, c);
        let scaled = |j: u64| law.tail(j) * (j as f64).powf(1.0 + a);
        let (x, y) = (scaled(1 << 16), scaled(1 << 20));
        assert!(x > 0.0 && y.is_finite());
        assert!((x / y - 1.0).abs() < 1e-3, "alpha {a}: {x} vs {y}");
    }
}

#[test]
fn geometric_pmf_closed_form() {
    let g = OffspringLaw::geometric();
    for k in 0..60u64 {
        assert!((g.pmf(k) - 0.5f64.powi(k as i32 + 1)).abs() < 1e-15);
        assert!((g.tail(k) - 0.5f64.powi(k as i32)).abs() < 1e-15);
    }
}

/// Pearson chi-square on bins `{0, ..., 63, ≥64}` with 10^6 draws.
fn chi_square_p(law: &OffspringLaw, seed: u64) -> f64 {
    const BINS: usize = 65;
    const DRAWS: u64 = 1_000_000;
    let mut counts = [0u64; BINS];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..DRAWS {
        let k = law.sample(&mut rng) as usize;
        counts[k.min(BINS - 1)] += 1;
    }
    let mut stat = 0.0;
    let mut dof = 0usize;
    for (b, &o) in counts.iter().enumerate() {
        let p = if b == BINS - 1 {
            law.tail(64)
        } else {
            law.pmf(b as u64)
        };
        let e = p * DRAWS as f64;
        if e > 0.0 {
            stat += (o as f64 - e).powi(2) / e;
            dof += 1;
        } else {
            assert_eq!(o, 0, "draw in an impossible bin {b}");
        }
    }
    1.0 - ChiSquared::new((dof - 1) as f64).unwrap().cdf(stat)
}

#[test]
fn sampler_passes_chi_square() {
    for (law, seed) in [
        (stable(0.5, 2.0 / 3.0), 11),
        (stable(0.8, 1.0 / 1.8), 12),
        (OffspringLaw::geometric(), 13),
    ] {
        let p = chi_square_p(&law, seed);
        assert!(p > 1e-3, "{law}: p-value {p}");
    }
}

#[test]
fn branching_children_follow_conditioned_law() {
    // K given K ≥ 2 under P(K = k) ∝ f^{(k)}(1-q) q^k / k!
    let law = stable(0.8, 1.0 / 1.8);
    let q = 0.05;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws = 400_000;
    let mut counts = [0u64; 6];
    for _ in 0..draws {
        let k = law.sample_branching_children(q, &mut rng) as usize;
        assert!(k >= 2);
        counts[(k - 2).min(5)] += 1;
    }
    let mass = law.branching_mass(q);
    let mut head = 0.0;
    for (i, &c) in counts.iter().enumerate().take(5) {
        let p = law.scaled_derivative(i as u32 + 2, q) / mass;
        head += p;
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        assert!(
            ((c as f64 / draws as f64) - p).abs() < 5.0 * se,
            "k={} freq {} p {}",
            i + 2,
            c as f64 / draws as f64,
            p
        );
    }
    assert!(head < 1.0);
}
