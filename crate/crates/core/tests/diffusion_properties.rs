use c2v_core::diffusion::{
    forward_sample, loss_target, reverse_step, sample, BridgeSchedule, SamplerConfig,
};
use c2v_core::geometry::{AuxChannels, ConditionSet};
use c2v_core::{rng, Grid, Volume};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_volume(seed: u64, tag: &str, dims: [usize; 3]) -> Volume {
    let grid = Grid::new(dims, [1.0; 3], [0.0; 3]).unwrap();
    let mut r = rng::stream(seed, tag, &[]);
    let data = (0..grid.len())
        .map(|_| StandardNormal.sample(&mut r))
        .collect();
    Volume::new(grid, data).unwrap()
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (
        m,
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0),
    )
}

fn within_three_se(samples: &[f64], mean: f64, var: f64) -> bool {
    let n = samples.len() as f64;
    let (m, v) = mean_var(samples);
    (m - mean).abs() <= 3.0 * (var / n).sqrt()
        && (v - var).abs() <= 3.0 * var * (2.0 / (n - 1.0)).sqrt()
}

#[test]
fn transition_composed_with_marginal_matches_next_marginal() {
    let mut pick = rng::stream(17, "pairs", &[]);
    let (x0, y) = (0.3, -1.2);
    for case in 0..5u64 {
        let total = pick.random_range(4..=1000usize);
        let t = pick.random_range(2..total);
        let s = BridgeSchedule::new(total).unwrap();
        let (a, b) = (s.alpha(t), s.alpha(t - 1));
        let ratio = (1.0 - a) / (1.0 - b);
        let mut r = rng::stream(case, "bridge-mc", &[]);
        let draws: Vec<f64> = (0..100_000)
            .map(|_| {
                let z1: f64 = StandardNormal.sample(&mut r);
                let z2: f64 = StandardNormal.sample(&mut r);
                let prev = (1.0 - b) * x0 + b * y + s.delta(t - 1).sqrt() * z1;
                ratio * prev + (a - ratio * b) * y + s.step(t).delta_cond.sqrt() * z2
            })
            .collect();
        assert!(
            within_three_se(&draws, (1.0 - a) * x0 + a * y, s.delta(t)),
            "T={total} t={t}"
        );
    }
}

#[test]
fn transition_algebra_is_consistent() {
    let s = BridgeSchedule::new(1000).unwrap();
    for t in 1..1000 {
        let (a, b) = (s.alpha(t), s.alpha(t - 1));
        let ratio = (1.0 - a) / (1.0 - b);
        let var = ratio * ratio * s.delta(t - 1) + s.step(t).delta_cond;
        assert!((var - s.delta(t)).abs() < 1e-12, "t={t}");
        let mean_x0 = ratio * (1.0 - b);
        assert!((mean_x0 - (1.0 - a)).abs() < 1e-12);
    }
}

#[test]
fn posterior_step_reproduces_previous_marginal() {
    let s = BridgeSchedule::new(20).unwrap();
    let (x0, y) = (0.5, 1.5);
    for t in [2usize, 7, 13, 20] {
        let c = s.step(t);
        let (a, b) = (s.alpha(t), s.alpha(t - 1));
        let mut r = rng::stream(t as u64, "posterior-mc", &[]);
        let draws: Vec<f64> = (0..100_000)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut r);
                let e2: f64 = StandardNormal.sample(&mut r);
                let xt = (1.0 - a) * x0 + a * y + s.delta(t).sqrt() * e;
                let f = a * (y - x0) + s.delta(t).sqrt() * e;
                c.c_xt * xt + c.c_st * y - c.c_ft * f + c.delta_tilde.sqrt() * e2
            })
            .collect();
        assert!(
            within_three_se(&draws, (1.0 - b) * x0 + b * y, s.delta(t - 1)),
            "t={t}"
        );
    }
}

#[test]
fn noise_free_trajectory_follows_closed_form() {
    let total = 50;
    let s = BridgeSchedule::new(total).unwrap();
    let x0 = random_volume(1, "x0", [4, 3, 2]);
    let y = random_volume(2, "y", [4, 3, 2]);
    let zero = Volume::zeros(*x0.grid());
    let mut x = y.clone();
    for t in (1..=total).rev() {
        let a = s.alpha(t);
        let f = y.zip_map(&x0, |yv, xv| a * (yv - xv)).unwrap();
        x = reverse_step(&x, &f, &y, t, &zero, &s).unwrap();
        let b = s.alpha(t - 1);
        for ((&got, &x0v), &yv) in x.data().iter().zip(x0.data()).zip(y.data()) {
            assert!((got - ((1.0 - b) * x0v + b * yv)).abs() < 1e-10, "t={t}");
        }
    }
}

#[test]
fn oracle_denoiser_recovers_target() {
    let total = 1000;
    let s = BridgeSchedule::new(total).unwrap();
    let grid = Grid::centered_cube(6, 1.0).unwrap();
    let s_p = Volume::from_fn(grid, |p| {
        (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 2.5
    });
    let s_w = s_p.map(|v| v + 1.0);
    let cond = ConditionSet::from_sdfs(s_p, s_w, None, AuxChannels::ALL).unwrap();
    let x0 = Volume::from_fn(grid, |p| (p[0] * 0.7).sin() + 0.1 * p[2]);
    let oracle = |x: &Volume, _: &ConditionSet, _: usize| x.zip_map(&x0, |a, b| a - b);
    for n in [1, 10, total] {
        for eta in [0.0, 1.0] {
            let cfg = SamplerConfig {
                eta,
                ..SamplerConfig::deterministic(n, 3)
            };
            let out = sample(&oracle, &cond, &s, &cfg).unwrap();
            let err = out
                .data()
                .iter()
                .zip(x0.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-8, "n={n} eta={eta}: {err}");
        }
    }
}

#[test]
fn sampling_is_reproducible() {
    let s = BridgeSchedule::new(100).unwrap();
    let grid = Grid::centered_cube(4, 1.0).unwrap();
    let s_p = Volume::from_fn(grid, |p| p[0] - 0.2);
    let cond = ConditionSet::from_sdfs(s_p.clone(), s_p.map(|v| v + 1.0), None, AuxChannels::NONE)
        .unwrap();
    let den = |x: &Volume, _: &ConditionSet, t: usize| Ok(x.map(|v| 0.01 * v * t as f64 / 100.0));
    let cfg = SamplerConfig {
        eta: 1.0,
        ..SamplerConfig::deterministic(10, 9)
    };
    let a = sample(&den, &cond, &s, &cfg).unwrap();
    let b = sample(&den, &cond, &s, &cfg).unwrap();
    assert_eq!(a.data(), b.data());
    let other = sample(&den, &cond, &s, &SamplerConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a.data(), other.data());
}

/// Distance in units of the last place at the magnitude of the operands.
fn ulps(diff: f64, scale: f64) -> f64 {
    diff.abs() / (scale.abs().max(f64::MIN_POSITIVE) * f64::EPSILON)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn recovery_identity_within_four_ulp(seed in any::<u64>(), t in 0usize..=200) {
        let s = BridgeSchedule::new(200).unwrap();
        let x0 = random_volume(seed, "x0", [3, 3, 3]);
        let y = random_volume(seed, "y", [3, 3, 3]);
        let eps = random_volume(seed, "eps", [3, 3, 3]);
        let xt = forward_sample(&x0, &y, t, &eps, &s).unwrap();
        let target = loss_target(&x0, &y, t, &eps, &s).unwrap();
        for i in 0..x0.len() {
            let rec = xt.data()[i] - target.data()[i];
            // rounding happens at the magnitude of the largest intermediate term
            let (a, sd) = (s.alpha(t), s.delta(t).sqrt());
            let scale = [x0.data()[i], (1.0 - a) * x0.data()[i], a * y.data()[i], sd * eps.data()[i], xt.data()[i], target.data()[i]]
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!(ulps(rec - x0.data()[i], scale) <= 4.0);
        }
    }

    #[test]
    fn delta_is_symmetric(total in 2usize..3000) {
        let s = BridgeSchedule::new(total).unwrap();
        for t in 0..=total {
            prop_assert_eq!(s.delta(t), s.delta(total - t));
        }
    }
}
