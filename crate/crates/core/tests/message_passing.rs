mod common;

use common::{enumerate, random_instance, random_spec, random_starred};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vbcdhmm::data::generate;
use vbcdhmm::lattice::{backward, forward, loglik, smooth};
use vbcdhmm::{EmissionTable, StarredParams};

fn max_err(a: &[f64], b: impl IntoIterator<Item = f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn compare(p: &StarredParams, e: &EmissionTable) -> (f64, f64) {
    let ex = enumerate(p, e);
    let (fwd, r) = smooth(p, e).unwrap();
    let rel = ((loglik(&fwd).exp() - ex.evidence) / ex.evidence).abs();
    let (n, k) = (p.n_states, p.max_lag);
    let mut worst = 0.0f64;
    for t in 0..e.len() {
        worst = worst.max(max_err(r.gamma_z(t), ex.gamma_z[t].iter().copied()));
        worst = worst.max(max_err(r.gamma_x(t), ex.gamma_x[t].iter().copied()));
        if t == 0 {
            continue;
        }
        for a in 0..k {
            for b in 0..k {
                worst = worst.max((r.gamma_zz(t, a, b) - ex.gamma_zz[t][a][b]).abs());
            }
            for i in 0..n {
                for j in 0..n {
                    worst = worst.max((r.gamma_xx(t, a, i, j) - ex.gamma_xx[t][a][i][j]).abs());
                }
            }
        }
    }
    (rel, worst)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matches_enumeration(seed in any::<u64>(), t in 1usize..=5, n in 1usize..=3, k in 1usize..=2, starred in any::<bool>()) {
        let (p, e) = random_instance(seed, starred as usize, n, k, t);
        let (rel, worst) = compare(&p, &e);
        prop_assert!(rel < 1e-9, "relative evidence error {rel}");
        prop_assert!(worst < 1e-9, "marginal error {worst}");
    }

    #[test]
    fn feasibility_zeros(seed in any::<u64>(), t in 1usize..=8, k in 1usize..=4) {
        let (p, e) = random_instance(seed, 1, 2, k, t);
        let (_, r) = smooth(&p, &e).unwrap();
        prop_assert!((r.gamma_z(0)[0] - 1.0).abs() < 1e-12);
        for s in 0..t {
            for lag in 0..k {
                if (s == 0 && lag > 0) || (s > 0 && lag >= s) {
                    prop_assert_eq!(r.gamma_z(s)[lag], 0.0);
                }
            }
        }
    }

    #[test]
    fn alpha_beta_sums_to_one(seed in any::<u64>(), t in 1usize..=12, n in 1usize..=3, k in 1usize..=3) {
        let (p, e) = random_instance(seed, seed as usize, n, k, t);
        let f = forward(&p, &e).unwrap();
        let b = backward(&p, &e, &f).unwrap();
        for s in 0..t {
            let total: f64 = f.step(s).iter().zip(b.step(s)).map(|(x, y)| x * y).sum();
            prop_assert!((total - 1.0).abs() < 1e-9, "step {s}: {total}");
        }
    }

    #[test]
    fn positive_likelihood_for_generated_data(seed in any::<u64>(), k in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_spec(&mut rng, 2, 2, k, 2);
        let (recs, _) = generate(&spec, 15, 2, seed).unwrap();
        let p = random_starred(&mut rng, 2, k);
        for r in &recs {
            let e = spec.emission_table(&r.frames).unwrap();
            prop_assert!(loglik(&forward(&p, &e).unwrap()).is_finite());
        }
    }
}

#[test]
fn three_lags_match_enumeration() {
    for seed in 0..6 {
        let (p, e) = random_instance(seed, seed as usize, 2, 3, 5);
        let (rel, worst) = compare(&p, &e);
        assert!(rel < 1e-9 && worst < 1e-9, "seed {seed}: {rel} {worst}");
    }
}

#[test]
fn missing_rows_match_enumeration() {
    for seed in 0..10 {
        let (p, e) = random_instance(seed, seed as usize, 3, 2, 5);
        let mut log = e.log.clone();
        let t = 1 + seed as usize % 4;
        log[t * 3..(t + 1) * 3].fill(0.0);
        let e = EmissionTable::from_log(3, log);
        let (rel, worst) = compare(&p, &e);
        assert!(rel < 1e-9 && worst < 1e-9);
    }
}

/// Textbook scaled forward-backward for a first-order HMM.
fn hmm_smoothing(pi: &[f64], a: &[Vec<f64>], e: &EmissionTable) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let n = pi.len();
    let t_len = e.len();
    let em: Vec<Vec<f64>> = (0..t_len).map(|t| e.row(t).iter().map(|v| v.exp()).collect()).collect();
    let mut alpha = vec![vec![0.0; n]; t_len];
    let mut c = vec![0.0; t_len];
    for t in 0..t_len {
        for j in 0..n {
            let prior = if t == 0 { pi[j] } else { (0..n).map(|i| alpha[t - 1][i] * a[i][j]).sum() };
            alpha[t][j] = prior * em[t][j];
        }
        c[t] = alpha[t].iter().sum();
        alpha[t].iter_mut().for_each(|v| *v /= c[t]);
    }
    let mut beta = vec![vec![1.0; n]; t_len];
    for t in (0..t_len - 1).rev() {
        for i in 0..n {
            beta[t][i] = (0..n).map(|j| a[i][j] * em[t + 1][j] * beta[t + 1][j]).sum::<f64>() / c[t + 1];
        }
    }
    let gamma = (0..t_len).map(|t| (0..n).map(|i| alpha[t][i] * beta[t][i]).collect()).collect();
    let xi = (0..t_len)
        .map(|t| {
            (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| {
                            if t == 0 {
                                0.0
                            } else {
                                alpha[t - 1][i] * a[i][j] * em[t][j] * beta[t][j] / c[t]
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    (gamma, xi)
}

#[test]
fn single_lag_matches_standard_hmm() {
    for seed in 0..20u64 {
        let n = 2 + seed as usize % 3;
        let (p, e) = random_instance(seed, seed as usize, n, 1, 30);
        let a: Vec<Vec<f64>> = (0..n).map(|i| p.a_dep[i * n..(i + 1) * n].to_vec()).collect();
        let (gamma, xi) = hmm_smoothing(&p.pi, &a, &e);
        let (_, r) = smooth(&p, &e).unwrap();
        for t in 0..30 {
            assert!(max_err(r.gamma_x(t), gamma[t].iter().copied()) < 1e-10);
            assert!((r.gamma_z(t)[0] - 1.0).abs() < 1e-10);
            for i in 0..n {
                for j in 0..n {
                    assert!((r.gamma_xx(t, 0, i, j) - xi[t][i][j]).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn long_sequences_stay_finite() {
    let (p, e) = random_instance(3, 1, 3, 2, 5000);
    let (fwd, r) = smooth(&p, &e).unwrap();
    assert!(loglik(&fwd).is_finite());
    assert!(r.gamma_x.iter().all(|v| v.is_finite()));
}
