//! Oracles and synthetic tasks shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::{digamma, ln_gamma};
use vbcdhmm::data::{generate, GeneratorSpec, SequenceRecord};
use vbcdhmm::{DirichletPosterior, EmissionTable, Frame, LatentPosteriors, ModelHyper, StarredParams};

// ---------------------------------------------------------------------------
// Exhaustive enumeration of the joint over (X, Z) paths.

pub struct Enumeration {
    pub evidence: f64,
    /// `T × K`
    pub gamma_z: Vec<Vec<f64>>,
    /// `T × N`
    pub gamma_x: Vec<Vec<f64>>,
    /// `[t][prev][next]` for `t ≥ 1`, index 0 unused.
    pub gamma_zz: Vec<Vec<Vec<f64>>>,
    /// `[t][lag][from][to]`
    pub gamma_xx: Vec<Vec<Vec<Vec<f64>>>>,
}

fn odometer(digits: &mut [usize], base: usize) -> bool {
    for d in digits.iter_mut() {
        *d += 1;
        if *d < base {
            return true;
        }
        *d = 0;
    }
    false
}

/// Sums `π̂_{z1} π_{x1} ∏ Â_{z_{t-1} z_t} A^{z_t}_{x_{t-z_t} x_t} ∏ p(y_t|x_t)`
/// over every path with `z_1 = 1` and `z_t < t`. Lags here are 0-based.
pub fn enumerate(p: &StarredParams, emit: &EmissionTable) -> Enumeration {
    let (n, k) = (p.n_states, p.max_lag);
    let t_len = emit.len();
    let e: Vec<Vec<f64>> = (0..t_len).map(|t| emit.row(t).iter().map(|v| v.exp()).collect()).collect();
    let a_hat = |i: usize, j: usize| p.a_hat[i * k + j];
    let a_dep = |l: usize, i: usize, j: usize| p.a_dep[(l * n + i) * n + j];

    let mut out = Enumeration {
        evidence: 0.0,
        gamma_z: vec![vec![0.0; k]; t_len],
        gamma_x: vec![vec![0.0; n]; t_len],
        gamma_zz: vec![vec![vec![0.0; k]; k]; t_len],
        gamma_xx: vec![vec![vec![vec![0.0; n]; n]; k]; t_len],
    };
    let mut xs = vec![0usize; t_len];
    loop {
        let mut zs = vec![0usize; t_len];
        loop {
            let feasible = zs[0] == 0 && (1..t_len).all(|t| zs[t] < t);
            if feasible {
                let mut w = p.pi_hat[zs[0]] * p.pi[xs[0]] * e[0][xs[0]];
                for t in 1..t_len {
                    let l = zs[t];
                    w *= a_hat(zs[t - 1], l) * a_dep(l, xs[t - l - 1], xs[t]) * e[t][xs[t]];
                }
                out.evidence += w;
                for t in 0..t_len {
                    out.gamma_z[t][zs[t]] += w;
                    out.gamma_x[t][xs[t]] += w;
                    if t > 0 {
                        out.gamma_zz[t][zs[t - 1]][zs[t]] += w;
                        out.gamma_xx[t][zs[t]][xs[t - zs[t] - 1]][xs[t]] += w;
                    }
                }
            }
            if !odometer(&mut zs, k) {
                break;
            }
        }
        if !odometer(&mut xs, n) {
            break;
        }
    }
    let z = out.evidence;
    for row in out.gamma_z.iter_mut().chain(out.gamma_x.iter_mut()) {
        row.iter_mut().for_each(|v| *v /= z);
    }
    for m in out.gamma_zz.iter_mut() {
        m.iter_mut().flatten().for_each(|v| *v /= z);
    }
    for m in out.gamma_xx.iter_mut() {
        m.iter_mut().flatten().flatten().for_each(|v| *v /= z);
    }
    out
}

// ---------------------------------------------------------------------------
// Random instances.

fn random_row<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let mut row: Vec<f64> = raw.iter().map(|v| v / s).collect();
    // exact normalisation for the generator's 1e-12 row check
    let rest: f64 = row[1..].iter().sum();
    row[0] = 1.0 - rest;
    row
}

pub fn random_spec<R: Rng>(rng: &mut R, n: usize, m: usize, k: usize, d: usize) -> GeneratorSpec {
    GeneratorSpec {
        pi_hat: random_row(rng, k),
        a_hat: (0..k).map(|_| random_row(rng, k)).collect(),
        pi: random_row(rng, n),
        a_dep: (0..k).map(|_| (0..n).map(|_| random_row(rng, n)).collect()).collect(),
        mix_weights: (0..n).map(|_| random_row(rng, m)).collect(),
        means: (0..n)
            .map(|_| (0..m).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect())
            .collect(),
        covariances: (0..n)
            .map(|_| {
                (0..m)
                    .map(|_| {
                        let a: Vec<Vec<f64>> =
                            (0..d).map(|_| (0..d).map(|_| rng.random_range(-0.7..0.7)).collect()).collect();
                        (0..d)
                            .map(|i| {
                                (0..d)
                                    .map(|j| {
                                        let s: f64 = (0..d).map(|l| a[i][l] * a[j][l]).sum();
                                        s + if i == j { 0.5 } else { 0.0 }
                                    })
                                    .collect()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect(),
    }
}

/// Starred parameters from random Dirichlet posteriors (subnormalised rows).
pub fn random_starred<R: Rng>(rng: &mut R, n: usize, k: usize) -> StarredParams {
    let mut dir = |len: usize| {
        DirichletPosterior::new((0..len).map(|_| rng.random_range(0.3..6.0)).collect()).unwrap()
    };
    let post = LatentPosteriors {
        q_pi_hat: dir(k),
        q_a_hat: (0..k).map(|_| dir(k)).collect(),
        q_pi: dir(n),
        q_a_dep: (0..k).map(|_| (0..n).map(|_| dir(n)).collect()).collect(),
    };
    post.starred()
}

/// A random chain and emission table of `t_len` frames. Even `index` uses
/// exact generator parameters, odd `index` subnormalised starred ones.
pub fn random_instance(seed: u64, index: usize, n: usize, k: usize, t_len: usize) -> (StarredParams, EmissionTable) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = random_spec(&mut rng, n, 1, k, 2);
    let (recs, _) = generate(&spec, t_len, 1, seed).unwrap();
    let table = spec.emission_table(&recs[0].frames).unwrap();
    let params = if index % 2 == 0 { spec.chain_params() } else { random_starred(&mut rng, n, k) };
    (params, table)
}

// ---------------------------------------------------------------------------
// Independent standard VB-HMM with 2-D Gaussian-mixture emissions.

type V2 = [f64; 2];
type M2 = [[f64; 2]; 2];

fn det(m: &M2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

fn inv(m: &M2) -> M2 {
    let d = det(m);
    [[m[1][1] / d, -m[0][1] / d], [-m[1][0] / d, m[0][0] / d]]
}

fn quad(m: &M2, x: &V2) -> f64 {
    x[0] * (m[0][0] * x[0] + m[0][1] * x[1]) + x[1] * (m[1][0] * x[0] + m[1][1] * x[1])
}

#[derive(Clone, Debug)]
pub struct Nw2 {
    pub lambda: f64,
    pub mean: V2,
    pub dof: f64,
    /// Inverse scale: `E[R] = dof · scale⁻¹`.
    pub scale: M2,
}

#[derive(Clone, Debug)]
pub struct VbHmm {
    pub pi: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    pub nw: Vec<Vec<Nw2>>,
}

pub struct VbHmmPrior {
    pub pi: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    pub nw: Nw2,
}

fn nw2_from(lambda: f64, mean: &[f64], dof: f64, scale: &nalgebra::DMatrix<f64>) -> Nw2 {
    Nw2 {
        lambda,
        mean: [mean[0], mean[1]],
        dof,
        scale: [[scale[(0, 0)], scale[(0, 1)]], [scale[(1, 0)], scale[(1, 1)]]],
    }
}

impl VbHmmPrior {
    pub fn from_hyper(h: &ModelHyper) -> Self {
        assert_eq!(h.dim, 2);
        assert_eq!(h.max_lag, 1);
        VbHmmPrior {
            pi: h.eta0.clone(),
            a: h.eta_dep[0].clone(),
            w: h.w.clone(),
            nw: nw2_from(h.nw_lambda, h.nw_mean.as_slice(), h.nw_dof, &h.nw_scale),
        }
    }
}

impl VbHmm {
    pub fn from_posteriors(post: &LatentPosteriors, em: &vbcdhmm::EmissionModel) -> Self {
        VbHmm {
            pi: post.q_pi.concentration.clone(),
            a: post.q_a_dep[0].iter().map(|d| d.concentration.clone()).collect(),
            w: em.mix_weights.iter().map(|d| d.concentration.clone()).collect(),
            nw: em
                .components
                .iter()
                .map(|row| row.iter().map(|c| nw2_from(c.lambda, c.mean.as_slice(), c.dof, &c.scale)).collect())
                .collect(),
        }
    }
}

fn elog(row: &[f64]) -> Vec<f64> {
    let s: f64 = row.iter().sum();
    row.iter().map(|&a| digamma(a) - digamma(s)).collect()
}

fn e_log_gauss(c: &Nw2, y: &V2) -> f64 {
    let e_log_det = digamma(c.dof / 2.0) + digamma((c.dof - 1.0) / 2.0) + 2.0 * std::f64::consts::LN_2
        - det(&c.scale).ln();
    let d = [y[0] - c.mean[0], y[1] - c.mean[1]];
    let e_quad = 2.0 / c.lambda + c.dof * quad(&inv(&c.scale), &d);
    -(2.0 * std::f64::consts::PI).ln() + 0.5 * e_log_det - 0.5 * e_quad
}

fn kl_dir(post: &[f64], prior: &[f64]) -> f64 {
    let sp: f64 = post.iter().sum();
    let sq: f64 = prior.iter().sum();
    let mut kl = ln_gamma(sp) - ln_gamma(sq);
    for (&a, &b) in post.iter().zip(prior) {
        kl += ln_gamma(b) - ln_gamma(a) + (a - b) * (digamma(a) - digamma(sp));
    }
    kl
}

fn ln_gamma2(a: f64) -> f64 {
    0.5 * std::f64::consts::PI.ln() + ln_gamma(a) + ln_gamma(a - 0.5)
}

fn kl_nw(q: &Nw2, p: &Nw2) -> f64 {
    let d = 2.0;
    let r = p.lambda / q.lambda;
    let dm = [q.mean[0] - p.mean[0], q.mean[1] - p.mean[1]];
    let gauss = 0.5 * (d * (r - 1.0 - r.ln()) + p.lambda * q.dof * quad(&inv(&q.scale), &dm));
    let qi = inv(&q.scale);
    let tr = p.scale[0][0] * qi[0][0] + p.scale[0][1] * qi[1][0] + p.scale[1][0] * qi[0][1] + p.scale[1][1] * qi[1][1];
    let psi2 = digamma(q.dof / 2.0) + digamma((q.dof - 1.0) / 2.0);
    let wish = -0.5 * p.dof * (det(&p.scale).ln() - det(&q.scale).ln()) + 0.5 * q.dof * (tr - d)
        + ln_gamma2(p.dof / 2.0)
        - ln_gamma2(q.dof / 2.0)
        + 0.5 * (q.dof - p.dof) * psi2;
    gauss + wish
}

struct Sweep {
    loglik: f64,
    pi: Vec<f64>,
    a: Vec<Vec<f64>>,
    /// `[i][c]` per-frame weights, frames in data order
    r: Vec<Vec<Vec<f64>>>,
}

fn sweep(model: &VbHmm, data: &[Vec<V2>]) -> Sweep {
    let n = model.pi.len();
    let m = model.w[0].len();
    let pi_s: Vec<f64> = elog(&model.pi).iter().map(|v| v.exp()).collect();
    let a_s: Vec<Vec<f64>> = model.a.iter().map(|r| elog(r).iter().map(|v| v.exp()).collect()).collect();
    let w_l: Vec<Vec<f64>> = model.w.iter().map(|r| elog(r)).collect();

    let mut out = Sweep { loglik: 0.0, pi: vec![0.0; n], a: vec![vec![0.0; n]; n], r: vec![vec![Vec::new(); m]; n] };
    for seq in data {
        let t_len = seq.len();
        // per-frame component log terms and state log emissions
        let mut comp = vec![vec![vec![0.0; m]; n]; t_len];
        let mut le = vec![vec![0.0; n]; t_len];
        for t in 0..t_len {
            for i in 0..n {
                for c in 0..m {
                    comp[t][i][c] = w_l[i][c] + e_log_gauss(&model.nw[i][c], &seq[t]);
                }
                let mx = comp[t][i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                le[t][i] = mx + comp[t][i].iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            }
        }
        let mut alpha = vec![vec![0.0; n]; t_len];
        let mut cs = vec![0.0; t_len];
        let mut eshift = vec![0.0; t_len];
        let mut ev = vec![vec![0.0; n]; t_len];
        for t in 0..t_len {
            let mx = le[t].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            eshift[t] = mx;
            for i in 0..n {
                ev[t][i] = (le[t][i] - mx).exp();
            }
            for j in 0..n {
                alpha[t][j] = if t == 0 {
                    pi_s[j] * ev[t][j]
                } else {
                    (0..n).map(|i| alpha[t - 1][i] * a_s[i][j]).sum::<f64>() * ev[t][j]
                };
            }
            cs[t] = alpha[t].iter().sum();
            for v in alpha[t].iter_mut() {
                *v /= cs[t];
            }
            out.loglik += cs[t].ln() + mx;
        }
        let mut beta = vec![vec![1.0; n]; t_len];
        for t in (0..t_len.saturating_sub(1)).rev() {
            for i in 0..n {
                beta[t][i] = (0..n).map(|j| a_s[i][j] * ev[t + 1][j] * beta[t + 1][j]).sum::<f64>() / cs[t + 1];
            }
        }
        for t in 0..t_len {
            for i in 0..n {
                let g = alpha[t][i] * beta[t][i];
                if t == 0 {
                    out.pi[i] += g;
                }
                let mx = comp[t][i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = comp[t][i].iter().map(|v| (v - mx).exp()).sum();
                for c in 0..m {
                    out.r[i][c].push(g * (comp[t][i][c] - mx).exp() / z);
                }
            }
            if t > 0 {
                for i in 0..n {
                    for j in 0..n {
                        out.a[i][j] += alpha[t - 1][i] * a_s[i][j] * ev[t][j] * beta[t][j] / cs[t];
                    }
                }
            }
        }
    }
    out
}

fn update(prior: &VbHmmPrior, s: &Sweep, data: &[Vec<V2>]) -> VbHmm {
    let n = prior.pi.len();
    let m = prior.w[0].len();
    let frames: Vec<V2> = data.iter().flatten().copied().collect();
    let add = |p: &[f64], c: &[f64]| p.iter().zip(c).map(|(a, b)| a + b).collect::<Vec<f64>>();
    let mut w = Vec::new();
    let mut nw = Vec::new();
    for i in 0..n {
        let mut wrow = Vec::new();
        let mut nrow = Vec::new();
        for c in 0..m {
            let r = &s.r[i][c];
            let nk: f64 = r.iter().sum();
            wrow.push(prior.w[i][c] + nk);
            let mut mean = [0.0; 2];
            for (f, &g) in frames.iter().zip(r) {
                mean[0] += g * f[0];
                mean[1] += g * f[1];
            }
            mean = [mean[0] / nk, mean[1] / nk];
            let mut sc = [[0.0; 2]; 2];
            for (f, &g) in frames.iter().zip(r) {
                let d = [f[0] - mean[0], f[1] - mean[1]];
                for a in 0..2 {
                    for b in 0..2 {
                        sc[a][b] += g * d[a] * d[b];
                    }
                }
            }
            let p = &prior.nw;
            let lambda = p.lambda + nk;
            let dm = [mean[0] - p.mean[0], mean[1] - p.mean[1]];
            let f = p.lambda * nk / lambda;
            let mut scale = [[0.0; 2]; 2];
            for a in 0..2 {
                for b in 0..2 {
                    scale[a][b] = p.scale[a][b] + sc[a][b] + f * dm[a] * dm[b];
                }
            }
            nrow.push(Nw2 {
                lambda,
                mean: [(p.lambda * p.mean[0] + nk * mean[0]) / lambda, (p.lambda * p.mean[1] + nk * mean[1]) / lambda],
                dof: p.dof + nk,
                scale,
            });
        }
        w.push(wrow);
        nw.push(nrow);
    }
    VbHmm {
        pi: add(&prior.pi, &s.pi),
        a: prior.a.iter().zip(&s.a).map(|(p, c)| add(p, c)).collect(),
        w,
        nw,
    }
}

fn kl_total(model: &VbHmm, prior: &VbHmmPrior) -> f64 {
    let mut kl = kl_dir(&model.pi, &prior.pi);
    for (q, p) in model.a.iter().zip(&prior.a) {
        kl += kl_dir(q, p);
    }
    for (q, p) in model.w.iter().zip(&prior.w) {
        kl += kl_dir(q, p);
    }
    for row in &model.nw {
        for c in row {
            kl += kl_nw(c, &prior.nw);
        }
    }
    kl
}

/// ELBO after each of `iters` update rounds, starting from `init`.
pub fn vb_hmm_trace(init: VbHmm, prior: &VbHmmPrior, data: &[Vec<V2>], iters: usize) -> Vec<f64> {
    let mut model = init;
    let mut s = sweep(&model, data);
    let mut trace = Vec::new();
    for _ in 0..iters {
        model = update(prior, &s, data);
        s = sweep(&model, data);
        trace.push(s.loglik - kl_total(&model, prior));
    }
    trace
}

pub fn as_v2(records: &[SequenceRecord]) -> Vec<Vec<V2>> {
    records
        .iter()
        .map(|r| r.frames.iter().map(|f| {
            let v = f.values().expect("oracle needs complete data");
            [v[0], v[1]]
        }).collect())
        .collect()
}

// ---------------------------------------------------------------------------
// Synthetic tasks.

fn frames_of(records: &[SequenceRecord]) -> Vec<Vec<Frame>> {
    records.iter().map(|r| r.frames.clone()).collect()
}

fn shared_emissions(n: usize) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<Vec<f64>>>>) {
    let means = (0..n)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            vec![vec![4.0 * a.cos(), 4.0 * a.sin()]]
        })
        .collect();
    let cov = vec![vec![0.5, 0.1], vec![0.1, 0.5]];
    ((0..n).map(|_| vec![1.0]).collect(), means, (0..n).map(|_| vec![cov.clone()]).collect())
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Row `i` puts `p` on `(i + shift) mod n` and spreads the rest evenly.
fn cyclic(n: usize, shift: isize, p: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let target = (i as isize + shift).rem_euclid(n as isize) as usize;
            let q = (1.0 - p) / (n - 1) as f64;
            let mut row: Vec<f64> = (0..n).map(|j| if j == target { p } else { q }).collect();
            let rest: f64 = row.iter().enumerate().filter(|&(j, _)| j != target).map(|(_, v)| v).sum();
            row[target] = 1.0 - rest;
            row
        })
        .collect()
}

/// Generator for the dependence-recovery task.
pub fn recovery_spec() -> GeneratorSpec {
    let n = 3;
    let (mix_weights, means, covariances) = shared_emissions(n);
    GeneratorSpec {
        pi_hat: vec![1.0, 0.0],
        a_hat: vec![vec![0.9, 0.1], vec![0.2, 0.8]],
        pi: uniform(n),
        a_dep: vec![cyclic(n, 1, 0.96), cyclic(n, 0, 0.96)],
        mix_weights,
        means,
        covariances,
    }
}

/// Two classes sharing emissions and lag matrices; only the lag chain
/// differs. Both classes have uniform first-order statistics.
pub fn dynamics_specs() -> [(String, GeneratorSpec); 2] {
    let n = 3;
    let (mix_weights, means, covariances) = shared_emissions(n);
    let base = GeneratorSpec {
        pi_hat: vec![1.0, 0.0],
        a_hat: Vec::new(),
        pi: uniform(n),
        a_dep: vec![(0..n).map(|_| uniform(n)).collect(), cyclic(n, 1, 0.8)],
        mix_weights,
        means,
        covariances,
    };
    let mut lag1 = base.clone();
    lag1.a_hat = vec![vec![0.9, 0.1], vec![0.7, 0.3]];
    let mut lag2 = base;
    lag2.a_hat = vec![vec![0.3, 0.7], vec![0.1, 0.9]];
    [("lag1".to_string(), lag1), ("lag2".to_string(), lag2)]
}

/// Labelled dataset drawing `count` sequences per class.
pub fn labelled(specs: &[(String, GeneratorSpec)], t_len: usize, count: usize, seed: u64) -> Vec<SequenceRecord> {
    let mut out = Vec::new();
    for (c, (label, spec)) in specs.iter().enumerate() {
        let (recs, _) = generate(spec, t_len, count, seed.wrapping_mul(31).wrapping_add(c as u64)).unwrap();
        for mut r in recs {
            r.id = format!("{label}-{}", r.id);
            r.label = Some(label.clone());
            out.push(r);
        }
    }
    out
}

pub fn sequences(records: &[SequenceRecord]) -> Vec<Vec<Frame>> {
    frames_of(records)
}
