//! Ancestral sampling from fixed CD-HMM parameters.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::SequenceRecord;
use crate::emission::{EmissionTable, Frame};
use crate::error::{Error, Result};
use crate::model::StarredParams;
use crate::special::{log_sum_exp, LN_2PI};

const ROW_TOL: f64 = 1e-12;

/// Exact generating parameters. Lags are 1-based in the model and
/// `a_dep[k - 1]` holds the lag-`k` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub pi_hat: Vec<f64>,
    pub a_hat: Vec<Vec<f64>>,
    pub pi: Vec<f64>,
    pub a_dep: Vec<Vec<Vec<f64>>>,
    pub mix_weights: Vec<Vec<f64>>,
    pub means: Vec<Vec<Vec<f64>>>,
    pub covariances: Vec<Vec<Vec<Vec<f64>>>>,
}

/// Latent paths of one generated sequence: `x` 0-based states, `z` 1-based lags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTrace {
    pub id: String,
    pub x: Vec<usize>,
    pub z: Vec<usize>,
}

fn check_row(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
        return Err(Error::InvalidArgument(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > ROW_TOL {
        return Err(Error::InvalidArgument(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

fn categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            if u < p {
                return i;
            }
            u -= p;
            last = i;
        }
    }
    last
}

impl GeneratorSpec {
    pub fn n_states(&self) -> usize {
        self.pi.len()
    }

    pub fn max_lag(&self) -> usize {
        self.pi_hat.len()
    }

    pub fn n_components(&self) -> usize {
        self.mix_weights.first().map_or(0, Vec::len)
    }

    pub fn dim(&self) -> usize {
        self.means.first().and_then(|m| m.first()).map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, k, m, d) = (self.n_states(), self.max_lag(), self.n_components(), self.dim());
        if n == 0 || k == 0 || m == 0 || d == 0 {
            return Err(Error::InvalidArgument("generator spec has an empty dimension".into()));
        }
        let shape_ok = self.a_hat.len() == k
            && self.a_hat.iter().all(|r| r.len() == k)
            && self.a_dep.len() == k
            && self.a_dep.iter().all(|a| a.len() == n && a.iter().all(|r| r.len() == n))
            && self.mix_weights.len() == n
            && self.mix_weights.iter().all(|r| r.len() == m)
            && self.means.len() == n
            && self.means.iter().all(|s| s.len() == m && s.iter().all(|v| v.len() == d))
            && self.covariances.len() == n
            && self.covariances.iter().all(|s| {
                s.len() == m && s.iter().all(|c| c.len() == d && c.iter().all(|r| r.len() == d))
            });
        if !shape_ok {
            return Err(Error::Shape("generator spec arrays have inconsistent shapes".into()));
        }
        check_row(&self.pi_hat, "pi_hat")?;
        check_row(&self.pi, "pi")?;
        for (i, r) in self.a_hat.iter().enumerate() {
            check_row(r, &format!("a_hat row {i}"))?;
        }
        for (l, a) in self.a_dep.iter().enumerate() {
            for (i, r) in a.iter().enumerate() {
                check_row(r, &format!("a_dep lag {} row {i}", l + 1))?;
            }
        }
        for (i, r) in self.mix_weights.iter().enumerate() {
            check_row(r, &format!("mix_weights row {i}"))?;
        }
        for (i, s) in self.covariances.iter().enumerate() {
            for (j, c) in s.iter().enumerate() {
                self.cholesky(c).ok_or_else(|| {
                    Error::InvalidArgument(format!("covariance of state {i} component {j} is not SPD"))
                })?;
            }
        }
        if self.means.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite mean".into()));
        }
        Ok(())
    }

    fn cholesky(&self, c: &[Vec<f64>]) -> Option<Cholesky<f64, nalgebra::Dyn>> {
        let d = c.len();
        let m = DMatrix::from_fn(d, d, |i, j| c[i][j]);
        let scale = m.diagonal().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for i in 0..d {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale.max(1.0) {
                    return None;
                }
            }
        }
        Cholesky::new(m)
    }

    /// The generating chain parameters in the layout used by message passing.
    pub fn chain_params(&self) -> StarredParams {
        StarredParams {
            n_states: self.n_states(),
            max_lag: self.max_lag(),
            pi_hat: self.pi_hat.clone(),
            a_hat: self.a_hat.iter().flatten().copied().collect(),
            pi: self.pi.clone(),
            a_dep: self.a_dep.iter().flatten().flatten().copied().collect(),
        }
    }

    /// Exact log mixture density of each frame under each state; missing
    /// frames contribute zero.
    pub fn emission_table(&self, frames: &[Frame]) -> Result<EmissionTable> {
        let n = self.n_states();
        let d = self.dim();
        let mut comps = Vec::with_capacity(n);
        for i in 0..n {
            let mut row = Vec::new();
            for j in 0..self.n_components() {
                let chol = self
                    .cholesky(&self.covariances[i][j])
                    .ok_or_else(|| Error::InvalidArgument("covariance is not SPD".into()))?;
                let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
                row.push((chol, log_det));
            }
            comps.push(row);
        }
        let mut log = Vec::with_capacity(frames.len() * n);
        for f in frames {
            match f.values() {
                None => log.extend(std::iter::repeat_n(0.0, n)),
                Some(y) => {
                    if y.len() != d {
                        return Err(Error::Shape(format!("frame has {} values, expected {d}", y.len())));
                    }
                    for i in 0..n {
                        let terms: Vec<f64> = comps[i]
                            .iter()
                            .enumerate()
                            .map(|(j, (chol, log_det))| {
                                let diff = DVector::from_column_slice(y)
                                    - DVector::from_column_slice(&self.means[i][j]);
                                let sol = chol.l().solve_lower_triangular(&diff).expect("nonsingular");
                                self.mix_weights[i][j].ln()
                                    - 0.5 * (d as f64 * LN_2PI + log_det + sol.norm_squared())
                            })
                            .collect();
                        log.push(log_sum_exp(&terms));
                    }
                }
            }
        }
        Ok(EmissionTable::from_log(n, log))
    }

    fn sample_one(&self, t_len: usize, rng: &mut ChaCha8Rng, chols: &[Vec<DMatrix<f64>>]) -> Result<(Vec<Frame>, Vec<usize>, Vec<usize>)> {
        let mut x: Vec<usize> = Vec::with_capacity(t_len);
        let mut z: Vec<usize> = Vec::with_capacity(t_len);
        let mut frames = Vec::with_capacity(t_len);
        let d = self.dim();
        for t in 0..t_len {
            // lag index (0-based) must satisfy lag + 1 <= t
            let lag = if t == 0 {
                0
            } else {
                let row: &[f64] = &self.a_hat[z[t - 1]];
                let feasible = &row[..row.len().min(t)];
                if feasible.iter().sum::<f64>() <= 0.0 {
                    return Err(Error::DegenerateData(format!(
                        "lag row {} gives zero mass to every feasible lag at frame {}",
                        z[t - 1] + 1,
                        t + 1
                    )));
                }
                categorical(rng, feasible)
            };
            let state = if t == 0 {
                categorical(rng, &self.pi)
            } else {
                categorical(rng, &self.a_dep[lag][x[t - 1 - lag]])
            };
            let comp = categorical(rng, &self.mix_weights[state]);
            let noise = DVector::<f64>::from_fn(d, |_, _| rng.sample(StandardNormal));
            let y = DVector::from_column_slice(&self.means[state][comp]) + &chols[state][comp] * noise;
            z.push(lag);
            x.push(state);
            frames.push(Frame::present(y.iter().copied().collect()));
        }
        Ok((frames, x, z.into_iter().map(|l| l + 1).collect()))
    }
}

/// Draws `count` sequences of length `t_len`. Sequence `i` uses stream `i`
/// of a generator seeded with `seed`, so output does not depend on
/// scheduling. Records are unlabelled with ids `"0"`, `"1"`, ...
pub fn generate(
    spec: &GeneratorSpec,
    t_len: usize,
    count: usize,
    seed: u64,
) -> Result<(Vec<SequenceRecord>, Vec<LatentTrace>)> {
    spec.validate()?;
    if t_len == 0 {
        return Err(Error::InvalidArgument("sequence length must be at least 1".into()));
    }
    let chols: Vec<Vec<DMatrix<f64>>> = spec
        .covariances
        .iter()
        .map(|s| s.iter().map(|c| spec.cholesky(c).expect("validated").l()).collect())
        .collect();
    let out: Vec<Result<(SequenceRecord, LatentTrace)>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let (frames, x, z) = spec.sample_one(t_len, &mut rng, &chols)?;
            let id = i.to_string();
            Ok((SequenceRecord { id: id.clone(), label: None, frames }, LatentTrace { id, x, z }))
        })
        .collect();
    let mut records = Vec::with_capacity(count);
    let mut traces = Vec::with_capacity(count);
    for r in out {
        let (rec, tr) = r?;
        records.push(rec);
        traces.push(tr);
    }
    Ok((records, traces))
}
