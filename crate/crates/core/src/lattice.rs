//! Forward-backward message passing over lag-augmented state windows.
//!
//! A message at step `t` is indexed by the window of the last `K` emitting
//! states `(x_t, x_{t-1}, …, x_{t-K+1})` and the lag indicator `z_t`. The
//! window is a mixed-radix integer with `x_t` as the least significant
//! digit; the lag is the fastest axis of the table. Window slots that would
//! refer to frames before the sequence start are pinned to state 0, and lags
//! reaching before the first frame are hard zeros, so every table entry that
//! does not correspond to a feasible path is exactly zero.
//!
//! Messages are kept in scaled probability space: each forward step is
//! normalised to sum to one and the log of the normaliser accumulates the
//! evidence. Emissions are shifted by their per-step maximum log value before
//! exponentiation; the shift is folded back into the normaliser.

use crate::emission::EmissionTable;
use crate::error::{Error, Result};
use crate::model::StarredParams;

/// Index arithmetic over windows of `K` states.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub n_states: usize,
    pub max_lag: usize,
    n_windows: usize,
    top: usize,
}

impl WindowLayout {
    pub fn new(n_states: usize, max_lag: usize) -> Self {
        let top = n_states.pow(max_lag as u32 - 1);
        WindowLayout { n_states, max_lag, n_windows: top * n_states, top }
    }

    /// Number of distinct windows, `N^K`.
    pub fn n_windows(&self) -> usize {
        self.n_windows
    }

    /// Entries per time step, `N^K · K`.
    pub fn step_len(&self) -> usize {
        self.n_windows * self.max_lag
    }

    /// State `s` frames back from the window's newest frame.
    #[inline]
    pub fn slot(&self, window: usize, s: usize) -> usize {
        (window / self.n_states.pow(s as u32)) % self.n_states
    }

    /// Window after appending `state` as the newest frame.
    #[inline]
    pub fn push(&self, window: usize, state: usize) -> usize {
        state + self.n_states * (window % self.top)
    }

    /// Window obtained by prepending `oldest` before the `K − 1` newest-but-one
    /// frames of `window`, i.e. the predecessor of `window` whose dropped
    /// frame is `oldest`.
    #[inline]
    fn predecessor(&self, window: usize, oldest: usize) -> usize {
        window / self.n_states + oldest * self.top
    }

    /// Decodes a window into states, newest first.
    pub fn states(&self, window: usize) -> Vec<usize> {
        (0..self.max_lag).map(|s| self.slot(window, s)).collect()
    }
}

/// Whether a zero-based lag index is reachable at zero-based step `t`.
#[inline]
fn lag_feasible(t: usize, lag: usize) -> bool {
    // lag value lag + 1 must not reach before the first frame; z_1 = 1.
    if t == 0 {
        lag == 0
    } else {
        lag < t
    }
}

/// Scaled messages for one sequence.
#[derive(Debug, Clone)]
pub struct MessageLattice {
    pub layout: WindowLayout,
    pub steps: usize,
    /// `steps × N^K × K`, lag fastest.
    pub table: Vec<f64>,
    /// `log(c_t)` plus the emission shift and parameter rescaling removed at
    /// step `t`; their sum is the log evidence.
    pub log_scale: Vec<f64>,
    /// Per-step normaliser `c_t` of the shifted messages.
    pub scale: Vec<f64>,
    /// Inner multiply-accumulate operations performed.
    pub ops: u64,
}

impl MessageLattice {
    #[inline]
    pub fn get(&self, t: usize, window: usize, lag: usize) -> f64 {
        self.table[(t * self.layout.n_windows() + window) * self.layout.max_lag + lag]
    }

    pub fn step(&self, t: usize) -> &[f64] {
        let len = self.layout.step_len();
        &self.table[t * len..(t + 1) * len]
    }
}

struct Shifted {
    values: Vec<f64>,
    shift: Vec<f64>,
}

fn shifted_emissions(emit: &EmissionTable) -> Result<Shifted> {
    let n = emit.n_states;
    let steps = emit.len();
    let mut values = vec![0.0; emit.log.len()];
    let mut shift = vec![0.0; steps];
    for t in 0..steps {
        let row = emit.row(t);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Numeric(format!(
                "emission at step {t} is zero or non-finite for every state"
            )));
        }
        shift[t] = max;
        for (v, l) in values[t * n..(t + 1) * n].iter_mut().zip(row) {
            *v = (l - max).exp();
        }
    }
    Ok(Shifted { values, shift })
}

fn check_inputs(params: &StarredParams, emit: &EmissionTable) -> Result<()> {
    if emit.is_empty() {
        return Err(Error::InvalidArgument("sequence has no frames".into()));
    }
    if emit.n_states != params.n_states {
        return Err(Error::Shape(format!(
            "emission table has {} states, chain has {}",
            emit.n_states, params.n_states
        )));
    }
    if params.max_lag == 0 || params.n_states == 0 {
        return Err(Error::Shape("empty chain".into()));
    }
    Ok(())
}

/// Chain parameters divided by per-family maxima. Starred rows from weak
/// priors can be far below one, so the removed log factors are carried in
/// the step scales instead.
struct Rescaled {
    params: StarredParams,
    log_init: f64,
    log_step: f64,
}

fn rescale(params: &StarredParams) -> Result<Rescaled> {
    fn peak(v: &[f64], what: &str) -> Result<f64> {
        let m = v.iter().copied().fold(0.0, f64::max);
        if m > 0.0 && m.is_finite() {
            Ok(m)
        } else {
            Err(Error::Numeric(format!("{what} has no positive finite entry")))
        }
    }
    let first = peak(&params.pi_hat[..1], "initial lag probability")?;
    let pi = peak(&params.pi, "initial state distribution")?;
    let a_hat = peak(&params.a_hat, "lag transition matrix")?;
    let a_dep = peak(&params.a_dep, "state transition tensor")?;
    let div = |v: &[f64], m: f64| v.iter().map(|x| x / m).collect::<Vec<f64>>();
    Ok(Rescaled {
        params: StarredParams {
            n_states: params.n_states,
            max_lag: params.max_lag,
            pi_hat: div(&params.pi_hat, first),
            a_hat: div(&params.a_hat, a_hat),
            pi: div(&params.pi, pi),
            a_dep: div(&params.a_dep, a_dep),
        },
        log_init: first.ln() + pi.ln(),
        log_step: a_hat.ln() + a_dep.ln(),
    })
}

/// Forward pass.
pub fn forward(params: &StarredParams, emit: &EmissionTable) -> Result<MessageLattice> {
    check_inputs(params, emit)?;
    let rs = rescale(params)?;
    let params = &rs.params;
    let layout = WindowLayout::new(params.n_states, params.max_lag);
    let (n, k) = (layout.n_states, layout.max_lag);
    let steps = emit.len();
    let step_len = layout.step_len();
    let em = shifted_emissions(emit)?;

    let mut table = vec![0.0; steps * step_len];
    let mut log_scale = vec![0.0; steps];
    let mut scale = vec![0.0; steps];
    let mut ops = 0u64;

    // Initial step: only z_1 = 1 and windows whose older slots are pinned.
    for x in 0..n {
        table[x * k] = params.pi_hat[0] * params.pi[x] * em.values[x];
    }
    normalise_step(&mut table[..step_len], 0, &mut scale, &mut log_scale, em.shift[0] + rs.log_init)?;

    for t in 1..steps {
        let (done, rest) = table.split_at_mut(t * step_len);
        let prev = &done[(t - 1) * step_len..];
        let cur = &mut rest[..step_len];
        for w in 0..layout.n_windows() {
            let x_t = w % n;
            let e = em.values[t * n + x_t];
            for z in 0..k {
                if !lag_feasible(t, z) {
                    continue;
                }
                let mut acc = 0.0;
                for oldest in 0..n {
                    let pw = layout.predecessor(w, oldest);
                    let a = params.a_dep(z, layout.slot(pw, z), x_t);
                    let base = pw * k;
                    for zp in 0..k {
                        acc += params.a_hat(zp, z) * a * prev[base + zp];
                    }
                    ops += k as u64;
                }
                cur[w * k + z] = e * acc;
            }
        }
        normalise_step(cur, t, &mut scale, &mut log_scale, em.shift[t] + rs.log_step)?;
    }

    Ok(MessageLattice { layout, steps, table, log_scale, scale, ops })
}

fn normalise_step(
    step: &mut [f64],
    t: usize,
    scale: &mut [f64],
    log_scale: &mut [f64],
    shift: f64,
) -> Result<()> {
    let c: f64 = step.iter().sum();
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Numeric(format!("forward messages underflowed at step {t}")));
    }
    for v in step.iter_mut() {
        *v /= c;
    }
    scale[t] = c;
    log_scale[t] = c.ln() + shift;
    Ok(())
}

/// Backward pass, scaled by the forward normalisers.
pub fn backward(
    params: &StarredParams,
    emit: &EmissionTable,
    fwd: &MessageLattice,
) -> Result<MessageLattice> {
    check_inputs(params, emit)?;
    let rs = rescale(params)?;
    let params = &rs.params;
    let layout = WindowLayout::new(params.n_states, params.max_lag);
    if layout != fwd.layout || fwd.steps != emit.len() {
        return Err(Error::Shape("forward lattice does not match inputs".into()));
    }
    let (n, k) = (layout.n_states, layout.max_lag);
    let steps = emit.len();
    let step_len = layout.step_len();
    let em = shifted_emissions(emit)?;

    let mut table = vec![0.0; steps * step_len];
    table[(steps - 1) * step_len..].fill(1.0);
    let mut ops = 0u64;

    for t in (0..steps - 1).rev() {
        let (head, tail) = table.split_at_mut((t + 1) * step_len);
        let cur = &mut head[t * step_len..];
        let next = &tail[..step_len];
        let c_next = fwd.scale[t + 1];
        for w in 0..layout.n_windows() {
            for z in 0..k {
                let mut acc = 0.0;
                for x_new in 0..n {
                    let nw = layout.push(w, x_new);
                    let e = em.values[(t + 1) * n + x_new];
                    for zn in 0..k {
                        if !lag_feasible(t + 1, zn) {
                            continue;
                        }
                        let a = params.a_dep(zn, layout.slot(w, zn), x_new);
                        acc += params.a_hat(z, zn) * e * a * next[nw * k + zn];
                        ops += 1;
                    }
                }
                cur[w * k + z] = acc / c_next;
            }
        }
    }

    Ok(MessageLattice {
        layout,
        steps,
        table,
        log_scale: fwd.log_scale.clone(),
        scale: fwd.scale.clone(),
        ops,
    })
}

/// Log evidence accumulated by a forward pass.
pub fn loglik(fwd: &MessageLattice) -> f64 {
    fwd.log_scale.iter().sum()
}

/// Posterior marginals of the latent variables for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    pub steps: usize,
    pub n_states: usize,
    pub max_lag: usize,
    pub n_components: usize,
    /// `T × K`: `p(z_t = k)`.
    pub gamma_z: Vec<f64>,
    /// `T × N`: `p(x_t = i)`.
    pub gamma_x: Vec<f64>,
    /// `(T − 1) × K × K`: `p(z_{t-1} = k, z_t = k')`, stored at `t − 1`.
    pub gamma_zz: Vec<f64>,
    /// `T × K × N × N`: `p(x_{t-k} = i, x_t = j, z_t = k)`; zero at `t = 0`.
    pub gamma_xx: Vec<f64>,
    /// `T × N × M`: state marginals split over mixture components. Empty
    /// until filled by the emission model.
    pub gamma_comp: Vec<f64>,
}

impl Responsibilities {
    pub fn gamma_z(&self, t: usize) -> &[f64] {
        &self.gamma_z[t * self.max_lag..(t + 1) * self.max_lag]
    }

    pub fn gamma_x(&self, t: usize) -> &[f64] {
        &self.gamma_x[t * self.n_states..(t + 1) * self.n_states]
    }

    /// `p(z_{t-1} = prev, z_t = next)` for `t ≥ 1`.
    pub fn gamma_zz(&self, t: usize, prev: usize, next: usize) -> f64 {
        let k = self.max_lag;
        self.gamma_zz[((t - 1) * k + prev) * k + next]
    }

    /// `p(x_{t-lag-1} = from, x_t = to, z_t = lag + 1)`.
    pub fn gamma_xx(&self, t: usize, lag: usize, from: usize, to: usize) -> f64 {
        let (n, k) = (self.n_states, self.max_lag);
        self.gamma_xx[((t * k + lag) * n + from) * n + to]
    }

    pub fn gamma_comp(&self, t: usize) -> &[f64] {
        let nm = self.n_states * self.n_components;
        &self.gamma_comp[t * nm..(t + 1) * nm]
    }
}

/// Combines forward and backward messages into the four responsibility
/// families.
pub fn responsibilities(
    fwd: &MessageLattice,
    bwd: &MessageLattice,
    params: &StarredParams,
    emit: &EmissionTable,
) -> Result<Responsibilities> {
    check_inputs(params, emit)?;
    let rs = rescale(params)?;
    let params = &rs.params;
    let layout = fwd.layout;
    if bwd.layout != layout
        || bwd.steps != fwd.steps
        || fwd.steps != emit.len()
        || layout != WindowLayout::new(params.n_states, params.max_lag)
    {
        return Err(Error::Shape("forward and backward lattices do not match".into()));
    }
    let (n, k) = (layout.n_states, layout.max_lag);
    let steps = fwd.steps;
    let em = shifted_emissions(emit)?;

    let mut gamma_z = vec![0.0; steps * k];
    let mut gamma_x = vec![0.0; steps * n];
    let mut gamma_zz = vec![0.0; steps.saturating_sub(1) * k * k];
    let mut gamma_xx = vec![0.0; steps * k * n * n];

    for t in 0..steps {
        let a = fwd.step(t);
        let b = bwd.step(t);
        for w in 0..layout.n_windows() {
            let x_t = w % n;
            for z in 0..k {
                let g = a[w * k + z] * b[w * k + z];
                gamma_z[t * k + z] += g;
                gamma_x[t * n + x_t] += g;
            }
        }
    }

    for t in 1..steps {
        let prev = fwd.step(t - 1);
        let b = bwd.step(t);
        let c = fwd.scale[t];
        for w in 0..layout.n_windows() {
            let x_t = w % n;
            let e = em.values[t * n + x_t];
            for z in 0..k {
                if !lag_feasible(t, z) {
                    continue;
                }
                let tail = e * b[w * k + z] / c;
                if tail == 0.0 {
                    continue;
                }
                for oldest in 0..n {
                    let pw = layout.predecessor(w, oldest);
                    let from = layout.slot(pw, z);
                    let a = params.a_dep(z, from, x_t) * tail;
                    let mut pair_mass = 0.0;
                    for zp in 0..k {
                        let xi = prev[pw * k + zp] * params.a_hat(zp, z) * a;
                        gamma_zz[((t - 1) * k + zp) * k + z] += xi;
                        pair_mass += xi;
                    }
                    gamma_xx[((t * k + z) * n + from) * n + x_t] += pair_mass;
                }
            }
        }
    }

    Ok(Responsibilities {
        steps,
        n_states: n,
        max_lag: k,
        n_components: 0,
        gamma_z,
        gamma_x,
        gamma_zz,
        gamma_xx,
        gamma_comp: Vec::new(),
    })
}

/// Forward, backward and responsibilities in one call.
pub fn smooth(
    params: &StarredParams,
    emit: &EmissionTable,
) -> Result<(MessageLattice, Responsibilities)> {
    let fwd = forward(params, emit)?;
    let bwd = backward(params, emit, &fwd)?;
    let resp = responsibilities(&fwd, &bwd, params, emit)?;
    Ok((fwd, resp))
}
