//! Tonic/phasic separation by nonnegative deconvolution.
//!
//! Model: `sc = tonic + Δt · (driver ⊛ h) + residual`, where `h` is the
//! unit-peak biexponential kernel sampled at the trace rate and `driver ≥ 0`
//! is in µS/s. The sampled kernel obeys a two-pole recursion, so forward
//! convolution and its inverse are both O(n); the regularized inverse is a
//! banded SPD solve.
//!
//! The tonic level is a penalized cubic B-spline on a coarse knot grid. Each
//! pass locates driver excursions in a regularized inverse of `sc − tonic`,
//! then solves for the nonnegative driver on those excursions jointly with
//! the spline (the spline is profiled out, leaving a small dense QP). Passes
//! stop once the excursion set and the tonic are both stable.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::signal::EdaTrace;
use crate::util::{csv_reader, csv_writer, expect_header, parse_f64};

pub const DEFAULT_TAU1: f64 = 0.75;
pub const DEFAULT_TAU2: f64 = 2.0;
pub const TAU1_BOUNDS: (f64, f64) = (0.1, 2.0);
pub const TAU2_BOUNDS: (f64, f64) = (1.0, 20.0);
/// Weight of the ℓ1 driver term in the tau objective.
pub const TAU_L1_WEIGHT: f64 = 0.01;
/// Shortest trace accepted by [`decompose`], seconds.
pub const MIN_DURATION_S: f64 = 10.0;

/// Biexponential impulse response `e^(-t/τ2) - e^(-t/τ1)`, scaled to unit peak.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpulseResponse {
    pub tau1: f64,
    pub tau2: f64,
    /// Multiplier that brings the raw biexponential peak to 1.
    pub normalization: f64,
}

impl Default for ImpulseResponse {
    fn default() -> Self {
        Self::new(DEFAULT_TAU1, DEFAULT_TAU2).expect("default taus are valid")
    }
}

impl ImpulseResponse {
    pub fn new(tau1: f64, tau2: f64) -> Result<Self> {
        if !(tau1.is_finite() && tau2.is_finite() && tau1 > 0.0 && tau1 < tau2) {
            return Err(Error::TauBounds(format!(
                "need 0 < tau1 < tau2, got tau1 = {tau1}, tau2 = {tau2}"
            )));
        }
        let tp = Self::raw_peak_time(tau1, tau2);
        let peak = (-tp / tau2).exp() - (-tp / tau1).exp();
        Ok(Self {
            tau1,
            tau2,
            normalization: 1.0 / peak,
        })
    }

    fn raw_peak_time(tau1: f64, tau2: f64) -> f64 {
        (tau2 / tau1).ln() * tau1 * tau2 / (tau2 - tau1)
    }

    pub fn peak_time(&self) -> f64 {
        Self::raw_peak_time(self.tau1, self.tau2)
    }

    pub fn value(&self, t: f64) -> f64 {
        if t <= 0.0 {
            0.0
        } else {
            self.normalization * ((-t / self.tau2).exp() - (-t / self.tau1).exp())
        }
    }

    /// Kernel sampled at `k·dt` for `k = 0..len`.
    pub fn sampled(&self, dt: f64, len: usize) -> Vec<f64> {
        (0..len).map(|k| self.value(k as f64 * dt)).collect()
    }

    pub fn within_bounds(&self) -> bool {
        (TAU1_BOUNDS.0..=TAU1_BOUNDS.1).contains(&self.tau1)
            && (TAU2_BOUNDS.0..=TAU2_BOUNDS.1).contains(&self.tau2)
            && self.tau1 < self.tau2
    }

    /// Phasic response to a driver (µS/s) sampled every `dt`, from rest.
    /// This is the forward model that [`decompose`] inverts.
    pub fn respond(&self, driver: &[f64], dt: f64) -> Vec<f64> {
        self.recursion(dt).convolve(driver)
    }

    fn recursion(&self, dt: f64) -> Recursion {
        let p1 = (-dt / self.tau1).exp();
        let p2 = (-dt / self.tau2).exp();
        Recursion {
            p1,
            p2,
            a1: p1 + p2,
            a2: p1 * p2,
            // Δt · h[1]: phasic produced one sample after a unit driver sample.
            gain: dt * self.normalization * (p2 - p1),
        }
    }
}

/// `p[n] = a1·p[n-1] - a2·p[n-2] + gain·d[n-1]`, zero initial state.
#[derive(Debug, Clone, Copy)]
struct Recursion {
    p1: f64,
    p2: f64,
    a1: f64,
    a2: f64,
    gain: f64,
}

impl Recursion {
    fn convolve(&self, driver: &[f64]) -> Vec<f64> {
        let n = driver.len();
        let mut p = vec![0.0; n];
        for i in 1..n {
            let prev2 = if i >= 2 { p[i - 2] } else { 0.0 };
            p[i] = self.a1 * p[i - 1] - self.a2 * prev2 + self.gain * driver[i - 1];
        }
        p
    }

    /// Inverse of [`Recursion::convolve`], except that the level before the
    /// window is taken to be the first sample (steady state) so an initial
    /// offset does not masquerade as an impulse. The last driver sample does
    /// not influence the window and is set to zero.
    fn deconvolve(&self, phasic: &[f64]) -> Vec<f64> {
        let n = phasic.len();
        let mut d = vec![0.0; n];
        for m in 0..n.saturating_sub(1) {
            let prev = if m >= 1 { phasic[m - 1] } else { phasic[0] };
            d[m] = (phasic[m + 1] - self.a1 * phasic[m] + self.a2 * prev) / self.gain;
        }
        d
    }

    /// Adjoint of [`Recursion::convolve`].
    fn convolve_adjoint(&self, x: &[f64]) -> Vec<f64> {
        let rev: Vec<f64> = x.iter().rev().copied().collect();
        let mut out = self.convolve(&rev);
        out.reverse();
        out
    }

    /// Response at lags `0..n` to a unit driver sample:
    /// `gain·(p2^m − p1^m)/(p2 − p1)`.
    fn kernel(&self, n: usize) -> Vec<f64> {
        self.powers(n).into_iter().map(|(a, b)| self.gain * (b - a) / (self.p2 - self.p1)).collect()
    }

    /// `(p1^m, p2^m)` for `m = 0..n`.
    fn powers(&self, n: usize) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(n);
        let (mut a, mut b) = (1.0, 1.0);
        for _ in 0..n {
            out.push((a, b));
            a *= self.p1;
            b *= self.p2;
        }
        out
    }
    /// Entries `(column, value)` of row `m` of the unscaled inverse operator.
    fn inverse_row(&self, m: usize) -> [(isize, f64); 3] {
        let m = m as isize;
        [(m - 1, self.a2), (m, -self.a1), (m + 1, 1.0)]
    }
}

/// Symmetric positive-definite band matrix, lower band stored by row.
struct BandedSpd {
    n: usize,
    bw: usize,
    /// `band[i][k]` holds `A[i][i - k]`.
    band: Vec<Vec<f64>>,
}

impl BandedSpd {
    fn identity(n: usize, bw: usize) -> Self {
        let mut band = vec![vec![0.0; bw + 1]; n];
        for row in &mut band {
            row[0] = 1.0;
        }
        Self { n, bw, band }
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        debug_assert!(i - j <= self.bw);
        self.band[i][i - j] += v;
    }

    /// In-place Cholesky `A = L Lᵀ`.
    fn factor(&mut self) -> Result<()> {
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            for j in lo..=i {
                let mut s = self.band[i][i - j];
                let klo = lo.max(j.saturating_sub(self.bw));
                for k in klo..j {
                    s -= self.band[i][i - k] * self.band[j][j - k];
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(Error::Numerical(format!(
                            "band matrix not positive definite at row {i}"
                        )));
                    }
                    self.band[i][0] = s.sqrt();
                } else {
                    self.band[i][i - j] = s / self.band[j][0];
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::needless_range_loop)] // band offsets are index arithmetic
    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut y = rhs.to_vec();
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            let mut s = y[i];
            for k in lo..i {
                s -= self.band[i][i - k] * y[k];
            }
            y[i] = s / self.band[i][0];
        }
        for i in (0..self.n).rev() {
            let mut s = y[i];
            for k in i + 1..(i + self.bw + 1).min(self.n) {
                s -= self.band[k][k - i] * y[k];
            }
            y[i] = s / self.band[i][0];
        }
        y
    }
}

/// Factored `I + β·(D₂G)ᵀ(D₂G)` where `G` maps phasic to unscaled driver.
struct RegularizedInverse {
    chol: BandedSpd,
}

impl RegularizedInverse {
    fn new(rec: &Recursion, n: usize, alpha: f64) -> Result<Self> {
        let beta = alpha / (rec.gain * rec.gain);
        let mut m = BandedSpd::identity(n, 4);
        if n >= 4 && beta > 0.0 {
            // Rows of D₂G: driver rows k, k+1, k+2 with weights 1, -2, 1.
            for k in 0..n - 3 {
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(5);
                for (w, dm) in [(1.0, k), (-2.0, k + 1), (1.0, k + 2)] {
                    for (c, v) in rec.inverse_row(dm) {
                        if c < 0 || c as usize >= n {
                            continue;
                        }
                        let c = c as usize;
                        match row.iter_mut().find(|(cc, _)| *cc == c) {
                            Some(e) => e.1 += w * v,
                            None => row.push((c, w * v)),
                        }
                    }
                }
                for &(ci, vi) in &row {
                    for &(cj, vj) in &row {
                        if ci >= cj {
                            m.add(ci, cj, beta * vi * vj);
                        }
                    }
                }
            }
        }
        m.factor()?;
        Ok(Self { chol: m })
    }

    fn smooth(&self, r: &[f64]) -> Vec<f64> {
        self.chol.solve(r)
    }
}

/// Closed-form `Σ_{t<n} h[t−i]·h[t−j]` for the two-pole kernel.
struct KernelGram {
    pow: Vec<(f64, f64)>,
    /// `Σ_{m=1}^{len} r^m` for `r = p1², p1p2, p2²`, indexed by `len`.
    geo: Vec<[f64; 3]>,
    scale: f64,
    n: usize,
}

impl KernelGram {
    fn new(rec: &Recursion, n: usize) -> Self {
        let (p1, p2) = (rec.p1, rec.p2);
        let mut geo = Vec::with_capacity(n);
        let mut acc = [0.0; 3];
        let mut pw = [1.0; 3];
        for _ in 0..n {
            geo.push(acc);
            for (e, r) in [p1 * p1, p1 * p2, p2 * p2].into_iter().enumerate() {
                pw[e] *= r;
                acc[e] += pw[e];
            }
        }
        let scale = rec.gain / (p2 - p1);
        Self { pow: rec.powers(n), geo, scale: scale * scale, n }
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        if j + 1 >= self.n {
            return 0.0;
        }
        let (a, b) = self.pow[j - i];
        let [g11, g12, g22] = self.geo[self.n - 1 - j];
        self.scale * (b * g22 - (a + b) * g12 + a * g11)
    }
}

/// Driver with the tonic profiled out: `min ½·yᵀ(I − H)y + ½α‖D₂d‖²`,
/// `y = s − conv(d)`, over `d ≥ 0` with `d = 0` off `support`. `H` is the
/// tonic smoother. The problem is a dense QP in the support variables,
/// solved exactly with the active set seeded from `warm`.
fn nonnegative_deconvolution(
    rec: &Recursion,
    sc: &[f64],
    tonic: &TonicSmoother,
    support: &[bool],
    alpha: f64,
    warm: &[f64],
) -> Result<Vec<f64>> {
    let n = sc.len();
    let idx: Vec<usize> = (0..n).filter(|&i| support[i]).collect();
    let mut driver = vec![0.0; n];
    if idx.is_empty() {
        return Ok(driver);
    }
    let k = idx.len();
    let mut pos = vec![usize::MAX; n];
    for (a, &i) in idx.iter().enumerate() {
        pos[i] = a;
    }

    let gram = KernelGram::new(rec, n);
    let h = rec.kernel(n);
    let mut q = DMatrix::<f64>::zeros(k, k);
    for a in 0..k {
        for b in a..k {
            let v = gram.get(idx[a], idx[b]);
            q[(a, b)] = v;
            q[(b, a)] = v;
        }
    }
    // Tonic term: subtract Zᵀ M⁻¹ Z with Z = Bᵀ C_S.
    let m = tonic.basis.n_coef();
    let mut z = DMatrix::<f64>::zeros(m, k);
    let weights: Vec<(usize, [f64; 4])> = tonic.t.iter().map(|&t| tonic.basis.weights(t)).collect();
    for (a, &j) in idx.iter().enumerate() {
        for (t, (c, w)) in weights.iter().enumerate().skip(j + 1) {
            for e in 0..4 {
                z[(c + e, a)] += w[e] * h[t - j];
            }
        }
    }
    let mz = tonic.chol.solve(&z);
    q -= z.transpose() * mz;
    if alpha > 0.0 && n >= 3 {
        const W: [f64; 3] = [1.0, -2.0, 1.0];
        for row in 0..n - 2 {
            for e in 0..3 {
                let pa = pos[row + e];
                if pa == usize::MAX {
                    continue;
                }
                for f in 0..3 {
                    let pb = pos[row + f];
                    if pb != usize::MAX {
                        q[(pa, pb)] += alpha * W[e] * W[f];
                    }
                }
            }
        }
    }
    let fitted = tonic.apply(sc);
    let resid: Vec<f64> = sc.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let ct = rec.convolve_adjoint(&resid);
    let lin: Vec<f64> = idx.iter().map(|&i| -ct[i]).collect();
    let x0: Vec<f64> = idx.iter().map(|&i| warm[i].max(0.0)).collect();

    let x = nonnegative_qp(&q, &lin, &x0)?;
    for (a, &i) in idx.iter().enumerate() {
        driver[i] = x[a];
    }
    Ok(driver)
}

/// `min ½xᵀQx + cᵀx` over `x ≥ 0` for positive-definite `Q`, by block
/// principal pivoting on the complementarity conditions `x ≥ 0`,
/// `Qx + c ≥ 0`, `xᵀ(Qx + c) = 0`. Coordinates positive in `x0` start free.
/// All infeasible coordinates swap at once while their count keeps falling;
/// after three non-improving rounds only the highest-index one swaps, which
/// guarantees termination.
fn nonnegative_qp(q: &DMatrix<f64>, c: &[f64], x0: &[f64]) -> Result<Vec<f64>> {
    let k = c.len();
    let c_scale = c.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut free: Vec<bool> = x0.iter().map(|v| *v > 0.0).collect();
    let mut best_count = k + 1;
    let mut backup = 3;
    for _ in 0..(20 * k + 100) {
        let f: Vec<usize> = (0..k).filter(|&a| free[a]).collect();
        let mut x = vec![0.0; k];
        if !f.is_empty() {
            let sub = DMatrix::from_fn(f.len(), f.len(), |r, s| q[(f[r], f[s])]);
            let rhs = DVector::from_iterator(f.len(), f.iter().map(|&a| -c[a]));
            let sol = sub
                .cholesky()
                .ok_or_else(|| Error::Numerical("driver subproblem is not positive definite".into()))?
                .solve(&rhs);
            for (r, &a) in f.iter().enumerate() {
                x[a] = sol[r];
            }
        }
        let x_scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut infeasible = Vec::new();
        for a in 0..k {
            let bad = if free[a] {
                x[a] < -1e-12 * x_scale
            } else {
                let grad = c[a] + f.iter().map(|&b| q[(a, b)] * x[b]).sum::<f64>();
                grad < -1e-10 * c_scale
            };
            if bad {
                infeasible.push(a);
            }
        }
        if infeasible.is_empty() {
            x.iter_mut().for_each(|v| *v = v.max(0.0));
            return Ok(x);
        }
        if infeasible.len() < best_count {
            best_count = infeasible.len();
            backup = 3;
        } else if backup > 0 {
            backup -= 1;
        } else {
            infeasible = vec![*infeasible.last().expect("non-empty")];
        }
        for a in infeasible {
            free[a] = !free[a];
        }
    }
    Err(Error::Numerical("driver active-set solve did not terminate".into()))
}

/// Penalized spline smoother over all samples: `y ↦ B(BᵀB + λR)⁻¹Bᵀy`.
struct TonicSmoother {
    basis: SplineBasis,
    t: Vec<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl TonicSmoother {
    fn new(basis: SplineBasis, t: &[f64], ridge: f64) -> Result<Self> {
        let ata = basis.normal_matrix(t, &vec![true; t.len()], ridge);
        let chol = ata.cholesky().ok_or_else(|| {
            Error::Numerical("tonic spline normal equations are singular".into())
        })?;
        Ok(Self { basis, t: t.to_vec(), chol })
    }

    fn apply(&self, y: &[f64]) -> Vec<f64> {
        let m = self.basis.n_coef();
        let mut aty = DVector::<f64>::zeros(m);
        for (ti, yi) in self.t.iter().zip(y) {
            let (j, w) = self.basis.weights(*ti);
            for a in 0..4 {
                aty[j + a] += w[a] * yi;
            }
        }
        let coef: Vec<f64> = self.chol.solve(&aty).iter().copied().collect();
        self.basis.eval(&coef, &self.t)
    }
}

/// Uniform cubic B-spline basis over `[t0, t0 + intervals·spacing]`.
struct SplineBasis {
    t0: f64,
    spacing: f64,
    intervals: usize,
}

impl SplineBasis {
    fn new(t0: f64, t1: f64, spacing: f64) -> Self {
        let intervals = (((t1 - t0) / spacing).ceil() as usize).max(1);
        Self { t0, spacing, intervals }
    }

    fn n_coef(&self) -> usize {
        self.intervals + 3
    }

    /// First coefficient index and the four basis weights at `t`.
    fn weights(&self, t: f64) -> (usize, [f64; 4]) {
        let x = ((t - self.t0) / self.spacing).max(0.0);
        let j = (x.floor() as usize).min(self.intervals - 1);
        let u = x - j as f64;
        let (u2, u3) = (u * u, u * u * u);
        let om = 1.0 - u;
        (
            j,
            [
                om * om * om / 6.0,
                (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
                (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
                u3 / 6.0,
            ],
        )
    }

    fn normal_matrix(&self, t: &[f64], use_sample: &[bool], ridge: f64) -> DMatrix<f64> {
        let m = self.n_coef();
        let mut ata = DMatrix::<f64>::zeros(m, m);
        for i in 0..t.len() {
            if !use_sample[i] {
                continue;
            }
            let (j, w) = self.weights(t[i]);
            for a in 0..4 {
                for b in 0..4 {
                    ata[(j + a, j + b)] += w[a] * w[b];
                }
            }
        }
        for k in 0..m.saturating_sub(2) {
            let idx = [k, k + 1, k + 2];
            let w = [1.0, -2.0, 1.0];
            for a in 0..3 {
                for b in 0..3 {
                    ata[(idx[a], idx[b])] += ridge * w[a] * w[b];
                }
            }
        }
        ata
    }

    /// Penalized least squares on the samples where `use_sample` holds.
    fn fit(&self, t: &[f64], y: &[f64], use_sample: &[bool], ridge: f64) -> Result<Vec<f64>> {
        let mut aty = DVector::<f64>::zeros(self.n_coef());
        for i in 0..t.len() {
            if use_sample[i] {
                let (j, w) = self.weights(t[i]);
                for a in 0..4 {
                    aty[j + a] += w[a] * y[i];
                }
            }
        }
        let chol = self.normal_matrix(t, use_sample, ridge).cholesky().ok_or_else(|| {
            Error::Numerical("tonic spline normal equations are singular".into())
        })?;
        Ok(chol.solve(&aty).iter().copied().collect())
    }

    fn eval(&self, coef: &[f64], t: &[f64]) -> Vec<f64> {
        t.iter()
            .map(|&ti| {
                let (j, w) = self.weights(ti);
                (0..4).map(|a| w[a] * coef[j + a]).sum()
            })
            .collect()
    }
}

/// Tuning for [`decompose_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecompositionParams {
    /// Tikhonov weight on the driver second difference.
    pub regularization: f64,
    pub tonic_knot_spacing_s: f64,
    /// Curvature ridge on the tonic spline coefficients.
    pub tonic_ridge: f64,
    /// Driver level (µS/s) an excursion must exceed to count as an impulse.
    pub impulse_threshold: f64,
    /// Driver level (µS/s) that delimits excursions.
    pub excursion_floor: f64,
    /// Convergence tolerance on the largest tonic update, µS.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// After this many passes the impulse support may only grow.
    pub freeze_after: usize,
    /// Slowness bound on the tonic, µS per sample at 10 Hz.
    pub tonic_step_bound: f64,
}

impl Default for DecompositionParams {
    fn default() -> Self {
        Self {
            regularization: 1e-4,
            tonic_knot_spacing_s: 10.0,
            tonic_ridge: 1e-2,
            impulse_threshold: 0.02,
            excursion_floor: 1e-3,
            tolerance: 1e-5,
            max_iterations: 200,
            freeze_after: 20,
            tonic_step_bound: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub participant_id: String,
    pub session_id: String,
    pub t: Vec<f64>,
    pub sc: Vec<f64>,
    pub tonic: Vec<f64>,
    /// Nonnegative, µS/s.
    pub driver: Vec<f64>,
    pub phasic: Vec<f64>,
    pub residual: Vec<f64>,
    pub impulse: ImpulseResponse,
    pub residual_rms: f64,
    /// `max |sc - tonic - phasic|`.
    pub residual_max: f64,
    /// Largest `|Δtonic|` between adjacent samples.
    pub max_tonic_step: f64,
    /// Mass of the negative part of the unprojected driver, µS.
    pub negative_mass: f64,
    /// ℓ1 norm of the unprojected driver, µS.
    pub driver_l1: f64,
    pub iterations: usize,
}

impl Decomposition {
    pub fn dt(&self) -> f64 {
        if self.t.len() >= 2 {
            (self.t[self.t.len() - 1] - self.t[0]) / (self.t.len() - 1) as f64
        } else {
            0.1
        }
    }

    /// Whether the tonic respects the slowness bound (scaled to the trace rate).
    pub fn tonic_is_slow(&self, bound_per_tenth_second: f64) -> bool {
        self.max_tonic_step <= bound_per_tenth_second * self.dt() / 0.1 + 1e-12
    }

    /// Objective minimized by [`optimize_taus`].
    pub fn compactness(&self) -> f64 {
        self.negative_mass + TAU_L1_WEIGHT * self.driver_l1
    }
}

pub fn decompose(trace: &EdaTrace, ir: &ImpulseResponse) -> Result<Decomposition> {
    decompose_with(trace, ir, &DecompositionParams::default())
}

impl SplineBasis {
    /// Lower envelope: refits on the samples at or below the previous fit.
    fn lower_envelope(&self, t: &[f64], y: &[f64], ridge: f64) -> Result<Vec<f64>> {
        const PASSES: usize = 20;
        const SLACK: f64 = 1e-3;
        let mut keep = vec![true; t.len()];
        let mut fit = self.eval(&self.fit(t, y, &keep, ridge)?, t);
        for _ in 0..PASSES {
            let next: Vec<bool> = y.iter().zip(&fit).map(|(v, f)| *v <= f + SLACK).collect();
            if next == keep || next.iter().filter(|k| **k).count() < 4 {
                break;
            }
            keep = next;
            fit = self.eval(&self.fit(t, y, &keep, ridge)?, t);
        }
        Ok(fit)
    }
}

/// Marks samples inside driver excursions that reach `threshold`.
fn impulse_mask(driver: &[f64], floor: f64, threshold: f64) -> Vec<bool> {
    let n = driver.len();
    let mut mask = vec![false; n];
    let mut i = 0;
    while i < n {
        if driver[i] <= floor {
            i += 1;
            continue;
        }
        let start = i;
        let mut peak = 0.0f64;
        while i < n && driver[i] > floor {
            peak = peak.max(driver[i]);
            i += 1;
        }
        if peak >= threshold {
            // Include the resting samples that bracket the excursion.
            let lo = start.saturating_sub(1);
            let hi = i.min(n - 1);
            mask[lo..=hi].iter_mut().for_each(|m| *m = true);
        }
    }
    mask
}

pub fn decompose_with(
    trace: &EdaTrace,
    ir: &ImpulseResponse,
    params: &DecompositionParams,
) -> Result<Decomposition> {
    let n = trace.len();
    if trace.sc.iter().chain(&trace.t).any(|v| !v.is_finite()) {
        return Err(Error::DecompositionInput("non-finite sample".into()));
    }
    if n < 4 || trace.duration() + 1.0 / trace.rate_hz < MIN_DURATION_S - 1e-9 {
        return Err(Error::DecompositionInput(format!(
            "need at least {MIN_DURATION_S} s of signal, got {:.3} s",
            trace.duration()
        )));
    }
    let dt = 1.0 / trace.rate_hz;
    let rec = ir.recursion(dt);
    let inv = RegularizedInverse::new(&rec, n, params.regularization)?;
    let basis = SplineBasis::new(trace.start(), trace.end(), params.tonic_knot_spacing_s);

    let mut tonic = basis.lower_envelope(&trace.t, &trace.sc, params.tonic_ridge)?;
    let smoother = TonicSmoother::new(basis, &trace.t, params.tonic_ridge)?;

    let mut history = Vec::new();
    let mut raw_driver;
    let mut driver = vec![0.0; n];
    let mut phasic;
    let mut mask = vec![false; n];
    let mut iterations = 0;
    loop {
        iterations += 1;
        let r: Vec<f64> = trace.sc.iter().zip(&tonic).map(|(s, b)| s - b).collect();
        raw_driver = rec.deconvolve(&inv.smooth(&r));
        let found = impulse_mask(&raw_driver, params.excursion_floor, params.impulse_threshold);
        // Late iterations only grow the support, so it settles.
        let next_mask: Vec<bool> = if iterations > params.freeze_after {
            mask.iter().zip(&found).map(|(a, b)| *a || *b).collect()
        } else {
            found
        };
        let mask_changed = next_mask != mask;
        mask = next_mask;
        // The driver subproblem depends on the tonic only through the mask.
        if mask_changed {
            let warm: Vec<f64> = (0..n)
                .map(|i| if driver[i] > 0.0 { driver[i] } else { raw_driver[i].max(0.0) })
                .collect();
            driver = nonnegative_deconvolution(&rec, &trace.sc, &smoother, &mask, params.regularization, &warm)?;
        }
        phasic = rec.convolve(&driver);
        let target: Vec<f64> = trace.sc.iter().zip(&phasic).map(|(s, p)| s - p).collect();
        let new_tonic = smoother.apply(&target);
        let change = new_tonic
            .iter()
            .zip(&tonic)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        history.push(change);
        tonic = new_tonic;
        if !mask_changed && change <= params.tolerance {
            break;
        }
        if iterations >= params.max_iterations {
            return Err(Error::NonConvergence { trace: history });
        }
    }

    // Final components are consistent with the converged tonic.
    let residual: Vec<f64> = (0..n).map(|i| trace.sc[i] - tonic[i] - phasic[i]).collect();
    let residual_rms = (residual.iter().map(|r| r * r).sum::<f64>() / n as f64).sqrt();
    let residual_max = residual.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    let max_tonic_step = tonic.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
    let negative_mass = raw_driver.iter().map(|d| (-d).max(0.0)).sum::<f64>() * dt;
    let driver_l1 = raw_driver.iter().map(|d| d.abs()).sum::<f64>() * dt;

    Ok(Decomposition {
        participant_id: trace.participant_id.clone(),
        session_id: trace.session_id.clone(),
        t: trace.t.clone(),
        sc: trace.sc.clone(),
        tonic,
        driver,
        phasic,
        residual,
        impulse: *ir,
        residual_rms,
        residual_max,
        max_tonic_step,
        negative_mass,
        driver_l1,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TauFit {
    pub impulse: ImpulseResponse,
    pub objective: f64,
    pub init_objective: f64,
    pub evaluations: usize,
}

/// Tau objective at `ir`; `+∞` outside the admissible box or when the
/// decomposition fails.
pub fn tau_objective(trace: &EdaTrace, ir: &ImpulseResponse, params: &DecompositionParams) -> f64 {
    if !ir.within_bounds() {
        return f64::INFINITY;
    }
    decompose_with(trace, ir, params).map_or(f64::INFINITY, |d| d.compactness())
}

pub fn optimize_taus(trace: &EdaTrace, init: &ImpulseResponse) -> Result<TauFit> {
    optimize_taus_with(trace, init, &DecompositionParams::default())
}

/// Nelder–Mead over `(τ1, τ2)` within the admissible box. Returns `init`
/// unless a candidate strictly improves the objective.
pub fn optimize_taus_with(
    trace: &EdaTrace,
    init: &ImpulseResponse,
    params: &DecompositionParams,
) -> Result<TauFit> {
    if !init.within_bounds() {
        return Err(Error::TauBounds(format!(
            "initial taus ({}, {}) outside 0.1 ≤ tau1 ≤ 2, 1 ≤ tau2 ≤ 20, tau1 < tau2",
            init.tau1, init.tau2
        )));
    }
    let init_objective = tau_objective(trace, init, params);
    if !init_objective.is_finite() {
        // Surface the underlying failure rather than a bare infinity.
        decompose_with(trace, init, params)?;
    }
    let f = |x: &[f64]| {
        ImpulseResponse::new(x[0], x[1]).map_or(f64::INFINITY, |ir| tau_objective(trace, &ir, params))
    };
    let opts = NelderMeadOptions {
        initial_step: 0.1,
        f_tol: 1e-9,
        x_tol: 1e-4,
        max_evals: 400,
    };
    let m = nelder_mead(f, &[init.tau1, init.tau2], &opts);
    // Differences at round-off level are not improvements.
    if m.f < init_objective - 1e-12 * (1.0 + init_objective.abs()) {
        Ok(TauFit {
            impulse: ImpulseResponse::new(m.x[0], m.x[1])?,
            objective: m.f,
            init_objective,
            evaluations: m.evals,
        })
    } else {
        Ok(TauFit {
            impulse: *init,
            objective: init_objective,
            init_objective,
            evaluations: m.evals,
        })
    }
}

const DECOMP_HEADER: [&str; 5] = ["unix_time", "sc", "tonic", "phasic", "driver"];

/// Writes the audit table `unix_time, sc, tonic, phasic, driver`.
pub fn write_decomposition_csv<W: Write>(w: W, d: &Decomposition) -> Result<()> {
    let mut wtr = csv_writer(w);
    wtr.write_record(DECOMP_HEADER)?;
    for i in 0..d.t.len() {
        wtr.write_record([
            d.t[i].to_string(),
            d.sc[i].to_string(),
            d.tonic[i].to_string(),
            d.phasic[i].to_string(),
            d.driver[i].to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<decomposition writer>", e))?;
    Ok(())
}

/// Columns of an audit table, in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecompositionColumns {
    pub t: Vec<f64>,
    pub sc: Vec<f64>,
    pub tonic: Vec<f64>,
    pub phasic: Vec<f64>,
    pub driver: Vec<f64>,
}

pub fn read_decomposition_csv<R: Read>(rdr: R) -> Result<DecompositionColumns> {
    let ctx = "decomposition table";
    let mut rdr = csv_reader(rdr);
    expect_header(rdr.headers()?, &DECOMP_HEADER, ctx)?;
    let mut out = DecompositionColumns::default();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() < 5 {
            return Err(Error::format(ctx, format!("line {line}: expected 5 fields")));
        }
        let cols = [&mut out.t, &mut out.sc, &mut out.tonic, &mut out.phasic, &mut out.driver];
        for (k, col) in cols.into_iter().enumerate() {
            col.push(parse_f64(&rec[k], ctx, line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::gaussian_smooth;

    fn trace(sc: Vec<f64>) -> EdaTrace {
        let t = (0..sc.len()).map(|i| 1000.0 + i as f64 * 0.1).collect();
        EdaTrace::new("p", "s", t, sc, 10.0).unwrap()
    }

    /// Direct (quadratic) convolution oracle for a single impulse.
    fn direct_scr(n: usize, onset: usize, amplitude: f64, ir: &ImpulseResponse) -> Vec<f64> {
        (0..n)
            .map(|i| if i > onset { amplitude * ir.value((i - onset) as f64 * 0.1) } else { 0.0 })
            .collect()
    }

    #[test]
    fn kernel_has_unit_peak_and_is_nonnegative() {
        let ir = ImpulseResponse::default();
        assert!((ir.value(ir.peak_time()) - 1.0).abs() < 1e-12);
        let k = ir.sampled(0.01, 3000);
        assert!(k.iter().all(|v| *v >= 0.0));
        assert!(k.iter().cloned().fold(0.0, f64::max) <= 1.0 + 1e-12);
    }

    #[test]
    fn rejects_inverted_taus() {
        assert!(ImpulseResponse::new(2.0, 0.75).is_err());
        assert!(ImpulseResponse::new(1.0, 1.0).is_err());
    }

    #[test]
    fn recursion_matches_direct_convolution() {
        let ir = ImpulseResponse::new(0.6, 3.0).unwrap();
        let dt = 0.1;
        let rec = ir.recursion(dt);
        let d: Vec<f64> = (0..200).map(|i| ((i * 37 % 11) as f64 - 3.0).max(0.0)).collect();
        let h = ir.sampled(dt, 200);
        let direct: Vec<f64> = (0..200)
            .map(|n| (0..=n).map(|k| dt * d[k] * h[n - k]).sum())
            .collect();
        let fast = rec.convolve(&d);
        for (a, b) in direct.iter().zip(&fast) {
            assert!((a - b).abs() < 1e-10);
        }
        let back = rec.deconvolve(&fast);
        for (a, b) in d[..199].iter().zip(&back) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn kernel_gram_matches_column_products() {
        let rec = ImpulseResponse::new(0.6, 3.0).unwrap().recursion(0.1);
        let n = 80;
        let cols: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                let mut e = vec![0.0; n];
                e[j] = 1.0;
                rec.convolve(&e)
            })
            .collect();
        let gram = KernelGram::new(&rec, n);
        for i in (0..n).step_by(7) {
            for j in (0..n).step_by(5) {
                let direct: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                assert!((gram.get(i, j) - direct).abs() < 1e-12, "({i}, {j})");
            }
        }
        let h = rec.kernel(n);
        for (a, b) in h.iter().zip(&cols[0]) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn nonnegative_qp_satisfies_kkt() {
        let k = 30;
        let a = DMatrix::<f64>::from_fn(k + 5, k, |r, c| (((r * 31 + c * 17) % 13) as f64 - 6.0) / 6.0);
        let q = a.transpose() * &a + DMatrix::identity(k, k) * 1e-3;
        let c: Vec<f64> = (0..k).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.7).collect();
        for warm in [vec![0.0; k], vec![1.0; k]] {
            let x = nonnegative_qp(&q, &c, &warm).unwrap();
            let g = &q * DVector::from_column_slice(&x) + DVector::from_column_slice(&c);
            for i in 0..k {
                assert!(x[i] >= 0.0);
                assert!(g[i] > -1e-8, "gradient {i} = {}", g[i]);
                assert!((x[i] * g[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn banded_cholesky_matches_dense() {
        let n = 12;
        let mut b = BandedSpd::identity(n, 2);
        let mut dense = DMatrix::<f64>::identity(n, n);
        for i in 0..n {
            b.add(i, i, 3.0);
            dense[(i, i)] += 3.0;
            if i >= 1 {
                b.add(i, i - 1, -1.0);
                dense[(i, i - 1)] -= 1.0;
                dense[(i - 1, i)] -= 1.0;
            }
            if i >= 2 {
                b.add(i, i - 2, 0.5);
                dense[(i, i - 2)] += 0.5;
                dense[(i - 2, i)] += 0.5;
            }
        }
        let rhs: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        b.factor().unwrap();
        let x = b.solve(&rhs);
        let xd = dense.cholesky().unwrap().solve(&DVector::from_vec(rhs));
        for i in 0..n {
            assert!((x[i] - xd[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn spline_reproduces_cubics() {
        let basis = SplineBasis::new(0.0, 60.0, 10.0);
        let t: Vec<f64> = (0..601).map(|i| i as f64 * 0.1).collect();
        let y: Vec<f64> = t.iter().map(|x| 1.0 + 0.2 * x - 0.003 * x * x + 1e-5 * x * x * x).collect();
        let c = basis.fit(&t, &y, &vec![true; t.len()], 0.0).unwrap();
        let fit = basis.eval(&c, &t);
        for (a, b) in fit.iter().zip(&y) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn slow_ramp_has_no_phasic() {
        let sc: Vec<f64> = (0..600).map(|i| 3.0 + 0.01 * i as f64 * 0.1).collect();
        let d = decompose(&trace(sc.clone()), &ImpulseResponse::default()).unwrap();
        assert!(d.phasic.iter().all(|p| p.abs() < 0.02), "max phasic {}", d.phasic.iter().cloned().fold(0.0, f64::max));
        for (a, b) in d.tonic.iter().zip(&sc) {
            assert!((a - b).abs() < 0.02);
        }
    }

    #[test]
    fn single_scr_on_flat_baseline() {
        let ir = ImpulseResponse::default();
        let scr = direct_scr(600, 200, 1.0, &ir);
        let sc: Vec<f64> = scr.iter().map(|v| 5.0 + v).collect();
        let d = decompose(&trace(sc.clone()), &ir).unwrap();
        let peak = d.phasic.iter().cloned().fold(0.0, f64::max);
        assert!((peak - 1.0).abs() < 0.1, "recovered amplitude {peak}");
        // One contiguous driver excursion.
        let runs = d.driver.windows(2).filter(|w| w[0] <= 1e-3 && w[1] > 1e-3).count();
        assert_eq!(runs, 1);
        assert!(d.driver.iter().all(|v| *v >= 0.0));
        for (i, v) in sc.iter().enumerate() {
            assert!((v - d.tonic[i] - d.phasic[i]).abs() <= d.residual_max + 1e-12);
        }
    }

    #[test]
    fn noise_free_smoothed_input_reconstructs() {
        let ir = ImpulseResponse::default();
        let mut sc = vec![4.0; 700];
        for (onset, amp) in [(100, 0.8), (260, 0.3), (330, 1.5), (520, 0.6)] {
            for (v, s) in sc.iter_mut().zip(direct_scr(700, onset, amp, &ir)) {
                *v += s;
            }
        }
        let tr = gaussian_smooth(&trace(sc), 30).unwrap();
        let d = decompose(&tr, &ir).unwrap();
        assert!(d.residual_max <= 0.05, "residual {}", d.residual_max);
        for i in 0..tr.len() {
            assert!((tr.sc[i] - d.tonic[i] - d.phasic[i]).abs() <= d.residual_max);
        }
    }

    #[test]
    fn two_scrs_keep_amplitude_order() {
        let ir = ImpulseResponse::default();
        let a = direct_scr(600, 150, 0.5, &ir);
        let b = direct_scr(600, 230, 1.2, &ir);
        let sc: Vec<f64> = (0..600).map(|i| 4.0 + a[i] + b[i]).collect();
        let d = decompose(&trace(sc), &ir).unwrap();
        let peak_in = |lo: usize, hi: usize| d.driver[lo..hi].iter().cloned().fold(0.0, f64::max);
        let (p1, p2) = (peak_in(140, 200), peak_in(220, 300));
        assert!(p1 > 0.1 && p2 > p1, "driver peaks {p1} {p2}");
    }

    #[test]
    fn offset_moves_only_tonic() {
        let ir = ImpulseResponse::default();
        let scr = direct_scr(500, 120, 0.8, &ir);
        let base: Vec<f64> = scr.iter().map(|v| 2.0 + v).collect();
        let shifted: Vec<f64> = base.iter().map(|v| v + 3.0).collect();
        let d0 = decompose(&trace(base), &ir).unwrap();
        let d1 = decompose(&trace(shifted), &ir).unwrap();
        for i in 0..500 {
            assert!((d1.phasic[i] - d0.phasic[i]).abs() < 0.02);
            assert!((d1.tonic[i] - d0.tonic[i] - 3.0).abs() < 0.02);
        }
    }

    #[test]
    fn scale_equivariance() {
        let ir = ImpulseResponse::default();
        let scr = direct_scr(500, 100, 0.7, &ir);
        let scr2 = direct_scr(500, 300, 0.4, &ir);
        let base: Vec<f64> = (0..500).map(|i| 3.0 + 0.002 * i as f64 * 0.1 + scr[i] + scr2[i]).collect();
        let d0 = decompose(&trace(base.clone()), &ir).unwrap();
        for c in [0.5, 2.0, 3.7] {
            let d1 = decompose(&trace(base.iter().map(|v| c * v).collect()), &ir).unwrap();
            let pk = d0.phasic.iter().cloned().fold(0.0, f64::max);
            for i in 0..500 {
                assert!((d1.phasic[i] - c * d0.phasic[i]).abs() <= 0.01 * c * pk);
                assert!((d1.tonic[i] - c * d0.tonic[i]).abs() <= 0.01 * c * d0.tonic[i].abs());
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        let mut sc = vec![1.0; 600];
        sc[5] = f64::NAN;
        let t: Vec<f64> = (0..600).map(|i| i as f64 * 0.1).collect();
        let tr = EdaTrace { participant_id: "p".into(), session_id: "s".into(), t, sc, rate_hz: 10.0 };
        assert!(matches!(decompose(&tr, &ImpulseResponse::default()), Err(Error::DecompositionInput(_))));
        assert!(matches!(
            decompose(&trace(vec![1.0; 50]), &ImpulseResponse::default()),
            Err(Error::DecompositionInput(_))
        ));
    }

    #[test]
    fn non_convergence_carries_trace() {
        let ir = ImpulseResponse::default();
        let scr = direct_scr(600, 200, 1.0, &ir);
        let sc: Vec<f64> = (0..600).map(|i| 5.0 + 0.1 * (i as f64 * 0.01).sin() + scr[i]).collect();
        let params = DecompositionParams { max_iterations: 1, tolerance: 0.0, ..Default::default() };
        match decompose_with(&trace(sc), &ir, &params) {
            Err(Error::NonConvergence { trace }) => assert_eq!(trace.len(), 1),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn flat_signal_returns_init_taus() {
        let init = ImpulseResponse::new(0.5, 3.0).unwrap();
        let fit = optimize_taus(&trace(vec![4.0; 300]), &init).unwrap();
        assert_eq!(fit.impulse, init);
    }

    #[test]
    fn tau_init_out_of_bounds_errors() {
        let init = ImpulseResponse::new(0.05, 3.0).unwrap();
        assert!(matches!(optimize_taus(&trace(vec![4.0; 300]), &init), Err(Error::TauBounds(_))));
    }

    fn scr_train(ir: &ImpulseResponse) -> EdaTrace {
        let mut sc = vec![3.0; 900];
        for (onset, amp) in [(50, 0.6), (170, 1.0), (300, 0.4), (420, 0.8), (600, 0.5), (720, 0.9)] {
            for (v, s) in sc.iter_mut().zip(direct_scr(900, onset, amp, ir)) {
                *v += s;
            }
        }
        gaussian_smooth(&trace(sc), 30).unwrap()
    }

    #[test]
    fn optimizer_recovers_taus() {
        let truth = ImpulseResponse::default();
        let tr = scr_train(&truth);
        let fit = optimize_taus(&tr, &ImpulseResponse::new(0.4, 4.0).unwrap()).unwrap();
        assert!(fit.objective <= fit.init_objective);
        assert!((fit.impulse.tau1 / 0.75 - 1.0).abs() <= 0.3, "tau1 {}", fit.impulse.tau1);
        assert!((fit.impulse.tau2 / 2.0 - 1.0).abs() <= 0.3, "tau2 {}", fit.impulse.tau2);
    }

    #[test]
    fn optimizer_fixed_point() {
        let truth = ImpulseResponse::default();
        let tr = scr_train(&truth);
        let first = optimize_taus(&tr, &truth).unwrap();
        let second = optimize_taus(&tr, &first.impulse).unwrap();
        assert!(second.objective <= first.objective);
        assert!((second.objective - first.objective).abs() <= 1e-6);
    }

    #[test]
    fn audit_table_round_trip() {
        let ir = ImpulseResponse::default();
        let sc: Vec<f64> = direct_scr(200, 30, 0.5, &ir).iter().map(|v| 2.0 + v).collect();
        let d = decompose(&trace(sc), &ir).unwrap();
        let mut buf = Vec::new();
        write_decomposition_csv(&mut buf, &d).unwrap();
        let cols = read_decomposition_csv(buf.as_slice()).unwrap();
        assert_eq!(cols.t, d.t);
        assert_eq!(cols.phasic, d.phasic);
        assert_eq!(cols.driver, d.driver);
    }
}
