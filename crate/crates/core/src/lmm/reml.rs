//! Profiled REML for diagonal random-effect covariance.
//!
//! With `V = σe²·W`, `W_i = I + Z_i Λ Z_iᵀ`, `Λ = diag(θ²)` and `θ = σ_u/σe`,
//! Woodbury on each participant block reduces every likelihood evaluation
//! to `r × r` factorizations of `M_i = I + L Z_iᵀZ_i L`, `L = diag(θ)`,
//! over precomputed cross products. `β` and `σe` are profiled out and `log θ`
//! is searched by Nelder–Mead, then polished by safeguarded Newton steps.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::design::Design;
use crate::error::{Error, Result};
use crate::optim::{nelder_mead, NelderMeadOptions};

/// Search box for `log θ`; beyond it the likelihood is flat to working precision.
const LOG_THETA_BOUNDS: (f64, f64) = (-12.0, 7.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemlOptions {
    /// Stop polishing once the largest change in `log θ` falls below this.
    pub param_tol: f64,
    pub max_evals: usize,
    pub max_newton: usize,
}

impl Default for RemlOptions {
    fn default() -> Self {
        Self { param_tol: 1e-8, max_evals: 4000, max_newton: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub converged: bool,
    pub evaluations: usize,
    pub newton_steps: usize,
    /// Restricted log-likelihood after each accepted step; non-decreasing.
    pub loglik_trace: Vec<f64>,
    /// Per random term: estimate sits on `σ = 0`.
    pub boundary: Vec<bool>,
    /// Variance components cannot be separated from the residual variance.
    pub unidentifiable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmFit {
    pub terms: Vec<String>,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub t_fixed: Vec<f64>,
    /// Residual degrees of freedom `N − p` for the fixed-effect t-values.
    pub df: usize,
    pub random_terms: Vec<String>,
    /// Standard deviations, one per random term.
    pub sigma_u: Vec<f64>,
    pub sigma_u_se: Vec<Option<f64>>,
    /// `σ̂/SE(σ̂)` from the observed information; `None` on the boundary or
    /// when the information is singular.
    pub t_random: Vec<Option<f64>>,
    pub sigma_e: f64,
    /// Restricted log-likelihood at the optimum.
    pub loglik: f64,
    pub n_obs: usize,
    pub n_participants: usize,
    pub dropped_missing: usize,
    pub dropped_level: usize,
    pub convergence: ConvergenceRecord,
}

impl LmmFit {
    pub fn coefficient(&self, term: &str) -> Option<(f64, f64)> {
        let i = self.terms.iter().position(|t| t == term)?;
        Some((self.beta[i], self.t_fixed[i]))
    }

    pub fn random_sd(&self, term: &str) -> Option<(f64, Option<f64>)> {
        let i = self.random_terms.iter().position(|t| t == term)?;
        Some((self.sigma_u[i], self.t_random[i]))
    }
}

/// GLS quantities at fixed variance ratios.
#[derive(Debug, Clone)]
pub struct GlsSolution {
    pub beta: DVector<f64>,
    /// `(XᵀW⁻¹X)⁻¹`; multiply by `σe²` for the covariance of `β̂`.
    pub xwx_inv: DMatrix<f64>,
    /// `(y − Xβ̂)ᵀ W⁻¹ (y − Xβ̂)`.
    pub rss: f64,
    pub log_det_w: f64,
    pub log_det_xwx: f64,
}

struct Block {
    ztz: DMatrix<f64>,
    ztx: DMatrix<f64>,
    zty: DVector<f64>,
}

/// Cross products that every likelihood evaluation reuses.
struct Sufficient {
    blocks: Vec<Block>,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
    n: usize,
    p: usize,
    r: usize,
}

impl Sufficient {
    fn new(d: &Design) -> Self {
        let x = &d.x;
        let y = &d.y;
        let blocks = (0..d.n_participants())
            .map(|i| {
                let rows = d.groups[i].clone();
                let z = d.z_block(i);
                let xi = x.rows(rows.start, rows.len());
                let yi = y.rows(rows.start, rows.len());
                Block { ztz: z.transpose() * &z, ztx: z.transpose() * xi, zty: z.transpose() * yi }
            })
            .collect();
        Self {
            blocks,
            xtx: x.transpose() * x,
            xty: x.transpose() * y,
            yty: y.dot(y),
            n: d.n_obs(),
            p: d.n_fixed(),
            r: d.random.len(),
        }
    }

    fn gls(&self, theta: &[f64]) -> Option<GlsSolution> {
        let mut xwx = self.xtx.clone();
        let mut xwy = self.xty.clone();
        let mut ywy = self.yty;
        let mut log_det_w = 0.0;
        if self.r > 0 {
            for b in &self.blocks {
                let mut m = DMatrix::<f64>::identity(self.r, self.r);
                for a in 0..self.r {
                    for c in 0..self.r {
                        m[(a, c)] += theta[a] * b.ztz[(a, c)] * theta[c];
                    }
                }
                let chol = m.cholesky()?;
                log_det_w += 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                let mut lzx = b.ztx.clone();
                let mut lzy = b.zty.clone();
                for a in 0..self.r {
                    lzx.row_mut(a).scale_mut(theta[a]);
                    lzy[a] *= theta[a];
                }
                let mx = chol.solve(&lzx);
                let my = chol.solve(&lzy);
                xwx -= lzx.transpose() * &mx;
                xwy -= lzx.transpose() * &my;
                ywy -= lzy.dot(&my);
            }
        }
        let chol = xwx.cholesky()?;
        let log_det_xwx = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let beta = chol.solve(&xwy);
        let rss = ywy - beta.dot(&xwy);
        Some(GlsSolution { beta, xwx_inv: chol.inverse(), rss, log_det_w, log_det_xwx })
    }

    /// Per random term `j`: `tr(P Z_j Z_jᵀ)` and `(Z_jᵀ P y)²` summed over
    /// participants, where `P` is the REML projection for `W`. Both come from
    /// the Woodbury form `ZᵀW⁻¹ = Zᵀ − ZᵀZ·L·M⁻¹·L·Zᵀ`.
    fn score_parts(&self, theta: &[f64]) -> Option<(GlsSolution, DVector<f64>, DVector<f64>)> {
        let g = self.gls(theta)?;
        let r = self.r;
        let mut trace = DVector::<f64>::zeros(r);
        let mut quad = DVector::<f64>::zeros(r);
        for b in &self.blocks {
            let mut m = DMatrix::<f64>::identity(r, r);
            for a in 0..r {
                for c in 0..r {
                    m[(a, c)] += theta[a] * b.ztz[(a, c)] * theta[c];
                }
            }
            let chol = m.cholesky()?;
            let mut lztz = b.ztz.clone();
            let mut lzx = b.ztx.clone();
            let mut lzy = b.zty.clone();
            for a in 0..r {
                lztz.row_mut(a).scale_mut(theta[a]);
                lzx.row_mut(a).scale_mut(theta[a]);
                lzy[a] *= theta[a];
            }
            let zwz = &b.ztz - lztz.transpose() * chol.solve(&lztz);
            let zwx = &b.ztx - lztz.transpose() * chol.solve(&lzx);
            let zwy = &b.zty - lztz.transpose() * chol.solve(&lzy);
            let e = &zwy - &zwx * &g.beta;
            let cb = &g.xwx_inv * zwx.transpose();
            for j in 0..r {
                trace[j] += zwz[(j, j)] - zwx.row(j).dot(&cb.column(j).transpose());
                quad[j] += e[j] * e[j];
            }
        }
        Some((g, trace, quad))
    }

    /// Gradient of [`Sufficient::profiled`] in `log θ`:
    /// `2θ_j²·[tr_j − quad_j/σe²]` at the profiled `σe²`.
    fn gradient(&self, theta: &[f64]) -> Option<DVector<f64>> {
        let (g, trace, quad) = self.score_parts(theta)?;
        let s2 = g.rss / self.dof();
        Some(DVector::from_iterator(
            self.r,
            (0..self.r).map(|j| 2.0 * theta[j] * theta[j] * (trace[j] - quad[j] / s2)),
        ))
    }

    /// Gradient of [`Sufficient::unprofiled`] in `(σ_u, σe)`.
    fn unprofiled_gradient(&self, sigma_u: &[f64], sigma_e: f64) -> Option<DVector<f64>> {
        let theta: Vec<f64> = sigma_u.iter().map(|s| s / sigma_e).collect();
        let (g, trace, quad) = self.score_parts(&theta)?;
        let s2 = sigma_e * sigma_e;
        let d_theta: Vec<f64> = (0..self.r).map(|j| 2.0 * theta[j] * (trace[j] - quad[j] / s2)).collect();
        let d_s2 = self.dof() / s2 - g.rss / (s2 * s2);
        let mut out = DVector::<f64>::zeros(self.r + 1);
        for j in 0..self.r {
            out[j] = d_theta[j] / sigma_e;
            out[self.r] -= d_theta[j] * sigma_u[j] / s2;
        }
        out[self.r] += d_s2 * 2.0 * sigma_e;
        Some(out)
    }

    fn dof(&self) -> f64 {
        (self.n - self.p) as f64
    }

    /// `−2ℓ_R` with `σe²` profiled out, up to the constant `(N−p)(1 + ln 2π)`.
    fn profiled(&self, theta: &[f64]) -> f64 {
        match self.gls(theta) {
            Some(g) if g.rss > 0.0 => self.dof() * (g.rss / self.dof()).ln() + g.log_det_w + g.log_det_xwx,
            _ => f64::INFINITY,
        }
    }

    /// Full `−2ℓ_R` in `(σ_u, σe)`, up to `(N−p) ln 2π`.
    #[cfg(test)]
    fn unprofiled(&self, sigma_u: &[f64], sigma_e: f64) -> f64 {
        if sigma_e <= 0.0 || sigma_u.iter().any(|s| *s < 0.0) {
            return f64::INFINITY;
        }
        let theta: Vec<f64> = sigma_u.iter().map(|s| s / sigma_e).collect();
        match self.gls(&theta) {
            Some(g) => {
                let s2 = sigma_e * sigma_e;
                self.dof() * s2.ln() + g.log_det_w + g.log_det_xwx + g.rss / s2
            }
            None => f64::INFINITY,
        }
    }

    fn loglik(&self, profiled: f64) -> f64 {
        -0.5 * (profiled + self.dof() * (1.0 + (2.0 * std::f64::consts::PI).ln()))
    }
}

/// `β̂` and its covariance at known variance components.
pub fn gls_at(design: &Design, sigma_u: &[f64], sigma_e: f64) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if sigma_u.len() != design.random.len() || sigma_e <= 0.0 {
        return Err(Error::ModelSpec(format!(
            "need {} random SDs and σe > 0",
            design.random.len()
        )));
    }
    let st = Sufficient::new(design);
    let theta: Vec<f64> = sigma_u.iter().map(|s| s / sigma_e).collect();
    let g = st
        .gls(&theta)
        .ok_or_else(|| Error::Numerical("GLS normal equations are singular".into()))?;
    Ok((g.beta.iter().copied().collect(), g.xwx_inv * (sigma_e * sigma_e)))
}

pub fn fit_reml(design: &Design) -> Result<LmmFit> {
    fit_reml_with(design, &RemlOptions::default())
}

pub fn fit_reml_with(design: &Design, opts: &RemlOptions) -> Result<LmmFit> {
    let (n, p, q) = (design.n_obs(), design.n_fixed(), design.n_participants());
    if n <= p {
        return Err(Error::InsufficientData(format!("{n} observations for {p} fixed effects")));
    }
    if q < 2 {
        return Err(Error::InsufficientData(format!("{q} participant(s); need at least 2")));
    }
    let collinear = design.collinear_columns();
    if !collinear.is_empty() {
        return Err(Error::Collinear(collinear));
    }
    let st = Sufficient::new(design);
    let r = st.r;

    let to_theta = |x: &[f64]| -> Vec<f64> {
        x.iter().map(|v| v.clamp(LOG_THETA_BOUNDS.0, LOG_THETA_BOUNDS.1).exp()).collect()
    };
    let mut evaluations = 0usize;
    let mut trace = Vec::new();
    let mut theta = vec![0.0; r];
    let mut converged = true;
    let mut newton_steps = 0;
    let mut boundary = vec![false; r];

    if r > 0 {
        let nm = nelder_mead(
            |x| st.profiled(&to_theta(x)),
            &vec![0.0; r],
            &NelderMeadOptions { initial_step: 1.0, f_tol: 1e-10, x_tol: 1e-6, max_evals: opts.max_evals },
        );
        evaluations += nm.evals;
        trace.extend(nm.trace.iter().map(|f| st.loglik(*f)));
        theta = to_theta(&nm.x);
        let mut f_best = nm.f;

        // Components that do at least as well at zero are set to the boundary.
        let mut order: Vec<usize> = (0..r).collect();
        order.sort_by(|a, b| theta[*a].total_cmp(&theta[*b]));
        for j in order {
            let mut trial = theta.clone();
            trial[j] = 0.0;
            let f = st.profiled(&trial);
            evaluations += 1;
            if f <= f_best + 1e-12 * f_best.abs().max(1.0) {
                theta = trial;
                boundary[j] = true;
                if f < f_best {
                    f_best = f;
                    trace.push(st.loglik(f));
                }
            }
        }

        let free: Vec<usize> = (0..r).filter(|j| !boundary[*j]).collect();
        let (steps, evals, ok) = newton_polish(&st, &mut theta, &free, &mut f_best, &mut trace, opts);
        newton_steps = steps;
        evaluations += evals;
        converged = ok;
    }

    let g = st
        .gls(&theta)
        .ok_or_else(|| Error::Numerical("GLS normal equations are singular at the optimum".into()))?;
    let sigma_e = (g.rss / st.dof()).sqrt();
    if !(sigma_e > 0.0) {
        return Err(Error::Numerical("residual variance is zero".into()));
    }
    let profiled = st.dof() * (g.rss / st.dof()).ln() + g.log_det_w + g.log_det_xwx;
    let loglik = st.loglik(profiled);
    if trace.last().is_none_or(|last| loglik > *last) {
        trace.push(loglik);
    }
    let beta: Vec<f64> = g.beta.iter().copied().collect();
    let se: Vec<f64> = (0..p).map(|j| sigma_e * g.xwx_inv[(j, j)].sqrt()).collect();
    let t_fixed: Vec<f64> = beta.iter().zip(&se).map(|(b, s)| b / s).collect();
    let sigma_u: Vec<f64> = theta.iter().map(|t| t * sigma_e).collect();

    let (sigma_u_se, information_ok) = random_standard_errors(&st, &sigma_u, sigma_e, &boundary);
    let t_random = sigma_u
        .iter()
        .zip(&sigma_u_se)
        .map(|(s, se)| se.map(|se| s / se))
        .collect();
    let single_obs = design.groups.iter().all(|g| g.len() <= 1);
    let unidentifiable = r > 0 && (!information_ok || (single_obs && design.random.contains(&0)));

    Ok(LmmFit {
        terms: design.columns.iter().map(|c| c.name.clone()).collect(),
        beta,
        se,
        t_fixed,
        df: n - p,
        random_terms: design.random_names(),
        sigma_u,
        sigma_u_se,
        t_random,
        sigma_e,
        loglik,
        n_obs: n,
        n_participants: q,
        dropped_missing: design.dropped_missing,
        dropped_level: design.dropped_level,
        convergence: ConvergenceRecord {
            converged,
            evaluations,
            newton_steps,
            loglik_trace: trace,
            boundary,
            unidentifiable,
        },
    })
}

/// Newton iterations on the analytic gradient in `log θ` over the `free`
/// components, with a finite-difference Hessian and step halving; a step is
/// taken only if the objective does not rise beyond round-off. Returns
/// (accepted steps, evaluations, reached tolerance).
fn newton_polish(
    st: &Sufficient,
    theta: &mut [f64],
    free: &[usize],
    f_best: &mut f64,
    trace: &mut Vec<f64>,
    opts: &RemlOptions,
) -> (usize, usize, bool) {
    let k = free.len();
    if k == 0 {
        return (0, 0, true);
    }
    let full = |x: &[f64]| -> Vec<f64> {
        let mut th = theta.to_vec();
        for (a, &j) in free.iter().enumerate() {
            th[j] = x[a].clamp(LOG_THETA_BOUNDS.0, LOG_THETA_BOUNDS.1).exp();
        }
        th
    };
    let grad_free = |x: &[f64]| -> Option<DVector<f64>> {
        let g = st.gradient(&full(x))?;
        Some(DVector::from_iterator(k, free.iter().map(|&j| g[j])))
    };
    let mut evals = 0usize;
    let mut x: Vec<f64> = free.iter().map(|&j| theta[j].ln()).collect();
    let mut f0 = st.profiled(&full(&x));
    let mut steps = 0;
    let mut converged = false;
    let h = 1e-5;
    for _ in 0..opts.max_newton {
        let Some(grad) = grad_free(&x) else { break };
        let mut hess = DMatrix::<f64>::zeros(k, k);
        for a in 0..k {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[a] += h;
            xm[a] -= h;
            let (Some(gp), Some(gm)) = (grad_free(&xp), grad_free(&xm)) else { break };
            evals += 2;
            hess.set_column(a, &((gp - gm) / (2.0 * h)));
        }
        let hess = (&hess + hess.transpose()) * 0.5;
        let step: DVector<f64> = match hess.clone().cholesky() {
            Some(ch) => -ch.solve(&grad),
            None => DVector::from_iterator(k, (0..k).map(|a| -grad[a] / hess[(a, a)].abs().max(1.0))),
        };
        let step = &step / step.amax().max(1.0);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = (0..k).map(|a| x[a] + t * step[a]).collect();
            let f = st.profiled(&full(&trial));
            evals += 1;
            if f <= f0 + 1e-13 * f0.abs().max(1.0) {
                let moved = (0..k).map(|a| (trial[a] - x[a]).abs()).fold(0.0, f64::max);
                x = trial;
                if f < f0 {
                    trace.push(st.loglik(f));
                    f0 = f;
                }
                accepted = true;
                steps += 1;
                converged = moved <= opts.param_tol;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // No descent along the Newton direction: stationary to working precision.
            converged = true;
        }
        if converged {
            break;
        }
    }
    for (a, &j) in free.iter().enumerate() {
        theta[j] = x[a].clamp(LOG_THETA_BOUNDS.0, LOG_THETA_BOUNDS.1).exp();
    }
    *f_best = f0;
    (steps, evals, converged)
}

/// Standard errors of the interior `σ_u` from the observed information of
/// the unprofiled restricted likelihood in `(σ_u, σe)`. The flag is false
/// when that information is not positive definite.
fn random_standard_errors(
    st: &Sufficient,
    sigma_u: &[f64],
    sigma_e: f64,
    boundary: &[bool],
) -> (Vec<Option<f64>>, bool) {
    let free: Vec<usize> = (0..sigma_u.len()).filter(|j| !boundary[*j]).collect();
    let mut out = vec![None; sigma_u.len()];
    if free.is_empty() {
        return (out, true);
    }
    let k = free.len() + 1;
    let base: Vec<f64> = free.iter().map(|&j| sigma_u[j]).chain([sigma_e]).collect();
    // Gradient restricted to (free σ_u, σe).
    let grad = |v: &[f64]| -> Option<DVector<f64>> {
        let mut su = sigma_u.to_vec();
        for (a, &j) in free.iter().enumerate() {
            su[j] = v[a];
        }
        let g = st.unprofiled_gradient(&su, v[k - 1])?;
        Some(DVector::from_iterator(k, free.iter().map(|&j| g[j]).chain([g[sigma_u.len()]])))
    };
    let mut hess = DMatrix::<f64>::zeros(k, k);
    for a in 0..k {
        let h = 1e-5 * base[a].abs().max(1e-8);
        let mut vp = base.clone();
        let mut vm = base.clone();
        vp[a] += h;
        vm[a] -= h;
        let (Some(gp), Some(gm)) = (grad(&vp), grad(&vm)) else {
            return (out, false);
        };
        hess.set_column(a, &((gp - gm) / (2.0 * h)));
    }
    let hess = (&hess + hess.transpose()) * 0.5;
    if hess.iter().any(|v| !v.is_finite()) {
        return (out, false);
    }
    // Information is half the Hessian of −2ℓ.
    let info = hess * 0.5;
    let eig = info.clone().symmetric_eigen();
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(v.abs())));
    if !(lo > 1e-10 * hi) {
        return (out, false);
    }
    let Some(cov) = info.try_inverse() else {
        return (out, false);
    };
    for (a, &j) in free.iter().enumerate() {
        out[j] = Some(cov[(a, a)].sqrt());
    }
    (out, true)
}
