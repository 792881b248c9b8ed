//! Hyperparameter posterior: mode search, curvature, and integration points.

use std::f64::consts::SQRT_2;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::conditional::{Conditional, Engine};
use crate::error::{Error, Result};
use crate::model::LatentGaussianModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Grid for up to two hyperparameters, central composite design otherwise.
    Auto,
    Grid,
    Ccd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExploreConfig {
    /// Relative finite-difference step for gradients.
    pub fd_step: f64,
    /// Finite-difference step for the Hessian at the mode.
    pub hessian_step: f64,
    /// Gradient-norm tolerance of the quasi-Newton search.
    pub grad_tol: f64,
    /// A stalled line search is accepted when the gradient norm is below this.
    pub stall_tol: f64,
    pub max_iter: usize,
    pub strategy: Strategy,
    pub grid_step: f64,
    pub grid_extent: f64,
    /// CCD points sit at radius `ccd_f0·√K` in z-space.
    pub ccd_f0: f64,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        Self {
            fd_step: 1e-4,
            hessian_step: 1e-3,
            grad_tol: 1e-6,
            stall_tol: 1e-3,
            max_iter: 200,
            strategy: Strategy::Auto,
            grid_step: 1.0,
            grid_extent: 2.5,
            ccd_f0: 1.1,
        }
    }
}

/// One integration point.
#[derive(Clone, Debug)]
pub struct HyperPoint {
    /// φ: the hyperparameters ψ followed by any product coefficients.
    pub psi: Vec<f64>,
    pub z: Vec<f64>,
    pub log_post: f64,
    pub weight: f64,
    pub conditional: Conditional,
    /// Marginal variances of θ | φ, y (zero at product coefficients).
    pub variances: Vec<f64>,
    /// Mixture-component mean and variance of every latent coordinate. On
    /// K ≤ 2 grids these average the interpolated conditional moments over
    /// the point's cell; otherwise they equal the conditional ones.
    pub component_mean: Vec<f64>,
    pub component_variance: Vec<f64>,
}

/// Integration over φ = (ψ, product coefficients); see [`Engine`].
#[derive(Clone, Debug)]
pub struct Exploration {
    /// Names of the φ coordinates.
    pub names: Vec<String>,
    pub mode: Vec<f64>,
    pub log_post_mode: f64,
    /// Negative Hessian of log p̃(φ | y) at the mode.
    pub hessian: DMatrix<f64>,
    /// (positive, negative) half-axis stretch of each eigen-direction.
    pub stretches: Vec<(f64, f64)>,
    pub iterations: usize,
    pub evaluations: usize,
    pub points: Vec<HyperPoint>,
}

struct Objective<'e, 'm> {
    engine: &'e Engine<'m>,
    evaluations: usize,
}

impl Objective<'_, '_> {
    fn eval(&mut self, psi: &[f64]) -> Result<(f64, Conditional)> {
        self.evaluations += 1;
        self.engine.log_hyper_posterior(psi)
    }

    fn value(&mut self, psi: &[f64]) -> Result<f64> {
        Ok(self.eval(psi)?.0)
    }

    /// Central-difference gradient of log p̃.
    fn gradient(&mut self, psi: &[f64], rel: f64) -> Result<Vec<f64>> {
        let mut g = vec![0.0; psi.len()];
        let mut x = psi.to_vec();
        for k in 0..psi.len() {
            let h = rel * psi[k].abs().max(1.0);
            x[k] = psi[k] + h;
            let fp = self.value(&x)?;
            x[k] = psi[k] - h;
            let fm = self.value(&x)?;
            x[k] = psi[k];
            g[k] = (fp - fm) / (2.0 * h);
        }
        Ok(g)
    }

    /// Negative Hessian by central differences.
    fn neg_hessian(&mut self, psi: &[f64], f0: f64, h: f64) -> Result<DMatrix<f64>> {
        let k = psi.len();
        let mut out = DMatrix::zeros(k, k);
        let mut x = psi.to_vec();
        for i in 0..k {
            x[i] = psi[i] + h;
            let fp = self.value(&x)?;
            x[i] = psi[i] - h;
            let fm = self.value(&x)?;
            x[i] = psi[i];
            out[(i, i)] = -(fp - 2.0 * f0 + fm) / (h * h);
            for j in 0..i {
                let corner = |si: f64, sj: f64, this: &mut Self| -> Result<f64> {
                    let mut y = psi.to_vec();
                    y[i] += si * h;
                    y[j] += sj * h;
                    this.value(&y)
                };
                let v = corner(1.0, 1.0, self)? - corner(1.0, -1.0, self)? - corner(-1.0, 1.0, self)?
                    + corner(-1.0, -1.0, self)?;
                out[(i, j)] = -v / (4.0 * h * h);
                out[(j, i)] = out[(i, j)];
            }
        }
        Ok(out)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Quasi-Newton (BFGS) maximization of log p̃(ψ | y).
fn find_mode(obj: &mut Objective, start: Vec<f64>, cfg: &ExploreConfig) -> Result<(Vec<f64>, f64, Conditional, usize)> {
    let k = start.len();
    let mut psi = start;
    let (mut f, mut cond) = obj.eval(&psi)?;
    let mut g = obj.gradient(&psi, cfg.fd_step)?;
    // inverse Hessian approximation of −log p̃
    let mut hinv = DMatrix::<f64>::identity(k, k);
    let mut trace = Vec::new();
    let mut flat = 0;
    for it in 0..cfg.max_iter {
        let gn = norm(&g);
        trace.push(format!("iter {it}: log p = {f:.10}, |grad| = {gn:.3e}"));
        if gn <= cfg.grad_tol {
            return Ok((psi, f, cond, it));
        }
        let gv = DVector::from_column_slice(&g);
        let mut dir = &hinv * &gv;
        if dir.dot(&gv) <= 0.0 {
            hinv = DMatrix::identity(k, k);
            dir = gv.clone();
        }
        let dn = dir.norm();
        if dn > 3.0 {
            dir *= 3.0 / dn;
        }
        let slope = dir.dot(&gv);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = psi.iter().zip(dir.iter()).map(|(p, d)| p + step * d).collect();
            match obj.eval(&trial) {
                Ok((ft, ct)) if ft >= f + 1e-4 * step * slope => {
                    accepted = Some((trial, ft, ct));
                    break;
                }
                Ok(_) => {}
                Err(Error::Singular(_)) | Err(Error::NoConvergence(_)) | Err(Error::Numerical(_)) => {}
                Err(e) => return Err(e),
            }
            step *= 0.5;
        }
        let Some((new_psi, new_f, new_cond)) = accepted else {
            if gn <= cfg.stall_tol || newton_decrement(obj, &psi, f, &g, cfg)? <= DECREMENT_TOL {
                debug!("mode search stalled at |grad| = {gn:.3e}; accepting");
                return Ok((psi, f, cond, it));
            }
            return Err(Error::NoConvergence(format!(
                "hyperparameter mode search stalled with |grad| = {gn:.3e}\n{}",
                tail(&trace)
            )));
        };
        let new_g = obj.gradient(&new_psi, cfg.fd_step)?;
        // BFGS update for minimizing −log p̃: s = Δψ, y = −Δg
        let s = DVector::from_iterator(k, new_psi.iter().zip(&psi).map(|(a, b)| a - b));
        let y = DVector::from_iterator(k, g.iter().zip(&new_g).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let id = DMatrix::<f64>::identity(k, k);
            let a = &id - rho * &s * y.transpose();
            let b = &id - rho * &y * s.transpose();
            hinv = &a * &hinv * &b + rho * &s * s.transpose();
        }
        if (new_f - f).abs() <= 1e-12 * f.abs().max(1.0) {
            flat += 1;
        } else {
            flat = 0;
        }
        // finite-difference noise can hold |grad| above the tolerance at the
        // mode; a negligible predicted gain settles it
        let settled = (new_f - f).abs() <= 1e-14 * f.abs().max(1.0) && norm(&new_g) <= cfg.stall_tol;
        if settled || (flat >= 3 && newton_decrement(obj, &new_psi, new_f, &new_g, cfg)? <= DECREMENT_TOL) {
            return Ok((new_psi, new_f, new_cond, it + 1));
        }
        psi = new_psi;
        f = new_f;
        cond = new_cond;
        g = new_g;
    }
    let gn = norm(&g);
    if gn <= cfg.stall_tol {
        warn!("mode search used all {} iterations; |grad| = {gn:.3e}", cfg.max_iter);
        return Ok((psi, f, cond, cfg.max_iter));
    }
    Err(Error::NoConvergence(format!(
        "hyperparameter mode search did not converge in {} iterations\n{}",
        cfg.max_iter,
        tail(&trace)
    )))
}

/// Largest predicted gain in log p̃, in nats, accepted as converged.
const DECREMENT_TOL: f64 = 1e-6;

/// Predicted gain ½ gᵀH⁻¹g of a Newton step from a finite-difference Hessian;
/// infinite when the Hessian is not negative definite.
fn newton_decrement(obj: &mut Objective, psi: &[f64], f: f64, g: &[f64], cfg: &ExploreConfig) -> Result<f64> {
    let h = obj.neg_hessian(psi, f, cfg.hessian_step)?;
    let Some(chol) = h.cholesky() else {
        return Ok(f64::INFINITY);
    };
    let gv = DVector::from_column_slice(g);
    Ok(0.5 * gv.dot(&chol.solve(&gv)))
}

fn tail(trace: &[String]) -> String {
    trace[trace.len().saturating_sub(8)..].join("\n")
}

/// Corner sign patterns of a two-level (fractional) factorial in `k` factors.
/// Beyond six factors, extra columns are products of base-factor subsets.
pub fn factorial_corners(k: usize) -> Vec<Vec<f64>> {
    let base = k.min(6);
    let mut generators: Vec<u32> = (0u32..1 << base).filter(|m| m.count_ones() >= 3).collect();
    generators.sort_by(|a, b| b.count_ones().cmp(&a.count_ones()).then(a.cmp(b)));
    (0u32..1 << base)
        .map(|run| {
            let sign = |mask: u32| if (run & mask).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
            let mut row: Vec<f64> = (0..base).map(|b| sign(1 << b)).collect();
            row.extend(generators.iter().take(k - base).map(|&m| sign(m)));
            row
        })
        .collect()
}

/// z-space design points.
fn design(k: usize, cfg: &ExploreConfig, strategy: Strategy) -> Vec<Vec<f64>> {
    match strategy {
        Strategy::Grid => {
            let m = (cfg.grid_extent / cfg.grid_step).floor() as i64;
            let axis: Vec<f64> = (-m..=m).map(|i| i as f64 * cfg.grid_step).collect();
            let mut pts: Vec<Vec<f64>> = vec![vec![]];
            for _ in 0..k {
                pts = pts
                    .into_iter()
                    .flat_map(|p| {
                        axis.iter().map(move |&a| {
                            let mut q = p.clone();
                            q.push(a);
                            q
                        })
                    })
                    .collect();
            }
            pts
        }
        _ => {
            let r = cfg.ccd_f0 * (k as f64).sqrt();
            let mut pts = vec![vec![0.0; k]];
            for i in 0..k {
                for s in [1.0, -1.0] {
                    let mut p = vec![0.0; k];
                    p[i] = s * r;
                    pts.push(p);
                }
            }
            for c in factorial_corners(k) {
                pts.push(c.into_iter().map(|v| v * cfg.ccd_f0).collect());
            }
            pts
        }
    }
}

/// Natural cubic spline second derivatives on a uniform grid.
fn spline_moments(y: &[f64], h: f64) -> Vec<f64> {
    let n = y.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    // tridiagonal system for interior moments (Thomas algorithm)
    let k = n - 2;
    let mut c = vec![0.0; k];
    let mut d = vec![0.0; k];
    for i in 0..k {
        let rhs = 6.0 * (y[i + 2] - 2.0 * y[i + 1] + y[i]) / (h * h);
        let (a, b) = (1.0, 4.0);
        if i == 0 {
            c[i] = 1.0 / b;
            d[i] = rhs / b;
        } else {
            let den = b - a * c[i - 1];
            c[i] = 1.0 / den;
            d[i] = (rhs - a * d[i - 1]) / den;
        }
    }
    for i in (0..k).rev() {
        m[i + 1] = d[i] - if i + 1 < k { c[i] * m[i + 2] } else { 0.0 };
    }
    m
}

/// Natural cubic spline through `(x0 + i h, y_i)`. Outside the nodes it
/// continues with the parabola through the three outermost nodes when that
/// parabola decays (a Gaussian tail for a log density), linearly otherwise.
struct Spline1 {
    x0: f64,
    h: f64,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl Spline1 {
    fn new(x0: f64, h: f64, y: Vec<f64>) -> Self {
        let m = spline_moments(&y, h);
        Self { x0, h, y, m }
    }

    /// Natural-spline value with linear continuation outside the nodes
    /// (linear in the node values).
    fn eval_linear(&self, x: f64) -> f64 {
        let n = self.y.len();
        if n == 1 {
            return self.y[0];
        }
        let h = self.h;
        let last = (n - 1) as f64;
        let u = (x - self.x0) / h;
        if u < 0.0 {
            let slope = (self.y[1] - self.y[0]) / h - h * (2.0 * self.m[0] + self.m[1]) / 6.0;
            return self.y[0] + slope * u * h;
        }
        if u > last {
            let slope = (self.y[n - 1] - self.y[n - 2]) / h + h * (self.m[n - 2] + 2.0 * self.m[n - 1]) / 6.0;
            return self.y[n - 1] + slope * (u - last) * h;
        }
        self.eval(x)
    }

    fn eval(&self, x: f64) -> f64 {
        let n = self.y.len();
        if n == 1 {
            return self.y[0];
        }
        let h = self.h;
        let u = (x - self.x0) / h;
        if u < 0.0 || u > (n - 1) as f64 {
            // `d` = distance outward from the end node, in steps
            let (e0, e1, e2, d) = if u < 0.0 {
                (self.y[0], self.y[1], self.y.get(2).copied(), -u)
            } else {
                let last = n - 1;
                (self.y[last], self.y[last - 1], last.checked_sub(2).map(|i| self.y[i]), u - last as f64)
            };
            let slope = e0 - e1;
            if let Some(e2) = e2 {
                let curv = e0 - 2.0 * e1 + e2;
                if curv < 0.0 {
                    return e0 + (slope + 0.5 * curv) * d + 0.5 * curv * d * d;
                }
            }
            return e0 + slope.min(0.0) * d;
        }
        let i = (u.floor() as usize).min(n - 2);
        let t = u - i as f64;
        let (y0, y1, m0, m1) = (self.y[i], self.y[i + 1], self.m[i], self.m[i + 1]);
        let a = 1.0 - t;
        a * y0 + t * y1 + h * h / 6.0 * ((a * a * a - a) * m0 + (t * t * t - t) * m1)
    }
}

/// Gauss–Legendre nodes and weights on [−1/2, 1/2].
const GL: [(f64, f64); 5] = [
    (0.0, 0.568_888_888_888_888_9 / 2.0),
    (-0.538_469_310_105_683_1 / 2.0, 0.478_628_670_499_366_5 / 2.0),
    (0.538_469_310_105_683_1 / 2.0, 0.478_628_670_499_366_5 / 2.0),
    (-0.906_179_845_938_664 / 2.0, 0.236_926_885_056_189_1 / 2.0),
    (0.906_179_845_938_664 / 2.0, 0.236_926_885_056_189_1 / 2.0),
];

/// How far (in z) the outermost cells reach past the last probe.
const TAIL: f64 = 3.0;
/// Tail probes continue outward until the log density is this far below
/// the mode.
const TAIL_DROP: f64 = 6.0;

/// Composite Gauss–Legendre rule with `per_step` panels per grid step.
fn quadrature(a: f64, b: f64, step: f64, per_step: f64, rule: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let panels = ((b - a) / (step / per_step)).ceil().max(1.0) as usize;
    let w = (b - a) / panels as f64;
    let mut out = Vec::with_capacity(panels * rule.len());
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * w;
        out.extend(rule.iter().map(|&(x, wt)| (mid + x * w, wt * w)));
    }
    out
}

/// Three-point Gauss–Legendre nodes and weights on [−1/2, 1/2].
const GL3: [(f64, f64); 3] = [
    (0.0, 4.0 / 9.0),
    (-0.387_298_334_620_741_7, 5.0 / 18.0),
    (0.387_298_334_620_741_7, 5.0 / 18.0),
];

/// Uniform z-axis of `n` nodes from `t0`, spaced `h`.
#[derive(Clone, Copy, Debug)]
struct Axis {
    t0: f64,
    h: f64,
    n: usize,
}

impl Axis {
    fn last(&self) -> f64 {
        self.t0 + (self.n - 1) as f64 * self.h
    }
}

/// Log posterior and conditional moments on the grid widened by probe
/// points. The probes shape the interpolated density and moments in the
/// tails; they carry no mixture components.
struct Table {
    axes: Vec<Axis>,
    logp: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
}

/// Extends each axis outward until the log density has dropped by
/// `TAIL_DROP` (at least one and at most `max_extra` nodes per side), then
/// evaluates the full rectangle. In one dimension the table also holds the
/// midpoints between grid nodes. Falls back to the bare grid if a probe
/// fails.
#[allow(clippy::too_many_arguments)]
fn probe_table(
    engine: &Engine,
    zs: &[Vec<f64>],
    logp: &[f64],
    conds: &[Conditional],
    variances: &[Vec<f64>],
    to_psi: &(dyn Fn(&[f64]) -> Vec<f64> + Sync),
    f_mode: f64,
    step: f64,
    k: usize,
) -> Table {
    let nax = (zs.len() as f64).powf(1.0 / k as f64).round() as usize;
    let z0 = zs[0][0];
    let bare = || Table {
        axes: vec![Axis { t0: z0, h: step, n: nax }; k],
        logp: logp.to_vec(),
        means: conds.iter().map(|c| c.mode.clone()).collect(),
        variances: variances.to_vec(),
    };
    let sub = if k == 1 { 2 } else { 1 };
    let h = step / sub as f64;
    let max_extra = if k == 1 { 16 } else { 3 };
    let mut axes = Vec::with_capacity(k);
    for j in 0..k {
        let mut extra = [0usize; 2];
        for (side, sgn) in [(0, -1.0), (1, 1.0)] {
            let edge = sgn * (-z0);
            for e in 1..=max_extra {
                extra[side] = e;
                let mut z = vec![0.0; k];
                z[j] = sgn * (edge + e as f64 * h);
                match engine.log_hyper_posterior(&to_psi(&z)) {
                    Ok((v, _)) if v.is_finite() => {
                        if f_mode - v >= TAIL_DROP {
                            break;
                        }
                    }
                    _ => {
                        warn!("tail probe of the hyperparameter posterior failed; extrapolating from the grid");
                        return bare();
                    }
                }
            }
        }
        axes.push((extra[0], Axis {
            t0: z0 - extra[0] as f64 * h,
            h,
            n: (nax - 1) * sub + 1 + extra[0] + extra[1],
        }));
    }
    let nodes: Vec<Vec<usize>> = if k == 1 {
        (0..axes[0].1.n).map(|a| vec![a]).collect()
    } else {
        (0..axes[0].1.n)
            .flat_map(|a| (0..axes[1].1.n).map(move |b| vec![a, b]))
            .collect()
    };
    let values: Vec<Option<(f64, Vec<f64>, Vec<f64>)>> = nodes
        .par_iter()
        .map(|c| {
            let grid: Vec<Option<usize>> = c
                .iter()
                .zip(&axes)
                .map(|(&a, (lo, _))| {
                    a.checked_sub(*lo)
                        .filter(|d| d % sub == 0)
                        .map(|d| d / sub)
                        .filter(|g| *g < nax)
                })
                .collect();
            if grid.iter().all(Option::is_some) {
                let flat = grid.iter().flatten().fold(0, |acc, g| acc * nax + g);
                return Some((logp[flat], conds[flat].mode.clone(), variances[flat].clone()));
            }
            let z: Vec<f64> = c.iter().zip(&axes).map(|(&a, (_, ax))| ax.t0 + a as f64 * ax.h).collect();
            let (v, cond) = engine.log_hyper_posterior(&to_psi(&z)).ok()?;
            v.is_finite().then(|| {
                let var = cond.variances();
                (v, cond.mode, var)
            })
        })
        .collect();
    if values.iter().any(Option::is_none) {
        warn!("tail probe of the hyperparameter posterior failed; extrapolating from the grid");
        return bare();
    }
    let mut table = Table {
        axes: axes.into_iter().map(|(_, ax)| ax).collect(),
        logp: vec![],
        means: vec![],
        variances: vec![],
    };
    for (v, m, var) in values.into_iter().flatten() {
        table.logp.push(v);
        table.means.push(m);
        table.variances.push(var);
    }
    table
}

/// Per-cell integrals against the interpolated posterior density on a
/// K ≤ 2 grid. With `c(z)` the spline interpolation weights of the table
/// nodes, `mass = ∫ p`, `first = ∫ p c` and `second = ∫ p c cᵀ` over the
/// cell, so any node quantity `f` has cell mean `firstᵀf / mass` and
/// second moment `fᵀ second f / mass` under the interpolation.
struct CellMoments {
    mass: f64,
    first: DVector<f64>,
    second: DMatrix<f64>,
}

/// Cell of grid node `z` along `axis`: halfway to the neighbours, with the
/// outermost cells reaching `TAIL` past the last table node.
fn cell(z: f64, step: f64, extent: f64, axis: Axis) -> (f64, f64) {
    let last = (extent / step).floor() * step;
    let lo = if z <= -last { axis.t0 - TAIL } else { z - step / 2.0 };
    let hi = if z >= last {
        axis.last() + TAIL
    } else {
        z + step / 2.0
    };
    (lo, hi)
}

/// `jacobian(z)` is the volume factor dψ/dz of the (piecewise) z-scaling.
fn grid_cells(
    zs: &[Vec<f64>],
    table: &Table,
    jacobian: &(dyn Fn(&[f64]) -> f64 + Sync),
    step: f64,
    extent: f64,
    k: usize,
) -> Vec<CellMoments> {
    let top = table.logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let rel: Vec<f64> = table.logp.iter().map(|v| v - top).collect();
    let unit_splines = |ax: Axis| -> Vec<Spline1> {
        (0..ax.n)
            .map(|a| {
                let mut e = vec![0.0; ax.n];
                e[a] = 1.0;
                Spline1::new(ax.t0, ax.h, e)
            })
            .collect()
    };
    let units: Vec<Vec<Spline1>> = table.axes.iter().map(|&ax| unit_splines(ax)).collect();
    let coefs = |j: usize, z: f64| -> Vec<f64> { units[j].iter().map(|s| s.eval_linear(z)).collect() };
    let n = table.logp.len();
    let accumulate = |cell: &mut CellMoments, w: f64, c: &[f64]| {
        cell.mass += w;
        for a in 0..n {
            if c[a] == 0.0 {
                continue;
            }
            cell.first[a] += w * c[a];
            for b in 0..n {
                cell.second[(a, b)] += w * c[a] * c[b];
            }
        }
    };
    let empty = || CellMoments {
        mass: 0.0,
        first: DVector::zeros(n),
        second: DMatrix::zeros(n, n),
    };
    if k == 1 {
        let ax = table.axes[0];
        let s = Spline1::new(ax.t0, ax.h, rel);
        return zs
            .par_iter()
            .map(|z| {
                let (a, b) = cell(z[0], step, extent, ax);
                let mut m = empty();
                for (x, w) in quadrature(a, b, step, 4.0, &GL) {
                    accumulate(&mut m, w * jacobian(&[x]) * s.eval(x).exp(), &coefs(0, x));
                }
                m
            })
            .collect();
    }
    // nodes are ordered with the last coordinate fastest
    let (ax0, ax1) = (table.axes[0], table.axes[1]);
    let rows: Vec<Spline1> = (0..ax0.n)
        .map(|i| Spline1::new(ax1.t0, ax1.h, rel[i * ax1.n..(i + 1) * ax1.n].to_vec()))
        .collect();
    zs.par_iter()
        .map(|z| {
            let (a0, b0) = cell(z[0], step, extent, ax0);
            let (a1, b1) = cell(z[1], step, extent, ax1);
            let qv = quadrature(a1, b1, step, 2.0, &GL3);
            let cv: Vec<Vec<f64>> = qv.iter().map(|&(v, _)| coefs(1, v)).collect();
            let across: Vec<Spline1> = qv
                .iter()
                .map(|&(v, _)| Spline1::new(ax0.t0, ax0.h, rows.iter().map(|row| row.eval(v)).collect()))
                .collect();
            let mut m = empty();
            let mut c = vec![0.0; n];
            for (u, wu) in quadrature(a0, b0, step, 2.0, &GL3) {
                let cu = coefs(0, u);
                for (r, &(v, wv)) in qv.iter().enumerate() {
                    let g = across[r].eval(u);
                    for a in 0..ax0.n {
                        for b in 0..ax1.n {
                            c[a * ax1.n + b] = cu[a] * cv[r][b];
                        }
                    }
                    accumulate(&mut m, wu * wv * jacobian(&[u, v]) * g.exp(), &c);
                }
            }
            m
        })
        .collect()
}

/// Cell-averaged means and variances of every latent coordinate.
fn refine(cells: &[CellMoments], table: &Table) -> Vec<(Vec<f64>, Vec<f64>)> {
    let n = table.means.len();
    let dim = table.means[0].len();
    let variances = &table.variances;
    cells
        .par_iter()
        .map(|cell| {
            let mut mean = vec![0.0; dim];
            let mut var = vec![0.0; dim];
            let mut f = vec![0.0; n];
            for i in 0..dim {
                for l in 0..n {
                    f[l] = table.means[l][i];
                }
                let m = (0..n).map(|l| cell.first[l] * f[l]).sum::<f64>() / cell.mass;
                let mut sq = 0.0;
                for a in 0..n {
                    for b in 0..n {
                        sq += f[a] * cell.second[(a, b)] * f[b];
                    }
                }
                let spread = (sq / cell.mass - m * m).max(0.0);
                let v_floor = (0..n).map(|l| variances[l][i]).fold(f64::INFINITY, f64::min);
                let v = (0..n).map(|l| cell.first[l] * variances[l][i]).sum::<f64>() / cell.mass;
                mean[i] = m;
                var[i] = v.max(0.5 * v_floor) + spread;
            }
            (mean, var)
        })
        .collect()
}

/// Locates the mode of p̃(ψ | y), measures its curvature and lays out
/// weighted integration points.
pub fn explore_hyper(lgm: &LatentGaussianModel, cfg: &ExploreConfig) -> Result<Exploration> {
    let engine = Engine::new(lgm)?;
    explore_with(&engine, cfg)
}

pub fn explore_with(engine: &Engine, cfg: &ExploreConfig) -> Result<Exploration> {
    let k = engine.integration_dim();
    if k == 0 {
        return Err(Error::invalid("exploration needs at least one hyperparameter"));
    }
    let mut obj = Objective { engine, evaluations: 0 };
    let (mode, f_mode, cond, iterations) = find_mode(&mut obj, engine.initial_point(), cfg)?;
    let mut hess = obj.neg_hessian(&mode, f_mode, cfg.hessian_step)?;
    hess = (&hess + hess.transpose()) * 0.5;
    let eig = SymmetricEigen::new(hess.clone());
    let lmax = eig.eigenvalues.max();
    if !(lmax > 0.0) {
        return Err(Error::Numerical("hyperparameter posterior has no curvature at the mode".into()));
    }
    let floor = 1e-6 * lmax;
    if eig.eigenvalues.iter().any(|&l| l < floor) {
        warn!("hyperparameter Hessian not positive definite; clamping eigenvalues");
    }
    let scales: Vec<f64> = eig.eigenvalues.iter().map(|&l| 1.0 / l.max(floor).sqrt()).collect();
    let along = |z: &[f64], stretch: &dyn Fn(usize, f64) -> f64| -> Vec<f64> {
        (0..k)
            .map(|i| {
                mode[i]
                    + (0..k)
                        .map(|j| eig.eigenvectors[(i, j)] * scales[j] * stretch(j, z[j]) * z[j])
                        .sum::<f64>()
            })
            .collect()
    };
    // Skewness correction: each half-axis is stretched so that the log
    // density drops by 1 at |z| = √2, as it would for a Gaussian.
    let probes: Vec<(usize, f64)> = (0..k).flat_map(|j| [(j, 1.0), (j, -1.0)]).collect();
    let drops: Vec<f64> = probes
        .par_iter()
        .map(|&(j, sgn)| {
            let mut z = vec![0.0; k];
            z[j] = sgn * SQRT_2;
            engine
                .log_hyper_posterior(&along(&z, &|_, _| 1.0))
                .map_or(f64::NAN, |(v, _)| f_mode - v)
        })
        .collect();
    obj.evaluations += probes.len();
    let stretches: Vec<(f64, f64)> = (0..k)
        .map(|j| {
            let c = |d: f64| if d > 0.0 { d.max(0.04).sqrt().recip() } else { 1.0 };
            (c(drops[2 * j]), c(drops[2 * j + 1]))
        })
        .collect();
    let stretch = |j: usize, zj: f64| -> f64 {
        let (up, down) = stretches[j];
        if zj > 0.0 {
            up
        } else if zj < 0.0 {
            down
        } else {
            0.5 * (up + down)
        }
    };
    let to_psi = |z: &[f64]| along(z, &stretch);
    let jacobian = |z: &[f64]| -> f64 { (0..k).map(|j| stretch(j, z[j])).product() };

    let strategy = match cfg.strategy {
        Strategy::Auto if k <= 2 => Strategy::Grid,
        Strategy::Auto => Strategy::Ccd,
        s => s,
    };
    let zs = design(k, cfg, strategy);
    let evaluated: Vec<Result<(f64, Conditional)>> = zs
        .par_iter()
        .map(|z| {
            if z.iter().all(|v| *v == 0.0) {
                Ok((f_mode, cond.clone()))
            } else {
                engine.log_hyper_posterior(&to_psi(z))
            }
        })
        .collect();
    obj.evaluations += zs.len() - 1;
    let mut logp = Vec::with_capacity(zs.len());
    let mut conds = Vec::with_capacity(zs.len());
    for r in evaluated {
        let (v, c) = r?;
        logp.push(v);
        conds.push(c);
    }
    let variances: Vec<Vec<f64>> = conds.par_iter().map(Conditional::variances).collect();
    let top = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (raw, moments): (Vec<f64>, Vec<(Vec<f64>, Vec<f64>)>) = match strategy {
        Strategy::Grid => {
            let table = probe_table(engine, &zs, &logp, &conds, &variances, &to_psi, f_mode, cfg.grid_step, k);
            obj.evaluations += table.logp.len() - zs.len();
            let cells = grid_cells(&zs, &table, &jacobian, cfg.grid_step, cfg.grid_extent, k);
            let moments = refine(&cells, &table);
            (cells.iter().map(|c| c.mass).collect(), moments)
        }
        _ => {
            let f0 = cfg.ccd_f0;
            let n_s = (zs.len() - 1) as f64;
            let v_s = 1.0 / (n_s * (f0 * f0 - 1.0) * (-(k as f64) * f0 * f0 / 2.0).exp());
            let raw = logp
                .iter()
                .enumerate()
                .map(|(i, lp)| if i == 0 { 1.0 } else { v_s } * jacobian(&zs[i]) * (lp - top).exp())
                .collect();
            let moments = conds.iter().zip(&variances).map(|(c, v)| (c.mode.clone(), v.clone())).collect();
            (raw, moments)
        }
    };
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Numerical("integration weights do not normalize".into()));
    }
    let points: Vec<HyperPoint> = zs
        .into_iter()
        .zip(logp)
        .zip(conds)
        .zip(raw)
        .zip(variances)
        .zip(moments)
        .map(|(((((z, lp), c), w), v), (mean, var))| HyperPoint {
            psi: to_psi(&z),
            z,
            log_post: lp,
            weight: w / total,
            conditional: c,
            variances: v,
            component_mean: mean,
            component_variance: var,
        })
        .collect();
    Ok(Exploration {
        names: engine.integration_names(),
        log_post_mode: f_mode,
        hessian: hess,
        stretches,
        mode,
        iterations,
        evaluations: obj.evaluations,
        points,
    })
}
