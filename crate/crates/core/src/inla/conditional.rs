//! Gaussian conditional of the latent field given the integration variables.
//!
//! A product term `c·θ_a·θ_b` makes θ | ψ, y non-Gaussian, and its joint
//! mode is a poor summary (the scale θ_a trades off against the spread of
//! θ_b). The first factor of every product is therefore moved to the outer
//! integration together with ψ. Given both, every observation is linear in
//! the remaining ("inner") coordinates and the conditional is exact.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{LatentGaussianModel, Precision};
use crate::sparse::{CholFactor, SparseSym, SymbolicCholesky};

/// θ | φ, y where φ = (ψ, outer coefficients).
#[derive(Clone, Debug)]
pub struct Conditional {
    /// Mean over all of θ; outer coordinates hold their fixed values.
    pub mode: Vec<f64>,
    /// Factor of the precision over the inner coordinates.
    pub factor: CholFactor,
    pub log_det: f64,
    /// θ index of each inner coordinate, in factor order.
    pub inner: Arc<Vec<usize>>,
}

impl Conditional {
    /// Marginal variances over all of θ (zero at outer coordinates).
    pub fn variances(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.mode.len()];
        for (r, d) in self.inner.iter().zip(self.factor.selected_inverse().diag()) {
            v[*r] = d;
        }
        v
    }

    /// Maps standard normals `z` over the inner coordinates to a draw of
    /// θ − mode, written into `out` (zero at outer coordinates).
    pub fn deviation(&self, z: &mut [f64], out: &mut [f64]) {
        self.factor.solve_lt(z);
        out.iter_mut().for_each(|v| *v = 0.0);
        for (r, d) in self.inner.iter().zip(z.iter()) {
            out[*r] = *d;
        }
    }
}

/// A linear term of an observation; the coefficient is multiplied by an
/// outer coefficient when `scale` is set.
#[derive(Clone, Copy, Debug)]
struct Term {
    inner: usize,
    coef: f64,
    scale: Option<usize>,
}

#[derive(Clone, Debug)]
struct Compiled {
    value: f64,
    offset: f64,
    precision: Precision,
    terms: Vec<Term>,
    /// Offset contributions `c·a_p` and `c·a_p·a_q` of outer coefficients.
    outer_linear: Vec<(usize, f64)>,
    outer_product: Vec<(usize, usize, f64)>,
    /// Distinct inner coordinates of the terms, the position of each term
    /// among them, and the posterior-precision slots of their upper-triangle
    /// pairs in row-major order.
    unique: Vec<usize>,
    term_pos: Vec<usize>,
    slots: Vec<usize>,
}

impl Compiled {
    fn offset(&self, outer: &[f64]) -> f64 {
        self.offset
            + self.outer_linear.iter().map(|&(p, c)| c * outer[p]).sum::<f64>()
            + self.outer_product.iter().map(|&(p, q, c)| c * outer[p] * outer[q]).sum::<f64>()
    }

    fn coef(&self, t: &Term, outer: &[f64]) -> f64 {
        t.scale.map_or(t.coef, |p| t.coef * outer[p])
    }
}

/// Compiled model, sparsity patterns and symbolic factorizations.
pub struct Engine<'a> {
    lgm: &'a LatentGaussianModel,
    outer: Vec<usize>,
    /// Independent Gaussian prior precision of each outer coefficient.
    outer_precision: Vec<f64>,
    inner: Arc<Vec<usize>>,
    prior_fixed: Vec<(usize, usize, f64)>,
    prior_scaled: Vec<Vec<(usize, usize, f64)>>,
    observations: Vec<Compiled>,
    prior: SparseSym,
    prior_symbolic: SymbolicCholesky,
    post: SparseSym,
    post_symbolic: SymbolicCholesky,
    /// Slots of the prior entries in `prior` and in `post`.
    fixed_slots: [Vec<usize>; 2],
    scaled_slots: [Vec<Vec<usize>>; 2],
}

impl<'a> Engine<'a> {
    pub fn new(lgm: &'a LatentGaussianModel) -> Result<Self> {
        lgm.validate()?;
        let n = lgm.dim();
        let mut outer: Vec<usize> = lgm.observations.iter().filter_map(|o| o.product.map(|p| p.0)).collect();
        outer.sort_unstable();
        outer.dedup();
        let mut outer_pos = vec![None; n];
        for (p, &j) in outer.iter().enumerate() {
            outer_pos[j] = Some(p);
        }
        let inner: Vec<usize> = (0..n).filter(|j| outer_pos[*j].is_none()).collect();
        let mut inner_pos = vec![usize::MAX; n];
        for (r, &j) in inner.iter().enumerate() {
            inner_pos[j] = r;
        }

        let mut outer_precision = vec![0.0; outer.len()];
        let mut prior_fixed = Vec::with_capacity(lgm.prior_fixed.len());
        for &(i, j, v) in &lgm.prior_fixed {
            match (outer_pos[i], outer_pos[j]) {
                (None, None) => prior_fixed.push((inner_pos[i], inner_pos[j], v)),
                (Some(p), Some(_)) if i == j => outer_precision[p] += v,
                _ => {
                    return Err(Error::invalid(format!(
                        "product coefficient `{}` must have an independent prior",
                        lgm.names[if outer_pos[i].is_some() { i } else { j }]
                    )))
                }
            }
        }
        let mut prior_scaled = Vec::with_capacity(lgm.prior_scaled.len());
        for block in &lgm.prior_scaled {
            let mut b = Vec::with_capacity(block.len());
            for &(i, j, v) in block {
                if let Some(k) = [i, j].into_iter().find(|k| outer_pos[*k].is_some()) {
                    return Err(Error::invalid(format!(
                        "product coefficient `{}` must have a fixed prior",
                        lgm.names[k]
                    )));
                }
                b.push((inner_pos[i], inner_pos[j], v));
            }
            prior_scaled.push(b);
        }
        if let Some(p) = outer_precision.iter().position(|v| !(*v > 0.0)) {
            return Err(Error::invalid(format!(
                "product coefficient `{}` needs a proper Gaussian prior",
                lgm.names[outer[p]]
            )));
        }

        let observations: Vec<Compiled> = lgm
            .observations
            .iter()
            .map(|o| {
                let mut c = Compiled {
                    value: o.value,
                    offset: o.offset,
                    precision: o.precision,
                    terms: Vec::new(),
                    outer_linear: Vec::new(),
                    outer_product: Vec::new(),
                    unique: Vec::new(),
                    term_pos: Vec::new(),
                    slots: Vec::new(),
                };
                for &(j, coef) in &o.linear {
                    match outer_pos[j] {
                        Some(p) => c.outer_linear.push((p, coef)),
                        None => c.terms.push(Term {
                            inner: inner_pos[j],
                            coef,
                            scale: None,
                        }),
                    }
                }
                if let Some((a, b, coef)) = o.product {
                    let pa = outer_pos[a].expect("product scale is outer");
                    match outer_pos[b] {
                        Some(pb) => c.outer_product.push((pa, pb, coef)),
                        None => c.terms.push(Term {
                            inner: inner_pos[b],
                            coef,
                            scale: Some(pa),
                        }),
                    }
                }
                for t in &c.terms {
                    let pos = match c.unique.iter().position(|&u| u == t.inner) {
                        Some(p) => p,
                        None => {
                            c.unique.push(t.inner);
                            c.unique.len() - 1
                        }
                    };
                    c.term_pos.push(pos);
                }
                c
            })
            .collect();

        let m = inner.len();
        let prior_entries: Vec<(usize, usize)> = prior_fixed
            .iter()
            .chain(prior_scaled.iter().flatten())
            .map(|&(i, j, _)| (i, j))
            .collect();
        let prior = SparseSym::with_pattern(m, prior_entries.iter().copied());
        let mut post_entries = prior_entries;
        for o in &observations {
            let mut s: Vec<usize> = o.terms.iter().map(|t| t.inner).collect();
            s.sort_unstable();
            s.dedup();
            for (a, &i) in s.iter().enumerate() {
                for &j in &s[a..] {
                    post_entries.push((i, j));
                }
            }
        }
        let post = SparseSym::with_pattern(m, post_entries);
        let mut observations = observations;
        for o in &mut observations {
            for (a, &i) in o.unique.iter().enumerate() {
                for &j in &o.unique[a..] {
                    o.slots.push(post.slot(i, j).expect("pattern holds every observation pair"));
                }
            }
        }
        let slots_in = |q: &SparseSym, entries: &[(usize, usize, f64)]| -> Vec<usize> {
            entries
                .iter()
                .map(|&(i, j, _)| q.slot(i, j).expect("pattern holds every prior entry"))
                .collect()
        };
        let fixed_slots = [slots_in(&prior, &prior_fixed), slots_in(&post, &prior_fixed)];
        let scaled_slots = [
            prior_scaled.iter().map(|b| slots_in(&prior, b)).collect(),
            prior_scaled.iter().map(|b| slots_in(&post, b)).collect(),
        ];
        Ok(Self {
            lgm,
            outer,
            outer_precision,
            inner: Arc::new(inner),
            prior_fixed,
            prior_scaled,
            observations,
            prior_symbolic: SymbolicCholesky::analyze(&prior),
            post_symbolic: SymbolicCholesky::analyze(&post),
            prior,
            post,
            fixed_slots,
            scaled_slots,
        })
    }

    pub fn model(&self) -> &LatentGaussianModel {
        self.lgm
    }

    /// θ indices integrated in the outer layer, in φ order after ψ.
    pub fn outer_indices(&self) -> &[usize] {
        &self.outer
    }

    /// Length of φ = (ψ, outer coefficients).
    pub fn integration_dim(&self) -> usize {
        self.lgm.hyper_dim() + self.outer.len()
    }

    /// Names of the φ coordinates.
    pub fn integration_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.lgm.hypers.iter().map(|h| h.name.clone()).collect();
        names.extend(self.outer.iter().map(|&j| self.lgm.names[j].clone()));
        names
    }

    /// Starting φ for the mode search.
    pub fn initial_point(&self) -> Vec<f64> {
        let mut phi = self.lgm.initial_hyper();
        phi.extend(self.outer.iter().map(|&j| self.lgm.initial_theta[j]));
        phi
    }

    fn split<'p>(&self, phi: &'p [f64]) -> Result<(&'p [f64], &'p [f64])> {
        if phi.len() != self.integration_dim() {
            return Err(Error::Dimension(format!(
                "φ has length {}, the model integrates over {} ({} hyperparameters, {} product coefficients)",
                phi.len(),
                self.integration_dim(),
                self.lgm.hyper_dim(),
                self.outer.len()
            )));
        }
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite integration point {phi:?}")));
        }
        Ok(phi.split_at(self.lgm.hyper_dim()))
    }

    fn singular(&self, what: &str, r: usize) -> Error {
        Error::Singular(format!("{what} at `{}`", self.lgm.names[self.inner[r]]))
    }

    /// Writes the prior precision into `q`, which is the prior (`which` 0)
    /// or posterior (1) pattern.
    fn fill_prior(&self, q: &mut SparseSym, psi: &[f64], which: usize) {
        q.clear();
        let values = q.values_mut();
        for (&(_, _, v), &s) in self.prior_fixed.iter().zip(&self.fixed_slots[which]) {
            values[s] += v;
        }
        for (k, block) in self.prior_scaled.iter().enumerate() {
            let scale = psi[k].exp();
            for (&(_, _, v), &s) in block.iter().zip(&self.scaled_slots[which][k]) {
                values[s] += scale * v;
            }
        }
    }

    fn tau(&self, o: &Compiled, psi: &[f64]) -> f64 {
        match o.precision {
            Precision::Fixed(t) => t,
            Precision::Hyper(k) => psi[k].exp(),
        }
    }

    /// Gaussian conditional of the inner coordinates given φ.
    pub fn conditional(&self, phi: &[f64]) -> Result<Conditional> {
        let (psi, outer) = self.split(phi)?;
        let mut h = self.post.clone();
        self.fill_prior(&mut h, psi, 1);
        let mut b = vec![0.0; self.inner.len()];
        let mut g: Vec<f64> = Vec::with_capacity(4);
        let values = h.values_mut();
        for o in &self.observations {
            let tau = self.tau(o, psi);
            let resid = o.value - o.offset(outer);
            g.clear();
            g.resize(o.unique.len(), 0.0);
            for (t, &p) in o.terms.iter().zip(&o.term_pos) {
                g[p] += o.coef(t, outer);
            }
            let mut slot = o.slots.iter();
            for (a, (&i, &ci)) in o.unique.iter().zip(&g).enumerate() {
                b[i] += tau * ci * resid;
                for &cj in &g[a..] {
                    values[*slot.next().expect("one slot per pair")] += tau * ci * cj;
                }
            }
        }
        let factor = self
            .post_symbolic
            .factor(&h)
            .map_err(|r| self.singular("posterior precision", r))?;
        factor.solve(&mut b);
        let mut mode = vec![0.0; self.lgm.dim()];
        for (r, &j) in self.inner.iter().enumerate() {
            mode[j] = b[r];
        }
        for (p, &j) in self.outer.iter().enumerate() {
            mode[j] = outer[p];
        }
        Ok(Conditional {
            log_det: factor.log_det(),
            mode,
            factor,
            inner: Arc::clone(&self.inner),
        })
    }

    /// log p̃(φ | y) up to a constant, with the conditional it was evaluated
    /// at. Exact (given φ) because the inner conditional is Gaussian.
    pub fn log_hyper_posterior(&self, phi: &[f64]) -> Result<(f64, Conditional)> {
        let cond = self.conditional(phi)?;
        let (psi, outer) = self.split(phi)?;
        let mut q = self.prior.clone();
        self.fill_prior(&mut q, psi, 0);
        let prior_ld = self
            .prior_symbolic
            .factor(&q)
            .map(|f| f.log_det())
            .map_err(|r| self.singular("prior precision", r))?;
        let x: Vec<f64> = self.inner.iter().map(|&j| cond.mode[j]).collect();
        let mut value = self.lgm.log_hyper_prior(psi) + 0.5 * prior_ld - 0.5 * q.quad_form(&x) - 0.5 * cond.log_det;
        for (p, a) in outer.iter().enumerate() {
            let prec = self.outer_precision[p];
            value += 0.5 * (prec / (2.0 * PI)).ln() - 0.5 * prec * a * a;
        }
        for o in &self.observations {
            let tau = self.tau(o, psi);
            let eta = o.offset(outer) + o.terms.iter().map(|t| o.coef(t, outer) * x[t.inner]).sum::<f64>();
            let r = o.value - eta;
            value += 0.5 * (tau / (2.0 * PI)).ln() - 0.5 * tau * r * r;
        }
        if !value.is_finite() {
            return Err(Error::Numerical(format!("log posterior is {value} at φ = {phi:?}")));
        }
        Ok((value, cond))
    }
}

/// Gaussian conditional of θ given φ = (ψ, product coefficients).
pub fn gaussian_conditional(lgm: &LatentGaussianModel, phi: &[f64]) -> Result<Conditional> {
    Engine::new(lgm)?.conditional(phi)
}

/// log p̃(φ | y) up to a constant.
pub fn log_hyper_posterior(lgm: &LatentGaussianModel, phi: &[f64]) -> Result<f64> {
    Ok(Engine::new(lgm)?.log_hyper_posterior(phi)?.0)
}
