//! Iterative absolute reconstruction: smoothed-TV Gauss-Newton and
//! Levenberg-Marquardt, both with a projected line search.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::forward::{Bounds, Conductivity, ForwardModel, VoltageFrame};
use crate::graph::DiffMatrix;
use crate::registry::Registry;

/// Number of iterates handed to the network as candidate inputs.
pub const RECORDED_ITERATES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LineSearchConfig {
    pub method: String,
    pub alpha0: f64,
    pub shrink: f64,
    pub armijo_c: f64,
    pub max_halvings: usize,
    pub golden_evals: usize,
}

impl Default for LineSearchConfig {
    fn default() -> Self {
        LineSearchConfig {
            method: "backtracking".into(),
            alpha0: 1.0,
            shrink: 0.5,
            armijo_c: 1e-4,
            max_halvings: 20,
            golden_evals: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconConfig {
    pub method: String,
    pub lambda: f64,
    pub gamma: f64,
    pub lambda_lm: f64,
    pub max_iters: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub line_search: LineSearchConfig,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            method: "tv".into(),
            lambda: 5e-5,
            gamma: 1e-14,
            lambda_lm: 1e-6,
            max_iters: 20,
            sigma_min: 1e-3,
            sigma_max: 10.0,
            line_search: LineSearchConfig::default(),
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lambda > 0.0, InvalidArgument, "lambda must be positive");
        ensure!(self.gamma > 0.0, InvalidArgument, "gamma must be positive");
        ensure!(self.lambda_lm >= 0.0, InvalidArgument, "lambda_lm must be non-negative");
        ensure!(self.max_iters >= 1, InvalidArgument, "max_iters must be at least 1");
        let ls = &self.line_search;
        ensure!(ls.alpha0 > 0.0, InvalidArgument, "line search alpha0 must be positive");
        ensure!(
            ls.shrink > 0.0 && ls.shrink < 1.0,
            InvalidArgument,
            "line search shrink factor must lie in (0, 1)"
        );
        ensure!(
            ls.armijo_c > 0.0 && ls.armijo_c < 1.0,
            InvalidArgument,
            "Armijo constant must lie in (0, 1)"
        );
        ensure!(ls.golden_evals >= 2, InvalidArgument, "golden search needs at least 2 evaluations");
        self.bounds()?;
        Ok(())
    }

    pub fn bounds(&self) -> Result<Bounds> {
        Bounds::new(self.sigma_min, self.sigma_max)
    }
}

/// Measured data together with everything needed to evaluate the model.
pub struct InverseProblem<'a> {
    pub model: &'a ForwardModel,
    pub diff: &'a DiffMatrix,
    /// Measured voltages, pattern-major.
    pub data: Vec<f64>,
}

impl<'a> InverseProblem<'a> {
    pub fn new(model: &'a ForwardModel, diff: &'a DiffMatrix, data: &VoltageFrame) -> Result<Self> {
        let v = data.to_vector();
        ensure!(
            v.len() == model.n_measurements(),
            Shape,
            "{} measurements for a model producing {}",
            v.len(),
            model.n_measurements()
        );
        ensure!(
            diff.n_elements() == model.mesh().n_elements(),
            Shape,
            "difference matrix covers {} elements, mesh has {}",
            diff.n_elements(),
            model.mesh().n_elements()
        );
        Ok(InverseProblem { model, diff, data: v })
    }

    fn residual(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(&self.data).map(|(a, b)| a - b).collect()
    }
}

fn half_sq(r: &[f64]) -> f64 {
    0.5 * r.iter().map(|v| v * v).sum::<f64>()
}

/// `Σ √((L_i σ)² + γ)`
pub fn tv_penalty(diff: &DiffMatrix, sigma: &[f64], gamma: f64) -> f64 {
    diff.apply(sigma).iter().map(|d| (d * d + gamma).sqrt()).sum()
}

/// `½‖U(σ) − V‖² + λ Σ √((L_i σ)² + γ)`
pub fn tv_objective(problem: &InverseProblem, sigma: &Conductivity, lambda: f64, gamma: f64) -> Result<f64> {
    let u = problem.model.solve(sigma)?.frame.to_vector();
    Ok(half_sq(&problem.residual(&u)) + lambda * tv_penalty(problem.diff, sigma.values(), gamma))
}

fn solve_spd(a: DMatrix<f64>, b: DVector<f64>, what: &str) -> Result<Vec<f64>> {
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Numerical(format!("{what} normal equations are not positive definite")))?;
    let x = chol.solve(&b);
    ensure!(x.iter().all(|v| v.is_finite()), Numerical, "{what} update is not finite");
    Ok(x.as_slice().to_vec())
}

/// Gauss-Newton direction and objective gradient of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub delta: Vec<f64>,
    pub gradient: Vec<f64>,
}

/// `δσ = −(JᵀJ + λB)⁻¹(Jᵀr + λBσ)` with `B = Lᵀ diag(η)⁻¹ L`,
/// `η_i = √((L_iσ)² + γ)`, `r = U − V`.
pub fn tv_step(
    sigma: &[f64],
    jac: &DMatrix<f64>,
    u: &[f64],
    v: &[f64],
    diff: &DiffMatrix,
    lambda: f64,
    gamma: f64,
) -> Result<Step> {
    ensure!(gamma > 0.0, InvalidArgument, "gamma must be positive");
    check_shapes(sigma, jac, u, v)?;
    let r = DVector::from_iterator(u.len(), u.iter().zip(v).map(|(a, b)| a - b));
    let weights: Vec<f64> = diff.apply(sigma).iter().map(|d| 1.0 / (d * d + gamma).sqrt()).collect();
    let mut a = jac.tr_mul(jac);
    diff.add_weighted_gram(&weights, lambda, &mut a);
    let b_sigma: Vec<f64> = {
        let ls: Vec<f64> = diff.apply(sigma).iter().zip(&weights).map(|(d, w)| d * w).collect();
        diff.apply_transpose(&ls)
    };
    let mut g = jac.tr_mul(&r);
    for (gi, bi) in g.iter_mut().zip(&b_sigma) {
        *gi += lambda * bi;
    }
    let delta = solve_spd(a, -g.clone(), "TV")?;
    Ok(Step {
        delta,
        gradient: g.as_slice().to_vec(),
    })
}

pub fn tv_update(
    sigma: &[f64],
    jac: &DMatrix<f64>,
    u: &[f64],
    v: &[f64],
    diff: &DiffMatrix,
    lambda: f64,
    gamma: f64,
) -> Result<Vec<f64>> {
    Ok(tv_step(sigma, jac, u, v, diff, lambda, gamma)?.delta)
}

/// `δσ = −(JᵀJ + λ_LM I)⁻¹ Jᵀ(U − V)`
pub fn lm_step(sigma: &[f64], jac: &DMatrix<f64>, u: &[f64], v: &[f64], lambda_lm: f64) -> Result<Step> {
    check_shapes(sigma, jac, u, v)?;
    let r = DVector::from_iterator(u.len(), u.iter().zip(v).map(|(a, b)| a - b));
    let mut a = jac.tr_mul(jac);
    for i in 0..a.nrows() {
        a[(i, i)] += lambda_lm;
    }
    let g = jac.tr_mul(&r);
    let delta = solve_spd(a, -g.clone(), "LM")?;
    Ok(Step {
        delta,
        gradient: g.as_slice().to_vec(),
    })
}

pub fn lm_update(sigma: &[f64], jac: &DMatrix<f64>, u: &[f64], v: &[f64], lambda_lm: f64) -> Result<Vec<f64>> {
    Ok(lm_step(sigma, jac, u, v, lambda_lm)?.delta)
}

fn check_shapes(sigma: &[f64], jac: &DMatrix<f64>, u: &[f64], v: &[f64]) -> Result<()> {
    ensure!(
        jac.ncols() == sigma.len() && jac.nrows() == u.len() && u.len() == v.len(),
        Shape,
        "Jacobian {}×{} with {} conductivities, {} model and {} measured voltages",
        jac.nrows(),
        jac.ncols(),
        sigma.len(),
        u.len(),
        v.len()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchOutcome {
    pub alpha: f64,
    pub value: f64,
    pub evaluations: usize,
    pub stalled: bool,
}

/// Chooses a step length along a fixed direction. `phi(α)` evaluates the
/// objective at the projected trial point; `slope` is `∇F·δ`.
pub trait LineSearch: Send + Sync {
    fn search(
        &self,
        phi: &mut dyn FnMut(f64) -> Result<f64>,
        f0: f64,
        slope: f64,
        config: &LineSearchConfig,
    ) -> Result<LineSearchOutcome>;
}

/// Armijo backtracking from `alpha0`.
pub struct Backtracking;

impl LineSearch for Backtracking {
    fn search(
        &self,
        phi: &mut dyn FnMut(f64) -> Result<f64>,
        f0: f64,
        slope: f64,
        config: &LineSearchConfig,
    ) -> Result<LineSearchOutcome> {
        let mut alpha = config.alpha0;
        let mut evaluations = 0;
        for _ in 0..=config.max_halvings {
            let f = phi(alpha)?;
            evaluations += 1;
            if f <= f0 + config.armijo_c * alpha * slope.min(0.0) {
                return Ok(LineSearchOutcome {
                    alpha,
                    value: f,
                    evaluations,
                    stalled: false,
                });
            }
            alpha *= config.shrink;
        }
        Ok(LineSearchOutcome {
            alpha: 0.0,
            value: f0,
            evaluations,
            stalled: true,
        })
    }
}

/// Golden-section minimization of `phi` over `[0, alpha0]`.
pub struct GoldenSection;

impl LineSearch for GoldenSection {
    fn search(
        &self,
        phi: &mut dyn FnMut(f64) -> Result<f64>,
        f0: f64,
        _slope: f64,
        config: &LineSearchConfig,
    ) -> Result<LineSearchOutcome> {
        let ratio = (5f64.sqrt() - 1.0) / 2.0;
        let (mut a, mut b) = (0.0, config.alpha0);
        let mut x1 = b - ratio * (b - a);
        let mut x2 = a + ratio * (b - a);
        let mut f1 = phi(x1)?;
        let mut f2 = phi(x2)?;
        let mut evaluations = 2;
        let mut best = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
        while evaluations < config.golden_evals {
            if f1 <= f2 {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - ratio * (b - a);
                f1 = phi(x1)?;
                if f1 < best.1 {
                    best = (x1, f1);
                }
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + ratio * (b - a);
                f2 = phi(x2)?;
                if f2 < best.1 {
                    best = (x2, f2);
                }
            }
            evaluations += 1;
        }
        if best.1 <= f0 {
            Ok(LineSearchOutcome {
                alpha: best.0,
                value: best.1,
                evaluations,
                stalled: false,
            })
        } else {
            Ok(LineSearchOutcome {
                alpha: 0.0,
                value: f0,
                evaluations,
                stalled: true,
            })
        }
    }
}

pub fn line_search_registry() -> Registry<dyn LineSearch> {
    let mut r: Registry<dyn LineSearch> = Registry::new("line search");
    r.register("backtracking", Arc::new(Backtracking));
    r.register("golden", Arc::new(GoldenSection));
    r
}

/// A reconstruction method: its objective and its update direction.
pub trait ReconstructionMethod: Send + Sync {
    fn objective(&self, problem: &InverseProblem, sigma: &[f64], u: &[f64], config: &ReconConfig) -> f64;

    fn step(
        &self,
        problem: &InverseProblem,
        sigma: &[f64],
        jac: &DMatrix<f64>,
        u: &[f64],
        config: &ReconConfig,
    ) -> Result<Step>;
}

pub struct TotalVariation;

impl ReconstructionMethod for TotalVariation {
    fn objective(&self, problem: &InverseProblem, sigma: &[f64], u: &[f64], config: &ReconConfig) -> f64 {
        half_sq(&problem.residual(u)) + config.lambda * tv_penalty(problem.diff, sigma, config.gamma)
    }

    fn step(
        &self,
        problem: &InverseProblem,
        sigma: &[f64],
        jac: &DMatrix<f64>,
        u: &[f64],
        config: &ReconConfig,
    ) -> Result<Step> {
        tv_step(sigma, jac, u, &problem.data, problem.diff, config.lambda, config.gamma)
    }
}

pub struct LevenbergMarquardt;

impl ReconstructionMethod for LevenbergMarquardt {
    fn objective(&self, problem: &InverseProblem, _sigma: &[f64], u: &[f64], _config: &ReconConfig) -> f64 {
        half_sq(&problem.residual(u))
    }

    fn step(
        &self,
        problem: &InverseProblem,
        sigma: &[f64],
        jac: &DMatrix<f64>,
        u: &[f64],
        config: &ReconConfig,
    ) -> Result<Step> {
        lm_step(sigma, jac, u, &problem.data, config.lambda_lm)
    }
}

pub fn method_registry() -> Registry<dyn ReconstructionMethod> {
    let mut r: Registry<dyn ReconstructionMethod> = Registry::new("reconstruction method");
    r.register("tv", Arc::new(TotalVariation));
    r.register("lm", Arc::new(LevenbergMarquardt));
    r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterateTrace {
    /// σ₀ … σ_n
    pub iterates: Vec<Vec<f64>>,
    /// F(σ_k) for every iterate.
    pub objectives: Vec<f64>,
    /// α_k of each accepted step.
    pub step_lengths: Vec<f64>,
    /// ‖U(σ_k) − V‖ for every iterate.
    pub misfits: Vec<f64>,
    pub stalled: bool,
}

impl IterateTrace {
    /// σ₁…σ_count; when the run stopped early the last iterate is repeated.
    pub fn network_inputs(&self, count: usize) -> Vec<Vec<f64>> {
        let last = self.iterates.len() - 1;
        (1..=count).map(|k| self.iterates[k.min(last)].clone()).collect()
    }
}

/// Best homogeneous fit: the scalar `s` minimizing `‖U(s·1) − V‖²`, found by
/// bisection on the sign of the derivative in log-space.
pub fn homogeneous_fit(problem: &InverseProblem, bounds: Bounds) -> Result<f64> {
    let n = problem.model.mesh().n_elements();
    let derivative = |s: f64| -> Result<f64> {
        let sigma = Conductivity::uniform(n, s, bounds)?;
        let sol = problem.model.solve(&sigma)?;
        let r = problem.residual(&sol.frame.to_vector());
        let du = problem.model.scaling_derivative(&sol, &sigma)?.to_vector();
        Ok(r.iter().zip(&du).map(|(a, b)| a * b).sum())
    };
    let (mut lo, mut hi) = (bounds.lower.ln(), bounds.upper.ln());
    if derivative(bounds.lower)? >= 0.0 {
        return Ok(bounds.lower);
    }
    if derivative(bounds.upper)? <= 0.0 {
        return Ok(bounds.upper);
    }
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if derivative(mid.exp())? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

/// Runs up to `max_iters` projected Gauss-Newton steps from the best
/// homogeneous fit (or from `initial` when given).
pub fn reconstruct(
    problem: &InverseProblem,
    config: &ReconConfig,
    initial: Option<&[f64]>,
) -> Result<IterateTrace> {
    config.validate()?;
    let method = method_registry().get(&config.method)?;
    let search = line_search_registry().get(&config.line_search.method)?;
    let bounds = config.bounds()?;
    let n = problem.model.mesh().n_elements();
    let sigma0 = match initial {
        Some(s) => {
            ensure!(s.len() == n, Shape, "initial guess has {} values for {n} elements", s.len());
            Conductivity::projected(s, bounds)
        }
        None => Conductivity::uniform(n, homogeneous_fit(problem, bounds)?, bounds)?,
    };

    let mut sigma = sigma0;
    let mut sol = problem.model.solve(&sigma)?;
    let mut u = sol.frame.to_vector();
    let mut f = method.objective(problem, sigma.values(), &u, config);
    let mut trace = IterateTrace {
        iterates: vec![sigma.values().to_vec()],
        objectives: vec![f],
        step_lengths: Vec::new(),
        misfits: vec![norm(&problem.residual(&u))],
        stalled: false,
    };
    for _ in 0..config.max_iters {
        let jac = problem.model.jacobian_from(&sol);
        let step = method.step(problem, sigma.values(), &jac, &u, config)?;
        let slope: f64 = step.gradient.iter().zip(&step.delta).map(|(g, d)| g * d).sum();
        let trial = |alpha: f64| Conductivity::projected(&axpy(sigma.values(), alpha, &step.delta), bounds);
        let mut phi = |alpha: f64| -> Result<f64> {
            let s = trial(alpha);
            let u = problem.model.solve(&s)?.frame.to_vector();
            Ok(method.objective(problem, s.values(), &u, config))
        };
        let outcome = search.search(&mut phi, f, slope, &config.line_search)?;
        if outcome.stalled {
            trace.stalled = true;
            break;
        }
        sigma = trial(outcome.alpha);
        sol = problem.model.solve(&sigma)?;
        u = sol.frame.to_vector();
        f = method.objective(problem, sigma.values(), &u, config);
        trace.iterates.push(sigma.values().to_vec());
        trace.objectives.push(f);
        trace.step_lengths.push(outcome.alpha);
        trace.misfits.push(norm(&problem.residual(&u)));
    }
    Ok(trace)
}

/// TV reconstruction with the given config's regularization parameters.
pub fn tv_reconstruct(problem: &InverseProblem, config: &ReconConfig) -> Result<IterateTrace> {
    let mut c = config.clone();
    c.method = "tv".into();
    reconstruct(problem, &c, None)
}

fn axpy(x: &[f64], a: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(xi, di)| xi + a * di).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::tests::electrode_grid;
    use crate::forward::{CurrentPatterns, ElectrodeConfig};
    use crate::graph::{difference_matrix, DiffRow};
    use proptest::prelude::*;

    fn path_diff() -> DiffMatrix {
        DiffMatrix::from_rows(
            3,
            vec![
                DiffRow {
                    length: 0.5,
                    element_a: 0,
                    element_b: 1,
                },
                DiffRow {
                    length: 2.0,
                    element_a: 1,
                    element_b: 2,
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn toy_tv_update_matches_dense_oracle() {
        let jac = DMatrix::from_row_slice(4, 3, &[1.0, 0.2, 0.0, 0.3, 1.0, 0.1, 0.0, 0.4, 1.0, 0.5, 0.5, 0.5]);
        let sigma = [1.0, 1.3, 0.8];
        let u = [0.3, -0.2, 0.1, 0.05];
        let v = [0.1, 0.1, 0.0, 0.0];
        let (lambda, gamma) = (0.7, 1e-3);
        let diff = path_diff();
        let l = diff.to_csr().to_dense();
        let ls = &l * DVector::from_row_slice(&sigma);
        let e_inv = DMatrix::from_diagonal(&ls.map(|d| 1.0 / (d * d + gamma).sqrt()));
        let b = l.transpose() * e_inv * &l;
        let r = DVector::from_row_slice(&u) - DVector::from_row_slice(&v);
        let lhs = jac.transpose() * &jac + &b * lambda;
        let rhs = jac.transpose() * r + &b * DVector::from_row_slice(&sigma) * lambda;
        let expected = -lhs.clone().lu().solve(&rhs).unwrap();
        let got = tv_update(&sigma, &jac, &u, &v, &diff, lambda, gamma).unwrap();
        for i in 0..3 {
            assert!((got[i] - expected[i]).abs() < 1e-12 * expected.amax());
        }
        let res = lhs * DVector::from_row_slice(&got) + rhs.clone();
        assert!(res.norm() <= 1e-8 * rhs.norm());
    }

    #[test]
    fn toy_lm_update_matches_dense_oracle() {
        let jac = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.5, -1.0, 0.0, 0.3]);
        let u = [1.0, 0.0, 0.5];
        let v = [0.5, 0.1, 0.2];
        let lm = 1e-2;
        let r = DVector::from_row_slice(&[0.5, -0.1, 0.3]);
        let lhs = jac.transpose() * &jac + DMatrix::identity(2, 2) * lm;
        let expected = -lhs.lu().solve(&(jac.transpose() * r)).unwrap();
        let got = lm_update(&[1.0, 1.0], &jac, &u, &v, lm).unwrap();
        assert!((got[0] - expected[0]).abs() < 1e-13 && (got[1] - expected[1]).abs() < 1e-13);
        assert_eq!(lm_update(&[1.0, 1.0], &jac, &v, &v, lm).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn lm_large_damping_tends_to_scaled_gradient() {
        let jac = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.5, -1.0, 0.0, 0.3]);
        let u = [1.0, 0.0, 0.5];
        let v = [0.5, 0.1, 0.2];
        let lm = 1e8;
        let g = jac.transpose() * DVector::from_row_slice(&[0.5, -0.1, 0.3]);
        let got = lm_update(&[1.0, 1.0], &jac, &u, &v, lm).unwrap();
        for i in 0..2 {
            assert!((got[i] + g[i] / lm).abs() < 1e-6 * g[i].abs() / lm);
        }
    }

    #[test]
    fn constant_sigma_with_matching_data_gives_zero_update() {
        let jac = DMatrix::from_fn(5, 3, |i, j| (i + 2 * j) as f64 * 0.1 + 0.05);
        let u = [0.1, 0.2, 0.3, 0.4, 0.5];
        let d = tv_update(&[0.7, 0.7, 0.7], &jac, &u, &u, &path_diff(), 1e-2, 1e-6).unwrap();
        assert!(d.iter().all(|x| x.abs() < 1e-14));
        assert!(tv_update(&[0.7, 0.7, 0.7], &jac, &u, &u, &path_diff(), 1e-2, 0.0).is_err());
    }

    #[test]
    fn rank_deficient_lm_without_damping_is_an_error() {
        let jac = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let err = lm_update(&[1.0; 3], &jac, &[1.0, 0.0], &[0.0, 0.0], 0.0).unwrap_err();
        assert!(err.is_numerical());
    }

    #[test]
    fn backtracking_accepts_newton_step_on_quadratic() {
        // F(x) = (x - 3)², x0 = 0, exact Newton step δ = 3
        let mut phi = |a: f64| Ok((3.0 * a - 3.0f64).powi(2));
        let out = Backtracking
            .search(&mut phi, 9.0, -18.0, &LineSearchConfig::default())
            .unwrap();
        assert_eq!(out.alpha, 1.0);
        assert_eq!(out.evaluations, 1);
        let mut flat = |_a: f64| Ok(2.0);
        let out = Backtracking.search(&mut flat, 2.0, 0.0, &LineSearchConfig::default()).unwrap();
        assert!(!out.stalled && out.value == 2.0);
        let mut up = |a: f64| Ok(1.0 + a);
        let out = Backtracking.search(&mut up, 1.0, -1.0, &LineSearchConfig::default()).unwrap();
        assert!(out.stalled && out.alpha == 0.0);
    }

    #[test]
    fn golden_finds_interior_minimum() {
        let mut phi = |a: f64| Ok((a - 0.3f64).powi(2));
        let out = GoldenSection.search(&mut phi, 0.09, -0.6, &LineSearchConfig::default()).unwrap();
        assert_eq!(out.evaluations, 30);
        assert!((out.alpha - 0.3).abs() < 1e-4);
    }

    #[test]
    fn unknown_strategies_are_reported() {
        assert!(matches!(method_registry().get("cg"), Err(Error::UnknownStrategy { .. })));
        assert!(line_search_registry().get("wolfe").is_err());
        assert_eq!(method_registry().names(), vec!["tv", "lm"]);
    }

    fn small_problem() -> (ForwardModel, DiffMatrix) {
        let mesh = electrode_grid(4);
        let el = ElectrodeConfig::from_mesh(&mesh, 0.02).unwrap();
        let model = ForwardModel::new(&mesh, el, CurrentPatterns::adjacent(4, 1e-3)).unwrap();
        let diff = difference_matrix(&mesh);
        (model, diff)
    }

    #[test]
    fn constant_sigma_with_exact_data_has_pure_penalty_objective() {
        let (model, diff) = small_problem();
        let n = model.mesh().n_elements();
        let sigma = Conductivity::uniform(n, 0.4, Bounds::default()).unwrap();
        let data = model.solve(&sigma).unwrap().frame;
        let p = InverseProblem::new(&model, &diff, &data).unwrap();
        let (lambda, gamma) = (5e-5, 1e-14);
        let f = tv_objective(&p, &sigma, lambda, gamma).unwrap();
        let expected = lambda * diff.n_rows() as f64 * gamma.sqrt();
        assert!((f - expected).abs() < 1e-12 * expected, "{f} vs {expected}");
        let bigger = tv_objective(&p, &sigma, lambda, 1e-6).unwrap();
        assert!(bigger > f);
    }

    #[test]
    fn homogeneous_fit_recovers_constant_truth() {
        let (model, diff) = small_problem();
        let n = model.mesh().n_elements();
        let truth = Conductivity::uniform(n, 0.37, Bounds::default()).unwrap();
        let data = model.solve(&truth).unwrap().frame;
        let p = InverseProblem::new(&model, &diff, &data).unwrap();
        let s = homogeneous_fit(&p, Bounds::default()).unwrap();
        assert!((s - 0.37).abs() < 1e-8, "{s}");
    }

    #[test]
    fn tv_step_descends_against_finite_difference_gradient() {
        let (model, diff) = small_problem();
        let n = model.mesh().n_elements();
        let truth: Vec<f64> = (0..n).map(|e| if e % 5 == 0 { 0.6 } else { 0.3 }).collect();
        let data = model.solve(&Conductivity::new(truth, Bounds::default()).unwrap()).unwrap().frame;
        let p = InverseProblem::new(&model, &diff, &data).unwrap();
        let sigma: Vec<f64> = (0..n).map(|e| 0.35 + 0.01 * (e % 3) as f64).collect();
        let (lambda, gamma) = (1e-4, 1e-6);
        let (frame, jac) = model.jacobian(&Conductivity::new(sigma.clone(), Bounds::default()).unwrap()).unwrap();
        let step = tv_step(&sigma, &jac, &frame.to_vector(), &p.data, &diff, lambda, gamma).unwrap();
        let f = |s: &[f64]| tv_objective(&p, &Conductivity::new(s.to_vec(), Bounds::default()).unwrap(), lambda, gamma).unwrap();
        let mut fd_dot = 0.0;
        for e in 0..n {
            let h = 1e-6 * sigma[e];
            let mut a = sigma.clone();
            a[e] += h;
            let mut b = sigma.clone();
            b[e] -= h;
            let g = (f(&a) - f(&b)) / (2.0 * h);
            assert!((g - step.gradient[e]).abs() < 1e-5 * step.gradient.iter().fold(0.0f64, |m, x| m.max(x.abs())));
            fd_dot += g * step.delta[e];
        }
        assert!(fd_dot < 0.0);
    }

    #[test]
    fn reconstruction_is_monotone_and_deterministic() {
        let (model, diff) = small_problem();
        let n = model.mesh().n_elements();
        let truth: Vec<f64> = (0..n).map(|e| if e < n / 3 { 0.6 } else { 0.3 }).collect();
        let data = model.simulate(&Conductivity::new(truth, Bounds::default()).unwrap(), 0.005, 1).unwrap();
        let p = InverseProblem::new(&model, &diff, &data).unwrap();
        let cfg = ReconConfig {
            max_iters: 6,
            ..ReconConfig::default()
        };
        let a = reconstruct(&p, &cfg, None).unwrap();
        for w in a.objectives.windows(2) {
            assert!(w[1] <= w[0]);
        }
        let b = reconstruct(&p, &cfg, None).unwrap();
        assert_eq!(a, b);
        let golden = ReconConfig {
            line_search: LineSearchConfig {
                method: "golden".into(),
                ..LineSearchConfig::default()
            },
            ..cfg.clone()
        };
        let g = reconstruct(&p, &golden, None).unwrap();
        for w in g.objectives.windows(2) {
            assert!(w[1] <= w[0]);
        }
        let lm = ReconConfig {
            method: "lm".into(),
            ..cfg
        };
        let l = reconstruct(&p, &lm, None).unwrap();
        assert!(l.misfits.last().unwrap() < &l.misfits[0]);
    }

    #[test]
    fn network_inputs_repeat_last_iterate_after_a_stall() {
        let t = IterateTrace {
            iterates: vec![vec![0.0], vec![1.0], vec![2.0]],
            objectives: vec![3.0, 2.0, 1.0],
            step_lengths: vec![1.0, 1.0],
            misfits: vec![0.0; 3],
            stalled: true,
        };
        assert_eq!(t.network_inputs(4), vec![vec![1.0], vec![2.0], vec![2.0], vec![2.0]]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn tv_update_solves_normal_equations(
            seed in 0u64..1000,
            lambda in 1e-4f64..1.0,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let jac = DMatrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
            let sigma: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..1.0)).collect();
            let u: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let diff = path_diff();
            let gamma = 1e-4;
            let step = tv_step(&sigma, &jac, &u, &v, &diff, lambda, gamma).unwrap();
            let weights: Vec<f64> = diff.apply(&sigma).iter().map(|d| 1.0 / (d * d + gamma).sqrt()).collect();
            let mut b = DMatrix::zeros(3, 3);
            diff.add_weighted_gram(&weights, 1.0, &mut b);
            // B is symmetric positive semidefinite
            let eig = b.clone().symmetric_eigen();
            prop_assert!(eig.eigenvalues.iter().all(|&e| e > -1e-10 * b.amax()));
            let lhs = jac.tr_mul(&jac) + b * lambda;
            let res = lhs * DVector::from_row_slice(&step.delta) + DVector::from_row_slice(&step.gradient);
            prop_assert!(res.norm() <= 1e-8 * step.gradient.iter().map(|x| x * x).sum::<f64>().sqrt());
        }
    }
}
