//! Vector fields of the centralized and distributed dispatch dynamics, the
//! two-state mismatch subsystem, and the gain conditions and robustness
//! bounds derived from it.
//!
//! Centralized (needs the global mismatch):
//!
//! ```text
//! dP/dt = -L ζ + (1/n)(P_l - 1'P) 1,            ζ ∈ ∂f^ε(P)
//! ```
//!
//! Distributed (each unit only talks to its neighbours):
//!
//! ```text
//! dP/dt = -L ζ + ν1 z
//! dz/dt = -α z - β L z - v + ν2 (P_l e_r - P)
//! dv/dt = α β L z
//! ```
//!
//! `z_i` tracks the average mismatch `(P_l - 1'P)/n` by dynamic average
//! consensus and `v` is its integral state. Both fields are evaluated with
//! the single-valued selection of [`PenaltyCost::selection_into`].

use nalgebra::{Matrix2, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::costs::PenaltyCost;
use crate::error::{Error, Result};
use crate::graph::{GraphBounds, LaplacianBundle};
use crate::oracle::DispatchProblem;

/// Where the load enters the consensus drive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadMode {
    /// Only unit `r` knows the total load: drive `ν2 (P_l e_r - P)`.
    #[default]
    SingleBus,
    /// Every unit knows the load at its own bus: drive `ν2 (P^L - P)`.
    DistributedBus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmParams {
    pub alpha: f64,
    pub beta: f64,
    pub nu1: f64,
    pub nu2: f64,
    pub epsilon: f64,
    /// Label of the load-informed unit (single-bus mode).
    pub r: usize,
    #[serde(default)]
    pub load_mode: LoadMode,
}

impl AlgorithmParams {
    /// Gains of the IEEE 118-bus experiments: `ν1 = 1, ν2 = 1.3, α = 10,
    /// β = 40, ε = 0.0086`, load known to unit 3.
    pub fn ieee118() -> Self {
        AlgorithmParams {
            alpha: 10.0,
            beta: 40.0,
            nu1: 1.0,
            nu2: 1.3,
            epsilon: 0.0086,
            r: 3,
            load_mode: LoadMode::SingleBus,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let gains = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("nu1", self.nu1),
            ("nu2", self.nu2),
            ("epsilon", self.epsilon),
        ];
        for (name, value) in gains {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidParameter {
                    name,
                    reason: format!("must be positive and finite, got {value}"),
                });
            }
        }
        if self.r == 0 {
            return Err(Error::InvalidParameter {
                name: "r",
                reason: "unit labels are 1-based".into(),
            });
        }
        Ok(())
    }

    /// Gains satisfying the spectral condition with margin: `ν1 = 1`, and
    /// `α`, `β` chosen so that each term of the left-hand side equals
    /// `λ2/4`. `ν2` is picked from a fixed ladder to maximize the decay rate
    /// of the mismatch subsystem while keeping `dt (α + β ‖L‖) <= 1`.
    pub fn tuned_for(bundle: &LaplacianBundle, epsilon: f64, r: usize, dt: f64) -> Result<Self> {
        let l2 = bundle.lambda2_sym;
        if !(l2 > 0.0) {
            return Err(Error::NonPositiveConnectivity(l2));
        }
        let norm_l = bundle.lambda_max_ltl.sqrt();
        let mut best: Option<(f64, AlgorithmParams)> = None;
        for nu2 in [2.0, 1.0, 0.5, 0.3, 0.2, 0.1, 0.05, 0.02] {
            let nu1 = 1.0;
            let beta = 4.0 * nu1 / (nu2 * l2 * l2);
            let alpha = (2.0 * nu2 * nu2 * bundle.lambda_max_ltl / l2).max(1e-3);
            let params = AlgorithmParams {
                alpha,
                beta,
                nu1,
                nu2,
                epsilon,
                r,
                load_mode: LoadMode::SingleBus,
            };
            if dt * (alpha + beta * norm_l) > 1.0 || !check_param_condition(bundle, &params)?.ok {
                continue;
            }
            let rate = mismatch_decay_rate(&params);
            if best.as_ref().is_none_or(|(b, _)| rate > *b) {
                best = Some((rate, params));
            }
        }
        best.map(|(_, p)| p).ok_or(Error::InvalidParameter {
            name: "dt",
            reason: "no tuned gain set is stable at this step size".into(),
        })
    }
}

/// Slowest real part among the eigenvalues of the mismatch matrix, negated.
pub fn mismatch_decay_rate(params: &AlgorithmParams) -> f64 {
    let k = params.nu1 * params.nu2;
    let a = params.alpha;
    let disc = a * a - 4.0 * k;
    if disc <= 0.0 {
        a / 2.0
    } else {
        (a - disc.sqrt()) / 2.0
    }
}

/// Network state `(P, z, v)` over the active units, in ascending label order.
#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub active: Vec<usize>,
    pub p: Vec<f64>,
    pub z: Vec<f64>,
    pub v: Vec<f64>,
}

impl SimState {
    pub fn new(active: Vec<usize>, p: Vec<f64>, z: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        let n = active.len();
        for len in [p.len(), z.len(), v.len()] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: len,
                });
            }
        }
        if !active.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidSchedule(
                "active labels must be strictly ascending".into(),
            ));
        }
        Ok(SimState { active, p, z, v })
    }

    /// `(P, 0, 0)`, which lies in `R^n × R^n × H_0`.
    pub fn cold(active: Vec<usize>, p: Vec<f64>) -> Result<Self> {
        let n = active.len();
        Self::new(active, p, vec![0.0; n], vec![0.0; n])
    }

    pub fn n(&self) -> usize {
        self.active.len()
    }

    pub fn position(&self, unit: usize) -> Option<usize> {
        self.active.binary_search(&unit).ok()
    }

    pub fn total_p(&self) -> f64 {
        compensated_sum(&self.p)
    }

    pub fn total_z(&self) -> f64 {
        compensated_sum(&self.z)
    }

    pub fn total_v(&self) -> f64 {
        compensated_sum(&self.v)
    }
}

/// Neumaier summation.
pub fn compensated_sum(xs: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// `-L ζ(P) + (1/n)(P_l - 1'P) 1`.
pub fn centralized_field(
    p: &[f64],
    problem: &DispatchProblem,
    bundle: &LaplacianBundle,
    params: &AlgorithmParams,
) -> Result<Vec<f64>> {
    check_dims(problem.n(), p.len())?;
    check_dims(bundle.n(), p.len())?;
    let penalty = PenaltyCost::new(problem.fleet.clone(), params.epsilon)?;
    let mut out = vec![0.0; p.len()];
    let mut scratch = vec![0.0; p.len()];
    centralized_rhs(&penalty, bundle, problem.load(), p, &mut out, &mut scratch);
    Ok(out)
}

pub(crate) fn centralized_rhs(
    penalty: &PenaltyCost,
    bundle: &LaplacianBundle,
    load: f64,
    p: &[f64],
    out: &mut [f64],
    scratch: &mut [f64],
) {
    let n = p.len();
    penalty.selection_into(p, scratch);
    bundle.apply(scratch, out);
    let feedback = (load - p.iter().sum::<f64>()) / n as f64;
    for o in out.iter_mut() {
        *o = feedback - *o;
    }
}

/// How the consensus drive term sees the load.
#[derive(Clone, Debug, PartialEq)]
pub enum Drive {
    /// Position of the load-informed unit in the state vectors.
    SingleBus { r_pos: usize },
    /// Fraction of the total load attached to each unit's bus.
    Shares(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldValue {
    pub dp: Vec<f64>,
    pub dz: Vec<f64>,
    pub dv: Vec<f64>,
}

/// Evaluates the distributed field at `state` for the load of `problem`.
///
/// In single-bus mode the load is injected at unit `params.r`; in
/// distributed-bus mode `problem` must carry per-bus loads.
pub fn distributed_field(
    state: &SimState,
    problem: &DispatchProblem,
    bundle: &LaplacianBundle,
    params: &AlgorithmParams,
) -> Result<FieldValue> {
    let n = state.n();
    check_dims(problem.n(), n)?;
    check_dims(bundle.n(), n)?;
    let penalty = PenaltyCost::new(problem.fleet.clone(), params.epsilon)?;
    let drive = match params.load_mode {
        LoadMode::SingleBus => Drive::SingleBus {
            r_pos: state
                .position(params.r)
                .ok_or(Error::InactiveReference(params.r))?,
        },
        LoadMode::DistributedBus => {
            let loads = problem.bus_loads().ok_or_else(|| Error::InvalidParameter {
                name: "load_mode",
                reason: "distributed-bus mode needs per-bus loads".into(),
            })?;
            Drive::Shares(loads.iter().map(|l| l / problem.load()).collect())
        }
    };
    let mut x = Vec::with_capacity(3 * n);
    x.extend_from_slice(&state.p);
    x.extend_from_slice(&state.z);
    x.extend_from_slice(&state.v);
    let mut dx = vec![0.0; 3 * n];
    let mut scratch = vec![0.0; 2 * n];
    distributed_rhs(
        &penalty,
        bundle,
        params,
        &drive,
        problem.load(),
        &x,
        &mut dx,
        &mut scratch,
    );
    Ok(FieldValue {
        dp: dx[..n].to_vec(),
        dz: dx[n..2 * n].to_vec(),
        dv: dx[2 * n..].to_vec(),
    })
}

/// Distributed field on the stacked state `x = [P; z; v]`. `scratch` must
/// hold at least `2n` values.
#[allow(clippy::too_many_arguments)]
pub(crate) fn distributed_rhs(
    penalty: &PenaltyCost,
    bundle: &LaplacianBundle,
    params: &AlgorithmParams,
    drive: &Drive,
    load: f64,
    x: &[f64],
    dx: &mut [f64],
    scratch: &mut [f64],
) {
    let n = x.len() / 3;
    let (p, rest) = x.split_at(n);
    let (z, v) = rest.split_at(n);
    let (dp, rest) = dx.split_at_mut(n);
    let (dz, dv) = rest.split_at_mut(n);
    let (sel, lz) = scratch[..2 * n].split_at_mut(n);

    penalty.selection_into(p, sel);
    bundle.apply(sel, dp);
    bundle.apply(z, lz);
    let AlgorithmParams {
        alpha,
        beta,
        nu1,
        nu2,
        ..
    } = *params;
    for i in 0..n {
        dp[i] = nu1 * z[i] - dp[i];
        let bus = match drive {
            Drive::SingleBus { r_pos } => {
                if i == *r_pos {
                    load
                } else {
                    0.0
                }
            }
            Drive::Shares(shares) => shares[i] * load,
        };
        dz[i] = -alpha * z[i] - beta * lz[i] - v[i] + nu2 * (bus - p[i]);
        dv[i] = alpha * beta * lz[i];
    }
}

/// The mismatch subsystem `x = (1'P - P_l, d/dt(1'P - P_l))`, its Lyapunov
/// matrix `R` (`A'R + RA = -I`) and the rate constants
/// `‖x(t)‖ <= c1 e^{-c2 t} ‖x(0)‖`.
#[derive(Clone, Debug, PartialEq)]
pub struct MismatchModel {
    pub a: Matrix2<f64>,
    pub r: Matrix2<f64>,
    pub c1: f64,
    pub c2: f64,
    pub lambda_min_r: f64,
    pub lambda_max_r: f64,
}

impl MismatchModel {
    /// `‖A'R + RA + I‖_max`.
    pub fn lyapunov_residual(&self) -> f64 {
        (self.a.transpose() * self.r + self.r * self.a + Matrix2::identity())
            .abs()
            .max()
    }

    /// `c1 e^{-c2 t}`.
    pub fn envelope(&self, t: f64) -> f64 {
        self.c1 * (-self.c2 * t).exp()
    }
}

pub fn mismatch_model(params: &AlgorithmParams) -> MismatchModel {
    let AlgorithmParams {
        alpha, nu1, nu2, ..
    } = *params;
    let k = nu1 * nu2;
    let a = Matrix2::new(0.0, 1.0, -k, -alpha);
    let r = Matrix2::new(alpha * alpha + k + k * k, alpha, alpha, 1.0 + k) / (2.0 * alpha * k);
    let eig = SymmetricEigen::new(r).eigenvalues;
    let (lambda_min_r, lambda_max_r) = (eig.min(), eig.max());
    MismatchModel {
        a,
        r,
        c1: (lambda_max_r / lambda_min_r).sqrt(),
        c2: 1.0 / (2.0 * lambda_max_r),
        lambda_min_r,
        lambda_max_r,
    }
}

/// A sufficient condition written as `lhs < rhs`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ConditionReport {
    pub ok: bool,
    pub lhs: f64,
    pub rhs: f64,
}

impl ConditionReport {
    fn new(lhs: f64, rhs: f64) -> Self {
        ConditionReport {
            ok: lhs < rhs,
            lhs,
            rhs,
        }
    }
}

/// `ν1 / (β ν2 λ2) + ν2² λ_max(L'L) / (2α) < λ2`, with `λ2 = λ2(L + L')`.
pub fn check_param_condition(
    bundle: &LaplacianBundle,
    params: &AlgorithmParams,
) -> Result<ConditionReport> {
    let l2 = bundle.lambda2_sym;
    if !(l2 > 0.0) {
        return Err(Error::NonPositiveConnectivity(l2));
    }
    let AlgorithmParams {
        alpha,
        beta,
        nu1,
        nu2,
        ..
    } = *params;
    let lhs = nu1 / (beta * nu2 * l2) + nu2 * nu2 * bundle.lambda_max_ltl / (2.0 * alpha);
    Ok(ConditionReport::new(lhs, l2))
}

/// Condition checkable from the network bounds alone; it implies
/// [`check_param_condition`] for every graph obeying `b`.
pub fn check_param_condition_distributed(
    b: &GraphBounds,
    params: &AlgorithmParams,
) -> ConditionReport {
    let AlgorithmParams {
        alpha,
        beta,
        nu1,
        nu2,
        ..
    } = *params;
    let n = b.n_max as f64;
    let lhs = nu1 * n * n / (4.0 * b.a_min * beta * nu2)
        + 2.0 * nu2 * nu2 * n * b.d_max_out * b.d_max_out / alpha;
    let rhs = 4.0 * b.a_min / (n * n);
    ConditionReport::new(lhs, rhs)
}

/// Ultimate bound `(c1/c2)(α d1 + d2)` on the mismatch under a load with
/// `|dP_l/dt| <= d1` and `|d²P_l/dt²| <= d2`.
pub fn ultimate_bound(params: &AlgorithmParams, d1: f64, d2: f64) -> f64 {
    let m = mismatch_model(params);
    m.c1 / m.c2 * (params.alpha * d1 + d2)
}

/// Time for the mismatch to fall below `rho` after an event leaving
/// `|1'P - P_l| <= m1` and `|1'z| <= m2`:
/// `max(0, (1/c2) ln(c1 (m1 + ν1 m2) / rho))`.
pub fn t_rho(params: &AlgorithmParams, m1: f64, m2: f64, rho: f64) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(Error::InvalidParameter {
            name: "rho",
            reason: format!("must be positive, got {rho}"),
        });
    }
    let m = mismatch_model(params);
    let arg = m.c1 * (m1 + params.nu1 * m2) / rho;
    Ok(if arg <= 1.0 { 0.0 } else { arg.ln() / m.c2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::{GeneratorFleet, GeneratorUnit};
    use crate::graph::{reference_graph, ReferenceGraph, WeightedDigraph};
    use crate::oracle::{kkt_check, solve_lambda_iteration};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ring(n: usize, w: f64) -> WeightedDigraph {
        WeightedDigraph::new(n, (1..=n).map(|i| (i, i % n + 1, w))).unwrap()
    }

    fn fleet3() -> GeneratorFleet {
        GeneratorFleet::new(vec![
            GeneratorUnit {
                a: 1.0,
                b: 1.0,
                c: 1.0,
                pmin: 0.0,
                pmax: 10.0,
            },
            GeneratorUnit {
                a: 2.0,
                b: 2.0,
                c: 0.5,
                pmin: 0.0,
                pmax: 10.0,
            },
            GeneratorUnit {
                a: 0.0,
                b: 3.0,
                c: 2.0,
                pmin: 0.0,
                pmax: 10.0,
            },
        ])
        .unwrap()
    }

    fn params(eps: f64, r: usize) -> AlgorithmParams {
        AlgorithmParams {
            epsilon: eps,
            r,
            ..AlgorithmParams::ieee118()
        }
    }

    #[test]
    fn centralized_equilibrium_at_optimizer() {
        let problem = DispatchProblem::new(fleet3(), 9.0).unwrap();
        let sol = solve_lambda_iteration(&problem, problem.default_tol()).unwrap();
        let b = ring(3, 1.0).laplacian();
        let f = centralized_field(&sol.p_star, &problem, &b, &params(0.01, 1)).unwrap();
        assert!(f.iter().all(|x| x.abs() < 1e-6), "{f:?}");
    }

    #[test]
    fn centralized_single_unit_is_mismatch_feedback() {
        let fleet = GeneratorFleet::new(vec![GeneratorUnit {
            a: 0.0,
            b: 1.0,
            c: 1.0,
            pmin: 0.0,
            pmax: 10.0,
        }])
        .unwrap();
        let problem = DispatchProblem::new(fleet, 4.0).unwrap();
        let b = WeightedDigraph::new(1, []).unwrap().laplacian();
        let f = centralized_field(&[1.5], &problem, &b, &params(0.01, 1)).unwrap();
        assert_eq!(f, vec![2.5]);
    }

    #[test]
    fn centralized_two_unit_hand_value() {
        let fleet = GeneratorFleet::new(vec![
            GeneratorUnit {
                a: 0.0,
                b: 0.0,
                c: 1.0,
                pmin: 0.0,
                pmax: 10.0
            };
            2
        ])
        .unwrap();
        let problem = DispatchProblem::new(fleet, 10.0).unwrap();
        let b = ring(2, 0.1).laplacian();
        // Both units sit on their lower corner: the selection is ∇f = 0.
        let f = centralized_field(&[0.0, 0.0], &problem, &b, &params(0.01, 1)).unwrap();
        assert_eq!(f, vec![5.0, 5.0]);
        // Off-corner: ζ = (2, 6) so L ζ = 0.1·(-4, 4); feedback (10 - 4)/2.
        let f = centralized_field(&[1.0, 3.0], &problem, &b, &params(0.01, 1)).unwrap();
        assert!((f[0] - 3.4).abs() < 1e-12 && (f[1] - 2.6).abs() < 1e-12);
        assert!(centralized_field(&[1.0], &problem, &b, &params(0.01, 1)).is_err());
    }

    #[test]
    fn distributed_single_unit() {
        let fleet = GeneratorFleet::new(vec![GeneratorUnit {
            a: 0.0,
            b: 1.0,
            c: 1.0,
            pmin: 0.0,
            pmax: 10.0,
        }])
        .unwrap();
        let problem = DispatchProblem::new(fleet, 4.0).unwrap();
        let b = WeightedDigraph::new(1, []).unwrap().laplacian();
        let state = SimState::new(vec![1], vec![1.0], vec![0.5], vec![0.25]).unwrap();
        let p = params(0.01, 1);
        let f = distributed_field(&state, &problem, &b, &p).unwrap();
        assert_eq!(f.dp, vec![p.nu1 * 0.5]);
        assert!((f.dz[0] - (-p.alpha * 0.5 - 0.25 + p.nu2 * 3.0)).abs() < 1e-12);
        assert_eq!(f.dv, vec![0.0]);
    }

    #[test]
    fn distributed_requires_active_reference() {
        let problem = DispatchProblem::new(fleet3(), 9.0).unwrap();
        let b = ring(3, 1.0).laplacian();
        let state = SimState::cold(vec![1, 2, 3], vec![1.0; 3]).unwrap();
        assert!(matches!(
            distributed_field(&state, &problem, &b, &params(0.01, 7)),
            Err(Error::InactiveReference(7))
        ));
    }

    #[test]
    fn distributed_equilibrium_projects_to_kkt() {
        let problem = DispatchProblem::new(fleet3(), 9.0).unwrap();
        let sol = solve_lambda_iteration(&problem, problem.default_tol()).unwrap();
        let b = ring(3, 1.0).laplacian();
        let p = params(0.01, 2);
        let r_pos = 1;
        let v: Vec<f64> = sol
            .p_star
            .iter()
            .enumerate()
            .map(|(i, &x)| p.nu2 * (if i == r_pos { problem.load() } else { 0.0 } - x))
            .collect();
        assert!(compensated_sum(&v).abs() <= p.nu2 * problem.default_tol());
        let state = SimState::new(vec![1, 2, 3], sol.p_star.clone(), vec![0.0; 3], v).unwrap();
        let f = distributed_field(&state, &problem, &b, &p).unwrap();
        for d in f.dp.iter().chain(&f.dz).chain(&f.dv) {
            assert!(d.abs() < 1e-6, "{f:?}");
        }
        assert!(
            kkt_check(&problem, &state.p, p.epsilon, problem.default_tol())
                .unwrap()
                .ok
        );
        // Without the matching v the consensus state is driven away.
        let cold = SimState::cold(vec![1, 2, 3], sol.p_star.clone()).unwrap();
        let f = distributed_field(&cold, &problem, &b, &p).unwrap();
        assert!(f.dz.iter().any(|d| d.abs() > 1.0));
    }

    #[test]
    fn distributed_bus_mode_uses_local_loads() {
        let problem = DispatchProblem::with_bus_loads(fleet3(), vec![2.0, 3.0, 4.0]).unwrap();
        let b = ring(3, 1.0).laplacian();
        let p = AlgorithmParams {
            load_mode: LoadMode::DistributedBus,
            ..params(0.01, 1)
        };
        let state = SimState::cold(vec![1, 2, 3], vec![1.0; 3]).unwrap();
        let f = distributed_field(&state, &problem, &b, &p).unwrap();
        for (i, l) in [2.0, 3.0, 4.0].iter().enumerate() {
            assert!((f.dz[i] - p.nu2 * (l - 1.0)).abs() < 1e-12);
        }
        let single = DispatchProblem::new(fleet3(), 9.0).unwrap();
        assert!(distributed_field(&state, &single, &b, &p).is_err());
    }

    fn random_state(rng: &mut ChaCha8Rng, n: usize) -> SimState {
        let p = (0..n).map(|_| rng.gen_range(-5.0..15.0)).collect();
        let z = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let mean = v.iter().sum::<f64>() / n as f64;
        v.iter_mut().for_each(|x| *x -= mean);
        SimState::new((1..=n).collect(), p, z, v).unwrap()
    }

    #[test]
    fn aggregate_closure_and_conservation() {
        let g = reference_graph(ReferenceGraph::G);
        let b = g.laplacian();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fleet = GeneratorFleet::sample_ieee118_ranges(&mut rng, 54, 58.0);
        let problem = DispatchProblem::new(fleet.clone(), 4600.0).unwrap();
        let p = AlgorithmParams::ieee118();
        for _ in 0..200 {
            let mut state = random_state(&mut rng, 54);
            state.p.iter_mut().for_each(|x| *x *= 10.0);
            let f = distributed_field(&state, &problem, &b, &p).unwrap();
            let scale = 1.0
                + state
                    .p
                    .iter()
                    .chain(&state.z)
                    .map(|x| x.abs())
                    .fold(0.0, f64::max);
            let d_total_p = compensated_sum(&f.dp);
            assert!((d_total_p - p.nu1 * state.total_z()).abs() < 1e-12 * scale * 1e3);
            let d_total_z = compensated_sum(&f.dz);
            let expected = -p.alpha * state.total_z()
                - p.nu1 * p.nu2 * (state.total_p() - problem.load()) / p.nu1;
            assert!(
                (d_total_z - expected).abs() < 1e-12 * scale * 1e3,
                "{d_total_z} vs {expected}"
            );
            assert!(compensated_sum(&f.dv).abs() < 1e-12 * scale * 1e3);
        }
    }

    #[test]
    fn centralized_v1_contraction() {
        let g = reference_graph(ReferenceGraph::G);
        let b = g.laplacian();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fleet = GeneratorFleet::sample_ieee118_ranges(&mut rng, 54, 58.0);
        let problem = DispatchProblem::new(fleet, 4600.0).unwrap();
        let p = AlgorithmParams::ieee118();
        for _ in 0..1000 {
            let alloc: Vec<f64> = (0..54).map(|_| rng.gen_range(-50.0..350.0)).collect();
            let f = centralized_field(&alloc, &problem, &b, &p).unwrap();
            let gap = problem.load() - alloc.iter().sum::<f64>();
            let v1 = 0.5 * gap * gap;
            // ∇V1 = -(P_l - 1'P) 1.
            let lie = -gap * f.iter().sum::<f64>();
            assert!(
                (lie + 2.0 * v1).abs() <= 1e-9 * (2.0 * v1).max(1.0),
                "{lie} vs {}",
                -2.0 * v1
            );
        }
    }

    #[test]
    fn mismatch_model_values() {
        let m = mismatch_model(&AlgorithmParams::ieee118());
        let expected = Matrix2::new(102.99, 10.0, 10.0, 2.3) / 26.0;
        assert!((m.r - expected).abs().max() < 1e-12);
        assert!(m.lyapunov_residual() < 1e-12);
        // Closed-form 2×2 eigenvalues.
        let (p, q, s) = (expected[(0, 0)], expected[(1, 1)], expected[(0, 1)]);
        let mid = 0.5 * (p + q);
        let rad = (0.25 * (p - q).powi(2) + s * s).sqrt();
        assert!((m.lambda_max_r - (mid + rad)).abs() < 1e-12);
        assert!((m.lambda_min_r - (mid - rad)).abs() < 1e-12);
        assert!((m.c1 - ((mid + rad) / (mid - rad)).sqrt()).abs() < 1e-10);
        assert!((m.c2 - 1.0 / (2.0 * (mid + rad))).abs() < 1e-12);

        let unit = AlgorithmParams {
            alpha: 1.0,
            nu1: 1.0,
            nu2: 1.0,
            ..AlgorithmParams::ieee118()
        };
        let m = mismatch_model(&unit);
        assert!((m.r - Matrix2::new(1.5, 0.5, 0.5, 1.0)).abs().max() < 1e-15);
        assert!(m.lyapunov_residual() < 1e-15);
    }

    proptest! {
        #[test]
        fn lyapunov_identity_for_random_gains(alpha in 1e-2..1e2f64, nu1 in 1e-2..1e2f64, nu2 in 1e-2..1e2f64) {
            let p = AlgorithmParams { alpha, nu1, nu2, ..AlgorithmParams::ieee118() };
            let m = mismatch_model(&p);
            prop_assert!(m.lambda_min_r > 0.0);
            let scale = m.r.abs().max().max(1.0) * (alpha + nu1 * nu2 + 1.0);
            prop_assert!(m.lyapunov_residual() <= 1e-12 * scale);
        }
    }

    #[test]
    fn parameter_condition_cases() {
        let b = reference_graph(ReferenceGraph::G).laplacian();
        let reference = AlgorithmParams::ieee118();
        let r = check_param_condition(&b, &reference).unwrap();
        assert!(r.ok, "{r:?}");
        let weak = AlgorithmParams {
            beta: 1e-3,
            ..reference.clone()
        };
        let r = check_param_condition(&b, &weak).unwrap();
        assert!(!r.ok && r.lhs > 1.0);

        let two = WeightedDigraph::new(2, [(1, 2, 0.1), (2, 1, 0.1)]).unwrap();
        let r = check_param_condition(&two.laplacian(), &reference).unwrap();
        let lhs = 1.0 / (40.0 * 1.3 * 0.4) + 1.69 * 0.04 / 20.0;
        assert!((r.lhs - lhs).abs() < 1e-12 && (r.rhs - 0.4).abs() < 1e-12 && r.ok);

        let single = WeightedDigraph::new(1, []).unwrap().laplacian();
        assert!(check_param_condition(&single, &reference).is_err());
    }

    #[test]
    fn distributed_condition_cases() {
        let reference = AlgorithmParams::ieee118();
        let r = check_param_condition_distributed(
            &GraphBounds {
                n_max: 54,
                d_max_out: 0.9,
                a_min: 0.1,
            },
            &reference,
        );
        assert!((r.rhs - 1.3717e-4).abs() < 1e-8);
        assert!(!r.ok);
        let easy = AlgorithmParams {
            alpha: 1e3,
            beta: 1e3,
            nu1: 1e-2,
            nu2: 1e-2,
            ..reference
        };
        let r = check_param_condition_distributed(
            &GraphBounds {
                n_max: 2,
                d_max_out: 1.0,
                a_min: 1.0,
            },
            &easy,
        );
        assert!(r.ok, "{r:?}");
    }

    #[test]
    fn robustness_bounds() {
        let p = AlgorithmParams::ieee118();
        assert_eq!(ultimate_bound(&p, 0.0, 0.0), 0.0);
        let m = mismatch_model(&p);
        let ub = ultimate_bound(&p, 5.0, 0.25);
        assert!((ub - m.c1 / m.c2 * (10.0 * 5.0 + 0.25)).abs() < 1e-9);

        let rho = m.c1 * (3.0 + p.nu1 * 2.0);
        assert_eq!(t_rho(&p, 3.0, 2.0, rho).unwrap(), 0.0);
        let t1 = t_rho(&p, 30.0, 2.0, 1.0).unwrap();
        let t2 = t_rho(&p, 30.0, 2.0, 0.5).unwrap();
        assert!((t2 - t1 - 2f64.ln() / m.c2).abs() < 1e-9);
        assert_eq!(t_rho(&p, 0.0, 0.0, 1.0).unwrap(), 0.0);
        assert!(t_rho(&p, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn tuned_gains_pass_condition() {
        let b = ring(5, 1.0).laplacian();
        let p = AlgorithmParams::tuned_for(&b, 0.01, 1, 1e-3).unwrap();
        let r = check_param_condition(&b, &p).unwrap();
        assert!(r.ok && r.lhs <= 0.5 * r.rhs + 1e-12);
        assert!(1e-3 * (p.alpha + p.beta * b.lambda_max_ltl.sqrt()) <= 1.0);
    }
}
