//! Centralized dispatch oracle: lambda iteration and a KKT certifier.
//!
//! Nothing here touches the network dynamics. The oracle is the ground
//! truth trajectories are measured against.

use serde::{Deserialize, Serialize};

use crate::costs::{cost_value, ConvexCost, GeneratorFleet, PenaltyCost};
use crate::error::{Error, Result};

const MAX_BISECTIONS: usize = 200;

/// Fleet plus load. With per-bus loads the total is their sum.
#[derive(Clone, Debug, PartialEq)]
pub struct DispatchProblem {
    pub fleet: GeneratorFleet,
    load: f64,
    bus_loads: Option<Vec<f64>>,
}

impl DispatchProblem {
    /// Requires `Σ pmin < load < Σ pmax`.
    pub fn new(fleet: GeneratorFleet, load: f64) -> Result<Self> {
        let (lo, hi) = fleet.capacity_range();
        if !(load.is_finite() && lo < load && load < hi) {
            return Err(Error::InfeasibleLoad {
                load,
                min: lo,
                max: hi,
            });
        }
        Ok(DispatchProblem {
            fleet,
            load,
            bus_loads: None,
        })
    }

    pub fn with_bus_loads(fleet: GeneratorFleet, bus_loads: Vec<f64>) -> Result<Self> {
        if bus_loads.len() != fleet.n() {
            return Err(Error::DimensionMismatch {
                expected: fleet.n(),
                got: bus_loads.len(),
            });
        }
        let total = bus_loads.iter().sum();
        let mut p = Self::new(fleet, total)?;
        p.bus_loads = Some(bus_loads);
        Ok(p)
    }

    pub fn load(&self) -> f64 {
        self.load
    }

    pub fn bus_loads(&self) -> Option<&[f64]> {
        self.bus_loads.as_deref()
    }

    pub fn n(&self) -> usize {
        self.fleet.n()
    }

    /// `1e-9 · max(1, P_l)`.
    pub fn default_tol(&self) -> f64 {
        1e-9 * self.load.abs().max(1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispatchSolution {
    #[serde(rename = "P_star")]
    pub p_star: Vec<f64>,
    pub mu: f64,
    pub cost: f64,
}

/// Clamped response of every unit to the price `mu`. Linear units sitting
/// exactly at their price are parked at `pmin`.
fn response(fleet: &GeneratorFleet, mu: f64) -> Vec<f64> {
    fleet
        .units()
        .iter()
        .map(|u| {
            if u.c > 0.0 {
                ((mu - u.b) / (2.0 * u.c)).clamp(u.pmin, u.pmax)
            } else if mu > u.b {
                u.pmax
            } else {
                u.pmin
            }
        })
        .collect()
}

/// Bisection on the marginal price `μ` until the clamped responses meet
/// the load within `tol`.
///
/// Linear units (`c = 0`) make the total response jump at `μ = b_i`. When
/// the bisection pins `μ` on such a jump, the units whose price lies in the
/// final bracket share the remaining load in proportion to their box widths.
pub fn solve_lambda_iteration(p: &DispatchProblem, tol: f64) -> Result<DispatchSolution> {
    let fleet = &p.fleet;
    let load = p.load;
    let units = fleet.units();
    let mut lo = units
        .iter()
        .map(|u| u.gradient(u.pmin))
        .fold(f64::INFINITY, f64::min)
        - 1.0;
    let mut hi = units
        .iter()
        .map(|u| u.gradient(u.pmax))
        .fold(f64::NEG_INFINITY, f64::max)
        + 1.0;

    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    while iterations < MAX_BISECTIONS {
        iterations += 1;
        let mid = 0.5 * (lo + hi);
        let alloc = response(fleet, mid);
        let total: f64 = alloc.iter().sum();
        residual = total - load;
        if residual.abs() <= tol {
            return finish(fleet, alloc, mid);
        }
        if mid <= lo || mid >= hi {
            break;
        }
        if residual < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }

    // Flat tie: share the residual among linear units priced in the bracket.
    let tied: Vec<usize> = units
        .iter()
        .enumerate()
        .filter(|(_, u)| u.c == 0.0 && lo <= u.b && u.b <= hi)
        .map(|(i, _)| i)
        .collect();
    if tied.is_empty() {
        return Err(Error::NoConvergence {
            iterations,
            residual,
        });
    }
    let mu = units[tied[0]].b;
    let mut alloc = response(fleet, mu);
    for &i in &tied {
        alloc[i] = units[i].pmin;
    }
    let remaining = load - alloc.iter().sum::<f64>();
    let width: f64 = tied.iter().map(|&i| units[i].pmax - units[i].pmin).sum();
    if remaining < -tol || remaining > width + tol {
        return Err(Error::NoConvergence {
            iterations,
            residual,
        });
    }
    for &i in &tied {
        let share = if width > 0.0 {
            (units[i].pmax - units[i].pmin) / width
        } else {
            1.0 / tied.len() as f64
        };
        alloc[i] = (units[i].pmin + remaining * share).clamp(units[i].pmin, units[i].pmax);
    }
    let total: f64 = alloc.iter().sum();
    if (total - load).abs() > tol {
        return Err(Error::NoConvergence {
            iterations,
            residual: total - load,
        });
    }
    finish(fleet, alloc, mu)
}

fn finish(fleet: &GeneratorFleet, p_star: Vec<f64>, mu: f64) -> Result<DispatchSolution> {
    let cost = cost_value(fleet, &p_star)?;
    Ok(DispatchSolution { p_star, mu, cost })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum KktViolation {
    /// `1^T P - P_l` exceeds the tolerance.
    Mismatch(f64),
    /// No common price: unit `high` needs at least `lo`, unit `low` admits at
    /// most `hi < lo`.
    PriceGap {
        high: usize,
        low: usize,
        lo: f64,
        hi: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KktReport {
    pub ok: bool,
    pub mu_witness: Option<f64>,
    pub mismatch: f64,
    /// `max_i lo_i` and `min_i hi_i` of the widened intervals.
    pub price_lo: f64,
    pub price_hi: f64,
    pub violations: Vec<KktViolation>,
}

/// Certifies `P` as a solution of the penalized problem: the load balances
/// within `tol` and some price `μ` lies in every unit's generalized gradient.
///
/// `tol` is in MW throughout. Each unit's interval is widened to the union of
/// the generalized gradients over `[P_i - tol, P_i + tol]`, so an allocation
/// that sits within `tol` of a box corner may use the corner's full interval.
pub fn kkt_check(p: &DispatchProblem, alloc: &[f64], epsilon: f64, tol: f64) -> Result<KktReport> {
    let pc = PenaltyCost::new(p.fleet.clone(), epsilon)?;
    if alloc.len() != p.n() {
        return Err(Error::DimensionMismatch {
            expected: p.n(),
            got: alloc.len(),
        });
    }
    let mismatch = alloc.iter().sum::<f64>() - p.load;
    let mut violations = Vec::new();
    if mismatch.abs() > tol {
        violations.push(KktViolation::Mismatch(mismatch));
    }

    let (mut price_lo, mut high) = (f64::NEG_INFINITY, 0);
    let (mut price_hi, mut low) = (f64::INFINITY, 0);
    for (i, &x) in alloc.iter().enumerate() {
        let lo = pc.unit_interval(i, x - tol).lo;
        let hi = pc.unit_interval(i, x + tol).hi;
        if lo > price_lo {
            price_lo = lo;
            high = i;
        }
        if hi < price_hi {
            price_hi = hi;
            low = i;
        }
    }
    let mu_witness = (price_lo <= price_hi).then_some(0.5 * (price_lo + price_hi));
    if mu_witness.is_none() {
        violations.push(KktViolation::PriceGap {
            high,
            low,
            lo: price_lo,
            hi: price_hi,
        });
    }
    Ok(KktReport {
        ok: violations.is_empty(),
        mu_witness,
        mismatch,
        price_lo,
        price_hi,
        violations,
    })
}

/// Euclidean distance from `alloc` to the solution set.
///
/// Strictly convex fleets have a unique optimizer. Otherwise linear units
/// priced exactly at `μ` may be anywhere in their boxes as long as their
/// total is fixed, and the distance is computed by projecting onto that
/// box-and-hyperplane slice.
pub fn distance_to_solution_set(p: &DispatchProblem, alloc: &[f64]) -> Result<f64> {
    if alloc.len() != p.n() {
        return Err(Error::DimensionMismatch {
            expected: p.n(),
            got: alloc.len(),
        });
    }
    let sol = solve_lambda_iteration(p, p.default_tol())?;
    let units = p.fleet.units();
    let price_tol = 1e-9 * sol.mu.abs().max(1.0);
    let tied: Vec<usize> = (0..p.n())
        .filter(|&i| units[i].c == 0.0 && (units[i].b - sol.mu).abs() <= price_tol)
        .collect();

    let mut sq = 0.0;
    for i in (0..p.n()).filter(|i| !tied.contains(i)) {
        sq += (alloc[i] - sol.p_star[i]).powi(2);
    }
    if !tied.is_empty() {
        let target: f64 = tied.iter().map(|&i| sol.p_star[i]).sum();
        let pts: Vec<(f64, f64, f64)> = tied
            .iter()
            .map(|&i| (alloc[i], units[i].pmin, units[i].pmax))
            .collect();
        let proj = project_box_hyperplane(&pts, target);
        sq += pts
            .iter()
            .zip(&proj)
            .map(|(&(x, _, _), &y)| (x - y).powi(2))
            .sum::<f64>();
    }
    Ok(sq.sqrt())
}

/// Projection of `x` onto `{y : lo <= y <= hi, Σ y = target}`; the
/// projection is `clamp(x - τ)` for the shift `τ` matching the total.
fn project_box_hyperplane(pts: &[(f64, f64, f64)], target: f64) -> Vec<f64> {
    let shifted = |tau: f64| -> Vec<f64> {
        pts.iter()
            .map(|&(x, lo, hi)| (x - tau).clamp(lo, hi))
            .collect()
    };
    let mut a = pts
        .iter()
        .map(|&(x, _, hi)| x - hi)
        .fold(f64::INFINITY, f64::min);
    let mut b = pts
        .iter()
        .map(|&(x, lo, _)| x - lo)
        .fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        if shifted(mid).iter().sum::<f64>() > target {
            a = mid;
        } else {
            b = mid;
        }
    }
    shifted(0.5 * (a + b))
}
