//! Generator cost models and the exact-penalty reformulation of the box
//! constraints.
//!
//! The penalized local cost is
//! `f_i^ε(P_i) = f_i(P_i) + (1/ε)([P_i - P_i^M]^+ + [P_i^m - P_i]^+)`,
//! convex and differentiable except at the two box corners, where its
//! generalized gradient is an interval.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A convex, continuously differentiable scalar cost.
pub trait ConvexCost {
    fn value(&self, p: f64) -> f64;
    fn gradient(&self, p: f64) -> f64;
}

/// Unit with cost `a + b P + c P^2` and box `[pmin, pmax]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorUnit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub pmin: f64,
    pub pmax: f64,
}

impl GeneratorUnit {
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.pmin + self.pmax)
    }
}

impl ConvexCost for GeneratorUnit {
    fn value(&self, p: f64) -> f64 {
        self.a + self.b * p + self.c * p * p
    }

    fn gradient(&self, p: f64) -> f64 {
        self.b + 2.0 * self.c * p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<GeneratorUnit>", into = "Vec<GeneratorUnit>")]
pub struct GeneratorFleet {
    units: Vec<GeneratorUnit>,
}

impl TryFrom<Vec<GeneratorUnit>> for GeneratorFleet {
    type Error = Error;

    fn try_from(units: Vec<GeneratorUnit>) -> Result<Self> {
        GeneratorFleet::new(units)
    }
}

impl From<GeneratorFleet> for Vec<GeneratorUnit> {
    fn from(f: GeneratorFleet) -> Self {
        f.units
    }
}

impl GeneratorFleet {
    pub fn new(units: Vec<GeneratorUnit>) -> Result<Self> {
        for (index, u) in units.iter().enumerate() {
            let bad = |reason: &str| Error::InvalidGenerator {
                index,
                reason: reason.to_string(),
            };
            if ![u.a, u.b, u.c, u.pmin, u.pmax]
                .iter()
                .all(|x| x.is_finite())
            {
                return Err(bad("non-finite coefficient"));
            }
            if u.c < 0.0 {
                return Err(bad("quadratic coefficient must be non-negative"));
            }
            if u.pmin > u.pmax {
                return Err(bad("pmin exceeds pmax"));
            }
        }
        Ok(GeneratorFleet { units })
    }

    pub fn units(&self) -> &[GeneratorUnit] {
        &self.units
    }

    pub fn n(&self) -> usize {
        self.units.len()
    }

    /// Sub-fleet with the given 0-based positions, in that order.
    pub fn select(&self, positions: &[usize]) -> GeneratorFleet {
        GeneratorFleet {
            units: positions.iter().map(|&i| self.units[i]).collect(),
        }
    }

    pub fn capacity_range(&self) -> (f64, f64) {
        self.units
            .iter()
            .fold((0.0, 0.0), |(lo, hi), u| (lo + u.pmin, hi + u.pmax))
    }

    pub fn is_strictly_convex(&self) -> bool {
        self.units.iter().all(|u| u.c > 0.0)
    }

    pub fn midpoints(&self) -> Vec<f64> {
        self.units.iter().map(GeneratorUnit::midpoint).collect()
    }

    pub fn gradient(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.check_len(p)?;
        Ok(self
            .units
            .iter()
            .zip(p)
            .map(|(u, &x)| u.gradient(x))
            .collect())
    }

    fn check_len(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                got: p.len(),
            });
        }
        Ok(())
    }

    /// Coefficients drawn uniformly from the ranges of the IEEE 118-bus
    /// study (`a ∈ [6.78, 74.33]`, `b ∈ [8.3391, 37.6968]`,
    /// `c ∈ [0.0024, 0.0697]`). Those ranges say nothing about unit limits,
    /// so the boxes are synthetic: `pmin ∈ [5, 30]` and `pmax` drawn from
    /// `[100, 300]`, capped so that the marginal cost at `pmax` stays below
    /// `max_marginal`.
    pub fn sample_ieee118_ranges<R: Rng>(
        rng: &mut R,
        n: usize,
        max_marginal: f64,
    ) -> GeneratorFleet {
        let units = (0..n)
            .map(|_| {
                let a = rng.gen_range(6.78..=74.33);
                let b = rng.gen_range(8.3391..=37.6968);
                let c = rng.gen_range(0.0024..=0.0697);
                let pmin = round2(rng.gen_range(5.0..=30.0));
                let cap = (max_marginal - b) / (2.0 * c);
                let pmax = round2(rng.gen_range(100.0..=300.0_f64).min(cap));
                GeneratorUnit {
                    a: round4(a),
                    b: round4(b),
                    c: round4(c),
                    pmin,
                    pmax,
                }
            })
            .collect();
        GeneratorFleet { units }
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).floor() / 100.0
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

/// `Σ a_i + b_i P_i + c_i P_i^2`.
pub fn cost_value(fleet: &GeneratorFleet, p: &[f64]) -> Result<f64> {
    fleet.check_len(p)?;
    Ok(fleet.units.iter().zip(p).map(|(u, &x)| u.value(x)).sum())
}

/// Fleet together with its penalty weight `ε` (the penalty is `1/ε` per MW
/// of box violation).
#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyCost {
    pub fleet: GeneratorFleet,
    epsilon: f64,
}

/// Closed interval `[lo, hi]` of generalized gradients of one unit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradInterval {
    pub lo: f64,
    pub hi: f64,
}

impl GradInterval {
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

impl PenaltyCost {
    pub fn new(fleet: GeneratorFleet, epsilon: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::InvalidEpsilon(epsilon));
        }
        Ok(PenaltyCost { fleet, epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn n(&self) -> usize {
        self.fleet.n()
    }

    pub fn value(&self, p: &[f64]) -> Result<f64> {
        let base = cost_value(&self.fleet, p)?;
        let violation: f64 = self
            .fleet
            .units
            .iter()
            .zip(p)
            .map(|(u, &x)| (x - u.pmax).max(0.0) + (u.pmin - x).max(0.0))
            .sum();
        Ok(base + violation / self.epsilon)
    }

    /// Single-valued selection of the generalized gradient. On a box corner
    /// it returns the plain cost gradient, the endpoint of the interval that
    /// faces the inside of the box.
    pub fn selection_into(&self, p: &[f64], out: &mut [f64]) {
        let jump = 1.0 / self.epsilon;
        for ((u, &x), o) in self.fleet.units.iter().zip(p).zip(out.iter_mut()) {
            let g = u.gradient(x);
            *o = if x < u.pmin {
                g - jump
            } else if x > u.pmax {
                g + jump
            } else {
                g
            };
        }
    }

    pub fn selection(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.fleet.check_len(p)?;
        let mut out = vec![0.0; p.len()];
        self.selection_into(p, &mut out);
        Ok(out)
    }

    /// Generalized gradient of one unit at `x`.
    pub fn unit_interval(&self, i: usize, x: f64) -> GradInterval {
        let u = &self.fleet.units[i];
        let g = u.gradient(x);
        let jump = 1.0 / self.epsilon;
        if x < u.pmin {
            GradInterval {
                lo: g - jump,
                hi: g - jump,
            }
        } else if x > u.pmax {
            GradInterval {
                lo: g + jump,
                hi: g + jump,
            }
        } else {
            GradInterval {
                lo: if x == u.pmin { g - jump } else { g },
                hi: if x == u.pmax { g + jump } else { g },
            }
        }
    }

    pub fn interval(&self, p: &[f64]) -> Result<Vec<GradInterval>> {
        self.fleet.check_len(p)?;
        Ok(p.iter()
            .enumerate()
            .map(|(i, &x)| self.unit_interval(i, x))
            .collect())
    }
}

/// Free-function form of [`PenaltyCost::value`].
pub fn penalty_value(pc: &PenaltyCost, p: &[f64]) -> Result<f64> {
    pc.value(p)
}

pub fn penalty_subgradient_selection(pc: &PenaltyCost, p: &[f64]) -> Result<Vec<f64>> {
    pc.selection(p)
}

pub fn penalty_subgradient_interval(pc: &PenaltyCost, p: &[f64]) -> Result<Vec<GradInterval>> {
    pc.interval(p)
}

/// Largest admissible penalty weight, `1 / (2 max_{P ∈ box} ‖∇f(P)‖_∞)`.
///
/// The maximum is taken over the whole box rather than the feasible slice of
/// it, which can only make the returned value smaller. Returns `+inf` when
/// every gradient vanishes on the box.
pub fn epsilon_bound(fleet: &GeneratorFleet, load: f64) -> Result<f64> {
    let (lo, hi) = fleet.capacity_range();
    if !(lo < load && load < hi) {
        return Err(Error::InfeasibleLoad {
            load,
            min: lo,
            max: hi,
        });
    }
    let max_grad = fleet
        .units
        .iter()
        .map(|u| u.gradient(u.pmin).abs().max(u.gradient(u.pmax).abs()))
        .fold(0.0, f64::max);
    Ok(if max_grad == 0.0 {
        f64::INFINITY
    } else {
        1.0 / (2.0 * max_grad)
    })
}
