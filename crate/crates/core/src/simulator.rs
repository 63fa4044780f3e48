//! Fixed-step integration of the dispatch dynamics under time-varying loads
//! and generator join/leave events.
//!
//! Units are identified by 1-based labels into a *universe* fleet; the
//! active set is always the vertex set of the current communication graph.
//! The step grid is split at every event time and every load breakpoint, so
//! events act between two full RK4 steps and the load seen inside a step is
//! always the one of its segment.

use std::f64::consts::PI;
use std::sync::Arc;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::costs::{cost_value, GeneratorFleet, PenaltyCost};
use crate::dynamics::{
    centralized_rhs, check_param_condition, compensated_sum, distributed_rhs, AlgorithmParams,
    ConditionReport, Drive, LoadMode, MismatchModel, SimState,
};
use crate::error::{Error, Result};
use crate::graph::{LaplacianBundle, WeightedDigraph};

/// `|1'v|` above this aborts a run.
pub const V_DRIFT_LIMIT: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadStep {
    pub t: f64,
    pub value: f64,
}

/// One windowed, exponentially damped sinusoid:
/// `amp e^{-decay s} sin(omega s) sin⁴(π s / duration)` for
/// `s = t - start ∈ [0, duration]`, zero elsewhere. The window makes the
/// burst three times continuously differentiable at both ends.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Burst {
    pub start: f64,
    pub duration: f64,
    pub amp: f64,
    pub omega: f64,
    #[serde(default)]
    pub decay: f64,
}

impl Burst {
    fn eval(&self, t: f64) -> [f64; 3] {
        let s = t - self.start;
        if !(s > 0.0 && s < self.duration) {
            return [0.0; 3];
        }
        let k = PI / self.duration;
        let e = (-self.decay * s).exp();
        let (e1, e2) = (-self.decay * e, self.decay * self.decay * e);
        let (sn, cs) = (self.omega * s).sin_cos();
        let (g, g1, g2) = (sn, self.omega * cs, -self.omega * self.omega * sn);
        let (ws, wc) = (k * s).sin_cos();
        let sq = ws * ws;
        let (w, w1, w2) = (
            sq * sq,
            4.0 * k * sq * ws * wc,
            4.0 * k * k * sq * (3.0 * wc * wc - sq),
        );
        let f = e * g * w;
        let f1 = e1 * g * w + e * g1 * w + e * g * w1;
        let f2 =
            e2 * g * w + e * g2 * w + e * g * w2 + 2.0 * (e1 * g1 * w + e1 * g * w1 + e * g1 * w1);
        [self.amp * f, self.amp * f1, self.amp * f2]
    }

    /// Sup-norm bounds on the first and second derivative.
    fn derivative_bounds(&self) -> (f64, f64) {
        // |w'| <= (3√3/4) k and |w''| <= 4k² for the sin⁴ window.
        let k = PI / self.duration;
        let s = self.decay + self.omega.abs() + 1.3 * k;
        let a = self.amp.abs();
        (a * s, a * (s * s + 4.0 * k * k))
    }

    fn overlaps(&self, a: f64, b: f64) -> bool {
        self.amp != 0.0 && self.omega != 0.0 && self.start < b && a < self.start + self.duration
    }
}

/// Total load as a function of time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LoadSignal {
    Constant {
        value: f64,
    },
    /// Right-continuous steps: `value` holds from `t` on.
    PiecewiseConstant {
        initial: f64,
        steps: Vec<LoadStep>,
    },
    /// `base + amp sin(omega t)`.
    Sinusoid {
        base: f64,
        amp: f64,
        omega: f64,
    },
    /// `base` plus a sum of [`Burst`]s.
    DecayingBursts {
        base: f64,
        bursts: Vec<Burst>,
    },
    /// Linear interpolation through `(t, value)` samples, held constant
    /// outside their range.
    Table {
        samples: Vec<[f64; 2]>,
    },
}

/// `(P_l, dP_l/dt, d²P_l/dt²)` at one instant; derivatives of piecewise
/// signals are the one-sided values inside the current piece.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadSample {
    pub value: f64,
    pub rate: f64,
    pub accel: f64,
}

impl LoadSignal {
    pub fn constant(value: f64) -> Self {
        LoadSignal::Constant { value }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("load signal: {msg}")));
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        match self {
            LoadSignal::Constant { value } => {
                if !value.is_finite() {
                    return bad(format!("non-finite value {value}"));
                }
            }
            LoadSignal::PiecewiseConstant { initial, steps } => {
                if !initial.is_finite() || !steps.iter().all(|s| finite(&[s.t, s.value])) {
                    return bad("non-finite step".into());
                }
                if !steps.windows(2).all(|w| w[0].t < w[1].t) {
                    return bad("step times must be strictly increasing".into());
                }
            }
            LoadSignal::Sinusoid { base, amp, omega } => {
                if !finite(&[*base, *amp, *omega]) {
                    return bad("non-finite sinusoid parameter".into());
                }
            }
            LoadSignal::DecayingBursts { base, bursts } => {
                if !base.is_finite() {
                    return bad("non-finite base".into());
                }
                for b in bursts {
                    if !finite(&[b.start, b.duration, b.amp, b.omega, b.decay]) {
                        return bad("non-finite burst parameter".into());
                    }
                    if !(b.duration > 0.0) || b.decay < 0.0 {
                        return bad("bursts need duration > 0 and decay >= 0".into());
                    }
                }
            }
            LoadSignal::Table { samples } => {
                if samples.is_empty() {
                    return bad("table needs at least one sample".into());
                }
                if !samples.iter().all(|s| finite(s)) {
                    return bad("non-finite sample".into());
                }
                if !samples.windows(2).all(|w| w[0][0] < w[1][0]) {
                    return bad("sample times must be strictly increasing".into());
                }
            }
        }
        Ok(())
    }

    pub fn value(&self, t: f64) -> f64 {
        self.sample(t).value
    }

    pub fn sample(&self, t: f64) -> LoadSample {
        let flat = |value| LoadSample {
            value,
            rate: 0.0,
            accel: 0.0,
        };
        match self {
            LoadSignal::Constant { value } => flat(*value),
            LoadSignal::PiecewiseConstant { initial, steps } => {
                let k = steps.partition_point(|s| s.t <= t);
                flat(if k == 0 { *initial } else { steps[k - 1].value })
            }
            LoadSignal::Sinusoid { base, amp, omega } => {
                let (s, c) = (omega * t).sin_cos();
                LoadSample {
                    value: base + amp * s,
                    rate: amp * omega * c,
                    accel: -amp * omega * omega * s,
                }
            }
            LoadSignal::DecayingBursts { base, bursts } => {
                let mut acc = [*base, 0.0, 0.0];
                for b in bursts {
                    let f = b.eval(t);
                    for (a, x) in acc.iter_mut().zip(f) {
                        *a += x;
                    }
                }
                LoadSample {
                    value: acc[0],
                    rate: acc[1],
                    accel: acc[2],
                }
            }
            LoadSignal::Table { samples } => {
                let k = samples.partition_point(|s| s[0] <= t);
                if k == 0 {
                    flat(samples[0][1])
                } else if k == samples.len() {
                    flat(samples[k - 1][1])
                } else {
                    let ([t0, y0], [t1, y1]) = (samples[k - 1], samples[k]);
                    let slope = (y1 - y0) / (t1 - t0);
                    LoadSample {
                        value: y0 + slope * (t - t0),
                        rate: slope,
                        accel: 0.0,
                    }
                }
            }
        }
    }

    /// Left limit `lim_{s↑t} P_l(s)`.
    pub fn value_before(&self, t: f64) -> f64 {
        match self {
            LoadSignal::PiecewiseConstant { initial, steps } => {
                let k = steps.partition_point(|s| s.t < t);
                if k == 0 {
                    *initial
                } else {
                    steps[k - 1].value
                }
            }
            _ => self.value(t),
        }
    }

    /// Times where the signal or its slope jumps, and burst edges.
    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            LoadSignal::PiecewiseConstant { steps, .. } => steps.iter().map(|s| s.t).collect(),
            LoadSignal::Table { samples } => samples.iter().map(|s| s[0]).collect(),
            LoadSignal::DecayingBursts { bursts, .. } => {
                let mut ts: Vec<f64> = bursts
                    .iter()
                    .flat_map(|b| [b.start, b.start + b.duration])
                    .collect();
                ts.sort_by(f64::total_cmp);
                ts.dedup();
                ts
            }
            _ => Vec::new(),
        }
    }

    /// `(d1, d2)` with `|dP_l/dt| <= d1` and `|d²P_l/dt²| <= d2` for all
    /// `t`, when the signal is twice differentiable.
    pub fn derivative_bounds(&self) -> Option<(f64, f64)> {
        match self {
            LoadSignal::Constant { .. } => Some((0.0, 0.0)),
            LoadSignal::PiecewiseConstant { steps, .. } => steps.is_empty().then_some((0.0, 0.0)),
            LoadSignal::Sinusoid { amp, omega, .. } => {
                Some((amp.abs() * omega.abs(), amp.abs() * omega * omega))
            }
            LoadSignal::DecayingBursts { bursts, .. } => {
                Some(bursts.iter().fold((0.0, 0.0), |(a, b), burst| {
                    let (d1, d2) = burst.derivative_bounds();
                    (a + d1, b + d2)
                }))
            }
            LoadSignal::Table { samples } => {
                let flat = samples.windows(2).all(|w| w[0][1] == w[1][1]);
                flat.then_some((0.0, 0.0))
            }
        }
    }

    /// Whether `P_l` is constant on the open interval `(a, b)`.
    pub fn is_constant_on(&self, a: f64, b: f64) -> bool {
        match self {
            LoadSignal::Constant { .. } => true,
            LoadSignal::PiecewiseConstant { steps, .. } => {
                !steps.iter().any(|s| a < s.t && s.t < b)
            }
            LoadSignal::Sinusoid { amp, omega, .. } => *amp == 0.0 || *omega == 0.0,
            LoadSignal::DecayingBursts { bursts, .. } => !bursts.iter().any(|x| x.overlaps(a, b)),
            LoadSignal::Table { .. } => {
                let v = self.value(a);
                let inner = self.breakpoints().into_iter().filter(|&t| a < t && t < b);
                inner.chain([b]).all(|t| self.value_before(t) == v)
            }
        }
    }
}

/// Where an added unit's edges come from.
#[derive(Clone, Debug, PartialEq)]
pub enum EdgeSource {
    Explicit(Vec<(usize, usize, f64)>),
    /// The edges of this graph between the unit and the vertices present
    /// when it joins.
    Template(WeightedDigraph),
}

#[derive(Clone, Debug, PartialEq)]
pub enum EventKind {
    Remove {
        unit: usize,
    },
    Add {
        unit: usize,
        edges: EdgeSource,
        /// Defaults to the midpoint of the unit's box.
        p_init: Option<f64>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub t: f64,
    pub kind: EventKind,
}

impl Event {
    pub fn remove(t: f64, unit: usize) -> Self {
        Event {
            t,
            kind: EventKind::Remove { unit },
        }
    }

    pub fn add(t: f64, unit: usize, edges: EdgeSource, p_init: Option<f64>) -> Self {
        Event {
            t,
            kind: EventKind::Add {
                unit,
                edges,
                p_init,
            },
        }
    }
}

/// Time-ordered events. Events sharing a timestamp form one batch: all
/// removals first (ascending label), then all additions (ascending label).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventSchedule {
    events: Vec<Event>,
}

struct Batch<'a> {
    t: f64,
    removals: Vec<usize>,
    additions: Vec<(usize, &'a EdgeSource, Option<f64>)>,
}

impl EventSchedule {
    pub fn new(events: Vec<Event>) -> Result<Self> {
        for e in &events {
            if !(e.t.is_finite() && e.t > 0.0) {
                return Err(Error::InvalidSchedule(format!(
                    "event time {} must be positive",
                    e.t
                )));
            }
        }
        if !events.windows(2).all(|w| w[0].t <= w[1].t) {
            return Err(Error::InvalidSchedule(
                "event times must be non-decreasing".into(),
            ));
        }
        Ok(EventSchedule { events })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Distinct event times.
    pub fn times(&self) -> Vec<f64> {
        let mut ts: Vec<f64> = self.events.iter().map(|e| e.t).collect();
        ts.dedup();
        ts
    }

    fn batches(&self) -> Vec<Batch<'_>> {
        let mut out: Vec<Batch> = Vec::new();
        for e in &self.events {
            if out.last().is_none_or(|b| b.t != e.t) {
                out.push(Batch {
                    t: e.t,
                    removals: Vec::new(),
                    additions: Vec::new(),
                });
            }
            let b = out.last_mut().expect("just pushed");
            match &e.kind {
                EventKind::Remove { unit } => b.removals.push(*unit),
                EventKind::Add {
                    unit,
                    edges,
                    p_init,
                } => b.additions.push((*unit, edges, *p_init)),
            }
        }
        for b in &mut out {
            b.removals.sort_unstable();
            b.additions.sort_by_key(|a| a.0);
        }
        out
    }

    /// Applies every batch to `graph` without integrating, returning the
    /// graph after each batch.
    pub fn dry_run(
        &self,
        graph: &WeightedDigraph,
        fleet: &GeneratorFleet,
    ) -> Result<Vec<WeightedDigraph>> {
        let mut state = SimState::cold(graph.vertices().to_vec(), vec![0.0; graph.n()])?;
        let mut g = graph.clone();
        let mut out = Vec::new();
        for batch in self.batches() {
            let applied = apply_batch(&state, &g, &batch, fleet)?;
            state = applied.state;
            g = applied.graph;
            out.push(g.clone());
        }
        Ok(out)
    }
}

/// `v` moved from a leaving unit to a surviving in-neighbour.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TokenPass {
    pub from: usize,
    pub to: usize,
    pub value: f64,
}

fn check_state_matches(state: &SimState, graph: &WeightedDigraph) -> Result<()> {
    if state.active != graph.vertices() {
        return Err(Error::InvalidSchedule(
            "state and graph disagree on the active units".into(),
        ));
    }
    Ok(())
}

/// Removes `units` at once. Each leaving unit hands its `v` to its
/// lowest-label in-neighbour among the units that survive the whole batch.
pub fn remove_units(
    state: &SimState,
    graph: &WeightedDigraph,
    units: &[usize],
) -> Result<(SimState, WeightedDigraph, Vec<TokenPass>)> {
    check_state_matches(state, graph)?;
    let mut gone = units.to_vec();
    gone.sort_unstable();
    if gone.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidSchedule(
            "unit removed twice in one batch".into(),
        ));
    }
    for &u in &gone {
        if state.position(u).is_none() {
            return Err(Error::UnitNotActive(u));
        }
    }
    let mut v = state.v.clone();
    let mut passes = Vec::with_capacity(gone.len());
    for &u in &gone {
        let to = graph
            .in_neighbors(u)
            .into_iter()
            .filter(|w| gone.binary_search(w).is_err())
            .min()
            .ok_or(Error::NoSurvivingInNeighbor(u))?;
        let (iu, ito) = (
            state.position(u).expect("checked"),
            state.position(to).expect("in graph"),
        );
        let value = v[iu];
        v[ito] += value;
        v[iu] = 0.0;
        passes.push(TokenPass { from: u, to, value });
    }
    let keep: Vec<usize> = (0..state.n())
        .filter(|&i| gone.binary_search(&state.active[i]).is_err())
        .collect();
    let pick = |xs: &[f64]| keep.iter().map(|&i| xs[i]).collect::<Vec<_>>();
    let next = SimState::new(
        keep.iter().map(|&i| state.active[i]).collect(),
        pick(&state.p),
        pick(&state.z),
        pick(&v),
    )?;
    Ok((next, graph.remove_vertices(&gone)?, passes))
}

/// Removes one unit, passing its `v` to its lowest-label in-neighbour.
pub fn apply_tinv_remove(
    state: &SimState,
    graph: &WeightedDigraph,
    unit: usize,
) -> Result<(SimState, WeightedDigraph)> {
    let (s, g, _) = remove_units(state, graph, &[unit])?;
    Ok((s, g))
}

fn add_unit(
    state: &SimState,
    graph: &WeightedDigraph,
    unit: usize,
    edges: &[(usize, usize, f64)],
    p_init: f64,
) -> Result<(SimState, WeightedDigraph)> {
    check_state_matches(state, graph)?;
    if state.position(unit).is_some() {
        return Err(Error::UnitAlreadyActive(unit));
    }
    let g = graph.add_vertex(unit, edges)?;
    let at = state.active.partition_point(|&u| u < unit);
    let mut next = state.clone();
    next.active.insert(at, unit);
    next.p.insert(at, p_init);
    next.z.insert(at, 0.0);
    next.v.insert(at, 0.0);
    Ok((next, g))
}

/// Adds `unit` with `P = p_init`, `z = 0`, `v = 0`. The extended graph must
/// stay strongly connected and weight-balanced.
pub fn apply_tinv_add(
    state: &SimState,
    graph: &WeightedDigraph,
    unit: usize,
    edges: &[(usize, usize, f64)],
    p_init: f64,
) -> Result<(SimState, WeightedDigraph)> {
    let (s, g) = add_unit(state, graph, unit, edges, p_init)?;
    g.validate_balanced_connected()?;
    Ok((s, g))
}

struct Applied {
    state: SimState,
    graph: WeightedDigraph,
    passes: Vec<TokenPass>,
}

fn apply_batch(
    state: &SimState,
    graph: &WeightedDigraph,
    batch: &Batch,
    fleet: &GeneratorFleet,
) -> Result<Applied> {
    let (mut state, mut graph, passes) = if batch.removals.is_empty() {
        (state.clone(), graph.clone(), Vec::new())
    } else {
        remove_units(state, graph, &batch.removals)?
    };
    for &(unit, source, p_init) in &batch.additions {
        let u = unit
            .checked_sub(1)
            .and_then(|i| fleet.units().get(i))
            .ok_or(Error::UnknownVertex(unit))?;
        let edges = match source {
            EdgeSource::Explicit(e) => e.clone(),
            EdgeSource::Template(t) => t.edges_incident_within(unit, &graph),
        };
        (state, graph) = add_unit(
            &state,
            &graph,
            unit,
            &edges,
            p_init.unwrap_or_else(|| u.midpoint()),
        )?;
    }
    graph.validate_balanced_connected()?;
    Ok(Applied {
        state,
        graph,
        passes,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Centralized,
    #[default]
    Distributed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSettings {
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub t_end: f64,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    #[serde(default)]
    pub mode: Mode,
}

fn default_dt() -> f64 {
    1e-3
}

fn default_record_every() -> usize {
    100
}

impl SimSettings {
    pub fn new(dt: f64, t_end: f64, record_every: usize, mode: Mode) -> Self {
        SimSettings {
            dt,
            t_end,
            record_every,
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::InvalidParameter {
                name: "dt",
                reason: format!("must be positive, got {}", self.dt),
            });
        }
        if !(self.t_end.is_finite() && self.t_end > 0.0) {
            return Err(Error::InvalidParameter {
                name: "t_end",
                reason: format!("must be positive, got {}", self.t_end),
            });
        }
        if self.record_every == 0 {
            return Err(Error::InvalidParameter {
                name: "record_every",
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// Everything a run needs besides the initial state.
#[derive(Clone, Debug)]
pub struct Simulation {
    /// Every unit that may ever be active; label `k` is `fleet.units()[k-1]`.
    pub fleet: GeneratorFleet,
    pub params: AlgorithmParams,
    pub graph: WeightedDigraph,
    pub load: LoadSignal,
    pub events: EventSchedule,
    pub settings: SimSettings,
    /// Fraction of the load on each unit's bus (distributed-bus mode),
    /// indexed like `fleet`.
    pub bus_shares: Option<Vec<f64>>,
}

impl Simulation {
    /// `P` at the box midpoints, `z = v = 0`.
    pub fn midpoint_state(&self) -> Result<SimState> {
        let active = self.graph.vertices().to_vec();
        let p = active
            .iter()
            .map(|&u| self.unit(u).map(|g| g.midpoint()))
            .collect::<Result<Vec<_>>>()?;
        SimState::cold(active, p)
    }

    fn unit(&self, label: usize) -> Result<&crate::costs::GeneratorUnit> {
        label
            .checked_sub(1)
            .and_then(|i| self.fleet.units().get(i))
            .ok_or(Error::UnknownVertex(label))
    }

    /// The fleet restricted to `active`, in label order.
    pub fn active_fleet(&self, active: &[usize]) -> GeneratorFleet {
        self.fleet
            .select(&active.iter().map(|u| u - 1).collect::<Vec<_>>())
    }
}

/// One recorded sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub t: f64,
    pub segment: usize,
    pub load: f64,
    /// `1'P - P_l(t)`.
    pub mismatch: f64,
    /// Unpenalized cost of the active units.
    pub total_cost: f64,
    /// Largest box violation among active units, in MW.
    pub box_violation: f64,
    pub total_z: f64,
    pub total_v: f64,
    pub active: Arc<[usize]>,
    pub p: Vec<f64>,
    /// Empty in centralized mode.
    pub z: Vec<f64>,
    /// Empty in centralized mode.
    pub v: Vec<f64>,
}

/// Stretch of the run between two consecutive events or load breakpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentInfo {
    pub index: usize,
    pub t0: f64,
    pub t1: f64,
    pub constant_load: bool,
    pub steps: usize,
    pub h: f64,
    pub active: Arc<[usize]>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EventRecord {
    pub t: f64,
    pub removed: Vec<usize>,
    pub added: Vec<usize>,
    pub token_passes: Vec<TokenPass>,
    /// `(old, new)` when the load-informed unit left.
    pub r_reassigned: Option<(usize, usize)>,
    pub mismatch_before: f64,
    pub mismatch_after: f64,
    pub total_z_after: f64,
    pub condition: Option<ConditionReport>,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub mode: Mode,
    pub universe: usize,
    pub rows: Vec<Row>,
    pub segments: Vec<SegmentInfo>,
    pub events: Vec<EventRecord>,
    pub initial_condition: Option<ConditionReport>,
    /// Largest `|1'v|` seen after any step or event.
    pub max_abs_total_v: f64,
    pub final_state: SimState,
    pub final_graph: WeightedDigraph,
    pub final_params: AlgorithmParams,
    /// Set when a stall detector ended the run before `t_end`.
    pub stopped_at: Option<f64>,
}

impl Trajectory {
    pub fn last(&self) -> &Row {
        self.rows
            .last()
            .expect("a trajectory always holds its initial row")
    }

    pub fn segment_rows(&self, segment: usize) -> &[Row] {
        let lo = self.rows.partition_point(|r| r.segment < segment);
        let hi = self.rows.partition_point(|r| r.segment <= segment);
        &self.rows[lo..hi]
    }

    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.t).collect()
    }
}

/// Ends a run once `P` has stopped drifting. Recorded rows are averaged
/// over consecutive windows of at least `window` time units; the run has
/// stalled when the means of two consecutive windows differ by at most
/// `p_tol` in every `P_i` and the mean `|1'P - P_l|` of the latest window is
/// at most `mismatch_tol`. Averaging makes the test insensitive to the
/// step-to-step chatter of a fixed-step integrator at the box corners.
#[derive(Clone, Debug)]
pub struct StallDetector {
    pub window: f64,
    pub p_tol: f64,
    pub mismatch_tol: f64,
    current: Option<WindowMean>,
    previous: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
struct WindowMean {
    t0: f64,
    active: Arc<[usize]>,
    count: usize,
    p_sum: Vec<f64>,
    mismatch_sum: f64,
}

impl StallDetector {
    pub fn new(window: f64, p_tol: f64, mismatch_tol: f64) -> Self {
        StallDetector {
            window,
            p_tol,
            mismatch_tol,
            current: None,
            previous: None,
        }
    }

    /// Feeds one row; returns true when the run has stalled.
    pub fn observe(&mut self, row: &Row) -> bool {
        let fresh = match &self.current {
            None => true,
            Some(w) => w.active != row.active,
        };
        if fresh {
            if self
                .current
                .as_ref()
                .is_some_and(|w| w.active != row.active)
            {
                self.previous = None;
            }
            self.current = Some(WindowMean {
                t0: row.t,
                active: row.active.clone(),
                count: 0,
                p_sum: vec![0.0; row.p.len()],
                mismatch_sum: 0.0,
            });
        }
        let w = self.current.as_mut().expect("set above");
        w.count += 1;
        w.mismatch_sum += row.mismatch.abs();
        for (s, p) in w.p_sum.iter_mut().zip(&row.p) {
            *s += p;
        }
        if row.t - w.t0 < self.window {
            return false;
        }
        let k = w.count as f64;
        let mean: Vec<f64> = w.p_sum.iter().map(|s| s / k).collect();
        let mismatch = w.mismatch_sum / k;
        let stalled = self.previous.as_ref().is_some_and(|prev| {
            let drift = mean
                .iter()
                .zip(prev)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            drift <= self.p_tol && mismatch <= self.mismatch_tol
        });
        self.previous = Some(mean);
        self.current = None;
        stalled
    }
}

struct Phase {
    active: Arc<[usize]>,
    bundle: LaplacianBundle,
    penalty: PenaltyCost,
    drive: Drive,
}

struct Runner<'a> {
    sim: &'a Simulation,
    params: AlgorithmParams,
    graph: WeightedDigraph,
    state: SimState,
    shares: Vec<f64>,
    phase: Phase,
    x: Vec<f64>,
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
    /// Kahan compensation of `x`; keeps `1'v` from drifting when some `v_i`
    /// are large.
    comp: Vec<f64>,
    scratch: Vec<f64>,
    steps_taken: usize,
    max_abs_total_v: f64,
}

impl<'a> Runner<'a> {
    fn new(sim: &'a Simulation, state: SimState) -> Result<(Self, Option<ConditionReport>)> {
        let shares = match (&sim.bus_shares, sim.params.load_mode) {
            (_, LoadMode::SingleBus) => vec![0.0; sim.fleet.n()],
            (Some(s), LoadMode::DistributedBus) => s.clone(),
            (None, LoadMode::DistributedBus) => {
                return Err(Error::InvalidParameter {
                    name: "load_mode",
                    reason: "distributed-bus mode needs bus shares".into(),
                })
            }
        };
        let (phase, cond) = Self::build_phase(sim, &sim.params, &sim.graph, &shares)?;
        let mut runner = Runner {
            sim,
            params: sim.params.clone(),
            graph: sim.graph.clone(),
            state,
            shares,
            phase,
            x: Vec::new(),
            k: Default::default(),
            tmp: Vec::new(),
            comp: Vec::new(),
            scratch: Vec::new(),
            steps_taken: 0,
            max_abs_total_v: 0.0,
        };
        runner.load_x();
        Ok((runner, cond))
    }

    fn build_phase(
        sim: &Simulation,
        params: &AlgorithmParams,
        graph: &WeightedDigraph,
        shares: &[f64],
    ) -> Result<(Phase, Option<ConditionReport>)> {
        let active: Arc<[usize]> = graph.vertices().into();
        let bundle = graph.laplacian();
        let penalty = PenaltyCost::new(sim.active_fleet(&active), params.epsilon)?;
        let drive = match params.load_mode {
            LoadMode::SingleBus => Drive::SingleBus {
                r_pos: graph
                    .position(params.r)
                    .ok_or(Error::InactiveReference(params.r))?,
            },
            LoadMode::DistributedBus => {
                Drive::Shares(active.iter().map(|&u| shares[u - 1]).collect())
            }
        };
        let cond = if sim.settings.mode == Mode::Distributed && active.len() > 1 {
            let c = check_param_condition(&bundle, params)?;
            if !c.ok {
                warn!(
                    "gain condition fails on the current graph (lhs {:.4e} >= rhs {:.4e}); convergence is not guaranteed",
                    c.lhs, c.rhs
                );
            }
            Some(c)
        } else {
            None
        };
        Ok((
            Phase {
                active,
                bundle,
                penalty,
                drive,
            },
            cond,
        ))
    }

    fn distributed(&self) -> bool {
        self.sim.settings.mode == Mode::Distributed
    }

    fn load_x(&mut self) {
        let n = self.state.n();
        self.x.clear();
        self.x.extend_from_slice(&self.state.p);
        if self.distributed() {
            self.x.extend_from_slice(&self.state.z);
            self.x.extend_from_slice(&self.state.v);
        }
        for k in &mut self.k {
            k.resize(self.x.len(), 0.0);
        }
        self.tmp.resize(self.x.len(), 0.0);
        self.comp.clear();
        self.comp.resize(self.x.len(), 0.0);
        self.scratch.resize(2 * n, 0.0);
    }

    fn store_x(&mut self) {
        let n = self.state.n();
        self.state.p.copy_from_slice(&self.x[..n]);
        if self.distributed() {
            self.state.z.copy_from_slice(&self.x[n..2 * n]);
            self.state.v.copy_from_slice(&self.x[2 * n..]);
        }
    }

    fn load_at(&self, t: f64, seg_end: f64) -> f64 {
        if t >= seg_end {
            self.sim.load.value_before(seg_end)
        } else {
            self.sim.load.value(t)
        }
    }

    fn rhs(&mut self, which: usize, t: f64, seg_end: f64, from_tmp: bool) {
        let load = self.load_at(t, seg_end);
        let x = if from_tmp { &self.tmp } else { &self.x };
        let dx = &mut self.k[which];
        if self.sim.settings.mode == Mode::Distributed {
            distributed_rhs(
                &self.phase.penalty,
                &self.phase.bundle,
                &self.params,
                &self.phase.drive,
                load,
                x,
                dx,
                &mut self.scratch,
            );
        } else {
            let n = x.len();
            centralized_rhs(
                &self.phase.penalty,
                &self.phase.bundle,
                load,
                x,
                dx,
                &mut self.scratch[..n],
            );
        }
    }

    fn stage_input(&mut self, which: usize, c: f64) {
        let k = &self.k[which];
        for ((t, x), k) in self.tmp.iter_mut().zip(&self.x).zip(k) {
            *t = x + c * k;
        }
    }

    fn rk4_step(&mut self, t: f64, h: f64, seg_end: f64) {
        self.rhs(0, t, seg_end, false);
        self.stage_input(0, 0.5 * h);
        self.rhs(1, t + 0.5 * h, seg_end, true);
        self.stage_input(1, 0.5 * h);
        self.rhs(2, t + 0.5 * h, seg_end, true);
        self.stage_input(2, h);
        self.rhs(3, t + h, seg_end, true);
        let [k1, k2, k3, k4] = &self.k;
        for i in 0..self.x.len() {
            let y = h / 6.0 * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i]) - self.comp[i];
            let sum = self.x[i] + y;
            self.comp[i] = (sum - self.x[i]) - y;
            self.x[i] = sum;
        }
    }

    fn check_conservation(&mut self, t: f64) -> Result<()> {
        if !self.distributed() {
            return Ok(());
        }
        let n = self.state.n();
        let drift = compensated_sum(&self.x[2 * n..]).abs();
        self.max_abs_total_v = self.max_abs_total_v.max(drift);
        if drift > V_DRIFT_LIMIT {
            return Err(Error::ConservationDrift { t, drift });
        }
        Ok(())
    }

    fn row(&self, t: f64, segment: usize, load: f64) -> Result<Row> {
        let s = &self.state;
        let fleet = &self.phase.penalty.fleet;
        let box_violation = fleet
            .units()
            .iter()
            .zip(&s.p)
            .map(|(u, &p)| (u.pmin - p).max(p - u.pmax).max(0.0))
            .fold(0.0, f64::max);
        let (z, v) = if self.distributed() {
            (s.z.clone(), s.v.clone())
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(Row {
            t,
            segment,
            load,
            mismatch: s.total_p() - load,
            total_cost: cost_value(fleet, &s.p)?,
            box_violation,
            total_z: compensated_sum(&z),
            total_v: compensated_sum(&v),
            active: self.phase.active.clone(),
            p: s.p.clone(),
            z,
            v,
        })
    }

    fn apply(&mut self, batch: &Batch, t: f64) -> Result<EventRecord> {
        let load_before = self.sim.load.value_before(t);
        let mismatch_before = self.state.total_p() - load_before;
        let applied = apply_batch(&self.state, &self.graph, batch, &self.sim.fleet)?;
        for pass in &applied.passes {
            let moved = std::mem::take(&mut self.shares[pass.from - 1]);
            self.shares[pass.to - 1] += moved;
        }
        self.state = applied.state;
        self.graph = applied.graph;
        let mut r_reassigned = None;
        if self.params.load_mode == LoadMode::SingleBus && batch.removals.contains(&self.params.r) {
            let survivor = self
                .state
                .active
                .iter()
                .copied()
                .find(|u| batch.additions.iter().all(|a| a.0 != *u))
                .ok_or(Error::InactiveReference(self.params.r))?;
            r_reassigned = Some((self.params.r, survivor));
            self.params.r = survivor;
        }
        let (phase, condition) =
            Self::build_phase(self.sim, &self.params, &self.graph, &self.shares)?;
        self.phase = phase;
        self.load_x();
        self.check_conservation(t)?;
        let record = EventRecord {
            t,
            removed: batch.removals.clone(),
            added: batch.additions.iter().map(|a| a.0).collect(),
            token_passes: applied.passes,
            r_reassigned,
            mismatch_before,
            mismatch_after: self.state.total_p() - self.sim.load.value(t),
            total_z_after: self.state.total_z(),
            condition,
        };
        debug!(
            "t = {t}: removed {:?}, added {:?}, mismatch {:.4} -> {:.4}",
            record.removed, record.added, record.mismatch_before, record.mismatch_after
        );
        Ok(record)
    }
}

/// Integrates `sim` from `init` over `[0, t_end]`.
pub fn integrate(sim: &Simulation, init: SimState) -> Result<Trajectory> {
    integrate_until(sim, init, None)
}

/// Like [`integrate`], but stops at the first recorded row at which
/// `stall` reports a stall.
pub fn integrate_until(
    sim: &Simulation,
    init: SimState,
    mut stall: Option<&mut StallDetector>,
) -> Result<Trajectory> {
    let settings = &sim.settings;
    settings.validate()?;
    sim.params.validate()?;
    sim.load.validate()?;
    for &u in sim.graph.vertices() {
        sim.unit(u)?;
    }
    sim.graph.validate_balanced_connected()?;
    check_state_matches(&init, &sim.graph)?;
    if let Some(shares) = &sim.bus_shares {
        if shares.len() != sim.fleet.n() || shares.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidParameter {
                name: "bus_shares",
                reason: "need one non-negative share per unit".into(),
            });
        }
        let total: f64 = init.active.iter().map(|&u| shares[u - 1]).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter {
                name: "bus_shares",
                reason: format!("shares of the active units sum to {total}, expected 1"),
            });
        }
    }
    if settings.mode == Mode::Distributed {
        let scale = init.v.iter().fold(1.0_f64, |m, x| m.max(x.abs()));
        if init.total_v().abs() > 1e-12 * scale {
            return Err(Error::InvalidParameter {
                name: "init.v",
                reason: format!("initial v must sum to zero, got {:.3e}", init.total_v()),
            });
        }
    }
    sim.events.dry_run(&sim.graph, &sim.fleet)?;

    let t_end = settings.t_end;
    let batches = sim.events.batches();
    for b in batches.iter().filter(|b| b.t >= t_end) {
        warn!(
            "event batch at t = {} is at or after t_end = {t_end} and is ignored",
            b.t
        );
    }
    let mut snaps: Vec<f64> = batches
        .iter()
        .map(|b| b.t)
        .chain(sim.load.breakpoints())
        .filter(|&t| t > 0.0 && t < t_end)
        .collect();
    snaps.push(t_end);
    snaps.sort_by(f64::total_cmp);
    snaps.dedup();

    let (mut runner, initial_condition) = Runner::new(sim, init)?;
    runner.check_conservation(0.0)?;
    let mut rows = vec![runner.row(0.0, 0, sim.load.value(0.0))?];
    let mut segments = Vec::new();
    let mut events = Vec::new();
    let mut stopped_at = None;
    let mut t0 = 0.0;
    let mut next_batch = batches.iter().peekable();

    'segments: for (index, &t1) in snaps.iter().enumerate() {
        let steps = (((t1 - t0) / settings.dt) - 1e-9).ceil().max(1.0) as usize;
        let h = (t1 - t0) / steps as f64;
        segments.push(SegmentInfo {
            index,
            t0,
            t1,
            constant_load: sim.load.is_constant_on(t0, t1),
            steps,
            h,
            active: runner.phase.active.clone(),
        });
        for k in 0..steps {
            let t = t0 + k as f64 * h;
            runner.rk4_step(t, h, t1);
            runner.steps_taken += 1;
            let t_next = if k + 1 == steps {
                t1
            } else {
                t0 + (k + 1) as f64 * h
            };
            runner.check_conservation(t_next)?;
            if k + 1 < steps && runner.steps_taken % settings.record_every == 0 {
                runner.store_x();
                let row = runner.row(t_next, index, sim.load.value(t_next))?;
                let done = stall.as_deref_mut().is_some_and(|d| d.observe(&row));
                rows.push(row);
                if done {
                    stopped_at = Some(t_next);
                    segments.last_mut().expect("pushed").t1 = t_next;
                    break 'segments;
                }
            }
        }
        runner.store_x();
        rows.push(runner.row(t1, index, sim.load.value_before(t1))?);
        if t1 >= t_end {
            break;
        }
        if next_batch.peek().is_some_and(|b| b.t == t1) {
            let batch = next_batch.next().expect("peeked");
            events.push(runner.apply(batch, t1)?);
        }
        rows.push(runner.row(t1, index + 1, sim.load.value(t1))?);
        t0 = t1;
    }

    Ok(Trajectory {
        mode: settings.mode,
        universe: sim.fleet.n(),
        rows,
        segments,
        events,
        initial_condition,
        max_abs_total_v: runner.max_abs_total_v,
        final_state: runner.state,
        final_graph: runner.graph,
        final_params: runner.params,
        stopped_at,
    })
}

/// Worst ratio of `‖x(t)‖` to the envelope `c1 e^{-c2 (t - t0)} ‖x(t0)‖`
/// over one segment, with `x = (1'P - P_l, ν1 1'z)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnvelopeReport {
    pub segment: usize,
    pub t0: f64,
    pub t1: f64,
    pub samples: usize,
    pub max_ratio: f64,
    pub worst_t: f64,
    pub ok: bool,
}

pub const ENVELOPE_SLACK: f64 = 1e-3;

/// `‖x‖` at or below `ENVELOPE_FLOOR · max(1, |P_l|)` is roundoff and
/// counts as zero.
pub const ENVELOPE_FLOOR: f64 = 1e-9;

pub fn mismatch_envelope_check(
    traj: &Trajectory,
    model: &MismatchModel,
    params: &AlgorithmParams,
    segment: usize,
) -> Result<EnvelopeReport> {
    if traj.mode != Mode::Distributed {
        return Err(Error::InvalidParameter {
            name: "mode",
            reason: "the mismatch envelope applies to distributed runs".into(),
        });
    }
    let info = traj.segments.get(segment).ok_or(Error::EmptySegment)?;
    if !info.constant_load {
        return Err(Error::InvalidParameter {
            name: "segment",
            reason: format!("load varies on segment {segment}"),
        });
    }
    let rows = traj.segment_rows(segment);
    let first = rows.first().ok_or(Error::EmptySegment)?;
    let norm = |r: &Row| r.mismatch.hypot(params.nu1 * r.total_z);
    let x0 = norm(first);
    let floor = ENVELOPE_FLOOR * first.load.abs().max(1.0);
    let mut max_ratio: f64 = 0.0;
    let mut worst_t = first.t;
    for r in rows {
        let x = norm(r);
        let ratio = if x <= floor {
            0.0
        } else if x0 == 0.0 {
            f64::INFINITY
        } else {
            x / (model.envelope(r.t - first.t) * x0)
        };
        if ratio > max_ratio {
            max_ratio = ratio;
            worst_t = r.t;
        }
    }
    Ok(EnvelopeReport {
        segment,
        t0: info.t0,
        t1: info.t1,
        samples: rows.len(),
        max_ratio,
        worst_t,
        ok: max_ratio <= 1.0 + ENVELOPE_SLACK,
    })
}
