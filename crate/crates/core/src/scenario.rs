//! Scenario files and the end-to-end run.
//!
//! A scenario is one JSON document naming the communication graph, the
//! generator fleet, the load signal, join/leave events, the gains, the
//! integration settings, the initial state and the checks that decide the
//! run's verdict. Four scenarios and the 54-unit fleet they use are compiled
//! into the crate.

use std::path::{Path, PathBuf};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::costs::{epsilon_bound, GeneratorFleet};
use crate::dynamics::{mismatch_model, AlgorithmParams, LoadMode, SimState};
use crate::error::{Error, Result};
use crate::graph::{reference_graph, ReferenceGraph, WeightedDigraph};
use crate::oracle::{kkt_check, solve_lambda_iteration, DispatchProblem, KktReport};
use crate::output::{
    read_trajectory_csv_file, write_metadata, write_trajectory_csv_file, RunMetadata, Seeds,
};
use crate::plot::{render_svg, Panel, Reference};
use crate::simulator::{
    integrate, mismatch_envelope_check, EdgeSource, EnvelopeReport, Event, EventSchedule,
    LoadSignal, Mode, SimSettings, Simulation, Trajectory,
};

pub const SCHEMA_VERSION: u32 = 1;

pub const BUNDLED_SCENARIOS: [&str; 4] = ["fig1_abc", "fig1_def", "fig1_ghi", "fig2_bursts"];

/// Name of the bundled 54-unit fleet.
pub const BUNDLED_FLEET: &str = "ieee118_54units";
/// Seed and marginal-cost cap the bundled fleet was sampled with.
pub const BUNDLED_FLEET_SEED: u64 = 118;
pub const BUNDLED_FLEET_MAX_MARGINAL: f64 = 57.9;

pub fn bundled_scenario(name: &str) -> Option<&'static str> {
    Some(match name {
        "fig1_abc" => include_str!("../scenarios/fig1_abc.json"),
        "fig1_def" => include_str!("../scenarios/fig1_def.json"),
        "fig1_ghi" => include_str!("../scenarios/fig1_ghi.json"),
        "fig2_bursts" => include_str!("../scenarios/fig2_bursts.json"),
        _ => return None,
    })
}

pub fn bundled_fleet(name: &str) -> Option<&'static str> {
    (name == BUNDLED_FLEET).then_some(include_str!("../scenarios/ieee118_54units.json"))
}

/// Parses JSON, reporting failures as `origin:line:column: message`.
fn parse_json<T: serde::de::DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| {
        let msg = e.to_string();
        let msg = msg.split(" at line ").next().unwrap_or(&msg);
        Error::Config(format!("{origin}:{}:{}: {msg}", e.line(), e.column()))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GraphRef {
    /// One of `G`, `Ghat`, `Gi`, `Gf`.
    Named(String),
    Inline(WeightedDigraph),
}

impl GraphRef {
    fn resolve(&self) -> Result<(WeightedDigraph, String)> {
        match self {
            GraphRef::Named(name) => Ok((
                reference_graph(name.parse::<ReferenceGraph>()?),
                name.clone(),
            )),
            GraphRef::Inline(g) => Ok((g.clone(), "inline".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FleetRef {
    /// A bundled fleet name.
    Named(String),
    /// A JSON file holding a list of units, relative to the scenario file.
    File {
        path: PathBuf,
    },
    Inline(GeneratorFleet),
}

impl FleetRef {
    fn resolve(&self, base: Option<&Path>) -> Result<(GeneratorFleet, String)> {
        match self {
            FleetRef::Named(name) => {
                let text = bundled_fleet(name)
                    .ok_or_else(|| Error::Config(format!("unknown bundled fleet {name:?}")))?;
                Ok((parse_json(text, name)?, name.clone()))
            }
            FleetRef::File { path } => {
                let full = match base {
                    Some(b) if path.is_relative() => b.join(path),
                    _ => path.clone(),
                };
                let text = std::fs::read_to_string(&full).map_err(|e| {
                    Error::Config(format!("cannot read fleet {}: {e}", full.display()))
                })?;
                Ok((
                    parse_json(&text, &full.display().to_string())?,
                    full.display().to_string(),
                ))
            }
            FleetRef::Inline(f) => Ok((f.clone(), "inline".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AddSpec {
    pub unit: usize,
    /// Explicit edges `(i, j, a_ij)`, each touching `unit`.
    #[serde(default)]
    pub edges: Option<Vec<(usize, usize, f64)>>,
    /// Take the unit's edges to the present vertices from this graph.
    #[serde(default)]
    pub edges_from: Option<GraphRef>,
    #[serde(default)]
    pub p_init: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSpec {
    pub t: f64,
    #[serde(default)]
    pub remove: Vec<usize>,
    #[serde(default)]
    pub add: Vec<AddSpec>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    /// Box midpoints.
    #[default]
    Midpoint,
    /// Uniform in each box.
    Random { seed: u64 },
    /// One value per initially active unit, in label order.
    Explicit { p: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    pub csv: String,
    pub metadata: String,
    pub plots: Vec<Panel>,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            csv: "trajectory.csv".into(),
            metadata: "metadata.json".into(),
            plots: vec![Panel::Alloc, Panel::Cost, Panel::Mismatch],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckSpec {
    /// Terminal KKT test (only when the load is constant at the end).
    pub kkt: bool,
    /// KKT tolerance in MW; defaults to [`default_kkt_tol`].
    pub kkt_tol: Option<f64>,
    /// Mismatch envelope on every constant-load segment.
    pub envelope: bool,
    /// `max |1'v| <= conservation_tol`.
    pub conservation: bool,
    pub conservation_tol: f64,
}

impl Default for CheckSpec {
    fn default() -> Self {
        CheckSpec {
            kkt: true,
            kkt_tol: None,
            envelope: true,
            conservation: true,
            conservation_tol: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub graph: GraphRef,
    pub fleet: FleetRef,
    pub load: LoadSignal,
    /// Per-unit bus loads for distributed-bus mode; normalized over the
    /// initially active units.
    #[serde(default)]
    pub bus_loads: Option<Vec<f64>>,
    #[serde(default)]
    pub events: Vec<EventSpec>,
    pub params: AlgorithmParams,
    pub sim: SimSettings,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default)]
    pub outputs: OutputSpec,
    #[serde(default)]
    pub checks: CheckSpec,
}

/// Command-line overrides.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub dt: Option<f64>,
    pub seed: Option<u64>,
    pub t_end: Option<f64>,
}

impl ScenarioConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let cfg: ScenarioConfig = parse_json(text, origin)?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "{origin}: unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    /// Reads a scenario file, or a bundled scenario when `arg` names one and
    /// no such file exists. Returns the directory relative paths resolve
    /// against.
    pub fn load(arg: &str) -> Result<(Self, Option<PathBuf>)> {
        let path = Path::new(arg);
        if path.exists() {
            let text = std::fs::read_to_string(path)?;
            let base = path.parent().map(Path::to_path_buf);
            return Ok((Self::from_json(&text, arg)?, base));
        }
        match bundled_scenario(arg) {
            Some(text) => Ok((Self::from_json(text, arg)?, None)),
            None => Err(Error::Config(format!(
                "{arg}: no such file and not a bundled scenario ({})",
                BUNDLED_SCENARIOS.join(", ")
            ))),
        }
    }

    pub fn bundled(name: &str) -> Result<Self> {
        let text = bundled_scenario(name)
            .ok_or_else(|| Error::Config(format!("unknown bundled scenario {name:?}")))?;
        Self::from_json(text, name)
    }

    pub fn resolve(&self, base: Option<&Path>, ov: &Overrides) -> Result<ResolvedScenario> {
        let mut settings = self.sim.clone();
        if let Some(dt) = ov.dt {
            settings.dt = dt;
        }
        if let Some(t_end) = ov.t_end {
            settings.t_end = t_end;
        }
        settings.validate()?;
        self.params.validate()?;
        self.load.validate()?;
        let (graph, graph_name) = self.graph.resolve()?;
        let (fleet, fleet_name) = self.fleet.resolve(base)?;
        for &v in graph.vertices() {
            if v > fleet.n() {
                return Err(Error::Config(format!(
                    "graph vertex {v} has no unit in a fleet of {}",
                    fleet.n()
                )));
            }
        }
        graph.validate_balanced_connected()?;

        let mut events = Vec::new();
        for spec in &self.events {
            for &u in &spec.remove {
                events.push(Event::remove(spec.t, u));
            }
            for add in &spec.add {
                let edges = match (&add.edges, &add.edges_from) {
                    (Some(e), None) => EdgeSource::Explicit(e.clone()),
                    (None, Some(g)) => EdgeSource::Template(g.resolve()?.0),
                    _ => {
                        return Err(Error::Config(format!(
                        "event at t = {}: unit {} needs exactly one of `edges` and `edges_from`",
                        spec.t, add.unit
                    )))
                    }
                };
                events.push(Event::add(spec.t, add.unit, edges, add.p_init));
            }
        }
        let events = EventSchedule::new(events)?;
        let graphs = events.dry_run(&graph, &fleet)?;

        let bus_shares = match (&self.bus_loads, self.params.load_mode) {
            (None, LoadMode::SingleBus) => None,
            (Some(_), LoadMode::SingleBus) => {
                warn!("bus_loads are ignored in single-bus mode");
                None
            }
            (None, LoadMode::DistributedBus) => {
                return Err(Error::Config(
                    "distributed-bus mode needs `bus_loads`".into(),
                ))
            }
            (Some(loads), LoadMode::DistributedBus) => {
                if loads.len() != fleet.n() || loads.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
                    return Err(Error::Config(
                        "`bus_loads` needs one non-negative value per unit".into(),
                    ));
                }
                let total: f64 = graph.vertices().iter().map(|&u| loads[u - 1]).sum();
                if !(total > 0.0) {
                    return Err(Error::Config(
                        "bus loads of the active units sum to zero".into(),
                    ));
                }
                let active = graph.vertices();
                Some(
                    (1..=fleet.n())
                        .map(|u| {
                            if active.contains(&u) {
                                loads[u - 1] / total
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                )
            }
        };

        let simulation = Simulation {
            fleet,
            params: self.params.clone(),
            graph,
            load: self.load.clone(),
            events,
            settings,
            bus_shares,
        };
        check_feasibility(&simulation, &graphs)?;

        let mut seed = None;
        let init = match &self.init {
            InitSpec::Midpoint => simulation.midpoint_state()?,
            InitSpec::Random { seed: s } => {
                let s = ov.seed.unwrap_or(*s);
                seed = Some(s);
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let active = simulation.graph.vertices().to_vec();
                let p = simulation
                    .active_fleet(&active)
                    .units()
                    .iter()
                    .map(|u| {
                        if u.pmax > u.pmin {
                            rng.gen_range(u.pmin..u.pmax)
                        } else {
                            u.pmin
                        }
                    })
                    .collect();
                SimState::cold(active, p)?
            }
            InitSpec::Explicit { p } => {
                SimState::cold(simulation.graph.vertices().to_vec(), p.clone())?
            }
        };
        if ov.seed.is_some() && seed.is_none() {
            warn!("--seed has no effect: the scenario does not draw a random initial state");
        }

        Ok(ResolvedScenario {
            config: self.clone(),
            graph_name,
            fleet_name,
            simulation,
            init,
            seed,
        })
    }
}

/// Load within the open capacity range of the active fleet between events,
/// and `ε` below its admissible bound.
fn check_feasibility(sim: &Simulation, graphs: &[WeightedDigraph]) -> Result<()> {
    let t_end = sim.settings.t_end;
    let mut edges: Vec<f64> = vec![0.0];
    edges.extend(sim.events.times().into_iter().filter(|&t| t < t_end));
    edges.push(t_end);
    let mut graph = &sim.graph;
    for (k, w) in edges.windows(2).enumerate() {
        if k > 0 {
            graph = &graphs[k - 1];
        }
        let fleet = sim.active_fleet(graph.vertices());
        let (lo, hi) = fleet.capacity_range();
        let samples = (0..=2000).map(|i| w[0] + (w[1] - w[0]) * i as f64 / 2000.0);
        let breaks = sim
            .load
            .breakpoints()
            .into_iter()
            .filter(|&t| w[0] <= t && t < w[1]);
        for t in samples.chain(breaks) {
            let load = if t >= w[1] {
                sim.load.value_before(w[1])
            } else {
                sim.load.value(t)
            };
            if !(lo < load && load < hi) {
                return Err(Error::InfeasibleLoad {
                    load,
                    min: lo,
                    max: hi,
                });
            }
            let bound = epsilon_bound(&fleet, load)?;
            if sim.params.epsilon >= bound {
                warn!(
                    "epsilon {} is not below the admissible bound {bound:.6} at t = {t}; penalty may be inexact",
                    sim.params.epsilon
                );
                break;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ResolvedScenario {
    pub config: ScenarioConfig,
    pub graph_name: String,
    pub fleet_name: String,
    pub simulation: Simulation,
    pub init: SimState,
    pub seed: Option<u64>,
}

/// `2 dt d_out / ε` (floored at `1e-6 max(1, P_l)`): width of the band in
/// which a fixed-step integrator chatters around a box corner of the
/// penalty.
pub fn default_kkt_tol(dt: f64, max_out_degree: f64, epsilon: f64, load: f64) -> f64 {
    (2.0 * dt * max_out_degree / epsilon).max(1e-6 * load.abs().max(1.0))
}

/// Oracle comparison at the end of one constant-load segment.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhaseReport {
    pub segment: usize,
    pub t0: f64,
    pub t1: f64,
    pub load: f64,
    pub active: Vec<usize>,
    pub oracle_cost: f64,
    pub oracle_mu: f64,
    pub terminal_cost: f64,
    pub cost_rel_gap: f64,
    pub terminal_mismatch: f64,
    /// `‖P(t1) - P*‖`.
    pub distance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// Enabled but not applicable to this run.
    Skipped,
    Disabled,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub status: CheckStatus,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub t_final: f64,
    pub terminal_mismatch: f64,
    pub terminal_cost: f64,
    /// Oracle cost of the final active fleet at the final load.
    pub oracle_cost: Option<f64>,
    pub kkt: Option<KktReport>,
    pub kkt_tol: Option<f64>,
    pub envelope: Vec<EnvelopeReport>,
    pub max_abs_total_v: f64,
    pub max_box_violation: f64,
    pub phases: Vec<PhaseReport>,
    pub checks: Vec<CheckOutcome>,
    pub ok: bool,
}

pub struct RunOutput {
    pub trajectory: Trajectory,
    pub report: RunReport,
}

fn phase_reports(sim: &Simulation, traj: &Trajectory) -> Result<Vec<PhaseReport>> {
    let mut out = Vec::new();
    for seg in traj.segments.iter().filter(|s| s.constant_load) {
        let rows = traj.segment_rows(seg.index);
        let Some(last) = rows.last() else { continue };
        let problem = DispatchProblem::new(sim.active_fleet(&last.active), last.load)?;
        let star = solve_lambda_iteration(&problem, 1e-3 * problem.default_tol())?;
        let distance = last
            .p
            .iter()
            .zip(&star.p_star)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        out.push(PhaseReport {
            segment: seg.index,
            t0: seg.t0,
            t1: seg.t1,
            load: last.load,
            active: last.active.to_vec(),
            oracle_cost: star.cost,
            oracle_mu: star.mu,
            terminal_cost: last.total_cost,
            cost_rel_gap: (last.total_cost - star.cost).abs() / star.cost.abs().max(1.0),
            terminal_mismatch: last.mismatch,
            distance,
        });
    }
    Ok(out)
}

/// Integrates a resolved scenario and evaluates its checks.
pub fn execute(r: &ResolvedScenario) -> Result<RunOutput> {
    let sim = &r.simulation;
    let checks_cfg = &r.config.checks;
    let traj = integrate(sim, r.init.clone())?;
    let last = traj.last().clone();
    let phases = phase_reports(sim, &traj)?;
    let final_seg = traj.segments.last().expect("at least one segment");
    let mut checks = Vec::new();

    let mut kkt = None;
    let mut kkt_tol = None;
    let mut oracle_cost = None;
    if final_seg.constant_load {
        let problem = DispatchProblem::new(sim.active_fleet(&last.active), last.load)?;
        oracle_cost = Some(solve_lambda_iteration(&problem, 1e-3 * problem.default_tol())?.cost);
        let tol = checks_cfg.kkt_tol.unwrap_or_else(|| {
            default_kkt_tol(
                final_seg.h,
                traj.final_graph.max_out_degree(),
                sim.params.epsilon,
                last.load,
            )
        });
        kkt_tol = Some(tol);
        kkt = Some(kkt_check(&problem, &last.p, sim.params.epsilon, tol)?);
    }
    checks.push(match (&kkt, checks_cfg.kkt) {
        (_, false) => CheckOutcome {
            name: "kkt",
            status: CheckStatus::Disabled,
            detail: String::new(),
        },
        (None, true) => CheckOutcome {
            name: "kkt",
            status: CheckStatus::Skipped,
            detail: "load varies on the final segment".into(),
        },
        (Some(rep), true) => CheckOutcome {
            name: "kkt",
            status: if rep.ok {
                CheckStatus::Pass
            } else {
                CheckStatus::Fail
            },
            detail: format!(
                "tol {:.3e} MW, mismatch {:.3e}, price interval [{:.6}, {:.6}]",
                kkt_tol.unwrap_or(0.0),
                rep.mismatch,
                rep.price_lo,
                rep.price_hi
            ),
        },
    });

    let mut envelope = Vec::new();
    if traj.mode == Mode::Distributed {
        let model = mismatch_model(&sim.params);
        for seg in traj.segments.iter().filter(|s| s.constant_load) {
            envelope.push(mismatch_envelope_check(
                &traj,
                &model,
                &sim.params,
                seg.index,
            )?);
        }
    }
    checks.push(if !checks_cfg.envelope {
        CheckOutcome {
            name: "envelope",
            status: CheckStatus::Disabled,
            detail: String::new(),
        }
    } else if envelope.is_empty() {
        CheckOutcome {
            name: "envelope",
            status: CheckStatus::Skipped,
            detail: "no constant-load segment in a distributed run".into(),
        }
    } else {
        let worst = envelope
            .iter()
            .max_by(|a, b| a.max_ratio.total_cmp(&b.max_ratio))
            .expect("non-empty");
        CheckOutcome {
            name: "envelope",
            status: if envelope.iter().all(|e| e.ok) {
                CheckStatus::Pass
            } else {
                CheckStatus::Fail
            },
            detail: format!(
                "{} segments, worst ratio {:.6} (segment {}, t = {})",
                envelope.len(),
                worst.max_ratio,
                worst.segment,
                worst.worst_t
            ),
        }
    });

    checks.push(if !checks_cfg.conservation {
        CheckOutcome {
            name: "conservation",
            status: CheckStatus::Disabled,
            detail: String::new(),
        }
    } else if traj.mode != Mode::Distributed {
        CheckOutcome {
            name: "conservation",
            status: CheckStatus::Skipped,
            detail: "centralized run has no v".into(),
        }
    } else {
        CheckOutcome {
            name: "conservation",
            status: if traj.max_abs_total_v <= checks_cfg.conservation_tol {
                CheckStatus::Pass
            } else {
                CheckStatus::Fail
            },
            detail: format!("max |1'v| = {:.3e}", traj.max_abs_total_v),
        }
    });

    let ok = checks.iter().all(|c| c.status != CheckStatus::Fail);
    let report = RunReport {
        scenario: r.config.name.clone(),
        t_final: last.t,
        terminal_mismatch: last.mismatch,
        terminal_cost: last.total_cost,
        oracle_cost,
        kkt,
        kkt_tol,
        envelope,
        max_abs_total_v: traj.max_abs_total_v,
        max_box_violation: traj
            .rows
            .iter()
            .map(|r| r.box_violation)
            .fold(0.0, f64::max),
        phases,
        checks,
        ok,
    };
    Ok(RunOutput {
        trajectory: traj,
        report,
    })
}

/// Input of a one-shot dispatch solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub fleet: FleetRef,
    /// Total load; exclusive with `bus_loads`.
    #[serde(default)]
    pub load: Option<f64>,
    /// Per-unit loads, one per selected unit.
    #[serde(default)]
    pub bus_loads: Option<Vec<f64>>,
    /// Labels of the participating units; all units when absent.
    #[serde(default)]
    pub units: Option<Vec<usize>>,
    #[serde(default)]
    pub tol: Option<f64>,
}

impl ProblemSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        parse_json(&text, &path.display().to_string())
    }

    pub fn resolve(&self, base: Option<&Path>) -> Result<DispatchProblem> {
        let (fleet, _) = self.fleet.resolve(base)?;
        let fleet = match &self.units {
            None => fleet,
            Some(units) => {
                let mut positions = Vec::with_capacity(units.len());
                for &u in units {
                    if u == 0 || u > fleet.n() || positions.contains(&(u - 1)) {
                        return Err(Error::Config(format!(
                            "unit {u} is out of range or repeated"
                        )));
                    }
                    positions.push(u - 1);
                }
                fleet.select(&positions)
            }
        };
        match (self.load, &self.bus_loads) {
            (Some(load), None) => DispatchProblem::new(fleet, load),
            (None, Some(b)) => DispatchProblem::with_bus_loads(fleet, b.clone()),
            _ => Err(Error::Config(
                "a problem needs exactly one of `load` and `bus_loads`".into(),
            )),
        }
    }
}

/// Reference cost levels of the constant-load phases, for the cost panel.
pub fn phase_references(report: &RunReport) -> Vec<Reference> {
    report
        .phases
        .iter()
        .map(|p| Reference {
            t0: p.t0,
            t1: p.t1,
            value: p.oracle_cost,
        })
        .collect()
}

/// Writes the CSV, the metadata sidecar and the configured plots into
/// `dir`, returning the paths written.
pub fn write_artifacts(r: &ResolvedScenario, out: &RunOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let outputs = &r.config.outputs;
    let csv_path = dir.join(&outputs.csv);
    write_trajectory_csv_file(&out.trajectory, &csv_path)?;
    let meta_path = dir.join(&outputs.metadata);
    let meta = RunMetadata {
        schema_version: SCHEMA_VERSION,
        scenario: &r.config.name,
        description: &r.config.description,
        graph: &r.graph_name,
        fleet: &r.fleet_name,
        universe: out.trajectory.universe,
        params: &r.simulation.params,
        sim: &r.simulation.settings,
        load: &r.simulation.load,
        seeds: Seeds { init: r.seed },
        initial_condition: out.trajectory.initial_condition,
        events: &out.trajectory.events,
        report: &out.report,
    };
    write_metadata(&meta, &meta_path)?;
    let mut written = vec![csv_path.clone(), meta_path];
    if !outputs.plots.is_empty() {
        let table = read_trajectory_csv_file(&csv_path)?;
        let refs = phase_references(&out.report);
        for &panel in &outputs.plots {
            let svg = render_svg(&table, panel, &refs, &format!("{}: {panel}", r.config.name))?;
            let path = dir.join(format!("{panel}.svg"));
            std::fs::write(&path, svg)?;
            written.push(path);
        }
    }
    Ok(written)
}
