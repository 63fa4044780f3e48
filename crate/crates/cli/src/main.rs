use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use disped::costs::epsilon_bound;
use disped::dynamics::{
    check_param_condition, check_param_condition_distributed, mismatch_model, t_rho,
    ultimate_bound, ConditionReport,
};
use disped::graph::GraphBounds;
use disped::oracle::solve_lambda_iteration;
use disped::output::read_trajectory_csv_file;
use disped::plot::{render_svg, Panel, Reference};
use disped::scenario::{
    execute, write_artifacts, CheckStatus, Overrides, ProblemSpec, ResolvedScenario, RunReport,
    ScenarioConfig, BUNDLED_SCENARIOS,
};

/// Distributed economic dispatch simulator.
#[derive(Parser)]
#[command(name = "disped", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario, write its artifacts and evaluate its checks.
    Run(RunArgs),
    /// Solve a dispatch problem file with lambda iteration.
    Solve { problem: PathBuf },
    /// Report the gain conditions, the penalty bound and the mismatch constants.
    CheckParams {
        config: String,
        #[command(flatten)]
        magnitudes: Magnitudes,
        #[arg(long)]
        json: bool,
    },
    /// Report the mismatch constants, the ultimate bound and the recovery time.
    Bounds {
        config: String,
        /// Bound on |dP_l/dt|; read off the scenario's load when omitted.
        #[arg(long)]
        d1: Option<f64>,
        /// Bound on |d²P_l/dt²|; read off the scenario's load when omitted.
        #[arg(long)]
        d2: Option<f64>,
        #[command(flatten)]
        magnitudes: Magnitudes,
        #[arg(long)]
        json: bool,
    },
    /// Render one panel of a trajectory CSV as SVG.
    Plot {
        csv: PathBuf,
        #[arg(long, value_parser = parse_panel)]
        panel: Panel,
        /// Output file; defaults to the CSV path with the panel name and `.svg`.
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[arg(long)]
        title: Option<String>,
        /// Reference level `t0:t1:value` drawn on the cost panel; repeatable.
        #[arg(long = "reference", value_parser = parse_reference)]
        references: Vec<Reference>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file or bundled scenario name.
    #[arg(required_unless_present = "all", conflicts_with = "all")]
    config: Option<String>,
    /// Run every bundled scenario in parallel.
    #[arg(long)]
    all: bool,
    /// Output directory (for `--all`, the root of the per-scenario directories).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    t_end: Option<f64>,
}

#[derive(Args, Clone, Copy)]
struct Magnitudes {
    /// Post-event |1'P - P_l|.
    #[arg(long = "M1")]
    m1: Option<f64>,
    /// Post-event |1'z|.
    #[arg(long = "M2")]
    m2: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
}

fn parse_panel(s: &str) -> Result<Panel, String> {
    s.parse().map_err(|e: disped::Error| e.to_string())
}

fn parse_reference(s: &str) -> Result<Reference, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let nums: Option<Vec<f64>> = parts.iter().map(|p| p.trim().parse().ok()).collect();
    match nums.as_deref() {
        Some(&[t0, t1, value]) => Ok(Reference { t0, t1, value }),
        _ => Err(format!("expected t0:t1:value, got {s:?}")),
    }
}

fn output_root() -> PathBuf {
    std::env::var_os("DISPED_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn resolve(arg: &str, ov: &Overrides) -> Result<ResolvedScenario> {
    let (cfg, base) = ScenarioConfig::load(arg)?;
    Ok(cfg.resolve(base.as_deref(), ov)?)
}

fn print_report(report: &RunReport, dir: &Path) {
    println!("scenario          {}", report.scenario);
    println!("output            {}", dir.display());
    println!("t_final           {}", report.t_final);
    println!("terminal mismatch {:.6e}", report.terminal_mismatch);
    println!("terminal cost     {:.6}", report.terminal_cost);
    match report.oracle_cost {
        Some(c) => println!("oracle cost       {c:.6}"),
        None => println!("oracle cost       n/a (load varies at the end)"),
    }
    for p in &report.phases {
        println!(
            "phase {:<3} [{:>7.1}, {:>7.1}] load {:<9} oracle {:.6}  terminal {:.6}  rel gap {:.3e}",
            p.segment, p.t0, p.t1, p.load, p.oracle_cost, p.terminal_cost, p.cost_rel_gap
        );
    }
    for c in &report.checks {
        let status = match c.status {
            CheckStatus::Pass => "pass",
            CheckStatus::Fail => "FAIL",
            CheckStatus::Skipped => "skipped",
            CheckStatus::Disabled => "disabled",
        };
        println!("check {:<12} {status:<8} {}", c.name, c.detail);
    }
    println!(
        "verdict           {}",
        if report.ok { "ok" } else { "FAILED" }
    );
}

fn run_one(arg: &str, dir: Option<PathBuf>, ov: &Overrides) -> Result<(RunReport, PathBuf)> {
    let r = resolve(arg, ov)?;
    let dir = dir.unwrap_or_else(|| output_root().join(&r.config.name));
    let out = execute(&r).with_context(|| format!("simulating {}", r.config.name))?;
    write_artifacts(&r, &out, &dir)
        .with_context(|| format!("writing artifacts to {}", dir.display()))?;
    Ok((out.report, dir))
}

fn cmd_run(args: RunArgs) -> Result<bool> {
    let ov = Overrides {
        dt: args.dt,
        seed: args.seed,
        t_end: args.t_end,
    };
    if !args.all {
        let config = args.config.expect("clap enforces a config without --all");
        let (report, dir) = run_one(&config, args.out, &ov)?;
        print_report(&report, &dir);
        return Ok(report.ok);
    }
    let root = args.out.unwrap_or_else(output_root);
    let results: Vec<Result<(RunReport, PathBuf)>> = std::thread::scope(|s| {
        let handles: Vec<_> = BUNDLED_SCENARIOS
            .iter()
            .map(|name| {
                let (root, ov) = (&root, &ov);
                s.spawn(move || run_one(name, Some(root.join(name)), ov))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("scenario thread panicked"))
            .collect()
    });
    let mut ok = true;
    for (name, res) in BUNDLED_SCENARIOS.iter().zip(results) {
        match res {
            Ok((report, dir)) => {
                print_report(&report, &dir);
                ok &= report.ok;
            }
            Err(e) => {
                eprintln!("error: {name}: {e:#}");
                ok = false;
            }
        }
        println!();
    }
    Ok(ok)
}

fn cmd_solve(path: &Path) -> Result<()> {
    let spec = ProblemSpec::load(path)?;
    let problem = spec.resolve(path.parent())?;
    let tol = spec.tol.unwrap_or_else(|| problem.default_tol());
    let sol = solve_lambda_iteration(&problem, tol)?;
    println!("{}", serde_json::to_string_pretty(&sol)?);
    Ok(())
}

#[derive(Serialize)]
struct Recovery {
    m1: f64,
    m2: f64,
    rho: f64,
    t_rho: f64,
}

#[derive(Serialize)]
struct ParamReport {
    scenario: String,
    graph: String,
    lambda2: f64,
    lambda_max_ltl: f64,
    condition: ConditionReport,
    condition_from_bounds: ConditionReport,
    graph_bounds: GraphBounds,
    epsilon: f64,
    epsilon_bound: f64,
    c1: f64,
    c2: f64,
    recovery: Option<Recovery>,
}

fn recovery(r: &ResolvedScenario, m: Magnitudes) -> Result<Option<Recovery>> {
    match (m.m1, m.m2) {
        (Some(m1), Some(m2)) => Ok(Some(Recovery {
            m1,
            m2,
            rho: m.rho,
            t_rho: t_rho(&r.simulation.params, m1, m2, m.rho)?,
        })),
        (None, None) => Ok(None),
        _ => bail!("--M1 and --M2 go together"),
    }
}

fn print_condition(label: &str, c: &ConditionReport) {
    println!(
        "{label:<28} lhs {:.6}  rhs {:.6}  {}",
        c.lhs,
        c.rhs,
        if c.ok { "ok" } else { "NOT SATISFIED" }
    );
}

fn print_recovery(rec: &Option<Recovery>) {
    if let Some(rec) = rec {
        println!(
            "t_rho                        {:.6}  (M1 {}, M2 {}, rho {})",
            rec.t_rho, rec.m1, rec.m2, rec.rho
        );
    }
}

fn cmd_check_params(config: &str, m: Magnitudes, json: bool) -> Result<()> {
    let r = resolve(config, &Overrides::default())?;
    let sim = &r.simulation;
    let bundle = sim.graph.laplacian();
    let model = mismatch_model(&sim.params);
    let bounds = GraphBounds::scan(&sim.graph);
    let report = ParamReport {
        scenario: r.config.name.clone(),
        graph: r.graph_name.clone(),
        lambda2: bundle.lambda2_sym,
        lambda_max_ltl: bundle.lambda_max_ltl,
        condition: check_param_condition(&bundle, &sim.params)?,
        condition_from_bounds: check_param_condition_distributed(&bounds, &sim.params),
        graph_bounds: bounds,
        epsilon: sim.params.epsilon,
        epsilon_bound: epsilon_bound(&sim.active_fleet(sim.graph.vertices()), sim.load.value(0.0))?,
        c1: model.c1,
        c2: model.c2,
        recovery: recovery(&r, m)?,
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    println!(
        "scenario                     {} (graph {})",
        report.scenario, report.graph
    );
    println!("lambda2(L + L')              {:.6}", report.lambda2);
    println!("lambda_max(L'L)              {:.6}", report.lambda_max_ltl);
    print_condition("gain condition", &report.condition);
    print_condition("gain condition from bounds", &report.condition_from_bounds);
    println!(
        "epsilon                      {}  (bound {:.6}{})",
        report.epsilon,
        report.epsilon_bound,
        if report.epsilon < report.epsilon_bound {
            ""
        } else {
            ", EXCEEDED"
        }
    );
    println!("c1                           {:.6}", report.c1);
    println!("c2                           {:.6}", report.c2);
    print_recovery(&report.recovery);
    if !report.condition.ok {
        println!("hint: raise beta or alpha, or lower nu2");
    }
    Ok(())
}

#[derive(Serialize)]
struct BoundsReport {
    scenario: String,
    c1: f64,
    c2: f64,
    d1: f64,
    d2: f64,
    ultimate_bound: f64,
    recovery: Option<Recovery>,
}

fn cmd_bounds(
    config: &str,
    d1: Option<f64>,
    d2: Option<f64>,
    m: Magnitudes,
    json: bool,
) -> Result<()> {
    let r = resolve(config, &Overrides::default())?;
    let params = &r.simulation.params;
    let (d1, d2) = match (d1, d2, r.simulation.load.derivative_bounds()) {
        (Some(d1), Some(d2), _) => (d1, d2),
        (d1, d2, Some((a1, a2))) => (d1.unwrap_or(a1), d2.unwrap_or(a2)),
        _ => bail!("the load of {} jumps; pass --d1 and --d2", r.config.name),
    };
    let model = mismatch_model(params);
    let report = BoundsReport {
        scenario: r.config.name.clone(),
        c1: model.c1,
        c2: model.c2,
        d1,
        d2,
        ultimate_bound: ultimate_bound(params, d1, d2),
        recovery: recovery(&r, m)?,
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    println!("scenario                     {}", report.scenario);
    println!("c1                           {:.6}", report.c1);
    println!("c2                           {:.6}", report.c2);
    println!("d1, d2                       {}, {}", report.d1, report.d2);
    println!("ultimate bound               {:.6}", report.ultimate_bound);
    print_recovery(&report.recovery);
    Ok(())
}

fn cmd_plot(
    csv: &Path,
    panel: Panel,
    out: Option<PathBuf>,
    title: Option<String>,
    refs: &[Reference],
) -> Result<()> {
    let table =
        read_trajectory_csv_file(csv).with_context(|| format!("reading {}", csv.display()))?;
    let title = title.unwrap_or_else(|| panel.to_string());
    let svg = render_svg(&table, panel, refs, &title)?;
    let out = out.unwrap_or_else(|| csv.with_extension(format!("{panel}.svg")));
    std::fs::write(&out, svg).with_context(|| format!("writing {}", out.display()))?;
    println!("{}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Solve { problem } => cmd_solve(&problem).map(|_| true),
        Command::CheckParams {
            config,
            magnitudes,
            json,
        } => cmd_check_params(&config, magnitudes, json).map(|_| true),
        Command::Bounds {
            config,
            d1,
            d2,
            magnitudes,
            json,
        } => cmd_bounds(&config, d1, d2, magnitudes, json).map(|_| true),
        Command::Plot {
            csv,
            panel,
            out,
            title,
            references,
        } => cmd_plot(&csv, panel, out, title, &references).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
