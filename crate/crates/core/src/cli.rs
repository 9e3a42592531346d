//! Command-line front end. Every subcommand maps failures onto the exit codes
//! in [`exit`].

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command as Process, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use crate::agent::{self, AgentConfig, AgentError, Frame};
use crate::concentrator::{self, ConcentratorConfig};
use crate::output::{self, CsvLayout, SnapshotSink, TimeAxis};
use crate::scenario::{generate_detections, simulate, GroundTruthTrace, Scenario, ScenarioSpec};
use crate::synchro::{
    measurement_error, CompositionRegistry, DetectionReport, RegistrySpec, SynchroSnapshot, UnitStatus,
};
use crate::tmn::{network_violations, CompartmentId, NetworkSpec, TmnNetwork};
use crate::wire::DEFAULT_PORT;

pub mod exit {
    pub const OK: u8 = 0;
    pub const IO: u8 = 1;
    pub const VALIDATION: u8 = 2;
    pub const EQUIVALENCE: u8 = 3;
    /// `demo` with a killed agent whose stale-then-absent run was verified.
    pub const DEGRADED: u8 = 4;
}

#[derive(Debug, Parser)]
#[command(name = "synchromat", version, about = "Wide-area material monitoring toolkit")]
pub struct Cli {
    /// Overrides the noise seed of every scenario.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a network (and registry or scenario) and print its dimensions.
    Validate(ValidateArgs),
    /// Run a scenario in process and write truth, snapshots and plot data.
    Simulate(SimulateArgs),
    /// Write one unit's detection stream as a replay file.
    GenReplay(GenReplayArgs),
    /// Stream one unit's reports to a concentrator.
    Agent(AgentArgs),
    /// Collect reports from agents and write synchronized snapshots.
    Concentrator(ConcentratorArgs),
    /// Run a concentrator and one agent per unit locally and compare the
    /// result with the in-process simulation.
    Demo(DemoArgs),
    /// Summarize a snapshots.jsonl file and re-check its identities.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct WorldArgs {
    /// Scenario file; supplies both network and registry.
    #[arg(long, conflicts_with_all = ["network", "registry"])]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub network: Option<PathBuf>,
    #[arg(long)]
    pub registry: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Scenario, network or bare file to check.
    #[command(flatten)]
    pub world: WorldArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenReplayArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub unit: u32,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AgentArgs {
    #[arg(long)]
    pub unit: u32,
    #[arg(long, conflicts_with = "replay", required_unless_present = "replay")]
    pub scenario: Option<PathBuf>,
    #[arg(long, requires = "registry")]
    pub replay: Option<PathBuf>,
    /// Registry shared with the concentrator; needed with --replay.
    #[arg(long)]
    pub registry: Option<PathBuf>,
    #[arg(long, default_value_t = format!("127.0.0.1:{DEFAULT_PORT}"))]
    pub connect: String,
    #[arg(long)]
    pub period_ms: Option<u64>,
    /// Simulated hours per wall-clock second; sets the period of a scenario.
    #[arg(long)]
    pub tick_scale: Option<f64>,
    #[arg(long, default_value_t = 10)]
    pub max_attempts: u32,
}

#[derive(Debug, Args)]
pub struct ConcentratorArgs {
    #[arg(long, default_value_t = format!("0.0.0.0:{DEFAULT_PORT}"))]
    pub listen: String,
    #[command(flatten)]
    pub world: WorldArgs,
    #[arg(long, default_value_t = 1000)]
    pub period_ms: u64,
    #[arg(long, default_value_t = 200)]
    pub grace_ms: u64,
    #[arg(long, default_value_t = 3)]
    pub max_staleness: u64,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// Stop after closing this many epochs.
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long, default_value_t = 10_000)]
    pub start_timeout_ms: u64,
    #[arg(long, default_value_t = 500)]
    pub lead_ms: u64,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long, default_value = "demo-out")]
    pub out_dir: PathBuf,
    /// Simulated hours per wall-clock second.
    #[arg(long, default_value_t = 2.0)]
    pub tick_scale: f64,
    /// Defaults to one report period.
    #[arg(long)]
    pub grace_ms: Option<u64>,
    #[arg(long, default_value_t = 3)]
    pub max_staleness: u64,
    /// Kill this unit's agent part way through the run.
    #[arg(long)]
    pub kill_unit: Option<u32>,
    /// Epoch at which the agent is killed; defaults to mid-run.
    #[arg(long, requires = "kill_unit")]
    pub kill_at_epoch: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub snapshots: PathBuf,
    /// Also write plot data here; needs the registry.
    #[arg(long)]
    pub plots_dir: Option<PathBuf>,
    #[command(flatten)]
    pub world: WorldArgs,
    /// Epoch length for the plot time axis.
    #[arg(long, default_value_t = 1000)]
    pub period_ms: u64,
}

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    fn io(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: exit::IO,
            error: error.into(),
        }
    }

    fn invalid(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: exit::VALIDATION,
            error: error.into(),
        }
    }
}

type CmdResult = Result<u8, Failure>;

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> u8 {
    let seed = cli.seed;
    let result = match cli.command {
        Command::Validate(a) => cmd_validate(&a, seed),
        Command::Simulate(a) => cmd_simulate(&a, seed),
        Command::GenReplay(a) => cmd_gen_replay(&a, seed),
        Command::Agent(a) => cmd_agent(&a, seed),
        Command::Concentrator(a) => cmd_concentrator(&a),
        Command::Demo(a) => cmd_demo(&a, seed),
        Command::Report(a) => cmd_report(&a),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            f.code
        }
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::io)
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = read_text(path)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(Failure::invalid)
}

pub fn load_scenario(path: &Path, seed: Option<u64>) -> Result<Scenario, Failure> {
    let spec: ScenarioSpec = parse_json(path)?;
    let sc = Scenario::from_spec(&spec)
        .with_context(|| format!("invalid scenario {}", path.display()))
        .map_err(Failure::invalid)?;
    Ok(match seed {
        Some(s) => sc.with_seed(s),
        None => sc,
    })
}

fn load_world(w: &WorldArgs) -> Result<(TmnNetwork, CompositionRegistry), Failure> {
    if let Some(path) = &w.scenario {
        let sc = load_scenario(path, None)?;
        return Ok((sc.net, sc.reg));
    }
    let (Some(net), Some(reg)) = (&w.network, &w.registry) else {
        return Err(Failure::invalid(anyhow!(
            "give --scenario, or both --network and --registry"
        )));
    };
    Ok((load_network(net)?, load_registry(reg)?))
}

fn load_network(path: &Path) -> Result<TmnNetwork, Failure> {
    let spec: NetworkSpec = parse_json(path)?;
    crate::tmn::build_network(&spec)
        .with_context(|| format!("invalid network {}", path.display()))
        .map_err(Failure::invalid)
}

fn load_registry(path: &Path) -> Result<CompositionRegistry, Failure> {
    let spec: RegistrySpec = parse_json(path)?;
    CompositionRegistry::from_spec(&spec)
        .with_context(|| format!("invalid registry {}", path.display()))
        .map_err(Failure::invalid)
}

fn cmd_validate(a: &ValidateArgs, seed: Option<u64>) -> CmdResult {
    let w = &a.world;
    let mut problems = Vec::new();
    let network = if let Some(path) = &w.scenario {
        let spec: ScenarioSpec = parse_json(path)?;
        if let Err(e) = CompositionRegistry::from_spec(&spec.registry) {
            problems.push(format!("registry: {e}"));
        }
        let net_problems = network_violations(&spec.network);
        if net_problems.is_empty() && problems.is_empty() {
            if let Err(e) = load_scenario(path, seed) {
                problems.push(format!("{:#}", e.error));
            }
        }
        problems.extend(net_problems.iter().map(|e| e.to_string()));
        spec.network
    } else if let Some(path) = &w.network {
        if let Some(reg) = &w.registry {
            let spec: RegistrySpec = parse_json(reg)?;
            if let Err(e) = CompositionRegistry::from_spec(&spec) {
                problems.push(format!("registry: {e}"));
            }
        }
        let spec: NetworkSpec = parse_json(path)?;
        problems.extend(network_violations(&spec).iter().map(|e| e.to_string()));
        spec
    } else {
        return Err(Failure::invalid(anyhow!("give --scenario or --network")));
    };

    let n_v = network.nodes.len();
    let n_a = network.arcs.len();
    println!("n_v = {n_v}");
    println!("n_a = {n_a}");
    println!("n_c = {}", n_v + n_a);
    println!("S = {}", network.mmus.len());
    if problems.is_empty() {
        println!("valid");
        Ok(exit::OK)
    } else {
        for p in &problems {
            println!("violation: {p}");
        }
        Ok(exit::VALIDATION)
    }
}

/// Truth, detections and snapshots of a scenario computed without any
/// networking: the reference stream for end-to-end comparisons.
#[derive(Debug, Clone)]
pub struct InProcessRun {
    pub trace: GroundTruthTrace,
    pub detections: BTreeMap<CompartmentId, Vec<DetectionReport>>,
    pub snapshots: Vec<SynchroSnapshot>,
}

pub fn run_in_process(sc: &Scenario) -> Result<InProcessRun, crate::Error> {
    let trace = simulate(sc)?;
    let detections = generate_detections(&trace, sc);
    let mut snapshots = Vec::with_capacity(trace.states.len());
    for n in 0..trace.states.len() {
        let reports: Vec<DetectionReport> = detections.values().map(|r| r[n].clone()).collect();
        snapshots.push(SynchroSnapshot::compute(&sc.net, &sc.reg, n as u64, &reports)?);
    }
    Ok(InProcessRun {
        trace,
        detections,
        snapshots,
    })
}

fn sample_ts_ms(sc: &Scenario, epoch: u64) -> u64 {
    (sc.time_of(epoch) * 3_600_000.0).round() as u64
}

/// Writes `ground_truth.csv`, `snapshots.csv`, `snapshots.jsonl`,
/// `errors.tsv` and `plots/`.
pub fn write_simulation(sc: &Scenario, run: &InProcessRun, out_dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    let compartments: Vec<CompartmentId> = sc
        .net
        .nodes()
        .iter()
        .map(|c| c.id)
        .chain(sc.net.arcs().iter().map(|c| c.id))
        .collect();
    let mut truth = csv::Writer::from_path(out_dir.join("ground_truth.csv"))?;
    let mut header = vec!["epoch".to_string(), "t_h".to_string()];
    header.extend(compartments.iter().map(|k| format!("m_{k}")));
    header.push("total".into());
    truth.write_record(&header)?;
    for state in &run.trace.states {
        let mut row = vec![
            state.epoch().to_string(),
            output::format_decimal(sc.time_of(state.epoch())),
        ];
        row.extend(compartments.iter().map(|&k| state.mass_of(k).unwrap_or(0).to_string()));
        row.push(state.total().to_string());
        truth.write_record(&row)?;
    }
    truth.flush()?;

    let mut sink = SnapshotSink::new(out_dir, CsvLayout::new(&sc.net, &sc.reg));
    sink.open()?;
    for s in &run.snapshots {
        sink.persist(s, sample_ts_ms(sc, s.epoch))?;
    }

    let units: Vec<CompartmentId> = sc.net.mmus().iter().copied().collect();
    let mut errors = String::from("epoch\tt_h");
    for k in &units {
        errors.push_str(&format!("\te_{k}_mg"));
    }
    errors.push('\n');
    for (state, snap) in run.trace.states.iter().zip(&run.snapshots) {
        errors.push_str(&format!(
            "{}\t{}",
            state.epoch(),
            output::format_decimal(sc.time_of(state.epoch()))
        ));
        for &k in &units {
            errors.push_str(&format!("\t{}", measurement_error(state, snap, k)?));
        }
        errors.push('\n');
    }
    fs::write(out_dir.join("errors.tsv"), errors)?;

    output::emit_plot_data(
        &run.snapshots,
        &sc.reg,
        &TimeAxis::hours(sc.sample_time_h),
        &out_dir.join(output::PLOTS_DIR),
    )?;
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs, seed: Option<u64>) -> CmdResult {
    let sc = load_scenario(&a.scenario, seed)?;
    let run = run_in_process(&sc).map_err(Failure::invalid)?;
    write_simulation(&sc, &run, &a.out_dir).map_err(Failure::io)?;
    let nonzero_errors = run
        .trace
        .states
        .iter()
        .zip(&run.snapshots)
        .filter(|(t, s)| {
            sc.net
                .mmus()
                .iter()
                .any(|&k| measurement_error(t, s, k).unwrap_or(0) != 0)
        })
        .count();
    println!(
        "{} epochs, {} units; {} epochs with nonzero measurement error; wrote {}",
        run.snapshots.len(),
        sc.net.unit_count(),
        nonzero_errors,
        a.out_dir.display()
    );
    Ok(exit::OK)
}

fn cmd_gen_replay(a: &GenReplayArgs, seed: Option<u64>) -> CmdResult {
    let sc = load_scenario(&a.scenario, seed)?;
    let frames = agent::scenario_frames(&sc, CompartmentId(a.unit)).map_err(Failure::invalid)?;
    let text = agent::format_replay(&frames);
    match &a.out {
        Some(path) => fs::write(path, text)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(Failure::io)?,
        None => print!("{text}"),
    }
    Ok(exit::OK)
}

fn shutdown_flag() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    let f = flag.clone();
    if let Err(e) = ctrlc::set_handler(move || f.store(true, Ordering::Relaxed)) {
        log::warn!("signal handler not installed: {e}");
    }
    flag
}

fn agent_failure(e: AgentError) -> Failure {
    match e {
        AgentError::ConnectionRefused { .. } | AgentError::Io(_) | AgentError::Rejected(_) => Failure::io(e),
        other => Failure::invalid(other),
    }
}

fn cmd_agent(a: &AgentArgs, seed: Option<u64>) -> CmdResult {
    let unit = CompartmentId(a.unit);
    let (frames, reg_hash, location, default_period): (Vec<Frame>, String, _, u64) = if let Some(path) = &a.scenario {
        let sc = load_scenario(path, seed)?;
        let frames = agent::scenario_frames(&sc, unit).map_err(agent_failure)?;
        let period = match a.tick_scale {
            Some(scale) => agent::period_for_tick_scale(sc.sample_time_h, scale).map_err(agent_failure)?,
            None => 1000,
        };
        (frames, sc.reg.content_hash(), sc.net.location_of(unit), period)
    } else {
        let path = a.replay.as_ref().expect("clap requires a source");
        let reg = load_registry(a.registry.as_ref().expect("clap requires a registry"))?;
        if a.tick_scale.is_some() {
            log::warn!("--tick-scale needs a scenario; using the report period as given");
        }
        let frames = agent::load_replay(path).map_err(agent_failure)?;
        (frames, reg.content_hash(), None, 1000)
    };
    let cfg = AgentConfig {
        unit,
        location,
        frames,
        period_ms: a.period_ms.unwrap_or(default_period),
        connect: a.connect.clone(),
        reg_hash,
        max_attempts: a.max_attempts,
    };
    let summary = agent::run_agent(&cfg, shutdown_flag()).map_err(agent_failure)?;
    println!(
        "unit {unit}: sent {} reports ({} acked, {} late, {} duplicate), skipped {}, reconnected {} times",
        summary.reports_sent, summary.acked, summary.late, summary.duplicates, summary.skipped, summary.reconnects
    );
    Ok(exit::OK)
}

fn cmd_concentrator(a: &ConcentratorArgs) -> CmdResult {
    let (net, reg) = load_world(&a.world)?;
    let cfg = ConcentratorConfig {
        listen: a.listen.clone(),
        net,
        reg,
        period_ms: a.period_ms,
        grace_ms: a.grace_ms,
        max_staleness: a.max_staleness,
        out_dir: a.out_dir.clone(),
        epochs: a.epochs,
        start_timeout_ms: a.start_timeout_ms,
        lead_ms: a.lead_ms,
    };
    cfg.validate().map_err(Failure::invalid)?;
    let summary = concentrator::run(&cfg, shutdown_flag(), |addr| {
        println!("listening on {addr}");
        let _ = std::io::stdout().flush();
    })
    .map_err(Failure::io)?;
    println!(
        "closed {} epochs; accepted {}, late {}, duplicate {}; {} degraded epochs; {} rejected connections",
        summary.epochs_closed,
        summary.accepted,
        summary.late,
        summary.duplicates,
        summary.degraded_epochs,
        summary.rejected_connections
    );
    Ok(exit::OK)
}

/// Index of the first differing line, if any.
pub fn first_divergence(expected: &[String], actual: &[String]) -> Option<usize> {
    let common = expected.len().min(actual.len());
    (0..common)
        .find(|&i| expected[i] != actual[i])
        .or((expected.len() != actual.len()).then_some(common))
}

/// Checks that `unit` is fresh up to some epoch, then stale(1..=max) for
/// consecutive epochs, then absent to the end; every other unit stays fresh.
/// Returns the first non-fresh epoch.
pub fn check_dropout(history: &[SynchroSnapshot], unit: CompartmentId, max_staleness: u64) -> Result<u64, String> {
    let statuses: Vec<UnitStatus> = history
        .iter()
        .map(|s| s.status.get(&unit).copied().unwrap_or(UnitStatus::Absent))
        .collect();
    for s in history {
        if let Some((k, st)) = s.status.iter().find(|(k, st)| **k != unit && !st.is_fresh()) {
            return Err(format!("unit {k} was {st} at epoch {}", s.epoch));
        }
    }
    let first = statuses
        .iter()
        .position(|s| !s.is_fresh())
        .ok_or_else(|| format!("unit {unit} never dropped out"))?;
    for (i, st) in statuses.iter().enumerate().skip(first) {
        let age = (i - first) as u64 + 1;
        let expected = if age <= max_staleness {
            UnitStatus::Stale(age)
        } else {
            UnitStatus::Absent
        };
        if *st != expected {
            return Err(format!("unit {unit} was {st} at epoch {i}, expected {expected}"));
        }
    }
    Ok(history[first].epoch)
}

struct Children(Vec<(String, Child)>);

impl Drop for Children {
    fn drop(&mut self) {
        for (_, c) in &mut self.0 {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

fn wait_with_deadline(child: &mut Child, deadline: Instant) -> std::io::Result<Option<std::process::ExitStatus>> {
    loop {
        if let Some(status) = child.try_wait()? {
            return Ok(Some(status));
        }
        if Instant::now() >= deadline {
            return Ok(None);
        }
        thread::sleep(Duration::from_millis(20));
    }
}

fn cmd_demo(a: &DemoArgs, seed: Option<u64>) -> CmdResult {
    let sc = load_scenario(&a.scenario, seed)?;
    let period_ms = agent::period_for_tick_scale(sc.sample_time_h, a.tick_scale).map_err(agent_failure)?;
    let grace_ms = a.grace_ms.unwrap_or(period_ms);
    let live_dir = a.out_dir.join("live");
    let oracle_dir = a.out_dir.join("oracle");
    for d in [&live_dir, &oracle_dir] {
        if d.exists() {
            fs::remove_dir_all(d)
                .with_context(|| format!("clearing {}", d.display()))
                .map_err(Failure::io)?;
        }
    }

    if sc.net.mmus().is_empty() {
        fs::create_dir_all(&live_dir).map_err(Failure::io)?;
        SnapshotSink::new(&live_dir, CsvLayout::new(&sc.net, &sc.reg))
            .open()
            .map_err(Failure::io)?;
        println!(
            "no measurement units placed; wrote empty snapshots to {}",
            live_dir.display()
        );
        return Ok(exit::OK);
    }
    if let Some(k) = a.kill_unit {
        if !sc.net.mmus().contains(&CompartmentId(k)) {
            return Err(Failure::invalid(anyhow!("no unit placed at compartment {k}")));
        }
    }

    let reference = run_in_process(&sc).map_err(Failure::invalid)?;
    write_simulation(&sc, &reference, &oracle_dir).map_err(Failure::io)?;
    let epochs = sc.epoch_count();

    let exe = std::env::current_exe()
        .context("locating own executable")
        .map_err(Failure::io)?;
    let started = Instant::now();
    let mut conc = Process::new(&exe)
        .arg("concentrator")
        .arg("--listen")
        .arg("127.0.0.1:0")
        .arg("--scenario")
        .arg(&a.scenario)
        .args(["--period-ms", &period_ms.to_string()])
        .args(["--grace-ms", &grace_ms.to_string()])
        .args(["--max-staleness", &a.max_staleness.to_string()])
        .args(["--epochs", &epochs.to_string()])
        .arg("--out-dir")
        .arg(&live_dir)
        .stdout(Stdio::piped())
        .spawn()
        .context("starting concentrator")
        .map_err(Failure::io)?;
    let stdout = conc.stdout.take().expect("piped");
    let mut children = Children(vec![("concentrator".into(), conc)]);

    let mut lines = BufReader::new(stdout).lines();
    let addr = loop {
        match lines.next() {
            Some(Ok(line)) => {
                if let Some(addr) = line.strip_prefix("listening on ") {
                    break addr.trim().to_string();
                }
            }
            _ => return Err(Failure::io(anyhow!("concentrator exited before listening"))),
        }
    };
    let echo = thread::spawn(move || {
        for line in lines.map_while(Result::ok) {
            println!("concentrator: {line}");
        }
    });
    println!("concentrator on {addr}; {epochs} epochs of {period_ms} ms");

    for &k in sc.net.mmus() {
        let mut cmd = Process::new(&exe);
        cmd.arg("agent")
            .args(["--unit", &k.to_string()])
            .arg("--scenario")
            .arg(&a.scenario)
            .args(["--connect", &addr])
            .args(["--period-ms", &period_ms.to_string()]);
        if let Some(s) = seed {
            cmd.args(["--seed", &s.to_string()]);
        }
        let child = cmd.spawn().context("starting agent").map_err(Failure::io)?;
        children.0.push((format!("agent {k}"), child));
    }

    if let Some(k) = a.kill_unit {
        let at = a.kill_at_epoch.unwrap_or(epochs / 2);
        thread::sleep(Duration::from_millis(500 + period_ms * at));
        let name = format!("agent {k}");
        if let Some((_, child)) = children.0.iter_mut().find(|(n, _)| *n == name) {
            let _ = child.kill();
            println!("killed {name} around epoch {at}");
        }
    }

    let deadline = started + Duration::from_millis(15_000 + 2 * period_ms * (epochs + 2) + grace_ms);
    let status = wait_with_deadline(&mut children.0[0].1, deadline).map_err(Failure::io)?;
    let _ = echo.join();
    match status {
        Some(s) if s.success() => {}
        Some(s) => return Err(Failure::io(anyhow!("concentrator failed: {s}"))),
        None => return Err(Failure::io(anyhow!("concentrator did not finish in time"))),
    }
    for (name, child) in children.0.iter_mut().skip(1) {
        match wait_with_deadline(child, Instant::now() + Duration::from_secs(5)) {
            Ok(Some(s))
                if !s.success() && Some(name.as_str()) != a.kill_unit.map(|k| format!("agent {k}")).as_deref() =>
            {
                eprintln!("{name} exited with {s}")
            }
            _ => {}
        }
    }
    println!("run took {:.1} s", started.elapsed().as_secs_f64());

    let live_jsonl = live_dir.join(output::SNAPSHOTS_JSONL);
    if let Some(k) = a.kill_unit {
        let records = output::read_jsonl(&live_jsonl).map_err(Failure::io)?;
        let history = records
            .iter()
            .map(|r| r.to_snapshot())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Failure::io(anyhow!(e)))?;
        return match check_dropout(&history, CompartmentId(k), a.max_staleness) {
            Ok(from) => {
                println!(
                    "degraded run: unit {k} stale from epoch {from}, absent from epoch {}",
                    from + a.max_staleness
                );
                Ok(exit::DEGRADED)
            }
            Err(why) => {
                println!("unexpected dropout pattern: {why}");
                Ok(exit::EQUIVALENCE)
            }
        };
    }

    let compare =
        |name: &str, read: fn(&Path) -> Result<Vec<String>, output::OutputError>| -> Result<Option<usize>, Failure> {
            let expected = read(&oracle_dir.join(name)).map_err(Failure::io)?;
            let actual = read(&live_dir.join(name)).map_err(Failure::io)?;
            Ok(first_divergence(&expected, &actual))
        };
    let jsonl = compare(output::SNAPSHOTS_JSONL, output::comparable_jsonl)?;
    let csv = compare(output::SNAPSHOTS_CSV, output::comparable_csv)?;
    match (jsonl, csv) {
        (None, None) => {
            println!("equivalent: {epochs} snapshots match the in-process run");
            Ok(exit::OK)
        }
        (Some(i), _) => {
            println!("snapshots diverge at epoch {i}");
            Ok(exit::EQUIVALENCE)
        }
        (None, Some(row)) => {
            println!("CSV diverges at epoch {}", row.saturating_sub(1));
            Ok(exit::EQUIVALENCE)
        }
    }
}

fn cmd_report(a: &ReportArgs) -> CmdResult {
    let records = output::read_jsonl(&a.snapshots).map_err(|e| match e {
        output::OutputError::BadRecord { .. } => Failure::invalid(e),
        other => Failure::io(other),
    })?;
    let mut history = Vec::with_capacity(records.len());
    for r in &records {
        history.push(
            r.to_snapshot()
                .map_err(|e| Failure::invalid(anyhow!("epoch {}: {e}", r.epoch)))?,
        );
    }
    let mut broken = 0;
    for s in &history {
        if let Err(e) = s.check_identities() {
            println!("epoch {}: {e}", s.epoch);
            broken += 1;
        }
    }
    let degraded = history
        .iter()
        .filter(|s| s.status.values().any(|st| !st.is_fresh()))
        .count();
    println!(
        "{} snapshots, {degraded} degraded, {broken} failing identities",
        history.len()
    );
    if let Some(last) = history.last() {
        println!("latest epoch {}: l_hat = {} mg", last.epoch, last.total_mass);
        for (k, m) in &last.per_unit_mass {
            println!("  m_hat_{k} = {m} mg ({})", last.status[k]);
        }
    }
    if let Some(dir) = &a.plots_dir {
        let (_, reg) = load_world(&a.world)?;
        output::emit_plot_data(&history, &reg, &TimeAxis::seconds_from_ms(a.period_ms), dir).map_err(Failure::io)?;
    }
    Ok(if broken == 0 { exit::OK } else { exit::VALIDATION })
}
