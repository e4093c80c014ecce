//! `fedchain` command-line driver.
//!
//! Exit codes: 0 ok, 1 operational error, 2 a check failed (assertion,
//! chain verification, rejected market operation), 3 malformed input or
//! arguments.

use std::io::Read;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fedchain_core::adapter::AdapterRule;
use fedchain_core::energy::market as mkt;
use fedchain_core::energy::{plan_day_ahead, BudgetRate, PowerForecast, Zone};
use fedchain_core::foodchain::{generate_qr_payload, trace_lot, TraceError};
use fedchain_core::harness::{
    emit_report, load_scenario, parse_scenario, Action, LoadError, Scenario, Step, World,
};
use fedchain_core::ledger::store::verify_dir;
use serde::Deserialize;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(
    name = "fedchain",
    version,
    about = "Federated ledgers: scenario runs, verification, tracing and the EV market"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Runs a scenario script and writes its report.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Report path; a `.txt` summary is written next to it. Prints JSON when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also persist every ledger here.
        #[arg(long)]
        chain_dir: Option<PathBuf>,
    },
    /// Re-verifies persisted chains from genesis.
    Verify {
        #[arg(long)]
        chain_dir: PathBuf,
    },
    /// Maps one platform's NDJSON events onto ledgers.
    Ingest {
        #[arg(long)]
        platform: String,
        /// JSON array of adapter rules.
        #[arg(long)]
        rules: PathBuf,
        /// NDJSON file, or `-` for standard input.
        #[arg(long = "in")]
        input: PathBuf,
        /// Federation to ingest into; defaults to one open ledger per rule target.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        chain_dir: Option<PathBuf>,
    },
    /// Traces a lot after running a scenario.
    Trace {
        lot: String,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    #[command(subcommand)]
    Market(MarketCmd),
    /// Serves the HTTP gateway over a scenario's federation.
    Serve {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

#[derive(Subcommand)]
enum MarketCmd {
    /// Turns a power forecast into day-ahead requests.
    PlanDayAhead {
        #[arg(long)]
        forecast: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        lat: Option<i64>,
        #[arg(long, allow_hyphen_values = true)]
        lon: Option<i64>,
        #[arg(long)]
        radius_m: Option<u64>,
        /// Incentive tokens per `per_wh` watt-hours of surplus.
        #[arg(long)]
        tokens: Option<u64>,
        #[arg(long)]
        per_wh: Option<u64>,
    },
    /// Closes bidding on a request once the scenario script has run.
    Close {
        id: String,
        #[arg(long)]
        scenario: PathBuf,
        /// Acting label; defaults to the scenario's DSO.
        #[arg(long = "as")]
        actor: Option<String>,
    },
    /// Settles a request once the scenario script has run.
    Settle {
        id: String,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long = "as")]
        actor: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Text,
}

enum Failure {
    Error(String),
    Check(String),
    Schema(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Error(_) => 1,
            Failure::Check(_) => 2,
            Failure::Schema(_) => 3,
        }
    }
}

type CliResult = Result<(), Failure>;

fn err(e: impl std::fmt::Display) -> Failure {
    Failure::Error(e.to_string())
}

fn scenario(path: &Path, seed: Option<u64>) -> Result<Scenario, Failure> {
    let mut s = load_scenario(path).map_err(|e| match e {
        LoadError::Schema(s) => Failure::Schema(format!("{}: {s}", path.display())),
        e => err(e),
    })?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    Ok(s)
}

fn read_input(path: &Path) -> Result<String, Failure> {
    if path.as_os_str() == "-" {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s).map_err(err)?;
        Ok(s)
    } else {
        std::fs::read_to_string(path).map_err(|e| err(format!("{}: {e}", path.display())))
    }
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

/// A world with the scenario script applied, without settling leftovers.
fn scripted_world(s: Scenario) -> Result<World, Failure> {
    let mut w = World::new(s.clone()).map_err(err)?;
    for (i, step) in s.script.iter().enumerate() {
        w.execute(i, step);
    }
    Ok(w)
}

fn cmd_run(
    path: &Path,
    seed: Option<u64>,
    out: Option<&Path>,
    chain_dir: Option<&Path>,
) -> CliResult {
    let s = scenario(path, seed)?;
    let (report, world) = fedchain_core::harness::run(&s).map_err(err)?;
    match out {
        Some(p) => {
            emit_report(&report, p).map_err(err)?;
            print!("{}", report.summary());
        }
        None => print!("{}", report.to_json()),
    }
    if let Some(dir) = chain_dir {
        world.write_chains(dir).map_err(err)?;
    }
    if report.ok {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "scenario {} failed its checks",
            report.scenario
        )))
    }
}

fn cmd_verify(dir: &Path) -> CliResult {
    let reports = verify_dir(dir).map_err(err)?;
    if reports.is_empty() {
        return Err(err(format!("no chains in {}", dir.display())));
    }
    let mut bad = 0;
    for (id, r) in &reports {
        if r.ok {
            println!("{id}: ok, height {}", r.height);
        } else {
            bad += 1;
            println!(
                "{id}: BROKEN at height {}: {}",
                r.first_bad_height.map_or("?".into(), |h| h.to_string()),
                r.reason.as_deref().unwrap_or("")
            );
        }
    }
    if bad == 0 {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "{bad} of {} chains failed verification",
            reports.len()
        )))
    }
}

/// One open ledger per rule target, signed by the rules' adapter labels.
fn ingest_scenario(rules: &[AdapterRule]) -> Result<Scenario, Failure> {
    let mut actors: Vec<&str> = rules.iter().map(|r| r.signer.as_str()).collect();
    actors.sort();
    actors.dedup();
    let mut ledgers: Vec<&str> = rules.iter().map(|r| r.ledger.as_str()).collect();
    ledgers.sort();
    ledgers.dedup();
    let v = json!({
        "name": "ingest",
        "seed": 0,
        "actors": actors,
        "ledgers": ledgers.iter().map(|id| json!({"id": id, "kind": "open"})).collect::<Vec<_>>(),
        "adapter_rules": rules,
        "script": [],
    });
    parse_scenario(&v.to_string()).map_err(|e| Failure::Schema(e.to_string()))
}

fn cmd_ingest(
    platform: &str,
    rules: &Path,
    input: &Path,
    scen: Option<&Path>,
    chain_dir: Option<&Path>,
) -> CliResult {
    let text =
        std::fs::read_to_string(rules).map_err(|e| err(format!("{}: {e}", rules.display())))?;
    let rules: Vec<AdapterRule> = serde_json::from_str(&text)
        .map_err(|e| Failure::Schema(format!("{}: {e}", rules.display())))?;
    let mut s = match scen {
        Some(p) => scenario(p, None)?,
        None => ingest_scenario(&rules)?,
    };
    s.adapter_rules = rules;
    s.script.clear();
    let mut w = World::new(s).map_err(err)?;
    let stream = read_input(input)?;
    let mut other = 0usize;
    let mine: String = stream
        .lines()
        .filter(|l| {
            let p = serde_json::from_str::<Value>(l)
                .ok()
                .and_then(|v| v.get("platform").cloned());
            let keep = p
                .as_ref()
                .and_then(Value::as_str)
                .is_none_or(|p| p == platform);
            other += usize::from(!keep);
            keep
        })
        .map(|l| format!("{l}\n"))
        .collect();
    let r = w
        .ingest_text(&mine)
        .map_err(|e| err(format!("{}: {}", e.code, e.detail)))?;
    let summary = json!({
        "platform": platform,
        "other_platforms": other,
        "summary": w.ingestion,
        "rejected": r.rejected,
        "heights": w.net.ledgers().map(|l| (l.id().to_string(), l.height())).collect::<std::collections::BTreeMap<_, _>>(),
    });
    print_json(&summary);
    if let Some(dir) = chain_dir {
        w.write_chains(dir).map_err(err)?;
    }
    Ok(())
}

fn cmd_trace(lot: &str, format: Format, path: &Path, seed: Option<u64>) -> CliResult {
    let w = scripted_world(scenario(path, seed)?)?;
    let cfg = w
        .food
        .as_ref()
        .ok_or_else(|| err("scenario has no foodchain deployment"))?;
    let trace_err = |e: TraceError| match e {
        TraceError::LotNotFound(_) => Failure::Check(e.to_string()),
        e => err(e),
    };
    let report = trace_lot(&w.net, &w.keys, cfg, lot, &w.conditions).map_err(trace_err)?;
    let qr = generate_qr_payload(&w.net, cfg, lot).map_err(trace_err)?;
    match format {
        Format::Json => {
            let mut v = serde_json::to_value(&report).expect("serializable");
            v["qr"] = json!(qr);
            print_json(&v);
        }
        Format::Text => println!("{}qr {qr}", report.to_text()),
    }
    Ok(())
}

#[derive(Deserialize)]
struct ForecastFile {
    #[serde(flatten)]
    forecast: PowerForecast,
    #[serde(default)]
    zone: Option<Zone>,
    #[serde(default)]
    rate: Option<BudgetRate>,
}

fn cmd_plan(
    path: &Path,
    lat: Option<i64>,
    lon: Option<i64>,
    radius_m: Option<u64>,
    tokens: Option<u64>,
    per_wh: Option<u64>,
) -> CliResult {
    let text = read_input(path)?;
    let f: ForecastFile = serde_json::from_str(&text)
        .map_err(|e| Failure::Schema(format!("{}: {e}", path.display())))?;
    let z = f.zone.unwrap_or(Zone {
        lat: 0,
        lon: 0,
        radius_m: 1000,
    });
    let zone = Zone {
        lat: lat.unwrap_or(z.lat),
        lon: lon.unwrap_or(z.lon),
        radius_m: radius_m.unwrap_or(z.radius_m),
    };
    let r = f.rate.unwrap_or(BudgetRate {
        tokens: 1,
        per_wh: 1000,
    });
    let rate = BudgetRate {
        tokens: tokens.unwrap_or(r.tokens),
        per_wh: per_wh.unwrap_or(r.per_wh),
    };
    let plan =
        plan_day_ahead(&f.forecast, zone, rate).map_err(|e| Failure::Schema(e.to_string()))?;
    print_json(&plan);
    Ok(())
}

enum MarketOp {
    Close,
    Settle,
}

fn cmd_market(op: MarketOp, id: &str, path: &Path, actor: Option<String>) -> CliResult {
    let s = scenario(path, None)?;
    let mut w = scripted_world(s)?;
    let dep = w
        .market
        .clone()
        .ok_or_else(|| err("scenario has no market deployment"))?;
    let actor = actor.unwrap_or_else(|| dep.dso.clone());
    let r = mkt::request(&w.net, &dep, id)
        .map_err(|e| Failure::Check(e.to_string()))?
        .clone();
    let lead = w
        .net
        .ledger(&dep.market)
        .map_err(err)?
        .state()
        .market
        .params
        .lead_ms;
    let (at, action) = match op {
        MarketOp::Close => (
            r.start.saturating_sub(lead),
            Action::Close {
                actor,
                request: id.to_string(),
            },
        ),
        MarketOp::Settle => (
            r.end,
            Action::Settle {
                actor,
                request: id.to_string(),
            },
        ),
    };
    let at = at.max(w.net.now());
    w.net.advance_to(at);
    let step = Step {
        at,
        action,
        expect_error: None,
    };
    let done = w.apply(w.steps.len(), &step);
    w.background();
    let out = match done {
        Ok(detail) => detail,
        Err(e) => return Err(Failure::Check(format!("{id}: {} ({})", e.code, e.detail))),
    };
    let mut v = json!({ "request": id, "at": at, "result": out });
    if matches!(op, MarketOp::Settle) {
        let (report, _) = mkt::finish_settlement(&mut w.net, &w.keys, &dep, id).map_err(err)?;
        v["settlement"] = serde_json::to_value(report).expect("serializable");
    } else {
        v["record"] = serde_json::to_value(mkt::request(&w.net, &dep, id).map_err(err)?)
            .expect("serializable");
    }
    print_json(&v);
    Ok(())
}

fn cmd_serve(path: &Path, addr: SocketAddr) -> CliResult {
    let s = scenario(path, None)?;
    let rt = tokio::runtime::Runtime::new().map_err(err)?;
    rt.block_on(async {
        let h = fedchain_gateway::start_service(s, addr)
            .await
            .map_err(err)?;
        eprintln!("listening on {}", h.base_url());
        h.wait().await.map_err(err)
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(3)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let r = match cli.cmd {
        Cmd::Run {
            scenario,
            seed,
            out,
            chain_dir,
        } => cmd_run(&scenario, seed, out.as_deref(), chain_dir.as_deref()),
        Cmd::Verify { chain_dir } => cmd_verify(&chain_dir),
        Cmd::Ingest {
            platform,
            rules,
            input,
            scenario,
            chain_dir,
        } => cmd_ingest(
            &platform,
            &rules,
            &input,
            scenario.as_deref(),
            chain_dir.as_deref(),
        ),
        Cmd::Trace {
            lot,
            format,
            scenario,
            seed,
        } => cmd_trace(&lot, format, &scenario, seed),
        Cmd::Market(MarketCmd::PlanDayAhead {
            forecast,
            lat,
            lon,
            radius_m,
            tokens,
            per_wh,
        }) => cmd_plan(&forecast, lat, lon, radius_m, tokens, per_wh),
        Cmd::Market(MarketCmd::Close {
            id,
            scenario,
            actor,
        }) => cmd_market(MarketOp::Close, &id, &scenario, actor),
        Cmd::Market(MarketCmd::Settle {
            id,
            scenario,
            actor,
        }) => cmd_market(MarketOp::Settle, &id, &scenario, actor),
        Cmd::Serve { scenario, addr } => cmd_serve(&scenario, addr),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Error(m) | Failure::Check(m) | Failure::Schema(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}
