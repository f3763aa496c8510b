//! The `depman` command: configure units, distribute them to targets and
//! drive their lifecycle through a deployment manager.

use std::fs;
use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::sync::mpsc;

use clap::{Parser, Subcommand};
use depman::config::{self, DeploymentConfiguration};
use depman::manager::{DeploymentManager, ManagerError, ModuleFilter, TargetModuleID};
use depman::progress::{ProgressObject, StatusState};
use depman::targets::{Target, TargetKind};
use depman::unit::{self, ModuleKind};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILED: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CONNECTION: i32 = 3;
}

#[derive(Debug, Parser)]
#[command(name = "depman", version, about = "Deploy units to application server targets")]
pub struct Cli {
    /// Manager URI: depman://host:port/ (a target registry) or depman:disconnected
    #[arg(long, global = true, env = "DEPMAN_MANAGER")]
    pub manager: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Bind references and write the deployed unit
    Configure {
        unit: PathBuf,
        /// `reference=resource`; repeatable
        #[arg(long = "bind", value_name = "REF=RESOURCE")]
        bindings: Vec<String>,
        /// Prompt for each reference left unbound
        #[arg(long)]
        interactive: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Show the targets known to the manager
    Targets,
    /// Install a deployed unit on servers and groups
    Distribute {
        unit: PathBuf,
        #[arg(long = "target", required = true)]
        targets: Vec<String>,
        /// Skip the dependency check against each server
        #[arg(long)]
        no_dep_check: bool,
    },
    Start {
        #[arg(required = true)]
        modules: Vec<TargetModuleID>,
    },
    Stop {
        #[arg(required = true)]
        modules: Vec<TargetModuleID>,
    },
    Undeploy {
        #[arg(required = true)]
        modules: Vec<TargetModuleID>,
    },
    /// List deployed modules (all servers unless targets are given)
    List {
        #[arg(long)]
        kind: Option<ModuleKind>,
        #[arg(long, default_value = "available")]
        filter: ModuleFilter,
        #[arg(long = "target")]
        targets: Vec<String>,
    },
}

/// A failed command: exit code plus the message for standard error.
struct Failure(i32, String);

impl From<ManagerError> for Failure {
    fn from(e: ManagerError) -> Self {
        let code = match e {
            ManagerError::ConnectionRefused { .. } | ManagerError::AgentUnreachable { .. } => exit::CONNECTION,
            ManagerError::MalformedUri(_) | ManagerError::UnknownTarget(_) | ManagerError::NoTargets => exit::USAGE,
            _ => exit::FAILED,
        };
        Failure(code, e.to_string())
    }
}

struct Io<'a> {
    stdin: &'a mut dyn BufRead,
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
}

/// Runs one command line (`args[0]` is the program name) and returns the
/// exit code.
pub fn run<I, S>(args: I, stdin: &mut dyn BufRead, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { stderr.write_all(text.as_bytes()) } else { stdout.write_all(text.as_bytes()) };
            return code;
        }
    };
    let mut io = Io { stdin, out: stdout, err: stderr };
    match execute(cli, &mut io) {
        Ok(code) => code,
        Err(Failure(code, message)) => {
            let _ = writeln!(io.err, "depman: {message}");
            code
        }
    }
}

fn execute(cli: Cli, io: &mut Io) -> Result<i32, Failure> {
    match cli.command {
        Command::Configure {
            unit,
            bindings,
            interactive,
            out,
        } => configure(&unit, &bindings, interactive, &out, io),
        command => {
            let uri = cli
                .manager
                .ok_or_else(|| Failure(exit::USAGE, "no manager URI (use --manager or DEPMAN_MANAGER)".into()))?;
            let manager = DeploymentManager::connect(&uri)?;
            connected(&manager, command, io)
        }
    }
}

fn failed(e: impl std::fmt::Display) -> Failure {
    Failure(exit::FAILED, e.to_string())
}

fn print(io: &mut Io, line: impl std::fmt::Display) -> Result<(), Failure> {
    writeln!(io.out, "{line}").map_err(failed)
}

fn configure(path: &PathBuf, bindings: &[String], interactive: bool, out: &PathBuf, io: &mut Io) -> Result<i32, Failure> {
    let mut pairs = Vec::new();
    for b in bindings {
        match b.split_once('=') {
            Some((r, res)) if !r.is_empty() && !res.is_empty() => pairs.push((r, res)),
            _ => return Err(Failure(exit::USAGE, format!("--bind `{b}` is not of the form reference=resource"))),
        }
    }
    let data = fs::read(path).map_err(|e| failed(format!("{}: {e}", path.display())))?;
    let unit = unit::open_unit(&data).map_err(|e| failed(format!("{}: {e}", path.display())))?;
    let mut config = config::create_configuration(&unit).map_err(failed)?;
    for (r, res) in pairs {
        config = config.bind(r, res).map_err(failed)?;
    }
    if interactive {
        config = prompt_bindings(config, io)?;
    }
    let unbound = config.unbound_references();
    if !unbound.is_empty() {
        for r in &unbound {
            writeln!(io.err, "unbound reference: {r}").map_err(failed)?;
        }
        return Err(failed(format!("{} reference(s) left unbound", unbound.len())));
    }
    for warning in unit.deployables().iter().flat_map(|d| d.deps.warnings()) {
        writeln!(io.err, "warning: {warning}").map_err(failed)?;
    }
    let deployed = config::generate_deployed_unit(&unit, &config).map_err(failed)?;
    fs::write(out, deployed.to_bytes()).map_err(|e| failed(format!("{}: {e}", out.display())))?;
    for (d, r, res) in config.bindings() {
        print(io, format!("bind {d}/{r} = {res}"))?;
    }
    for stub in &deployed.manifest.entries {
        print(io, format!("stub {} {}", stub.component, stub.digest))?;
    }
    print(io, format!("wrote {}", out.display()))?;
    Ok(exit::OK)
}

/// Asks once for each unbound reference; an empty answer leaves it unbound.
fn prompt_bindings(mut config: DeploymentConfiguration, io: &mut Io) -> Result<DeploymentConfiguration, Failure> {
    for reference in config.unbound_references() {
        let owners: Vec<&str> = config
            .reference_nodes()
            .filter(|(_, n)| n.reference_name.as_deref() == Some(&reference))
            .map(|(d, _)| d)
            .collect();
        write!(io.out, "resource for {reference} (in {}): ", owners.join(", ")).map_err(failed)?;
        io.out.flush().map_err(failed)?;
        let mut line = String::new();
        if io.stdin.read_line(&mut line).map_err(failed)? == 0 {
            writeln!(io.out).map_err(failed)?;
            break;
        }
        let answer = line.trim();
        if answer.is_empty() {
            continue;
        }
        match config.bind(&reference, answer) {
            Ok(c) => config = c,
            Err(e) => writeln!(io.err, "{e}").map_err(failed)?,
        }
    }
    Ok(config)
}

fn resolve_targets(manager: &DeploymentManager, ids: &[String]) -> Result<Vec<Target>, Failure> {
    if ids.is_empty() {
        return Ok(manager.get_targets()?.into_iter().filter(|t| !t.is_group()).collect());
    }
    ids.iter().map(|id| manager.target(id).map_err(Failure::from)).collect()
}

fn connected(manager: &DeploymentManager, command: Command, io: &mut Io) -> Result<i32, Failure> {
    let progress = match command {
        Command::Configure { .. } => unreachable!("handled without a manager"),
        Command::Targets => {
            for t in manager.get_targets()? {
                let line = match &t.kind {
                    TargetKind::Server { endpoint, site } => format!("server {} {endpoint} site={site}", t.id),
                    TargetKind::Group { members } => format!("group {} {}", t.id, members.join(",")),
                };
                print(io, line)?;
            }
            return Ok(exit::OK);
        }
        Command::List { kind, filter, targets } => {
            let targets = resolve_targets(manager, &targets)?;
            for id in manager.list_modules(kind, &targets, filter)? {
                print(io, id)?;
            }
            return Ok(exit::OK);
        }
        Command::Distribute {
            unit,
            targets,
            no_dep_check,
        } => {
            let targets = resolve_targets(manager, &targets)?;
            let data = fs::read(&unit).map_err(|e| failed(format!("{}: {e}", unit.display())))?;
            let deployed = unit::open_deployed(&data).map_err(|e| failed(format!("{}: {e}", unit.display())))?;
            manager.distribute(&targets, &deployed, !no_dep_check)?
        }
        Command::Start { modules } => manager.start(&modules)?,
        Command::Stop { modules } => manager.stop(&modules)?,
        Command::Undeploy { modules } => manager.undeploy(&modules)?,
    };
    follow(&progress, io)
}

/// Prints status lines as listener events arrive, then the resulting module
/// ids.
fn follow(progress: &ProgressObject, io: &mut Io) -> Result<i32, Failure> {
    let (tx, rx) = mpsc::channel();
    progress.add_listener(move |status| {
        let _ = tx.send(status.clone());
    });
    let mut last = None;
    for status in rx {
        print(io, &status)?;
        if status.state.is_terminal() {
            last = Some(status);
            break;
        }
    }
    let status = last.unwrap_or_else(|| progress.wait());
    for id in progress.result_ids() {
        print(io, format!("module {id}"))?;
    }
    Ok(match status.state {
        StatusState::Completed => exit::OK,
        _ => exit::FAILED,
    })
}
