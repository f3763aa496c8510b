//! The deployment manager: targets, distribute / start / stop / undeploy
//! with progress tracking, module listing, and disconnected mode.
//!
//! Each server target has one worker thread; operations touching the same
//! server run in submission order, operations on distinct servers run
//! concurrently.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};
use thiserror::Error;

use crate::agent::{InstalledModule, ModuleState, RegistryEndpoint, ServerSnapshot};
use crate::config::{self, ConfigError, DeploymentConfiguration};
use crate::depres;
use crate::progress::{CommandType, ProgressObject, StatusState};
use crate::targets::{self, Target, TargetKind};
use crate::unit::{DeployableUnit, DeployedUnit, ModuleKind};
use crate::wire::{Client, ClientError};

/// A module deployed on one server. Application children carry their
/// parent.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TargetModuleID {
    pub server_id: String,
    pub unit_name: String,
    pub parent: Option<Box<TargetModuleID>>,
}

impl TargetModuleID {
    pub fn new(server_id: impl Into<String>, unit_name: impl Into<String>) -> Self {
        TargetModuleID {
            server_id: server_id.into(),
            unit_name: unit_name.into(),
            parent: None,
        }
    }

    pub fn child(&self, unit_name: impl Into<String>) -> Self {
        TargetModuleID {
            server_id: self.server_id.clone(),
            unit_name: unit_name.into(),
            parent: Some(Box::new(self.clone())),
        }
    }
}

impl TargetModuleID {
    fn path(&self) -> Vec<&str> {
        let mut path = self.parent.as_ref().map(|p| p.path()).unwrap_or_default();
        path.push(&self.unit_name);
        path
    }
}

/// By server, then by module path, so an application sorts before its
/// children.
impl Ord for TargetModuleID {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (&self.server_id, self.path()).cmp(&(&other.server_id, other.path()))
    }
}

impl PartialOrd for TargetModuleID {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for TargetModuleID {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.parent {
            Some(p) => write!(f, "{p}/{}", self.unit_name),
            None => write!(f, "{}/{}", self.server_id, self.unit_name),
        }
    }
}

impl FromStr for TargetModuleID {
    type Err = String;

    /// `server/unit` or `server/app/child`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('/').collect();
        let valid = |p: &&str| !p.is_empty() && p.chars().all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c));
        if !(2..=3).contains(&parts.len()) || !parts.iter().all(valid) {
            return Err(format!("`{s}` is not a module id (expected server/unit or server/app/child)"));
        }
        let root = TargetModuleID::new(parts[0], parts[1]);
        Ok(match parts.get(2) {
            Some(child) => root.child(*child),
            None => root,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModuleFilter {
    Available,
    Running,
    NonRunning,
}

impl FromStr for ModuleFilter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "available" => Ok(ModuleFilter::Available),
            "running" => Ok(ModuleFilter::Running),
            "non-running" => Ok(ModuleFilter::NonRunning),
            _ => Err(format!("unknown filter `{s}` (available, running, non-running)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum ManagerError {
    #[error("malformed manager URI `{0}`")]
    MalformedUri(String),
    #[error("connection refused by {uri}: {message}")]
    ConnectionRefused { uri: String, message: String },
    #[error("manager is disconnected; only configuration is available")]
    Disconnected,
    #[error("unknown target `{0}`")]
    UnknownTarget(String),
    #[error("no targets given")]
    NoTargets,
    #[error("AgentUnreachable: {server}: {message}")]
    AgentUnreachable { server: String, message: String },
    #[error("invalid targets: {0}")]
    Targets(#[from] targets::TargetsError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

pub const DISCONNECTED_URI: &str = "depman:disconnected";

type Job = Box<dyn FnOnce() + Send>;

struct Connected {
    targets: BTreeMap<String, Target>,
    workers: Mutex<HashMap<String, Sender<Job>>>,
}

/// Entry point for deployment tools. Obtained from [`connect`] or built
/// directly from a target list.
pub struct DeploymentManager {
    connected: Option<Arc<Connected>>,
    timeout: Duration,
}

/// Resolves a manager URI: `depman://host:port/` contacts the target
/// registry at `host:port`; `depman:disconnected` gives a configuration-only
/// manager.
pub fn connect(uri: &str) -> Result<DeploymentManager, ManagerError> {
    DeploymentManager::connect(uri)
}

impl DeploymentManager {
    pub fn connect(uri: &str) -> Result<DeploymentManager, ManagerError> {
        if uri == DISCONNECTED_URI {
            return Ok(DeploymentManager::disconnected());
        }
        let endpoint = uri
            .strip_prefix("depman://")
            .map(|rest| rest.split('/').next().unwrap_or_default())
            .filter(|hp| hp.rsplit_once(':').is_some_and(|(h, p)| !h.is_empty() && p.parse::<u16>().is_ok()))
            .ok_or_else(|| ManagerError::MalformedUri(uri.to_string()))?;
        let refused = |e: ClientError| ManagerError::ConnectionRefused {
            uri: uri.to_string(),
            message: e.to_string(),
        };
        let timeout = Duration::from_secs(2);
        let mut client = Client::connect(endpoint, timeout).map_err(refused)?;
        let response = client.call("TARGETS", json!({})).map_err(refused)?;
        let xml = response
            .get("targets_xml")
            .and_then(Value::as_str)
            .ok_or_else(|| ManagerError::ConnectionRefused {
                uri: uri.to_string(),
                message: "registry response lacks targets".into(),
            })?;
        let targets = targets::parse_targets(xml.as_bytes())?;
        DeploymentManager::with_targets(targets)
    }

    pub fn with_targets(targets: Vec<Target>) -> Result<DeploymentManager, ManagerError> {
        targets::validate_targets(&targets)?;
        Ok(DeploymentManager {
            connected: Some(Arc::new(Connected {
                targets: targets.into_iter().map(|t| (t.id.clone(), t)).collect(),
                workers: Mutex::new(HashMap::new()),
            })),
            timeout: Duration::from_secs(2),
        })
    }

    pub fn disconnected() -> DeploymentManager {
        DeploymentManager {
            connected: None,
            timeout: Duration::from_secs(2),
        }
    }

    /// Connect timeout for agent connections.
    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    pub fn is_connected(&self) -> bool {
        self.connected.is_some()
    }

    fn conn(&self) -> Result<&Arc<Connected>, ManagerError> {
        self.connected.as_ref().ok_or(ManagerError::Disconnected)
    }

    /// Servers sorted by id, then groups sorted by id.
    pub fn get_targets(&self) -> Result<Vec<Target>, ManagerError> {
        let mut targets: Vec<Target> = self.conn()?.targets.values().cloned().collect();
        targets::sort_targets(&mut targets);
        Ok(targets)
    }

    pub fn target(&self, id: &str) -> Result<Target, ManagerError> {
        self.conn()?
            .targets
            .get(id)
            .cloned()
            .ok_or_else(|| ManagerError::UnknownTarget(id.to_string()))
    }

    pub fn create_configuration(&self, unit: &DeployableUnit) -> Result<DeploymentConfiguration, ManagerError> {
        Ok(config::create_configuration(unit)?)
    }

    pub fn generate_deployed_unit(
        &self,
        unit: &DeployableUnit,
        config: &DeploymentConfiguration,
    ) -> Result<DeployedUnit, ManagerError> {
        Ok(config::generate_deployed_unit(unit, config)?)
    }

    /// Expands groups into sorted, distinct `(server id, endpoint)` pairs.
    fn expand(&self, targets: &[Target]) -> Result<Vec<(String, String)>, ManagerError> {
        let conn = self.conn()?;
        if targets.is_empty() {
            return Err(ManagerError::NoTargets);
        }
        let mut servers = BTreeMap::new();
        for t in targets {
            let known = conn
                .targets
                .get(&t.id)
                .ok_or_else(|| ManagerError::UnknownTarget(t.id.clone()))?;
            let ids = match &known.kind {
                TargetKind::Server { .. } => vec![known.id.clone()],
                TargetKind::Group { members } => members.clone(),
            };
            for id in ids {
                let endpoint = self.endpoint(&id)?;
                servers.insert(id, endpoint);
            }
        }
        Ok(servers.into_iter().collect())
    }

    fn endpoint(&self, server: &str) -> Result<String, ManagerError> {
        match self.conn()?.targets.get(server).map(|t| &t.kind) {
            Some(TargetKind::Server { endpoint, .. }) => Ok(endpoint.clone()),
            _ => Err(ManagerError::UnknownTarget(server.to_string())),
        }
    }

    fn sites(&self) -> Result<BTreeMap<String, String>, ManagerError> {
        Ok(self
            .conn()?
            .targets
            .values()
            .filter_map(|t| match &t.kind {
                TargetKind::Server { site, .. } => Some((t.id.clone(), site.clone())),
                TargetKind::Group { .. } => None,
            })
            .collect())
    }

    fn submit(&self, server: &str, job: Job) -> Result<(), ManagerError> {
        let conn = self.conn()?;
        let mut workers = conn.workers.lock().unwrap_or_else(|e| e.into_inner());
        let sender = workers.entry(server.to_string()).or_insert_with(|| {
            let (tx, rx) = mpsc::channel::<Job>();
            thread::Builder::new()
                .name(format!("depman-{server}"))
                .spawn(move || {
                    for job in rx {
                        job();
                    }
                })
                .expect("spawn server worker");
            tx
        });
        if let Err(mpsc::SendError(job)) = sender.send(job) {
            // Worker gone (it only exits when its sender drops); run inline.
            job();
        }
        Ok(())
    }

    /// Installs a configured unit on every server of `targets`. Groups expand
    /// to their members; each server succeeds or fails on its own.
    pub fn distribute(
        &self,
        targets: &[Target],
        unit: &DeployedUnit,
        check_deps: bool,
    ) -> Result<ProgressObject, ManagerError> {
        let servers = self.expand(targets)?;
        let sites = Arc::new(self.sites()?);
        let progress = ProgressObject::new(
            CommandType::Distribute,
            format!("distributing {} to {}", unit.name(), server_list(&servers)),
        );
        let batch = Batch::new(progress.clone(), servers.len());
        let unit = Arc::new(unit.clone());
        let archive = Arc::new(base64::engine::general_purpose::STANDARD.encode(unit.to_bytes()));
        for (server, endpoint) in servers {
            let (batch, unit, archive, sites) = (batch.clone(), unit.clone(), archive.clone(), sites.clone());
            let timeout = self.timeout;
            let id = server.clone();
            self.submit(
                &server,
                Box::new(move || {
                    let outcome = distribute_on(&id, &endpoint, &unit, &archive, check_deps, &sites, timeout);
                    let note = match &outcome {
                        Ok(_) => format!("{id}: installed"),
                        Err(e) => format!("{id}: {e}"),
                    };
                    batch.report(&id, note, outcome.map_err(|_| ()));
                }),
            )?;
        }
        Ok(progress)
    }

    pub fn start(&self, ids: &[TargetModuleID]) -> Result<ProgressObject, ManagerError> {
        self.lifecycle(CommandType::Start, "START", ids)
    }

    pub fn stop(&self, ids: &[TargetModuleID]) -> Result<ProgressObject, ManagerError> {
        self.lifecycle(CommandType::Stop, "STOP", ids)
    }

    pub fn undeploy(&self, ids: &[TargetModuleID]) -> Result<ProgressObject, ManagerError> {
        self.lifecycle(CommandType::Undeploy, "UNINSTALL", ids)
    }

    fn lifecycle(&self, command: CommandType, op: &'static str, ids: &[TargetModuleID]) -> Result<ProgressObject, ManagerError> {
        self.conn()?;
        if ids.is_empty() {
            return Err(ManagerError::NoTargets);
        }
        let mut by_server: BTreeMap<String, Vec<TargetModuleID>> = BTreeMap::new();
        for id in ids {
            self.endpoint(&id.server_id)?;
            by_server.entry(id.server_id.clone()).or_default().push(id.clone());
        }
        let progress = ProgressObject::new(
            command,
            format!("{command} {}", ids.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")),
        );
        let batch = Batch::new(progress.clone(), by_server.len());
        for (server, ids) in by_server {
            let endpoint = self.endpoint(&server)?;
            let batch = batch.clone();
            let timeout = self.timeout;
            let queue = server.clone();
            self.submit(
                &queue,
                Box::new(move || {
                    let client = Client::connect(&endpoint, timeout);
                    let mut client = match client {
                        Ok(c) => c,
                        Err(e) => {
                            let note = format!("{server}: {}", describe(&e));
                            batch.report_many(&server, vec![note], Vec::new(), false);
                            return;
                        }
                    };
                    let mut notes = Vec::new();
                    let mut done = Vec::new();
                    let mut all_ok = true;
                    for id in ids {
                        if id.parent.is_some() {
                            notes.push(format!("{id}: NotRootModule: only top-level modules can be {command}ed"));
                            all_ok = false;
                            continue;
                        }
                        match client.call(op, json!({ "name": id.unit_name })) {
                            Ok(_) => {
                                notes.push(format!("{id}: ok"));
                                done.push(id);
                            }
                            Err(e) => {
                                notes.push(format!("{id}: {}", describe(&e)));
                                all_ok = false;
                            }
                        }
                    }
                    batch.report_many(&server, notes, done, all_ok);
                }),
            )?;
        }
        Ok(progress)
    }

    /// Root modules on `targets` of the given kind (any kind if `None`),
    /// sorted by server then unit name.
    pub fn list_modules(
        &self,
        kind: Option<ModuleKind>,
        targets: &[Target],
        filter: ModuleFilter,
    ) -> Result<Vec<TargetModuleID>, ManagerError> {
        let mut out = Vec::new();
        for (server, endpoint) in self.expand(targets)? {
            let unreachable = |e: ClientError| ManagerError::AgentUnreachable {
                server: server.clone(),
                message: e.to_string(),
            };
            let mut client = Client::connect(&endpoint, self.timeout).map_err(unreachable)?;
            let response = client.call("LIST", json!({})).map_err(unreachable)?;
            let modules = response.get("modules").and_then(Value::as_array).cloned().unwrap_or_default();
            for m in modules {
                let Some(name) = m.get("name").and_then(Value::as_str) else { continue };
                let m_kind: Option<ModuleKind> = m.get("kind").cloned().and_then(|k| serde_json::from_value(k).ok());
                let state: Option<ModuleState> = m.get("state").cloned().and_then(|s| serde_json::from_value(s).ok());
                if kind.is_some_and(|k| Some(k) != m_kind) {
                    continue;
                }
                let keep = match filter {
                    ModuleFilter::Available => true,
                    ModuleFilter::Running => state == Some(ModuleState::Running),
                    ModuleFilter::NonRunning => state == Some(ModuleState::Installed),
                };
                if keep {
                    out.push(TargetModuleID::new(server.clone(), name));
                }
            }
        }
        out.sort();
        Ok(out)
    }

    /// Current view of one server, with a remote registry's site resolved
    /// from the target list.
    pub fn server_snapshot(&self, server: &str) -> Result<ServerSnapshot, ManagerError> {
        let endpoint = self.endpoint(server)?;
        let sites = self.sites()?;
        fetch_snapshot(&endpoint, &sites, self.timeout).map_err(|e| ManagerError::AgentUnreachable {
            server: server.to_string(),
            message: e,
        })
    }

    /// The installed-module view of one server.
    pub fn installed(&self, server: &str) -> Result<BTreeMap<String, InstalledModule>, ManagerError> {
        Ok(self.server_snapshot(server)?.installed)
    }
}

fn server_list(servers: &[(String, String)]) -> String {
    servers.iter().map(|(s, _)| s.as_str()).collect::<Vec<_>>().join(", ")
}

fn describe(e: &ClientError) -> String {
    match e {
        ClientError::Remote(r) => format!("{}: {}", r.code, r.message),
        ClientError::Unreachable { .. } | ClientError::Wire(_) => format!("AgentUnreachable: {e}"),
        ClientError::Uncorrelated { .. } => format!("ProtocolError: {e}"),
    }
}

fn fetch_snapshot(endpoint: &str, sites: &BTreeMap<String, String>, timeout: Duration) -> Result<ServerSnapshot, String> {
    let mut client = Client::connect(endpoint, timeout).map_err(|e| describe(&e))?;
    snapshot_via(&mut client, sites)
}

fn snapshot_via(client: &mut Client, sites: &BTreeMap<String, String>) -> Result<ServerSnapshot, String> {
    let response = client.call("SNAPSHOT", json!({})).map_err(|e| describe(&e))?;
    let mut snapshot: ServerSnapshot = response
        .get("snapshot")
        .cloned()
        .ok_or_else(|| "ProtocolError: snapshot missing".to_string())
        .and_then(|v| serde_json::from_value(v).map_err(|e| format!("ProtocolError: {e}")))?;
    if snapshot.registry_site.is_none() {
        if let RegistryEndpoint::Remote(id) = &snapshot.registry_endpoint {
            snapshot.registry_site = sites.get(id).cloned();
        }
    }
    Ok(snapshot)
}

fn distribute_on(
    server: &str,
    endpoint: &str,
    unit: &DeployedUnit,
    archive_b64: &str,
    check_deps: bool,
    sites: &BTreeMap<String, String>,
    timeout: Duration,
) -> Result<Vec<crate::manager::TargetModuleID>, String> {
    let mut client = Client::connect(endpoint, timeout).map_err(|e| describe(&e))?;
    if check_deps {
        let snapshot = snapshot_via(&mut client, sites)?;
        let findings = depres::check_against_target(&unit.base, &snapshot);
        if !findings.is_empty() {
            return Err(findings.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "));
        }
    }
    client
        .call("INSTALL", json!({ "archive": archive_b64 }))
        .map_err(|e| describe(&e))?;
    let root = TargetModuleID::new(server, unit.name());
    let mut ids = vec![root.clone()];
    ids.extend(unit.base.children.iter().map(|c| root.child(c.name.clone())));
    Ok(ids)
}

/// Collects per-server outcomes and finishes the progress object when the
/// last server reports.
#[derive(Clone)]
struct Batch {
    progress: ProgressObject,
    state: Arc<Mutex<BatchState>>,
}

struct BatchState {
    total: usize,
    remaining: usize,
    notes: BTreeMap<String, Vec<String>>,
    done: Vec<TargetModuleID>,
    failed: bool,
}

impl Batch {
    fn new(progress: ProgressObject, servers: usize) -> Batch {
        Batch {
            progress,
            state: Arc::new(Mutex::new(BatchState {
                total: servers,
                remaining: servers,
                notes: BTreeMap::new(),
                done: Vec::new(),
                failed: false,
            })),
        }
    }

    fn report(&self, server: &str, note: String, outcome: Result<Vec<TargetModuleID>, ()>) {
        match outcome {
            Ok(ids) => self.report_many(server, vec![note], ids, true),
            Err(()) => self.report_many(server, vec![note], Vec::new(), false),
        }
    }

    // Progress is published while holding the batch lock so that listeners
    // see the server count rise in order.
    fn report_many(&self, server: &str, notes: Vec<String>, done: Vec<TargetModuleID>, ok: bool) {
        let mut s = self.state.lock().unwrap_or_else(|e| e.into_inner());
        s.notes.insert(server.to_string(), notes);
        s.done.extend(done);
        s.failed |= !ok;
        s.remaining -= 1;
        if s.remaining > 0 {
            self.progress
                .update(format!("{} of {} servers done", s.total - s.remaining, s.total));
            return;
        }
        let mut done = s.done.clone();
        done.sort();
        let message = s.notes.values().flatten().cloned().collect::<Vec<_>>().join("; ");
        let command = self.progress.get_deployment_status().command;
        if s.failed {
            // Failed distribute/start report nothing as result;
            // stop/undeploy list what was processed.
            let result = match command {
                CommandType::Distribute | CommandType::Start => Vec::new(),
                CommandType::Stop | CommandType::Undeploy => done,
            };
            self.progress.finish(StatusState::Failed, message, result);
        } else {
            self.progress.finish(StatusState::Completed, message, done);
        }
    }
}
