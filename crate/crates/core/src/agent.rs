//! Simulated application server ("target agent").
//!
//! An agent hosts installed modules and their lifecycle state, a configured
//! service set, a resource registry and a registry (communication service)
//! endpoint. It answers framed JSON requests from the manager. Running a
//! module is bookkeeping plus runtime resolution of its bindings and
//! required services.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{self, BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::config;
use crate::depres::{self, DependencyGraph, ServiceName};
use crate::unit::{self, DeployedUnit, ModuleKind};
use crate::wire::{self, WireError};
use crate::xml::{self, DescriptorNode};

/// Where a server's communication service looks names up.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum RegistryEndpoint {
    /// The server's own registry.
    #[default]
    Local,
    /// The registry of another server, by server id.
    Remote(String),
}

impl fmt::Display for RegistryEndpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegistryEndpoint::Local => f.write_str("self"),
            RegistryEndpoint::Remote(id) => f.write_str(id),
        }
    }
}

impl FromStr for RegistryEndpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "self" => Ok(RegistryEndpoint::Local),
            "" => Err("empty registry endpoint".into()),
            id => Ok(RegistryEndpoint::Remote(id.to_string())),
        }
    }
}

impl Serialize for RegistryEndpoint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RegistryEndpoint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerConfig {
    pub id: String,
    pub endpoint: String,
    pub site: String,
    /// Optional services; mandatory ones are always present.
    pub services: BTreeSet<ServiceName>,
    pub registry_endpoint: RegistryEndpoint,
    pub resources: BTreeMap<String, ServiceName>,
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("endpoint {0} is already in use")]
    EndpointInUse(String),
    #[error("invalid server configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot load agent state from {path}: {message}")]
    State { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ServerConfig {
    pub fn new(id: impl Into<String>, endpoint: impl Into<String>, site: impl Into<String>) -> Self {
        ServerConfig {
            id: id.into(),
            endpoint: endpoint.into(),
            site: site.into(),
            services: BTreeSet::new(),
            registry_endpoint: RegistryEndpoint::Local,
            resources: BTreeMap::new(),
        }
    }

    pub fn with_service(mut self, service: ServiceName) -> Self {
        if !service.is_mandatory() {
            self.services.insert(service);
        }
        self
    }

    pub fn with_resource(mut self, name: impl Into<String>, service: ServiceName) -> Self {
        self.resources.insert(name.into(), service);
        self
    }

    pub fn with_registry(mut self, registry: RegistryEndpoint) -> Self {
        self.registry_endpoint = registry;
        self
    }

    pub fn has_service(&self, service: ServiceName) -> bool {
        service.is_mandatory() || self.services.contains(&service)
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: String| Err(AgentError::InvalidConfig(m));
        if !is_server_id(&self.id) || self.id == "self" {
            return bad(format!("invalid server id `{}`", self.id));
        }
        if self.site.is_empty() {
            return bad("site must not be empty".into());
        }
        if let Some(m) = self.services.iter().find(|s| s.is_mandatory()) {
            return bad(format!("service `{m}` is mandatory and cannot be configured"));
        }
        for (name, service) in &self.resources {
            if !self.has_service(*service) {
                return bad(format!("resource `{name}` is under unconfigured service `{service}`"));
            }
            if !unit::is_token(name) {
                return bad(format!("invalid resource name `{name}`"));
            }
        }
        if self.registry_endpoint == RegistryEndpoint::Remote(self.id.clone()) {
            return bad("use `self` for the local registry".into());
        }
        Ok(())
    }

    /// Reads `server.xml`:
    /// `<server id endpoint site registry="self|ID"><service name/><resource name service/></server>`.
    pub fn parse(data: &[u8]) -> Result<ServerConfig, AgentError> {
        let bad = |m: String| AgentError::InvalidConfig(m);
        let root = xml::parse(data).map_err(|e| bad(e.to_string()))?;
        if root.element_name != "server" {
            return Err(bad(format!("root element is <{}>, expected <server>", root.element_name)));
        }
        let attr = |n: &DescriptorNode, k: &str| {
            n.attr(k)
                .map(str::to_string)
                .ok_or_else(|| bad(format!("<{}> lacks `{k}`", n.element_name)))
        };
        let mut config = ServerConfig::new(attr(&root, "id")?, attr(&root, "endpoint")?, attr(&root, "site")?);
        if let Some(r) = root.attr("registry") {
            config.registry_endpoint = r.parse().map_err(bad)?;
        }
        for el in &root.children {
            match el.element_name.as_str() {
                "service" => {
                    let s: ServiceName = attr(el, "name")?.parse().map_err(|e: depres::DepsError| bad(e.to_string()))?;
                    config.services.insert(s);
                }
                "resource" => {
                    let s: ServiceName = attr(el, "service")?.parse().map_err(|e: depres::DepsError| bad(e.to_string()))?;
                    config.resources.insert(attr(el, "name")?, s);
                }
                other => return Err(bad(format!("unexpected element <{other}>"))),
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_xml(&self) -> Vec<u8> {
        let mut root = DescriptorNode::new("server")
            .with_attr("id", self.id.clone())
            .with_attr("endpoint", self.endpoint.clone())
            .with_attr("site", self.site.clone())
            .with_attr("registry", self.registry_endpoint.to_string());
        for s in &self.services {
            root.children.push(DescriptorNode::new("service").with_attr("name", s.as_str()));
        }
        for (name, s) in &self.resources {
            root.children.push(
                DescriptorNode::new("resource")
                    .with_attr("name", name.clone())
                    .with_attr("service", s.as_str()),
            );
        }
        xml::canonical_bytes(&root)
    }
}

pub(crate) fn is_server_id(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleState {
    Installed,
    Running,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChildModule {
    pub name: String,
    pub kind: ModuleKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstalledModule {
    pub kind: ModuleKind,
    pub state: ModuleState,
    /// Entries in the module's stub manifest.
    pub stubs: usize,
    #[serde(default)]
    pub children: Vec<ChildModule>,
}

/// Point-in-time view of a server, as used by dependency checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerSnapshot {
    pub id: String,
    pub site: String,
    /// Mandatory and configured services.
    pub services: BTreeSet<ServiceName>,
    pub resources: BTreeMap<String, ServiceName>,
    pub registry_endpoint: RegistryEndpoint,
    /// Site of the server whose registry is in use, when known. Agents fill
    /// it for the local registry; the manager resolves remote ones.
    pub registry_site: Option<String>,
    pub installed: BTreeMap<String, InstalledModule>,
}

impl ServerSnapshot {
    pub fn has_service(&self, service: ServiceName) -> bool {
        service.is_mandatory() || self.services.contains(&service)
    }

    /// Installed module names, application children included.
    pub fn installed_names(&self) -> BTreeSet<&str> {
        self.installed
            .iter()
            .flat_map(|(name, m)| std::iter::once(name.as_str()).chain(m.children.iter().map(|c| c.name.as_str())))
            .collect()
    }
}

/// Guard and resolution failures reported to the manager.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorCode {
    NotInstalled,
    AlreadyInstalled,
    AlreadyRunning,
    NotRunning,
    StillRunning,
    MissingResource,
    ServiceUnavailable,
    HasDependents,
    ConflictingService,
    InvalidArchive,
    UnknownOp,
    BadRequest,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::NotInstalled => "NotInstalled",
            ErrorCode::AlreadyInstalled => "AlreadyInstalled",
            ErrorCode::AlreadyRunning => "AlreadyRunning",
            ErrorCode::NotRunning => "NotRunning",
            ErrorCode::StillRunning => "StillRunning",
            ErrorCode::MissingResource => "MissingResource",
            ErrorCode::ServiceUnavailable => "ServiceUnavailable",
            ErrorCode::HasDependents => "HasDependents",
            ErrorCode::ConflictingService => "ConflictingService",
            ErrorCode::InvalidArchive => "InvalidArchive",
            ErrorCode::UnknownOp => "UnknownOp",
            ErrorCode::BadRequest => "BadRequest",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{code}: {message}")]
pub struct GuardError {
    pub code: ErrorCode,
    pub message: String,
}

fn guard(code: ErrorCode, message: impl Into<String>) -> GuardError {
    GuardError {
        code,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventAction {
    Install,
    Start,
    Stop,
    Uninstall,
}

/// Lifecycle event; `module` is `app` or `app/child`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentEvent {
    pub action: EventAction,
    pub module: String,
}

struct HostedModule {
    unit: DeployedUnit,
    archive: Vec<u8>,
    state: ModuleState,
}

impl HostedModule {
    fn summary(&self) -> InstalledModule {
        InstalledModule {
            kind: self.unit.kind(),
            state: self.state,
            stubs: self.unit.manifest.entries.len(),
            children: self
                .unit
                .base
                .children
                .iter()
                .map(|c| ChildModule {
                    name: c.name.clone(),
                    kind: c.kind,
                })
                .collect(),
        }
    }

    /// Deployables in start order: children by their mutual requirements,
    /// then the unit itself.
    fn start_sequence(&self) -> Vec<String> {
        let base = &self.unit.base;
        let mut graph = DependencyGraph::default();
        for c in &base.children {
            graph.add_node(c.name.clone());
            for d in c.deployables() {
                for req in &d.deps.requires_unit {
                    graph.add_edge(c.name.clone(), req.clone());
                }
            }
        }
        // Validated units have no cycles between children; fall back to tree
        // order otherwise.
        let mut seq = depres::install_order(&graph)
            .unwrap_or_else(|_| base.children.iter().map(|c| c.name.clone()).collect());
        seq.push(base.name.clone());
        seq
    }
}

/// Persisted agent state (`state.json`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct StateFile {
    id: String,
    site: String,
    services: Vec<ServiceName>,
    registry_endpoint: RegistryEndpoint,
    resources: BTreeMap<String, ServiceName>,
    installed: BTreeMap<String, PersistedModule>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct PersistedModule {
    kind: ModuleKind,
    state: ModuleState,
}

pub const STATE_FILE: &str = "state.json";
const MODULES_DIR: &str = "modules";

struct State {
    config: ServerConfig,
    resources: BTreeMap<String, ServiceName>,
    modules: BTreeMap<String, HostedModule>,
    events: Vec<AgentEvent>,
}

impl State {
    fn services(&self) -> BTreeSet<ServiceName> {
        ServiceName::MANDATORY
            .into_iter()
            .chain(self.config.services.iter().copied())
            .collect()
    }

    fn snapshot(&self) -> ServerSnapshot {
        ServerSnapshot {
            id: self.config.id.clone(),
            site: self.config.site.clone(),
            services: self.services(),
            resources: self.resources.clone(),
            registry_endpoint: self.config.registry_endpoint.clone(),
            registry_site: match self.config.registry_endpoint {
                RegistryEndpoint::Local => Some(self.config.site.clone()),
                RegistryEndpoint::Remote(_) => None,
            },
            installed: self
                .modules
                .iter()
                .map(|(name, m)| (name.clone(), m.summary()))
                .collect(),
        }
    }

    /// Resource names provided by running adapters, as component names.
    fn adapter_resources(&self) -> BTreeSet<String> {
        self.modules
            .values()
            .filter(|m| m.state == ModuleState::Running)
            .flat_map(|m| m.unit.base.deployables().into_iter().filter(|d| d.kind == ModuleKind::Adapter))
            .flat_map(|d| d.component_names().into_iter().map(str::to_string))
            .collect()
    }

    fn install(&mut self, archive: Vec<u8>) -> Result<InstalledModule, GuardError> {
        let unit = unit::open_deployed(&archive).map_err(|e| guard(ErrorCode::InvalidArchive, e.to_string()))?;
        let violations = unit::validate_unit(&unit.base);
        if let Some(v) = violations.first() {
            return Err(guard(ErrorCode::InvalidArchive, v.to_string()));
        }
        if !unit.config.is_complete() || config::generate_manifest(&unit.base, &unit.config) != unit.manifest {
            return Err(guard(ErrorCode::InvalidArchive, "stub manifest does not match the configuration"));
        }
        let name = unit.name().to_string();
        if self.modules.contains_key(&name) {
            return Err(guard(ErrorCode::AlreadyInstalled, format!("{name} is already installed")));
        }
        let module = HostedModule {
            unit,
            archive,
            state: ModuleState::Installed,
        };
        let summary = module.summary();
        self.modules.insert(name.clone(), module);
        self.events.push(AgentEvent {
            action: EventAction::Install,
            module: name,
        });
        Ok(summary)
    }

    fn start(&mut self, name: &str) -> Result<(), GuardError> {
        let module = self
            .modules
            .get(name)
            .ok_or_else(|| guard(ErrorCode::NotInstalled, format!("{name} is not installed")))?;
        if module.state == ModuleState::Running {
            return Err(guard(ErrorCode::AlreadyRunning, format!("{name} is already running")));
        }
        let mut available = self.adapter_resources();
        let sequence = module.start_sequence();
        let mut started: Vec<String> = Vec::new();
        let mut failure = None;
        for deployable in &sequence {
            let d = module
                .unit
                .base
                .deployables()
                .into_iter()
                .find(|d| &d.name == deployable)
                .expect("sequence names deployables");
            let service = d.deps.requires_service.iter().find(|s| !self.config.has_service(**s));
            let missing = module
                .unit
                .config
                .bindings()
                .into_iter()
                .filter(|(owner, _, _)| owner == deployable)
                .map(|(_, _, resource)| resource)
                .find(|r| !self.resources.contains_key(*r) && !available.contains(*r));
            if let Some(s) = service {
                failure = Some(guard(ErrorCode::ServiceUnavailable, s.as_str()));
                break;
            }
            if let Some(r) = missing {
                failure = Some(guard(ErrorCode::MissingResource, r));
                break;
            }
            if d.kind == ModuleKind::Adapter {
                available.extend(d.component_names().into_iter().map(str::to_string));
            }
            started.push(deployable.clone());
        }
        let path = |d: &str| if d == name { name.to_string() } else { format!("{name}/{d}") };
        for d in &started {
            self.events.push(AgentEvent {
                action: EventAction::Start,
                module: path(d),
            });
        }
        if let Some(err) = failure {
            for d in started.iter().rev() {
                self.events.push(AgentEvent {
                    action: EventAction::Stop,
                    module: path(d),
                });
            }
            return Err(err);
        }
        self.modules.get_mut(name).expect("checked").state = ModuleState::Running;
        Ok(())
    }

    fn stop(&mut self, name: &str) -> Result<(), GuardError> {
        let module = self
            .modules
            .get_mut(name)
            .ok_or_else(|| guard(ErrorCode::NotInstalled, format!("{name} is not installed")))?;
        if module.state != ModuleState::Running {
            return Err(guard(ErrorCode::NotRunning, format!("{name} is not running")));
        }
        module.state = ModuleState::Installed;
        let sequence = module.start_sequence();
        for d in sequence.iter().rev() {
            let module = if d == name { name.to_string() } else { format!("{name}/{d}") };
            self.events.push(AgentEvent {
                action: EventAction::Stop,
                module,
            });
        }
        Ok(())
    }

    fn uninstall(&mut self, name: &str) -> Result<(), GuardError> {
        let module = self
            .modules
            .get(name)
            .ok_or_else(|| guard(ErrorCode::NotInstalled, format!("{name} is not installed")))?;
        if module.state == ModuleState::Running {
            return Err(guard(ErrorCode::StillRunning, format!("{name} is running; stop it first")));
        }
        let provided: BTreeSet<&str> = module.unit.base.deployables().iter().map(|d| d.name.as_str()).collect();
        let dependents: Vec<&str> = self
            .modules
            .iter()
            .filter(|(other, _)| other.as_str() != name)
            .filter(|(_, m)| {
                m.unit
                    .base
                    .deployables()
                    .iter()
                    .any(|d| d.deps.requires_unit.iter().any(|r| provided.contains(r.as_str())))
            })
            .map(|(other, _)| other.as_str())
            .collect();
        if !dependents.is_empty() {
            return Err(guard(ErrorCode::HasDependents, format!("[{}]", dependents.join(", "))));
        }
        self.modules.remove(name);
        self.events.push(AgentEvent {
            action: EventAction::Uninstall,
            module: name.to_string(),
        });
        Ok(())
    }

    fn create_resource(&mut self, name: &str, service: ServiceName) -> Result<(), GuardError> {
        if !unit::is_token(name) {
            return Err(guard(ErrorCode::BadRequest, format!("invalid resource name `{name}`")));
        }
        if !self.config.has_service(service) {
            return Err(guard(ErrorCode::ServiceUnavailable, service.as_str()));
        }
        match self.resources.get(name) {
            Some(existing) if *existing == service => Ok(()),
            Some(existing) => Err(guard(
                ErrorCode::ConflictingService,
                format!("{name} already exists under {existing}"),
            )),
            None => {
                self.resources.insert(name.to_string(), service);
                Ok(())
            }
        }
    }

    fn state_file(&self) -> StateFile {
        StateFile {
            id: self.config.id.clone(),
            site: self.config.site.clone(),
            services: self.services().into_iter().collect(),
            registry_endpoint: self.config.registry_endpoint.clone(),
            resources: self.resources.clone(),
            installed: self
                .modules
                .iter()
                .map(|(n, m)| {
                    (
                        n.clone(),
                        PersistedModule {
                            kind: m.unit.kind(),
                            state: m.state,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Agent state plus its optional data directory. Requests are applied
/// atomically: mutations hold the write lock for their whole duration.
pub struct Agent {
    state: RwLock<State>,
    data_dir: Option<PathBuf>,
}

impl Agent {
    /// Creates an agent, reloading resources and installed modules from
    /// `data_dir/state.json` when present.
    pub fn new(config: ServerConfig, data_dir: Option<&Path>) -> Result<Agent, AgentError> {
        config.validate()?;
        let mut state = State {
            resources: config.resources.clone(),
            config,
            modules: BTreeMap::new(),
            events: Vec::new(),
        };
        if let Some(dir) = data_dir {
            fs::create_dir_all(dir.join(MODULES_DIR))?;
            load_state(&mut state, dir)?;
        }
        Ok(Agent {
            state: RwLock::new(state),
            data_dir: data_dir.map(Path::to_path_buf),
        })
    }

    pub fn id(&self) -> String {
        self.read().config.id.clone()
    }

    pub fn snapshot(&self) -> ServerSnapshot {
        self.read().snapshot()
    }

    pub fn events(&self) -> Vec<AgentEvent> {
        self.read().events.clone()
    }

    pub fn create_resource(&self, name: &str, service: ServiceName) -> Result<(), GuardError> {
        self.mutate(|s| s.create_resource(name, service))
    }

    /// Writes `state.json` and module archives to the data directory.
    pub fn persist(&self) -> Result<(), AgentError> {
        match &self.data_dir {
            Some(dir) => write_state(&self.read(), dir),
            None => Ok(()),
        }
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, State> {
        self.state.read().unwrap_or_else(|e| e.into_inner())
    }

    fn mutate<T>(&self, f: impl FnOnce(&mut State) -> Result<T, GuardError>) -> Result<T, GuardError> {
        let mut state = self.state.write().unwrap_or_else(|e| e.into_inner());
        let out = f(&mut state)?;
        if let Some(dir) = &self.data_dir {
            if let Err(e) = write_state(&state, dir) {
                log::error!("agent {}: cannot persist state: {e}", state.config.id);
            }
        }
        Ok(out)
    }

    /// Handles one decoded request and returns its correlated response.
    pub fn handle_request(&self, request: &Value) -> Value {
        let id = request.get("id").cloned().unwrap_or(Value::Null);
        let Some(op) = request.get("op").and_then(Value::as_str) else {
            return wire::error_response(&id, ErrorCode::BadRequest.as_str(), "request lacks `op`");
        };
        if id.is_null() {
            return wire::error_response(&id, ErrorCode::BadRequest.as_str(), "request lacks `id`");
        }
        match self.dispatch(op, request) {
            Ok(fields) => wire::ok_response(&id, fields),
            Err(e) => wire::error_response(&id, e.code.as_str(), &e.message),
        }
    }

    fn dispatch(&self, op: &str, request: &Value) -> Result<Value, GuardError> {
        let text = |k: &str| {
            request
                .get(k)
                .and_then(Value::as_str)
                .ok_or_else(|| guard(ErrorCode::BadRequest, format!("{op} requires string field `{k}`")))
        };
        match op {
            "HELLO" => {
                let s = self.read();
                Ok(json!({
                    "server_id": s.config.id,
                    "site": s.config.site,
                    "services": s.services(),
                }))
            }
            "LIST" => {
                let s = self.read();
                let modules: Vec<Value> = s
                    .modules
                    .iter()
                    .map(|(name, m)| {
                        let summary = m.summary();
                        json!({
                            "name": name,
                            "kind": summary.kind,
                            "state": summary.state,
                            "children": summary.children,
                        })
                    })
                    .collect();
                Ok(json!({ "modules": modules }))
            }
            "SNAPSHOT" => Ok(json!({ "snapshot": self.snapshot() })),
            "INSTALL" => {
                let archive = base64::engine::general_purpose::STANDARD
                    .decode(text("archive")?)
                    .map_err(|e| guard(ErrorCode::BadRequest, format!("archive is not base64: {e}")))?;
                let module = self.mutate(|s| s.install(archive))?;
                Ok(json!({ "module": module }))
            }
            "START" => {
                let name = text("name")?;
                self.mutate(|s| s.start(name))?;
                Ok(json!({ "name": name, "state": ModuleState::Running }))
            }
            "STOP" => {
                let name = text("name")?;
                self.mutate(|s| s.stop(name))?;
                Ok(json!({ "name": name, "state": ModuleState::Installed }))
            }
            "UNINSTALL" => {
                let name = text("name")?;
                self.mutate(|s| s.uninstall(name))?;
                Ok(json!({ "name": name }))
            }
            "CREATE_RESOURCE" => {
                let name = text("name")?;
                let service: ServiceName = text("service")?
                    .parse()
                    .map_err(|e: depres::DepsError| guard(ErrorCode::BadRequest, e.to_string()))?;
                self.create_resource(name, service)?;
                Ok(json!({ "name": name, "service": service }))
            }
            other => Err(guard(ErrorCode::UnknownOp, format!("unknown op `{other}`"))),
        }
    }

    /// Decodes a frame payload and returns the encoded response payload.
    /// Undecodable payloads get a `BadRequest` response with a null id.
    pub fn handle_payload(&self, payload: &[u8]) -> Vec<u8> {
        let response = match serde_json::from_slice::<Value>(payload) {
            Ok(request @ Value::Object(_)) => self.handle_request(&request),
            Ok(_) => wire::error_response(&Value::Null, ErrorCode::BadRequest.as_str(), "payload is not a JSON object"),
            Err(e) => wire::error_response(&Value::Null, ErrorCode::BadRequest.as_str(), &e.to_string()),
        };
        serde_json::to_vec(&response).expect("JSON values serialize")
    }
}

fn write_state(state: &State, dir: &Path) -> Result<(), AgentError> {
    let modules_dir = dir.join(MODULES_DIR);
    fs::create_dir_all(&modules_dir)?;
    let keep: BTreeSet<String> = state.modules.keys().map(|n| format!("{n}.zip")).collect();
    for entry in fs::read_dir(&modules_dir)? {
        let entry = entry?;
        if !keep.contains(entry.file_name().to_string_lossy().as_ref()) {
            fs::remove_file(entry.path())?;
        }
    }
    for (name, m) in &state.modules {
        let path = modules_dir.join(format!("{name}.zip"));
        if !path.exists() {
            fs::write(&path, &m.archive)?;
        }
    }
    let tmp = dir.join("state.json.tmp");
    let file = fs::File::create(&tmp)?;
    serde_json::to_writer_pretty(BufWriter::new(file), &state.state_file()).map_err(io::Error::other)?;
    fs::rename(tmp, dir.join(STATE_FILE))?;
    Ok(())
}

fn load_state(state: &mut State, dir: &Path) -> Result<(), AgentError> {
    let path = dir.join(STATE_FILE);
    let err = |message: String| AgentError::State {
        path: path.clone(),
        message,
    };
    let data = match fs::read(&path) {
        Ok(d) => d,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e.into()),
    };
    let file: StateFile = serde_json::from_slice(&data).map_err(|e| err(e.to_string()))?;
    if file.id != state.config.id {
        return Err(err(format!("state belongs to server `{}`", file.id)));
    }
    state.resources = file.resources;
    for (name, persisted) in file.installed {
        let archive = fs::read(dir.join(MODULES_DIR).join(format!("{name}.zip"))).map_err(|e| err(format!("{name}: {e}")))?;
        let unit = unit::open_deployed(&archive).map_err(|e| err(format!("{name}: {e}")))?;
        if unit.name() != name || unit.kind() != persisted.kind {
            return Err(err(format!("archive for `{name}` does not match the recorded module")));
        }
        state.modules.insert(
            name,
            HostedModule {
                unit,
                archive,
                state: persisted.state,
            },
        );
    }
    Ok(())
}

/// A running agent listening on its endpoint. Dropping the handle shuts the
/// agent down and persists its state.
pub struct AgentHandle {
    agent: Arc<Agent>,
    addr: SocketAddr,
    stopping: Arc<AtomicBool>,
    acceptor: Mutex<Option<JoinHandle<()>>>,
}

/// Starts an agent on `config.endpoint` (port 0 picks a free port).
pub fn run_agent(config: ServerConfig, data_dir: Option<&Path>) -> Result<AgentHandle, AgentError> {
    let endpoint = config.endpoint.clone();
    let agent = Arc::new(Agent::new(config, data_dir)?);
    let listener = TcpListener::bind(&endpoint).map_err(|e| match e.kind() {
        io::ErrorKind::AddrInUse => AgentError::EndpointInUse(endpoint.clone()),
        _ => AgentError::Io(e),
    })?;
    let addr = listener.local_addr()?;
    let stopping = Arc::new(AtomicBool::new(false));
    let acceptor = {
        let agent = Arc::clone(&agent);
        let stopping = Arc::clone(&stopping);
        thread::Builder::new()
            .name(format!("agent-{}", agent.id()))
            .spawn(move || serve(listener, stopping, move |payload| agent.handle_payload(payload)))?
    };
    log::info!("agent {} listening on {addr}", agent.id());
    Ok(AgentHandle {
        agent,
        addr,
        stopping,
        acceptor: Mutex::new(Some(acceptor)),
    })
}

/// Accept loop shared by agents and the target registry: one thread per
/// connection, one response per request frame.
pub(crate) fn serve<H>(listener: TcpListener, stopping: Arc<AtomicBool>, handler: H)
where
    H: Fn(&[u8]) -> Vec<u8> + Send + Sync + 'static,
{
    let handler = Arc::new(handler);
    for stream in listener.incoming() {
        if stopping.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let handler = Arc::clone(&handler);
        let stopping = Arc::clone(&stopping);
        thread::spawn(move || {
            if let Err(e) = serve_connection(stream, &stopping, &*handler) {
                log::debug!("connection closed: {e}");
            }
        });
    }
}

fn serve_connection(stream: TcpStream, stopping: &AtomicBool, handler: &dyn Fn(&[u8]) -> Vec<u8>) -> Result<(), WireError> {
    stream.set_nodelay(true).ok();
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    while let Some(payload) = wire::read_frame(&mut reader)? {
        if stopping.load(Ordering::SeqCst) {
            break;
        }
        let response = handler(&payload);
        wire::write_frame(&mut writer, &response)?;
    }
    Ok(())
}

pub(crate) fn wake_listener(addr: SocketAddr) {
    let target = if addr.ip().is_unspecified() {
        SocketAddr::from(([127, 0, 0, 1], addr.port()))
    } else {
        addr
    };
    let _ = TcpStream::connect_timeout(&target, std::time::Duration::from_millis(500));
}

impl AgentHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// `host:port` the agent is reachable at.
    pub fn endpoint(&self) -> String {
        self.addr.to_string()
    }

    pub fn agent(&self) -> &Agent {
        &self.agent
    }

    pub fn snapshot(&self) -> ServerSnapshot {
        self.agent.snapshot()
    }

    pub fn events(&self) -> Vec<AgentEvent> {
        self.agent.events()
    }

    pub fn create_resource(&self, name: &str, service: ServiceName) -> Result<(), GuardError> {
        self.agent.create_resource(name, service)
    }

    /// Stops accepting connections and persists state.
    pub fn shutdown(&self) -> Result<(), AgentError> {
        let acceptor = self.acceptor.lock().unwrap_or_else(|e| e.into_inner()).take();
        if let Some(acceptor) = acceptor {
            self.stopping.store(true, Ordering::SeqCst);
            wake_listener(self.addr);
            let _ = acceptor.join();
            self.agent.persist()?;
        }
        Ok(())
    }
}

impl Drop for AgentHandle {
    fn drop(&mut self) {
        if let Err(e) = self.shutdown() {
            log::error!("agent shutdown: {e}");
        }
    }
}
