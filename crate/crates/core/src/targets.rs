//! Deployment targets and the target registry service.
//!
//! `targets.xml`:
//! `<targets><server id="" endpoint="" site=""/><group id=""><member ref=""/></group></targets>`

use std::collections::BTreeSet;
use std::fmt;
use std::io;
use std::net::{SocketAddr, TcpListener};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use serde_json::{json, Value};
use thiserror::Error;

use crate::agent::{self, is_server_id};
use crate::wire;
use crate::xml::{self, DescriptorNode};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TargetKind {
    Server { endpoint: String, site: String },
    /// Member server ids. Groups do not nest.
    Group { members: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Target {
    pub id: String,
    pub kind: TargetKind,
}

impl Target {
    pub fn server(id: impl Into<String>, endpoint: impl Into<String>, site: impl Into<String>) -> Self {
        Target {
            id: id.into(),
            kind: TargetKind::Server {
                endpoint: endpoint.into(),
                site: site.into(),
            },
        }
    }

    pub fn group<S: Into<String>>(id: impl Into<String>, members: impl IntoIterator<Item = S>) -> Self {
        Target {
            id: id.into(),
            kind: TargetKind::Group {
                members: members.into_iter().map(Into::into).collect(),
            },
        }
    }

    pub fn is_group(&self) -> bool {
        matches!(self.kind, TargetKind::Group { .. })
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            TargetKind::Server { endpoint, site } => write!(f, "server {} {} {}", self.id, endpoint, site),
            TargetKind::Group { members } => write!(f, "group {} {}", self.id, members.join(",")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TargetsError {
    #[error("malformed targets file: {0}")]
    Malformed(String),
    #[error("duplicate target id `{0}`")]
    DuplicateId(String),
    #[error("group `{group}` references unknown server `{member}`")]
    UnknownMember { group: String, member: String },
}

/// Servers sorted by id, then groups sorted by id.
pub fn sort_targets(targets: &mut [Target]) {
    targets.sort_by(|a, b| (a.is_group(), &a.id).cmp(&(b.is_group(), &b.id)));
}

/// Checks id uniqueness and that group members are existing servers.
pub fn validate_targets(targets: &[Target]) -> Result<(), TargetsError> {
    let mut ids = BTreeSet::new();
    for t in targets {
        if !is_server_id(&t.id) {
            return Err(TargetsError::Malformed(format!("invalid target id `{}`", t.id)));
        }
        if !ids.insert(t.id.as_str()) {
            return Err(TargetsError::DuplicateId(t.id.clone()));
        }
    }
    let servers: BTreeSet<&str> = targets.iter().filter(|t| !t.is_group()).map(|t| t.id.as_str()).collect();
    for t in targets {
        if let TargetKind::Group { members } = &t.kind {
            if let Some(m) = members.iter().find(|m| !servers.contains(m.as_str())) {
                return Err(TargetsError::UnknownMember {
                    group: t.id.clone(),
                    member: m.clone(),
                });
            }
        }
    }
    Ok(())
}

pub fn parse_targets(data: &[u8]) -> Result<Vec<Target>, TargetsError> {
    let bad = |m: String| TargetsError::Malformed(m);
    let root = xml::parse(data).map_err(|e| bad(e.to_string()))?;
    if root.element_name != "targets" {
        return Err(bad(format!("root element is <{}>, expected <targets>", root.element_name)));
    }
    let attr = |n: &DescriptorNode, k: &str| {
        n.attr(k)
            .map(str::to_string)
            .ok_or_else(|| bad(format!("<{}> lacks `{k}`", n.element_name)))
    };
    let mut targets = Vec::new();
    for el in &root.children {
        match el.element_name.as_str() {
            "server" => targets.push(Target::server(attr(el, "id")?, attr(el, "endpoint")?, attr(el, "site")?)),
            "group" => {
                let members = el
                    .children
                    .iter()
                    .map(|m| {
                        if m.element_name != "member" {
                            return Err(bad(format!("unexpected <{}> in group", m.element_name)));
                        }
                        attr(m, "ref")
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                targets.push(Target::group(attr(el, "id")?, members));
            }
            other => return Err(bad(format!("unexpected element <{other}>"))),
        }
    }
    validate_targets(&targets)?;
    sort_targets(&mut targets);
    Ok(targets)
}

pub fn targets_to_xml(targets: &[Target]) -> Vec<u8> {
    let mut root = DescriptorNode::new("targets");
    for t in targets {
        root.children.push(match &t.kind {
            TargetKind::Server { endpoint, site } => DescriptorNode::new("server")
                .with_attr("id", t.id.clone())
                .with_attr("endpoint", endpoint.clone())
                .with_attr("site", site.clone()),
            TargetKind::Group { members } => {
                let mut g = DescriptorNode::new("group").with_attr("id", t.id.clone());
                for m in members {
                    g.children.push(DescriptorNode::new("member").with_attr("ref", m.clone()));
                }
                g
            }
        });
    }
    xml::canonical_bytes(&root)
}

/// Serves a targets list to managers over the framed protocol
/// (`HELLO`, `TARGETS`).
pub struct RegistryHandle {
    addr: SocketAddr,
    stopping: Arc<AtomicBool>,
    acceptor: Mutex<Option<JoinHandle<()>>>,
}

pub fn run_registry(targets: Vec<Target>, endpoint: &str) -> Result<RegistryHandle, agent::AgentError> {
    validate_targets(&targets).map_err(|e| agent::AgentError::InvalidConfig(e.to_string()))?;
    let listener = TcpListener::bind(endpoint).map_err(|e| match e.kind() {
        io::ErrorKind::AddrInUse => agent::AgentError::EndpointInUse(endpoint.to_string()),
        _ => agent::AgentError::Io(e),
    })?;
    let addr = listener.local_addr()?;
    let stopping = Arc::new(AtomicBool::new(false));
    let body = String::from_utf8(targets_to_xml(&targets)).expect("canonical XML is UTF-8");
    let handler = move |payload: &[u8]| {
        let request: Value = serde_json::from_slice(payload).unwrap_or(Value::Null);
        let id = request.get("id").cloned().unwrap_or(Value::Null);
        let response = match request.get("op").and_then(Value::as_str) {
            Some("HELLO") => wire::ok_response(&id, json!({ "role": "registry" })),
            Some("TARGETS") => wire::ok_response(&id, json!({ "targets_xml": body })),
            Some(other) => wire::error_response(&id, "UnknownOp", &format!("unknown op `{other}`")),
            None => wire::error_response(&id, "BadRequest", "request lacks `op`"),
        };
        serde_json::to_vec(&response).expect("JSON values serialize")
    };
    let acceptor = {
        let stopping = Arc::clone(&stopping);
        thread::Builder::new()
            .name("target-registry".into())
            .spawn(move || agent::serve(listener, stopping, handler))?
    };
    Ok(RegistryHandle {
        addr,
        stopping,
        acceptor: Mutex::new(Some(acceptor)),
    })
}

impl RegistryHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Manager URI for this registry.
    pub fn uri(&self) -> String {
        format!("depman://{}/", self.addr)
    }

    pub fn shutdown(&self) {
        let acceptor = self.acceptor.lock().unwrap_or_else(|e| e.into_inner()).take();
        if let Some(acceptor) = acceptor {
            self.stopping.store(true, Ordering::SeqCst);
            agent::wake_listener(self.addr);
            let _ = acceptor.join();
        }
    }
}

impl Drop for RegistryHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}
