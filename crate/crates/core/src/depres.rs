//! Dependencies between deployment units and on server configuration:
//! required units, services, provisioned resources and cross-site registry
//! links. Provides install ordering and satisfaction checks against a server.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::ServerSnapshot;
use crate::unit::DeployableUnit;
use crate::xml::{self, DescriptorNode};

/// Server services a unit may depend on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ServiceName {
    Mail,
    EjbContainer,
    WebContainer,
    Ws,
    Transaction,
    Registry,
    Security,
    Ear,
}

impl ServiceName {
    pub const ALL: [ServiceName; 8] = [
        ServiceName::Mail,
        ServiceName::EjbContainer,
        ServiceName::WebContainer,
        ServiceName::Ws,
        ServiceName::Transaction,
        ServiceName::Registry,
        ServiceName::Security,
        ServiceName::Ear,
    ];

    pub const MANDATORY: [ServiceName; 4] = [
        ServiceName::Transaction,
        ServiceName::Registry,
        ServiceName::Security,
        ServiceName::Ear,
    ];

    pub fn is_mandatory(self) -> bool {
        Self::MANDATORY.contains(&self)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ServiceName::Mail => "mail",
            ServiceName::EjbContainer => "ejb-container",
            ServiceName::WebContainer => "web-container",
            ServiceName::Ws => "ws",
            ServiceName::Transaction => "transaction",
            ServiceName::Registry => "registry",
            ServiceName::Security => "security",
            ServiceName::Ear => "ear",
        }
    }
}

impl fmt::Display for ServiceName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ServiceName {
    type Err = DepsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ServiceName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| DepsError::UnknownService(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ResourceRequirement {
    pub resource: String,
    pub service: ServiceName,
}

/// Requirement that the server's registry (communication service) is the one
/// of a server on `site`. Only the registry service can be linked.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SiteLink {
    pub service: ServiceName,
    pub site: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencySpec {
    pub requires_unit: Vec<String>,
    pub requires_service: Vec<ServiceName>,
    pub requires_resource: Vec<ResourceRequirement>,
    pub requires_site_link: Vec<SiteLink>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DepsError {
    #[error("malformed dependencies: {0}")]
    MalformedDeps(String),
    #[error("unknown service `{0}`")]
    UnknownService(String),
    #[error("duplicate requirement {0}")]
    DuplicateRequirement(String),
}

impl DependencySpec {
    pub fn is_empty(&self) -> bool {
        self.requires_unit.is_empty()
            && self.requires_service.is_empty()
            && self.requires_resource.is_empty()
            && self.requires_site_link.is_empty()
    }

    pub fn to_node(&self) -> DescriptorNode {
        let mut root = DescriptorNode::new("dependencies");
        for u in &self.requires_unit {
            root.children
                .push(DescriptorNode::new("requires-unit").with_attr("name", u.clone()));
        }
        for s in &self.requires_service {
            root.children
                .push(DescriptorNode::new("requires-service").with_attr("name", s.as_str()));
        }
        for r in &self.requires_resource {
            root.children.push(
                DescriptorNode::new("requires-resource")
                    .with_attr("name", r.resource.clone())
                    .with_attr("service", r.service.as_str()),
            );
        }
        for l in &self.requires_site_link {
            root.children.push(
                DescriptorNode::new("requires-site-link")
                    .with_attr("service", l.service.as_str())
                    .with_attr("site", l.site.clone()),
            );
        }
        root
    }

    /// Canonical `META-INF/deps.xml` content.
    pub fn to_bytes(&self) -> Vec<u8> {
        xml::canonical_bytes(&self.to_node())
    }

    /// Declarations that are accepted but have no effect: mandatory services
    /// are present on every server.
    pub fn warnings(&self) -> Vec<String> {
        self.requires_service
            .iter()
            .filter(|s| s.is_mandatory())
            .map(|s| format!("service `{s}` is mandatory and always available; the requirement is redundant"))
            .collect()
    }
}

/// Parses the `META-INF/deps.xml` format.
pub fn parse_dependency_spec(data: &[u8]) -> Result<DependencySpec, DepsError> {
    let root = xml::parse(data).map_err(|e| DepsError::MalformedDeps(e.to_string()))?;
    if root.element_name != "dependencies" {
        return Err(DepsError::MalformedDeps(format!(
            "root element is <{}>, expected <dependencies>",
            root.element_name
        )));
    }
    if root.text.is_some() {
        return Err(DepsError::MalformedDeps("<dependencies> may not contain text".into()));
    }
    let mut spec = DependencySpec::default();
    for el in &root.children {
        let attr = |name: &str| {
            el.attr(name).map(str::to_string).ok_or_else(|| {
                DepsError::MalformedDeps(format!("<{}> lacks `{name}`", el.element_name))
            })
        };
        match el.element_name.as_str() {
            "requires-unit" => spec.requires_unit.push(attr("name")?),
            "requires-service" => spec.requires_service.push(attr("name")?.parse()?),
            "requires-resource" => spec.requires_resource.push(ResourceRequirement {
                resource: attr("name")?,
                service: attr("service")?.parse()?,
            }),
            "requires-site-link" => {
                let service: ServiceName = attr("service")?.parse()?;
                if service != ServiceName::Registry {
                    return Err(DepsError::MalformedDeps(format!(
                        "site links are only supported for the registry service, not `{service}`"
                    )));
                }
                spec.requires_site_link.push(SiteLink {
                    service,
                    site: attr("site")?,
                });
            }
            other => return Err(DepsError::MalformedDeps(format!("unexpected element <{other}>"))),
        }
    }
    first_duplicate(&spec.requires_unit, |u| format!("requires-unit `{u}`"))?;
    first_duplicate(&spec.requires_service, |s| format!("requires-service `{s}`"))?;
    first_duplicate(&spec.requires_resource, |r| {
        format!("requires-resource `{}@{}`", r.resource, r.service)
    })?;
    first_duplicate(&spec.requires_site_link, |l| {
        format!("requires-site-link `{}→{}`", l.service, l.site)
    })?;
    Ok(spec)
}

fn first_duplicate<T: Ord>(items: &[T], describe: impl Fn(&T) -> String) -> Result<(), DepsError> {
    let mut seen = BTreeSet::new();
    match items.iter().find(|i| !seen.insert(*i)) {
        Some(dup) => Err(DepsError::DuplicateRequirement(describe(dup))),
        None => Ok(()),
    }
}

/// Requirements a unit (with its children folded in) places on its server.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Environment {
    pub requires_service: BTreeSet<ServiceName>,
    pub requires_resource: BTreeSet<ResourceRequirement>,
    pub requires_site_link: BTreeSet<SiteLink>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DependencyGraph {
    pub nodes: BTreeSet<String>,
    /// `(dependent, prerequisite)` pairs. Prerequisites outside `nodes` are
    /// external and must already be installed on the target.
    pub edges: BTreeSet<(String, String)>,
    pub env: BTreeMap<String, Environment>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("duplicate unit name `{0}`")]
    DuplicateUnitName(String),
    #[error("dependency cycle: {}", .0.join(" -> "))]
    CycleDetected(Vec<String>),
}

impl DependencyGraph {
    pub fn add_node(&mut self, name: impl Into<String>) {
        self.nodes.insert(name.into());
    }

    pub fn add_edge(&mut self, dependent: impl Into<String>, prerequisite: impl Into<String>) {
        self.edges.insert((dependent.into(), prerequisite.into()));
    }

    /// Prerequisites not among the graph's nodes.
    pub fn external_prerequisites(&self) -> BTreeSet<&str> {
        self.edges
            .iter()
            .map(|(_, p)| p.as_str())
            .filter(|p| !self.nodes.contains(*p))
            .collect()
    }
}

/// Builds the graph for a batch of units. Children's requirements are folded
/// into their application; requirements between members of one application
/// are internal and produce no edge.
pub fn build_graph(units: &[DeployableUnit]) -> Result<DependencyGraph, GraphError> {
    let mut graph = DependencyGraph::default();
    for unit in units {
        if !graph.nodes.insert(unit.name.clone()) {
            return Err(GraphError::DuplicateUnitName(unit.name.clone()));
        }
        let deployables = unit.deployables();
        let internal: BTreeSet<&str> = deployables.iter().map(|d| d.name.as_str()).collect();
        let mut env = Environment::default();
        for d in deployables {
            for req in &d.deps.requires_unit {
                if !internal.contains(req.as_str()) {
                    graph.edges.insert((unit.name.clone(), req.clone()));
                }
            }
            env.requires_service.extend(d.deps.requires_service.iter().copied());
            env.requires_resource.extend(d.deps.requires_resource.iter().cloned());
            env.requires_site_link.extend(d.deps.requires_site_link.iter().cloned());
        }
        graph.env.insert(unit.name.clone(), env);
    }
    Ok(graph)
}

/// Prerequisites-first order over the graph's nodes. Among the nodes whose
/// internal prerequisites are all placed, the lexicographically smallest goes
/// next. External prerequisites are left out.
pub fn install_order(graph: &DependencyGraph) -> Result<Vec<String>, GraphError> {
    let mut pending: BTreeMap<&str, usize> = graph.nodes.iter().map(|n| (n.as_str(), 0)).collect();
    let mut dependents: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (dependent, prerequisite) in &graph.edges {
        if graph.nodes.contains(dependent) && graph.nodes.contains(prerequisite) {
            *pending.get_mut(dependent.as_str()).expect("node") += 1;
            dependents.entry(prerequisite).or_default().push(dependent);
        }
    }
    let mut ready: BTreeSet<&str> = pending.iter().filter(|(_, &n)| n == 0).map(|(&k, _)| k).collect();
    let mut order = Vec::with_capacity(graph.nodes.len());
    while let Some(next) = ready.pop_first() {
        order.push(next.to_string());
        for &d in dependents.get(next).map(Vec::as_slice).unwrap_or_default() {
            let n = pending.get_mut(d).expect("node");
            *n -= 1;
            if *n == 0 {
                ready.insert(d);
            }
        }
    }
    if order.len() < graph.nodes.len() {
        let stuck: BTreeSet<&str> = pending
            .iter()
            .filter(|(k, _)| !order.iter().any(|o| o == *k))
            .map(|(&k, _)| k)
            .collect();
        return Err(GraphError::CycleDetected(find_cycle(graph, &stuck)));
    }
    Ok(order)
}

/// One cycle among `stuck` nodes, rotated to start at its smallest member.
fn find_cycle(graph: &DependencyGraph, stuck: &BTreeSet<&str>) -> Vec<String> {
    // Every stuck node has at least one stuck prerequisite, so walking
    // smallest prerequisites must revisit a node.
    let prereq = |n: &str| {
        graph
            .edges
            .range((n.to_string(), String::new())..)
            .take_while(|(d, _)| d == n)
            .map(|(_, p)| p.as_str())
            .find(|p| stuck.contains(p))
    };
    let mut path: Vec<&str> = Vec::new();
    let mut current = *stuck.first().expect("non-empty");
    loop {
        if let Some(pos) = path.iter().position(|&p| p == current) {
            let mut cycle: Vec<String> = path[pos..].iter().map(|s| s.to_string()).collect();
            let min = cycle
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            cycle.rotate_left(min);
            return cycle;
        }
        path.push(current);
        current = prereq(current).expect("stuck node has a stuck prerequisite");
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DependencyKind {
    Unit,
    Service,
    Resource,
    SiteLink,
}

impl fmt::Display for DependencyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DependencyKind::Unit => "unit",
            DependencyKind::Service => "service",
            DependencyKind::Resource => "resource",
            DependencyKind::SiteLink => "site-link",
        })
    }
}

/// A requirement of `unit` that the server does not meet. `detail` names the
/// missing prerequisite: `bankRA`, `mail`, `MailFactory1@mail`,
/// `registry→siteB`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnsatisfiedDependency {
    pub unit: String,
    pub kind: DependencyKind,
    pub detail: String,
}

impl fmt::Display for UnsatisfiedDependency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "UnsatisfiedDependency[{}] {}: {}", self.kind, self.unit, self.detail)
    }
}

/// Checks the unit and, for applications, every child against a server.
pub fn check_against_target(unit: &DeployableUnit, server: &ServerSnapshot) -> Vec<UnsatisfiedDependency> {
    let deployables = unit.deployables();
    let internal: BTreeSet<&str> = deployables.iter().map(|d| d.name.as_str()).collect();
    let installed = server.installed_names();
    let mut findings = Vec::new();
    for d in deployables {
        let mut missing = |kind, detail: String| {
            findings.push(UnsatisfiedDependency {
                unit: d.name.clone(),
                kind,
                detail,
            })
        };
        for req in &d.deps.requires_unit {
            if !internal.contains(req.as_str()) && !installed.contains(req.as_str()) {
                missing(DependencyKind::Unit, req.clone());
            }
        }
        for service in &d.deps.requires_service {
            if !server.has_service(*service) {
                missing(DependencyKind::Service, service.to_string());
            }
        }
        for req in &d.deps.requires_resource {
            if server.resources.get(&req.resource) != Some(&req.service) {
                missing(DependencyKind::Resource, format!("{}@{}", req.resource, req.service));
            }
        }
        for link in &d.deps.requires_site_link {
            if server.registry_site.as_deref() != Some(link.site.as_str()) {
                missing(DependencyKind::SiteLink, format!("{}→{}", link.service, link.site));
            }
        }
    }
    findings
}
