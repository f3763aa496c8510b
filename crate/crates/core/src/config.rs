//! The configuration step: a platform configuration tree mirroring the
//! standard descriptor, deployer bindings, save/restore for disconnected
//! use, and generation of the deployed unit.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::unit::{self, DeployableUnit, DeployedUnit, Violation};
use crate::xml::{self, DescriptorNode};

/// One configuration node attached to a descriptor element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigNode {
    /// Locates the descriptor element within its deployable.
    pub xpath: String,
    /// Present for `<reference>` elements.
    pub reference_name: Option<String>,
    pub binding: Option<String>,
    pub children: Vec<ConfigNode>,
}

impl ConfigNode {
    fn root() -> Self {
        ConfigNode {
            xpath: "/unit".into(),
            reference_name: None,
            binding: None,
            children: Vec::new(),
        }
    }

    fn component(name: &str) -> Self {
        ConfigNode {
            xpath: element_xpath("component", name),
            reference_name: None,
            binding: None,
            children: Vec::new(),
        }
    }

    fn reference(name: &str, binding: Option<String>) -> Self {
        ConfigNode {
            xpath: element_xpath("reference", name),
            reference_name: Some(name.to_string()),
            binding,
            children: Vec::new(),
        }
    }

    /// Name of the component this node configures, if it is a component node.
    pub fn component_name(&self) -> Option<&str> {
        self.xpath
            .strip_prefix("/unit/component[@name=")
            .and_then(|rest| rest.get(1..rest.len().checked_sub(2)?))
    }
}

fn element_xpath(element: &str, name: &str) -> String {
    let quote = if name.contains('\'') { '"' } else { '\'' };
    format!("/unit/{element}[@name={quote}{name}{quote}]")
}

/// Configuration of one deployable (the unit itself or an application child).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigRoot {
    pub deployable: String,
    pub node: ConfigNode,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeploymentConfiguration {
    pub unit_name: String,
    /// The unit first, then its children in tree order.
    pub roots: Vec<ConfigRoot>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("invalid unit: {}", join_violations(.0))]
    InvalidUnit(Vec<Violation>),
    #[error("unknown reference `{0}`")]
    UnknownReference(String),
    #[error("unknown deployable `{0}`")]
    UnknownDeployable(String),
    #[error("invalid resource name `{0}`")]
    InvalidResource(String),
    #[error("malformed configuration: {0}")]
    MalformedConfiguration(String),
    #[error("configuration incomplete; unbound references: {}", .0.join(", "))]
    IncompleteConfiguration(Vec<String>),
    #[error("configuration is for `{config}`, not for unit `{unit}`")]
    ForeignConfiguration { config: String, unit: String },
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

impl DeploymentConfiguration {
    pub fn is_complete(&self) -> bool {
        self.reference_nodes().all(|(_, n)| n.binding.is_some())
    }

    /// `(deployable, node)` for every reference node, in tree order.
    pub fn reference_nodes(&self) -> impl Iterator<Item = (&str, &ConfigNode)> {
        self.roots.iter().flat_map(|r| {
            r.node
                .children
                .iter()
                .filter(|c| c.reference_name.is_some())
                .map(move |c| (r.deployable.as_str(), c))
        })
    }

    /// Binds every reference node named `reference` to `resource`. A previous
    /// binding is overwritten.
    pub fn bind(&self, reference: &str, resource: &str) -> Result<Self, ConfigError> {
        self.bind_matching(None, reference, resource)
    }

    /// Binds `reference` of one deployable only.
    pub fn bind_in(&self, deployable: &str, reference: &str, resource: &str) -> Result<Self, ConfigError> {
        if !self.roots.iter().any(|r| r.deployable == deployable) {
            return Err(ConfigError::UnknownDeployable(deployable.to_string()));
        }
        self.bind_matching(Some(deployable), reference, resource)
    }

    fn bind_matching(&self, deployable: Option<&str>, reference: &str, resource: &str) -> Result<Self, ConfigError> {
        if !unit::is_token(resource) {
            return Err(ConfigError::InvalidResource(resource.to_string()));
        }
        let mut updated = self.clone();
        let mut hit = false;
        for root in &mut updated.roots {
            if deployable.is_some_and(|d| d != root.deployable) {
                continue;
            }
            for node in &mut root.node.children {
                if node.reference_name.as_deref() == Some(reference) {
                    node.binding = Some(resource.to_string());
                    hit = true;
                }
            }
        }
        if hit {
            Ok(updated)
        } else {
            Err(ConfigError::UnknownReference(reference.to_string()))
        }
    }

    /// Sorted, de-duplicated names of reference nodes without a binding.
    pub fn unbound_references(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .reference_nodes()
            .filter(|(_, n)| n.binding.is_none())
            .filter_map(|(_, n)| n.reference_name.clone())
            .collect();
        names.sort();
        names.dedup();
        names
    }

    /// Sorted `ref=resource` lines for one deployable's bound references.
    pub fn binding_lines(&self, deployable: &str) -> Vec<String> {
        let mut lines: Vec<String> = self
            .reference_nodes()
            .filter(|(d, _)| *d == deployable)
            .filter_map(|(_, n)| Some(format!("{}={}", n.reference_name.as_ref()?, n.binding.as_ref()?)))
            .collect();
        lines.sort();
        lines
    }

    /// `(deployable, reference, resource)` for every bound reference.
    pub fn bindings(&self) -> Vec<(&str, &str, &str)> {
        self.reference_nodes()
            .filter_map(|(d, n)| Some((d, n.reference_name.as_deref()?, n.binding.as_deref()?)))
            .collect()
    }

    /// Same tree as `other` with bindings ignored.
    fn same_shape(&self, other: &DeploymentConfiguration) -> bool {
        let strip = |c: &DeploymentConfiguration| {
            let mut c = c.clone();
            for r in &mut c.roots {
                for n in &mut r.node.children {
                    n.binding = None;
                }
            }
            c
        };
        strip(self) == strip(other)
    }
}

impl fmt::Display for DeploymentConfiguration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for root in &self.roots {
            writeln!(f, "{} {}", root.deployable, root.node.xpath)?;
            for node in &root.node.children {
                match (&node.reference_name, &node.binding) {
                    (Some(r), Some(b)) => writeln!(f, "  {} -> {b}", r)?,
                    (Some(r), None) => writeln!(f, "  {} (unbound)", r)?,
                    _ => writeln!(f, "  {}", node.xpath)?,
                }
            }
        }
        Ok(())
    }
}

/// Builds the configuration tree: one root per deployable, one child per
/// `<component>` and per `<reference>` in document order.
pub fn create_configuration(unit: &DeployableUnit) -> Result<DeploymentConfiguration, ConfigError> {
    let violations = unit::validate_unit(unit);
    if !violations.is_empty() {
        return Err(ConfigError::InvalidUnit(violations));
    }
    let roots = unit
        .deployables()
        .into_iter()
        .map(|d| {
            let mut node = ConfigNode::root();
            for el in &d.descriptor.children {
                let Some(name) = el.attr("name") else { continue };
                match el.element_name.as_str() {
                    "component" => node.children.push(ConfigNode::component(name)),
                    "reference" => node.children.push(ConfigNode::reference(name, None)),
                    _ => {}
                }
            }
            ConfigRoot {
                deployable: d.name.clone(),
                node,
            }
        })
        .collect();
    Ok(DeploymentConfiguration {
        unit_name: unit.name.clone(),
        roots,
    })
}

/// Serializes to canonical `<platform-config>` XML. Unbound references are
/// kept as `<binding>` elements without `resource`.
pub fn save_configuration(config: &DeploymentConfiguration) -> Vec<u8> {
    let mut root = DescriptorNode::new("platform-config").with_attr("for", config.unit_name.clone());
    for r in &config.roots {
        if r.deployable != config.unit_name {
            root.children
                .push(DescriptorNode::new("deployable").with_attr("name", r.deployable.clone()));
        }
        for node in &r.node.children {
            let el = if let Some(reference) = &node.reference_name {
                let mut b = DescriptorNode::new("binding")
                    .with_attr("deployable", r.deployable.clone())
                    .with_attr("reference", reference.clone());
                if let Some(resource) = &node.binding {
                    b = b.with_attr("resource", resource.clone());
                }
                b
            } else {
                DescriptorNode::new("component")
                    .with_attr("deployable", r.deployable.clone())
                    .with_attr("name", node.component_name().unwrap_or_default())
            };
            root.children.push(el);
        }
    }
    xml::canonical_bytes(&root)
}

pub fn restore_configuration(data: &[u8]) -> Result<DeploymentConfiguration, ConfigError> {
    let bad = |m: String| ConfigError::MalformedConfiguration(m);
    let root = xml::parse(data).map_err(|e| bad(e.to_string()))?;
    if root.element_name != "platform-config" {
        return Err(bad(format!("root element is <{}>", root.element_name)));
    }
    let unit_name = root
        .attr("for")
        .ok_or_else(|| bad("<platform-config> lacks `for`".into()))?
        .to_string();
    if root.text.is_some() {
        return Err(bad("unexpected text".into()));
    }
    let mut roots = vec![ConfigRoot {
        deployable: unit_name.clone(),
        node: ConfigNode::root(),
    }];
    for el in &root.children {
        let attr = |name: &str| {
            el.attr(name)
                .ok_or_else(|| bad(format!("<{}> lacks `{name}`", el.element_name)))
        };
        let target = |roots: &mut Vec<ConfigRoot>, deployable: &str| -> Result<usize, ConfigError> {
            roots
                .iter()
                .position(|r| r.deployable == deployable)
                .ok_or_else(|| bad(format!("undeclared deployable `{deployable}`")))
        };
        match el.element_name.as_str() {
            "deployable" => {
                let name = attr("name")?;
                if roots.iter().any(|r| r.deployable == name) {
                    return Err(bad(format!("deployable `{name}` declared twice")));
                }
                roots.push(ConfigRoot {
                    deployable: name.to_string(),
                    node: ConfigNode::root(),
                });
            }
            "component" => {
                let i = target(&mut roots, attr("deployable")?)?;
                roots[i].node.children.push(ConfigNode::component(attr("name")?));
            }
            "binding" => {
                let i = target(&mut roots, attr("deployable")?)?;
                let reference = attr("reference")?;
                if roots[i].node.children.iter().any(|n| n.reference_name.as_deref() == Some(reference)) {
                    return Err(bad(format!("reference `{reference}` listed twice")));
                }
                let resource = el.attr("resource").map(str::to_string);
                roots[i].node.children.push(ConfigNode::reference(reference, resource));
            }
            other => return Err(bad(format!("unexpected element <{other}>"))),
        }
    }
    Ok(DeploymentConfiguration { unit_name, roots })
}

/// FNV-1a, 64-bit.
pub fn fnv1a64(data: &[u8]) -> u64 {
    const OFFSET_BASIS: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    data.iter()
        .fold(OFFSET_BASIS, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StubEntry {
    pub component: String,
    /// 16 lowercase hex digits.
    pub digest: String,
}

/// Stand-in for generated interposition classes: one digest per component.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InterpositionManifest {
    pub entries: Vec<StubEntry>,
}

impl InterpositionManifest {
    pub fn to_bytes(&self) -> Vec<u8> {
        self.entries
            .iter()
            .map(|e| format!("stub:{}:{}\n", e.component, e.digest))
            .collect::<String>()
            .into_bytes()
    }

    pub fn parse(data: &[u8]) -> Result<Self, String> {
        let text = std::str::from_utf8(data).map_err(|e| e.to_string())?;
        if !text.is_empty() && !text.ends_with('\n') {
            return Err("manifest must end with a newline".into());
        }
        let mut entries = Vec::new();
        for line in text.lines() {
            let rest = line
                .strip_prefix("stub:")
                .ok_or_else(|| format!("bad manifest line `{line}`"))?;
            let (component, digest) = rest
                .rsplit_once(':')
                .ok_or_else(|| format!("bad manifest line `{line}`"))?;
            if digest.len() != 16 || !digest.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
                return Err(format!("bad digest in `{line}`"));
            }
            entries.push(StubEntry {
                component: component.to_string(),
                digest: digest.to_string(),
            });
        }
        if entries.windows(2).any(|w| w[0].component >= w[1].component) {
            return Err("manifest entries must be sorted and unique".into());
        }
        Ok(InterpositionManifest { entries })
    }
}

/// Digest input for one component: its canonical descriptor element, a NUL
/// byte, then its deployable's sorted `ref=resource` lines, each
/// newline-terminated.
pub fn stub_digest_input(component: &DescriptorNode, binding_lines: &[String]) -> Vec<u8> {
    let mut input = xml::canonical_bytes(component);
    input.push(0);
    for line in binding_lines {
        input.extend_from_slice(line.as_bytes());
        input.push(b'\n');
    }
    input
}

pub fn generate_manifest(unit: &DeployableUnit, config: &DeploymentConfiguration) -> InterpositionManifest {
    let mut entries: Vec<StubEntry> = unit
        .deployables()
        .into_iter()
        .flat_map(|d| {
            let lines = config.binding_lines(&d.name);
            d.descriptor
                .children_named("component")
                .filter_map(|c| {
                    let digest = fnv1a64(&stub_digest_input(c, &lines));
                    Some(StubEntry {
                        component: c.attr("name")?.to_string(),
                        digest: format!("{digest:016x}"),
                    })
                })
                .collect::<Vec<_>>()
        })
        .collect();
    entries.sort_by(|a, b| a.component.cmp(&b.component));
    InterpositionManifest { entries }
}

/// The input unit plus `META-INF/platform.xml` and `META-INF/stubs.manifest`.
pub fn generate_deployed_unit(
    unit: &DeployableUnit,
    config: &DeploymentConfiguration,
) -> Result<DeployedUnit, ConfigError> {
    let foreign = || ConfigError::ForeignConfiguration {
        config: config.unit_name.clone(),
        unit: unit.name.clone(),
    };
    if config.unit_name != unit.name {
        return Err(foreign());
    }
    let expected = create_configuration(unit)?;
    if !expected.same_shape(config) {
        return Err(foreign());
    }
    let unbound = config.unbound_references();
    if !unbound.is_empty() {
        return Err(ConfigError::IncompleteConfiguration(unbound));
    }
    Ok(DeployedUnit {
        base: unit.clone(),
        config: config.clone(),
        manifest: generate_manifest(unit, config),
    })
}

/// Bindings as `deployable -> (reference -> resource)`.
pub fn binding_map(config: &DeploymentConfiguration) -> BTreeMap<&str, BTreeMap<&str, &str>> {
    let mut map: BTreeMap<&str, BTreeMap<&str, &str>> = BTreeMap::new();
    for (d, r, res) in config.bindings() {
        map.entry(d).or_default().insert(r, res);
    }
    map
}
