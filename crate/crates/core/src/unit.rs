//! Deployable units: the application / web / component / adapter archives,
//! their standard descriptor, and structural validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Cursor, Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{self, DeploymentConfiguration, InterpositionManifest};
use crate::depres::{self, DependencySpec};
use crate::xml::{self, DescriptorNode};

pub const DESCRIPTOR_ENTRY: &str = "META-INF/unit.xml";
pub const DEPS_ENTRY: &str = "META-INF/deps.xml";
pub const PLATFORM_ENTRY: &str = "META-INF/platform.xml";
pub const STUBS_ENTRY: &str = "META-INF/stubs.manifest";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    Application,
    Web,
    Component,
    Adapter,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 4] = [
        ModuleKind::Application,
        ModuleKind::Web,
        ModuleKind::Component,
        ModuleKind::Adapter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleKind::Application => "application",
            ModuleKind::Web => "web",
            ModuleKind::Component => "component",
            ModuleKind::Adapter => "adapter",
        }
    }

    /// Conventional archive extension for a child entry of this kind.
    pub fn extension(self) -> &'static str {
        match self {
            ModuleKind::Application => "app",
            ModuleKind::Web => "web",
            ModuleKind::Component => "cmp",
            ModuleKind::Adapter => "rar",
        }
    }

    /// Kind implied by a child entry name, if its extension is a known one.
    /// The J2EE extensions are accepted as aliases.
    pub fn from_entry_name(entry: &str) -> Option<ModuleKind> {
        let ext = entry.rsplit_once('.')?.1;
        match ext {
            "app" | "ear" => Some(ModuleKind::Application),
            "web" | "war" => Some(ModuleKind::Web),
            "cmp" | "jar" => Some(ModuleKind::Component),
            "rar" | "adp" => Some(ModuleKind::Adapter),
            _ => None,
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModuleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModuleKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown module kind `{s}`"))
    }
}

#[derive(Debug, Error)]
pub enum UnitError {
    #[error("not a ZIP archive: {0}")]
    NotAnArchive(String),
    #[error("missing descriptor `{0}`")]
    MissingDescriptor(String),
    #[error("malformed descriptor `{entry}` at line {line}: {message}")]
    MalformedDescriptor {
        entry: String,
        line: usize,
        message: String,
    },
    #[error("`{entry}` declares kind {found}, expected {expected}")]
    KindMismatch {
        entry: String,
        expected: ModuleKind,
        found: ModuleKind,
    },
    #[error("contained module `{0}` is not an entry of the archive")]
    MissingChild(String),
    #[error("malformed dependencies in `{entry}`: {source}")]
    Deps {
        entry: String,
        #[source]
        source: depres::DepsError,
    },
    #[error("not a deployed unit: `{0}` is absent (configure the unit first)")]
    NotConfigured(String),
    #[error("malformed `{entry}`: {message}")]
    MalformedArtifact { entry: String, message: String },
}

/// A deployable archive with its parsed descriptor.
///
/// `entries` is the full archive content, child archives included; `children`
/// are the parsed views of the child entries named by `<contains>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeployableUnit {
    pub name: String,
    pub kind: ModuleKind,
    pub version: String,
    pub entries: BTreeMap<String, Vec<u8>>,
    pub descriptor: DescriptorNode,
    pub children: Vec<DeployableUnit>,
    pub deps: DependencySpec,
}

/// A configured unit: the input archive plus the platform configuration and
/// the generated stub manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeployedUnit {
    pub base: DeployableUnit,
    pub config: DeploymentConfiguration,
    pub manifest: InterpositionManifest,
}

impl DeployableUnit {
    /// The unit followed by its children, depth first.
    pub fn deployables(&self) -> Vec<&DeployableUnit> {
        let mut out = vec![self];
        for child in &self.children {
            out.extend(child.deployables());
        }
        out
    }

    pub fn component_names(&self) -> Vec<&str> {
        self.descriptor
            .children_named("component")
            .filter_map(|c| c.attr("name"))
            .collect()
    }

    pub fn reference_names(&self) -> Vec<&str> {
        self.descriptor
            .children_named("reference")
            .filter_map(|c| c.attr("name"))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        write_entries(&self.entries)
    }
}

impl DeployedUnit {
    pub fn name(&self) -> &str {
        &self.base.name
    }

    pub fn kind(&self) -> ModuleKind {
        self.base.kind
    }

    /// Archive entries of the deployed unit: the base entries plus the two
    /// generated ones.
    pub fn entries(&self) -> BTreeMap<String, Vec<u8>> {
        let mut entries = self.base.entries.clone();
        entries.insert(PLATFORM_ENTRY.into(), config::save_configuration(&self.config));
        entries.insert(STUBS_ENTRY.into(), self.manifest.to_bytes());
        entries
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        write_entries(&self.entries())
    }
}

/// Anything `write_unit` can serialize.
pub trait UnitArchive {
    fn archive_entries(&self) -> BTreeMap<String, Vec<u8>>;
}

impl UnitArchive for DeployableUnit {
    fn archive_entries(&self) -> BTreeMap<String, Vec<u8>> {
        self.entries.clone()
    }
}

impl UnitArchive for DeployedUnit {
    fn archive_entries(&self) -> BTreeMap<String, Vec<u8>> {
        self.entries()
    }
}

/// ZIP bytes with entries in lexicographic path order and fixed timestamps.
pub fn write_unit(unit: &impl UnitArchive) -> Vec<u8> {
    write_entries(&unit.archive_entries())
}

pub fn write_entries(entries: &BTreeMap<String, Vec<u8>>) -> Vec<u8> {
    let mut zip = zip::ZipWriter::new(Cursor::new(Vec::new()));
    let options = zip::write::SimpleFileOptions::default()
        .compression_method(zip::CompressionMethod::Stored)
        .last_modified_time(zip::DateTime::default())
        .unix_permissions(0o644);
    for (path, data) in entries {
        // In-memory writes cannot fail short of allocation failure.
        zip.start_file(path.as_str(), options).expect("zip entry header");
        zip.write_all(data).expect("zip entry data");
    }
    zip.finish().expect("zip central directory").into_inner()
}

pub fn read_entries(archive: &[u8]) -> Result<BTreeMap<String, Vec<u8>>, UnitError> {
    let bad = |e: zip::result::ZipError| UnitError::NotAnArchive(e.to_string());
    let mut zip = zip::ZipArchive::new(Cursor::new(archive)).map_err(bad)?;
    let mut entries = BTreeMap::new();
    for i in 0..zip.len() {
        let mut file = zip.by_index(i).map_err(bad)?;
        if file.is_dir() {
            continue;
        }
        let mut data = Vec::with_capacity(file.size() as usize);
        file.read_to_end(&mut data)
            .map_err(|e| UnitError::NotAnArchive(e.to_string()))?;
        entries.insert(file.name().to_string(), data);
    }
    Ok(entries)
}

/// Parses a unit archive. Application units have each `<contains>` entry
/// opened recursively as a child.
pub fn open_unit(archive: &[u8]) -> Result<DeployableUnit, UnitError> {
    let entries = read_entries(archive)?;
    unit_from_entries(entries, "")
}

/// Parses an archive produced by `write_unit` on a `DeployedUnit`.
pub fn open_deployed(archive: &[u8]) -> Result<DeployedUnit, UnitError> {
    let mut entries = read_entries(archive)?;
    let platform = entries
        .remove(PLATFORM_ENTRY)
        .ok_or_else(|| UnitError::NotConfigured(PLATFORM_ENTRY.into()))?;
    let stubs = entries
        .remove(STUBS_ENTRY)
        .ok_or_else(|| UnitError::NotConfigured(STUBS_ENTRY.into()))?;
    let base = unit_from_entries(entries, "")?;
    let config = config::restore_configuration(&platform).map_err(|e| UnitError::MalformedArtifact {
        entry: PLATFORM_ENTRY.into(),
        message: e.to_string(),
    })?;
    let manifest = InterpositionManifest::parse(&stubs).map_err(|message| UnitError::MalformedArtifact {
        entry: STUBS_ENTRY.into(),
        message,
    })?;
    Ok(DeployedUnit { base, config, manifest })
}

struct Header {
    name: String,
    kind: ModuleKind,
    version: String,
}

fn read_header(descriptor: &DescriptorNode, entry: &str) -> Result<Header, UnitError> {
    let malformed = |message: String| UnitError::MalformedDescriptor {
        entry: entry.to_string(),
        line: 1,
        message,
    };
    if descriptor.element_name != "unit" {
        return Err(malformed(format!(
            "root element is <{}>, expected <unit>",
            descriptor.element_name
        )));
    }
    let attr = |name: &str| {
        descriptor
            .attr(name)
            .map(str::to_string)
            .ok_or_else(|| malformed(format!("<unit> lacks the `{name}` attribute")))
    };
    let kind = attr("kind")?.parse().map_err(malformed)?;
    Ok(Header {
        name: attr("name")?,
        kind,
        version: attr("version")?,
    })
}

fn unit_from_entries(entries: BTreeMap<String, Vec<u8>>, prefix: &str) -> Result<DeployableUnit, UnitError> {
    let descriptor_path = format!("{prefix}{DESCRIPTOR_ENTRY}");
    let raw = entries
        .get(DESCRIPTOR_ENTRY)
        .ok_or_else(|| UnitError::MissingDescriptor(descriptor_path.clone()))?;
    let descriptor = xml::parse(raw).map_err(|e| UnitError::MalformedDescriptor {
        entry: descriptor_path.clone(),
        line: e.line,
        message: e.message,
    })?;
    let header = read_header(&descriptor, &descriptor_path)?;
    let deps = match entries.get(DEPS_ENTRY) {
        Some(data) => depres::parse_dependency_spec(data).map_err(|source| UnitError::Deps {
            entry: format!("{prefix}{DEPS_ENTRY}"),
            source,
        })?,
        None => DependencySpec::default(),
    };

    let mut children = Vec::new();
    if header.kind == ModuleKind::Application {
        for contains in descriptor.children_named("contains") {
            let module = contains.attr("module").ok_or_else(|| UnitError::MalformedDescriptor {
                entry: descriptor_path.clone(),
                line: 1,
                message: "<contains> lacks the `module` attribute".into(),
            })?;
            let entry_path = format!("{prefix}{module}");
            let data = entries
                .get(module)
                .ok_or_else(|| UnitError::MissingChild(entry_path.clone()))?;
            let child_entries = read_entries(data)?;
            let child = unit_from_entries(child_entries, &format!("{entry_path}!"))?;
            if let Some(expected) = expected_kind(contains)? {
                if expected != child.kind {
                    return Err(UnitError::KindMismatch {
                        entry: entry_path,
                        expected,
                        found: child.kind,
                    });
                }
            }
            children.push(child);
        }
    }

    Ok(DeployableUnit {
        name: header.name,
        kind: header.kind,
        version: header.version,
        entries,
        descriptor,
        children,
        deps,
    })
}

/// Kind a `<contains>` element expects: its `kind` attribute if present,
/// otherwise the one implied by the entry extension.
fn expected_kind(contains: &DescriptorNode) -> Result<Option<ModuleKind>, UnitError> {
    if let Some(kind) = contains.attr("kind") {
        return kind.parse().map(Some).map_err(|message| UnitError::MalformedDescriptor {
            entry: DESCRIPTOR_ENTRY.into(),
            line: 1,
            message,
        });
    }
    Ok(contains.attr("module").and_then(ModuleKind::from_entry_name))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum ViolationCode {
    InvalidName,
    NameMismatch,
    KindMismatch,
    InvalidVersion,
    VersionMismatch,
    MissingDescriptorEntry,
    DescriptorMismatch,
    MalformedDescriptor,
    MissingAttribute,
    InvalidToken,
    ChildrenNotAllowed,
    NestedApplication,
    ChildCountMismatch,
    MissingChildEntry,
    ChildEntryMismatch,
    DuplicateDeployable,
    DuplicateComponent,
    DuplicateReference,
    DepsMismatch,
    ReservedEntry,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub code: ViolationCode,
    /// Offending archive path or descriptor element, `!`-separated across
    /// nested archives.
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at {}: {}", self.code, self.path, self.message)
    }
}

fn is_unit_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

fn is_version(s: &str) -> bool {
    !s.is_empty() && s.split('.').all(|p| !p.is_empty() && p.chars().all(|c| c.is_ascii_digit()))
}

/// Reference and resource names: printable, no whitespace, no quotes, no `=`.
pub fn is_token(s: &str) -> bool {
    !s.is_empty()
        && s
            .chars()
            .all(|c| !c.is_whitespace() && !c.is_control() && !matches!(c, '\'' | '"' | '=' | '<' | '>' | '&'))
}

/// Structural check of every unit invariant. Returns an empty list iff the
/// unit is valid.
pub fn validate_unit(unit: &DeployableUnit) -> Vec<Violation> {
    let mut out = Vec::new();
    validate_into(unit, "", false, &mut out);

    let mut names = BTreeSet::new();
    let mut components = BTreeSet::new();
    for d in unit.deployables() {
        if !names.insert(d.name.as_str()) {
            out.push(violation(
                ViolationCode::DuplicateDeployable,
                d.name.clone(),
                format!("deployable name `{}` used more than once", d.name),
            ));
        }
        for c in d.component_names() {
            if !components.insert(c) {
                out.push(violation(
                    ViolationCode::DuplicateComponent,
                    format!("{}/component[@name='{c}']", d.name),
                    format!("component `{c}` declared more than once in the unit tree"),
                ));
            }
        }
    }
    out
}

fn violation(code: ViolationCode, path: impl Into<String>, message: impl Into<String>) -> Violation {
    Violation {
        code,
        path: path.into(),
        message: message.into(),
    }
}

fn validate_into(unit: &DeployableUnit, prefix: &str, nested: bool, out: &mut Vec<Violation>) {
    use ViolationCode::*;
    let d = &unit.descriptor;
    let dpath = format!("{prefix}{DESCRIPTOR_ENTRY}");

    if !is_unit_name(&unit.name) {
        out.push(violation(InvalidName, &dpath, format!("unit name `{}` is not a valid name", unit.name)));
    }
    if let Err(e) = d.check_well_formed() {
        out.push(violation(MalformedDescriptor, &dpath, e));
    }
    if d.element_name != "unit" {
        out.push(violation(MalformedDescriptor, &dpath, "root element must be <unit>"));
    }
    match d.attr("name") {
        Some(n) if n == unit.name => {}
        Some(n) => out.push(violation(
            NameMismatch,
            &dpath,
            format!("descriptor name `{n}` differs from unit name `{}`", unit.name),
        )),
        None => out.push(violation(MissingAttribute, &dpath, "<unit> lacks `name`")),
    }
    match d.attr("kind") {
        Some(k) if k == unit.kind.as_str() => {}
        Some(k) => out.push(violation(
            KindMismatch,
            &dpath,
            format!("descriptor kind `{k}` differs from unit kind `{}`", unit.kind),
        )),
        None => out.push(violation(MissingAttribute, &dpath, "<unit> lacks `kind`")),
    }
    if !is_version(&unit.version) {
        out.push(violation(InvalidVersion, &dpath, format!("`{}` is not a dotted version", unit.version)));
    }
    if d.attr("version") != Some(unit.version.as_str()) {
        out.push(violation(VersionMismatch, &dpath, "descriptor `version` differs from the unit version"));
    }

    match unit.entries.get(DESCRIPTOR_ENTRY) {
        None => out.push(violation(MissingDescriptorEntry, &dpath, "descriptor entry is absent")),
        Some(raw) => {
            if xml::parse(raw).ok().as_ref() != Some(d) {
                out.push(violation(DescriptorMismatch, &dpath, "descriptor entry does not parse to the descriptor"));
            }
        }
    }
    let deps_path = format!("{prefix}{DEPS_ENTRY}");
    let stored_deps = match unit.entries.get(DEPS_ENTRY) {
        None => Some(DependencySpec::default()),
        Some(raw) => depres::parse_dependency_spec(raw).ok(),
    };
    if stored_deps.as_ref() != Some(&unit.deps) {
        out.push(violation(DepsMismatch, deps_path, "dependency entry does not match the dependency spec"));
    }
    for reserved in [PLATFORM_ENTRY, STUBS_ENTRY] {
        if unit.entries.contains_key(reserved) {
            out.push(violation(ReservedEntry, format!("{prefix}{reserved}"), "entry is reserved for deployed units"));
        }
    }

    let mut refs = BTreeSet::new();
    for el in &d.children {
        let (attr, token_check) = match el.element_name.as_str() {
            "component" => ("name", false),
            "reference" => ("name", true),
            "contains" => ("module", false),
            _ => continue,
        };
        let epath = format!("{dpath}#{}", el.element_name);
        match el.attr(attr) {
            None => out.push(violation(MissingAttribute, &epath, format!("<{}> lacks `{attr}`", el.element_name))),
            Some(v) => {
                if token_check && !is_token(v) {
                    out.push(violation(InvalidToken, &epath, format!("`{v}` is not a valid reference name")));
                }
                if el.element_name == "component" && !is_unit_name(v) {
                    out.push(violation(InvalidToken, &epath, format!("`{v}` is not a valid component name")));
                }
                if el.element_name == "reference" && !refs.insert(v) {
                    out.push(violation(DuplicateReference, &epath, format!("reference `{v}` declared twice")));
                }
            }
        }
    }

    let contains: Vec<&DescriptorNode> = d.children_named("contains").collect();
    if unit.kind != ModuleKind::Application {
        if !contains.is_empty() || !unit.children.is_empty() {
            out.push(violation(
                ChildrenNotAllowed,
                &dpath,
                format!("a {} unit may not contain modules", unit.kind),
            ));
        }
        return;
    }
    if nested {
        out.push(violation(NestedApplication, &dpath, "applications may not contain applications"));
    }
    if contains.len() != unit.children.len() {
        out.push(violation(
            ChildCountMismatch,
            &dpath,
            format!("{} <contains> elements but {} children", contains.len(), unit.children.len()),
        ));
    }
    for (i, el) in contains.iter().enumerate() {
        let Some(module) = el.attr("module") else { continue };
        let epath = format!("{prefix}{module}");
        let Some(raw) = unit.entries.get(module) else {
            out.push(violation(MissingChildEntry, &epath, "contained module is not an archive entry"));
            continue;
        };
        if let Some(child) = unit.children.get(i) {
            let opened = open_unit(raw).ok();
            if opened.as_ref() != Some(child) {
                out.push(violation(ChildEntryMismatch, &epath, "entry does not open to the child unit"));
            }
        }
    }
    for (i, child) in unit.children.iter().enumerate() {
        let child_prefix = match contains.get(i).and_then(|c| c.attr("module")) {
            Some(m) => format!("{prefix}{m}!"),
            None => format!("{prefix}{}!", child.name),
        };
        validate_into(child, &child_prefix, true, out);
    }
}

/// Programmatic construction of well-formed units.
#[derive(Debug, Clone)]
pub struct UnitBuilder {
    name: String,
    kind: ModuleKind,
    version: String,
    elements: Vec<DescriptorNode>,
    extra_entries: BTreeMap<String, Vec<u8>>,
    children: Vec<(String, DeployableUnit)>,
    deps: DependencySpec,
}

impl UnitBuilder {
    pub fn new(name: impl Into<String>, kind: ModuleKind) -> Self {
        UnitBuilder {
            name: name.into(),
            kind,
            version: "1.0".into(),
            elements: Vec::new(),
            extra_entries: BTreeMap::new(),
            children: Vec::new(),
            deps: DependencySpec::default(),
        }
    }

    pub fn version(mut self, version: impl Into<String>) -> Self {
        self.version = version.into();
        self
    }

    pub fn component(mut self, name: impl Into<String>) -> Self {
        self.elements
            .push(DescriptorNode::new("component").with_attr("name", name));
        self
    }

    pub fn reference(mut self, name: impl Into<String>) -> Self {
        self.elements.push(
            DescriptorNode::new("reference")
                .with_attr("name", name)
                .with_attr("type", "resource"),
        );
        self
    }

    /// Any other descriptor element, kept in document order.
    pub fn element(mut self, node: DescriptorNode) -> Self {
        self.elements.push(node);
        self
    }

    pub fn entry(mut self, path: impl Into<String>, data: impl Into<Vec<u8>>) -> Self {
        self.extra_entries.insert(path.into(), data.into());
        self
    }

    pub fn deps(mut self, deps: DependencySpec) -> Self {
        self.deps = deps;
        self
    }

    /// Adds a child archive under `<name>.<kind extension>`.
    pub fn child(self, child: DeployableUnit) -> Self {
        let entry = format!("{}.{}", child.name, child.kind.extension());
        self.child_at(entry, child)
    }

    pub fn child_at(mut self, entry: impl Into<String>, child: DeployableUnit) -> Self {
        let entry = entry.into();
        self.elements
            .push(DescriptorNode::new("contains").with_attr("module", entry.clone()));
        self.children.push((entry, child));
        self
    }

    pub fn build(self) -> DeployableUnit {
        let mut descriptor = DescriptorNode::new("unit")
            .with_attr("name", self.name.clone())
            .with_attr("kind", self.kind.as_str())
            .with_attr("version", self.version.clone());
        descriptor.children = self.elements;
        let mut entries = self.extra_entries;
        entries.insert(DESCRIPTOR_ENTRY.into(), xml::canonical_bytes(&descriptor));
        if !self.deps.is_empty() {
            entries.insert(DEPS_ENTRY.into(), self.deps.to_bytes());
        }
        let mut children = Vec::new();
        for (entry, child) in self.children {
            entries.insert(entry, child.to_bytes());
            children.push(child);
        }
        DeployableUnit {
            name: self.name,
            kind: self.kind,
            version: self.version,
            entries,
            descriptor,
            children,
            deps: self.deps,
        }
    }
}
