#![allow(dead_code)]

//! Fixtures and independent oracles shared by the integration tests.

use std::collections::BTreeMap;

use depman::agent::{run_agent, AgentHandle, RegistryEndpoint, ServerConfig};
use depman::config::{create_configuration, generate_deployed_unit, DeploymentConfiguration};
use depman::depres::{DependencySpec, ResourceRequirement, ServiceName};
use depman::unit::{DeployableUnit, DeployedUnit, ModuleKind, UnitBuilder};
use depman::xml::DescriptorNode;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::Rng;

/// FNV-1a 64, written from the published constants.
pub fn fnv_oracle(data: &[u8]) -> u64 {
    let mut h: u64 = 14695981039346656037;
    for b in data {
        h ^= u64::from(*b);
        h = h.wrapping_mul(1099511628211);
    }
    h
}

/// Minimal stored (uncompressed) ZIP writer.
pub fn stored_zip(entries: &BTreeMap<String, Vec<u8>>) -> Vec<u8> {
    let mut out = Vec::new();
    let mut central = Vec::new();
    for (name, data) in entries {
        let offset = out.len() as u32;
        let crc = crc32fast::hash(data);
        let len = data.len() as u32;
        out.extend_from_slice(&0x04034b50u32.to_le_bytes());
        out.extend_from_slice(&[20, 0, 0, 0, 0, 0]); // version, flags, method
        out.extend_from_slice(&[0, 0, 0x21, 0]); // time, date (1980-01-01)
        out.extend_from_slice(&crc.to_le_bytes());
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(data);

        central.extend_from_slice(&0x02014b50u32.to_le_bytes());
        central.extend_from_slice(&[20, 0, 20, 0, 0, 0, 0, 0]);
        central.extend_from_slice(&[0, 0, 0x21, 0]);
        central.extend_from_slice(&crc.to_le_bytes());
        central.extend_from_slice(&len.to_le_bytes());
        central.extend_from_slice(&len.to_le_bytes());
        central.extend_from_slice(&(name.len() as u16).to_le_bytes());
        central.extend_from_slice(&[0; 8]); // extra, comment, disk, internal attrs
        central.extend_from_slice(&0u32.to_le_bytes());
        central.extend_from_slice(&offset.to_le_bytes());
        central.extend_from_slice(name.as_bytes());
    }
    let cd_offset = out.len() as u32;
    let n = entries.len() as u16;
    out.extend_from_slice(&central);
    out.extend_from_slice(&0x06054b50u32.to_le_bytes());
    out.extend_from_slice(&[0, 0, 0, 0]);
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&(central.len() as u32).to_le_bytes());
    out.extend_from_slice(&cd_offset.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out
}

/// Reads a ZIP whose entries are all stored, walking the central directory.
pub fn read_stored_zip(data: &[u8]) -> BTreeMap<String, Vec<u8>> {
    let u16_at = |i: usize| u16::from_le_bytes([data[i], data[i + 1]]) as usize;
    let u32_at = |i: usize| u32::from_le_bytes(data[i..i + 4].try_into().unwrap()) as usize;
    let eocd = (0..=data.len() - 22)
        .rev()
        .find(|&i| u32_at(i) == 0x06054b50)
        .expect("end of central directory");
    let count = u16_at(eocd + 10);
    let mut at = u32_at(eocd + 16);
    let mut out = BTreeMap::new();
    for _ in 0..count {
        assert_eq!(u32_at(at), 0x02014b50);
        assert_eq!(u16_at(at + 10), 0, "entry is not stored");
        let crc = u32_at(at + 16) as u32;
        let size = u32_at(at + 20);
        let (name_len, extra_len, comment_len) = (u16_at(at + 28), u16_at(at + 30), u16_at(at + 32));
        let local = u32_at(at + 42);
        let name = String::from_utf8(data[at + 46..at + 46 + name_len].to_vec()).unwrap();
        let body = local + 30 + u16_at(local + 26) + u16_at(local + 28);
        let content = data[body..body + size].to_vec();
        assert_eq!(crc32fast::hash(&content), crc, "crc of {name}");
        if !name.ends_with('/') {
            out.insert(name, content);
        }
        at += 46 + name_len + extra_len + comment_len;
    }
    out
}

const OPTIONAL: [ServiceName; 4] = [
    ServiceName::Mail,
    ServiceName::EjbContainer,
    ServiceName::WebContainer,
    ServiceName::Ws,
];

/// Random valid unit. Names are `prefix` plus a per-call counter so the tree
/// has no duplicate deployables or components.
pub fn random_unit(rng: &mut StdRng, prefix: &str) -> DeployableUnit {
    let mut ids = 0usize;
    if rng.gen_bool(0.5) {
        let mut b = leaf_builder(rng, prefix, &mut ids, ModuleKind::Application);
        for _ in 0..rng.gen_range(0..=3) {
            let kind = *[ModuleKind::Web, ModuleKind::Component, ModuleKind::Adapter].choose(rng).unwrap();
            let child = leaf_builder(rng, prefix, &mut ids, kind).build();
            b = b.child(child);
        }
        b.build()
    } else {
        let kind = *[ModuleKind::Web, ModuleKind::Component, ModuleKind::Adapter].choose(rng).unwrap();
        leaf_builder(rng, prefix, &mut ids, kind).build()
    }
}

fn leaf_builder(rng: &mut StdRng, prefix: &str, ids: &mut usize, kind: ModuleKind) -> UnitBuilder {
    let mut next = |what: &str| {
        *ids += 1;
        format!("{prefix}{what}{ids}")
    };
    let mut b = UnitBuilder::new(next("u"), kind).version(format!("{}.{}", rng.gen_range(0..5), rng.gen_range(0..10)));
    for _ in 0..rng.gen_range(0..=3) {
        let mut c = DescriptorNode::new("component").with_attr("name", next("C"));
        if rng.gen_bool(0.3) {
            c = c.with_attr("class", format!("org.example.Bean{}", rng.gen_range(0..100)));
        }
        if rng.gen_bool(0.3) {
            c = c.with_child(DescriptorNode::new("env").with_attr("key", "k").with_text(format!("v & <{}>", rng.gen::<u8>())));
        }
        b = b.element(c);
    }
    for _ in 0..rng.gen_range(0..=3) {
        b = b.reference(next("ref"));
    }
    for i in 0..rng.gen_range(0..=2) {
        let len = rng.gen_range(0..64);
        let data: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        b = b.entry(format!("lib/blob{i}.bin"), data);
    }
    if rng.gen_bool(0.4) {
        let mut deps = DependencySpec::default();
        let mut services = OPTIONAL.to_vec();
        services.shuffle(rng);
        deps.requires_service = services.into_iter().take(rng.gen_range(0..=2)).collect();
        if rng.gen_bool(0.5) {
            deps.requires_unit.push(format!("lib{}", rng.gen_range(0..3)));
        }
        if rng.gen_bool(0.5) {
            deps.requires_resource.push(ResourceRequirement {
                resource: format!("Res{}", rng.gen_range(0..3)),
                service: ServiceName::Mail,
            });
        }
        b = b.deps(deps);
    }
    b
}

/// Binds most references of `unit` to random resource names; some stay
/// unbound.
pub fn random_config(rng: &mut StdRng, unit: &DeployableUnit) -> DeploymentConfiguration {
    let mut config = create_configuration(unit).expect("generated units are valid");
    let refs: Vec<(String, String)> = config
        .reference_nodes()
        .map(|(d, n)| (d.to_string(), n.reference_name.clone().unwrap()))
        .collect();
    for (d, r) in refs {
        if rng.gen_bool(0.8) {
            config = config.bind_in(&d, &r, &format!("Res{}", rng.gen_range(0..5))).unwrap();
        }
    }
    config
}

pub fn bind_all(mut config: DeploymentConfiguration) -> DeploymentConfiguration {
    for r in config.unbound_references() {
        config = config.bind(&r, &format!("{r}DS")).unwrap();
    }
    config
}

/// `acctApp` (application) = `acct` (component, bean Account, refs AccountDS)
/// + `acctWeb` (web).
pub fn account_app() -> DeployableUnit {
    let acct = UnitBuilder::new("acct", ModuleKind::Component)
        .component("Account")
        .reference("jdbc_account")
        .build();
    let web = UnitBuilder::new("acctWeb", ModuleKind::Web).component("AccountServlet").build();
    UnitBuilder::new("acctApp", ModuleKind::Application).child(acct).child(web).build()
}

pub fn deployed(unit: &DeployableUnit, bindings: &[(&str, &str)]) -> DeployedUnit {
    let mut config = create_configuration(unit).unwrap();
    for (r, res) in bindings {
        config = config.bind(r, res).unwrap();
    }
    generate_deployed_unit(unit, &config).unwrap()
}

/// A resource adapter whose component `BankEIS` is the resource it provides.
pub fn bank_adapter() -> DeployableUnit {
    UnitBuilder::new("bankRA", ModuleKind::Adapter).component("BankEIS").build()
}

/// An application needing `bankRA`: declares the unit requirement and binds
/// a reference to the adapter-provided `BankEIS`.
pub fn bank_app() -> DeployableUnit {
    let teller = UnitBuilder::new("teller", ModuleKind::Component)
        .component("Teller")
        .reference("eis")
        .build();
    UnitBuilder::new("bankApp", ModuleKind::Application)
        .deps(DependencySpec {
            requires_unit: vec!["bankRA".into()],
            ..DependencySpec::default()
        })
        .child(teller)
        .build()
}

pub fn agent(id: &str, site: &str) -> AgentHandle {
    run_agent(ServerConfig::new(id, "127.0.0.1:0", site), None).unwrap()
}

pub fn agent_with(config: ServerConfig) -> AgentHandle {
    run_agent(config, None).unwrap()
}

pub fn remote_registry(config: ServerConfig, id: &str) -> ServerConfig {
    config.with_registry(RegistryEndpoint::Remote(id.to_string()))
}
