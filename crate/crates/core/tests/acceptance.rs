//! Acceptance criteria, one line per criterion. Runs without the libtest
//! harness so the PASS/FAIL lines are always printed.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Cursor, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use base64::Engine;
use depman::agent::{Agent, RegistryEndpoint, ServerConfig};
use depman::config::{self, generate_deployed_unit};
use depman::depres::{install_order, DependencyGraph, DependencySpec, ServiceName, SiteLink};
use depman::manager::{DeploymentManager, TargetModuleID};
use depman::progress::{DeploymentStatus, StatusState};
use depman::targets::{run_registry, Target};
use depman::unit::{self, open_unit, ModuleKind, UnitBuilder};
use depman::wire::{self, WireError, MAX_FRAME};
use depman::xml::{self, DescriptorNode};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use serde_json::{json, Value};

use common::*;

/// Budget for the seven-step scenario with in-process agents.
const SCENARIO_BUDGET: Duration = Duration::from_secs(5);
/// Budget for the whole acceptance run.
const SUITE_BUDGET: Duration = Duration::from_secs(60);
const RANDOM_DAGS: usize = 500;
const MAX_DAG_NODES: usize = 7;
const RANDOM_UNITS: usize = 20;
const WAIT: Duration = Duration::from_secs(10);

type Check = fn() -> Result<String, String>;

fn main() -> ExitCode {
    // Expected panics inside checks are reported as failures, not noise.
    panic::set_hook(Box::new(|_| {}));
    let criteria: [(&str, Check); 10] = [
        ("scenario replay", scenario_replay),
        ("missing adapter: baseline and dependency check", missing_adapter),
        ("install order oracle", ordering_oracle),
        ("lifecycle transition matrix", transition_matrix),
        ("deployed unit contract", deployed_unit_contract),
        ("round trips", round_trips),
        ("progress semantics", progress_semantics),
        ("group partial failure", group_partial_failure),
        ("site link check", site_link),
        ("wire protocol", wire_protocol),
    ];
    let started = Instant::now();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let ms = t.elapsed().as_millis();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name} ({ms} ms): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name} ({ms} ms): {why}", i + 1);
            }
        }
    }
    let total = started.elapsed();
    if total > SUITE_BUDGET {
        failed += 1;
        println!("suite FAIL total {} ms exceeds {} ms", total.as_millis(), SUITE_BUDGET.as_millis());
    } else {
        println!("suite total {} ms", total.as_millis());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn wait(p: &depman::ProgressObject) -> Result<DeploymentStatus, String> {
    p.wait_timeout(WAIT).ok_or_else(|| "operation did not terminate".to_string())
}

fn ids(list: &[TargetModuleID]) -> Vec<String> {
    list.iter().map(ToString::to_string).collect()
}

fn scenario_replay() -> Result<String, String> {
    let run = || -> Result<(Vec<String>, Vec<u8>, Duration), String> {
        let s1 = agent("s1", "A");
        let t = Instant::now();
        let registry = run_registry(vec![Target::server("s1", s1.endpoint(), "A")], "127.0.0.1:0").map_err(|e| e.to_string())?;

        // 1. open the unit
        let unit = open_unit(&account_app().to_bytes()).map_err(|e| e.to_string())?;
        ensure!(unit.kind == ModuleKind::Application && unit.children.len() == 2, "unexpected unit shape");
        // 2. obtain a manager
        let manager = DeploymentManager::connect(&registry.uri()).map_err(|e| e.to_string())?;
        let targets = manager.get_targets().map_err(|e| e.to_string())?;
        // 3. configuration
        let config = manager.create_configuration(&unit).map_err(|e| e.to_string())?;
        // 4. inspect configuration nodes
        let refs: Vec<(&str, &str)> = config
            .reference_nodes()
            .map(|(d, n)| (d, n.reference_name.as_deref().unwrap_or("")))
            .collect();
        ensure!(refs == [("acct", "jdbc_account")], "reference nodes {refs:?}");
        ensure!(config.unbound_references() == ["jdbc_account"], "unbound {:?}", config.unbound_references());
        // 5. fill bindings
        let config = config.bind("jdbc_account", "AccountDS").map_err(|e| e.to_string())?;
        let deployed = manager.generate_deployed_unit(&unit, &config).map_err(|e| e.to_string())?;
        // 6. distribute
        let progress = manager.distribute(&targets, &deployed, true).map_err(|e| e.to_string())?;
        let status = wait(&progress)?;
        ensure!(status.state == StatusState::Completed, "distribute: {status}");
        // 7. module ids
        let result = ids(&progress.result_ids());
        Ok((result, deployed.to_bytes(), t.elapsed()))
    };
    let (first, bytes, elapsed) = run()?;
    let (second, bytes2, _) = run()?;
    let expected = ["s1/acctApp", "s1/acctApp/acct", "s1/acctApp/acctWeb"];
    ensure!(first == expected, "module ids {first:?}");
    ensure!(first == second && bytes == bytes2, "second run differs");
    ensure!(elapsed < SCENARIO_BUDGET, "took {elapsed:?}");
    Ok(format!("{} in {} ms", first.join(" "), elapsed.as_millis()))
}

fn missing_adapter() -> Result<String, String> {
    let app = deployed(&bank_app(), &[("eis", "BankEIS")]);

    // Baseline: no checking, the failure surfaces only at start.
    let s1 = agent("s1", "A");
    let m = DeploymentManager::with_targets(vec![Target::server("s1", s1.endpoint(), "A")]).map_err(|e| e.to_string())?;
    let target = m.target("s1").map_err(|e| e.to_string())?;
    let st = wait(&m.distribute(std::slice::from_ref(&target), &app, false).map_err(|e| e.to_string())?)?;
    ensure!(st.state == StatusState::Completed, "unchecked distribute: {st}");
    let st = wait(&m.start(&[TargetModuleID::new("s1", "bankApp")]).map_err(|e| e.to_string())?)?;
    ensure!(
        st.state == StatusState::Failed && st.message.contains("MissingResource") && st.message.contains("BankEIS"),
        "start without adapter: {st}"
    );
    let baseline = st.message.clone();

    // Installing and starting the adapter makes the same start succeed.
    let ra = deployed(&bank_adapter(), &[]);
    wait(&m.distribute(&[target], &ra, true).map_err(|e| e.to_string())?)?;
    wait(&m.start(&[TargetModuleID::new("s1", "bankRA")]).map_err(|e| e.to_string())?)?;
    let st = wait(&m.start(&[TargetModuleID::new("s1", "bankApp")]).map_err(|e| e.to_string())?)?;
    ensure!(st.state == StatusState::Completed, "start with adapter: {st}");

    // Checked: refused at distribute time, nothing installed.
    let s2 = agent("s2", "A");
    let m = DeploymentManager::with_targets(vec![Target::server("s2", s2.endpoint(), "A")]).map_err(|e| e.to_string())?;
    let st = wait(&m.distribute(&[m.target("s2").unwrap()], &app, true).map_err(|e| e.to_string())?)?;
    ensure!(
        st.state == StatusState::Failed && st.message.contains("UnsatisfiedDependency") && st.message.contains("bankRA"),
        "checked distribute: {st}"
    );
    ensure!(s2.snapshot().installed.is_empty(), "refused unit was installed");
    Ok(format!("baseline `{baseline}`; checked `{}`", st.message))
}

/// Nodes `n0..`, edges only from higher to lower index, so the graph is
/// acyclic; names are shuffled so index order is not name order.
fn random_dag(rng: &mut StdRng) -> (Vec<String>, Vec<(String, String)>) {
    let n = rng.gen_range(1..=MAX_DAG_NODES);
    let mut names: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
    names.shuffle(rng);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..i {
            if rng.gen_bool(0.35) {
                edges.push((names[i].clone(), names[j].clone()));
            }
        }
    }
    (names, edges)
}

fn permutations(items: &[String]) -> Vec<Vec<String>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head.clone());
            out.push(p);
        }
    }
    out
}

fn prerequisites_first(order: &[String], edges: &[(String, String)]) -> bool {
    let pos: BTreeMap<&str, usize> = order.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    edges.iter().all(|(dependent, prereq)| pos[prereq.as_str()] < pos[dependent.as_str()])
}

fn ordering_oracle() -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(0x0de9);
    let mut nodes_total = 0;
    for case in 0..RANDOM_DAGS {
        let (names, edges) = random_dag(&mut rng);
        nodes_total += names.len();
        let graph = |names: &[String], edges: &[(String, String)]| {
            let mut g = DependencyGraph::default();
            for n in names {
                g.add_node(n.clone());
            }
            for (a, b) in edges {
                g.add_edge(a.clone(), b.clone());
            }
            g
        };
        let order = install_order(&graph(&names, &edges)).map_err(|e| format!("case {case}: {e}"))?;
        let valid: Vec<Vec<String>> = permutations(&names)
            .into_iter()
            .filter(|p| prerequisites_first(p, &edges))
            .collect();
        ensure!(valid.contains(&order), "case {case}: {order:?} is not a topological order");
        let smallest = valid.iter().min().expect("a DAG has a topological order");
        ensure!(&order == smallest, "case {case}: {order:?} is not the least valid order {smallest:?}");
        for _ in 0..3 {
            let (mut n2, mut e2) = (names.clone(), edges.clone());
            n2.shuffle(&mut rng);
            e2.shuffle(&mut rng);
            let again = install_order(&graph(&n2, &e2)).map_err(|e| e.to_string())?;
            ensure!(again == order, "case {case}: insertion order changed the result");
        }
    }
    Ok(format!("{RANDOM_DAGS} DAGs, {nodes_total} nodes"))
}

fn transition_matrix() -> Result<String, String> {
    let unit = deployed(&UnitBuilder::new("m", ModuleKind::Component).component("M").build(), &[]);
    let archive = base64::engine::general_purpose::STANDARD.encode(unit.to_bytes());
    let request = |op: &str| json!({ "op": op, "id": "x", "name": "m", "archive": archive });
    let state_of = |a: &Agent| a.snapshot().installed.get("m").map(|m| format!("{:?}", m.state).to_lowercase());
    let setup = |state: &str| {
        let a = Agent::new(ServerConfig::new("s1", "127.0.0.1:1", "A"), None).unwrap();
        if state != "absent" {
            a.handle_request(&request("INSTALL"));
        }
        if state == "running" {
            a.handle_request(&request("START"));
        }
        a
    };
    // (state, command, expected error code or resulting state)
    let table = [
        ("absent", "INSTALL", Ok("installed")),
        ("absent", "START", Err("NotInstalled")),
        ("absent", "STOP", Err("NotInstalled")),
        ("absent", "UNINSTALL", Err("NotInstalled")),
        ("installed", "INSTALL", Err("AlreadyInstalled")),
        ("installed", "START", Ok("running")),
        ("installed", "STOP", Err("NotRunning")),
        ("installed", "UNINSTALL", Ok("absent")),
        ("running", "INSTALL", Err("AlreadyInstalled")),
        ("running", "START", Err("AlreadyRunning")),
        ("running", "STOP", Ok("installed")),
        ("running", "UNINSTALL", Err("StillRunning")),
    ];
    for (state, op, expected) in table {
        let a = setup(state);
        ensure!(state_of(&a).as_deref().unwrap_or("absent") == state, "setup for {state}");
        let r = a.handle_request(&request(op));
        let after = state_of(&a).unwrap_or_else(|| "absent".into());
        match expected {
            Ok(next) => ensure!(r["ok"] == true && after == next, "{state} x {op}: {r} leaves {after}"),
            Err(code) => ensure!(
                r["ok"] == false && r["code"] == code && after == state,
                "{state} x {op}: {r} leaves {after}"
            ),
        }
    }
    Ok(format!("{} cases", table.len()))
}

/// Canonical form written out independently: sorted attributes, escaped
/// text, self-closing empty elements.
fn oracle_canonical(node: &DescriptorNode) -> String {
    fn esc(s: &str, attr: bool) -> String {
        let mut out = String::new();
        for c in s.chars() {
            match c {
                '&' => out.push_str("&amp;"),
                '<' => out.push_str("&lt;"),
                '>' => out.push_str("&gt;"),
                '"' if attr => out.push_str("&quot;"),
                '\t' if attr => out.push_str("&#9;"),
                '\n' if attr => out.push_str("&#10;"),
                '\r' => out.push_str("&#13;"),
                c => out.push(c),
            }
        }
        out
    }
    let mut s = format!("<{}", node.element_name);
    for (k, v) in &node.attributes {
        s += &format!(" {k}=\"{}\"", esc(v, true));
    }
    if node.children.is_empty() && node.text.is_none() {
        return s + "/>";
    }
    s.push('>');
    if let Some(t) = &node.text {
        s += &esc(t, false);
    }
    for c in &node.children {
        s += &oracle_canonical(c);
    }
    s + &format!("</{}>", node.element_name)
}

fn deployed_unit_contract() -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(0x5eed);
    let mut stubs = 0;
    for case in 0..RANDOM_UNITS {
        let unit = random_unit(&mut rng, "");
        let config = bind_all(random_config(&mut rng, &unit));
        let d = generate_deployed_unit(&unit, &config).map_err(|e| format!("case {case}: {e}"))?;
        let input = read_stored_zip(&unit.to_bytes());
        let output = read_stored_zip(&d.to_bytes());
        for (path, data) in &input {
            ensure!(output.get(path) == Some(data), "case {case}: entry {path} changed");
        }
        let extra: BTreeSet<&str> = output.keys().filter(|k| !input.contains_key(*k)).map(String::as_str).collect();
        ensure!(
            extra == BTreeSet::from([unit::PLATFORM_ENTRY, unit::STUBS_ENTRY]),
            "case {case}: extra entries {extra:?}"
        );

        let mut expected = Vec::new();
        for dep in unit.deployables() {
            let mut lines: Vec<String> = config
                .bindings()
                .into_iter()
                .filter(|(owner, _, _)| *owner == dep.name)
                .map(|(_, r, res)| format!("{r}={res}\n"))
                .collect();
            lines.sort();
            for c in dep.descriptor.children.iter().filter(|c| c.element_name == "component") {
                let mut input = oracle_canonical(c).into_bytes();
                input.push(0);
                input.extend(lines.concat().into_bytes());
                expected.push(format!("stub:{}:{:016x}\n", c.attributes["name"], fnv_oracle(&input)));
            }
        }
        expected.sort();
        stubs += expected.len();
        let manifest = String::from_utf8(output[unit::STUBS_ENTRY].clone()).map_err(|e| e.to_string())?;
        ensure!(manifest == expected.concat(), "case {case}: manifest\n{manifest}\nexpected\n{}", expected.concat());
    }
    Ok(format!("{RANDOM_UNITS} units, {stubs} stub digests"))
}

/// Indented, commented rendering of a node for the parser to normalize.
fn pretty(node: &DescriptorNode, depth: usize) -> String {
    let pad = "  ".repeat(depth);
    let attrs: String = node.attributes.iter().rev().map(|(k, v)| {
        let v = v.replace('&', "&amp;").replace('<', "&lt;").replace('"', "&quot;").replace('\n', "&#10;").replace('\t', "&#9;");
        format!(" {k}='{}'", v.replace('\'', "&apos;"))
    }).collect();
    if node.children.is_empty() {
        return match &node.text {
            None => format!("{pad}<{}{attrs} />\n", node.element_name),
            Some(t) => format!("{pad}<{}{attrs}>{}</{}>\n", node.element_name, t.replace('&', "&amp;").replace('<', "&lt;"), node.element_name),
        };
    }
    let mut s = format!("{pad}<{}{attrs}>\n{pad}  <!-- children -->\n", node.element_name);
    for c in &node.children {
        s += &pretty(c, depth + 1);
    }
    s + &format!("{pad}</{}>\n", node.element_name)
}

fn round_trips() -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(0x7007);
    for case in 0..RANDOM_UNITS {
        let unit = random_unit(&mut rng, "");
        // descriptor fixpoint
        let canon = xml::canonical_bytes(&unit.descriptor);
        let parsed = xml::parse(&canon).map_err(|e| format!("case {case}: {e}"))?;
        ensure!(parsed == unit.descriptor && xml::canonical_bytes(&parsed) == canon, "case {case}: descriptor");
        let text = format!("<?xml version=\"1.0\"?>\n<!-- unit -->\n{}", pretty(&unit.descriptor, 0));
        let reparsed = xml::parse(text.as_bytes()).map_err(|e| format!("case {case}: {e}\n{text}"))?;
        ensure!(xml::canonical_bytes(&reparsed) == canon, "case {case}: pretty form does not canonicalize");
        // configuration
        let config = random_config(&mut rng, &unit);
        let restored = config::restore_configuration(&config::save_configuration(&config)).map_err(|e| format!("case {case}: {e}"))?;
        ensure!(restored == config, "case {case}: configuration");
        // unit archive, through our writer and the oracle writer
        let opened = open_unit(&unit.to_bytes()).map_err(|e| format!("case {case}: {e}"))?;
        ensure!(opened == unit, "case {case}: unit write/open");
        let opened = open_unit(&stored_zip(&unit.entries)).map_err(|e| format!("case {case}: {e}"))?;
        ensure!(opened == unit, "case {case}: oracle archive");
        // agent state
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = ServerConfig::new("s1", "127.0.0.1:1", "A").with_service(ServiceName::Mail);
        let a = Agent::new(cfg.clone(), Some(dir.path())).map_err(|e| e.to_string())?;
        for k in 0..rng.gen_range(0..4) {
            a.create_resource(&format!("Res{k}"), ServiceName::Mail).map_err(|e| e.to_string())?;
        }
        for p in ["a", "b", "c"].iter().take(rng.gen_range(1..=3)) {
            let u = random_unit(&mut rng, p);
            let d = generate_deployed_unit(&u, &bind_all(random_config(&mut rng, &u))).map_err(|e| e.to_string())?;
            let archive = base64::engine::general_purpose::STANDARD.encode(d.to_bytes());
            a.handle_request(&json!({"op": "INSTALL", "id": 1, "archive": archive}));
            if rng.gen_bool(0.5) {
                a.handle_request(&json!({"op": "START", "id": 2, "name": u.name}));
            }
        }
        let before = a.snapshot();
        ensure!(!before.installed.is_empty(), "case {case}: nothing installed");
        a.persist().map_err(|e| e.to_string())?;
        drop(a);
        let b = Agent::new(cfg, Some(dir.path())).map_err(|e| e.to_string())?;
        ensure!(b.snapshot() == before, "case {case}: agent state after reload");
    }
    Ok(format!("{RANDOM_UNITS} fixtures each for descriptor, configuration, unit, agent state"))
}

fn progress_semantics() -> Result<String, String> {
    let s1 = agent("s1", "A");
    let m = Arc::new(DeploymentManager::with_targets(vec![Target::server("s1", s1.endpoint(), "A")]).map_err(|e| e.to_string())?);
    let unit = deployed(&UnitBuilder::new("m", ModuleKind::Web).component("M").build(), &[]);
    wait(&m.distribute(&[m.target("s1").unwrap()], &unit, true).map_err(|e| e.to_string())?)?;

    let id = TargetModuleID::new("s1", "m");
    let ops = 40;
    let mut progress = Vec::new();
    for i in 0..ops {
        // start/stop alternate, so every operation completes; a repeated
        // start fails. Both terminal kinds are exercised.
        let p = match i % 4 {
            0 => m.start(std::slice::from_ref(&id)),
            1 => m.start(std::slice::from_ref(&id)),
            2 => m.stop(std::slice::from_ref(&id)),
            _ => m.stop(std::slice::from_ref(&id)),
        };
        progress.push(p.map_err(|e| e.to_string())?);
    }
    let terminal_seen: Arc<Mutex<Vec<Vec<DeploymentStatus>>>> = Arc::new(Mutex::new(vec![Vec::new(); ops * 4]));
    let mut handles = Vec::new();
    for (i, p) in progress.iter().enumerate() {
        for l in 0..4 {
            let (p, seen) = (p.clone(), Arc::clone(&terminal_seen));
            handles.push(thread::spawn(move || {
                if l % 2 == 1 {
                    thread::sleep(Duration::from_millis(l as u64));
                }
                p.add_listener(move |s| {
                    if s.state.is_terminal() {
                        seen.lock().unwrap()[i * 4 + l].push(s.clone());
                    }
                });
            }));
        }
        for _ in 0..2 {
            let p = p.clone();
            handles.push(thread::spawn(move || {
                let mut first = None;
                for _ in 0..5000 {
                    let s = p.get_deployment_status();
                    match &first {
                        None if s.state.is_terminal() => first = Some(s),
                        Some(t) => assert_eq!(&s, t, "terminal status changed"),
                        None => thread::yield_now(),
                    }
                }
                let t = p.wait();
                for _ in 0..100 {
                    assert_eq!(p.get_deployment_status(), t);
                }
            }));
        }
    }
    for h in handles {
        h.join().map_err(|_| "poller observed a changing terminal status".to_string())?;
    }
    let mut outcomes = BTreeMap::new();
    let seen = terminal_seen.lock().unwrap();
    for (i, p) in progress.iter().enumerate() {
        let terminal = p.wait();
        *outcomes.entry(terminal.state.to_string()).or_insert(0) += 1;
        for l in 0..4 {
            let events = &seen[i * 4 + l];
            ensure!(events.len() == 1 && events[0] == terminal, "op {i} listener {l} saw {events:?}");
        }
        // A listener added after termination gets the replay immediately,
        // with the terminal status exactly once and last.
        let late = Arc::new(Mutex::new(Vec::new()));
        let c = Arc::clone(&late);
        p.add_listener(move |s| c.lock().unwrap().push(s.clone()));
        let late = late.lock().unwrap();
        let terminals = late.iter().filter(|s| s.state.is_terminal()).count();
        ensure!(
            terminals == 1 && late.last() == Some(&terminal) && late[0].state == StatusState::Running,
            "late listener on op {i} saw {late:?}"
        );
    }
    ensure!(outcomes.len() == 2, "expected both completed and failed operations, got {outcomes:?}");
    Ok(format!("{ops} operations, {} listeners, outcomes {outcomes:?}", ops * 5))
}

fn group_partial_failure() -> Result<String, String> {
    let (s1, s2) = (agent("s1", "A"), agent("s2", "A"));
    let dead = {
        let l = TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
        l.local_addr().unwrap().to_string()
    };
    let m = DeploymentManager::with_targets(vec![
        Target::server("s1", s1.endpoint(), "A"),
        Target::server("s2", s2.endpoint(), "A"),
        Target::server("s3", dead, "A"),
        Target::group("g1", ["s1", "s2", "s3"]),
    ])
    .map_err(|e| e.to_string())?;
    let unit = deployed(&account_app(), &[("jdbc_account", "AccountDS")]);
    let st = wait(&m.distribute(&[m.target("g1").unwrap()], &unit, true).map_err(|e| e.to_string())?)?;
    ensure!(st.state == StatusState::Failed, "overall state {st}");
    ensure!(st.message.contains("s3: AgentUnreachable"), "message does not name s3: {}", st.message);
    for s in [&s1, &s2] {
        ensure!(s.snapshot().installed.contains_key("acctApp"), "{} lacks acctApp", s.agent().id());
    }
    Ok(st.message)
}

fn site_link() -> Result<String, String> {
    let sb = agent("sB", "siteB");
    let local = agent("sA1", "siteA");
    let linked = agent_with(remote_registry(ServerConfig::new("sA2", "127.0.0.1:0", "siteA"), "sB"));
    let m = DeploymentManager::with_targets(vec![
        Target::server("sA1", local.endpoint(), "siteA"),
        Target::server("sA2", linked.endpoint(), "siteA"),
        Target::server("sB", sb.endpoint(), "siteB"),
    ])
    .map_err(|e| e.to_string())?;
    let unit = deployed(
        &UnitBuilder::new("remoteClient", ModuleKind::Component)
            .component("Client")
            .deps(DependencySpec {
                requires_site_link: vec![SiteLink {
                    service: ServiceName::Registry,
                    site: "siteB".into(),
                }],
                ..DependencySpec::default()
            })
            .build(),
        &[],
    );
    let mut accepted = Vec::new();
    for server in ["sA1", "sA2"] {
        let st = wait(&m.distribute(&[m.target(server).unwrap()], &unit, true).map_err(|e| e.to_string())?)?;
        if st.state == StatusState::Completed {
            accepted.push(server);
        } else {
            ensure!(st.message.contains("UnsatisfiedDependency[site-link]"), "{server}: {st}");
        }
    }
    ensure!(accepted == ["sA2"], "site-A servers accepting the unit: {accepted:?}");
    ensure!(
        matches!(linked.snapshot().registry_endpoint, RegistryEndpoint::Remote(ref id) if id == "sB"),
        "sA2 registry"
    );
    Ok("of the site-A servers only sA2 (registry=sB) accepts".into())
}

fn wire_protocol() -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(0xf4a3e);
    let mut sizes = vec![0usize, 1, 1024 * 1024];
    sizes.extend((0..40).map(|_| rng.gen_range(0..=1024 * 1024)));
    let mut stream = Vec::new();
    let mut payloads = Vec::new();
    for n in sizes {
        let mut p = vec![0u8; n];
        rng.fill_bytes(&mut p);
        stream.extend(wire::encode_frame(&p).map_err(|e| e.to_string())?);
        payloads.push(p);
    }
    let mut cursor = Cursor::new(stream);
    for (i, p) in payloads.iter().enumerate() {
        let got = wire::read_frame(&mut cursor).map_err(|e| e.to_string())?;
        ensure!(got.as_ref() == Some(p), "frame {i} did not round-trip");
    }
    ensure!(wire::read_frame(&mut cursor).map_err(|e| e.to_string())?.is_none(), "trailing data");

    let header = ((MAX_FRAME + 1) as u32).to_be_bytes();
    ensure!(
        matches!(wire::read_frame(&mut Cursor::new(header)), Err(WireError::FrameTooLarge(_))),
        "codec accepted an oversized header"
    );

    let s1 = agent("s1", "A");
    // An oversized frame closes the connection without a response.
    let mut raw = TcpStream::connect(s1.addr()).map_err(|e| e.to_string())?;
    raw.set_read_timeout(Some(WAIT)).ok();
    raw.write_all(&header).map_err(|e| e.to_string())?;
    let mut buf = [0u8; 1];
    ensure!(matches!(raw.read(&mut buf), Ok(0) | Err(_)), "agent answered an oversized frame");

    // Every request on a connection gets exactly one correlated response.
    let mut raw = TcpStream::connect(s1.addr()).map_err(|e| e.to_string())?;
    raw.set_read_timeout(Some(WAIT)).ok();
    let ops = ["HELLO", "LIST", "SNAPSHOT", "FROB", "START", "STOP", "UNINSTALL", "INSTALL", "CREATE_RESOURCE"];
    let requests: Vec<Value> = (0..90).map(|i| json!({ "op": ops[i % ops.len()], "id": format!("q{i}"), "name": "x" })).collect();
    for r in &requests {
        wire::write_json(&mut raw, r).map_err(|e| e.to_string())?;
    }
    for (i, r) in requests.iter().enumerate() {
        let resp = wire::read_json(&mut raw).map_err(|e| e.to_string())?.ok_or("connection closed early")?;
        ensure!(resp["id"] == r["id"], "response {i} correlates to {}", resp["id"]);
        if r["op"] == "FROB" {
            ensure!(resp["code"] == "UnknownOp", "unknown op answered {resp}");
        }
    }
    raw.shutdown(std::net::Shutdown::Write).ok();
    ensure!(wire::read_json(&mut raw).map_err(|e| e.to_string())?.is_none(), "extra response");
    Ok(format!("{} frames up to 1 MiB; {} correlated responses", payloads.len(), requests.len()))
}
