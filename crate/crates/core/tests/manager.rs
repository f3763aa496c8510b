mod common;

use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use depman::agent::{AgentHandle, ServerConfig};
use depman::depres::ServiceName;
use depman::manager::{connect, DeploymentManager, ManagerError, ModuleFilter, TargetModuleID};
use depman::progress::{DeploymentStatus, ProgressObject, StatusState};
use depman::targets::{run_registry, Target};
use depman::unit::{ModuleKind, UnitBuilder};

use common::*;

fn done(p: &ProgressObject) -> DeploymentStatus {
    p.wait_timeout(Duration::from_secs(10)).expect("operation terminates")
}

fn tmid(s: &str) -> TargetModuleID {
    s.parse().unwrap()
}

fn names(ids: &[TargetModuleID]) -> Vec<String> {
    ids.iter().map(ToString::to_string).collect()
}

fn dead_endpoint() -> String {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    l.local_addr().unwrap().to_string()
}

struct Cluster {
    agents: Vec<AgentHandle>,
    manager: DeploymentManager,
}

fn cluster(n: usize) -> Cluster {
    let agents: Vec<AgentHandle> = (1..=n).map(|i| agent(&format!("s{i}"), "A")).collect();
    let mut targets: Vec<Target> = agents.iter().map(|a| Target::server(a.agent().id(), a.endpoint(), "A")).collect();
    targets.push(Target::group("all", agents.iter().map(|a| a.agent().id())));
    Cluster {
        manager: DeploymentManager::with_targets(targets).unwrap(),
        agents,
    }
}

#[test]
fn connect_through_the_registry() {
    let c = cluster(2);
    let registry = run_registry(c.manager.get_targets().unwrap(), "127.0.0.1:0").unwrap();
    let m = connect(&registry.uri()).unwrap();
    let ids: Vec<String> = m.get_targets().unwrap().into_iter().map(|t| t.id).collect();
    assert_eq!(ids, ["s1", "s2", "all"]);
    assert!(matches!(connect(&format!("depman://{}/", dead_endpoint())), Err(ManagerError::ConnectionRefused { .. })));
}

#[test]
fn disconnected_manager_only_configures() {
    let m = connect("depman:disconnected").unwrap();
    let unit = account_app();
    let config = m.create_configuration(&unit).unwrap();
    let deployed = m.generate_deployed_unit(&unit, &config.bind("jdbc_account", "DS").unwrap()).unwrap();
    assert!(matches!(m.get_targets(), Err(ManagerError::Disconnected)));
    let t = Target::server("s1", "127.0.0.1:1", "A");
    assert!(matches!(m.distribute(std::slice::from_ref(&t), &deployed, true), Err(ManagerError::Disconnected)));
    for r in [m.start(&[tmid("s1/acctApp")]), m.stop(&[tmid("s1/acctApp")]), m.undeploy(&[tmid("s1/acctApp")])] {
        assert!(matches!(r, Err(ManagerError::Disconnected)));
    }
    assert!(matches!(m.list_modules(None, &[t], ModuleFilter::Available), Err(ManagerError::Disconnected)));
}

#[test]
fn unknown_targets_are_rejected_up_front() {
    let c = cluster(1);
    let unit = deployed(&bank_adapter(), &[]);
    let ghost = Target::server("ghost", "127.0.0.1:1", "A");
    assert!(matches!(c.manager.distribute(&[ghost], &unit, true), Err(ManagerError::UnknownTarget(_))));
    assert!(matches!(c.manager.distribute(&[], &unit, true), Err(ManagerError::NoTargets)));
    assert!(matches!(c.manager.start(&[tmid("ghost/x")]), Err(ManagerError::UnknownTarget(_))));
}

#[test]
fn full_lifecycle_through_the_manager() {
    let c = cluster(2);
    let m = &c.manager;
    for a in &c.agents {
        a.create_resource("AccountDS", ServiceName::Transaction).unwrap();
    }
    let app = deployed(&account_app(), &[("jdbc_account", "AccountDS")]);
    let p = m.distribute(&[m.target("all").unwrap()], &app, true).unwrap();
    assert_eq!(done(&p).state, StatusState::Completed);
    assert_eq!(
        names(&p.result_ids()),
        ["s1/acctApp", "s1/acctApp/acct", "s1/acctApp/acctWeb", "s2/acctApp", "s2/acctApp/acct", "s2/acctApp/acctWeb"]
    );

    let all = m.get_targets().unwrap();
    let roots = [tmid("s1/acctApp"), tmid("s2/acctApp")];
    assert_eq!(names(&m.list_modules(None, &all, ModuleFilter::NonRunning).unwrap()), ["s1/acctApp", "s2/acctApp"]);
    assert_eq!(done(&m.start(&roots[..1]).unwrap()).state, StatusState::Completed);
    let running = m.list_modules(Some(ModuleKind::Application), &all, ModuleFilter::Running).unwrap();
    let idle = m.list_modules(Some(ModuleKind::Application), &all, ModuleFilter::NonRunning).unwrap();
    let available = m.list_modules(Some(ModuleKind::Application), &all, ModuleFilter::Available).unwrap();
    assert_eq!(names(&running), ["s1/acctApp"]);
    assert_eq!(names(&idle), ["s2/acctApp"]);
    let mut union = [running, idle].concat();
    union.sort();
    assert_eq!(union, available);
    assert!(m.list_modules(Some(ModuleKind::Web), &all, ModuleFilter::Available).unwrap().is_empty());

    // Undeploying a running module fails; the idle one is processed.
    let p = m.undeploy(&roots).unwrap();
    let st = done(&p);
    assert_eq!(st.state, StatusState::Failed);
    assert!(st.message.contains("s1/acctApp: StillRunning"), "{}", st.message);
    assert_eq!(names(&p.result_ids()), ["s2/acctApp"]);

    assert_eq!(done(&m.stop(&roots[..1]).unwrap()).state, StatusState::Completed);
    let p = m.undeploy(&roots[..1]).unwrap();
    assert_eq!(done(&p).state, StatusState::Completed);
    assert_eq!(names(&p.result_ids()), ["s1/acctApp"]);
    assert!(m.list_modules(None, &all, ModuleFilter::Available).unwrap().is_empty());
}

#[test]
fn child_modules_cannot_be_driven_directly() {
    let c = cluster(1);
    let m = &c.manager;
    let app = deployed(&account_app(), &[("jdbc_account", "AccountDS")]);
    done(&m.distribute(&[m.target("s1").unwrap()], &app, false).unwrap());
    let st = done(&m.start(&[tmid("s1/acctApp/acct")]).unwrap());
    assert_eq!(st.state, StatusState::Failed);
    assert!(st.message.contains("NotRootModule"));
}

#[test]
fn group_and_members_report_the_same_outcomes() {
    let unit = deployed(&bank_app(), &[("eis", "BankEIS")]);
    let ra = deployed(&bank_adapter(), &[]);
    let outcome = |via_group: bool| {
        let c = cluster(3);
        let m = &c.manager;
        // Only s2 has the adapter, so the checked distribute splits.
        done(&m.distribute(&[m.target("s2").unwrap()], &ra, true).unwrap());
        let targets: Vec<Target> = if via_group {
            vec![m.target("all").unwrap()]
        } else {
            ["s3", "s1", "s2"].iter().map(|s| m.target(s).unwrap()).collect()
        };
        let st = done(&m.distribute(&targets, &unit, true).unwrap());
        let installed: Vec<bool> = c.agents.iter().map(|a| a.snapshot().installed.contains_key("bankApp")).collect();
        (st, installed)
    };
    let (group, g_installed) = outcome(true);
    let (members, m_installed) = outcome(false);
    assert_eq!(group, members);
    assert_eq!(g_installed, [false, true, false]);
    assert_eq!(g_installed, m_installed);
    assert_eq!(group.state, StatusState::Failed);
    assert!(group.message.starts_with("s1: UnsatisfiedDependency[unit] bankApp: bankRA; s2: installed; s3: "));
}

#[test]
fn unreachable_agents_fail_listing_and_operations() {
    let m = DeploymentManager::with_targets(vec![Target::server("s9", dead_endpoint(), "A")]).unwrap();
    let t = m.target("s9").unwrap();
    assert!(matches!(m.list_modules(None, std::slice::from_ref(&t), ModuleFilter::Available), Err(ManagerError::AgentUnreachable { .. })));
    let st = done(&m.start(&[tmid("s9/x")]).unwrap());
    assert_eq!(st.state, StatusState::Failed);
    assert!(st.message.contains("AgentUnreachable"));
}

#[test]
fn operations_on_one_server_run_in_submission_order() {
    let c = cluster(1);
    let m = &c.manager;
    let unit = deployed(&UnitBuilder::new("m", ModuleKind::Web).build(), &[]);
    let id = tmid("s1/m");
    let log = Arc::new(Mutex::new(Vec::new()));
    let mut ops = vec![m.distribute(&[m.target("s1").unwrap()], &unit, true).unwrap()];
    for i in 0..10 {
        ops.push(if i % 2 == 0 { m.start(std::slice::from_ref(&id)) } else { m.stop(std::slice::from_ref(&id)) }.unwrap());
    }
    ops.push(m.undeploy(std::slice::from_ref(&id)).unwrap());
    for (i, p) in ops.iter().enumerate() {
        let log = Arc::clone(&log);
        p.add_listener(move |s| {
            if s.state.is_terminal() {
                log.lock().unwrap().push((i, s.state));
            }
        });
    }
    for p in &ops {
        done(p);
    }
    let log = log.lock().unwrap();
    assert!(log.iter().all(|(_, s)| *s == StatusState::Completed), "{log:?}");
    let mut order: Vec<usize> = log.iter().map(|(i, _)| *i).collect();
    let completed = order.clone();
    order.sort();
    assert_eq!(completed, order);
    assert!(c.agents[0].snapshot().installed.is_empty());
}

#[test]
fn site_link_uses_registry_of_the_linked_server() {
    let sb = agent("sB", "siteB");
    let linked = agent_with(remote_registry(ServerConfig::new("sA", "127.0.0.1:0", "siteA"), "sB"));
    let m = DeploymentManager::with_targets(vec![
        Target::server("sA", linked.endpoint(), "siteA"),
        Target::server("sB", sb.endpoint(), "siteB"),
    ])
    .unwrap();
    let snap = m.server_snapshot("sA").unwrap();
    assert_eq!(snap.registry_site.as_deref(), Some("siteB"));
    // Without the registry target the link cannot be resolved.
    let alone = DeploymentManager::with_targets(vec![Target::server("sA", linked.endpoint(), "siteA")]).unwrap();
    assert_eq!(alone.server_snapshot("sA").unwrap().registry_site, None);
}
