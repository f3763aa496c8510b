//! Deployment orchestration for packaged application units: unit archives,
//! deployment configuration, dependency resolution, a deployment manager and
//! the per-server target agent.

pub mod agent;
pub mod config;
pub mod depres;
pub mod manager;
pub mod progress;
pub mod targets;
pub mod unit;
pub mod wire;
pub mod xml;

pub use agent::{run_agent, Agent, AgentHandle, ServerConfig, ServerSnapshot};
pub use config::{create_configuration, generate_deployed_unit, DeploymentConfiguration};
pub use depres::{DependencySpec, ServiceName, UnsatisfiedDependency};
pub use manager::{connect, DeploymentManager, ManagerError, ModuleFilter, TargetModuleID};
pub use progress::{CommandType, DeploymentStatus, ProgressObject, StatusState};
pub use targets::{run_registry, Target, TargetKind};
pub use unit::{open_unit, DeployableUnit, DeployedUnit, ModuleKind, UnitBuilder};
