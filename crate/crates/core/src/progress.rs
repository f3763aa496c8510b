//! Tracking of long-lived deployment operations, by polling or by listener
//! callbacks.

use std::fmt;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::Duration;

use serde::Serialize;

use crate::manager::TargetModuleID;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StatusState {
    Running,
    Completed,
    Failed,
}

impl StatusState {
    pub fn is_terminal(self) -> bool {
        !matches!(self, StatusState::Running)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandType {
    Distribute,
    Start,
    Stop,
    Undeploy,
}

impl fmt::Display for StatusState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StatusState::Running => "running",
            StatusState::Completed => "completed",
            StatusState::Failed => "failed",
        })
    }
}

impl fmt::Display for CommandType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CommandType::Distribute => "distribute",
            CommandType::Start => "start",
            CommandType::Stop => "stop",
            CommandType::Undeploy => "undeploy",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DeploymentStatus {
    pub state: StatusState,
    pub command: CommandType,
    pub message: String,
}

impl fmt::Display for DeploymentStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "STATUS {} {} {}", self.command, self.state, self.message)
    }
}

type Listener = Arc<dyn Fn(&DeploymentStatus) + Send + Sync>;

struct Inner {
    status: DeploymentStatus,
    result: Vec<TargetModuleID>,
    listeners: Vec<Listener>,
    /// Every published event, replayed to listeners that register late.
    history: Vec<DeploymentStatus>,
}

struct Shared {
    inner: Mutex<Inner>,
    done: Condvar,
    // Serializes event delivery so listeners see updates in order and the
    // terminal event last.
    dispatch: Mutex<()>,
}

/// Handle on one deployment operation. Clones share the same operation.
///
/// Every listener sees the same event sequence, starting with the initial
/// running status: events published before it was added are replayed on the caller's thread, later ones arrive on the
/// publishing thread. The terminal status is delivered exactly once per
/// listener. Listeners must not add listeners to the same object from inside
/// a callback.
#[derive(Clone)]
pub struct ProgressObject {
    shared: Arc<Shared>,
}

impl fmt::Debug for ProgressObject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProgressObject")
            .field("status", &self.get_deployment_status())
            .finish()
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl ProgressObject {
    pub fn new(command: CommandType, message: impl Into<String>) -> Self {
        let status = DeploymentStatus {
            state: StatusState::Running,
            command,
            message: message.into(),
        };
        ProgressObject {
            shared: Arc::new(Shared {
                inner: Mutex::new(Inner {
                    history: vec![status.clone()],
                    status,
                    result: Vec::new(),
                    listeners: Vec::new(),
                }),
                done: Condvar::new(),
                dispatch: Mutex::new(()),
            }),
        }
    }

    pub fn get_deployment_status(&self) -> DeploymentStatus {
        lock(&self.shared.inner).status.clone()
    }

    pub fn result_ids(&self) -> Vec<TargetModuleID> {
        lock(&self.shared.inner).result.clone()
    }

    pub fn is_terminal(&self) -> bool {
        lock(&self.shared.inner).status.state.is_terminal()
    }

    pub fn add_listener(&self, listener: impl Fn(&DeploymentStatus) + Send + Sync + 'static) {
        let listener: Listener = Arc::new(listener);
        let _dispatch = lock(&self.shared.dispatch);
        let past = {
            let mut inner = lock(&self.shared.inner);
            if !inner.status.state.is_terminal() {
                inner.listeners.push(Arc::clone(&listener));
            }
            inner.history.clone()
        };
        for status in &past {
            listener(status);
        }
    }

    /// Blocks until the operation reaches a terminal state.
    pub fn wait(&self) -> DeploymentStatus {
        let mut inner = lock(&self.shared.inner);
        while !inner.status.state.is_terminal() {
            inner = self.shared.done.wait(inner).unwrap_or_else(|e| e.into_inner());
        }
        inner.status.clone()
    }

    pub fn wait_timeout(&self, timeout: Duration) -> Option<DeploymentStatus> {
        let inner = lock(&self.shared.inner);
        let (inner, _) = self
            .shared
            .done
            .wait_timeout_while(inner, timeout, |i| !i.status.state.is_terminal())
            .unwrap_or_else(|e| e.into_inner());
        inner.status.state.is_terminal().then(|| inner.status.clone())
    }

    /// Publishes an intermediate message. Ignored once terminal.
    pub(crate) fn update(&self, message: impl Into<String>) {
        let _dispatch = lock(&self.shared.dispatch);
        let (status, listeners) = {
            let mut inner = lock(&self.shared.inner);
            if inner.status.state.is_terminal() {
                return;
            }
            inner.status.message = message.into();
            let status = inner.status.clone();
            inner.history.push(status.clone());
            (status, inner.listeners.clone())
        };
        for l in listeners {
            l(&status);
        }
    }

    /// Moves to a terminal state. Only the first call has any effect.
    pub(crate) fn finish(&self, state: StatusState, message: impl Into<String>, result: Vec<TargetModuleID>) {
        debug_assert!(state.is_terminal());
        let _dispatch = lock(&self.shared.dispatch);
        let (status, listeners) = {
            let mut inner = lock(&self.shared.inner);
            if inner.status.state.is_terminal() {
                return;
            }
            inner.status.state = state;
            inner.status.message = message.into();
            inner.result = result;
            self.shared.done.notify_all();
            let status = inner.status.clone();
            inner.history.push(status.clone());
            (status, std::mem::take(&mut inner.listeners))
        };
        for l in listeners {
            l(&status);
        }
    }
}
