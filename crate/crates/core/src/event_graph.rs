//! Command dependency DAG.
//!
//! Both the client and every daemon session keep one [`TaskGraph`]. Commands
//! executed by this node are `Local`; commands executed elsewhere appear as
//! `RemoteProxy` events that only change state when a completion
//! notification arrives.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};

use thiserror::Error;

use crate::status;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventStatus {
    Queued,
    Ready,
    Running,
    Complete,
    /// Carries the status code reported on the wire.
    Failed(u8),
    DeviceLost,
}

impl EventStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, EventStatus::Complete | EventStatus::Failed(_) | EventStatus::DeviceLost)
    }

    /// Wire status code for a terminal status.
    pub fn code(self) -> u8 {
        match self {
            EventStatus::Complete => status::OK,
            EventStatus::Failed(c) => c,
            EventStatus::DeviceLost => status::DEVICE_LOST,
            _ => status::OK,
        }
    }

    pub fn from_code(code: u8) -> EventStatus {
        match code {
            status::OK => EventStatus::Complete,
            status::DEVICE_LOST => EventStatus::DeviceLost,
            c => EventStatus::Failed(c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Local,
    RemoteProxy,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventRecord {
    pub command_id: u64,
    pub status: EventStatus,
    pub kind: EventKind,
    pub deps: Vec<u64>,
    pub unresolved_deps: usize,
    /// In insertion order.
    pub dependents: Vec<u64>,
    pub notify_peers: BTreeSet<u32>,
}

impl EventRecord {
    fn proxy(command_id: u64) -> Self {
        EventRecord {
            command_id,
            status: EventStatus::Queued,
            kind: EventKind::RemoteProxy,
            deps: Vec::new(),
            unresolved_deps: 0,
            dependents: Vec::new(),
            notify_peers: BTreeSet::new(),
        }
    }

    /// Auto-created by a reference and not yet given its own dependencies.
    fn is_placeholder(&self) -> bool {
        self.kind == EventKind::RemoteProxy && self.deps.is_empty() && !self.status.is_terminal()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("adding command {0} would create a dependency cycle")]
    CycleDetected(u64),
    #[error("command {0} already present")]
    DuplicateCommand(u64),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaskGraph {
    events: HashMap<u64, EventRecord>,
    ready_queue: VecDeque<u64>,
    failed_local: Vec<u64>,
}

impl TaskGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, command_id: u64) -> Option<&EventRecord> {
        self.events.get(&command_id)
    }

    pub fn status(&self, command_id: u64) -> Option<EventStatus> {
        self.events.get(&command_id).map(|e| e.status)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn ready_len(&self) -> usize {
        self.ready_queue.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.events.keys().copied()
    }

    pub fn add_command(
        &mut self,
        command_id: u64,
        deps: &[u64],
        kind: EventKind,
    ) -> Result<&EventRecord, GraphError> {
        if deps.contains(&command_id) {
            return Err(GraphError::CycleDetected(command_id));
        }
        let upgrading = match self.events.get(&command_id) {
            None => false,
            Some(existing) if existing.is_placeholder() => true,
            Some(existing) if kind == EventKind::RemoteProxy && existing.kind == EventKind::RemoteProxy => {
                // A notification outran the command's own registration.
                return Ok(self.events.get(&command_id).unwrap());
            }
            Some(_) => return Err(GraphError::DuplicateCommand(command_id)),
        };
        if upgrading && self.reaches_any(command_id, deps) {
            return Err(GraphError::CycleDetected(command_id));
        }

        let mut unique = Vec::with_capacity(deps.len());
        let mut seen = HashSet::with_capacity(deps.len());
        for &d in deps {
            if seen.insert(d) {
                unique.push(d);
            }
        }

        let mut unresolved = 0;
        let mut failed_dep = None;
        for &d in &unique {
            let dep = self.events.entry(d).or_insert_with(|| EventRecord::proxy(d));
            match dep.status {
                EventStatus::Complete => {}
                EventStatus::Failed(_) | EventStatus::DeviceLost => {
                    failed_dep.get_or_insert(dep.status);
                }
                _ => {
                    unresolved += 1;
                    dep.dependents.push(command_id);
                }
            }
        }

        let rec = self.events.entry(command_id).or_insert_with(|| EventRecord::proxy(command_id));
        rec.kind = kind;
        rec.status = EventStatus::Queued;
        rec.deps = unique;
        rec.unresolved_deps = unresolved;

        if failed_dep.is_some() {
            self.fail_transitively(command_id, status::DEPENDENCY_FAILED);
        } else if unresolved == 0 {
            self.mark_ready(command_id);
        }
        Ok(self.events.get(&command_id).unwrap())
    }

    /// Is any of `targets` reachable from `start` along dependent edges?
    fn reaches_any(&self, start: u64, targets: &[u64]) -> bool {
        let targets: HashSet<u64> = targets.iter().copied().collect();
        let mut stack = vec![start];
        let mut seen = HashSet::new();
        while let Some(id) = stack.pop() {
            if !seen.insert(id) {
                continue;
            }
            if let Some(rec) = self.events.get(&id) {
                for &d in &rec.dependents {
                    if targets.contains(&d) {
                        return true;
                    }
                    stack.push(d);
                }
            }
        }
        false
    }

    fn mark_ready(&mut self, id: u64) -> bool {
        let rec = self.events.get_mut(&id).unwrap();
        if rec.status != EventStatus::Queued {
            return false;
        }
        rec.status = EventStatus::Ready;
        if rec.kind == EventKind::Local {
            self.ready_queue.push_back(id);
            true
        } else {
            false
        }
    }

    fn fail_transitively(&mut self, id: u64, code: u8) {
        let mut stack = vec![id];
        while let Some(cur) = stack.pop() {
            let rec = match self.events.get_mut(&cur) {
                Some(r) if !r.status.is_terminal() && r.status != EventStatus::Running => r,
                _ => continue,
            };
            let was_ready = rec.status == EventStatus::Ready;
            rec.status = EventStatus::Failed(code);
            if rec.kind == EventKind::Local {
                self.failed_local.push(cur);
                if was_ready {
                    self.ready_queue.retain(|&r| r != cur);
                }
            }
            stack.extend(rec.dependents.iter().rev().copied());
        }
    }

    /// Records a terminal status and returns the local events that became
    /// ready as a result, in insertion order. Signaling an event that is
    /// already terminal is a no-op. Signaling an unknown id creates a
    /// completed proxy so a later dependent observes it.
    pub fn signal_complete(&mut self, command_id: u64, outcome: EventStatus) -> Vec<u64> {
        debug_assert!(outcome.is_terminal());
        let rec = self.events.entry(command_id).or_insert_with(|| EventRecord::proxy(command_id));
        if rec.status.is_terminal() {
            return Vec::new();
        }
        let was_ready = rec.status == EventStatus::Ready && rec.kind == EventKind::Local;
        rec.status = outcome;
        let dependents = rec.dependents.clone();
        if was_ready {
            self.ready_queue.retain(|&r| r != command_id);
        }

        let mut newly_ready = Vec::new();
        match outcome {
            EventStatus::Complete => {
                for d in dependents {
                    let dep = self.events.get_mut(&d).unwrap();
                    if dep.status.is_terminal() {
                        continue;
                    }
                    dep.unresolved_deps -= 1;
                    if dep.unresolved_deps == 0 && self.mark_ready(d) {
                        newly_ready.push(d);
                    }
                }
            }
            _ => {
                for d in dependents {
                    self.fail_transitively(d, status::DEPENDENCY_FAILED);
                }
            }
        }
        newly_ready
    }

    /// Removes the oldest ready local event and marks it running.
    pub fn pop_ready(&mut self) -> Option<u64> {
        let id = self.ready_queue.pop_front()?;
        debug_assert!(self.events[&id].deps.iter().all(|d| self.events[d].status == EventStatus::Complete));
        self.events.get_mut(&id).unwrap().status = EventStatus::Running;
        Some(id)
    }

    /// Local events failed by propagation since the last call.
    pub fn take_failed(&mut self) -> Vec<u64> {
        std::mem::take(&mut self.failed_local)
    }

    pub fn add_notify_peer(&mut self, command_id: u64, peer: u32) {
        if let Some(rec) = self.events.get_mut(&command_id) {
            rec.notify_peers.insert(peer);
        }
    }

    /// Ids of events not yet in a terminal state.
    pub fn pending(&self) -> impl Iterator<Item = u64> + '_ {
        self.events.values().filter(|e| !e.status.is_terminal()).map(|e| e.command_id)
    }
}
