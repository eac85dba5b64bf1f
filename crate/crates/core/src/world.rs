//! The simulated machine: one SAM database, one credential store, processes,
//! ports, installed policies, and the ordered event logs.
//!
//! A world is confined to a single logical thread; operations are synchronous
//! and deterministic. Distinct worlds share nothing and may live on distinct
//! threads.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::authcore::{CredentialStore, Group, SamDatabase};
use crate::defenses::{DefensePolicy, DetectionEvent, PolicySet, PromptAnswer};
use crate::procmodel::{
    AlpcPort, Pid, ProcessDescriptor, Protection, TokenGate, WorldEvent, LSASS_IMAGE, SAM_ALPC_PORT,
};

#[derive(Debug, Clone, Serialize)]
pub struct World {
    sam: SamDatabase,
    store: CredentialStore,
    processes: BTreeMap<Pid, ProcessDescriptor>,
    ports: BTreeMap<String, AlpcPort>,
    policies: PolicySet,
    events: Vec<WorldEvent>,
    detections: Vec<DetectionEvent>,
    artifacts: Vec<String>,
    prompt_answers: BTreeMap<String, PromptAnswer>,
    locked_out: bool,
    next_pid: u32,
    next_session_id: u64,
    next_seq: u64,
}

impl World {
    pub fn new(sam: SamDatabase) -> World {
        World {
            sam,
            store: CredentialStore::default(),
            processes: BTreeMap::new(),
            ports: BTreeMap::new(),
            policies: PolicySet::default(),
            events: Vec::new(),
            detections: Vec::new(),
            artifacts: Vec::new(),
            prompt_answers: BTreeMap::new(),
            locked_out: false,
            next_pid: 1,
            next_session_id: 1,
            next_seq: 1,
        }
    }

    pub fn sam(&self) -> &SamDatabase {
        &self.sam
    }

    pub fn store(&self) -> &CredentialStore {
        &self.store
    }

    pub(crate) fn store_mut(&mut self) -> &mut CredentialStore {
        &mut self.store
    }

    pub fn policies(&self) -> &PolicySet {
        &self.policies
    }

    pub fn processes(&self) -> &BTreeMap<Pid, ProcessDescriptor> {
        &self.processes
    }

    pub fn process(&self, pid: Pid) -> Option<&ProcessDescriptor> {
        self.processes.get(&pid)
    }

    pub fn events(&self) -> &[WorldEvent] {
        &self.events
    }

    pub fn detections(&self) -> &[DetectionEvent] {
        &self.detections
    }

    /// Dump files written during the run, in creation order.
    pub fn artifacts(&self) -> &[String] {
        &self.artifacts
    }

    pub fn is_locked_out(&self) -> bool {
        self.locked_out
    }

    /// Pid of the live LSASS process, if any.
    pub fn lsass_pid(&self) -> Option<Pid> {
        self.processes
            .values()
            .find(|p| p.alive && p.image_name.eq_ignore_ascii_case(LSASS_IMAGE))
            .map(|p| p.pid)
    }

    /// Supply a non-interactive answer for hook prompts aimed at processes
    /// with this image name.
    pub fn set_prompt_answer(&mut self, image_name: &str, answer: PromptAnswer) {
        self.prompt_answers.insert(image_name.to_string(), answer);
    }

    pub(crate) fn prompt_answer(&self, image_name: &str) -> Option<PromptAnswer> {
        self.prompt_answers.get(image_name).copied()
    }

    pub(crate) fn alloc_pid(&mut self) -> Pid {
        let pid = Pid(self.next_pid);
        self.next_pid += 1;
        pid
    }

    pub(crate) fn alloc_session_id(&mut self) -> u64 {
        let id = self.next_session_id;
        self.next_session_id += 1;
        id
    }

    pub(crate) fn insert_process(&mut self, descriptor: ProcessDescriptor) {
        debug_assert!(!self.processes.contains_key(&descriptor.pid));
        self.processes.insert(descriptor.pid, descriptor);
    }

    pub(crate) fn process_mut(&mut self, pid: Pid) -> Option<&mut ProcessDescriptor> {
        self.processes.get_mut(&pid)
    }

    pub(crate) fn kill_process(&mut self, pid: Pid) {
        if let Some(p) = self.processes.get_mut(&pid) {
            p.alive = false;
        }
    }

    pub(crate) fn set_protection(&mut self, pid: Pid, protection: Protection) {
        if let Some(p) = self.processes.get_mut(&pid) {
            p.protection = protection;
        }
    }

    pub(crate) fn register_port(&mut self, port: AlpcPort) {
        self.ports.insert(port.name.clone(), port);
    }

    pub(crate) fn port(&self, name: &str) -> Option<&AlpcPort> {
        self.ports.get(name)
    }

    pub(crate) fn install_alpc_gate(&mut self, gate: TokenGate) {
        if let Some(port) = self.ports.get_mut(SAM_ALPC_PORT) {
            port.gate = Some(gate);
        }
    }

    pub(crate) fn remove_alpc_gate(&mut self) {
        if let Some(port) = self.ports.get_mut(SAM_ALPC_PORT) {
            port.gate = None;
        }
    }

    pub fn alpc_gate_installed(&self) -> bool {
        self.ports
            .get(SAM_ALPC_PORT)
            .is_some_and(|p| p.gate.is_some())
    }

    pub(crate) fn mark_locked_out(&mut self) {
        self.locked_out = true;
    }

    pub(crate) fn extend_policies(&mut self, policies: Vec<DefensePolicy>) {
        let mut all = self.policies.policies().to_vec();
        all.extend(policies);
        self.policies = PolicySet::from_policies(all);
    }

    pub(crate) fn add_group(&mut self, username: &str, group: Group) {
        if let Some(account) = self.sam.account_by_username_mut(username) {
            account.groups.insert(group);
        }
    }

    pub(crate) fn record_event(&mut self, event: WorldEvent) {
        self.events.push(event);
    }

    /// Record a detection event, assigning the next sequence number.
    pub(crate) fn record_detection(&mut self, mut event: DetectionEvent) {
        event.seq = self.next_seq;
        self.next_seq += 1;
        self.detections.push(event);
    }

    pub(crate) fn record_artifact(&mut self, name: String) {
        self.artifacts.push(name);
    }
}
