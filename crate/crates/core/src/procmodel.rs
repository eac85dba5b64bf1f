//! Processes, tokens, privileges, protection levels, module loads, and ALPC
//! connections: the substrate attacks act on and defense hooks observe.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::authcore::{nt_hash_of, Group, LogonSession};
use crate::defenses::{self, Verdict};
use crate::world::World;

/// LUID of SeDebugPrivilege, the only privilege the model exercises.
pub const SE_DEBUG_PRIVILEGE: u32 = 20;

/// Image name that marks the modeled LSASS process.
pub const LSASS_IMAGE: &str = "lsass.exe";

/// The ALPC port the SAM server listens on inside LSASS.
pub const SAM_ALPC_PORT: &str = "\\RPC Control\\samss";

/// Modules preloaded into the LSASS process at spawn.
pub const LSASS_PRELOADED_MODULES: [&str; 3] = ["ntdll.dll", "lsasrv.dll", "samsrv.dll"];

/// Process identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pid(pub u32);

impl fmt::Display for Pid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum IntegrityLevel {
    Low,
    Medium,
    High,
    System,
}

impl IntegrityLevel {
    pub fn index(self) -> u8 {
        match self {
            IntegrityLevel::Low => 0,
            IntegrityLevel::Medium => 1,
            IntegrityLevel::High => 2,
            IntegrityLevel::System => 3,
        }
    }

    pub fn parse(s: &str) -> Option<IntegrityLevel> {
        match s {
            "low" => Some(IntegrityLevel::Low),
            "medium" => Some(IntegrityLevel::Medium),
            "high" => Some(IntegrityLevel::High),
            "system" => Some(IntegrityLevel::System),
            _ => None,
        }
    }
}

impl fmt::Display for IntegrityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            IntegrityLevel::Low => "low",
            IntegrityLevel::Medium => "medium",
            IntegrityLevel::High => "high",
            IntegrityLevel::System => "system",
        };
        f.write_str(s)
    }
}

/// State of a single privilege in a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PrivilegeState {
    pub enabled: bool,
    pub enabled_by_default: bool,
}

/// Access token of a process. Privilege 20 starts disabled for everyone,
/// administrators included.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Token {
    pub user: String,
    pub privileges: std::collections::BTreeMap<u32, PrivilegeState>,
    pub integrity_level: IntegrityLevel,
}

impl Token {
    pub fn new(user: &str, integrity_level: IntegrityLevel) -> Token {
        let mut privileges = std::collections::BTreeMap::new();
        privileges.insert(
            SE_DEBUG_PRIVILEGE,
            PrivilegeState {
                enabled: false,
                enabled_by_default: false,
            },
        );
        Token {
            user: user.to_string(),
            privileges,
            integrity_level,
        }
    }

    pub fn privilege(&self, id: u32) -> PrivilegeState {
        self.privileges.get(&id).copied().unwrap_or(PrivilegeState {
            enabled: false,
            enabled_by_default: false,
        })
    }

    /// The three token fields an ALPC gate predicate examines.
    pub fn gate_fields(&self) -> TokenGateFields {
        let debug = self.privilege(SE_DEBUG_PRIVILEGE);
        TokenGateFields {
            privilege_enabled: debug.enabled,
            privilege_enabled_by_default: debug.enabled_by_default,
            integrity_level_index: self.integrity_level.index(),
        }
    }
}

/// Snapshot of the token fields a gate predicate may inspect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TokenGateFields {
    pub privilege_enabled: bool,
    pub privilege_enabled_by_default: bool,
    pub integrity_level_index: u8,
}

/// Predicate installed on the SAM port by the ALPC-blocking defense. The
/// default requires System integrity, which no attacker-reachable token has.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TokenGate {
    pub required_integrity: IntegrityLevel,
}

impl TokenGate {
    pub fn allows(&self, fields: &TokenGateFields) -> bool {
        fields.integrity_level_index == self.required_integrity.index()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protection {
    None,
    Ppl,
}

/// A process and everything hooks can observe about it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProcessDescriptor {
    pub pid: Pid,
    pub image_path: String,
    pub image_name: String,
    pub token: Token,
    pub protection: Protection,
    pub loaded_modules: Vec<String>,
    pub alive: bool,
}

/// ALPC port registered by LSASS for the SAM service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AlpcPort {
    pub name: String,
    pub owner_pid: Pid,
    pub gate: Option<TokenGate>,
}

/// Functions whose calls the model records as API events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ApiFunction {
    LsaOpenPolicy,
    SamConnect,
    SamOpenDomain,
    CreateProcessWithLogonW,
    MiniDumpWriteDump,
}

impl ApiFunction {
    pub fn parse(s: &str) -> Option<ApiFunction> {
        match s {
            "LsaOpenPolicy" => Some(ApiFunction::LsaOpenPolicy),
            "SamConnect" => Some(ApiFunction::SamConnect),
            "SamOpenDomain" => Some(ApiFunction::SamOpenDomain),
            "CreateProcessWithLogonW" => Some(ApiFunction::CreateProcessWithLogonW),
            "MiniDumpWriteDump" => Some(ApiFunction::MiniDumpWriteDump),
            _ => None,
        }
    }
}

impl fmt::Display for ApiFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ApiFunction::LsaOpenPolicy => "LsaOpenPolicy",
            ApiFunction::SamConnect => "SamConnect",
            ApiFunction::SamOpenDomain => "SamOpenDomain",
            ApiFunction::CreateProcessWithLogonW => "CreateProcessWithLogonW",
            ApiFunction::MiniDumpWriteDump => "MiniDumpWriteDump",
        };
        f.write_str(s)
    }
}

/// One recorded API call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ApiCallEvent {
    pub caller_pid: Pid,
    pub function: ApiFunction,
    pub argument_tag: String,
}

/// Everything that happened in a world, in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum WorldEvent {
    ProcessCreated(ProcessCreated),
    ModuleLoaded { pid: Pid, module: String },
    ApiCall(ApiCallEvent),
}

/// Data of a process-creation event as defense hooks see it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProcessCreated {
    pub pid: Pid,
    pub image_path: String,
    pub image_name: String,
    pub user: String,
    /// Keywords recognizable in the binary's content, examined by
    /// signature scanning alongside the image name.
    pub content_keywords: BTreeSet<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProcError {
    #[error("no such process: pid {0}")]
    NoSuchProcess(Pid),
    #[error("no such port: {0:?}")]
    NoSuchPort(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrivilegeOutcome {
    Granted,
    Denied,
}

/// Why `open_process` refused a handle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DenyReason {
    NoDebugPrivilege,
    ProtectedProcess,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AccessKind {
    Read,
    Dump,
}

/// Proof of a granted `open_process` call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProcessHandle {
    target: Pid,
    access: AccessKind,
}

impl ProcessHandle {
    pub fn target(&self) -> Pid {
        self.target
    }

    pub fn access(&self) -> AccessKind {
        self.access
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpenOutcome {
    Handle(ProcessHandle),
    Denied(DenyReason),
}

/// Proof of an established ALPC connection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlpcConnection {
    port: String,
    caller: Pid,
}

impl AlpcConnection {
    pub fn port(&self) -> &str {
        &self.port
    }

    pub fn caller(&self) -> Pid {
        self.caller
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConnectOutcome {
    Connected(AlpcConnection),
    /// The port gate rejected the caller's token.
    GateDenied,
    /// A defense hook terminated the caller on the connect call itself.
    CallerTerminated,
}

/// Outcome of recording an API call: whether a hook let the caller live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ApiOutcome {
    Allowed,
    Terminated,
}

fn basename(path: &str) -> &str {
    path.rsplit(['\\', '/']).next().unwrap_or(path)
}

impl World {
    /// Spawn a process. Integrity defaults to Medium, High for members of
    /// LocalAdministrators, System for the SYSTEM user. Emits a
    /// ProcessCreated event that active defenses evaluate.
    pub fn spawn_process(&mut self, image_path: &str, user: &str) -> Pid {
        self.spawn_with_keywords(image_path, user, BTreeSet::new())
    }

    pub(crate) fn spawn_with_keywords(
        &mut self,
        image_path: &str,
        user: &str,
        content_keywords: BTreeSet<String>,
    ) -> Pid {
        let pid = self.alloc_pid();
        let image_name = basename(image_path).to_string();
        let integrity = if user.eq_ignore_ascii_case("SYSTEM") {
            IntegrityLevel::System
        } else if self
            .sam()
            .account_by_username(user)
            .is_some_and(|a| a.groups.contains(&Group::LocalAdministrators))
        {
            IntegrityLevel::High
        } else {
            IntegrityLevel::Medium
        };

        let descriptor = ProcessDescriptor {
            pid,
            image_path: image_path.to_string(),
            image_name: image_name.clone(),
            token: Token::new(user, integrity),
            protection: Protection::None,
            loaded_modules: Vec::new(),
            alive: true,
        };
        self.insert_process(descriptor);

        let created = ProcessCreated {
            pid,
            image_path: image_path.to_string(),
            image_name: image_name.clone(),
            user: user.to_string(),
            content_keywords,
        };
        self.record_event(WorldEvent::ProcessCreated(created.clone()));

        match defenses::on_process_created(self.policies(), &created) {
            Verdict::Allow => {}
            Verdict::Warn(event) | Verdict::Deny(event) => self.record_detection(event),
            Verdict::Terminate(event) => {
                self.record_detection(event);
                self.kill_process(pid);
            }
        }

        if self.process(pid).is_some_and(|p| p.alive)
            && image_name.eq_ignore_ascii_case(LSASS_IMAGE)
        {
            self.register_port(AlpcPort {
                name: SAM_ALPC_PORT.to_string(),
                owner_pid: pid,
                gate: None,
            });
            for module in LSASS_PRELOADED_MODULES {
                self.load_module(pid, module).expect("lsass just spawned");
            }
        }

        pid
    }

    /// Start an agent process under the given credentials and prepend the
    /// matching decoy session to the credential store. The credentials need
    /// not exist in SAM; that is the point of a honey token.
    pub fn create_process_with_logon(
        &mut self,
        username: &str,
        domain: &str,
        password: &str,
        image_path: &str,
    ) -> Pid {
        let pid = self.spawn_process(image_path, username);
        self.record_api_call(
            pid,
            ApiFunction::CreateProcessWithLogonW,
            &format!("{username}@{domain}"),
        );
        let session = LogonSession::new_decoy(self.alloc_session_id(), username, domain, password);
        debug_assert_eq!(session.cached_nt_hash, nt_hash_of(password));
        self.store_mut().push_decoy(session);
        pid
    }

    /// Try to enable a privilege on a process token. The default rule lets
    /// LocalAdministrators enable privilege 20; an active restriction policy
    /// replaces the permitted group set.
    pub fn enable_privilege(
        &mut self,
        pid: Pid,
        privilege_id: u32,
    ) -> Result<PrivilegeOutcome, ProcError> {
        let user = {
            let process = self
                .process(pid)
                .filter(|p| p.alive)
                .ok_or(ProcError::NoSuchProcess(pid))?;
            process.token.user.clone()
        };
        let permitted = {
            let groups = self
                .sam()
                .account_by_username(&user)
                .map(|a| a.groups.clone())
                .unwrap_or_default();
            match self.policies().debug_privilege_allowed_groups() {
                Some(allowed) => allowed.iter().any(|g| groups.contains(g)),
                None => groups.contains(&Group::LocalAdministrators),
            }
        };
        if !permitted {
            return Ok(PrivilegeOutcome::Denied);
        }
        let process = self.process_mut(pid).expect("checked above");
        process
            .token
            .privileges
            .entry(privilege_id)
            .or_insert(PrivilegeState {
                enabled: false,
                enabled_by_default: false,
            })
            .enabled = true;
        Ok(PrivilegeOutcome::Granted)
    }

    /// Request a handle on another process. Opening LSASS needs an enabled
    /// privilege 20, and a PPL target refuses unprotected callers.
    pub fn open_process(
        &self,
        caller_pid: Pid,
        target_pid: Pid,
        access: AccessKind,
    ) -> Result<OpenOutcome, ProcError> {
        let caller = self
            .process(caller_pid)
            .filter(|p| p.alive)
            .ok_or(ProcError::NoSuchProcess(caller_pid))?;
        let target = self
            .process(target_pid)
            .filter(|p| p.alive)
            .ok_or(ProcError::NoSuchProcess(target_pid))?;

        let target_is_lsass = target.image_name.eq_ignore_ascii_case(LSASS_IMAGE);
        if target_is_lsass && !caller.token.privilege(SE_DEBUG_PRIVILEGE).enabled {
            return Ok(OpenOutcome::Denied(DenyReason::NoDebugPrivilege));
        }
        if target.protection == Protection::Ppl && caller.protection != Protection::Ppl {
            return Ok(OpenOutcome::Denied(DenyReason::ProtectedProcess));
        }
        Ok(OpenOutcome::Handle(ProcessHandle {
            target: target_pid,
            access,
        }))
    }

    /// Load a module into a process. Append semantics: duplicate loads are
    /// listed (and reported) once per load.
    pub fn load_module(&mut self, pid: Pid, module: &str) -> Result<(), ProcError> {
        {
            let process = self
                .process_mut(pid)
                .filter(|p| p.alive)
                .ok_or(ProcError::NoSuchProcess(pid))?;
            process.loaded_modules.push(module.to_string());
        }
        self.record_event(WorldEvent::ModuleLoaded {
            pid,
            module: module.to_string(),
        });
        Ok(())
    }

    /// Connect to an ALPC port. Emits the SamConnect call for the SAM port;
    /// an installed gate decides admission from the caller's token fields.
    pub fn alpc_connect(
        &mut self,
        caller_pid: Pid,
        port_name: &str,
    ) -> Result<ConnectOutcome, ProcError> {
        if self.port(port_name).is_none() {
            return Err(ProcError::NoSuchPort(port_name.to_string()));
        }
        let (fields, image_name) = {
            let caller = self
                .process(caller_pid)
                .filter(|p| p.alive)
                .ok_or(ProcError::NoSuchProcess(caller_pid))?;
            (caller.token.gate_fields(), caller.image_name.clone())
        };

        if self.record_api_call(caller_pid, ApiFunction::SamConnect, port_name)
            == ApiOutcome::Terminated
        {
            return Ok(ConnectOutcome::CallerTerminated);
        }

        let gate = self.port(port_name).and_then(|p| p.gate);
        match defenses::on_alpc_connect(gate.as_ref(), &fields, caller_pid, &image_name) {
            Verdict::Allow => Ok(ConnectOutcome::Connected(AlpcConnection {
                port: port_name.to_string(),
                caller: caller_pid,
            })),
            Verdict::Deny(event) | Verdict::Warn(event) | Verdict::Terminate(event) => {
                self.record_detection(event);
                Ok(ConnectOutcome::GateDenied)
            }
        }
    }

    /// Record an API call event and run it past the installed hook. Returns
    /// whether the caller survived the call.
    pub(crate) fn record_api_call(
        &mut self,
        caller_pid: Pid,
        function: ApiFunction,
        argument_tag: &str,
    ) -> ApiOutcome {
        let event = ApiCallEvent {
            caller_pid,
            function,
            argument_tag: argument_tag.to_string(),
        };
        self.record_event(WorldEvent::ApiCall(event.clone()));

        let caller_image_path = self
            .process(caller_pid)
            .map(|p| p.image_path.clone())
            .unwrap_or_default();
        let caller_image_name = self
            .process(caller_pid)
            .map(|p| p.image_name.clone())
            .unwrap_or_default();
        let answer = self.prompt_answer(&caller_image_name);

        match defenses::on_api_call(self.policies(), &event, &caller_image_path, answer) {
            Verdict::Allow => ApiOutcome::Allowed,
            Verdict::Warn(e) | Verdict::Deny(e) => {
                self.record_detection(e);
                ApiOutcome::Allowed
            }
            Verdict::Terminate(e) => {
                self.record_detection(e);
                self.kill_process(caller_pid);
                ApiOutcome::Terminated
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defenses::{DefensePolicy, DetectionKind, MonitorAction};
    use crate::test_fixture::{default_world, trusted_paths};

    #[test]
    fn spawn_admin_gets_high_integrity_and_disabled_debug() {
        let mut world = default_world();
        let pid = world.spawn_process("C:\\tools\\mimikatz.exe", "mainuser");
        let process = world.process(pid).unwrap();
        assert_eq!(process.token.integrity_level, IntegrityLevel::High);
        assert!(!process.token.privilege(SE_DEBUG_PRIVILEGE).enabled);
        assert_eq!(process.image_name, "mimikatz.exe");
    }

    #[test]
    fn spawn_unlisted_path_under_monitor_warns_once() {
        let mut world = default_world();
        crate::defenses::install(
            &mut world,
            vec![DefensePolicy::AllowlistMonitor {
                trusted_full_paths: trusted_paths(),
                action: MonitorAction::Warn,
            }],
        )
        .unwrap();
        let pid = world.spawn_process("C:\\tools\\mimikatz.exe", "mainuser");
        assert!(world.process(pid).unwrap().alive);
        let warnings: Vec<_> = world
            .detections()
            .iter()
            .filter(|e| e.kind == DetectionKind::ProcessWarning)
            .collect();
        assert_eq!(warnings.len(), 1);
        assert_eq!(warnings[0].subject_image, "mimikatz.exe");
    }

    #[test]
    fn spawn_listed_path_under_monitor_is_silent() {
        let mut world = default_world();
        crate::defenses::install(
            &mut world,
            vec![DefensePolicy::AllowlistMonitor {
                trusted_full_paths: trusted_paths(),
                action: MonitorAction::Warn,
            }],
        )
        .unwrap();
        world.spawn_process(
            "C:\\Program Files (x86)\\Microsoft\\Edge\\Application\\msedge.exe",
            "mainuser",
        );
        assert!(world.detections().is_empty());
    }

    #[test]
    fn create_process_with_logon_prepends_decoy() {
        let mut world = default_world();
        world.create_process_with_logon("test", "test", "test", "C:\\Windows\\System32\\agent.exe");
        let sessions = world.store().sessions();
        assert_eq!(sessions.len(), 1);
        assert!(sessions[0].is_decoy);
        assert_eq!(sessions[0].wdigest_plaintext.as_deref(), Some("test"));
        // the call itself is on the event log
        assert!(world.events().iter().any(|e| matches!(
            e,
            WorldEvent::ApiCall(c) if c.function == ApiFunction::CreateProcessWithLogonW
        )));
    }

    #[test]
    fn two_decoys_stay_ahead_of_real_sessions() {
        let mut world = default_world();
        world
            .authenticate(
                "mainuser",
                crate::test_fixture::MAINUSER_PASSWORD,
                crate::authcore::LogonOrigin::Interactive,
            )
            .unwrap();
        world.create_process_with_logon("test", "test", "test", "C:\\Windows\\System32\\agent.exe");
        world.create_process_with_logon(
            "test2",
            "test",
            "test2",
            "C:\\Windows\\System32\\agent.exe",
        );
        let sessions = world.store().sessions();
        assert_eq!(sessions.len(), 3);
        assert!(sessions[0].is_decoy && sessions[1].is_decoy);
        // newest decoy first
        assert_eq!(sessions[0].username, "test2");
        assert!(!sessions[2].is_decoy);
    }

    #[test]
    fn enable_privilege_rules() {
        let mut world = default_world();
        let admin = world.spawn_process("C:\\tools\\mimikatz.exe", "mainuser");
        assert_eq!(
            world.enable_privilege(admin, SE_DEBUG_PRIVILEGE).unwrap(),
            PrivilegeOutcome::Granted
        );
        assert!(
            world
                .process(admin)
                .unwrap()
                .token
                .privilege(SE_DEBUG_PRIVILEGE)
                .enabled
        );

        let plain = world.spawn_process("C:\\tools\\thing.exe", "WDAGUtilityAccount");
        assert_eq!(
            world.enable_privilege(plain, SE_DEBUG_PRIVILEGE).unwrap(),
            PrivilegeOutcome::Denied
        );

        assert_eq!(
            world.enable_privilege(Pid(9999), SE_DEBUG_PRIVILEGE),
            Err(ProcError::NoSuchProcess(Pid(9999)))
        );
    }

    #[test]
    fn debug_privilege_restriction_excludes_admins() {
        let mut world = default_world();
        crate::defenses::install(
            &mut world,
            vec![DefensePolicy::DebugPrivilegeRestriction {
                allowed_groups: Default::default(),
            }],
        )
        .unwrap();
        let admin = world.spawn_process("C:\\tools\\mimikatz.exe", "mainuser");
        assert_eq!(
            world.enable_privilege(admin, SE_DEBUG_PRIVILEGE).unwrap(),
            PrivilegeOutcome::Denied
        );
    }

    #[test]
    fn open_process_gate_order() {
        let mut world = default_world();
        let lsass = world.lsass_pid().unwrap();
        let attacker = world.spawn_process("C:\\tools\\mimikatz.exe", "mainuser");

        // no privilege 20 yet
        assert_eq!(
            world
                .open_process(attacker, lsass, AccessKind::Read)
                .unwrap(),
            OpenOutcome::Denied(DenyReason::NoDebugPrivilege)
        );

        world
            .enable_privilege(attacker, SE_DEBUG_PRIVILEGE)
            .unwrap();
        assert!(matches!(
            world
                .open_process(attacker, lsass, AccessKind::Read)
                .unwrap(),
            OpenOutcome::Handle(_)
        ));

        // PPL refuses even a debug-privileged caller
        world.set_protection(lsass, Protection::Ppl);
        assert_eq!(
            world
                .open_process(attacker, lsass, AccessKind::Read)
                .unwrap(),
            OpenOutcome::Denied(DenyReason::ProtectedProcess)
        );
    }

    #[test]
    fn ppl_only_shrinks_granted_pairs() {
        // enabling PPL must never grant a handle that was denied before
        for privileged in [false, true] {
            let mut plain = default_world();
            let mut ppl = default_world();
            for world in [&mut plain, &mut ppl] {
                let attacker = world.spawn_process("C:\\tools\\mimikatz.exe", "mainuser");
                if privileged {
                    world
                        .enable_privilege(attacker, SE_DEBUG_PRIVILEGE)
                        .unwrap();
                }
            }
            let lsass = ppl.lsass_pid().unwrap();
            ppl.set_protection(lsass, Protection::Ppl);
            for access in [AccessKind::Read, AccessKind::Dump] {
                let attacker = Pid(2);
                let before = matches!(
                    plain
                        .open_process(attacker, plain.lsass_pid().unwrap(), access)
                        .unwrap(),
                    OpenOutcome::Handle(_)
                );
                let after = matches!(
                    ppl.open_process(attacker, lsass, access).unwrap(),
                    OpenOutcome::Handle(_)
                );
                assert!(
                    !after || before,
                    "PPL granted a pair that was denied without it"
                );
            }
        }
    }

    #[test]
    fn load_module_appends_and_records() {
        let mut world = default_world();
        let pid = world.spawn_process("C:\\tools\\mimikatz.exe", "mainuser");
        world.load_module(pid, "samlib.dll").unwrap();
        world.load_module(pid, "samlib.dll").unwrap();
        let process = world.process(pid).unwrap();
        assert_eq!(process.loaded_modules, ["samlib.dll", "samlib.dll"]);
        let load_events = world
            .events()
            .iter()
            .filter(
                |e| matches!(e, WorldEvent::ModuleLoaded { module, .. } if module == "samlib.dll"),
            )
            .count();
        assert_eq!(load_events, 2);
    }

    #[test]
    fn lsass_preloads_samsrv() {
        let world = default_world();
        let lsass = world.lsass_pid().unwrap();
        let modules = &world.process(lsass).unwrap().loaded_modules;
        assert!(modules.iter().any(|m| m == "samsrv.dll"));
    }

    #[test]
    fn alpc_connect_default_open_and_gate() {
        let mut world = default_world();
        let attacker = world.spawn_process("C:\\tools\\mimikatz.exe", "mainuser");

        assert!(matches!(
            world.alpc_connect(attacker, SAM_ALPC_PORT).unwrap(),
            ConnectOutcome::Connected(_)
        ));

        world.install_alpc_gate(TokenGate {
            required_integrity: IntegrityLevel::System,
        });
        assert_eq!(
            world.alpc_connect(attacker, SAM_ALPC_PORT).unwrap(),
            ConnectOutcome::GateDenied
        );
        assert!(world
            .detections()
            .iter()
            .any(|e| e.kind == DetectionKind::GateDenied));

        world.remove_alpc_gate();
        assert!(matches!(
            world.alpc_connect(attacker, SAM_ALPC_PORT).unwrap(),
            ConnectOutcome::Connected(_)
        ));
    }

    #[test]
    fn alpc_gate_denies_every_live_nonsystem_caller() {
        let mut world = default_world();
        let pids: Vec<Pid> = vec![
            world.spawn_process("C:\\tools\\mimikatz.exe", "mainuser"),
            world.spawn_process("C:\\tools\\other.exe", "WDAGUtilityAccount"),
        ];
        world.install_alpc_gate(TokenGate {
            required_integrity: IntegrityLevel::System,
        });
        for pid in pids {
            assert_eq!(
                world.alpc_connect(pid, SAM_ALPC_PORT).unwrap(),
                ConnectOutcome::GateDenied,
                "pid {pid}"
            );
        }
    }

    #[test]
    fn alpc_connect_unknown_port() {
        let mut world = default_world();
        let pid = world.spawn_process("C:\\tools\\x.exe", "mainuser");
        assert_eq!(
            world.alpc_connect(pid, "\\RPC Control\\nothere"),
            Err(ProcError::NoSuchPort("\\RPC Control\\nothere".into()))
        );
    }

    #[test]
    fn event_log_counts_match_world_state() {
        let mut world = default_world();
        let a = world.spawn_process("C:\\tools\\a.exe", "mainuser");
        world.spawn_process("C:\\tools\\b.exe", "mainuser");
        world.load_module(a, "x.dll").unwrap();
        world.create_process_with_logon("test", "test", "test", "C:\\Windows\\System32\\agent.exe");

        let spawned = world.processes().len();
        let created_events = world
            .events()
            .iter()
            .filter(|e| matches!(e, WorldEvent::ProcessCreated(_)))
            .count();
        assert_eq!(spawned, created_events);

        let loaded: usize = world
            .processes()
            .values()
            .map(|p| p.loaded_modules.len())
            .sum();
        let load_events = world
            .events()
            .iter()
            .filter(|e| matches!(e, WorldEvent::ModuleLoaded { .. }))
            .count();
        assert_eq!(loaded, load_events);
    }
}
