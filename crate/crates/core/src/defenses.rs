//! Pluggable prevention and detection policies, one per modeled method,
//! consuming process events and rendering verdicts.

use std::collections::BTreeSet;

use serde::Serialize;
use thiserror::Error;

use crate::authcore::Group;
use crate::procmodel::{
    ApiCallEvent, ApiFunction, IntegrityLevel, Pid, ProcessCreated, Protection, TokenGate,
    TokenGateFields,
};
use crate::world::World;

/// Path of the agent process a honey token launches: "a process that
/// performs empty work" running under the decoy credentials.
pub const DECOY_AGENT_PATH: &str = "C:\\Windows\\System32\\agent.exe";

/// Keywords that mark a binary as known-bad to signature scanning, and that
/// obfuscation strips.
pub const KNOWN_BAD_KEYWORDS: [&str; 1] = ["mimikatz"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MonitorAction {
    Warn,
    Terminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HookAction {
    Prompt,
    Terminate,
}

/// Non-interactive resolution of a hook prompt, supplied per scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PromptAnswer {
    Allow,
    Deny,
}

/// One prevention method. A policy set holds at most one instance of each
/// variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum DefensePolicy {
    /// Plant a decoy logon session via an agent process so the decoy
    /// credentials sit at the front of the store.
    HoneyToken {
        username: String,
        domain: String,
        password: String,
    },
    /// Compare every spawned image against a list of trusted full paths.
    /// Full-path matching avoids substitution of applications by name.
    AllowlistMonitor {
        trusted_full_paths: BTreeSet<String>,
        action: MonitorAction,
    },
    /// Intercept calls of watched functions from untrusted images; module
    /// loads of the watched libraries are monitored as well.
    LsassApiHook {
        watched_functions: BTreeSet<ApiFunction>,
        watched_modules: BTreeSet<String>,
        action: HookAction,
        trusted_paths: BTreeSet<String>,
    },
    /// Gate new ALPC connections to the SAM port on the caller's token
    /// fields. Careless use risks locking the account out after logout.
    AlpcBlock {
        restore_on_logout: bool,
        required_integrity: IntegrityLevel,
    },
    /// Clear WDigest's UseLogonCredential switch: stops plaintext caching,
    /// NTLM hashes stay obtainable.
    WDigestDisable,
    /// Run LSASS as a protected process.
    PplEnable,
    /// Isolate LSASS secrets; memory reads return redacted views.
    CredentialGuard,
    /// Restrict who may enable the debug privilege. An empty group set
    /// denies everyone, administrators included.
    DebugPrivilegeRestriction { allowed_groups: BTreeSet<Group> },
    /// Members get no cached secrets at session creation.
    ProtectedUsers { members: BTreeSet<String> },
    /// Restricted Admin mode for RDP: remote sessions cache no plaintext.
    RestrictedAdminRdp,
    /// Outdated protocols disabled: sessions cache no NTLM hash. SAM itself
    /// keeps its hashes, so the SAM path still yields them.
    DisableLmNtlm,
    /// Keyword match on spawned images, case-insensitive, over both the
    /// image name and recognizable content keywords.
    SignatureScan { keywords: BTreeSet<String> },
}

impl DefensePolicy {
    pub fn name(&self) -> &'static str {
        match self {
            DefensePolicy::HoneyToken { .. } => "HoneyToken",
            DefensePolicy::AllowlistMonitor { .. } => "AllowlistMonitor",
            DefensePolicy::LsassApiHook { .. } => "LsassApiHook",
            DefensePolicy::AlpcBlock { .. } => "AlpcBlock",
            DefensePolicy::WDigestDisable => "WDigestDisable",
            DefensePolicy::PplEnable => "PplEnable",
            DefensePolicy::CredentialGuard => "CredentialGuard",
            DefensePolicy::DebugPrivilegeRestriction { .. } => "DebugPrivilegeRestriction",
            DefensePolicy::ProtectedUsers { .. } => "ProtectedUsers",
            DefensePolicy::RestrictedAdminRdp => "RestrictedAdminRdp",
            DefensePolicy::DisableLmNtlm => "DisableLmNtlm",
            DefensePolicy::SignatureScan { .. } => "SignatureScan",
        }
    }

    /// Hook with the default watched sets and a scenario-supplied trusted
    /// caller list.
    pub fn default_api_hook(action: HookAction, trusted_paths: BTreeSet<String>) -> DefensePolicy {
        DefensePolicy::LsassApiHook {
            watched_functions: [ApiFunction::LsaOpenPolicy, ApiFunction::SamConnect]
                .into_iter()
                .collect(),
            watched_modules: ["samlib.dll".to_string(), "samsrv.dll".to_string()]
                .into_iter()
                .collect(),
            action,
            trusted_paths,
        }
    }

    pub fn default_alpc_block(restore_on_logout: bool) -> DefensePolicy {
        DefensePolicy::AlpcBlock {
            restore_on_logout,
            required_integrity: IntegrityLevel::System,
        }
    }

    pub fn default_signature_scan() -> DefensePolicy {
        DefensePolicy::SignatureScan {
            keywords: KNOWN_BAD_KEYWORDS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// The installed policies of a world. Immutable after install.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PolicySet {
    policies: Vec<DefensePolicy>,
}

impl PolicySet {
    pub(crate) fn from_policies(policies: Vec<DefensePolicy>) -> PolicySet {
        PolicySet { policies }
    }

    pub fn policies(&self) -> &[DefensePolicy] {
        &self.policies
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    fn get(&self, name: &str) -> Option<&DefensePolicy> {
        self.policies.iter().find(|p| p.name() == name)
    }

    pub fn honey_token(&self) -> Option<(&str, &str, &str)> {
        match self.get("HoneyToken") {
            Some(DefensePolicy::HoneyToken {
                username,
                domain,
                password,
            }) => Some((username, domain, password)),
            _ => None,
        }
    }

    pub fn allowlist_monitor(&self) -> Option<(&BTreeSet<String>, MonitorAction)> {
        match self.get("AllowlistMonitor") {
            Some(DefensePolicy::AllowlistMonitor {
                trusted_full_paths,
                action,
            }) => Some((trusted_full_paths, *action)),
            _ => None,
        }
    }

    pub fn lsass_api_hook(&self) -> Option<&DefensePolicy> {
        self.get("LsassApiHook")
    }

    pub fn alpc_block(&self) -> Option<(bool, IntegrityLevel)> {
        match self.get("AlpcBlock") {
            Some(DefensePolicy::AlpcBlock {
                restore_on_logout,
                required_integrity,
            }) => Some((*restore_on_logout, *required_integrity)),
            _ => None,
        }
    }

    pub fn signature_scan(&self) -> Option<&BTreeSet<String>> {
        match self.get("SignatureScan") {
            Some(DefensePolicy::SignatureScan { keywords }) => Some(keywords),
            _ => None,
        }
    }

    pub fn debug_privilege_allowed_groups(&self) -> Option<&BTreeSet<Group>> {
        match self.get("DebugPrivilegeRestriction") {
            Some(DefensePolicy::DebugPrivilegeRestriction { allowed_groups }) => {
                Some(allowed_groups)
            }
            _ => None,
        }
    }

    pub fn protected_users_contains(&self, username: &str) -> bool {
        match self.get("ProtectedUsers") {
            Some(DefensePolicy::ProtectedUsers { members }) => members.contains(username),
            _ => false,
        }
    }

    pub fn restricted_admin_rdp(&self) -> bool {
        self.get("RestrictedAdminRdp").is_some()
    }

    pub fn disable_lm_ntlm(&self) -> bool {
        self.get("DisableLmNtlm").is_some()
    }
}

/// What a detection event reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DetectionKind {
    ProcessWarning,
    ApiCallBlocked,
    DecoyLogonAttempt,
    GateDenied,
    SignatureHit,
}

/// One observable defense reaction. `seq` is assigned when the event is
/// recorded on the world log and increases strictly within a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DetectionEvent {
    pub seq: u64,
    pub policy: &'static str,
    pub subject_pid: Option<Pid>,
    pub subject_image: String,
    pub kind: DetectionKind,
    pub message: String,
}

impl DetectionEvent {
    fn draft(
        policy: &'static str,
        kind: DetectionKind,
        subject_pid: Option<Pid>,
        subject_image: &str,
        message: String,
    ) -> DetectionEvent {
        DetectionEvent {
            seq: 0,
            policy,
            subject_pid,
            subject_image: subject_image.to_string(),
            kind,
            message,
        }
    }
}

/// Outcome of a policy consultation. Deny and Terminate always carry the
/// event explaining them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Allow,
    Warn(DetectionEvent),
    Deny(DetectionEvent),
    Terminate(DetectionEvent),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InstallError {
    #[error("duplicate policy {0}")]
    DuplicatePolicy(&'static str),
}

/// Install a set of policies into a world. Registration happens before any
/// side effect, so effectful installs (the honey-token agent spawn) are
/// themselves evaluated against the full set.
pub fn install(world: &mut World, policies: Vec<DefensePolicy>) -> Result<(), InstallError> {
    let mut seen: BTreeSet<&'static str> = world
        .policies()
        .policies()
        .iter()
        .map(|p| p.name())
        .collect();
    for policy in &policies {
        if !seen.insert(policy.name()) {
            return Err(InstallError::DuplicatePolicy(policy.name()));
        }
    }

    world.extend_policies(policies.clone());

    for policy in &policies {
        match policy {
            DefensePolicy::WDigestDisable => {
                world.store_mut().set_use_logon_credential(false);
            }
            DefensePolicy::CredentialGuard => {
                world.store_mut().set_credential_guard(true);
            }
            DefensePolicy::PplEnable => {
                if let Some(lsass) = world.lsass_pid() {
                    world.set_protection(lsass, Protection::Ppl);
                }
            }
            DefensePolicy::AlpcBlock {
                required_integrity, ..
            } => {
                world.install_alpc_gate(TokenGate {
                    required_integrity: *required_integrity,
                });
            }
            DefensePolicy::ProtectedUsers { members } => {
                for member in members {
                    world.add_group(member, Group::ProtectedUsers);
                }
            }
            DefensePolicy::HoneyToken {
                username,
                domain,
                password,
            } => {
                world.create_process_with_logon(username, domain, password, DECOY_AGENT_PATH);
            }
            _ => {}
        }
    }
    Ok(())
}

/// End the interactive session. An unrestored ALPC gate at this point locks
/// the system out of further logins.
pub fn logout(world: &mut World) {
    if !world.alpc_gate_installed() {
        return;
    }
    match world.policies().alpc_block() {
        Some((true, _)) => world.remove_alpc_gate(),
        Some((false, _)) => world.mark_locked_out(),
        None => {}
    }
}

fn contains_ci(haystack: &str, needle: &str) -> bool {
    haystack.to_lowercase().contains(&needle.to_lowercase())
}

/// Evaluate a process-creation event. Signature scanning reacts first; the
/// allowlist monitor sees only processes the scanner let live.
pub fn on_process_created(policies: &PolicySet, event: &ProcessCreated) -> Verdict {
    if let Some(keywords) = policies.signature_scan() {
        let hit = keywords.iter().find(|k| {
            contains_ci(&event.image_name, k)
                || event.content_keywords.iter().any(|w| contains_ci(w, k))
        });
        if let Some(keyword) = hit {
            return Verdict::Terminate(DetectionEvent::draft(
                "SignatureScan",
                DetectionKind::SignatureHit,
                Some(event.pid),
                &event.image_name,
                format!("image matched signature keyword {keyword:?}"),
            ));
        }
    }

    if let Some((trusted, action)) = policies.allowlist_monitor() {
        if !trusted.contains(&event.image_path) {
            let draft = DetectionEvent::draft(
                "AllowlistMonitor",
                DetectionKind::ProcessWarning,
                Some(event.pid),
                &event.image_name,
                format!(
                    "image path {:?} is not in the trusted list",
                    event.image_path
                ),
            );
            return match action {
                MonitorAction::Warn => Verdict::Warn(draft),
                MonitorAction::Terminate => Verdict::Terminate(draft),
            };
        }
    }

    Verdict::Allow
}

/// Evaluate an API call against the installed hook. The hook fires before
/// the credential read behind the call completes, so a terminated caller
/// yields nothing.
pub fn on_api_call(
    policies: &PolicySet,
    event: &ApiCallEvent,
    caller_image_path: &str,
    prompt_answer: Option<PromptAnswer>,
) -> Verdict {
    let Some(DefensePolicy::LsassApiHook {
        watched_functions,
        action,
        trusted_paths,
        ..
    }) = policies.lsass_api_hook()
    else {
        return Verdict::Allow;
    };
    if !watched_functions.contains(&event.function) {
        return Verdict::Allow;
    }
    if trusted_paths.contains(caller_image_path) {
        return Verdict::Allow;
    }

    let terminate = match action {
        HookAction::Terminate => true,
        // the paper's interactive permission prompt, answered from the
        // scenario; an unanswered prompt counts as refusal
        HookAction::Prompt => !matches!(prompt_answer, Some(PromptAnswer::Allow)),
    };
    if terminate {
        Verdict::Terminate(DetectionEvent::draft(
            "LsassApiHook",
            DetectionKind::ApiCallBlocked,
            Some(event.caller_pid),
            caller_image_path,
            format!("suspicious call of {} blocked", event.function),
        ))
    } else {
        Verdict::Allow
    }
}

/// Evaluate an authentication attempt against the honey-token tripwire.
/// Any attempt under the decoy username is the sign of an intruder.
pub fn on_decoy_logon(policies: &PolicySet, username: &str, domain: &str) -> Verdict {
    match policies.honey_token() {
        Some((decoy_user, _, _)) if decoy_user == username => Verdict::Warn(DetectionEvent::draft(
            "HoneyToken",
            DetectionKind::DecoyLogonAttempt,
            None,
            "lsass.exe",
            format!("logon attempt with decoy account {username:?} (domain {domain:?})"),
        )),
        _ => Verdict::Allow,
    }
}

/// Evaluate an ALPC connect against an installed gate.
pub fn on_alpc_connect(
    gate: Option<&TokenGate>,
    fields: &TokenGateFields,
    caller: Pid,
    caller_image: &str,
) -> Verdict {
    match gate {
        None => Verdict::Allow,
        Some(gate) if gate.allows(fields) => Verdict::Allow,
        Some(_) => Verdict::Deny(DetectionEvent::draft(
            "AlpcBlock",
            DetectionKind::GateDenied,
            Some(caller),
            caller_image,
            format!(
                "SAM ALPC connection denied (integrity index {}, privilege enabled {})",
                fields.integrity_level_index, fields.privilege_enabled
            ),
        )),
    }
}

/// Module loads of watched libraries observed by the installed hook, derived
/// from the world event log. Interception itself happens at function calls.
pub fn hook_observed_module_loads(world: &World) -> Vec<(Pid, String)> {
    let Some(DefensePolicy::LsassApiHook {
        watched_modules, ..
    }) = world.policies().lsass_api_hook()
    else {
        return Vec::new();
    };
    world
        .events()
        .iter()
        .filter_map(|e| match e {
            crate::procmodel::WorldEvent::ModuleLoaded { pid, module }
                if watched_modules.contains(module) =>
            {
                Some((*pid, module.clone()))
            }
            _ => None,
        })
        .collect()
}
