//! The credential-dumping techniques as explicit step traces over the
//! process and credential models: two mimikatz commands plus three
//! dump-and-parse tools.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::authcore::NtHash;
use crate::defenses::KNOWN_BAD_KEYWORDS;
use crate::procmodel::{
    AccessKind, ApiFunction, ApiOutcome, ConnectOutcome, DenyReason, IntegrityLevel, OpenOutcome,
    Pid, PrivilegeOutcome, SAM_ALPC_PORT, SE_DEBUG_PRIVILEGE,
};
use crate::world::World;

/// The modeled credential-dumping techniques.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TechniqueId {
    MimikatzSekurlsa,
    MimikatzLsaDumpInject,
    ComsvcsMiniDump,
    ProcdumpMa,
    TaskmgrDump,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown technique {0:?}")]
pub struct UnknownTechnique(pub String);

impl TechniqueId {
    pub const ALL: [TechniqueId; 5] = [
        TechniqueId::MimikatzSekurlsa,
        TechniqueId::MimikatzLsaDumpInject,
        TechniqueId::ComsvcsMiniDump,
        TechniqueId::ProcdumpMa,
        TechniqueId::TaskmgrDump,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            TechniqueId::MimikatzSekurlsa => "mimikatz_sekurlsa",
            TechniqueId::MimikatzLsaDumpInject => "mimikatz_lsadump_inject",
            TechniqueId::ComsvcsMiniDump => "comsvcs_minidump",
            TechniqueId::ProcdumpMa => "procdump_ma",
            TechniqueId::TaskmgrDump => "taskmgr_dump",
        }
    }

    /// Console-style display name of the technique.
    pub fn display(&self) -> &'static str {
        match self {
            TechniqueId::MimikatzSekurlsa => "sekurlsa::logonpasswords",
            TechniqueId::MimikatzLsaDumpInject => "lsadump::lsa /inject",
            TechniqueId::ComsvcsMiniDump => "comsvcs.dll MiniDump",
            TechniqueId::ProcdumpMa => "procdump -ma",
            TechniqueId::TaskmgrDump => "taskmgr dump",
        }
    }

    pub fn is_mimikatz(&self) -> bool {
        matches!(
            self,
            TechniqueId::MimikatzSekurlsa | TechniqueId::MimikatzLsaDumpInject
        )
    }
}

impl std::str::FromStr for TechniqueId {
    type Err = UnknownTechnique;

    fn from_str(s: &str) -> Result<TechniqueId, UnknownTechnique> {
        TechniqueId::ALL
            .into_iter()
            .find(|t| t.id() == s)
            .ok_or_else(|| UnknownTechnique(s.to_string()))
    }
}

impl fmt::Display for TechniqueId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// What an attacker binary looks like on disk: its path and the keywords a
/// scanner could recognize in it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BinaryProfile {
    pub image_path: String,
    pub signature_keywords: BTreeSet<String>,
    pub obfuscated: bool,
}

impl BinaryProfile {
    pub fn new(image_path: &str, keywords: impl IntoIterator<Item = String>) -> BinaryProfile {
        BinaryProfile {
            image_path: image_path.to_string(),
            signature_keywords: keywords.into_iter().collect(),
            obfuscated: false,
        }
    }

    /// The stock binary for a technique: a recognizable mimikatz build, the
    /// stock system tools for the dump paths.
    pub fn default_for(technique: TechniqueId) -> BinaryProfile {
        match technique {
            TechniqueId::MimikatzSekurlsa | TechniqueId::MimikatzLsaDumpInject => {
                BinaryProfile::new("C:\\tools\\mimikatz.exe", ["mimikatz".to_string()])
            }
            TechniqueId::ComsvcsMiniDump => {
                BinaryProfile::new("C:\\Windows\\System32\\rundll32.exe", [])
            }
            TechniqueId::ProcdumpMa => BinaryProfile::new("C:\\tools\\procdump.exe", []),
            TechniqueId::TaskmgrDump => {
                BinaryProfile::new("C:\\Windows\\System32\\Taskmgr.exe", [])
            }
        }
    }
}

/// Rebuild the binary under a different name with the known-bad keywords
/// stripped. Behavior is unchanged; only what scanners can see.
pub fn obfuscate(profile: &BinaryProfile) -> BinaryProfile {
    let (dir, file) = match profile.image_path.rsplit_once('\\') {
        Some((dir, file)) => (Some(dir), file),
        None => (None, profile.image_path.as_str()),
    };
    let (stem, ext) = match file.rsplit_once('.') {
        Some((stem, ext)) => (stem, Some(ext)),
        None => (file, None),
    };

    let mut scrubbed = stem.to_string();
    for keyword in KNOWN_BAD_KEYWORDS {
        scrubbed = strip_ci(&scrubbed, keyword);
    }
    if scrubbed.is_empty() {
        scrubbed = "update".to_string();
    }

    let mut image_path = String::new();
    if let Some(dir) = dir {
        image_path.push_str(dir);
        image_path.push('\\');
    }
    image_path.push_str(&scrubbed);
    if let Some(ext) = ext {
        image_path.push('.');
        image_path.push_str(ext);
    }

    let signature_keywords = profile
        .signature_keywords
        .iter()
        .filter(|w| {
            !KNOWN_BAD_KEYWORDS
                .iter()
                .any(|bad| w.to_lowercase().contains(bad))
        })
        .cloned()
        .collect();

    BinaryProfile {
        image_path,
        signature_keywords,
        obfuscated: true,
    }
}

fn strip_ci(haystack: &str, needle: &str) -> String {
    let mut out = haystack.to_string();
    loop {
        let lower = out.to_lowercase();
        match lower.find(&needle.to_lowercase()) {
            Some(pos) => out.replace_range(pos..pos + needle.len(), ""),
            None => return out,
        }
    }
}

/// Spawn the attacker process described by a profile. The profile's content
/// keywords ride along on the creation event for signature scanning.
pub fn spawn_attacker(world: &mut World, profile: &BinaryProfile, user: &str) -> Pid {
    world.spawn_with_keywords(
        &profile.image_path,
        user,
        profile.signature_keywords.clone(),
    )
}

/// Where a credential record was recovered from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RecordSource {
    LogonSession,
    Sam,
    DumpFile,
}

/// One recovered credential.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CredentialRecord {
    pub username: String,
    pub domain: String,
    pub plaintext: Option<String>,
    pub nt_hash: NtHash,
    pub rid: Option<u32>,
    pub source: RecordSource,
    /// 0-based index in output order.
    pub position: usize,
    /// Whether the record came from a planted decoy session.
    pub decoy: bool,
}

impl CredentialRecord {
    pub fn has_secret(&self) -> bool {
        self.plaintext.is_some() || self.nt_hash.is_present()
    }
}

/// Why an attack stopped short.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BlockReason {
    NoDebugPrivilege,
    ProtectedProcess,
    GateClosed,
    /// Task-manager dumps need a privileged-mode (High integrity) caller.
    NotPrivilegedMode,
}

impl From<DenyReason> for BlockReason {
    fn from(reason: DenyReason) -> BlockReason {
        match reason {
            DenyReason::NoDebugPrivilege => BlockReason::NoDebugPrivilege,
            DenyReason::ProtectedProcess => BlockReason::ProtectedProcess,
        }
    }
}

impl fmt::Display for BlockReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BlockReason::NoDebugPrivilege => "NoDebugPrivilege",
            BlockReason::ProtectedProcess => "ProtectedProcess",
            BlockReason::GateClosed => "GateClosed",
            BlockReason::NotPrivilegedMode => "NotPrivilegedMode",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AttackStatus {
    Succeeded,
    Partial,
    Blocked(BlockReason),
    DetectedAndTerminated,
}

impl fmt::Display for AttackStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackStatus::Succeeded => f.write_str("Succeeded"),
            AttackStatus::Partial => f.write_str("Partial"),
            AttackStatus::Blocked(reason) => write!(f, "Blocked({reason})"),
            AttackStatus::DetectedAndTerminated => f.write_str("DetectedAndTerminated"),
        }
    }
}

/// One step of an attack trace. A trace is always a prefix of the
/// technique's nominal step list, cut at the first denying defense.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum TraceStep {
    PrivilegeDebug,
    OpenProcess(AccessKind),
    LoadModule(String),
    ApiCall(ApiFunction),
    ReadSessions,
    SamEnumerate,
    WriteDump,
    ParseDump,
}

impl fmt::Display for TraceStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceStep::PrivilegeDebug => f.write_str("PrivilegeDebug"),
            TraceStep::OpenProcess(AccessKind::Read) => f.write_str("OpenProcess(lsass)"),
            TraceStep::OpenProcess(AccessKind::Dump) => f.write_str("OpenProcess(lsass, Dump)"),
            TraceStep::LoadModule(m) => write!(f, "LoadModule({m})"),
            TraceStep::ApiCall(function) => write!(f, "ApiCall({function})"),
            TraceStep::ReadSessions => f.write_str("ReadSessions"),
            TraceStep::SamEnumerate => f.write_str("SamEnumerate"),
            TraceStep::WriteDump => f.write_str("WriteDump"),
            TraceStep::ParseDump => f.write_str("ParseDump"),
        }
    }
}

/// Domain header of a SAM enumeration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SamDomain {
    pub name: String,
    pub sid: String,
}

/// Outcome of one technique run: status, recovered records, and the ordered
/// step trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AttackResult {
    pub technique: TechniqueId,
    pub status: AttackStatus,
    pub records: Vec<CredentialRecord>,
    pub trace: Vec<TraceStep>,
    pub sam_domain: Option<SamDomain>,
    pub dump_artifact: Option<String>,
}

impl AttackResult {
    fn stopped(
        technique: TechniqueId,
        status: AttackStatus,
        trace: Vec<TraceStep>,
    ) -> AttackResult {
        AttackResult {
            technique,
            status,
            records: Vec::new(),
            trace,
            sam_domain: None,
            dump_artifact: None,
        }
    }

    /// Result for an attacker that never ran: its process was terminated at
    /// spawn by a launch-time defense.
    pub fn terminated_at_spawn(technique: TechniqueId) -> AttackResult {
        AttackResult::stopped(technique, AttackStatus::DetectedAndTerminated, Vec::new())
    }

    /// Count of real (non-decoy) records carrying a secret: the credential
    /// yield of the run.
    pub fn credential_yield(&self) -> usize {
        self.records
            .iter()
            .filter(|r| !r.decoy && r.has_secret())
            .count()
    }
}

/// Completed reads classify as Succeeded when anything secret came back,
/// Partial when records exist but every secret was hidden.
fn classify(records: &[CredentialRecord]) -> AttackStatus {
    if records.is_empty() || records.iter().any(CredentialRecord::has_secret) {
        AttackStatus::Succeeded
    } else {
        AttackStatus::Partial
    }
}

/// Run one technique with an already-spawned attacker process.
pub fn execute(world: &mut World, technique: TechniqueId, attacker: Pid) -> AttackResult {
    let result = match technique {
        TechniqueId::MimikatzSekurlsa => sekurlsa_logonpasswords(world, attacker),
        TechniqueId::MimikatzLsaDumpInject => lsadump_lsa_inject(world, attacker),
        tool => memory_dump(world, attacker, tool),
    };
    debug_assert!(
        result.records.is_empty()
            || matches!(
                result.status,
                AttackStatus::Succeeded | AttackStatus::Partial
            )
    );
    result
}

fn require_lsass(world: &World) -> Pid {
    world
        .lsass_pid()
        .expect("attack requires a live lsass process in the world")
}

/// `sekurlsa::logonpasswords`: elevate, open LSASS, read the session store.
/// Records mirror store order, so planted decoys come first.
pub fn sekurlsa_logonpasswords(world: &mut World, attacker: Pid) -> AttackResult {
    let technique = TechniqueId::MimikatzSekurlsa;
    let lsass = require_lsass(world);
    let mut trace = vec![TraceStep::PrivilegeDebug];

    if world
        .enable_privilege(attacker, SE_DEBUG_PRIVILEGE)
        .expect("attacker alive")
        == PrivilegeOutcome::Denied
    {
        return AttackResult::stopped(
            technique,
            AttackStatus::Blocked(BlockReason::NoDebugPrivilege),
            trace,
        );
    }

    trace.push(TraceStep::OpenProcess(AccessKind::Read));
    let handle = match world
        .open_process(attacker, lsass, AccessKind::Read)
        .expect("both processes alive")
    {
        OpenOutcome::Handle(handle) => handle,
        OpenOutcome::Denied(reason) => {
            return AttackResult::stopped(technique, AttackStatus::Blocked(reason.into()), trace)
        }
    };

    // mimikatz opens its LSA interaction here; an installed hook intercepts
    // the call before the credential read completes
    if world.record_api_call(
        attacker,
        ApiFunction::LsaOpenPolicy,
        "PolicyDnsDomainInformation",
    ) == ApiOutcome::Terminated
    {
        return AttackResult::stopped(technique, AttackStatus::DetectedAndTerminated, trace);
    }

    trace.push(TraceStep::ReadSessions);
    let records: Vec<CredentialRecord> = world
        .read_logon_sessions(&handle)
        .into_iter()
        .enumerate()
        .map(|(position, session)| CredentialRecord {
            username: session.username,
            domain: session.domain,
            plaintext: session.wdigest_plaintext,
            nt_hash: session.cached_nt_hash,
            rid: None,
            source: RecordSource::LogonSession,
            position,
            decoy: session.is_decoy,
        })
        .collect();

    AttackResult {
        technique,
        status: classify(&records),
        records,
        trace,
        sam_domain: None,
        dump_artifact: None,
    }
}

/// `lsadump::lsa /inject`: elevate, open LSASS, connect to the SAM server
/// through its libraries, enumerate every account hash. Decoys never appear:
/// they exist only in the session store.
pub fn lsadump_lsa_inject(world: &mut World, attacker: Pid) -> AttackResult {
    let technique = TechniqueId::MimikatzLsaDumpInject;
    let lsass = require_lsass(world);
    let mut trace = vec![TraceStep::PrivilegeDebug];

    if world
        .enable_privilege(attacker, SE_DEBUG_PRIVILEGE)
        .expect("attacker alive")
        == PrivilegeOutcome::Denied
    {
        return AttackResult::stopped(
            technique,
            AttackStatus::Blocked(BlockReason::NoDebugPrivilege),
            trace,
        );
    }

    trace.push(TraceStep::OpenProcess(AccessKind::Read));
    if let OpenOutcome::Denied(reason) = world
        .open_process(attacker, lsass, AccessKind::Read)
        .expect("both processes alive")
    {
        return AttackResult::stopped(technique, AttackStatus::Blocked(reason.into()), trace);
    }

    trace.push(TraceStep::LoadModule("samlib.dll".to_string()));
    world
        .load_module(attacker, "samlib.dll")
        .expect("attacker alive");

    trace.push(TraceStep::ApiCall(ApiFunction::LsaOpenPolicy));
    if world.record_api_call(
        attacker,
        ApiFunction::LsaOpenPolicy,
        "PolicyDnsDomainInformation",
    ) == ApiOutcome::Terminated
    {
        return AttackResult::stopped(technique, AttackStatus::DetectedAndTerminated, trace);
    }

    trace.push(TraceStep::ApiCall(ApiFunction::SamConnect));
    let connection = match world
        .alpc_connect(attacker, SAM_ALPC_PORT)
        .expect("SAM port registered by lsass")
    {
        ConnectOutcome::Connected(connection) => connection,
        ConnectOutcome::GateDenied => {
            return AttackResult::stopped(
                technique,
                AttackStatus::Blocked(BlockReason::GateClosed),
                trace,
            )
        }
        ConnectOutcome::CallerTerminated => {
            return AttackResult::stopped(technique, AttackStatus::DetectedAndTerminated, trace)
        }
    };

    let domain = SamDomain {
        name: world.sam().domain_name.clone(),
        sid: world.sam().domain_sid.clone(),
    };
    trace.push(TraceStep::ApiCall(ApiFunction::SamOpenDomain));
    if world.record_api_call(attacker, ApiFunction::SamOpenDomain, &domain.name)
        == ApiOutcome::Terminated
    {
        return AttackResult::stopped(technique, AttackStatus::DetectedAndTerminated, trace);
    }

    trace.push(TraceStep::SamEnumerate);
    let records: Vec<CredentialRecord> = world
        .sam_enumerate(&connection)
        .into_iter()
        .enumerate()
        .map(|(position, entry)| CredentialRecord {
            username: entry.username,
            domain: domain.name.clone(),
            plaintext: None,
            nt_hash: entry.nt_hash,
            rid: Some(entry.rid),
            source: RecordSource::Sam,
            position,
            decoy: false,
        })
        .collect();

    AttackResult {
        technique,
        status: classify(&records),
        records,
        trace,
        sam_domain: Some(domain),
        dump_artifact: None,
    }
}

/// Dump LSASS memory with one of the three dump tools, then parse the dump:
/// the parse yields the session store as it stood at dump time.
pub fn memory_dump(world: &mut World, attacker: Pid, tool: TechniqueId) -> AttackResult {
    assert!(
        matches!(
            tool,
            TechniqueId::ComsvcsMiniDump | TechniqueId::ProcdumpMa | TechniqueId::TaskmgrDump
        ),
        "memory_dump dispatches dump tools only"
    );
    let lsass = require_lsass(world);
    let mut trace = Vec::new();

    if tool == TechniqueId::TaskmgrDump {
        // "privileged mode": an elevated task manager. It enables the debug
        // privilege implicitly (no separate console step), still subject to
        // the user-level restriction policy.
        let integrity = world
            .process(attacker)
            .expect("attacker alive")
            .token
            .integrity_level;
        if integrity != IntegrityLevel::High {
            return AttackResult::stopped(
                tool,
                AttackStatus::Blocked(BlockReason::NotPrivilegedMode),
                trace,
            );
        }
        let _ = world.enable_privilege(attacker, SE_DEBUG_PRIVILEGE);
    } else {
        trace.push(TraceStep::PrivilegeDebug);
        if world
            .enable_privilege(attacker, SE_DEBUG_PRIVILEGE)
            .expect("attacker alive")
            == PrivilegeOutcome::Denied
        {
            return AttackResult::stopped(
                tool,
                AttackStatus::Blocked(BlockReason::NoDebugPrivilege),
                trace,
            );
        }
    }

    trace.push(TraceStep::OpenProcess(AccessKind::Dump));
    let handle = match world
        .open_process(attacker, lsass, AccessKind::Dump)
        .expect("both processes alive")
    {
        OpenOutcome::Handle(handle) => handle,
        OpenOutcome::Denied(reason) => {
            return AttackResult::stopped(tool, AttackStatus::Blocked(reason.into()), trace)
        }
    };

    trace.push(TraceStep::WriteDump);
    let short_name = match tool {
        TechniqueId::ComsvcsMiniDump => "comsvcs",
        TechniqueId::ProcdumpMa => "procdump",
        _ => "taskmgr",
    };
    let artifact = format!("lsass_{}_{}.dmp", short_name, world.artifacts().len() + 1);
    if world.record_api_call(attacker, ApiFunction::MiniDumpWriteDump, &artifact)
        == ApiOutcome::Terminated
    {
        return AttackResult::stopped(tool, AttackStatus::DetectedAndTerminated, trace);
    }
    world.record_artifact(artifact.clone());

    trace.push(TraceStep::ParseDump);
    let records: Vec<CredentialRecord> = world
        .read_logon_sessions(&handle)
        .into_iter()
        .enumerate()
        .map(|(position, session)| CredentialRecord {
            username: session.username,
            domain: session.domain,
            plaintext: session.wdigest_plaintext,
            nt_hash: session.cached_nt_hash,
            rid: None,
            source: RecordSource::DumpFile,
            position,
            decoy: session.is_decoy,
        })
        .collect();

    AttackResult {
        technique: tool,
        status: classify(&records),
        records,
        trace,
        sam_domain: None,
        dump_artifact: Some(artifact),
    }
}
