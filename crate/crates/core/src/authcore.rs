//! LSA/SAM credential state: the account database, password hashing, the
//! login flow, and the ordered logon-session store that dump techniques read.

use std::fmt;

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::defenses::{self, Verdict};
use crate::md4;
use crate::procmodel::{AlpcConnection, ProcessHandle};
use crate::world::World;

/// An NT hash: MD4 over the UTF-16LE encoding of a password. Accounts with
/// no password set carry `Absent`, rendered as a blank field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NtHash {
    Absent,
    Present([u8; 16]),
}

impl NtHash {
    pub fn is_present(&self) -> bool {
        matches!(self, NtHash::Present(_))
    }

    /// Lowercase hex rendering, 32 characters when present.
    pub fn hex(&self) -> Option<String> {
        match self {
            NtHash::Absent => None,
            NtHash::Present(bytes) => Some(bytes.iter().map(|b| format!("{b:02x}")).collect()),
        }
    }
}

impl fmt::Display for NtHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.hex() {
            Some(hex) => f.write_str(&hex),
            None => Ok(()),
        }
    }
}

impl Serialize for NtHash {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self.hex() {
            Some(hex) => serializer.serialize_some(&hex),
            None => serializer.serialize_none(),
        }
    }
}

/// Compute the NT hash of a password. Deterministic across runs and
/// platforms; the empty password hashes like any other string.
pub fn nt_hash_of(password: &str) -> NtHash {
    let bytes: Vec<u8> = password.encode_utf16().flat_map(u16::to_le_bytes).collect();
    NtHash::Present(md4::digest(&bytes))
}

/// Group tags carried by SAM accounts. Referenced by privilege and
/// session-creation policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    LocalAdministrators,
    ProtectedUsers,
}

impl Group {
    pub const ALL: [Group; 2] = [Group::LocalAdministrators, Group::ProtectedUsers];

    pub fn parse(s: &str) -> Option<Group> {
        match s {
            "LocalAdministrators" => Some(Group::LocalAdministrators),
            "ProtectedUsers" => Some(Group::ProtectedUsers),
            _ => None,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Group::LocalAdministrators => f.write_str("LocalAdministrators"),
            Group::ProtectedUsers => f.write_str("ProtectedUsers"),
        }
    }
}

/// A SAM account. LM hashes are modeled but always absent in the default
/// fixtures; the field exists so the rendered records carry a blank LM line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UserAccount {
    pub rid: u32,
    pub username: String,
    pub nt_hash: NtHash,
    pub lm_hash: NtHash,
    pub groups: std::collections::BTreeSet<Group>,
}

impl UserAccount {
    /// Account created from a password, so `nt_hash = nt_hash_of(password)`.
    pub fn with_password(rid: u32, username: &str, password: &str) -> UserAccount {
        UserAccount {
            rid,
            username: username.to_string(),
            nt_hash: nt_hash_of(password),
            lm_hash: NtHash::Absent,
            groups: Default::default(),
        }
    }

    /// Account with no password set (blank NTLM field).
    pub fn without_password(rid: u32, username: &str) -> UserAccount {
        UserAccount {
            rid,
            username: username.to_string(),
            nt_hash: NtHash::Absent,
            lm_hash: NtHash::Absent,
            groups: Default::default(),
        }
    }

    pub fn in_group(mut self, group: Group) -> UserAccount {
        self.groups.insert(group);
        self
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SamError {
    #[error("duplicate rid {0}")]
    DuplicateRid(u32),
    #[error("duplicate username {0:?}")]
    DuplicateUsername(String),
}

/// One entry of a SAM enumeration, in database order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SamEntry {
    pub rid: u32,
    pub username: String,
    pub nt_hash: NtHash,
}

/// The persistent account store. Accounts keep their insertion order, which
/// is the order every enumeration yields them in.
#[derive(Debug, Clone, Serialize)]
pub struct SamDatabase {
    pub domain_name: String,
    pub domain_sid: String,
    accounts: Vec<UserAccount>,
}

impl SamDatabase {
    pub fn new(domain_name: &str, domain_sid: &str) -> SamDatabase {
        SamDatabase {
            domain_name: domain_name.to_string(),
            domain_sid: domain_sid.to_string(),
            accounts: Vec::new(),
        }
    }

    /// Insert an account, keeping rid and username lookups bijective.
    pub fn insert(&mut self, account: UserAccount) -> Result<(), SamError> {
        if self.account_by_rid(account.rid).is_some() {
            return Err(SamError::DuplicateRid(account.rid));
        }
        if self.account_by_username(&account.username).is_some() {
            return Err(SamError::DuplicateUsername(account.username));
        }
        self.accounts.push(account);
        Ok(())
    }

    pub fn account_by_rid(&self, rid: u32) -> Option<&UserAccount> {
        self.accounts.iter().find(|a| a.rid == rid)
    }

    pub fn account_by_username(&self, username: &str) -> Option<&UserAccount> {
        self.accounts.iter().find(|a| a.username == username)
    }

    pub(crate) fn account_by_username_mut(&mut self, username: &str) -> Option<&mut UserAccount> {
        self.accounts.iter_mut().find(|a| a.username == username)
    }

    pub fn accounts(&self) -> &[UserAccount] {
        &self.accounts
    }

    /// Every account as `(rid, username, nt_hash)` in database order. Decoy
    /// users never appear here: decoys live only in the credential store.
    pub fn enumerate(&self) -> Vec<SamEntry> {
        self.accounts
            .iter()
            .map(|a| SamEntry {
                rid: a.rid,
                username: a.username.clone(),
                nt_hash: a.nt_hash,
            })
            .collect()
    }
}

/// How a logon session came to exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogonOrigin {
    Interactive,
    SpawnedWithLogon,
    Service,
    RemoteRdp,
}

/// An in-memory logon session inside the modeled LSASS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LogonSession {
    pub session_id: u64,
    pub username: String,
    pub domain: String,
    pub origin: LogonOrigin,
    pub wdigest_plaintext: Option<String>,
    pub cached_nt_hash: NtHash,
    pub is_decoy: bool,
}

impl LogonSession {
    pub(crate) fn new_real(
        session_id: u64,
        username: &str,
        domain: &str,
        origin: LogonOrigin,
        wdigest_plaintext: Option<String>,
        cached_nt_hash: NtHash,
    ) -> LogonSession {
        debug_assert!(!matches!(origin, LogonOrigin::SpawnedWithLogon));
        LogonSession {
            session_id,
            username: username.to_string(),
            domain: domain.to_string(),
            origin,
            wdigest_plaintext,
            cached_nt_hash,
            is_decoy: false,
        }
    }

    pub(crate) fn new_decoy(
        session_id: u64,
        username: &str,
        domain: &str,
        password: &str,
    ) -> LogonSession {
        LogonSession {
            session_id,
            username: username.to_string(),
            domain: domain.to_string(),
            origin: LogonOrigin::SpawnedWithLogon,
            wdigest_plaintext: Some(password.to_string()),
            cached_nt_hash: nt_hash_of(password),
            is_decoy: true,
        }
    }

    pub fn has_secret(&self) -> bool {
        self.wdigest_plaintext.is_some() || self.cached_nt_hash.is_present()
    }
}

/// Ordered logon sessions, front = highest priority. Decoys always precede
/// real sessions; among decoys the newest comes first.
#[derive(Debug, Clone)]
pub struct CredentialStore {
    sessions: Vec<LogonSession>,
    use_logon_credential: bool,
    credential_guard: bool,
}

impl Default for CredentialStore {
    fn default() -> CredentialStore {
        CredentialStore {
            sessions: Vec::new(),
            use_logon_credential: true,
            credential_guard: false,
        }
    }
}

impl Serialize for CredentialStore {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr<'a> {
            sessions: &'a [LogonSession],
            use_logon_credential: bool,
            credential_guard: bool,
        }
        Repr {
            sessions: &self.sessions,
            use_logon_credential: self.use_logon_credential,
            credential_guard: self.credential_guard,
        }
        .serialize(serializer)
    }
}

impl CredentialStore {
    pub fn sessions(&self) -> &[LogonSession] {
        &self.sessions
    }

    pub fn use_logon_credential(&self) -> bool {
        self.use_logon_credential
    }

    pub fn credential_guard(&self) -> bool {
        self.credential_guard
    }

    pub(crate) fn set_credential_guard(&mut self, on: bool) {
        self.credential_guard = on;
    }

    /// Flip the WDigest switch. Turning it off scrubs plaintext from every
    /// non-decoy session so the store invariant holds for sessions that
    /// already existed.
    pub(crate) fn set_use_logon_credential(&mut self, on: bool) {
        self.use_logon_credential = on;
        if !on {
            for session in self.sessions.iter_mut().filter(|s| !s.is_decoy) {
                session.wdigest_plaintext = None;
            }
        }
    }

    pub(crate) fn push_real(&mut self, session: LogonSession) {
        debug_assert!(!session.is_decoy);
        self.sessions.push(session);
    }

    pub(crate) fn push_decoy(&mut self, session: LogonSession) {
        debug_assert!(session.is_decoy);
        self.sessions.insert(0, session);
    }

    /// Sessions in store order as an attacker reading LSASS memory sees
    /// them. With Credential Guard on, every secret in the view is redacted;
    /// the sessions themselves stay visible.
    pub fn read_sessions(&self) -> Vec<LogonSession> {
        self.sessions
            .iter()
            .map(|s| {
                let mut s = s.clone();
                if self.credential_guard {
                    s.wdigest_plaintext = None;
                    s.cached_nt_hash = NtHash::Absent;
                }
                s
            })
            .collect()
    }

    /// Ordering invariant: every decoy precedes every non-decoy.
    pub fn decoys_first(&self) -> bool {
        let first_real = self.sessions.iter().position(|s| !s.is_decoy);
        match first_real {
            None => true,
            Some(i) => self.sessions[i..].iter().all(|s| !s.is_decoy),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AuthError {
    #[error("unknown user {0:?}")]
    UnknownUser(String),
    #[error("bad password for {0:?}")]
    BadPassword(String),
    #[error("system locked out: ALPC settings were not restored before logout")]
    SystemLockedOut,
}

impl World {
    /// Hash-compare login. On success a session is appended after any decoys
    /// and its cached secrets reflect the active session-creation policies.
    pub fn authenticate(
        &mut self,
        username: &str,
        password: &str,
        origin: LogonOrigin,
    ) -> Result<&LogonSession, AuthError> {
        // The honey-token tripwire observes every attempt under the decoy
        // name, before any other outcome is decided.
        let domain = self.sam().domain_name.clone();
        let verdict = defenses::on_decoy_logon(self.policies(), username, &domain);
        if let Verdict::Warn(event) = verdict {
            self.record_detection(event);
        }

        if self.is_locked_out() {
            return Err(AuthError::SystemLockedOut);
        }

        let account = self
            .sam()
            .account_by_username(username)
            .ok_or_else(|| AuthError::UnknownUser(username.to_string()))?;
        if nt_hash_of(password) != account.nt_hash {
            return Err(AuthError::BadPassword(username.to_string()));
        }

        let protected = account.groups.contains(&Group::ProtectedUsers)
            || self.policies().protected_users_contains(username);
        let restricted_rdp =
            matches!(origin, LogonOrigin::RemoteRdp) && self.policies().restricted_admin_rdp();
        let plaintext_allowed =
            self.store().use_logon_credential() && !protected && !restricted_rdp;
        let hash_allowed = !protected && !self.policies().disable_lm_ntlm();

        let session = LogonSession::new_real(
            self.alloc_session_id(),
            username,
            &domain,
            origin,
            plaintext_allowed.then(|| password.to_string()),
            if hash_allowed {
                nt_hash_of(password)
            } else {
                NtHash::Absent
            },
        );
        self.store_mut().push_real(session);
        Ok(self.store().sessions().last().expect("session just pushed"))
    }

    /// Read the logon-session store through an open process handle. The
    /// handle is the proof that `open_process` succeeded against LSASS.
    pub fn read_logon_sessions(&self, handle: &ProcessHandle) -> Vec<LogonSession> {
        assert!(
            Some(handle.target()) == self.lsass_pid(),
            "handle does not target the lsass process"
        );
        self.store().read_sessions()
    }

    /// Enumerate SAM accounts through an established SAM ALPC connection.
    pub fn sam_enumerate(&self, conn: &AlpcConnection) -> Vec<SamEntry> {
        debug_assert_eq!(conn.port(), crate::procmodel::SAM_ALPC_PORT);
        self.sam().enumerate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_fixture::{default_world, MAINUSER_PASSWORD};
    use crate::world::World;

    // Frozen from an independent MD4 reference over UTF-16LE input; the
    // empty-string vector coincides with MD4 of the empty message.
    const NT_TEST: &str = "0cb6948805f797bf2a82807973b89537";
    const NT_EMPTY: &str = "31d6cfe0d16ae931b73c59d7e0c089c0";

    fn oracle_nt_hash(password: &str) -> String {
        use ::md4::{Digest, Md4};
        let bytes: Vec<u8> = password.encode_utf16().flat_map(u16::to_le_bytes).collect();
        let mut hasher = Md4::new();
        hasher.update(&bytes);
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    #[test]
    fn nt_hash_frozen_vectors() {
        assert_eq!(nt_hash_of("test").hex().unwrap(), NT_TEST);
        assert_eq!(nt_hash_of("").hex().unwrap(), NT_EMPTY);
        // cross-check the frozen values against the oracle crate
        assert_eq!(oracle_nt_hash("test"), NT_TEST);
        assert_eq!(oracle_nt_hash(""), NT_EMPTY);
    }

    #[test]
    fn nt_hash_rendering() {
        let hash = nt_hash_of("test");
        let hex = hash.hex().unwrap();
        assert_eq!(hex.len(), 32);
        assert!(hex
            .chars()
            .all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
        assert_eq!(hash.to_string(), hex);
        // absent hash renders blank, like DefaultAccount's NTLM line
        assert_eq!(NtHash::Absent.to_string(), "");
        assert!(NtHash::Absent.hex().is_none());
    }

    #[test]
    fn account_without_password_has_absent_hash() {
        let account = UserAccount::without_password(503, "DefaultAccount");
        assert_eq!(account.nt_hash, NtHash::Absent);
    }

    #[test]
    fn sam_rejects_duplicates() {
        let mut sam = SamDatabase::new("D", "S-1-5-21-1");
        sam.insert(UserAccount::with_password(1001, "alice", "pw"))
            .unwrap();
        let dup_rid = UserAccount::with_password(1001, "bob", "pw");
        assert_eq!(sam.insert(dup_rid), Err(SamError::DuplicateRid(1001)));
        let dup_name = UserAccount::with_password(1002, "alice", "pw");
        assert_eq!(
            sam.insert(dup_name),
            Err(SamError::DuplicateUsername("alice".into()))
        );
    }

    #[test]
    fn authenticate_success_appends_session() {
        let mut world = default_world();
        let session = world
            .authenticate("mainuser", MAINUSER_PASSWORD, LogonOrigin::Interactive)
            .unwrap();
        assert_eq!(session.username, "mainuser");
        assert_eq!(session.cached_nt_hash, nt_hash_of(MAINUSER_PASSWORD));
        assert_eq!(
            session.wdigest_plaintext.as_deref(),
            Some(MAINUSER_PASSWORD)
        );
        assert!(!session.is_decoy);
    }

    #[test]
    fn authenticate_wrong_password() {
        let mut world = default_world();
        let err = world
            .authenticate("mainuser", "nope", LogonOrigin::Interactive)
            .unwrap_err();
        assert_eq!(err, AuthError::BadPassword("mainuser".into()));
        assert!(world.store().sessions().is_empty());
    }

    #[test]
    fn authenticate_unknown_user() {
        let mut world = default_world();
        let err = world
            .authenticate("ghost", "pw", LogonOrigin::Interactive)
            .unwrap_err();
        assert_eq!(err, AuthError::UnknownUser("ghost".into()));
    }

    #[test]
    fn read_sessions_orders_decoys_first() {
        let mut world = default_world();
        world
            .authenticate("mainuser", MAINUSER_PASSWORD, LogonOrigin::Interactive)
            .unwrap();
        world.create_process_with_logon("test", "test", "test", "C:\\Windows\\System32\\agent.exe");
        let sessions = world.store().read_sessions();
        assert_eq!(sessions.len(), 2);
        assert!(sessions[0].is_decoy);
        assert_eq!(sessions[0].username, "test");
        assert!(!sessions[1].is_decoy);
    }

    #[test]
    fn credential_guard_redacts_view_only() {
        let mut world = default_world();
        world
            .authenticate("mainuser", MAINUSER_PASSWORD, LogonOrigin::Interactive)
            .unwrap();
        world.store_mut().set_credential_guard(true);
        let sessions = world.store().read_sessions();
        assert_eq!(sessions.len(), 1);
        assert!(sessions[0].wdigest_plaintext.is_none());
        assert_eq!(sessions[0].cached_nt_hash, NtHash::Absent);
        // the underlying session still holds its secrets
        assert!(world.store().sessions()[0].has_secret());
    }

    #[test]
    fn read_sessions_empty_store() {
        let world = default_world();
        assert!(world.store().read_sessions().is_empty());
    }

    #[test]
    fn sam_enumerate_fixture_order() {
        let world = default_world();
        let entries = world.sam().enumerate();
        let rids: Vec<u32> = entries.iter().map(|e| e.rid).collect();
        assert_eq!(rids, [503, 1001, 504]);
        assert_eq!(entries[0].nt_hash, NtHash::Absent);
        assert!(entries[1].nt_hash.is_present());
    }

    #[test]
    fn sam_enumerate_never_contains_decoys() {
        let mut world = default_world();
        world.create_process_with_logon("test", "test", "test", "C:\\Windows\\System32\\agent.exe");
        let entries = world.sam().enumerate();
        assert!(entries.iter().all(|e| e.username != "test"));
        assert_eq!(entries.len(), 3);
    }

    #[test]
    fn sam_enumerate_empty_database() {
        let sam = SamDatabase::new("EMPTY", "S-1-5-21-0");
        assert!(sam.enumerate().is_empty());
        let world = World::new(sam);
        assert!(world.sam().enumerate().is_empty());
    }

    #[test]
    fn wdigest_off_scrubs_existing_plaintext_but_not_decoys() {
        let mut world = default_world();
        world
            .authenticate("mainuser", MAINUSER_PASSWORD, LogonOrigin::Interactive)
            .unwrap();
        world.create_process_with_logon("test", "test", "test", "C:\\Windows\\System32\\agent.exe");
        world.store_mut().set_use_logon_credential(false);
        let sessions = world.store().read_sessions();
        assert!(sessions[0].is_decoy && sessions[0].wdigest_plaintext.is_some());
        assert!(sessions[1].wdigest_plaintext.is_none());
        // the cached hash survives the WDigest switch
        assert!(sessions[1].cached_nt_hash.is_present());
    }

    #[test]
    fn wdigest_off_suppresses_plaintext_at_login() {
        let mut world = default_world();
        world.store_mut().set_use_logon_credential(false);
        let session = world
            .authenticate("mainuser", MAINUSER_PASSWORD, LogonOrigin::Interactive)
            .unwrap();
        assert!(session.wdigest_plaintext.is_none());
        assert!(session.cached_nt_hash.is_present());
    }

    #[test]
    fn plaintext_never_persisted_in_sam() {
        let world = default_world();
        let serialized = serde_json::to_string(world.sam()).unwrap();
        assert!(!serialized.contains(MAINUSER_PASSWORD));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn hash_is_deterministic(password in ".{0,32}") {
                prop_assert_eq!(nt_hash_of(&password), nt_hash_of(&password));
            }

            #[test]
            fn hash_matches_reference_oracle(password in ".{0,32}") {
                prop_assert_eq!(
                    nt_hash_of(&password).hex().unwrap(),
                    oracle_nt_hash(&password)
                );
            }

            #[test]
            fn login_soundness(stored in ".{0,16}", entered in ".{0,16}") {
                let mut sam = SamDatabase::new("D", "S-1-5-21-1");
                sam.insert(UserAccount::with_password(1001, "u", &stored)).unwrap();
                let mut world = World::new(sam);
                let outcome = world.authenticate("u", &entered, LogonOrigin::Interactive);
                let hashes_match = nt_hash_of(&stored) == nt_hash_of(&entered);
                prop_assert_eq!(outcome.is_ok(), hashes_match);
            }

            #[test]
            fn sam_serialization_never_leaks_password(
                // non-hex characters guaranteed, so a hex digest cannot
                // accidentally contain the password as a substring
                password in "[g-z!@#%&]{4,16}"
            ) {
                let mut sam = SamDatabase::new("D", "S-1-5-21-1");
                sam.insert(UserAccount::with_password(1001, "u", &password)).unwrap();
                let serialized = serde_json::to_string(&sam).unwrap();
                prop_assert!(!serialized.contains(&password));
            }

            #[test]
            fn decoy_order_under_any_interleaving(ops in proptest::collection::vec(0u8..2, 0..12)) {
                let mut world = default_world();
                for (i, op) in ops.iter().enumerate() {
                    match op {
                        0 => {
                            let _ = world.authenticate(
                                "mainuser",
                                MAINUSER_PASSWORD,
                                LogonOrigin::Interactive,
                            );
                        }
                        _ => {
                            world.create_process_with_logon(
                                "test",
                                "test",
                                &format!("pw{i}"),
                                "C:\\Windows\\System32\\agent.exe",
                            );
                        }
                    }
                    prop_assert!(world.store().decoys_first());
                }
            }
        }
    }
}
