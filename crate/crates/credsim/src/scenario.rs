//! The scenario file format: line-oriented UTF-8 with `[section]` headers.
//!
//! ```text
//! name = fig10
//! seed = 7
//!
//! [fixture]
//! domain = DESKTOP-K0FU6JD
//! sid = S-1-5-21-328600537-1725431280-3419747997
//! attacker = mainuser
//! process = C:\Windows\system32\lsass.exe
//! logons = mainuser
//!
//! [accounts]
//! 503,DefaultAccount,-,
//! 1001,mainuser,P@ssw0rd2022,LocalAdministrators
//!
//! [allowlist]
//! C:\Windows\system32\lsass.exe
//!
//! [policies]
//! honey_token user=test domain=test password=test
//!
//! [attacks]
//! mimikatz_sekurlsa
//!
//! [prompts]
//! mimikatz.exe = deny
//! ```
//!
//! Accounts are `rid,username,password|-,groups` with `;`-separated groups.
//! Parsing is strict: unknown sections, keys, policies, or arguments are
//! rejected with the offending line number.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use credsim_core::attacks::{obfuscate, BinaryProfile, TechniqueId};
use credsim_core::authcore::Group;
use credsim_core::defenses::{
    DefensePolicy, HookAction, MonitorAction, PromptAnswer, KNOWN_BAD_KEYWORDS,
};
use credsim_core::procmodel::{ApiFunction, IntegrityLevel, LSASS_IMAGE};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid scenario: {0}")]
    Validation(String),
}

fn parse_err(line: usize, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Parse {
        line,
        message: message.into(),
    }
}

/// A process present at boot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FixtureProcess {
    pub image_path: String,
    pub user: String,
}

/// One SAM account as declared in the scenario.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AccountSpec {
    pub rid: u32,
    pub username: String,
    /// `None` models an account with no password set.
    pub password: Option<String>,
    pub groups: BTreeSet<Group>,
}

/// The machine a scenario starts from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Fixture {
    pub domain: String,
    pub sid: String,
    pub accounts: Vec<AccountSpec>,
    pub processes: Vec<FixtureProcess>,
    /// Users logged in interactively at boot, in order.
    pub logons: Vec<String>,
    /// Account the attack tools run as.
    pub attacker: String,
}

/// One attack to run: a technique and the binary it ships as.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AttackSpec {
    pub technique: TechniqueId,
    pub profile: BinaryProfile,
}

/// A parsed, validated scenario.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Scenario {
    pub name: String,
    /// Echoed into reports for provenance; the run itself is deterministic.
    pub seed: u64,
    pub fixture: Fixture,
    pub allowlist: BTreeSet<String>,
    pub policies: Vec<DefensePolicy>,
    pub attacks: Vec<AttackSpec>,
    pub prompt_answers: BTreeMap<String, PromptAnswer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Preamble,
    Fixture,
    Accounts,
    Allowlist,
    Policies,
    Attacks,
    Prompts,
}

/// Parse and validate a scenario from its textual form.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let mut name: Option<String> = None;
    let mut seed: u64 = 0;
    let mut fixture = Fixture::default();
    let mut attacker: Option<String> = None;
    let mut allowlist = BTreeSet::new();
    let mut policies: Vec<DefensePolicy> = Vec::new();
    let mut attacks: Vec<AttackSpec> = Vec::new();
    let mut prompt_answers = BTreeMap::new();

    let mut section = Section::Preamble;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }

        if let Some(header) = line.strip_prefix('[') {
            let header = header
                .strip_suffix(']')
                .ok_or_else(|| parse_err(line_no, "unterminated section header"))?;
            section = match header {
                "fixture" => Section::Fixture,
                "accounts" => Section::Accounts,
                "allowlist" => Section::Allowlist,
                "policies" => Section::Policies,
                "attacks" => Section::Attacks,
                "prompts" => Section::Prompts,
                other => return Err(parse_err(line_no, format!("unknown section [{other}]"))),
            };
            continue;
        }

        match section {
            Section::Preamble => {
                let (key, value) = key_value(line_no, line)?;
                match key {
                    "name" => name = Some(value.to_string()),
                    "seed" => {
                        seed = value
                            .parse()
                            .map_err(|_| parse_err(line_no, format!("bad seed {value:?}")))?
                    }
                    other => {
                        return Err(parse_err(
                            line_no,
                            format!("unknown top-level key {other:?}"),
                        ))
                    }
                }
            }
            Section::Fixture => {
                let (key, value) = key_value(line_no, line)?;
                match key {
                    "domain" => fixture.domain = value.to_string(),
                    "sid" => fixture.sid = value.to_string(),
                    "attacker" => attacker = Some(value.to_string()),
                    "process" => {
                        let (path, user) = match value.rsplit_once(" user=") {
                            Some((path, user)) => (path.trim(), user.trim()),
                            None => (value, "SYSTEM"),
                        };
                        fixture.processes.push(FixtureProcess {
                            image_path: path.to_string(),
                            user: user.to_string(),
                        });
                    }
                    "logons" => {
                        fixture.logons = value
                            .split(',')
                            .map(str::trim)
                            .filter(|s| !s.is_empty())
                            .map(String::from)
                            .collect()
                    }
                    other => {
                        return Err(parse_err(line_no, format!("unknown fixture key {other:?}")))
                    }
                }
            }
            Section::Accounts => {
                fixture.accounts.push(parse_account(line_no, line)?);
            }
            Section::Allowlist => {
                allowlist.insert(line.to_string());
            }
            Section::Policies => {
                policies.push(parse_policy_line(line_no, line)?);
            }
            Section::Attacks => {
                attacks.push(parse_attack_line(line_no, line)?);
            }
            Section::Prompts => {
                let (key, value) = key_value(line_no, line)?;
                let answer = match value {
                    "allow" => PromptAnswer::Allow,
                    "deny" => PromptAnswer::Deny,
                    other => {
                        return Err(parse_err(
                            line_no,
                            format!("prompt answer must be allow or deny, got {other:?}"),
                        ))
                    }
                };
                prompt_answers.insert(key.to_string(), answer);
            }
        }
    }

    // policies that carry a trusted-path list take it from [allowlist]
    for policy in &mut policies {
        match policy {
            DefensePolicy::AllowlistMonitor {
                trusted_full_paths, ..
            } => *trusted_full_paths = allowlist.clone(),
            DefensePolicy::LsassApiHook { trusted_paths, .. } => *trusted_paths = allowlist.clone(),
            _ => {}
        }
    }

    let name = name.ok_or_else(|| ScenarioError::Validation("missing `name`".into()))?;
    let fixture = validate_fixture(fixture, attacker)?;
    validate_policies(&policies)?;
    if attacks.is_empty() {
        return Err(ScenarioError::Validation(
            "the [attacks] section is empty".into(),
        ));
    }

    Ok(Scenario {
        name,
        seed,
        fixture,
        allowlist,
        policies,
        attacks,
        prompt_answers,
    })
}

fn key_value(line_no: usize, line: &str) -> Result<(&str, &str), ScenarioError> {
    let (key, value) = line
        .split_once('=')
        .ok_or_else(|| parse_err(line_no, "expected key = value"))?;
    Ok((key.trim(), value.trim()))
}

fn parse_account(line_no: usize, line: &str) -> Result<AccountSpec, ScenarioError> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 4 {
        return Err(parse_err(
            line_no,
            "account line must be rid,username,password|-,groups",
        ));
    }
    let rid = fields[0]
        .trim()
        .parse()
        .map_err(|_| parse_err(line_no, format!("bad rid {:?}", fields[0])))?;
    let username = fields[1].trim();
    if username.is_empty() {
        return Err(parse_err(line_no, "empty username"));
    }
    let password = match fields[2].trim() {
        "-" => None,
        pw => Some(pw.to_string()),
    };
    let mut groups = BTreeSet::new();
    for tag in fields[3]
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
    {
        let group = Group::parse(tag)
            .ok_or_else(|| parse_err(line_no, format!("unknown group {tag:?} (expected one of {:?})", Group::ALL)))?;
        groups.insert(group);
    }
    Ok(AccountSpec {
        rid,
        username: username.to_string(),
        password,
        groups,
    })
}

/// Parse one `[policies]` line: a policy name followed by `key=value`
/// arguments. Shared with the matrix configuration format.
pub(crate) fn parse_policy_line(
    line_no: usize,
    line: &str,
) -> Result<DefensePolicy, ScenarioError> {
    let mut tokens = line.split_whitespace();
    let policy_name = tokens.next().expect("line is non-empty");

    let mut args: BTreeMap<&str, &str> = BTreeMap::new();
    for token in tokens {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| parse_err(line_no, format!("bad policy argument {token:?}")))?;
        if args.insert(key, value).is_some() {
            return Err(parse_err(line_no, format!("duplicate argument {key:?}")));
        }
    }

    let allowed_args: &[&str] = match policy_name {
        "honey_token" => &["user", "domain", "password"],
        "allowlist_monitor" => &["action"],
        "lsass_api_hook" => &["action", "watch", "modules"],
        "alpc_block" => &["restore", "require_integrity"],
        "debug_privilege_restriction" => &["allow"],
        "protected_users" => &["members"],
        "signature_scan" => &["keywords"],
        "wdigest_disable"
        | "ppl_enable"
        | "credential_guard"
        | "restricted_admin_rdp"
        | "disable_lm_ntlm" => &[],
        other => return Err(parse_err(line_no, format!("unknown policy {other:?}"))),
    };
    for key in args.keys() {
        if !allowed_args.contains(key) {
            return Err(parse_err(
                line_no,
                format!("policy {policy_name:?} does not take argument {key:?}"),
            ));
        }
    }
    let require = |key: &str| -> Result<&str, ScenarioError> {
        args.get(key)
            .copied()
            .ok_or_else(|| parse_err(line_no, format!("policy {policy_name:?} requires {key}=")))
    };

    let policy = match policy_name {
        "honey_token" => DefensePolicy::HoneyToken {
            username: require("user")?.to_string(),
            domain: require("domain")?.to_string(),
            password: require("password")?.to_string(),
        },
        "allowlist_monitor" => {
            let action = match args.get("action").copied().unwrap_or("warn") {
                "warn" => MonitorAction::Warn,
                "terminate" => MonitorAction::Terminate,
                other => {
                    return Err(parse_err(
                        line_no,
                        format!("unknown monitor action {other:?}"),
                    ))
                }
            };
            DefensePolicy::AllowlistMonitor {
                trusted_full_paths: BTreeSet::new(),
                action,
            }
        }
        "lsass_api_hook" => {
            let action = match args.get("action").copied().unwrap_or("terminate") {
                "terminate" => HookAction::Terminate,
                "prompt" => HookAction::Prompt,
                other => return Err(parse_err(line_no, format!("unknown hook action {other:?}"))),
            };
            let mut hook = DefensePolicy::default_api_hook(action, BTreeSet::new());
            if let DefensePolicy::LsassApiHook {
                watched_functions,
                watched_modules,
                ..
            } = &mut hook
            {
                if let Some(watch) = args.get("watch") {
                    let mut functions = BTreeSet::new();
                    for name in watch.split(',').filter(|s| !s.is_empty()) {
                        let function = ApiFunction::parse(name).ok_or_else(|| {
                            parse_err(line_no, format!("unknown function {name:?}"))
                        })?;
                        functions.insert(function);
                    }
                    *watched_functions = functions;
                }
                if let Some(modules) = args.get("modules") {
                    *watched_modules = modules
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(String::from)
                        .collect();
                }
            }
            hook
        }
        "alpc_block" => {
            let restore = match args.get("restore").copied().unwrap_or("true") {
                "true" => true,
                "false" => false,
                other => return Err(parse_err(line_no, format!("bad restore value {other:?}"))),
            };
            let required_integrity = match args.get("require_integrity") {
                None => IntegrityLevel::System,
                Some(level) => IntegrityLevel::parse(level)
                    .ok_or_else(|| parse_err(line_no, format!("bad integrity {level:?}")))?,
            };
            DefensePolicy::AlpcBlock {
                restore_on_logout: restore,
                required_integrity,
            }
        }
        "wdigest_disable" => DefensePolicy::WDigestDisable,
        "ppl_enable" => DefensePolicy::PplEnable,
        "credential_guard" => DefensePolicy::CredentialGuard,
        "debug_privilege_restriction" => {
            let mut allowed_groups = BTreeSet::new();
            if let Some(allow) = args.get("allow") {
                for tag in allow.split(',').filter(|s| !s.is_empty()) {
                    let group = Group::parse(tag)
                        .ok_or_else(|| parse_err(line_no, format!("unknown group {tag:?} (expected one of {:?})", Group::ALL)))?;
                    allowed_groups.insert(group);
                }
            }
            DefensePolicy::DebugPrivilegeRestriction { allowed_groups }
        }
        "protected_users" => DefensePolicy::ProtectedUsers {
            members: require("members")?
                .split(',')
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect(),
        },
        "restricted_admin_rdp" => DefensePolicy::RestrictedAdminRdp,
        "disable_lm_ntlm" => DefensePolicy::DisableLmNtlm,
        "signature_scan" => match args.get("keywords") {
            None => DefensePolicy::default_signature_scan(),
            Some(keywords) => DefensePolicy::SignatureScan {
                keywords: keywords
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect(),
            },
        },
        _ => unreachable!("policy name checked above"),
    };
    Ok(policy)
}

fn parse_attack_line(line_no: usize, line: &str) -> Result<AttackSpec, ScenarioError> {
    let mut tokens = line.split_whitespace();
    let technique_name = tokens.next().expect("line is non-empty");
    let technique =
        TechniqueId::from_str(technique_name).map_err(|e| parse_err(line_no, e.to_string()))?;

    let mut profile = BinaryProfile::default_for(technique);
    let mut obfuscated = false;
    for token in tokens {
        if token == "obfuscated" {
            obfuscated = true;
        } else if let Some(path) = token.strip_prefix("path=") {
            let keywords: Vec<String> = KNOWN_BAD_KEYWORDS
                .iter()
                .filter(|k| path.to_lowercase().contains(**k))
                .map(|k| k.to_string())
                .collect();
            profile = BinaryProfile::new(path, keywords);
        } else {
            return Err(parse_err(line_no, format!("bad attack argument {token:?}")));
        }
    }
    if obfuscated {
        profile = obfuscate(&profile);
    }
    Ok(AttackSpec { technique, profile })
}

fn validate_fixture(
    mut fixture: Fixture,
    attacker: Option<String>,
) -> Result<Fixture, ScenarioError> {
    if fixture.domain.is_empty() {
        return Err(ScenarioError::Validation(
            "fixture is missing `domain`".into(),
        ));
    }
    if fixture.sid.is_empty() {
        return Err(ScenarioError::Validation("fixture is missing `sid`".into()));
    }

    let mut rids = BTreeSet::new();
    let mut names = BTreeSet::new();
    for account in &fixture.accounts {
        if !rids.insert(account.rid) {
            return Err(ScenarioError::Validation(format!(
                "duplicate rid {} in accounts",
                account.rid
            )));
        }
        if !names.insert(account.username.as_str()) {
            return Err(ScenarioError::Validation(format!(
                "duplicate username {:?} in accounts",
                account.username
            )));
        }
    }

    let has_lsass = fixture.processes.iter().any(|p| {
        p.image_path
            .rsplit(['\\', '/'])
            .next()
            .is_some_and(|name| name.eq_ignore_ascii_case(LSASS_IMAGE))
    });
    if !has_lsass {
        return Err(ScenarioError::Validation(
            "fixture has no lsass.exe process".into(),
        ));
    }

    for user in &fixture.logons {
        let account = fixture
            .accounts
            .iter()
            .find(|a| &a.username == user)
            .ok_or_else(|| {
                ScenarioError::Validation(format!("logon user {user:?} has no account"))
            })?;
        if account.password.is_none() {
            return Err(ScenarioError::Validation(format!(
                "logon user {user:?} has no password"
            )));
        }
    }

    fixture.attacker = match attacker {
        Some(user) => {
            if !fixture.accounts.iter().any(|a| a.username == user) {
                return Err(ScenarioError::Validation(format!(
                    "attacker {user:?} has no account"
                )));
            }
            user
        }
        None => fixture
            .accounts
            .iter()
            .find(|a| a.groups.contains(&Group::LocalAdministrators))
            .map(|a| a.username.clone())
            .ok_or_else(|| {
                ScenarioError::Validation(
                    "no `attacker` given and no LocalAdministrators account to default to".into(),
                )
            })?,
    };

    Ok(fixture)
}

fn validate_policies(policies: &[DefensePolicy]) -> Result<(), ScenarioError> {
    let mut seen = BTreeSet::new();
    for policy in policies {
        if !seen.insert(policy.name()) {
            return Err(ScenarioError::Validation(format!(
                "duplicate policy {}",
                policy.name()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
name = minimal

[fixture]
domain = DESKTOP-K0FU6JD
sid = S-1-5-21-328600537-1725431280-3419747997
process = C:\\Windows\\system32\\lsass.exe
logons = mainuser

[accounts]
503,DefaultAccount,-,
1001,mainuser,P@ssw0rd2022,LocalAdministrators
504,WDAGUtilityAccount,Wdag-Util-2022,

[attacks]
mimikatz_sekurlsa
";

    #[test]
    fn parses_minimal_scenario() {
        let scenario = parse_scenario(MINIMAL).unwrap();
        assert_eq!(scenario.name, "minimal");
        assert_eq!(scenario.seed, 0);
        assert_eq!(scenario.fixture.accounts.len(), 3);
        assert_eq!(scenario.fixture.attacker, "mainuser");
        assert_eq!(scenario.attacks.len(), 1);
        assert_eq!(scenario.attacks[0].technique, TechniqueId::MimikatzSekurlsa);
        assert_eq!(
            scenario.attacks[0].profile.image_path,
            "C:\\tools\\mimikatz.exe"
        );
    }

    #[test]
    fn honey_token_scenario_parses_policies() {
        let text = MINIMAL.replace(
            "[attacks]",
            "[policies]\nhoney_token user=test domain=test password=test\n\n[attacks]\nmimikatz_lsadump_inject",
        );
        let scenario = parse_scenario(&text).unwrap();
        assert_eq!(scenario.policies.len(), 1);
        assert!(matches!(
            &scenario.policies[0],
            DefensePolicy::HoneyToken { username, .. } if username == "test"
        ));
        assert_eq!(scenario.attacks.len(), 2);
    }

    #[test]
    fn unknown_policy_is_a_parse_error_with_line() {
        let text = MINIMAL.replace("[attacks]", "[policies]\nmagic_shield\n\n[attacks]");
        let err = parse_scenario(&text).unwrap_err();
        match err {
            ScenarioError::Parse { line, message } => {
                assert!(message.contains("magic_shield"));
                assert!(line > 0);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("logons = mainuser", "logons = mainuser\ncolour = blue");
        assert!(matches!(
            parse_scenario(&text),
            Err(ScenarioError::Parse { .. })
        ));
    }

    #[test]
    fn empty_attacks_is_a_validation_error() {
        let text = MINIMAL.replace("mimikatz_sekurlsa", "");
        let err = parse_scenario(&text).unwrap_err();
        assert!(matches!(err, ScenarioError::Validation(msg) if msg.contains("attacks")));
    }

    #[test]
    fn missing_lsass_is_a_validation_error() {
        let text = MINIMAL.replace("process = C:\\Windows\\system32\\lsass.exe", "");
        let err = parse_scenario(&text).unwrap_err();
        assert!(matches!(err, ScenarioError::Validation(msg) if msg.contains("lsass")));
    }

    #[test]
    fn duplicate_policy_rejected() {
        let text = MINIMAL.replace(
            "[attacks]",
            "[policies]\nwdigest_disable\nwdigest_disable\n\n[attacks]",
        );
        let err = parse_scenario(&text).unwrap_err();
        assert!(matches!(err, ScenarioError::Validation(msg) if msg.contains("WDigestDisable")));
    }

    #[test]
    fn allowlist_feeds_monitor_and_hook() {
        let text = MINIMAL.replace(
            "[attacks]",
            "[allowlist]\nC:\\Windows\\system32\\lsass.exe\n\n[policies]\nallowlist_monitor action=warn\nlsass_api_hook action=prompt\n\n[attacks]",
        );
        let scenario = parse_scenario(&text).unwrap();
        for policy in &scenario.policies {
            match policy {
                DefensePolicy::AllowlistMonitor {
                    trusted_full_paths, ..
                } => assert!(trusted_full_paths.contains("C:\\Windows\\system32\\lsass.exe")),
                DefensePolicy::LsassApiHook {
                    trusted_paths,
                    action,
                    ..
                } => {
                    assert!(trusted_paths.contains("C:\\Windows\\system32\\lsass.exe"));
                    assert_eq!(*action, HookAction::Prompt);
                }
                other => panic!("unexpected policy {other:?}"),
            }
        }
    }

    #[test]
    fn obfuscated_attack_gets_renamed_profile() {
        let text = MINIMAL.replace("mimikatz_sekurlsa", "mimikatz_sekurlsa obfuscated");
        let scenario = parse_scenario(&text).unwrap();
        let profile = &scenario.attacks[0].profile;
        assert!(profile.obfuscated);
        assert_eq!(profile.image_path, "C:\\tools\\update.exe");
    }

    #[test]
    fn unknown_technique_is_reported() {
        let text = MINIMAL.replace("mimikatz_sekurlsa", "mimikatz_dcsync");
        let err = parse_scenario(&text).unwrap_err();
        assert!(
            matches!(err, ScenarioError::Parse { message, .. } if message.contains("mimikatz_dcsync"))
        );
    }

    #[test]
    fn prompts_parse() {
        let text = MINIMAL.to_string() + "\n[prompts]\nmimikatz.exe = deny\naudit.exe = allow\n";
        let scenario = parse_scenario(&text).unwrap();
        assert_eq!(
            scenario.prompt_answers.get("mimikatz.exe"),
            Some(&PromptAnswer::Deny)
        );
        assert_eq!(
            scenario.prompt_answers.get("audit.exe"),
            Some(&PromptAnswer::Allow)
        );
    }
}
