//! Deterministic scenario execution: build the world, install the defenses,
//! log the fixture users in, run the attacks in order, log out.

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use credsim_core::attacks::{execute, spawn_attacker, AttackResult, AttackStatus, TechniqueId};
use credsim_core::authcore::{AuthError, LogonOrigin, SamDatabase, SamError, UserAccount};
use credsim_core::defenses::{self, DetectionEvent, InstallError};
use credsim_core::procmodel::{Pid, WorldEvent, LSASS_IMAGE};
use credsim_core::World;

use crate::scenario::Scenario;

pub const REPORT_SCHEMA_VERSION: &str = "credsim.report.v1";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("installing policies failed: {0}")]
    Install(#[from] InstallError),
    #[error("fixture account store is inconsistent: {0}")]
    Sam(#[from] SamError),
    #[error("fixture logon of {user:?} failed: {source}")]
    Logon { user: String, source: AuthError },
}

/// Summary of one attack run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Outcome {
    pub technique: TechniqueId,
    pub status: AttackStatus,
    /// Non-decoy records with plaintext recovered.
    pub plaintext_yield: usize,
    /// Non-decoy records with an NT hash recovered.
    pub hash_yield: usize,
    /// Non-decoy records with any secret: the yield the defenses fight over.
    pub credential_yield: usize,
    pub decoy_hits: usize,
    /// Detection events this attack raised.
    pub events: usize,
}

impl Outcome {
    pub fn from_result(result: &AttackResult, events: usize) -> Outcome {
        let real = || result.records.iter().filter(|r| !r.decoy);
        Outcome {
            technique: result.technique,
            status: result.status,
            plaintext_yield: real().filter(|r| r.plaintext.is_some()).count(),
            hash_yield: real().filter(|r| r.nt_hash.is_present()).count(),
            credential_yield: result.credential_yield(),
            decoy_hits: result.records.iter().filter(|r| r.decoy).count(),
            events,
        }
    }
}

/// One line of the process-spawn log shown when a launch-time monitor is
/// installed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MonitorLine {
    pub pid: Pid,
    pub image_name: String,
    pub flagged: bool,
}

/// Everything a run produced. Serialization is canonical: the same scenario
/// text always yields the same report bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Report {
    pub schema_version: &'static str,
    pub scenario: String,
    pub seed: u64,
    pub outcomes: Vec<Outcome>,
    pub results: Vec<AttackResult>,
    /// Spawn log, present when a launch-time monitor was installed.
    pub monitor: Option<Vec<MonitorLine>>,
    pub events: Vec<DetectionEvent>,
    pub final_world_digest: String,
}

/// SHA-256 over the canonical world serialization.
pub fn world_digest(world: &World) -> String {
    let canonical = serde_json::to_vec(world).expect("world serializes");
    let digest = Sha256::digest(&canonical);
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

fn build_sam(scenario: &Scenario) -> Result<SamDatabase, SamError> {
    let mut sam = SamDatabase::new(&scenario.fixture.domain, &scenario.fixture.sid);
    for spec in &scenario.fixture.accounts {
        let mut account = match &spec.password {
            Some(password) => UserAccount::with_password(spec.rid, &spec.username, password),
            None => UserAccount::without_password(spec.rid, &spec.username),
        };
        account.groups = spec.groups.clone();
        sam.insert(account)?;
    }
    Ok(sam)
}

fn is_lsass(path: &str) -> bool {
    path.rsplit(['\\', '/'])
        .next()
        .is_some_and(|name| name.eq_ignore_ascii_case(LSASS_IMAGE))
}

/// Run a scenario and also hand back the final world, for callers that want
/// to poke at the machine a run left behind.
pub fn run_scenario_with_world(scenario: &Scenario) -> Result<(Report, World), RunError> {
    let mut world = World::new(build_sam(scenario)?);
    for (image, answer) in &scenario.prompt_answers {
        world.set_prompt_answer(image, *answer);
    }

    // lsass boots first; everything after it runs under the installed policies
    let lsass = scenario
        .fixture
        .processes
        .iter()
        .find(|p| is_lsass(&p.image_path))
        .expect("validated: fixture has lsass");
    world.spawn_process(&lsass.image_path, &lsass.user);

    defenses::install(&mut world, scenario.policies.clone())?;

    for process in scenario
        .fixture
        .processes
        .iter()
        .filter(|p| !is_lsass(&p.image_path))
    {
        world.spawn_process(&process.image_path, &process.user);
    }

    for user in &scenario.fixture.logons {
        let password = scenario
            .fixture
            .accounts
            .iter()
            .find(|a| &a.username == user)
            .and_then(|a| a.password.clone())
            .expect("validated: logon user has a password");
        world
            .authenticate(user, &password, LogonOrigin::Interactive)
            .map_err(|source| RunError::Logon {
                user: user.clone(),
                source,
            })?;
    }

    let mut results = Vec::new();
    let mut outcomes = Vec::new();
    for attack in &scenario.attacks {
        let events_before = world.detections().len();
        let attacker = spawn_attacker(&mut world, &attack.profile, &scenario.fixture.attacker);
        let result = if world.process(attacker).is_some_and(|p| p.alive) {
            execute(&mut world, attack.technique, attacker)
        } else {
            AttackResult::terminated_at_spawn(attack.technique)
        };
        let outcome = Outcome::from_result(&result, world.detections().len() - events_before);
        results.push(result);
        outcomes.push(outcome);
    }

    defenses::logout(&mut world);

    let monitor = monitor_log(&world, scenario);
    let report = Report {
        schema_version: REPORT_SCHEMA_VERSION,
        scenario: scenario.name.clone(),
        seed: scenario.seed,
        outcomes,
        results,
        monitor,
        events: world.detections().to_vec(),
        final_world_digest: world_digest(&world),
    };
    Ok((report, world))
}

/// Run a scenario to a report. Byte-identical output for identical input.
pub fn run_scenario(scenario: &Scenario) -> Result<Report, RunError> {
    run_scenario_with_world(scenario).map(|(report, _)| report)
}

fn monitor_log(world: &World, scenario: &Scenario) -> Option<Vec<MonitorLine>> {
    let monitored = scenario
        .policies
        .iter()
        .any(|p| matches!(p.name(), "AllowlistMonitor" | "SignatureScan"));
    if !monitored {
        return None;
    }
    let lsass_pid = world
        .processes()
        .values()
        .find(|p| p.image_name.eq_ignore_ascii_case(LSASS_IMAGE))
        .map(|p| p.pid);
    let lines = world
        .events()
        .iter()
        .filter_map(|event| match event {
            WorldEvent::ProcessCreated(created) if Some(created.pid) != lsass_pid => {
                let flagged = world.detections().iter().any(|d| {
                    d.subject_pid == Some(created.pid)
                        && matches!(
                            d.kind,
                            credsim_core::defenses::DetectionKind::ProcessWarning
                                | credsim_core::defenses::DetectionKind::SignatureHit
                        )
                });
                Some(MonitorLine {
                    pid: created.pid,
                    image_name: created.image_name.clone(),
                    flagged,
                })
            }
            _ => None,
        })
        .collect();
    Some(lines)
}
