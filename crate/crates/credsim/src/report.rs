//! Report rendering. The text format follows the console layout of the
//! tools it models (RID lines, `NTLM :` fields, a domain/SID header); the
//! JSON format carries the full outcome schema under `schema_version`.

use std::fmt::Write as _;

use credsim_core::attacks::{
    AttackResult, AttackStatus, BlockReason, CredentialRecord, RecordSource, TechniqueId,
};

use crate::runner::Report;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("unknown format {0:?} (expected text or json)")]
pub struct UnknownFormat(pub String);

impl std::str::FromStr for Format {
    type Err = UnknownFormat;

    fn from_str(s: &str) -> Result<Format, UnknownFormat> {
        match s {
            "text" => Ok(Format::Text),
            "json" => Ok(Format::Json),
            other => Err(UnknownFormat(other.to_string())),
        }
    }
}

/// Render a report to bytes in the requested format. Deterministic: the
/// same report always renders to the same bytes.
pub fn render_report(report: &Report, format: Format) -> Vec<u8> {
    match format {
        Format::Json => {
            let mut bytes = serde_json::to_vec_pretty(report).expect("report serializes");
            bytes.push(b'\n');
            bytes
        }
        Format::Text => render_text(report).into_bytes(),
    }
}

fn render_text(report: &Report) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "credsim report v1");
    let _ = writeln!(out, "scenario : {}", report.scenario);
    let _ = writeln!(out, "seed     : {}", report.seed);

    for (index, result) in report.results.iter().enumerate() {
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "== attack[{index}] : {} ==",
            result.technique.display()
        );
        let _ = writeln!(out);
        render_attack_body(&mut out, result);
        render_attack_footer(&mut out, result, &report.outcomes[index]);
    }

    if let Some(monitor) = &report.monitor {
        let _ = writeln!(out);
        let _ = writeln!(out, "== monitor ==");
        for line in monitor {
            let _ = writeln!(out, "{}", line.image_name);
            if line.flagged {
                let _ = writeln!(out, "WARNING");
            }
        }
    }

    let _ = writeln!(out);
    let _ = writeln!(out, "== events ==");
    if report.events.is_empty() {
        let _ = writeln!(out, "(none)");
    }
    for event in &report.events {
        let pid = event
            .subject_pid
            .map(|p| p.to_string())
            .unwrap_or_else(|| "-".to_string());
        let _ = writeln!(
            out,
            "[{}] {} {:?} pid={} {} : {}",
            event.seq, event.policy, event.kind, pid, event.subject_image, event.message
        );
    }

    let _ = writeln!(out);
    let _ = writeln!(out, "== world ==");
    let _ = writeln!(out, "digest : {}", report.final_world_digest);
    out
}

fn render_attack_body(out: &mut String, result: &AttackResult) {
    use credsim_core::attacks::TraceStep;

    let is_mimikatz = result.technique.is_mimikatz();
    if result.trace.first() == Some(&TraceStep::PrivilegeDebug) {
        let denied = result.trace.len() == 1
            && result.status == AttackStatus::Blocked(BlockReason::NoDebugPrivilege);
        if is_mimikatz {
            let _ = writeln!(out, "mimikatz # privilege::debug");
            let _ = writeln!(
                out,
                "Privilege '20' {}",
                if denied { "DENIED" } else { "OK" }
            );
        } else {
            let _ = writeln!(
                out,
                "SeDebugPrivilege : {}",
                if denied { "DENIED" } else { "OK" }
            );
        }
        let _ = writeln!(out);
    }

    match result.technique {
        TechniqueId::MimikatzSekurlsa => {
            let _ = writeln!(out, "mimikatz # sekurlsa::logonpasswords");
        }
        TechniqueId::MimikatzLsaDumpInject => {
            let _ = writeln!(out, "mimikatz # lsadump::lsa /inject");
            if let Some(domain) = &result.sam_domain {
                let _ = writeln!(out, "Domain : {} / {}", domain.name, domain.sid);
            }
        }
        TechniqueId::ComsvcsMiniDump => {
            let _ = writeln!(
                out,
                "> rundll32.exe C:\\Windows\\System32\\comsvcs.dll, MiniDump (lsass)"
            );
        }
        TechniqueId::ProcdumpMa => {
            let _ = writeln!(out, "> procdump.exe -accepteula -ma lsass.exe");
        }
        TechniqueId::TaskmgrDump => {
            let _ = writeln!(out, "> taskmgr.exe : Create dump file (lsass.exe)");
        }
    }
    if let Some(artifact) = &result.dump_artifact {
        let _ = writeln!(out, "[dump] {artifact}");
    }

    match result.status {
        AttackStatus::Blocked(reason) => {
            let _ = writeln!(out, "ERROR : {reason}");
        }
        AttackStatus::DetectedAndTerminated => {
            if result.trace.is_empty() {
                let _ = writeln!(out, "TERMINATED : image blocked at launch");
            } else {
                let _ = writeln!(out, "TERMINATED : suspicious call blocked, process killed");
            }
        }
        AttackStatus::Succeeded | AttackStatus::Partial => {
            let _ = writeln!(out);
            for record in &result.records {
                render_record(out, record);
            }
        }
    }
}

fn render_record(out: &mut String, record: &CredentialRecord) {
    match record.source {
        RecordSource::Sam => {
            let rid = record.rid.expect("SAM records carry a rid");
            let _ = writeln!(out, "RID : {rid:08x} ({rid})");
            let _ = writeln!(out, "User : {}", record.username);
            let _ = writeln!(out);
            let _ = writeln!(out, "* Primary");
            match record.nt_hash.hex() {
                Some(hex) => {
                    let _ = writeln!(out, "  NTLM : {hex}");
                    let _ = writeln!(out, "  LM :");
                    let _ = writeln!(out, "  Hash NTLM: {hex}");
                }
                None => {
                    let _ = writeln!(out, "  NTLM :");
                    let _ = writeln!(out, "  LM :");
                }
            }
        }
        RecordSource::LogonSession | RecordSource::DumpFile => {
            let _ = writeln!(out, "* Username : {}", record.username);
            let _ = writeln!(out, "* Domain : {}", record.domain);
            match &record.plaintext {
                Some(plaintext) => {
                    let _ = writeln!(out, "* Password : {plaintext}");
                }
                None => {
                    let _ = writeln!(out, "* Password : (null)");
                }
            }
            match record.nt_hash.hex() {
                Some(hex) => {
                    let _ = writeln!(out, "* NTLM : {hex}");
                }
                None => {
                    let _ = writeln!(out, "* NTLM :");
                }
            }
        }
    }
    let _ = writeln!(out);
}

fn render_attack_footer(out: &mut String, result: &AttackResult, outcome: &crate::runner::Outcome) {
    if !matches!(
        result.status,
        AttackStatus::Succeeded | AttackStatus::Partial
    ) {
        let _ = writeln!(out);
    }
    let _ = writeln!(out, "status : {}", result.status);
    let trace = if result.trace.is_empty() {
        "(none)".to_string()
    } else {
        result
            .trace
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(" > ")
    };
    let _ = writeln!(out, "trace  : {trace}");
    let _ = writeln!(
        out,
        "yield  : plaintext={} hash={} credential={} decoys={} events={}",
        outcome.plaintext_yield,
        outcome.hash_yield,
        outcome.credential_yield,
        outcome.decoy_hits,
        outcome.events
    );
}
