//! The attack × defense outcome grid: every technique run against every
//! policy configuration on a fresh world, plus the monotonicity check over
//! configurations ordered by inclusion.

use std::collections::BTreeSet;

use serde::Serialize;

use credsim_core::attacks::{BinaryProfile, TechniqueId};
use credsim_core::defenses::DefensePolicy;

use crate::runner::{run_scenario, Outcome, RunError};
use crate::scenario::{parse_policy_line, AttackSpec, Scenario, ScenarioError};

pub const MATRIX_SCHEMA_VERSION: &str = "credsim.matrix.v1";

/// A named defense configuration: one matrix column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PolicyConfig {
    pub name: String,
    pub policies: Vec<DefensePolicy>,
}

/// Parse a configurations file: `[config <name>]` headers, one policy per
/// line in the scenario `[policies]` grammar. An empty section is the
/// defenseless column.
pub fn parse_configs(text: &str) -> Result<Vec<PolicyConfig>, ScenarioError> {
    let mut configs: Vec<PolicyConfig> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(header) = line.strip_prefix('[') {
            let header = header.strip_suffix(']').ok_or(ScenarioError::Parse {
                line: line_no,
                message: "unterminated section header".into(),
            })?;
            let name = header.strip_prefix("config ").ok_or(ScenarioError::Parse {
                line: line_no,
                message: format!("expected [config <name>], got [{header}]"),
            })?;
            let name = name.trim();
            if configs.iter().any(|c| c.name == name) {
                return Err(ScenarioError::Validation(format!(
                    "duplicate config {name:?}"
                )));
            }
            configs.push(PolicyConfig {
                name: name.to_string(),
                policies: Vec::new(),
            });
            continue;
        }
        let config = configs.last_mut().ok_or(ScenarioError::Parse {
            line: line_no,
            message: "policy line before any [config ...] header".into(),
        })?;
        config.policies.push(parse_policy_line(line_no, line)?);
    }
    if configs.is_empty() {
        return Err(ScenarioError::Validation(
            "configuration file defines no configs".into(),
        ));
    }
    Ok(configs)
}

/// The complete grid: `cells[row][column]` is the outcome of technique
/// `techniques[row]` under `configs[column]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OutcomeMatrix {
    pub schema_version: &'static str,
    pub base_scenario: String,
    pub techniques: Vec<TechniqueId>,
    pub configs: Vec<PolicyConfig>,
    pub cells: Vec<Vec<Outcome>>,
}

/// Run every (technique, config) pair on a fresh copy of the base fixture.
/// The base scenario contributes the machine (accounts, processes, logons,
/// allowlist, prompts); its own policies and attack list are ignored.
pub fn build_matrix(base: &Scenario, configs: &[PolicyConfig]) -> Result<OutcomeMatrix, RunError> {
    let techniques = TechniqueId::ALL.to_vec();
    let mut cells = Vec::with_capacity(techniques.len());
    for technique in &techniques {
        let mut row = Vec::with_capacity(configs.len());
        for config in configs {
            let mut cell_scenario = base.clone();
            cell_scenario.name = format!("{}/{}/{}", base.name, config.name, technique);
            cell_scenario.policies = resolve_trusted_paths(config.policies.clone(), base);
            cell_scenario.attacks = vec![AttackSpec {
                technique: *technique,
                profile: BinaryProfile::default_for(*technique),
            }];
            let report = run_scenario(&cell_scenario)?;
            row.push(report.outcomes.into_iter().next().expect("one attack"));
        }
        cells.push(row);
    }
    Ok(OutcomeMatrix {
        schema_version: MATRIX_SCHEMA_VERSION,
        base_scenario: base.name.clone(),
        techniques,
        configs: configs.to_vec(),
        cells,
    })
}

/// Trusted-path lists in matrix configs come from the base scenario's
/// allowlist, same as scenario policies do.
fn resolve_trusted_paths(mut policies: Vec<DefensePolicy>, base: &Scenario) -> Vec<DefensePolicy> {
    for policy in &mut policies {
        match policy {
            DefensePolicy::AllowlistMonitor {
                trusted_full_paths, ..
            } if trusted_full_paths.is_empty() => *trusted_full_paths = base.allowlist.clone(),
            DefensePolicy::LsassApiHook { trusted_paths, .. } if trusted_paths.is_empty() => {
                *trusted_paths = base.allowlist.clone()
            }
            _ => {}
        }
    }
    policies
}

/// A cell pair where adding defenses increased the credential yield.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub technique: TechniqueId,
    pub weaker_config: String,
    pub stronger_config: String,
    pub weaker_yield: usize,
    pub stronger_yield: usize,
}

/// Check defense monotonicity over every pair of configs ordered by policy
/// inclusion: a superset of defenses must never yield more credentials.
pub fn check_monotonicity(matrix: &OutcomeMatrix) -> Vec<Violation> {
    let mut violations = Vec::new();
    let policy_sets: Vec<BTreeSet<String>> = matrix
        .configs
        .iter()
        .map(|c| {
            c.policies
                .iter()
                .map(|p| serde_json::to_string(p).expect("policy serializes"))
                .collect()
        })
        .collect();

    for (row, technique) in matrix.techniques.iter().enumerate() {
        for i in 0..matrix.configs.len() {
            for j in 0..matrix.configs.len() {
                if i == j || !policy_sets[i].is_subset(&policy_sets[j]) {
                    continue;
                }
                let weaker = &matrix.cells[row][i];
                let stronger = &matrix.cells[row][j];
                if stronger.credential_yield > weaker.credential_yield {
                    violations.push(Violation {
                        technique: *technique,
                        weaker_config: matrix.configs[i].name.clone(),
                        stronger_config: matrix.configs[j].name.clone(),
                        weaker_yield: weaker.credential_yield,
                        stronger_yield: stronger.credential_yield,
                    });
                }
            }
        }
    }
    violations
}

/// Render the grid. Text gives one row per technique with compact cells;
/// JSON carries the full outcome schema plus the violation list.
pub fn render_matrix(matrix: &OutcomeMatrix, violations: &[Violation], json: bool) -> Vec<u8> {
    if json {
        #[derive(Serialize)]
        struct Doc<'a> {
            #[serde(flatten)]
            matrix: &'a OutcomeMatrix,
            violations: &'a [Violation],
        }
        let mut bytes =
            serde_json::to_vec_pretty(&Doc { matrix, violations }).expect("matrix serializes");
        bytes.push(b'\n');
        return bytes;
    }

    let mut out = String::new();
    out.push_str(&format!(
        "credsim matrix v1 (base : {})\n\n",
        matrix.base_scenario
    ));

    let cell_text = |outcome: &Outcome| -> String {
        let status = match outcome.status {
            credsim_core::attacks::AttackStatus::Succeeded => "ok".to_string(),
            credsim_core::attacks::AttackStatus::Partial => "partial".to_string(),
            credsim_core::attacks::AttackStatus::Blocked(reason) => format!("blocked:{reason}"),
            credsim_core::attacks::AttackStatus::DetectedAndTerminated => "terminated".to_string(),
        };
        format!("{status} y={}", outcome.credential_yield)
    };

    let mut widths: Vec<usize> = matrix.configs.iter().map(|c| c.name.len()).collect();
    for row in &matrix.cells {
        for (col, outcome) in row.iter().enumerate() {
            widths[col] = widths[col].max(cell_text(outcome).len());
        }
    }
    let name_width = matrix
        .techniques
        .iter()
        .map(|t| t.id().len())
        .max()
        .unwrap_or(0);

    out.push_str(&format!("{:name_width$}", ""));
    for (config, width) in matrix.configs.iter().zip(&widths) {
        out.push_str(&format!(" | {:width$}", config.name, width = width));
    }
    out.push('\n');
    out.push_str(&"-".repeat(name_width + widths.iter().map(|w| w + 3).sum::<usize>()));
    out.push('\n');

    for (row, technique) in matrix.techniques.iter().enumerate() {
        out.push_str(&format!("{:name_width$}", technique.id()));
        for (col, width) in widths.iter().enumerate() {
            out.push_str(&format!(
                " | {:width$}",
                cell_text(&matrix.cells[row][col]),
                width = width
            ));
        }
        out.push('\n');
    }

    out.push('\n');
    if violations.is_empty() {
        out.push_str("monotonicity : OK (0 violations)\n");
    } else {
        out.push_str(&format!(
            "monotonicity : {} violation(s)\n",
            violations.len()
        ));
        for violation in violations {
            out.push_str(&format!(
                "  {} : {} (y={}) -> {} (y={})\n",
                violation.technique.id(),
                violation.weaker_config,
                violation.weaker_yield,
                violation.stronger_config,
                violation.stronger_yield
            ));
        }
    }
    out.into_bytes()
}
