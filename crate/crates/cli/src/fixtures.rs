//! Replay fixtures: checked-in deliberations with golden outcomes.
//!
//! A fixture bundles a dilemma, an engine configuration, one verbatim script
//! per agent, and the expected transcript shape. Replaying runs the scripts
//! through the real engine; `check` diffs the result against the goldens.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use deliberata_core::agents::ScriptedConnector;
use deliberata_core::corpus::Dilemma;
use deliberata_core::metrics::RunSummary;
use deliberata_core::prompts::PromptLibrary;
use deliberata_core::protocol::{
    run_deliberation, AgentConnector, DeliberationConfig, Outcome, Transcript, Verdict,
};

use crate::CliError;

const BUILTIN: [&str; 2] = [
    include_str!("../fixtures/synchronous_pair.json"),
    include_str!("../fixtures/round_robin_trio.json"),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Expected {
    pub outcome: Outcome,
    /// Verdict grid: one row per round, one column per agent in order.
    pub verdicts: Vec<Vec<Verdict>>,
    /// Which agents ever moved off their round-1 verdict.
    pub changed_verdict: BTreeMap<String, bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fixture {
    pub name: String,
    pub dilemma: Dilemma,
    pub config: DeliberationConfig,
    /// Raw turn texts per agent, consumed in order across rounds.
    pub scripts: BTreeMap<String, Vec<String>>,
    pub expected: Expected,
}

fn parse_fixture(text: &str, origin: &str) -> Result<Fixture, CliError> {
    serde_json::from_str(text)
        .map_err(|e| CliError::Validation(format!("invalid fixture {origin}: {e}")))
}

pub fn load_builtin() -> Result<Vec<Fixture>, CliError> {
    BUILTIN
        .iter()
        .map(|text| parse_fixture(text, "<builtin>"))
        .collect()
}

/// Load every *.json fixture in a directory, sorted by filename.
pub fn load_dir(dir: &Path) -> Result<Vec<Fixture>, CliError> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", dir.display())))?;
    let mut paths: Vec<_> = entries
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    paths.sort();
    let mut fixtures = Vec::with_capacity(paths.len());
    for path in paths {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
        fixtures.push(parse_fixture(&text, &path.display().to_string())?);
    }
    Ok(fixtures)
}

/// Run a fixture's scripts through the engine.
pub fn replay_one(fixture: &Fixture) -> Result<Transcript, CliError> {
    fixture.config.validate()?;
    let mut connectors: Vec<Box<dyn AgentConnector>> =
        Vec::with_capacity(fixture.config.agent_order.len());
    for name in &fixture.config.agent_order {
        let script = fixture.scripts.get(name).ok_or_else(|| {
            CliError::Validation(format!(
                "fixture {}: no script for agent {name:?}",
                fixture.name
            ))
        })?;
        connectors.push(Box::new(ScriptedConnector::new(script.clone())));
    }
    let prompts = PromptLibrary::builtin();
    let transcript = run_deliberation(&fixture.dilemma, &fixture.config, &mut connectors, &prompts)?;
    Ok(transcript)
}

/// Diff a replayed transcript against the fixture's goldens. Empty means an
/// exact match.
pub fn check(fixture: &Fixture, transcript: &Transcript) -> Vec<String> {
    let mut diffs = Vec::new();
    if transcript.outcome != fixture.expected.outcome {
        diffs.push(format!(
            "outcome: expected {:?}, got {:?}",
            fixture.expected.outcome, transcript.outcome
        ));
    }
    let rounds = transcript.rounds();
    if rounds.len() != fixture.expected.verdicts.len() {
        diffs.push(format!(
            "rounds: expected {}, got {}",
            fixture.expected.verdicts.len(),
            rounds.len()
        ));
    }
    for (r, expected_row) in fixture.expected.verdicts.iter().enumerate() {
        for (i, want) in expected_row.iter().enumerate() {
            match rounds.get(r).and_then(|row| row.get(i)) {
                Some(turn) if turn.verdict == *want => {}
                Some(turn) => diffs.push(format!(
                    "round {} {}: expected {want}, got {}",
                    r + 1,
                    turn.agent,
                    turn.verdict
                )),
                None => diffs.push(format!(
                    "round {} position {}: expected {want}, turn missing",
                    r + 1,
                    i
                )),
            }
        }
    }
    match RunSummary::from_transcript(transcript) {
        Some(summary) => {
            if summary.cov != fixture.expected.changed_verdict {
                diffs.push(format!(
                    "changed-verdict map: expected {:?}, got {:?}",
                    fixture.expected.changed_verdict, summary.cov
                ));
            }
        }
        None => diffs.push("transcript aborted; no changed-verdict map".into()),
    }
    diffs
}
