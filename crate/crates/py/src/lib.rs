//! Python bindings for the deliberation engine and its analytics.
//!
//! Scalar results cross as native Python values. Structured data crosses as
//! JSON strings in the same schemas the CLI writes, so a Python caller can
//! mix these functions freely with artifacts on disk.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use deliberata_core::agents::{build_connector, AgentSpec};
use deliberata_core::corpus::{self, Dilemma};
use deliberata_core::inference::{self, DesignOptions, DesignRow, FitOptions};
use deliberata_core::metrics;
use deliberata_core::prompts::PromptLibrary;
use deliberata_core::protocol::{
    self, AgentConnector, DeliberationConfig, DeliberationFormat, GoalVariant, Transcript, Verdict,
};
use deliberata_core::values::{self, ValueRegistry};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_json<T: serde::de::DeserializeOwned>(what: &str, raw: &str) -> PyResult<T> {
    serde_json::from_str(raw).map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

fn to_json<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string(value).map_err(value_err)
}

fn parse_verdict(code: &str) -> PyResult<Verdict> {
    Verdict::from_code(code)
        .ok_or_else(|| PyValueError::new_err(format!("unknown verdict code {code:?}")))
}

fn parse_format(name: &str) -> PyResult<DeliberationFormat> {
    match name {
        "synchronous" => Ok(DeliberationFormat::Synchronous),
        "round_robin" => Ok(DeliberationFormat::RoundRobin),
        _ => Err(PyValueError::new_err(format!(
            "unknown format {name:?}; expected \"synchronous\" or \"round_robin\""
        ))),
    }
}

fn parse_goal(name: &str) -> PyResult<GoalVariant> {
    match name {
        "correctness_priority" => Ok(GoalVariant::CorrectnessPriority),
        "balanced" => Ok(GoalVariant::Balanced),
        _ => Err(PyValueError::new_err(format!(
            "unknown goal {name:?}; expected \"correctness_priority\" or \"balanced\""
        ))),
    }
}

/// Crate version of the underlying engine.
#[pyfunction]
fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

/// The five verdict codes in canonical order.
#[pyfunction]
fn verdict_codes() -> Vec<&'static str> {
    Verdict::ALL.iter().map(|v| v.code()).collect()
}

/// The canonical value registry, deduplicated, in published order.
#[pyfunction]
fn value_names() -> Vec<String> {
    ValueRegistry::canonical().names().to_vec()
}

/// Drop a trailing edit block ("Edit:", "Update:", "ETA:") from post text.
#[pyfunction]
fn strip_edits(text: &str) -> String {
    corpus::strip_edits(text)
}

/// Keyword-classify a comment into a verdict code, or None when ambiguous.
#[pyfunction]
fn classify_comment(text: &str) -> PyResult<Option<String>> {
    let verdict = corpus::classify_comment(text, None).map_err(value_err)?;
    Ok(verdict.map(|v| v.code().to_string()))
}

/// Shannon entropy (nats) of a verdict-count map keyed by verdict code.
#[pyfunction]
fn disagreement_entropy(counts: BTreeMap<String, u64>) -> PyResult<f64> {
    let mut typed: BTreeMap<Verdict, u64> = BTreeMap::new();
    for (code, n) in counts {
        typed.insert(parse_verdict(&code)?, n);
    }
    corpus::disagreement_entropy(&typed).map_err(value_err)
}

/// Jaccard similarity of two string sets; both empty gives 1.0.
#[pyfunction]
fn jaccard(a: Vec<String>, b: Vec<String>) -> f64 {
    let a: BTreeSet<String> = a.into_iter().collect();
    let b: BTreeSet<String> = b.into_iter().collect();
    values::jaccard(&a, &b)
}

/// Parse a judge response into its sorted value set, validated against the
/// canonical registry.
#[pyfunction]
fn parse_judge_output(raw: &str) -> PyResult<Vec<String>> {
    let set = values::parse_judge_output(raw, ValueRegistry::canonical()).map_err(value_err)?;
    Ok(set.into_iter().collect())
}

/// Parse one agent response. Returns (verdict_code, explanation,
/// round_mismatch).
#[pyfunction]
fn parse_turn(raw: &str, expected_round: u32) -> PyResult<(String, String, bool)> {
    let parsed = protocol::parse_turn(raw, expected_round).map_err(value_err)?;
    Ok((
        parsed.verdict.code().to_string(),
        parsed.explanation,
        parsed.round_mismatch,
    ))
}

/// Render the built-in system prompt for one agent seat.
///
/// `format` is "synchronous" or "round_robin"; `goal` is
/// "correctness_priority" or "balanced"; `agent_index` is 1-based.
#[pyfunction]
fn render_agent_prompt(
    format: &str,
    goal: &str,
    agent_index: usize,
    n_agents: usize,
) -> PyResult<String> {
    PromptLibrary::builtin()
        .render_agent_prompt(parse_format(format)?, parse_goal(goal)?, agent_index, n_agents)
        .map_err(value_err)
}

/// Render the built-in judge prompt over the canonical registry.
#[pyfunction]
fn render_judge_prompt() -> PyResult<String> {
    PromptLibrary::builtin()
        .render_judge_prompt(&ValueRegistry::canonical().names().to_vec())
        .map_err(value_err)
}

/// Stable digest of the built-in prompt set.
#[pyfunction]
fn prompt_digest() -> String {
    PromptLibrary::builtin().digest()
}

/// Run one deliberation and return the transcript as JSON.
///
/// `dilemma_json` and `config_json` follow the transcript schema;
/// `agents_json` is a JSON array of roster entries (the `[[agents]]` objects
/// from agents.toml, as JSON). Every name in the config's agent order must
/// appear in the roster. Remote agents work too, but need their key in the
/// environment.
#[pyfunction]
fn run_deliberation(dilemma_json: &str, config_json: &str, agents_json: &str) -> PyResult<String> {
    let dilemma: Dilemma = parse_json("dilemma", dilemma_json)?;
    let config: DeliberationConfig = parse_json("config", config_json)?;
    config.validate().map_err(value_err)?;
    let roster: Vec<AgentSpec> = parse_json("agents", agents_json)?;

    let mut connectors: Vec<Box<dyn AgentConnector>> = Vec::new();
    for name in &config.agent_order {
        let spec = roster
            .iter()
            .find(|s| &s.name == name)
            .ok_or_else(|| PyValueError::new_err(format!("agent {name:?} not in roster")))?;
        connectors.push(build_connector(spec, None).map_err(value_err)?);
    }

    let prompts = PromptLibrary::builtin();
    let transcript = protocol::run_deliberation(&dilemma, &config, &mut connectors, &prompts)
        .map_err(value_err)?;
    to_json(&transcript)
}

/// Per-transcript summaries (rounds used, outcome, change-of-verdict flags,
/// round-1 and final verdicts) for a JSON array of transcripts. Aborted
/// transcripts yield no summary.
#[pyfunction]
fn summarize(transcripts_json: &str) -> PyResult<String> {
    let transcripts: Vec<Transcript> = parse_json("transcripts", transcripts_json)?;
    to_json(&metrics::summarize_all(&transcripts))
}

/// Build the regression design from a JSON array of transcripts. Returns
/// `{"rows": [...], "errors": [...]}`; errors are per-transcript and do not
/// abort the build.
#[pyfunction]
#[pyo3(signature = (transcripts_json, prev_includes_self = false))]
fn build_design(transcripts_json: &str, prev_includes_self: bool) -> PyResult<String> {
    let transcripts: Vec<Transcript> = parse_json("transcripts", transcripts_json)?;
    let build = inference::build_design(&transcripts, &DesignOptions { prev_includes_self });
    to_json(&serde_json::json!({
        "rows": build.rows,
        "errors": build.errors,
    }))
}

/// Fit the conformity model to a JSON array of design rows and return the
/// full fit result (parameters, per-model effect table, loss trace) as JSON.
#[pyfunction]
#[pyo3(signature = (rows_json, lambda = inference::DEFAULT_LAMBDA, include_phi = true, max_iters = 20_000, tol = 1e-8))]
fn fit(
    rows_json: &str,
    lambda: f64,
    include_phi: bool,
    max_iters: usize,
    tol: f64,
) -> PyResult<String> {
    let rows: Vec<DesignRow> = parse_json("rows", rows_json)?;
    let opts = FitOptions {
        lambda,
        max_iters,
        tol,
        include_phi,
    };
    let result = inference::fit(&rows, &opts).map_err(value_err)?;
    to_json(&result)
}

/// Mann-Whitney U with midranks. Returns (u, p_two_sided, exact); exact
/// enumeration is used for combined sizes up to 16.
#[pyfunction]
fn mann_whitney_u(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64, bool)> {
    if a.is_empty() || b.is_empty() {
        return Err(PyValueError::new_err("both samples must be non-empty"));
    }
    let r = metrics::mann_whitney_u(&a, &b);
    Ok((r.u, r.p_two_sided, r.exact))
}

/// Pooled two-proportion z-test. Returns (z, p_two_sided).
#[pyfunction]
fn two_proportion_z(x1: u64, n1: u64, x2: u64, n2: u64) -> PyResult<(f64, f64)> {
    if n1 == 0 || n2 == 0 {
        return Err(PyValueError::new_err("sample sizes must be positive"));
    }
    if x1 > n1 || x2 > n2 {
        return Err(PyValueError::new_err("successes cannot exceed trials"));
    }
    let r = metrics::two_proportion_z(x1, n1, x2, n2);
    Ok((r.z, r.p_two_sided))
}

/// Seeded percentile bootstrap interval for the mean of `samples`.
#[pyfunction]
#[pyo3(signature = (samples, n_resamples = 1000, level = 0.95, seed = 0))]
fn bootstrap_mean_ci(
    samples: Vec<f64>,
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> PyResult<(f64, f64)> {
    if samples.is_empty() {
        return Err(PyValueError::new_err("samples must be non-empty"));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(PyValueError::new_err("level must be in (0, 1)"));
    }
    let mean = |xs: &[&f64]| xs.iter().copied().sum::<f64>() / xs.len() as f64;
    Ok(metrics::bootstrap_ci(&samples, mean, n_resamples, level, seed))
}

#[pymodule]
fn deliberata_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(version, m)?)?;
    m.add_function(wrap_pyfunction!(verdict_codes, m)?)?;
    m.add_function(wrap_pyfunction!(value_names, m)?)?;
    m.add_function(wrap_pyfunction!(strip_edits, m)?)?;
    m.add_function(wrap_pyfunction!(classify_comment, m)?)?;
    m.add_function(wrap_pyfunction!(disagreement_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(jaccard, m)?)?;
    m.add_function(wrap_pyfunction!(parse_judge_output, m)?)?;
    m.add_function(wrap_pyfunction!(parse_turn, m)?)?;
    m.add_function(wrap_pyfunction!(render_agent_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(render_judge_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(prompt_digest, m)?)?;
    m.add_function(wrap_pyfunction!(run_deliberation, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_function(wrap_pyfunction!(build_design, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(mann_whitney_u, m)?)?;
    m.add_function(wrap_pyfunction!(two_proportion_z, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap_mean_ci, m)?)?;
    Ok(())
}
