//! The canonical value registry, judge-output parsing, turn annotation,
//! Jaccard similarity, occurrence statistics, and inherited-value detection.
//!
//! The published value list prints one name twice ("Environmental
//! consciousness"); the registry de-duplicates on construction, keeping first
//! occurrence, which lands on the canonical count of 48.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics;
use crate::prompts::{PromptError, PromptLibrary};
use crate::protocol::{AgentConnector, AgentContext, Transcript, Verdict};

/// Value names as published, including the duplicated entry.
const RAW_VALUE_NAMES: [&str; 49] = [
    "Trust creation and maintenance",
    "Constructive dialogue",
    "Respect and dignity",
    "Professional ethics and integrity",
    "Social etiquette",
    "Religious respect and accommodation",
    "Linguistic respect and inclusivity",
    "Cultural understanding and respect",
    "Cultural heritage and tradition",
    "Financial wellbeing",
    "Sexual freedom and pleasure",
    "Protection of self and others from harm",
    "Environmental consciousness",
    "Authentic expression",
    "Workplace boundaries",
    "Parental care",
    "Consumer and client protection",
    "Child welfare",
    "Animal and pet welfare",
    "Worker welfare and dignity",
    "Workplace etiquette and respect",
    "Economic justice and fairness",
    "Healthcare equity and access",
    "Consent and personal boundaries",
    "Property rights protection",
    "Personal autonomy",
    "Emotional safety and support",
    "Mental health sensitivity and support",
    "Power dynamics values",
    "Privacy and confidentiality",
    "Religious and spiritual authenticity",
    "Emotional intelligence and regulation",
    "Emotional intimacy",
    "Prosocial altruism",
    "Honest communication",
    "Intergenerational respect and relationships",
    "Supportive and caring relationships",
    "Family bonds and cohesion",
    "Conflict resolution and reconciliation",
    "Public good and community engagement",
    "Accessibility",
    "Reciprocal relationship quality",
    "Environmental consciousness",
    "Empathy and understanding",
    "Personal growth",
    "Achievement and recognition",
    "Balance and moderation",
    "Physical health and wellbeing",
    "Personal accountability and responsibility",
];

pub const REGISTRY_SIZE: usize = 48;

static CANONICAL: LazyLock<ValueRegistry> =
    LazyLock::new(|| ValueRegistry::from_names(RAW_VALUE_NAMES.iter().map(|s| s.to_string())));

#[derive(Debug, Clone)]
pub struct ValueRegistry {
    names: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl ValueRegistry {
    /// Build a registry from an ordered name list, dropping repeats after
    /// their first occurrence.
    pub fn from_names(names: impl IntoIterator<Item = String>) -> ValueRegistry {
        let mut out = ValueRegistry {
            names: Vec::new(),
            index: BTreeMap::new(),
        };
        for name in names {
            if !out.index.contains_key(&name) {
                out.index.insert(name.clone(), out.names.len());
                out.names.push(name);
            }
        }
        out
    }

    pub fn canonical() -> &'static ValueRegistry {
        &CANONICAL
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }
}

pub const MAX_VALUES_PER_TURN: usize = 5;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ValueError {
    #[error("judge output is not the expected JSON object: {0}")]
    JudgeParse(String),
    #[error("judge selected a value outside the registry: {0:?}")]
    UnknownValue(String),
    #[error("judge selected {0} values, limit is {MAX_VALUES_PER_TURN}")]
    Cardinality(usize),
    #[error("annotation list is empty")]
    EmptyAnnotations,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeMeta {
    pub judge: String,
    /// Raw output of the last judge attempt, kept for audit.
    pub raw: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueAnnotation {
    pub dilemma_id: String,
    pub agent: String,
    pub round: u32,
    /// Subset of the registry, at most five names.
    pub values: BTreeSet<String>,
    /// True when the judge failed on both attempts; `values` is then empty
    /// and the turn is excluded from similarity statistics.
    #[serde(default)]
    pub missing: bool,
    pub judge_meta: JudgeMeta,
}

#[derive(Debug)]
struct JudgeAnswersWire {
    answers: Vec<String>,
}

impl<'de> Deserialize<'de> for JudgeAnswersWire {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Wire {
            answers: Vec<String>,
        }
        Wire::deserialize(d).map(|w| JudgeAnswersWire { answers: w.answers })
    }
}

/// Parse one judge response. The contract is strict: a bare JSON object with
/// a single "answers" array, every entry a verbatim registry name, at most
/// five entries. Repeats collapse under set semantics.
pub fn parse_judge_output(
    raw: &str,
    registry: &ValueRegistry,
) -> Result<BTreeSet<String>, ValueError> {
    let wire: JudgeAnswersWire =
        serde_json::from_str(raw.trim()).map_err(|e| ValueError::JudgeParse(e.to_string()))?;
    if wire.answers.len() > MAX_VALUES_PER_TURN {
        return Err(ValueError::Cardinality(wire.answers.len()));
    }
    let mut out = BTreeSet::new();
    for name in wire.answers {
        if !registry.contains(&name) {
            return Err(ValueError::UnknownValue(name));
        }
        out.insert(name);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailedTurn {
    pub agent: String,
    pub round: u32,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationReport {
    pub annotations: Vec<ValueAnnotation>,
    pub failed_turns: Vec<FailedTurn>,
}

const JUDGE_ATTEMPTS: usize = 2;

/// Annotate every turn of a transcript with a value set from the judge.
///
/// Each turn gets a fresh judge context: the judge system prompt plus the
/// turn's explanation. A failed attempt (connector error or contract
/// violation) is retried once; a second failure marks the turn missing and
/// lands in the report's failure list.
pub fn annotate_transcript(
    t: &Transcript,
    judge: &mut dyn AgentConnector,
    registry: &ValueRegistry,
    prompts: &PromptLibrary,
    judge_id: &str,
) -> Result<AnnotationReport, PromptError> {
    let names: Vec<String> = registry.names().to_vec();
    let system = prompts.render_judge_prompt(&names)?;
    let mut report = AnnotationReport {
        annotations: Vec::with_capacity(t.turns.len()),
        failed_turns: Vec::new(),
    };
    for turn in &t.turns {
        let mut last_raw = None;
        let mut last_err = String::new();
        let mut values = None;
        for _ in 0..JUDGE_ATTEMPTS {
            let mut ctx = AgentContext::new(system.clone());
            ctx.push_user(turn.explanation.clone());
            match judge.invoke(&ctx) {
                Ok(raw) => {
                    let parsed = parse_judge_output(&raw, registry);
                    last_raw = Some(raw);
                    match parsed {
                        Ok(set) => {
                            values = Some(set);
                            break;
                        }
                        Err(e) => last_err = e.to_string(),
                    }
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        let missing = values.is_none();
        if missing {
            report.failed_turns.push(FailedTurn {
                agent: turn.agent.clone(),
                round: turn.round,
                detail: last_err,
            });
        }
        report.annotations.push(ValueAnnotation {
            dilemma_id: t.dilemma_id.clone(),
            agent: turn.agent.clone(),
            round: turn.round,
            values: values.unwrap_or_default(),
            missing,
            judge_meta: JudgeMeta {
                judge: judge_id.to_string(),
                raw: last_raw,
            },
        });
    }
    Ok(report)
}

/// Jaccard index of two sets; both empty is defined as 1.0 (two agents that
/// both invoke no values are treated as maximally similar).
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueOccurrenceDiff {
    pub value: String,
    pub rate_a: f64,
    pub rate_b: f64,
    pub diff: f64,
    pub ci: (f64, f64),
    /// True when the bootstrap interval excludes zero.
    pub significant: bool,
}

fn occurrence_matrix(anns: &[&ValueAnnotation], registry: &ValueRegistry) -> Vec<Vec<usize>> {
    anns.iter()
        .map(|a| {
            a.values
                .iter()
                .filter_map(|name| registry.index_of(name))
                .collect()
        })
        .collect()
}

fn rates_of(sampled: &[usize], rows: &[Vec<usize>], k: usize) -> Vec<f64> {
    let mut counts = vec![0u32; k];
    for &i in sampled {
        for &v in &rows[i] {
            counts[v] += 1;
        }
    }
    let n = sampled.len() as f64;
    counts.iter().map(|&c| c as f64 / n).collect()
}

/// Per-value difference in occurrence rates between two annotation groups,
/// with a percentile bootstrap CI resampling messages within each group.
/// Missing-annotation turns are dropped before rates are computed.
pub fn value_occurrence_diff(
    ann_a: &[ValueAnnotation],
    ann_b: &[ValueAnnotation],
    registry: &ValueRegistry,
    n_resamples: usize,
    seed: u64,
) -> Result<Vec<ValueOccurrenceDiff>, ValueError> {
    let a: Vec<&ValueAnnotation> = ann_a.iter().filter(|x| !x.missing).collect();
    let b: Vec<&ValueAnnotation> = ann_b.iter().filter(|x| !x.missing).collect();
    if a.is_empty() || b.is_empty() {
        return Err(ValueError::EmptyAnnotations);
    }
    let k = registry.len();
    let rows_a = occurrence_matrix(&a, registry);
    let rows_b = occurrence_matrix(&b, registry);
    let all_a: Vec<usize> = (0..rows_a.len()).collect();
    let all_b: Vec<usize> = (0..rows_b.len()).collect();
    let point_a = rates_of(&all_a, &rows_a, k);
    let point_b = rates_of(&all_b, &rows_b, k);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut replicate_diffs = vec![Vec::with_capacity(n_resamples); k];
    for _ in 0..n_resamples {
        let draw_a: Vec<usize> = (0..rows_a.len())
            .map(|_| rng.random_range(0..rows_a.len()))
            .collect();
        let draw_b: Vec<usize> = (0..rows_b.len())
            .map(|_| rng.random_range(0..rows_b.len()))
            .collect();
        let ra = rates_of(&draw_a, &rows_a, k);
        let rb = rates_of(&draw_b, &rows_b, k);
        for v in 0..k {
            replicate_diffs[v].push(ra[v] - rb[v]);
        }
    }

    let mut out = Vec::with_capacity(k);
    for (v, name) in registry.names().iter().enumerate() {
        let mut reps = std::mem::take(&mut replicate_diffs[v]);
        reps.sort_by(f64::total_cmp);
        let ci = metrics::percentile_bounds(&reps, 0.95);
        out.push(ValueOccurrenceDiff {
            value: name.clone(),
            rate_a: point_a[v],
            rate_b: point_b[v],
            diff: point_a[v] - point_b[v],
            ci,
            significant: ci.0 > 0.0 || ci.1 < 0.0,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InheritedEvent {
    pub agent: String,
    pub round: u32,
    pub from_verdict: Verdict,
    pub to_verdict: Verdict,
    /// Values new to this agent (absent from its round 1) that appeared in
    /// some opponent's round-1 set.
    pub inherited: BTreeSet<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InheritedReport {
    pub events: Vec<InheritedEvent>,
    /// Change-of-verdict turns skipped because an involved annotation is
    /// missing: (agent, round, reason).
    pub skipped: Vec<(String, u32, String)>,
}

/// Detect inherited values at every change-of-verdict turn: the turn's values
/// minus the agent's own round-1 values, intersected with the union of the
/// opponents' round-1 values.
pub fn inherited_values(t: &Transcript, anns: &[ValueAnnotation]) -> InheritedReport {
    let by_turn: BTreeMap<(&str, u32), &ValueAnnotation> = anns
        .iter()
        .filter(|a| a.dilemma_id == t.dilemma_id)
        .map(|a| ((a.agent.as_str(), a.round), a))
        .collect();
    let lookup = |agent: &str, round: u32| -> Result<&BTreeSet<String>, String> {
        match by_turn.get(&(agent, round)) {
            Some(a) if !a.missing => Ok(&a.values),
            Some(_) => Err(format!("annotation for {agent} round {round} is missing")),
            None => Err(format!("no annotation for {agent} round {round}")),
        }
    };

    let mut report = InheritedReport {
        events: Vec::new(),
        skipped: Vec::new(),
    };
    for turn in &t.turns {
        if turn.round < 2 {
            continue;
        }
        let prev = match t.turn_of(&turn.agent, turn.round - 1) {
            Some(p) => p,
            None => continue,
        };
        if prev.verdict == turn.verdict {
            continue;
        }
        let mut involved = vec![(turn.agent.as_str(), turn.round), (turn.agent.as_str(), 1)];
        for other in &t.config.agent_order {
            if other != &turn.agent {
                involved.push((other.as_str(), 1));
            }
        }
        let mut sets = Vec::with_capacity(involved.len());
        let mut failure = None;
        for (agent, round) in involved {
            match lookup(agent, round) {
                Ok(s) => sets.push(s),
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        if let Some(reason) = failure {
            report.skipped.push((turn.agent.clone(), turn.round, reason));
            continue;
        }
        let current = sets[0];
        let own_r1 = sets[1];
        let mut opponent_union: BTreeSet<&String> = BTreeSet::new();
        for s in &sets[2..] {
            opponent_union.extend(s.iter());
        }
        let inherited: BTreeSet<String> = current
            .iter()
            .filter(|v| !own_r1.contains(*v) && opponent_union.contains(v))
            .cloned()
            .collect();
        debug_assert!(inherited.iter().all(|v| !own_r1.contains(v)));
        report.events.push(InheritedEvent {
            agent: turn.agent.clone(),
            round: turn.round,
            from_verdict: prev.verdict,
            to_verdict: turn.verdict,
            inherited,
        });
    }
    report
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilaritySample {
    pub dilemma_id: String,
    pub round: u32,
    pub agent_a: String,
    pub agent_b: String,
    /// The two agents gave the same verdict in this round.
    pub agree: bool,
    pub jaccard: f64,
}

/// Jaccard similarity for every unordered agent pair in every round where
/// both turns carry usable annotations. Pairs touching a missing annotation
/// are dropped, not imputed.
pub fn pairwise_similarities(t: &Transcript, anns: &[ValueAnnotation]) -> Vec<SimilaritySample> {
    let by_turn: BTreeMap<(&str, u32), &ValueAnnotation> = anns
        .iter()
        .filter(|a| a.dilemma_id == t.dilemma_id)
        .map(|a| ((a.agent.as_str(), a.round), a))
        .collect();
    let mut out = Vec::new();
    for (r, round_turns) in t.rounds().iter().enumerate() {
        let round = (r + 1) as u32;
        for i in 0..round_turns.len() {
            for j in i + 1..round_turns.len() {
                let (ta, tb) = (&round_turns[i], &round_turns[j]);
                let (Some(aa), Some(ab)) = (
                    by_turn.get(&(ta.agent.as_str(), round)),
                    by_turn.get(&(tb.agent.as_str(), round)),
                ) else {
                    continue;
                };
                if aa.missing || ab.missing {
                    continue;
                }
                out.push(SimilaritySample {
                    dilemma_id: t.dilemma_id.clone(),
                    round,
                    agent_a: ta.agent.clone(),
                    agent_b: tb.agent.clone(),
                    agree: ta.verdict == tb.verdict,
                    jaccard: jaccard(&aa.values, &ab.values),
                });
            }
        }
    }
    out
}
