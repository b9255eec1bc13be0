//! Prompt templates and rendering.
//!
//! Four templates ship with the crate: the synchronous deliberation prompt,
//! the round-robin deliberation prompt (with the per-agent speaking-order
//! clause), the balanced-goals synchronous variant, and the value
//! identification judge prompt. Templates are plain text with a tiny
//! placeholder syntax: `{{ name }}` substitutions and flat
//! `{% if name == k %}...{% elif ... %}...{% endif %}` conditionals over
//! integer variables. Rendered output is locked by byte-for-byte golden
//! tests.
//!
//! The shipped templates support two-agent synchronous and balanced
//! deliberations and two- or three-agent round-robin deliberations. The
//! three-agent rendering extends the published two-agent text minimally: the
//! order clause gains a "third." branch and "one other agent" pluralizes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

use crate::protocol::{DeliberationFormat, GoalVariant};
use crate::values;

pub const SYNCHRONOUS_TEMPLATE: &str = include_str!("../templates/synchronous.txt");
pub const ROUND_ROBIN_TEMPLATE: &str = include_str!("../templates/round_robin.txt");
pub const SYNCHRONOUS_BALANCED_TEMPLATE: &str =
    include_str!("../templates/synchronous_balanced.txt");
pub const JUDGE_TEMPLATE: &str = include_str!("../templates/judge.txt");

/// File names looked up by [`PromptLibrary::from_dir`].
pub const TEMPLATE_FILES: [&str; 4] = [
    "synchronous.txt",
    "round_robin.txt",
    "synchronous_balanced.txt",
    "judge.txt",
];

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("unsupported prompt combination: {0}")]
    Unsupported(String),
    #[error("unknown placeholder {0:?}")]
    UnknownPlaceholder(String),
    #[error("malformed template: {0}")]
    Malformed(String),
    #[error("judge prompt requires the canonical value registry: {0}")]
    RegistryMismatch(String),
    #[error("cannot load prompt template {path}: {detail}")]
    Io { path: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TemplateValue {
    Int(i64),
    Str(String),
}

impl TemplateValue {
    fn as_int(&self) -> Option<i64> {
        match self {
            TemplateValue::Int(i) => Some(*i),
            TemplateValue::Str(_) => None,
        }
    }

    fn render(&self) -> String {
        match self {
            TemplateValue::Int(i) => i.to_string(),
            TemplateValue::Str(s) => s.clone(),
        }
    }
}

static VAR_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}").unwrap());
static TAG_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{%\s*(.*?)\s*%\}").unwrap());
static COND_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^(if|elif)\s+([A-Za-z_][A-Za-z0-9_]*)\s*==\s*(-?\d+)$").unwrap()
});

/// Render a template against a variable map. Conditionals are flat (no
/// nesting); a reference to a variable the map lacks is an error.
pub fn render_template(
    template: &str,
    vars: &BTreeMap<&str, TemplateValue>,
) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len());
    let mut pos = 0;
    let mut branches: Option<BranchState> = None;

    for tag in TAG_RE.captures_iter(template) {
        let whole = tag.get(0).unwrap();
        let body = &tag[1];
        let text_before = &template[pos..whole.start()];
        match &mut branches {
            None => out.push_str(text_before),
            Some(state) => {
                if state.taken && !state.satisfied {
                    out.push_str(text_before);
                    state.satisfied = true;
                }
            }
        }
        pos = whole.end();

        if let Some(cond) = COND_RE.captures(body) {
            let keyword = &cond[1];
            let var = &cond[2];
            let literal: i64 = cond[3]
                .parse()
                .map_err(|_| PromptError::Malformed(format!("bad literal in {body:?}")))?;
            let value = vars
                .get(var)
                .ok_or_else(|| PromptError::UnknownPlaceholder(var.to_string()))?
                .as_int()
                .ok_or_else(|| {
                    PromptError::Malformed(format!("variable {var:?} is not an integer"))
                })?;
            let holds = value == literal;
            match (keyword, &mut branches) {
                ("if", None) => {
                    branches = Some(BranchState {
                        taken: holds,
                        satisfied: !holds,
                    });
                }
                ("if", Some(_)) => {
                    return Err(PromptError::Malformed("nested {% if %}".into()));
                }
                ("elif", Some(state)) => {
                    let take = holds && state.satisfied && !state.taken;
                    if take {
                        state.taken = true;
                        state.satisfied = false;
                    } else {
                        state.taken = state.taken && !state.satisfied;
                    }
                }
                ("elif", None) => {
                    return Err(PromptError::Malformed("{% elif %} without {% if %}".into()));
                }
                _ => unreachable!(),
            }
        } else if body == "else" {
            match &mut branches {
                Some(state) => {
                    let take = state.satisfied && !state.taken;
                    if take {
                        state.taken = true;
                        state.satisfied = false;
                    } else {
                        state.taken = state.taken && !state.satisfied;
                    }
                }
                None => {
                    return Err(PromptError::Malformed("{% else %} without {% if %}".into()));
                }
            }
        } else if body == "endif" {
            match branches.take() {
                Some(_) => {}
                None => {
                    return Err(PromptError::Malformed("{% endif %} without {% if %}".into()));
                }
            }
        } else {
            return Err(PromptError::Malformed(format!("unknown tag {body:?}")));
        }
    }
    if branches.is_some() {
        return Err(PromptError::Malformed("unclosed {% if %}".into()));
    }
    out.push_str(&template[pos..]);

    let mut rendered = String::with_capacity(out.len());
    let mut last = 0;
    for cap in VAR_RE.captures_iter(&out) {
        let whole = cap.get(0).unwrap();
        let name = &cap[1];
        let value = vars
            .get(name)
            .ok_or_else(|| PromptError::UnknownPlaceholder(name.to_string()))?;
        rendered.push_str(&out[last..whole.start()]);
        let _ = write!(rendered, "{}", value.render());
        last = whole.end();
    }
    rendered.push_str(&out[last..]);
    Ok(rendered)
}

/// Tracks which branch of the current conditional emits text.
///
/// `taken`: some earlier branch matched. `satisfied`: text from here to the
/// next tag is suppressed. Between the two flags a single pass emits exactly
/// one branch body.
struct BranchState {
    taken: bool,
    satisfied: bool,
}

#[derive(Debug, Clone)]
pub struct PromptLibrary {
    synchronous: String,
    round_robin: String,
    synchronous_balanced: String,
    judge: String,
}

impl PromptLibrary {
    /// The templates compiled into the crate.
    pub fn builtin() -> PromptLibrary {
        PromptLibrary {
            synchronous: SYNCHRONOUS_TEMPLATE.to_string(),
            round_robin: ROUND_ROBIN_TEMPLATE.to_string(),
            synchronous_balanced: SYNCHRONOUS_BALANCED_TEMPLATE.to_string(),
            judge: JUDGE_TEMPLATE.to_string(),
        }
    }

    /// Load overriding templates from a directory holding the four
    /// [`TEMPLATE_FILES`].
    pub fn from_dir(dir: &Path) -> Result<PromptLibrary, PromptError> {
        let read = |name: &str| -> Result<String, PromptError> {
            std::fs::read_to_string(dir.join(name)).map_err(|e| PromptError::Io {
                path: dir.join(name).display().to_string(),
                detail: e.to_string(),
            })
        };
        Ok(PromptLibrary {
            synchronous: read(TEMPLATE_FILES[0])?,
            round_robin: read(TEMPLATE_FILES[1])?,
            synchronous_balanced: read(TEMPLATE_FILES[2])?,
            judge: read(TEMPLATE_FILES[3])?,
        })
    }

    /// Render the system prompt for one agent slot. `agent_index` is 1-based.
    ///
    /// Supported combinations: synchronous and balanced with exactly two
    /// agents, round robin with two or three. Balanced round robin was never
    /// defined and is rejected.
    pub fn render_agent_prompt(
        &self,
        format: DeliberationFormat,
        goal: GoalVariant,
        agent_index: usize,
        n_agents: usize,
    ) -> Result<String, PromptError> {
        let template = match (format, goal) {
            (DeliberationFormat::Synchronous, GoalVariant::CorrectnessPriority) => {
                &self.synchronous
            }
            (DeliberationFormat::Synchronous, GoalVariant::Balanced) => {
                &self.synchronous_balanced
            }
            (DeliberationFormat::RoundRobin, GoalVariant::CorrectnessPriority) => {
                &self.round_robin
            }
            (DeliberationFormat::RoundRobin, GoalVariant::Balanced) => {
                return Err(PromptError::Unsupported(
                    "balanced goals are defined for the synchronous format only".into(),
                ));
            }
        };
        let supported = match format {
            DeliberationFormat::Synchronous => n_agents == 2,
            DeliberationFormat::RoundRobin => n_agents == 2 || n_agents == 3,
        };
        if !supported {
            return Err(PromptError::Unsupported(format!(
                "{n_agents} agents in the {format:?} format"
            )));
        }
        if agent_index == 0 || agent_index > n_agents {
            return Err(PromptError::Unsupported(format!(
                "agent index {agent_index} of {n_agents}"
            )));
        }
        let vars = BTreeMap::from([
            ("agent", TemplateValue::Int(agent_index as i64)),
            ("n_agents", TemplateValue::Int(n_agents as i64)),
        ]);
        render_template(template, &vars)
    }

    /// Render the judge prompt. `values` must equal the canonical registry,
    /// in order; the prompt embeds the values verbatim.
    pub fn render_judge_prompt(&self, values: &[String]) -> Result<String, PromptError> {
        let canonical = values::ValueRegistry::canonical();
        if values.len() != canonical.names().len() {
            return Err(PromptError::RegistryMismatch(format!(
                "{} values supplied, registry has {}",
                values.len(),
                canonical.names().len()
            )));
        }
        for (got, want) in values.iter().zip(canonical.names()) {
            if got != want {
                return Err(PromptError::RegistryMismatch(format!(
                    "expected {want:?}, got {got:?}"
                )));
            }
        }
        let vars = BTreeMap::from([(
            "values_list",
            TemplateValue::Str(values.join("\n\n")),
        )]);
        render_template(&self.judge, &vars)
    }

    /// Stable digest over all four templates, recorded in run manifests.
    pub fn digest(&self) -> String {
        let mut acc = crate::store::fnv1a64(self.synchronous.as_bytes());
        for t in [&self.round_robin, &self.synchronous_balanced, &self.judge] {
            acc = crate::store::fnv1a64_seeded(t.as_bytes(), acc);
        }
        format!("{acc:016x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(pairs: &[(&'static str, i64)]) -> BTreeMap<&'static str, TemplateValue> {
        pairs
            .iter()
            .map(|&(k, v)| (k, TemplateValue::Int(v)))
            .collect()
    }

    #[test]
    fn substitutes_variables() {
        let out = render_template("Agent {{ agent }} of {{n_agents}}", &vars(&[("agent", 2), ("n_agents", 3)]))
            .unwrap();
        assert_eq!(out, "Agent 2 of 3");
    }

    #[test]
    fn conditional_selects_single_branch() {
        let t = "go {% if agent == 1 %}first.{% elif agent == 2 %}second.{% elif agent == 3 %}third.{% endif %}";
        assert_eq!(render_template(t, &vars(&[("agent", 1)])).unwrap(), "go first.");
        assert_eq!(render_template(t, &vars(&[("agent", 2)])).unwrap(), "go second.");
        assert_eq!(render_template(t, &vars(&[("agent", 3)])).unwrap(), "go third.");
        // No branch matches: the conditional renders as nothing.
        assert_eq!(render_template(t, &vars(&[("agent", 4)])).unwrap(), "go ");
    }

    #[test]
    fn else_branch_and_errors() {
        let t = "{% if x == 1 %}one{% else %}other{% endif %}";
        assert_eq!(render_template(t, &vars(&[("x", 1)])).unwrap(), "one");
        assert_eq!(render_template(t, &vars(&[("x", 9)])).unwrap(), "other");

        assert!(matches!(
            render_template("{{ missing }}", &vars(&[])),
            Err(PromptError::UnknownPlaceholder(_))
        ));
        assert!(matches!(
            render_template("{% if x == 1 %}no end", &vars(&[("x", 1)])),
            Err(PromptError::Malformed(_))
        ));
        assert!(matches!(
            render_template("{% endif %}", &vars(&[])),
            Err(PromptError::Malformed(_))
        ));
    }

    #[test]
    fn agent_prompt_combinations() {
        let lib = PromptLibrary::builtin();
        for idx in [1, 2] {
            for (format, goal) in [
                (DeliberationFormat::Synchronous, GoalVariant::CorrectnessPriority),
                (DeliberationFormat::Synchronous, GoalVariant::Balanced),
                (DeliberationFormat::RoundRobin, GoalVariant::CorrectnessPriority),
            ] {
                let p = lib.render_agent_prompt(format, goal, idx, 2).unwrap();
                assert!(p.contains(&format!("Your NAME is Agent {idx}.")), "{format:?}");
                assert!(p.ends_with("Here is the dilemma:\n"));
                assert!(!p.contains("{{"), "unrendered placeholder in {format:?}");
                assert!(!p.contains("{%"));
            }
        }
        assert!(matches!(
            PromptLibrary::builtin().render_agent_prompt(
                DeliberationFormat::RoundRobin,
                GoalVariant::Balanced,
                1,
                2
            ),
            Err(PromptError::Unsupported(_))
        ));
        assert!(matches!(
            PromptLibrary::builtin().render_agent_prompt(
                DeliberationFormat::Synchronous,
                GoalVariant::CorrectnessPriority,
                1,
                3
            ),
            Err(PromptError::Unsupported(_))
        ));
        assert!(matches!(
            PromptLibrary::builtin().render_agent_prompt(
                DeliberationFormat::RoundRobin,
                GoalVariant::CorrectnessPriority,
                4,
                3
            ),
            Err(PromptError::Unsupported(_))
        ));
    }

    #[test]
    fn three_way_round_robin_extends_order_clause() {
        let lib = PromptLibrary::builtin();
        let p3 = lib
            .render_agent_prompt(
                DeliberationFormat::RoundRobin,
                GoalVariant::CorrectnessPriority,
                3,
                3,
            )
            .unwrap();
        assert!(p3.contains("you will go third."));
        assert!(p3.contains("two other agents"));
        let p1 = lib
            .render_agent_prompt(
                DeliberationFormat::RoundRobin,
                GoalVariant::CorrectnessPriority,
                1,
                2,
            )
            .unwrap();
        assert!(p1.contains("you will go first."));
        assert!(p1.contains("one other agent"));
    }

    #[test]
    fn judge_prompt_embeds_registry_in_order() {
        let lib = PromptLibrary::builtin();
        let names: Vec<String> = values::ValueRegistry::canonical()
            .names()
            .iter()
            .map(|s| s.to_string())
            .collect();
        let p = lib.render_judge_prompt(&names).unwrap();
        assert!(p.contains("Trust creation and maintenance\n\nConstructive dialogue"));
        assert!(p.contains("{\"answers\": [\"Value1\", \"Value2\"]}"));
        // Registry deviations are rejected.
        let mut wrong = names.clone();
        wrong.swap(0, 1);
        assert!(lib.render_judge_prompt(&wrong).is_err());
        assert!(lib.render_judge_prompt(&names[1..]).is_err());
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let lib = PromptLibrary::builtin();
        assert_eq!(lib.digest(), PromptLibrary::builtin().digest());
        let mut other = PromptLibrary::builtin();
        other.judge.push('x');
        assert_ne!(lib.digest(), other.digest());
    }
}
