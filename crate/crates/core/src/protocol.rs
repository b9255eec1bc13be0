//! Deliberation formats, turn parsing, and the engines that drive them.
//!
//! Two formats are supported. In the synchronous format every agent answers
//! each round in parallel: an agent's context contains peer output from
//! strictly earlier rounds only. In the round-robin format agents answer in a
//! fixed order within each round, and the n-th agent sees all n-1 turns that
//! precede it in the same round. Consensus is checked at round boundaries
//! only, in both formats.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Dilemma;
use crate::prompts::{PromptError, PromptLibrary};

pub const DEFAULT_MAX_ROUNDS: u32 = 4;
pub const DEFAULT_PARSE_RETRIES: u32 = 2;

/// The five categorical verdicts an agent can return.
#[allow(clippy::upper_case_acronyms)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Verdict {
    NTA,
    YTA,
    ESH,
    NAH,
    INFO,
}

impl Verdict {
    pub const ALL: [Verdict; 5] = [
        Verdict::NTA,
        Verdict::YTA,
        Verdict::ESH,
        Verdict::NAH,
        Verdict::INFO,
    ];

    pub fn index(self) -> usize {
        match self {
            Verdict::NTA => 0,
            Verdict::YTA => 1,
            Verdict::ESH => 2,
            Verdict::NAH => 3,
            Verdict::INFO => 4,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Verdict::NTA => "NTA",
            Verdict::YTA => "YTA",
            Verdict::ESH => "ESH",
            Verdict::NAH => "NAH",
            Verdict::INFO => "INFO",
        }
    }

    /// Case-insensitive lookup of a verdict code.
    pub fn from_code(code: &str) -> Option<Verdict> {
        match code.to_ascii_uppercase().as_str() {
            "NTA" => Some(Verdict::NTA),
            "YTA" => Some(Verdict::YTA),
            "ESH" => Some(Verdict::ESH),
            "NAH" => Some(Verdict::NAH),
            "INFO" => Some(Verdict::INFO),
            _ => None,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeliberationFormat {
    Synchronous,
    RoundRobin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalVariant {
    /// Correctness outranks consensus; the default instruction set.
    #[default]
    CorrectnessPriority,
    /// Consensus and correctness presented as equally important.
    Balanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliberationConfig {
    pub format: DeliberationFormat,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: u32,
    #[serde(default)]
    pub goal_variant: GoalVariant,
    /// Agent names in speaking order. Position is the 1-based agent index
    /// used in prompts and peer labels.
    pub agent_order: Vec<String>,
    /// Total parse attempts allowed per turn before the transcript aborts.
    #[serde(default = "default_parse_retries")]
    pub parse_retries: u32,
}

fn default_max_rounds() -> u32 {
    DEFAULT_MAX_ROUNDS
}

fn default_parse_retries() -> u32 {
    DEFAULT_PARSE_RETRIES
}

impl DeliberationConfig {
    pub fn new(format: DeliberationFormat, agent_order: Vec<String>) -> Self {
        DeliberationConfig {
            format,
            max_rounds: DEFAULT_MAX_ROUNDS,
            goal_variant: GoalVariant::default(),
            agent_order,
            parse_retries: DEFAULT_PARSE_RETRIES,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.agent_order.len() < 2 {
            return Err(EngineError::InvalidConfig(
                "at least two agents are required".into(),
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for name in &self.agent_order {
            if name.is_empty() {
                return Err(EngineError::InvalidConfig("empty agent name".into()));
            }
            if !seen.insert(name) {
                return Err(EngineError::InvalidConfig(format!(
                    "duplicate agent name {name:?} in agent_order"
                )));
            }
        }
        if self.max_rounds == 0 {
            return Err(EngineError::InvalidConfig("max_rounds must be >= 1".into()));
        }
        if self.parse_retries == 0 {
            return Err(EngineError::InvalidConfig(
                "parse_retries must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

/// Message history handed to a connector. The first entry is always the
/// system prompt and the history only ever grows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentContext {
    messages: Vec<Message>,
}

impl AgentContext {
    pub fn new(system_prompt: impl Into<String>) -> Self {
        AgentContext {
            messages: vec![Message {
                role: Role::System,
                content: system_prompt.into(),
            }],
        }
    }

    pub fn system_prompt(&self) -> &str {
        &self.messages[0].content
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn push_user(&mut self, content: impl Into<String>) {
        self.messages.push(Message {
            role: Role::User,
            content: content.into(),
        });
    }

    pub fn push_assistant(&mut self, content: impl Into<String>) {
        self.messages.push(Message {
            role: Role::Assistant,
            content: content.into(),
        });
    }
}

/// One parsed agent response within a deliberation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub agent: String,
    /// Round number, starting at 1.
    pub round: u32,
    pub verdict: Verdict,
    pub explanation: String,
    /// The verbatim connector output the verdict was parsed from.
    pub raw: String,
    /// Global ordinal within the transcript, starting at 0.
    pub seq: u32,
    /// Set when the agent echoed a round number other than the actual one.
    #[serde(default)]
    pub round_mismatch: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AbortReason {
    ParseFailure {
        agent: String,
        round: u32,
        detail: String,
    },
    Transport {
        agent: String,
        round: u32,
        detail: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Consensus { verdict: Verdict, round: u32 },
    NoConsensus,
    Aborted { reason: AbortReason },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub dilemma_id: String,
    pub config: DeliberationConfig,
    pub turns: Vec<Turn>,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid transcript: {0}")]
pub struct TranscriptError(pub String);

impl Transcript {
    /// Turns grouped by round, in round order. Grouping assumes `validate`
    /// holds; an aborted transcript may end in a partial group.
    pub fn rounds(&self) -> Vec<&[Turn]> {
        let n = self.config.agent_order.len().max(1);
        self.turns.chunks(n).collect()
    }

    pub fn turn_of(&self, agent: &str, round: u32) -> Option<&Turn> {
        self.turns
            .iter()
            .find(|t| t.agent == agent && t.round == round)
    }

    pub fn validate(&self) -> Result<(), TranscriptError> {
        let fail = |d: String| Err(TranscriptError(d));
        if self.dilemma_id.is_empty() {
            return fail("empty dilemma_id".into());
        }
        self.config
            .validate()
            .map_err(|e| TranscriptError(e.to_string()))?;
        let n = self.config.agent_order.len();
        for (i, t) in self.turns.iter().enumerate() {
            if t.seq as usize != i {
                return fail(format!("turn {} has seq {}", i, t.seq));
            }
            if !self.config.agent_order.contains(&t.agent) {
                return fail(format!("turn {} by unknown agent {:?}", i, t.agent));
            }
            let expected_round = (i / n + 1) as u32;
            if t.round != expected_round {
                return fail(format!(
                    "turn {} has round {}, expected {}",
                    i, t.round, expected_round
                ));
            }
            match parse_turn(&t.raw, t.round) {
                Ok(p) if p.verdict == t.verdict => {}
                Ok(p) => {
                    return fail(format!(
                        "turn {} verdict {} disagrees with raw text ({})",
                        i, t.verdict, p.verdict
                    ));
                }
                Err(e) => return fail(format!("turn {} raw text unparseable: {e}", i)),
            }
        }
        let blocks: Vec<&[Turn]> = self.turns.chunks(n).collect();
        if blocks.len() > self.config.max_rounds as usize {
            return fail(format!(
                "{} rounds exceed max_rounds {}",
                blocks.len(),
                self.config.max_rounds
            ));
        }
        let partial_tail = self
            .turns
            .len()
            .checked_rem(n)
            .map(|r| r != 0)
            .unwrap_or(false);
        for (b, block) in blocks.iter().enumerate() {
            let complete = block.len() == n;
            match self.config.format {
                DeliberationFormat::RoundRobin => {
                    for (j, t) in block.iter().enumerate() {
                        if t.agent != self.config.agent_order[j] {
                            return fail(format!(
                                "round {} position {} is {:?}, order requires {:?}",
                                b + 1,
                                j,
                                t.agent,
                                self.config.agent_order[j]
                            ));
                        }
                    }
                }
                DeliberationFormat::Synchronous => {
                    let mut seen = std::collections::BTreeSet::new();
                    for t in block.iter() {
                        if !seen.insert(&t.agent) {
                            return fail(format!("agent {:?} twice in round {}", t.agent, b + 1));
                        }
                    }
                }
            }
            let unanimous = block_verdict(block).filter(|_| complete);
            let last = b + 1 == blocks.len();
            match (&self.outcome, last) {
                (Outcome::Consensus { verdict, round }, true) => {
                    if !complete {
                        return fail("consensus declared on a partial round".into());
                    }
                    if *round as usize != blocks.len() {
                        return fail(format!(
                            "consensus round {} but transcript has {} rounds",
                            round,
                            blocks.len()
                        ));
                    }
                    if unanimous != Some(*verdict) {
                        return fail("consensus verdict disagrees with final round".into());
                    }
                }
                _ => {
                    if complete && unanimous.is_some() {
                        return fail(format!(
                            "round {} is unanimous but the transcript continues past it",
                            b + 1
                        ));
                    }
                }
            }
            if !complete && !last {
                return fail(format!("round {} is incomplete mid-transcript", b + 1));
            }
        }
        match &self.outcome {
            Outcome::Consensus { .. } => {
                if blocks.is_empty() {
                    return fail("consensus with no turns".into());
                }
                if partial_tail {
                    return fail("consensus with a partial final round".into());
                }
            }
            Outcome::NoConsensus => {
                if partial_tail {
                    return fail("no_consensus with a partial final round".into());
                }
                if blocks.len() != self.config.max_rounds as usize {
                    return fail(format!(
                        "no_consensus after {} rounds, expected {}",
                        blocks.len(),
                        self.config.max_rounds
                    ));
                }
            }
            Outcome::Aborted { .. } => {}
        }
        Ok(())
    }
}

fn block_verdict(block: &[Turn]) -> Option<Verdict> {
    let first = block.first()?.verdict;
    block.iter().all(|t| t.verdict == first).then_some(first)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no verdict token after a \"current verdict\" marker")]
    NoVerdict,
    #[error("unknown verdict code {0:?}")]
    UnknownCode(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTurn {
    pub verdict: Verdict,
    pub explanation: String,
    pub round_mismatch: bool,
}

static VERDICT_MARKER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)current\s+verdict").unwrap());
static THINKING_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)here['’]s\s+my\s+thinking\s*:?\s*").unwrap());
static ROUND_ECHO_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)this\s+is\s+round\s+(\d+)").unwrap());

/// Parse one agent response against the required output format.
///
/// The verdict is the first alphabetic token after the first case-insensitive
/// "current verdict" marker; punctuation and markdown may sit in between. The
/// explanation is the text after a "Here's my thinking" marker when present,
/// otherwise the remainder after the verdict token. An echoed round number
/// different from `expected_round` sets the mismatch flag but is accepted.
pub fn parse_turn(raw: &str, expected_round: u32) -> Result<ParsedTurn, ParseError> {
    let marker = VERDICT_MARKER_RE.find(raw).ok_or(ParseError::NoVerdict)?;
    let tail = &raw[marker.end()..];
    let start = tail
        .char_indices()
        .find(|(_, c)| c.is_ascii_alphabetic())
        .map(|(i, _)| i)
        .ok_or(ParseError::NoVerdict)?;
    let token_len = tail[start..]
        .bytes()
        .take_while(|b| b.is_ascii_alphabetic())
        .count();
    let token = &tail[start..start + token_len];
    let verdict = Verdict::from_code(token).ok_or_else(|| ParseError::UnknownCode(token.into()))?;

    let explanation = match THINKING_RE.find(raw) {
        Some(m) => raw[m.end()..].trim().to_string(),
        None => tail[start + token_len..]
            .trim_start_matches(|c: char| {
                c.is_whitespace() || matches!(c, '.' | ',' | ':' | ';' | '!' | '*' | '_' | '~')
            })
            .trim_end()
            .to_string(),
    };

    let round_mismatch = ROUND_ECHO_RE
        .captures(raw)
        .and_then(|c| c[1].parse::<u32>().ok())
        .is_some_and(|echoed| echoed != expected_round);

    Ok(ParsedTurn {
        verdict,
        explanation,
        round_mismatch,
    })
}

#[derive(Debug, Error)]
pub enum ConnectorError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("script exhausted at call {0}")]
    ScriptExhausted(usize),
    #[error("context violates the connector's contract: {0}")]
    Contract(String),
}

/// The interface agents implement. A connector instance is owned by a single
/// transcript runner; only scripted cursors and rng state persist across
/// calls.
pub trait AgentConnector {
    fn invoke(&mut self, ctx: &AgentContext) -> Result<String, ConnectorError>;
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid deliberation config: {0}")]
    InvalidConfig(String),
    #[error("{connectors} connectors for {order} agents in agent_order")]
    ArityMismatch { connectors: usize, order: usize },
    #[error("engine called with mismatched format {0:?}")]
    FormatMismatch(DeliberationFormat),
    #[error("duplicate agent {0:?} in a consensus check")]
    DuplicateAgent(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Unanimity over one round's turns. Errors if an agent appears twice.
pub fn check_consensus(round_turns: &[Turn]) -> Result<Option<Verdict>, EngineError> {
    let mut seen = std::collections::BTreeSet::new();
    for t in round_turns {
        if !seen.insert(&t.agent) {
            return Err(EngineError::DuplicateAgent(t.agent.clone()));
        }
    }
    Ok(block_verdict(round_turns).filter(|_| !round_turns.is_empty()))
}

/// Header line labeling a peer turn inside a user message. `agent_index` is
/// 1-based. Instrumentation counts these to audit visibility.
pub fn peer_turn_label(agent_index: usize, round: u32) -> String {
    format!("Agent {agent_index} (Round {round}):")
}

/// Matches `peer_turn_label` output; capture 1 is the agent index, capture 2
/// the round.
pub fn peer_turn_label_regex() -> &'static Regex {
    static RE: LazyLock<Regex> =
        LazyLock::new(|| Regex::new(r"(?m)^Agent (\d+) \(Round (\d+)\):$").unwrap());
    &RE
}

struct Slot {
    name: String,
    ctx: AgentContext,
    /// Count of transcript turns already merged into `ctx`.
    delivered: usize,
}

fn deliver(slot: &mut Slot, turns: &[Turn], order: &BTreeMap<&str, usize>, round: u32) {
    let pending: Vec<&Turn> = turns[slot.delivered..]
        .iter()
        .filter(|t| t.agent != slot.name)
        .collect();
    slot.delivered = turns.len();
    if pending.is_empty() && round == 1 {
        return;
    }
    let mut body = String::new();
    if !pending.is_empty() {
        body.push_str("Here are the other agents' responses so far:\n\n");
        for t in &pending {
            let idx = order[t.agent.as_str()] + 1;
            body.push_str(&peer_turn_label(idx, t.round));
            body.push('\n');
            body.push_str(&t.raw);
            body.push_str("\n\n");
        }
    }
    body.push_str(&format!(
        "This is Round {round}. Respond with your verdict and explanation in the required format."
    ));
    slot.ctx.push_user(body);
}

fn reparse_prompt(round: u32, err: &ParseError) -> String {
    format!(
        "Your last response could not be parsed ({err}). Respond again using exactly this format:\n\n\
         I am [NAME]. This is Round [ROUND].\nMy current verdict: [VERDICT].\n\n\
         Here's my thinking: [EXPLANATION].\n\n\
         [VERDICT] must be one of NTA, YTA, ESH, NAH, INFO. This is Round {round}."
    )
}

fn query(
    connector: &mut dyn AgentConnector,
    slot: &mut Slot,
    round: u32,
    attempts: u32,
) -> Result<ParsedOutput, AbortReason> {
    let attempts = attempts.max(1);
    let mut last_err = ParseError::NoVerdict;
    for attempt in 1..=attempts {
        let raw = match connector.invoke(&slot.ctx) {
            Ok(raw) => raw,
            Err(e) => {
                return Err(AbortReason::Transport {
                    agent: slot.name.clone(),
                    round,
                    detail: e.to_string(),
                });
            }
        };
        slot.ctx.push_assistant(raw.clone());
        match parse_turn(&raw, round) {
            Ok(parsed) => return Ok(ParsedOutput { raw, parsed }),
            Err(e) => {
                if attempt < attempts {
                    slot.ctx.push_user(reparse_prompt(round, &e));
                }
                last_err = e;
            }
        }
    }
    Err(AbortReason::ParseFailure {
        agent: slot.name.clone(),
        round,
        detail: last_err.to_string(),
    })
}

struct ParsedOutput {
    raw: String,
    parsed: ParsedTurn,
}

/// Run a synchronous deliberation: within a round no agent sees any other
/// agent's current-round output.
pub fn run_synchronous(
    dilemma: &Dilemma,
    cfg: &DeliberationConfig,
    connectors: &mut [Box<dyn AgentConnector>],
    prompts: &PromptLibrary,
) -> Result<Transcript, EngineError> {
    if cfg.format != DeliberationFormat::Synchronous {
        return Err(EngineError::FormatMismatch(cfg.format));
    }
    run_engine(dilemma, cfg, connectors, prompts)
}

/// Run a round-robin deliberation: within a round, agent n sees the n-1
/// turns that already happened this round, in order.
pub fn run_round_robin(
    dilemma: &Dilemma,
    cfg: &DeliberationConfig,
    connectors: &mut [Box<dyn AgentConnector>],
    prompts: &PromptLibrary,
) -> Result<Transcript, EngineError> {
    if cfg.format != DeliberationFormat::RoundRobin {
        return Err(EngineError::FormatMismatch(cfg.format));
    }
    run_engine(dilemma, cfg, connectors, prompts)
}

/// Dispatch on `cfg.format`.
pub fn run_deliberation(
    dilemma: &Dilemma,
    cfg: &DeliberationConfig,
    connectors: &mut [Box<dyn AgentConnector>],
    prompts: &PromptLibrary,
) -> Result<Transcript, EngineError> {
    run_engine(dilemma, cfg, connectors, prompts)
}

fn run_engine(
    dilemma: &Dilemma,
    cfg: &DeliberationConfig,
    connectors: &mut [Box<dyn AgentConnector>],
    prompts: &PromptLibrary,
) -> Result<Transcript, EngineError> {
    cfg.validate()?;
    if connectors.len() != cfg.agent_order.len() {
        return Err(EngineError::ArityMismatch {
            connectors: connectors.len(),
            order: cfg.agent_order.len(),
        });
    }
    let n = cfg.agent_order.len();
    let order: BTreeMap<&str, usize> = cfg
        .agent_order
        .iter()
        .enumerate()
        .map(|(i, name)| (name.as_str(), i))
        .collect();
    let mut slots = Vec::with_capacity(n);
    for (i, name) in cfg.agent_order.iter().enumerate() {
        let system = prompts.render_agent_prompt(cfg.format, cfg.goal_variant, i + 1, n)?;
        let mut ctx = AgentContext::new(system);
        ctx.push_user(dilemma.body.clone());
        slots.push(Slot {
            name: name.clone(),
            ctx,
            delivered: 0,
        });
    }

    let mut turns: Vec<Turn> = Vec::new();
    let mut outcome = Outcome::NoConsensus;
    'rounds: for round in 1..=cfg.max_rounds {
        // Synchronous rounds stage their turns and commit at the boundary, so
        // `turns` never exposes same-round output to `deliver`.
        let mut staged: Vec<Turn> = Vec::new();
        for i in 0..n {
            deliver(&mut slots[i], &turns, &order, round);
            match query(connectors[i].as_mut(), &mut slots[i], round, cfg.parse_retries) {
                Ok(out) => {
                    let seq = (turns.len() + staged.len()) as u32;
                    let turn = Turn {
                        agent: slots[i].name.clone(),
                        round,
                        verdict: out.parsed.verdict,
                        explanation: out.parsed.explanation,
                        raw: out.raw,
                        seq,
                        round_mismatch: out.parsed.round_mismatch,
                    };
                    match cfg.format {
                        DeliberationFormat::Synchronous => staged.push(turn),
                        DeliberationFormat::RoundRobin => turns.push(turn),
                    }
                }
                Err(reason) => {
                    turns.extend(staged);
                    outcome = Outcome::Aborted { reason };
                    break 'rounds;
                }
            }
        }
        let start = turns.len() - match cfg.format {
            DeliberationFormat::Synchronous => 0,
            DeliberationFormat::RoundRobin => n,
        };
        turns.extend(staged);
        if let Some(verdict) = check_consensus(&turns[start..])? {
            outcome = Outcome::Consensus { verdict, round };
            break 'rounds;
        }
    }

    Ok(Transcript {
        dilemma_id: dilemma.id.clone(),
        config: cfg.clone(),
        turns,
        outcome,
    })
}
