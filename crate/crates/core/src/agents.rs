//! Agent connectors: scripted replayers, synthetic stochastic agents
//! realizing the verdict-choice model generatively, and remote chat
//! endpoints. Agent rosters load from `agents.toml`.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use rand::{Rng, RngExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{
    parse_turn, peer_turn_label_regex, AgentConnector, AgentContext, ConnectorError, Role,
    Verdict,
};

#[derive(Debug, Error)]
pub enum AgentsError {
    #[error("cannot read agents file {path}: {detail}")]
    Io { path: String, detail: String },
    #[error("agents file is not valid TOML: {0}")]
    Parse(String),
    #[error("invalid agent configuration: {0}")]
    Validation(String),
    #[error("api key variable {0} is not set")]
    MissingApiKey(String),
}

/// Baseline preferences and interaction weights of a synthetic agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SyntheticParams {
    /// Baseline log-preference per verdict; absent verdicts read as 0.
    #[serde(default)]
    pub theta: BTreeMap<Verdict, f64>,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub gamma_prev: f64,
    #[serde(default)]
    pub gamma_within: f64,
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<(), AgentsError> {
        let finite = self.theta.values().all(|v| v.is_finite())
            && self.alpha.is_finite()
            && self.gamma_prev.is_finite()
            && self.gamma_within.is_finite();
        if finite {
            Ok(())
        } else {
            Err(AgentsError::Validation("synthetic params must be finite".into()))
        }
    }
}

pub const DEFAULT_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_TIMEOUT_SECS: u64 = 60;
pub const DEFAULT_MAX_RETRIES: u32 = 3;
pub const DEFAULT_BACKOFF_BASE_MS: u64 = 250;

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}
fn default_timeout_secs() -> u64 {
    DEFAULT_TIMEOUT_SECS
}
fn default_max_retries() -> u32 {
    DEFAULT_MAX_RETRIES
}
fn default_backoff_base_ms() -> u64 {
    DEFAULT_BACKOFF_BASE_MS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteSpec {
    pub base_url: String,
    pub model_id: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    pub api_key_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// First backoff delay; doubles per retry. Small values keep tests fast.
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedSpec {
    pub script: Vec<String>,
    /// Restart the script when exhausted instead of erroring. Useful for
    /// stateless judges that answer every call the same way.
    #[serde(default)]
    pub cycle: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    #[serde(default)]
    pub params: SyntheticParams,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgentKind {
    Remote(RemoteSpec),
    Scripted(ScriptedSpec),
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: AgentKind,
}

impl AgentSpec {
    pub fn validate(&self) -> Result<(), AgentsError> {
        if self.name.trim().is_empty() {
            return Err(AgentsError::Validation("agent name is empty".into()));
        }
        match &self.kind {
            AgentKind::Remote(r) => {
                if r.temperature < 0.0 || !r.temperature.is_finite() {
                    return Err(AgentsError::Validation(format!(
                        "agent {:?}: temperature must be finite and nonnegative",
                        self.name
                    )));
                }
                if r.base_url.trim().is_empty() || r.api_key_env.trim().is_empty() {
                    return Err(AgentsError::Validation(format!(
                        "agent {:?}: base_url and api_key_env are required",
                        self.name
                    )));
                }
                Ok(())
            }
            AgentKind::Scripted(_) => Ok(()),
            AgentKind::Synthetic(s) => s.params.validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentsFile {
    pub agents: Vec<AgentSpec>,
}

impl AgentsFile {
    pub fn validate(&self) -> Result<(), AgentsError> {
        let mut seen = std::collections::BTreeSet::new();
        for spec in &self.agents {
            spec.validate()?;
            if !seen.insert(spec.name.as_str()) {
                return Err(AgentsError::Validation(format!(
                    "duplicate agent name {:?}",
                    spec.name
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&AgentSpec> {
        self.agents.iter().find(|a| a.name == name)
    }
}

pub fn load_agents_file(path: &Path) -> Result<AgentsFile, AgentsError> {
    let text = std::fs::read_to_string(path).map_err(|e| AgentsError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let file: AgentsFile = toml::from_str(&text).map_err(|e| AgentsError::Parse(e.to_string()))?;
    file.validate()?;
    Ok(file)
}

/// Instantiate the connector for a spec. Synthetic seeds can be overridden
/// so one roster entry can drive many independent transcripts.
pub fn build_connector(
    spec: &AgentSpec,
    seed_override: Option<u64>,
) -> Result<Box<dyn AgentConnector>, AgentsError> {
    spec.validate()?;
    match &spec.kind {
        AgentKind::Scripted(s) => {
            let c = if s.cycle {
                ScriptedConnector::cycling(s.script.clone())
            } else {
                ScriptedConnector::new(s.script.clone())
            };
            Ok(Box::new(c))
        }
        AgentKind::Synthetic(s) => Ok(Box::new(SyntheticConnector::new(
            s.params.clone(),
            seed_override.unwrap_or(s.seed),
        ))),
        AgentKind::Remote(r) => Ok(Box::new(RemoteConnector::from_env(r.clone())?)),
    }
}

/// Replays a fixed list of raw outputs in order.
#[derive(Debug, Clone)]
pub struct ScriptedConnector {
    script: Vec<String>,
    cursor: usize,
    cycle: bool,
}

impl ScriptedConnector {
    pub fn new(script: Vec<String>) -> ScriptedConnector {
        ScriptedConnector {
            script,
            cursor: 0,
            cycle: false,
        }
    }

    pub fn cycling(script: Vec<String>) -> ScriptedConnector {
        ScriptedConnector {
            script,
            cursor: 0,
            cycle: true,
        }
    }

    pub fn calls_made(&self) -> usize {
        self.cursor
    }
}

impl AgentConnector for ScriptedConnector {
    fn invoke(&mut self, _ctx: &AgentContext) -> Result<String, ConnectorError> {
        let len = self.script.len();
        if len == 0 {
            return Err(ConnectorError::ScriptExhausted(self.cursor));
        }
        let idx = if self.cycle {
            self.cursor % len
        } else if self.cursor < len {
            self.cursor
        } else {
            return Err(ConnectorError::ScriptExhausted(self.cursor));
        };
        self.cursor += 1;
        Ok(self.script[idx].clone())
    }
}

/// Verdict-choice state a synthetic agent reconstructs from its context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticState {
    pub agent_index: usize,
    pub round: u32,
    pub prev_own: Option<Verdict>,
    pub n_prev: BTreeMap<Verdict, u32>,
    pub n_within: BTreeMap<Verdict, u32>,
}

/// Reconstruct the deliberation state from the conversation alone: the agent
/// index from the system prompt, the round from the agent's own parseable
/// replies, and peer verdict counts from the labeled peer-turn blocks the
/// engine delivered. This is what makes synthetic runs a genuine probe of
/// context delivery rather than of engine internals.
pub fn derive_synthetic_state(ctx: &AgentContext) -> Result<SyntheticState, ConnectorError> {
    let name_re = regex::Regex::new(r"Your NAME is Agent (\d+)\.").unwrap();
    let system = ctx.system_prompt();
    let agent_index: usize = name_re
        .captures(system)
        .and_then(|c| c[1].parse().ok())
        .ok_or_else(|| {
            ConnectorError::Contract("system prompt does not name an agent index".into())
        })?;

    let mut own: Vec<Verdict> = Vec::new();
    for msg in ctx.messages() {
        if msg.role == Role::Assistant {
            if let Ok(parsed) = parse_turn(&msg.content, (own.len() + 1) as u32) {
                own.push(parsed.verdict);
            }
        }
    }
    let round = (own.len() + 1) as u32;
    let prev_own = own.last().copied();

    let label_re = peer_turn_label_regex();
    let mut n_prev: BTreeMap<Verdict, u32> = BTreeMap::new();
    let mut n_within: BTreeMap<Verdict, u32> = BTreeMap::new();
    for msg in ctx.messages() {
        if msg.role != Role::User {
            continue;
        }
        let labels: Vec<(usize, u32, usize, usize)> = label_re
            .captures_iter(&msg.content)
            .map(|c| {
                let whole = c.get(0).unwrap();
                let peer: usize = c[1].parse().unwrap_or(0);
                let round: u32 = c[2].parse().unwrap_or(0);
                (peer, round, whole.start(), whole.end())
            })
            .collect();
        for (i, &(peer, peer_round, _, body_start)) in labels.iter().enumerate() {
            if peer == agent_index {
                return Err(ConnectorError::Contract(
                    "peer block labeled with own agent index".into(),
                ));
            }
            let body_end = labels
                .get(i + 1)
                .map(|&(_, _, next_start, _)| next_start)
                .unwrap_or(msg.content.len());
            let block = &msg.content[body_start..body_end];
            let verdict = parse_turn(block, peer_round)
                .map(|p| p.verdict)
                .map_err(|e| {
                    ConnectorError::Contract(format!(
                        "peer block for agent {peer} round {peer_round} has no verdict: {e}"
                    ))
                })?;
            if peer_round < round {
                *n_prev.entry(verdict).or_default() += 1;
            } else if peer_round == round {
                *n_within.entry(verdict).or_default() += 1;
            } else {
                return Err(ConnectorError::Contract(format!(
                    "peer turn from future round {peer_round} (current {round})"
                )));
            }
        }
    }
    Ok(SyntheticState {
        agent_index,
        round,
        prev_own,
        n_prev,
        n_within,
    })
}

/// Logits of the choice model: θ_v + φ_v + α·1[v=prev_own] + γ_prev·n_prev[v]
/// + γ_within·n_within[v], in verdict declaration order.
pub fn synthetic_logits(
    params: &SyntheticParams,
    phi: Option<&BTreeMap<Verdict, f64>>,
    prev_own: Option<Verdict>,
    n_prev: &BTreeMap<Verdict, u32>,
    n_within: &BTreeMap<Verdict, u32>,
) -> [f64; 5] {
    let mut logits = [0.0f64; 5];
    for (i, v) in Verdict::ALL.iter().enumerate() {
        let mut l = params.theta.get(v).copied().unwrap_or(0.0);
        if let Some(offsets) = phi {
            l += offsets.get(v).copied().unwrap_or(0.0);
        }
        if prev_own == Some(*v) {
            l += params.alpha;
        }
        l += params.gamma_prev * f64::from(n_prev.get(v).copied().unwrap_or(0));
        l += params.gamma_within * f64::from(n_within.get(v).copied().unwrap_or(0));
        logits[i] = l;
    }
    logits
}

pub fn softmax(logits: &[f64; 5]) -> [f64; 5] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0f64; 5];
    let mut total = 0.0;
    for (o, l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in &mut out {
        *o /= total;
    }
    out
}

pub fn synthetic_probabilities(
    params: &SyntheticParams,
    phi: Option<&BTreeMap<Verdict, f64>>,
    prev_own: Option<Verdict>,
    n_prev: &BTreeMap<Verdict, u32>,
    n_within: &BTreeMap<Verdict, u32>,
) -> [f64; 5] {
    softmax(&synthetic_logits(params, phi, prev_own, n_prev, n_within))
}

/// Draw one verdict from the softmax of the model logits.
pub fn synthetic_sample(
    params: &SyntheticParams,
    prev_own: Option<Verdict>,
    n_prev: &BTreeMap<Verdict, u32>,
    n_within: &BTreeMap<Verdict, u32>,
    rng: &mut impl Rng,
) -> Verdict {
    sample_with_phi(params, None, prev_own, n_prev, n_within, rng)
}

pub fn sample_with_phi(
    params: &SyntheticParams,
    phi: Option<&BTreeMap<Verdict, f64>>,
    prev_own: Option<Verdict>,
    n_prev: &BTreeMap<Verdict, u32>,
    n_within: &BTreeMap<Verdict, u32>,
    rng: &mut impl Rng,
) -> Verdict {
    let probs = synthetic_probabilities(params, phi, prev_own, n_prev, n_within);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Verdict::ALL[i];
        }
    }
    // u landed in the rounding tail beyond the accumulated mass
    *Verdict::ALL.last().unwrap()
}

/// Format a turn in the required output contract.
pub fn format_synthetic_turn(
    agent_index: usize,
    round: u32,
    verdict: Verdict,
    explanation: &str,
) -> String {
    format!(
        "I am Agent {agent_index}. This is Round {round}.\nMy current verdict: {verdict}.\n\nHere's my thinking: {explanation}"
    )
}

/// Stochastic agent that plays the generative verdict-choice model. All
/// state it conditions on is re-derived from the delivered context.
#[derive(Debug, Clone)]
pub struct SyntheticConnector {
    params: SyntheticParams,
    phi: Option<BTreeMap<Verdict, f64>>,
    rng: ChaCha8Rng,
}

impl SyntheticConnector {
    pub fn new(params: SyntheticParams, seed: u64) -> SyntheticConnector {
        SyntheticConnector {
            params,
            phi: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Add per-dilemma verdict offsets, folded into the logits.
    pub fn with_phi(mut self, phi: BTreeMap<Verdict, f64>) -> SyntheticConnector {
        self.phi = Some(phi);
        self
    }
}

impl AgentConnector for SyntheticConnector {
    fn invoke(&mut self, ctx: &AgentContext) -> Result<String, ConnectorError> {
        let state = derive_synthetic_state(ctx)?;
        let verdict = sample_with_phi(
            &self.params,
            self.phi.as_ref(),
            state.prev_own,
            &state.n_prev,
            &state.n_within,
            &mut self.rng,
        );
        let explanation = format!(
            "Sampled reasoning for round {} given {} prior peer turns.",
            state.round,
            state.n_prev.values().sum::<u32>() + state.n_within.values().sum::<u32>(),
        );
        Ok(format_synthetic_turn(
            state.agent_index,
            state.round,
            verdict,
            &explanation,
        ))
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    temperature: f64,
    messages: Vec<WireMessage<'a>>,
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    content: String,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireChoiceMessage,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

/// Build the exact request body for a context. Field order is fixed by the
/// struct, so identical contexts produce identical bytes.
pub fn remote_request_body(spec: &RemoteSpec, ctx: &AgentContext) -> String {
    let req = WireRequest {
        model: &spec.model_id,
        temperature: spec.temperature,
        messages: ctx
            .messages()
            .iter()
            .map(|m| WireMessage {
                role: match m.role {
                    Role::System => "system",
                    Role::User => "user",
                    Role::Assistant => "assistant",
                },
                content: &m.content,
            })
            .collect(),
    };
    serde_json::to_string(&req).expect("request serialization cannot fail")
}

/// Chat-endpoint connector speaking one widely adopted completion schema.
pub struct RemoteConnector {
    spec: RemoteSpec,
    api_key: String,
    agent: ureq::Agent,
    last_retries: u32,
}

impl RemoteConnector {
    pub fn from_env(spec: RemoteSpec) -> Result<RemoteConnector, AgentsError> {
        let api_key = std::env::var(&spec.api_key_env)
            .map_err(|_| AgentsError::MissingApiKey(spec.api_key_env.clone()))?;
        Ok(RemoteConnector::with_key(spec, api_key))
    }

    pub fn with_key(spec: RemoteSpec, api_key: String) -> RemoteConnector {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(spec.timeout_secs)))
            .build()
            .into();
        RemoteConnector {
            spec,
            api_key,
            agent,
            last_retries: 0,
        }
    }

    /// Retries performed by the most recent invoke call.
    pub fn retries_of_last_call(&self) -> u32 {
        self.last_retries
    }

    fn attempt(&self, body: &str) -> Result<String, ConnectorError> {
        let result = self
            .agent
            .post(&self.spec.base_url)
            .header("authorization", &format!("Bearer {}", self.api_key))
            .header("content-type", "application/json")
            .send(body);
        let mut response = match result {
            Ok(r) => r,
            Err(ureq::Error::StatusCode(code)) => {
                return Err(match code {
                    401 | 403 => ConnectorError::Auth(format!("http status {code}")),
                    _ => ConnectorError::Transport(format!("http status {code}")),
                });
            }
            Err(ureq::Error::Timeout(reason)) => {
                return Err(ConnectorError::Timeout(reason.to_string()));
            }
            Err(other) => return Err(ConnectorError::Transport(other.to_string())),
        };
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| ConnectorError::Transport(format!("reading body: {e}")))?;
        let parsed: WireResponse = serde_json::from_str(&text)
            .map_err(|e| ConnectorError::Transport(format!("malformed response: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| ConnectorError::Transport("response carries no choices".into()))
    }
}

fn retryable(err: &ConnectorError) -> bool {
    match err {
        ConnectorError::Transport(detail) => {
            // 4xx statuses other than 429 will not improve on retry
            match detail.strip_prefix("http status ") {
                Some(code) => matches!(code.parse::<u16>(), Ok(429) | Ok(500..=599)),
                None => true,
            }
        }
        ConnectorError::Timeout(_) => true,
        _ => false,
    }
}

impl AgentConnector for RemoteConnector {
    fn invoke(&mut self, ctx: &AgentContext) -> Result<String, ConnectorError> {
        let body = remote_request_body(&self.spec, ctx);
        self.last_retries = 0;
        let mut delay = Duration::from_millis(self.spec.backoff_base_ms);
        loop {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(err) => {
                    if !retryable(&err) || self.last_retries >= self.spec.max_retries {
                        return Err(err);
                    }
                    std::thread::sleep(delay);
                    delay = (delay * 2).min(Duration::from_secs(4));
                    self.last_retries += 1;
                }
            }
        }
    }
}
