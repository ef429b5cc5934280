//! Scenario configuration: which protocol runs, who participates, what the
//! adversary does, and what the run is expected to produce.
//!
//! Scenarios load from a line-oriented `key = value` format, one scenario
//! per file, `#` comments allowed. Seeds are mandatory so every run is
//! reproducible; the CLI may supply one when the file does not.

use std::collections::BTreeSet;
use std::str::FromStr;

use thiserror::Error;

use crate::grammar;
use crate::ids::PartyId;
use crate::protocol::{MsgType, SessionStatus};
use crate::sim::{AdversaryConfig, AdversaryMode, Claim, MitmStrategy, RunReport, TapSet};
use crate::transform::{lift, TransformDomain};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("missing required field '{0}'")]
    Missing(&'static str),
    #[error("no seed: set 'seed =' in the scenario, pass --seed, or export MULTILOC_SEED")]
    MissingSeed,
    #[error("unknown party '{0}'")]
    UnknownParty(PartyId),
    #[error("adversary configured on secure link {0}->{1}")]
    AdversaryOnSecureLink(PartyId, PartyId),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtocolKind {
    ThreeStage,
    Modified,
}

/// Which locations hold the inverse transformations in a three-stage run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KnowledgeAssignment {
    /// Each location holds exactly the one directed key it uses.
    #[default]
    Basic,
    /// Main locations hold their full key pair; agents still hold one.
    Distributed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrincipalSpec {
    pub name: PartyId,
    pub agent: PartyId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionSpec {
    pub initiator: PartyId,
    pub responder: PartyId,
    pub message: String,
}

/// What the scenario author expects the run to produce. Extra rejection
/// entries (for example a rejected replay after a clean accept) never fail
/// an `Accepted` expectation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Expectation {
    #[default]
    Accepted,
    Timeout,
    Rejected(SessionStatus),
}

impl Expectation {
    pub fn check(&self, report: &RunReport) -> Result<(), String> {
        let accepts_of = |tag| {
            report
                .outcomes
                .iter()
                .filter(move |o| o.session == Some(tag) && o.status == SessionStatus::Accepted)
        };
        let any_accept = report
            .outcomes
            .iter()
            .any(|o| o.status == SessionStatus::Accepted);
        match self {
            Expectation::Accepted => {
                for session in &report.sessions {
                    let delivered: Vec<_> = accepts_of(session.tag).collect();
                    if delivered.len() != 1 {
                        return Err(format!(
                            "session {} accepted {} times, expected exactly once",
                            session.tag,
                            delivered.len()
                        ));
                    }
                    if delivered[0].delivered.as_deref() != Some(session.message.as_str()) {
                        return Err(format!(
                            "session {} delivered {:?}, expected {:?}",
                            session.tag, delivered[0].delivered, session.message
                        ));
                    }
                }
                Ok(())
            }
            Expectation::Timeout => {
                if any_accept {
                    return Err("expected timeouts but a session accepted".to_string());
                }
                for session in &report.sessions {
                    let statuses: Vec<SessionStatus> = report
                        .outcomes
                        .iter()
                        .filter(|o| o.session == Some(session.tag))
                        .map(|o| o.status)
                        .collect();
                    if statuses != [SessionStatus::Timeout] {
                        return Err(format!(
                            "session {} ended {:?}, expected a single timeout",
                            session.tag, statuses
                        ));
                    }
                }
                Ok(())
            }
            Expectation::Rejected(status) => {
                if any_accept {
                    return Err(format!(
                        "expected a {} rejection but a session accepted",
                        status
                    ));
                }
                if report.outcomes.iter().any(|o| o.status == *status) {
                    Ok(())
                } else {
                    Err(format!("no outcome with status {}", status))
                }
            }
        }
    }
}

impl FromStr for Expectation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "accepted" => Ok(Expectation::Accepted),
            "timeout" => Ok(Expectation::Timeout),
            other => {
                let status: SessionStatus = other.parse()?;
                if status == SessionStatus::Accepted || status == SessionStatus::Timeout {
                    Ok(match status {
                        SessionStatus::Accepted => Expectation::Accepted,
                        _ => Expectation::Timeout,
                    })
                } else {
                    Ok(Expectation::Rejected(status))
                }
            }
        }
    }
}

/// A full simulation input. Identical configs with identical seeds replay
/// identically.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub protocol: ProtocolKind,
    pub seed: u64,
    pub chunk_width: u8,
    pub char_width: u8,
    pub modulus: u64,
    pub key_a: Option<u64>,
    pub key_b: Option<u64>,
    pub knowledge: KnowledgeAssignment,
    pub principals: Vec<PrincipalSpec>,
    pub sessions: Vec<SessionSpec>,
    pub delta: u64,
    pub timeout: u64,
    pub latency: u64,
    pub latency_overrides: Vec<((PartyId, PartyId), u64)>,
    pub adversary: AdversaryConfig,
    pub expect: Expectation,
    pub claims: Vec<Claim>,
}

impl ScenarioConfig {
    fn base(protocol: ProtocolKind, message: &str, seed: u64) -> Self {
        let a = PartyId::new("A");
        let b = PartyId::new("B");
        ScenarioConfig {
            protocol,
            seed,
            chunk_width: 3,
            char_width: 7,
            modulus: crate::transform::BYTE_MODULUS,
            key_a: None,
            key_b: None,
            knowledge: KnowledgeAssignment::Basic,
            principals: vec![
                PrincipalSpec {
                    name: a.clone(),
                    agent: PartyId::new("AA"),
                },
                PrincipalSpec {
                    name: b.clone(),
                    agent: PartyId::new("BB"),
                },
            ],
            sessions: vec![SessionSpec {
                initiator: a,
                responder: b,
                message: message.to_string(),
            }],
            delta: 10,
            timeout: 50,
            latency: 1,
            latency_overrides: Vec::new(),
            adversary: AdversaryConfig::none(),
            expect: Expectation::Accepted,
            claims: Vec::new(),
        }
    }

    /// A default five-step run of `message` between A and B.
    pub fn modified(message: &str, chunk_width: u8, seed: u64) -> Self {
        let mut cfg = Self::base(ProtocolKind::Modified, message, seed);
        cfg.chunk_width = chunk_width;
        cfg
    }

    /// A default three-stage run with generated keys.
    pub fn three_stage(message: &str, modulus: u64, seed: u64) -> Self {
        let mut cfg = Self::base(ProtocolKind::ThreeStage, message, seed);
        cfg.modulus = modulus;
        cfg
    }

    /// A three-stage run with pinned exponents.
    pub fn three_stage_with_keys(
        message: &str,
        modulus: u64,
        key_a: u64,
        key_b: u64,
        seed: u64,
    ) -> Self {
        let mut cfg = Self::three_stage(message, modulus, seed);
        cfg.key_a = Some(key_a);
        cfg.key_b = Some(key_b);
        cfg
    }

    pub fn with_adversary(mut self, mode: AdversaryMode) -> Self {
        self.adversary = AdversaryConfig { mode, seed: None };
        self
    }

    fn node_ids(&self) -> BTreeSet<PartyId> {
        let mut ids = BTreeSet::new();
        for p in &self.principals {
            ids.insert(p.name.clone());
            ids.insert(p.agent.clone());
        }
        if self.protocol == ProtocolKind::Modified {
            ids.insert(PartyId::kdc());
        }
        ids
    }

    fn secure_pairs(&self) -> BTreeSet<(PartyId, PartyId)> {
        self.principals
            .iter()
            .map(|p| {
                if p.name <= p.agent {
                    (p.name.clone(), p.agent.clone())
                } else {
                    (p.agent.clone(), p.name.clone())
                }
            })
            .collect()
    }

    fn check_link(&self, from: &PartyId, to: &PartyId) -> Result<(), ConfigError> {
        let nodes = self.node_ids();
        for id in [from, to] {
            if !nodes.contains(id) {
                return Err(ConfigError::UnknownParty(id.clone()));
            }
        }
        let key = if from <= to {
            (from.clone(), to.clone())
        } else {
            (to.clone(), from.clone())
        };
        if self.secure_pairs().contains(&key) {
            return Err(ConfigError::AdversaryOnSecureLink(from.clone(), to.clone()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(1..=7).contains(&self.chunk_width) {
            return Err(ConfigError::Invalid(format!(
                "chunk_width {} outside 1..=7",
                self.chunk_width
            )));
        }
        if !(1..=8).contains(&self.char_width) {
            return Err(ConfigError::Invalid(format!(
                "char_width {} outside 1..=8",
                self.char_width
            )));
        }
        if self.chunk_width > self.char_width {
            return Err(ConfigError::Invalid(format!(
                "chunk_width {} exceeds char_width {}",
                self.chunk_width, self.char_width
            )));
        }
        if self.delta == 0 {
            return Err(ConfigError::Invalid("delta must be positive".to_string()));
        }
        if self.latency == 0 {
            return Err(ConfigError::Invalid("latency must be positive".to_string()));
        }
        if self.principals.is_empty() {
            return Err(ConfigError::Missing("principal"));
        }
        let mut seen = BTreeSet::new();
        for p in &self.principals {
            if p.name == p.agent {
                return Err(ConfigError::Invalid(format!(
                    "principal {} cannot be its own agent",
                    p.name
                )));
            }
            for id in [&p.name, &p.agent] {
                if !seen.insert(id.clone()) {
                    return Err(ConfigError::Invalid(format!("duplicate party '{}'", id)));
                }
                if *id == PartyId::kdc() || *id == PartyId::adversary() {
                    return Err(ConfigError::Invalid(format!("reserved party name '{}'", id)));
                }
            }
        }
        if self.sessions.is_empty() {
            return Err(ConfigError::Missing("message"));
        }
        let principal_names: BTreeSet<&PartyId> =
            self.principals.iter().map(|p| &p.name).collect();
        let mut initiators = BTreeSet::new();
        let mut responders = BTreeSet::new();
        for s in &self.sessions {
            for id in [&s.initiator, &s.responder] {
                if !principal_names.contains(id) {
                    return Err(ConfigError::UnknownParty(id.clone()));
                }
            }
            if s.initiator == s.responder {
                return Err(ConfigError::Invalid(format!(
                    "session from {} to itself",
                    s.initiator
                )));
            }
            initiators.insert(s.initiator.clone());
            responders.insert(s.responder.clone());
        }
        if let Some(both) = initiators.intersection(&responders).next() {
            return Err(ConfigError::Invalid(format!(
                "principal {} both initiates and responds; use separate principals",
                both
            )));
        }
        match self.protocol {
            ProtocolKind::Modified => {
                for s in &self.sessions {
                    if grammar::text_to_bits(&s.message, self.char_width).is_err() {
                        return Err(ConfigError::Invalid(format!(
                            "message {:?} does not fit {}-bit characters",
                            s.message, self.char_width
                        )));
                    }
                }
            }
            ProtocolKind::ThreeStage => {
                if self.sessions.len() != 1 {
                    return Err(ConfigError::Invalid(
                        "the three-stage protocol runs one session per scenario".to_string(),
                    ));
                }
                let domain = TransformDomain::new(self.modulus)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                if lift(self.sessions[0].message.as_bytes(), domain).is_err() {
                    return Err(ConfigError::Invalid(format!(
                        "modulus {} cannot lift the message bytes",
                        self.modulus
                    )));
                }
            }
        }
        let nodes = self.node_ids();
        for ((x, y), latency) in &self.latency_overrides {
            if *latency == 0 {
                return Err(ConfigError::Invalid("latency must be positive".to_string()));
            }
            for id in [x, y] {
                if !nodes.contains(id) {
                    return Err(ConfigError::UnknownParty(id.clone()));
                }
            }
        }
        match &self.adversary.mode {
            AdversaryMode::None => {}
            AdversaryMode::Eavesdrop { taps } => {
                if let TapSet::Links(links) = taps {
                    for (from, to) in links {
                        self.check_link(from, to)?;
                    }
                }
            }
            AdversaryMode::Replay { .. } => {}
            AdversaryMode::Mitm { link: (from, to), .. } => self.check_link(from, to)?,
            AdversaryMode::DosDrop { link, target, rate } => {
                if !(0.0..=1.0).contains(rate) {
                    return Err(ConfigError::Invalid(format!(
                        "drop rate {} outside 0..=1",
                        rate
                    )));
                }
                if let Some((from, to)) = link {
                    self.check_link(from, to)?;
                }
                if let Some(target) = target {
                    if !nodes.contains(target) {
                        return Err(ConfigError::UnknownParty(target.clone()));
                    }
                }
            }
            AdversaryMode::DosFlood { target, rate } => {
                if *rate == 0 {
                    return Err(ConfigError::Invalid("flood rate must be positive".to_string()));
                }
                if !nodes.contains(target) {
                    return Err(ConfigError::UnknownParty(target.clone()));
                }
            }
        }
        Ok(())
    }

    /// Parses the scenario text. The seed resolution order is: `override_seed`
    /// (command line), the file's `seed =` line, then `fallback_seed` (the
    /// environment).
    pub fn parse(
        text: &str,
        override_seed: Option<u64>,
        fallback_seed: Option<u64>,
    ) -> Result<Self, ConfigError> {
        let mut protocol = ProtocolKind::Modified;
        let mut seed: Option<u64> = None;
        let mut message: Option<String> = None;
        let mut chunk_width = 3u8;
        let mut char_width = 7u8;
        let mut modulus = crate::transform::BYTE_MODULUS;
        let mut key_a = None;
        let mut key_b = None;
        let mut knowledge = KnowledgeAssignment::Basic;
        let mut principals: Vec<PrincipalSpec> = Vec::new();
        let mut sessions: Vec<SessionSpec> = Vec::new();
        let mut delta = 10u64;
        let mut timeout: Option<u64> = None;
        let mut latency = 1u64;
        let mut latency_overrides = Vec::new();
        let mut adversary = AdversaryConfig::none();
        let mut expect = Expectation::Accepted;
        let mut claims = Vec::new();

        for (line_no, raw) in text.lines().enumerate() {
            let line_no = line_no + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: String| ConfigError::Parse {
                line: line_no,
                reason,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad("expected 'key = value'".to_string()))?;
            let key = key.trim();
            let value = value.trim();
            match key {
                "protocol" => {
                    protocol = match value {
                        "modified" => ProtocolKind::Modified,
                        "three_stage" => ProtocolKind::ThreeStage,
                        other => return Err(bad(format!("unknown protocol '{}'", other))),
                    }
                }
                "seed" => seed = Some(parse_num(value).map_err(bad)?),
                "message" => message = Some(unquote(value)),
                "chunk_width" => chunk_width = parse_num(value).map_err(bad)?,
                "char_width" => char_width = parse_num(value).map_err(bad)?,
                "modulus" => modulus = parse_num(value).map_err(bad)?,
                "key_a" => key_a = Some(parse_num(value).map_err(bad)?),
                "key_b" => key_b = Some(parse_num(value).map_err(bad)?),
                "knowledge" => {
                    knowledge = match value {
                        "basic" => KnowledgeAssignment::Basic,
                        "distributed" => KnowledgeAssignment::Distributed,
                        other => return Err(bad(format!("unknown knowledge '{}'", other))),
                    }
                }
                "principal" => principals.push(parse_principal(value).map_err(bad)?),
                "session" => sessions.push(parse_session(value).map_err(bad)?),
                "delta" => delta = parse_num(value).map_err(bad)?,
                "timeout" => timeout = Some(parse_num(value).map_err(bad)?),
                "latency" => latency = parse_num(value).map_err(bad)?,
                "link_latency" => latency_overrides.push(parse_link_latency(value).map_err(bad)?),
                "adversary" => adversary = parse_adversary(value).map_err(bad)?,
                "expect" => expect = value.parse().map_err(bad)?,
                "claims" => {
                    claims = value
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| s.parse::<Claim>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(bad)?
                }
                other => return Err(bad(format!("unknown key '{}'", other))),
            }
        }

        let seed = override_seed
            .or(seed)
            .or(fallback_seed)
            .ok_or(ConfigError::MissingSeed)?;
        if principals.is_empty() {
            principals = vec![
                PrincipalSpec {
                    name: PartyId::new("A"),
                    agent: PartyId::new("AA"),
                },
                PrincipalSpec {
                    name: PartyId::new("B"),
                    agent: PartyId::new("BB"),
                },
            ];
        }
        if sessions.is_empty() {
            let message = message.ok_or(ConfigError::Missing("message"))?;
            sessions = vec![SessionSpec {
                initiator: PartyId::new("A"),
                responder: PartyId::new("B"),
                message,
            }];
        }
        let cfg = ScenarioConfig {
            protocol,
            seed,
            chunk_width,
            char_width,
            modulus,
            key_a,
            key_b,
            knowledge,
            principals,
            sessions,
            delta,
            timeout: timeout.unwrap_or(5 * delta),
            latency,
            latency_overrides,
            adversary,
            expect,
            claims,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_num<T: FromStr>(value: &str) -> Result<T, String> {
    value
        .parse::<T>()
        .map_err(|_| format!("bad number '{}'", value))
}

fn unquote(value: &str) -> String {
    let value = value.trim();
    if value.len() >= 2 && value.starts_with('"') && value.ends_with('"') {
        value[1..value.len() - 1].to_string()
    } else {
        value.to_string()
    }
}

/// `A agent=AA`
fn parse_principal(value: &str) -> Result<PrincipalSpec, String> {
    let mut fields = value.split_whitespace();
    let name = fields.next().ok_or("principal needs a name")?;
    let agent = fields
        .next()
        .and_then(|f| f.strip_prefix("agent="))
        .ok_or("principal needs 'agent=<id>'")?;
    if fields.next().is_some() {
        return Err(format!("trailing input in principal '{}'", value));
    }
    Ok(PrincipalSpec {
        name: PartyId::new(name),
        agent: PartyId::new(agent),
    })
}

/// `A -> B : message text`
fn parse_session(value: &str) -> Result<SessionSpec, String> {
    let (route, message) = value
        .split_once(':')
        .ok_or("session needs '<from> -> <to> : <message>'")?;
    let (from, to) = route
        .split_once("->")
        .ok_or("session needs '<from> -> <to>'")?;
    Ok(SessionSpec {
        initiator: PartyId::new(from.trim()),
        responder: PartyId::new(to.trim()),
        message: unquote(message.trim_start()),
    })
}

fn parse_directed_link(value: &str) -> Result<(PartyId, PartyId), String> {
    let (from, to) = value
        .split_once("->")
        .ok_or_else(|| format!("bad link '{}': expected '<from>-><to>'", value))?;
    Ok((PartyId::new(from.trim()), PartyId::new(to.trim())))
}

/// `BB->KDC : 12`
fn parse_link_latency(value: &str) -> Result<((PartyId, PartyId), u64), String> {
    let (link, latency) = value
        .split_once(':')
        .ok_or("link_latency needs '<from>-><to> : <ticks>'")?;
    Ok((
        parse_directed_link(link.trim())?,
        parse_num(latency.trim())?,
    ))
}

fn parse_adversary(value: &str) -> Result<AdversaryConfig, String> {
    let mut fields = value.split_whitespace();
    let mode_name = fields.next().ok_or("adversary needs a mode")?;
    let mut args: Vec<(&str, &str)> = Vec::new();
    for field in fields {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| format!("bad adversary field '{}'", field))?;
        args.push((k, v));
    }
    let take = |name: &str| args.iter().find(|(k, _)| *k == name).map(|(_, v)| *v);
    let mode = match mode_name {
        "none" => AdversaryMode::None,
        "eavesdrop" => {
            let taps = match take("links") {
                None | Some("all") => TapSet::AllInsecure,
                Some(list) => TapSet::Links(
                    list.split(',')
                        .map(parse_directed_link)
                        .collect::<Result<Vec<_>, _>>()?,
                ),
            };
            AdversaryMode::Eavesdrop { taps }
        }
        "replay" => AdversaryMode::Replay {
            msg_type: take("msg")
                .ok_or("replay needs msg=<TYPE>")?
                .parse::<MsgType>()?,
            delay: parse_num(take("delay").unwrap_or("1"))?,
        },
        "mitm" => AdversaryMode::Mitm {
            link: parse_directed_link(take("link").ok_or("mitm needs link=<from>-><to>")?)?,
            strategy: match take("strategy").unwrap_or("substitute") {
                "relay" => MitmStrategy::Relay,
                "substitute" => MitmStrategy::Substitute,
                "suppress" => MitmStrategy::Suppress,
                other => return Err(format!("unknown mitm strategy '{}'", other)),
            },
        },
        "dos" => {
            if let Some(rate) = take("flood") {
                AdversaryMode::DosFlood {
                    target: PartyId::new(take("target").ok_or("dos flood needs target=<party>")?),
                    rate: parse_num(rate)?,
                }
            } else if let Some(rate) = take("drop") {
                AdversaryMode::DosDrop {
                    link: take("link").map(parse_directed_link).transpose()?,
                    target: take("target").map(PartyId::new),
                    rate: parse_num(rate)?,
                }
            } else {
                return Err("dos needs flood=<rate> or drop=<rate>".to_string());
            }
        }
        other => return Err(format!("unknown adversary mode '{}'", other)),
    };
    let seed = take("seed").map(parse_num).transpose()?;
    Ok(AdversaryConfig { mode, seed })
}
