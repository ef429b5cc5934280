//! Deterministic seeded network simulation.
//!
//! One simulation is a single-threaded event loop over timed deliveries.
//! Links between a principal's own locations are secure; every other link is
//! open to the configured adversary, which may record, replay, modify, drop,
//! or starve traffic crossing it, and nothing else. The transcript records
//! every resolved traversal: deliveries at their arrival tick, losses at the
//! tick the link was crossed. Identical (scenario, seed) pairs produce
//! byte-identical transcripts.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envelope::{Atom, KeyId, KeyRegistry, LogicalClock, NonceSource, SymKey, Term};
use crate::grammar::{self, ChunkGrammar, ProductionSequence};
use crate::ids::{PartyId, SessionTag};
use crate::protocol::{
    DeclaredSession, InitiatorAgent, InitiatorMain, Kdc, Launch, MsgType, PartyNode,
    ProtocolEnv, ProtocolMessage, ResponderAgent, ResponderMain, SessionOutcome, SessionStatus,
    StepOutput, TsFinisher, TsRelay, TsSender,
};
use crate::scenario::{
    ConfigError, KnowledgeAssignment, ProtocolKind, ScenarioConfig,
};
use crate::share::{self, Share, ShareRole};
use crate::transform::{TransformDomain, TransformKey};

/// An undirected link between two nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Link {
    pub a: PartyId,
    pub b: PartyId,
    pub secure: bool,
    pub latency: u64,
}

fn link_key(x: &PartyId, y: &PartyId) -> (PartyId, PartyId) {
    if x <= y {
        (x.clone(), y.clone())
    } else {
        (y.clone(), x.clone())
    }
}

/// Which insecure links a passive adversary records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TapSet {
    AllInsecure,
    Links(Vec<(PartyId, PartyId)>),
}

impl TapSet {
    fn matches(&self, sender: &PartyId, receiver: &PartyId) -> bool {
        match self {
            TapSet::AllInsecure => true,
            TapSet::Links(links) => links
                .iter()
                .any(|(from, to)| from == sender && to == receiver),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MitmStrategy {
    Relay,
    Substitute,
    Suppress,
}

/// What the adversary does to insecure-link traffic.
#[derive(Debug, Clone, PartialEq)]
pub enum AdversaryMode {
    None,
    Eavesdrop {
        taps: TapSet,
    },
    Replay {
        msg_type: MsgType,
        delay: u64,
    },
    Mitm {
        link: (PartyId, PartyId),
        strategy: MitmStrategy,
    },
    /// Drops traversals with the given probability, on one directed link or
    /// around one party.
    DosDrop {
        link: Option<(PartyId, PartyId)>,
        target: Option<PartyId>,
        rate: f64,
    },
    /// Saturates the target's inbound queue: junk arrives at `rate` per tick
    /// against a service rate of one, so real deliveries queue behind a
    /// backlog that grows without bound and slip past the timeout horizon.
    DosFlood {
        target: PartyId,
        rate: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversaryConfig {
    pub mode: AdversaryMode,
    /// Randomness for adversary decisions; derived from the scenario seed
    /// when absent.
    pub seed: Option<u64>,
}

impl AdversaryConfig {
    pub fn none() -> Self {
        AdversaryConfig {
            mode: AdversaryMode::None,
            seed: None,
        }
    }
}

/// Per-event adversary action tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvTag {
    None,
    Tap,
    Relay,
    Drop,
    Suppress,
    Substitute,
    Replay,
    Starved,
    Delayed(u64),
}

impl AdvTag {
    /// True when the message still reached its receiver.
    fn delivered(self) -> bool {
        !matches!(self, AdvTag::Drop | AdvTag::Suppress | AdvTag::Starved)
    }
}

impl fmt::Display for AdvTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdvTag::None => f.write_str("-"),
            AdvTag::Tap => f.write_str("tap"),
            AdvTag::Relay => f.write_str("relay"),
            AdvTag::Drop => f.write_str("drop"),
            AdvTag::Suppress => f.write_str("suppress"),
            AdvTag::Substitute => f.write_str("subst"),
            AdvTag::Replay => f.write_str("replay"),
            AdvTag::Starved => f.write_str("starved"),
            AdvTag::Delayed(n) => write!(f, "delayed+{}", n),
        }
    }
}

/// One resolved traversal. The payload is kept for analysis; the rendered
/// line format carries only its digest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEvent {
    pub seq: u64,
    pub tick: u64,
    pub sender: PartyId,
    pub receiver: PartyId,
    pub secure: bool,
    pub msg_type: MsgType,
    pub digest: String,
    pub adversary: AdvTag,
    pub payload: Term,
}

impl fmt::Display for TranscriptEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}|{}|{}->{}|secure:{}|{}|{}|adv:{}",
            self.seq,
            self.tick,
            self.sender,
            self.receiver,
            u8::from(self.secure),
            self.msg_type,
            self.digest,
            self.adversary
        )
    }
}

/// The ordered event log of one run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    events: Vec<TranscriptEvent>,
}

impl Transcript {
    pub fn events(&self) -> &[TranscriptEvent] {
        &self.events
    }

    /// One event per line, the normative wire format.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for event in &self.events {
            out.push_str(&event.to_string());
            out.push('\n');
        }
        out
    }
}

/// Everything the adversary ended the run holding.
#[derive(Debug, Clone, Default)]
pub struct AdversaryView {
    pub observed: Vec<Term>,
    pub keys: BTreeSet<KeyId>,
}

/// Output of one simulation.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub transcript: Transcript,
    pub outcomes: Vec<SessionOutcome>,
    pub sessions: Vec<DeclaredSession>,
    pub adversary: AdversaryView,
    /// Final key registry, including session keys and their allowed holders.
    pub registry: KeyRegistry,
    /// Final envelope-key holdings per node, for the confinement audit.
    pub key_holdings: Vec<(PartyId, BTreeSet<KeyId>)>,
}

struct Delivery {
    at: u64,
    order: u64,
    msg: ProtocolMessage,
    tag: AdvTag,
}

impl PartialEq for Delivery {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.order == other.order
    }
}

impl Eq for Delivery {}

impl PartialOrd for Delivery {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Delivery {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap, we want earliest first.
        (other.at, other.order).cmp(&(self.at, self.order))
    }
}

struct AdversaryState {
    mode: AdversaryMode,
    rng: ChaCha8Rng,
    observed: Vec<Term>,
    observed_set: BTreeSet<Term>,
    keys: BTreeSet<KeyId>,
    own_key: Option<KeyId>,
    replayed: bool,
    flood_backlog_per_tick: u64,
}

impl AdversaryState {
    fn observe(&mut self, payload: &Term) {
        if self.observed_set.insert(payload.clone()) {
            self.observed.push(payload.clone());
        }
    }
}

/// Deterministically damages a payload: flip the first clear atom, or
/// re-wrap the first ciphertext under the adversary's own key.
fn perturb(term: &Term, adversary_key: &KeyId) -> Term {
    fn flip_atom(atom: &Atom) -> Option<Atom> {
        match atom {
            Atom::Party(_) => Some(Atom::Party(PartyId::adversary())),
            Atom::Nonce(n) => Some(Atom::Nonce(crate::envelope::Nonce {
                value: n.value.wrapping_add(1),
                issuer: n.issuer.clone(),
            })),
            Atom::Time(t) => Some(Atom::Time(crate::envelope::Timestamp(t.tick() + 1))),
            Atom::Share(s) => {
                let mut s = s.clone();
                if let Some(first) = s.tokens.first_mut() {
                    *first = first.wrapping_add(1);
                } else {
                    s.total_length += 1;
                }
                Some(Atom::Share(s))
            }
            Atom::Stream(s) => {
                let domain = s.domain();
                let mut elements = s.elements().to_vec();
                match elements.first_mut() {
                    Some(first) => {
                        *first = if *first + 1 >= domain.modulus() {
                            1
                        } else {
                            *first + 1
                        }
                    }
                    None => elements.push(1),
                }
                Some(Atom::Stream(
                    crate::transform::SymbolStream::new(elements, domain)
                        .expect("perturbed elements stay in range"),
                ))
            }
            Atom::Key(_) | Atom::Sequence(_) | Atom::Text(_) => None,
        }
    }
    fn flip_first(term: &Term) -> Option<Term> {
        match term {
            Term::Atom(atom) => flip_atom(atom).map(Term::Atom),
            Term::Tuple(parts) => {
                for (i, part) in parts.iter().enumerate() {
                    if let Some(flipped) = flip_first(part) {
                        let mut parts = parts.clone();
                        parts[i] = flipped;
                        return Some(Term::Tuple(parts));
                    }
                }
                None
            }
            Term::Enc(_, _) => None,
        }
    }
    fn wrap_first(term: &Term, key: &KeyId) -> Option<Term> {
        match term {
            Term::Enc(_, _) => Some(Term::Enc(key.clone(), Box::new(term.clone()))),
            Term::Tuple(parts) => {
                for (i, part) in parts.iter().enumerate() {
                    if let Some(wrapped) = wrap_first(part, key) {
                        let mut parts = parts.clone();
                        parts[i] = wrapped;
                        return Some(Term::Tuple(parts));
                    }
                }
                None
            }
            Term::Atom(_) => None,
        }
    }
    flip_first(term)
        .or_else(|| wrap_first(term, adversary_key))
        .unwrap_or_else(|| term.clone())
}

pub(crate) struct World {
    nodes: BTreeMap<PartyId, PartyNode>,
    links: BTreeMap<(PartyId, PartyId), Link>,
    sessions: Vec<DeclaredSession>,
    activation_order: Vec<PartyId>,
    registry: KeyRegistry,
    nonces: NonceSource,
    rng: ChaCha8Rng,
    adversary: AdversaryState,
    delta: u64,
    horizon: u64,
}

pub(crate) fn build_world(cfg: &ScenarioConfig) -> Result<World, ConfigError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut registry = KeyRegistry::new();
    let kdc = PartyId::kdc();

    let mut sessions = Vec::new();
    for spec in &cfg.sessions {
        sessions.push(DeclaredSession {
            tag: SessionTag::new(rng.next_u64()),
            initiator: spec.initiator.clone(),
            responder: spec.responder.clone(),
            message: spec.message.clone(),
        });
    }

    let agent_of: BTreeMap<PartyId, PartyId> = cfg
        .principals
        .iter()
        .map(|p| (p.name.clone(), p.agent.clone()))
        .collect();
    let mut nodes: BTreeMap<PartyId, PartyNode> = BTreeMap::new();
    let mut activation_order = Vec::new();

    match cfg.protocol {
        ProtocolKind::Modified => {
            for principal in &cfg.principals {
                let key_id = KeyId::long_term(&principal.name);
                registry
                    .register(SymKey {
                        id: key_id.clone(),
                        owners: BTreeSet::from([
                            principal.name.clone(),
                            principal.agent.clone(),
                            kdc.clone(),
                        ]),
                    })
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            }
            let grammar = ChunkGrammar::new(cfg.chunk_width)
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            let main_node_of: BTreeMap<PartyId, PartyId> = cfg
                .principals
                .iter()
                .map(|p| (p.name.clone(), p.name.clone()))
                .collect();
            let mut principal_of: BTreeMap<PartyId, PartyId> = BTreeMap::new();
            for p in &cfg.principals {
                principal_of.insert(p.name.clone(), p.name.clone());
                principal_of.insert(p.agent.clone(), p.name.clone());
            }
            for principal in &cfg.principals {
                let launches: Vec<Launch> = sessions
                    .iter()
                    .filter(|s| s.initiator == principal.name)
                    .map(|s| Launch {
                        tag: s.tag,
                        responder: s.responder.clone(),
                        responder_agent: agent_of[&s.responder].clone(),
                        message: s.message.clone(),
                    })
                    .collect();
                let responds = sessions.iter().any(|s| s.responder == principal.name);
                let key_id = KeyId::long_term(&principal.name);
                if !launches.is_empty() {
                    activation_order.push(principal.name.clone());
                    nodes.insert(
                        principal.name.clone(),
                        PartyNode::InitiatorMain(InitiatorMain::new(
                            principal.name.clone(),
                            principal.agent.clone(),
                            key_id.clone(),
                            grammar.clone(),
                            cfg.char_width,
                            launches,
                        )),
                    );
                    nodes.insert(
                        principal.agent.clone(),
                        PartyNode::InitiatorAgent(InitiatorAgent::new(
                            principal.agent.clone(),
                            principal.name.clone(),
                            key_id,
                            main_node_of.clone(),
                        )),
                    );
                } else if responds {
                    nodes.insert(
                        principal.name.clone(),
                        PartyNode::ResponderMain(ResponderMain::new(
                            principal.name.clone(),
                            principal.agent.clone(),
                            key_id.clone(),
                            grammar.clone(),
                            cfg.char_width,
                        )),
                    );
                    nodes.insert(
                        principal.agent.clone(),
                        PartyNode::ResponderAgent(ResponderAgent::new(
                            principal.agent.clone(),
                            principal.name.clone(),
                            principal.name.clone(),
                            key_id,
                        )),
                    );
                } else {
                    return Err(ConfigError::Invalid(format!(
                        "principal {} neither initiates nor responds",
                        principal.name
                    )));
                }
            }
            let long_term_of = cfg
                .principals
                .iter()
                .map(|p| (p.name.clone(), KeyId::long_term(&p.name)))
                .collect();
            nodes.insert(
                kdc.clone(),
                PartyNode::Kdc(Kdc::new(long_term_of, principal_of, agent_of.clone())),
            );
        }
        ProtocolKind::ThreeStage => {
            let domain = TransformDomain::new(cfg.modulus)
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            let key_a = match cfg.key_a {
                Some(a) => TransformKey::new(domain, a)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?,
                None => TransformKey::generate(domain, &mut rng),
            };
            let key_b = match cfg.key_b {
                Some(b) => TransformKey::new(domain, b)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?,
                None => TransformKey::generate(domain, &mut rng),
            };
            let session = sessions.first().ok_or(ConfigError::Missing("session"))?;
            let initiator = &session.initiator;
            let responder = &session.responder;
            let initiator_agent = agent_of[initiator].clone();
            let responder_agent = agent_of[responder].clone();
            // Knowledge assignment: the distributed variant leaves the full
            // key pair at the principals' main locations.
            let (sender_keys, finisher_keys) = match cfg.knowledge {
                KnowledgeAssignment::Basic => {
                    (vec![key_a.forward()], vec![key_b.inverse()])
                }
                KnowledgeAssignment::Distributed => (
                    vec![key_a.forward(), key_a.inverse()],
                    vec![key_b.forward(), key_b.inverse()],
                ),
            };
            activation_order.push(initiator.clone());
            nodes.insert(
                initiator.clone(),
                PartyNode::TsSender(TsSender {
                    me: initiator.clone(),
                    responder_agent: responder_agent.clone(),
                    key: key_a.forward(),
                    domain,
                    launch: Some((session.tag, session.message.clone())),
                    directed_keys: sender_keys,
                }),
            );
            nodes.insert(
                responder_agent.clone(),
                PartyNode::TsRelay(TsRelay {
                    me: responder_agent,
                    next_hop: initiator_agent.clone(),
                    key: key_b.forward(),
                    accepts: MsgType::Ts1,
                    emits: MsgType::Ts2,
                    directed_keys: vec![key_b.forward()],
                }),
            );
            nodes.insert(
                initiator_agent.clone(),
                PartyNode::TsRelay(TsRelay {
                    me: initiator_agent,
                    next_hop: responder.clone(),
                    key: key_a.inverse(),
                    accepts: MsgType::Ts2,
                    emits: MsgType::Ts3,
                    directed_keys: vec![key_a.inverse()],
                }),
            );
            nodes.insert(
                responder.clone(),
                PartyNode::TsFinisher(TsFinisher {
                    me: responder.clone(),
                    key: key_b.inverse(),
                    session: session.tag,
                    directed_keys: finisher_keys,
                }),
            );
        }
    }

    // Secure intra-principal pairs, insecure everything else.
    let mut links = BTreeMap::new();
    let secure_pairs: BTreeSet<(PartyId, PartyId)> = cfg
        .principals
        .iter()
        .map(|p| link_key(&p.name, &p.agent))
        .collect();
    let node_ids: Vec<PartyId> = nodes.keys().cloned().collect();
    for (i, x) in node_ids.iter().enumerate() {
        for y in node_ids.iter().skip(i + 1) {
            let key = link_key(x, y);
            let secure = secure_pairs.contains(&key);
            let latency = cfg
                .latency_overrides
                .iter()
                .find(|(pair, _)| link_key(&pair.0, &pair.1) == key)
                .map(|(_, latency)| *latency)
                .unwrap_or(cfg.latency);
            links.insert(
                key.clone(),
                Link {
                    a: key.0,
                    b: key.1,
                    secure,
                    latency,
                },
            );
        }
    }

    let mut adversary = AdversaryState {
        mode: cfg.adversary.mode.clone(),
        rng: ChaCha8Rng::seed_from_u64(cfg.adversary.seed.unwrap_or(cfg.seed ^ 0x00ad_beef)),
        observed: Vec::new(),
        observed_set: BTreeSet::new(),
        keys: BTreeSet::new(),
        own_key: None,
        replayed: false,
        flood_backlog_per_tick: 0,
    };
    if matches!(
        cfg.adversary.mode,
        AdversaryMode::Mitm {
            strategy: MitmStrategy::Substitute,
            ..
        }
    ) {
        let own = KeyId::new("K_EVE");
        registry
            .register(SymKey {
                id: own.clone(),
                owners: BTreeSet::from([PartyId::adversary()]),
            })
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        adversary.keys.insert(own.clone());
        adversary.own_key = Some(own);
    }
    if let AdversaryMode::DosFlood { rate, .. } = cfg.adversary.mode {
        adversary.flood_backlog_per_tick = rate.saturating_sub(1);
    }

    Ok(World {
        nodes,
        links,
        sessions,
        activation_order,
        registry,
        nonces: NonceSource::new(),
        rng,
        adversary,
        delta: cfg.delta,
        horizon: cfg.timeout,
    })
}

/// Mutable run state: the world plus the delivery queue, clock, transcript,
/// and outcome log.
struct Runtime {
    world: World,
    clock: LogicalClock,
    queue: BinaryHeap<Delivery>,
    next_order: u64,
    next_seq: u64,
    transcript: Transcript,
    outcomes: Vec<SessionOutcome>,
}

impl Runtime {
    fn new(world: World) -> Self {
        Runtime {
            world,
            clock: LogicalClock::default(),
            queue: BinaryHeap::new(),
            next_order: 0,
            next_seq: 0,
            transcript: Transcript::default(),
            outcomes: Vec::new(),
        }
    }

    fn record(&mut self, msg: &ProtocolMessage, tick: u64, secure: bool, tag: AdvTag) -> u64 {
        self.next_seq += 1;
        self.transcript.events.push(TranscriptEvent {
            seq: self.next_seq,
            tick,
            sender: msg.sender.clone(),
            receiver: msg.receiver.clone(),
            secure,
            msg_type: msg.msg_type,
            digest: msg.payload.digest(),
            adversary: tag,
            payload: msg.payload.clone(),
        });
        self.next_seq
    }

    fn schedule(&mut self, msg: ProtocolMessage, at: u64, tag: AdvTag) {
        self.next_order += 1;
        self.queue.push(Delivery {
            at,
            order: self.next_order,
            msg,
            tag,
        });
    }

    /// Resolves one link traversal at `now`: schedules the delivery, or
    /// records the loss immediately.
    fn traverse(&mut self, msg: ProtocolMessage, now: u64) {
        let link = self
            .world
            .links
            .get(&link_key(&msg.sender, &msg.receiver))
            .expect("topology is complete over all node pairs")
            .clone();
        if link.secure {
            self.schedule(msg, now + link.latency, AdvTag::None);
            return;
        }
        let arrival = now + link.latency;
        match self.world.adversary.mode.clone() {
            AdversaryMode::None => self.schedule(msg, arrival, AdvTag::None),
            AdversaryMode::Eavesdrop { taps } => {
                if taps.matches(&msg.sender, &msg.receiver) {
                    self.world.adversary.observe(&msg.payload);
                    self.schedule(msg, arrival, AdvTag::Tap);
                } else {
                    self.schedule(msg, arrival, AdvTag::None);
                }
            }
            AdversaryMode::Replay { msg_type, delay } => {
                if msg.msg_type == msg_type && !self.world.adversary.replayed {
                    self.world.adversary.replayed = true;
                    self.world.adversary.observe(&msg.payload);
                    self.schedule(msg.clone(), arrival, AdvTag::Tap);
                    self.schedule(msg, arrival + delay, AdvTag::Replay);
                } else {
                    self.schedule(msg, arrival, AdvTag::None);
                }
            }
            AdversaryMode::Mitm {
                link: (from, to),
                strategy,
            } => {
                if msg.sender == from && msg.receiver == to {
                    self.world.adversary.observe(&msg.payload);
                    match strategy {
                        MitmStrategy::Relay => self.schedule(msg, arrival, AdvTag::Relay),
                        MitmStrategy::Suppress => {
                            self.record(&msg, now, link.secure, AdvTag::Suppress);
                        }
                        MitmStrategy::Substitute => {
                            let key = self
                                .world
                                .adversary
                                .own_key
                                .clone()
                                .expect("substitute mode registers an adversary key");
                            let tampered = ProtocolMessage {
                                payload: perturb(&msg.payload, &key),
                                ..msg
                            };
                            self.world.adversary.observe(&tampered.payload);
                            self.schedule(tampered, arrival, AdvTag::Substitute);
                        }
                    }
                } else {
                    self.schedule(msg, arrival, AdvTag::None);
                }
            }
            AdversaryMode::DosDrop {
                link: on_link,
                target,
                rate,
            } => {
                let on_this_link = on_link
                    .as_ref()
                    .is_none_or(|(from, to)| msg.sender == *from && msg.receiver == *to);
                let on_target = target
                    .as_ref()
                    .is_none_or(|t| msg.sender == *t || msg.receiver == *t);
                if on_this_link && on_target && self.world.adversary.rng.random::<f64>() < rate {
                    self.record(&msg, now, link.secure, AdvTag::Drop);
                } else {
                    self.schedule(msg, arrival, AdvTag::None);
                }
            }
            AdversaryMode::DosFlood { target, .. } => {
                if msg.receiver == target {
                    let backlog = self
                        .world
                        .adversary
                        .flood_backlog_per_tick
                        .saturating_mul(now);
                    if arrival.saturating_add(backlog) > self.world.horizon {
                        self.record(&msg, now, link.secure, AdvTag::Starved);
                    } else {
                        self.schedule(msg, arrival + backlog, AdvTag::Delayed(backlog));
                    }
                } else {
                    self.schedule(msg, arrival, AdvTag::None);
                }
            }
        }
    }

    fn drain(&mut self, output: StepOutput, now: u64, event: Option<u64>) {
        for f in output.finals {
            self.outcomes.push(SessionOutcome {
                session: f.session,
                status: f.status,
                delivered: f.delivered,
                event,
            });
        }
        for send in output.sends {
            self.traverse(send, now);
        }
    }

    /// Runs one node step with a fresh environment view, moving the node out
    /// of the map for the duration so the world services stay borrowable.
    fn step_node(
        &mut self,
        id: &PartyId,
        action: impl FnOnce(&mut PartyNode, &mut ProtocolEnv) -> StepOutput,
    ) -> Option<StepOutput> {
        let mut node = self.world.nodes.remove(id)?;
        let output = {
            let mut env = ProtocolEnv {
                now: self.clock.now(),
                delta: self.world.delta,
                rng: &mut self.world.rng,
                nonces: &mut self.world.nonces,
                registry: &mut self.world.registry,
            };
            action(&mut node, &mut env)
        };
        self.world.nodes.insert(id.clone(), node);
        Some(output)
    }
}

/// Runs a validated scenario to completion.
pub fn schedule_and_run(cfg: &ScenarioConfig) -> Result<RunReport, ConfigError> {
    let mut rt = Runtime::new(build_world(cfg)?);

    // Tick zero: initiators fire in declared order.
    for id in rt.world.activation_order.clone() {
        if let Some(output) = rt.step_node(&id, |node, env| node.activate(env)) {
            rt.drain(output, 0, None);
        }
    }

    while let Some(delivery) = rt.queue.pop() {
        if delivery.at > rt.world.horizon {
            break;
        }
        rt.clock.advance_to(delivery.at);
        let now = delivery.at;
        debug_assert!(delivery.tag.delivered());
        let secure = rt.world.links[&link_key(&delivery.msg.sender, &delivery.msg.receiver)]
            .secure;
        let seq = rt.record(&delivery.msg, now, secure, delivery.tag);
        let receiver = delivery.msg.receiver.clone();
        let handled = rt.step_node(&receiver, |node, env| node.handle(&delivery.msg, env));
        if let Some(output) = handled {
            rt.drain(output, now, Some(seq));
        }
    }

    // Sessions with no terminal outcome waited past the horizon.
    for session in &rt.world.sessions {
        let has_outcome = rt.outcomes.iter().any(|o| o.session == Some(session.tag));
        if !has_outcome {
            rt.outcomes.push(SessionOutcome {
                session: Some(session.tag),
                status: SessionStatus::Timeout,
                delivered: None,
                event: None,
            });
        }
    }

    let key_holdings = rt
        .world
        .nodes
        .iter()
        .map(|(id, node)| (id.clone(), node.held_keys()))
        .collect();
    Ok(RunReport {
        transcript: rt.transcript,
        outcomes: rt.outcomes,
        sessions: rt.world.sessions,
        adversary: AdversaryView {
            observed: rt.world.adversary.observed,
            keys: rt.world.adversary.keys,
        },
        registry: rt.world.registry,
        key_holdings,
    })
}

// ---------------------------------------------------------------------------
// Knowledge closure
// ---------------------------------------------------------------------------

/// The fixpoint of what a set of observations derives: untupling, opening
/// ciphertexts with possessed keys (keys found inside terms count), merging
/// complementary shares, and decoding merged sequences when the grammar and
/// chunk width are known.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeSet {
    terms: BTreeSet<Term>,
    keys: BTreeSet<KeyId>,
}

impl KnowledgeSet {
    pub fn contains(&self, term: &Term) -> bool {
        self.terms.contains(term)
    }

    pub fn terms(&self) -> impl Iterator<Item = &Term> {
        self.terms.iter()
    }

    pub fn keys(&self) -> &BTreeSet<KeyId> {
        &self.keys
    }

    /// Is this exact message text derivable?
    pub fn contains_message(&self, text: &str) -> bool {
        self.terms
            .contains(&Term::Atom(Atom::Text(text.to_string())))
    }

    pub fn contains_sequence(&self, seq: &ProductionSequence) -> bool {
        self.terms.contains(&Term::Atom(Atom::Sequence(seq.clone())))
    }

    /// Shares held for a tag, by role.
    pub fn shares_of(&self, tag: SessionTag) -> (Option<&Share>, Option<&Share>) {
        let mut odd = None;
        let mut even = None;
        for term in &self.terms {
            if let Term::Atom(Atom::Share(share)) = term {
                if share.session_tag == tag {
                    match share.role {
                        ShareRole::Odd => odd = Some(share),
                        ShareRole::Even => even = Some(share),
                    }
                }
            }
        }
        (odd, even)
    }
}

/// Computes the least fixpoint of the closure rules over `observed`.
pub fn closure(
    observed: &[Term],
    possessed_keys: &BTreeSet<KeyId>,
    grammar_known: bool,
    chunk_width: Option<u8>,
    char_width: u8,
) -> KnowledgeSet {
    let mut set = KnowledgeSet {
        terms: observed.iter().cloned().collect(),
        keys: possessed_keys.clone(),
    };
    let grammar = match (grammar_known, chunk_width) {
        (true, Some(k)) => ChunkGrammar::new(k).ok(),
        _ => None,
    };
    loop {
        let mut additions: Vec<Term> = Vec::new();
        for term in &set.terms {
            match term {
                Term::Tuple(parts) => {
                    for part in parts {
                        if !set.terms.contains(part) {
                            additions.push(part.clone());
                        }
                    }
                }
                Term::Enc(key, inner) => {
                    if set.keys.contains(key) && !set.terms.contains(inner) {
                        additions.push((**inner).clone());
                    }
                }
                Term::Atom(Atom::Key(key)) if !set.keys.contains(key) => {
                    set.keys.insert(key.clone());
                    // Re-scan: this key may open already-held terms.
                    additions.push(term.clone());
                }
                _ => {}
            }
        }
        // Complementary shares under one tag merge into the full sequence.
        let tags: BTreeSet<SessionTag> = set
            .terms
            .iter()
            .filter_map(|t| match t {
                Term::Atom(Atom::Share(s)) => Some(s.session_tag),
                _ => None,
            })
            .collect();
        for tag in tags {
            let (odd, even) = set.shares_of(tag);
            if let (Some(odd), Some(even)) = (odd, even) {
                if let Ok(merged) = share::merge(odd, even) {
                    let as_term = Term::Atom(Atom::Sequence(merged.clone()));
                    if !set.terms.contains(&as_term) {
                        additions.push(as_term);
                    }
                    if let Some(grammar) = &grammar {
                        if let Ok(text) = grammar::decode(&merged, grammar, char_width) {
                            let text_term = Term::Atom(Atom::Text(text));
                            if !set.terms.contains(&text_term) {
                                additions.push(text_term);
                            }
                        }
                    }
                }
            }
        }
        let before = set.terms.len();
        set.terms.extend(additions);
        if set.terms.len() == before {
            return set;
        }
    }
}

// ---------------------------------------------------------------------------
// Attack verdicts
// ---------------------------------------------------------------------------

/// The executable security claims.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Claim {
    MimResist,
    ReplayResist,
    ShareSecrecy,
    DosSafety,
}

impl Claim {
    pub fn name(self) -> &'static str {
        match self {
            Claim::MimResist => "MIM_RESIST",
            Claim::ReplayResist => "REPLAY_RESIST",
            Claim::ShareSecrecy => "SHARE_SECRECY",
            Claim::DosSafety => "DOS_SAFETY",
        }
    }
}

impl fmt::Display for Claim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Claim {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mim_resist" => Ok(Claim::MimResist),
            "replay_resist" => Ok(Claim::ReplayResist),
            "share_secrecy" => Ok(Claim::ShareSecrecy),
            "dos_safety" => Ok(Claim::DosSafety),
            _ => Err(format!("unknown claim '{}'", s)),
        }
    }
}

/// Pass/fail for one claim over one run, with the event numbers that carry
/// the evidence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerdictReport {
    pub claim: Claim,
    pub pass: bool,
    pub witnesses: Vec<u64>,
    pub detail: String,
}

impl fmt::Display for VerdictReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let witnesses = if self.witnesses.is_empty() {
            "-".to_string()
        } else {
            self.witnesses
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        write!(
            f,
            "claim {}: {} (witness: {}) {}",
            self.claim,
            if self.pass { "PASS" } else { "FAIL" },
            witnesses,
            self.detail
        )
    }
}

fn adversary_event_seqs(report: &RunReport) -> Vec<u64> {
    report
        .transcript
        .events()
        .iter()
        .filter(|e| e.adversary != AdvTag::None)
        .map(|e| e.seq)
        .collect()
}

/// Evaluates one claim against a finished run.
pub fn attack_verdict(report: &RunReport, cfg: &ScenarioConfig, claim: Claim) -> VerdictReport {
    let input_of: BTreeMap<SessionTag, &str> = report
        .sessions
        .iter()
        .map(|s| (s.tag, s.message.as_str()))
        .collect();
    match claim {
        Claim::MimResist => {
            let mut violations = Vec::new();
            for outcome in &report.outcomes {
                if outcome.status != SessionStatus::Accepted {
                    continue;
                }
                let genuine = outcome
                    .session
                    .and_then(|tag| input_of.get(&tag))
                    .is_some_and(|input| outcome.delivered.as_deref() == Some(input));
                if !genuine {
                    violations.extend(outcome.event);
                }
            }
            let pass = violations.is_empty();
            VerdictReport {
                claim,
                pass,
                witnesses: if pass {
                    adversary_event_seqs(report)
                } else {
                    violations
                },
                detail: if pass {
                    "no accepted delivery differs from its input".to_string()
                } else {
                    "a tampered message was accepted".to_string()
                },
            }
        }
        Claim::ReplayResist => {
            let mut detail = String::new();
            let mut pass = true;
            for session in &report.sessions {
                let accepts = report
                    .outcomes
                    .iter()
                    .filter(|o| {
                        o.session == Some(session.tag) && o.status == SessionStatus::Accepted
                    })
                    .count();
                if accepts != 1 {
                    pass = false;
                    detail = format!("session {} accepted {} times", session.tag, accepts);
                    break;
                }
            }
            let mut witnesses: Vec<u64> = report
                .outcomes
                .iter()
                .filter(|o| o.status == SessionStatus::RejectedReplay)
                .filter_map(|o| o.event)
                .collect();
            witnesses.extend(
                report
                    .transcript
                    .events()
                    .iter()
                    .filter(|e| e.adversary == AdvTag::Replay)
                    .map(|e| e.seq),
            );
            witnesses.sort_unstable();
            witnesses.dedup();
            VerdictReport {
                claim,
                pass,
                witnesses,
                detail: if pass {
                    "exactly one accept per session".to_string()
                } else {
                    detail
                },
            }
        }
        Claim::ShareSecrecy => {
            let knowledge = closure(
                &report.adversary.observed,
                &report.adversary.keys,
                true,
                Some(cfg.chunk_width),
                cfg.char_width,
            );
            let mut pass = true;
            let mut detail = "single observed shares reveal nothing".to_string();
            for session in &report.sessions {
                let (odd, even) = knowledge.shares_of(session.tag);
                if odd.is_some() && even.is_some() {
                    // Both shares plus the public grammar do reconstruct the
                    // message; secrecy is only claimed short of that.
                    continue;
                }
                let full_sequence = grammar::text_to_bits(&session.message, cfg.char_width)
                    .ok()
                    .and_then(|bits| {
                        ChunkGrammar::new(cfg.chunk_width)
                            .ok()
                            .map(|g| grammar::encode(&bits, &g))
                    });
                let leaked_text = knowledge.contains_message(&session.message);
                let leaked_seq = full_sequence
                    .as_ref()
                    .is_some_and(|seq| knowledge.contains_sequence(seq));
                if leaked_text || leaked_seq {
                    pass = false;
                    detail = format!("session {} leaked from partial observation", session.tag);
                    break;
                }
            }
            VerdictReport {
                claim,
                pass,
                witnesses: adversary_event_seqs(report),
                detail,
            }
        }
        Claim::DosSafety => {
            let accepts: Vec<u64> = report
                .outcomes
                .iter()
                .filter(|o| o.status == SessionStatus::Accepted)
                .filter_map(|o| o.event)
                .collect();
            let pass = accepts.is_empty();
            VerdictReport {
                claim,
                pass,
                witnesses: if pass {
                    adversary_event_seqs(report)
                } else {
                    accepts
                },
                detail: if pass {
                    "liveness lost, safety kept: only timeouts and rejections".to_string()
                } else {
                    "a session accepted under denial of service".to_string()
                },
            }
        }
    }
}
