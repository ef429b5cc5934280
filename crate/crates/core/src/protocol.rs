//! Party state machines.
//!
//! Two protocols run over the simulator. The three-stage exchange moves a
//! transformed symbol stream A -> BB -> AA -> B, each hop applying or removing
//! one commuting key, with B's final local inversion recovering the message.
//! The modified five-step protocol splits the production sequence into two
//! shares routed through different agents and uses a KDC to authenticate the
//! parties and carry one share under long-term keys; B recombines and
//! decodes. Each machine here is single-threaded and event-driven: the
//! simulator feeds it one delivery at a time and routes whatever it emits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::envelope::{
    decrypt, encrypt, Atom, KeyId, KeyRegistry, Nonce, NonceSource, Term, Timestamp,
};
use crate::grammar::{self, ChunkGrammar};
use crate::ids::{PartyId, SessionTag};
use crate::share::{self, Share};
use crate::transform::{lift, unlift, DirectedKey, TransformDomain};

/// Wire message kinds, three-stage and five-step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MsgType {
    ShareToBb,
    AgentBrief,
    AToKdc,
    BbToKdc,
    BbBriefB,
    KdcToAa,
    AaToB,
    Ts1,
    Ts2,
    Ts3,
}

impl MsgType {
    pub fn name(self) -> &'static str {
        match self {
            MsgType::ShareToBb => "SHARE_TO_BB",
            MsgType::AgentBrief => "AGENT_BRIEF",
            MsgType::AToKdc => "A_TO_KDC",
            MsgType::BbToKdc => "BB_TO_KDC",
            MsgType::BbBriefB => "BB_BRIEF_B",
            MsgType::KdcToAa => "KDC_TO_AA",
            MsgType::AaToB => "AA_TO_B",
            MsgType::Ts1 => "TS1",
            MsgType::Ts2 => "TS2",
            MsgType::Ts3 => "TS3",
        }
    }
}

impl fmt::Display for MsgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MsgType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "SHARE_TO_BB" => Ok(MsgType::ShareToBb),
            "AGENT_BRIEF" => Ok(MsgType::AgentBrief),
            "A_TO_KDC" => Ok(MsgType::AToKdc),
            "BB_TO_KDC" => Ok(MsgType::BbToKdc),
            "BB_BRIEF_B" => Ok(MsgType::BbBriefB),
            "KDC_TO_AA" => Ok(MsgType::KdcToAa),
            "AA_TO_B" => Ok(MsgType::AaToB),
            "TS1" => Ok(MsgType::Ts1),
            "TS2" => Ok(MsgType::Ts2),
            "TS3" => Ok(MsgType::Ts3),
            _ => Err(format!("unknown message type '{}'", s)),
        }
    }
}

/// One wire message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolMessage {
    pub msg_type: MsgType,
    pub payload: Term,
    pub sender: PartyId,
    pub receiver: PartyId,
}

/// Structural schema check: does the payload have exactly the shape this
/// message kind is defined with?
pub fn payload_matches(msg_type: MsgType, payload: &Term) -> bool {
    use Atom::*;
    use Term::{Atom as A, Enc, Tuple};
    let is = |term: &Term, kinds: &[fn(&Atom) -> bool]| -> bool {
        match term {
            Tuple(parts) if parts.len() == kinds.len() => parts
                .iter()
                .zip(kinds)
                .all(|(part, kind)| matches!(part, A(a) if kind(a))),
            _ => false,
        }
    };
    let party = |a: &Atom| matches!(a, Party(_));
    let nonce = |a: &Atom| matches!(a, Nonce(_));
    let time = |a: &Atom| matches!(a, Time(_));
    let share = |a: &Atom| matches!(a, Share(_));
    let key = |a: &Atom| matches!(a, Key(_));
    match msg_type {
        MsgType::ShareToBb => matches!(payload, A(Share(_))),
        MsgType::AgentBrief => is(payload, &[share, party, nonce]),
        MsgType::AToKdc => matches!(payload, Enc(_, inner) if is(inner, &[party, party, nonce])),
        MsgType::BbToKdc => {
            matches!(payload, Enc(_, inner) if is(inner, &[party, nonce, time, share]))
        }
        MsgType::BbBriefB => is(payload, &[nonce, time]),
        MsgType::KdcToAa => matches!(payload, Tuple(parts) if parts.len() == 2
            && matches!(&parts[0], Enc(_, inner) if is(inner, &[party, nonce, time, key, nonce]))
            && matches!(&parts[1], Enc(_, inner) if is(inner, &[party, key, share]))),
        MsgType::AaToB => matches!(payload, Tuple(parts) if parts.len() == 2
            && matches!(&parts[0], Enc(_, inner) if is(inner, &[party, key, share]))
            && matches!(&parts[1], Enc(_, inner) if is(inner, &[nonce, share]))),
        MsgType::Ts1 | MsgType::Ts2 | MsgType::Ts3 => matches!(payload, A(Stream(_))),
    }
}

/// Terminal state of one protocol run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionStatus {
    Accepted,
    RejectedReplay,
    RejectedStale,
    RejectedIntegrity,
    Timeout,
}

impl SessionStatus {
    pub fn name(self) -> &'static str {
        match self {
            SessionStatus::Accepted => "ACCEPTED",
            SessionStatus::RejectedReplay => "REJECTED_REPLAY",
            SessionStatus::RejectedStale => "REJECTED_STALE",
            SessionStatus::RejectedIntegrity => "REJECTED_INTEGRITY",
            SessionStatus::Timeout => "TIMEOUT",
        }
    }
}

impl fmt::Display for SessionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SessionStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "accepted" => Ok(SessionStatus::Accepted),
            "rejected_replay" => Ok(SessionStatus::RejectedReplay),
            "rejected_stale" => Ok(SessionStatus::RejectedStale),
            "rejected_integrity" => Ok(SessionStatus::RejectedIntegrity),
            "timeout" => Ok(SessionStatus::Timeout),
            _ => Err(format!("unknown session status '{}'", s)),
        }
    }
}

/// A party's terminal verdict about one run. `session` is present whenever
/// the party could correlate the delivery to a tagged run; a delivery whose
/// ciphertexts never opened stays uncorrelated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finalization {
    pub session: Option<SessionTag>,
    pub status: SessionStatus,
    pub delivered: Option<String>,
}

impl Finalization {
    fn rejected(session: Option<SessionTag>, status: SessionStatus) -> Self {
        Finalization {
            session,
            status,
            delivered: None,
        }
    }
}

/// A finalized result with its transcript reference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionOutcome {
    pub session: Option<SessionTag>,
    pub status: SessionStatus,
    pub delivered: Option<String>,
    pub event: Option<u64>,
}

/// A run declared by the scenario: who talks to whom and what they said.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeclaredSession {
    pub tag: SessionTag,
    pub initiator: PartyId,
    pub responder: PartyId,
    pub message: String,
}

/// Everything a state machine may touch while handling one delivery.
pub struct ProtocolEnv<'a> {
    pub now: Timestamp,
    pub delta: u64,
    pub rng: &'a mut ChaCha8Rng,
    pub nonces: &'a mut NonceSource,
    pub registry: &'a mut KeyRegistry,
}

/// What one handling step produced.
#[derive(Debug, Default)]
pub struct StepOutput {
    pub sends: Vec<ProtocolMessage>,
    pub finals: Vec<Finalization>,
}

impl StepOutput {
    fn send(msg: ProtocolMessage) -> Self {
        StepOutput {
            sends: vec![msg],
            finals: Vec::new(),
        }
    }

    fn finalize(f: Finalization) -> Self {
        StepOutput {
            sends: Vec::new(),
            finals: vec![f],
        }
    }
}

/// One protocol run as provisioned into the initiator.
#[derive(Debug, Clone)]
pub struct Launch {
    pub tag: SessionTag,
    pub responder: PartyId,
    pub responder_agent: PartyId,
    pub message: String,
}

// ---------------------------------------------------------------------------
// Five-step roles
// ---------------------------------------------------------------------------

/// The sender's main location: encodes, splits, and kicks off each run.
#[derive(Debug)]
pub struct InitiatorMain {
    pub me: PartyId,
    pub agent: PartyId,
    pub kdc: PartyId,
    pub long_term: KeyId,
    pub grammar: ChunkGrammar,
    pub char_width: u8,
    pub launches: Vec<Launch>,
    keys_held: BTreeSet<KeyId>,
}

impl InitiatorMain {
    pub fn new(
        me: PartyId,
        agent: PartyId,
        long_term: KeyId,
        grammar: ChunkGrammar,
        char_width: u8,
        launches: Vec<Launch>,
    ) -> Self {
        let keys_held = BTreeSet::from([long_term.clone()]);
        InitiatorMain {
            me,
            agent,
            kdc: PartyId::kdc(),
            long_term,
            grammar,
            char_width,
            launches,
            keys_held,
        }
    }

    fn activate(&mut self, env: &mut ProtocolEnv) -> StepOutput {
        let mut out = StepOutput::default();
        for launch in &self.launches {
            let bits = match grammar::text_to_bits(&launch.message, self.char_width) {
                Ok(bits) => bits,
                Err(_) => {
                    out.finals.push(Finalization::rejected(
                        Some(launch.tag),
                        SessionStatus::RejectedIntegrity,
                    ));
                    continue;
                }
            };
            let seq = grammar::encode(&bits, &self.grammar);
            let (v_aa, v_ab) = share::split(&seq, launch.tag);
            let n_a = env.nonces.fresh(env.rng, &self.me);
            out.sends.push(ProtocolMessage {
                msg_type: MsgType::ShareToBb,
                payload: Term::share(v_ab),
                sender: self.me.clone(),
                receiver: launch.responder_agent.clone(),
            });
            out.sends.push(ProtocolMessage {
                msg_type: MsgType::AgentBrief,
                payload: Term::tuple([
                    Term::share(v_aa),
                    Term::party(launch.responder.clone()),
                    Term::nonce(n_a.clone()),
                ]),
                sender: self.me.clone(),
                receiver: self.agent.clone(),
            });
            let inner = Term::tuple([
                Term::party(self.me.clone()),
                Term::party(launch.responder.clone()),
                Term::nonce(n_a),
            ]);
            let payload = encrypt(env.registry, &self.long_term, inner)
                .expect("initiator long-term key is registered at setup");
            out.sends.push(ProtocolMessage {
                msg_type: MsgType::AToKdc,
                payload,
                sender: self.me.clone(),
                receiver: self.kdc.clone(),
            });
        }
        out
    }
}

#[derive(Debug, Clone)]
struct AgentBriefState {
    share: Share,
    target: PartyId,
}

/// The sender's agent: holds the odd share, validates the KDC's reply, and
/// forwards both blobs to the destination.
#[derive(Debug)]
pub struct InitiatorAgent {
    pub me: PartyId,
    pub main: PartyId,
    pub long_term: KeyId,
    /// Principal to its main node, for routing the final hop.
    pub main_node_of: BTreeMap<PartyId, PartyId>,
    briefs: BTreeMap<u64, AgentBriefState>,
    consumed: BTreeMap<u64, SessionTag>,
    keys_held: BTreeSet<KeyId>,
}

impl InitiatorAgent {
    pub fn new(me: PartyId, main: PartyId, long_term: KeyId, main_node_of: BTreeMap<PartyId, PartyId>) -> Self {
        let keys_held = BTreeSet::from([long_term.clone()]);
        InitiatorAgent {
            me,
            main,
            long_term,
            main_node_of,
            briefs: BTreeMap::new(),
            consumed: BTreeMap::new(),
            keys_held,
        }
    }

    fn handle(&mut self, msg: &ProtocolMessage, env: &mut ProtocolEnv) -> StepOutput {
        match msg.msg_type {
            MsgType::AgentBrief if msg.sender == self.main => {
                if let Term::Tuple(parts) = &msg.payload {
                    if let [Term::Atom(Atom::Share(share)), Term::Atom(Atom::Party(target)), Term::Atom(Atom::Nonce(nonce))] =
                        parts.as_slice()
                    {
                        self.briefs.insert(
                            nonce.value,
                            AgentBriefState {
                                share: share.clone(),
                                target: target.clone(),
                            },
                        );
                    }
                }
                StepOutput::default()
            }
            MsgType::KdcToAa => self.handle_kdc_reply(msg, env),
            _ => StepOutput::default(),
        }
    }

    fn handle_kdc_reply(&mut self, msg: &ProtocolMessage, env: &mut ProtocolEnv) -> StepOutput {
        let (for_me, for_responder) = match &msg.payload {
            Term::Tuple(parts) if parts.len() == 2 => (&parts[0], &parts[1]),
            _ => return StepOutput::default(),
        };
        if !matches!(for_responder, Term::Enc(_, _)) {
            return StepOutput::default();
        }
        let opened = match decrypt(&self.long_term, for_me) {
            Ok(t) => t,
            // Not under our key: nothing here lets us correlate a session.
            Err(_) => return StepOutput::default(),
        };
        let (responder, n_a, t_b, session_key, n_b) = match &opened {
            Term::Tuple(parts) => match parts.as_slice() {
                [Term::Atom(Atom::Party(idb)), Term::Atom(Atom::Nonce(na)), Term::Atom(Atom::Time(tb)), Term::Atom(Atom::Key(ks)), Term::Atom(Atom::Nonce(nb))] => {
                    (idb.clone(), na.clone(), *tb, ks.clone(), nb.clone())
                }
                _ => return StepOutput::default(),
            },
            _ => return StepOutput::default(),
        };
        // Nonce echo: a consumed nonce means this reply was already honored.
        if let Some(tag) = self.consumed.get(&n_a.value) {
            return StepOutput::finalize(Finalization::rejected(
                Some(*tag),
                SessionStatus::RejectedReplay,
            ));
        }
        let brief = match self.briefs.get(&n_a.value) {
            Some(brief) => brief.clone(),
            None => return StepOutput::default(),
        };
        let tag = brief.share.session_tag;
        if brief.target != responder {
            return StepOutput::finalize(Finalization::rejected(
                Some(tag),
                SessionStatus::RejectedIntegrity,
            ));
        }
        if env.now.age_since(t_b) > env.delta {
            return StepOutput::finalize(Finalization::rejected(
                Some(tag),
                SessionStatus::RejectedStale,
            ));
        }
        let destination = match self.main_node_of.get(&responder) {
            Some(node) => node.clone(),
            None => return StepOutput::default(),
        };
        self.keys_held.insert(session_key.clone());
        self.consumed.insert(n_a.value, tag);
        self.briefs.remove(&n_a.value);
        let sealed = encrypt(
            env.registry,
            &session_key,
            Term::tuple([Term::nonce(n_b), Term::share(brief.share)]),
        )
        .expect("session key was registered when the KDC minted it");
        StepOutput::send(ProtocolMessage {
            msg_type: MsgType::AaToB,
            payload: Term::tuple([for_responder.clone(), sealed]),
            sender: self.me.clone(),
            receiver: destination,
        })
    }
}

/// The destination's agent: receives the clear share, reports it to the KDC
/// under the long-term key, and briefs its main location.
#[derive(Debug)]
pub struct ResponderAgent {
    pub me: PartyId,
    pub main: PartyId,
    /// The principal identity embedded in the report.
    pub principal: PartyId,
    pub kdc: PartyId,
    pub long_term: KeyId,
    keys_held: BTreeSet<KeyId>,
}

impl ResponderAgent {
    pub fn new(me: PartyId, main: PartyId, principal: PartyId, long_term: KeyId) -> Self {
        let keys_held = BTreeSet::from([long_term.clone()]);
        ResponderAgent {
            me,
            main,
            principal,
            kdc: PartyId::kdc(),
            long_term,
            keys_held,
        }
    }

    fn handle(&mut self, msg: &ProtocolMessage, env: &mut ProtocolEnv) -> StepOutput {
        let share = match (&msg.msg_type, &msg.payload) {
            (MsgType::ShareToBb, Term::Atom(Atom::Share(share))) => share.clone(),
            _ => return StepOutput::default(),
        };
        let n_b = env.nonces.fresh(env.rng, &self.me);
        let t_b = env.now;
        let report = encrypt(
            env.registry,
            &self.long_term,
            Term::tuple([
                Term::party(self.principal.clone()),
                Term::nonce(n_b.clone()),
                Term::time(t_b),
                Term::share(share),
            ]),
        )
        .expect("responder long-term key is registered at setup");
        let mut out = StepOutput::default();
        out.sends.push(ProtocolMessage {
            msg_type: MsgType::BbToKdc,
            payload: report,
            sender: self.me.clone(),
            receiver: self.kdc.clone(),
        });
        out.sends.push(ProtocolMessage {
            msg_type: MsgType::BbBriefB,
            payload: Term::tuple([Term::nonce(n_b), Term::time(t_b)]),
            sender: self.me.clone(),
            receiver: self.main.clone(),
        });
        out
    }
}

/// The destination: verifies freshness and the nonce brief, recombines the
/// shares, and decodes.
#[derive(Debug)]
pub struct ResponderMain {
    pub me: PartyId,
    pub agent: PartyId,
    pub long_term: KeyId,
    pub grammar: ChunkGrammar,
    pub char_width: u8,
    briefs: BTreeMap<u64, Timestamp>,
    consumed: BTreeMap<u64, SessionTag>,
    seen_final: BTreeMap<Term, SessionTag>,
    keys_held: BTreeSet<KeyId>,
}

impl ResponderMain {
    pub fn new(
        me: PartyId,
        agent: PartyId,
        long_term: KeyId,
        grammar: ChunkGrammar,
        char_width: u8,
    ) -> Self {
        let keys_held = BTreeSet::from([long_term.clone()]);
        ResponderMain {
            me,
            agent,
            long_term,
            grammar,
            char_width,
            briefs: BTreeMap::new(),
            consumed: BTreeMap::new(),
            seen_final: BTreeMap::new(),
            keys_held,
        }
    }

    fn handle(&mut self, msg: &ProtocolMessage, env: &mut ProtocolEnv) -> StepOutput {
        match msg.msg_type {
            MsgType::BbBriefB if msg.sender == self.agent => {
                if let Term::Tuple(parts) = &msg.payload {
                    if let [Term::Atom(Atom::Nonce(nonce)), Term::Atom(Atom::Time(t_b))] =
                        parts.as_slice()
                    {
                        self.briefs.insert(nonce.value, *t_b);
                    }
                }
                StepOutput::default()
            }
            MsgType::AaToB => self.handle_final(msg, env),
            _ => StepOutput::default(),
        }
    }

    fn handle_final(&mut self, msg: &ProtocolMessage, env: &mut ProtocolEnv) -> StepOutput {
        // Byte-identical re-delivery is recognizable before any decryption.
        if let Some(tag) = self.seen_final.get(&msg.payload) {
            return StepOutput::finalize(Finalization::rejected(
                Some(*tag),
                SessionStatus::RejectedReplay,
            ));
        }
        let (sealed_for_me, sealed_session) = match &msg.payload {
            Term::Tuple(parts) if parts.len() == 2 => (&parts[0], &parts[1]),
            _ => return StepOutput::default(),
        };
        let opened = match decrypt(&self.long_term, sealed_for_me) {
            Ok(t) => t,
            Err(_) => {
                return StepOutput::finalize(Finalization::rejected(
                    None,
                    SessionStatus::RejectedIntegrity,
                ))
            }
        };
        let (_initiator, session_key, v_ab) = match &opened {
            Term::Tuple(parts) => match parts.as_slice() {
                [Term::Atom(Atom::Party(ida)), Term::Atom(Atom::Key(ks)), Term::Atom(Atom::Share(share))] => {
                    (ida.clone(), ks.clone(), share.clone())
                }
                _ => {
                    return StepOutput::finalize(Finalization::rejected(
                        None,
                        SessionStatus::RejectedIntegrity,
                    ))
                }
            },
            _ => {
                return StepOutput::finalize(Finalization::rejected(
                    None,
                    SessionStatus::RejectedIntegrity,
                ))
            }
        };
        let tag = v_ab.session_tag;
        self.keys_held.insert(session_key.clone());
        let reject = |status| StepOutput::finalize(Finalization::rejected(Some(tag), status));
        let opened_session = match decrypt(&session_key, sealed_session) {
            Ok(t) => t,
            Err(_) => return reject(SessionStatus::RejectedIntegrity),
        };
        let (n_b, v_aa) = match &opened_session {
            Term::Tuple(parts) => match parts.as_slice() {
                [Term::Atom(Atom::Nonce(nb)), Term::Atom(Atom::Share(share))] => {
                    (nb.clone(), share.clone())
                }
                _ => return reject(SessionStatus::RejectedIntegrity),
            },
            _ => return reject(SessionStatus::RejectedIntegrity),
        };
        if self.consumed.contains_key(&n_b.value) {
            return reject(SessionStatus::RejectedReplay);
        }
        let t_b = match self.briefs.get(&n_b.value) {
            Some(t_b) => *t_b,
            // A nonce our agent never briefed cannot prove freshness.
            None => return reject(SessionStatus::RejectedReplay),
        };
        if env.now.age_since(t_b) > env.delta {
            return reject(SessionStatus::RejectedStale);
        }
        let merged = match share::merge(&v_aa, &v_ab) {
            Ok(seq) => seq,
            Err(_) => return reject(SessionStatus::RejectedIntegrity),
        };
        let text = match grammar::decode(&merged, &self.grammar, self.char_width) {
            Ok(text) => text,
            Err(_) => return reject(SessionStatus::RejectedIntegrity),
        };
        self.consumed.insert(n_b.value, tag);
        self.briefs.remove(&n_b.value);
        self.seen_final.insert(msg.payload.clone(), tag);
        StepOutput::finalize(Finalization {
            session: Some(tag),
            status: SessionStatus::Accepted,
            delivered: Some(text),
        })
    }
}

#[derive(Debug, Clone)]
struct PendingM1 {
    initiator: PartyId,
    target: PartyId,
    nonce: Nonce,
    received: Timestamp,
}

#[derive(Debug, Clone)]
struct PendingM2 {
    responder: PartyId,
    nonce: Nonce,
    issued: Timestamp,
    share: Share,
    received: Timestamp,
}

/// The key distribution center: pairs initiator requests with responder
/// reports, mints session keys, and emits the double envelope.
#[derive(Debug)]
pub struct Kdc {
    pub me: PartyId,
    /// Principal to the long-term key shared with that principal's nodes.
    pub long_term_of: BTreeMap<PartyId, KeyId>,
    /// Node to the principal it belongs to.
    pub principal_of: BTreeMap<PartyId, PartyId>,
    /// Principal to its agent node, for routing the reply.
    pub agent_of: BTreeMap<PartyId, PartyId>,
    pending_m1: Vec<PendingM1>,
    pending_m2: Vec<PendingM2>,
    keys_held: BTreeSet<KeyId>,
}

impl Kdc {
    pub fn new(
        long_term_of: BTreeMap<PartyId, KeyId>,
        principal_of: BTreeMap<PartyId, PartyId>,
        agent_of: BTreeMap<PartyId, PartyId>,
    ) -> Self {
        let keys_held = long_term_of.values().cloned().collect();
        Kdc {
            me: PartyId::kdc(),
            long_term_of,
            principal_of,
            agent_of,
            pending_m1: Vec::new(),
            pending_m2: Vec::new(),
            keys_held,
        }
    }

    /// Unmatched table entries older than the freshness window are dropped.
    fn purge_expired(&mut self, now: Timestamp, delta: u64) {
        self.pending_m1
            .retain(|entry| now.age_since(entry.received) <= delta);
        self.pending_m2
            .retain(|entry| now.age_since(entry.received) <= delta);
    }

    fn handle(&mut self, msg: &ProtocolMessage, env: &mut ProtocolEnv) -> StepOutput {
        match msg.msg_type {
            MsgType::AToKdc => self.handle_m1(msg, env),
            MsgType::BbToKdc => self.handle_m2(msg, env),
            _ => StepOutput::default(),
        }
    }

    fn handle_m1(&mut self, msg: &ProtocolMessage, env: &mut ProtocolEnv) -> StepOutput {
        self.purge_expired(env.now, env.delta);
        let principal = match self.principal_of.get(&msg.sender) {
            Some(p) => p.clone(),
            None => return StepOutput::default(),
        };
        let key = match self.long_term_of.get(&principal) {
            Some(k) => k.clone(),
            None => return StepOutput::default(),
        };
        let opened = match decrypt(&key, &msg.payload) {
            Ok(t) => t,
            Err(_) => return StepOutput::default(),
        };
        let (initiator, target, nonce) = match &opened {
            Term::Tuple(parts) => match parts.as_slice() {
                [Term::Atom(Atom::Party(ida)), Term::Atom(Atom::Party(idb)), Term::Atom(Atom::Nonce(na))] => {
                    (ida.clone(), idb.clone(), na.clone())
                }
                _ => return StepOutput::default(),
            },
            _ => return StepOutput::default(),
        };
        if initiator != principal {
            return StepOutput::default();
        }
        let entry = PendingM1 {
            initiator,
            target,
            nonce,
            received: env.now,
        };
        // A report may already be waiting; oldest buffered report first.
        if let Some(position) = self
            .pending_m2
            .iter()
            .position(|m2| m2.responder == entry.target)
        {
            let m2 = self.pending_m2.remove(position);
            return self.pair(entry, m2, env);
        }
        self.pending_m1.push(entry);
        StepOutput::default()
    }

    fn handle_m2(&mut self, msg: &ProtocolMessage, env: &mut ProtocolEnv) -> StepOutput {
        self.purge_expired(env.now, env.delta);
        let principal = match self.principal_of.get(&msg.sender) {
            Some(p) => p.clone(),
            None => return StepOutput::default(),
        };
        let key = match self.long_term_of.get(&principal) {
            Some(k) => k.clone(),
            None => return StepOutput::default(),
        };
        let opened = match decrypt(&key, &msg.payload) {
            Ok(t) => t,
            Err(_) => return StepOutput::default(),
        };
        let (responder, nonce, issued, share) = match &opened {
            Term::Tuple(parts) => match parts.as_slice() {
                [Term::Atom(Atom::Party(idb)), Term::Atom(Atom::Nonce(nb)), Term::Atom(Atom::Time(tb)), Term::Atom(Atom::Share(v_ab))] => {
                    (idb.clone(), nb.clone(), *tb, v_ab.clone())
                }
                _ => return StepOutput::default(),
            },
            _ => return StepOutput::default(),
        };
        if responder != principal {
            return StepOutput::default();
        }
        if env.now.age_since(issued) > env.delta {
            return StepOutput::finalize(Finalization::rejected(
                Some(share.session_tag),
                SessionStatus::RejectedStale,
            ));
        }
        let entry = PendingM2 {
            responder,
            nonce,
            issued,
            share,
            received: env.now,
        };
        // Oldest unmatched request whose target is this responder.
        if let Some(position) = self
            .pending_m1
            .iter()
            .position(|m1| m1.target == entry.responder)
        {
            let m1 = self.pending_m1.remove(position);
            return self.pair(m1, entry, env);
        }
        self.pending_m2.push(entry);
        StepOutput::default()
    }

    fn pair(&mut self, m1: PendingM1, m2: PendingM2, env: &mut ProtocolEnv) -> StepOutput {
        let initiator_key = self.long_term_of[&m1.initiator].clone();
        let responder_key = self.long_term_of[&m2.responder].clone();
        let agent = match self.agent_of.get(&m1.initiator) {
            Some(agent) => agent.clone(),
            None => return StepOutput::default(),
        };
        let responder_main = m2.responder.clone();
        let session_key = env
            .registry
            .fresh_session_key([agent.clone(), responder_main]);
        self.keys_held.insert(session_key.clone());
        let for_agent = encrypt(
            env.registry,
            &initiator_key,
            Term::tuple([
                Term::party(m2.responder.clone()),
                Term::nonce(m1.nonce),
                Term::time(m2.issued),
                Term::key(session_key.clone()),
                Term::nonce(m2.nonce),
            ]),
        )
        .expect("long-term keys are registered at setup");
        let for_responder = encrypt(
            env.registry,
            &responder_key,
            Term::tuple([
                Term::party(m1.initiator),
                Term::key(session_key),
                Term::share(m2.share),
            ]),
        )
        .expect("long-term keys are registered at setup");
        StepOutput::send(ProtocolMessage {
            msg_type: MsgType::KdcToAa,
            payload: Term::tuple([for_agent, for_responder]),
            sender: self.me.clone(),
            receiver: agent,
        })
    }

    /// Pending-table sizes, oldest first: (requests, reports).
    pub fn pending(&self) -> (usize, usize) {
        (self.pending_m1.len(), self.pending_m2.len())
    }
}

// ---------------------------------------------------------------------------
// Three-stage roles
// ---------------------------------------------------------------------------

/// Sender of the three-stage exchange: lifts the message and applies its key.
#[derive(Debug)]
pub struct TsSender {
    pub me: PartyId,
    pub responder_agent: PartyId,
    pub key: DirectedKey,
    pub domain: TransformDomain,
    pub launch: Option<(SessionTag, String)>,
    pub directed_keys: Vec<DirectedKey>,
}

impl TsSender {
    fn activate(&mut self, _env: &mut ProtocolEnv) -> StepOutput {
        let (tag, message) = match &self.launch {
            Some(launch) => launch.clone(),
            None => return StepOutput::default(),
        };
        let stream = match lift(message.as_bytes(), self.domain) {
            Ok(stream) => stream,
            Err(_) => {
                return StepOutput::finalize(Finalization::rejected(
                    Some(tag),
                    SessionStatus::RejectedIntegrity,
                ))
            }
        };
        let transformed = self
            .key
            .transform(&stream)
            .expect("sender key and lift share one domain");
        StepOutput::send(ProtocolMessage {
            msg_type: MsgType::Ts1,
            payload: Term::stream(transformed),
            sender: self.me.clone(),
            receiver: self.responder_agent.clone(),
        })
    }
}

/// A relay stage: transforms the incoming stream with its directed key and
/// forwards it as the next message in the chain.
#[derive(Debug)]
pub struct TsRelay {
    pub me: PartyId,
    pub next_hop: PartyId,
    pub key: DirectedKey,
    pub accepts: MsgType,
    pub emits: MsgType,
    pub directed_keys: Vec<DirectedKey>,
}

impl TsRelay {
    fn handle(&mut self, msg: &ProtocolMessage, _env: &mut ProtocolEnv) -> StepOutput {
        let stream = match (&msg.msg_type, &msg.payload) {
            (t, Term::Atom(Atom::Stream(stream))) if *t == self.accepts => stream.clone(),
            _ => return StepOutput::default(),
        };
        let transformed = match self.key.transform(&stream) {
            Ok(stream) => stream,
            Err(_) => return StepOutput::default(),
        };
        StepOutput::send(ProtocolMessage {
            msg_type: self.emits,
            payload: Term::stream(transformed),
            sender: self.me.clone(),
            receiver: self.next_hop.clone(),
        })
    }
}

/// Final stage: removes the last key locally and recovers the message.
#[derive(Debug)]
pub struct TsFinisher {
    pub me: PartyId,
    pub key: DirectedKey,
    pub session: SessionTag,
    pub directed_keys: Vec<DirectedKey>,
}

impl TsFinisher {
    fn handle(&mut self, msg: &ProtocolMessage, _env: &mut ProtocolEnv) -> StepOutput {
        let stream = match (&msg.msg_type, &msg.payload) {
            (MsgType::Ts3, Term::Atom(Atom::Stream(stream))) => stream.clone(),
            _ => return StepOutput::default(),
        };
        let reject = || {
            StepOutput::finalize(Finalization::rejected(
                Some(self.session),
                SessionStatus::RejectedIntegrity,
            ))
        };
        let recovered = match self.key.transform(&stream) {
            Ok(stream) => stream,
            Err(_) => return reject(),
        };
        let bytes = match unlift(&recovered) {
            Ok(bytes) => bytes,
            Err(_) => return reject(),
        };
        let text = match String::from_utf8(bytes) {
            Ok(text) => text,
            Err(_) => return reject(),
        };
        StepOutput::finalize(Finalization {
            session: Some(self.session),
            status: SessionStatus::Accepted,
            delivered: Some(text),
        })
    }
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

/// Any node the simulator can host.
#[derive(Debug)]
pub enum PartyNode {
    InitiatorMain(InitiatorMain),
    InitiatorAgent(InitiatorAgent),
    ResponderAgent(ResponderAgent),
    ResponderMain(ResponderMain),
    Kdc(Kdc),
    TsSender(TsSender),
    TsRelay(TsRelay),
    TsFinisher(TsFinisher),
}

impl PartyNode {
    pub fn id(&self) -> &PartyId {
        match self {
            PartyNode::InitiatorMain(n) => &n.me,
            PartyNode::InitiatorAgent(n) => &n.me,
            PartyNode::ResponderAgent(n) => &n.me,
            PartyNode::ResponderMain(n) => &n.me,
            PartyNode::Kdc(n) => &n.me,
            PartyNode::TsSender(n) => &n.me,
            PartyNode::TsRelay(n) => &n.me,
            PartyNode::TsFinisher(n) => &n.me,
        }
    }

    /// Called once at tick zero; only initiators emit anything.
    pub fn activate(&mut self, env: &mut ProtocolEnv) -> StepOutput {
        match self {
            PartyNode::InitiatorMain(n) => n.activate(env),
            PartyNode::TsSender(n) => n.activate(env),
            _ => StepOutput::default(),
        }
    }

    pub fn handle(&mut self, msg: &ProtocolMessage, env: &mut ProtocolEnv) -> StepOutput {
        match self {
            PartyNode::InitiatorMain(_) => StepOutput::default(),
            PartyNode::InitiatorAgent(n) => n.handle(msg, env),
            PartyNode::ResponderAgent(n) => n.handle(msg, env),
            PartyNode::ResponderMain(n) => n.handle(msg, env),
            PartyNode::Kdc(n) => n.handle(msg, env),
            PartyNode::TsSender(_) => StepOutput::default(),
            PartyNode::TsRelay(n) => n.handle(msg, env),
            PartyNode::TsFinisher(n) => n.handle(msg, env),
        }
    }

    /// Envelope keys the node holds right now, for the confinement audit.
    pub fn held_keys(&self) -> BTreeSet<KeyId> {
        match self {
            PartyNode::InitiatorMain(n) => n.keys_held.clone(),
            PartyNode::InitiatorAgent(n) => n.keys_held.clone(),
            PartyNode::ResponderAgent(n) => n.keys_held.clone(),
            PartyNode::ResponderMain(n) => n.keys_held.clone(),
            PartyNode::Kdc(n) => n.keys_held.clone(),
            _ => BTreeSet::new(),
        }
    }
}

// ---------------------------------------------------------------------------
// Convenience runners
// ---------------------------------------------------------------------------

/// Network conditions for the convenience runners.
#[derive(Debug, Clone)]
pub struct NetworkProfile {
    pub seed: u64,
    pub delta: u64,
    pub timeout: u64,
    pub adversary: crate::sim::AdversaryConfig,
}

impl Default for NetworkProfile {
    fn default() -> Self {
        NetworkProfile {
            seed: 0,
            delta: 10,
            timeout: 50,
            adversary: crate::sim::AdversaryConfig::none(),
        }
    }
}

/// Runs one three-stage exchange of `message` under the two keys and returns
/// the session's outcome along with the full run report.
pub fn run_three_stage(
    message: &str,
    key_a: &crate::transform::TransformKey,
    key_b: &crate::transform::TransformKey,
    net: &NetworkProfile,
) -> Result<(SessionOutcome, crate::sim::RunReport), crate::scenario::ConfigError> {
    if key_a.domain() != key_b.domain() {
        return Err(crate::scenario::ConfigError::Invalid(format!(
            "keys live in different domains: {} vs {}",
            key_a.domain().modulus(),
            key_b.domain().modulus()
        )));
    }
    let mut cfg = crate::scenario::ScenarioConfig::three_stage_with_keys(
        message,
        key_a.domain().modulus(),
        key_a.exponent(),
        key_b.exponent(),
        net.seed,
    );
    cfg.delta = net.delta;
    cfg.timeout = net.timeout;
    cfg.adversary = net.adversary.clone();
    run_single(cfg)
}

/// Runs one five-step exchange of `message` between the default principals.
pub fn run_modified_protocol(
    message: &str,
    chunk_width: u8,
    net: &NetworkProfile,
) -> Result<(SessionOutcome, crate::sim::RunReport), crate::scenario::ConfigError> {
    let mut cfg = crate::scenario::ScenarioConfig::modified(message, chunk_width, net.seed);
    cfg.delta = net.delta;
    cfg.timeout = net.timeout;
    cfg.adversary = net.adversary.clone();
    run_single(cfg)
}

fn run_single(
    cfg: crate::scenario::ScenarioConfig,
) -> Result<(SessionOutcome, crate::sim::RunReport), crate::scenario::ConfigError> {
    let report = crate::sim::schedule_and_run(&cfg)?;
    let tag = report.sessions[0].tag;
    let outcome = report
        .outcomes
        .iter()
        .find(|o| o.session == Some(tag))
        .or_else(|| report.outcomes.first())
        .cloned()
        .expect("every declared session ends with an outcome");
    Ok((outcome, report))
}
