//! Live conversations driven by an external user.
//!
//! A session owns its conversation state and trajectory; the policy is
//! rebuilt for every turn from shared read-only parameters.

use crate::turn::{Labels, Turn};
use bundle_mcr::data::{Bundle, Catalog};
use bundle_mcr::env::{
    replay, Action, ConversationState, Env, Feedback, ItemFeedback, ItemVerdict, ResultId, RoundRecord, TagFeedback,
    TagVerdict,
};
use bundle_mcr::eval::{bundle_metrics, AskOnlyPolicy, BuntMode, BuntPolicy, BundleMetrics, FreqPolicy, RandomPolicy, RecommenderPolicy};
use bundle_mcr::nn::{Bunt, Sampling};
use bundle_mcr::{ItemId, SlotId, UserId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyName {
    #[serde(rename = "bunt-learn")]
    BuntLearn,
    #[serde(rename = "bunt-all")]
    BuntAll,
    #[serde(rename = "random")]
    Random,
    #[serde(rename = "freq")]
    Freq,
    #[serde(rename = "ask-only")]
    AskOnly,
}

impl PolicyName {
    pub const ALL: [PolicyName; 5] = [
        PolicyName::BuntLearn,
        PolicyName::BuntAll,
        PolicyName::Random,
        PolicyName::Freq,
        PolicyName::AskOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyName::BuntLearn => "bunt-learn",
            PolicyName::BuntAll => "bunt-all",
            PolicyName::Random => "random",
            PolicyName::Freq => "freq",
            PolicyName::AskOnly => "ask-only",
        }
    }
}

impl fmt::Display for PolicyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyName {
    type Err = ServiceError;
    fn from_str(s: &str) -> Result<Self, ServiceError> {
        PolicyName::ALL.into_iter().find(|p| p.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = PolicyName::ALL.iter().map(|p| p.as_str()).collect();
            ServiceError::BadRequest(format!("unknown policy {s:?}; available: {}", names.join(", ")))
        })
    }
}

#[derive(Debug)]
pub enum ServiceError {
    NotFound(String),
    BadRequest(String),
    /// Well-formed request that does not fit the session's pending turn.
    Invalid(String),
    Conflict(String),
    Internal(String),
}

impl fmt::Display for ServiceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (ServiceError::NotFound(m)
        | ServiceError::BadRequest(m)
        | ServiceError::Invalid(m)
        | ServiceError::Conflict(m)
        | ServiceError::Internal(m)) = self;
        f.write_str(m)
    }
}

impl std::error::Error for ServiceError {}

impl From<bundle_mcr::Error> for ServiceError {
    fn from(e: bundle_mcr::Error) -> Self {
        match e {
            bundle_mcr::Error::Validation(m) => ServiceError::Invalid(m),
            other => ServiceError::Internal(other.to_string()),
        }
    }
}

/// Read-only data shared by every session.
pub struct ServiceData {
    pub catalog: Catalog,
    /// Offline bundles per known user.
    pub histories: BTreeMap<UserId, Vec<Bundle>>,
    pub checkpoints: BTreeMap<String, Bunt>,
    pub labels: Labels,
    freq: Option<FreqPolicy>,
}

impl ServiceData {
    pub fn new(
        catalog: Catalog,
        histories: BTreeMap<UserId, Vec<Bundle>>,
        checkpoints: BTreeMap<String, Bunt>,
        labels: Labels,
    ) -> anyhow::Result<Self> {
        anyhow::ensure!(!checkpoints.is_empty(), "at least one checkpoint is required");
        for (name, m) in &checkpoints {
            anyhow::ensure!(
                m.vocab == bundle_mcr::nn::Vocab::of(&catalog),
                "checkpoint {name} was trained on a different catalog"
            );
        }
        let hs: Vec<_> = histories
            .iter()
            .map(|(&user, b)| bundle_mcr::data::UserHistory { user, bundles: b.clone() })
            .collect();
        let freq = FreqPolicy::new(&hs).ok();
        Ok(ServiceData {
            catalog,
            histories,
            checkpoints,
            labels,
            freq,
        })
    }

    fn policy<'a>(&'a self, name: PolicyName, model: &'a Bunt) -> Result<Box<dyn RecommenderPolicy + 'a>, ServiceError> {
        Ok(match name {
            PolicyName::BuntLearn => Box::new(BuntPolicy::new(model, BuntMode::Learn, Sampling::Greedy)),
            PolicyName::BuntAll => Box::new(BuntPolicy::new(model, BuntMode::All, Sampling::Greedy)),
            PolicyName::Random => Box::new(RandomPolicy),
            PolicyName::AskOnly => Box::new(AskOnlyPolicy),
            PolicyName::Freq => Box::new(
                self.freq
                    .clone()
                    .ok_or_else(|| ServiceError::BadRequest("freq policy needs interaction data".into()))?,
            ),
        })
    }
}

/// Who is talking: a known user (their offline bundles become the history)
/// or a fresh one who supplies a history directly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum UserRef {
    Known(u32),
    Fresh(String),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub user_id: UserRef,
    pub policy: String,
    /// Defaults to the first checkpoint the server holds.
    #[serde(default)]
    pub checkpoint: Option<String>,
    /// Past bundles of a fresh user.
    #[serde(default)]
    pub history: Option<Vec<Vec<u32>>>,
    /// Declared target bundle: enables completion detection and metrics.
    #[serde(default)]
    pub target: Option<Vec<u32>>,
    #[serde(default)]
    pub seed: u64,
}

/// Per-slot verdicts for the pending turn, mirroring the environment's
/// feedback type with string verdicts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum FeedbackRequest {
    #[serde(rename = "RECOMMEND")]
    Recommend {
        verdicts: Vec<ItemVerdictEntry>,
        /// The user declares the bundle complete.
        #[serde(default)]
        satisfied: bool,
    },
    #[serde(rename = "ASK")]
    Ask { verdicts: Vec<TagVerdictEntry> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemVerdictEntry {
    pub slot: SlotId,
    pub verdict: ItemVerdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TagVerdictEntry {
    pub slot: SlotId,
    pub attr: TagVerdict,
    pub cat: TagVerdict,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    TargetComplete,
    UserSatisfied,
    BudgetExhausted,
    NoLegalMove,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub accepted: Vec<ItemId>,
    pub rounds_used: usize,
    pub reason: EndReason,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<BundleMetrics>,
}

/// Body returned by create and feedback.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub session_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub turn: Option<Turn>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<Summary>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SlotView {
    pub slot: SlotId,
    pub accepted_attrs: Vec<bundle_mcr::AttrId>,
    pub accepted_cats: Vec<bundle_mcr::CatId>,
}

/// Read-only view returned by `GET /sessions/{id}`.
#[derive(Clone, Debug, Serialize)]
pub struct Snapshot {
    pub session_id: String,
    pub policy: PolicyName,
    pub checkpoint: String,
    pub open: bool,
    pub round: u32,
    pub max_rounds: u32,
    pub active: Vec<SlotView>,
    pub accepted: Vec<ItemId>,
    pub result_log: Vec<ResultId>,
    pub pending: Option<Turn>,
    pub summary: Option<Summary>,
    pub trajectory: Vec<RoundRecord>,
}

pub struct Session {
    pub id: String,
    pub policy: PolicyName,
    pub checkpoint: String,
    pub initial: ConversationState,
    pub state: ConversationState,
    pub target: Option<Bundle>,
    pub records: Vec<RoundRecord>,
    pending: Option<Action>,
    summary: Option<Summary>,
    rng: ChaCha8Rng,
    /// Replies already given, by idempotency key.
    replies: HashMap<String, Reply>,
}

impl Session {
    /// Starts a conversation and plays the policy's first turn.
    pub fn create(data: &ServiceData, id: String, req: &CreateRequest) -> Result<(Session, Reply), ServiceError> {
        let policy: PolicyName = req.policy.parse()?;
        let checkpoint = match &req.checkpoint {
            Some(c) => c.clone(),
            None => data.checkpoints.keys().next().cloned().unwrap_or_default(),
        };
        let model = data.checkpoints.get(&checkpoint).ok_or_else(|| {
            let names: Vec<&str> = data.checkpoints.keys().map(String::as_str).collect();
            ServiceError::NotFound(format!("unknown checkpoint {checkpoint:?}; available: {}", names.join(", ")))
        })?;
        let env = Env::new(&data.catalog, model.hp.k, model.hp.max_rounds)?;
        let to_bundle = |v: &[u32]| -> Result<Bundle, ServiceError> {
            if let Some(i) = v.iter().find(|&&i| !data.catalog.contains(ItemId(i))) {
                return Err(ServiceError::Invalid(format!("unknown item {i}")));
            }
            Ok(Bundle::new(v.iter().map(|&i| ItemId(i)))?)
        };
        let (user, history) = match (&req.user_id, &req.history) {
            (UserRef::Known(u), None) => {
                let h = data
                    .histories
                    .get(&UserId(*u))
                    .ok_or_else(|| ServiceError::NotFound(format!("unknown user {u}")))?;
                (UserId(*u), h.clone())
            }
            (UserRef::Known(_), Some(_)) => {
                return Err(ServiceError::BadRequest("history is only accepted for a fresh user".into()))
            }
            (UserRef::Fresh(s), h) if s == "fresh" => {
                let h = h
                    .as_ref()
                    .ok_or_else(|| ServiceError::BadRequest("a fresh user must supply a history".into()))?;
                let bundles = h.iter().map(|b| to_bundle(b)).collect::<Result<Vec<_>, _>>()?;
                let fresh_id = data.histories.keys().next_back().map_or(0, |u| u.0 + 1);
                (UserId(fresh_id), bundles)
            }
            (UserRef::Fresh(s), _) => {
                return Err(ServiceError::BadRequest(format!("user_id must be a number or \"fresh\", got {s:?}")))
            }
        };
        let target = req.target.as_deref().map(to_bundle).transpose()?;
        let initial = env.init_conversation(user, &history)?;
        let mut session = Session {
            id,
            policy,
            checkpoint,
            state: initial.clone(),
            initial,
            target,
            records: Vec::new(),
            pending: None,
            summary: None,
            rng: ChaCha8Rng::seed_from_u64(req.seed),
            replies: HashMap::new(),
        };
        session.advance(data)?;
        let reply = session.reply(data);
        Ok((session, reply))
    }

    fn model<'a>(&self, data: &'a ServiceData) -> Result<&'a Bunt, ServiceError> {
        data.checkpoints
            .get(&self.checkpoint)
            .ok_or_else(|| ServiceError::Internal(format!("checkpoint {} disappeared", self.checkpoint)))
    }

    fn env<'a>(&self, data: &'a ServiceData) -> Result<Env<'a>, ServiceError> {
        let m = self.model(data)?;
        Ok(Env::new(&data.catalog, m.hp.k, m.hp.max_rounds)?)
    }

    /// Produces the next system turn, or closes the session when no move is legal.
    fn advance(&mut self, data: &ServiceData) -> Result<(), ServiceError> {
        let env = self.env(data)?;
        let model = self.model(data)?;
        let (can_rec, can_ask) = env.available_moves(&self.state);
        let mut policy = data.policy(self.policy, model)?;
        policy.begin(&self.state)?;
        match policy.act(&self.state, can_rec, can_ask, &mut self.rng)? {
            Some(action) => self.pending = Some(action),
            None => self.close(EndReason::NoLegalMove)?,
        }
        Ok(())
    }

    fn close(&mut self, reason: EndReason) -> Result<(), ServiceError> {
        self.pending = None;
        let metrics = match &self.target {
            Some(t) => Some(bundle_metrics(&self.state.accepted, t)?),
            None => None,
        };
        self.summary = Some(Summary {
            accepted: self.state.accepted.iter().copied().collect(),
            rounds_used: self.records.len(),
            reason,
            metrics,
        });
        Ok(())
    }

    pub fn is_open(&self) -> bool {
        self.summary.is_none()
    }

    pub fn pending_turn(&self, data: &ServiceData) -> Option<Turn> {
        self.pending
            .as_ref()
            .map(|a| Turn::new(a, self.state.round, &data.catalog, &data.labels))
    }

    fn reply(&self, data: &ServiceData) -> Reply {
        Reply {
            session_id: self.id.clone(),
            turn: self.pending_turn(data),
            summary: self.summary.clone(),
        }
    }

    /// Applies one round of feedback. A repeated idempotency key returns the
    /// reply given the first time without touching the session.
    pub fn feedback(&mut self, data: &ServiceData, key: &str, req: &FeedbackRequest) -> Result<Reply, ServiceError> {
        if let Some(r) = self.replies.get(key) {
            return Ok(r.clone());
        }
        let Some(action) = self.pending.clone() else {
            return Err(ServiceError::Conflict(format!("session {} is closed", self.id)));
        };
        let feedback = to_feedback(&action, req)?;
        let env = self.env(data)?;
        let out = env.step(&self.state, &action, &feedback, self.target.as_ref())?;
        self.records
            .push(RoundRecord::new(self.state.round, &action, &feedback, out.result, &out.rewards));
        self.state = out.state;
        if out.done {
            let reason = if out.result == ResultId::BundleSuc {
                if self.target.is_some() {
                    EndReason::TargetComplete
                } else {
                    EndReason::UserSatisfied
                }
            } else {
                EndReason::BudgetExhausted
            };
            self.close(reason)?;
        } else {
            self.advance(data)?;
        }
        let reply = self.reply(data);
        self.replies.insert(key.to_string(), reply.clone());
        Ok(reply)
    }

    pub fn snapshot(&self, data: &ServiceData) -> Snapshot {
        Snapshot {
            session_id: self.id.clone(),
            policy: self.policy,
            checkpoint: self.checkpoint.clone(),
            open: self.is_open(),
            round: self.state.round,
            max_rounds: self.model(data).map_or(0, |m| m.hp.max_rounds),
            active: self
                .state
                .active_slots()
                .map(|s| SlotView {
                    slot: s.id,
                    accepted_attrs: s.accepted_attrs.iter().copied().collect(),
                    accepted_cats: s.accepted_cats.iter().copied().collect(),
                })
                .collect(),
            accepted: self.state.accepted.iter().copied().collect(),
            result_log: self.state.result_log.clone(),
            pending: self.pending_turn(data),
            summary: self.summary.clone(),
            trajectory: self.records.clone(),
        }
    }

    /// The state obtained by replaying the trajectory from the initial state.
    pub fn replayed(&self, data: &ServiceData) -> Result<ConversationState, ServiceError> {
        Ok(replay(&self.env(data)?, &self.initial, &self.records)?)
    }
}

/// Checks the request against the pending action: same kind, and exactly
/// one verdict per proposed slot.
fn to_feedback(action: &Action, req: &FeedbackRequest) -> Result<Feedback, ServiceError> {
    let proposed: BTreeSet<SlotId> = match action {
        Action::Recommend(p) => p.keys().copied().collect(),
        Action::Ask(q) => q.keys().copied().collect(),
    };
    let check = |slots: Vec<SlotId>| -> Result<(), ServiceError> {
        let mut seen = BTreeSet::new();
        for s in slots {
            if !proposed.contains(&s) {
                return Err(ServiceError::Invalid(format!("slot {s} is not part of the pending turn")));
            }
            if !seen.insert(s) {
                return Err(ServiceError::Invalid(format!("slot {s} has more than one verdict")));
            }
        }
        if let Some(s) = proposed.difference(&seen).next() {
            return Err(ServiceError::Invalid(format!("missing verdict for slot {s}")));
        }
        Ok(())
    };
    match (action, req) {
        (Action::Recommend(_), FeedbackRequest::Recommend { verdicts, satisfied }) => {
            check(verdicts.iter().map(|v| v.slot).collect())?;
            Ok(Feedback::Items(ItemFeedback {
                verdicts: verdicts.iter().map(|v| (v.slot, v.verdict)).collect(),
                satisfied: *satisfied,
            }))
        }
        (Action::Ask(_), FeedbackRequest::Ask { verdicts }) => {
            check(verdicts.iter().map(|v| v.slot).collect())?;
            Ok(Feedback::Tags(TagFeedback {
                verdicts: verdicts.iter().map(|v| (v.slot, (v.attr, v.cat))).collect(),
            }))
        }
        (Action::Recommend(_), FeedbackRequest::Ask { .. }) => {
            Err(ServiceError::Invalid("pending turn is RECOMMEND, got ASK feedback".into()))
        }
        (Action::Ask(_), FeedbackRequest::Recommend { .. }) => {
            Err(ServiceError::Invalid("pending turn is ASK, got RECOMMEND feedback".into()))
        }
    }
}
