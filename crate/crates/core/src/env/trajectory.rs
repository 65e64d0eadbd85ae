//! Per-round trajectory records and event-sourced replay.

use super::state::{ConversationState, ResultId};
use super::transition::{
    Action, Env, Feedback, ItemFeedback, ItemVerdict, Rewards, TagFeedback, TagVerdict,
};
use crate::error::{Error, Result};
use crate::ids::{AttrId, CatId, ItemId, SlotId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoundKind {
    #[serde(rename = "REC")]
    Rec,
    #[serde(rename = "ASK")]
    Ask,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Proposal {
    Item(ItemId),
    Tags { attr: AttrId, cat: CatId },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SlotVerdict {
    Item(ItemVerdict),
    Tags { attr: TagVerdict, cat: TagVerdict },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SlotReward {
    Item(f64),
    Tags { attr: f64, cat: f64 },
}

/// One line of a trajectory dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub kind: RoundKind,
    pub proposals: BTreeMap<SlotId, Proposal>,
    pub feedback: BTreeMap<SlotId, SlotVerdict>,
    pub result: ResultId,
    pub rewards: BTreeMap<SlotId, SlotReward>,
}

impl RoundRecord {
    pub fn new(round: u32, action: &Action, feedback: &Feedback, result: ResultId, rewards: &Rewards) -> Self {
        let (kind, proposals) = match action {
            Action::Recommend(p) => (
                RoundKind::Rec,
                p.iter().map(|(&s, &i)| (s, Proposal::Item(i))).collect(),
            ),
            Action::Ask(q) => (
                RoundKind::Ask,
                q.iter()
                    .map(|(&s, &(attr, cat))| (s, Proposal::Tags { attr, cat }))
                    .collect(),
            ),
        };
        let feedback = match feedback {
            Feedback::Items(f) => f.verdicts.iter().map(|(&s, &v)| (s, SlotVerdict::Item(v))).collect(),
            Feedback::Tags(f) => f
                .verdicts
                .iter()
                .map(|(&s, &(attr, cat))| (s, SlotVerdict::Tags { attr, cat }))
                .collect(),
        };
        let rewards = match rewards {
            Rewards::Items(r) => r.iter().map(|(&s, &v)| (s, SlotReward::Item(v))).collect(),
            Rewards::Tags { attr, cat } => attr
                .iter()
                .map(|(&s, &a)| (s, SlotReward::Tags { attr: a, cat: cat[&s] }))
                .collect(),
        };
        RoundRecord {
            round,
            kind,
            proposals,
            feedback,
            result,
            rewards,
        }
    }

    /// Reconstructs the action and feedback this record describes.
    pub fn action_and_feedback(&self) -> Result<(Action, Feedback)> {
        let bad = || Error::Validation(format!("round {}: inconsistent record", self.round));
        match self.kind {
            RoundKind::Rec => {
                let mut p = BTreeMap::new();
                let mut v = BTreeMap::new();
                for (&s, prop) in &self.proposals {
                    let Proposal::Item(i) = prop else { return Err(bad()) };
                    p.insert(s, *i);
                }
                for (&s, verdict) in &self.feedback {
                    let SlotVerdict::Item(x) = verdict else { return Err(bad()) };
                    v.insert(s, *x);
                }
                Ok((
                    Action::Recommend(p),
                    Feedback::Items(ItemFeedback {
                        verdicts: v,
                        satisfied: self.result == ResultId::BundleSuc,
                    }),
                ))
            }
            RoundKind::Ask => {
                let mut q = BTreeMap::new();
                let mut v = BTreeMap::new();
                for (&s, prop) in &self.proposals {
                    let Proposal::Tags { attr, cat } = prop else { return Err(bad()) };
                    q.insert(s, (*attr, *cat));
                }
                for (&s, verdict) in &self.feedback {
                    let SlotVerdict::Tags { attr, cat } = verdict else { return Err(bad()) };
                    v.insert(s, (*attr, *cat));
                }
                Ok((Action::Ask(q), Feedback::Tags(TagFeedback { verdicts: v })))
            }
        }
    }
}

/// Replays a trajectory from an initial state. The transition is pure, so the
/// result equals the state reached live.
pub fn replay(env: &Env<'_>, initial: &ConversationState, records: &[RoundRecord]) -> Result<ConversationState> {
    let mut st = initial.clone();
    for r in records {
        let (action, fb) = r.action_and_feedback()?;
        let out = env.step(&st, &action, &fb, None)?;
        if out.result != r.result {
            return Err(Error::Validation(format!(
                "round {}: replay produced {:?}, record says {:?}",
                r.round, out.result, r.result
            )));
        }
        st = out.state;
    }
    Ok(st)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_json_shape() {
        let action = Action::Ask(BTreeMap::from([(SlotId(0), (AttrId(5), CatId(1)))]));
        let fb = Feedback::Tags(TagFeedback {
            verdicts: BTreeMap::from([(SlotId(0), (TagVerdict::Accept, TagVerdict::Reject))]),
        });
        let rewards = Rewards::Tags {
            attr: BTreeMap::from([(SlotId(0), 1.0)]),
            cat: BTreeMap::from([(SlotId(0), 0.0)]),
        };
        let rec = RoundRecord::new(3, &action, &fb, ResultId::AskSuc, &rewards);
        let json = serde_json::to_string(&rec).unwrap();
        assert_eq!(
            json,
            r#"{"round":3,"kind":"ASK","proposals":{"0":{"attr":5,"cat":1}},"feedback":{"0":{"attr":"ACCEPT","cat":"REJECT"}},"result":"ASK_SUC","rewards":{"0":{"attr":1.0,"cat":0.0}}}"#
        );
        let back: RoundRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rec);
        assert_eq!(back.action_and_feedback().unwrap(), (action, fb));
    }
}
