use crate::nn::{Matrix, ParamGroup};
use serde::{Deserialize, Serialize};

/// The four jointly trained agents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Agent {
    Manage,
    Item,
    Attr,
    Cat,
}

impl Agent {
    pub const ALL: [Agent; 4] = [Agent::Manage, Agent::Item, Agent::Attr, Agent::Cat];

    pub fn group(self) -> ParamGroup {
        match self {
            Agent::Manage => ParamGroup::Manage,
            Agent::Item => ParamGroup::Item,
            Agent::Attr => ParamGroup::Attr,
            Agent::Cat => ParamGroup::Cat,
        }
    }
}

/// Detached state seen by an agent when it acted.
#[derive(Clone, Debug, PartialEq)]
pub enum StateRepr {
    /// One slot row of `O^L` (`1 × d`).
    Slot(Matrix),
    /// Active slot rows (`m × d`) and the result-log vector (`1 × d`).
    Manager { rows: Matrix, result: Matrix },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionRecord {
    pub state: StateRepr,
    /// `None` at episode end.
    pub next_state: Option<StateRepr>,
    /// Admissible actions at collection time (empty for the manager).
    pub mask: Vec<bool>,
    pub action: usize,
    pub reward: f64,
    pub logp: f64,
    pub value: f64,
    pub done: bool,
}

/// Per-agent replay buffers.
#[derive(Clone, Debug, Default)]
pub struct Buffers {
    pub manage: Vec<TransitionRecord>,
    pub item: Vec<TransitionRecord>,
    pub attr: Vec<TransitionRecord>,
    pub cat: Vec<TransitionRecord>,
}

impl Buffers {
    pub fn get(&self, a: Agent) -> &Vec<TransitionRecord> {
        match a {
            Agent::Manage => &self.manage,
            Agent::Item => &self.item,
            Agent::Attr => &self.attr,
            Agent::Cat => &self.cat,
        }
    }

    pub fn get_mut(&mut self, a: Agent) -> &mut Vec<TransitionRecord> {
        match a {
            Agent::Manage => &mut self.manage,
            Agent::Item => &mut self.item,
            Agent::Attr => &mut self.attr,
            Agent::Cat => &mut self.cat,
        }
    }

    pub fn append(&mut self, other: Buffers) {
        for a in Agent::ALL {
            let src = match a {
                Agent::Manage => &other.manage,
                Agent::Item => &other.item,
                Agent::Attr => &other.attr,
                Agent::Cat => &other.cat,
            };
            self.get_mut(a).extend(src.iter().cloned());
        }
    }

    pub fn len(&self) -> usize {
        Agent::ALL.iter().map(|&a| self.get(a).len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Discounted return-to-go, restarting after every `done` record.
pub fn returns(records: &[TransitionRecord], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; records.len()];
    let mut next = 0.0;
    for (i, r) in records.iter().enumerate().rev() {
        if r.done {
            next = 0.0;
        }
        next = r.reward + gamma * next;
        out[i] = next;
    }
    out
}
