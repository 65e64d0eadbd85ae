use super::{read_records, write_lines, Bundle, UserHistory};
use crate::error::{Error, Result};
use crate::ids::{ItemId, UserId};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Partition {
    Online,
    Valid,
    Test,
}

impl std::str::FromStr for Partition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "online" => Ok(Partition::Online),
            "valid" => Ok(Partition::Valid),
            "test" => Ok(Partition::Test),
            other => Err(Error::Config(format!("unknown partition {other:?}"))),
        }
    }
}

/// Leave-one-out split: each user keeps N-1 offline bundles and one held-out
/// target; users are partitioned 6:2:2 into online/valid/test.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub offline: BTreeMap<UserId, Vec<Bundle>>,
    pub targets: BTreeMap<UserId, Bundle>,
    pub partition: BTreeMap<UserId, Partition>,
}

impl DatasetSplit {
    pub fn users_in(&self, part: Partition) -> Vec<UserId> {
        self.partition
            .iter()
            .filter(|(_, &p)| p == part)
            .map(|(&u, _)| u)
            .collect()
    }

    pub fn history(&self, user: UserId) -> Option<&[Bundle]> {
        self.offline.get(&user).map(Vec::as_slice)
    }

    pub fn target(&self, user: UserId) -> Option<&Bundle> {
        self.targets.get(&user)
    }

    /// Offline histories as `UserHistory` values, in user order.
    pub fn offline_histories(&self) -> Vec<UserHistory> {
        self.offline
            .iter()
            .map(|(&user, b)| UserHistory {
                user,
                bundles: b.clone(),
            })
            .collect()
    }
}

pub fn split_leave_one_out(histories: &[UserHistory], seed: u64) -> Result<DatasetSplit> {
    if histories.is_empty() {
        return Err(Error::Validation("cannot split an empty corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut offline = BTreeMap::new();
    let mut targets = BTreeMap::new();
    for h in histories {
        if h.bundles.len() < 2 {
            return Err(Error::Validation(format!(
                "user {} has fewer than two bundles",
                h.user
            )));
        }
        let t = rng.random_range(0..h.bundles.len());
        let mut rest = h.bundles.clone();
        let target = rest.remove(t);
        offline.insert(h.user, rest);
        targets.insert(h.user, target);
    }
    let mut users: Vec<UserId> = histories.iter().map(|h| h.user).collect();
    users.sort();
    users.shuffle(&mut rng);
    let n = users.len();
    let n_online = (n as f64 * 0.6).round() as usize;
    let n_valid = ((n as f64 * 0.2).round() as usize).min(n - n_online);
    let partition = users
        .into_iter()
        .enumerate()
        .map(|(i, u)| {
            let p = if i < n_online {
                Partition::Online
            } else if i < n_online + n_valid {
                Partition::Valid
            } else {
                Partition::Test
            };
            (u, p)
        })
        .collect();
    Ok(DatasetSplit {
        offline,
        targets,
        partition,
    })
}

#[derive(Serialize, Deserialize)]
struct SplitRecord {
    user: u32,
    partition: Partition,
    target: Vec<u32>,
}

pub fn write_split(path: impl AsRef<Path>, split: &DatasetSplit) -> Result<()> {
    write_lines(
        path.as_ref(),
        split.partition.iter().map(|(u, &p)| SplitRecord {
            user: u.0,
            partition: p,
            target: split.targets[u].items().iter().map(|i| i.0).collect(),
        }),
    )
}

/// Rebuilds a split from the interactions it was derived from and the emitted
/// split file. The offline list is the user's bundles minus the target.
pub fn load_split(path: impl AsRef<Path>, histories: &[UserHistory]) -> Result<DatasetSplit> {
    let path = path.as_ref();
    let by_user: BTreeMap<UserId, &UserHistory> = histories.iter().map(|h| (h.user, h)).collect();
    let mut split = DatasetSplit {
        offline: BTreeMap::new(),
        targets: BTreeMap::new(),
        partition: BTreeMap::new(),
    };
    read_records(path, |line, r: SplitRecord| {
        let user = UserId(r.user);
        let h = by_user.get(&user).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("user {} not present in interactions", r.user),
        })?;
        let target = Bundle::new(r.target.iter().map(|&i| ItemId(i)))?;
        let pos = h.bundles.iter().position(|b| *b == target).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("target of user {} is not one of their bundles", r.user),
        })?;
        let mut rest = h.bundles.clone();
        rest.remove(pos);
        split.offline.insert(user, rest);
        split.targets.insert(user, target);
        split.partition.insert(user, r.partition);
        Ok(())
    })?;
    Ok(split)
}
