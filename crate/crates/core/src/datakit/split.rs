//! Leave-one-out splitting and popularity tables.

use std::collections::BTreeSet;

use super::InteractionDataset;
use crate::error::{Error, Result};

/// One user's three views of their sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct UserSplit {
    pub user: usize,
    /// Items the model may train on: every position except the last two.
    pub train: Vec<usize>,
    pub valid_context: Vec<usize>,
    pub valid_target: usize,
    pub test_context: Vec<usize>,
    pub test_target: usize,
}

impl UserSplit {
    /// Number of next-item training pairs contributed by this user.
    pub fn train_pairs(&self) -> usize {
        self.train.len().saturating_sub(1)
    }

    /// The user's interacted-item set `I_u` as seen during training.
    pub fn interacted(&self) -> BTreeSet<usize> {
        self.train.iter().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeaveOneOut {
    pub users: Vec<UserSplit>,
    /// Users with fewer than three interactions.
    pub excluded: usize,
    pub num_items: usize,
}

impl LeaveOneOut {
    pub fn train_pair_count(&self) -> usize {
        self.users.iter().map(UserSplit::train_pairs).sum()
    }

    /// Error out when there is nothing to train on.
    pub fn require_train_pairs(&self) -> Result<()> {
        if self.train_pair_count() == 0 {
            return Err(Error::Config(format!(
                "the split has 0 training pairs across {} users (every sequence has length 3); refusing to train",
                self.users.len()
            )));
        }
        Ok(())
    }

    pub fn popularity(&self) -> Result<Popularity> {
        popularity_table(self.users.iter().map(|u| u.train.as_slice()), self.num_items)
    }
}

pub fn split_leave_one_out(dataset: &InteractionDataset) -> LeaveOneOut {
    let mut users = Vec::with_capacity(dataset.num_users());
    let mut excluded = 0;
    for (user, s) in dataset.sequences.iter().enumerate() {
        let n = s.len();
        if n < 3 {
            excluded += 1;
            continue;
        }
        users.push(UserSplit {
            user,
            train: s[..n - 2].to_vec(),
            valid_context: s[..n - 2].to_vec(),
            valid_target: s[n - 2],
            test_context: s[..n - 1].to_vec(),
            test_target: s[n - 1],
        });
    }
    if excluded > 0 {
        log::info!("leave-one-out split excluded {excluded} users with fewer than 3 interactions");
    }
    LeaveOneOut {
        users,
        excluded,
        num_items: dataset.num_items,
    }
}

/// Add-one smoothed item frequency over the training view.
#[derive(Clone, Debug, PartialEq)]
pub struct Popularity {
    pub probs: Vec<f64>,
    pub total_interactions: usize,
}

impl Popularity {
    pub fn get(&self, item: usize) -> Result<f64> {
        self.probs.get(item).copied().ok_or(Error::OutOfRange {
            what: "popularity item",
            index: item,
            len: self.probs.len(),
        })
    }

    pub fn log_probs(&self) -> Vec<f64> {
        self.probs.iter().map(|p| p.ln()).collect()
    }

    pub fn uniform(num_items: usize) -> Self {
        Self {
            probs: vec![1.0 / num_items as f64; num_items],
            total_interactions: 0,
        }
    }
}

pub fn popularity_table<'a>(train: impl IntoIterator<Item = &'a [usize]>, num_items: usize) -> Result<Popularity> {
    if num_items == 0 {
        return Err(Error::Config("popularity over an empty catalog".into()));
    }
    let mut counts = vec![0usize; num_items];
    let mut total = 0;
    for s in train {
        for &i in s {
            if i >= num_items {
                return Err(Error::OutOfRange {
                    what: "popularity item",
                    index: i,
                    len: num_items,
                });
            }
            counts[i] += 1;
            total += 1;
        }
    }
    let denom = (total + num_items) as f64;
    Ok(Popularity {
        probs: counts.iter().map(|&c| (c + 1) as f64 / denom).collect(),
        total_interactions: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn dataset(seqs: Vec<Vec<usize>>, n: usize) -> InteractionDataset {
        InteractionDataset {
            name: "t".into(),
            num_items: n,
            sequences: seqs,
            features: BTreeMap::new(),
            truth: None,
        }
    }

    #[test]
    fn four_item_sequence() {
        let s = split_leave_one_out(&dataset(vec![vec![0, 1, 2, 3]], 4));
        let u = &s.users[0];
        assert_eq!((u.test_context.as_slice(), u.test_target), (&[0, 1, 2][..], 3));
        assert_eq!((u.valid_context.as_slice(), u.valid_target), (&[0, 1][..], 2));
        assert_eq!(u.train, vec![0, 1]);
        assert_eq!(u.train_pairs(), 1);
    }

    #[test]
    fn three_item_sequences_leave_nothing_to_train() {
        let s = split_leave_one_out(&dataset(vec![vec![0, 1, 2], vec![2, 1, 0]], 3));
        assert_eq!(s.users[0].train_pairs(), 0);
        assert_eq!(s.train_pair_count(), 0);
        assert!(matches!(s.require_train_pairs(), Err(Error::Config(_))));
    }

    #[test]
    fn short_users_are_excluded() {
        let s = split_leave_one_out(&dataset(vec![vec![0, 1], vec![0, 1, 2, 3]], 4));
        assert_eq!(s.excluded, 1);
        assert_eq!(s.users.len(), 1);
        assert_eq!(s.users[0].user, 1);
    }

    #[test]
    fn popularity_examples() {
        let seqs: Vec<&[usize]> = vec![&[0, 1], &[0, 2]];
        let p = popularity_table(seqs, 3).unwrap();
        for (a, b) in p.probs.iter().zip([3.0 / 7.0, 2.0 / 7.0, 2.0 / 7.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        let seqs: Vec<&[usize]> = vec![&[0, 0]];
        let p = popularity_table(seqs, 4).unwrap();
        assert_eq!(p.probs[3], 1.0 / 6.0);
        let seqs: Vec<&[usize]> = vec![&[0, 1, 2]];
        let p = popularity_table(seqs, 3).unwrap();
        assert!(p.probs.iter().all(|&x| x == p.probs[0]));
    }

    proptest::proptest! {
        #[test]
        fn split_targets_are_disjoint_and_popularity_normalised(
            seqs in proptest::collection::vec(proptest::collection::vec(0usize..20, 0..12), 1..30)
        ) {
            let s = split_leave_one_out(&dataset(seqs.clone(), 20));
            for u in &s.users {
                let n = seqs[u.user].len();
                // train targets at positions 1..n-2, valid at n-2, test at n-1
                proptest::prop_assert_eq!(u.train.len(), n - 2);
                proptest::prop_assert_eq!(u.valid_context.len(), n - 2);
                proptest::prop_assert_eq!(u.test_context.len(), n - 1);
            }
            let p = s.popularity().unwrap();
            proptest::prop_assert!((p.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            proptest::prop_assert!(p.probs.iter().all(|&x| x > 0.0 && x <= 1.0));
        }
    }
}
