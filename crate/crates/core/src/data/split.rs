use std::collections::BTreeSet;

use super::trial::TrialSet;
use crate::error::{Error, Result};

/// Partitions `ts` by subject id into `(train, test)`. Trials of subjects
/// in neither set are dropped.
pub fn split_new_subject(
    ts: &TrialSet,
    train_subjects: &BTreeSet<u32>,
    test_subjects: &BTreeSet<u32>,
) -> Result<(TrialSet, TrialSet)> {
    if let Some(s) = train_subjects.intersection(test_subjects).next() {
        return Err(Error::Config(format!(
            "subject {s} is in both the training and the test set"
        )));
    }
    if test_subjects.is_empty() {
        return Err(Error::Config("the test subject set is empty".into()));
    }
    if train_subjects.is_empty() {
        return Err(Error::Config("the training subject set is empty".into()));
    }
    let pick = |set: &BTreeSet<u32>| {
        ts.with_trials(
            ts.trials
                .iter()
                .filter(|t| set.contains(&t.subject_id))
                .cloned()
                .collect(),
        )
    };
    Ok((pick(train_subjects), pick(test_subjects)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::trial::{Label, Trial};

    fn set_with_subjects(n: u32) -> TrialSet {
        let mut ts = TrialSet::new(250.0, vec!["C3".into()], 2);
        for s in 1..=n {
            for l in [Label::Left, Label::Right] {
                ts.push(Trial::new(2, 1, vec![s as f64, 0.0], l, s).unwrap())
                    .unwrap();
            }
        }
        ts
    }

    #[test]
    fn six_train_three_test() {
        let ts = set_with_subjects(9);
        let train: BTreeSet<u32> = (1..=6).collect();
        let test: BTreeSet<u32> = (7..=9).collect();
        let (a, b) = split_new_subject(&ts, &train, &test).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(b.len(), 6);
        assert!(a.trials.iter().all(|t| t.subject_id <= 6));
        assert!(b.trials.iter().all(|t| t.subject_id >= 7));
    }

    #[test]
    fn overlap_and_empty_test_are_rejected() {
        let ts = set_with_subjects(2);
        let one: BTreeSet<u32> = [1].into();
        assert!(matches!(
            split_new_subject(&ts, &one, &one),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            split_new_subject(&ts, &one, &BTreeSet::new()),
            Err(Error::Config(_))
        ));
    }
}
