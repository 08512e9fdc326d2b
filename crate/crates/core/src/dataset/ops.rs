use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{take_count, DatasetError, Labeled, LabeledExample, SessionRecord};

/// Frames earlier than this after session start are filter warm-up and
/// never become examples.
pub const TRANSIENT_SECS: f64 = 2.0;

/// Undersamples every present class to the smallest class count.
///
/// Output is class-major (none, left, right, both); within a class the
/// chosen items keep their input order.
pub fn balance<T: Labeled>(examples: Vec<T>, seed: u64) -> Result<Vec<T>, DatasetError> {
    if examples.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    let mut by_class: [Vec<T>; 4] = Default::default();
    for e in examples {
        by_class[e.label().index()].push(e);
    }
    let m = by_class
        .iter()
        .map(Vec::len)
        .filter(|&n| n > 0)
        .min()
        .unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(4 * m);
    for group in by_class {
        if group.is_empty() {
            continue;
        }
        let mut keep = vec![false; group.len()];
        for i in index::sample(&mut rng, group.len(), m) {
            keep[i] = true;
        }
        out.extend(group.into_iter().zip(keep).filter_map(|(e, k)| k.then_some(e)));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    #[default]
    Random,
    Temporal,
}

impl std::str::FromStr for SplitMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(SplitMode::Random),
            "temporal" => Ok(SplitMode::Temporal),
            other => Err(format!("unknown split mode {other:?}")),
        }
    }
}

/// Splits into `floor(train_fraction · n)` training items and the rest.
pub fn split<T: Labeled>(
    mut examples: Vec<T>,
    train_fraction: f64,
    mode: SplitMode,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>), DatasetError> {
    if examples.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    let n_train = take_count(train_fraction, examples.len());
    match mode {
        SplitMode::Random => examples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
        SplitMode::Temporal => examples.sort_by(|a, b| a.t().total_cmp(&b.t())),
    }
    let test = examples.split_off(n_train);
    Ok((examples, test))
}

/// Takes `floor(fraction · frames)` frames from each session, drawn without
/// replacement, kept in time order, sessions concatenated in input order.
pub fn consolidate(
    sessions: &[SessionRecord],
    fraction: f64,
    seed: u64,
) -> Result<Vec<LabeledExample>, DatasetError> {
    if sessions.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for s in sessions {
        let n = s.frames.len();
        let k = take_count(fraction, n);
        if k == n {
            out.extend(s.frames.iter().cloned());
            continue;
        }
        let mut picked = index::sample(&mut rng, n, k).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| s.frames[i].clone()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{class_counts, ClassLabel};
    use proptest::prelude::*;

    #[derive(Debug, Clone, PartialEq)]
    struct Item {
        id: usize,
        label: ClassLabel,
        t: f64,
    }

    impl Labeled for Item {
        fn label(&self) -> ClassLabel {
            self.label
        }
        fn t(&self) -> f64 {
            self.t
        }
    }

    fn items(counts: [usize; 4]) -> Vec<Item> {
        let mut v = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                v.push(Item {
                    id: v.len(),
                    label: ClassLabel::from_index(c).unwrap(),
                    t: v.len() as f64,
                });
            }
        }
        v
    }

    #[test]
    fn balance_examples() {
        let out = balance(items([10, 10, 10, 10]), 1).unwrap();
        assert_eq!(class_counts(&out), [10; 4]);
        let out = balance(items([100, 20, 35, 20]), 1).unwrap();
        assert_eq!(out.len(), 80);
        assert_eq!(class_counts(&out), [20; 4]);
        let out = balance(items([5, 0, 0, 0]), 1).unwrap();
        assert_eq!(class_counts(&out), [5, 0, 0, 0]);
        assert!(matches!(
            balance(Vec::<Item>::new(), 0),
            Err(DatasetError::EmptyDataset)
        ));
    }

    #[test]
    fn balance_is_seeded() {
        let a = balance(items([50, 7, 9, 30]), 3).unwrap();
        let b = balance(items([50, 7, 9, 30]), 3).unwrap();
        let c = balance(items([50, 7, 9, 30]), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn split_examples() {
        let (tr, te) = split(items([10, 0, 0, 0]), 0.7, SplitMode::Random, 0).unwrap();
        assert_eq!((tr.len(), te.len()), (7, 3));
        let (tr, te) = split(items([3, 3, 2, 2]), 0.7, SplitMode::Temporal, 0).unwrap();
        assert!(tr.iter().all(|i| i.t <= 6.0));
        assert!(te.iter().all(|i| i.t >= 7.0));
        let a = split(items([4, 4, 4, 4]), 0.7, SplitMode::Random, 9).unwrap();
        let b = split(items([4, 4, 4, 4]), 0.7, SplitMode::Random, 9).unwrap();
        assert_eq!(a, b);
        assert!(split(Vec::<Item>::new(), 0.7, SplitMode::Random, 0).is_err());
    }

    #[test]
    fn consolidate_takes_a_fraction_of_each_session() {
        use crate::dataset::session::tests::record;
        let sessions = [record("a", 50, 1), record("b", 21, 2)];
        let all = consolidate(&sessions, 1.0, 0).unwrap();
        assert_eq!(all.len(), 71);
        assert!(all[..50].iter().all(|e| e.session_id == "a"));
        assert!(all[50..].iter().all(|e| e.session_id == "b"));

        let tenth = consolidate(&sessions, 0.1, 7).unwrap();
        assert_eq!(tenth.len(), 5 + 2);
        let (a, b) = tenth.split_at(5);
        assert!(a.iter().all(|e| e.session_id == "a") && b.iter().all(|e| e.session_id == "b"));
        for part in [a, b] {
            assert!(part.windows(2).all(|w| w[0].t < w[1].t), "time order kept");
        }
        for e in &tenth {
            let src = if e.session_id == "a" { &sessions[0] } else { &sessions[1] };
            assert!(src.frames.contains(e), "frames are drawn, not synthesized");
        }
        assert_eq!(tenth, consolidate(&sessions, 0.1, 7).unwrap());
        assert_ne!(tenth, consolidate(&sessions, 0.1, 8).unwrap());
        assert!(consolidate(&sessions, 0.0, 0).unwrap().is_empty());
        assert!(matches!(consolidate(&[], 1.0, 0), Err(DatasetError::EmptyDataset)));
    }

    #[test]
    fn take_count_is_exact() {
        for n in 0..5000 {
            assert_eq!(take_count(0.7, n), 7 * n / 10);
            assert_eq!(take_count(0.1, n), n / 10);
            assert_eq!(take_count(1.0, n), n);
        }
    }

    proptest! {
        #[test]
        fn balance_counts(counts in proptest::array::uniform4(0usize..60), seed in any::<u64>()) {
            prop_assume!(counts.iter().any(|&c| c > 0));
            let out = balance(items(counts), seed).unwrap();
            let m = counts.iter().copied().filter(|&c| c > 0).min().unwrap();
            let got = class_counts(&out);
            for c in 0..4 {
                prop_assert_eq!(got[c], if counts[c] > 0 { m } else { 0 });
            }
            let mut ids: Vec<_> = out.iter().map(|i| i.id).collect();
            ids.sort_unstable();
            ids.dedup();
            prop_assert_eq!(ids.len(), out.len());
        }

        #[test]
        fn split_partitions(n in 1usize..300, seed in any::<u64>(), temporal in any::<bool>()) {
            let mode = if temporal { SplitMode::Temporal } else { SplitMode::Random };
            let input = items([n, 0, 0, 0]);
            let (tr, te) = split(input, 0.7, mode, seed).unwrap();
            prop_assert_eq!(tr.len(), 7 * n / 10);
            let mut ids: Vec<_> = tr.iter().chain(&te).map(|i| i.id).collect();
            ids.sort_unstable();
            prop_assert_eq!(ids, (0..n).collect::<Vec<_>>());
        }
    }
}
