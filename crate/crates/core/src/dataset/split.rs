//! Stratified train/validation/test splits.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::LabeledSet;
use crate::{seed, Error, Result, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for Fractions {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl Fractions {
    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.as_array();
        if f.iter().any(|v| !(0.0..=1.0).contains(v)) || ((f.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "split fractions {f:?} must lie in [0, 1] and sum to 1"
            )));
        }
        Ok(())
    }
}

/// Splits `n` into three parts by largest remainder: every part gets the
/// floor of its quota, and leftover units go to the largest fractional
/// parts (ties to the earlier part).
pub fn largest_remainder(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let quotas = fractions.map(|f| n as f64 * f);
    // guard against 404.99999 style artifacts of binary fractions
    let mut out = quotas.map(|q| (q + 1e-9).floor() as usize);
    let mut order = [0usize, 1, 2];
    let rem = |i: usize| quotas[i] - out[i] as f64;
    order.sort_by(|&a, &b| rem(b).total_cmp(&rem(a)).then(a.cmp(&b)));
    let assigned: usize = out.iter().sum();
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub seed: u64,
}

impl SplitAssignment {
    pub fn part(&self, part: SplitPart) -> &[usize] {
        match part {
            SplitPart::Train => &self.train_idx,
            SplitPart::Val => &self.val_idx,
            SplitPart::Test => &self.test_idx,
        }
    }

    pub fn total(&self) -> usize {
        self.train_idx.len() + self.val_idx.len() + self.test_idx.len()
    }

    /// Checks that the parts partition `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train_idx.iter().chain(&self.val_idx).chain(&self.test_idx) {
            match seen.get_mut(i) {
                Some(s) if !*s => *s = true,
                Some(_) => return Err(Error::invalid(format!("index {i} appears in more than one split part"))),
                None => return Err(Error::Index(format!("split index {i} is outside a set of {n} chips"))),
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!("index {i} is not assigned to any split part")));
        }
        Ok(())
    }
}

/// Shuffles each class with the `"split"` stream of `seed` and cuts it by
/// largest-remainder counts. Classes are processed in id order and the
/// parts list indices in that order, class by class.
///
/// Classes with no members are allowed; classes with one or two members
/// are rejected because they cannot be represented in every part.
pub fn stratified_split(set: &LabeledSet, fractions: Fractions, seed: u64) -> Result<SplitAssignment> {
    fractions.validate()?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for i in 0..set.len() {
        by_class[set.label(i)].push(i);
    }
    if let Some((c, members)) = by_class.iter().enumerate().find(|(_, m)| (1..3).contains(&m.len())) {
        return Err(Error::invalid(format!(
            "class {c} ({}) has {} member(s); at least 3 are needed",
            set.class_names[c],
            members.len()
        )));
    }
    let mut rng = seed::rng(seed, "split");
    let mut out = SplitAssignment {
        train_idx: Vec::new(),
        val_idx: Vec::new(),
        test_idx: Vec::new(),
        seed,
    };
    for mut members in by_class {
        members.shuffle(&mut rng);
        let [a, b, _] = largest_remainder(members.len(), fractions.as_array());
        out.train_idx.extend_from_slice(&members[..a]);
        out.val_idx.extend_from_slice(&members[a..a + b]);
        out.test_idx.extend_from_slice(&members[a + b..]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::testutil::set_with_labels;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn balanced_eurosat_sized_split() {
        let labels: Vec<u8> = (0..27_000).map(|i| (i % 10) as u8).collect();
        let set = set_with_labels(&labels, 1);
        let s = stratified_split(&set, Fractions::default(), 42).unwrap();
        assert_eq!((s.train_idx.len(), s.val_idx.len(), s.test_idx.len()), (18_900, 4_050, 4_050));
        for c in 0..10 {
            let count = |idx: &[usize]| idx.iter().filter(|&&i| set.label(i) == c).count();
            assert_eq!(
                (count(&s.train_idx), count(&s.val_idx), count(&s.test_idx)),
                (1_890, 405, 405)
            );
        }
        s.validate(set.len()).unwrap();
    }

    #[test]
    fn all_train_fraction() {
        let set = set_with_labels(&[4; 10], 1);
        let s = stratified_split(
            &set,
            Fractions {
                train: 1.0,
                val: 0.0,
                test: 0.0,
            },
            1,
        )
        .unwrap();
        assert_eq!(s.train_idx.len(), 10);
        assert!(s.val_idx.is_empty() && s.test_idx.is_empty());
    }

    #[test]
    fn tiny_class_rejected() {
        let set = set_with_labels(&[0, 0, 0, 1, 1], 1);
        assert!(matches!(
            stratified_split(&set, Fractions::default(), 1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn deterministic_for_seed() {
        let labels: Vec<u8> = (0..300).map(|i| (i * 7 % 10) as u8).collect();
        let set = set_with_labels(&labels, 1);
        let a = stratified_split(&set, Fractions::default(), 9).unwrap();
        assert_eq!(a, stratified_split(&set, Fractions::default(), 9).unwrap());
        assert_ne!(a, stratified_split(&set, Fractions::default(), 10).unwrap());
    }

    /// Counting oracle: exact rational arithmetic on per-mille fractions.
    fn oracle_counts(n: usize, per_mille: [usize; 3]) -> [usize; 3] {
        let num = per_mille.map(|p| n * p);
        let mut out = num.map(|v| v / 1000);
        let mut order = [0, 1, 2];
        order.sort_by(|&a, &b| (num[b] % 1000).cmp(&(num[a] % 1000)).then(a.cmp(&b)));
        let short = n - out.iter().sum::<usize>();
        for &i in order.iter().take(short) {
            out[i] += 1;
        }
        out
    }

    #[test]
    fn random_labels_match_counting_oracle() {
        let mut rng = seed::rng(3, "split-oracle");
        let labels: Vec<u8> = (0..1000).map(|_| rng.random_range(0..10)).collect();
        let set = set_with_labels(&labels, 1);
        let s = stratified_split(&set, Fractions::default(), 5).unwrap();
        s.validate(1000).unwrap();
        for c in 0..10 {
            let n = labels.iter().filter(|&&l| usize::from(l) == c).count();
            let count = |idx: &[usize]| idx.iter().filter(|&&i| set.label(i) == c).count();
            assert_eq!(
                [count(&s.train_idx), count(&s.val_idx), count(&s.test_idx)],
                oracle_counts(n, [700, 150, 150]),
                "class {c} with {n} members"
            );
        }
    }

    proptest! {
        #[test]
        fn remainder_counts_sum_and_stay_close(n in 0usize..5000, a in 0u32..=1000, b in 0u32..=1000) {
            prop_assume!(a + b <= 1000);
            let f = [a as f64 / 1000.0, b as f64 / 1000.0, (1000 - a - b) as f64 / 1000.0];
            let c = largest_remainder(n, f);
            prop_assert_eq!(c.iter().sum::<usize>(), n);
            for i in 0..3 {
                prop_assert!((c[i] as f64 - n as f64 * f[i]).abs() < 1.0 + 1e-9);
            }
        }
    }
}
