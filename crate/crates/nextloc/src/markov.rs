//! First-order mobility Markov chain baseline: per-user transition counts
//! between locations, with visit-frequency fallbacks for unseen states.

use std::collections::BTreeMap;

use crate::data::EncodedSample;

/// Per-user transition counts and visit frequencies fitted on the training
/// split.
#[derive(Debug, Clone, Default)]
pub struct MarkovModel {
    /// user -> current location -> next location -> count
    transitions: BTreeMap<u32, BTreeMap<u32, BTreeMap<u32, u32>>>,
    /// user -> location -> visit count (training targets)
    user_freq: BTreeMap<u32, BTreeMap<u32, u32>>,
    /// location -> visit count over all users
    global_freq: BTreeMap<u32, u32>,
}

impl MarkovModel {
    /// Count every (last history location -> target) transition per user.
    /// Each consecutive visit pair of the training period appears exactly
    /// once as such a pair.
    pub fn fit(train: &[EncodedSample]) -> MarkovModel {
        let mut model = MarkovModel::default();
        for s in train {
            let Some(&current) = s.locations.last() else {
                continue;
            };
            *model
                .transitions
                .entry(s.user)
                .or_default()
                .entry(current)
                .or_default()
                .entry(s.target_location)
                .or_default() += 1;
            *model
                .user_freq
                .entry(s.user)
                .or_default()
                .entry(s.target_location)
                .or_default() += 1;
            *model.global_freq.entry(s.target_location).or_default() += 1;
        }
        model
    }

    /// Normalised transition row, when the user has outgoing counts from
    /// `current`.
    pub fn transition_row(&self, user: u32, current: u32) -> Option<BTreeMap<u32, f64>> {
        let row = self.transitions.get(&user)?.get(&current)?;
        let total: u32 = row.values().sum();
        if total == 0 {
            return None;
        }
        Some(
            row.iter()
                .map(|(&next, &c)| (next, c as f64 / total as f64))
                .collect(),
        )
    }

    /// All locations of a user's training data: transition sources and
    /// destinations.
    fn known_locations(&self, user: u32) -> Vec<u32> {
        let mut known: std::collections::BTreeSet<u32> = std::collections::BTreeSet::new();
        if let Some(rows) = self.transitions.get(&user) {
            for (&src, row) in rows {
                known.insert(src);
                known.extend(row.keys().copied());
            }
        }
        if let Some(freq) = self.user_freq.get(&user) {
            known.extend(freq.keys().copied());
        }
        known.into_iter().collect()
    }

    /// Rank the user's known locations: transition count from `current`
    /// first, then the user's visit frequency, then ascending id. A user
    /// with no training data falls back to the global frequency ranking.
    pub fn predict(&self, user: u32, current: u32) -> Vec<u32> {
        let known = self.known_locations(user);
        if known.is_empty() {
            let mut global: Vec<(u32, u32)> =
                self.global_freq.iter().map(|(&l, &c)| (l, c)).collect();
            global.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            return global.into_iter().map(|(l, _)| l).collect();
        }
        let empty = BTreeMap::new();
        let row = self
            .transitions
            .get(&user)
            .and_then(|rows| rows.get(&current))
            .unwrap_or(&empty);
        let freq = self.user_freq.get(&user).unwrap_or(&empty);
        let mut ranked = known;
        ranked.sort_by(|&a, &b| {
            let ta = row.get(&a).copied().unwrap_or(0);
            let tb = row.get(&b).copied().unwrap_or(0);
            tb.cmp(&ta)
                .then_with(|| {
                    let fa = freq.get(&a).copied().unwrap_or(0);
                    let fb = freq.get(&b).copied().unwrap_or(0);
                    fb.cmp(&fa)
                })
                .then(a.cmp(&b))
        });
        ranked
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    fn sample(user: u32, current: u32, target: u32) -> EncodedSample {
        EncodedSample {
            user,
            locations: vec![current],
            time_bins: vec![33],
            weekdays: vec![0],
            modes: vec![0],
            target_location: target,
            target_mode: 0,
            target_time: "2023-01-09T08:00:00+00:00".into(),
            split: Split::Train,
        }
    }

    #[test]
    fn counts_match_the_worked_example() {
        // A=0, B=1, C=2: transitions A->B, A->B, A->C
        let train = vec![sample(0, 0, 1), sample(0, 0, 1), sample(0, 0, 2)];
        let model = MarkovModel::fit(&train);
        let row = model.transition_row(0, 0).unwrap();
        assert!((row[&1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((row[&2] - 1.0 / 3.0).abs() < 1e-12);
        let ranked = model.predict(0, 0);
        assert_eq!(ranked, vec![1, 2, 0]);
    }

    #[test]
    fn single_transition_is_certain() {
        let model = MarkovModel::fit(&[sample(0, 0, 1)]);
        let row = model.transition_row(0, 0).unwrap();
        assert_eq!(row[&1], 1.0);
    }

    #[test]
    fn unseen_state_falls_back_to_visit_frequency() {
        let train = vec![
            sample(0, 0, 1),
            sample(0, 1, 2),
            sample(0, 2, 1),
            sample(0, 1, 2),
        ];
        let model = MarkovModel::fit(&train);
        // location 9 has no outgoing transitions; frequency order is
        // 2 (twice), 1 (twice, higher id loses nothing: counts 2 vs 2 tie ->
        // ascending id), then 0
        let ranked = model.predict(0, 9);
        let freq1 = 2; // targets 1 appear twice
        let freq2 = 2;
        assert_eq!(freq1, freq2);
        assert_eq!(ranked, vec![1, 2, 0]);
    }

    #[test]
    fn prediction_is_a_permutation_of_known_locations() {
        let train = vec![
            sample(0, 0, 1),
            sample(0, 1, 0),
            sample(0, 0, 2),
            sample(1, 5, 6),
        ];
        let model = MarkovModel::fit(&train);
        let mut ranked = model.predict(0, 0);
        ranked.sort();
        assert_eq!(ranked, vec![0, 1, 2]);
        // deterministic
        assert_eq!(model.predict(0, 0), model.predict(0, 0));
        // unknown user ranks by global frequency
        let ranked = model.predict(42, 0);
        assert!(!ranked.is_empty());
    }
}
