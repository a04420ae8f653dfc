//! From raw staypoints/triplegs to split, integer-encoded visit sequences.

use std::collections::{BTreeMap, HashMap};

use chrono::{DateTime, Duration, FixedOffset, NaiveDate};

use super::cluster::cluster_locations;
use super::modes::{main_mode, MODE_NAMES, MODE_OTHER};
use super::types::{
    DatasetSplit, EncodedSample, LocationInfo, LocationVisit, SequenceSample, Split, Staypoint,
    Tripleg, Vocabulary, bin_time,
};
use super::DataError;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// DBSCAN neighbourhood radius in meters.
    pub epsilon_m: f64,
    /// DBSCAN density threshold (neighbourhood includes the point itself).
    pub min_samples: usize,
    /// History window length in days.
    pub lookback_days: i64,
    /// Train and validation shares of each user's tracked days; the rest is
    /// test.
    pub train_ratio: f64,
    pub validation_ratio: f64,
    /// Users tracked for fewer days than this are dropped.
    pub min_tracked_days: i64,
    /// Cluster per user (ids offset to stay globally unique) or over the
    /// whole dataset at once.
    pub per_user_clustering: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            epsilon_m: 20.0,
            min_samples: 2,
            lookback_days: 7,
            train_ratio: 0.6,
            validation_ratio: 0.2,
            min_tracked_days: 5,
            per_user_clustering: true,
        }
    }
}

/// An activity is a staypoint worth predicting: longer than 25 minutes, or
/// carrying a non-trivial purpose label.
pub fn filter_activities(staypoints: &[Staypoint]) -> Vec<Staypoint> {
    staypoints
        .iter()
        .filter(|sp| sp.duration_minutes() > 25.0 || !sp.purpose.is_trivial())
        .cloned()
        .collect()
}

fn is_activity(sp: &Staypoint) -> bool {
    sp.duration_minutes() > 25.0 || !sp.purpose.is_trivial()
}

/// One sample per visit whose lookback window holds at least one earlier
/// visit. The window is open on both ends: a history visit qualifies iff
/// `target - lookback < arrival < target`.
pub fn build_sequences(visits: &[LocationVisit], lookback_days: i64) -> Vec<SequenceSample> {
    let lookback = Duration::days(lookback_days);
    let mut samples = Vec::new();
    let mut lo = 0usize;
    for i in 0..visits.len() {
        let target = &visits[i];
        let window_start = target.arrival - lookback;
        while lo < i && visits[lo].arrival <= window_start {
            lo += 1;
        }
        let history: Vec<LocationVisit> = visits[lo..i]
            .iter()
            .filter(|v| v.arrival < target.arrival)
            .cloned()
            .collect();
        if history.is_empty() {
            continue;
        }
        samples.push(SequenceSample {
            user: target.user,
            history,
            target_location: target.location,
            target_mode: target.mode,
            target_time: target.arrival,
        });
    }
    samples
}

/// Ceiling that forgives the usual floating point droop on exact products.
fn ceil_days(ratio: f64, days: i64) -> i64 {
    ((ratio * days as f64) - 1e-9).ceil() as i64
}

fn local_date(t: &DateTime<FixedOffset>) -> NaiveDate {
    t.naive_local().date()
}

/// Partition one user's samples by calendar day of the target visit: the
/// first `ceil(train_ratio * D)` tracked days are train, the next
/// `ceil(validation_ratio * D)` validation, the rest test. Returns `None`
/// (user excluded) when the tracked span is shorter than `min_tracked_days`.
pub fn split_user_chronological(
    samples: &[SequenceSample],
    train_ratio: f64,
    validation_ratio: f64,
    min_tracked_days: i64,
) -> Result<Option<Vec<(SequenceSample, Split)>>, DataError> {
    if !(0.0..=1.0).contains(&train_ratio)
        || !(0.0..=1.0).contains(&validation_ratio)
        || train_ratio + validation_ratio > 1.0 + 1e-9
    {
        return Err(DataError::BadSplitRatios {
            train: train_ratio,
            validation: validation_ratio,
        });
    }
    if samples.is_empty() {
        return Ok(None);
    }
    let first = samples
        .iter()
        .map(|s| local_date(&s.target_time))
        .min()
        .unwrap();
    let last = samples
        .iter()
        .map(|s| local_date(&s.target_time))
        .max()
        .unwrap();
    let tracked_days = (last - first).num_days() + 1;
    if tracked_days < min_tracked_days {
        log::warn!(
            "user {} tracked for only {tracked_days} day(s), excluded from the split",
            samples[0].user
        );
        return Ok(None);
    }
    let train_days = ceil_days(train_ratio, tracked_days);
    let val_days = ceil_days(validation_ratio, tracked_days);
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let day = (local_date(&s.target_time) - first).num_days();
        let split = if day < train_days {
            Split::Train
        } else if day < train_days + val_days {
            Split::Validation
        } else {
            Split::Test
        };
        out.push((s.clone(), split));
    }
    Ok(Some(out))
}

/// All artifacts of preprocessing: the encoded samples (split tags included)
/// and the id vocabularies.
#[derive(Debug, Clone)]
pub struct PreprocessOutput {
    pub samples: Vec<EncodedSample>,
    pub vocab: Vocabulary,
}

impl PreprocessOutput {
    pub fn into_split(self) -> DatasetSplit {
        DatasetSplit::from_encoded(&self.samples, &self.vocab)
    }
}

/// Run the full pipeline: activity filter, arrival mode attachment, location
/// clustering, window construction and the chronological split.
///
/// `dest_staypoint_id` on a tripleg is the 0-based row index into the
/// staypoint list. Stages that end in a filtered-out staypoint roll into the
/// trip of the next activity. Activities that no stage leads to (a user's
/// first record) get mode `other`.
pub fn preprocess(
    staypoints: &[Staypoint],
    triplegs: &[Tripleg],
    cfg: &PreprocessConfig,
) -> Result<PreprocessOutput, DataError> {
    for (row, sp) in staypoints.iter().enumerate() {
        if sp.finished_at <= sp.started_at {
            return Err(DataError::StaypointNotOrdered { row });
        }
    }

    // stages keyed by the staypoint they end in
    let mut stages_by_dest: HashMap<usize, Vec<Tripleg>> = HashMap::new();
    for tl in triplegs {
        if tl.length_m < 0.0 || !tl.length_m.is_finite() {
            return Err(DataError::BadStageDistance {
                distance: tl.length_m,
            });
        }
        if tl.dest_staypoint_id >= staypoints.len() {
            log::warn!(
                "tripleg points at staypoint row {} beyond the file ({} rows), ignored",
                tl.dest_staypoint_id,
                staypoints.len()
            );
            continue;
        }
        stages_by_dest
            .entry(tl.dest_staypoint_id)
            .or_default()
            .push(tl.clone());
    }

    // deterministic user order
    let mut by_user: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (row, sp) in staypoints.iter().enumerate() {
        by_user.entry(sp.user_id.clone()).or_default().push(row);
    }

    let users: Vec<String> = by_user.keys().cloned().collect();
    let user_index: HashMap<String, u32> = users
        .iter()
        .enumerate()
        .map(|(i, u)| (u.clone(), i as u32))
        .collect();

    // walk each user's staypoints in time order, attach arrival modes to
    // activities, carrying stages through filtered-out waypoints
    struct Activity {
        staypoint: Staypoint,
        mode: u8,
    }
    let mut activities_per_user: BTreeMap<String, Vec<Activity>> = BTreeMap::new();
    for (user, rows) in &by_user {
        let mut ordered = rows.clone();
        ordered.sort_by_key(|&r| (staypoints[r].started_at, r));
        let mut pending: Vec<Tripleg> = Vec::new();
        let mut acts = Vec::new();
        for &row in &ordered {
            let sp = &staypoints[row];
            let mut incoming = stages_by_dest.get(&row).cloned().unwrap_or_default();
            if is_activity(sp) {
                let mut trip = std::mem::take(&mut pending);
                trip.append(&mut incoming);
                let mode = match main_mode(&trip) {
                    Ok(m) => m,
                    Err(DataError::NoTravelStages) => MODE_OTHER,
                    Err(e) => return Err(e),
                };
                acts.push(Activity {
                    staypoint: sp.clone(),
                    mode,
                });
            } else {
                pending.append(&mut incoming);
            }
        }
        activities_per_user.insert(user.clone(), acts);
    }

    // cluster activity staypoints into locations
    let mut visits_per_user: BTreeMap<String, Vec<LocationVisit>> = BTreeMap::new();
    let mut locations: Vec<LocationInfo> = Vec::new();
    let mut next_location = 0u32;

    let assign_group = |group_user: &str,
                            acts: Vec<(&str, &Activity)>,
                            locations: &mut Vec<LocationInfo>,
                            next_location: &mut u32|
     -> Result<Vec<(String, LocationVisit)>, DataError> {
        let sps: Vec<Staypoint> = acts.iter().map(|(_, a)| a.staypoint.clone()).collect();
        let local_ids = cluster_locations(&sps, cfg.epsilon_m, cfg.min_samples)?;
        let num_local = local_ids.iter().map(|&i| i + 1).max().unwrap_or(0);
        // centroids per local cluster
        let mut sums = vec![(0.0f64, 0.0f64, 0usize); num_local as usize];
        for (sp, &lid) in sps.iter().zip(&local_ids) {
            let e = &mut sums[lid as usize];
            e.0 += sp.coord.lat;
            e.1 += sp.coord.lon;
            e.2 += 1;
        }
        let base = *next_location;
        for (lid, (lat, lon, count)) in sums.iter().enumerate() {
            locations.push(LocationInfo {
                id: base + lid as u32,
                user: group_user.to_string(),
                lat: lat / *count as f64,
                lon: lon / *count as f64,
                label: format!("{group_user}:{lid}"),
            });
        }
        *next_location += num_local;
        let mut visits = Vec::with_capacity(acts.len());
        for ((user, act), &lid) in acts.iter().zip(&local_ids) {
            let (h, d) = bin_time(&act.staypoint.started_at);
            visits.push((
                user.to_string(),
                LocationVisit {
                    user: user_index[*user],
                    location: base + lid,
                    arrival: act.staypoint.started_at,
                    mode: act.mode,
                    time_bin: h,
                    weekday: d,
                },
            ));
        }
        Ok(visits)
    };

    if cfg.per_user_clustering {
        for (user, acts) in &activities_per_user {
            let group: Vec<(&str, &Activity)> =
                acts.iter().map(|a| (user.as_str(), a)).collect();
            for (u, v) in assign_group(user, group, &mut locations, &mut next_location)? {
                visits_per_user.entry(u).or_default().push(v);
            }
        }
    } else {
        let group: Vec<(&str, &Activity)> = activities_per_user
            .iter()
            .flat_map(|(u, acts)| acts.iter().map(move |a| (u.as_str(), a)))
            .collect();
        for (u, v) in assign_group("*", group, &mut locations, &mut next_location)? {
            visits_per_user.entry(u).or_default().push(v);
        }
    }

    // windows and chronological split, per user
    let mut samples: Vec<EncodedSample> = Vec::new();
    for visits in visits_per_user.values_mut() {
        visits.sort_by_key(|v| v.arrival);
        let seqs = build_sequences(visits, cfg.lookback_days);
        if let Some(tagged) = split_user_chronological(
            &seqs,
            cfg.train_ratio,
            cfg.validation_ratio,
            cfg.min_tracked_days,
        )? {
            for (s, split) in tagged {
                samples.push(EncodedSample::from_sample(&s, split));
            }
        }
    }

    let vocab = Vocabulary {
        locations,
        modes: MODE_NAMES.iter().map(|s| s.to_string()).collect(),
        users,
    };
    Ok(PreprocessOutput { samples, vocab })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::types::{Coord, Purpose};

    fn ts(s: &str) -> DateTime<FixedOffset> {
        DateTime::parse_from_rfc3339(s).unwrap()
    }

    fn sp_with(duration_min: i64, purpose: Purpose) -> Staypoint {
        let start = ts("2023-01-02T10:00:00+00:00");
        Staypoint {
            user_id: "u0".into(),
            coord: Coord { lat: 47.0, lon: 8.0 },
            started_at: start,
            finished_at: start + Duration::minutes(duration_min),
            purpose,
        }
    }

    fn visit(user: u32, location: u32, arrival: &str) -> LocationVisit {
        let t = ts(arrival);
        let (h, d) = bin_time(&t);
        LocationVisit {
            user,
            location,
            arrival: t,
            mode: 0,
            time_bin: h,
            weekday: d,
        }
    }

    #[test]
    fn activity_filter_keeps_duration_or_purpose() {
        let sps = vec![
            sp_with(30, Purpose::Unknown),  // kept: duration
            sp_with(10, Purpose::Wait),     // dropped: fails both clauses
            sp_with(10, Purpose::Leisure),  // kept: purpose
            sp_with(25, Purpose::Unknown),  // dropped: 25 is not longer than 25
        ];
        let kept = filter_activities(&sps);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].purpose, Purpose::Unknown);
        assert_eq!(kept[1].purpose, Purpose::Leisure);
    }

    #[test]
    fn sequences_cover_the_previous_seven_days() {
        let visits = vec![
            visit(0, 1, "2023-01-01T08:00:00+00:00"),
            visit(0, 2, "2023-01-02T08:00:00+00:00"),
            visit(0, 3, "2023-01-03T08:00:00+00:00"),
        ];
        let samples = build_sequences(&visits, 7);
        assert_eq!(samples.len(), 2);
        let last = &samples[1];
        assert_eq!(last.target_location, 3);
        assert_eq!(last.history.len(), 2);
    }

    #[test]
    fn empty_window_emits_no_sample() {
        let visits = vec![
            visit(0, 1, "2023-01-05T08:00:00+00:00"),
            visit(0, 2, "2023-01-20T08:00:00+00:00"),
        ];
        let samples = build_sequences(&visits, 7);
        assert!(samples.is_empty());
    }

    #[test]
    fn window_boundary_is_strictly_inside_seven_days() {
        // exactly 7 * 24h before the target falls outside the window
        let visits = vec![
            visit(0, 1, "2023-01-01T00:00:00+00:00"),
            visit(0, 2, "2023-01-08T00:00:00+00:00"),
        ];
        assert!(build_sequences(&visits, 7).is_empty());

        let visits = vec![
            visit(0, 1, "2023-01-01T00:00:01+00:00"),
            visit(0, 2, "2023-01-08T00:00:00+00:00"),
        ];
        let samples = build_sequences(&visits, 7);
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].history.len(), 1);
    }

    fn sample_on(day: u32) -> SequenceSample {
        let t = ts(&format!("2023-01-{day:02}T10:00:00+00:00"));
        SequenceSample {
            user: 0,
            history: vec![visit(0, 0, "2023-01-01T08:00:00+00:00")],
            target_location: 1,
            target_mode: 0,
            target_time: t,
        }
    }

    #[test]
    fn ten_tracked_days_split_six_two_two() {
        let samples: Vec<SequenceSample> = (1..=10).map(sample_on).collect();
        let tagged = split_user_chronological(&samples, 0.6, 0.2, 5)
            .unwrap()
            .unwrap();
        let splits: Vec<Split> = tagged.iter().map(|(_, s)| *s).collect();
        assert_eq!(&splits[0..6], &[Split::Train; 6]);
        assert_eq!(&splits[6..8], &[Split::Validation; 2]);
        assert_eq!(&splits[8..10], &[Split::Test; 2]);
    }

    #[test]
    fn five_tracked_days_split_three_one_one() {
        let samples: Vec<SequenceSample> = (1..=5).map(sample_on).collect();
        let tagged = split_user_chronological(&samples, 0.6, 0.2, 5)
            .unwrap()
            .unwrap();
        let splits: Vec<Split> = tagged.iter().map(|(_, s)| *s).collect();
        assert_eq!(
            splits,
            vec![
                Split::Train,
                Split::Train,
                Split::Train,
                Split::Validation,
                Split::Test
            ]
        );
    }

    #[test]
    fn single_day_user_is_excluded() {
        let samples = vec![sample_on(3)];
        assert!(split_user_chronological(&samples, 0.6, 0.2, 5)
            .unwrap()
            .is_none());
    }

    #[test]
    fn bad_ratios_are_rejected() {
        let samples = vec![sample_on(1)];
        assert!(split_user_chronological(&samples, 0.9, 0.3, 1).is_err());
    }
}
