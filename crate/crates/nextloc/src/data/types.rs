//! Domain types for the mobility preprocessing pipeline.

use chrono::{DateTime, FixedOffset, Timelike};
use serde::{Deserialize, Serialize};

use super::DataError;

/// WGS84 coordinate in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coord {
    pub lat: f64,
    pub lon: f64,
}

impl Coord {
    pub fn new(lat: f64, lon: f64) -> Result<Self, DataError> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(DataError::BadCoordinate { lat, lon });
        }
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(DataError::BadCoordinate { lat, lon });
        }
        Ok(Coord { lat, lon })
    }
}

/// A raw GPS fix. Ingestion starts at staypoints, so track points only appear
/// in generated fixtures and tests.
#[derive(Debug, Clone)]
pub struct TrackPoint {
    pub user_id: String,
    pub coord: Coord,
    pub timestamp: DateTime<FixedOffset>,
}

/// Activity purpose attached to a staypoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Purpose {
    Home,
    Work,
    Errand,
    Leisure,
    Wait,
    Unknown,
}

impl Purpose {
    pub fn parse(s: &str) -> Purpose {
        match s.trim().to_ascii_lowercase().as_str() {
            "home" => Purpose::Home,
            "work" => Purpose::Work,
            "errand" => Purpose::Errand,
            "leisure" => Purpose::Leisure,
            "wait" => Purpose::Wait,
            _ => Purpose::Unknown,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Purpose::Home => "home",
            Purpose::Work => "work",
            Purpose::Errand => "errand",
            Purpose::Leisure => "leisure",
            Purpose::Wait => "wait",
            Purpose::Unknown => "unknown",
        }
    }

    /// Wait and unknown are the trivial purposes; anything else keeps a short
    /// staypoint in the activity set.
    pub fn is_trivial(&self) -> bool {
        matches!(self, Purpose::Wait | Purpose::Unknown)
    }
}

/// A period of stationary behaviour.
#[derive(Debug, Clone)]
pub struct Staypoint {
    pub user_id: String,
    pub coord: Coord,
    pub started_at: DateTime<FixedOffset>,
    pub finished_at: DateTime<FixedOffset>,
    pub purpose: Purpose,
}

impl Staypoint {
    pub fn duration_minutes(&self) -> f64 {
        (self.finished_at - self.started_at).num_seconds() as f64 / 60.0
    }
}

/// A movement stage without a mode change, pointing at the staypoint it ends
/// in (0-based row index into the staypoint file).
#[derive(Debug, Clone)]
pub struct Tripleg {
    pub user_id: String,
    pub started_at: DateTime<FixedOffset>,
    pub finished_at: DateTime<FixedOffset>,
    pub mode: String,
    pub length_m: f64,
    pub dest_staypoint_id: usize,
}

/// One element of a user's location sequence: where they arrived, when, and
/// by which (grouped) travel mode, plus the derived temporal bins.
#[derive(Debug, Clone)]
pub struct LocationVisit {
    pub user: u32,
    pub location: u32,
    pub arrival: DateTime<FixedOffset>,
    pub mode: u8,
    pub time_bin: u8,
    pub weekday: u8,
}

/// 15-minute time-of-day bin and Monday-based weekday of a local instant.
pub fn bin_time(t: &DateTime<FixedOffset>) -> (u8, u8) {
    let local = t.naive_local();
    let minute_of_day = local.hour() * 60 + local.minute();
    let h = (minute_of_day / 15) as u8;
    let d = chrono::Datelike::weekday(&local).num_days_from_monday() as u8;
    (h, d)
}

/// One training instance: the visits of the preceding seven days plus the
/// next visit's location and mode as targets.
#[derive(Debug, Clone)]
pub struct SequenceSample {
    pub user: u32,
    pub history: Vec<LocationVisit>,
    pub target_location: u32,
    pub target_mode: u8,
    pub target_time: DateTime<FixedOffset>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Integer-encoded sample as written to `sequences.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncodedSample {
    pub user: u32,
    pub locations: Vec<u32>,
    pub time_bins: Vec<u8>,
    pub weekdays: Vec<u8>,
    pub modes: Vec<u8>,
    pub target_location: u32,
    pub target_mode: u8,
    pub target_time: String,
    pub split: Split,
}

impl EncodedSample {
    pub fn from_sample(s: &SequenceSample, split: Split) -> Self {
        EncodedSample {
            user: s.user,
            locations: s.history.iter().map(|v| v.location).collect(),
            time_bins: s.history.iter().map(|v| v.time_bin).collect(),
            weekdays: s.history.iter().map(|v| v.weekday).collect(),
            modes: s.history.iter().map(|v| v.mode).collect(),
            target_location: s.target_location,
            target_mode: s.target_mode,
            target_time: s
                .target_time
                .to_rfc3339_opts(chrono::SecondsFormat::Secs, false),
            split,
        }
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }
}

/// One dataset location: the cluster id plus its centroid, for reporting and
/// for mapping ids back onto synthetic ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocationInfo {
    pub id: u32,
    pub user: String,
    pub lat: f64,
    pub lon: f64,
    pub label: String,
}

/// Id/label maps for locations, modes and users, written to `vocab.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    pub locations: Vec<LocationInfo>,
    pub modes: Vec<String>,
    pub users: Vec<String>,
}

impl Vocabulary {
    pub fn num_locations(&self) -> usize {
        self.locations.len()
    }
    pub fn num_users(&self) -> usize {
        self.users.len()
    }
    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }
}

/// Chronologically split samples plus the vocabulary sizes the model needs.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<EncodedSample>,
    pub validation: Vec<EncodedSample>,
    pub test: Vec<EncodedSample>,
    pub num_locations: usize,
    pub num_modes: usize,
    pub num_users: usize,
}

impl DatasetSplit {
    pub fn from_encoded(samples: &[EncodedSample], vocab: &Vocabulary) -> Self {
        let mut out = DatasetSplit {
            train: Vec::new(),
            validation: Vec::new(),
            test: Vec::new(),
            num_locations: vocab.num_locations(),
            num_modes: vocab.num_modes(),
            num_users: vocab.num_users(),
        };
        for s in samples {
            match s.split {
                Split::Train => out.train.push(s.clone()),
                Split::Validation => out.validation.push(s.clone()),
                Split::Test => out.test.push(s.clone()),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(s: &str) -> DateTime<FixedOffset> {
        DateTime::parse_from_rfc3339(s).unwrap()
    }

    #[test]
    fn bin_time_examples() {
        // midnight Monday
        assert_eq!(bin_time(&ts("2023-01-02T00:00:00+00:00")), (0, 0));
        // last bin, Sunday
        assert_eq!(bin_time(&ts("2023-01-08T23:59:59+00:00")), (95, 6));
        // boundary between bins 36 and 37
        assert_eq!(bin_time(&ts("2023-01-04T09:14:59+00:00")).0, 36);
        assert_eq!(bin_time(&ts("2023-01-04T09:15:00+00:00")).0, 37);
    }

    #[test]
    fn bin_time_respects_the_local_offset() {
        // 23:30 UTC is 00:30 next day in +01:00; bin 94 covers 23:30
        let t = ts("2023-01-02T23:30:00+01:00");
        assert_eq!(bin_time(&t), (94, 0));
        let t = ts("2023-01-02T23:30:00+00:00");
        assert_eq!(bin_time(&t).1, 0);
    }

    #[test]
    fn coord_rejects_out_of_range_and_non_finite() {
        assert!(Coord::new(47.4, 8.5).is_ok());
        assert!(Coord::new(f64::NAN, 8.5).is_err());
        assert!(Coord::new(91.0, 0.0).is_err());
        assert!(Coord::new(0.0, -181.0).is_err());
    }
}
