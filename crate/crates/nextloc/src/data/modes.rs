//! The seven travel mode groups and the raw-label grouping rules.

use super::DataError;
use super::types::Tripleg;

pub const NUM_MODES: usize = 7;

/// Grouped travel modes, in their fixed id order.
pub const MODE_NAMES: [&str; NUM_MODES] =
    ["walk", "bicycle", "train", "tram", "bus", "car", "other"];

pub const MODE_WALK: u8 = 0;
pub const MODE_BICYCLE: u8 = 1;
pub const MODE_TRAIN: u8 = 2;
pub const MODE_TRAM: u8 = 3;
pub const MODE_BUS: u8 = 4;
pub const MODE_CAR: u8 = 5;
pub const MODE_OTHER: u8 = 6;

/// Collapse a raw study mode label into one of the seven groups. Electric
/// variants join their base vehicle; everything outside the known vocabulary
/// lands in `other`, with a warning for labels the studies never used.
pub fn group_mode(raw_label: &str) -> u8 {
    match raw_label.trim().to_ascii_lowercase().as_str() {
        "walk" => MODE_WALK,
        "bicycle" | "e-bike" | "ebike" => MODE_BICYCLE,
        "train" => MODE_TRAIN,
        "tram" => MODE_TRAM,
        "bus" => MODE_BUS,
        "car" | "e-car" | "ecar" => MODE_CAR,
        "airplane" | "boat" | "coach" | "ski" | "other" => MODE_OTHER,
        unknown => {
            log::warn!("unknown travel mode label {unknown:?}, grouping as other");
            MODE_OTHER
        }
    }
}

/// The main travel mode of a trip: the grouped mode of its longest stage.
/// Distance ties go to the stage that started first.
pub fn main_mode(stages: &[Tripleg]) -> Result<u8, DataError> {
    let mut best: Option<&Tripleg> = None;
    for stage in stages {
        let replace = match best {
            None => true,
            Some(b) => {
                stage.length_m > b.length_m
                    || (stage.length_m == b.length_m && stage.started_at < b.started_at)
            }
        };
        if replace {
            best = Some(stage);
        }
    }
    match best {
        Some(stage) => Ok(group_mode(&stage.mode)),
        None => Err(DataError::NoTravelStages),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::DateTime;

    fn stage(mode: &str, length_m: f64, start: &str) -> Tripleg {
        Tripleg {
            user_id: "u".into(),
            started_at: DateTime::parse_from_rfc3339(start).unwrap(),
            finished_at: DateTime::parse_from_rfc3339(start).unwrap() + chrono::Duration::minutes(10),
            mode: mode.into(),
            length_m,
            dest_staypoint_id: 0,
        }
    }

    #[test]
    fn grouping_examples() {
        assert_eq!(group_mode("e-car"), MODE_CAR);
        assert_eq!(group_mode("ski"), MODE_OTHER);
        assert_eq!(group_mode("walk"), MODE_WALK);
        assert_eq!(group_mode("e-bike"), MODE_BICYCLE);
        assert_eq!(group_mode("airplane"), MODE_OTHER);
        assert_eq!(group_mode("Tram "), MODE_TRAM);
    }

    #[test]
    fn grouping_is_total() {
        for label in ["", "zeppelin", "e-scooter", "CAR", "hoverboard", "132"] {
            let id = group_mode(label);
            assert!((id as usize) < NUM_MODES, "{label} -> {id}");
        }
    }

    #[test]
    fn main_mode_takes_longest_stage() {
        let single = vec![stage("walk", 300.0, "2023-01-02T08:00:00+00:00")];
        assert_eq!(main_mode(&single).unwrap(), MODE_WALK);

        let multi = vec![
            stage("walk", 500.0, "2023-01-02T08:00:00+00:00"),
            stage("train", 12_000.0, "2023-01-02T08:10:00+00:00"),
            stage("walk", 200.0, "2023-01-02T08:40:00+00:00"),
        ];
        assert_eq!(main_mode(&multi).unwrap(), MODE_TRAIN);
    }

    #[test]
    fn main_mode_tie_goes_to_the_earliest_stage() {
        let tie = vec![
            stage("car", 1000.0, "2023-01-02T08:00:00+00:00"),
            stage("bus", 1000.0, "2023-01-02T08:20:00+00:00"),
        ];
        assert_eq!(main_mode(&tie).unwrap(), MODE_CAR);
        // order in the list does not matter, start time does
        let tie_rev = vec![tie[1].clone(), tie[0].clone()];
        assert_eq!(main_mode(&tie_rev).unwrap(), MODE_CAR);
    }

    #[test]
    fn main_mode_rejects_empty_stage_list() {
        assert!(matches!(main_mode(&[]), Err(DataError::NoTravelStages)));
    }
}
