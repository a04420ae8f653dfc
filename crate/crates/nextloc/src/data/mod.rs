//! Mobility data ingestion: staypoints and triplegs in, split location
//! sequences out.

mod cluster;
mod io;
mod modes;
mod pipeline;
mod types;

pub use cluster::{cluster_locations, haversine_m};
pub use io::{
    read_sequences_jsonl, read_staypoints_csv, read_triplegs_csv, read_vocab_json,
    write_sequences_jsonl, write_staypoints_csv, write_triplegs_csv, write_vocab_json,
};
pub use modes::{
    group_mode, main_mode, MODE_BICYCLE, MODE_BUS, MODE_CAR, MODE_NAMES, MODE_OTHER, MODE_TRAIN,
    MODE_TRAM, MODE_WALK, NUM_MODES,
};
pub use pipeline::{
    build_sequences, filter_activities, preprocess, split_user_chronological, PreprocessConfig,
    PreprocessOutput,
};
pub use types::{
    bin_time, Coord, DatasetSplit, EncodedSample, LocationInfo, LocationVisit, Purpose,
    SequenceSample, Split, Staypoint, TrackPoint, Tripleg, Vocabulary,
};

/// Number of 15-minute time-of-day bins.
pub const NUM_TIME_BINS: usize = 96;
/// Number of weekday values (Monday = 0).
pub const NUM_WEEKDAYS: usize = 7;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} row {row}: {msg}")]
    Csv { path: String, row: usize, msg: String },
    #[error("{path}: {msg}")]
    Json { path: String, msg: String },
    #[error("coordinate ({lat}, {lon}) is not a valid WGS84 position")]
    BadCoordinate { lat: f64, lon: f64 },
    #[error("staypoint row {row} does not end after it starts")]
    StaypointNotOrdered { row: usize },
    #[error("stage distance {distance} is not a finite non-negative length")]
    BadStageDistance { distance: f64 },
    #[error("no travel stages")]
    NoTravelStages,
    #[error("invalid clustering parameters: {msg}")]
    BadClusterParams { msg: String },
    #[error("split ratios train={train} validation={validation} do not fit in [0, 1]")]
    BadSplitRatios { train: f64, validation: f64 },
}
