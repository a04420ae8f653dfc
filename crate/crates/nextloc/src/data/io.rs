//! File formats: the two input CSVs, `sequences.jsonl` and `vocab.json`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::DateTime;

use super::types::{Coord, EncodedSample, Purpose, Staypoint, Tripleg, Vocabulary};
use super::DataError;

fn open(path: &Path) -> Result<File, DataError> {
    File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn create(path: &Path) -> Result<File, DataError> {
    File::create(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn field<'a>(
    record: &'a csv::StringRecord,
    headers: &csv::StringRecord,
    name: &str,
    path: &Path,
    row: usize,
) -> Result<&'a str, DataError> {
    let idx = headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| DataError::Csv {
            path: path.display().to_string(),
            row: 0,
            msg: format!("missing column {name:?}"),
        })?;
    record.get(idx).ok_or_else(|| DataError::Csv {
        path: path.display().to_string(),
        row,
        msg: format!("row too short for column {name:?}"),
    })
}

fn parse_time(value: &str, path: &Path, row: usize) -> Result<chrono::DateTime<chrono::FixedOffset>, DataError> {
    DateTime::parse_from_rfc3339(value.trim()).map_err(|e| DataError::Csv {
        path: path.display().to_string(),
        row,
        msg: format!("bad RFC 3339 timestamp {value:?}: {e}"),
    })
}

fn parse_f64(value: &str, name: &str, path: &Path, row: usize) -> Result<f64, DataError> {
    value.trim().parse::<f64>().map_err(|_| DataError::Csv {
        path: path.display().to_string(),
        row,
        msg: format!("bad number {value:?} in column {name:?}"),
    })
}

/// Read `staypoints.csv`: user_id, lat, lon, started_at, finished_at, purpose.
pub fn read_staypoints_csv(path: &Path) -> Result<Vec<Staypoint>, DataError> {
    let mut reader = csv::Reader::from_reader(BufReader::new(open(path)?));
    let headers = reader.headers().map_err(|e| DataError::Csv {
        path: path.display().to_string(),
        row: 0,
        msg: e.to_string(),
    })?.clone();
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2; // 1-based, after the header line
        let record = record.map_err(|e| DataError::Csv {
            path: path.display().to_string(),
            row,
            msg: e.to_string(),
        })?;
        let lat = parse_f64(field(&record, &headers, "lat", path, row)?, "lat", path, row)?;
        let lon = parse_f64(field(&record, &headers, "lon", path, row)?, "lon", path, row)?;
        let coord = Coord::new(lat, lon)?;
        out.push(Staypoint {
            user_id: field(&record, &headers, "user_id", path, row)?.to_string(),
            coord,
            started_at: parse_time(field(&record, &headers, "started_at", path, row)?, path, row)?,
            finished_at: parse_time(field(&record, &headers, "finished_at", path, row)?, path, row)?,
            purpose: Purpose::parse(field(&record, &headers, "purpose", path, row)?),
        });
    }
    Ok(out)
}

/// Read `triplegs.csv`: user_id, started_at, finished_at, mode, length_m,
/// dest_staypoint_id (0-based row index into the staypoint file).
pub fn read_triplegs_csv(path: &Path) -> Result<Vec<Tripleg>, DataError> {
    let mut reader = csv::Reader::from_reader(BufReader::new(open(path)?));
    let headers = reader.headers().map_err(|e| DataError::Csv {
        path: path.display().to_string(),
        row: 0,
        msg: e.to_string(),
    })?.clone();
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| DataError::Csv {
            path: path.display().to_string(),
            row,
            msg: e.to_string(),
        })?;
        let dest = field(&record, &headers, "dest_staypoint_id", path, row)?;
        let dest_staypoint_id = dest.trim().parse::<usize>().map_err(|_| DataError::Csv {
            path: path.display().to_string(),
            row,
            msg: format!("bad staypoint reference {dest:?}"),
        })?;
        out.push(Tripleg {
            user_id: field(&record, &headers, "user_id", path, row)?.to_string(),
            started_at: parse_time(field(&record, &headers, "started_at", path, row)?, path, row)?,
            finished_at: parse_time(field(&record, &headers, "finished_at", path, row)?, path, row)?,
            mode: field(&record, &headers, "mode", path, row)?.to_string(),
            length_m: parse_f64(
                field(&record, &headers, "length_m", path, row)?,
                "length_m",
                path,
                row,
            )?,
            dest_staypoint_id,
        });
    }
    Ok(out)
}

pub fn write_sequences_jsonl(path: &Path, samples: &[EncodedSample]) -> Result<(), DataError> {
    let mut w = BufWriter::new(create(path)?);
    for s in samples {
        let line = serde_json::to_string(s).map_err(|e| DataError::Json {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        writeln!(w, "{line}").map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}

pub fn read_sequences_jsonl(path: &Path) -> Result<Vec<EncodedSample>, DataError> {
    let reader = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: EncodedSample = serde_json::from_str(&line).map_err(|e| DataError::Json {
            path: path.display().to_string(),
            msg: format!("line {}: {e}", i + 1),
        })?;
        out.push(sample);
    }
    Ok(out)
}

pub fn write_vocab_json(path: &Path, vocab: &Vocabulary) -> Result<(), DataError> {
    let mut w = BufWriter::new(create(path)?);
    let text = serde_json::to_string_pretty(vocab).map_err(|e| DataError::Json {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    writeln!(w, "{text}").map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_vocab_json(path: &Path) -> Result<Vocabulary, DataError> {
    let reader = BufReader::new(open(path)?);
    serde_json::from_reader(reader).map_err(|e| DataError::Json {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

/// Write `staypoints.csv` in the exact ingest format.
pub fn write_staypoints_csv(path: &Path, staypoints: &[Staypoint]) -> Result<(), DataError> {
    let mut w = BufWriter::new(create(path)?);
    let fmt = |t: &chrono::DateTime<chrono::FixedOffset>| {
        t.to_rfc3339_opts(chrono::SecondsFormat::Secs, false)
    };
    writeln!(w, "user_id,lat,lon,started_at,finished_at,purpose").map_err(|source| {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    })?;
    for sp in staypoints {
        writeln!(
            w,
            "{},{:.7},{:.7},{},{},{}",
            sp.user_id,
            sp.coord.lat,
            sp.coord.lon,
            fmt(&sp.started_at),
            fmt(&sp.finished_at),
            sp.purpose.as_str()
        )
        .map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}

/// Write `triplegs.csv` in the exact ingest format.
pub fn write_triplegs_csv(path: &Path, triplegs: &[Tripleg]) -> Result<(), DataError> {
    let mut w = BufWriter::new(create(path)?);
    let fmt = |t: &chrono::DateTime<chrono::FixedOffset>| {
        t.to_rfc3339_opts(chrono::SecondsFormat::Secs, false)
    };
    writeln!(w, "user_id,started_at,finished_at,mode,length_m,dest_staypoint_id").map_err(
        |source| DataError::Io {
            path: path.display().to_string(),
            source,
        },
    )?;
    for tl in triplegs {
        writeln!(
            w,
            "{},{},{},{},{:.1},{}",
            tl.user_id,
            fmt(&tl.started_at),
            fmt(&tl.finished_at),
            tl.mode,
            tl.length_m,
            tl.dest_staypoint_id
        )
        .map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}
