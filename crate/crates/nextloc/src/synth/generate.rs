//! Simulation of user timelines and rendering into the ingest CSV formats.

use std::path::Path;

use chrono::{DateTime, Duration, FixedOffset, NaiveDate};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    write_staypoints_csv, write_triplegs_csv, Coord, Purpose, Staypoint, Tripleg, MODE_BICYCLE,
    MODE_BUS, MODE_CAR, MODE_OTHER, MODE_TRAIN, MODE_TRAM, MODE_WALK,
};

use super::{day_class, other_label, Role, World, WorldError, UNCOUPLED_MODE_DIST};

/// One simulated transition: the trip taken at one decision slot.
#[derive(Debug, Clone)]
pub struct SimVisit {
    pub day: u32,
    pub slot: usize,
    pub weekday: u8,
    /// Destination in the user's schedule, or `None` for an exploration
    /// visit to a brand-new place.
    pub location: Option<usize>,
    pub exploration_id: u32,
    /// Schedule location the chain sits at after this visit. Exploration is
    /// a detour: the anchor stays at the origin.
    pub anchor: usize,
    pub origin: usize,
    pub mode: u8,
    pub departure_minute: u32,
    pub arrival_minute: u32,
}

#[derive(Debug, Clone)]
pub struct SimulatedUser {
    pub user: usize,
    pub visits: Vec<SimVisit>,
}

fn sample_index(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        x -= w;
        if x <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

fn travel_minutes(rng: &mut ChaCha8Rng, mode: u8) -> u32 {
    let (lo, hi) = match mode {
        MODE_WALK => (14, 26),
        MODE_BICYCLE => (10, 20),
        MODE_TRAM | MODE_BUS => (10, 22),
        MODE_TRAIN => (12, 28),
        MODE_CAR => (8, 18),
        _ => (15, 30),
    };
    rng.gen_range(lo..hi)
}

/// Run the time-slotted Markov dynamics for every user. Per-user streams use
/// independent sub-seeds, so the timeline of one user never depends on how
/// many others are simulated.
pub fn simulate(world: &World) -> Vec<SimulatedUser> {
    let mut out = Vec::with_capacity(world.users.len());
    let start_weekday = start_date(world).and_hms_opt(0, 0, 0).map(|d| {
        chrono::Datelike::weekday(&d).num_days_from_monday() as u8
    });
    let start_weekday = start_weekday.unwrap_or(0);
    for (u, _) in world.users.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(
            world
                .config
                .seed
                .wrapping_add(u as u64)
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(0x5851_F42D_4C95_7F2D),
        );
        let mut visits = Vec::new();
        let mut current = world.users[u].role_members[Role::Home.index()][0];
        let mut exploration_counter = 0u32;
        for day in 0..world.config.days {
            let weekday = ((start_weekday as u32 + day) % 7) as u8;
            for slot in 0..world.num_slots() {
                let explore = rng.gen::<f64>() < world.config.exploration_prob;
                let (location, mode, anchor) = if explore {
                    let mode = sample_index(&mut rng, &UNCOUPLED_MODE_DIST) as u8;
                    exploration_counter += 1;
                    (None, mode, current)
                } else {
                    let dist = world.next_distribution(u, current, slot, day_class(weekday));
                    let weights: Vec<f64> = dist.iter().map(|(_, p)| *p).collect();
                    let dest = dist[sample_index(&mut rng, &weights)].0;
                    let mode_dist = world.mode_distribution(u, current, dest);
                    let mode = sample_index(&mut rng, &mode_dist) as u8;
                    (Some(dest), mode, dest)
                };
                let jitter = rng.gen_range(0..12u32);
                let departure_minute = world.slot_minutes[slot] + jitter;
                let arrival_minute = departure_minute + travel_minutes(&mut rng, mode);
                visits.push(SimVisit {
                    day,
                    slot,
                    weekday,
                    location,
                    exploration_id: exploration_counter,
                    anchor,
                    origin: current,
                    mode,
                    departure_minute,
                    arrival_minute,
                });
                current = anchor;
            }
        }
        out.push(SimulatedUser { user: u, visits });
    }
    out
}

fn start_date(world: &World) -> NaiveDate {
    NaiveDate::parse_from_str(&world.config.start_date, "%Y-%m-%d")
        .unwrap_or_else(|_| NaiveDate::from_ymd_opt(2023, 1, 2).unwrap())
}

fn at(date: NaiveDate, day: u32, minute: u32) -> DateTime<FixedOffset> {
    let naive = (date + Duration::days(day as i64))
        .and_hms_opt(minute / 60, minute % 60, 0)
        .unwrap();
    DateTime::from_naive_utc_and_offset(naive, FixedOffset::east_opt(0).unwrap())
}

fn raw_label(rng: &mut ChaCha8Rng, mode: u8, other_counter: &mut usize) -> String {
    match mode {
        MODE_CAR if rng.gen_bool(0.2) => "e-car".into(),
        MODE_BICYCLE if rng.gen_bool(0.25) => "e-bike".into(),
        MODE_OTHER => {
            let label = other_label(*other_counter);
            *other_counter += 1;
            label.into()
        }
        m => crate::data::MODE_NAMES[m as usize].into(),
    }
}

fn stage_length_m(rng: &mut ChaCha8Rng, mode: u8) -> f64 {
    let (lo, hi) = match mode {
        MODE_WALK => (300.0, 1500.0),
        MODE_BICYCLE => (1000.0, 4000.0),
        MODE_TRAM => (2000.0, 6000.0),
        MODE_BUS => (2000.0, 8000.0),
        MODE_TRAIN => (8000.0, 25000.0),
        MODE_CAR => (3000.0, 20000.0),
        _ => (30000.0, 300000.0),
    };
    rng.gen_range(lo..hi)
}

/// Render simulated timelines into staypoint/tripleg rows in the exact
/// mobility ingest format. Tripleg `dest_staypoint_id` values are row
/// indices into the returned staypoint list.
pub fn render(world: &World, sims: &[SimulatedUser]) -> (Vec<Staypoint>, Vec<Tripleg>) {
    let date = start_date(world);
    let mut staypoints: Vec<Staypoint> = Vec::new();
    let mut triplegs: Vec<Tripleg> = Vec::new();
    for sim in sims {
        let uw = &world.users[sim.user];
        let mut rng = ChaCha8Rng::seed_from_u64(
            world
                .config
                .seed
                .wrapping_add(sim.user as u64)
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(0xB504_F333_F9DE_6484),
        );
        let mut other_counter = 0usize;
        let jitter_m = |rng: &mut ChaCha8Rng| rng.gen_range(-0.000_027..0.000_027);

        if sim.visits.is_empty() {
            continue;
        }
        // the user starts the first day at home
        let home = uw.role_members[Role::Home.index()][0];
        let first_departure = sim.visits[0].departure_minute;
        staypoints.push(Staypoint {
            user_id: uw.label.clone(),
            coord: Coord {
                lat: uw.locations[home].lat + jitter_m(&mut rng),
                lon: uw.locations[home].lon + jitter_m(&mut rng),
            },
            started_at: at(date, 0, 20),
            finished_at: at(date, 0, first_departure),
            purpose: Purpose::Home,
        });

        for (i, v) in sim.visits.iter().enumerate() {
            let (coord, purpose) = match v.location {
                Some(loc) => {
                    let wl = &uw.locations[loc];
                    let purpose = match wl.role {
                        Role::Home => Purpose::Home,
                        Role::Work => Purpose::Work,
                        Role::Errand => Purpose::Errand,
                        Role::Leisure => Purpose::Leisure,
                    };
                    (
                        Coord {
                            lat: wl.lat + jitter_m(&mut rng),
                            lon: wl.lon + jitter_m(&mut rng),
                        },
                        purpose,
                    )
                }
                None => (
                    Coord {
                        lat: uw.base_lat - 0.005 - 0.000_5 * v.exploration_id as f64,
                        lon: uw.base_lon - 0.004,
                    },
                    Purpose::Unknown,
                ),
            };
            let end = match sim.visits.get(i + 1) {
                Some(next) => at(date, next.day, next.departure_minute),
                None => at(date, v.day, 23 * 60 + 30),
            };
            let row = staypoints.len();
            staypoints.push(Staypoint {
                user_id: uw.label.clone(),
                coord,
                started_at: at(date, v.day, v.arrival_minute),
                finished_at: end,
                purpose,
            });

            // stages of the trip into this staypoint
            let departure = at(date, v.day, v.departure_minute);
            let arrival = at(date, v.day, v.arrival_minute);
            let split_stage = matches!(v.mode, MODE_TRAIN | MODE_TRAM | MODE_BUS)
                && rng.gen_bool(0.2);
            if split_stage {
                let walk_len = rng.gen_range(200.0..800.0);
                let mid = departure + Duration::minutes(6);
                triplegs.push(Tripleg {
                    user_id: uw.label.clone(),
                    started_at: departure,
                    finished_at: mid,
                    mode: "walk".into(),
                    length_m: walk_len,
                    dest_staypoint_id: row,
                });
                triplegs.push(Tripleg {
                    user_id: uw.label.clone(),
                    started_at: mid,
                    finished_at: arrival,
                    mode: raw_label(&mut rng, v.mode, &mut other_counter),
                    length_m: stage_length_m(&mut rng, v.mode).max(walk_len + 500.0),
                    dest_staypoint_id: row,
                });
            } else {
                triplegs.push(Tripleg {
                    user_id: uw.label.clone(),
                    started_at: departure,
                    finished_at: arrival,
                    mode: raw_label(&mut rng, v.mode, &mut other_counter),
                    length_m: stage_length_m(&mut rng, v.mode),
                    dest_staypoint_id: row,
                });
            }
        }
    }
    (staypoints, triplegs)
}

#[derive(Debug, Clone)]
pub struct GenerateSummary {
    pub users: usize,
    pub visits: usize,
    pub staypoints: usize,
    pub triplegs: usize,
}

/// Simulate the configured number of days and write `staypoints.csv` and
/// `triplegs.csv`.
pub fn generate(
    world: &World,
    staypoints_path: &Path,
    triplegs_path: &Path,
) -> Result<GenerateSummary, WorldError> {
    let sims = simulate(world);
    let visits = sims.iter().map(|s| s.visits.len()).sum();
    let (staypoints, triplegs) = render(world, &sims);
    write_staypoints_csv(staypoints_path, &staypoints)
        .map_err(|e| WorldError::Config {
            path: staypoints_path.display().to_string(),
            msg: e.to_string(),
        })?;
    write_triplegs_csv(triplegs_path, &triplegs).map_err(|e| WorldError::Config {
        path: triplegs_path.display().to_string(),
        msg: e.to_string(),
    })?;
    Ok(GenerateSummary {
        users: world.users.len(),
        visits,
        staypoints: staypoints.len(),
        triplegs: triplegs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{RoleRow, ScheduleSpec, WorldConfig};

    fn tiny_config() -> WorldConfig {
        WorldConfig {
            users: 2,
            days: 10,
            seed: 11,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn simulation_is_deterministic_for_a_fixed_seed() {
        let world = World::build(&tiny_config()).unwrap();
        let a = simulate(&world);
        let b = simulate(&world);
        for (ua, ub) in a.iter().zip(&b) {
            assert_eq!(ua.visits.len(), ub.visits.len());
            for (va, vb) in ua.visits.iter().zip(&ub.visits) {
                assert_eq!(va.anchor, vb.anchor);
                assert_eq!(va.mode, vb.mode);
                assert_eq!(va.arrival_minute, vb.arrival_minute);
            }
        }
    }

    #[test]
    fn deterministic_schedule_gives_a_periodic_orbit() {
        // one location per role, no exploration, single-choice rows
        let one = |r: usize| -> RoleRow {
            RoleRow {
                home: if r == 0 { 1.0 } else { 0.0 },
                work: if r == 1 { 1.0 } else { 0.0 },
                errand: if r == 2 { 1.0 } else { 0.0 },
                leisure: if r == 3 { 1.0 } else { 0.0 },
            }
        };
        // home -> work -> errand -> home, every day
        let rows = [one(1), one(2), one(0)];
        let per_slot: Vec<[RoleRow; 4]> = rows.iter().map(|r| [*r; 4]).collect();
        let cfg = WorldConfig {
            users: 1,
            days: 6,
            exploration_prob: 0.0,
            work_locations: [1, 1],
            errand_locations: [1, 1],
            leisure_locations: [1, 1],
            schedule: Some(ScheduleSpec {
                weekday: per_slot.clone(),
                weekend: per_slot,
            }),
            ..WorldConfig::default()
        };
        let world = World::build(&cfg).unwrap();
        let sims = simulate(&world);
        let anchors: Vec<usize> = sims[0].visits.iter().map(|v| v.anchor).collect();
        let day: Vec<usize> = anchors[0..3].to_vec();
        for d in 0..6 {
            assert_eq!(&anchors[d * 3..d * 3 + 3], day.as_slice(), "day {d}");
        }
    }

    #[test]
    fn transition_frequencies_match_the_schedule_row() {
        // P(work | home, weekday morning) = 0.9; count over many transitions
        let mk = |home: f64, work: f64, errand: f64, leisure: f64| RoleRow {
            home,
            work,
            errand,
            leisure,
        };
        let morning = [
            mk(0.0, 0.9, 0.1, 0.0), // from home
            mk(1.0, 0.0, 0.0, 0.0),
            mk(1.0, 0.0, 0.0, 0.0),
            mk(1.0, 0.0, 0.0, 0.0),
        ];
        let evening = [
            mk(0.0, 0.0, 0.5, 0.5),
            mk(1.0, 0.0, 0.0, 0.0),
            mk(1.0, 0.0, 0.0, 0.0),
            mk(1.0, 0.0, 0.0, 0.0),
        ];
        let cfg = WorldConfig {
            users: 24,
            days: 300,
            seed: 5,
            exploration_prob: 0.0,
            slots: vec!["08:15".into(), "18:00".into()],
            work_locations: [1, 1],
            errand_locations: [2, 2],
            leisure_locations: [2, 2],
            schedule: Some(ScheduleSpec {
                weekday: vec![morning, evening],
                weekend: vec![morning, evening],
            }),
            ..WorldConfig::default()
        };
        let world = World::build(&cfg).unwrap();
        let sims = simulate(&world);
        let mut from_home_morning = 0usize;
        let mut to_work = 0usize;
        for sim in &sims {
            let uw = &world.users[sim.user];
            for v in &sim.visits {
                if v.slot == 0 && uw.locations[v.origin].role == Role::Home {
                    from_home_morning += 1;
                    if v.location.map(|l| uw.locations[l].role) == Some(Role::Work) {
                        to_work += 1;
                    }
                }
            }
        }
        assert!(from_home_morning > 5_000, "only {from_home_morning} transitions");
        let freq = to_work as f64 / from_home_morning as f64;
        assert!((freq - 0.9).abs() < 0.02, "frequency {freq}");
    }

    #[test]
    fn generated_files_are_byte_identical_for_a_fixed_seed() {
        let world = World::build(&tiny_config()).unwrap();
        let dir = std::env::temp_dir().join(format!("nextloc-synth-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let (sp1, tl1) = (dir.join("sp1.csv"), dir.join("tl1.csv"));
        let (sp2, tl2) = (dir.join("sp2.csv"), dir.join("tl2.csv"));
        generate(&world, &sp1, &tl1).unwrap();
        generate(&world, &sp2, &tl2).unwrap();
        assert_eq!(std::fs::read(&sp1).unwrap(), std::fs::read(&sp2).unwrap());
        assert_eq!(std::fs::read(&tl1).unwrap(), std::fs::read(&tl2).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }
}
