//! Synthetic multi-user mobility worlds with known ground-truth dynamics.
//!
//! Each user moves between role-typed locations (home, work, errand,
//! leisure) on a fixed grid of daily decision slots. The transition row
//! depends on the current location and on the slot and weekday class, so the
//! dynamics are first order in location but time inhomogeneous. Travel modes
//! are drawn conditioned on the (origin, destination) pair, which makes the
//! next mode informative about the next location whenever coupling is on.
//! Because every conditional table is known, a Bayes-optimal ranking oracle
//! is available for any generated sample.

mod generate;
mod oracle;

pub use generate::{generate, SimVisit, SimulatedUser};
pub use oracle::{bayes_oracle, BayesOracle};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{MODE_BICYCLE, MODE_BUS, MODE_CAR, MODE_TRAIN, MODE_TRAM, MODE_WALK};

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error("invalid world: {0}")]
    Invalid(String),
    #[error("{path}: {msg}")]
    Config { path: String, msg: String },
    #[error("sample state not generated by this world: {0}")]
    StateNotInWorld(String),
}

/// Location roles in a user's weekly routine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Home,
    Work,
    Errand,
    Leisure,
}

pub const NUM_ROLES: usize = 4;
pub const ROLES: [Role; NUM_ROLES] = [Role::Home, Role::Work, Role::Errand, Role::Leisure];

impl Role {
    pub fn index(self) -> usize {
        match self {
            Role::Home => 0,
            Role::Work => 1,
            Role::Errand => 2,
            Role::Leisure => 3,
        }
    }
}

/// Weekday class used by the schedule tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DayClass {
    Weekday,
    Weekend,
}

pub fn day_class(weekday: u8) -> DayClass {
    if weekday >= 5 {
        DayClass::Weekend
    } else {
        DayClass::Weekday
    }
}

/// Distribution over destination roles for one (origin role, slot, day
/// class) cell.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RoleRow {
    pub home: f64,
    pub work: f64,
    pub errand: f64,
    pub leisure: f64,
}

impl RoleRow {
    pub fn weights(&self) -> [f64; NUM_ROLES] {
        [self.home, self.work, self.errand, self.leisure]
    }

    fn validate(&self, context: &str) -> Result<(), WorldError> {
        let w = self.weights();
        if w.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(WorldError::Invalid(format!(
                "{context}: negative or non-finite weight in {w:?}"
            )));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(WorldError::Invalid(format!(
                "{context}: row sums to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Declarative description of a synthetic world, read from a TOML file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub users: usize,
    pub days: u32,
    pub seed: u64,
    /// Simulation start date (should be a Monday to make weekday maths easy
    /// to eyeball; any date works).
    pub start_date: String,
    /// Daily decision slots, "HH:MM", each aligned to a 15-minute boundary.
    pub slots: Vec<String>,
    /// Chance that a transition lands in a brand-new, never-seen location.
    pub exploration_prob: f64,
    /// Per-user pool sizes, inclusive ranges.
    pub work_locations: [usize; 2],
    pub errand_locations: [usize; 2],
    pub leisure_locations: [usize; 2],
    /// Within-role destination weights fall off as 1/(rank+1)^zipf.
    pub zipf: f64,
    /// Couple travel modes to the destination (true) or draw them from a
    /// global distribution independent of the transition (false).
    pub mode_coupling: bool,
    /// Probability that a coupled trip uses the destination's signature mode.
    pub mode_fidelity: f64,
    /// Collapse the schedule to one row per origin role, killing all
    /// temporal signal (for Markov-baseline studies).
    pub time_homogeneous: bool,
    /// Optional schedule override; `None` uses the built-in weekly routine.
    pub schedule: Option<ScheduleSpec>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            users: 50,
            days: 200,
            seed: 7,
            start_date: "2023-01-02".into(),
            slots: vec!["08:15".into(), "12:30".into(), "18:00".into()],
            exploration_prob: 0.03,
            work_locations: [1, 2],
            errand_locations: [4, 8],
            leisure_locations: [24, 44],
            zipf: 1.0,
            mode_coupling: true,
            mode_fidelity: 0.9,
            time_homogeneous: false,
            schedule: None,
        }
    }
}

/// Explicit schedule table: `rows[day_class][slot][origin role]`, with
/// day_class 0 = weekday, 1 = weekend.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub weekday: Vec<[RoleRow; NUM_ROLES]>,
    pub weekend: Vec<[RoleRow; NUM_ROLES]>,
}

impl WorldConfig {
    pub fn from_toml_file(path: &std::path::Path) -> Result<WorldConfig, WorldError> {
        let text = std::fs::read_to_string(path).map_err(|e| WorldError::Config {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| WorldError::Config {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }
}

const fn row(home: f64, work: f64, errand: f64, leisure: f64) -> RoleRow {
    RoleRow {
        home,
        work,
        errand,
        leisure,
    }
}

/// The built-in weekly routine for a 3-slot day (morning, midday, evening).
/// Slots beyond three reuse the last row. Chosen so that per-slot rows are
/// sharply peaked while the time-collapsed marginals stay ambiguous.
fn default_schedule(num_slots: usize) -> ScheduleSpec {
    let weekday = [
        // morning: commute
        [
            row(0.00, 0.82, 0.10, 0.08), // from home
            row(0.35, 0.00, 0.40, 0.25), // from work
            row(0.25, 0.55, 0.00, 0.20), // from errand
            row(0.45, 0.35, 0.20, 0.00), // from leisure
        ],
        // midday
        [
            row(0.00, 0.20, 0.45, 0.35),
            row(0.20, 0.10, 0.45, 0.25),
            row(0.30, 0.35, 0.10, 0.25),
            row(0.35, 0.20, 0.30, 0.15),
        ],
        // evening: strong pull home
        [
            row(0.00, 0.00, 0.40, 0.60),
            row(0.80, 0.00, 0.05, 0.15),
            row(0.75, 0.00, 0.05, 0.20),
            row(0.78, 0.00, 0.10, 0.12),
        ],
    ];
    let weekend = [
        [
            row(0.00, 0.08, 0.30, 0.62),
            row(0.60, 0.00, 0.10, 0.30),
            row(0.35, 0.00, 0.20, 0.45),
            row(0.35, 0.00, 0.25, 0.40),
        ],
        [
            row(0.00, 0.00, 0.45, 0.55),
            row(0.70, 0.00, 0.10, 0.20),
            row(0.40, 0.00, 0.15, 0.45),
            row(0.40, 0.00, 0.25, 0.35),
        ],
        [
            row(0.00, 0.00, 0.30, 0.70),
            row(0.90, 0.00, 0.00, 0.10),
            row(0.80, 0.00, 0.00, 0.20),
            row(0.82, 0.00, 0.00, 0.18),
        ],
    ];
    let take = |rows: [[RoleRow; NUM_ROLES]; 3]| -> Vec<[RoleRow; NUM_ROLES]> {
        (0..num_slots)
            .map(|s| rows[s.min(rows.len() - 1)])
            .collect()
    };
    ScheduleSpec {
        weekday: take(weekday),
        weekend: take(weekend),
    }
}

/// One row per origin role, used for every slot and day class.
fn homogeneous_schedule(num_slots: usize) -> ScheduleSpec {
    let rows = [
        row(0.00, 0.45, 0.30, 0.25),
        row(0.55, 0.00, 0.25, 0.20),
        row(0.50, 0.20, 0.10, 0.20),
        row(0.55, 0.15, 0.20, 0.10),
    ];
    ScheduleSpec {
        weekday: vec![rows; num_slots],
        weekend: vec![rows; num_slots],
    }
}

/// A concrete location in a user's world.
#[derive(Debug, Clone)]
pub struct WorldLocation {
    pub role: Role,
    pub lat: f64,
    pub lon: f64,
    /// Signature arrival mode when mode coupling is on.
    pub access_mode: u8,
}

/// One user's materialised world: locations, role pools and pool weights.
#[derive(Debug, Clone)]
pub struct UserWorld {
    pub label: String,
    pub base_lat: f64,
    pub base_lon: f64,
    pub locations: Vec<WorldLocation>,
    pub role_members: [Vec<usize>; NUM_ROLES],
    role_weights: [Vec<f64>; NUM_ROLES],
}

/// Fully materialised world: every conditional table the generator samples
/// from, and that the Bayes oracle ranks with.
#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub users: Vec<UserWorld>,
    /// Minute-of-day for each decision slot.
    pub slot_minutes: Vec<u32>,
    schedule: ScheduleSpec,
}

/// Mode palette for trips into a destination of the given role; the first
/// entry weights apply to the non-signature share of coupled draws.
fn role_palette(role: Role) -> &'static [u8] {
    match role {
        Role::Home => &[MODE_TRAIN, MODE_CAR, MODE_WALK],
        Role::Work => &[MODE_TRAIN, MODE_CAR, MODE_BUS],
        Role::Errand => &[MODE_CAR, MODE_WALK, MODE_BICYCLE],
        Role::Leisure => &[MODE_TRAM, MODE_BUS, MODE_BICYCLE, MODE_WALK, MODE_CAR],
    }
}

/// Global mode distribution used when coupling is off, and for exploration
/// trips. Indexed by mode id.
pub(crate) const UNCOUPLED_MODE_DIST: [f64; 7] = [0.30, 0.08, 0.15, 0.10, 0.10, 0.25, 0.02];

impl World {
    /// Materialise a world from its declarative config.
    pub fn build(config: &WorldConfig) -> Result<World, WorldError> {
        if config.users == 0 {
            return Err(WorldError::Invalid("users must be at least 1".into()));
        }
        if config.days == 0 {
            return Err(WorldError::Invalid("days must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&config.exploration_prob) {
            return Err(WorldError::Invalid(format!(
                "exploration_prob {} outside [0, 1)",
                config.exploration_prob
            )));
        }
        if !(0.0..=1.0).contains(&config.mode_fidelity) {
            return Err(WorldError::Invalid(format!(
                "mode_fidelity {} outside [0, 1]",
                config.mode_fidelity
            )));
        }
        let mut slot_minutes = Vec::new();
        for s in &config.slots {
            let parts: Vec<&str> = s.split(':').collect();
            let bad = || WorldError::Invalid(format!("bad slot time {s:?}, expected HH:MM"));
            if parts.len() != 2 {
                return Err(bad());
            }
            let h: u32 = parts[0].parse().map_err(|_| bad())?;
            let m: u32 = parts[1].parse().map_err(|_| bad())?;
            if h >= 24 || m >= 60 {
                return Err(bad());
            }
            if m % 15 != 0 {
                return Err(WorldError::Invalid(format!(
                    "slot {s:?} is not on a 15-minute boundary"
                )));
            }
            slot_minutes.push(h * 60 + m);
        }
        if slot_minutes.is_empty() {
            return Err(WorldError::Invalid("at least one slot is required".into()));
        }
        if slot_minutes.windows(2).any(|w| w[1] <= w[0] + 59) {
            return Err(WorldError::Invalid(
                "slots must be increasing and at least an hour apart".into(),
            ));
        }
        if *slot_minutes.last().unwrap() > 22 * 60 {
            return Err(WorldError::Invalid(
                "last slot must not start after 22:00".into(),
            ));
        }

        let schedule = match (&config.schedule, config.time_homogeneous) {
            (Some(s), _) => s.clone(),
            (None, true) => homogeneous_schedule(slot_minutes.len()),
            (None, false) => default_schedule(slot_minutes.len()),
        };
        if schedule.weekday.len() != slot_minutes.len()
            || schedule.weekend.len() != slot_minutes.len()
        {
            return Err(WorldError::Invalid(format!(
                "schedule has {} weekday / {} weekend slots, config has {}",
                schedule.weekday.len(),
                schedule.weekend.len(),
                slot_minutes.len()
            )));
        }
        for (day, rows) in [("weekday", &schedule.weekday), ("weekend", &schedule.weekend)] {
            for (slot, per_role) in rows.iter().enumerate() {
                for (role, r) in ROLES.iter().zip(per_role.iter()) {
                    r.validate(&format!("{day} slot {slot} from {role:?}"))?;
                }
            }
        }

        // per-user worlds from independent sub-seeds
        let mut users = Vec::with_capacity(config.users);
        for u in 0..config.users {
            let mut rng =
                ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(u as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            users.push(build_user(config, u, &mut rng)?);
        }

        Ok(World {
            config: config.clone(),
            users,
            slot_minutes,
            schedule,
        })
    }

    pub fn num_slots(&self) -> usize {
        self.slot_minutes.len()
    }

    fn role_row(&self, day: DayClass, slot: usize, origin: Role) -> &RoleRow {
        let rows = match day {
            DayClass::Weekday => &self.schedule.weekday,
            DayClass::Weekend => &self.schedule.weekend,
        };
        &rows[slot][origin.index()]
    }

    /// The true next-location distribution from `(current location, slot,
    /// day class)`, over the user's schedule locations. Exploration mass is
    /// not included: it lands outside the known location set by definition.
    pub fn next_distribution(
        &self,
        user: usize,
        current: usize,
        slot: usize,
        day: DayClass,
    ) -> Vec<(usize, f64)> {
        let uw = &self.users[user];
        let origin_role = uw.locations[current].role;
        let role_row = self.role_row(day, slot, origin_role).weights();
        let mut out = Vec::new();
        let mut total = 0.0;
        for role in ROLES {
            let w_role = role_row[role.index()];
            if w_role <= 0.0 {
                continue;
            }
            let members = &uw.role_members[role.index()];
            let weights = &uw.role_weights[role.index()];
            let avail: f64 = members
                .iter()
                .zip(weights)
                .filter(|(m, _)| **m != current)
                .map(|(_, w)| *w)
                .sum();
            if avail <= 0.0 {
                continue;
            }
            for (m, w) in members.iter().zip(weights) {
                if *m == current {
                    continue;
                }
                let p = w_role * w / avail;
                out.push((*m, p));
                total += p;
            }
        }
        // roles with no available member shed their mass onto the rest
        if total > 0.0 {
            for (_, p) in out.iter_mut() {
                *p /= total;
            }
        }
        out
    }

    /// Mode distribution for a trip `origin -> destination` of one user.
    pub fn mode_distribution(&self, user: usize, origin: usize, dest: usize) -> [f64; 7] {
        if !self.config.mode_coupling {
            return UNCOUPLED_MODE_DIST;
        }
        let uw = &self.users[user];
        let dest_loc = &uw.locations[dest];
        let palette = role_palette(dest_loc.role);
        let mut dist = [0.0f64; 7];
        let spread = (1.0 - self.config.mode_fidelity) / palette.len() as f64;
        for &m in palette {
            dist[m as usize] += spread;
        }
        dist[dest_loc.access_mode as usize] += self.config.mode_fidelity;
        // a faint origin imprint: walking over from a same-role neighbour
        let _ = origin;
        dist
    }

    /// Slot whose transition produces an arrival in time bin `h`
    /// (15-minute bins). Arrivals always happen after their slot's departure
    /// and before the next slot, so the mapping is unambiguous.
    pub fn slot_of_time_bin(&self, h: u8) -> Result<usize, WorldError> {
        let minute = h as u32 * 15;
        let mut slot = None;
        for (i, &m) in self.slot_minutes.iter().enumerate() {
            if minute >= m {
                slot = Some(i);
            }
        }
        slot.ok_or_else(|| {
            WorldError::StateNotInWorld(format!("time bin {h} precedes the first slot"))
        })
    }

    /// The slot and weekday following one transition.
    pub fn next_slot(&self, slot: usize, weekday: u8) -> (usize, u8) {
        if slot + 1 < self.num_slots() {
            (slot + 1, weekday)
        } else {
            (0, (weekday + 1) % 7)
        }
    }
}

fn build_user(config: &WorldConfig, index: usize, rng: &mut ChaCha8Rng) -> Result<UserWorld, WorldError> {
    let pick = |range: [usize; 2], rng: &mut ChaCha8Rng| -> Result<usize, WorldError> {
        if range[0] > range[1] || range[0] == 0 {
            return Err(WorldError::Invalid(format!(
                "bad pool size range {range:?}"
            )));
        }
        Ok(rng.gen_range(range[0]..=range[1]))
    };
    let works = pick(config.work_locations, rng)?;
    let errands = pick(config.errand_locations, rng)?;
    let leisures = pick(config.leisure_locations, rng)?;

    // users sit on well-separated grid cells; locations on a ~220 m grid
    let base_lat = 46.0 + 0.05 * index as f64;
    let base_lon = 7.0 + 0.02 * (index % 7) as f64;
    let mut locations: Vec<WorldLocation> = Vec::new();
    let mut place = |role: Role, access: u8| -> usize {
        let grid = locations.len();
        locations.push(WorldLocation {
            role,
            lat: base_lat + 0.002 * (grid / 16) as f64,
            lon: base_lon + 0.003 * (grid % 16) as f64,
            access_mode: access,
        });
        grid
    };

    let home_access = if rng.gen_bool(0.5) { MODE_TRAIN } else { MODE_CAR };
    let mut role_members: [Vec<usize>; NUM_ROLES] = Default::default();
    role_members[Role::Home.index()].push(place(Role::Home, home_access));
    for _ in 0..works {
        let access = if rng.gen_bool(0.6) { MODE_TRAIN } else { MODE_CAR };
        role_members[Role::Work.index()].push(place(Role::Work, access));
    }
    for _ in 0..errands {
        let access = if rng.gen_bool(0.6) { MODE_CAR } else { MODE_WALK };
        role_members[Role::Errand.index()].push(place(Role::Errand, access));
    }
    let leisure_palette = role_palette(Role::Leisure);
    for k in 0..leisures {
        let access = leisure_palette[k % leisure_palette.len()];
        role_members[Role::Leisure.index()].push(place(Role::Leisure, access));
    }
    drop(place);

    let mut role_weights: [Vec<f64>; NUM_ROLES] = Default::default();
    for role in ROLES {
        let members = &role_members[role.index()];
        let mut w: Vec<f64> = (0..members.len())
            .map(|j| 1.0 / ((j + 1) as f64).powf(config.zipf))
            .collect();
        let sum: f64 = w.iter().sum();
        for x in w.iter_mut() {
            *x /= sum;
        }
        role_weights[role.index()] = w;
    }

    Ok(UserWorld {
        label: format!("u{index:03}"),
        base_lat,
        base_lon,
        locations,
        role_members,
        role_weights,
    })
}

/// Fix an `other`-group raw label; rotated for variety.
pub(crate) fn other_label(counter: usize) -> &'static str {
    ["ski", "coach", "airplane", "boat"][counter % 4]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_world_builds_and_rows_normalise() {
        let world = World::build(&WorldConfig::default()).unwrap();
        assert_eq!(world.users.len(), 50);
        for u in 0..world.users.len() {
            let n = world.users[u].locations.len();
            assert!((30..=60).contains(&n), "user {u} has {n} locations");
        }
        // every reachable conditional sums to one
        for (u, uw) in world.users.iter().enumerate().take(3) {
            for cur in 0..uw.locations.len().min(5) {
                for slot in 0..world.num_slots() {
                    for day in [DayClass::Weekday, DayClass::Weekend] {
                        let dist = world.next_distribution(u, cur, slot, day);
                        let sum: f64 = dist.iter().map(|(_, p)| p).sum();
                        assert!((sum - 1.0).abs() < 1e-9, "sum {sum}");
                        assert!(dist.iter().all(|&(d, _)| d != cur));
                    }
                }
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = WorldConfig::default();
        c.exploration_prob = 1.5;
        assert!(World::build(&c).is_err());

        let mut c = WorldConfig::default();
        c.slots = vec!["08:10".into()];
        assert!(World::build(&c).is_err(), "off-grid slot accepted");

        let mut c = WorldConfig::default();
        c.schedule = Some(ScheduleSpec {
            weekday: vec![[row(0.5, 0.2, 0.2, 0.2); 4]; 3],
            weekend: vec![[row(0.25, 0.25, 0.25, 0.25); 4]; 3],
        });
        let err = World::build(&c).unwrap_err();
        assert!(err.to_string().contains("sums to"), "{err}");
    }

    #[test]
    fn mode_distribution_is_a_distribution_and_respects_coupling() {
        let world = World::build(&WorldConfig::default()).unwrap();
        let dist = world.mode_distribution(0, 0, 1);
        let sum: f64 = dist.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        // signature mode dominates under the default fidelity
        let dest_mode = world.users[0].locations[1].access_mode;
        assert!(dist[dest_mode as usize] >= 0.9);

        let mut c = WorldConfig::default();
        c.mode_coupling = false;
        let world = World::build(&c).unwrap();
        assert_eq!(world.mode_distribution(0, 0, 1), UNCOUPLED_MODE_DIST);
    }

    #[test]
    fn slot_mapping_and_rollover() {
        let world = World::build(&WorldConfig::default()).unwrap();
        // 08:15 departure, arrival ~08:30 -> bin 34 -> slot 0
        assert_eq!(world.slot_of_time_bin(34).unwrap(), 0);
        // 18:00 departure, arrival ~18:20 -> bin 73 -> slot 2
        assert_eq!(world.slot_of_time_bin(73).unwrap(), 2);
        assert!(world.slot_of_time_bin(10).is_err());
        assert_eq!(world.next_slot(0, 3), (1, 3));
        assert_eq!(world.next_slot(2, 4), (0, 5));
        assert_eq!(world.next_slot(2, 6), (0, 0));
    }
}
