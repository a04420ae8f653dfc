//! Spatial aggregation of activity staypoints into locations.
//!
//! DBSCAN over staypoint centroids under great-circle distance. Two
//! deviations from the textbook algorithm keep the result deterministic and
//! independent of input order: border points attach to their nearest core
//! point (ties broken by a canonical point order), and noise points become
//! singleton locations instead of being discarded, so every visit keeps a
//! predictable target.

use super::DataError;
use super::types::Staypoint;

const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Great-circle distance between two WGS84 points, in meters.
pub fn haversine_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (phi1, phi2) = (lat1.to_radians(), lat2.to_radians());
    let dphi = (lat2 - lat1).to_radians();
    let dlambda = (lon2 - lon1).to_radians();
    let a = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().atan2((1.0 - a).sqrt())
}

/// Cluster staypoints into locations. Returns one dense location id per
/// input staypoint (ids numbered by first appearance in input order).
///
/// A staypoint is a core point when at least `min_samples` staypoints
/// (itself included) lie within `epsilon_m`. Clusters are the connected
/// components of core points; a non-core point joins the cluster of its
/// nearest core point if one is in range, and otherwise becomes a singleton
/// location of its own.
pub fn cluster_locations(
    staypoints: &[Staypoint],
    epsilon_m: f64,
    min_samples: usize,
) -> Result<Vec<u32>, DataError> {
    if epsilon_m <= 0.0 || !epsilon_m.is_finite() {
        return Err(DataError::BadClusterParams {
            msg: format!("epsilon must be positive and finite, got {epsilon_m}"),
        });
    }
    if min_samples == 0 {
        return Err(DataError::BadClusterParams {
            msg: "min_samples must be at least 1".into(),
        });
    }
    let n = staypoints.len();
    for sp in staypoints {
        if !sp.coord.lat.is_finite() || !sp.coord.lon.is_finite() {
            return Err(DataError::BadCoordinate {
                lat: sp.coord.lat,
                lon: sp.coord.lon,
            });
        }
    }
    if n == 0 {
        return Ok(Vec::new());
    }

    // Canonical point order, independent of input order. Distance ties in
    // border assignment resolve through it.
    let mut canon: Vec<usize> = (0..n).collect();
    canon.sort_by(|&a, &b| {
        let ka = (staypoints[a].coord.lat, staypoints[a].coord.lon, staypoints[a].started_at);
        let kb = (staypoints[b].coord.lat, staypoints[b].coord.lon, staypoints[b].started_at);
        ka.partial_cmp(&kb).unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut canon_rank = vec![0usize; n];
    for (rank, &i) in canon.iter().enumerate() {
        canon_rank[i] = rank;
    }

    let dist = |a: usize, b: usize| {
        haversine_m(
            staypoints[a].coord.lat,
            staypoints[a].coord.lon,
            staypoints[b].coord.lat,
            staypoints[b].coord.lon,
        )
    };

    // neighbour counts (self included) -> core points
    let mut neighbour_count = vec![1usize; n];
    let mut within: Vec<Vec<usize>> = vec![Vec::new(); n];
    for a in 0..n {
        for b in (a + 1)..n {
            if dist(a, b) <= epsilon_m {
                neighbour_count[a] += 1;
                neighbour_count[b] += 1;
                within[a].push(b);
                within[b].push(a);
            }
        }
    }
    let core: Vec<bool> = neighbour_count
        .iter()
        .map(|&c| c >= min_samples)
        .collect();

    // connected components of core points under epsilon adjacency
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for a in 0..n {
        if !core[a] {
            continue;
        }
        for &b in &within[a] {
            if core[b] {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }

    // attach each non-core point to its nearest in-range core point
    let mut attach: Vec<Option<usize>> = vec![None; n];
    for a in 0..n {
        if core[a] {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for &b in &within[a] {
            if !core[b] {
                continue;
            }
            let d = dist(a, b);
            let better = match best {
                None => true,
                Some((bd, bb)) => d < bd || (d == bd && canon_rank[b] < canon_rank[bb]),
            };
            if better {
                best = Some((d, b));
            }
        }
        attach[a] = best.map(|(_, b)| b);
    }

    // dense ids by first appearance; noise points get fresh singletons
    let mut ids = vec![u32::MAX; n];
    let mut next_id = 0u32;
    let mut root_id: std::collections::HashMap<usize, u32> = std::collections::HashMap::new();
    for i in 0..n {
        let rep = if core[i] {
            Some(find(&mut parent, i))
        } else {
            attach[i].map(|c| find(&mut parent, c))
        };
        ids[i] = match rep {
            Some(root) => *root_id.entry(root).or_insert_with(|| {
                let id = next_id;
                next_id += 1;
                id
            }),
            None => {
                let id = next_id;
                next_id += 1;
                id
            }
        };
    }
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::types::{Coord, Purpose};
    use chrono::DateTime;

    fn sp(lat: f64, lon: f64) -> Staypoint {
        Staypoint {
            user_id: "u".into(),
            coord: Coord { lat, lon },
            started_at: DateTime::parse_from_rfc3339("2023-01-02T08:00:00+00:00").unwrap(),
            finished_at: DateTime::parse_from_rfc3339("2023-01-02T09:00:00+00:00").unwrap(),
            purpose: Purpose::Home,
        }
    }

    /// Roughly `meters` north of a base latitude.
    fn north_of(lat: f64, meters: f64) -> f64 {
        lat + meters / 111_320.0
    }

    #[test]
    fn haversine_matches_known_distance() {
        // one degree of latitude is about 111.2 km
        let d = haversine_m(47.0, 8.0, 48.0, 8.0);
        assert!((d - 111_195.0).abs() < 100.0, "{d}");
        assert_eq!(haversine_m(47.0, 8.0, 47.0, 8.0), 0.0);
    }

    #[test]
    fn close_pair_shares_a_location() {
        // 5 m apart, epsilon 20 m, min_samples 2 -> one cluster
        let lat = 47.0;
        let pts = vec![sp(lat, 8.0), sp(north_of(lat, 5.0), 8.0)];
        assert!(haversine_m(lat, 8.0, north_of(lat, 5.0), 8.0) < 20.0);
        let ids = cluster_locations(&pts, 20.0, 2).unwrap();
        assert_eq!(ids[0], ids[1]);
    }

    #[test]
    fn isolated_staypoint_gets_its_own_id() {
        let lat = 47.0;
        let pts = vec![
            sp(lat, 8.0),
            sp(north_of(lat, 5.0), 8.0),
            sp(north_of(lat, 500.0), 8.0),
        ];
        let ids = cluster_locations(&pts, 20.0, 2).unwrap();
        assert_eq!(ids[0], ids[1]);
        assert_ne!(ids[2], ids[0]);
    }

    #[test]
    fn chain_clusters_through_density_reachability() {
        // three points in a 10 m chain plus one 1 km away -> {A,A,A,B}
        let lat = 47.0;
        let pts = vec![
            sp(lat, 8.0),
            sp(north_of(lat, 10.0), 8.0),
            sp(north_of(lat, 20.0), 8.0),
            sp(north_of(lat, 1000.0), 8.0),
        ];
        let ids = cluster_locations(&pts, 20.0, 2).unwrap();
        assert_eq!(ids[0], ids[1]);
        assert_eq!(ids[1], ids[2]);
        assert_ne!(ids[3], ids[0]);
    }

    #[test]
    fn rejects_non_finite_coordinates_and_bad_params() {
        let mut bad = sp(47.0, 8.0);
        bad.coord.lat = f64::NAN;
        assert!(cluster_locations(&[bad], 20.0, 2).is_err());
        assert!(cluster_locations(&[], 0.0, 2).is_err());
        assert!(cluster_locations(&[], 20.0, 0).is_err());
        assert_eq!(cluster_locations(&[], 20.0, 2).unwrap(), Vec::<u32>::new());
    }

    #[test]
    fn partition_is_invariant_under_input_permutation() {
        // pseudo-random layout with a few tight groups
        let lat = 47.0;
        let mut pts = Vec::new();
        for g in 0..4 {
            for k in 0..3 {
                pts.push(sp(north_of(lat, g as f64 * 300.0 + k as f64 * 6.0), 8.0));
            }
        }
        pts.push(sp(north_of(lat, 5000.0), 8.0));
        let ids = cluster_locations(&pts, 20.0, 2).unwrap();

        let perm: Vec<usize> = vec![12, 3, 7, 0, 9, 1, 11, 5, 2, 10, 4, 8, 6];
        let shuffled: Vec<Staypoint> = perm.iter().map(|&i| pts[i].clone()).collect();
        let ids2 = cluster_locations(&shuffled, 20.0, 2).unwrap();
        // same partition after relabeling: compare co-membership
        for a in 0..perm.len() {
            for b in 0..perm.len() {
                assert_eq!(
                    ids[perm[a]] == ids[perm[b]],
                    ids2[a] == ids2[b],
                    "pair ({a},{b})"
                );
            }
        }
    }
}
