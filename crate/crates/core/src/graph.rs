//! Weekly bi-layer heterogeneous snapshots: a fixed location layer, a
//! time-varying case layer, and spatial / genetic / assignment edges.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genetics::PartialDistanceMatrix;

/// Undirected weighted edge, stored once with `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

/// One infection case: identifier, reporting week, home location index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub id: String,
    pub week: usize,
    pub location: usize,
}

/// Ingested tables, aligned on the same contiguous week range.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetTables {
    pub location_ids: Vec<String>,
    /// N x N symmetric inter-location distances in km.
    pub distances_km: DMatrix<f64>,
    /// Absolute index of the first week.
    pub first_week: usize,
    /// Number of weeks.
    pub num_weeks: usize,
    /// W x N bird abundance per week and location.
    pub population: DMatrix<f64>,
    pub cases: Vec<CaseRecord>,
    /// Per-case feature vectors (genetic embedding, or unit features when no
    /// sequences exist). All rows share one dimension.
    pub case_features: BTreeMap<String, Vec<f64>>,
    /// Pairwise distances over all sequenced cases; saturated pairs missing.
    pub genetic: Option<PartialDistanceMatrix>,
}

/// One week of the bi-layer graph.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeteroSnapshot {
    pub week: usize,
    /// N x 2: [newly reported cases, bird abundance] per location.
    pub location_features: DMatrix<f64>,
    pub cases: Vec<CaseRecord>,
    /// M x d_gen case features, rows in `cases` order.
    pub case_features: DMatrix<f64>,
    /// Location-location edges weighted by the distance kernel.
    pub spatial_edges: Vec<Edge>,
    /// Case-case edges weighted by the genetic kernel; indices into `cases`.
    pub genetic_edges: Vec<Edge>,
}

impl HeteroSnapshot {
    pub fn num_locations(&self) -> usize {
        self.location_features.nrows()
    }

    pub fn num_cases(&self) -> usize {
        self.cases.len()
    }

    /// Binary case-to-location assignment pairs (case index, location index).
    pub fn assignment_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.cases.iter().enumerate().map(|(k, c)| (k, c.location))
    }

    /// Case indices grouped by home location.
    pub fn cases_by_location(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_locations()];
        for (k, c) in self.cases.iter().enumerate() {
            groups[c.location].push(k);
        }
        groups
    }

    /// Dense N x N spatial weight matrix (zero where no edge).
    pub fn spatial_matrix(&self) -> DMatrix<f64> {
        let n = self.num_locations();
        let mut m = DMatrix::zeros(n, n);
        for e in &self.spatial_edges {
            m[(e.a, e.b)] = e.weight;
            m[(e.b, e.a)] = e.weight;
        }
        m
    }

    /// Dense M x M genetic weight matrix (zero where no edge).
    pub fn genetic_matrix(&self) -> DMatrix<f64> {
        let m = self.num_cases();
        let mut g = DMatrix::zeros(m, m);
        for e in &self.genetic_edges {
            g[(e.a, e.b)] = e.weight;
            g[(e.b, e.a)] = e.weight;
        }
        g
    }

    /// Full (N+M) x (N+M) weighted adjacency: spatial block, genetic block,
    /// and binary assignment entries on the cross block. Locations first.
    pub fn full_adjacency(&self) -> DMatrix<f64> {
        let n = self.num_locations();
        let m = self.num_cases();
        let mut a = DMatrix::zeros(n + m, n + m);
        for e in &self.spatial_edges {
            a[(e.a, e.b)] = e.weight;
            a[(e.b, e.a)] = e.weight;
        }
        for e in &self.genetic_edges {
            a[(n + e.a, n + e.b)] = e.weight;
            a[(n + e.b, n + e.a)] = e.weight;
        }
        for (k, c) in self.cases.iter().enumerate() {
            a[(c.location, n + k)] = 1.0;
            a[(n + k, c.location)] = 1.0;
        }
        a
    }
}

/// Gaussian distance kernel exp(-D^2 / (2 sigma^2)).
pub fn spatial_weight(distance_km: f64, sigma_km: f64) -> Result<f64> {
    if distance_km < 0.0 {
        return Err(Error::Data(format!(
            "negative distance {distance_km} km"
        )));
    }
    if sigma_km <= 0.0 {
        return Err(Error::Config(format!("sigma must be positive, got {sigma_km}")));
    }
    Ok((-distance_km * distance_km / (2.0 * sigma_km * sigma_km)).exp())
}

fn check_distance_matrix(d: &DMatrix<f64>) -> Result<()> {
    let n = d.nrows();
    if d.ncols() != n {
        return Err(Error::Data(format!(
            "distance matrix must be square, got {} x {}",
            n,
            d.ncols()
        )));
    }
    for i in 0..n {
        if d[(i, i)] != 0.0 {
            return Err(Error::Data(format!(
                "distance matrix diagonal entry ({i},{i}) = {} is not zero",
                d[(i, i)]
            )));
        }
        for j in (i + 1)..n {
            if (d[(i, j)] - d[(j, i)]).abs() > 1e-9 {
                return Err(Error::Data(format!(
                    "distance matrix asymmetric at ({i},{j}): {} vs {}",
                    d[(i, j)],
                    d[(j, i)]
                )));
            }
        }
    }
    Ok(())
}

/// Kernel-weighted location edges; weights below `w_min` are dropped.
/// The floor is an efficiency cutoff bounding edge count, not a semantic
/// threshold.
pub fn build_spatial_edges(
    distances_km: &DMatrix<f64>,
    sigma_km: f64,
    w_min: f64,
) -> Result<Vec<Edge>> {
    check_distance_matrix(distances_km)?;
    let n = distances_km.nrows();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let w = spatial_weight(distances_km[(i, j)], sigma_km)?;
            if w >= w_min {
                edges.push(Edge { a: i, b: j, weight: w });
            }
        }
    }
    Ok(edges)
}

/// Kernel-weighted case edges mirrored from the spatial rule; pairs with a
/// missing (saturated) distance contribute no edge.
pub fn build_genetic_edges(
    d: &PartialDistanceMatrix,
    sigma_g: f64,
    w_min: f64,
) -> Result<Vec<Edge>> {
    if sigma_g <= 0.0 {
        return Err(Error::Config(format!(
            "genetic kernel bandwidth must be positive, got {sigma_g}"
        )));
    }
    let m = d.ids.len();
    let mut edges = Vec::new();
    for i in 0..m {
        for j in (i + 1)..m {
            if let Some(dist) = d.d[i][j] {
                let w = (-dist * dist / (2.0 * sigma_g * sigma_g)).exp();
                if w >= w_min {
                    edges.push(Edge { a: i, b: j, weight: w });
                }
            }
        }
    }
    Ok(edges)
}

/// Batch mean of present off-diagonal genetic distances; 1.0 when there
/// are none or they are all zero.
pub fn default_genetic_bandwidth(d: &PartialDistanceMatrix) -> f64 {
    let m = d.ids.len();
    let mut sum = 0.0;
    let mut cnt = 0usize;
    for i in 0..m {
        for j in (i + 1)..m {
            if let Some(v) = d.d[i][j] {
                sum += v;
                cnt += 1;
            }
        }
    }
    if cnt == 0 || sum == 0.0 {
        1.0
    } else {
        sum / cnt as f64
    }
}

/// Parameters consumed by [`build_snapshots`].
#[derive(Debug, Clone, Copy)]
pub struct SnapshotConfig {
    pub sigma_km: f64,
    pub sigma_genetic: f64,
    pub w_min: f64,
    pub include_genetic_edges: bool,
}

/// Assemble one snapshot per week from ingested tables.
pub fn build_snapshots(tables: &DatasetTables, cfg: &SnapshotConfig) -> Result<Vec<HeteroSnapshot>> {
    let n = tables.location_ids.len();
    if tables.num_weeks == 0 {
        return Err(Error::Data("dataset covers zero weeks".into()));
    }
    if tables.population.nrows() != tables.num_weeks || tables.population.ncols() != n {
        return Err(Error::Data(format!(
            "population table is {} x {}, expected {} x {n}",
            tables.population.nrows(),
            tables.population.ncols(),
            tables.num_weeks
        )));
    }
    let feat_dim = tables
        .case_features
        .values()
        .next()
        .map(|v| v.len())
        .unwrap_or(1);
    for c in &tables.cases {
        if c.location >= n {
            return Err(Error::Data(format!(
                "case {} references unknown location index {}",
                c.id, c.location
            )));
        }
        if c.week < tables.first_week || c.week >= tables.first_week + tables.num_weeks {
            return Err(Error::Data(format!(
                "case {} reported in week {} outside dataset range {}..{}",
                c.id,
                c.week,
                tables.first_week,
                tables.first_week + tables.num_weeks
            )));
        }
    }

    let spatial = build_spatial_edges(&tables.distances_km, cfg.sigma_km, cfg.w_min)?;

    let sigma_g = if cfg.sigma_genetic > 0.0 {
        cfg.sigma_genetic
    } else if let Some(g) = &tables.genetic {
        default_genetic_bandwidth(g)
    } else {
        1.0
    };

    // Index of each sequenced case inside the full genetic matrix.
    let genetic_index: BTreeMap<&str, usize> = tables
        .genetic
        .as_ref()
        .map(|g| {
            g.ids
                .iter()
                .enumerate()
                .map(|(i, id)| (id.as_str(), i))
                .collect()
        })
        .unwrap_or_default();

    let mut snapshots = Vec::with_capacity(tables.num_weeks);
    for w in 0..tables.num_weeks {
        let week = tables.first_week + w;
        let week_cases: Vec<CaseRecord> = tables
            .cases
            .iter()
            .filter(|c| c.week == week)
            .cloned()
            .collect();

        let mut case_features = DMatrix::zeros(week_cases.len(), feat_dim);
        for (k, c) in week_cases.iter().enumerate() {
            let feats = tables.case_features.get(&c.id).ok_or_else(|| {
                Error::Data(format!("case {} has no feature vector", c.id))
            })?;
            if feats.len() != feat_dim {
                return Err(Error::Data(format!(
                    "case {} feature length {} != {feat_dim}",
                    c.id,
                    feats.len()
                )));
            }
            for (j, &v) in feats.iter().enumerate() {
                case_features[(k, j)] = v;
            }
        }

        let genetic_edges = if cfg.include_genetic_edges && !genetic_index.is_empty() {
            let g = tables.genetic.as_ref().expect("genetic matrix present");
            let mut edges = Vec::new();
            for k in 0..week_cases.len() {
                let Some(&gi) = genetic_index.get(week_cases[k].id.as_str()) else {
                    continue;
                };
                for (l, wc) in week_cases.iter().enumerate().skip(k + 1) {
                    let Some(&gj) = genetic_index.get(wc.id.as_str()) else {
                        continue;
                    };
                    if let Some(dist) = g.d[gi][gj] {
                        let wgt = (-dist * dist / (2.0 * sigma_g * sigma_g)).exp();
                        if wgt >= cfg.w_min {
                            edges.push(Edge { a: k, b: l, weight: wgt });
                        }
                    }
                }
            }
            edges
        } else {
            Vec::new()
        };

        let mut location_features = DMatrix::zeros(n, 2);
        for c in &week_cases {
            location_features[(c.location, 0)] += 1.0;
        }
        for i in 0..n {
            location_features[(i, 1)] = tables.population[(w, i)];
        }

        snapshots.push(HeteroSnapshot {
            week,
            location_features,
            cases: week_cases,
            case_features,
            spatial_edges: spatial.clone(),
            genetic_edges,
        });
    }
    Ok(snapshots)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_values() {
        assert_eq!(spatial_weight(0.0, 10.0).unwrap(), 1.0);
        assert!((spatial_weight(10.0, 10.0).unwrap() - 0.606531).abs() < 1e-6);
        assert!((spatial_weight(30.0, 10.0).unwrap() - 0.011109).abs() < 1e-6);
        assert!(spatial_weight(-1.0, 10.0).is_err());
    }

    #[test]
    fn kernel_strictly_decreasing() {
        let mut prev = spatial_weight(0.0, 10.0).unwrap();
        for step in 1..40 {
            let w = spatial_weight(step as f64 * 5.0, 10.0).unwrap();
            assert!(w < prev && w > 0.0);
            prev = w;
        }
    }

    #[test]
    fn spatial_edges_zero_distance_pair() {
        let d = DMatrix::zeros(2, 2);
        let edges = build_spatial_edges(&d, 10.0, 1e-3).unwrap();
        assert_eq!(edges.len(), 1);
        assert_eq!(edges[0].weight, 1.0);
    }

    #[test]
    fn spatial_edges_cutoff_drops_far_pair() {
        // 0-1 close, 0-2 and 1-2 far beyond the 1e-3 floor (~112 km at sigma 10).
        let d = DMatrix::from_row_slice(
            3,
            3,
            &[0.0, 5.0, 200.0, 5.0, 0.0, 200.0, 200.0, 200.0, 0.0],
        );
        let edges = build_spatial_edges(&d, 10.0, 1e-3).unwrap();
        assert_eq!(edges.len(), 1);
        assert_eq!((edges[0].a, edges[0].b), (0, 1));
    }

    #[test]
    fn spatial_edges_single_location_empty() {
        let d = DMatrix::zeros(1, 1);
        assert!(build_spatial_edges(&d, 10.0, 1e-3).unwrap().is_empty());
    }

    #[test]
    fn asymmetric_distances_rejected() {
        let d = DMatrix::from_row_slice(2, 2, &[0.0, 3.0, 4.0, 0.0]);
        assert!(build_spatial_edges(&d, 10.0, 1e-3).is_err());
    }

    #[test]
    fn genetic_edges_skip_missing_pairs() {
        let pd = PartialDistanceMatrix {
            ids: vec!["a".into(), "b".into(), "c".into()],
            d: vec![
                vec![Some(0.0), Some(0.0), None],
                vec![Some(0.0), Some(0.0), Some(0.1)],
                vec![None, Some(0.1), Some(0.0)],
            ],
        };
        let edges = build_genetic_edges(&pd, 1.0, 1e-3).unwrap();
        assert_eq!(edges.len(), 2);
        assert_eq!(edges[0].weight, 1.0); // identical sequences
        assert!(build_genetic_edges(&pd, 0.0, 1e-3).is_err());
    }

    fn tiny_tables() -> DatasetTables {
        let mut case_features = BTreeMap::new();
        case_features.insert("c1".into(), vec![1.0]);
        case_features.insert("c2".into(), vec![1.0]);
        DatasetTables {
            location_ids: vec!["l0".into(), "l1".into(), "l2".into()],
            distances_km: DMatrix::from_row_slice(
                3,
                3,
                &[0.0, 10.0, 20.0, 10.0, 0.0, 10.0, 20.0, 10.0, 0.0],
            ),
            first_week: 0,
            num_weeks: 2,
            population: DMatrix::from_element(2, 3, 5.0),
            cases: vec![
                CaseRecord { id: "c1".into(), week: 1, location: 0 },
                CaseRecord { id: "c2".into(), week: 1, location: 2 },
            ],
            case_features,
            genetic: None,
        }
    }

    fn cfg() -> SnapshotConfig {
        SnapshotConfig {
            sigma_km: 10.0,
            sigma_genetic: 0.0,
            w_min: 1e-3,
            include_genetic_edges: true,
        }
    }

    #[test]
    fn snapshots_per_week_with_assignments() {
        let snaps = build_snapshots(&tiny_tables(), &cfg()).unwrap();
        assert_eq!(snaps.len(), 2);
        // Week 0: no cases but spatial edges intact.
        assert_eq!(snaps[0].num_cases(), 0);
        assert_eq!(snaps[0].spatial_edges.len(), 3);
        // Week 1: two cases, one assignment edge each.
        assert_eq!(snaps[1].assignment_edges().count(), 2);
        assert_eq!(snaps[1].location_features[(0, 0)], 1.0);
        assert_eq!(snaps[1].location_features[(1, 0)], 0.0);
        assert_eq!(snaps[1].location_features[(2, 0)], 1.0);
    }

    #[test]
    fn orphan_case_location_names_the_case() {
        let mut t = tiny_tables();
        t.cases[0].location = 9;
        let err = build_snapshots(&t, &cfg()).unwrap_err().to_string();
        assert!(err.contains("c1"), "{err}");
    }

    #[test]
    fn rebuild_is_identical() {
        let a = build_snapshots(&tiny_tables(), &cfg()).unwrap();
        let b = build_snapshots(&tiny_tables(), &cfg()).unwrap();
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }

    #[test]
    fn all_weights_in_unit_interval() {
        let snaps = build_snapshots(&tiny_tables(), &cfg()).unwrap();
        for s in &snaps {
            for e in s.spatial_edges.iter().chain(&s.genetic_edges) {
                assert!(e.weight > 0.0 && e.weight <= 1.0);
            }
        }
    }
}
