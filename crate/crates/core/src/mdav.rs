//! MDAV (maximum distance to average vector) microaggregation over whole
//! series.
//!
//! Each series is one record of dimension `T`. The partition is built by
//! repeatedly taking the record farthest from the centroid of what is left,
//! then the record farthest from that one, and clustering each with its
//! `k - 1` nearest neighbours. Distances are Euclidean on raw values; ties
//! in any farthest/nearest comparison go to the lexicographically smallest
//! series id, so the result does not depend on row order or thread count.
//!
//! The kernel keeps only the list of remaining records, one centroid and one
//! distance buffer alive: extra memory is `O(N + T)` and no pairwise
//! distance matrix is ever built.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::ingest::{write_wide_columns, IngestError};
use crate::panel::{ProfilePanel, RowSource, TimeIndex};

/// Scans touching at least this many values are split across workers.
const PARALLEL_WORK: usize = 1 << 15;
/// Rows per partial sum when computing the average record.
const MEAN_CHUNK: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum MdavError {
    #[error("k must be at least 1, got {0}")]
    InvalidK(usize),
    #[error("panel has no series")]
    EmptyPanel,
    #[error("vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("series `{0}` contains a non-finite value")]
    NonFinite(String),
    #[error("assignment does not partition the panel ids: {0}")]
    IdMismatch(String),
}

/// Euclidean distance between two equal-length vectors.
pub fn distance(a: &[f64], b: &[f64]) -> Result<f64, MdavError> {
    if a.len() != b.len() {
        return Err(MdavError::LengthMismatch(a.len(), b.len()));
    }
    Ok(squared_distance(a, b).sqrt())
}

#[inline]
fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Optional transformation applied to the records before clustering.
/// Centroids are always computed from the untransformed panel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Prescale {
    #[default]
    None,
    /// Standardize every time column to zero mean and unit sample standard
    /// deviation (constant columns are only centred).
    StandardizeColumns,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MdavOptions {
    pub prescale: Prescale,
}

/// A k-anonymous partition of series ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupAssignment {
    k: usize,
    groups: Vec<Vec<String>>,
    group_of: BTreeMap<String, usize>,
    degenerate: bool,
}

impl GroupAssignment {
    /// Builds an assignment from explicit groups, validating that every id
    /// appears once.
    pub fn from_groups(k: usize, groups: Vec<Vec<String>>) -> Result<Self, MdavError> {
        let mut group_of = BTreeMap::new();
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(MdavError::IdMismatch(format!("group {g} is empty")));
            }
            for id in members {
                if group_of.insert(id.clone(), g).is_some() {
                    return Err(MdavError::IdMismatch(format!("`{id}` appears twice")));
                }
            }
        }
        let n = group_of.len();
        Ok(Self {
            k,
            groups,
            group_of,
            degenerate: k > n,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn groups(&self) -> &[Vec<String>] {
        &self.groups
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_records(&self) -> usize {
        self.group_of.len()
    }

    pub fn group_of(&self, id: &str) -> Option<usize> {
        self.group_of.get(id).copied()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    /// True when `k` exceeded the number of records and everything was put
    /// into a single group.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// `series_id,group_index`, one line per id in id order.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), IngestError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["series_id", "group_index"])?;
        for (id, g) in &self.group_of {
            w.write_record([id.as_str(), &g.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Records<'a> {
    source: &'a ProfilePanel,
    /// Row of the panel at each id rank.
    row_at: Vec<usize>,
    owned: Option<Vec<f64>>,
    t: usize,
}

impl Records<'_> {
    fn record(&self, rank: usize) -> &[f64] {
        let row = self.row_at[rank];
        match &self.owned {
            Some(v) => &v[row * self.t..(row + 1) * self.t],
            None => self.source.row(row),
        }
    }
}

fn standardize_columns(panel: &ProfilePanel) -> Vec<f64> {
    let n = panel.n_series();
    let t = panel.n_ticks();
    let mean: Vec<f64> = crate::panel::global_average_profile(panel);
    let mut var = vec![0.0; t];
    for row in panel.rows() {
        for j in 0..t {
            var[j] += (row[j] - mean[j]).powi(2);
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|v| {
            let sd = if n > 1 { (v / (n - 1) as f64).sqrt() } else { 0.0 };
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    let mut out = Vec::with_capacity(n * t);
    for row in panel.rows() {
        out.extend((0..t).map(|j| (row[j] - mean[j]) / scale[j]));
    }
    out
}

/// `(distance², rank)` with larger distance first, then smaller rank.
#[inline]
fn farther(a: (f64, usize), b: (f64, usize)) -> (f64, usize) {
    match a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal) {
        Ordering::Greater => a,
        Ordering::Less => b,
        Ordering::Equal => {
            if a.1 <= b.1 {
                a
            } else {
                b
            }
        }
    }
}

#[inline]
fn nearer_cmp(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

struct Kernel<'a> {
    records: Records<'a>,
    /// Remaining ranks, ascending.
    remaining: Vec<usize>,
    taken: Vec<bool>,
    centroid: Vec<f64>,
    scratch: Vec<(f64, usize)>,
    groups: Vec<Vec<usize>>,
}

impl Kernel<'_> {
    fn parallel(&self) -> bool {
        self.remaining.len() * self.records.t >= PARALLEL_WORK
    }

    fn update_centroid(&mut self) {
        let t = self.records.t;
        let records = &self.records;
        let partial = |chunk: &[usize]| {
            let mut acc = vec![0.0; t];
            for &r in chunk {
                for (a, v) in acc.iter_mut().zip(records.record(r)) {
                    *a += v;
                }
            }
            acc
        };
        let partials: Vec<Vec<f64>> = if self.parallel() {
            self.remaining.par_chunks(MEAN_CHUNK).map(partial).collect()
        } else {
            self.remaining.chunks(MEAN_CHUNK).map(partial).collect()
        };
        self.centroid.iter_mut().for_each(|c| *c = 0.0);
        for p in partials {
            for (c, v) in self.centroid.iter_mut().zip(p) {
                *c += v;
            }
        }
        let n = self.remaining.len() as f64;
        self.centroid.iter_mut().for_each(|c| *c /= n);
    }

    fn farthest_from(&self, center: &[f64]) -> usize {
        let records = &self.records;
        let score = |&r: &usize| (squared_distance(records.record(r), center), r);
        let best = if self.parallel() {
            self.remaining.par_iter().map(score).reduce_with(farther)
        } else {
            self.remaining.iter().map(score).reduce(farther)
        };
        best.expect("non-empty remaining set").1
    }

    /// Removes `center` and its `k - 1` nearest remaining records.
    fn take_cluster(&mut self, center: usize, k: usize) {
        let center_rec = self.records.record(center);
        let others = self.remaining.iter().copied().filter(|&r| r != center);
        self.scratch.clear();
        if self.remaining.len() * self.records.t >= PARALLEL_WORK {
            let records = &self.records;
            let others: Vec<usize> = others.collect();
            others
                .par_iter()
                .map(|&r| (squared_distance(records.record(r), center_rec), r))
                .collect_into_vec(&mut self.scratch);
        } else {
            self.scratch
                .extend(others.map(|r| (squared_distance(self.records.record(r), center_rec), r)));
        }
        let need = k - 1;
        if need > 0 && need < self.scratch.len() {
            self.scratch.select_nth_unstable_by(need - 1, nearer_cmp);
        }
        let mut members: Vec<usize> = Vec::with_capacity(k);
        members.push(center);
        members.extend(self.scratch.iter().take(need).map(|&(_, r)| r));
        self.close(members);
    }

    fn close(&mut self, members: Vec<usize>) {
        for &r in &members {
            self.taken[r] = true;
        }
        let taken = &self.taken;
        self.remaining.retain(|&r| !taken[r]);
        self.groups.push(members);
    }

    fn run(&mut self, k: usize) {
        while self.remaining.len() >= 3 * k {
            self.update_centroid();
            let xr = self.farthest_from(&self.centroid.clone());
            let xr_rec: Vec<f64> = self.records.record(xr).to_vec();
            self.take_cluster(xr, k);
            let xs = self.farthest_from(&xr_rec);
            self.take_cluster(xs, k);
        }
        if self.remaining.len() >= 2 * k {
            self.update_centroid();
            let xr = self.farthest_from(&self.centroid.clone());
            self.take_cluster(xr, k);
        }
        if !self.remaining.is_empty() {
            let rest = std::mem::take(&mut self.remaining);
            self.close(rest);
        }
    }
}

/// MDAV partition with default options.
pub fn mdav_partition(panel: &ProfilePanel, k: usize) -> Result<GroupAssignment, MdavError> {
    mdav_partition_with(panel, k, &MdavOptions::default())
}

/// Partitions the panel's series into groups of size `k..=2k-1`.
///
/// When `k` exceeds the number of series the whole panel becomes one group
/// and the assignment is flagged degenerate.
pub fn mdav_partition_with(
    panel: &ProfilePanel,
    k: usize,
    options: &MdavOptions,
) -> Result<GroupAssignment, MdavError> {
    if k == 0 {
        return Err(MdavError::InvalidK(k));
    }
    let n = panel.n_series();
    if n == 0 {
        return Err(MdavError::EmptyPanel);
    }
    for (i, row) in panel.rows().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(MdavError::NonFinite(panel.ids()[i].clone()));
        }
    }
    let mut row_at: Vec<usize> = (0..n).collect();
    row_at.sort_by(|&a, &b| panel.ids()[a].cmp(&panel.ids()[b]));
    let owned = match options.prescale {
        Prescale::None => None,
        Prescale::StandardizeColumns => Some(standardize_columns(panel)),
    };
    let t = panel.n_ticks();
    let mut kernel = Kernel {
        records: Records {
            source: panel,
            row_at,
            owned,
            t,
        },
        remaining: (0..n).collect(),
        taken: vec![false; n],
        centroid: vec![0.0; t],
        scratch: Vec::with_capacity(n),
        groups: Vec::new(),
    };
    if k > n {
        log::warn!("k = {k} exceeds the {n} available series; emitting a single group");
    }
    kernel.run(k.min(n).max(1));

    let row_at = &kernel.records.row_at;
    let groups = kernel
        .groups
        .into_iter()
        .map(|members| {
            let mut ids: Vec<String> = members.iter().map(|&r| panel.ids()[row_at[r]].clone()).collect();
            ids.sort();
            ids
        })
        .collect();
    GroupAssignment::from_groups(k, groups)
}

/// A panel where every series is replaced by the centroid of its group.
#[derive(Debug, Clone, PartialEq)]
pub struct AnonymizedPanel {
    assignment: GroupAssignment,
    ids: Vec<String>,
    index: TimeIndex,
    row_group: Vec<usize>,
    centroids: Vec<f64>,
}

impl AnonymizedPanel {
    pub fn assignment(&self) -> &GroupAssignment {
        &self.assignment
    }

    pub fn k(&self) -> usize {
        self.assignment.k
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index(&self) -> &TimeIndex {
        &self.index
    }

    pub fn n_groups(&self) -> usize {
        self.assignment.n_groups()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.assignment.sizes()
    }

    pub fn centroid(&self, g: usize) -> &[f64] {
        let t = self.index.len();
        &self.centroids[g * t..(g + 1) * t]
    }

    pub fn centroids(&self) -> impl Iterator<Item = &[f64]> {
        self.centroids.chunks_exact(self.index.len())
    }

    /// Row `i` of the expanded view: the centroid of series `i`'s group.
    pub fn expanded_row(&self, i: usize) -> &[f64] {
        self.centroid(self.row_group[i])
    }

    /// Centroids as a panel with series named `group_<index>`.
    pub fn centroid_panel(&self) -> ProfilePanel {
        let ids = (0..self.n_groups()).map(|g| format!("group_{g}")).collect();
        ProfilePanel::new(ids, self.index, self.centroids.clone()).expect("centroid shape")
    }

    /// Wide CSV of the centroid panel.
    pub fn write_centroids_csv<W: Write>(&self, out: W) -> Result<(), IngestError> {
        let names: Vec<String> = (0..self.n_groups()).map(|g| format!("group_{g}")).collect();
        write_wide_columns(&names, &self.index, |g, j| self.centroid(g)[j], out)
    }
}

impl RowSource for AnonymizedPanel {
    fn n_rows(&self) -> usize {
        self.ids.len()
    }

    fn n_cols(&self) -> usize {
        self.index.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        self.expanded_row(i)
    }
}

/// Computes group centroids for `assignment` over `panel`.
pub fn build_anonymized_panel(
    panel: &ProfilePanel,
    assignment: &GroupAssignment,
) -> Result<AnonymizedPanel, MdavError> {
    if assignment.n_records() != panel.n_series() {
        return Err(MdavError::IdMismatch(format!(
            "assignment covers {} ids, panel has {}",
            assignment.n_records(),
            panel.n_series()
        )));
    }
    let row_group: Vec<usize> = panel
        .ids()
        .iter()
        .map(|id| {
            assignment
                .group_of(id)
                .ok_or_else(|| MdavError::IdMismatch(format!("`{id}` is not assigned")))
        })
        .collect::<Result<_, _>>()?;
    let t = panel.n_ticks();
    let g_count = assignment.n_groups();
    let mut centroids = vec![0.0; g_count * t];
    for (i, row) in panel.rows().enumerate() {
        let g = row_group[i];
        for (c, v) in centroids[g * t..(g + 1) * t].iter_mut().zip(row) {
            *c += v;
        }
    }
    for (g, size) in assignment.sizes().into_iter().enumerate() {
        let size = size as f64;
        centroids[g * t..(g + 1) * t].iter_mut().for_each(|c| *c /= size);
    }
    Ok(AnonymizedPanel {
        assignment: assignment.clone(),
        ids: panel.ids().to_vec(),
        index: *panel.index(),
        row_group,
        centroids,
    })
}

/// Partition and centroid computation in one call.
pub fn anonymize(panel: &ProfilePanel, k: usize) -> Result<AnonymizedPanel, MdavError> {
    let assignment = mdav_partition(panel, k)?;
    build_anonymized_panel(panel, &assignment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::global_average_profile;
    use chrono::{TimeZone, Utc};

    fn panel(rows: &[(&str, Vec<f64>)]) -> ProfilePanel {
        let t = rows[0].1.len();
        let index = TimeIndex::half_hourly(Utc.with_ymd_and_hms(2013, 1, 1, 0, 0, 0).unwrap(), t).unwrap();
        let ids = rows.iter().map(|(id, _)| id.to_string()).collect();
        let values: Vec<Vec<f64>> = rows.iter().map(|(_, v)| v.clone()).collect();
        ProfilePanel::from_rows(ids, index, &values).unwrap()
    }

    fn names(groups: &[Vec<String>]) -> Vec<Vec<&str>> {
        groups.iter().map(|g| g.iter().map(String::as_str).collect()).collect()
    }

    #[test]
    fn distance_examples() {
        assert_eq!(distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(distance(&[1.5, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
        assert_eq!(distance(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap(), 1.0);
        assert_eq!(distance(&[1.0], &[1.0, 2.0]), Err(MdavError::LengthMismatch(1, 2)));
    }

    #[test]
    fn hand_executed_one_dimensional() {
        let p = panel(&[
            ("a", vec![1.0]),
            ("b", vec![2.0]),
            ("c", vec![9.0]),
            ("d", vec![10.0]),
            ("e", vec![20.0]),
            ("f", vec![21.0]),
        ]);
        let a = mdav_partition(&p, 2).unwrap();
        assert_eq!(names(a.groups()), [vec!["e", "f"], vec!["a", "b"], vec!["c", "d"]]);
        let anon = build_anonymized_panel(&p, &a).unwrap();
        assert_eq!(anon.centroid(0), [20.5]);
        assert_eq!(anon.centroid(1), [1.5]);
        assert_eq!(anon.centroid(2), [9.5]);
    }

    #[test]
    fn k_one_is_identity() {
        let p = panel(&[("x", vec![1.0, 4.0]), ("y", vec![2.0, 0.5]), ("z", vec![7.0, 7.0])]);
        let anon = anonymize(&p, 1).unwrap();
        assert_eq!(anon.n_groups(), 3);
        for i in 0..3 {
            assert_eq!(anon.expanded_row(i), p.row(i));
        }
    }

    #[test]
    fn k_equal_n_is_global_average() {
        let p = panel(&[("x", vec![1.0, 4.0]), ("y", vec![2.0, 0.5]), ("z", vec![7.0, 7.0])]);
        let anon = anonymize(&p, 3).unwrap();
        assert_eq!(anon.n_groups(), 1);
        assert_eq!(anon.centroid(0), global_average_profile(&p).as_slice());
        assert!(!anon.assignment().is_degenerate());
    }

    #[test]
    fn k_above_n_is_flagged() {
        let p = panel(&[("x", vec![1.0]), ("y", vec![2.0])]);
        let a = mdav_partition(&p, 5).unwrap();
        assert!(a.is_degenerate());
        assert_eq!(a.sizes(), [2]);
        assert_eq!(mdav_partition(&p, 0), Err(MdavError::InvalidK(0)));
    }

    #[test]
    fn tail_split_between_2k_and_3k() {
        // 5 records, k = 2: one cluster around the outlier, the rest together.
        let p = panel(&[
            ("a", vec![0.0]),
            ("b", vec![1.0]),
            ("c", vec![2.0]),
            ("d", vec![3.0]),
            ("e", vec![100.0]),
        ]);
        let a = mdav_partition(&p, 2).unwrap();
        assert_eq!(names(a.groups()), [vec!["d", "e"], vec!["a", "b", "c"]]);
    }

    #[test]
    fn ties_go_to_smallest_id() {
        let p = panel(&[("d", vec![0.0]), ("c", vec![0.0]), ("b", vec![0.0]), ("a", vec![0.0])]);
        let a = mdav_partition(&p, 2).unwrap();
        assert_eq!(names(a.groups()), [vec!["a", "b"], vec!["c", "d"]]);
    }

    #[test]
    fn anonymized_mean_identity() {
        let p = panel(&[("a", vec![1.0, 2.0]), ("b", vec![3.0, 4.0])]);
        let a = GroupAssignment::from_groups(2, vec![vec!["a".into(), "b".into()]]).unwrap();
        let anon = build_anonymized_panel(&p, &a).unwrap();
        assert_eq!(anon.centroid(0), [2.0, 3.0]);
        assert_eq!(anon.expanded_row(0), [2.0, 3.0]);
        assert_eq!(anon.expanded_row(1), [2.0, 3.0]);

        let wrong = GroupAssignment::from_groups(2, vec![vec!["a".into(), "c".into()]]).unwrap();
        assert!(matches!(
            build_anonymized_panel(&p, &wrong),
            Err(MdavError::IdMismatch(_))
        ));
    }

    #[test]
    fn standardized_prescale_still_partitions() {
        let p = panel(&[
            ("a", vec![1.0, 100.0]),
            ("b", vec![2.0, 300.0]),
            ("c", vec![9.0, 100.0]),
            ("d", vec![10.0, 300.0]),
        ]);
        let opts = MdavOptions {
            prescale: Prescale::StandardizeColumns,
        };
        let a = mdav_partition_with(&p, 2, &opts).unwrap();
        assert_eq!(a.sizes(), [2, 2]);
        let raw = mdav_partition(&p, 2).unwrap();
        assert_eq!(names(raw.groups()), [vec!["a", "c"], vec!["b", "d"]]);
    }

    #[test]
    fn assignment_csv() {
        let p = panel(&[("b", vec![1.0]), ("a", vec![2.0])]);
        let a = mdav_partition(&p, 1).unwrap();
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("series_id,group_index\na,"));
    }
}
