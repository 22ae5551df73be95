#![allow(dead_code)]

use chrono::{Datelike, TimeZone, Utc};
use loadanon::panel::{ProfilePanel, TimeIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn index(t: usize) -> TimeIndex {
    TimeIndex::half_hourly(Utc.with_ymd_and_hms(2013, 1, 1, 0, 0, 0).unwrap(), t).unwrap()
}

pub fn panel_from_rows(rows: &[Vec<f64>]) -> ProfilePanel {
    let ids = (0..rows.len()).map(|i| format!("s{i:03}")).collect();
    ProfilePanel::from_rows(ids, index(rows[0].len()), rows).unwrap()
}

/// Random panel; `integers` draws small integers so ties are common.
pub fn random_panel(rng: &mut ChaCha8Rng, n: usize, t: usize, integers: bool) -> ProfilePanel {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..t)
                .map(|_| {
                    if integers {
                        rng.random_range(0..4) as f64
                    } else {
                        rng.random_range(0.0..10.0)
                    }
                })
                .collect()
        })
        .collect();
    // Ids deliberately out of lexicographic order relative to rows.
    let ids = (0..n).map(|i| format!("r{:03}", (i * 37) % 1000)).collect();
    ProfilePanel::from_rows(ids, index(t), &rows).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_of(records: &[(String, Vec<f64>)], set: &[usize], t: usize) -> Vec<f64> {
    let mut m = vec![0.0; t];
    for &i in set {
        for (a, v) in m.iter_mut().zip(&records[i].1) {
            *a += v;
        }
    }
    m.iter().map(|v| v / set.len() as f64).collect()
}

/// Record of `set` farthest from `c`; ties go to the smaller id.
fn farthest(records: &[(String, Vec<f64>)], set: &[usize], c: &[f64]) -> usize {
    let mut best = set[0];
    let mut best_d = sq(&records[best].1, c);
    for &i in &set[1..] {
        let d = sq(&records[i].1, c);
        if d > best_d || (d == best_d && records[i].0 < records[best].0) {
            best = i;
            best_d = d;
        }
    }
    best
}

/// `x` and its `k - 1` nearest neighbours in `set`, removed from `set`.
fn cluster(records: &[(String, Vec<f64>)], set: &mut Vec<usize>, x: usize, k: usize) -> Vec<String> {
    let mut others: Vec<usize> = set.iter().copied().filter(|&i| i != x).collect();
    others.sort_by(|&a, &b| {
        sq(&records[a].1, &records[x].1)
            .partial_cmp(&sq(&records[b].1, &records[x].1))
            .unwrap()
            .then(records[a].0.cmp(&records[b].0))
    });
    let mut members = vec![x];
    members.extend(others.into_iter().take(k - 1));
    set.retain(|i| !members.contains(i));
    let mut ids: Vec<String> = members.iter().map(|&i| records[i].0.clone()).collect();
    ids.sort();
    ids
}

/// Direct transcription of MDAV with the canonical tail rule: two groups
/// per round while at least 3k records remain, one more if at least 2k
/// remain, the rest as the last group.
pub fn naive_mdav(panel: &ProfilePanel, k: usize) -> Vec<Vec<String>> {
    let t = panel.n_ticks();
    let records: Vec<(String, Vec<f64>)> = panel
        .ids()
        .iter()
        .cloned()
        .zip(panel.rows().map(<[f64]>::to_vec))
        .collect();
    let k = k.min(records.len());
    let mut set: Vec<usize> = (0..records.len()).collect();
    set.sort_by(|&a, &b| records[a].0.cmp(&records[b].0));
    let mut groups = Vec::new();
    while set.len() >= 3 * k {
        let c = mean_of(&records, &set, t);
        let xr = farthest(&records, &set, &c);
        groups.push(cluster(&records, &mut set, xr, k));
        let xs = farthest(&records, &set, &records[xr].1);
        groups.push(cluster(&records, &mut set, xs, k));
    }
    if set.len() >= 2 * k {
        let c = mean_of(&records, &set, t);
        let xr = farthest(&records, &set, &c);
        groups.push(cluster(&records, &mut set, xr, k));
    }
    if !set.is_empty() {
        let mut ids: Vec<String> = set.iter().map(|&i| records[i].0.clone()).collect();
        ids.sort();
        groups.push(ids);
    }
    groups
}

/// Average ranks (ties share the mean rank).
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &p in &idx[i..=j] {
            r[p] = avg;
        }
        i = j + 1;
    }
    r
}

/// Pearson correlation of the ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
#[allow(clippy::needless_range_loop)]
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for c in col..n {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|c| a[i][c] * x[c]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x
}

/// Independent construction of the lag design.
pub fn oracle_design(y: &[f64], cal: &TimeIndex) -> (Vec<Vec<f64>>, Vec<f64>, Vec<usize>) {
    let mut xs = Vec::new();
    let mut ts = Vec::new();
    let mut targets = Vec::new();
    for t in 384..y.len() {
        let mut row = vec![
            y[t - 1],
            y[t - 48],
            y[t - 336],
            y[..t].iter().sum::<f64>() / t as f64,
            y[t - 24..t].iter().sum::<f64>() / 24.0,
        ];
        let dow = cal.tick(t).weekday().num_days_from_monday() as usize;
        row.extend((0..7).map(|d| if d == dow { 1.0 } else { 0.0 }));
        xs.push(row);
        targets.push((y[t] - y[t - 48]) - (y[t - 336] - y[t - 384]));
        ts.push(t);
    }
    (xs, targets, ts)
}

/// Ridge on standardized columns via the normal equations, solved by
/// pivoted elimination. Returns predictions on the design rows.
pub fn oracle_ridge(xs: &[Vec<f64>], y: &[f64], l2: f64, eval: &[Vec<f64>]) -> Vec<f64> {
    let m = xs.len() as f64;
    let p = xs[0].len();
    let mean: Vec<f64> = (0..p).map(|j| xs.iter().map(|r| r[j]).sum::<f64>() / m).collect();
    let sd: Vec<f64> = (0..p)
        .map(|j| {
            let v = xs.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / m;
            if v > 0.0 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let ym = y.iter().sum::<f64>() / m;
    let z: Vec<Vec<f64>> = xs
        .iter()
        .map(|r| (0..p).map(|j| (r[j] - mean[j]) / sd[j]).collect())
        .collect();
    let mut a = vec![vec![0.0; p]; p];
    let mut b = vec![0.0; p];
    for (zr, yv) in z.iter().zip(y) {
        for i in 0..p {
            b[i] += zr[i] * (yv - ym);
            for j in 0..p {
                a[i][j] += zr[i] * zr[j];
            }
        }
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += l2;
    }
    let w = gauss_solve(a, b);
    eval.iter()
        .map(|r| ym + (0..p).map(|j| w[j] * (r[j] - mean[j]) / sd[j]).sum::<f64>())
        .collect()
}
