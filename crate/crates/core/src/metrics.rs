//! Point-set metrics: Chamfer distance, unidirectional Hausdorff distance,
//! total mutual distance and minimal matching distance.
//!
//! Chamfer distance here is the halved symmetric mean of Euclidean
//! nearest-neighbour distances. Absolute values depend on that convention.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub type Point = [f64; 3];

fn dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Exact nearest-neighbour queries over a uniform bucket grid.
#[derive(Debug, Clone)]
pub struct NearestIndex {
    points: Vec<Point>,
    min: Point,
    cell: f64,
    dims: [i64; 3],
    /// CSR layout: bucket `b` holds `order[start[b]..start[b + 1]]`.
    start: Vec<usize>,
    order: Vec<usize>,
}

impl NearestIndex {
    pub fn new(points: &[Point]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::DomainError("non-finite point".into()));
        }
        let mut min = points[0];
        let mut max = points[0];
        for p in points {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        let extent = (0..3).map(|a| max[a] - min[a]).fold(0.0, f64::max);
        let per_axis = (points.len() as f64).cbrt().ceil().max(1.0);
        let cell = if extent > 0.0 { extent / per_axis } else { 1.0 };
        let mut dims = [1i64; 3];
        for a in 0..3 {
            dims[a] = (((max[a] - min[a]) / cell).floor() as i64 + 1).max(1);
        }
        let mut index = NearestIndex {
            points: points.to_vec(),
            min,
            cell,
            dims,
            start: Vec::new(),
            order: Vec::new(),
        };
        let n_buckets = (dims[0] * dims[1] * dims[2]) as usize;
        let keys: Vec<usize> = points.iter().map(|p| index.bucket(index.cell_of(p))).collect();
        let mut count = vec![0usize; n_buckets + 1];
        for &k in &keys {
            count[k + 1] += 1;
        }
        for b in 0..n_buckets {
            count[b + 1] += count[b];
        }
        let mut fill = count.clone();
        let mut order = vec![0usize; points.len()];
        for (n, &k) in keys.iter().enumerate() {
            order[fill[k]] = n;
            fill[k] += 1;
        }
        index.start = count;
        index.order = order;
        Ok(index)
    }

    fn cell_of(&self, p: &Point) -> [i64; 3] {
        let mut c = [0i64; 3];
        for a in 0..3 {
            let v = ((p[a] - self.min[a]) / self.cell).floor();
            c[a] = (v as i64).clamp(0, self.dims[a] - 1);
        }
        c
    }

    fn bucket(&self, c: [i64; 3]) -> usize {
        ((c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]) as usize
    }

    /// Distance from `q` to its nearest indexed point.
    pub fn nearest(&self, q: &Point) -> f64 {
        let c = self.cell_of(q);
        let max_ring = self.dims.iter().copied().max().unwrap();
        let mut best = f64::INFINITY;
        for ring in 0..=max_ring {
            let lo = [c[0] - ring, c[1] - ring, c[2] - ring];
            let hi = [c[0] + ring, c[1] + ring, c[2] + ring];
            for i in lo[0].max(0)..=hi[0].min(self.dims[0] - 1) {
                for j in lo[1].max(0)..=hi[1].min(self.dims[1] - 1) {
                    let on_shell_ij = i == lo[0] || i == hi[0] || j == lo[1] || j == hi[1];
                    let mut k = lo[2].max(0);
                    let k_end = hi[2].min(self.dims[2] - 1);
                    while k <= k_end {
                        let b = self.bucket([i, j, k]);
                        for &n in &self.order[self.start[b]..self.start[b + 1]] {
                            let d = dist(q, &self.points[n]);
                            if d < best {
                                best = d;
                            }
                        }
                        // Interior of the shell was visited by earlier rings.
                        if on_shell_ij || k == hi[2] {
                            k += 1;
                        } else {
                            k = hi[2];
                        }
                    }
                }
            }
            if best <= ring as f64 * self.cell {
                break;
            }
        }
        best
    }
}

/// For every point of `from`, the distance to its nearest point of `to`.
pub fn nearest_distances(from: &[Point], to: &[Point]) -> Result<Vec<f64>> {
    if from.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let index = NearestIndex::new(to)?;
    Ok(from.iter().map(|p| index.nearest(p)).collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// ½ (mean_a min_b ||p - q|| + mean_b min_a ||p - q||).
pub fn chamfer(a: &[Point], b: &[Point]) -> Result<f64> {
    let ab = mean(&nearest_distances(a, b)?);
    let ba = mean(&nearest_distances(b, a)?);
    Ok(0.5 * (ab + ba))
}

/// max over the partial input of the distance to the completion.
pub fn uhd(partial: &[Point], completion: &[Point]) -> Result<f64> {
    Ok(nearest_distances(partial, completion)?
        .into_iter()
        .fold(0.0, f64::max))
}

/// Mean Chamfer distance over unordered pairs of completions.
pub fn tmd(completions: &[Vec<Point>]) -> Result<f64> {
    if completions.len() < 2 {
        return Err(Error::NeedTwo);
    }
    let mut acc = 0.0;
    let mut pairs = 0usize;
    for i in 0..completions.len() {
        for j in i + 1..completions.len() {
            acc += chamfer(&completions[i], &completions[j])?;
            pairs += 1;
        }
    }
    Ok(acc / pairs as f64)
}

/// Mean over inputs of the best Chamfer distance between that input's
/// completions and its ground truth.
pub fn mmd(completions: &[Vec<Vec<Point>>], ground_truth: &[Vec<Point>]) -> Result<f64> {
    if completions.len() != ground_truth.len() || completions.is_empty() {
        return Err(Error::Misaligned(format!(
            "{} completion sets for {} ground-truth clouds",
            completions.len(),
            ground_truth.len()
        )));
    }
    let mut acc = 0.0;
    for (set, gt) in completions.iter().zip(ground_truth) {
        acc += min_chamfer(set, gt)?;
    }
    Ok(acc / completions.len() as f64)
}

fn min_chamfer(set: &[Vec<Point>], gt: &[Point]) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Misaligned("input without completions".into()));
    }
    let mut best = f64::INFINITY;
    for c in set {
        best = best.min(chamfer(c, gt)?);
    }
    Ok(best)
}

/// One line of the evaluation report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub input_id: String,
    pub min_cd: f64,
    pub avg_cd: f64,
    /// Zero when fewer than two completions exist.
    pub tmd: f64,
    /// Mean over completions of uhd(partial, completion).
    pub uhd: f64,
    /// min_cd, the input's contribution to MMD.
    pub mmd_component: f64,
}

pub fn report_row(
    input_id: &str,
    partial: &[Point],
    completions: &[Vec<Point>],
    ground_truth: &[Point],
) -> Result<ReportRow> {
    if completions.is_empty() {
        return Err(Error::Misaligned(format!("input {input_id} has no completions")));
    }
    let cds: Vec<f64> = completions
        .iter()
        .map(|c| chamfer(c, ground_truth))
        .collect::<Result<_>>()?;
    let min_cd = cds.iter().copied().fold(f64::INFINITY, f64::min);
    let tmd = if completions.len() < 2 { 0.0 } else { tmd(completions)? };
    let uhds: Vec<f64> = completions
        .iter()
        .map(|c| uhd(partial, c))
        .collect::<Result<_>>()?;
    Ok(ReportRow {
        input_id: input_id.to_string(),
        min_cd,
        avg_cd: mean(&cds),
        tmd,
        uhd: mean(&uhds),
        mmd_component: min_cd,
    })
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut body = String::from("input_id,min_cd,avg_cd,tmd,uhd,mmd_component\n");
    for r in rows {
        body.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.input_id, r.min_cd, r.avg_cd, r.tmd, r.uhd, r.mmd_component
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<Point> {
        (0..n)
            .map(|_| [0; 3].map(|_| r.random_range(-scale..scale)))
            .collect()
    }

    fn brute_nearest(q: &Point, to: &[Point]) -> f64 {
        to.iter().map(|p| dist(q, p)).fold(f64::INFINITY, f64::min)
    }

    fn brute_chamfer(a: &[Point], b: &[Point]) -> f64 {
        let ab: f64 = a.iter().map(|p| brute_nearest(p, b)).sum::<f64>() / a.len() as f64;
        let ba: f64 = b.iter().map(|p| brute_nearest(p, a)).sum::<f64>() / b.len() as f64;
        0.5 * (ab + ba)
    }

    #[test]
    fn nearest_index_matches_brute_force() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for (n, scale) in [(1, 1.0), (7, 0.01), (300, 1.0), (500, 5.0)] {
            let pts = cloud(&mut r, n, scale);
            let idx = NearestIndex::new(&pts).unwrap();
            for q in cloud(&mut r, 200, 2.0 * scale) {
                assert_eq!(idx.nearest(&q), brute_nearest(&q, &pts));
            }
        }
        // Degenerate: all points on a line and duplicated.
        let line: Vec<Point> = (0..50).map(|i| [i as f64 * 0.1, 0.0, 0.0]).chain([[0.0; 3]; 5]).collect();
        let idx = NearestIndex::new(&line).unwrap();
        for q in cloud(&mut r, 50, 3.0) {
            assert_eq!(idx.nearest(&q), brute_nearest(&q, &line));
        }
    }

    #[test]
    fn chamfer_cases() {
        let a = vec![[0.0, 0.0, 0.0]];
        let b = vec![[1.0, 0.0, 0.0]];
        assert_eq!(chamfer(&a, &b).unwrap(), 1.0);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let c = cloud(&mut r, 100, 1.0);
        let d = cloud(&mut r, 80, 1.0);
        assert_eq!(chamfer(&c, &c).unwrap(), 0.0);
        assert!((chamfer(&c, &d).unwrap() - brute_chamfer(&c, &d)).abs() < 1e-12);
        assert_eq!(chamfer(&c, &d).unwrap(), chamfer(&d, &c).unwrap());
        assert!(matches!(chamfer(&[], &d), Err(Error::EmptyCloud)));
        assert!(matches!(chamfer(&c, &[]), Err(Error::EmptyCloud)));
    }

    #[test]
    fn uhd_cases() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let full = cloud(&mut r, 120, 1.0);
        assert_eq!(uhd(&full[..40], &full).unwrap(), 0.0);
        assert_eq!(uhd(&[[0.0; 3]], &[[0.0, 3.0, 4.0]]).unwrap(), 5.0);
        let other = cloud(&mut r, 60, 1.0);
        let brute = full.iter().map(|p| brute_nearest(p, &other)).fold(0.0, f64::max);
        let u = uhd(&full, &other).unwrap();
        assert!((u - brute).abs() < 1e-12);
        let directed = mean(&nearest_distances(&full, &other).unwrap());
        assert!(u >= directed);
    }

    #[test]
    fn tmd_and_mmd_cases() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let a = cloud(&mut r, 50, 1.0);
        let b = cloud(&mut r, 50, 1.0);
        let c = cloud(&mut r, 50, 1.0);
        assert_eq!(tmd(&[a.clone(), a.clone(), a.clone()]).unwrap(), 0.0);
        assert_eq!(tmd(&[a.clone(), b.clone()]).unwrap(), chamfer(&a, &b).unwrap());
        let t1 = tmd(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let t2 = tmd(&[c.clone(), a.clone(), b.clone()]).unwrap();
        assert!((t1 - t2).abs() < 1e-12);
        assert!(matches!(tmd(&[a.clone()]), Err(Error::NeedTwo)));

        assert_eq!(mmd(&[vec![b.clone(), a.clone()]], &[a.clone()]).unwrap(), 0.0);
        let single = mmd(&[vec![a.clone()], vec![b.clone()]], &[c.clone(), c.clone()]).unwrap();
        let want = 0.5 * (chamfer(&a, &c).unwrap() + chamfer(&b, &c).unwrap());
        assert!((single - want).abs() < 1e-12);
        assert!(matches!(mmd(&[vec![a.clone()]], &[]), Err(Error::Misaligned(_))));
    }

    #[test]
    fn report_rows() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let gt = cloud(&mut r, 60, 1.0);
        let partial = gt[..20].to_vec();
        let one = report_row("s0", &partial, &[gt.clone()], &gt).unwrap();
        assert_eq!((one.min_cd, one.tmd, one.uhd), (0.0, 0.0, 0.0));
        let comps = vec![cloud(&mut r, 40, 1.0), cloud(&mut r, 40, 1.0)];
        let row = report_row("s1", &partial, &comps, &gt).unwrap();
        assert!(row.min_cd <= row.avg_cd && row.tmd > 0.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_report(&p, &[one, row]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("input_id,min_cd,avg_cd,tmd,uhd,mmd_component\n"));
    }
}
