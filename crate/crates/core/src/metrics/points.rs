use crate::error::{bail_arg, Result};
use crate::synthdata::Vec3;

/// F-score thresholds reported alongside each chamfer distance.
pub const FSCORE_TAU: f64 = 0.02;
pub const FSCORE_TAU_COARSE: f64 = 0.05;

fn dist_sq(a: Vec3, b: Vec3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Uniform bucket grid over the bounding box of a cloud for exact
/// nearest-neighbour queries by expanding Chebyshev rings of cells.
struct CellIndex<'a> {
    points: &'a [Vec3],
    lo: Vec3,
    cell: f64,
    dims: [i64; 3],
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> CellIndex<'a> {
    fn new(points: &'a [Vec3]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        let per_axis = (points.len() as f64).cbrt().ceil().clamp(1.0, 128.0);
        let cell = if extent > 0.0 { extent / per_axis } else { 1.0 };
        let dims = [0, 1, 2].map(|a| (((hi[a] - lo[a]) / cell).floor() as i64 + 1).max(1));
        let mut index = Self {
            points,
            lo,
            cell,
            dims,
            starts: Vec::new(),
            order: Vec::new(),
        };
        let total = (dims[0] * dims[1] * dims[2]) as usize;
        let ids: Vec<usize> = points
            .iter()
            .map(|&p| index.flat(index.clamped(index.cell_of(p))))
            .collect();
        let mut counts = vec![0usize; total + 1];
        for &id in &ids {
            counts[id + 1] += 1;
        }
        for i in 0..total {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; points.len()];
        for (i, &id) in ids.iter().enumerate() {
            order[fill[id]] = i;
            fill[id] += 1;
        }
        index.starts = counts;
        index.order = order;
        index
    }

    fn cell_of(&self, p: Vec3) -> [i64; 3] {
        [0, 1, 2].map(|a| ((p[a] - self.lo[a]) / self.cell).floor() as i64)
    }

    fn clamped(&self, c: [i64; 3]) -> [i64; 3] {
        [0, 1, 2].map(|a| c[a].clamp(0, self.dims[a] - 1))
    }

    fn flat(&self, c: [i64; 3]) -> usize {
        ((c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]) as usize
    }

    fn scan(&self, c: [i64; 3], q: Vec3, best: &mut f64) {
        let id = self.flat(c);
        for &i in &self.order[self.starts[id]..self.starts[id + 1]] {
            *best = best.min(dist_sq(q, self.points[i]));
        }
    }

    /// Squared distance from `q` to its nearest indexed point.
    fn nearest_sq(&self, q: Vec3) -> f64 {
        let qc = self.cell_of(q);
        let max_ring = (0..3)
            .map(|a| (qc[a]).abs().max((qc[a] - (self.dims[a] - 1)).abs()))
            .max()
            .unwrap_or(0);
        let mut best = f64::INFINITY;
        for r in 0..=max_ring {
            let lo = [0, 1, 2].map(|a| (qc[a] - r).max(0));
            let hi = [0, 1, 2].map(|a| (qc[a] + r).min(self.dims[a] - 1));
            for x in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    let on_shell_xy = (x - qc[0]).abs() == r || (y - qc[1]).abs() == r;
                    if on_shell_xy {
                        for z in lo[2]..=hi[2] {
                            self.scan([x, y, z], q, &mut best);
                        }
                    } else {
                        for z in [qc[2] - r, qc[2] + r] {
                            if (lo[2]..=hi[2]).contains(&z) {
                                self.scan([x, y, z], q, &mut best);
                            }
                        }
                    }
                }
            }
            // Cells beyond ring r are at least r cell widths away.
            let reach = r as f64 * self.cell * (1.0 - 1e-9);
            if best < reach * reach {
                break;
            }
        }
        best
    }
}

/// Distance from every point of `from` to its nearest point of `to`.
pub fn nearest_distances(from: &[Vec3], to: &[Vec3]) -> Result<Vec<f64>> {
    if from.is_empty() || to.is_empty() {
        bail_arg!("nearest-neighbour query on an empty point cloud");
    }
    let index = CellIndex::new(to);
    Ok(from.iter().map(|&q| index.nearest_sq(q).sqrt()).collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Unsquared symmetric chamfer distance,
/// `0.5 * (mean_x min_y |x - y| + mean_y min_x |x - y|)`.
pub fn chamfer(x: &[Vec3], y: &[Vec3]) -> Result<f64> {
    let dx = nearest_distances(x, y)?;
    let dy = nearest_distances(y, x)?;
    Ok(chamfer_from(&dx, &dy))
}

fn chamfer_from(dx: &[f64], dy: &[f64]) -> f64 {
    // Sum the two directions in a fixed order so chamfer(X, Y) and
    // chamfer(Y, X) agree bit for bit.
    let (a, b) = (mean(dx), mean(dy));
    0.5 * (a.min(b) + a.max(b))
}

/// Harmonic mean of precision (fraction of `x` within `tau` of `y`) and
/// recall (fraction of `y` within `tau` of `x`); 0 when both vanish.
pub fn fscore(x: &[Vec3], y: &[Vec3], tau: f64) -> Result<f64> {
    let dx = nearest_distances(x, y)?;
    let dy = nearest_distances(y, x)?;
    Ok(fscore_from(&dx, &dy, tau))
}

fn fscore_from(dx: &[f64], dy: &[f64], tau: f64) -> f64 {
    let frac = |d: &[f64]| d.iter().filter(|&&v| v <= tau).count() as f64 / d.len() as f64;
    let (p, r) = (frac(dx), frac(dy));
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Chamfer distance and F-scores from one pair of nearest-neighbour passes.
pub fn cloud_metrics(x: &[Vec3], y: &[Vec3], taus: &[f64]) -> Result<(f64, Vec<f64>)> {
    let dx = nearest_distances(x, y)?;
    let dy = nearest_distances(y, x)?;
    let f = taus.iter().map(|&t| fscore_from(&dx, &dy, t)).collect();
    Ok((chamfer_from(&dx, &dy), f))
}
