//! Pillar encoder: buckets a LiDAR point cloud into vertical pillars over a
//! BEV grid, augments each point to a 9-feature vector, projects and
//! max-aggregates per pillar, and scatters the result into a dense
//! (1, C0, H, W) feature map.

use crate::error::{Error, Result};
use crate::ops;
use crate::real::Real;
use crate::tensor::{Dims4, Tensor4};
use std::collections::HashMap;

/// Per-point augmented feature count: x, y, z, intensity, offsets to the
/// pillar point centroid (3) and to the pillar center (2).
pub const POINT_FEATURES: usize = 9;

/// Unstructured N x 4 point cloud: x, y, z in meters, intensity in [0, 1].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 4]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// BEV grid geometry. Ranges are half-open: a point belongs to the grid
/// when min <= coordinate < max on every axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub pillar_dx: f64,
    pub pillar_dy: f64,
    pub max_points_per_pillar: usize,
    pub max_pillars: usize,
}

impl GridSpec {
    fn cells(span: f64, step: f64, axis: &str) -> Result<usize> {
        if span <= 0.0 || step <= 0.0 {
            return Err(Error::Config(format!("empty {axis} range or non-positive pillar step")));
        }
        let f = span / step;
        let n = f.round();
        if (f - n).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "{axis} span {span} is not an integer multiple of pillar step {step}"
            )));
        }
        Ok(n as usize)
    }

    /// Grid width in cells (x axis).
    pub fn width(&self) -> Result<usize> {
        Self::cells(self.x_range.1 - self.x_range.0, self.pillar_dx, "x")
    }

    /// Grid height in cells (y axis).
    pub fn height(&self) -> Result<usize> {
        Self::cells(self.y_range.1 - self.y_range.0, self.pillar_dy, "y")
    }

    pub fn validate(&self) -> Result<()> {
        self.width()?;
        self.height()?;
        if self.z_range.1 <= self.z_range.0 {
            return Err(Error::Config("empty z range".into()));
        }
        if self.max_points_per_pillar == 0 || self.max_pillars == 0 {
            return Err(Error::Config("pillar capacities must be >= 1".into()));
        }
        Ok(())
    }

    /// World-space center of cell (row, col).
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_range.0 + (col as f64 + 0.5) * self.pillar_dx,
            self.y_range.0 + (row as f64 + 0.5) * self.pillar_dy,
        )
    }

    fn contains(&self, p: &[f32; 4]) -> bool {
        let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
        x >= self.x_range.0
            && x < self.x_range.1
            && y >= self.y_range.0
            && y < self.y_range.1
            && z >= self.z_range.0
            && z < self.z_range.1
    }
}

/// Dense pillar batch: `features` has dims (P, 9, 1, max_points_per_pillar)
/// with zero padding beyond each pillar's count, so the per-point projection
/// runs as an ordinary channel op.
#[derive(Clone, Debug)]
pub struct PillarBatch<T> {
    pub features: Tensor4<T>,
    pub coords: Vec<(usize, usize)>,
    pub counts: Vec<usize>,
}

impl<T: Real> PillarBatch<T> {
    pub fn num_pillars(&self) -> usize {
        self.coords.len()
    }
}

/// Bucket points into pillars and build augmented per-point features.
///
/// Points outside the grid ranges are dropped. Each pillar keeps at most
/// `max_points_per_pillar` points in input order. If more than
/// `max_pillars` cells are occupied, the densest pillars win (ties by
/// first-seen order) and survivors keep first-seen order.
pub fn pillarize<T: Real>(pc: &PointCloud, grid: &GridSpec) -> Result<PillarBatch<T>> {
    grid.validate()?;
    let w = grid.width()?;
    let h = grid.height()?;

    let mut index: HashMap<(usize, usize), usize> = HashMap::new();
    let mut pillars: Vec<Vec<[f32; 4]>> = Vec::new();
    let mut cells: Vec<(usize, usize)> = Vec::new();
    for p in &pc.points {
        if !grid.contains(p) {
            continue;
        }
        let col = ((p[0] as f64 - grid.x_range.0) / grid.pillar_dx) as usize;
        let row = ((p[1] as f64 - grid.y_range.0) / grid.pillar_dy) as usize;
        let (row, col) = (row.min(h - 1), col.min(w - 1));
        let slot = *index.entry((row, col)).or_insert_with(|| {
            pillars.push(Vec::new());
            cells.push((row, col));
            pillars.len() - 1
        });
        if pillars[slot].len() < grid.max_points_per_pillar {
            pillars[slot].push(*p);
        }
    }

    let mut keep: Vec<usize> = (0..pillars.len()).collect();
    if pillars.len() > grid.max_pillars {
        // Stable sort by descending count keeps first-seen order among ties.
        keep.sort_by(|&a, &b| pillars[b].len().cmp(&pillars[a].len()));
        keep.truncate(grid.max_pillars);
        keep.sort_unstable();
    }

    let p_count = keep.len();
    let dims = Dims4::new(p_count, POINT_FEATURES, 1, grid.max_points_per_pillar);
    let mut features = Tensor4::zeros(dims);
    let mut coords = Vec::with_capacity(p_count);
    let mut counts = Vec::with_capacity(p_count);
    for (pi, &slot) in keep.iter().enumerate() {
        let pts = &pillars[slot];
        let (row, col) = cells[slot];
        coords.push((row, col));
        counts.push(pts.len());
        let nf = pts.len() as f64;
        let cx = pts.iter().map(|p| p[0] as f64).sum::<f64>() / nf;
        let cy = pts.iter().map(|p| p[1] as f64).sum::<f64>() / nf;
        let cz = pts.iter().map(|p| p[2] as f64).sum::<f64>() / nf;
        let (px, py) = grid.cell_center(row, col);
        for (k, p) in pts.iter().enumerate() {
            let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
            let feat = [
                x,
                y,
                z,
                p[3] as f64,
                x - cx,
                y - cy,
                z - cz,
                x - px,
                y - py,
            ];
            for (fi, &fv) in feat.iter().enumerate() {
                features.set(pi, fi, 0, k, T::from_f64(fv));
            }
        }
    }
    Ok(PillarBatch {
        features,
        coords,
        counts,
    })
}

/// Max over the point axis restricted to each pillar's real points.
/// Input (P, C, 1, N) with counts[p] >= 1; output (P, C, 1, 1).
pub fn masked_max_points<T: Real>(x: &Tensor4<T>, counts: &[usize]) -> Result<Tensor4<T>> {
    let d = x.dims();
    if counts.len() != d.n {
        return Err(Error::LengthMismatch {
            expected: d.n,
            actual: counts.len(),
        });
    }
    let mut out = Tensor4::zeros(Dims4::new(d.n, d.c, 1, 1));
    for p in 0..d.n {
        let n = counts[p];
        if n == 0 || n > d.w {
            return Err(Error::InvalidSpec(format!(
                "pillar {p} has invalid point count {n} (capacity {})",
                d.w
            )));
        }
        for c in 0..d.c {
            let row = x.row(p, c, 0);
            let mut best = row[0];
            for &v in &row[1..n] {
                if v > best {
                    best = v;
                }
            }
            out.set(p, c, 0, 0, best);
        }
    }
    Ok(out)
}

/// Backward of [`masked_max_points`]: the gradient flows to the first
/// maximal element among each pillar's real points.
pub fn masked_max_points_backward<T: Real>(
    x: &Tensor4<T>,
    counts: &[usize],
    dout: &Tensor4<T>,
) -> Tensor4<T> {
    let d = x.dims();
    let mut dx = Tensor4::zeros(d);
    for p in 0..d.n {
        let n = counts[p];
        for c in 0..d.c {
            let row = x.row(p, c, 0);
            let mut arg = 0;
            for (k, &v) in row[..n].iter().enumerate() {
                if v > row[arg] {
                    arg = k;
                }
            }
            dx.set(p, c, 0, arg, dout.get(p, c, 0, 0));
        }
    }
    dx
}

/// Per-pillar encoder: per-point linear (9 -> C0) + ReLU, then masked max
/// over each pillar's real points. Returns (P, C0, 1, 1).
pub fn pfn_forward<T: Real>(
    batch: &PillarBatch<T>,
    weight: &Tensor4<T>,
    bias: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let projected = ops::linear(&batch.features, weight, bias)?;
    let activated = ops::relu(&projected);
    masked_max_points(&activated, &batch.counts)
}

/// Place pillar features into their grid cells; all other cells stay zero.
pub fn scatter_to_bev<T: Real>(
    feats: &Tensor4<T>,
    coords: &[(usize, usize)],
    grid_h: usize,
    grid_w: usize,
) -> Result<Tensor4<T>> {
    let d = feats.dims();
    if coords.len() != d.n {
        return Err(Error::LengthMismatch {
            expected: d.n,
            actual: coords.len(),
        });
    }
    let mut seen = vec![false; grid_h * grid_w];
    for (p, &(row, col)) in coords.iter().enumerate() {
        if row >= grid_h || col >= grid_w {
            return Err(Error::InvalidSpec(format!(
                "pillar {p} coordinate ({row}, {col}) outside {grid_h}x{grid_w} grid"
            )));
        }
        if seen[row * grid_w + col] {
            return Err(Error::InvalidSpec(format!(
                "duplicate pillar coordinate ({row}, {col})"
            )));
        }
        seen[row * grid_w + col] = true;
    }
    let mut out = Tensor4::zeros(Dims4::new(1, d.c, grid_h, grid_w));
    let od = out.dims();
    for (p, &(row, col)) in coords.iter().enumerate() {
        for c in 0..d.c {
            let v = feats.get(p, c, 0, 0);
            out.data_mut()[od.index(0, c, row, col)] = v;
        }
    }
    Ok(out)
}

/// Backward of [`scatter_to_bev`]: gather the map gradient at each pillar cell.
pub fn scatter_to_bev_backward<T: Real>(
    feat_dims: Dims4,
    coords: &[(usize, usize)],
    dout: &Tensor4<T>,
) -> Tensor4<T> {
    let mut dx = Tensor4::zeros(feat_dims);
    for (p, &(row, col)) in coords.iter().enumerate() {
        for c in 0..feat_dims.c {
            dx.set(p, c, 0, 0, dout.get(0, c, row, col));
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};

    fn small_grid() -> GridSpec {
        GridSpec {
            x_range: (0.0, 8.0),
            y_range: (0.0, 4.0),
            z_range: (-3.0, 1.0),
            pillar_dx: 1.0,
            pillar_dy: 1.0,
            max_points_per_pillar: 8,
            max_pillars: 16,
        }
    }

    #[test]
    fn single_point_at_cell_center() {
        let grid = small_grid();
        let pc = PointCloud {
            points: vec![[2.5, 1.5, -1.0, 0.7]],
        };
        let batch = pillarize::<f64>(&pc, &grid).unwrap();
        assert_eq!(batch.num_pillars(), 1);
        assert_eq!(batch.coords[0], (1, 2));
        assert_eq!(batch.counts[0], 1);
        let f: Vec<f64> = (0..9).map(|fi| batch.features.get(0, fi, 0, 0)).collect();
        assert_eq!(&f[..4], &[2.5, 1.5, -1.0, 0.7f32 as f64]);
        for &offset in &f[4..] {
            assert!(offset.abs() < 1e-12);
        }
    }

    #[test]
    fn empty_cloud() {
        let batch = pillarize::<f64>(&PointCloud::default(), &small_grid()).unwrap();
        assert_eq!(batch.num_pillars(), 0);
        let empty = Tensor4::<f64>::zeros(Dims4::new(0, 5, 1, 1));
        let map = scatter_to_bev(&empty, &[], 4, 8).unwrap();
        assert!(map.data().iter().all(|&v| v == 0.0));
        assert_eq!(map.dims(), Dims4::new(1, 5, 4, 8));
    }

    #[test]
    fn two_point_offsets() {
        let grid = small_grid();
        // Pillar center of cell (0, 2) is (2.5, 0.5).
        let pc = PointCloud {
            points: vec![[2.4, 0.5, -1.0, 0.0], [2.6, 0.5, -1.0, 0.0]],
        };
        let batch = pillarize::<f64>(&pc, &grid).unwrap();
        assert_eq!(batch.num_pillars(), 1);
        assert_eq!(batch.counts[0], 2);
        for (k, sign) in [(0usize, -1.0f64), (1, 1.0)] {
            let dx_centroid = batch.features.get(0, 4, 0, k);
            let dx_center = batch.features.get(0, 7, 0, k);
            assert!((dx_centroid - sign * 0.1).abs() < 1e-6, "{dx_centroid}");
            assert!((dx_center - sign * 0.1).abs() < 1e-6, "{dx_center}");
        }
    }

    #[test]
    fn out_of_range_points_dropped_inside_kept() {
        let grid = small_grid();
        let pc = PointCloud {
            points: vec![
                [9.0, 1.0, 0.0, 0.0],   // x out
                [1.0, -0.5, 0.0, 0.0],  // y out
                [1.0, 1.0, 2.0, 0.0],   // z out
                [1.0, 1.0, 0.0, 0.0],   // in
            ],
        };
        let batch = pillarize::<f64>(&pc, &grid).unwrap();
        assert_eq!(batch.num_pillars(), 1);
        assert_eq!(batch.counts[0], 1);
    }

    fn random_pfn(rng: &mut StdRng, c0: usize) -> (Tensor4<f64>, Tensor4<f64>) {
        let w = Tensor4::from_vec(
            Dims4::new(c0, POINT_FEATURES, 1, 1),
            (0..c0 * POINT_FEATURES).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let b = Tensor4::from_vec(
            Dims4::new(c0, 1, 1, 1),
            (0..c0).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        )
        .unwrap();
        (w, b)
    }

    #[test]
    fn pfn_single_and_duplicate_point() {
        let grid = small_grid();
        let mut rng = StdRng::seed_from_u64(2);
        let (w, b) = random_pfn(&mut rng, 6);
        let single = PointCloud {
            points: vec![[3.3, 2.2, -0.5, 0.9]],
        };
        let twice = PointCloud {
            points: vec![[3.3, 2.2, -0.5, 0.9], [3.3, 2.2, -0.5, 0.9]],
        };
        let b1 = pillarize::<f64>(&single, &grid).unwrap();
        let b2 = pillarize::<f64>(&twice, &grid).unwrap();
        let f1 = pfn_forward(&b1, &w, &b).unwrap();
        let f2 = pfn_forward(&b2, &w, &b).unwrap();
        assert_eq!(f1.data(), f2.data());
    }

    #[test]
    fn pfn_matches_bruteforce_max() {
        let grid = small_grid();
        let mut rng = StdRng::seed_from_u64(3);
        let (w, b) = random_pfn(&mut rng, 5);
        let points: Vec<[f32; 4]> = (0..5)
            .map(|_| {
                [
                    rng.gen_range(3.0..4.0),
                    rng.gen_range(2.0..3.0),
                    rng.gen_range(-2.0..0.0),
                    rng.gen_range(0.0..1.0),
                ]
            })
            .collect();
        let batch = pillarize::<f64>(&PointCloud { points }, &grid).unwrap();
        assert_eq!(batch.num_pillars(), 1);
        let out = pfn_forward(&batch, &w, &b).unwrap();

        // Brute force: project each point separately, relu, take max.
        for c in 0..5 {
            let mut best = f64::NEG_INFINITY;
            for k in 0..batch.counts[0] {
                let mut acc = b.data()[c];
                for fi in 0..POINT_FEATURES {
                    acc += w.get(c, fi, 0, 0) * batch.features.get(0, fi, 0, k);
                }
                best = best.max(acc.max(0.0));
            }
            assert!((out.get(0, c, 0, 0) - best).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_count_pillar_rejected() {
        let x = Tensor4::<f64>::zeros(Dims4::new(1, 3, 1, 4));
        assert!(masked_max_points(&x, &[0]).is_err());
    }

    #[test]
    fn scatter_basics() {
        let mut feats = Tensor4::<f64>::zeros(Dims4::new(1, 4, 1, 1));
        feats.set(0, 2, 0, 0, 5.0);
        let map = scatter_to_bev(&feats, &[(2, 3)], 4, 8).unwrap();
        assert_eq!(map.dims(), Dims4::new(1, 4, 4, 8));
        let nonzero: Vec<usize> = map
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(nonzero, vec![map.dims().index(0, 2, 2, 3)]);
        assert_eq!(ops::sum_all(&map), ops::sum_all(&feats));

        assert!(scatter_to_bev(&feats, &[(4, 0)], 4, 8).is_err());
    }

    #[test]
    fn permutation_invariance_without_truncation() {
        // Capacities high enough that neither per-pillar truncation nor
        // pillar dropping can occur; the property holds only then.
        let mut grid = small_grid();
        grid.max_pillars = 64;
        let mut rng = StdRng::seed_from_u64(11);
        let (w, b) = random_pfn(&mut rng, 4);
        let mut points: Vec<[f32; 4]> = (0..30)
            .map(|_| {
                [
                    rng.gen_range(0.0..8.0),
                    rng.gen_range(0.0..4.0),
                    rng.gen_range(-2.0..0.5),
                    rng.gen_range(0.0..1.0),
                ]
            })
            .collect();
        let b1 = pillarize::<f64>(&PointCloud { points: points.clone() }, &grid).unwrap();
        assert!(b1.counts.iter().all(|&c| c < grid.max_points_per_pillar));
        let f1 = pfn_forward(&b1, &w, &b).unwrap();
        let m1 = scatter_to_bev(&f1, &b1.coords, 4, 8).unwrap();

        // A cloud entirely inside the ranges loses no points.
        assert_eq!(b1.counts.iter().sum::<usize>(), points.len());

        points.shuffle(&mut rng);
        let b2 = pillarize::<f64>(&PointCloud { points }, &grid).unwrap();
        let f2 = pfn_forward(&b2, &w, &b).unwrap();
        let m2 = scatter_to_bev(&f2, &b2.coords, 4, 8).unwrap();

        // Pillar order may differ; the scattered map must not.
        for (a, e) in m1.data().iter().zip(m2.data()) {
            assert!((a - e).abs() < 1e-9);
        }

        // Sparsity: at most one nonzero cell per pillar.
        let mut nonzero_cells = 0;
        for i in 0..4 {
            for j in 0..8 {
                if (0..4).any(|c| m1.get(0, c, i, j) != 0.0) {
                    nonzero_cells += 1;
                }
            }
        }
        assert!(nonzero_cells <= b1.num_pillars());
    }

    #[test]
    fn pillar_cap_keeps_densest() {
        let mut grid = small_grid();
        grid.max_pillars = 2;
        let pc = PointCloud {
            points: vec![
                [0.5, 0.5, 0.0, 0.0],
                [1.5, 0.5, 0.0, 0.0],
                [1.6, 0.5, 0.0, 0.0],
                [2.5, 0.5, 0.0, 0.0],
                [2.6, 0.5, 0.0, 0.0],
                [2.7, 0.5, 0.0, 0.0],
            ],
        };
        let batch = pillarize::<f64>(&pc, &grid).unwrap();
        assert_eq!(batch.num_pillars(), 2);
        // Cells (0,1) and (0,2) have the most points; first-seen order kept.
        assert_eq!(batch.coords, vec![(0, 1), (0, 2)]);
        assert_eq!(batch.counts, vec![2, 3]);
    }
}
