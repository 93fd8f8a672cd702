use alloc::vec;
use alloc::vec::Vec;


use crate::Vec3;
#[allow(unused_imports)]
use num_traits::Float;

/// Uniform-grid nearest-neighbour index over a fixed point set.
#[derive(Debug, Clone)]
pub struct NearestPoint {
    points: Vec<Vec3>,
    lo: Vec3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    items: Vec<usize>,
}

impl NearestPoint {
    pub fn new(points: &[Vec3]) -> Self {
        let points = points.to_vec();
        let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
        for p in &points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        if points.is_empty() {
            lo = Vec3::zeros();
            hi = Vec3::zeros();
        }
        let extent = (hi - lo).map(|e| e.max(1e-9));
        // about two points per cell
        let volume = extent.x * extent.y * extent.z;
        let cell = (volume / (points.len().max(1) as f64 / 2.0)).cbrt().max(extent.amax() / 128.0);
        let dims = [0, 1, 2].map(|k| ((extent[k] / cell).floor() as usize + 1).min(256));
        let ncells = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; ncells + 1];
        let cell_of = |p: &Vec3| -> usize {
            let c = [0, 1, 2].map(|k| (((p[k] - lo[k]) / cell).floor().max(0.0) as usize).min(dims[k] - 1));
            (c[2] * dims[1] + c[1]) * dims[0] + c[0]
        };
        for p in &points {
            counts[cell_of(p) + 1] += 1;
        }
        for i in 0..ncells {
            counts[i + 1] += counts[i];
        }
        let starts = counts.clone();
        let mut fill = counts;
        let mut items = vec![0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let c = cell_of(p);
            items[fill[c]] = i;
            fill[c] += 1;
        }
        Self {
            points,
            lo,
            cell,
            dims,
            starts,
            items,
        }
    }

    /// Index of the nearest point (lowest index on ties), `None` if empty.
    pub fn nearest(&self, q: &Vec3) -> Option<usize> {
        if self.points.is_empty() {
            return None;
        }
        let c = [0, 1, 2].map(|k| ((q[k] - self.lo[k]) / self.cell).floor());
        let center = [0, 1, 2].map(|k| (c[k].max(0.0) as usize).min(self.dims[k] - 1));
        let mut best: Option<(f64, usize)> = None;
        let max_ring = *self.dims.iter().max().unwrap();
        for ring in 0..=max_ring {
            // distance from q to the nearest cell of this ring bounds any point in it
            if let Some((d2, _)) = best {
                let outside = [0, 1, 2]
                    .map(|k| {
                        let below = self.lo[k] - q[k];
                        let above = q[k] - (self.lo[k] + self.dims[k] as f64 * self.cell);
                        below.max(above).max(0.0)
                    })
                    .iter()
                    .fold(0.0f64, |a, b| a.max(*b));
                let reach = ((ring as f64 - 1.0).max(0.0) * self.cell).max(outside);
                if reach * reach > d2 {
                    break;
                }
            }
            let r = ring as isize;
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        let cell = [center[0] as isize + dx, center[1] as isize + dy, center[2] as isize + dz];
                        if (0..3).any(|k| cell[k] < 0 || cell[k] >= self.dims[k] as isize) {
                            continue;
                        }
                        let id = (cell[2] as usize * self.dims[1] + cell[1] as usize) * self.dims[0] + cell[0] as usize;
                        for &i in &self.items[self.starts[id]..self.starts[id + 1]] {
                            let d2 = (self.points[i] - q).norm_squared();
                            let better = match best {
                                None => true,
                                Some((bd, bi)) => d2 < bd || (d2 == bd && i < bi),
                            };
                            if better {
                                best = Some((d2, i));
                            }
                        }
                    }
                }
            }
        }
        best.map(|b| b.1)
    }
}
