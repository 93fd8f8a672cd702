//! Dense voxel radiance field on `[-1, 1]^3` with a spherical support mask.
//!
//! Parameters live in one flat buffer: `N` raw densities followed by `3N`
//! color logits (voxel-major). Gradients use the same layout.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result, Vec3};
#[allow(unused_imports)]
use num_traits::Float;

/// Raw density offset used for empty space at initialization.
pub const FLOOR_OFFSET: f64 = -3.0;
/// Gray returned for points outside the support ball.
pub const OUTSIDE_COLOR: f64 = 0.5;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Result of a field query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub color: Vec3,
    pub density: f64,
}

/// The eight voxels and trilinear weights around a point.
#[derive(Debug, Clone, Copy)]
struct Stencil {
    voxels: [usize; 8],
    weights: [f64; 8],
}

/// A stencil with the raw density and color logits interpolated over it.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Lookup {
    stencil: Stencil,
    pub(crate) raw: f64,
    pub(crate) logits: Vec3,
}

impl Lookup {
    pub(crate) fn sample(&self) -> FieldSample {
        FieldSample {
            color: self.logits.map(sigmoid),
            density: softplus(self.raw),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelField {
    resolution: [usize; 3],
    radius: f64,
    params: Vec<f64>,
    version: u64,
}

impl VoxelField {
    /// Field with uniform raw density and color logit.
    pub fn filled(resolution: [usize; 3], raw_density: f64, color_logit: f64) -> Result<Self> {
        if resolution.iter().any(|&n| n == 0) {
            return Err(Error::invalid("field resolution must be positive"));
        }
        let n = resolution[0] * resolution[1] * resolution[2];
        let mut params = vec![raw_density; 4 * n];
        params[n..].fill(color_logit);
        Ok(Self {
            resolution,
            radius: 1.0,
            params,
            version: 0,
        })
    }

    /// Cubic field whose activated density underflows to exactly zero.
    pub fn empty(n: usize) -> Result<Self> {
        Self::filled([n; 3], -1000.0, 0.0)
    }

    /// Rebuilds a field from a flat parameter buffer.
    pub fn from_parameters(resolution: [usize; 3], radius: f64, params: Vec<f64>) -> Result<Self> {
        let mut f = Self::filled(resolution, 0.0, 0.0)?;
        if params.len() != f.params.len() {
            return Err(Error::shape(alloc::format!(
                "expected {} field parameters, got {}",
                f.params.len(),
                params.len()
            )));
        }
        if !(radius > 0.0) {
            return Err(Error::invalid("support radius must be positive"));
        }
        f.params = params;
        f.radius = radius;
        Ok(f)
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn support_radius(&self) -> f64 {
        self.radius
    }

    pub fn voxel_count(&self) -> usize {
        self.resolution[0] * self.resolution[1] * self.resolution[2]
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameters. Bumps the snapshot version.
    pub fn parameters_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    /// Counter incremented on every mutable access, used to detect stale tapes.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn raw_density(&self) -> &[f64] {
        &self.params[..self.voxel_count()]
    }

    pub fn color_logits(&self) -> &[f64] {
        &self.params[self.voxel_count()..]
    }

    pub fn voxel_index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.resolution[1] + j) * self.resolution[0] + i
    }

    pub fn density_param(&self, voxel: usize) -> usize {
        voxel
    }

    pub fn color_param(&self, voxel: usize, channel: usize) -> usize {
        self.voxel_count() + 3 * voxel + channel
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let c = |idx: usize, n: usize| -1.0 + (idx as f64 + 0.5) * 2.0 / n as f64;
        Vec3::new(
            c(i, self.resolution[0]),
            c(j, self.resolution[1]),
            c(k, self.resolution[2]),
        )
    }

    /// Rounds every parameter to single precision, the snapshot file format.
    pub fn quantize_to_f32(&mut self) {
        for p in self.parameters_mut() {
            *p = *p as f32 as f64;
        }
    }

    fn stencil(&self, p: &Vec3) -> Stencil {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let n = self.resolution[a];
            let u = (p[a] + 1.0) * 0.5 * n as f64 - 0.5;
            if n == 1 {
                continue;
            }
            let i0 = (u.floor().max(0.0) as usize).min(n - 2);
            lo[a] = i0;
            hi[a] = i0 + 1;
            frac[a] = (u - i0 as f64).clamp(0.0, 1.0);
        }
        let mut voxels = [0; 8];
        let mut weights = [0.0; 8];
        for c in 0..8 {
            let pick = |a: usize| (c >> a) & 1 == 1;
            let (i, wi) = if pick(0) { (hi[0], frac[0]) } else { (lo[0], 1.0 - frac[0]) };
            let (j, wj) = if pick(1) { (hi[1], frac[1]) } else { (lo[1], 1.0 - frac[1]) };
            let (k, wk) = if pick(2) { (hi[2], frac[2]) } else { (lo[2], 1.0 - frac[2]) };
            voxels[c] = self.voxel_index(i, j, k);
            weights[c] = wi * wj * wk;
        }
        Stencil { voxels, weights }
    }

    fn inside_support(&self, p: &Vec3) -> bool {
        p.norm_squared() <= self.radius * self.radius
    }

    /// Interpolated raw density and color logits, `None` outside the support.
    pub fn query_raw(&self, p: &Vec3) -> Option<(f64, Vec3)> {
        self.lookup(p).map(|l| (l.raw, l.logits))
    }

    pub fn query(&self, p: &Vec3) -> FieldSample {
        match self.query_raw(p) {
            None => FieldSample {
                color: Vec3::repeat(OUTSIDE_COLOR),
                density: 0.0,
            },
            Some((raw, logits)) => FieldSample {
                color: logits.map(sigmoid),
                density: softplus(raw),
            },
        }
    }

    /// Stencil and interpolated raw values at `p`, for callers that run the
    /// backward pass at the same point.
    pub(crate) fn lookup(&self, p: &Vec3) -> Option<Lookup> {
        if !self.inside_support(p) {
            return None;
        }
        let stencil = self.stencil(p);
        let n = self.voxel_count();
        let mut raw = 0.0;
        let mut logits = Vec3::zeros();
        for c in 0..8 {
            let w = stencil.weights[c];
            let v = stencil.voxels[c];
            raw += w * self.params[v];
            let base = n + 3 * v;
            logits += Vec3::new(self.params[base], self.params[base + 1], self.params[base + 2]) * w;
        }
        Some(Lookup { stencil, raw, logits })
    }

    pub(crate) fn accumulate_lookup_backward(&self, l: &Lookup, d_color: &Vec3, d_density: f64, grad: &mut [f64]) {
        let d_raw = d_density * sigmoid(l.raw);
        let d_logit = Vec3::from_fn(|k, _| {
            let c = sigmoid(l.logits[k]);
            d_color[k] * c * (1.0 - c)
        });
        let n = self.voxel_count();
        for c in 0..8 {
            let w = l.stencil.weights[c];
            if w == 0.0 {
                continue;
            }
            let v = l.stencil.voxels[c];
            grad[v] += w * d_raw;
            for k in 0..3 {
                grad[n + 3 * v + k] += w * d_logit[k];
            }
        }
    }

    /// Adds `d(loss)/d(params)` for one query to a dense gradient buffer,
    /// given the upstream gradients on the activated color and density.
    pub fn accumulate_query_backward(&self, p: &Vec3, d_color: &Vec3, d_density: f64, grad: &mut [f64]) {
        if let Some(l) = self.lookup(p) {
            self.accumulate_lookup_backward(&l, d_color, d_density, grad);
        }
    }

    /// Sparse `(parameter index, gradient)` pairs for one query; duplicates merged.
    pub fn query_backward(&self, p: &Vec3, d_color: &Vec3, d_density: f64) -> Vec<(usize, f64)> {
        let Some((raw, _)) = self.query_raw(p) else {
            return Vec::new();
        };
        self.query_raw_backward(p, d_color, d_density * sigmoid(raw))
    }

    /// As `query_backward`, with the upstream density gradient taken on the
    /// raw (pre-softplus) density.
    pub fn query_raw_backward(&self, p: &Vec3, d_color: &Vec3, d_raw: f64) -> Vec<(usize, f64)> {
        let Some((_, logits)) = self.query_raw(p) else {
            return Vec::new();
        };
        let s = self.stencil(p);
        let n = self.voxel_count();
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(32);
        let mut push = |idx: usize, g: f64| match out.iter_mut().find(|e| e.0 == idx) {
            Some(e) => e.1 += g,
            None => out.push((idx, g)),
        };
        for c in 0..8 {
            let w = s.weights[c];
            if w == 0.0 {
                continue;
            }
            let v = s.voxels[c];
            push(v, w * d_raw);
            for k in 0..3 {
                let col = sigmoid(logits[k]);
                push(n + 3 * v + k, w * d_color[k] * col * (1.0 - col));
            }
        }
        out.sort_by_key(|e| e.0);
        out
    }

    /// Resets to a Gaussian density blob at the origin over a near-empty floor
    /// and neutral gray color.
    pub fn init_density_bias(&mut self, amplitude: f64, sigma: f64) -> Result<()> {
        if !(amplitude > 0.0 && sigma > 0.0) {
            return Err(Error::invalid("density bias amplitude and sigma must be positive"));
        }
        let [nx, ny, nz] = self.resolution;
        let n = self.voxel_count();
        let mut raw = vec![0.0; n];
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let r2 = self.voxel_center(i, j, k).norm_squared();
                    raw[self.voxel_index(i, j, k)] = amplitude * (-r2 / (2.0 * sigma * sigma)).exp() + FLOOR_OFFSET;
                }
            }
        }
        let params = self.parameters_mut();
        params[..n].copy_from_slice(&raw);
        params[n..].fill(0.0);
        Ok(())
    }
}
