//! Volumetric rendering of a [`VoxelField`], alone or composited with an
//! opaque triangle mesh, and the exact reverse-mode pass back to field
//! parameters.
//!
//! Along each ray, samples `d_0 < d_1 < ...` over the ray's chord through the
//! support ball get `alpha_i = 1 - exp(-tau_i * delta_i)` and weights
//! `w_i = alpha_i * prod_{j<i} (1 - alpha_j)`. A mesh hit is an extra sample
//! with `alpha = 1`: it cuts the preceding segment short and hides everything
//! behind it.

use alloc::vec;
use alloc::vec::Vec;

use crate::field::{sigmoid, softplus, FieldSample, Lookup, VoxelField, OUTSIDE_COLOR};
use crate::geometry::{ray_sphere_interval, Camera, IndexedMesh, Ray};
use crate::image::Image;
use crate::{par, rng, Error, Result, Vec3};
#[allow(unused_imports)]
use num_traits::Float;

/// Pixel chunks for the backward pass. Fixed so the floating-point reduction
/// order never depends on the thread count.
const BACKWARD_CHUNKS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderSettings {
    pub samples_per_ray: usize,
    pub background: Vec3,
    /// Seed for stratified jitter; `None` places samples at segment midpoints.
    pub jitter_seed: Option<u64>,
    /// Mesh hits farther than this are ignored.
    pub far_plane: f64,
    /// Keep the per-ray records needed by [`render_backward`].
    pub retain_tape: bool,
}

impl RenderSettings {
    pub fn new(samples_per_ray: usize, background: Vec3) -> Self {
        Self {
            samples_per_ray,
            background,
            jitter_seed: None,
            far_plane: 100.0,
            retain_tape: true,
        }
    }

    pub fn with_jitter(mut self, seed: u64) -> Self {
        self.jitter_seed = Some(seed);
        self
    }
}

/// Samples and mesh hit of one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RayRecord {
    pub ray: Ray,
    /// All sample distances, including those hidden behind a mesh hit.
    pub distances: Vec<f64>,
    /// Segment lengths used for alpha; the last visible one may be cut at the hit.
    pub segments: Vec<f64>,
    /// Number of leading samples in front of the mesh hit.
    pub active: usize,
    /// Distance and color of the first mesh hit.
    pub hit: Option<(f64, Vec3)>,
}

impl RayRecord {
    pub fn positions(&self) -> impl Iterator<Item = Vec3> + '_ {
        self.distances.iter().map(|&d| self.ray.at(d))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderTape {
    pub width: usize,
    pub height: usize,
    pub background: Vec3,
    pub field_version: u64,
    pub rays: Vec<RayRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub rgb: Image,
    /// Accumulated field weight per pixel (the mesh sample is excluded).
    pub opacity: Image,
    pub tape: Option<RenderTape>,
}

/// Uniform samples with optional stratified jitter over the chord of `ray`
/// through the ball of radius `radius`. Returns distances and segment lengths;
/// the last segment repeats the previous spacing.
pub fn sample_ray(ray: &Ray, radius: f64, n: usize, jitter: Option<(u64, u64)>) -> (Vec<f64>, Vec<f64>) {
    let Some((t0, t1)) = ray_sphere_interval(ray, radius) else {
        return (Vec::new(), Vec::new());
    };
    if !(t1 > t0) || n == 0 {
        return (Vec::new(), Vec::new());
    }
    let h = (t1 - t0) / n as f64;
    let distances: Vec<f64> = (0..n)
        .map(|i| {
            let u = match jitter {
                Some((seed, pixel)) => rng::uniform(&[seed, pixel, i as u64]),
                None => 0.5,
            };
            t0 + (i as f64 + u) * h
        })
        .collect();
    let mut segments: Vec<f64> = distances.windows(2).map(|w| w[1] - w[0]).collect();
    let last = segments.last().copied().unwrap_or(h);
    segments.push(last);
    (distances, segments)
}

fn alpha(density: f64, segment: f64) -> f64 {
    -(-density * segment).exp_m1()
}

fn trace(
    field: &VoxelField,
    mesh: Option<&IndexedMesh>,
    ray: Ray,
    pixel: u64,
    settings: &RenderSettings,
) -> RayRecord {
    let jitter = settings.jitter_seed.map(|s| (s, pixel));
    let (distances, mut segments) = sample_ray(&ray, field.support_radius(), settings.samples_per_ray, jitter);
    let hit = mesh
        .and_then(|m| m.first_hit(&ray))
        .filter(|h| h.distance <= settings.far_plane)
        .map(|h| (h.distance, h.color));
    let active = match hit {
        // a field sample tied with the hit sorts after it
        Some((d_hit, _)) => distances.partition_point(|&d| d < d_hit),
        None => distances.len(),
    };
    if let Some((d_hit, _)) = hit {
        if active > 0 {
            let i = active - 1;
            segments[i] = segments[i].min(d_hit - distances[i]);
        }
    }
    RayRecord {
        ray,
        distances,
        segments,
        active,
        hit,
    }
}

fn shade(field: &VoxelField, rec: &RayRecord, background: &Vec3) -> (Vec3, f64) {
    let mut color = Vec3::zeros();
    let mut transmittance = 1.0;
    for i in 0..rec.active {
        let Some(l) = field.lookup(&rec.ray.at(rec.distances[i])) else { continue };
        let a = alpha(softplus(l.raw), rec.segments[i]);
        if a == 0.0 {
            continue;
        }
        color += l.logits.map(sigmoid) * (transmittance * a);
        transmittance *= 1.0 - a;
    }
    let tail = rec.hit.map_or(*background, |h| h.1);
    (color + tail * transmittance, 1.0 - transmittance)
}

fn render(
    field: &VoxelField,
    mesh: Option<&IndexedMesh>,
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<RenderOutput> {
    if settings.samples_per_ray < 2 {
        return Err(Error::invalid("at least two samples per ray are required"));
    }
    let (w, h) = (camera.width(), camera.height());
    let mesh = mesh.filter(|m| !m.is_empty());
    let records = par::map_indexed(w * h, |p| {
        let rec = trace(field, mesh, camera.pixel_ray(p % w, p / w), p as u64, settings);
        let shaded = shade(field, &rec, &settings.background);
        (rec, shaded)
    });
    let mut rgb = Image::rgb(w, h);
    let mut opacity = Image::gray(w, h);
    for (p, (_, (c, o))) in records.iter().enumerate() {
        rgb.data_mut()[3 * p..3 * p + 3].copy_from_slice(c.as_slice());
        opacity.data_mut()[p] = *o;
    }
    let tape = settings.retain_tape.then(|| RenderTape {
        width: w,
        height: h,
        background: settings.background,
        field_version: field.version(),
        rays: records.into_iter().map(|r| r.0).collect(),
    });
    Ok(RenderOutput { rgb, opacity, tape })
}

/// Renders the field alone.
pub fn render_field(field: &VoxelField, camera: &Camera, settings: &RenderSettings) -> Result<RenderOutput> {
    render(field, None, camera, settings)
}

/// Renders the field with `mesh` inserted as an opaque surface.
pub fn render_composite(
    field: &VoxelField,
    mesh: &IndexedMesh,
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<RenderOutput> {
    render(field, Some(mesh), camera, settings)
}

fn backward_ray(
    field: &VoxelField,
    rec: &RayRecord,
    background: &Vec3,
    d_rgb: &Vec3,
    d_opacity: f64,
    grad: &mut [f64],
) {
    if rec.active == 0 {
        return;
    }
    let mut lookups = Vec::with_capacity(rec.active);
    let mut colors = Vec::with_capacity(rec.active);
    let mut alphas = Vec::with_capacity(rec.active);
    let mut trans = Vec::with_capacity(rec.active);
    let mut t = 1.0;
    for i in 0..rec.active {
        let l = field.lookup(&rec.ray.at(rec.distances[i]));
        let s = l.as_ref().map_or(
            FieldSample {
                color: Vec3::repeat(OUTSIDE_COLOR),
                density: 0.0,
            },
            Lookup::sample,
        );
        let a = alpha(s.density, rec.segments[i]);
        trans.push(t);
        colors.push(s.color);
        alphas.push(a);
        lookups.push(l);
        t *= 1.0 - a;
    }
    // Each sample contributes d_rgb . c_i to color and 1 to opacity; the tail
    // (mesh or background) contributes only color.
    let tail = rec.hit.map_or(*background, |h| h.1);
    let mut behind = d_rgb.dot(&tail);
    for i in (0..rec.active).rev() {
        let value = d_rgb.dot(&colors[i]) + d_opacity;
        let d_alpha = trans[i] * (value - behind);
        let d_density = d_alpha * rec.segments[i] * (1.0 - alphas[i]);
        let d_color = d_rgb * (trans[i] * alphas[i]);
        if let Some(l) = &lookups[i] {
            field.accumulate_lookup_backward(l, &d_color, d_density, grad);
        }
        behind = alphas[i] * value + (1.0 - alphas[i]) * behind;
    }
}

/// Adds `scale * d(loss)/d(params)` to `grad` given upstream gradients on
/// the rendered colors and (optionally) the opacity map.
pub fn accumulate_backward(
    field: &VoxelField,
    tape: &RenderTape,
    d_rgb: &Image,
    d_opacity: Option<&Image>,
    scale: f64,
    grad: &mut [f64],
) -> Result<()> {
    if tape.field_version != field.version() {
        return Err(Error::StaleSnapshot {
            recorded: tape.field_version,
            current: field.version(),
        });
    }
    if grad.len() != field.parameters().len() {
        return Err(Error::shape("gradient buffer does not match the field"));
    }
    let n = tape.width * tape.height;
    if d_rgb.width() != tape.width || d_rgb.height() != tape.height || d_rgb.channels() != 3 {
        return Err(Error::shape("rgb gradient does not match the rendered image"));
    }
    if let Some(o) = d_opacity {
        if o.width() != tape.width || o.height() != tape.height || o.channels() != 1 {
            return Err(Error::shape("opacity gradient does not match the rendered image"));
        }
    }
    let chunk = n.div_ceil(BACKWARD_CHUNKS).max(1);
    let partials = par::map_indexed(BACKWARD_CHUNKS, |c| {
        let mut local = vec![0.0; grad.len()];
        let mut touched = false;
        for p in (c * chunk)..((c + 1) * chunk).min(n) {
            let g = Vec3::from_column_slice(&d_rgb.data()[3 * p..3 * p + 3]) * scale;
            let go = d_opacity.map_or(0.0, |o| o.data()[p]) * scale;
            if g == Vec3::zeros() && go == 0.0 {
                continue;
            }
            touched = true;
            backward_ray(field, &tape.rays[p], &tape.background, &g, go, &mut local);
        }
        touched.then_some(local)
    });
    for local in partials.into_iter().flatten() {
        for (a, b) in grad.iter_mut().zip(&local) {
            *a += b;
        }
    }
    Ok(())
}

/// Gradient of `sum(d_rgb * rgb) + sum(d_opacity * opacity)` with respect to
/// the field parameters. The mesh color is treated as a constant.
pub fn render_backward(
    field: &VoxelField,
    tape: &RenderTape,
    d_rgb: &Image,
    d_opacity: Option<&Image>,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; field.parameters().len()];
    accumulate_backward(field, tape, d_rgb, d_opacity, 1.0, &mut grad)?;
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::TriangleMesh;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(n: usize, seed: u64) -> VoxelField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = VoxelField::filled([n; 3], 0.0, 0.0).unwrap();
        for p in f.parameters_mut() {
            *p = rng.gen_range(-2.0..1.5);
        }
        f
    }

    fn camera(w: usize, h: usize) -> Camera {
        Camera::new(Vec3::new(2.5, 0.4, 0.3), Vec3::zeros(), Vec3::z(), 0.9, w, h).unwrap()
    }

    #[test]
    fn empty_field_shows_background() {
        let f = VoxelField::empty(6).unwrap();
        let bg = Vec3::new(0.1, 0.7, 0.3);
        let out = render_field(&f, &camera(5, 4), &RenderSettings::new(16, bg)).unwrap();
        for p in 0..20 {
            assert_eq!(&out.rgb.data()[3 * p..3 * p + 3], bg.as_slice());
            assert_eq!(out.opacity.data()[p], 0.0);
        }
    }

    #[test]
    fn dense_slab_is_opaque() {
        let mut f = VoxelField::filled([8; 3], 1e6, 0.0).unwrap();
        let n = f.voxel_count();
        let params = f.parameters_mut();
        for v in 0..n {
            params[n + 3 * v] = 30.0;
            params[n + 3 * v + 1] = -30.0;
            params[n + 3 * v + 2] = -30.0;
        }
        let cam = Camera::new(Vec3::new(3.0, 0.0, 0.0), Vec3::zeros(), Vec3::z(), 0.2, 4, 4).unwrap();
        let out = render_field(&f, &cam, &RenderSettings::new(32, Vec3::new(0.0, 0.0, 1.0))).unwrap();
        for p in 0..16 {
            assert!(out.opacity.data()[p] >= 1.0 - 1e-6);
            assert!((out.rgb.data()[3 * p] - 1.0).abs() < 1e-6);
            assert!(out.rgb.data()[3 * p + 2] < 1e-6);
        }
    }

    #[test]
    fn weights_sum_to_at_most_one_and_jitter_is_reproducible() {
        let f = random_field(6, 11);
        let s = RenderSettings::new(24, Vec3::zeros()).with_jitter(42);
        let a = render_field(&f, &camera(6, 5), &s).unwrap();
        let b = render_field(&f, &camera(6, 5), &s).unwrap();
        assert_eq!(a, b);
        assert!(a.opacity.data().iter().all(|&o| (0.0..=1.0).contains(&o)));
        let c = render_field(&f, &camera(6, 5), &RenderSettings::new(24, Vec3::zeros()).with_jitter(43)).unwrap();
        assert_ne!(a.rgb, c.rgb);
    }

    #[test]
    fn composite_without_mesh_or_beyond_far_plane_equals_field_render() {
        let f = random_field(6, 12);
        let cam = camera(6, 6);
        let s = RenderSettings::new(20, Vec3::new(0.2, 0.2, 0.2)).with_jitter(5);
        let plain = render_field(&f, &cam, &s).unwrap();
        let empty = IndexedMesh::new(TriangleMesh::empty());
        assert_eq!(render_composite(&f, &empty, &cam, &s).unwrap(), plain);
        let wall = TriangleMesh::cuboid(Vec3::new(-9.0, -5.0, -5.0), Vec3::new(-8.0, 5.0, 5.0), Vec3::x());
        let mut near = s.clone();
        near.far_plane = 5.0;
        let out = render_composite(&f, &IndexedMesh::new(wall), &cam, &near).unwrap();
        assert_eq!(out.rgb, plain.rgb);
        assert_eq!(out.opacity, plain.opacity);
    }

    #[test]
    fn mesh_in_front_of_field_shows_mesh_color() {
        let f = random_field(6, 13);
        let color = Vec3::new(0.9, 0.1, 0.4);
        let wall = TriangleMesh::cuboid(Vec3::new(1.5, -5.0, -5.0), Vec3::new(1.6, 5.0, 5.0), color);
        let cam = Camera::new(Vec3::new(3.0, 0.0, 0.0), Vec3::zeros(), Vec3::z(), 0.5, 4, 4).unwrap();
        let out = render_composite(&f, &IndexedMesh::new(wall), &cam, &RenderSettings::new(16, Vec3::zeros())).unwrap();
        for p in 0..16 {
            assert_eq!(&out.rgb.data()[3 * p..3 * p + 3], color.as_slice());
            assert_eq!(out.opacity.data()[p], 0.0);
        }
    }

    fn fd_check(f: &VoxelField, mesh: Option<&IndexedMesh>, seed: u64) {
        let cam = camera(3, 3);
        let s = RenderSettings::new(12, Vec3::new(0.3, 0.5, 0.1)).with_jitter(seed);
        let run = |g: &VoxelField| match mesh {
            Some(m) => render_composite(g, m, &cam, &s).unwrap(),
            None => render_field(g, &cam, &s).unwrap(),
        };
        let out = run(f);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d_rgb = Image::rgb(3, 3);
        for v in d_rgb.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let mut d_op = Image::gray(3, 3);
        for v in d_op.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let grad = render_backward(f, out.tape.as_ref().unwrap(), &d_rgb, Some(&d_op)).unwrap();
        let loss = |o: &RenderOutput| {
            o.rgb.data().iter().zip(d_rgb.data()).map(|(a, b)| a * b).sum::<f64>()
                + o.opacity.data().iter().zip(d_op.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (mut num, mut diff) = (0.0, 0.0);
        for idx in 0..grad.len() {
            let mut plus = f.clone();
            plus.parameters_mut()[idx] += 1e-5;
            let mut minus = f.clone();
            minus.parameters_mut()[idx] -= 1e-5;
            let fd = (loss(&run(&plus)) - loss(&run(&minus))) / 2e-5;
            num += fd * fd;
            diff += (fd - grad[idx]) * (fd - grad[idx]);
        }
        assert!(num > 0.0);
        assert!(diff.sqrt() < 1e-5 * num.sqrt(), "relative error {}", diff.sqrt() / num.sqrt());
    }

    #[test]
    fn backward_matches_finite_differences() {
        fd_check(&random_field(3, 21), None, 1);
        let mesh = IndexedMesh::new(TriangleMesh::cuboid(
            Vec3::new(-0.2, -0.6, -0.6),
            Vec3::new(0.1, 0.6, 0.6),
            Vec3::new(0.2, 0.8, 0.5),
        ));
        fd_check(&random_field(3, 22), Some(&mesh), 2);
    }

    #[test]
    fn voxels_behind_the_mesh_get_no_gradient() {
        let f = random_field(8, 23);
        let mesh = IndexedMesh::new(TriangleMesh::cuboid(Vec3::new(-0.05, -3.0, -3.0), Vec3::new(0.05, 3.0, 3.0), Vec3::x()));
        let cam = Camera::new(Vec3::new(3.0, 0.0, 0.0), Vec3::zeros(), Vec3::z(), 0.4, 4, 4).unwrap();
        let out = render_composite(&f, &mesh, &cam, &RenderSettings::new(32, Vec3::zeros())).unwrap();
        let grad = render_backward(&f, out.tape.as_ref().unwrap(), &Image::filled(4, 4, &[1.0, 1.0, 1.0]), Some(&Image::filled(4, 4, &[1.0]))).unwrap();
        for k in 0..8 {
            for j in 0..8 {
                for i in 0..4 {
                    // voxel centers with x <= -0.375 are at least one voxel behind the wall
                    let v = f.voxel_index(i.min(2), j, k);
                    assert_eq!(grad[f.density_param(v)], 0.0);
                    for c in 0..3 {
                        assert_eq!(grad[f.color_param(v, c)], 0.0);
                    }
                }
            }
        }
        assert!(grad.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn stale_tape_and_bad_shapes_are_rejected() {
        let mut f = random_field(4, 24);
        let out = render_field(&f, &camera(2, 2), &RenderSettings::new(8, Vec3::zeros())).unwrap();
        let tape = out.tape.unwrap();
        assert!(render_backward(&f, &tape, &Image::rgb(3, 2), None).is_err());
        assert!(render_backward(&f, &tape, &Image::rgb(2, 2), Some(&Image::gray(1, 2))).is_err());
        f.parameters_mut()[0] += 1.0;
        assert!(matches!(render_backward(&f, &tape, &Image::rgb(2, 2), None), Err(Error::StaleSnapshot { .. })));
        assert!(render_field(&f, &camera(2, 2), &RenderSettings::new(1, Vec3::zeros())).is_err());
    }
}
