//! Diffusion-style noising, classifier-free guidance and the score
//! distillation image gradient, plus the provider interface that supplies
//! noise predictions.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::geometry::Camera;
use crate::image::Image;
use crate::{Error, Result};
#[allow(unused_imports)]
use num_traits::Float;

const ALPHA_BAR_CLAMP: f64 = 1e-5;

/// Cumulative signal coefficient `cos^2(pi t / 2)`, clamped away from 0 and 1.
pub fn alpha_bar(t: f64) -> f64 {
    let c = (core::f64::consts::FRAC_PI_2 * t).cos();
    (c * c).clamp(ALPHA_BAR_CLAMP, 1.0 - ALPHA_BAR_CLAMP)
}

fn check_t(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("timestep {t} outside (0, 1)")))
    }
}

/// `x_t = sqrt(abar) x + sqrt(1 - abar) eps`.
pub fn add_noise(x: &Image, t: f64, eps: &Image) -> Result<Image> {
    check_t(t)?;
    x.check_shape(eps, "add_noise")?;
    let ab = alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x.data().iter().zip(eps.data()).map(|(a, e)| s * a + n * e).collect();
    Image::from_data(x.width(), x.height(), x.channels(), data)
}

/// `neg + omega * (pos - neg)`.
pub fn cfg_combine(pos: &Image, neg: &Image, omega: f64) -> Result<Image> {
    pos.check_shape(neg, "cfg_combine")?;
    let data = pos.data().iter().zip(neg.data()).map(|(p, n)| n + omega * (p - n)).collect();
    Image::from_data(pos.width(), pos.height(), pos.channels(), data)
}

/// Standard normal noise image.
pub fn gaussian_image<R: Rng + ?Sized>(rng: &mut R, width: usize, height: usize, channels: usize) -> Image {
    let data = (0..width * height * channels).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Image::from_data(width, height, channels, data).expect("sized to fit")
}

/// Uniform timestep in `(lo, hi)`.
pub fn sample_timestep<R: Rng + ?Sized>(range: (f64, f64), rng: &mut R) -> Result<f64> {
    let (lo, hi) = range;
    if !(0.0 < lo && lo < hi && hi < 1.0) {
        return Err(Error::invalid(format!("timestep range ({lo}, {hi}) must satisfy 0 < lo < hi < 1")));
    }
    Ok(rng.gen_range(lo..hi))
}

/// The weighting `w(t)` applied to the noise residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    #[default]
    Unit,
    /// `sqrt(1 - abar) / sqrt(abar)`, which makes the image-matching gradient
    /// independent of `t` in expectation.
    Normalizing,
}

impl Weighting {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            Weighting::Unit => 1.0,
            Weighting::Normalizing => {
                let ab = alpha_bar(t);
                ((1.0 - ab) / ab).sqrt()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub positive: String,
    pub negative: String,
}

impl Prompt {
    pub fn new(positive: impl Into<String>, negative: impl Into<String>) -> Result<Self> {
        let positive = positive.into();
        if positive.trim().is_empty() {
            return Err(Error::invalid("positive prompt must not be empty"));
        }
        Ok(Self {
            positive,
            negative: negative.into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Capability {
    SingleView,
    /// Receives the camera of every image in the request.
    MultiView,
}

#[derive(Debug, Clone, Copy)]
pub struct GuidanceRequest<'a> {
    pub images: &'a [Image],
    pub t: f64,
    pub prompt: &'a Prompt,
    pub cameras: Option<&'a [Camera]>,
    pub cfg_weight: f64,
}

/// Noise predictions for each requested image. When `negative` is absent the
/// provider has already applied guidance and `positive` is final.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePrediction {
    pub positive: Vec<Image>,
    pub negative: Option<Vec<Image>>,
}

pub trait GuidanceProvider: Send {
    fn capability(&self) -> Capability;
    fn predict(&mut self, request: &GuidanceRequest<'_>) -> Result<NoisePrediction>;
}

/// Returns fixed noise images regardless of input.
#[derive(Debug, Clone)]
pub struct EchoProvider {
    noise: Vec<Image>,
}

impl EchoProvider {
    pub fn new(noise: Vec<Image>) -> Self {
        Self { noise }
    }
}

impl GuidanceProvider for EchoProvider {
    fn capability(&self) -> Capability {
        Capability::SingleView
    }

    fn predict(&mut self, request: &GuidanceRequest<'_>) -> Result<NoisePrediction> {
        if request.images.len() > self.noise.len() {
            return Err(Error::invalid("echo provider has fewer noise images than requested"));
        }
        for (img, n) in request.images.iter().zip(&self.noise) {
            img.check_shape(n, "echo provider")?;
        }
        let out = self.noise[..request.images.len()].to_vec();
        Ok(NoisePrediction {
            positive: out.clone(),
            negative: Some(out),
        })
    }
}

/// Predicts the noise that would turn the target image into `x_t`:
/// `(x_t - sqrt(abar) x*) / sqrt(1 - abar)`. SDS through it is an L2 pull
/// toward the target.
#[derive(Debug, Clone)]
pub struct ImageMatchingProvider {
    single: Option<Image>,
    views: Vec<(Camera, Image)>,
}

impl ImageMatchingProvider {
    pub fn new(target: Image) -> Self {
        Self {
            single: Some(target),
            views: Vec::new(),
        }
    }

    /// Multi-view form: each request image is matched against the target whose
    /// camera orientation is nearest to the image's camera.
    pub fn per_view(views: Vec<(Camera, Image)>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::invalid("per-view provider needs at least one target"));
        }
        Ok(Self { single: None, views })
    }

    fn target_for(&self, camera: Option<&Camera>) -> Result<&Image> {
        if let Some(t) = &self.single {
            return Ok(t);
        }
        let camera = camera.ok_or_else(|| Error::invalid("multi-view provider needs a camera per image"))?;
        let best = self
            .views
            .iter()
            .map(|(c, img)| (c.rotation_distance(camera), img))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .expect("nonempty");
        Ok(best.1)
    }
}

impl GuidanceProvider for ImageMatchingProvider {
    fn capability(&self) -> Capability {
        if self.single.is_some() {
            Capability::SingleView
        } else {
            Capability::MultiView
        }
    }

    fn predict(&mut self, request: &GuidanceRequest<'_>) -> Result<NoisePrediction> {
        check_t(request.t)?;
        if let Some(c) = request.cameras {
            if c.len() != request.images.len() {
                return Err(Error::shape("one camera per image is required"));
            }
        }
        let ab = alpha_bar(request.t);
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut out = Vec::with_capacity(request.images.len());
        for (i, x_t) in request.images.iter().enumerate() {
            let target = self.target_for(request.cameras.map(|c| &c[i]))?;
            x_t.check_shape(target, "image-matching target")?;
            let data = x_t.data().iter().zip(target.data()).map(|(x, y)| (x - s * y) / n).collect();
            out.push(Image::from_data(x_t.width(), x_t.height(), x_t.channels(), data)?);
        }
        Ok(NoisePrediction {
            positive: out,
            negative: None,
        })
    }
}

/// Counts calls on the wrapped provider; the counter handle stays readable
/// after the provider is moved into a channel.
pub struct Counted<P> {
    inner: P,
    calls: Arc<AtomicUsize>,
}

impl<P: GuidanceProvider> Counted<P> {
    pub fn new(inner: P) -> (Self, Arc<AtomicUsize>) {
        let calls = Arc::new(AtomicUsize::new(0));
        (
            Self {
                inner,
                calls: calls.clone(),
            },
            calls,
        )
    }
}

impl<P: GuidanceProvider> GuidanceProvider for Counted<P> {
    fn capability(&self) -> Capability {
        self.inner.capability()
    }

    fn predict(&mut self, request: &GuidanceRequest<'_>) -> Result<NoisePrediction> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict(request)
    }
}

/// Which rendering a channel supervises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderTarget {
    /// Field composited with the object mesh.
    Composite,
    /// Field alone.
    HumanOnly,
}

pub struct GuidanceChannel {
    pub name: String,
    pub provider: Box<dyn GuidanceProvider>,
    pub prompt: Prompt,
    pub weight: f64,
    pub target: RenderTarget,
    pub cfg_weight: f64,
}

impl GuidanceChannel {
    pub fn new(
        name: impl Into<String>,
        provider: Box<dyn GuidanceProvider>,
        prompt: Prompt,
        weight: f64,
        target: RenderTarget,
        cfg_weight: f64,
    ) -> Result<Self> {
        if !(weight >= 0.0) || !(cfg_weight >= 0.0) {
            return Err(Error::invalid("channel weight and guidance weight must be nonnegative"));
        }
        Ok(Self {
            name: name.into(),
            provider,
            prompt,
            weight,
            target,
            cfg_weight,
        })
    }

    /// Guided noise estimates for a batch of rendered images.
    pub fn predict_noise(&mut self, noisy: &[Image], cameras: &[Camera], t: f64) -> Result<Vec<Image>> {
        let cams = match self.provider.capability() {
            Capability::MultiView => Some(cameras),
            Capability::SingleView => None,
        };
        let request = GuidanceRequest {
            images: noisy,
            t,
            prompt: &self.prompt,
            cameras: cams,
            cfg_weight: self.cfg_weight,
        };
        let tag = |e: Error| match e {
            Error::Provider { message, timed_out, .. } => Error::Provider {
                channel: self.name.clone(),
                message,
                timed_out,
            },
            other => Error::Provider {
                channel: self.name.clone(),
                message: other.to_string(),
                timed_out: false,
            },
        };
        let pred = self.provider.predict(&request).map_err(tag)?;
        if pred.positive.len() != noisy.len() {
            return Err(tag(Error::shape("provider returned the wrong number of images")));
        }
        for (p, x) in pred.positive.iter().zip(noisy) {
            p.check_shape(x, "provider output").map_err(tag)?;
        }
        match pred.negative {
            None => Ok(pred.positive),
            Some(neg) => {
                if neg.len() != noisy.len() {
                    return Err(tag(Error::shape("provider returned the wrong number of negative images")));
                }
                pred.positive
                    .iter()
                    .zip(&neg)
                    .map(|(p, n)| cfg_combine(p, n, self.cfg_weight))
                    .collect::<Result<Vec<_>>>()
                    .map_err(tag)
            }
        }
    }
}

/// One Monte-Carlo sample of the score distillation image gradient
/// `w(t) (eps_hat - eps)` for each image, where `eps_hat` comes from the
/// channel's provider evaluated at `add_noise(x, t, eps)`.
pub fn sds_pixel_gradients(
    channel: &mut GuidanceChannel,
    images: &[Image],
    cameras: &[Camera],
    t: f64,
    noise: &[Image],
    weighting: Weighting,
) -> Result<Vec<Image>> {
    let eps_hat = predict_residual_inputs(channel, images, cameras, t, noise)?;
    let w = weighting.at(t);
    eps_hat
        .iter()
        .zip(noise)
        .map(|(e_hat, e)| {
            let data = e_hat.data().iter().zip(e.data()).map(|(a, b)| w * (a - b)).collect();
            Image::from_data(e.width(), e.height(), e.channels(), data)
        })
        .collect()
}

fn predict_residual_inputs(
    channel: &mut GuidanceChannel,
    images: &[Image],
    cameras: &[Camera],
    t: f64,
    noise: &[Image],
) -> Result<Vec<Image>> {
    if images.len() != noise.len() || images.len() != cameras.len() {
        return Err(Error::shape("images, cameras and noise must have equal counts"));
    }
    let noisy = images
        .iter()
        .zip(noise)
        .map(|(x, e)| add_noise(x, t, e))
        .collect::<Result<Vec<_>>>()?;
    channel.predict_noise(&noisy, cameras, t)
}

/// Unweighted residual `eps_hat - eps` for one image, for gradient dumps.
pub fn noise_residual(
    channel: &mut GuidanceChannel,
    image: &Image,
    camera: &Camera,
    t: f64,
    noise: &Image,
) -> Result<Image> {
    let eps_hat = predict_residual_inputs(
        channel,
        core::slice::from_ref(image),
        core::slice::from_ref(camera),
        t,
        core::slice::from_ref(noise),
    )?;
    let mut r = eps_hat.into_iter().next().expect("one image");
    r.add_scaled(noise, -1.0)?;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cam() -> Camera {
        Camera::orbit(0.0, 0.3, 3.0, 0.8, 4, 3).unwrap()
    }

    fn channel(p: Box<dyn GuidanceProvider>, cfg: f64) -> GuidanceChannel {
        GuidanceChannel::new("test", p, Prompt::new("a", "b").unwrap(), 1.0, RenderTarget::Composite, cfg).unwrap()
    }

    #[test]
    fn schedule_closed_forms() {
        assert!((alpha_bar(0.5) - 0.5).abs() < 1e-15);
        assert_eq!(alpha_bar(0.0), 1.0 - 1e-5);
        assert_eq!(alpha_bar(1.0), 1e-5);
        // strictly decreasing between the clamped ends
        let mut prev = 1.0;
        for i in 10..990 {
            let a = alpha_bar(i as f64 / 1000.0);
            assert!(a < prev);
            prev = a;
        }
    }

    #[test]
    fn add_noise_limits_and_closed_form() {
        let x = Image::filled(2, 2, &[0.3, 0.6, 0.9]);
        let e = Image::filled(2, 2, &[1.0, -1.0, 0.5]);
        let near0 = add_noise(&x, 1e-6, &e).unwrap();
        assert!(near0.mse(&x).unwrap() < 1e-4);
        let near1 = add_noise(&x, 1.0 - 1e-6, &e).unwrap();
        assert!(near1.mse(&e).unwrap() < 1e-4);
        let half = add_noise(&Image::rgb(2, 2), 0.5, &Image::filled(2, 2, &[1.0, 1.0, 1.0])).unwrap();
        assert!(half.data().iter().all(|v| (v - 0.5f64.sqrt()).abs() < 1e-15));
        assert!(add_noise(&x, 0.0, &e).is_err());
        assert!(add_noise(&x, 1.0, &e).is_err());
        assert!(add_noise(&x, 0.5, &Image::gray(2, 2)).is_err());
    }

    #[test]
    fn add_noise_mean_over_noise() {
        let x = Image::filled(4, 4, &[0.2, -0.4, 0.7]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 4000;
        let mut mean = Image::rgb(4, 4);
        for _ in 0..n {
            let e = gaussian_image(&mut rng, 4, 4, 3);
            mean.add_scaled(&add_noise(&x, 0.3, &e).unwrap(), 1.0 / n as f64).unwrap();
        }
        let ab = alpha_bar(0.3);
        let se = ((1.0 - ab) / n as f64).sqrt();
        for (m, v) in mean.data().iter().zip(x.data()) {
            assert!((m - ab.sqrt() * v).abs() < 4.0 * se);
        }
    }

    #[test]
    fn cfg_limits() {
        let p = Image::filled(1, 2, &[1.0, 2.0, 3.0]);
        let n = Image::filled(1, 2, &[-1.0, 0.5, 0.0]);
        assert_eq!(cfg_combine(&p, &n, 1.0).unwrap(), p);
        assert_eq!(cfg_combine(&p, &n, 0.0).unwrap(), n);
        assert_eq!(cfg_combine(&p, &p, 50.0).unwrap(), p);
    }

    #[test]
    fn timestep_sampling() {
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            assert_eq!(sample_timestep((0.02, 0.98), &mut a).unwrap(), sample_timestep((0.02, 0.98), &mut b).unwrap());
        }
        assert!(sample_timestep((0.3, 0.3), &mut a).is_err());
        assert!(sample_timestep((0.0, 0.3), &mut a).is_err());
        let n = 100_000;
        let mean = (0..n).map(|_| sample_timestep((0.02, 0.98), &mut a).unwrap()).sum::<f64>() / n as f64;
        let se = 0.96 / 12f64.sqrt() / (n as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * se);
    }

    #[test]
    fn echo_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = gaussian_image(&mut rng, 4, 3, 3);
        let x = gaussian_image(&mut rng, 4, 3, 3);
        let mut ch = channel(Box::new(EchoProvider::new(vec![e.clone()])), 50.0);
        let g = sds_pixel_gradients(&mut ch, &[x], &[cam()], 0.4, &[e], Weighting::Unit).unwrap();
        assert!(g[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn image_matching_closed_form_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let target = gaussian_image(&mut rng, 4, 3, 3);
        let x = gaussian_image(&mut rng, 4, 3, 3);
        let e = gaussian_image(&mut rng, 4, 3, 3);
        let t = 0.37;
        let mut ch = channel(Box::new(ImageMatchingProvider::new(target.clone())), 50.0);
        let g = sds_pixel_gradients(&mut ch, &[x.clone()], &[cam()], t, &[e.clone()], Weighting::Unit).unwrap();
        let ab = alpha_bar(t);
        for i in 0..x.data().len() {
            let expected = ab.sqrt() / (1.0 - ab).sqrt() * (x.data()[i] - target.data()[i]);
            assert!((g[0].data()[i] - expected).abs() < 1e-6);
        }
        let gn = sds_pixel_gradients(&mut ch, &[x.clone()], &[cam()], t, &[e.clone()], Weighting::Normalizing).unwrap();
        let w = Weighting::Normalizing.at(t);
        for i in 0..x.data().len() {
            assert!((gn[0].data()[i] - w * g[0].data()[i]).abs() < 1e-12);
        }
        // x_t built from the target itself predicts the noise
        let xt = add_noise(&target, t, &e).unwrap();
        let req = GuidanceRequest {
            images: &[xt],
            t,
            prompt: &ch.prompt,
            cameras: None,
            cfg_weight: 1.0,
        };
        let pred = ImageMatchingProvider::new(target.clone()).predict(&req).unwrap();
        assert!(pred.positive[0].mse(&e).unwrap() < 1e-24);
    }

    #[test]
    fn multi_view_selects_nearest_camera() {
        let a = Camera::orbit(0.0, 0.3, 3.0, 0.8, 2, 2).unwrap();
        let b = Camera::orbit(1.5, 0.3, 3.0, 0.8, 2, 2).unwrap();
        let ta = Image::filled(2, 2, &[1.0, 0.0, 0.0]);
        let tb = Image::filled(2, 2, &[0.0, 1.0, 0.0]);
        let mut p = ImageMatchingProvider::per_view(vec![(a.clone(), ta.clone()), (b.clone(), tb.clone())]).unwrap();
        assert_eq!(p.capability(), Capability::MultiView);
        let near_b = Camera::orbit(1.4, 0.35, 3.0, 0.8, 2, 2).unwrap();
        let prompt = Prompt::new("p", "").unwrap();
        let images = vec![Image::rgb(2, 2); 4];
        let cams = [a.clone(), near_b.clone(), b.clone(), a.clone()];
        let req = GuidanceRequest {
            images: &images,
            t: 0.5,
            prompt: &prompt,
            cameras: Some(&cams),
            cfg_weight: 1.0,
        };
        let out = p.predict(&req).unwrap();
        assert_eq!(out.positive.len(), 4);
        assert_eq!(out.positive[0], out.positive[3]);
        assert_eq!(out.positive[1], out.positive[2]);
        assert_ne!(out.positive[0], out.positive[1]);
        let missing = GuidanceRequest { cameras: None, ..req };
        assert!(p.predict(&missing).is_err());
    }

    #[test]
    fn provider_errors_carry_the_channel_name() {
        let mut ch = channel(Box::new(EchoProvider::new(vec![])), 1.0);
        let x = Image::rgb(4, 3);
        match sds_pixel_gradients(&mut ch, &[x.clone()], &[cam()], 0.5, &[x], Weighting::Unit) {
            Err(Error::Provider { channel, .. }) => assert_eq!(channel, "test"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(Prompt::new("  ", "x").is_err());
    }

    #[test]
    fn counted_provider_counts() {
        let (p, calls) = Counted::new(EchoProvider::new(vec![Image::rgb(4, 3)]));
        let mut ch = channel(Box::new(p), 1.0);
        let x = Image::rgb(4, 3);
        sds_pixel_gradients(&mut ch, &[x.clone()], &[cam()], 0.5, &[x], Weighting::Unit).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }
}
