//! The size and intersection regularizers, and assembly of one step's total
//! field gradient.

use alloc::vec;
use alloc::vec::Vec;

use crate::field::{sigmoid, softplus, VoxelField};
use crate::geometry::IndexedMesh;
use crate::image::Image;
use crate::render::{accumulate_backward, RenderTape};
use crate::{par, Error, Result, Vec3};

const CHUNKS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub sds_composite: f64,
    pub sds_human: f64,
    pub sds_human_multiview: f64,
    pub sparsity: f64,
    pub intersection: f64,
    /// Opacity threshold of the sparsity term.
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sds_composite: 0.9,
            sds_human: 0.05,
            sds_human_multiview: 0.05,
            sparsity: 10_000.0,
            intersection: 1.0,
            eta: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.sds_composite,
            self.sds_human,
            self.sds_human_multiview,
            self.sparsity,
            self.intersection,
        ];
        if all.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("loss weights must be nonnegative"));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::invalid("eta must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// `softplus(mean opacity - eta)` over all pixels of all maps, and its
/// gradient with respect to every opacity pixel.
pub fn sparsity_above_threshold(opacity: &[Image], eta: f64) -> (f64, Vec<Image>) {
    let count: usize = opacity.iter().map(|o| o.data().len()).sum();
    if count == 0 {
        return (softplus(-eta), Vec::new());
    }
    let mean = opacity.iter().flat_map(|o| o.data()).sum::<f64>() / count as f64;
    let loss = softplus(mean - eta);
    let g = sigmoid(mean - eta) / count as f64;
    let grads = opacity
        .iter()
        .map(|o| Image::filled(o.width(), o.height(), &vec![g; o.channels()]))
        .collect();
    (loss, grads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntersectionPenalty {
    pub loss: f64,
    pub inside_samples: usize,
    pub total_samples: usize,
    pub gradient: Vec<f64>,
}

/// Mean activated density over the tapes' ray samples that lie inside
/// `object` (0 when none do), with its parameter gradient.
pub fn intersection_penalty(field: &VoxelField, object: &IndexedMesh, tapes: &[&RenderTape]) -> Result<IntersectionPenalty> {
    for tape in tapes {
        if tape.field_version != field.version() {
            return Err(Error::StaleSnapshot {
                recorded: tape.field_version,
                current: field.version(),
            });
        }
    }
    let rays: Vec<_> = tapes.iter().flat_map(|t| t.rays.iter()).collect();
    let total_samples = rays.iter().map(|r| r.distances.len()).sum();
    // inside points along every ray
    let inside: Vec<Vec<Vec3>> = par::map_indexed(rays.len(), |i| {
        let r = rays[i];
        if r.distances.is_empty() || object.is_empty() {
            return Vec::new();
        }
        object
            .classify_along_ray(&r.ray, &r.distances)
            .into_iter()
            .zip(&r.distances)
            .filter(|(inside, _)| *inside)
            .map(|(_, &d)| r.ray.at(d))
            .collect()
    });
    let points: Vec<Vec3> = inside.into_iter().flatten().collect();
    let k = points.len();
    let mut gradient = vec![0.0; field.parameters().len()];
    if k == 0 {
        return Ok(IntersectionPenalty {
            loss: 0.0,
            inside_samples: 0,
            total_samples,
            gradient,
        });
    }
    let chunk = k.div_ceil(CHUNKS);
    let partials = par::map_indexed(CHUNKS, |c| {
        let mut local = vec![0.0; gradient.len()];
        let mut sum = 0.0;
        for p in &points[(c * chunk).min(k)..((c + 1) * chunk).min(k)] {
            sum += field.query(p).density;
            field.accumulate_query_backward(p, &Vec3::zeros(), 1.0 / k as f64, &mut local);
        }
        (sum, local)
    });
    let mut sum = 0.0;
    for (s, local) in partials {
        sum += s;
        for (a, b) in gradient.iter_mut().zip(&local) {
            *a += b;
        }
    }
    Ok(IntersectionPenalty {
        loss: sum / k as f64,
        inside_samples: k,
        total_samples,
        gradient,
    })
}

/// Upstream image gradients for one rendering.
#[derive(Debug, Clone, Copy)]
pub struct ImageGradientTerm<'a> {
    pub tape: &'a RenderTape,
    pub d_rgb: &'a Image,
    pub d_opacity: Option<&'a Image>,
    pub weight: f64,
}

/// `sum_c weight_c * backward(term_c) + sum_r weight_r * grad_r` where the
/// second sum runs over parameter-space regularizer gradients. Zero-weight
/// terms are skipped, so all-zero weights give an exactly zero gradient.
pub fn assemble_step_gradient(
    field: &VoxelField,
    image_terms: &[ImageGradientTerm<'_>],
    parameter_terms: &[(&[f64], f64)],
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; field.parameters().len()];
    for term in image_terms {
        if term.weight == 0.0 {
            if term.tape.field_version != field.version() {
                return Err(Error::StaleSnapshot {
                    recorded: term.tape.field_version,
                    current: field.version(),
                });
            }
            continue;
        }
        accumulate_backward(field, term.tape, term.d_rgb, term.d_opacity, term.weight, &mut grad)?;
    }
    for (g, w) in parameter_terms {
        if g.len() != grad.len() {
            return Err(Error::shape("regularizer gradient does not match the field"));
        }
        if *w == 0.0 {
            continue;
        }
        for (a, b) in grad.iter_mut().zip(g.iter()) {
            *a += w * b;
        }
    }
    Ok(grad)
}
