//! Cameras, rays, triangle meshes and the ray queries every other module uses.
//!
//! The brute-force queries ([`first_hit`], [`point_inside`]) scan every
//! triangle behind a per-triangle bounding-box test. [`IndexedMesh`] answers
//! the same queries through a BVH and is what the renderer and the fitters use;
//! the brute-force path stays as its reference.

mod bvh;
mod camera;
mod intersect;
mod mesh;
mod nearest;

pub use bvh::IndexedMesh;
pub use camera::{Camera, Projection};
pub use intersect::{first_hit, point_inside, ray_crossings, ray_sphere_interval, Crossings, Hit, Ray, EPS_RAY};
pub use mesh::{parse_obj, write_obj, TriangleMesh};
pub use nearest::NearestPoint;
