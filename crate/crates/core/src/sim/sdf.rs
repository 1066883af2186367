//! Analytic signed distance functions for the task-object primitives and
//! the support queries the quasi-static world needs.
//!
//! All shapes are centered on their local origin with the symmetry axis
//! along local z. Distances are negative inside material.

use crate::geom::Pose;
use nalgebra::Vector3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObjectShape {
    /// Capped cylinder: radius, full height.
    Cylinder { radius: f64, height: f64 },
    /// Axis-aligned box given by half-extents.
    Box { half_extents: Vector3<f64> },
    /// Open conical shell with a closed bottom: the wall is the offset of a
    /// revolved line segment from (base_radius, -h/2 + wall/2) to
    /// (top_radius, h/2 - wall/2), the base a disk slab of the same wall
    /// thickness. Rim and bottom edge are rounded by construction.
    Bowl {
        base_radius: f64,
        top_radius: f64,
        height: f64,
        wall: f64,
    },
}

/// Which side of the bowl wall a point is closest to. Everything except the
/// cavity-facing wall counts as outer-or-rim.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BowlRegion {
    Inner,
    OuterOrRim,
}

impl ObjectShape {
    pub fn validate(&self) -> bool {
        match *self {
            ObjectShape::Cylinder { radius, height } => radius > 0.0 && height > 0.0,
            ObjectShape::Box { half_extents } => half_extents.iter().all(|&e| e > 0.0),
            ObjectShape::Bowl {
                base_radius,
                top_radius,
                height,
                wall,
            } => base_radius > 0.0 && top_radius > 0.0 && height > wall && wall > 0.0,
        }
    }

    /// Longest local axis, used for the book's uprightness rule.
    pub fn long_axis(&self) -> Vector3<f64> {
        match *self {
            ObjectShape::Box { half_extents } => {
                if half_extents.x >= half_extents.y && half_extents.x >= half_extents.z {
                    Vector3::x()
                } else if half_extents.y >= half_extents.z {
                    Vector3::y()
                } else {
                    Vector3::z()
                }
            }
            _ => Vector3::z(),
        }
    }
}

fn sdf_capped_cylinder(p: &Vector3<f64>, radius: f64, height: f64) -> f64 {
    let dr = (p.x * p.x + p.y * p.y).sqrt() - radius;
    let dz = p.z.abs() - 0.5 * height;
    if dr > 0.0 && dz > 0.0 {
        (dr * dr + dz * dz).sqrt()
    } else {
        dr.max(dz)
    }
}

fn sdf_box(p: &Vector3<f64>, he: &Vector3<f64>) -> f64 {
    let q = Vector3::new(p.x.abs() - he.x, p.y.abs() - he.y, p.z.abs() - he.z);
    let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
    let inside = q.x.max(q.y).max(q.z).min(0.0);
    outside + inside
}

/// Wall mid-surface endpoints in the (rho, z) half-plane.
fn bowl_wall_segment(base_radius: f64, top_radius: f64, height: f64, wall: f64) -> ([f64; 2], [f64; 2]) {
    (
        [base_radius, -0.5 * height + 0.5 * wall],
        [top_radius, 0.5 * height - 0.5 * wall],
    )
}

fn dist_point_segment_2d(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> (f64, f64) {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0);
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
    ((d[0] * d[0] + d[1] * d[1]).sqrt(), t)
}

fn sdf_bowl(p: &Vector3<f64>, base_radius: f64, top_radius: f64, height: f64, wall: f64) -> f64 {
    let rho = (p.x * p.x + p.y * p.y).sqrt();
    let (a, b) = bowl_wall_segment(base_radius, top_radius, height, wall);
    let (wall_dist, _) = dist_point_segment_2d([rho, p.z], a, b);
    let wall_sdf = wall_dist - 0.5 * wall;
    // Base slab: cylinder of radius base_radius, thickness wall, flush with
    // the shape's bottom.
    let base_center_z = -0.5 * height + 0.5 * wall;
    let base_sdf = sdf_capped_cylinder(
        &Vector3::new(p.x, p.y, p.z - base_center_z),
        base_radius,
        wall,
    );
    wall_sdf.min(base_sdf)
}

fn sdf_local(shape: &ObjectShape, p: &Vector3<f64>) -> f64 {
    match *shape {
        ObjectShape::Cylinder { radius, height } => sdf_capped_cylinder(p, radius, height),
        ObjectShape::Box { half_extents } => sdf_box(p, &half_extents),
        ObjectShape::Bowl {
            base_radius,
            top_radius,
            height,
            wall,
        } => sdf_bowl(p, base_radius, top_radius, height, wall),
    }
}

/// Signed distance from `point` (world) to the surface of the posed shape.
pub fn signed_distance(shape: &ObjectShape, object_pose: &Pose, point: &Vector3<f64>) -> f64 {
    sdf_local(shape, &object_pose.inverse_transform_point(point))
}

/// Outward surface normal via central differences on the SDF.
pub fn surface_normal(shape: &ObjectShape, object_pose: &Pose, point: &Vector3<f64>) -> Vector3<f64> {
    let h = 1e-6;
    let mut g = Vector3::zeros();
    for k in 0..3 {
        let mut plus = *point;
        let mut minus = *point;
        plus[k] += h;
        minus[k] -= h;
        g[k] = signed_distance(shape, object_pose, &plus)
            - signed_distance(shape, object_pose, &minus);
    }
    let n = g.norm();
    if n < 1e-12 {
        Vector3::z()
    } else {
        g / n
    }
}

/// Classifies which side of the bowl wall a (world) point is nearest.
/// Panics if the shape is not a bowl.
pub fn bowl_region(shape: &ObjectShape, object_pose: &Pose, point: &Vector3<f64>) -> BowlRegion {
    let ObjectShape::Bowl {
        base_radius,
        top_radius,
        height,
        wall,
    } = *shape
    else {
        panic!("bowl_region called on a non-bowl shape");
    };
    let p = object_pose.inverse_transform_point(point);
    let rho = (p.x * p.x + p.y * p.y).sqrt();
    let (a, b) = bowl_wall_segment(base_radius, top_radius, height, wall);
    let (wall_dist, t) = dist_point_segment_2d([rho, p.z], a, b);
    let base_center_z = -0.5 * height + 0.5 * wall;
    let base_dist = sdf_capped_cylinder(&Vector3::new(p.x, p.y, p.z - base_center_z), base_radius, wall);
    if base_dist < wall_dist - 0.5 * wall {
        // Nearest the base slab: cavity floor counts as inner.
        return if p.z > base_center_z {
            BowlRegion::Inner
        } else {
            BowlRegion::OuterOrRim
        };
    }
    if t >= 0.995 {
        return BowlRegion::OuterOrRim; // rim
    }
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [rho - a[0], p.z - a[1]];
    let cross = ab[0] * ap[1] - ab[1] * ap[0];
    if cross > 0.0 {
        BowlRegion::Inner
    } else {
        BowlRegion::OuterOrRim
    }
}

fn lowest_circle_z(center: &Vector3<f64>, radius: f64, axis: &Vector3<f64>) -> f64 {
    // Lowest z on a circle of given radius lying in the plane normal to axis.
    center.z - radius * (1.0 - axis.z * axis.z).max(0.0).sqrt()
}

/// Lowest world-z point on the posed shape's surface. Exact per primitive:
/// extremes of cylinders and cones lie on their boundary circles, of boxes
/// on their corners, and offsetting by a ball lowers the minimum by the
/// offset radius.
pub fn lowest_surface_z(shape: &ObjectShape, pose: &Pose) -> f64 {
    let r = pose.rotation_matrix().expect("valid pose rotation");
    let axis = r * Vector3::z();
    match *shape {
        ObjectShape::Cylinder { radius, height } => {
            let mut lo = f64::INFINITY;
            for s in [-0.5, 0.5] {
                let c = pose.transform_point(&Vector3::new(0.0, 0.0, s * height));
                lo = lo.min(lowest_circle_z(&c, radius, &axis));
            }
            lo
        }
        ObjectShape::Box { half_extents } => {
            let mut lo = f64::INFINITY;
            for sx in [-1.0, 1.0] {
                for sy in [-1.0, 1.0] {
                    for sz in [-1.0, 1.0] {
                        let corner = Vector3::new(
                            sx * half_extents.x,
                            sy * half_extents.y,
                            sz * half_extents.z,
                        );
                        lo = lo.min(pose.transform_point(&corner).z);
                    }
                }
            }
            lo
        }
        ObjectShape::Bowl {
            base_radius,
            top_radius,
            height,
            wall,
        } => {
            let (a, b) = bowl_wall_segment(base_radius, top_radius, height, wall);
            let mut lo = f64::INFINITY;
            for &(rho, z) in &[(a[0], a[1]), (b[0], b[1])] {
                let c = pose.transform_point(&Vector3::new(0.0, 0.0, z));
                lo = lo.min(lowest_circle_z(&c, rho, &axis) - 0.5 * wall);
            }
            // Base slab circles.
            let base_center_z = -0.5 * height + 0.5 * wall;
            for s in [-0.5, 0.5] {
                let c = pose.transform_point(&Vector3::new(0.0, 0.0, base_center_z + s * wall));
                lo = lo.min(lowest_circle_z(&c, base_radius, &axis));
            }
            lo
        }
    }
}

/// Translates the pose vertically so the shape rests on the plane.
pub fn rest_on_plane(shape: &ObjectShape, pose: &Pose, plane_z: f64) -> Pose {
    let lo = lowest_surface_z(shape, pose);
    let mut rested = *pose;
    rested.position.z += plane_z - lo;
    rested
}
