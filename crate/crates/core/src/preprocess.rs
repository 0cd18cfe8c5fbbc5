//! View-invariant coordinates anchored at the first frame's pelvis and spine.

use crate::data::{AnchorJoints, Dataset, SkeletonSequence};
use crate::error::{PcrpError, Result};

/// Relative tolerance on the hip vector after removing its spine component.
pub const DEGENERACY_TOLERANCE: f64 = 1e-8;

type Vec3 = [f64; 3];

/// Orthonormal body frame: columns of `rotation` are the body axes expressed
/// in camera coordinates, `origin` is the first-frame root joint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidFrame {
    /// Row-major 3×3.
    pub rotation: [[f64; 3]; 3],
    pub origin: Vec3,
}

impl RigidFrame {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            origin: [0.0; 3],
        }
    }

    pub fn column(&self, c: usize) -> Vec3 {
        [self.rotation[0][c], self.rotation[1][c], self.rotation[2][c]]
    }

    /// `Rᵀ(x − o)`; the transpose is the inverse of an orthonormal matrix.
    pub fn to_body(&self, x: Vec3) -> Vec3 {
        let d = sub(x, self.origin);
        [dot(self.column(0), d), dot(self.column(1), d), dot(self.column(2), d)]
    }

    pub fn determinant(&self) -> f64 {
        dot(self.column(0), cross(self.column(1), self.column(2)))
    }
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn scaled(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn compute_frame(seq: &SkeletonSequence, anchors: &AnchorJoints) -> Result<RigidFrame> {
    let degenerate = |reason: &str| PcrpError::DegeneratePose {
        id: seq.id.clone(),
        reason: reason.to_string(),
    };
    let root = seq.joint(0, anchors.root);
    let u1 = sub(seq.joint(0, anchors.spine), root);
    let u2 = sub(seq.joint(0, anchors.hip_left), seq.joint(0, anchors.hip_right));
    let (n1, n2) = (norm(u1), norm(u2));
    if !(n1 > 0.0) {
        return Err(degenerate("spine and root coincide"));
    }
    if !(n2 > 0.0) {
        return Err(degenerate("left and right hips coincide"));
    }
    let e1 = scaled(u1, 1.0 / n1);
    let u2_perp = sub(u2, scaled(e1, dot(u2, e1)));
    let n2_perp = norm(u2_perp);
    if !(n2_perp > DEGENERACY_TOLERANCE * n2) {
        return Err(degenerate("hip vector is parallel to the spine"));
    }
    let e2 = scaled(u2_perp, 1.0 / n2_perp);
    let c = cross(u1, e2);
    let e3 = scaled(c, 1.0 / norm(c));
    Ok(RigidFrame {
        rotation: [[e1[0], e2[0], e3[0]], [e1[1], e2[1], e3[1]], [e1[2], e2[2], e3[2]]],
        origin: root,
    })
}

/// Maps every joint of every frame, padding included, into `frame`.
pub fn apply_view_invariant(seq: &SkeletonSequence, frame: &RigidFrame) -> SkeletonSequence {
    let joints = seq
        .joints()
        .chunks(3)
        .flat_map(|p| frame.to_body([p[0], p[1], p[2]]))
        .collect();
    seq.with_joints(joints)
}

pub fn view_invariant(seq: &SkeletonSequence, anchors: &AnchorJoints) -> Result<SkeletonSequence> {
    let frame = compute_frame(seq, anchors)?;
    Ok(apply_view_invariant(seq, &frame))
}

/// Transforms every sequence of a dataset. Fails on the first degenerate pose.
pub fn preprocess_dataset(ds: &Dataset) -> Result<Dataset> {
    let sequences = ds
        .sequences
        .iter()
        .map(|s| view_invariant(s, &ds.anchor_joints))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        sequences,
        ..ds.clone()
    })
}
