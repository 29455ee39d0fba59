//! Parametric kinematic tree: forward kinematics, analytic positional
//! Jacobians and joint limits.
//!
//! A model is a tree of joints rooted at a floating base. Every non-root
//! joint hangs off its parent through exactly one bone; each joint applies
//! its scalar DOFs (revolute or translational) in order after the bone
//! offset. Keypoints sit at joint origins.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The bundled default profile document.
pub const DEFAULT_PROFILE: &str = include_str!("../profiles/default_skeleton.toml");

/// Number of DOFs of the floating base (3 translations, 3 rotations).
pub const BASE_DOF_COUNT: usize = 6;

/// One of the twelve tracked anatomical keypoints.
///
/// The discriminant is the stable slot index used by the wire format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum KeypointLabel {
    #[serde(rename = "l_shoulder")]
    LeftShoulder = 0,
    #[serde(rename = "r_shoulder")]
    RightShoulder = 1,
    #[serde(rename = "l_elbow")]
    LeftElbow = 2,
    #[serde(rename = "r_elbow")]
    RightElbow = 3,
    #[serde(rename = "l_wrist")]
    LeftWrist = 4,
    #[serde(rename = "r_wrist")]
    RightWrist = 5,
    #[serde(rename = "l_hip")]
    LeftHip = 6,
    #[serde(rename = "r_hip")]
    RightHip = 7,
    #[serde(rename = "l_knee")]
    LeftKnee = 8,
    #[serde(rename = "r_knee")]
    RightKnee = 9,
    #[serde(rename = "l_ankle")]
    LeftAnkle = 10,
    #[serde(rename = "r_ankle")]
    RightAnkle = 11,
}

impl KeypointLabel {
    pub const COUNT: usize = 12;

    pub const ALL: [KeypointLabel; 12] = [
        KeypointLabel::LeftShoulder,
        KeypointLabel::RightShoulder,
        KeypointLabel::LeftElbow,
        KeypointLabel::RightElbow,
        KeypointLabel::LeftWrist,
        KeypointLabel::RightWrist,
        KeypointLabel::LeftHip,
        KeypointLabel::RightHip,
        KeypointLabel::LeftKnee,
        KeypointLabel::RightKnee,
        KeypointLabel::LeftAnkle,
        KeypointLabel::RightAnkle,
    ];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            KeypointLabel::LeftShoulder => "l_shoulder",
            KeypointLabel::RightShoulder => "r_shoulder",
            KeypointLabel::LeftElbow => "l_elbow",
            KeypointLabel::RightElbow => "r_elbow",
            KeypointLabel::LeftWrist => "l_wrist",
            KeypointLabel::RightWrist => "r_wrist",
            KeypointLabel::LeftHip => "l_hip",
            KeypointLabel::RightHip => "r_hip",
            KeypointLabel::LeftKnee => "l_knee",
            KeypointLabel::RightKnee => "r_knee",
            KeypointLabel::LeftAnkle => "l_ankle",
            KeypointLabel::RightAnkle => "r_ankle",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|l| l.name() == name)
    }
}

impl fmt::Display for KeypointLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// World positions of all twelve keypoints, indexed by [`KeypointLabel::index`].
pub type Keypoints = [Vector3<f64>; KeypointLabel::COUNT];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SkeletonError {
    #[error("malformed skeleton document: {0}")]
    Parse(String),
    #[error("{path}: {reason}")]
    Invalid { path: String, reason: String },
    #[error("{path}: kinematic tree has a cycle through joint `{joint}`")]
    Cycle { path: String, joint: String },
    #[error("{path}: limit ordering violated ({lower} > {upper})")]
    LimitOrder { path: String, lower: f64, upper: f64 },
    #[error("DOF vector has length {got}, model has {expected} DOFs")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("keypoint `{0}` is not mapped onto the tree")]
    UnknownLabel(String),
    #[error("unknown bone segment `{0}`")]
    UnknownSegment(String),
    #[error("reading {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DofKind {
    Translational,
    Revolute,
}

/// A scalar degree of freedom with position and velocity limits.
///
/// Revolute values are radians (rad/s), translational values meters (m/s).
#[derive(Debug, Clone, PartialEq)]
pub struct DofSpec {
    pub name: String,
    pub kind: DofKind,
    /// Unit axis in the frame of the owning joint.
    pub axis: Vector3<f64>,
    pub lower: f64,
    pub upper: f64,
    pub velocity_lower: f64,
    pub velocity_upper: f64,
}

impl DofSpec {
    pub fn contains(&self, value: f64) -> bool {
        value >= self.lower && value <= self.upper
    }
}

/// Rigid link between a parent joint and a child joint.
#[derive(Debug, Clone, PartialEq)]
pub struct BoneSpec {
    pub parent: String,
    pub child: String,
    /// Unit offset direction in the parent joint's frame.
    pub direction: Vector3<f64>,
    pub rest_length: f64,
    pub scale: f64,
    /// Proportion-table segment this bone belongs to.
    pub segment: String,
}

impl BoneSpec {
    pub fn length(&self) -> f64 {
        self.rest_length * self.scale
    }
}

#[derive(Debug, Clone, PartialEq)]
struct JointNode {
    name: String,
    parent: Option<usize>,
    bone: Option<usize>,
    dofs: Vec<usize>,
}

/// Validated kinematic tree.
///
/// Joints are stored in topological order (root first). The first
/// [`BASE_DOF_COUNT`] DOFs belong to the floating base.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonModel {
    name: String,
    nominal_height: f64,
    dofs: Vec<DofSpec>,
    bones: Vec<BoneSpec>,
    joints: Vec<JointNode>,
    keypoint_joint: [usize; KeypointLabel::COUNT],
    /// DOF indices on the path from the root to each keypoint.
    keypoint_paths: Vec<Vec<usize>>,
    base_pose: [f64; BASE_DOF_COUNT],
}

/// Per-DOF world axes and origins together with keypoint positions,
/// evaluated at one configuration.
#[derive(Debug, Clone)]
pub struct KinematicState {
    pub keypoints: Keypoints,
    dof_axes: Vec<Vector3<f64>>,
    dof_origins: Vec<Vector3<f64>>,
    dof_kinds: Vec<DofKind>,
}

impl KinematicState {
    /// Jacobian column block (3 entries) of `label` with respect to DOF `dof`.
    #[inline]
    pub fn column(&self, label: KeypointLabel, dof: usize) -> Vector3<f64> {
        match self.dof_kinds[dof] {
            DofKind::Translational => self.dof_axes[dof],
            DofKind::Revolute => self.dof_axes[dof]
                .cross(&(self.keypoints[label.index()] - self.dof_origins[dof])),
        }
    }
}

// ---------------------------------------------------------------------------
// Document schema

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SkeletonDocument {
    version: u32,
    name: String,
    nominal_height: f64,
    base: BaseDocument,
    dofs: Vec<DofDocument>,
    joints: Vec<JointDocument>,
    bones: Vec<BoneDocument>,
    keypoints: BTreeMap<String, String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BaseDocument {
    joint: String,
    translation: [f64; 3],
    orientation: [f64; 3],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DofDocument {
    name: String,
    kind: DofKind,
    axis: [f64; 3],
    limits: Option<[f64; 2]>,
    limits_deg: Option<[f64; 2]>,
    velocity: Option<[f64; 2]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointDocument {
    name: String,
    #[serde(default)]
    dofs: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoneDocument {
    parent: String,
    child: String,
    direction: [f64; 3],
    rest_length: f64,
    segment: String,
    scale: Option<f64>,
}

fn invalid(path: impl Into<String>, reason: impl Into<String>) -> SkeletonError {
    SkeletonError::Invalid {
        path: path.into(),
        reason: reason.into(),
    }
}

fn unit_axis(path: &str, raw: [f64; 3]) -> Result<Vector3<f64>, SkeletonError> {
    let v = Vector3::from(raw);
    if !v.iter().all(|c| c.is_finite()) {
        return Err(invalid(path, "axis has non-finite components"));
    }
    if (v.norm() - 1.0).abs() > 1e-9 {
        return Err(invalid(path, format!("axis must have unit norm, got {}", v.norm())));
    }
    Ok(v)
}

impl SkeletonModel {
    /// The bundled 26-DOF profile.
    pub fn default_profile() -> Self {
        Self::from_toml_str(DEFAULT_PROFILE).expect("bundled skeleton profile is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SkeletonError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SkeletonError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, SkeletonError> {
        let doc: SkeletonDocument =
            toml::from_str(text).map_err(|e| SkeletonError::Parse(e.to_string()))?;
        Self::from_document(doc)
    }

    fn from_document(doc: SkeletonDocument) -> Result<Self, SkeletonError> {
        if doc.version != 1 {
            return Err(invalid("version", format!("unsupported version {}", doc.version)));
        }
        if !(doc.nominal_height.is_finite() && doc.nominal_height > 0.0) {
            return Err(invalid("nominal_height", "must be positive"));
        }

        let mut dofs = Vec::with_capacity(doc.dofs.len());
        let mut dof_index = HashMap::new();
        for (i, d) in doc.dofs.iter().enumerate() {
            let path = format!("dofs[{i}]");
            if dof_index.insert(d.name.clone(), i).is_some() {
                return Err(invalid(format!("{path}.name"), format!("duplicate DOF `{}`", d.name)));
            }
            let axis = unit_axis(&format!("{path}.axis"), d.axis)?;
            let (lower, upper) = match (d.limits, d.limits_deg) {
                (Some(_), Some(_)) => {
                    return Err(invalid(&path, "give either `limits` or `limits_deg`, not both"))
                }
                (Some([lo, hi]), None) => (lo, hi),
                (None, Some([lo, hi])) => (lo.to_radians(), hi.to_radians()),
                (None, None) => (f64::NEG_INFINITY, f64::INFINITY),
            };
            if lower.is_nan() || upper.is_nan() || lower > upper {
                return Err(SkeletonError::LimitOrder {
                    path: format!("{path}.limits"),
                    lower,
                    upper,
                });
            }
            let (velocity_lower, velocity_upper) = match d.velocity {
                Some([lo, hi]) => (lo, hi),
                None => (f64::NEG_INFINITY, f64::INFINITY),
            };
            if velocity_lower.is_nan() || velocity_upper.is_nan() || velocity_lower > 0.0 || velocity_upper < 0.0 {
                return Err(SkeletonError::LimitOrder {
                    path: format!("{path}.velocity"),
                    lower: velocity_lower,
                    upper: velocity_upper,
                });
            }
            dofs.push(DofSpec {
                name: d.name.clone(),
                kind: d.kind,
                axis,
                lower,
                upper,
                velocity_lower,
                velocity_upper,
            });
        }

        let mut joint_index = HashMap::new();
        for (i, j) in doc.joints.iter().enumerate() {
            if joint_index.insert(j.name.clone(), i).is_some() {
                return Err(invalid(format!("joints[{i}].name"), format!("duplicate joint `{}`", j.name)));
            }
        }

        let mut bones = Vec::with_capacity(doc.bones.len());
        let mut parent_of: Vec<Option<(usize, usize)>> = vec![None; doc.joints.len()];
        for (i, b) in doc.bones.iter().enumerate() {
            let path = format!("bones[{i}]");
            if b.parent == b.child {
                return Err(SkeletonError::Cycle {
                    path: format!("{path}.child"),
                    joint: b.child.clone(),
                });
            }
            let p = *joint_index
                .get(&b.parent)
                .ok_or_else(|| invalid(format!("{path}.parent"), format!("unknown joint `{}`", b.parent)))?;
            let c = *joint_index
                .get(&b.child)
                .ok_or_else(|| invalid(format!("{path}.child"), format!("unknown joint `{}`", b.child)))?;
            if parent_of[c].is_some() {
                return Err(invalid(
                    format!("{path}.child"),
                    format!("joint `{}` already has a parent bone", b.child),
                ));
            }
            parent_of[c] = Some((p, i));
            let direction = unit_axis(&format!("{path}.direction"), b.direction)?;
            if !(b.rest_length.is_finite() && b.rest_length >= 0.0) {
                return Err(invalid(format!("{path}.rest_length"), "must be finite and non-negative"));
            }
            let scale = b.scale.unwrap_or(1.0);
            if !(scale.is_finite() && scale > 0.0) {
                return Err(invalid(format!("{path}.scale"), "bone scale must be positive"));
            }
            bones.push(BoneSpec {
                parent: b.parent.clone(),
                child: b.child.clone(),
                direction,
                rest_length: b.rest_length,
                scale,
                segment: b.segment.clone(),
            });
        }

        let roots: Vec<usize> = (0..doc.joints.len()).filter(|&j| parent_of[j].is_none()).collect();
        let root = match roots.as_slice() {
            [r] => *r,
            [] => {
                return Err(SkeletonError::Cycle {
                    path: "bones".into(),
                    joint: doc.joints.first().map(|j| j.name.clone()).unwrap_or_default(),
                })
            }
            _ => {
                let names: Vec<&str> = roots.iter().map(|&r| doc.joints[r].name.as_str()).collect();
                return Err(invalid("joints", format!("expected a single root, found {names:?}")));
            }
        };
        if doc.joints[root].name != doc.base.joint {
            return Err(invalid(
                "base.joint",
                format!("root joint is `{}`, not `{}`", doc.joints[root].name, doc.base.joint),
            ));
        }

        // Topological order from the root; anything unreachable sits on a cycle.
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); doc.joints.len()];
        for (c, entry) in parent_of.iter().enumerate() {
            if let Some((p, _)) = entry {
                children[*p].push(c);
            }
        }
        let mut order = Vec::with_capacity(doc.joints.len());
        let mut stack = vec![root];
        while let Some(j) = stack.pop() {
            order.push(j);
            for &c in children[j].iter().rev() {
                stack.push(c);
            }
        }
        if order.len() != doc.joints.len() {
            let missing = (0..doc.joints.len()).find(|j| !order.contains(j)).unwrap_or(0);
            return Err(SkeletonError::Cycle {
                path: "bones".into(),
                joint: doc.joints[missing].name.clone(),
            });
        }
        let mut position_in_order = vec![0usize; doc.joints.len()];
        for (k, &j) in order.iter().enumerate() {
            position_in_order[j] = k;
        }

        let mut dof_owner: Vec<Option<String>> = vec![None; dofs.len()];
        let mut joints = Vec::with_capacity(order.len());
        for &j in &order {
            let jd = &doc.joints[j];
            let mut jdofs = Vec::with_capacity(jd.dofs.len());
            for (k, name) in jd.dofs.iter().enumerate() {
                let path = format!("joints[{j}].dofs[{k}]");
                let d = *dof_index
                    .get(name)
                    .ok_or_else(|| invalid(&path, format!("unknown DOF `{name}`")))?;
                if let Some(owner) = &dof_owner[d] {
                    return Err(invalid(&path, format!("DOF `{name}` already used by joint `{owner}`")));
                }
                dof_owner[d] = Some(jd.name.clone());
                jdofs.push(d);
            }
            joints.push(JointNode {
                name: jd.name.clone(),
                parent: parent_of[j].map(|(p, _)| position_in_order[p]),
                bone: parent_of[j].map(|(_, b)| b),
                dofs: jdofs,
            });
        }
        if let Some(d) = dof_owner.iter().position(Option::is_none) {
            return Err(invalid(format!("dofs[{d}]"), format!("DOF `{}` is not attached to a joint", dofs[d].name)));
        }

        // Floating base: the root owns DOFs 0..6, three translations then three rotations.
        let root_dofs = &joints[0].dofs;
        let expected: Vec<usize> = (0..BASE_DOF_COUNT).collect();
        if root_dofs != &expected {
            return Err(invalid(
                format!("joints[{root}].dofs"),
                "root joint must own the first six DOFs (floating base)",
            ));
        }
        for (i, dof) in dofs.iter().take(BASE_DOF_COUNT).enumerate() {
            let want = if i < 3 { DofKind::Translational } else { DofKind::Revolute };
            if dof.kind != want {
                return Err(invalid(format!("dofs[{i}].kind"), "base DOFs are 3 translational then 3 revolute"));
            }
        }

        let mut keypoint_joint = [usize::MAX; KeypointLabel::COUNT];
        for (label_name, joint_name) in &doc.keypoints {
            let path = format!("keypoints.{label_name}");
            let label = KeypointLabel::from_name(label_name)
                .ok_or_else(|| invalid(&path, format!("unknown keypoint label `{label_name}`")))?;
            let j = *joint_index
                .get(joint_name)
                .ok_or_else(|| invalid(&path, format!("unknown joint `{joint_name}`")))?;
            keypoint_joint[label.index()] = position_in_order[j];
        }
        if let Some(missing) = keypoint_joint.iter().position(|&j| j == usize::MAX) {
            return Err(invalid(
                "keypoints",
                format!("label `{}` is not mapped", KeypointLabel::ALL[missing]),
            ));
        }

        let keypoint_paths = keypoint_joint
            .iter()
            .map(|&j| {
                let mut path = Vec::new();
                let mut cur = Some(j);
                while let Some(node) = cur {
                    path.extend(joints[node].dofs.iter().copied());
                    cur = joints[node].parent;
                }
                path.sort_unstable();
                path
            })
            .collect();

        let t = doc.base.translation;
        let o = doc.base.orientation;
        let base_pose = [t[0], t[1], t[2], o[0], o[1], o[2]];
        if !base_pose.iter().all(|v| v.is_finite()) {
            return Err(invalid("base", "base pose must be finite"));
        }

        Ok(SkeletonModel {
            name: doc.name,
            nominal_height: doc.nominal_height,
            dofs,
            bones,
            joints,
            keypoint_joint,
            keypoint_paths,
            base_pose,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Stature (meters) at which the rest lengths were derived.
    pub fn nominal_height(&self) -> f64 {
        self.nominal_height
    }

    pub fn dof_count(&self) -> usize {
        self.dofs.len()
    }

    pub fn dofs(&self) -> &[DofSpec] {
        &self.dofs
    }

    pub fn dof_index(&self, name: &str) -> Option<usize> {
        self.dofs.iter().position(|d| d.name == name)
    }

    pub fn bones(&self) -> &[BoneSpec] {
        &self.bones
    }

    pub fn base_pose(&self) -> [f64; BASE_DOF_COUNT] {
        self.base_pose
    }

    #[inline]
    pub fn is_base_dof(&self, dof: usize) -> bool {
        dof < BASE_DOF_COUNT
    }

    /// DOF indices that can move `label`.
    pub fn keypoint_path(&self, label: KeypointLabel) -> &[usize] {
        &self.keypoint_paths[label.index()]
    }

    /// Rest configuration: base at `base_pose`, every joint DOF at zero
    /// (or the nearest limit when zero is outside the range).
    pub fn rest_q(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.dofs.len(),
            self.dofs.iter().enumerate().map(|(i, d)| {
                if i < BASE_DOF_COUNT {
                    self.base_pose[i]
                } else {
                    0.0f64.clamp(d.lower, d.upper)
                }
            }),
        )
    }

    pub fn lower_limits(&self) -> DVector<f64> {
        DVector::from_iterator(self.dofs.len(), self.dofs.iter().map(|d| d.lower))
    }

    pub fn upper_limits(&self) -> DVector<f64> {
        DVector::from_iterator(self.dofs.len(), self.dofs.iter().map(|d| d.upper))
    }

    /// Sum of scaled lengths of the bones belonging to `segment`.
    pub fn segment_length(&self, segment: &str) -> Option<f64> {
        let mut found = false;
        let total = self
            .bones
            .iter()
            .filter(|b| b.segment == segment)
            .inspect(|_| found = true)
            .map(BoneSpec::length)
            .sum();
        found.then_some(total)
    }

    pub fn segment_scale(&self, segment: &str) -> Option<f64> {
        self.bones.iter().find(|b| b.segment == segment).map(|b| b.scale)
    }

    pub fn segments(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for b in &self.bones {
            if !out.contains(&b.segment.as_str()) {
                out.push(&b.segment);
            }
        }
        out
    }

    pub fn set_segment_scale(&mut self, segment: &str, scale: f64) -> Result<(), SkeletonError> {
        assert!(scale.is_finite() && scale > 0.0, "bone scale must be positive");
        let mut found = false;
        for b in self.bones.iter_mut().filter(|b| b.segment == segment) {
            b.scale = scale;
            found = true;
        }
        if found {
            Ok(())
        } else {
            Err(SkeletonError::UnknownSegment(segment.to_string()))
        }
    }

    fn check_len(&self, q: &[f64]) -> Result<(), SkeletonError> {
        if q.len() != self.dofs.len() {
            return Err(SkeletonError::DimensionMismatch {
                expected: self.dofs.len(),
                got: q.len(),
            });
        }
        Ok(())
    }

    /// Full kinematic evaluation at `q`.
    pub fn kinematics(&self, q: &[f64]) -> Result<KinematicState, SkeletonError> {
        self.check_len(q)?;
        let n = self.dofs.len();
        let mut rot = vec![Matrix3::identity(); self.joints.len()];
        let mut pos = vec![Vector3::zeros(); self.joints.len()];
        let mut dof_axes = vec![Vector3::zeros(); n];
        let mut dof_origins = vec![Vector3::zeros(); n];

        // Base translation is added last so that shifting it moves every
        // point by exactly the same vector.
        let mut base_offset = Vector3::zeros();
        for (j, node) in self.joints.iter().enumerate() {
            let (mut r, mut t) = match node.parent {
                Some(p) => (rot[p], pos[p]),
                None => (Matrix3::identity(), Vector3::zeros()),
            };
            if let Some(b) = node.bone {
                let bone = &self.bones[b];
                t += r * (bone.direction * bone.length());
            }
            for &d in &node.dofs {
                let dof = &self.dofs[d];
                let axis_world = r * dof.axis;
                dof_axes[d] = axis_world;
                dof_origins[d] = t;
                match dof.kind {
                    DofKind::Translational if j == 0 => base_offset += axis_world * q[d],
                    DofKind::Translational => t += axis_world * q[d],
                    DofKind::Revolute => {
                        let local = Rotation3::from_axis_angle(&Unit::new_unchecked(dof.axis), q[d]);
                        r *= local.matrix();
                    }
                }
            }
            rot[j] = r;
            pos[j] = t;
        }

        for o in &mut dof_origins {
            *o += base_offset;
        }
        let keypoints = std::array::from_fn(|k| pos[self.keypoint_joint[k]] + base_offset);
        Ok(KinematicState {
            keypoints,
            dof_axes,
            dof_origins,
            dof_kinds: self.dofs.iter().map(|d| d.kind).collect(),
        })
    }

    /// World positions of all twelve keypoints.
    pub fn forward_kinematics(&self, q: &[f64]) -> Result<Keypoints, SkeletonError> {
        self.kinematics(q).map(|s| s.keypoints)
    }

    /// Positional Jacobian of `labels`, stacked as 3-row blocks in the given order.
    pub fn jacobian(&self, q: &[f64], labels: &[KeypointLabel]) -> Result<DMatrix<f64>, SkeletonError> {
        let state = self.kinematics(q)?;
        Ok(self.jacobian_from_state(&state, labels))
    }

    pub fn jacobian_from_state(&self, state: &KinematicState, labels: &[KeypointLabel]) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(3 * labels.len(), self.dofs.len());
        for (row, &label) in labels.iter().enumerate() {
            for &d in self.keypoint_path(label) {
                let col = state.column(label, d);
                jac.fixed_view_mut::<3, 1>(3 * row, d).copy_from(&col);
            }
        }
        jac
    }

    /// Like [`jacobian`](Self::jacobian) but resolving labels by name.
    pub fn jacobian_by_name(&self, q: &[f64], names: &[&str]) -> Result<DMatrix<f64>, SkeletonError> {
        let labels = names
            .iter()
            .map(|n| KeypointLabel::from_name(n).ok_or_else(|| SkeletonError::UnknownLabel(n.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        self.jacobian(q, &labels)
    }

    /// Clip every non-base component into its position limits.
    pub fn clamp_to_limits(&self, q: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            q.len(),
            q.iter().enumerate().map(|(i, &v)| match self.dofs.get(i) {
                Some(d) if i >= BASE_DOF_COUNT => v.clamp(d.lower, d.upper),
                _ => v,
            }),
        )
    }

    /// True when every DOF of `q` is within its limits, allowing `slack`.
    pub fn within_limits(&self, q: &[f64], slack: f64) -> bool {
        q.len() == self.dofs.len()
            && self
                .dofs
                .iter()
                .zip(q)
                .all(|(d, &v)| v >= d.lower - slack && v <= d.upper + slack)
    }
}
