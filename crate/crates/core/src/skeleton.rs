//! Articulation structure shared by every other module: joints, the bone
//! tree, per-bone attributes and joint limits, and the 2D/3D pose types.
//!
//! Poses in 2D live in normalized image coordinates `[-1, 1]²` with
//! `(-1, -1)` at the top-left corner. Pixel space appears only at I/O and
//! evaluation boundaries through [`pose2d_to_pixels`] and
//! [`pixels_to_pose2d`].

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

const MOUSE18_TOML: &str = include_str!("../topologies/mouse18.toml");
const HORSE_TOML: &str = include_str!("../topologies/horse.toml");

/// Names of the topologies compiled into the library.
pub const BUILTIN_TOPOLOGIES: &[&str] = &["mouse18", "horse"];

/// An angular interval in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleRange {
    pub min: f64,
    pub max: f64,
}

impl AngleRange {
    pub fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.min + self.max)
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.max - self.min)
    }

    pub fn clamp(&self, a: f64) -> f64 {
        a.clamp(self.min, self.max)
    }

    pub fn contains(&self, a: f64) -> bool {
        a >= self.min && a <= self.max
    }
}

/// Per-bone rotational limits, indexed like [`SkeletonTopology::bones`].
///
/// Each bone has two degrees of freedom relative to its parent bone
/// direction: azimuth (turning toward the traveller's left) and elevation
/// (tilting toward the parent frame's up axis).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointLimits {
    pub azimuth: Vec<AngleRange>,
    pub elevation: Vec<AngleRange>,
}

impl JointLimits {
    pub fn validate(&self, topology: &SkeletonTopology) -> Result<()> {
        let n = topology.bone_count();
        if self.azimuth.len() != n || self.elevation.len() != n {
            return Err(Error::Topology(format!(
                "limits cover {}/{} bones, topology `{}` has {n}",
                self.azimuth.len(),
                self.elevation.len(),
                topology.name
            )));
        }
        for (b, (az, el)) in self.azimuth.iter().zip(&self.elevation).enumerate() {
            for r in [az, el] {
                if !(r.min <= r.max) || r.min <= -PI || r.max > PI {
                    return Err(Error::Topology(format!(
                        "limit [{}, {}] on bone to `{}` must satisfy -pi < min <= max <= pi",
                        r.min,
                        r.max,
                        topology.joint_name(topology.bones[b].child)
                    )));
                }
            }
        }
        Ok(())
    }

    /// Unconstrained limits: azimuth and elevation may take any value.
    pub fn free(bones: usize) -> Self {
        let full = AngleRange::new(-PI + 1e-9, PI);
        Self {
            azimuth: vec![full; bones],
            elevation: vec![AngleRange::new(-PI / 2.0, PI / 2.0); bones],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Bone {
    pub parent: usize,
    pub child: usize,
}

/// Optional per-bone attributes in a topology file, keyed by child joint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoneAttributes {
    /// Nominal bone length in model units.
    pub length: Option<f64>,
    /// Raster group; bones of a group share a skeleton-image channel.
    pub group: Option<String>,
    /// Limb this bone belongs to; selects the gait phase offset.
    pub limb: Option<String>,
    /// Capsule radius for synthetic rendering, in model units.
    pub radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitSpec {
    pub azimuth: [f64; 2],
    pub elevation: [f64; 2],
}

/// On-disk topology description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub name: String,
    /// Defaults to the first joint.
    #[serde(default)]
    pub root: Option<String>,
    pub joints: Vec<String>,
    pub bones: Vec<[String; 2]>,
    #[serde(default)]
    pub limits: BTreeMap<String, LimitSpec>,
    #[serde(default)]
    pub attributes: BTreeMap<String, BoneAttributes>,
}

impl TopologyConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_toml(&text)
    }

    pub fn builtin(name: &str) -> Option<Self> {
        let text = match name {
            "mouse18" => MOUSE18_TOML,
            "horse" => HORSE_TOML,
            _ => return None,
        };
        Some(Self::from_toml(text).expect("built-in topology parses"))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// Validated joint set and bone tree.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTopology {
    pub name: String,
    pub joints: Vec<String>,
    /// Bones oriented parent → child, in the order of the source config.
    pub bones: Vec<Bone>,
    pub root: usize,
    /// Nominal length per bone.
    pub lengths: Vec<f64>,
    pub groups: Vec<String>,
    pub limbs: Vec<Option<String>>,
    pub radii: Vec<f64>,
    pub limits: JointLimits,
    /// Bone indices in breadth-first order from the root.
    fk_order: Vec<usize>,
    /// `parent_bone[b]` is the bone ending at `bones[b].parent`, if any.
    parent_bone: Vec<Option<usize>>,
}

impl SkeletonTopology {
    /// Resolves a built-in name (`mouse18`, `horse`) or a path to a TOML file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match TopologyConfig::builtin(name_or_path) {
            Some(cfg) => build_topology(&cfg),
            None => build_topology(&TopologyConfig::load(Path::new(name_or_path))?),
        }
    }

    pub fn mouse18() -> Self {
        Self::resolve("mouse18").expect("built-in topology is valid")
    }

    pub fn horse() -> Self {
        Self::resolve("horse").expect("built-in topology is valid")
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn bone_count(&self) -> usize {
        self.bones.len()
    }

    pub fn joint_name(&self, id: usize) -> &str {
        &self.joints[id]
    }

    pub fn joint_id(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j == name)
    }

    pub fn fk_order(&self) -> &[usize] {
        &self.fk_order
    }

    pub fn parent_bone(&self, bone: usize) -> Option<usize> {
        self.parent_bone[bone]
    }

    /// Distinct group names in order of first appearance.
    pub fn group_names(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for g in &self.groups {
            if !out.contains(g) {
                out.push(g.clone());
            }
        }
        out
    }

    /// Distinct limb names in order of first appearance.
    pub fn limb_names(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for l in self.limbs.iter().flatten() {
            if !out.contains(l) {
                out.push(l.clone());
            }
        }
        out
    }

    pub fn to_config(&self) -> TopologyConfig {
        let mut limits = BTreeMap::new();
        let mut attributes = BTreeMap::new();
        for (b, bone) in self.bones.iter().enumerate() {
            let child = self.joints[bone.child].clone();
            limits.insert(
                child.clone(),
                LimitSpec {
                    azimuth: [self.limits.azimuth[b].min, self.limits.azimuth[b].max],
                    elevation: [self.limits.elevation[b].min, self.limits.elevation[b].max],
                },
            );
            attributes.insert(
                child,
                BoneAttributes {
                    length: Some(self.lengths[b]),
                    group: Some(self.groups[b].clone()),
                    limb: self.limbs[b].clone(),
                    radius: Some(self.radii[b]),
                },
            );
        }
        TopologyConfig {
            name: self.name.clone(),
            root: Some(self.joints[self.root].clone()),
            joints: self.joints.clone(),
            bones: self
                .bones
                .iter()
                .map(|b| [self.joints[b.parent].clone(), self.joints[b.child].clone()])
                .collect(),
            limits,
            attributes,
        }
    }
}

/// Validates a topology config and orients its bones away from the root.
pub fn build_topology(cfg: &TopologyConfig) -> Result<SkeletonTopology> {
    let n = cfg.joints.len();
    if n < 2 {
        return Err(Error::Topology(format!(
            "`{}` needs at least 2 joints, got {n}",
            cfg.name
        )));
    }
    let mut index = HashMap::new();
    for (i, j) in cfg.joints.iter().enumerate() {
        if index.insert(j.as_str(), i).is_some() {
            return Err(Error::Topology(format!("duplicate joint name `{j}`")));
        }
    }
    let lookup = |name: &str| {
        index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Topology(format!("bone endpoint `{name}` is not a joint")))
    };
    let root = match &cfg.root {
        Some(r) => lookup(r)?,
        None => 0,
    };

    // Union-find rejects the first edge closing a cycle.
    let mut uf: Vec<usize> = (0..n).collect();
    fn find(uf: &mut [usize], mut x: usize) -> usize {
        while uf[x] != x {
            uf[x] = uf[uf[x]];
            x = uf[x];
        }
        x
    }
    let mut edges = Vec::with_capacity(cfg.bones.len());
    for [a, b] in &cfg.bones {
        let (ia, ib) = (lookup(a)?, lookup(b)?);
        if ia == ib {
            return Err(Error::Topology(format!("self-loop bone ({a}, {b})")));
        }
        let (ra, rb) = (find(&mut uf, ia), find(&mut uf, ib));
        if ra == rb {
            return Err(Error::Topology(format!(
                "bone ({a}, {b}) closes a cycle"
            )));
        }
        uf[ra] = rb;
        edges.push((ia, ib));
    }
    if edges.len() != n - 1 {
        // Acyclic with too few edges: report a joint that is cut off.
        let r = find(&mut uf, root);
        let orphan = (0..n).find(|&j| find(&mut uf, j) != r).unwrap_or(root);
        return Err(Error::Topology(format!(
            "bones do not connect joint `{}` to root `{}` ({} bones for {n} joints)",
            cfg.joints[orphan],
            cfg.joints[root],
            edges.len()
        )));
    }

    // Orient edges by BFS from the root.
    let mut adj = vec![Vec::new(); n];
    for (e, &(a, b)) in edges.iter().enumerate() {
        adj[a].push((b, e));
        adj[b].push((a, e));
    }
    let mut bones = vec![Bone { parent: 0, child: 0 }; edges.len()];
    let mut bone_into = vec![None; n];
    let mut seen = vec![false; n];
    let mut fk_order = Vec::with_capacity(edges.len());
    let mut queue = VecDeque::from([root]);
    seen[root] = true;
    while let Some(j) = queue.pop_front() {
        for &(k, e) in &adj[j] {
            if !seen[k] {
                seen[k] = true;
                bones[e] = Bone { parent: j, child: k };
                bone_into[k] = Some(e);
                fk_order.push(e);
                queue.push_back(k);
            }
        }
    }
    let parent_bone = bones.iter().map(|b| bone_into[b.parent]).collect();

    let mut lengths = vec![1.0; bones.len()];
    let mut groups = vec!["body".to_string(); bones.len()];
    let mut limbs = vec![None; bones.len()];
    let mut radii = vec![0.1; bones.len()];
    let mut limits = JointLimits {
        azimuth: vec![AngleRange::new(0.0, 0.0); bones.len()],
        elevation: vec![AngleRange::new(0.0, 0.0); bones.len()],
    };
    for (name, attr) in &cfg.attributes {
        let b = child_bone(name, &index, &bone_into, "attributes")?;
        if let Some(l) = attr.length {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::Topology(format!("bone to `{name}` has length {l}")));
            }
            lengths[b] = l;
        }
        if let Some(g) = &attr.group {
            groups[b] = g.clone();
        }
        limbs[b] = attr.limb.clone();
        if let Some(r) = attr.radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Topology(format!("bone to `{name}` has radius {r}")));
            }
            radii[b] = r;
        }
    }
    for (name, spec) in &cfg.limits {
        let b = child_bone(name, &index, &bone_into, "limits")?;
        limits.azimuth[b] = AngleRange::new(spec.azimuth[0], spec.azimuth[1]);
        limits.elevation[b] = AngleRange::new(spec.elevation[0], spec.elevation[1]);
    }

    let topo = SkeletonTopology {
        name: cfg.name.clone(),
        joints: cfg.joints.clone(),
        bones,
        root,
        lengths,
        groups,
        limbs,
        radii,
        limits,
        fk_order,
        parent_bone,
    };
    topo.limits.validate(&topo)?;
    Ok(topo)
}

fn child_bone(
    name: &str,
    index: &HashMap<&str, usize>,
    bone_into: &[Option<usize>],
    table: &str,
) -> Result<usize> {
    let j = *index
        .get(name)
        .ok_or_else(|| Error::Topology(format!("{table}: unknown joint `{name}`")))?;
    bone_into[j].ok_or_else(|| {
        Error::Topology(format!("{table}: `{name}` is the root and has no incoming bone"))
    })
}

/// A 2D pose in normalized image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose2D {
    pub coords: Vec<[f64; 2]>,
    pub topology: String,
}

impl Pose2D {
    pub fn new(topology: &SkeletonTopology, coords: Vec<[f64; 2]>) -> Result<Self> {
        let p = Self {
            coords,
            topology: topology.name.clone(),
        };
        p.validate(topology)?;
        Ok(p)
    }

    pub fn validate(&self, topology: &SkeletonTopology) -> Result<()> {
        if self.coords.len() != topology.joint_count() {
            return Err(Error::Pose(format!(
                "pose has {} joints, topology `{}` has {}",
                self.coords.len(),
                topology.name,
                topology.joint_count()
            )));
        }
        if let Some(j) = self
            .coords
            .iter()
            .position(|c| !c[0].is_finite() || !c[1].is_finite())
        {
            return Err(Error::Pose(format!(
                "joint `{}` has non-finite coordinates",
                topology.joint_name(j)
            )));
        }
        Ok(())
    }

    /// Flattened `[u0, v0, u1, v1, ...]`.
    pub fn flat(&self) -> Vec<f64> {
        self.coords.iter().flat_map(|c| [c[0], c[1]]).collect()
    }

    pub fn from_flat(topology: &SkeletonTopology, flat: &[f64]) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(Error::Pose(format!("odd coordinate count {}", flat.len())));
        }
        Self::new(
            topology,
            flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        )
    }
}

/// A 3D pose in model units.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose3D {
    pub coords: Vec<[f64; 3]>,
    pub topology: String,
}

impl Pose3D {
    /// Largest deviation of any bone length from `lengths`.
    pub fn rigidity_error(&self, topology: &SkeletonTopology, lengths: &[f64]) -> f64 {
        topology
            .bones
            .iter()
            .zip(lengths)
            .map(|(b, &l)| {
                (dist3(self.coords[b.parent], self.coords[b.child]) - l).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Current length of every bone.
    pub fn bone_lengths(&self, topology: &SkeletonTopology) -> Vec<f64> {
        topology
            .bones
            .iter()
            .map(|b| dist3(self.coords[b.parent], self.coords[b.child]))
            .collect()
    }
}

pub(crate) fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Maps normalized coordinates to pixels: `u ∈ [-1, 1] → x ∈ [0, width]`.
pub fn pose2d_to_pixels(pose: &Pose2D, width: u32, height: u32) -> Vec<[f64; 2]> {
    let (w, h) = (width as f64, height as f64);
    pose.coords
        .iter()
        .map(|&[u, v]| [(u + 1.0) * 0.5 * w, (v + 1.0) * 0.5 * h])
        .collect()
}

/// Inverse of [`pose2d_to_pixels`].
pub fn pixels_to_pose2d(
    topology: &SkeletonTopology,
    pixels: &[[f64; 2]],
    width: u32,
    height: u32,
) -> Result<Pose2D> {
    let (w, h) = (width as f64, height as f64);
    Pose2D::new(
        topology,
        pixels
            .iter()
            .map(|&[x, y]| [2.0 * x / w - 1.0, 2.0 * y / h - 1.0])
            .collect(),
    )
}
