//! TS-ACAP features: rotation axes and angles resolved consistently across
//! neighboring vertices and consecutive frames, packed with the symmetric
//! stretch into a 9-vector per vertex.

mod io;
pub mod solver;

use std::f64::consts::TAU;

use crate::defgrad::{polar_decompose, rotation, DeformField, Mat3};
use crate::error::{Error, Result};
use crate::mesh::{MeshSequence, Mesh, Vec3};

pub use io::{decode_features, encode_features, read_features, write_features, FEATURE_MAGIC};
pub use solver::{
    cycle_objective, orientation_objective, solve_cycles, solve_orientations, ResolutionGraph,
};

pub const FEATURE_DIM: usize = 9;

/// Thresholds for the orientation consistency function and the solver mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolveConfig {
    /// Axes with `|ω_a·ω_b| ≤ eps1` are considered unrelated.
    pub eps1: f64,
    /// Rotations with angle below `eps2` carry no usable axis.
    pub eps2: f64,
    /// Couple consecutive frames. `false` resolves every frame on its own
    /// (plain ACAP).
    pub temporal: bool,
}

impl Default for ResolveConfig {
    fn default() -> Self {
        ResolveConfig {
            eps1: 0.5,
            eps2: 1e-3,
            temporal: true,
        }
    }
}

impl ResolveConfig {
    pub fn acap() -> Self {
        ResolveConfig {
            temporal: false,
            ..Self::default()
        }
    }
}

/// Canonical axis-angle pair with `angle ∈ [0, π]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisAngle {
    pub axis: Vec3,
    pub angle: f64,
}

/// Extracts the canonical axis and angle of a proper rotation.
///
/// The axis comes from the skew part of `R` except near `π`, where the
/// symmetric part is used and the skew part only decides the sign. At exactly
/// `π` the first non-zero axis component is made positive; the identity maps
/// to the axis `(0, 0, 1)`.
pub fn to_axis_angle(r: &Mat3, eps2: f64) -> AxisAngle {
    let w = 0.5 * Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let sin = w.norm();
    let angle = sin.atan2(cos);

    if angle >= std::f64::consts::PI - eps2 {
        // (R + Rᵀ)/2 − cos θ I = (1 − cos θ) ω ωᵀ
        let b = 0.5 * (r + r.transpose()) - cos * Mat3::identity();
        let k = (0..3).max_by(|&a, &c| b[(a, a)].total_cmp(&b[(c, c)])).unwrap_or(0);
        let mut axis = b.column(k).into_owned();
        axis /= axis.norm();
        let d = axis.dot(&w);
        if d.abs() > 1e-14 {
            if d < 0.0 {
                axis = -axis;
            }
        } else if let Some(first) = axis.iter().copied().find(|c| c.abs() > 1e-12) {
            if first < 0.0 {
                axis = -axis;
            }
        }
        return AxisAngle { axis, angle };
    }
    if sin == 0.0 {
        return AxisAngle {
            axis: Vec3::z(),
            angle: 0.0,
        };
    }
    AxisAngle {
        axis: w / sin,
        angle,
    }
}

/// Per-vertex, per-frame resolved rotations.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationResolution {
    pub raw: Vec<Vec<AxisAngle>>,
    pub orient: Vec<Vec<i8>>,
    pub cycles: Vec<Vec<i32>>,
}

impl RotationResolution {
    /// Resolves orientations then cycle counts for the given raw fields.
    pub fn solve(raw: Vec<Vec<AxisAngle>>, mesh: &Mesh, cfg: &ResolveConfig) -> Result<Self> {
        let v = mesh.vertex_count();
        if let Some(t) = raw.iter().position(|f| f.len() != v) {
            return Err(Error::Shape(format!(
                "frame {t} has {} rotations, mesh has {v} vertices",
                raw[t].len()
            )));
        }
        let graph = ResolutionGraph::from_mesh(mesh, raw.len(), cfg.temporal);
        let orient = solve_orientations(&graph, &raw, cfg);
        let cycles = solve_cycles(&graph, &raw, &orient);
        Ok(RotationResolution { raw, orient, cycles })
    }

    pub fn frame_count(&self) -> usize {
        self.raw.len()
    }

    /// `θ̂ = o·θ + 2π r`.
    pub fn resolved_angle(&self, t: usize, i: usize) -> f64 {
        self.orient[t][i] as f64 * self.raw[t][i].angle + TAU * self.cycles[t][i] as f64
    }

    /// `ω̂ = o·ω`.
    pub fn resolved_axis(&self, t: usize, i: usize) -> Vec3 {
        self.orient[t][i] as f64 * self.raw[t][i].axis
    }

    /// `ω̂·θ̂`, the first three feature entries.
    pub fn log_rotation(&self, t: usize, i: usize) -> Vec3 {
        self.resolved_axis(t, i) * self.resolved_angle(t, i)
    }
}

/// Resolves orientation flags for raw axis-angle fields on `mesh`.
pub fn resolve_orientations(raw: &[Vec<AxisAngle>], mesh: &Mesh, cfg: &ResolveConfig) -> Vec<Vec<i8>> {
    let graph = ResolutionGraph::from_mesh(mesh, raw.len(), cfg.temporal);
    solve_orientations(&graph, raw, cfg)
}

/// Resolves cycle counts given orientation flags.
pub fn resolve_cycles(
    raw: &[Vec<AxisAngle>],
    orient: &[Vec<i8>],
    mesh: &Mesh,
    cfg: &ResolveConfig,
) -> Vec<Vec<i32>> {
    let graph = ResolutionGraph::from_mesh(mesh, raw.len(), cfg.temporal);
    solve_cycles(&graph, raw, orient)
}

/// Per-vertex 9-vectors of one frame: `[ω̂θ̂ (3), s11, s12, s13, s22, s23, s33]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrame {
    pub vectors: Vec<[f64; FEATURE_DIM]>,
}

impl FeatureFrame {
    pub fn vertex_count(&self) -> usize {
        self.vectors.len()
    }

    /// Features of the undeformed reference: zero rotation, identity stretch.
    pub fn identity(vertex_count: usize) -> Self {
        FeatureFrame {
            vectors: vec![pack_vector(&Vec3::zeros(), &Mat3::identity()); vertex_count],
        }
    }

    pub fn as_flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.vectors.iter().flat_map(|v| v.iter().copied())
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() % FEATURE_DIM != 0 {
            return Err(Error::Shape(format!(
                "{} values is not a multiple of {FEATURE_DIM}",
                values.len()
            )));
        }
        Ok(FeatureFrame {
            vectors: values
                .chunks_exact(FEATURE_DIM)
                .map(|c| c.try_into().expect("chunk of 9"))
                .collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub vertex_count: usize,
    pub frames: Vec<FeatureFrame>,
}

impl FeatureSequence {
    pub fn new(vertex_count: usize, frames: Vec<FeatureFrame>) -> Result<Self> {
        if let Some(t) = frames.iter().position(|f| f.vertex_count() != vertex_count) {
            return Err(Error::Shape(format!(
                "feature frame {t} has {} vertices, expected {vertex_count}",
                frames[t].vertex_count()
            )));
        }
        Ok(FeatureSequence { vertex_count, frames })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }
}

fn pack_vector(log_rotation: &Vec3, s: &Mat3) -> [f64; FEATURE_DIM] {
    [
        log_rotation.x,
        log_rotation.y,
        log_rotation.z,
        s[(0, 0)],
        s[(0, 1)],
        s[(0, 2)],
        s[(1, 1)],
        s[(1, 2)],
        s[(2, 2)],
    ]
}

/// Packs frame `t` of a resolution together with the stretch factors.
pub fn pack_features(field: &DeformField, res: &RotationResolution, t: usize) -> Result<FeatureFrame> {
    if field.len() != res.raw[t].len() {
        return Err(Error::Shape(format!(
            "deformation field has {} vertices, resolution has {}",
            field.len(),
            res.raw[t].len()
        )));
    }
    Ok(FeatureFrame {
        vectors: (0..field.len())
            .map(|i| pack_vector(&res.log_rotation(t, i), &field.stretches[i]))
            .collect(),
    })
}

/// Rotation and stretch of one feature vector.
pub fn unpack_vector(v: &[f64; FEATURE_DIM]) -> Result<(Mat3, Mat3)> {
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("feature vector"));
    }
    let log = Vec3::new(v[0], v[1], v[2]);
    let angle = log.norm();
    let r = if angle < 1e-12 {
        Mat3::identity()
    } else {
        rotation(&(log / angle), angle)
    };
    let s = Mat3::new(v[3], v[4], v[5], v[4], v[6], v[7], v[5], v[7], v[8]);
    Ok((r, s))
}

pub fn unpack_features(frame: &FeatureFrame) -> Result<Vec<(Mat3, Mat3)>> {
    frame.vectors.iter().map(unpack_vector).collect()
}

/// Features, resolution and per-frame fields of an encoded sequence.
#[derive(Debug, Clone)]
pub struct Encoding {
    pub features: FeatureSequence,
    pub resolution: RotationResolution,
}

/// Encodes every frame of `seq` relative to its reference mesh.
pub fn encode_sequence(seq: &MeshSequence, cfg: &ResolveConfig) -> Result<Encoding> {
    let mesh = &seq.reference;
    let fields: Vec<DeformField> = seq
        .frames
        .iter()
        .map(|f| DeformField::compute(mesh, f))
        .collect::<Result<_>>()?;
    let raw = fields
        .iter()
        .map(|f| f.rotations.iter().map(|r| to_axis_angle(r, cfg.eps2)).collect())
        .collect();
    let resolution = RotationResolution::solve(raw, mesh, cfg)?;
    let frames = fields
        .iter()
        .enumerate()
        .map(|(t, f)| pack_features(f, &resolution, t))
        .collect::<Result<_>>()?;
    Ok(Encoding {
        features: FeatureSequence::new(mesh.vertex_count(), frames)?,
        resolution,
    })
}

/// Gradient `T = R·S` for every vertex of a feature frame.
pub fn gradients(frame: &FeatureFrame) -> Result<Vec<Mat3>> {
    frame
        .vectors
        .iter()
        .map(|v| unpack_vector(v).map(|(r, s)| r * s))
        .collect()
}

/// Factors a gradient back into a feature vector with `o = +1, r = 0`.
pub fn canonical_vector(t: &Mat3, eps2: f64) -> Result<[f64; FEATURE_DIM]> {
    let (r, s) = polar_decompose(t)?;
    let aa = to_axis_angle(&r, eps2);
    Ok(pack_vector(&(aa.axis * aa.angle), &s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::grid;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn rz(a: f64) -> Mat3 {
        rotation(&Vec3::z(), a)
    }

    fn rodrigues_matches(aa: &AxisAngle, r: &Mat3) -> bool {
        let back = if aa.angle == 0.0 { Mat3::identity() } else { rotation(&aa.axis, aa.angle) };
        (back - r).norm() < 1e-9
    }

    #[test]
    fn axis_angle_of_identity_and_quarter_turn() {
        let aa = to_axis_angle(&Mat3::identity(), 1e-3);
        assert_eq!(aa.axis, Vec3::z());
        assert_eq!(aa.angle, 0.0);
        let aa = to_axis_angle(&rz(FRAC_PI_2), 1e-3);
        assert!((aa.axis - Vec3::z()).norm() < 1e-15);
        assert!((aa.angle - FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn axis_angle_at_half_turn_uses_positive_convention() {
        let r = rotation(&Vec3::x(), PI);
        let aa = to_axis_angle(&r, 1e-3);
        assert!((aa.angle - PI).abs() < 1e-12);
        assert!((aa.axis - Vec3::x()).norm() < 1e-12);
        assert!(rodrigues_matches(&aa, &r));
        let r = rotation(&-Vec3::x(), PI);
        assert!((to_axis_angle(&r, 1e-3).axis - Vec3::x()).norm() < 1e-12);
    }

    #[test]
    fn near_half_turn_keeps_sign_from_skew_part() {
        let axis = Vec3::new(0.3, -0.8, 0.2).normalize();
        for delta in [1e-9, 1e-6, 1e-4, 9e-4] {
            let r = rotation(&axis, PI - delta);
            let aa = to_axis_angle(&r, 1e-3);
            assert!(rodrigues_matches(&aa, &r), "delta {delta}");
        }
    }

    proptest! {
        #[test]
        fn axis_angle_reproduces_rotation(
            axis in proptest::array::uniform3(-1.0f64..1.0),
            angle in 0.0f64..PI,
        ) {
            let axis = Vec3::from(axis);
            prop_assume!(axis.norm() > 1e-3);
            let r = rotation(&axis, angle);
            let aa = to_axis_angle(&r, 1e-3);
            prop_assert!(aa.angle >= 0.0 && aa.angle <= PI);
            prop_assert!(rodrigues_matches(&aa, &r));
        }

        #[test]
        fn pack_unpack_round_trip(
            axis in proptest::array::uniform3(-1.0f64..1.0),
            angle in 0.0f64..PI,
            cycles in -2i32..3,
            flip in proptest::bool::ANY,
            s in proptest::array::uniform6(-0.5f64..0.5),
        ) {
            let axis = Vec3::from(axis);
            prop_assume!(axis.norm() > 1e-3);
            let r = rotation(&axis, angle);
            let stretch = Mat3::identity() + Mat3::new(s[0], s[1], s[2], s[1], s[3], s[4], s[2], s[4], s[5]);
            let aa = to_axis_angle(&r, 1e-3);
            let res = RotationResolution {
                raw: vec![vec![aa]],
                orient: vec![vec![if flip { -1 } else { 1 }]],
                cycles: vec![vec![cycles]],
            };
            let field = DeformField { gradients: vec![r * stretch], rotations: vec![r], stretches: vec![stretch] };
            let frame = pack_features(&field, &res, 0).unwrap();
            let (r2, s2) = unpack_vector(&frame.vectors[0]).unwrap();
            prop_assert!((r2 - r).norm() < 1e-10 * (1.0 + cycles.abs() as f64));
            prop_assert!((s2 - stretch).norm() < 1e-12);
        }
    }

    #[test]
    fn pack_identity_and_quarter_turn() {
        let mesh = grid(2, 2, 1.0, 1.0).unwrap();
        let field = DeformField::compute(&mesh, mesh.vertices()).unwrap();
        let raw = vec![field.rotations.iter().map(|r| to_axis_angle(r, 1e-3)).collect()];
        let res = RotationResolution::solve(raw, &mesh, &ResolveConfig::default()).unwrap();
        let frame = pack_features(&field, &res, 0).unwrap();
        for v in &frame.vectors {
            let expected = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
            for k in 0..9 {
                assert!((v[k] - expected[k]).abs() < 1e-12);
            }
        }

        let quarter = DeformField {
            gradients: vec![rz(FRAC_PI_2)],
            rotations: vec![rz(FRAC_PI_2)],
            stretches: vec![Mat3::identity()],
        };
        let aa = to_axis_angle(&rz(FRAC_PI_2), 1e-3);
        let mut res = RotationResolution { raw: vec![vec![aa]], orient: vec![vec![1]], cycles: vec![vec![0]] };
        let v = pack_features(&quarter, &res, 0).unwrap().vectors[0];
        assert!((v[2] - FRAC_PI_2).abs() < 1e-15);
        assert_eq!(&v[3..], &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        res.cycles[0][0] = 1;
        let v = pack_features(&quarter, &res, 0).unwrap().vectors[0];
        assert!((v[2] - (FRAC_PI_2 + TAU)).abs() < 1e-14);
        assert!((v[2] - 7.853_981_6).abs() < 1e-7);
    }

    #[test]
    fn unpack_is_two_pi_periodic() {
        let (r, s) = unpack_vector(&[0.0, 0.0, FRAC_PI_2 + TAU, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        assert!((r - rz(FRAC_PI_2)).norm() < 1e-14);
        assert_eq!(s, Mat3::identity());
        let (r, s) = unpack_vector(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!((r, s), (Mat3::identity(), Mat3::identity()));
        assert!(unpack_vector(&[f64::NAN, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).is_err());
    }

    fn uniform_raw(v: usize, frames: usize, axis: Vec3, angle: f64) -> Vec<Vec<AxisAngle>> {
        vec![vec![AxisAngle { axis, angle }; v]; frames]
    }

    #[test]
    fn uniform_field_keeps_all_flags_positive() {
        let mesh = grid(3, 3, 1.0, 1.0).unwrap();
        let frames = 4;
        let raw = uniform_raw(9, frames, Vec3::new(0.0, 0.6, 0.8), 1.0);
        let cfg = ResolveConfig::default();
        let o = resolve_orientations(&raw, &mesh, &cfg);
        assert!(o.iter().flatten().all(|&x| x == 1));
        let graph = ResolutionGraph::from_mesh(&mesh, frames, true);
        let expected = (frames * mesh.edges().len() + 9 * (frames - 1)) as i64;
        assert_eq!(orientation_objective(&graph, &raw, &o, &cfg), expected);
    }

    #[test]
    fn single_negated_axis_is_flipped() {
        let mesh = grid(3, 3, 1.0, 1.0).unwrap();
        let mut raw = uniform_raw(9, 1, Vec3::x(), 0.8);
        raw[0][4].axis = -Vec3::x();
        let o = resolve_orientations(&raw, &mesh, &ResolveConfig::default());
        for (i, &flag) in o[0].iter().enumerate() {
            assert_eq!(flag, if i == 4 { -1 } else { 1 }, "vertex {i}");
        }
    }

    #[test]
    fn near_identity_field_defaults_to_positive() {
        let mesh = grid(3, 3, 1.0, 1.0).unwrap();
        let mut raw = uniform_raw(9, 2, Vec3::y(), 1e-4);
        raw[1][3].axis = -Vec3::y();
        let cfg = ResolveConfig::default();
        let o = resolve_orientations(&raw, &mesh, &cfg);
        assert!(o.iter().flatten().all(|&x| x == 1));
        let graph = ResolutionGraph::from_mesh(&mesh, 2, true);
        assert_eq!(orientation_objective(&graph, &raw, &o, &cfg), 0);
    }

    #[test]
    fn identity_frame_follows_the_previous_axis() {
        // Second frame is the identity with a noise axis pointing the other way.
        let mesh = grid(3, 3, 1.0, 1.0).unwrap();
        let mut raw = uniform_raw(9, 2, Vec3::z(), 0.8);
        for aa in &mut raw[1] {
            *aa = AxisAngle { axis: -Vec3::z(), angle: 1e-16 };
        }
        let o = resolve_orientations(&raw, &mesh, &ResolveConfig::default());
        assert!(o[1].iter().all(|&x| x == -1), "{:?}", o[1]);
    }

    #[test]
    fn constant_angle_needs_no_cycles() {
        let mesh = grid(3, 3, 1.0, 1.0).unwrap();
        let raw = uniform_raw(9, 5, Vec3::z(), 0.5);
        let cfg = ResolveConfig::default();
        let o = resolve_orientations(&raw, &mesh, &cfg);
        let r = resolve_cycles(&raw, &o, &mesh, &cfg);
        assert!(r.iter().flatten().all(|&x| x == 0));
    }

    /// A plane spun about z from 0 to 3π over 60 frames.
    #[test]
    fn continuous_spin_unfolds_to_cumulative_angle() {
        let mesh = grid(3, 3, 1.0, 1.0).unwrap();
        let n = 60;
        let frames: Vec<Vec<Vec3>> = (0..n)
            .map(|t| {
                let rot = rz(3.0 * PI * t as f64 / (n - 1) as f64);
                mesh.vertices().iter().map(|p| rot * p).collect()
            })
            .collect();
        let seq = MeshSequence::new(mesh.clone(), frames).unwrap();
        let enc = encode_sequence(&seq, &ResolveConfig::default()).unwrap();
        for t in 0..n {
            let expected = 3.0 * PI * t as f64 / (n - 1) as f64;
            for i in 0..9 {
                let got = enc.resolution.resolved_angle(t, i);
                assert!((got - expected).abs() < 1e-9, "frame {t} vertex {i}: {got} vs {expected}");
            }
        }
    }

    #[test]
    fn resolution_reproduces_input_rotations() {
        let mesh = grid(4, 3, 1.0, 1.0).unwrap();
        let frames: Vec<Vec<Vec3>> = (0..8)
            .map(|t| {
                mesh.vertices()
                    .iter()
                    .map(|p| {
                        let a = 0.9 * t as f64 * p.x;
                        rotation(&Vec3::new(0.2, 1.0, 0.1), a) * p + Vec3::new(0.0, 0.0, 0.1 * p.y * t as f64)
                    })
                    .collect()
            })
            .collect();
        let seq = MeshSequence::new(mesh.clone(), frames.clone()).unwrap();
        let enc = encode_sequence(&seq, &ResolveConfig::default()).unwrap();
        for (t, f) in frames.iter().enumerate() {
            let field = DeformField::compute(&mesh, f).unwrap();
            let res = &enc.resolution;
            for i in 0..mesh.vertex_count() {
                let back = rotation(&res.resolved_axis(t, i), res.resolved_angle(t, i));
                assert!((back - field.rotations[i]).norm() < 1e-9);
            }
        }
        assert_eq!(enc.resolution.orient[0][0], 1);
        assert_eq!(enc.resolution.cycles[0][0], 0);
    }
}
