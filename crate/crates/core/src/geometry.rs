//! Pinhole cameras, two-view linear triangulation and MPJPE.

use std::io::Write;

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Joint2D {
    pub u: f64,
    pub v: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Pose2D {
    pub joints: Vec<Joint2D>,
}

/// Joint position in millimetres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Joint3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub valid: bool,
}

impl Joint3D {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z, valid: true }
    }

    pub fn invalid() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            z: 0.0,
            valid: false,
        }
    }

    fn vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Pose3D {
    pub joints: Vec<Joint3D>,
}

/// `P = K [R | t]` plus the sensor it images onto.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    p: Matrix3x4<f64>,
    pub width: u16,
    pub height: u16,
}

/// On-disk camera: row-major `P` and sensor size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraFile {
    pub projection: [f64; 12],
    pub width: u16,
    pub height: u16,
}

impl CameraModel {
    /// Rejects matrices whose left 3x3 block is singular or non-finite.
    pub fn new(p: Matrix3x4<f64>, width: u16, height: u16) -> Result<Self> {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("projection matrix".into()));
        }
        let m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into_owned();
        let scale = m.norm().max(f64::MIN_POSITIVE);
        if m.determinant().abs() <= 1e-12 * scale.powi(3) {
            return Err(Error::Degenerate("left 3x3 block of P is singular".into()));
        }
        Ok(Self { p, width, height })
    }

    pub fn from_rows(rows: [f64; 12], width: u16, height: u16) -> Result<Self> {
        Self::new(Matrix3x4::from_row_slice(&rows), width, height)
    }

    /// Camera at `eye` looking at `target`, image x to the right and y down,
    /// principal point at the sensor centre.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal_px: f64,
        width: u16,
        height: u16,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| invalid("eye and target coincide"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| invalid("up vector parallel to viewing direction"))?;
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye);
        let k = Matrix3::new(
            focal_px,
            0.0,
            f64::from(width) / 2.0,
            0.0,
            focal_px,
            f64::from(height) / 2.0,
            0.0,
            0.0,
            1.0,
        );
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        rt.set_column(3, &t);
        Self::new(k * rt, width, height)
    }

    pub fn matrix(&self) -> &Matrix3x4<f64> {
        &self.p
    }

    pub fn rows(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..4 {
                out[r * 4 + c] = self.p[(r, c)];
            }
        }
        out
    }

    /// Optical centre, `-M^-1 p4`.
    pub fn center(&self) -> Vector3<f64> {
        let m: Matrix3<f64> = self.p.fixed_view::<3, 3>(0, 0).into_owned();
        let p4: Vector3<f64> = self.p.column(3).into_owned();
        -(m.try_inverse().expect("checked non-singular at construction") * p4)
    }

    pub fn to_file(&self) -> CameraFile {
        CameraFile {
            projection: self.rows(),
            width: self.width,
            height: self.height,
        }
    }

    pub fn from_file(f: &CameraFile) -> Result<Self> {
        Self::from_rows(f.projection, f.width, f.height)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("plain struct serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: CameraFile = serde_json::from_str(text).map_err(|e| invalid(format!("camera file: {e}")))?;
        Self::from_file(&f)
    }
}

/// Pinhole projection of one 3-D point.
pub fn project(cam: &CameraModel, x: f64, y: f64, z: f64) -> Result<(f64, f64)> {
    let h = cam.p * Vector4::new(x, y, z, 1.0);
    if h.z.abs() < 1e-12 {
        return Err(Error::Degenerate("point on the principal plane".into()));
    }
    Ok((h.x / h.z, h.y / h.z))
}

/// Projects every valid joint; invalid or unprojectable joints stay invalid.
pub fn project_pose(cam: &CameraModel, pose: &Pose3D) -> Pose2D {
    let joints = pose
        .joints
        .iter()
        .map(|j| match (j.valid, project(cam, j.x, j.y, j.z)) {
            (true, Ok((u, v))) => Joint2D { u, v, valid: true },
            _ => Joint2D {
                u: 0.0,
                v: 0.0,
                valid: false,
            },
        })
        .collect();
    Pose2D { joints }
}

/// Singular-value ratio below which a DLT system is treated as rank deficient.
pub const DEGENERACY_TOL: f64 = 1e-10;

/// Linear triangulation of one correspondence.
///
/// Rows of the 4x4 DLT system are scaled to unit norm and the XYZ columns by
/// the camera distance so the SVD works on a well-scaled matrix; the
/// solution is scaled back before dehomogenizing.
pub fn triangulate_point(
    cam_a: &CameraModel,
    cam_b: &CameraModel,
    obs_a: (f64, f64),
    obs_b: (f64, f64),
) -> Result<Vector3<f64>> {
    let scale = cam_a.center().norm().max(cam_b.center().norm()).max(1.0);
    let mut a = Matrix4::<f64>::zeros();
    for (i, (cam, (u, v))) in [(cam_a, obs_a), (cam_b, obs_b)].into_iter().enumerate() {
        let p = &cam.p;
        let r0 = p.row(2) * u - p.row(0);
        let r1 = p.row(2) * v - p.row(1);
        a.row_mut(2 * i).copy_from(&r0);
        a.row_mut(2 * i + 1).copy_from(&r1);
    }
    for c in 0..3 {
        let mut col = a.column_mut(c);
        col *= scale;
    }
    for r in 0..4 {
        let n = a.row(r).norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Degenerate("zero DLT row".into()));
        }
        let mut row = a.row_mut(r);
        row /= n;
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Degenerate("SVD did not converge".into()))?;
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let (largest, second_smallest, smallest) = (order[0], order[2], order[3]);
    let s1 = svd.singular_values[largest];
    if svd.singular_values[second_smallest] <= DEGENERACY_TOL * s1 {
        return Err(Error::Degenerate("rays are parallel".into()));
    }
    let h = v_t.row(smallest);
    if h[3].abs() <= f64::EPSILON * h.norm() {
        return Err(Error::Degenerate("point at infinity".into()));
    }
    Ok(Vector3::new(h[0], h[1], h[2]) * (scale / h[3]))
}

/// Triangulates every joint seen in both views.
///
/// Fails outright for coincident camera centres. A joint invalid in either
/// view, or whose own system is degenerate, comes back invalid.
pub fn triangulate(cam_a: &CameraModel, cam_b: &CameraModel, pose_a: &Pose2D, pose_b: &Pose2D) -> Result<Pose3D> {
    if pose_a.joints.len() != pose_b.joints.len() {
        return Err(shape(format!(
            "views disagree on joint count: {} vs {}",
            pose_a.joints.len(),
            pose_b.joints.len()
        )));
    }
    let (ca, cb) = (cam_a.center(), cam_b.center());
    if (ca - cb).norm() <= 1e-9 * ca.norm().max(cb.norm()).max(1.0) {
        return Err(Error::Degenerate("cameras share an optical centre".into()));
    }
    let joints = pose_a
        .joints
        .iter()
        .zip(&pose_b.joints)
        .map(|(a, b)| {
            if !(a.valid && b.valid) {
                return Joint3D::invalid();
            }
            match triangulate_point(cam_a, cam_b, (a.u, a.v), (b.u, b.v)) {
                Ok(p) if p.iter().all(|v| v.is_finite()) => Joint3D::new(p.x, p.y, p.z),
                _ => Joint3D::invalid(),
            }
        })
        .collect();
    Ok(Pose3D { joints })
}

/// Two cameras on a horizontal circle around the origin, `angle_deg` apart,
/// both aimed at the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigSpec {
    pub angle_deg: f64,
    pub distance_mm: f64,
    pub focal_px: f64,
    pub width: u16,
    pub height: u16,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self {
            angle_deg: 90.0,
            distance_mm: 3000.0,
            focal_px: 300.0,
            width: crate::DEFAULT_SENSOR_WIDTH,
            height: crate::DEFAULT_SENSOR_HEIGHT,
        }
    }
}

pub fn synthetic_rig(spec: &RigSpec) -> Result<(CameraModel, CameraModel)> {
    let half = spec.angle_deg.to_radians() / 2.0;
    let d = spec.distance_mm;
    let up = Vector3::new(0.0, 1.0, 0.0);
    let make = |theta: f64| {
        let eye = Vector3::new(d * theta.sin(), 0.0, -d * theta.cos());
        CameraModel::look_at(eye, Vector3::zeros(), up, spec.focal_px, spec.width, spec.height)
    };
    Ok((make(-half)?, make(half)?))
}

/// Thirteen joints in a standing pose (head, shoulders, elbows, wrists,
/// hips, knees, ankles), millimetres, y up, centred near the origin.
pub fn reference_skeleton() -> Pose3D {
    const J: [[f64; 3]; 13] = [
        [0.0, 700.0, 0.0],
        [-180.0, 450.0, 0.0],
        [180.0, 450.0, 0.0],
        [-220.0, 180.0, 30.0],
        [220.0, 180.0, 30.0],
        [-240.0, -60.0, 80.0],
        [240.0, -60.0, 80.0],
        [-110.0, -80.0, 0.0],
        [110.0, -80.0, 0.0],
        [-120.0, -480.0, 20.0],
        [120.0, -480.0, 20.0],
        [-120.0, -880.0, 0.0],
        [120.0, -880.0, 0.0],
    ];
    Pose3D {
        joints: J.iter().map(|j| Joint3D::new(j[0], j[1], j[2])).collect(),
    }
}

/// Mean per-joint position error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MpjpeReport {
    /// Pixels for 2-D poses, millimetres for 3-D.
    pub mpjpe: f64,
    /// Mean error per joint index, `None` where no sample had that joint valid.
    pub per_joint: Vec<Option<f64>>,
    pub samples: usize,
    pub joints: usize,
    /// Joint observations counted (valid in both prediction and ground truth).
    pub valid: usize,
}

fn mpjpe_generic<P>(
    pred: &[P],
    gt: &[P],
    joints_of: impl Fn(&P) -> usize,
    err: impl Fn(&P, &P, usize) -> Option<f64>,
) -> Result<MpjpeReport> {
    if pred.len() != gt.len() {
        return Err(shape(format!(
            "{} predicted samples vs {} ground truth",
            pred.len(),
            gt.len()
        )));
    }
    let joints = gt.first().map(&joints_of).unwrap_or(0);
    let mut per_sum = vec![0.0; joints];
    let mut per_cnt = vec![0usize; joints];
    let mut total = 0.0;
    let mut valid = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        if joints_of(p) != joints || joints_of(g) != joints {
            return Err(shape("joint count differs between samples"));
        }
        for j in 0..joints {
            if let Some(e) = err(p, g, j) {
                total += e;
                valid += 1;
                per_sum[j] += e;
                per_cnt[j] += 1;
            }
        }
    }
    if valid == 0 {
        return Err(invalid("no joint is valid in both prediction and ground truth"));
    }
    Ok(MpjpeReport {
        mpjpe: total / valid as f64,
        per_joint: per_sum
            .iter()
            .zip(&per_cnt)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect(),
        samples: gt.len(),
        joints,
        valid,
    })
}

pub fn mpjpe_2d(pred: &[Pose2D], gt: &[Pose2D]) -> Result<MpjpeReport> {
    mpjpe_generic(
        pred,
        gt,
        |p| p.joints.len(),
        |p, g, j| {
            let (a, b) = (p.joints[j], g.joints[j]);
            (a.valid && b.valid).then(|| ((a.u - b.u).powi(2) + (a.v - b.v).powi(2)).sqrt())
        },
    )
}

pub fn mpjpe_3d(pred: &[Pose3D], gt: &[Pose3D]) -> Result<MpjpeReport> {
    mpjpe_generic(
        pred,
        gt,
        |p| p.joints.len(),
        |p, g, j| {
            let (a, b) = (p.joints[j], g.joints[j]);
            (a.valid && b.valid).then(|| (a.vector() - b.vector()).norm())
        },
    )
}

pub const POSE2D_HEADER: &str = "sample,joint,u,v,valid";
pub const POSE3D_HEADER: &str = "sample,joint,X,Y,Z,valid";

pub fn write_pose2d_csv<W: Write>(poses: &[Pose2D], mut out: W) -> Result<()> {
    writeln!(out, "{POSE2D_HEADER}")?;
    for (s, pose) in poses.iter().enumerate() {
        for (j, p) in pose.joints.iter().enumerate() {
            writeln!(out, "{s},{j},{},{},{}", p.u, p.v, u8::from(p.valid))?;
        }
    }
    Ok(())
}

pub fn write_pose3d_csv<W: Write>(poses: &[Pose3D], mut out: W) -> Result<()> {
    writeln!(out, "{POSE3D_HEADER}")?;
    for (s, pose) in poses.iter().enumerate() {
        for (j, p) in pose.joints.iter().enumerate() {
            writeln!(out, "{s},{j},{},{},{},{}", p.x, p.y, p.z, u8::from(p.valid))?;
        }
    }
    Ok(())
}

/// `(values, valid)` per joint, per sample.
type PoseRows = Vec<Vec<(Vec<f64>, bool)>>;

/// Rows grouped by sample; samples and joints must be numbered 0.. in order.
fn read_pose_rows(bytes: &[u8], values: usize) -> Result<PoseRows> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let mut samples: PoseRows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if i == 0
            && rec
                .get(0)
                .is_some_and(|f| f.starts_with(|c: char| c.is_ascii_alphabetic()))
        {
            continue;
        }
        let bad = |msg: String| Error::MalformedCsv { line, msg };
        if rec.len() != values + 3 {
            return Err(bad(format!("expected {} fields, found {}", values + 3, rec.len())));
        }
        let s: usize = rec[0].parse().map_err(|_| bad("bad sample index".into()))?;
        let j: usize = rec[1].parse().map_err(|_| bad("bad joint index".into()))?;
        let vals = (0..values)
            .map(|k| {
                rec[2 + k]
                    .parse::<f64>()
                    .map_err(|_| bad(format!("bad value {:?}", &rec[2 + k])))
            })
            .collect::<Result<Vec<_>>>()?;
        let valid = match &rec[values + 2] {
            "1" => true,
            "0" => false,
            other => return Err(bad(format!("valid flag must be 0 or 1, got {other:?}"))),
        };
        if s == samples.len() {
            samples.push(Vec::new());
        }
        if s + 1 != samples.len() || j != samples[s].len() {
            return Err(bad(format!("row ({s}, {j}) out of order")));
        }
        samples[s].push((vals, valid));
    }
    Ok(samples)
}

pub fn read_pose2d_csv(bytes: &[u8]) -> Result<Vec<Pose2D>> {
    Ok(read_pose_rows(bytes, 2)?
        .into_iter()
        .map(|rows| Pose2D {
            joints: rows
                .into_iter()
                .map(|(v, valid)| Joint2D {
                    u: v[0],
                    v: v[1],
                    valid,
                })
                .collect(),
        })
        .collect())
}

pub fn read_pose3d_csv(bytes: &[u8]) -> Result<Vec<Pose3D>> {
    Ok(read_pose_rows(bytes, 3)?
        .into_iter()
        .map(|rows| Pose3D {
            joints: rows
                .into_iter()
                .map(|(v, valid)| Joint3D {
                    x: v[0],
                    y: v[1],
                    z: v[2],
                    valid,
                })
                .collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn canonical() -> CameraModel {
        CameraModel::from_rows([1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0], 346, 260).unwrap()
    }

    #[test]
    fn canonical_projection() {
        let c = canonical();
        assert_eq!(project(&c, 0.0, 0.0, 1.0).unwrap(), (0.0, 0.0));
        assert_eq!(project(&c, 2.0, 3.0, 2.0).unwrap(), (1.0, 1.5));
        assert!(project(&c, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn singular_camera_rejected() {
        assert!(CameraModel::from_rows([0.0; 12], 10, 10).is_err());
    }

    #[test]
    fn ninety_degree_rig_roundtrip() {
        let (a, b) = synthetic_rig(&RigSpec::default()).unwrap();
        let angle = a.center().angle(&b.center()).to_degrees();
        assert!((angle - 90.0).abs() < 1e-9);
        let gt = reference_skeleton();
        let out = triangulate(&a, &b, &project_pose(&a, &gt), &project_pose(&b, &gt)).unwrap();
        for (p, g) in out.joints.iter().zip(&gt.joints) {
            assert!(p.valid);
            assert!((p.x - g.x).abs() < 1e-8 && (p.y - g.y).abs() < 1e-8 && (p.z - g.z).abs() < 1e-8);
        }
        // every joint lands on the sensor
        for j in project_pose(&a, &gt).joints {
            assert!(j.u >= 0.0 && j.u < 346.0 && j.v >= 0.0 && j.v < 260.0, "{j:?}");
        }
    }

    #[test]
    fn identical_cameras_degenerate() {
        let (a, _) = synthetic_rig(&RigSpec::default()).unwrap();
        let gt = reference_skeleton();
        let p = project_pose(&a, &gt);
        assert!(matches!(triangulate(&a, &a, &p, &p), Err(Error::Degenerate(_))));
    }

    #[test]
    fn invalid_view_gives_invalid_joint() {
        let (a, b) = synthetic_rig(&RigSpec::default()).unwrap();
        let gt = reference_skeleton();
        let pa = project_pose(&a, &gt);
        let mut pb = project_pose(&b, &gt);
        pb.joints[4].valid = false;
        let out = triangulate(&a, &b, &pa, &pb).unwrap();
        assert!(!out.joints[4].valid);
        assert!(out.joints[3].valid);
        pb.joints.pop();
        assert!(triangulate(&a, &b, &pa, &pb).is_err());
    }

    fn pose2(points: &[(f64, f64)]) -> Pose2D {
        Pose2D {
            joints: points.iter().map(|&(u, v)| Joint2D { u, v, valid: true }).collect(),
        }
    }

    #[test]
    fn mpjpe_exact_cases() {
        let gt = vec![pose2(&[(10.0, 20.0)])];
        assert_eq!(mpjpe_2d(&gt, &gt).unwrap().mpjpe, 0.0);
        let pred = vec![pose2(&[(13.0, 24.0)])];
        assert_eq!(mpjpe_2d(&pred, &gt).unwrap().mpjpe, 5.0);

        let g3 = vec![Pose3D {
            joints: vec![Joint3D::new(1.0, 1.0, 1.0)],
        }];
        let p3 = vec![Pose3D {
            joints: vec![Joint3D::new(2.0, 3.0, 3.0)],
        }];
        assert_eq!(mpjpe_3d(&g3, &g3).unwrap().mpjpe, 0.0);
        assert_eq!(mpjpe_3d(&p3, &g3).unwrap().mpjpe, 3.0);
    }

    #[test]
    fn mpjpe_masks_and_errors() {
        let gt = vec![pose2(&[(0.0, 0.0), (0.0, 0.0)])];
        let mut pred = vec![pose2(&[(3.0, 4.0), (100.0, 0.0)])];
        pred[0].joints[1].valid = false;
        let r = mpjpe_2d(&pred, &gt).unwrap();
        assert_eq!((r.mpjpe, r.valid), (5.0, 1));
        assert_eq!(r.per_joint, vec![Some(5.0), None]);
        pred[0].joints[0].valid = false;
        assert!(mpjpe_2d(&pred, &gt).is_err());
        assert!(mpjpe_2d(&[], &gt).is_err());
    }

    #[test]
    fn pose_csv_roundtrip() {
        let poses = vec![pose2(&[(1.5, 2.25), (0.1, 3.0)]), pose2(&[(7.0, 8.0), (9.0, 1e-3)])];
        let mut buf = Vec::new();
        write_pose2d_csv(&poses, &mut buf).unwrap();
        assert_eq!(read_pose2d_csv(&buf).unwrap(), poses);

        let p3 = vec![reference_skeleton()];
        let mut buf = Vec::new();
        write_pose3d_csv(&p3, &mut buf).unwrap();
        assert_eq!(read_pose3d_csv(&buf).unwrap(), p3);

        assert!(read_pose2d_csv(b"0,1,1,1,1\n").is_err());
        assert!(read_pose2d_csv(b"0,0,1,1,2\n").is_err());
    }

    #[test]
    fn camera_json_roundtrip() {
        let (a, _) = synthetic_rig(&RigSpec::default()).unwrap();
        assert_eq!(CameraModel::from_json(&a.to_json()).unwrap(), a);
        assert!(CameraModel::from_json("{\"projection\": [1]}").is_err());
    }
}
