//! COLMAP sparse text models: `cameras.txt`, `images.txt`, `points3D.txt`.
//!
//! Each frame of a capture is one model and each image of a model is one
//! physical camera of the rig. The rig camera id of an image is its
//! `IMAGE_ID`; its frame-specific intrinsics are those of the COLMAP camera it
//! references, so images sharing a COLMAP camera start from equal intrinsics.
//! Written models use one COLMAP camera per image with `CAMERA_ID = IMAGE_ID`.
//! The image `NAME` identifies the camera across frames.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::geometry::Quat;
use crate::model::{Camera, CameraId, Extrinsics, FrameId, FrameModel, Intrinsics, Observation, PointId, TrackedPoint};

use super::{read_text, write_text, SparseIoError};

pub const CAMERAS_FILE: &str = "cameras.txt";
pub const IMAGES_FILE: &str = "images.txt";
pub const POINTS_FILE: &str = "points3D.txt";

/// Quaternions further than this from unit norm are rejected.
pub const QUATERNION_NORM_TOLERANCE: f64 = 1e-3;

/// One parsed frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub frame_id: FrameId,
    pub source: PathBuf,
    pub model: FrameModel,
    /// One entry per image: names and image sizes, intrinsics as read.
    pub cameras: Vec<Camera>,
    /// Images grouped by the COLMAP camera they reference.
    pub colmap_cameras: BTreeMap<u32, Vec<CameraId>>,
    /// Images whose COLMAP camera was SIMPLE_PINHOLE, promoted to fx = fy.
    pub promoted: Vec<CameraId>,
}

impl ModelBundle {
    /// Number of COLMAP cameras referenced by the images.
    pub fn n_cameras(&self) -> usize {
        self.colmap_cameras.len()
    }
}

struct Lines<'a> {
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            iter: text.lines().enumerate(),
        }
    }

    /// Next line that is not a comment, with its 1-based number. Blank lines
    /// are returned too when `keep_blank` is set (the observation line of an
    /// image without keypoints is empty).
    fn next_line(&mut self, keep_blank: bool) -> Option<(usize, &'a str)> {
        for (i, line) in self.iter.by_ref() {
            let t = line.trim();
            if t.starts_with('#') || (t.is_empty() && !keep_blank) {
                continue;
            }
            return Some((i + 1, t));
        }
        None
    }
}

fn malformed(file: &str, line: usize, reason: impl Into<String>) -> SparseIoError {
    SparseIoError::MalformedLine {
        file: file.to_string(),
        line,
        reason: reason.into(),
    }
}

fn parse_num<T: std::str::FromStr>(file: &str, line: usize, tok: &str, what: &str) -> Result<T, SparseIoError> {
    tok.parse()
        .map_err(|_| malformed(file, line, format!("cannot parse {what} from {tok:?}")))
}

fn parse_f64(file: &str, line: usize, tok: &str, what: &str) -> Result<f64, SparseIoError> {
    let v: f64 = parse_num(file, line, tok, what)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(malformed(file, line, format!("{what} is not finite")))
    }
}

/// Normalizes a quaternion read from a file, tolerating small norm deviations.
pub(crate) fn checked_quaternion(file: &str, line: usize, q: [f64; 4]) -> Result<Quat<f64>, SparseIoError> {
    let q = Quat::new(q[0], q[1], q[2], q[3]);
    let norm = q.norm();
    if (norm - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
        return Err(SparseIoError::NonUnitQuaternion {
            file: file.to_string(),
            line,
            norm,
        });
    }
    Ok(q.normalized().canonical())
}

struct ParsedCamera {
    width: u32,
    height: u32,
    intrinsics: Intrinsics,
    simple: bool,
}

fn parse_cameras(text: &str) -> Result<BTreeMap<CameraId, ParsedCamera>, SparseIoError> {
    let file = CAMERAS_FILE;
    let mut out = BTreeMap::new();
    let mut lines = Lines::new(text);
    while let Some((n, line)) = lines.next_line(false) {
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 4 {
            return Err(malformed(file, n, "expected CAMERA_ID MODEL WIDTH HEIGHT PARAMS"));
        }
        let id: CameraId = parse_num(file, n, tok[0], "camera id")?;
        let width: u32 = parse_num(file, n, tok[2], "width")?;
        let height: u32 = parse_num(file, n, tok[3], "height")?;
        let params = tok[4..]
            .iter()
            .map(|t| parse_f64(file, n, t, "camera parameter"))
            .collect::<Result<Vec<_>, _>>()?;
        let (intrinsics, simple) = match tok[1] {
            "PINHOLE" => {
                if params.len() != 4 {
                    return Err(malformed(file, n, "PINHOLE takes 4 parameters"));
                }
                (Intrinsics::new(params[0], params[1], params[2], params[3]), false)
            }
            "SIMPLE_PINHOLE" => {
                if params.len() != 3 {
                    return Err(malformed(file, n, "SIMPLE_PINHOLE takes 3 parameters"));
                }
                (Intrinsics::new(params[0], params[0], params[1], params[2]), true)
            }
            other => return Err(SparseIoError::UnsupportedCameraModel(other.to_string())),
        };
        let cam = ParsedCamera {
            width,
            height,
            intrinsics,
            simple,
        };
        if out.insert(id, cam).is_some() {
            return Err(SparseIoError::DuplicateId {
                kind: "camera",
                id: id as u64,
            });
        }
    }
    Ok(out)
}

struct ParsedImage {
    camera_id: CameraId,
    name: String,
    pose: Extrinsics,
    /// `(x, y, point3d_id)`; `None` for keypoints without a 3D point.
    points2d: Vec<([f64; 2], Option<PointId>)>,
}

fn parse_images(text: &str) -> Result<BTreeMap<u32, ParsedImage>, SparseIoError> {
    let file = IMAGES_FILE;
    let mut out = BTreeMap::new();
    let mut lines = Lines::new(text);
    while let Some((n, line)) = lines.next_line(false) {
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 10 {
            return Err(malformed(
                file,
                n,
                "expected IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME",
            ));
        }
        let image_id: u32 = parse_num(file, n, tok[0], "image id")?;
        let mut v = [0.0; 7];
        for (slot, t) in v.iter_mut().zip(&tok[1..8]) {
            *slot = parse_f64(file, n, t, "pose value")?;
        }
        let q = checked_quaternion(file, n, [v[0], v[1], v[2], v[3]])?;
        let camera_id: CameraId = parse_num(file, n, tok[8], "camera id")?;
        let name = tok[9].to_string();

        let (n2, obs_line) = lines
            .next_line(true)
            .ok_or_else(|| malformed(file, n + 1, "missing keypoint line"))?;
        let obs_tok: Vec<&str> = obs_line.split_whitespace().collect();
        if obs_tok.len() % 3 != 0 {
            return Err(malformed(file, n2, "keypoints must be X Y POINT3D_ID triplets"));
        }
        let mut points2d = Vec::with_capacity(obs_tok.len() / 3);
        for t in obs_tok.chunks(3) {
            let x = parse_f64(file, n2, t[0], "keypoint x")?;
            let y = parse_f64(file, n2, t[1], "keypoint y")?;
            let pid: i64 = parse_num(file, n2, t[2], "point id")?;
            let pid = match pid {
                -1 => None,
                p if p >= 0 => Some(p as PointId),
                _ => return Err(malformed(file, n2, format!("invalid point id {pid}"))),
            };
            points2d.push(([x, y], pid));
        }
        let image = ParsedImage {
            camera_id,
            name,
            pose: Extrinsics {
                rotation: q,
                translation: [v[4], v[5], v[6]],
            },
            points2d,
        };
        if out.insert(image_id, image).is_some() {
            return Err(SparseIoError::DuplicateId {
                kind: "image",
                id: image_id as u64,
            });
        }
    }
    Ok(out)
}

struct ParsedPoint {
    id: PointId,
    position: [f64; 3],
    track: Vec<(u32, u32)>,
}

fn parse_points(text: &str) -> Result<Vec<ParsedPoint>, SparseIoError> {
    let file = POINTS_FILE;
    let mut out = Vec::new();
    let mut lines = Lines::new(text);
    while let Some((n, line)) = lines.next_line(false) {
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 8 || (tok.len() - 8) % 2 != 0 {
            return Err(malformed(
                file,
                n,
                "expected POINT3D_ID X Y Z R G B ERROR (IMAGE_ID POINT2D_IDX)*",
            ));
        }
        let id: PointId = parse_num(file, n, tok[0], "point id")?;
        let mut position = [0.0; 3];
        for (slot, t) in position.iter_mut().zip(&tok[1..4]) {
            *slot = parse_f64(file, n, t, "coordinate")?;
        }
        for t in &tok[4..7] {
            parse_num::<u8>(file, n, t, "color")?;
        }
        parse_num::<f64>(file, n, tok[7], "error")?;
        let track = tok[8..]
            .chunks(2)
            .map(|p| {
                Ok((
                    parse_num(file, n, p[0], "image id")?,
                    parse_num(file, n, p[1], "keypoint index")?,
                ))
            })
            .collect::<Result<Vec<_>, SparseIoError>>()?;
        out.push(ParsedPoint { id, position, track });
    }
    Ok(out)
}

/// Parses the three files of one model from memory. Every byte sequence
/// yields either a bundle or a structured error.
pub fn parse_sparse_model_str(
    frame_id: FrameId,
    cameras_txt: &str,
    images_txt: &str,
    points_txt: &str,
) -> Result<ModelBundle, SparseIoError> {
    let cams = parse_cameras(cameras_txt)?;
    let images = parse_images(images_txt)?;
    let points = parse_points(points_txt)?;

    let mut model = FrameModel {
        frame_id,
        ..FrameModel::default()
    };
    let mut cameras = Vec::new();
    let mut colmap_cameras: BTreeMap<u32, Vec<CameraId>> = BTreeMap::new();
    let mut promoted = Vec::new();
    for (&image_id, image) in &images {
        let cam = cams.get(&image.camera_id).ok_or(SparseIoError::DanglingReference {
            kind: "camera",
            id: image.camera_id as u64,
        })?;
        model.per_camera_pose.insert(image_id, image.pose);
        model.per_camera_intrinsics.insert(image_id, cam.intrinsics);
        colmap_cameras.entry(image.camera_id).or_default().push(image_id);
        if cam.simple {
            promoted.push(image_id);
        }
        cameras.push(Camera {
            camera_id: image_id,
            name: image.name.clone(),
            width: cam.width,
            height: cam.height,
            intrinsics: cam.intrinsics,
            gt_extrinsics: None,
        });
    }

    // Keypoints claimed by 3D points, to check the reverse direction afterwards.
    let mut claimed: HashMap<(u32, u32), PointId> = HashMap::new();
    let mut seen_points = HashMap::new();
    for p in &points {
        if seen_points.insert(p.id, ()).is_some() {
            return Err(SparseIoError::DuplicateId { kind: "point", id: p.id });
        }
        let mut track = Vec::with_capacity(p.track.len());
        for &(image_id, idx) in &p.track {
            let image = images.get(&image_id).ok_or(SparseIoError::DanglingReference {
                kind: "image",
                id: image_id as u64,
            })?;
            let (xy, pid) = image
                .points2d
                .get(idx as usize)
                .ok_or(SparseIoError::DanglingReference {
                    kind: "keypoint",
                    id: idx as u64,
                })?;
            if *pid != Some(p.id) {
                return Err(SparseIoError::DanglingReference {
                    kind: "track entry",
                    id: p.id,
                });
            }
            if claimed.insert((image_id, idx), p.id).is_some() {
                return Err(SparseIoError::DuplicateId {
                    kind: "track entry",
                    id: p.id,
                });
            }
            track.push(Observation {
                camera_id: image_id,
                keypoint: *xy,
                keypoint_index: idx,
            });
        }
        model.points.push(TrackedPoint {
            point_id: p.id,
            position: p.position,
            track,
        });
    }
    for (&image_id, image) in &images {
        for (idx, (_, pid)) in image.points2d.iter().enumerate() {
            if let Some(pid) = pid {
                if claimed.get(&(image_id, idx as u32)) != Some(pid) {
                    return Err(SparseIoError::DanglingReference { kind: "point", id: *pid });
                }
            }
        }
    }

    Ok(ModelBundle {
        frame_id,
        source: PathBuf::new(),
        model,
        cameras,
        colmap_cameras,
        promoted,
    })
}

/// Reads `cameras.txt`, `images.txt` and `points3D.txt` from `dir`.
pub fn parse_sparse_model(dir: &Path, frame_id: FrameId) -> Result<ModelBundle, SparseIoError> {
    let cameras = read_text(&dir.join(CAMERAS_FILE))?;
    let images = read_text(&dir.join(IMAGES_FILE))?;
    let points = read_text(&dir.join(POINTS_FILE))?;
    let mut bundle = parse_sparse_model_str(frame_id, &cameras, &images, &points)?;
    bundle.source = dir.to_path_buf();
    Ok(bundle)
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Renders the three files. Image ids equal camera ids and image names are
/// the camera names.
pub fn render_sparse_model(model: &FrameModel, cameras: &[Camera]) -> Result<[String; 3], SparseIoError> {
    let name_of = |id: CameraId| {
        cameras
            .iter()
            .find(|c| c.camera_id == id)
            .ok_or(SparseIoError::MissingCamera(id))
    };

    let mut cams = String::from("# Camera list with one line of data per camera:\n#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    for (&id, k) in &model.per_camera_intrinsics {
        let cam = name_of(id)?;
        let _ = writeln!(
            cams,
            "{id} PINHOLE {} {} {} {} {} {}",
            cam.width,
            cam.height,
            num(k.fx),
            num(k.fy),
            num(k.cx),
            num(k.cy)
        );
    }

    // keypoint slots per camera, filled from the tracks
    let mut slots: BTreeMap<CameraId, Vec<Option<([f64; 2], PointId)>>> =
        model.per_camera_pose.keys().map(|&id| (id, Vec::new())).collect();
    for p in &model.points {
        for o in &p.track {
            let list = slots.get_mut(&o.camera_id).ok_or(SparseIoError::MissingCamera(o.camera_id))?;
            let idx = o.keypoint_index as usize;
            if list.len() <= idx {
                list.resize(idx + 1, None);
            }
            if list[idx].is_some() {
                return Err(SparseIoError::DuplicateId {
                    kind: "keypoint index",
                    id: idx as u64,
                });
            }
            list[idx] = Some((o.keypoint, p.point_id));
        }
    }

    let mut images = String::from("# Image list with two lines of data per image:\n#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n#   POINTS2D[] as (X, Y, POINT3D_ID)\n");
    for (&id, pose) in &model.per_camera_pose {
        let cam = name_of(id)?;
        let q = pose.rotation;
        let t = pose.translation;
        let _ = writeln!(
            images,
            "{id} {} {} {} {} {} {} {} {id} {}",
            num(q.w),
            num(q.x),
            num(q.y),
            num(q.z),
            num(t[0]),
            num(t[1]),
            num(t[2]),
            cam.name
        );
        let line: Vec<String> = slots[&id]
            .iter()
            .map(|s| match s {
                Some((xy, pid)) => format!("{} {} {pid}", num(xy[0]), num(xy[1])),
                None => "0 0 -1".to_string(),
            })
            .collect();
        let _ = writeln!(images, "{}", line.join(" "));
    }

    let mut points = String::from("# 3D point list with one line of data per point:\n#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n");
    for p in &model.points {
        let _ = write!(
            points,
            "{} {} {} {} 128 128 128 0",
            p.point_id,
            num(p.position[0]),
            num(p.position[1]),
            num(p.position[2])
        );
        for o in &p.track {
            let _ = write!(points, " {} {}", o.camera_id, o.keypoint_index);
        }
        points.push('\n');
    }
    Ok([cams, images, points])
}

/// Writes one model into `dir`, creating it if needed.
pub fn write_sparse_model(model: &FrameModel, cameras: &[Camera], dir: &Path) -> Result<(), SparseIoError> {
    let [cams, images, points] = render_sparse_model(model, cameras)?;
    std::fs::create_dir_all(dir).map_err(|e| SparseIoError::io(dir, e))?;
    write_text(&dir.join(CAMERAS_FILE), &cams)?;
    write_text(&dir.join(IMAGES_FILE), &images)?;
    write_text(&dir.join(POINTS_FILE), &points)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CAMS: &str = "# comment\n1 PINHOLE 640 480 500 500 320 240\n2 PINHOLE 640 480 500 500 320 240\n";
    const IMAGES: &str = "1 1 0 0 0 0 0 0 1 cam_a.png\n100 200 7 50 60 -1\n2 1 0 0 0 -1 0 0 2 cam_b.png\n110 210 7\n";
    const POINTS: &str = "7 0.1 0.2 3 255 0 0 0.5 1 0 2 0\n";

    #[test]
    fn minimal_model() {
        let cams = "1 PINHOLE 640 480 500 500 320 240\n";
        let images = "1 1 0 0 0 0 0 0 1 a\n10 10 3\n2 1 0 0 0 1 0 0 1 b\n20 20 3\n";
        let points = "3 0 0 1 0 0 0 0 1 0 2 0\n";
        let b = parse_sparse_model_str(0, cams, images, points).unwrap();
        assert_eq!(b.n_cameras(), 1);
        assert_eq!(b.model.points.len(), 1);
        assert_eq!(b.model.points[0].track.len(), 2);
        assert_eq!(b.cameras[1].name, "b");
    }

    #[test]
    fn two_camera_model() {
        let b = parse_sparse_model_str(0, CAMS, IMAGES, POINTS).unwrap();
        assert_eq!(b.n_cameras(), 2);
        assert_eq!(b.cameras[1].name, "cam_b.png");
        assert_eq!(b.model.points[0].track[1].keypoint, [110.0, 210.0]);
    }

    #[test]
    fn unmatched_keypoints_are_dropped() {
        let b = parse_sparse_model_str(0, CAMS, IMAGES, POINTS).unwrap();
        assert_eq!(b.model.observation_count(), 2);
        assert!(b.model.points[0].track.iter().all(|o| o.keypoint_index == 0));
    }

    #[test]
    fn simple_pinhole_is_promoted() {
        let cams = "1 SIMPLE_PINHOLE 640 480 700 320 240\n2 PINHOLE 640 480 500 500 320 240\n";
        let b = parse_sparse_model_str(0, cams, IMAGES, POINTS).unwrap();
        let k = b.model.per_camera_intrinsics[&1];
        assert_eq!((k.fx, k.fy), (700.0, 700.0));
        assert_eq!(b.promoted, vec![1]);
    }

    #[test]
    fn structured_errors() {
        let bad = "1 OPENCV 640 480 1 2 3 4 5 6 7 8\n";
        assert_eq!(
            parse_sparse_model_str(0, bad, IMAGES, POINTS),
            Err(SparseIoError::UnsupportedCameraModel("OPENCV".into()))
        );
        let bad = "1 PINHOLE 640 480 500 500 320\n";
        assert!(matches!(
            parse_sparse_model_str(0, bad, IMAGES, POINTS),
            Err(SparseIoError::MalformedLine { line: 1, .. })
        ));
        let dangling = "7 0.1 0.2 3 255 0 0 0.5 1 0 9 0\n";
        assert!(matches!(
            parse_sparse_model_str(0, CAMS, IMAGES, dangling),
            Err(SparseIoError::DanglingReference { kind: "image", id: 9 })
        ));
        let one_way = "7 0.1 0.2 3 255 0 0 0.5 1 0\n";
        assert!(matches!(
            parse_sparse_model_str(0, CAMS, IMAGES, one_way),
            Err(SparseIoError::DanglingReference { kind: "point", id: 7 })
        ));
    }

    #[test]
    fn write_then_parse() {
        let b = parse_sparse_model_str(0, CAMS, IMAGES, POINTS).unwrap();
        let [c, i, p] = render_sparse_model(&b.model, &b.cameras).unwrap();
        let again = parse_sparse_model_str(0, &c, &i, &p).unwrap();
        assert_eq!(again.model, b.model);
        assert_eq!(again.cameras, b.cameras);
    }

    #[test]
    fn empty_points() {
        let b = parse_sparse_model_str(0, CAMS, "1 1 0 0 0 0 0 0 1 a\n\n2 1 0 0 0 0 0 0 2 b\n\n", "").unwrap();
        assert!(b.model.points.is_empty());
        let [_, _, p] = render_sparse_model(&b.model, &b.cameras).unwrap();
        assert!(p.lines().all(|l| l.starts_with('#')));
    }
}
