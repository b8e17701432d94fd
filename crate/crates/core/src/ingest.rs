//! Match file reader/writer and COLMAP text model export.
//!
//! Match file (UTF-8, line oriented, `#` lines ignored, ids 0-based):
//!
//! ```text
//! fastmap-matches 1
//! images <N>
//! image <id> <camera> <width> <height> <num_keypoints> <name>
//! <x> <y>                       # num_keypoints lines
//! pairs <M>
//! pair <i> <j> <F|H> <count>
//! <keypoint in i> <keypoint in j>   # count lines
//! ```
//!
//! Model directory (COLMAP text layout, ids 1-based):
//! `cameras.txt` holds `ID SIMPLE_RADIAL W H f cx cy alpha` where `alpha` is
//! the division-model parameter on half-diagonal coordinates, not COLMAP's
//! polynomial `k`. `images.txt` holds `ID qw qx qy qz tx ty tz CAM NAME`
//! followed by a `x y POINT3D_ID` line; unregistered images are omitted.
//! `points3D.txt` holds `ID X Y Z R G B ERROR (IMAGE_ID POINT2D_IDX)…`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::model::{
    CameraModel, GeometryClass, ImageInfo, ImagePairMatches, MatchSet, Observation, Pose, PoseState, Rotation3,
    SceneModel, ScenePoint,
};

const MATCH_MAGIC: &str = "fastmap-matches";
const MATCH_VERSION: u32 = 1;

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            inner: text.lines().enumerate(),
            line: 0,
        }
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            message: message.into(),
        }
    }

    /// Next non-empty, non-comment line.
    fn next_line(&mut self) -> Result<Option<&'a str>> {
        for (k, raw) in self.inner.by_ref() {
            self.line = k + 1;
            let l = raw.trim();
            if !l.is_empty() && !l.starts_with('#') {
                return Ok(Some(l));
            }
        }
        Ok(None)
    }

    fn expect_line(&mut self, what: &str) -> Result<&'a str> {
        self.next_line()?.ok_or_else(|| Error::Parse {
            line: self.line + 1,
            message: format!("unexpected end of file, expected {what}"),
        })
    }

    fn keyword(&mut self, kw: &str) -> Result<Vec<&'a str>> {
        let l = self.expect_line(kw)?;
        let mut fields: Vec<&str> = l.split_whitespace().collect();
        if fields.first() != Some(&kw) {
            return Err(self.err(format!("expected `{kw}`, got {l:?}")));
        }
        fields.remove(0);
        Ok(fields)
    }
}

fn num<T: std::str::FromStr>(lines: &Lines, s: Option<&&str>, what: &str) -> Result<T> {
    s.and_then(|s| s.parse().ok())
        .ok_or_else(|| lines.err(format!("missing or invalid {what}")))
}

pub fn parse_matches(text: &str) -> Result<MatchSet> {
    let mut lines = Lines::new(text);
    let header = lines.keyword(MATCH_MAGIC)?;
    let version: u32 = num(&lines, header.first(), "version")?;
    if version != MATCH_VERSION {
        return Err(lines.err(format!("unsupported match file version {version}")));
    }
    let f = lines.keyword("images")?;
    let n_images: usize = num(&lines, f.first(), "image count")?;
    let mut images = Vec::with_capacity(n_images);
    for expected in 0..n_images {
        let l = lines.expect_line("image record")?;
        let mut parts = l.splitn(7, char::is_whitespace).filter(|s| !s.is_empty());
        let f: Vec<&str> = parts.by_ref().take(6).collect();
        if f.first() != Some(&"image") || f.len() < 6 {
            return Err(lines.err(format!(
                "expected `image <id> <camera> <width> <height> <n> <name>`, got {l:?}"
            )));
        }
        let id: usize = num(&lines, f.get(1), "image id")?;
        if id != expected {
            return Err(lines.err(format!(
                "image ids must be contiguous from 0; expected {expected}, got {id}"
            )));
        }
        let camera = num(&lines, f.get(2), "camera id")?;
        let width = num(&lines, f.get(3), "width")?;
        let height = num(&lines, f.get(4), "height")?;
        let n_kp: usize = num(&lines, f.get(5), "keypoint count")?;
        let name = parts.next().map(str::trim).unwrap_or("").to_string();
        if name.is_empty() {
            return Err(lines.err("image name missing"));
        }
        let mut keypoints = Vec::with_capacity(n_kp);
        for _ in 0..n_kp {
            let l = lines.expect_line("keypoint")?;
            let xy: Vec<&str> = l.split_whitespace().collect();
            if xy.len() != 2 {
                return Err(lines.err(format!("expected `<x> <y>`, got {l:?}")));
            }
            keypoints.push(Vector2::new(
                num(&lines, xy.first(), "x")?,
                num(&lines, xy.get(1), "y")?,
            ));
        }
        images.push(ImageInfo {
            name,
            camera,
            width,
            height,
            keypoints,
        });
    }
    let f = lines.keyword("pairs")?;
    let n_pairs: usize = num(&lines, f.first(), "pair count")?;
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let f = lines.keyword("pair")?;
        let i = num(&lines, f.first(), "image i")?;
        let j = num(&lines, f.get(1), "image j")?;
        let class = match f.get(2) {
            Some(&"F") => GeometryClass::Fundamental,
            Some(&"H") => GeometryClass::Homography,
            _ => return Err(lines.err("geometry class must be F or H")),
        };
        let count: usize = num(&lines, f.get(3), "correspondence count")?;
        let mut corr = Vec::with_capacity(count);
        for _ in 0..count {
            let l = lines.expect_line("correspondence")?;
            let ab: Vec<&str> = l.split_whitespace().collect();
            if ab.len() != 2 {
                return Err(lines.err(format!("expected `<a> <b>`, got {l:?}")));
            }
            corr.push((
                num(&lines, ab.first(), "keypoint index")?,
                num(&lines, ab.get(1), "keypoint index")?,
            ));
        }
        pairs.push(ImagePairMatches::new(i, j, class, corr));
    }
    if let Some(extra) = lines.next_line()? {
        return Err(lines.err(format!("trailing content {extra:?}")));
    }
    let ms = MatchSet { images, pairs };
    let diagnostics = ms.validate();
    if diagnostics.is_empty() {
        Ok(ms)
    } else {
        Err(Error::Validation(diagnostics))
    }
}

pub fn read_matches(path: &Path) -> Result<MatchSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matches(&text)
}

pub fn format_matches(ms: &MatchSet) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{MATCH_MAGIC} {MATCH_VERSION}");
    let _ = writeln!(s, "images {}", ms.images.len());
    for (id, im) in ms.images.iter().enumerate() {
        let _ = writeln!(
            s,
            "image {id} {} {} {} {} {}",
            im.camera,
            im.width,
            im.height,
            im.keypoints.len(),
            im.name
        );
        for kp in &im.keypoints {
            let _ = writeln!(s, "{} {}", kp.x, kp.y);
        }
    }
    let _ = writeln!(s, "pairs {}", ms.pairs.len());
    for p in &ms.pairs {
        let _ = writeln!(s, "pair {} {} {} {}", p.i, p.j, p.class.tag(), p.correspondences.len());
        for (a, b) in &p.correspondences {
            let _ = writeln!(s, "{a} {b}");
        }
    }
    s
}

pub fn write_matches(ms: &MatchSet, path: &Path) -> Result<()> {
    std::fs::write(path, format_matches(ms)).map_err(|e| Error::io(path, e))
}

/// The three model files as strings: cameras, images, points.
pub fn format_model(scene: &SceneModel) -> (String, String, String) {
    let mut cameras =
        String::from("# Camera list: CAMERA_ID, MODEL, WIDTH, HEIGHT, f, cx, cy, alpha (division model)\n");
    let _ = writeln!(cameras, "# Number of cameras: {}", scene.cameras.len());
    for (id, c) in scene.cameras.iter().enumerate() {
        let _ = writeln!(
            cameras,
            "{} SIMPLE_RADIAL {} {} {} {} {} {}",
            id + 1,
            c.width,
            c.height,
            c.focal,
            c.cx,
            c.cy,
            c.alpha
        );
    }

    // points2D of every image: inlier observations in point order.
    let mut points2d: Vec<Vec<(Vector2<f64>, usize)>> = vec![Vec::new(); scene.image_names.len()];
    let mut tracks: Vec<Vec<(usize, usize)>> = Vec::with_capacity(scene.points.len());
    for (pid, p) in scene.points.iter().enumerate() {
        let mut track = Vec::new();
        for o in p.observations.iter().filter(|o| o.inlier) {
            if scene.poses.get(o.image).is_none() {
                continue;
            }
            track.push((o.image, points2d[o.image].len()));
            points2d[o.image].push((o.xy, pid));
        }
        tracks.push(track);
    }

    let mut images = String::from("# Image list: IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n");
    let _ = writeln!(images, "#   POINTS2D[] as (X, Y, POINT3D_ID)");
    let _ = writeln!(images, "# Number of images: {}", scene.poses.num_registered());
    for (id, pose) in scene.poses.registered() {
        // `+ 0.0` turns -0 into 0 so equal poses print identically.
        let q = pose.rotation.to_quaternion();
        let t = pose.translation();
        let _ = writeln!(
            images,
            "{} {} {} {} {} {} {} {} {} {}",
            id + 1,
            q[0] + 0.0,
            q[1] + 0.0,
            q[2] + 0.0,
            q[3] + 0.0,
            t.x + 0.0,
            t.y + 0.0,
            t.z + 0.0,
            scene.image_cameras[id] + 1,
            scene.image_names[id]
        );
        let obs: Vec<String> = points2d[id]
            .iter()
            .map(|(xy, pid)| format!("{} {} {}", xy.x, xy.y, pid + 1))
            .collect();
        let _ = writeln!(images, "{}", obs.join(" "));
    }

    let mut points =
        String::from("# 3D point list: POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n");
    let _ = writeln!(points, "# Number of points: {}", scene.points.len());
    for (pid, (p, track)) in scene.points.iter().zip(&tracks).enumerate() {
        let _ = write!(
            points,
            "{} {} {} {} {} {} {} {}",
            pid + 1,
            p.xyz.x,
            p.xyz.y,
            p.xyz.z,
            p.rgb[0],
            p.rgb[1],
            p.rgb[2],
            p.error
        );
        for (im, k) in track {
            let _ = write!(points, " {} {}", im + 1, k);
        }
        points.push('\n');
    }
    (cameras, images, points)
}

pub fn write_model(scene: &SceneModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (cameras, images, points) = format_model(scene);
    for (name, text) in [
        ("cameras.txt", cameras),
        ("images.txt", images),
        ("points3D.txt", points),
    ] {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn parse_cameras(text: &str) -> Result<Vec<CameraModel>> {
    let mut lines = Lines::new(text);
    let mut cameras = Vec::new();
    while let Some(l) = lines.next_line()? {
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() != 8 {
            return Err(lines.err(format!("expected 8 camera fields, got {}", f.len())));
        }
        let id: usize = num(&lines, f.first(), "camera id")?;
        if id != cameras.len() + 1 {
            return Err(lines.err("camera ids must be contiguous from 1"));
        }
        cameras.push(CameraModel {
            width: num(&lines, f.get(2), "width")?,
            height: num(&lines, f.get(3), "height")?,
            focal: num(&lines, f.get(4), "focal")?,
            cx: num(&lines, f.get(5), "cx")?,
            cy: num(&lines, f.get(6), "cy")?,
            alpha: num(&lines, f.get(7), "alpha")?,
        });
    }
    Ok(cameras)
}

struct ImageRecord {
    id: usize,
    camera: usize,
    name: String,
    pose: Pose,
    points2d: Vec<(Vector2<f64>, i64)>,
}

fn parse_images(text: &str) -> Result<Vec<ImageRecord>> {
    let mut lines = Lines::new(text);
    let mut out = Vec::new();
    // The points2D line may be empty, so lines are consumed in raw pairs.
    let raw: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim_start().starts_with('#'))
        .map(|(k, l)| (k + 1, l))
        .collect();
    let mut k = 0;
    while k < raw.len() {
        let (lineno, l) = raw[k];
        lines.line = lineno;
        if l.trim().is_empty() {
            k += 1;
            continue;
        }
        let mut parts = l.trim().splitn(10, char::is_whitespace);
        let f: Vec<&str> = parts.by_ref().take(9).collect();
        let name = parts.next().map(str::trim).unwrap_or("").to_string();
        if f.len() != 9 || name.is_empty() {
            return Err(lines.err(format!("expected `ID QW QX QY QZ TX TY TZ CAM NAME`, got {l:?}")));
        }
        let id: usize = num(&lines, f.first(), "image id")?;
        let q: [f64; 4] = [
            num(&lines, f.get(1), "qw")?,
            num(&lines, f.get(2), "qx")?,
            num(&lines, f.get(3), "qy")?,
            num(&lines, f.get(4), "qz")?,
        ];
        let t = Vector3::new(
            num(&lines, f.get(5), "tx")?,
            num(&lines, f.get(6), "ty")?,
            num(&lines, f.get(7), "tz")?,
        );
        let camera: usize = num(&lines, f.get(8), "camera id")?;
        if id == 0 || camera == 0 {
            return Err(lines.err("ids are 1-based"));
        }
        let rotation = Rotation3::from_quaternion(q).map_err(|e| lines.err(e.to_string()))?;
        let center = -(rotation.matrix().transpose() * t);
        let mut points2d = Vec::new();
        if let Some(&(lineno, obs)) = raw.get(k + 1) {
            lines.line = lineno;
            let v: Vec<&str> = obs.split_whitespace().collect();
            if !v.len().is_multiple_of(3) {
                return Err(lines.err("points2D line must hold triples `X Y POINT3D_ID`"));
            }
            for c in v.chunks(3) {
                points2d.push((
                    Vector2::new(num(&lines, c.first(), "x")?, num(&lines, c.get(1), "y")?),
                    num(&lines, c.get(2), "point id")?,
                ));
            }
        }
        out.push(ImageRecord {
            id: id - 1,
            camera: camera - 1,
            name,
            pose: Pose::new(rotation, center),
            points2d,
        });
        k += 2;
    }
    Ok(out)
}

fn parse_points(text: &str, images: &[ImageRecord]) -> Result<Vec<ScenePoint>> {
    let by_id: std::collections::HashMap<usize, &ImageRecord> = images.iter().map(|r| (r.id, r)).collect();
    let mut lines = Lines::new(text);
    let mut points = Vec::new();
    while let Some(l) = lines.next_line()? {
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() < 8 || !(f.len() - 8).is_multiple_of(2) {
            return Err(lines.err("expected `ID X Y Z R G B ERROR (IMAGE_ID POINT2D_IDX)…`"));
        }
        let id: usize = num(&lines, f.first(), "point id")?;
        let xyz = Vector3::new(
            num(&lines, f.get(1), "X")?,
            num(&lines, f.get(2), "Y")?,
            num(&lines, f.get(3), "Z")?,
        );
        let rgb = [
            num(&lines, f.get(4), "R")?,
            num(&lines, f.get(5), "G")?,
            num(&lines, f.get(6), "B")?,
        ];
        let error = num(&lines, f.get(7), "error")?;
        let mut observations = Vec::new();
        for c in f[8..].chunks(2) {
            let im: usize = num(&lines, c.first(), "image id")?;
            let k: usize = num(&lines, c.get(1), "point2D index")?;
            let rec = im
                .checked_sub(1)
                .and_then(|i| by_id.get(&i))
                .ok_or_else(|| lines.err(format!("track references unknown image {im}")))?;
            let (xy, _) = rec
                .points2d
                .get(k)
                .ok_or_else(|| lines.err(format!("image {im} has no point2D {k}")))?;
            observations.push(Observation {
                image: rec.id,
                keypoint: k as u32,
                xy: *xy,
                inlier: true,
            });
        }
        points.push(ScenePoint {
            xyz,
            track: id.saturating_sub(1),
            observations,
            rgb,
            error,
        });
    }
    Ok(points)
}

/// Reads a model directory. A missing `points3D.txt` yields no points.
/// Image ids absent from `images.txt` become unregistered, unnamed images.
pub fn read_model(dir: &Path) -> Result<SceneModel> {
    let read = |name: &str| {
        let path = dir.join(name);
        std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
    };
    let cameras = parse_cameras(&read("cameras.txt")?)?;
    let records = parse_images(&read("images.txt")?)?;
    let n = records.iter().map(|r| r.id + 1).max().unwrap_or(0);
    let mut scene = SceneModel {
        cameras,
        image_names: vec![String::new(); n],
        image_cameras: vec![0; n],
        poses: PoseState::unregistered(n),
        points: Vec::new(),
    };
    for r in &records {
        if r.camera >= scene.cameras.len() {
            return Err(Error::Parse {
                line: 0,
                message: format!("image {} references unknown camera {}", r.id + 1, r.camera + 1),
            });
        }
        scene.image_names[r.id] = r.name.clone();
        scene.image_cameras[r.id] = r.camera;
        scene.poses.poses[r.id] = Some(r.pose);
    }
    let points_path = dir.join("points3D.txt");
    if points_path.exists() {
        scene.points = parse_points(&read("points3D.txt")?, &records)?;
    }
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, SynthSpec};

    fn tiny_scene() -> SceneModel {
        SceneModel {
            cameras: vec![CameraModel::new(640, 480, 500.0, -0.1)],
            image_names: vec!["a.jpg".into(), "b c.jpg".into()],
            image_cameras: vec![0, 0],
            poses: PoseState {
                poses: vec![
                    Some(Pose::new(Rotation3::identity(), Vector3::zeros())),
                    Some(Pose::new(Rotation3::identity(), Vector3::new(1.0, 0.0, 0.0))),
                ],
            },
            points: vec![],
        }
    }

    #[test]
    fn identity_pose_line_and_translation() {
        let (_, images, _) = format_model(&tiny_scene());
        let data: Vec<&str> = images.lines().filter(|l| !l.starts_with('#')).collect();
        assert!(data[0].starts_with("1 1 0 0 0 0 0 0 1 a.jpg"), "{}", data[0]);
        assert!(data[2].starts_with("2 1 0 0 0 -1 0 0 1 b c.jpg"), "{}", data[2]);
    }

    #[test]
    fn model_round_trip() {
        let scene = synth::generate(&SynthSpec {
            n_images: 6,
            n_points: 150,
            noise_px: 0.3,
            ..SynthSpec::default()
        })
        .unwrap()
        .gt;
        let dir = tempfile::tempdir().unwrap();
        write_model(&scene, dir.path()).unwrap();
        let back = read_model(dir.path()).unwrap();
        assert_eq!(back.cameras, scene.cameras);
        assert_eq!(back.image_names, scene.image_names);
        for (k, p) in scene.poses.registered() {
            let q = back.poses.get(k).unwrap();
            assert!(p.rotation.geodesic(&q.rotation) <= 1e-9);
            assert!((p.center - q.center).amax() <= 1e-9);
        }
        assert_eq!(back.points.len(), scene.points.len());
        for (a, b) in scene.points.iter().zip(&back.points) {
            assert_eq!(a.xyz, b.xyz);
            let xa: Vec<_> = a.observations.iter().map(|o| (o.image, o.xy)).collect();
            let xb: Vec<_> = b.observations.iter().map(|o| (o.image, o.xy)).collect();
            assert_eq!(xa, xb);
        }

        std::fs::remove_file(dir.path().join("points3D.txt")).unwrap();
        assert!(read_model(dir.path()).unwrap().points.is_empty());
        assert!(read_model(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn comments_are_skipped() {
        let cams = "# header\n1 SIMPLE_RADIAL 10 10 5 5 5 0\n# trailing\n";
        assert_eq!(parse_cameras(cams).unwrap().len(), 1);
    }

    #[test]
    fn match_round_trip_is_identical() {
        let ms = synth::generate(&SynthSpec {
            n_images: 3,
            n_points: 120,
            noise_px: 0.7,
            ..SynthSpec::default()
        })
        .unwrap()
        .matches;
        let text = format_matches(&ms);
        let back = parse_matches(&text).unwrap();
        assert_eq!(back, ms);
        assert_eq!(back.pairs.len(), 3);
        assert_eq!(format_matches(&back), text);
    }

    #[test]
    fn empty_pair_list_and_dangling_id() {
        let base = "fastmap-matches 1\nimages 2\nimage 0 0 10 10 1 a\n1 1\nimage 1 0 10 10 1 b\n2 2\n";
        let ms = parse_matches(&format!("{base}pairs 0\n")).unwrap();
        assert!(ms.pairs.is_empty());
        let bad = parse_matches(&format!("{base}pairs 1\npair 0 5 F 1\n0 0\n"));
        assert!(matches!(bad, Err(Error::Validation(_))));
        assert!(matches!(
            parse_matches("fastmap-matches 2\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_matches(&format!("{base}pairs 1\npair 0 1 X 1\n0 0\n")),
            Err(Error::Parse { line: 8, .. })
        ));
    }
}
