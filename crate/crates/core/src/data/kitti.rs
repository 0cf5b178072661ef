//! KITTI tracking ingestion: velodyne scans, `label_02` tracklets and
//! calibration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use super::{Category, Sequence};
use crate::geometry::{Box3D, PointCloud};
use crate::{Error, Result};

/// Raw scan record: `x, y, z, intensity`.
pub type VelodyneRecord = [f32; 4];

pub fn parse_velodyne(bytes: &[u8], path: &Path) -> Result<Vec<VelodyneRecord>> {
    if bytes.len() % 16 != 0 {
        return Err(Error::InvalidInput(format!(
            "{}: {} bytes is not a whole number of 16-byte records",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(16)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[4 * i..4 * i + 4].try_into().expect("4 bytes"));
            [f(0), f(1), f(2), f(3)]
        })
        .collect())
}

pub fn velodyne_bytes(records: &[VelodyneRecord]) -> Vec<u8> {
    records
        .iter()
        .flat_map(|r| r.iter().flat_map(|v| v.to_le_bytes()))
        .collect()
}

pub fn read_velodyne(path: &Path) -> Result<Vec<VelodyneRecord>> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFrame(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    parse_velodyne(&bytes, path)
}

pub fn write_velodyne(path: &Path, records: &[VelodyneRecord]) -> Result<()> {
    std::fs::write(path, velodyne_bytes(records)).map_err(|e| Error::io(path, e))
}

/// Geometry only; intensity is dropped.
pub fn records_to_cloud(records: &[VelodyneRecord]) -> Result<PointCloud> {
    PointCloud::new(
        records
            .iter()
            .map(|r| [r[0] as f64, r[1] as f64, r[2] as f64])
            .collect(),
    )
}

/// Rectification and LiDAR-to-camera transforms.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub r_rect: Matrix3<f64>,
    /// Top three rows of the homogeneous LiDAR-to-camera transform.
    pub tr_velo_cam: [[f64; 4]; 3],
    cam_to_velo: Matrix4<f64>,
}

impl Calibration {
    pub fn new(r_rect: Matrix3<f64>, tr_velo_cam: [[f64; 4]; 3]) -> Result<Self> {
        let mut r4 = Matrix4::identity();
        r4.fixed_view_mut::<3, 3>(0, 0).copy_from(&r_rect);
        let mut t4 = Matrix4::identity();
        for (i, row) in tr_velo_cam.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                t4[(i, j)] = v;
            }
        }
        let forward = r4 * t4;
        let cam_to_velo = forward
            .try_inverse()
            .ok_or_else(|| Error::Calibration("calibration transform is singular".into()))?;
        Ok(Self {
            r_rect,
            tr_velo_cam,
            cam_to_velo,
        })
    }

    /// Rectified camera point → LiDAR frame.
    pub fn cam_to_velo_point(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.cam_to_velo * Vector4::new(p[0], p[1], p[2], 1.0);
        [v[0] / v[3], v[1] / v[3], v[2] / v[3]]
    }

    /// Rectified camera direction → LiDAR frame.
    pub fn cam_to_velo_dir(&self, d: [f64; 3]) -> [f64; 3] {
        let r = self.cam_to_velo.fixed_view::<3, 3>(0, 0) * Vector3::new(d[0], d[1], d[2]);
        [r[0], r[1], r[2]]
    }

    /// Reads a calibration file. Both the tracking (`R_rect`, `Tr_velo_cam`)
    /// and the object (`R0_rect:`, `Tr_velo_to_cam:`) key spellings work.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut r_rect = None;
        let mut tr = None;
        for line in text.lines() {
            let mut it = line.split_whitespace();
            let Some(key) = it.next() else { continue };
            let key = key.trim_end_matches(':');
            let vals: Vec<f64> = it
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Calibration(format!("{}: key {key}: {e}", path.display())))?;
            match key {
                "R_rect" | "R0_rect" => {
                    if vals.len() != 9 {
                        return Err(Error::Calibration(format!(
                            "{}: {key} needs 9 values",
                            path.display()
                        )));
                    }
                    r_rect = Some(Matrix3::from_row_slice(&vals));
                }
                "Tr_velo_cam" | "Tr_velo_to_cam" => {
                    if vals.len() != 12 {
                        return Err(Error::Calibration(format!(
                            "{}: {key} needs 12 values",
                            path.display()
                        )));
                    }
                    let mut m = [[0.0; 4]; 3];
                    for (i, v) in vals.iter().enumerate() {
                        m[i / 4][i % 4] = *v;
                    }
                    tr = Some(m);
                }
                _ => {}
            }
        }
        let r_rect = r_rect
            .ok_or_else(|| Error::Calibration(format!("{}: missing R_rect", path.display())))?;
        let tr = tr.ok_or_else(|| {
            Error::Calibration(format!("{}: missing Tr_velo_cam", path.display()))
        })?;
        Self::new(r_rect, tr)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// One object line of a tracking label file.
#[derive(Clone, Debug, PartialEq)]
pub struct KittiLabel {
    pub frame: usize,
    pub track_id: i64,
    pub kind: String,
    pub truncated: f64,
    pub occluded: i64,
    pub alpha: f64,
    pub bbox_2d: [f64; 4],
    /// `(h, w, l)` in meters.
    pub dims: [f64; 3],
    /// Bottom centre in rectified camera coordinates.
    pub location: [f64; 3],
    pub rotation_y: f64,
}

impl KittiLabel {
    /// Box in the LiDAR frame: `h w l` map to the box's height, width and
    /// length, and the bottom centre is lifted by half the height.
    pub fn to_box(&self, calib: &Calibration) -> Result<Box3D> {
        let [h, w, l] = self.dims;
        let bottom = calib.cam_to_velo_point(self.location);
        let (s, c) = self.rotation_y.sin_cos();
        let dir = calib.cam_to_velo_dir([c, 0.0, -s]);
        Box3D::new(
            [bottom[0], bottom[1], bottom[2] + h / 2.0],
            w,
            l,
            h,
            dir[1].atan2(dir[0]),
        )
    }
}

pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<KittiLabel>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::MalformedLabel {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 17 && f.len() != 18 {
            return Err(bad(format!("expected 17 or 18 fields, found {}", f.len())));
        }
        let num = |k: usize| {
            f[k].parse::<f64>()
                .map_err(|e| bad(format!("field {}: {:?}: {e}", k + 1, f[k])))
        };
        let int = |k: usize| {
            f[k].parse::<i64>()
                .map_err(|e| bad(format!("field {}: {:?}: {e}", k + 1, f[k])))
        };
        let frame = int(0)?;
        if frame < 0 {
            return Err(bad(format!("negative frame {frame}")));
        }
        out.push(KittiLabel {
            frame: frame as usize,
            track_id: int(1)?,
            kind: f[2].to_string(),
            truncated: num(3)?,
            occluded: int(4)?,
            alpha: num(5)?,
            bbox_2d: [num(6)?, num(7)?, num(8)?, num(9)?],
            dims: [num(10)?, num(11)?, num(12)?],
            location: [num(13)?, num(14)?, num(15)?],
            rotation_y: num(16)?,
        });
    }
    Ok(out)
}

/// Velodyne file of `frame` inside `dir`.
pub fn frame_path(dir: &Path, frame: usize) -> PathBuf {
    dir.join(format!("{frame:06}.bin"))
}

/// Loads the first contiguous run of frames in which `track_id` appears.
pub fn load_kitti_tracklet(
    velodyne_dir: &Path,
    label_file: &Path,
    calib_file: &Path,
    track_id: i64,
) -> Result<Sequence> {
    let text = std::fs::read_to_string(label_file).map_err(|e| Error::io(label_file, e))?;
    let labels = parse_labels(&text, label_file)?;
    let calib = Calibration::load(calib_file)?;
    let by_frame: BTreeMap<usize, &KittiLabel> = labels
        .iter()
        .filter(|l| l.track_id == track_id)
        .map(|l| (l.frame, l))
        .collect();
    let Some((&first, first_label)) = by_frame.iter().next() else {
        return Err(Error::UnknownTrack(track_id));
    };
    let mut frames = Vec::new();
    let mut boxes = Vec::new();
    let mut f = first;
    while let Some(label) = by_frame.get(&f) {
        let records = read_velodyne(&frame_path(velodyne_dir, f))?;
        frames.push(records_to_cloud(&records)?);
        boxes.push(label.to_box(&calib)?);
        f += 1;
    }
    let stem = label_file
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("kitti");
    let category: Category = first_label.kind.parse().expect("infallible");
    Sequence::new(frames, boxes, category, format!("{stem}-{track_id}"))
}
