//! On-disk dataset layout: one directory per sequence holding
//! `frames/NNNNNN.bin` scans, `boxes.txt` in trajectory format and
//! `meta.toml` with the category and id.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::kitti::{frame_path, read_velodyne, records_to_cloud, write_velodyne};
use super::{Category, Sequence};
use crate::tracker::Trajectory;
use crate::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    id: String,
    category: String,
    frames: usize,
}

/// Writes one sequence. Points are stored as `f32`, so coordinates lose
/// precision on the way through.
pub fn save_sequence(dir: &Path, seq: &Sequence) -> Result<()> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    for (i, cloud) in seq.frames.iter().enumerate() {
        let recs: Vec<[f32; 4]> = cloud
            .points()
            .iter()
            .map(|p| [p[0] as f32, p[1] as f32, p[2] as f32, 0.0])
            .collect();
        write_velodyne(&frame_path(&frames_dir, i), &recs)?;
    }
    Trajectory::from_boxes(&seq.gt_boxes).save(&dir.join("boxes.txt"))?;
    let meta = Meta {
        id: seq.id.clone(),
        category: seq.category.to_string(),
        frames: seq.len(),
    };
    let text = toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join("meta.toml");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let path = dir.join("meta.toml");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: Meta =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let boxes = Trajectory::load(&dir.join("boxes.txt"))?.boxes();
    if boxes.len() != meta.frames {
        return Err(Error::InvalidInput(format!(
            "{}: {} boxes but meta lists {} frames",
            dir.display(),
            boxes.len(),
            meta.frames
        )));
    }
    let frames_dir = dir.join("frames");
    let frames = (0..meta.frames)
        .map(|i| records_to_cloud(&read_velodyne(&frame_path(&frames_dir, i))?))
        .collect::<Result<Vec<_>>>()?;
    let category: Category = meta.category.parse().expect("infallible");
    Sequence::new(frames, boxes, category, meta.id)
}

/// Writes each sequence to `root/NNNN`.
pub fn save_dataset(root: &Path, seqs: &[Sequence]) -> Result<()> {
    for (i, s) in seqs.iter().enumerate() {
        save_sequence(&root.join(format!("{i:04}")), s)?;
    }
    Ok(())
}

/// Loads every sequence directory under `root`, sorted by name.
pub fn load_dataset(root: &Path) -> Result<Vec<Sequence>> {
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let p = entry.path();
        if p.join("meta.toml").is_file() {
            dirs.push(p);
        }
    }
    dirs.sort();
    dirs.iter().map(|d| load_sequence(d)).collect()
}
