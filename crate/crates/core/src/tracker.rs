//! Online tracking loop and trajectory export.
//!
//! Each step crops the search region around the current box, runs the
//! network against the memory bank and moves the box by the selected motion.
//! When the predicted mask never reaches the lost threshold the box is held
//! and the memory is left untouched.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bploc::{select_best, VoteOutput};
use crate::defpm::{FrameEntry, MemoryBank};
use crate::geometry::{apply_motion, crop_search_region, Box3D, PointCloud, TargetnessMask};
use crate::model::{coords_in_new_frame, Model};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    /// Memory capacity `T`.
    pub memory_size: usize,
    /// Points in each search region.
    pub crop_size: usize,
    pub margin: f64,
    /// Frames whose peak mask value is below this are lost.
    pub lost_threshold: f64,
    pub seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            memory_size: 3,
            crop_size: 128,
            margin: 2.0,
            lost_threshold: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrackStatus {
    /// The given first-frame box.
    Init,
    Normal,
    Lost,
}

impl fmt::Display for TrackStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrackStatus::Init => "init",
            TrackStatus::Normal => "normal",
            TrackStatus::Lost => "lost",
        })
    }
}

impl FromStr for TrackStatus {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "init" => Ok(TrackStatus::Init),
            "normal" => Ok(TrackStatus::Normal),
            "lost" => Ok(TrackStatus::Lost),
            other => Err(format!("unknown status {other:?}")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrackerState {
    pub current_box: Box3D,
    pub memory: MemoryBank,
    pub status: TrackStatus,
    /// One-based index of the last processed frame.
    pub frame_index: usize,
    pub config: TrackerConfig,
    first_box: Box3D,
    rng: ChaCha8Rng,
}

impl TrackerState {
    pub fn first_box(&self) -> &Box3D {
        &self.first_box
    }
}

/// Result of one tracking step, in world coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub bbox: Box3D,
    /// Seed-resolution targetness prediction.
    pub mask: TargetnessMask,
    pub status: TrackStatus,
}

type VoteEdit = Box<dyn Fn(&mut VoteOutput)>;

pub struct Tracker<'m> {
    model: &'m Model,
    state: TrackerState,
    vote_override: Option<VoteEdit>,
}

impl<'m> Tracker<'m> {
    /// Starts a track from the given first-frame box.
    pub fn init(
        model: &'m Model,
        config: TrackerConfig,
        cloud: &PointCloud,
        b1: Box3D,
    ) -> Result<Self> {
        if config.memory_size == 0 || config.crop_size < model.min_points() {
            return Err(Error::Config(format!(
                "memory_size {} must be positive and crop_size {} at least {}",
                config.memory_size,
                config.crop_size,
                model.min_points()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let region = crop_search_region(cloud, &b1, config.margin, config.crop_size, &mut rng)?;
        if region.empty {
            return Err(Error::EmptyCrop);
        }
        let local = Box3D {
            center: [0.0; 3],
            heading: 0.0,
            ..b1
        };
        let entry = model.initial_entry(&model.params, &region.points, &local)?;
        let mut memory = MemoryBank::new(config.memory_size);
        memory.push(entry);
        Ok(Self {
            model,
            state: TrackerState {
                current_box: b1,
                memory,
                status: TrackStatus::Init,
                frame_index: 1,
                config,
                first_box: b1,
                rng,
            },
            vote_override: None,
        })
    }

    pub fn state(&self) -> &TrackerState {
        &self.state
    }

    /// Installs an edit applied to the coarse predictions of every step.
    pub fn set_vote_override(&mut self, edit: impl Fn(&mut VoteOutput) + 'static) {
        self.vote_override = Some(Box::new(edit));
    }

    pub fn step(&mut self, cloud: &PointCloud) -> Result<StepOutput> {
        let st = &mut self.state;
        st.frame_index += 1;
        let n = self.model.config.backbone.num_seeds;
        let region = crop_search_region(
            cloud,
            &st.current_box,
            st.config.margin,
            st.config.crop_size,
            &mut st.rng,
        )?;
        if region.empty {
            st.status = TrackStatus::Lost;
            return Ok(StepOutput {
                bbox: st.current_box,
                mask: TargetnessMask::constant(n, 0.0),
                status: TrackStatus::Lost,
            });
        }
        let memory: Vec<&FrameEntry> = st.memory.entries().collect();
        let out = self.model.infer_frame(
            &region.points,
            &memory,
            st.first_box.canonical_extents(),
            self.vote_override.as_deref(),
        )?;
        if out.vote.mask.max() < st.config.lost_threshold {
            st.status = TrackStatus::Lost;
            return Ok(StepOutput {
                bbox: st.current_box,
                mask: out.vote.mask,
                status: TrackStatus::Lost,
            });
        }
        let (_, motion) = select_best(&out.proposals)?;
        let next = apply_motion(&st.current_box, &motion);
        let entry = FrameEntry::new(
            coords_in_new_frame(&out.seed_coords, &motion),
            out.write_feats,
            out.vote.mask.clone(),
        )?;
        st.memory.push(entry);
        st.current_box = next;
        st.status = TrackStatus::Normal;
        Ok(StepOutput {
            bbox: next,
            mask: out.vote.mask,
            status: TrackStatus::Normal,
        })
    }
}

/// One trajectory row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub frame: usize,
    pub bbox: Box3D,
    pub status: TrackStatus,
}

/// Per-frame boxes of one track.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub records: Vec<TrajectoryRecord>,
}

/// Column header of the trajectory text format.
pub const TRAJECTORY_HEADER: &str = "# frame x y z w l h heading status";

impl Trajectory {
    pub fn from_boxes(boxes: &[Box3D]) -> Self {
        Self {
            records: boxes
                .iter()
                .enumerate()
                .map(|(i, &bbox)| TrajectoryRecord {
                    frame: i,
                    bbox,
                    status: if i == 0 {
                        TrackStatus::Init
                    } else {
                        TrackStatus::Normal
                    },
                })
                .collect(),
        }
    }

    pub fn boxes(&self) -> Vec<Box3D> {
        self.records.iter().map(|r| r.bbox).collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Whitespace-separated rows after a `#` header; floats use the shortest
    /// representation that parses back to the same value.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{TRAJECTORY_HEADER}")?;
        for r in &self.records {
            let b = &r.bbox;
            writeln!(
                w,
                "{} {} {} {} {} {} {} {} {}",
                r.frame,
                b.center[0],
                b.center[1],
                b.center[2],
                b.size.w,
                b.size.l,
                b.size.h,
                b.heading,
                r.status
            )?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead, path: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let bad = |msg: String| Error::MalformedLabel {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let f: Vec<&str> = t.split_whitespace().collect();
            if f.len() != 9 {
                return Err(bad(format!("expected 9 fields, found {}", f.len())));
            }
            let frame = f[0].parse::<usize>().map_err(|e| bad(e.to_string()))?;
            let mut v = [0.0; 7];
            for (k, s) in f[1..8].iter().enumerate() {
                v[k] = s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")))?;
            }
            let bbox = Box3D::new([v[0], v[1], v[2]], v[3], v[4], v[5], v[6])
                .map_err(|e| bad(e.to_string()))?;
            let status = f[8].parse::<TrackStatus>().map_err(bad)?;
            records.push(TrajectoryRecord {
                frame,
                bbox,
                status,
            });
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f), path)
    }
}

/// Tracks a whole sequence: the first frame is given, the rest are stepped.
pub fn track_sequence(
    model: &Model,
    config: &TrackerConfig,
    clouds: &[PointCloud],
    b1: Box3D,
) -> Result<Trajectory> {
    let Some(first) = clouds.first() else {
        return Err(Error::InvalidInput("empty sequence".into()));
    };
    let mut tracker = Tracker::init(model, config.clone(), first, b1)?;
    let mut records = vec![TrajectoryRecord {
        frame: 0,
        bbox: b1,
        status: TrackStatus::Init,
    }];
    for (i, cloud) in clouds.iter().enumerate().skip(1) {
        let out = tracker.step(cloud)?;
        records.push(TrajectoryRecord {
            frame: i,
            bbox: out.bbox,
            status: out.status,
        });
    }
    Ok(Trajectory { records })
}
