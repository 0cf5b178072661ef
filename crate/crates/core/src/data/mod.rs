//! Sequences of point clouds with ground-truth boxes: synthetic generation,
//! KITTI tracking ingestion, on-disk datasets and training windows.

pub mod dataset;
pub mod kitti;
pub mod samples;
pub mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::geometry::{Box3D, PointCloud};
use crate::{Error, Result};

pub use dataset::{load_dataset, load_sequence, save_dataset, save_sequence};
pub use kitti::load_kitti_tracklet;
pub use samples::{make_training_samples, TrainingSample};
pub use synth::{generate_sequence, SynthConfig, Template};

/// Object class of a tracklet.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Car,
    Pedestrian,
    Van,
    Cyclist,
    Other(String),
}

impl Category {
    /// Whether the shape stays rigid over time.
    pub fn is_rigid(&self) -> bool {
        !matches!(self, Category::Pedestrian | Category::Cyclist)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Category::Car => f.write_str("Car"),
            Category::Pedestrian => f.write_str("Pedestrian"),
            Category::Van => f.write_str("Van"),
            Category::Cyclist => f.write_str("Cyclist"),
            Category::Other(s) => f.write_str(s),
        }
    }
}

impl FromStr for Category {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "car" => Category::Car,
            "pedestrian" => Category::Pedestrian,
            "van" => Category::Van,
            "cyclist" => Category::Cyclist,
            _ => Category::Other(s.to_string()),
        })
    }
}

/// One tracklet.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub frames: Vec<PointCloud>,
    pub gt_boxes: Vec<Box3D>,
    pub category: Category,
    pub id: String,
}

impl Sequence {
    pub fn new(
        frames: Vec<PointCloud>,
        gt_boxes: Vec<Box3D>,
        category: Category,
        id: impl Into<String>,
    ) -> Result<Self> {
        if frames.len() != gt_boxes.len() {
            return Err(Error::InvalidInput(format!(
                "{} frames but {} boxes",
                frames.len(),
                gt_boxes.len()
            )));
        }
        if frames.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "sequence needs at least 2 frames, got {}",
                frames.len()
            )));
        }
        Ok(Self {
            frames,
            gt_boxes,
            category,
            id: id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn category_names() {
        for c in [
            Category::Car,
            Category::Pedestrian,
            Category::Van,
            Category::Cyclist,
        ] {
            assert_eq!(c.to_string().parse::<Category>().unwrap(), c);
        }
        assert_eq!(
            "Tram".parse::<Category>().unwrap(),
            Category::Other("Tram".into())
        );
        assert!(Category::Car.is_rigid());
        assert!(!Category::Pedestrian.is_rigid());
    }

    #[test]
    fn sequences_need_two_frames() {
        let b = Box3D::new([0.0; 3], 1.0, 1.0, 1.0, 0.0).unwrap();
        assert!(Sequence::new(vec![PointCloud::empty()], vec![b], Category::Car, "x").is_err());
        assert!(Sequence::new(vec![PointCloud::empty(); 2], vec![b], Category::Car, "x").is_err());
        assert!(
            Sequence::new(vec![PointCloud::empty(); 2], vec![b; 2], Category::Car, "x").is_ok()
        );
    }
}
