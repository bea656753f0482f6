//! File formats, the synthetic video generator and dataset directories.

pub mod kv;
pub mod records;
pub mod synthetic;
pub mod tensor_io;

use std::path::Path;

use crate::error::{CdcError, Result};
use crate::eval::GroundTruthInstance;
use crate::tensor::Tensor;

pub use kv::KvConfig;
pub use records::{
    load_annotations, load_detections, load_proposals, load_scores, save_annotations,
    save_detections, save_proposals, save_scores,
};
pub use synthetic::{generate_synthetic, jittered_proposals, ClassSignature, SyntheticConfig};
pub use tensor_io::{decode_tensor, encode_tensor, read_tensor, write_tensor};

/// A clip of RGB frames, `(3, T, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub id: String,
    pub frames: Tensor,
}

impl Video {
    pub fn new(id: impl Into<String>, frames: Tensor) -> Result<Self> {
        let d = frames.dims();
        if d.len() != 4 || d[0] != 3 {
            return Err(CdcError::ShapeMismatch(format!(
                "video frames must be (3, T, H, W), got {d:?}"
            )));
        }
        Ok(Video {
            id: id.into(),
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.dims()[1]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Per-frame labels from instance intervals; background (`k`) elsewhere.
    pub fn frame_labels(&self, gt: &[GroundTruthInstance], k: usize) -> Vec<usize> {
        let mut labels = vec![k; self.len()];
        for g in gt.iter().filter(|g| g.video == self.id) {
            let end = g.end.min(self.len().saturating_sub(1));
            for l in labels.iter_mut().take(end + 1).skip(g.start) {
                *l = g.label;
            }
        }
        labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = CdcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(CdcError::InvalidArgument(format!("unknown split {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub num_classes: usize,
    pub videos: Vec<Video>,
    pub annotations: Vec<GroundTruthInstance>,
}

impl Dataset {
    /// Every instance must name a known video and lie within its frames.
    pub fn validate(&self) -> Result<()> {
        for g in &self.annotations {
            let v = self
                .videos
                .iter()
                .find(|v| v.id == g.video)
                .ok_or_else(|| {
                    CdcError::Missing(format!("annotation for unknown video {}", g.video))
                })?;
            if g.start > g.end || g.end >= v.len() || g.label >= self.num_classes {
                return Err(CdcError::InvalidArgument(format!(
                    "instance {g:?} invalid for video of {} frames and {} classes",
                    v.len(),
                    self.num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn video(&self, id: &str) -> Option<&Video> {
        self.videos.iter().find(|v| v.id == id)
    }

    /// Layout: `meta.txt`, `annotations.jsonl`, `videos/<id>.cdct`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let vdir = dir.join("videos");
        std::fs::create_dir_all(&vdir).map_err(|e| CdcError::io(&vdir, e))?;
        let mut meta = KvConfig::default();
        meta.set("split", self.split.as_str());
        meta.set("num_classes", self.num_classes);
        meta.set(
            "videos",
            self.videos
                .iter()
                .map(|v| v.id.as_str())
                .collect::<Vec<_>>()
                .join(","),
        );
        let meta_path = dir.join("meta.txt");
        std::fs::write(&meta_path, meta.render()).map_err(|e| CdcError::io(&meta_path, e))?;
        save_annotations(dir.join("annotations.jsonl"), &self.annotations)?;
        for v in &self.videos {
            write_tensor(vdir.join(format!("{}.cdct", v.id)), &v.frames)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta = KvConfig::load(dir.join("meta.txt"))?;
        let need = |key: &str| {
            CdcError::Missing(format!("{} lacks {key}", dir.join("meta.txt").display()))
        };
        let split: Split = meta
            .get::<String>("split")?
            .ok_or_else(|| need("split"))?
            .parse()?;
        let num_classes: usize = meta
            .get("num_classes")?
            .ok_or_else(|| need("num_classes"))?;
        let ids: String = meta.get("videos")?.ok_or_else(|| need("videos"))?;
        let videos = ids
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|id| {
                Video::new(
                    id,
                    read_tensor(dir.join("videos").join(format!("{id}.cdct")))?,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let annotations = load_annotations(dir.join("annotations.jsonl"), Some(num_classes))?;
        let ds = Dataset {
            split,
            num_classes,
            videos,
            annotations,
        };
        ds.validate()?;
        Ok(ds)
    }
}
