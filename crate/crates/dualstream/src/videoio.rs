//! Clip ingestion and uniform temporal sampling.
//!
//! Clips are directories of sequentially numbered still frames
//! (`frame_00000.png`, PNG or PPM); an external tool is expected to have
//! demuxed the source videos. A dataset is described by a JSON manifest
//! listing every clip with its class and split assignment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imageops::{Frame, ImageError};

#[derive(Debug, Error)]
pub enum VideoError {
    #[error("clip {id} has {found} frame(s); at least 2 are required")]
    MissingFrames { id: String, found: usize },
    #[error("clip {id}: frame {frame} is {found_w}x{found_h}, expected {want_w}x{want_h}")]
    DimensionMismatch {
        id: String,
        frame: String,
        found_w: usize,
        found_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("clip has {found} frame(s), too few to sample")]
    TooFewFrames { found: usize },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
}

/// An ingested clip: ordered full-resolution frames plus its label.
#[derive(Debug, Clone)]
pub struct Clip {
    pub id: String,
    pub class_label: usize,
    pub frames: Vec<Frame>,
    pub source_path: PathBuf,
}

/// A clip reduced to exactly `n` frames resized to `size x size`.
#[derive(Debug, Clone)]
pub struct SampledClip {
    pub frames: Vec<Frame>,
    pub middle_index: usize,
    pub sample_indices: Vec<usize>,
}

impl SampledClip {
    /// The representative appearance frame (index `floor(n/2)`).
    pub fn middle_frame(&self) -> &Frame {
        &self.frames[self.middle_index]
    }
}

/// One manifest row.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub class_name: String,
    pub class_index: usize,
    #[serde(default)]
    pub split: Option<String>,
}

/// The dataset manifest: clip listing plus the class vocabulary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub clips: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, VideoError> {
        let text = std::fs::read_to_string(path).map_err(|e| VideoError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| VideoError::Manifest(e.to_string()))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<(), VideoError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| VideoError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        }
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| VideoError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    fn validate(&self) -> Result<(), VideoError> {
        let mut seen = std::collections::HashSet::new();
        for entry in &self.clips {
            if !seen.insert(&entry.id) {
                return Err(VideoError::Manifest(format!("duplicate clip id {}", entry.id)));
            }
            if entry.class_index >= self.classes.len() {
                return Err(VideoError::Manifest(format!(
                    "clip {}: class_index {} out of range ({} classes)",
                    entry.id,
                    entry.class_index,
                    self.classes.len()
                )));
            }
        }
        Ok(())
    }

    /// Directory holding the frames of one clip: `<root>/<class_name>/<id>/`.
    pub fn clip_dir(&self, root: &Path, entry: &ManifestEntry) -> PathBuf {
        root.join(&entry.class_name).join(&entry.id)
    }
}

/// Reads a clip from a directory of numbered frames.
pub fn ingest_clip(dir: &Path, id: &str, class_label: usize) -> Result<Clip, VideoError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| VideoError::Io {
            path: dir.display().to_string(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|s| s.to_str()),
                Some("png" | "ppm" | "pnm")
            )
        })
        .collect();
    paths.sort();

    if paths.len() < 2 {
        return Err(VideoError::MissingFrames {
            id: id.to_string(),
            found: paths.len(),
        });
    }

    let mut frames = Vec::with_capacity(paths.len());
    for p in &paths {
        let frame = Frame::load(p)?;
        if let Some(first) = frames.first() {
            let first: &Frame = first;
            if frame.width != first.width || frame.height != first.height {
                return Err(VideoError::DimensionMismatch {
                    id: id.to_string(),
                    frame: p.display().to_string(),
                    found_w: frame.width,
                    found_h: frame.height,
                    want_w: first.width,
                    want_h: first.height,
                });
            }
        }
        frames.push(frame);
    }

    Ok(Clip {
        id: id.to_string(),
        class_label,
        frames,
        source_path: dir.to_path_buf(),
    })
}

/// The uniform sampling rule: index i maps to `round(i * (T-1) / (n-1))`.
pub fn uniform_indices(total: usize, n: usize) -> Vec<usize> {
    assert!(total >= 1 && n >= 1);
    if n == 1 {
        return vec![0];
    }
    (0..n)
        .map(|i| {
            let f = i as f64 * (total as f64 - 1.0) / (n as f64 - 1.0);
            f.round() as usize
        })
        .collect()
}

/// Uniformly samples `n` frames and resizes each to `size x size`.
///
/// Clips shorter than `n` are sampled with repetition; only clips with fewer
/// than 2 frames are rejected.
pub fn sample_uniform(clip: &Clip, n: usize, size: usize) -> Result<SampledClip, VideoError> {
    if clip.frames.len() < 2 {
        return Err(VideoError::TooFewFrames {
            found: clip.frames.len(),
        });
    }
    let indices = uniform_indices(clip.frames.len(), n);
    let frames = indices
        .iter()
        .map(|&i| clip.frames[i].resize_bilinear(size, size))
        .collect();
    Ok(SampledClip {
        frames,
        middle_index: n / 2,
        sample_indices: indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_clip(t: usize, w: usize, h: usize) -> Clip {
        let frames = (0..t)
            .map(|i| {
                let mut f = Frame::new(w, h);
                f.data.fill((i % 256) as u8);
                f
            })
            .collect();
        Clip {
            id: "test".into(),
            class_label: 0,
            frames,
            source_path: PathBuf::new(),
        }
    }

    #[test]
    fn identity_sampling_when_t_equals_n() {
        let clip = synthetic_clip(16, 8, 8);
        let s = sample_uniform(&clip, 16, 8).unwrap();
        assert_eq!(s.sample_indices, (0..16).collect::<Vec<_>>());
        assert_eq!(s.middle_index, 8);
    }

    #[test]
    fn rounding_formula_t31() {
        // independently evaluate round(i*30/15) = 2i
        let expected: Vec<usize> = (0..16).map(|i| 2 * i).collect();
        assert_eq!(uniform_indices(31, 16), expected);
    }

    #[test]
    fn degenerate_two_frame_clip_repeats() {
        let expected: Vec<usize> = (0..16)
            .map(|i| (i as f64 / 15.0).round() as usize)
            .collect();
        let got = uniform_indices(2, 16);
        assert_eq!(got, expected);
        assert_eq!(got[0], 0);
        assert_eq!(got[15], 1);
    }

    #[test]
    fn endpoints_always_sampled() {
        for t in 2..64 {
            let idx = uniform_indices(t, 16);
            assert_eq!(idx[0], 0);
            assert_eq!(*idx.last().unwrap(), t - 1);
            assert!(idx.windows(2).all(|w| w[0] <= w[1]), "non-decreasing");
        }
    }

    #[test]
    fn one_frame_clip_rejected() {
        let clip = synthetic_clip(1, 8, 8);
        assert!(matches!(
            sample_uniform(&clip, 16, 8),
            Err(VideoError::TooFewFrames { found: 1 })
        ));
    }

    #[test]
    fn sampled_frames_are_resized() {
        let clip = synthetic_clip(5, 20, 10);
        let s = sample_uniform(&clip, 16, 7).unwrap();
        assert_eq!(s.frames.len(), 16);
        assert!(s.frames.iter().all(|f| f.width == 7 && f.height == 7));
    }

    #[test]
    fn ingest_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        // write three 6x4 frames
        for i in 0..3 {
            let mut f = Frame::new(6, 4);
            f.data.fill(i * 40);
            f.save_png(&dir.path().join(format!("frame_{i:05}.png"))).unwrap();
        }
        let clip = ingest_clip(dir.path(), "c", 3).unwrap();
        assert_eq!(clip.frames.len(), 3);
        assert_eq!(clip.class_label, 3);
        assert_eq!(clip.frames[1].data[0], 40);

        // single frame -> MissingFrames
        let dir2 = tempfile::tempdir().unwrap();
        Frame::new(6, 4).save_png(&dir2.path().join("frame_00000.png")).unwrap();
        assert!(matches!(
            ingest_clip(dir2.path(), "d", 0),
            Err(VideoError::MissingFrames { found: 1, .. })
        ));

        // mixed dimensions -> DimensionMismatch
        let dir3 = tempfile::tempdir().unwrap();
        Frame::new(6, 4).save_png(&dir3.path().join("frame_00000.png")).unwrap();
        Frame::new(8, 4).save_png(&dir3.path().join("frame_00001.png")).unwrap();
        assert!(matches!(
            ingest_clip(dir3.path(), "e", 0),
            Err(VideoError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn manifest_rejects_duplicates_and_bad_indices() {
        let m = Manifest {
            classes: vec!["a".into()],
            clips: vec![
                ManifestEntry {
                    id: "x".into(),
                    class_name: "a".into(),
                    class_index: 0,
                    split: None,
                },
                ManifestEntry {
                    id: "x".into(),
                    class_name: "a".into(),
                    class_index: 0,
                    split: None,
                },
            ],
        };
        assert!(m.validate().is_err());

        let m2 = Manifest {
            classes: vec!["a".into()],
            clips: vec![ManifestEntry {
                id: "y".into(),
                class_name: "a".into(),
                class_index: 1,
                split: None,
            }],
        };
        assert!(m2.validate().is_err());
    }
}
