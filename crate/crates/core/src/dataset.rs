//! Dataset directory layout:
//!
//! ```text
//! manifest.json
//! frames/00000.ppm   RGB image
//! frames/00000.pfm   ray-distance depth (0 where nothing was hit)
//! ```
//!
//! The manifest holds shared intrinsics and one entry per frame with a
//! row-major 4×4 camera-to-world matrix and paths relative to the dataset root.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, DepthMap, PoseSE3};
use crate::io;
use crate::scene::RenderedView;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub idx: usize,
    pub c2w: [f64; 16],
    pub image: String,
    pub depth: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub frames: Vec<FrameEntry>,
}

impl Manifest {
    pub fn camera(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
    }
}

/// All frames of one scene, in index order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub cam: CameraIntrinsics,
    pub views: Vec<RenderedView>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

pub const MANIFEST: &str = "manifest.json";

pub fn frame_stem(idx: usize) -> String {
    format!("{idx:05}")
}

pub fn write_dataset(views: &[RenderedView], root: &Path) -> Result<Manifest> {
    let first = views
        .first()
        .ok_or_else(|| Error::InvalidParam("cannot write an empty dataset".into()))?;
    let cam = first.cam;
    let frames_dir = root.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;

    let mut entries = Vec::with_capacity(views.len());
    for (i, v) in views.iter().enumerate() {
        if v.cam != cam {
            return Err(Error::Frame {
                frame: v.index,
                reason: "intrinsics differ from frame 0".into(),
            });
        }
        if v.index != i {
            return Err(Error::Frame {
                frame: v.index,
                reason: format!("expected contiguous frame index {i}"),
            });
        }
        let stem = frame_stem(v.index);
        let image = format!("frames/{stem}.ppm");
        let depth = format!("frames/{stem}.pfm");
        io::write_ppm(&root.join(&image), &v.image)?;
        io::write_pfm(&root.join(&depth), v.depth.width, v.depth.height, &v.depth.values)?;
        entries.push(FrameEntry {
            idx: v.index,
            c2w: v.pose.to_row_major(),
            image,
            depth,
        });
    }
    let manifest = Manifest {
        width: cam.width,
        height: cam.height,
        fx: cam.fx,
        fy: cam.fy,
        cx: cam.cx,
        cy: cam.cy,
        frames: entries,
    };
    let path = root.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let cam = manifest.camera()?;
    if manifest.frames.is_empty() {
        return Err(Error::format(root.join(MANIFEST), "manifest lists no frames"));
    }
    let mut entries: Vec<&FrameEntry> = manifest.frames.iter().collect();
    entries.sort_by_key(|e| e.idx);
    for (expected, e) in entries.iter().enumerate() {
        if e.idx != expected {
            // first index that is absent from the manifest
            return Err(Error::Frame {
                frame: expected,
                reason: "missing from manifest".into(),
            });
        }
    }
    let views = entries
        .iter()
        .map(|e| read_frame(root, e, &cam))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { cam, views })
}

fn read_frame(root: &Path, e: &FrameEntry, cam: &CameraIntrinsics) -> Result<RenderedView> {
    let frame_err = |reason: String| Error::Frame {
        frame: e.idx,
        reason,
    };
    let image_path: PathBuf = root.join(&e.image);
    let depth_path: PathBuf = root.join(&e.depth);
    let image = io::read_ppm(&image_path).map_err(|err| frame_err(err.to_string()))?;
    let (dw, dh, values) = io::read_pfm(&depth_path).map_err(|err| frame_err(err.to_string()))?;
    if (image.width() as usize, image.height() as usize) != (cam.width, cam.height) {
        return Err(frame_err(format!(
            "dimension mismatch: image is {}x{}, manifest says {}x{}",
            image.width(),
            image.height(),
            cam.width,
            cam.height
        )));
    }
    if (dw, dh) != (cam.width, cam.height) {
        return Err(frame_err(format!(
            "dimension mismatch: depth is {dw}x{dh}, manifest says {}x{}",
            cam.width, cam.height
        )));
    }
    let pose = PoseSE3::from_row_major(&e.c2w);
    pose.validate().map_err(|err| frame_err(err.to_string()))?;
    Ok(RenderedView {
        image,
        depth: DepthMap::new(dw, dh, values)?,
        cam: *cam,
        pose,
        index: e.idx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_trajectory, render_sequence, SceneSpec, TrajectorySpec};

    fn small_views(n: usize) -> Vec<RenderedView> {
        let cam = CameraIntrinsics::from_hfov(44.0, 48, 36).unwrap();
        let traj = TrajectorySpec {
            frames: n,
            ..TrajectorySpec::default()
        };
        let poses = generate_trajectory(&traj).unwrap();
        render_sequence(&SceneSpec::room(), &cam, &poses).unwrap()
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let views = small_views(10);
        write_dataset(&views, dir.path()).unwrap();
        assert!(dir.path().join("frames/00009.ppm").exists());
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 10);
        for (a, b) in views.iter().zip(&back.views) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.index, b.index);
            assert_eq!(a.cam, b.cam);
            assert_eq!(a.pose, b.pose);
            for (x, y) in a.depth.values.iter().zip(&b.depth.values) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn wrong_depth_dimensions_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let views = small_views(3);
        write_dataset(&views, dir.path()).unwrap();
        io::write_pfm(&dir.path().join("frames/00001.pfm"), 4, 4, &[1.0; 16]).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        match err {
            Error::Frame { frame, reason } => {
                assert_eq!(frame, 1);
                assert!(reason.contains("dimension mismatch"), "{reason}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn frame_removed_from_manifest_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let views = small_views(4);
        let mut manifest = write_dataset(&views, dir.path()).unwrap();
        manifest.frames.remove(2);
        fs::write(dir.path().join(MANIFEST), serde_json::to_string(&manifest).unwrap()).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Frame { frame: 2, .. }), "{err}");
        assert!(err.to_string().contains("frame 2"));
    }

    #[test]
    fn missing_file_names_the_frame() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&small_views(3), dir.path()).unwrap();
        fs::remove_file(dir.path().join("frames/00002.ppm")).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Frame { frame: 2, .. }), "{err}");
    }

    #[test]
    fn empty_dataset_cannot_be_written() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_dataset(&[], dir.path()).is_err());
    }
}
