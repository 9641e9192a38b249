use std::fs;
use std::path::{Path, PathBuf};

use super::{BoundingBox, Frame, Sequence};
use crate::error::{Error, Result};

const GT_FILE: &str = "groundtruth.txt";
const VIS_FILE: &str = "visibility.txt";
const FRAMES_DIR: &str = "frames";

fn frame_files(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let frames_dir = dir.join(FRAMES_DIR);
    if !frames_dir.is_dir() {
        return Err(Error::Dataset(format!("no frames directory in {}", dir.display())));
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(&frames_dir)? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            continue;
        }
        let Some(num) = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<u64>().ok())
        else {
            continue;
        };
        files.push((num, path));
    }
    files.sort_by_key(|(n, _)| *n);
    Ok(files)
}

fn parse_boxes(path: &Path) -> Result<Vec<BoundingBox>> {
    let text = fs::read_to_string(path)?;
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let vals: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| err(format!("{e} in {line:?}")))?;
        if vals.len() != 4 {
            return Err(err(format!("expected 4 values, found {}", vals.len())));
        }
        let b = BoundingBox::new(vals[0], vals[1], vals[2], vals[3]).map_err(|e| err(e.to_string()))?;
        boxes.push(b);
    }
    Ok(boxes)
}

fn parse_visibility(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let v: f64 = l.trim().parse().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("{e}"),
            })?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("visibility {v} outside [0, 1]"),
                });
            }
            Ok(v)
        })
        .collect()
}

/// Read `frames/NNNNNNNN.{png,jpg}`, `groundtruth.txt` and the optional
/// `visibility.txt` from `dir`.
pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let gt_path = dir.join(GT_FILE);
    if !gt_path.is_file() {
        return Err(Error::MissingGroundTruth(dir.to_path_buf()));
    }
    let boxes = parse_boxes(&gt_path)?;
    let files = frame_files(dir)?;
    if files.len() != boxes.len() {
        return Err(Error::CountMismatch {
            frames: files.len(),
            boxes: boxes.len(),
        });
    }
    let frames = files
        .iter()
        .enumerate()
        .map(|(i, (_, path))| {
            let img = image::open(path)?.to_rgb8();
            let (w, h) = img.dimensions();
            Frame::from_rgb8(w as usize, h as usize, img.into_raw(), i)
        })
        .collect::<Result<Vec<_>>>()?;
    let vis_path = dir.join(VIS_FILE);
    let visibility = if vis_path.is_file() {
        Some(parse_visibility(&vis_path)?)
    } else {
        None
    };
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Sequence::new(name, frames, boxes, visibility)
}

/// Write a sequence in the layout read by [`load_sequence`].
pub fn save_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    let frames_dir = dir.join(FRAMES_DIR);
    fs::create_dir_all(&frames_dir)?;
    for (i, f) in seq.frames.iter().enumerate() {
        let img = image::RgbImage::from_raw(f.width() as u32, f.height() as u32, f.rgb8().to_vec())
            .ok_or_else(|| Error::Shape("frame buffer size".into()))?;
        img.save(frames_dir.join(format!("{:08}.png", i + 1)))?;
    }
    let gt: String = seq
        .boxes
        .iter()
        .map(|b| format!("{},{},{},{}\n", b.x, b.y, b.w, b.h))
        .collect();
    fs::write(dir.join(GT_FILE), gt)?;
    if let Some(vis) = &seq.visibility {
        let text: String = vis.iter().map(|v| format!("{v}\n")).collect();
        fs::write(dir.join(VIS_FILE), text)?;
    }
    Ok(())
}

/// True when `dir` holds a single sequence rather than a collection.
pub fn is_sequence_dir(dir: &Path) -> bool {
    dir.join(GT_FILE).is_file()
}

/// Load every sequence directory under `dir`, ordered by name.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sequence>> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", dir.display())));
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| is_sequence_dir(p))
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::Dataset(format!("no sequence directories in {}", dir.display())));
    }
    subdirs.iter().map(|p| load_sequence(p)).collect()
}

/// Write each sequence to `dir/<name>/`.
pub fn save_dataset(seqs: &[Sequence], dir: &Path) -> Result<()> {
    for s in seqs {
        save_sequence(s, &dir.join(&s.name))?;
    }
    Ok(())
}
