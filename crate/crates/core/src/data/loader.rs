//! Dataset directories: one folder per sequence holding `imgs/`,
//! `groundtruth.txt` (`x,y,w,h` per line) and an optional `language.txt`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Frame, Sequence};
use crate::error::{Error, Result};
use crate::head::BBox;

const IMAGE_EXTS: [&str; 5] = ["png", "jpg", "jpeg", "ppm", "pgm"];

fn parse_box_line(line: &str) -> std::result::Result<BBox, String> {
    let fields: Vec<&str> = line
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|f| !f.is_empty())
        .collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 values (x,y,w,h), found {}", fields.len()));
    }
    let mut v = [0.0; 4];
    for (slot, f) in v.iter_mut().zip(&fields) {
        *slot = f.parse::<f64>().map_err(|_| format!("invalid number {f:?}"))?;
        if !slot.is_finite() {
            return Err(format!("non-finite value {f:?}"));
        }
    }
    if v[2] < 0.0 || v[3] < 0.0 {
        return Err(format!("negative box size {}x{}", v[2], v[3]));
    }
    Ok(BBox::from_xywh(v[0], v[1], v[2], v[3]))
}

/// Parses a ground-truth file; blank lines are skipped, line numbers in
/// errors are 1-based.
pub fn parse_groundtruth(path: &Path) -> Result<Vec<BBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        boxes.push(parse_box_line(line).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        })?);
    }
    Ok(boxes)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn read_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    Ok(Frame {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.into_raw(),
    })
}

pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let boxes = parse_groundtruth(&dir.join("groundtruth.txt"))?;
    let files = image_files(&dir.join("imgs"))?;
    if files.len() != boxes.len() {
        return Err(Error::Dataset(format!(
            "sequence `{name}`: {} frames but {} annotations",
            files.len(),
            boxes.len()
        )));
    }
    let frames = files.iter().map(|p| read_frame(p)).collect::<Result<Vec<_>>>()?;
    let lang = dir.join("language.txt");
    let description = if lang.exists() {
        fs::read_to_string(&lang).map_err(|e| Error::io(&lang, e))?.trim().to_string()
    } else {
        String::new()
    };
    Ok(Sequence {
        name,
        frames,
        boxes,
        description,
        attributes: BTreeMap::new(),
    })
}

/// Loads every sequence folder under `root`, sorted by name.
pub fn load_dataset(root: &Path) -> Result<Vec<Sequence>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("groundtruth.txt").is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_sequence(d)).collect()
}

/// Writes PNG frames, integer-rounded boxes and the description.
pub fn write_sequence(root: &Path, seq: &Sequence) -> Result<()> {
    let dir = root.join(&seq.name);
    let imgs = dir.join("imgs");
    fs::create_dir_all(&imgs).map_err(|e| Error::io(&imgs, e))?;
    for (i, f) in seq.frames.iter().enumerate() {
        let p = imgs.join(format!("{:06}.png", i + 1));
        image::save_buffer(&p, &f.data, f.width as u32, f.height as u32, image::ExtendedColorType::Rgb8)
            .map_err(|source| Error::Image { path: p.clone(), source })?;
    }
    let mut gt = String::new();
    for b in &seq.boxes {
        let (x1, y1, x2, y2) = (b.x_tl.round(), b.y_tl.round(), b.x_br.round(), b.y_br.round());
        gt.push_str(&format!("{},{},{},{}\n", x1, y1, x2 - x1, y2 - y1));
    }
    let p = dir.join("groundtruth.txt");
    fs::write(&p, gt).map_err(|e| Error::io(&p, e))?;
    let p = dir.join("language.txt");
    fs::write(&p, format!("{}\n", seq.description)).map_err(|e| Error::io(&p, e))?;
    Ok(())
}

pub fn write_dataset(root: &Path, seqs: &[Sequence]) -> Result<()> {
    seqs.iter().try_for_each(|s| write_sequence(root, s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_line_formats() {
        assert_eq!(parse_box_line("10,20,30,40").unwrap(), BBox::new(10.0, 20.0, 40.0, 60.0));
        assert_eq!(parse_box_line("1.5\t2 3  4").unwrap(), BBox::new(1.5, 2.0, 4.5, 6.0));
        assert!(parse_box_line("1,2,3").is_err());
        assert!(parse_box_line("1,2,x,4").is_err());
        assert!(parse_box_line("1,2,-3,4").is_err());
        assert!(parse_box_line("1,2,NaN,4").is_err());
    }
}
