use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageReader, RgbImage};

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const DIRS: [&str; 3] = ["rgb", "depth", "gt"];
const EXTENSIONS: [&str; 3] = ["png", "pgm", "ppm"];

/// Paths of one paired sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleFiles {
    pub name: String,
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub gt: PathBuf,
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(image_err(path))
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads an image as `[3,H,W]` in `[0,1]`.
pub fn load_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    }))
}

/// Reads a single-channel image as `[H,W]` in `[0,1]`. Colour images are
/// averaged over their channels with a warning.
pub fn load_gray(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        log::warn!("{} has colour channels; averaging them to one channel", path.display());
        let rgb = img.to_rgb8();
        let raw = rgb.as_raw();
        return Ok(Tensor::from_fn([h, w], |p| {
            raw[p * 3..p * 3 + 3].iter().map(|&b| b as f32).sum::<f32>() / (3.0 * 255.0)
        }));
    }
    let raw = img.to_luma8().into_raw();
    Ok(Tensor::from_fn([h, w], |p| raw[p] as f32 / 255.0))
}

fn save(img: DynamicImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path).map_err(image_err(path))
}

/// Writes a `[3,H,W]` tensor as an 8-bit RGB image.
pub fn save_rgb(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let [_, h, w] = t.shape() else {
        return Err(crate::error::shape_err("save_rgb", format!("{:?} is not [3,H,W]", t.shape())));
    };
    let (h, w) = (*h, *w);
    let d = t.data();
    let raw = (0..h * w * 3).map(|i| to_byte(d[(i % 3) * h * w + i / 3])).collect();
    let img = RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer matches dims");
    save(DynamicImage::ImageRgb8(img), path)
}

/// Writes an `[H,W]` or `[1,H,W]` tensor as an 8-bit grayscale image.
pub fn save_gray(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let (h, w) = match t.shape() {
        [h, w] | [1, h, w] => (*h, *w),
        s => return Err(crate::error::shape_err("save_gray", format!("{s:?} is not [H,W]"))),
    };
    let raw = t.data().iter().map(|&v| to_byte(v)).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer matches dims");
    save(DynamicImage::ImageLuma8(img), path)
}

/// Writes `root/{rgb,depth,gt}/<name>.png`.
pub fn write_sample(root: &Path, sample: &Sample) -> Result<()> {
    let file = format!("{}.png", sample.name);
    save_rgb(&sample.rgb, &root.join("rgb").join(&file))?;
    save_gray(&sample.depth, &root.join("depth").join(&file))?;
    save_gray(&sample.gt, &root.join("gt").join(&file))
}

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Listing(format!("cannot read {}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !path.is_file() || !ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Listing(format!("non UTF-8 file name {}", path.display())))?
            .to_string();
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(Error::Listing(format!(
                "`{stem}` appears twice in {}: {} and {}",
                dir.display(),
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

/// Pairs the files of `root/{rgb,depth,gt}` by stem, sorted by name.
pub fn list_dataset(root: &Path) -> Result<Vec<SampleFiles>> {
    let maps: Vec<_> = DIRS.iter().map(|d| stems(&root.join(d))).collect::<Result<_>>()?;
    let all: BTreeSet<&String> = maps.iter().flat_map(|m| m.keys()).collect();
    let mut out = Vec::with_capacity(all.len());
    for stem in all {
        let mut paths = Vec::with_capacity(3);
        for (dir, map) in DIRS.iter().zip(&maps) {
            match map.get(stem) {
                Some(p) => paths.push(p.clone()),
                None => {
                    return Err(Error::Listing(format!("`{stem}` has no counterpart in {dir}/")));
                }
            }
        }
        let [rgb, depth, gt]: [PathBuf; 3] = paths.try_into().expect("three directories");
        out.push(SampleFiles {
            name: stem.clone(),
            rgb,
            depth,
            gt,
        });
    }
    Ok(out)
}

/// Loads one sample; the ground truth is binarized at one half.
pub fn load_sample(files: &SampleFiles) -> Result<Sample> {
    let rgb = load_rgb(&files.rgb)?;
    let depth = load_gray(&files.depth)?;
    let gt = load_gray(&files.gt)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
    if depth.shape() != [h, w] || gt.shape() != [h, w] {
        return Err(crate::error::shape_err(
            "load_sample",
            format!(
                "`{}`: rgb {h}x{w}, depth {:?}, gt {:?}",
                files.name,
                depth.shape(),
                gt.shape()
            ),
        ));
    }
    Ok(Sample {
        name: files.name.clone(),
        rgb,
        depth: depth.reshape([1, h, w])?,
        gt,
    })
}

pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    list_dataset(root)?.iter().map(load_sample).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sample, Quality};

    #[test]
    fn write_then_load_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_sample(1, (32, 40), Quality::Good).unwrap();
        write_sample(dir.path(), &s).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 1);
        let l = &loaded[0];
        assert_eq!(l.name, s.name);
        assert!(l.rgb.max_abs_diff(&s.rgb) <= 0.5 / 255.0 + 1e-6);
        assert!(l.depth.max_abs_diff(&s.depth) <= 0.5 / 255.0 + 1e-6);
        assert_eq!(l.gt, s.gt);
    }

    #[test]
    fn orphan_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_sample(2, (32, 32), Quality::Good).unwrap();
        write_sample(dir.path(), &s).unwrap();
        save_rgb(&s.rgb, &dir.path().join("rgb/lonely.png")).unwrap();
        let err = list_dataset(dir.path()).unwrap_err();
        assert!(matches!(&err, Error::Listing(m) if m.contains("lonely") && m.contains("depth")), "{err}");
    }

    #[test]
    fn colour_depth_is_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let t = Tensor::from_fn([3, 2, 2], |i| [0.0, 0.6, 0.3][i / 4]);
        save_rgb(&t, &path).unwrap();
        let g = load_gray(&path).unwrap();
        let expect = (0.0 + 153.0 + 77.0) / (3.0 * 255.0);
        assert!(g.data().iter().all(|&v| (v - expect).abs() < 1e-6));
    }

    #[test]
    fn pgm_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_fn([4, 4], |i| i as f32 / 15.0);
        let path = dir.path().join("m.pgm");
        save_gray(&t, &path).unwrap();
        assert!(load_gray(&path).unwrap().max_abs_diff(&t) <= 0.5 / 255.0 + 1e-6);
    }
}
