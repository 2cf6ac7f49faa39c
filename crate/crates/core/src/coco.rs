//! COCO-style instance annotation documents: parsing, rasterization into
//! [`AnnotatedImage`]s, and writing corpora back out.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BBox, Mask};
use crate::synth::{AnnotatedImage, Instance, Source};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RleCounts {
    Counts(Vec<u32>),
    Compressed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`
    pub size: [usize; 2],
    pub counts: RleCounts,
}

impl Rle {
    pub fn from_mask(mask: &Mask, compressed: bool) -> Self {
        Self {
            size: [mask.height(), mask.width()],
            counts: if compressed {
                RleCounts::Compressed(mask.to_rle_string())
            } else {
                RleCounts::Counts(mask.to_rle_counts())
            },
        }
    }

    pub fn to_mask(&self) -> Result<Mask> {
        let [h, w] = self.size;
        match &self.counts {
            RleCounts::Counts(c) => Mask::from_rle_counts(h, w, c),
            RleCounts::Compressed(s) => Mask::from_rle_string(h, w, s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle(Rle),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub segmentation: Segmentation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<f64>,
    #[serde(default)]
    pub iscrowd: u8,
}

/// A COCO instance-annotation document. Unknown top-level keys (`info`,
/// `licenses`, ...) are ignored on input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoDocument {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

impl CocoDocument {
    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse {
            what: "COCO document".into(),
            msg: e.to_string(),
        })
    }
}

/// Dense class index ↔ original COCO category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryInfo {
    pub index: usize,
    pub coco_id: u64,
    pub name: String,
}

/// Non-fatal failure for one image of a document.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemError {
    pub image_id: u64,
    pub path: PathBuf,
    pub msg: String,
}

#[derive(Debug, Clone)]
pub struct CocoDataset {
    pub images: Vec<AnnotatedImage>,
    pub categories: Vec<CategoryInfo>,
    pub errors: Vec<ItemError>,
}

impl CocoDataset {
    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn category_names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }
}

/// Remap (possibly sparse) category ids to `0..C` in ascending id order.
pub fn dense_categories(cats: &[CocoCategory]) -> Vec<CategoryInfo> {
    let mut sorted: Vec<&CocoCategory> = cats.iter().collect();
    sorted.sort_by_key(|c| c.id);
    sorted
        .into_iter()
        .enumerate()
        .map(|(index, c)| CategoryInfo {
            index,
            coco_id: c.id,
            name: c.name.clone(),
        })
        .collect()
}

fn rasterize(seg: &Segmentation, height: usize, width: usize) -> Result<(Mask, Option<Vec<(f64, f64)>>)> {
    match seg {
        Segmentation::Polygons(polys) => {
            let mask = Mask::from_coco_polygons(height, width, polys);
            let outline = (polys.len() == 1)
                .then(|| polys[0].chunks_exact(2).map(|c| (c[0], c[1])).collect());
            Ok((mask, outline))
        }
        Segmentation::Rle(rle) => {
            if rle.size != [height, width] {
                return Err(Error::Parse {
                    what: "RLE segmentation".into(),
                    msg: format!("size {:?} does not match image {height}x{width}", rle.size),
                });
            }
            Ok((rle.to_mask()?, None))
        }
    }
}

/// Build annotated images from a parsed document, with pixels provided by
/// `load_pixels` (returning `Err(msg)` marks the image as failed).
pub fn images_from_document(
    doc: &CocoDocument,
    mut load_pixels: impl FnMut(&CocoImage) -> std::result::Result<Array3<f64>, String>,
    root: &Path,
) -> Result<CocoDataset> {
    let categories = dense_categories(&doc.categories);
    let index_of: HashMap<u64, usize> = categories.iter().map(|c| (c.coco_id, c.index)).collect();
    let mut by_image: BTreeMap<u64, Vec<&CocoAnnotation>> = BTreeMap::new();
    for ann in &doc.annotations {
        by_image.entry(ann.image_id).or_default().push(ann);
    }

    let mut images = Vec::with_capacity(doc.images.len());
    let mut errors = Vec::new();
    for info in &doc.images {
        let pixels = match load_pixels(info) {
            Ok(p) => p,
            Err(msg) => {
                errors.push(ItemError {
                    image_id: info.id,
                    path: root.join(&info.file_name),
                    msg,
                });
                continue;
            }
        };
        let (h, w, _) = pixels.dim();
        let mut instances = Vec::new();
        for ann in by_image.get(&info.id).map(Vec::as_slice).unwrap_or_default() {
            if ann.iscrowd != 0 {
                log::debug!("skipping crowd annotation {}", ann.id);
                continue;
            }
            let Some(&class_id) = index_of.get(&ann.category_id) else {
                return Err(Error::Parse {
                    what: "COCO document".into(),
                    msg: format!("annotation {} has unknown category {}", ann.id, ann.category_id),
                });
            };
            let (mask, polygon) = rasterize(&ann.segmentation, h, w)?;
            let bbox = match (ann.bbox, mask.bbox()) {
                (Some(b), _) => BBox::from_xywh(b),
                (None, Some(b)) => b,
                (None, None) => {
                    log::warn!("annotation {} rasterizes to an empty mask; skipped", ann.id);
                    continue;
                }
            };
            if mask.is_empty() {
                log::warn!("annotation {} rasterizes to an empty mask; skipped", ann.id);
                continue;
            }
            instances.push(Instance {
                mask,
                class_id,
                bbox,
                polygon,
            });
        }
        images.push(AnnotatedImage {
            id: info.id,
            file_name: info.file_name.clone(),
            image: pixels,
            instances,
            source: Source::Coco,
        });
    }
    Ok(CocoDataset {
        images,
        categories,
        errors,
    })
}

/// Load a COCO instance annotation file and its images.
///
/// Missing or unreadable image files are collected in
/// [`CocoDataset::errors`]; a malformed document is an error.
pub fn load_coco(path: &Path, image_root: &Path) -> Result<CocoDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let doc = CocoDocument::from_json_str(&text)?;
    images_from_document(
        &doc,
        |info| read_rgb(&image_root.join(&info.file_name)).map_err(|e| e.to_string()),
        image_root,
    )
}

/// Read an image file as `(height, width, 3)` values in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Load {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((h as usize, w as usize, 3));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = f64::from(p[c]) / 255.0;
        }
    }
    Ok(out)
}

/// Quantize a `[0, 1]` image to 8-bit RGB.
pub fn to_rgb8(image: &Array3<f64>) -> image::RgbImage {
    let (h, w, _) = image.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (image[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn write_png(image: &Array3<f64>, path: &Path) -> Result<()> {
    to_rgb8(image).save(path)?;
    Ok(())
}

/// Serialize images and instances as a COCO document. Instances with a known
/// outline are written as polygons, others as uncompressed RLE.
pub fn to_document(images: &[AnnotatedImage], category_names: &[String]) -> CocoDocument {
    let categories = category_names
        .iter()
        .enumerate()
        .map(|(i, name)| CocoCategory {
            id: i as u64 + 1,
            name: name.clone(),
        })
        .collect();
    let mut annotations = Vec::new();
    let mut next_id = 1;
    let mut doc_images = Vec::with_capacity(images.len());
    for img in images {
        doc_images.push(CocoImage {
            id: img.id,
            file_name: img.file_name.clone(),
            width: img.width(),
            height: img.height(),
        });
        for inst in &img.instances {
            let segmentation = match &inst.polygon {
                Some(poly) => Segmentation::Polygons(vec![poly.iter().flat_map(|&(x, y)| [x, y]).collect()]),
                None => Segmentation::Rle(Rle::from_mask(&inst.mask, false)),
            };
            annotations.push(CocoAnnotation {
                id: next_id,
                image_id: img.id,
                category_id: inst.class_id as u64 + 1,
                segmentation,
                bbox: Some(inst.bbox.to_xywh()),
                area: Some(inst.mask.area() as f64),
                iscrowd: 0,
            });
            next_id += 1;
        }
    }
    CocoDocument {
        images: doc_images,
        annotations,
        categories,
    }
}

/// Write `images` as PNG files under `dir/images/` and a document at
/// `dir/annotations.json`.
pub fn write_corpus(dir: &Path, images: &[AnnotatedImage], category_names: &[String]) -> Result<()> {
    let image_dir = dir.join("images");
    fs::create_dir_all(&image_dir)?;
    for img in images {
        write_png(&img.image, &image_dir.join(&img.file_name))?;
    }
    let doc = to_document(images, category_names);
    fs::write(dir.join("annotations.json"), serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

/// Load a corpus written by [`write_corpus`].
pub fn load_corpus(dir: &Path) -> Result<CocoDataset> {
    load_coco(&dir.join("annotations.json"), &dir.join("images"))
}
