//! Training samples: raw image/mask discovery, patch preparation, the
//! on-disk prepared format and stratified splitting.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{
    binarize_intensity, extract_patches, isodata_threshold, isodata_threshold_global, keeps_patch, load_grayscale,
    load_mask, normalize_patch, pad_for_tiling, save_grayscale_png, save_mask_png, BinaryMask, GrayscaleImage, Grid,
    IsodataMode,
};
use crate::prompts::{bounding_box_from_mask, component_boxes, BoundingBox, PromptMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub enum SourceTag {
    #[default]
    #[serde(rename = "CT", alias = "ct")]
    Ct,
    #[serde(rename = "SEM", alias = "sem")]
    Sem,
}

impl SourceTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SourceTag::Ct => "CT",
            SourceTag::Sem => "SEM",
        }
    }

    fn parse(s: &str) -> Option<SourceTag> {
        match s {
            "CT" | "ct" => Some(SourceTag::Ct),
            "SEM" | "sem" => Some(SourceTag::Sem),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub name: String,
    /// Intensities scaled to `[0, 1]`.
    pub image: Grid<f64>,
    pub mask: BinaryMask,
    pub bbox: BoundingBox,
    pub source: SourceTag,
}

impl SampleRecord {
    pub fn new(
        name: impl Into<String>,
        image: Grid<f64>,
        mask: BinaryMask,
        bbox: BoundingBox,
        source: SourceTag,
    ) -> Result<Self> {
        if image.shape() != mask.shape() {
            return Err(Error::validation(format!(
                "image {:?} and mask {:?} differ in shape",
                image.shape(),
                mask.shape()
            )));
        }
        bbox.validate(mask.height(), mask.width())?;
        Ok(SampleRecord {
            name: name.into(),
            image,
            mask,
            bbox,
            source,
        })
    }
}

/// Seeded, per-tag stratified split at `floor(ratio * n_tag)`.
pub fn split_indices(tags: &[SourceTag], ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if tags.len() < 2 {
        return Err(Error::validation("need at least 2 records to split"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::validation("split ratio must lie in (0, 1)"));
    }
    let mut strata: BTreeMap<SourceTag, Vec<usize>> = BTreeMap::new();
    for (i, t) in tags.iter().enumerate() {
        strata.entry(*t).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (_, mut idx) in strata {
        idx.shuffle(&mut rng);
        let cut = (ratio * idx.len() as f64).floor() as usize;
        train.extend_from_slice(&idx[..cut]);
        val.extend_from_slice(&idx[cut..]);
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::validation(format!(
            "ratio {ratio} leaves an empty split for {} records",
            tags.len()
        )));
    }
    Ok((train, val))
}

pub fn split_dataset(
    records: Vec<SampleRecord>,
    ratio: f64,
    seed: u64,
) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    let tags: Vec<SourceTag> = records.iter().map(|r| r.source).collect();
    let (ti, vi) = split_indices(&tags, ratio, seed)?;
    let mut slots: Vec<Option<SampleRecord>> = records.into_iter().map(Some).collect();
    let mut take = |idx: Vec<usize>| idx.into_iter().map(|i| slots[i].take().unwrap()).collect::<Vec<_>>();
    let train = take(ti);
    let val = take(vi);
    Ok((train, val))
}

/// One raw image/mask directory pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub images: PathBuf,
    #[serde(default)]
    pub masks: Option<PathBuf>,
    #[serde(default)]
    pub tag: SourceTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareOptions {
    pub patch_size: usize,
    pub min_foreground_fraction: f64,
    pub prompt_mode: PromptMode,
    /// Derive masks by IsoData thresholding instead of reading them.
    pub isodata: bool,
    pub isodata_mode: IsodataMode,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        PrepareOptions {
            patch_size: 256,
            min_foreground_fraction: 0.01,
            prompt_mode: PromptMode::UnionBox,
            isodata: false,
            isodata_mode: IsodataMode::PerImage,
        }
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "tif", "tiff"];

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if !path.is_file() || !IMAGE_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(ext)) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Filename-stem matched `(stem, image, mask)` triples, in stem order.
pub fn discover_pairs(images: &Path, masks: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    if !images.is_dir() {
        return Err(Error::Layout(format!("{} is not a directory", images.display())));
    }
    if !masks.is_dir() {
        return Err(Error::Layout(format!("{} is not a directory", masks.display())));
    }
    let im = list_images(images)?;
    let mk = list_images(masks)?;
    let pairs: Vec<_> = im
        .into_iter()
        .filter_map(|(stem, ip)| mk.get(&stem).map(|mp| (stem, ip, mp.clone())))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Layout(format!(
            "no filename-matched pairs between {} and {}",
            images.display(),
            masks.display()
        )));
    }
    Ok(pairs)
}

/// Pads, cuts into non-overlapping patches, keeps informative ones and
/// attaches box prompts.
pub fn patchify_pair(
    name: &str,
    image: &GrayscaleImage,
    mask: &BinaryMask,
    source: SourceTag,
    opts: &PrepareOptions,
) -> Result<(usize, Vec<SampleRecord>)> {
    if image.shape() != mask.shape() {
        return Err(Error::validation(format!(
            "{name}: image {:?} and mask {:?} differ in shape",
            image.shape(),
            mask.shape()
        )));
    }
    let p = opts.patch_size;
    let (img, _) = pad_for_tiling(image.grid(), p, p)?;
    let (msk, _) = pad_for_tiling(mask.grid(), p, p)?;
    let (ip, grid) = extract_patches(&img, p, p)?;
    let (mp, _) = extract_patches(&msk, p, p)?;
    let candidates = ip.len();
    let mut out = Vec::new();
    for ((ipatch, mpatch), &(r, c)) in ip.iter().zip(mp).zip(grid.origins()) {
        let m = BinaryMask::new(mpatch)?;
        if !keeps_patch(&m, opts.min_foreground_fraction) {
            continue;
        }
        let pname = format!("{name}_r{r:05}_c{c:05}");
        let image = normalize_patch(ipatch);
        match opts.prompt_mode {
            PromptMode::UnionBox => {
                let b = bounding_box_from_mask(&m, 0, 0)?;
                out.push(SampleRecord::new(pname, image, m, b, source)?);
            }
            PromptMode::PerComponent => {
                for (k, b) in component_boxes(&m, 0, 0)?.into_iter().enumerate() {
                    let within = BinaryMask::new(Grid::from_fn(p, p, |rr, cc| {
                        m.get(rr, cc) & u8::from(b.contains(rr, cc))
                    }))?;
                    out.push(SampleRecord::new(
                        format!("{pname}_k{k}"),
                        image.clone(),
                        within,
                        b,
                        source,
                    )?);
                }
            }
        }
    }
    Ok((candidates, out))
}

/// Per-run summary written next to prepared samples.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub patch_size: usize,
    pub min_foreground_fraction: f64,
    pub images_per_tag: BTreeMap<String, usize>,
    pub candidates_per_tag: BTreeMap<String, usize>,
    pub selected_per_tag: BTreeMap<String, usize>,
    /// IsoData levels used for generated masks, keyed by image stem.
    pub isodata_thresholds: BTreeMap<String, u8>,
}

pub const SAMPLES_FILE: &str = "samples.csv";
pub const SUMMARY_FILE: &str = "prepare_summary.json";

/// Reads every source, generates IsoData masks when asked, and writes
/// selected patches plus `samples.csv` under `out`.
pub fn prepare_dataset(sources: &[DataSource], opts: &PrepareOptions, out: &Path) -> Result<PrepareSummary> {
    if sources.is_empty() {
        return Err(Error::Layout("no dataset sources configured".into()));
    }
    let mut summary = PrepareSummary {
        patch_size: opts.patch_size,
        min_foreground_fraction: opts.min_foreground_fraction,
        ..Default::default()
    };
    let mut all = Vec::new();
    for src in sources {
        let tag = src.tag.as_str().to_string();
        let items = load_source(src, opts, &mut summary.isodata_thresholds)?;
        *summary.images_per_tag.entry(tag.clone()).or_default() += items.len();
        for (stem, image, mask) in items {
            let (cands, recs) = patchify_pair(&stem, &image, &mask, src.tag, opts)?;
            *summary.candidates_per_tag.entry(tag.clone()).or_default() += cands;
            *summary.selected_per_tag.entry(tag.clone()).or_default() += recs.len();
            all.extend(recs);
        }
    }
    if all.is_empty() {
        return Err(Error::EmptyDataset);
    }
    write_prepared(&all, out)?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serialises");
    let path = out.join(SUMMARY_FILE);
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

type Loaded = Vec<(String, GrayscaleImage, BinaryMask)>;

fn load_source(src: &DataSource, opts: &PrepareOptions, thresholds: &mut BTreeMap<String, u8>) -> Result<Loaded> {
    if !src.images.is_dir() {
        return Err(Error::Layout(format!("{} is not a directory", src.images.display())));
    }
    let masks_present = src
        .masks
        .as_ref()
        .map(|m| m.is_dir() && list_images(m).map(|l| !l.is_empty()).unwrap_or(false))
        .unwrap_or(false);
    if opts.isodata || !masks_present {
        if !opts.isodata {
            return Err(Error::Layout(format!(
                "no masks for {}; supply a masks directory or enable isodata",
                src.images.display()
            )));
        }
        let files = list_images(&src.images)?;
        if files.is_empty() {
            return Err(Error::Layout(format!("no images in {}", src.images.display())));
        }
        let images: Vec<(String, GrayscaleImage)> = files
            .into_iter()
            .map(|(stem, p)| Ok((stem, load_grayscale(&p)?)))
            .collect::<Result<_>>()?;
        let global = match opts.isodata_mode {
            IsodataMode::Global => {
                let imgs: Vec<GrayscaleImage> = images.iter().map(|(_, i)| i.clone()).collect();
                Some(isodata_threshold_global(&imgs)?)
            }
            IsodataMode::PerImage => None,
        };
        return images
            .into_iter()
            .map(|(stem, img)| {
                let t = match global {
                    Some(t) => t,
                    None => isodata_threshold(&img)?,
                };
                thresholds.insert(stem.clone(), t);
                let m = binarize_intensity(&img, t);
                Ok((stem, img, m))
            })
            .collect();
    }
    let masks = src.masks.as_ref().expect("checked above");
    discover_pairs(&src.images, masks)?
        .into_iter()
        .map(|(stem, ip, mp)| Ok((stem, load_grayscale(&ip)?, load_mask(&mp)?)))
        .collect()
}

/// Writes patch PNGs under `images/` and `masks/` plus the sample table.
pub fn write_prepared(records: &[SampleRecord], out: &Path) -> Result<()> {
    let (idir, mdir) = (out.join("images"), out.join("masks"));
    for d in [&idir, &mdir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let table = out.join(SAMPLES_FILE);
    let wrap = |e: csv::Error| Error::io(&table, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(&table).map_err(wrap)?;
    w.write_record(["name", "source", "x_min", "y_min", "x_max", "y_max"])
        .map_err(wrap)?;
    for r in records {
        let px = r.image.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8);
        save_grayscale_png(idir.join(format!("{}.png", r.name)), &GrayscaleImage::new(px)?)?;
        save_mask_png(mdir.join(format!("{}.png", r.name)), &r.mask)?;
        let b = r.bbox;
        w.write_record([
            r.name.clone(),
            r.source.as_str().to_string(),
            b.x_min.to_string(),
            b.y_min.to_string(),
            b.x_max.to_string(),
            b.y_max.to_string(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(&table, e))
}

/// Loads a directory written by [`write_prepared`].
pub fn load_prepared(dir: &Path) -> Result<Vec<SampleRecord>> {
    let table = dir.join(SAMPLES_FILE);
    if !table.is_file() {
        return Err(Error::Layout(format!(
            "{} has no {SAMPLES_FILE}; run `prepare` first",
            dir.display()
        )));
    }
    let mut rdr = csv::Reader::from_path(&table).map_err(|e| Error::io(&table, std::io::Error::other(e)))?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Format {
            path: table.clone(),
            message: e.to_string(),
        })?;
        let bad = |m: &str| Error::Format {
            path: table.clone(),
            message: m.to_string(),
        };
        let field = |i: usize| row.get(i).ok_or_else(|| bad("short row"));
        let num = |i: usize| -> Result<usize> { field(i)?.parse().map_err(|_| bad("bad box coordinate")) };
        let name = field(0)?.to_string();
        let source = SourceTag::parse(field(1)?).ok_or_else(|| bad("unknown source tag"))?;
        let bbox = BoundingBox::new(num(2)?, num(3)?, num(4)?, num(5)?);
        let image = normalize_patch(load_grayscale(dir.join("images").join(format!("{name}.png")))?.grid());
        let mask = load_mask(dir.join("masks").join(format!("{name}.png")))?;
        out.push(SampleRecord::new(name, image, mask, bbox, source)?);
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}
