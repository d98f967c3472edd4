//! Corpus loading, duplicate detection and train/val/test splitting.
//!
//! A corpus lives under a root directory as `images/<id>.{png,jpg}` with a
//! matching `labels/<id>.png` annotation per image.

pub mod phash;
mod split;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::raster::RgbF32;

pub use phash::{compute_phash, hamming_distance};
pub use split::{make_splits, split_sizes, Split, SplitManifest, DEFAULT_RATIOS};

pub const DEFAULT_MAX_DISTANCE: u32 = 11;
pub const DEFAULT_MASK_THRESHOLD: u8 = 127;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageSample {
    pub id: String,
    pub image_path: PathBuf,
    pub label_path: Option<PathBuf>,
    pub width: u32,
    pub height: u32,
    pub digest: [u8; 32],
    pub phash: Option<u64>,
}

impl ImageSample {
    /// Hashes and decodes encoded image bytes. `path` is used for the id and
    /// for error messages.
    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::CorruptInput { path: path.into(), reason: "file name is not valid UTF-8".into() })?
            .to_string();
        let img = decode_rgb(path, bytes)?;
        Ok(Self {
            id,
            image_path: path.to_path_buf(),
            label_path: None,
            width: img.width(),
            height: img.height(),
            digest: Sha256::digest(bytes).into(),
            phash: Some(compute_phash(&img)),
        })
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest)
    }
}

/// An image with its binarized annotation.
#[derive(Clone, Debug)]
pub struct AnnotatedPair {
    pub sample: ImageSample,
    pub image: RgbF32,
    pub mask: Mask,
}

pub(crate) fn decode_rgb(path: &Path, bytes: &[u8]) -> Result<image::RgbImage> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| Error::CorruptInput { path: path.into(), reason: e.to_string() })?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::CorruptInput { path: path.into(), reason: "image has zero size".into() });
    }
    Ok(img.to_rgb8())
}

pub fn read_rgb(path: &Path) -> Result<image::RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_rgb(path, &bytes)
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Reads, digests and hashes every image under `<root>/images`, sorted by id.
pub fn load_corpus(root: &Path) -> Result<Vec<ImageSample>> {
    let dir = root.join("images");
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.is_file() && is_image(&path) {
            paths.push(path);
        }
    }
    paths.sort();
    let mut samples: Vec<ImageSample> = Vec::with_capacity(paths.len());
    for path in paths {
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut s = ImageSample::from_bytes(&path, &bytes)?;
        let label = root.join("labels").join(format!("{}.png", s.id));
        s.label_path = label.is_file().then_some(label);
        samples.push(s);
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = samples.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::Consistency(format!("two images share the id {:?}", w[0].id)));
    }
    Ok(samples)
}

/// Loads the image and its binarized label; dimensions must agree.
pub fn load_pair(sample: &ImageSample) -> Result<AnnotatedPair> {
    let label_path = sample
        .label_path
        .as_ref()
        .ok_or_else(|| Error::CorruptInput { path: sample.image_path.clone(), reason: "no matching label".into() })?;
    let img = read_rgb(&sample.image_path)?;
    let bytes = std::fs::read(label_path).map_err(|e| Error::io(label_path, e))?;
    let raw = image::load_from_memory(&bytes)
        .map_err(|e| Error::CorruptInput { path: label_path.clone(), reason: e.to_string() })?
        .to_luma8();
    if raw.dimensions() != img.dimensions() {
        return Err(Error::CorruptInput {
            path: label_path.clone(),
            reason: format!("label is {:?}, image is {:?}", raw.dimensions(), img.dimensions()),
        });
    }
    Ok(AnnotatedPair {
        sample: sample.clone(),
        image: RgbF32::from_rgb8(&img),
        mask: binarize_mask(&raw, DEFAULT_MASK_THRESHOLD),
    })
}

/// Pixels strictly above `threshold` become foreground.
pub fn binarize_mask(raw: &image::GrayImage, threshold: u8) -> Mask {
    Mask::from_fn(raw.width() as usize, raw.height() as usize, |x, y| {
        raw.get_pixel(x as u32, y as u32)[0] > threshold
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DuplicateReason {
    ExactBytes,
    PhashWithinThreshold,
}

impl fmt::Display for DuplicateReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DuplicateReason::ExactBytes => "exact_bytes",
            DuplicateReason::PhashWithinThreshold => "phash_within_threshold",
        })
    }
}

/// Members sorted by id. The reason is `ExactBytes` only when every member
/// has the same content digest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateGroup {
    pub members: Vec<String>,
    pub reason: DuplicateReason,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

fn require_phash(s: &ImageSample) -> Result<u64> {
    s.phash.ok_or_else(|| Error::Contract(format!("sample {:?} has no perceptual hash", s.id)))
}

/// Links exact digest matches and pairs within `max_distance`, closes the
/// links transitively and returns the resulting groups ordered by their
/// smallest member.
pub fn find_duplicates(corpus: &[ImageSample], max_distance: u32) -> Result<Vec<DuplicateGroup>> {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by(|&a, &b| corpus[a].id.cmp(&corpus[b].id));
    let samples: Vec<&ImageSample> = order.iter().map(|&i| &corpus[i]).collect();
    let hashes = samples.iter().map(|s| require_phash(s)).collect::<Result<Vec<_>>>()?;

    let mut uf = UnionFind((0..samples.len()).collect());
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            if samples[i].digest == samples[j].digest || hamming_distance(hashes[i], hashes[j]) <= max_distance {
                uf.union(i, j);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..samples.len() {
        let root = uf.find(i);
        groups.entry(root).or_default().push(i);
    }
    Ok(groups
        .into_values()
        .filter(|g| g.len() > 1)
        .map(|g| {
            let exact = g.iter().all(|&i| samples[i].digest == samples[g[0]].digest);
            DuplicateGroup {
                members: g.iter().map(|&i| samples[i].id.clone()).collect(),
                reason: if exact { DuplicateReason::ExactBytes } else { DuplicateReason::PhashWithinThreshold },
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Removal {
    pub removed: String,
    pub kept: String,
    pub reason: DuplicateReason,
    /// Hash distance between the removed and the kept image.
    pub distance: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupReport {
    pub removals: Vec<Removal>,
}

impl DedupReport {
    pub fn removed_count(&self) -> usize {
        self.removals.len()
    }
}

impl fmt::Display for DedupReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.removals {
            writeln!(f, "{} <- {} {} {}", r.removed, r.kept, r.reason, r.distance)?;
        }
        Ok(())
    }
}

/// Keeps the lexicographically smallest id of each group.
pub fn deduplicate(corpus: &[ImageSample], groups: &[DuplicateGroup]) -> Result<(Vec<ImageSample>, DedupReport)> {
    let by_id: BTreeMap<&str, &ImageSample> = corpus.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut seen = BTreeSet::new();
    let mut removed = BTreeSet::new();
    let mut report = DedupReport::default();
    for g in groups {
        if g.members.len() < 2 {
            return Err(Error::Consistency(format!("duplicate group {:?} has fewer than two members", g.members)));
        }
        for m in &g.members {
            if !by_id.contains_key(m.as_str()) {
                return Err(Error::Consistency(format!("duplicate group references unknown id {m:?}")));
            }
            if !seen.insert(m.as_str()) {
                return Err(Error::Consistency(format!("id {m:?} appears in more than one group")));
            }
        }
        let kept = g.members.iter().min().expect("nonempty group");
        let kept_sample = by_id[kept.as_str()];
        let mut members: Vec<&String> = g.members.iter().filter(|m| *m != kept).collect();
        members.sort();
        for m in members {
            let s = by_id[m.as_str()];
            let reason =
                if s.digest == kept_sample.digest { DuplicateReason::ExactBytes } else { DuplicateReason::PhashWithinThreshold };
            let distance = match (s.phash, kept_sample.phash) {
                (Some(a), Some(b)) => hamming_distance(a, b),
                _ => 0,
            };
            report.removals.push(Removal { removed: m.clone(), kept: kept.clone(), reason, distance });
            removed.insert(m.as_str());
        }
    }
    let retained = corpus.iter().filter(|s| !removed.contains(s.id.as_str())).cloned().collect();
    Ok((retained, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, digest: u8, phash: u64) -> ImageSample {
        ImageSample {
            id: id.into(),
            image_path: PathBuf::from(format!("{id}.png")),
            label_path: None,
            width: 1,
            height: 1,
            digest: [digest; 32],
            phash: Some(phash),
        }
    }

    #[test]
    fn threshold_boundary_is_inclusive() {
        let eleven = (1u64 << 11) - 1;
        let corpus = [sample("a", 1, 0), sample("b", 2, eleven), sample("c", 3, u64::MAX)];
        let groups = find_duplicates(&corpus, 11).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].members, vec!["a", "b"]);
        assert_eq!(groups[0].reason, DuplicateReason::PhashWithinThreshold);

        let twelve = (1u64 << 12) - 1;
        let corpus = [sample("a", 1, 0), sample("b", 2, twelve)];
        assert!(find_duplicates(&corpus, 11).unwrap().is_empty());
    }

    #[test]
    fn exact_copies_are_grouped_by_bytes() {
        let corpus = [sample("x", 9, 0), sample("y", 9, 0), sample("z", 4, u64::MAX)];
        let groups = find_duplicates(&corpus, 11).unwrap();
        assert_eq!(groups, vec![DuplicateGroup { members: vec!["x".into(), "y".into()], reason: DuplicateReason::ExactBytes }]);
    }

    #[test]
    fn keeps_smallest_id_and_reports_removals() {
        let corpus = [sample("b", 1, 0b11), sample("a", 2, 0)];
        let groups = find_duplicates(&corpus, 11).unwrap();
        let (kept, report) = deduplicate(&corpus, &groups).unwrap();
        assert_eq!(kept.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), vec!["a"]);
        assert_eq!(report.to_string(), "b <- a phash_within_threshold 2\n");
    }

    #[test]
    fn no_groups_leaves_corpus_unchanged() {
        let corpus = vec![sample("a", 1, 0), sample("b", 2, u64::MAX)];
        let (kept, report) = deduplicate(&corpus, &[]).unwrap();
        assert_eq!(kept, corpus);
        assert_eq!(report.removed_count(), 0);
    }

    #[test]
    fn unknown_member_is_a_consistency_error() {
        let corpus = [sample("a", 1, 0)];
        let groups = [DuplicateGroup { members: vec!["a".into(), "ghost".into()], reason: DuplicateReason::ExactBytes }];
        assert!(matches!(deduplicate(&corpus, &groups), Err(Error::Consistency(_))));
    }

    #[test]
    fn binarization_is_strictly_greater() {
        let raw = image::GrayImage::from_raw(4, 1, vec![0, 127, 128, 255]).unwrap();
        assert_eq!(binarize_mask(&raw, 127).as_slice(), &[0, 0, 1, 1]);
        let gray = image::GrayImage::from_pixel(3, 3, image::Luma([127]));
        assert_eq!(binarize_mask(&gray, 127).count_ones(), 0);
    }
}
