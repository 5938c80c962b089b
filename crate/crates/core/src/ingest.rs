//! Dataset ingestion: directory scanning, label assignment, deterministic
//! stratified train/validation/test splits, and image decoding.
//!
//! Dataset layout is `<root>/<class0>/*.{png,jpg,raw}` and
//! `<root>/<class1>/*.{png,jpg,raw}`; class0 maps to label 0 (not ALL),
//! class1 to label 1 (ALL). `.raw` files use the AFIM format.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::formats::afim::{self, RawImage};
use crate::scalar::mix_seed;

/// Binary class label: 0 = not ALL, 1 = ALL.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LabelId(u8);

impl LabelId {
    pub fn new(value: u8) -> Result<Self> {
        if value > 1 {
            return Err(Error::Argument(format!("label {} outside {{0,1}}", value)));
        }
        Ok(LabelId(value))
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub const NOT_ALL: LabelId = LabelId(0);
    pub const ALL: LabelId = LabelId(1);
}

impl fmt::Display for LabelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One scanned dataset: every image path with its label, plus class names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub entries: Vec<(PathBuf, LabelId)>,
    pub class_names: [String; 2],
}

/// Split assignment for every entry of a [`DatasetIndex`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndex {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

const EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "raw"];

fn is_supported(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Scan `<root>/<class_dirs[i]>` and build a label-complete index.
///
/// Every file is decoded once to guarantee the index only references
/// readable images; entries are sorted by path for determinism.
pub fn scan_dataset(root: &Path, class_dirs: &[String; 2]) -> Result<DatasetIndex> {
    let mut entries = Vec::new();
    for (label, dir_name) in class_dirs.iter().enumerate() {
        let dir = root.join(dir_name);
        if !dir.is_dir() {
            return Err(Error::Config(format!(
                "class directory {} does not exist",
                dir.display()
            )));
        }
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_supported(p))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Data(format!(
                "class {:?} has zero samples under {}",
                dir_name,
                dir.display()
            )));
        }
        for p in paths {
            load_image(&p)?; // decode errors name the offending file
            entries.push((p, LabelId::new(label as u8)?));
        }
    }
    entries.sort();
    Ok(DatasetIndex {
        entries,
        class_names: class_dirs.clone(),
    })
}

/// Largest-remainder apportionment of `total` across class counts,
/// proportional to each class size. Keeps per-class deviation <= 1.
fn apportion(counts: &[usize; 2], total: usize) -> [usize; 2] {
    let n: usize = counts.iter().sum();
    let exact = [
        counts[0] as f64 * total as f64 / n as f64,
        counts[1] as f64 * total as f64 / n as f64,
    ];
    let mut alloc = [exact[0].floor() as usize, exact[1].floor() as usize];
    let mut rem = total - alloc[0] - alloc[1];
    let mut order = [0usize, 1];
    if exact[1] - alloc[1] as f64 > exact[0] - alloc[0] as f64 {
        order = [1, 0];
    }
    for i in order {
        if rem == 0 {
            break;
        }
        alloc[i] += 1;
        rem -= 1;
    }
    alloc
}

/// Deterministic stratified split: 20% test, then 20% of the remaining
/// train carved out as validation (64/16/20 of the total).
pub fn split_dataset(index: &DatasetIndex, seed: u64) -> Result<SplitIndex> {
    let mut per_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, (_, label)) in index.entries.iter().enumerate() {
        per_class[label.value() as usize].push(i);
    }
    for (c, ids) in per_class.iter().enumerate() {
        if ids.len() < 5 {
            return Err(Error::Data(format!(
                "class {:?} has {} entries; at least 5 per class are required to stratify",
                index.class_names[c],
                ids.len()
            )));
        }
    }
    let counts = [per_class[0].len(), per_class[1].len()];
    let total = counts[0] + counts[1];
    let test_total = (0.20 * total as f64).round() as usize;
    let test_alloc = apportion(&counts, test_total);

    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    let mut train_pools: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for c in 0..2 {
        let mut ids = per_class[c].clone();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x7e57, c as u64]));
        ids.shuffle(&mut rng);
        test.extend_from_slice(&ids[..test_alloc[c]]);
        train_pools[c] = ids[test_alloc[c]..].to_vec();
    }
    let pool_counts = [train_pools[0].len(), train_pools[1].len()];
    let val_total = (0.20 * (pool_counts[0] + pool_counts[1]) as f64).round() as usize;
    let val_alloc = apportion(&pool_counts, val_total);
    for c in 0..2 {
        validation.extend_from_slice(&train_pools[c][..val_alloc[c]]);
        train.extend_from_slice(&train_pools[c][val_alloc[c]..]);
    }
    train.sort_unstable();
    validation.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndex {
        train,
        validation,
        test,
        seed,
    })
}

/// Decode a PNG, JPEG, or AFIM `.raw` file into 0-255 intensities.
///
/// Grayscale inputs are replicated across three identical channels.
pub fn load_image(path: &Path) -> Result<RawImage> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    let raw = if ext == "raw" {
        afim::read(path)?
    } else if ext == "png" || ext == "jpg" || ext == "jpeg" {
        let img = image::open(path).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        RawImage::new(h as usize, w as usize, 3, rgb.into_raw())?
    } else {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            reason: format!("unsupported extension {:?}", ext),
        });
    };
    if raw.channels == 1 {
        let mut data = Vec::with_capacity(raw.data.len() * 3);
        for &v in &raw.data {
            data.extend_from_slice(&[v, v, v]);
        }
        return RawImage::new(raw.height, raw.width, 3, data);
    }
    Ok(raw)
}

// ---- split manifest ---------------------------------------------------------

/// Row of the split manifest CSV.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: LabelId,
    pub split: Split,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split {:?} in manifest", other))),
        }
    }
}

/// Build manifest rows from an index and its split.
pub fn manifest_entries(index: &DatasetIndex, split: &SplitIndex) -> Vec<ManifestEntry> {
    let mut rows = Vec::with_capacity(index.entries.len());
    let push = |rows: &mut Vec<ManifestEntry>, ids: &[usize], s: Split| {
        for &i in ids {
            rows.push(ManifestEntry {
                path: index.entries[i].0.clone(),
                label: index.entries[i].1,
                split: s,
            });
        }
    };
    push(&mut rows, &split.train, Split::Train);
    push(&mut rows, &split.validation, Split::Val);
    push(&mut rows, &split.test, Split::Test);
    rows
}

/// Write the `path,label,split` manifest. Paths must not contain commas,
/// quotes, or newlines; the format round-trips byte-exactly.
pub fn write_manifest(path: &Path, rows: &[ManifestEntry]) -> Result<()> {
    let mut out = String::from("path,label,split\n");
    for row in rows {
        let p = row.path.to_str().ok_or_else(|| {
            Error::Data(format!("non-UTF8 path in manifest: {:?}", row.path))
        })?;
        if p.contains(',') || p.contains('"') || p.contains('\n') {
            return Err(Error::Data(format!(
                "path {:?} contains characters unsupported by the manifest format",
                p
            )));
        }
        out.push_str(p);
        out.push(',');
        out.push_str(&row.label.value().to_string());
        out.push(',');
        out.push_str(row.split.as_str());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("path,label,split") => {}
        _ => {
            return Err(Error::Data(format!(
                "{}: missing manifest header",
                path.display()
            )))
        }
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.rsplitn(3, ',');
        let split = parts.next();
        let label = parts.next();
        let p = parts.next();
        match (p, label, split) {
            (Some(p), Some(label), Some(split)) => {
                let label: u8 = label.parse().map_err(|_| {
                    Error::Data(format!("{} line {}: bad label", path.display(), lineno + 2))
                })?;
                rows.push(ManifestEntry {
                    path: PathBuf::from(p),
                    label: LabelId::new(label)?,
                    split: Split::parse(split)?,
                });
            }
            _ => {
                return Err(Error::Data(format!(
                    "{} line {}: expected path,label,split",
                    path.display(),
                    lineno + 2
                )))
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(dir: &Path, name: &str, h: usize, w: usize, value: u8) -> PathBuf {
        let p = dir.join(name);
        let img = RawImage::new(h, w, 3, vec![value; h * w * 3]).unwrap();
        afim::write(&p, &img).unwrap();
        p
    }

    fn make_dataset(root: &Path, n0: usize, n1: usize) {
        fs::create_dir_all(root.join("notall")).unwrap();
        fs::create_dir_all(root.join("all")).unwrap();
        for i in 0..n0 {
            solid(&root.join("notall"), &format!("h{i:03}.raw"), 4, 4, 200);
        }
        for i in 0..n1 {
            solid(&root.join("all"), &format!("s{i:03}.raw"), 4, 4, 60);
        }
    }

    fn dirs() -> [String; 2] {
        ["notall".to_string(), "all".to_string()]
    }

    #[test]
    fn scan_counts_and_labels() {
        let tmp = tempfile::tempdir().unwrap();
        make_dataset(tmp.path(), 59, 49);
        let idx = scan_dataset(tmp.path(), &dirs()).unwrap();
        assert_eq!(idx.entries.len(), 108);
        let zeros = idx
            .entries
            .iter()
            .filter(|(_, l)| *l == LabelId::NOT_ALL)
            .count();
        assert_eq!(zeros, 59);
        let mut sorted = idx.entries.clone();
        sorted.sort();
        assert_eq!(sorted, idx.entries);
    }

    #[test]
    fn scan_minimal_two_files() {
        let tmp = tempfile::tempdir().unwrap();
        make_dataset(tmp.path(), 1, 1);
        let idx = scan_dataset(tmp.path(), &dirs()).unwrap();
        assert_eq!(idx.entries.len(), 2);
        let labels: Vec<u8> = idx.entries.iter().map(|(_, l)| l.value()).collect();
        assert_eq!(labels.iter().filter(|&&v| v == 0).count(), 1);
        assert_eq!(labels.iter().filter(|&&v| v == 1).count(), 1);
    }

    #[test]
    fn scan_empty_class_is_error() {
        let tmp = tempfile::tempdir().unwrap();
        fs::create_dir_all(tmp.path().join("notall")).unwrap();
        fs::create_dir_all(tmp.path().join("all")).unwrap();
        solid(&tmp.path().join("notall"), "a.raw", 2, 2, 0);
        let err = scan_dataset(tmp.path(), &dirs()).unwrap_err();
        assert!(err.to_string().contains("zero samples"));
    }

    #[test]
    fn scan_missing_dir_is_config_error() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(
            scan_dataset(tmp.path(), &dirs()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn scan_corrupt_file_names_it() {
        let tmp = tempfile::tempdir().unwrap();
        make_dataset(tmp.path(), 2, 2);
        fs::write(tmp.path().join("all/zz_bad.raw"), b"AFIMgarbage").unwrap();
        let err = scan_dataset(tmp.path(), &dirs()).unwrap_err();
        assert!(err.to_string().contains("zz_bad.raw"), "{}", err);
    }

    #[test]
    fn split_108_gives_22_test_with_table_counts() {
        let tmp = tempfile::tempdir().unwrap();
        make_dataset(tmp.path(), 59, 49);
        let idx = scan_dataset(tmp.path(), &dirs()).unwrap();
        let split = split_dataset(&idx, 7).unwrap();
        assert_eq!(split.test.len(), 22);
        let test_label1 = split
            .test
            .iter()
            .filter(|&&i| idx.entries[i].1 == LabelId::ALL)
            .count();
        assert_eq!(test_label1, 10);
        assert_eq!(split.test.len() - test_label1, 12);
        // Two-stage carve: 86 remain, 17 validation, 69 train.
        assert_eq!(split.validation.len(), 17);
        assert_eq!(split.train.len(), 69);
    }

    #[test]
    fn split_260_gives_52_test() {
        let tmp = tempfile::tempdir().unwrap();
        make_dataset(tmp.path(), 130, 130);
        let idx = scan_dataset(tmp.path(), &dirs()).unwrap();
        let split = split_dataset(&idx, 123).unwrap();
        assert_eq!(split.test.len(), 52);
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let tmp = tempfile::tempdir().unwrap();
        make_dataset(tmp.path(), 13, 9);
        let idx = scan_dataset(tmp.path(), &dirs()).unwrap();
        let a = split_dataset(&idx, 99).unwrap();
        let b = split_dataset(&idx, 99).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a
            .train
            .iter()
            .chain(&a.validation)
            .chain(&a.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..22).collect::<Vec<_>>());
        let c = split_dataset(&idx, 100).unwrap();
        assert_ne!(a.test, c.test);
    }

    #[test]
    fn split_small_class_is_error() {
        let tmp = tempfile::tempdir().unwrap();
        make_dataset(tmp.path(), 8, 4);
        let idx = scan_dataset(tmp.path(), &dirs()).unwrap();
        assert!(split_dataset(&idx, 1).is_err());
    }

    #[test]
    fn stratification_deviation_at_most_one() {
        let tmp = tempfile::tempdir().unwrap();
        make_dataset(tmp.path(), 31, 17);
        let idx = scan_dataset(tmp.path(), &dirs()).unwrap();
        let split = split_dataset(&idx, 5).unwrap();
        let frac1 = 17.0 / 48.0;
        for ids in [&split.train, &split.validation, &split.test] {
            let ones = ids
                .iter()
                .filter(|&&i| idx.entries[i].1 == LabelId::ALL)
                .count() as f64;
            let expect = frac1 * ids.len() as f64;
            assert!(
                (ones - expect).abs() <= 1.0 + 1e-9,
                "ones={} expect={}",
                ones,
                expect
            );
        }
    }

    #[test]
    fn load_white_png() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("white.png");
        let img = image::RgbImage::from_pixel(2, 2, image::Rgb([255, 255, 255]));
        img.save(&p).unwrap();
        let raw = load_image(&p).unwrap();
        assert_eq!((raw.height, raw.width, raw.channels), (2, 2, 3));
        assert!(raw.data.iter().all(|&v| v == 255));
    }

    #[test]
    fn grayscale_broadcasts_to_three_channels() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("gray.raw");
        afim::write(&p, &RawImage::new(2, 2, 1, vec![10, 20, 30, 40]).unwrap()).unwrap();
        let raw = load_image(&p).unwrap();
        assert_eq!(raw.channels, 3);
        assert_eq!(raw.data, vec![10, 10, 10, 20, 20, 20, 30, 30, 30, 40, 40, 40]);
    }

    #[test]
    fn corrupt_png_is_decode_error() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("bad.png");
        fs::write(&p, b"not a png").unwrap();
        assert!(matches!(load_image(&p), Err(Error::Decode { .. })));
    }

    #[test]
    fn manifest_round_trip_is_identity() {
        let tmp = tempfile::tempdir().unwrap();
        make_dataset(tmp.path(), 6, 6);
        let idx = scan_dataset(tmp.path(), &dirs()).unwrap();
        let split = split_dataset(&idx, 3).unwrap();
        let rows = manifest_entries(&idx, &split);
        let mpath = tmp.path().join("manifest.csv");
        write_manifest(&mpath, &rows).unwrap();
        let bytes1 = fs::read(&mpath).unwrap();
        let rows2 = read_manifest(&mpath).unwrap();
        assert_eq!(rows, rows2);
        write_manifest(&mpath, &rows2).unwrap();
        assert_eq!(fs::read(&mpath).unwrap(), bytes1);
    }
}
