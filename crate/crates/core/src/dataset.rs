//! Dataset manifests and cached feature extraction.
//!
//! Three layouts are recognised:
//! * an UrbanSound8K-style metadata CSV (`slice_file_name`, `fold`,
//!   `classID`, `class`) with audio under `audio/fold<k>/`;
//! * a generic CSV with `clip_id`, `path`, a label column and optional
//!   `fold` / `split` columns, paths relative to the CSV;
//! * a directory of class folders holding WAV files.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::audio::{normalize_clip, read_wav, write_cache, FeatureCache, FeatureMap, FrontendConfig, MfccExtractor};
use crate::engine::{ClipRecord, Corpus, SplitTag};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub path: PathBuf,
    pub label: usize,
    pub fold: Option<u32>,
    pub split: Option<SplitTag>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    /// Directory the manifest was loaded from; the default cache lives here.
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

const LABEL_COLUMNS: [&str; 3] = ["label", "class", "category"];

fn itemized(what: &str, items: &[String]) -> Error {
    let mut msg = format!("{} {what}:", items.len());
    for item in items.iter().take(50) {
        msg.push_str("\n  ");
        msg.push_str(item);
    }
    if items.len() > 50 {
        msg.push_str(&format!("\n  ... and {} more", items.len() - 50));
    }
    Error::Data(msg)
}

impl DatasetManifest {
    /// Loads a manifest CSV, or a directory containing `manifest.csv`,
    /// `metadata/UrbanSound8K.csv` or class folders.
    pub fn load(path: &Path) -> Result<Self> {
        if path.is_file() {
            return Self::from_csv(path);
        }
        if !path.is_dir() {
            return Err(Error::Data(format!("dataset path {} does not exist", path.display())));
        }
        for candidate in ["manifest.csv", "metadata/UrbanSound8K.csv"] {
            let p = path.join(candidate);
            if p.is_file() {
                return Self::from_csv(&p);
            }
        }
        Self::from_folders(path)
    }

    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();

        let rows: Vec<csv::StringRecord> = reader
            .records()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;

        if let (Some(file), Some(fold), Some(class_id), Some(class)) =
            (col("slice_file_name"), col("fold"), col("classID"), col("class"))
        {
            // metadata/UrbanSound8K.csv sits one level below the dataset root
            let root = if dir.file_name().is_some_and(|n| n == "metadata") {
                dir.parent().unwrap_or(&dir).to_path_buf()
            } else {
                dir.clone()
            };
            return Self::from_urbansound(root, &rows, file, fold, class_id, class);
        }

        let mut problems = Vec::new();
        let label_col = LABEL_COLUMNS.iter().find_map(|c| col(c));
        let (id_col, path_col) = (col("clip_id"), col("path"));
        if label_col.is_none() {
            problems.push(format!(
                "no label column (expected one of {LABEL_COLUMNS:?}); found {headers:?}"
            ));
        }
        if path_col.is_none() {
            problems.push(format!("no path column; found {headers:?}"));
        }
        if !problems.is_empty() {
            return Err(itemized(&format!("problems in {}", path.display()), &problems));
        }
        let (label_col, path_col) = (label_col.expect("checked"), path_col.expect("checked"));
        let (fold_col, split_col) = (col("fold"), col("split"));

        let names: BTreeSet<String> = rows.iter().map(|r| r.get(label_col).unwrap_or("").trim().to_string()).collect();
        let class_names: Vec<String> = names.into_iter().collect();
        let index: HashMap<&str, usize> = class_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();

        let mut entries = Vec::with_capacity(rows.len());
        for (line, r) in rows.iter().enumerate() {
            let field = |c: usize| r.get(c).unwrap_or("").trim();
            let rel = field(path_col);
            let clip_id = match id_col.map(field) {
                Some(id) if !id.is_empty() => id.to_string(),
                _ => Path::new(rel)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
            };
            let label_name = field(label_col);
            if label_name.is_empty() || rel.is_empty() || clip_id.is_empty() {
                problems.push(format!("line {}: empty clip id, path or label", line + 2));
                continue;
            }
            let fold = match fold_col.map(field).filter(|f| !f.is_empty()) {
                None => None,
                Some(f) => match f.parse() {
                    Ok(v) => Some(v),
                    Err(_) => {
                        problems.push(format!("{clip_id}: fold {f:?} is not an integer"));
                        continue;
                    }
                },
            };
            let split = match split_col.map(field).filter(|s| !s.is_empty()) {
                None => None,
                Some("train") => Some(SplitTag::Train),
                Some("test") => Some(SplitTag::Test),
                Some(s) => {
                    problems.push(format!("{clip_id}: split {s:?} is neither train nor test"));
                    continue;
                }
            };
            entries.push(ManifestEntry {
                clip_id,
                path: dir.join(rel),
                label: index[label_name],
                fold,
                split,
            });
        }
        if !problems.is_empty() {
            return Err(itemized(&format!("problems in {}", path.display()), &problems));
        }
        let m = Self {
            root: dir,
            class_names,
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    fn from_urbansound(
        root: PathBuf,
        rows: &[csv::StringRecord],
        file: usize,
        fold: usize,
        class_id: usize,
        class: usize,
    ) -> Result<Self> {
        let mut vocab: BTreeMap<usize, String> = BTreeMap::new();
        let mut problems = Vec::new();
        let mut parsed = Vec::new();
        for (line, r) in rows.iter().enumerate() {
            let field = |c: usize| r.get(c).unwrap_or("").trim();
            let name = field(file);
            match (field(fold).parse::<u32>(), field(class_id).parse::<usize>()) {
                (Ok(f), Ok(c)) => {
                    if let Some(prev) = vocab.insert(c, field(class).to_string()) {
                        if prev != field(class) {
                            problems.push(format!("{name}: classID {c} is both {prev:?} and {:?}", field(class)));
                        }
                    }
                    parsed.push((name.to_string(), f, c));
                }
                _ => problems.push(format!("line {}: unparsable fold or classID", line + 2)),
            }
        }
        if !problems.is_empty() {
            return Err(itemized("problems in the metadata file", &problems));
        }
        let ids: Vec<usize> = vocab.keys().copied().collect();
        let entries = parsed
            .into_iter()
            .map(|(name, f, c)| ManifestEntry {
                clip_id: Path::new(&name)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or(name.clone()),
                path: root.join("audio").join(format!("fold{f}")).join(&name),
                label: ids.binary_search(&c).expect("vocabulary holds every id"),
                fold: Some(f),
                split: None,
            })
            .collect();
        let m = Self {
            root,
            class_names: vocab.into_values().collect(),
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn from_folders(dir: &Path) -> Result<Self> {
        let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        class_dirs.sort();
        let mut class_names = Vec::new();
        let mut entries = Vec::new();
        for class_dir in class_dirs {
            let mut wavs: Vec<PathBuf> = walkdir::WalkDir::new(&class_dir)
                .into_iter()
                .filter_map(|e| e.ok())
                .map(|e| e.into_path())
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
                .collect();
            if wavs.is_empty() {
                continue;
            }
            wavs.sort();
            let name = class_dir.file_name().expect("directory name").to_string_lossy().into_owned();
            let label = class_names.len();
            for p in wavs {
                let rel = p.strip_prefix(dir).unwrap_or(&p).with_extension("");
                entries.push(ManifestEntry {
                    clip_id: rel.to_string_lossy().replace(std::path::MAIN_SEPARATOR, "/"),
                    path: p,
                    label,
                    fold: None,
                    split: None,
                });
            }
            class_names.push(name);
        }
        let m = Self {
            root: dir.to_path_buf(),
            class_names,
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    /// Unique clip ids, existing files and at least two classes.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut ids = HashSet::new();
        for e in &self.entries {
            if !ids.insert(e.clip_id.as_str()) {
                problems.push(format!("{}: duplicate clip id", e.clip_id));
            }
            if !e.path.is_file() {
                problems.push(format!("{}: missing file {}", e.clip_id, e.path.display()));
            }
        }
        let used: BTreeSet<usize> = self.entries.iter().map(|e| e.label).collect();
        if used.len() < 2 {
            problems.push(format!("{} classes found, at least 2 are required", used.len()));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(itemized("manifest problems", &problems))
        }
    }

    pub fn clip_records(&self) -> Vec<ClipRecord> {
        self.entries
            .iter()
            .map(|e| ClipRecord {
                clip_id: e.clip_id.clone(),
                label: e.label,
                fold: e.fold,
                split: e.split,
            })
            .collect()
    }

    pub fn default_cache_path(&self) -> PathBuf {
        self.root.join("features.cache")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassCount {
    pub name: String,
    pub clips: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestSummary {
    pub classes: Vec<ClassCount>,
    pub clips: usize,
    pub computed: usize,
    pub cached: usize,
    pub cache_rewritten: bool,
    pub cache_path: PathBuf,
    /// Source durations in seconds before trimming or padding.
    pub duration_min: f64,
    pub duration_mean: f64,
    pub duration_max: f64,
}

impl std::fmt::Display for IngestSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{} clips in {} classes", self.clips, self.classes.len())?;
        for c in &self.classes {
            writeln!(f, "  {:<24} {}", c.name, c.clips)?;
        }
        writeln!(
            f,
            "duration (s): min {:.3}  mean {:.3}  max {:.3}",
            self.duration_min, self.duration_mean, self.duration_max
        )?;
        write!(
            f,
            "features: {} computed, {} from cache ({}{})",
            self.computed,
            self.cached,
            self.cache_path.display(),
            if self.cache_rewritten { ", rewritten" } else { ", unchanged" }
        )
    }
}

fn wav_duration(path: &Path) -> Result<f64> {
    let r = hound::WavReader::open(path).map_err(|source| Error::Wav {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(r.duration() as f64 / r.spec().sample_rate as f64)
}

fn extract_entry(e: &ManifestEntry, extractor: &MfccExtractor) -> Result<FeatureMap> {
    let cfg = extractor.config();
    let clip = read_wav(&e.path, &e.clip_id, e.label)?;
    let clip = normalize_clip(&clip, cfg.sample_rate, cfg.target_seconds)?;
    extractor.extract(&clip)
}

/// Normalises and MFCC-encodes every clip, reusing cached maps computed
/// under the same front-end configuration. The cache file is rewritten only
/// when its contents would change.
pub fn ingest(manifest: &DatasetManifest, frontend: &FrontendConfig, cache_path: &Path) -> Result<(Corpus, IngestSummary)> {
    frontend.validate()?;
    let hash = frontend.hash();
    let (cache, miss_reason) = FeatureCache::open(cache_path, hash)?;
    if let Some(reason) = &miss_reason {
        log::info!("feature cache not used: {reason}");
    }
    let extractor = MfccExtractor::new(frontend)?;

    let results: Vec<(Result<FeatureMap>, bool, Result<f64>)> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let duration = wav_duration(&e.path);
            match cache.get(&e.clip_id) {
                Some(m) => {
                    let mut m = m.clone();
                    m.label = e.label;
                    (Ok(m), false, duration)
                }
                None => (extract_entry(e, &extractor), true, duration),
            }
        })
        .collect();

    let mut problems = Vec::new();
    let mut maps = Vec::with_capacity(results.len());
    let mut durations = Vec::with_capacity(results.len());
    let mut computed = 0;
    for (e, (map, fresh, duration)) in manifest.entries.iter().zip(results) {
        match (map, duration) {
            (Ok(m), Ok(d)) => {
                computed += usize::from(fresh);
                maps.push(m);
                durations.push(d);
            }
            (Err(err), _) | (_, Err(err)) => problems.push(format!("{}: {err}", e.clip_id)),
        }
    }
    if !problems.is_empty() {
        return Err(itemized("clips could not be ingested", &problems));
    }

    let unchanged = miss_reason.is_none()
        && computed == 0
        && cache.entries.len() == maps.len()
        && maps.iter().all(|m| cache.get(&m.clip_id).is_some_and(|c| c.label == m.label));
    if !unchanged {
        write_cache(cache_path, hash, &maps)?;
    }

    let mut counts = vec![0usize; manifest.class_names.len()];
    manifest.entries.iter().for_each(|e| counts[e.label] += 1);
    let n = durations.len().max(1) as f64;
    let summary = IngestSummary {
        classes: manifest
            .class_names
            .iter()
            .zip(counts)
            .map(|(name, clips)| ClassCount {
                name: name.clone(),
                clips,
            })
            .collect(),
        clips: maps.len(),
        computed,
        cached: maps.len() - computed,
        cache_rewritten: !unchanged,
        cache_path: cache_path.to_path_buf(),
        duration_min: durations.iter().copied().fold(f64::INFINITY, f64::min),
        duration_mean: durations.iter().sum::<f64>() / n,
        duration_max: durations.iter().copied().fold(0.0, f64::max),
    };
    let corpus = Corpus {
        class_names: manifest.class_names.clone(),
        clips: manifest.clip_records(),
        features: maps.into_iter().map(|m| (m.clip_id.clone(), m)).collect(),
    };
    Ok((corpus, summary))
}
