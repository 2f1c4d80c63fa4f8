use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::record::{Language, Split, TaskKind};

use super::DataError;

/// How a dataset's files are laid out on disk. Declared, never sniffed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceFormat {
    /// `{id?, image|images, question, answer, options?, answer_type?}` per line.
    QaJsonl,
    /// `{id?, image|images, caption|report}` per line.
    CaptionJsonl,
    /// `{id?, image, object, box: [x1,y1,x2,y2]}` per line.
    #[serde(rename = "box2d_jsonl")]
    Box2DJsonl,
    /// `{id?, image|images, object, box: [x1,y1,z1,x2,y2,z2]}` per line.
    #[serde(rename = "box3d_jsonl")]
    Box3DJsonl,
    /// CSV with header `id?,image,landmark,x,y`.
    LandmarkCsv,
    /// Records already in the unified schema.
    UnifiedJsonl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxUnits {
    /// Pixel coordinates; converted to the 0..=1000 grid with `image_dims`.
    #[default]
    Pixel,
    /// Already on the 0..=1000 grid.
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitCounts {
    #[serde(default)]
    pub train: u64,
    #[serde(default)]
    pub valid: u64,
    #[serde(default)]
    pub test: u64,
}

impl SplitCounts {
    pub fn new(train: u64, valid: u64, test: u64) -> Self {
        SplitCounts { train, valid, test }
    }

    pub fn get(&self, split: Split) -> u64 {
        match split {
            Split::Train => self.train,
            Split::Valid => self.valid,
            Split::Test => self.test,
        }
    }

    pub fn add(&mut self, split: Split, n: u64) {
        match split {
            Split::Train => self.train += n,
            Split::Valid => self.valid += n,
            Split::Test => self.test += n,
        }
    }

    pub fn total(&self) -> u64 {
        self.train + self.valid + self.test
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPaths {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

impl SplitPaths {
    pub fn get(&self, split: Split) -> Option<&Path> {
        match split {
            Split::Train => self.train.as_deref(),
            Split::Valid => self.valid.as_deref(),
            Split::Test => self.test.as_deref(),
        }
    }
}

/// One dataset, declared in a TOML document.
///
/// ```toml
/// dataset_id = "vqa-rad"
/// task = "vqa_closed"
/// format = "qa_jsonl"
/// language = "en"
///
/// [splits]
/// train = "train.jsonl"
/// test = "test.jsonl"
///
/// [expected]
/// train = 1797
/// valid = 0
/// test = 451
/// ```
///
/// Relative paths resolve against the manifest's directory. A split with no
/// entries is simply omitted from `[splits]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub task: TaskKind,
    #[serde(default)]
    pub language: Language,
    pub format: SourceFormat,
    #[serde(default)]
    pub splits: SplitPaths,
    #[serde(default)]
    pub expected: Option<SplitCounts>,
    /// `image_ref -> [width, height]` in pixels.
    #[serde(default)]
    pub image_dims: BTreeMap<String, [u32; 2]>,
    /// CSV with header `image,width,height`, merged into `image_dims`.
    #[serde(default)]
    pub image_dims_file: Option<PathBuf>,
    #[serde(default)]
    pub box_units: BoxUnits,
    #[serde(default)]
    pub spacing_mm_per_px: Option<f64>,
    /// Question used when a record has none (e.g. classification sets).
    #[serde(default)]
    pub question: Option<String>,
    /// Options used when a record has none.
    #[serde(default)]
    pub options: Option<Vec<String>>,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, &base).map_err(|e| match e {
            DataError::Manifest(msg) => DataError::Manifest(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, DataError> {
        let mut m: DatasetManifest = toml::from_str(text).map_err(|e| DataError::Manifest(e.to_string()))?;
        m.base_dir = base_dir.to_path_buf();
        let problems = m.violations();
        if !problems.is_empty() {
            return Err(DataError::Manifest(problems.join("; ")));
        }
        Ok(m)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.dataset_id.trim().is_empty() {
            out.push("dataset_id is empty".to_string());
        }
        let paths: Vec<&Path> = Split::ALL.iter().filter_map(|s| self.splits.get(*s)).collect();
        for (i, a) in paths.iter().enumerate() {
            if paths[i + 1..].contains(a) {
                out.push(format!("split path {} is used twice", a.display()));
            }
        }
        if let Some(s) = self.spacing_mm_per_px {
            if !(s.is_finite() && s > 0.0) {
                out.push("spacing_mm_per_px must be positive".to_string());
            }
        }
        for (img, [w, h]) in &self.image_dims {
            if *w == 0 || *h == 0 {
                out.push(format!("image_dims for {img} must be positive"));
            }
        }
        if let Some(opts) = &self.options {
            if opts.is_empty() {
                out.push("options, when given, must be non-empty".to_string());
            }
        }
        out
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split_path(&self, split: Split) -> Option<PathBuf> {
        self.splits.get(split).map(|p| self.resolve(p))
    }

    /// Inline dimensions merged with the dimensions file, if any.
    pub fn load_image_dims(&self) -> Result<BTreeMap<String, [u32; 2]>, DataError> {
        let mut dims = self.image_dims.clone();
        if let Some(file) = &self.image_dims_file {
            let path = self.resolve(file);
            let mut rdr = csv::Reader::from_path(&path).map_err(|e| DataError::csv(&path, e))?;
            #[derive(Deserialize)]
            struct Row {
                image: String,
                width: u32,
                height: u32,
            }
            for (i, row) in rdr.deserialize::<Row>().enumerate() {
                let row = row.map_err(|e| DataError::format(&path, i + 2, e.to_string()))?;
                if row.width == 0 || row.height == 0 {
                    return Err(DataError::format(&path, i + 2, "dimensions must be positive"));
                }
                dims.insert(row.image, [row.width, row.height]);
            }
        }
        Ok(dims)
    }
}

/// Loads every `*.toml` manifest in `dir`, sorted by file name.
pub fn load_manifest_dir(dir: &Path) -> Result<Vec<DatasetManifest>, DataError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| DataError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    let manifests = paths.iter().map(|p| DatasetManifest::load(p)).collect::<Result<Vec<_>, _>>()?;
    let mut ids: Vec<&str> = manifests.iter().map(|m| m.dataset_id.as_str()).collect();
    ids.sort();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(DataError::Manifest(format!("dataset_id {} declared twice in {}", w[0], dir.display())));
    }
    Ok(manifests)
}
