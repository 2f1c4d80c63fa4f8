use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use medvl_client::EndpointConfig;
use medvl_core::dataengine::ChatFormat;
use medvl_core::metrics::DEFAULT_SPACING_MM_PER_PX;
use serde::Deserialize;

/// Pipeline run configuration, read from TOML. Relative paths resolve
/// against the file's directory.
///
/// ```toml
/// seed = 7
/// manifests = "manifests"
/// out_dir = "run"
///
/// [endpoint]
/// base_url = "http://localhost:8000/v1"
/// model_id = "umit"
/// ```
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub manifests: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub endpoint: Option<EndpointConfig>,
    /// Defaults to `<out_dir>/cache`.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub chat_format: ChatFormat,
    #[serde(default = "default_shuffle_buffer")]
    pub shuffle_buffer: usize,
    #[serde(default = "default_spacing")]
    pub spacing_mm_per_px: f64,
}

fn default_shuffle_buffer() -> usize {
    10_000
}

fn default_spacing() -> f64 {
    DEFAULT_SPACING_MM_PER_PX
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.manifests = resolve(base, &cfg.manifests);
        cfg.out_dir = resolve(base, &cfg.out_dir);
        cfg.cache_dir = cfg.cache_dir.map(|c| resolve(base, &c));
        Ok(cfg)
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.out_dir.join("cache"))
    }

    /// Everything checkable before any stage runs.
    pub fn validate(&self) -> Result<()> {
        let Some(ep) = &self.endpoint else {
            bail!("run config has no [endpoint] table");
        };
        ep.validate()?;
        ep.auth_token()?;
        if !self.manifests.is_dir() {
            bail!("manifest directory {} does not exist", self.manifests.display());
        }
        if !(self.spacing_mm_per_px.is_finite() && self.spacing_mm_per_px > 0.0) {
            bail!("spacing_mm_per_px must be positive");
        }
        if self.shuffle_buffer == 0 {
            bail!("shuffle_buffer must be at least 1");
        }
        Ok(())
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// `--endpoint` is either a base URL (then `--model` is required) or a TOML
/// file holding an endpoint table.
pub fn endpoint_from_arg(arg: &str, model: Option<&str>) -> Result<EndpointConfig> {
    if arg.starts_with("http://") || arg.starts_with("https://") {
        let Some(model) = model else {
            bail!("--model is required when --endpoint is a URL");
        };
        return Ok(EndpointConfig::new(arg, model));
    }
    let path = Path::new(arg);
    let text = std::fs::read_to_string(path).with_context(|| format!("reading endpoint file {arg}"))?;
    let mut cfg: EndpointConfig = toml::from_str(&text).with_context(|| format!("parsing endpoint file {arg}"))?;
    if let Some(m) = model {
        cfg.model_id = m.to_string();
    }
    Ok(cfg)
}
