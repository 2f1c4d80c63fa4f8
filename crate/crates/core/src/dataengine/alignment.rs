use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::record::Language;

use super::DataError;

/// Images per synthesis job.
pub const DEFAULT_GROUP_SIZE: usize = 2;

/// One captioned image available for alignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolItem {
    pub image_ref: String,
    pub caption: String,
    /// Jobs only group images from the same dataset.
    #[serde(default)]
    pub dataset_id: String,
    #[serde(default)]
    pub language: Language,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Paired,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentSample {
    pub image_refs: Vec<String>,
    pub text: String,
    pub origin: Origin,
    #[serde(default)]
    pub language: Language,
}

/// A compare-and-contrast prompt over a group of captioned images.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisJob {
    pub job_id: String,
    pub dataset_id: String,
    pub language: Language,
    pub image_refs: Vec<String>,
    pub captions: Vec<String>,
    pub prompt: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentPlan {
    pub paired: Vec<AlignmentSample>,
    pub jobs: Vec<SynthesisJob>,
}

/// Target corpus composition, in samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentMix {
    pub paired: u64,
    pub synthetic: u64,
}

impl AlignmentMix {
    pub const ENGLISH: AlignmentMix = AlignmentMix { paired: 1_600_000, synthetic: 900_000 };
    pub const CHINESE: AlignmentMix = AlignmentMix { paired: 300_000, synthetic: 200_000 };

    /// The `synthetic_fraction` that yields this mix from a pool of
    /// `paired` items with groups of `group_size`.
    pub fn synthetic_fraction(&self, group_size: usize) -> f64 {
        self.synthetic as f64 * group_size as f64 / self.paired as f64
    }
}

pub fn synthesis_prompt(captions: &[String], language: Language) -> String {
    let mut out = String::new();
    match language {
        Language::En => {
            out.push_str(&format!("Here are {} medical images with their descriptions.\n", captions.len()));
            for (i, c) in captions.iter().enumerate() {
                out.push_str(&format!("Image {}: {}\n", i + 1, c.trim()));
            }
            out.push_str("Describe the similarities and differences between these images.");
        }
        Language::Zh => {
            out.push_str(&format!("以下是{}张医学图像及其描述。\n", captions.len()));
            for (i, c) in captions.iter().enumerate() {
                out.push_str(&format!("图像{}：{}\n", i + 1, c.trim()));
            }
            out.push_str("请描述这些图像之间的相同点和不同点。");
        }
    }
    out
}

/// `plan_alignment_grouped` with pairs.
pub fn plan_alignment(pool: &[PoolItem], seed: u64, synthetic_fraction: f64) -> Result<AlignmentPlan, DataError> {
    plan_alignment_grouped(pool, seed, synthetic_fraction, DEFAULT_GROUP_SIZE)
}

/// Every pool item becomes one paired sample, emitted in a seeded order.
/// Per dataset, `round(fraction * n / group_size)` jobs are drawn without
/// replacement from that dataset's distinct images.
pub fn plan_alignment_grouped(
    pool: &[PoolItem],
    seed: u64,
    synthetic_fraction: f64,
    group_size: usize,
) -> Result<AlignmentPlan, DataError> {
    if !(synthetic_fraction.is_finite() && synthetic_fraction >= 0.0) {
        return Err(DataError::InvalidArgument(format!(
            "synthetic_fraction must be finite and non-negative, got {synthetic_fraction}"
        )));
    }
    if group_size < 2 {
        return Err(DataError::InvalidArgument(format!("group size must be at least 2, got {group_size}")));
    }
    if synthetic_fraction > 0.0 && pool.len() < 2 {
        return Err(DataError::InsufficientPool { needed: 2, available: pool.len() });
    }

    let mut paired: Vec<AlignmentSample> = pool
        .iter()
        .map(|p| AlignmentSample {
            image_refs: vec![p.image_ref.clone()],
            text: p.caption.clone(),
            origin: Origin::Paired,
            language: p.language,
        })
        .collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    paired.shuffle(&mut order_rng);

    let mut by_dataset: BTreeMap<&str, Vec<&PoolItem>> = BTreeMap::new();
    for p in pool {
        by_dataset.entry(p.dataset_id.as_str()).or_default().push(p);
    }

    let mut jobs = Vec::new();
    for (stream, (dataset_id, items)) in by_dataset.into_iter().enumerate() {
        let n_jobs = (synthetic_fraction * items.len() as f64 / group_size as f64).round() as usize;
        if n_jobs == 0 {
            continue;
        }
        let mut seen = HashSet::new();
        let mut distinct: Vec<&PoolItem> = items.into_iter().filter(|p| seen.insert(p.image_ref.as_str())).collect();
        let needed = n_jobs * group_size;
        if needed > distinct.len() {
            return Err(DataError::InsufficientPool { needed, available: distinct.len() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream as u64 + 1);
        distinct.shuffle(&mut rng);
        for (j, group) in distinct[..needed].chunks(group_size).enumerate() {
            let captions: Vec<String> = group.iter().map(|p| p.caption.clone()).collect();
            let language = group[0].language;
            let prefix = if dataset_id.is_empty() { String::new() } else { format!("{dataset_id}:") };
            jobs.push(SynthesisJob {
                job_id: format!("{prefix}syn{j:07}"),
                dataset_id: dataset_id.to_string(),
                language,
                image_refs: group.iter().map(|p| p.image_ref.clone()).collect(),
                prompt: synthesis_prompt(&captions, language),
                captions,
                seed,
            });
        }
    }
    Ok(AlignmentPlan { paired, jobs })
}

pub fn assemble_alignment(job: &SynthesisJob, llm_answer: &str) -> Result<AlignmentSample, DataError> {
    let text = llm_answer.trim();
    if text.is_empty() {
        return Err(DataError::EmptyAnswer { job_id: job.job_id.clone() });
    }
    Ok(AlignmentSample {
        image_refs: job.image_refs.clone(),
        text: text.to_string(),
        origin: Origin::Synthetic,
        language: job.language,
    })
}
