//! N-gram text metrics over [`answer_tokens`] tokenization.
//!
//! * BLEU: corpus level, clipped precisions for orders `1..=max_n`, brevity
//!   penalty, add-one smoothing on orders with no matches. Zero when no
//!   unigram matches at all.
//! * ROUGE-L: per-pair LCS F1, averaged.
//! * METEOR: exact-match unigram alignment, `10PR/(R+9P)` harmonic mean,
//!   fragmentation penalty `0.5 (chunks/m)^3`, averaged.
//! * CIDEr-D: TF-IDF n-gram cosine with clipping and a Gaussian length
//!   penalty (sigma 6), `n <= 4`, times 10, averaged.

use std::collections::{BTreeMap, HashMap};

use crate::parse::answer_tokens;

use super::{check_lengths, stable_mean, MetricError};

pub const CIDER_SIGMA: f64 = 6.0;
const CIDER_MAX_N: usize = 4;

fn tokenize_all<S: AsRef<str>>(texts: &[S]) -> Vec<Vec<String>> {
    texts.iter().map(|t| answer_tokens(t.as_ref())).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU in percent.
pub fn bleu<S: AsRef<str>>(preds: &[S], refs: &[S], max_n: usize) -> Result<f64, MetricError> {
    check_lengths(preds.len(), refs.len())?;
    if max_n == 0 {
        return Err(MetricError::InvalidArgument("max_n must be at least 1".into()));
    }
    let preds = tokenize_all(preds);
    let refs = tokenize_all(refs);
    if refs.iter().all(Vec::is_empty) {
        return Err(MetricError::DegenerateReference("all references are empty".into()));
    }

    let mut matches = vec![0u64; max_n];
    let mut totals = vec![0u64; max_n];
    let (mut hyp_len, mut ref_len) = (0u64, 0u64);
    for (p, r) in preds.iter().zip(&refs) {
        for n in 1..=max_n {
            let pc = ngram_counts(p, n);
            let rc = ngram_counts(r, n);
            let clipped: usize = pc.iter().map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0))).sum();
            let total: usize = pc.values().sum();
            matches[n - 1] += clipped as u64;
            totals[n - 1] += total.max(1) as u64;
        }
        hyp_len += p.len() as u64;
        ref_len += r.len() as u64;
    }

    if matches[0] == 0 {
        return Ok(0.0);
    }
    let bp = if hyp_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / hyp_len as f64).exp() };
    let log_sum: f64 = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| {
            let p = if m == 0 { 1.0 / (t as f64 + 1.0) } else { m as f64 / t as f64 };
            p.ln()
        })
        .sum();
    Ok(100.0 * bp * (log_sum / max_n as f64).exp())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F1 over already-tokenized text, as a fraction.
pub fn rouge_l_tokens(p: &[String], r: &[String]) -> f64 {
    if p.is_empty() || r.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(p, r) as f64;
    let prec = lcs / p.len() as f64;
    let rec = lcs / r.len() as f64;
    if prec + rec == 0.0 {
        0.0
    } else {
        2.0 * prec * rec / (prec + rec)
    }
}

/// LCS F1 for one pair, as a fraction.
pub fn rouge_l_pair(pred: &str, reference: &str) -> Result<f64, MetricError> {
    let r = answer_tokens(reference);
    if r.is_empty() {
        return Err(MetricError::DegenerateReference(format!("'{reference}' has no tokens")));
    }
    Ok(rouge_l_tokens(&answer_tokens(pred), &r))
}

/// Mean ROUGE-L F1 in percent.
pub fn rouge_l<S: AsRef<str>>(preds: &[S], refs: &[S]) -> Result<f64, MetricError> {
    check_lengths(preds.len(), refs.len())?;
    let scores =
        preds.iter().zip(refs).map(|(p, r)| rouge_l_pair(p.as_ref(), r.as_ref())).collect::<Result<Vec<_>, _>>()?;
    Ok(100.0 * stable_mean(&scores).unwrap_or(0.0))
}

/// Greedy exact-match alignment as (pred position, ref position), sorted by
/// pred position. Used when the exact search exceeds its state budget.
///
/// Each pred token takes an unmatched identical ref token. A token that can
/// extend the previous chunk does so; otherwise it takes the candidate that
/// starts the longest run of further matches, earliest on ties.
fn align_exact(p: &[String], r: &[String]) -> Vec<(usize, usize)> {
    let mut used = vec![false; r.len()];
    let mut alignment = Vec::new();
    let mut prev: Option<(usize, usize)> = None;
    for (i, tok) in p.iter().enumerate() {
        let candidates: Vec<usize> = (0..r.len()).filter(|&j| !used[j] && &r[j] == tok).collect();
        if candidates.is_empty() {
            continue;
        }
        let continuation = prev.filter(|&(pi, _)| pi + 1 == i).map(|(_, pj)| pj + 1).filter(|j| candidates.contains(j));
        let j = continuation.unwrap_or_else(|| {
            let run = |j: usize| {
                let mut k = 0;
                while i + k < p.len() && j + k < r.len() && !used[j + k] && p[i + k] == r[j + k] {
                    k += 1;
                }
                k
            };
            // max_by_key returns the last maximum; iterate in reverse for earliest.
            candidates.iter().rev().copied().max_by_key(|&j| run(j)).unwrap_or(candidates[0])
        });
        used[j] = true;
        alignment.push((i, j));
        prev = Some((i, j));
    }
    alignment
}

/// Memoized search states before falling back to the greedy alignment.
const CHUNK_SEARCH_BUDGET: usize = 1 << 15;

/// Among maximum-size exact matchings, the fewest chunks. Returns
/// `(matches, chunks)`, or `None` if the search exceeds its budget.
///
/// A chunk boundary is saved whenever pred `i` and `i + 1` map to ref `j`
/// and `j + 1`, so the search maximizes those adjacencies. State is the pred
/// position, the ref position of the previous pred token when it can still be
/// extended, and the set of ref positions consumed.
fn min_chunks(p: &[String], r: &[String]) -> Option<(usize, usize)> {
    let mut type_of: HashMap<&str, usize> = HashMap::new();
    for t in r {
        let n = type_of.len();
        type_of.entry(t.as_str()).or_insert(n);
    }
    let n_types = type_of.len();
    let p_type: Vec<Option<usize>> = p.iter().map(|t| type_of.get(t.as_str()).copied()).collect();
    let r_type: Vec<usize> = r.iter().map(|t| type_of[t.as_str()]).collect();

    let mut p_count = vec![0usize; n_types];
    let mut r_count = vec![0usize; n_types];
    p_type.iter().flatten().for_each(|&t| p_count[t] += 1);
    r_type.iter().for_each(|&t| r_count[t] += 1);
    let quota: Vec<usize> = (0..n_types).map(|t| p_count[t].min(r_count[t])).collect();
    let m: usize = quota.iter().sum();
    if m == 0 {
        return Some((0, 0));
    }
    if p == r {
        return Some((m, 1));
    }
    let words = r.len().div_ceil(64);
    let mut type_masks = vec![vec![0u64; words]; n_types];
    for (j, &t) in r_type.iter().enumerate() {
        type_masks[t][j / 64] |= 1 << (j % 64);
    }
    // Occurrences of the same type strictly after each pred position.
    let mut later = vec![0usize; p.len()];
    let mut seen = vec![0usize; n_types];
    for i in (0..p.len()).rev() {
        if let Some(t) = p_type[i] {
            later[i] = seen[t];
            seen[t] += 1;
        }
    }
    let candidates: Vec<Vec<usize>> = p_type
        .iter()
        .map(|t| match t {
            Some(t) => (0..r.len()).filter(|&j| r_type[j] == *t).collect(),
            None => Vec::new(),
        })
        .collect();

    struct Search<'a> {
        p_type: &'a [Option<usize>],
        r_type: &'a [usize],
        quota: &'a [usize],
        later: &'a [usize],
        candidates: &'a [Vec<usize>],
        type_masks: Vec<Vec<u64>>,
        memo: HashMap<(usize, usize, Vec<u64>), Option<usize>>,
    }

    impl Search<'_> {
        fn used_of(&self, mask: &[u64], t: usize) -> usize {
            mask.iter().zip(&self.type_masks[t]).map(|(a, b)| (a & b).count_ones() as usize).sum()
        }

        /// Max adjacencies from pred position `i`; `prev` is one past the
        /// previous ref position, or 0.
        fn go(&mut self, i: usize, prev: usize, mask: Vec<u64>) -> Result<Option<usize>, ()> {
            if i == self.p_type.len() {
                return Ok(Some(0));
            }
            let Some(t) = self.p_type[i] else {
                return self.go(i + 1, 0, mask);
            };
            // Only an extendable previous match matters.
            let prev = if prev > 0 && prev < self.r_type.len() && self.r_type[prev] == t { prev } else { 0 };
            let key = (i, prev, mask);
            if let Some(v) = self.memo.get(&key) {
                return Ok(*v);
            }
            if self.memo.len() >= CHUNK_SEARCH_BUDGET {
                return Err(());
            }
            let (_, _, mask) = key;
            let need = self.quota[t] - self.used_of(&mask, t);
            let mut best: Option<usize> = None;
            if need <= self.later[i] {
                best = self.go(i + 1, 0, mask.clone())?;
            }
            if need > 0 {
                for ci in 0..self.candidates[i].len() {
                    let j = self.candidates[i][ci];
                    if mask[j / 64] >> (j % 64) & 1 == 1 {
                        continue;
                    }
                    let mut next = mask.clone();
                    next[j / 64] |= 1 << (j % 64);
                    if let Some(v) = self.go(i + 1, j + 1, next)? {
                        let v = v + usize::from(prev > 0 && prev == j);
                        best = Some(best.map_or(v, |b| b.max(v)));
                    }
                }
            }
            self.memo.insert((i, prev, mask), best);
            Ok(best)
        }
    }

    let mut search = Search {
        p_type: &p_type,
        r_type: &r_type,
        quota: &quota,
        later: &later,
        candidates: &candidates,
        type_masks,
        memo: HashMap::new(),
    };
    let adjacencies = search.go(0, 0, vec![0u64; words]).ok()??;
    Some((m, m - adjacencies))
}

fn count_chunks(alignment: &[(usize, usize)]) -> usize {
    let mut chunks = 0;
    let mut prev: Option<(usize, usize)> = None;
    for &(i, j) in alignment {
        match prev {
            Some((pi, pj)) if pi + 1 == i && pj + 1 == j => {}
            _ => chunks += 1,
        }
        prev = Some((i, j));
    }
    chunks
}

fn meteor_tokens(p: &[String], r: &[String]) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    let (m, chunks) = min_chunks(p, r).unwrap_or_else(|| {
        let alignment = align_exact(p, r);
        (alignment.len(), count_chunks(&alignment))
    });
    if m == 0 {
        return 0.0;
    }
    let prec = m as f64 / p.len() as f64;
    let rec = m as f64 / r.len() as f64;
    let f_mean = 10.0 * prec * rec / (rec + 9.0 * prec);
    let frag = chunks as f64 / m as f64;
    let penalty = 0.5 * frag.powi(3);
    f_mean * (1.0 - penalty)
}

/// METEOR for one pair, as a fraction.
pub fn meteor_pair(pred: &str, reference: &str) -> Result<f64, MetricError> {
    let r = answer_tokens(reference);
    if r.is_empty() {
        return Err(MetricError::DegenerateReference(format!("'{reference}' has no tokens")));
    }
    Ok(meteor_tokens(&answer_tokens(pred), &r))
}

/// Mean exact-match METEOR in percent.
pub fn meteor<S: AsRef<str>>(preds: &[S], refs: &[S]) -> Result<f64, MetricError> {
    check_lengths(preds.len(), refs.len())?;
    let scores =
        preds.iter().zip(refs).map(|(p, r)| meteor_pair(p.as_ref(), r.as_ref())).collect::<Result<Vec<_>, _>>()?;
    Ok(100.0 * stable_mean(&scores).unwrap_or(0.0))
}

type NgramVec<'a> = [BTreeMap<&'a [String], f64>; CIDER_MAX_N];

struct CiderDoc<'a> {
    vec: NgramVec<'a>,
    norm: [f64; CIDER_MAX_N],
    /// Bigram count, the length measure of the standard implementation.
    length: usize,
}

fn cider_counts(tokens: &[String]) -> BTreeMap<&[String], usize> {
    let mut out = BTreeMap::new();
    for n in 1..=CIDER_MAX_N {
        if tokens.len() >= n {
            for w in tokens.windows(n) {
                *out.entry(w).or_insert(0) += 1;
            }
        }
    }
    out
}

fn cider_doc<'a>(
    counts: &BTreeMap<&'a [String], usize>,
    doc_freq: &BTreeMap<&[String], usize>,
    log_n_docs: f64,
) -> CiderDoc<'a> {
    let mut vec: NgramVec<'a> = Default::default();
    let mut norm = [0.0; CIDER_MAX_N];
    let mut length = 0;
    for (g, &tf) in counts {
        let df = doc_freq.get(g).copied().unwrap_or(0).max(1) as f64;
        let n = g.len() - 1;
        let w = tf as f64 * (log_n_docs - df.ln());
        vec[n].insert(*g, w);
        norm[n] += w * w;
        if n == 1 {
            length += tf;
        }
    }
    CiderDoc { vec, norm: norm.map(f64::sqrt), length }
}

fn cider_sim(hyp: &CiderDoc<'_>, reference: &CiderDoc<'_>) -> [f64; CIDER_MAX_N] {
    let delta = hyp.length as f64 - reference.length as f64;
    let gauss = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut val = [0.0; CIDER_MAX_N];
    for (n, v) in val.iter_mut().enumerate() {
        for (g, &h) in &hyp.vec[n] {
            let r = reference.vec[n].get(g).copied().unwrap_or(0.0);
            *v += h.min(r) * r;
        }
        if hyp.norm[n] != 0.0 && reference.norm[n] != 0.0 {
            *v /= hyp.norm[n] * reference.norm[n];
        }
        *v *= gauss;
    }
    val
}

/// Corpus CIDEr-D (single reference per prediction). IDF is estimated from
/// the reference side of the corpus, so at least two pairs are required.
pub fn cider_d<S: AsRef<str>>(preds: &[S], refs: &[S]) -> Result<f64, MetricError> {
    if preds.len() != refs.len() {
        return Err(MetricError::LengthMismatch { preds: preds.len(), refs: refs.len() });
    }
    if preds.len() < 2 {
        return Err(MetricError::CorpusTooSmall(preds.len()));
    }
    let preds = tokenize_all(preds);
    let refs = tokenize_all(refs);

    let ref_counts: Vec<_> = refs.iter().map(|r| cider_counts(r)).collect();
    let mut doc_freq: BTreeMap<&[String], usize> = BTreeMap::new();
    for counts in &ref_counts {
        for g in counts.keys() {
            *doc_freq.entry(*g).or_insert(0) += 1;
        }
    }
    let log_n_docs = (refs.len() as f64).ln();

    let scores: Vec<f64> = preds
        .iter()
        .zip(&ref_counts)
        .map(|(p, rc)| {
            let hyp = cider_doc(&cider_counts(p), &doc_freq, log_n_docs);
            let reference = cider_doc(rc, &doc_freq, log_n_docs);
            let sims = cider_sim(&hyp, &reference);
            10.0 * sims.iter().sum::<f64>() / CIDER_MAX_N as f64
        })
        .collect();
    Ok(stable_mean(&scores).unwrap_or(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meteor_prefers_fewest_chunks() {
        let t = |s: &str| s.split(' ').map(String::from).collect::<Vec<_>>();
        // Greedy matching would pair the first "no" with "no effusion" and
        // split "shows no" into two chunks.
        let p = t("calcified noted no shows no granuloma effusion space pneumothorax pleural");
        let r = t("pleural space shows no effusion no pneumothorax calcified granuloma noted");
        assert_eq!(min_chunks(&p, &r), Some((10, 9)));
    }

    #[test]
    fn meteor_long_repetitive_input_stays_fast() {
        let words = ["no", "left", "right", "lung", "is", "clear", "normal", "size"];
        let p: Vec<String> = (0..400).map(|i| words[(i * 7 + i / 3) % words.len()].to_string()).collect();
        let mut r = p.clone();
        r.rotate_left(13);
        let start = std::time::Instant::now();
        let v = meteor_tokens(&p, &r);
        assert!(v > 0.0 && v <= 1.0);
        assert!((meteor_tokens(&p, &p) - (1.0 - 0.5 / 400f64.powi(3))).abs() < 1e-12);
        assert!(start.elapsed().as_secs_f64() < 5.0, "{:?}", start.elapsed());
    }

    #[test]
    fn bleu_identity_and_zero() {
        let p = ["no acute cardiopulmonary abnormality seen"];
        assert!((bleu(&p, &p, 4).unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(bleu(&["alpha beta"], &["gamma delta"], 4).unwrap(), 0.0);
        assert!(matches!(bleu(&["x"], &[""], 4), Err(MetricError::DegenerateReference(_))));
    }

    #[test]
    fn bleu_brevity_penalty() {
        // 2 of 4 tokens, both unigrams and the bigram match; orders 3-4 smoothed.
        let v = bleu(&["heart normal"], &["heart normal lungs clear"], 4).unwrap();
        let p = [1.0f64, 1.0, 0.5, 0.5];
        let expected = 100.0 * (1.0f64 - 2.0).exp() * (p.iter().map(|x| x.ln()).sum::<f64>() / 4.0).exp();
        assert!((v - expected).abs() < 1e-9, "{v} vs {expected}");
    }

    #[test]
    fn rouge_cases() {
        let t = |s: &str| s.split(' ').map(String::from).collect::<Vec<_>>();
        // LCS 2, P 2/3, R 1.
        assert!((rouge_l_tokens(&t("the cat sat"), &t("the cat")) - 0.8).abs() < 1e-12);
        // Through normalization the article is gone: LCS 1, P 1/2, R 1.
        assert!((rouge_l_pair("the cat sat", "the cat").unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((rouge_l_pair("big cat sat", "big cat").unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(rouge_l_pair("dog", "big cat").unwrap(), 0.0);
        assert!((rouge_l(&["a b c d"], &["a b c d"]).unwrap() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn meteor_cases() {
        let s = meteor_pair("one two three four five", "one two three four five").unwrap();
        assert!((s - 0.996).abs() < 1e-12);
        assert_eq!(meteor_pair("alpha", "beta").unwrap(), 0.0);
        assert_eq!(meteor_pair("", "beta").unwrap(), 0.0);
    }

    #[test]
    fn alignment_prefers_contiguous_runs() {
        let t = |s: &str| s.split(' ').map(String::from).collect::<Vec<_>>();
        let p = t("no focal consolidation");
        let r = t("no effusion no focal consolidation");
        let a = align_exact(&p, &r);
        assert_eq!(a, vec![(0, 2), (1, 3), (2, 4)]);
        assert_eq!(count_chunks(&a), 1);
    }

    #[test]
    fn cider_basics() {
        let refs = ["heart size normal", "lungs are clear bilaterally", "no pleural effusion seen"];
        let perfect = cider_d(&refs, &refs).unwrap();
        let corrupt = ["heart size normal", "lungs are clear bilaterally", "spine intact"];
        assert!(perfect > cider_d(&corrupt, &refs).unwrap());
        assert!(matches!(cider_d(&["x"], &["x"]), Err(MetricError::CorpusTooSmall(1))));
    }
}
