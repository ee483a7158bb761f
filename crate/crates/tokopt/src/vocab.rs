//! Seed vocabularies: candidate collection, unigram-EM seeding, trimming,
//! and the TSV on-disk format.
//!
//! The vocabulary carries one log-probability per surface; probabilities
//! sum to one and every character that appears inside any surface has its
//! own single-character entry, so every sentence over the seed alphabet
//! stays segmentable no matter how aggressively multi-character entries
//! are pruned.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lattice;

/// Surface reserved for the unknown-word entry. Exempt from the character
/// coverage closure and never matched against sentence substrings.
pub const UNK_SURFACE: &str = "<unk>";

/// Seed probability assigned to the unknown entry before renormalization.
pub const UNK_PROB: f64 = 1e-7;

pub const DEFAULT_MAX_WORD_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct VocabEntry {
    pub surface: String,
    pub seed_logprob: f64,
}

/// A fixed vocabulary with seed unigram log-probabilities. Entry ids are
/// dense indices in list order.
#[derive(Debug, Clone)]
pub struct SeedVocab {
    entries: Vec<VocabEntry>,
    index: BTreeMap<String, u32>,
    unk_id: Option<u32>,
    max_word_len: usize,
}

impl SeedVocab {
    /// Builds a vocabulary from `(surface, logprob)` pairs, validating the
    /// type invariants (unique surfaces, normalization, character coverage).
    pub fn new(entries: Vec<(String, f64)>) -> Result<Self> {
        Self::with_tolerance(entries, 1e-9)
    }

    fn with_tolerance(entries: Vec<(String, f64)>, norm_tol: f64) -> Result<Self> {
        let mut index = BTreeMap::new();
        let mut unk_id = None;
        let mut max_word_len = 1;
        let mut vocab_entries = Vec::with_capacity(entries.len());
        for (i, (surface, seed_logprob)) in entries.into_iter().enumerate() {
            if surface.is_empty() {
                return Err(Error::InvalidConfig("empty surface".to_string()));
            }
            if surface == UNK_SURFACE {
                unk_id = Some(i as u32);
            } else {
                if surface.chars().any(char::is_whitespace) {
                    return Err(Error::InvalidConfig(format!(
                        "whitespace in surface {surface:?}"
                    )));
                }
                max_word_len = max_word_len.max(surface.chars().count());
            }
            if index.insert(surface.clone(), i as u32).is_some() {
                return Err(Error::DuplicateEntry(surface));
            }
            vocab_entries.push(VocabEntry {
                surface,
                seed_logprob,
            });
        }
        let sum: f64 = vocab_entries.iter().map(|e| e.seed_logprob.exp()).sum();
        if (sum - 1.0).abs() > norm_tol {
            return Err(Error::UnnormalizedVocab(sum));
        }
        // Character-coverage closure, with the reserved unk surface exempt.
        for entry in &vocab_entries {
            if entry.surface == UNK_SURFACE {
                continue;
            }
            for c in entry.surface.chars() {
                if !index.contains_key(c.to_string().as_str()) {
                    return Err(Error::CoverageViolation(c));
                }
            }
        }
        Ok(SeedVocab {
            entries: vocab_entries,
            index,
            unk_id,
            max_word_len,
        })
    }

    /// Convenience constructor from linear probabilities.
    pub fn from_probs(entries: Vec<(String, f64)>) -> Result<Self> {
        let total: f64 = entries.iter().map(|(_, p)| p).sum();
        Self::new(
            entries
                .into_iter()
                .map(|(s, p)| (s, (p / total).ln()))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn surface(&self, id: u32) -> &str {
        &self.entries[id as usize].surface
    }

    /// Id of a surface, excluding the reserved unknown entry.
    pub fn id_of(&self, surface: &str) -> Option<u32> {
        if surface == UNK_SURFACE {
            return None;
        }
        self.index.get(surface).copied()
    }

    pub fn unk_id(&self) -> Option<u32> {
        self.unk_id
    }

    pub fn max_word_len(&self) -> usize {
        self.max_word_len
    }

    pub fn seed_logprobs(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.seed_logprob).collect()
    }

    /// Returns a vocabulary that carries an unknown-word entry, appending
    /// one with probability [`UNK_PROB`] (renormalized) if absent. Used at
    /// inference so characters outside the seed corpus stay coverable.
    pub fn with_unk(&self) -> SeedVocab {
        if self.unk_id.is_some() {
            return self.clone();
        }
        let scale = (1.0 + UNK_PROB).ln();
        let mut entries: Vec<(String, f64)> = self
            .entries
            .iter()
            .map(|e| (e.surface.clone(), e.seed_logprob - scale))
            .collect();
        entries.push((UNK_SURFACE.to_string(), UNK_PROB.ln() - scale));
        SeedVocab::new(entries).expect("renormalized vocabulary is valid")
    }
}

/// Substring candidates with exact corpus frequencies.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub candidates: Vec<(String, u64)>,
}

/// Counts every substring of length `<= max_word_len` with corpus frequency
/// `>= min_freq`; single characters are kept regardless of frequency.
pub fn collect_candidates(
    corpus: &[String],
    max_word_len: usize,
    min_freq: u64,
) -> Result<CandidateSet> {
    assert!(max_word_len >= 1);
    assert!(min_freq >= 1);
    if corpus.is_empty() || corpus.iter().all(|s| s.is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for sentence in corpus {
        let chars: Vec<char> = sentence.chars().collect();
        for start in 0..chars.len() {
            let mut surface = String::new();
            for len in 1..=max_word_len.min(chars.len() - start) {
                surface.push(chars[start + len - 1]);
                *counts.entry(surface.clone()).or_insert(0) += 1;
            }
        }
    }
    let candidates = counts
        .into_iter()
        .filter(|(surface, freq)| *freq >= min_freq || surface.chars().count() == 1)
        .collect();
    Ok(CandidateSet { candidates })
}

/// Trains seed unigram probabilities by EM over per-sentence lattice
/// posteriors, pruning the lowest-expected-count multi-character entries by
/// `shrink_ratio` each round until the vocabulary fits `target_size`.
/// Single-character entries are never pruned.
pub fn em_train_seed(
    candidates: &CandidateSet,
    corpus: &[String],
    target_size: usize,
    shrink_ratio: f64,
    iters_per_round: usize,
) -> Result<SeedVocab> {
    assert!(shrink_ratio > 0.0 && shrink_ratio < 1.0);
    assert!(iters_per_round >= 1);
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let corpus_chars: BTreeSet<char> = corpus.iter().flat_map(|s| s.chars()).collect();
    if target_size < corpus_chars.len() {
        return Err(Error::TargetBelowCoverage);
    }

    // Deduplicate sentences; expected counts scale linearly with multiplicity.
    let mut sentence_counts: BTreeMap<&str, u64> = BTreeMap::new();
    for s in corpus {
        if !s.is_empty() {
            *sentence_counts.entry(s.as_str()).or_insert(0) += 1;
        }
    }
    if sentence_counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    // Initialize probabilities proportional to raw frequency.
    let total_freq: u64 = candidates.candidates.iter().map(|(_, f)| f).sum();
    let mut working: Vec<(String, f64)> = candidates
        .candidates
        .iter()
        .map(|(s, f)| (s.clone(), (*f).max(1) as f64 / total_freq as f64))
        .collect();

    loop {
        let mut expected = vec![0.0f64; working.len()];
        for _ in 0..iters_per_round {
            let vocab = vocab_from_working(&working, false)?;
            expected = vec![0.0f64; working.len()];
            let logprobs = vocab.seed_logprobs();
            for (sentence, &mult) in &sentence_counts {
                let lat = lattice::build_lattice(sentence, &vocab)?;
                let (posteriors, _) = lattice::edge_posteriors(&lat, &logprobs)?;
                for (edge, post) in lat.edges().iter().zip(&posteriors) {
                    // Working order and vocabulary order coincide.
                    expected[edge.word_id as usize] += post * mult as f64;
                }
            }
            let total: f64 = expected.iter().sum();
            for ((_, p), c) in working.iter_mut().zip(&expected) {
                *p = c / total;
            }
        }

        if working.len() <= target_size {
            break;
        }
        let keep = target_size.max(((working.len() as f64) * shrink_ratio).ceil() as usize);
        let mut prunable: Vec<usize> = (0..working.len())
            .filter(|&i| working[i].0.chars().count() > 1)
            .collect();
        prunable.sort_by(|&a, &b| expected[a].total_cmp(&expected[b]).then(working[a].0.cmp(&working[b].0)));
        let to_remove: BTreeSet<usize> = prunable
            .into_iter()
            .take(working.len().saturating_sub(keep))
            .collect();
        if to_remove.is_empty() {
            // Only single characters left above target; coverage wins.
            break;
        }
        working = working
            .into_iter()
            .enumerate()
            .filter(|(i, _)| !to_remove.contains(i))
            .map(|(_, e)| e)
            .collect();
        let total: f64 = working.iter().map(|(_, p)| p).sum();
        for (_, p) in working.iter_mut() {
            *p /= total;
        }
    }

    vocab_from_working(&working, true)
}

/// `sorted` orders entries by descending probability for the final result;
/// EM iterations keep working order so entry ids line up with `working`.
fn vocab_from_working(working: &[(String, f64)], sorted: bool) -> Result<SeedVocab> {
    let total: f64 = working.iter().map(|(_, p)| p).sum();
    let mut entries: Vec<(String, f64)> = working
        .iter()
        .map(|(s, p)| (s.clone(), (p / total).ln()))
        .collect();
    if sorted {
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    }
    SeedVocab::new(entries)
}

/// Keeps the `ceil(keep_ratio·|V|)` highest-probability entries, always
/// retaining single-character entries (and the unknown entry), then
/// renormalizes.
pub fn trim_vocab(vocab: &SeedVocab, keep_ratio: f64) -> SeedVocab {
    assert!(keep_ratio > 0.0 && keep_ratio <= 1.0);
    let keep = ((vocab.len() as f64) * keep_ratio).ceil() as usize;
    let protected = |e: &VocabEntry| e.surface.chars().count() == 1 || e.surface == UNK_SURFACE;
    let mut order: Vec<usize> = (0..vocab.len()).collect();
    order.sort_by(|&a, &b| {
        vocab.entries[b]
            .seed_logprob
            .total_cmp(&vocab.entries[a].seed_logprob)
            .then_with(|| vocab.entries[a].surface.cmp(&vocab.entries[b].surface))
    });
    let mut kept: BTreeSet<usize> = (0..vocab.len())
        .filter(|&i| protected(&vocab.entries[i]))
        .collect();
    for &i in &order {
        if kept.len() >= keep {
            break;
        }
        kept.insert(i);
    }
    let log_total = {
        let mass: f64 = kept.iter().map(|&i| vocab.entries[i].seed_logprob.exp()).sum();
        mass.ln()
    };
    let entries = kept
        .iter()
        .map(|&i| {
            (
                vocab.entries[i].surface.clone(),
                vocab.entries[i].seed_logprob - log_total,
            )
        })
        .collect();
    SeedVocab::new(entries).expect("trimmed vocabulary remains valid")
}

/// Formats a float in plain decimal with 17 significant digits, enough to
/// round-trip any `f64` bit-exactly through `parse`.
pub fn fmt_g17(x: f64) -> String {
    if x == 0.0 {
        return "0.0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let exp10 = x.abs().log10().floor() as i32;
    let prec = (16 - exp10).max(1) as usize;
    format!("{:.*}", prec, x)
}

/// Writes the vocabulary TSV: `surface<TAB>logprob` per line, LF endings,
/// log-probs in 17-significant-digit decimal.
pub fn save_vocab(vocab: &SeedVocab, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for entry in &vocab.entries {
        out.push_str(&entry.surface);
        out.push('\t');
        out.push_str(&fmt_g17(entry.seed_logprob));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads a vocabulary TSV, validating uniqueness, normalization (within
/// 1e-6), and character coverage.
pub fn load_vocab(path: impl AsRef<Path>) -> Result<SeedVocab> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let (surface, logprob) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected `surface<TAB>logprob`".to_string()))?;
        if surface.is_empty() {
            return Err(parse_err("empty surface".to_string()));
        }
        let logprob: f64 = logprob
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("bad logprob: {e}")))?;
        entries.push((surface.to_string(), logprob));
    }
    SeedVocab::with_tolerance(entries, 1e-6)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn counts(set: &CandidateSet) -> BTreeMap<&str, u64> {
        set.candidates
            .iter()
            .map(|(s, f)| (s.as_str(), *f))
            .collect()
    }

    #[test]
    fn collect_candidates_abab() {
        let corpus = vec!["abab".to_string()];
        let set = collect_candidates(&corpus, 2, 2).unwrap();
        let got = counts(&set);
        assert_eq!(got, BTreeMap::from([("a", 2), ("b", 2), ("ab", 2)]));
        let set1 = collect_candidates(&corpus, 2, 1).unwrap();
        assert_eq!(counts(&set1)["ba"], 1);
    }

    #[test]
    fn collect_candidates_single_char_corpus() {
        let set = collect_candidates(&["a".to_string()], 3, 1).unwrap();
        assert_eq!(counts(&set), BTreeMap::from([("a", 1)]));
    }

    #[test]
    fn collect_candidates_coverage_keeps_rare_chars() {
        let corpus = vec!["aa".to_string(), "aa".to_string()];
        let set = collect_candidates(&corpus, 2, 3).unwrap();
        // "aa" (freq 2) is dropped; "a" is kept by character coverage.
        assert_eq!(counts(&set), BTreeMap::from([("a", 4)]));
    }

    #[test]
    fn collect_candidates_empty_corpus() {
        assert!(matches!(
            collect_candidates(&[], 2, 1),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn em_favors_dominant_multichar_entry() {
        let corpus: Vec<String> = std::iter::repeat("ab".to_string()).take(100).collect();
        let cands = collect_candidates(&corpus, 2, 1).unwrap();
        let vocab = em_train_seed(&cands, &corpus, 3, 0.75, 2).unwrap();
        assert_eq!(vocab.len(), 3);
        let lp_ab = vocab.entries()[vocab.id_of("ab").unwrap() as usize].seed_logprob;
        let lp_a = vocab.entries()[vocab.id_of("a").unwrap() as usize].seed_logprob;
        assert!(lp_ab > lp_a, "ab should dominate: {lp_ab} vs {lp_a}");
    }

    #[test]
    fn em_single_entry_distribution() {
        let corpus = vec!["a".to_string()];
        let cands = collect_candidates(&corpus, 1, 1).unwrap();
        let vocab = em_train_seed(&cands, &corpus, 1, 0.5, 2).unwrap();
        assert_eq!(vocab.len(), 1);
        assert!(vocab.entries()[0].seed_logprob.abs() < 1e-12);
    }

    #[test]
    fn em_prunes_to_protected_characters() {
        let mut corpus = Vec::new();
        for _ in 0..50 {
            corpus.push("ab".to_string());
            corpus.push("ba".to_string());
        }
        let cands = collect_candidates(&corpus, 2, 1).unwrap();
        let vocab = em_train_seed(&cands, &corpus, 2, 0.5, 2).unwrap();
        let surfaces: Vec<&str> = vocab.entries().iter().map(|e| e.surface.as_str()).collect();
        assert!(surfaces.contains(&"a") && surfaces.contains(&"b"), "{surfaces:?}");
        assert_eq!(vocab.len(), 2);
    }

    #[test]
    fn em_target_below_coverage() {
        let corpus = vec!["abc".to_string()];
        let cands = collect_candidates(&corpus, 2, 1).unwrap();
        assert!(matches!(
            em_train_seed(&cands, &corpus, 2, 0.5, 1),
            Err(Error::TargetBelowCoverage)
        ));
    }

    #[test]
    fn em_is_deterministic() {
        let corpus: Vec<String> = ["abab", "aab", "bba", "abba"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let cands = collect_candidates(&corpus, 3, 1).unwrap();
        let a = em_train_seed(&cands, &corpus, 5, 0.75, 2).unwrap();
        let b = em_train_seed(&cands, &corpus, 5, 0.75, 2).unwrap();
        let pairs = |v: &SeedVocab| {
            v.entries()
                .iter()
                .map(|e| (e.surface.clone(), e.seed_logprob))
                .collect::<Vec<_>>()
        };
        assert_eq!(pairs(&a), pairs(&b));
    }

    #[test]
    fn load_fixture_tsv() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(
            f,
            "a\t-0.9162907318741551\nb\t-1.6094379124341003\nab\t-0.9162907318741551\n"
        )
        .unwrap();
        let vocab = load_vocab(f.path()).unwrap();
        assert_eq!(vocab.len(), 3);
        assert!((vocab.entries()[0].seed_logprob.exp() - 0.4).abs() < 1e-9);
        assert!((vocab.entries()[1].seed_logprob.exp() - 0.2).abs() < 1e-9);
    }

    #[test]
    fn save_load_round_trip_is_byte_identical() {
        let vocab = SeedVocab::from_probs(vec![
            ("a".to_string(), 0.4),
            ("b".to_string(), 0.2),
            ("ab".to_string(), 0.4),
        ])
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("v1.tsv");
        let p2 = dir.path().join("v2.tsv");
        save_vocab(&vocab, &p1).unwrap();
        let loaded = load_vocab(&p1).unwrap();
        save_vocab(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn load_rejects_unnormalized() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        // Probabilities sum to 0.5.
        write!(f, "a\t{}\nb\t{}\n", fmt_g17(0.25f64.ln()), fmt_g17(0.25f64.ln())).unwrap();
        let err = load_vocab(f.path()).unwrap_err();
        assert!(err.to_string().starts_with("unnormalized vocabulary"));
    }

    #[test]
    fn load_rejects_duplicates_and_coverage_violations() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "a\t{}\na\t{}\n", fmt_g17(0.5f64.ln()), fmt_g17(0.5f64.ln())).unwrap();
        assert!(load_vocab(f.path())
            .unwrap_err()
            .to_string()
            .starts_with("duplicate entry"));

        let mut g = tempfile::NamedTempFile::new().unwrap();
        // "ab" present without a "b" entry.
        write!(g, "a\t{}\nab\t{}\n", fmt_g17(0.5f64.ln()), fmt_g17(0.5f64.ln())).unwrap();
        assert!(load_vocab(g.path())
            .unwrap_err()
            .to_string()
            .starts_with("coverage violation"));
    }

    #[test]
    fn trim_protects_single_characters() {
        let vocab = SeedVocab::from_probs(vec![
            ("a".to_string(), 0.4),
            ("b".to_string(), 0.2),
            ("ab".to_string(), 0.4),
        ])
        .unwrap();
        let trimmed = trim_vocab(&vocab, 0.667);
        assert_eq!(trimmed.len(), 3);
        let sum: f64 = trimmed.entries().iter().map(|e| e.seed_logprob.exp()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn trim_keep_all_is_identity() {
        let vocab = SeedVocab::from_probs(vec![
            ("a".to_string(), 0.6),
            ("b".to_string(), 0.4),
        ])
        .unwrap();
        let trimmed = trim_vocab(&vocab, 1.0);
        assert_eq!(trimmed.len(), 2);
        for (a, b) in vocab.entries().iter().zip(trimmed.entries()) {
            assert_eq!(a.surface, b.surface);
            assert!((a.seed_logprob - b.seed_logprob).abs() < 1e-12);
        }
    }

    #[test]
    fn trim_drops_lowest_multichar_and_renormalizes() {
        let vocab = SeedVocab::from_probs(vec![
            ("a".to_string(), 0.3),
            ("b".to_string(), 0.3),
            ("ab".to_string(), 0.25),
            ("ba".to_string(), 0.15),
        ])
        .unwrap();
        let trimmed = trim_vocab(&vocab, 0.75);
        assert_eq!(trimmed.len(), 3);
        assert!(trimmed.id_of("ba").is_none());
        let sum: f64 = trimmed.entries().iter().map(|e| e.seed_logprob.exp()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
        let p_ab = trimmed.entries()[trimmed.id_of("ab").unwrap() as usize]
            .seed_logprob
            .exp();
        assert!((p_ab - 0.25 / 0.85).abs() < 1e-9);
    }

    #[test]
    fn with_unk_adds_renormalized_entry() {
        let vocab = SeedVocab::from_probs(vec![
            ("a".to_string(), 0.5),
            ("b".to_string(), 0.5),
        ])
        .unwrap();
        let v = vocab.with_unk();
        assert!(v.unk_id().is_some());
        let sum: f64 = v.entries().iter().map(|e| e.seed_logprob.exp()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
        // Unknown characters become single-character unk edges.
        let lat = crate::lattice::build_lattice("axb", &v).unwrap();
        let t = crate::lattice::viterbi(&lat, &v.seed_logprobs()).unwrap();
        assert_eq!(t.surfaces(&v, "axb"), vec!["a", "x", "b"]);
    }

    #[test]
    fn fmt_g17_round_trips() {
        for &x in &[0.4f64.ln(), -1.0 / 3.0, 1e-7, 123.456, 0.0, 1e17, -2.5e-13] {
            let s = fmt_g17(x);
            let y: f64 = s.parse().unwrap();
            assert_eq!(x.to_bits(), y.to_bits(), "{x} -> {s} -> {y}");
        }
    }
}
