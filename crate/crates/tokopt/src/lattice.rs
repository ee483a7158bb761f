//! Segmentation lattices and exact decoding over them.
//!
//! A [`Lattice`] holds every in-vocabulary segmentation of one sentence as a
//! DAG of word edges over character positions. All queries are exact:
//! [`viterbi`] and [`nbest`] (forward DP + backward A* with the forward best
//! score as heuristic), [`forward_log_z`] marginalization, [`ffbs_sample`]
//! (forward filtering, backward sampling) and [`kbest_sample`] for tempered
//! sampling, and [`enumerate_all`] as a brute-force oracle for tests.
//!
//! All probability math is in log-space `f64` with max-subtracted
//! log-sum-exp; character positions are Unicode scalar values, not bytes.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::vocab::SeedVocab;

/// One word edge covering `sentence[start..end]` (character indices).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub start: usize,
    pub end: usize,
    pub word_id: u32,
}

/// All in-vocabulary segmentations of one sentence.
#[derive(Debug, Clone)]
pub struct Lattice {
    sentence: String,
    chars: Vec<char>,
    edges: Vec<Edge>,
    /// Edge indices grouped by start position.
    starting_at: Vec<Vec<usize>>,
    /// Edge indices grouped by (exclusive) end position.
    ending_at: Vec<Vec<usize>>,
}

/// One path through a lattice: a word-id sequence and its log-probability
/// (the sum of the per-word log-probs it was decoded under).
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenization {
    pub word_ids: Vec<u32>,
    pub logprob: f64,
}

impl Tokenization {
    /// Splits `sentence` back into the surface strings of this tokenization.
    ///
    /// Unknown-word edges cover exactly one character, so the split is
    /// recoverable from the vocabulary alone.
    pub fn surfaces(&self, vocab: &SeedVocab, sentence: &str) -> Vec<String> {
        let chars: Vec<char> = sentence.chars().collect();
        let mut out = Vec::with_capacity(self.word_ids.len());
        let mut pos = 0;
        for &id in &self.word_ids {
            let len = if Some(id) == vocab.unk_id() {
                1
            } else {
                vocab.surface(id).chars().count()
            };
            out.push(chars[pos..pos + len].iter().collect());
            pos += len;
        }
        debug_assert_eq!(pos, chars.len());
        out
    }
}

impl Lattice {
    pub fn sentence(&self) -> &str {
        &self.sentence
    }

    pub fn num_chars(&self) -> usize {
        self.chars.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    fn edge_logprob(&self, edge: usize, word_logprobs: &[f64]) -> f64 {
        word_logprobs[self.edges[edge].word_id as usize]
    }
}

/// Builds the lattice of every segmentation of `sentence` under `vocab`.
///
/// If the vocabulary carries an unknown-word entry, characters without a
/// single-character entry are covered by a one-character unknown edge.
/// Errors with "no path" when some character cannot be covered at all.
pub fn build_lattice(sentence: &str, vocab: &SeedVocab) -> Result<Lattice> {
    let chars: Vec<char> = sentence.chars().collect();
    let n = chars.len();
    if n == 0 {
        return Err(Error::NoPath(sentence.to_string()));
    }
    let mut edges = Vec::new();
    let mut starting_at = vec![Vec::new(); n + 1];
    let mut ending_at = vec![Vec::new(); n + 1];
    for start in 0..n {
        let mut covered = false;
        let max_len = vocab.max_word_len().min(n - start);
        let mut surface = String::new();
        for len in 1..=max_len {
            surface.push(chars[start + len - 1]);
            if let Some(id) = vocab.id_of(&surface) {
                let idx = edges.len();
                edges.push(Edge {
                    start,
                    end: start + len,
                    word_id: id,
                });
                starting_at[start].push(idx);
                ending_at[start + len].push(idx);
                if len == 1 {
                    covered = true;
                }
            }
        }
        if !covered {
            if let Some(unk) = vocab.unk_id() {
                let idx = edges.len();
                edges.push(Edge {
                    start,
                    end: start + 1,
                    word_id: unk,
                });
                starting_at[start].push(idx);
                ending_at[start + 1].push(idx);
            }
        }
    }
    let lattice = Lattice {
        sentence: sentence.to_string(),
        chars,
        edges,
        starting_at,
        ending_at,
    };
    // Every position must be reachable from 0 and reach n through some path.
    let mut reach = vec![false; n + 1];
    reach[0] = true;
    for pos in 0..n {
        if reach[pos] {
            for &e in &lattice.starting_at[pos] {
                reach[lattice.edges[e].end] = true;
            }
        }
    }
    if !reach[n] {
        return Err(Error::NoPath(sentence.to_string()));
    }
    Ok(lattice)
}

/// Log-sum-exp of two log-space values.
fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        b
    } else if b == f64::NEG_INFINITY {
        a
    } else if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// Path ordering: higher logprob first, then fewer tokens, then the path
/// whose first differing token is longer.
fn cmp_paths(lat: &Lattice, a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.total_cmp(&a.0)
        .then_with(|| a.1.len().cmp(&b.1.len()))
        .then_with(|| {
            for (&ea, &eb) in a.1.iter().zip(b.1.iter()) {
                let la = lat.edges[ea].end - lat.edges[ea].start;
                let lb = lat.edges[eb].end - lat.edges[eb].start;
                if la != lb {
                    return lb.cmp(&la);
                }
            }
            Ordering::Equal
        })
        // Distinct paths can score identically (same token multiset in a
        // different order); fall back to the edge sequence so the order is
        // a deterministic total one.
        .then_with(|| a.1.cmp(b.1))
}

fn to_tokenization(lat: &Lattice, score: f64, path: &[usize]) -> Tokenization {
    Tokenization {
        word_ids: path.iter().map(|&e| lat.edges[e].word_id).collect(),
        logprob: score,
    }
}

/// Forward max scores: `best[i]` is the best path log-prob from 0 to `i`.
fn forward_best(lat: &Lattice, word_logprobs: &[f64]) -> Vec<f64> {
    let n = lat.num_chars();
    let mut best = vec![f64::NEG_INFINITY; n + 1];
    best[0] = 0.0;
    for pos in 1..=n {
        for &e in &lat.ending_at[pos] {
            let cand = best[lat.edges[e].start] + lat.edge_logprob(e, word_logprobs);
            if cand > best[pos] {
                best[pos] = cand;
            }
        }
    }
    best
}

// Backward A* search state. Paths are linked lists shared through Rc so the
// frontier stays cheap to expand; `pos` is how far back toward 0 the suffix
// reaches.
struct Suffix {
    edge: usize,
    rest: Option<Rc<Suffix>>,
}

struct QueueItem {
    /// g(x) + h(x): suffix cost from `pos` to the end plus the exact best
    /// forward score up to `pos`. With this heuristic complete paths pop in
    /// non-increasing score order.
    priority: f64,
    g: f64,
    pos: usize,
    suffix: Rc<Suffix>,
}

impl PartialEq for QueueItem {
    fn eq(&self, other: &Self) -> bool {
        self.priority == other.priority
    }
}
impl Eq for QueueItem {}
impl PartialOrd for QueueItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueueItem {
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority.total_cmp(&other.priority)
    }
}

fn suffix_to_path(suffix: &Rc<Suffix>) -> Vec<usize> {
    let mut path = Vec::new();
    let mut cur = Some(suffix.clone());
    while let Some(node) = cur {
        path.push(node.edge);
        cur = node.rest.clone();
    }
    path
}

/// The `min(N, M)` highest-probability segmentations, sorted.
///
/// Exact by construction: the A* heuristic is the forward best score, so
/// complete paths are produced in non-increasing order and the result equals
/// the brute-force top-N.
pub fn nbest(lat: &Lattice, word_logprobs: &[f64], n_best: usize) -> Result<Vec<Tokenization>> {
    assert!(n_best >= 1, "n_best must be >= 1");
    let n = lat.num_chars();
    let best = forward_best(lat, word_logprobs);
    if best[n] == f64::NEG_INFINITY {
        return Err(Error::NoPath(lat.sentence.clone()));
    }
    let mut heap = BinaryHeap::new();
    for &e in &lat.ending_at[n] {
        let g = lat.edge_logprob(e, word_logprobs);
        let pos = lat.edges[e].start;
        if best[pos] > f64::NEG_INFINITY {
            heap.push(QueueItem {
                priority: g + best[pos],
                g,
                pos,
                suffix: Rc::new(Suffix {
                    edge: e,
                    rest: None,
                }),
            });
        }
    }
    // Collect a few beyond N so exact ties can be re-ordered by the
    // deterministic tie-break before truncating.
    let cap = n_best.saturating_mul(4) + 16;
    let mut complete: Vec<(f64, Vec<usize>)> = Vec::new();
    let mut nth_score = f64::NEG_INFINITY;
    while let Some(item) = heap.pop() {
        if complete.len() >= n_best && item.priority < nth_score - 1e-12 {
            break;
        }
        if item.pos == 0 {
            let path = suffix_to_path(&item.suffix);
            // Re-sum left to right so a path's score is bit-identical no
            // matter which direction accumulated it (the backward order used
            // by the search can differ in the last ulp).
            let score = path
                .iter()
                .fold(0.0, |s, &e| s + lat.edge_logprob(e, word_logprobs));
            complete.push((score, path));
            if complete.len() == n_best {
                nth_score = item.g;
            }
            if complete.len() >= cap {
                break;
            }
            continue;
        }
        for &e in &lat.ending_at[item.pos] {
            let g = item.g + lat.edge_logprob(e, word_logprobs);
            let pos = lat.edges[e].start;
            if best[pos] > f64::NEG_INFINITY && g > f64::NEG_INFINITY {
                heap.push(QueueItem {
                    priority: g + best[pos],
                    g,
                    pos,
                    suffix: Rc::new(Suffix {
                        edge: e,
                        rest: Some(item.suffix.clone()),
                    }),
                });
            }
        }
    }
    complete.sort_by(|a, b| cmp_paths(lat, (a.0, &a.1), (b.0, &b.1)));
    complete.truncate(n_best);
    Ok(complete
        .iter()
        .map(|(score, path)| to_tokenization(lat, *score, path))
        .collect())
}

/// The maximum-logprob segmentation (ties broken as in [`nbest`]).
pub fn viterbi(lat: &Lattice, word_logprobs: &[f64]) -> Result<Tokenization> {
    Ok(nbest(lat, word_logprobs, 1)?.pop().expect("nbest(1) is non-empty"))
}

/// Forward log-normalizer: `log Σ_s' exp(alpha · logprob(s'))` over all
/// segmentations. `NEG_INFINITY` edge log-probs are treated as absent edges,
/// and the result is `NEG_INFINITY` when no path survives.
pub fn forward_log_z(lat: &Lattice, word_logprobs: &[f64], alpha: f64) -> f64 {
    forward_filter(lat, word_logprobs, alpha)[lat.num_chars()]
}

fn forward_filter(lat: &Lattice, word_logprobs: &[f64], alpha: f64) -> Vec<f64> {
    let n = lat.num_chars();
    let mut fwd = vec![f64::NEG_INFINITY; n + 1];
    fwd[0] = 0.0;
    for pos in 1..=n {
        for &e in &lat.ending_at[pos] {
            let lp = lat.edge_logprob(e, word_logprobs);
            if lp == f64::NEG_INFINITY {
                continue;
            }
            fwd[pos] = lse2(fwd[pos], fwd[lat.edges[e].start] + alpha * lp);
        }
    }
    fwd
}

/// Draws one segmentation with probability
/// `exp(alpha·logprob(s') − forward_log_z)`, by forward filtering and
/// backward sampling. Edge-wise tempering is exact because
/// `p(s')^alpha = Π p(w)^alpha`.
pub fn ffbs_sample<R: Rng>(
    lat: &Lattice,
    word_logprobs: &[f64],
    alpha: f64,
    rng: &mut R,
) -> Result<Tokenization> {
    let n = lat.num_chars();
    let fwd = forward_filter(lat, word_logprobs, alpha);
    if fwd[n] == f64::NEG_INFINITY {
        return Err(Error::NoPath(lat.sentence.clone()));
    }
    let mut ids_rev = Vec::new();
    let mut logprob = 0.0;
    let mut pos = n;
    while pos > 0 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = None;
        for &e in &lat.ending_at[pos] {
            let lp = lat.edge_logprob(e, word_logprobs);
            if lp == f64::NEG_INFINITY {
                continue;
            }
            acc += (fwd[lat.edges[e].start] + alpha * lp - fwd[pos]).exp();
            if u < acc {
                chosen = Some(e);
                break;
            }
        }
        // Rounding can leave a sliver above acc; fall back to the last
        // admissible edge.
        let e = chosen.unwrap_or_else(|| {
            *lat.ending_at[pos]
                .iter()
                .rev()
                .find(|&&e| lat.edge_logprob(e, word_logprobs) > f64::NEG_INFINITY)
                .expect("position reachable in forward pass")
        });
        ids_rev.push(lat.edges[e].word_id);
        logprob += lat.edge_logprob(e, word_logprobs);
        pos = lat.edges[e].start;
    }
    ids_rev.reverse();
    Ok(Tokenization {
        word_ids: ids_rev,
        logprob,
    })
}

/// Draws from the K-best list with probability
/// `p(s'_k)^alpha / Σ_{j≤K} p(s'_j)^alpha`.
pub fn kbest_sample<R: Rng>(
    lat: &Lattice,
    word_logprobs: &[f64],
    alpha: f64,
    k: usize,
    rng: &mut R,
) -> Result<Tokenization> {
    assert!(k >= 1, "k must be >= 1");
    let cands = nbest(lat, word_logprobs, k)?;
    let max = cands
        .iter()
        .map(|c| alpha * c.logprob)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = cands.iter().map(|c| (alpha * c.logprob - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (cand, w) in cands.iter().zip(&weights) {
        acc += w;
        if u < acc {
            return Ok(cand.clone());
        }
    }
    Ok(cands.last().expect("nbest returns at least one path").clone())
}

/// Posterior expected count of every edge under the path distribution
/// `p(s') / Z`, plus `log Z`. Forward-backward in log-space; used by the
/// EM vocabulary seeding and by tokenization telemetry.
pub fn edge_posteriors(lat: &Lattice, word_logprobs: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = lat.num_chars();
    let fwd = forward_filter(lat, word_logprobs, 1.0);
    if fwd[n] == f64::NEG_INFINITY {
        return Err(Error::NoPath(lat.sentence.clone()));
    }
    let mut bwd = vec![f64::NEG_INFINITY; n + 1];
    bwd[n] = 0.0;
    for pos in (0..n).rev() {
        for &e in &lat.starting_at[pos] {
            let lp = lat.edge_logprob(e, word_logprobs);
            if lp == f64::NEG_INFINITY {
                continue;
            }
            bwd[pos] = lse2(bwd[pos], lp + bwd[lat.edges[e].end]);
        }
    }
    let log_z = fwd[n];
    let posteriors = lat
        .edges
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let lp = lat.edge_logprob(i, word_logprobs);
            (fwd[e.start] + lp + bwd[e.end] - log_z).exp()
        })
        .collect();
    Ok((posteriors, log_z))
}

pub const ENUMERATION_CAP: usize = 1_000_000;

/// Every segmentation, sorted like [`nbest`]. Brute-force test oracle;
/// errors with "oracle blowup" past [`ENUMERATION_CAP`] paths.
pub fn enumerate_all(lat: &Lattice, word_logprobs: &[f64]) -> Result<Vec<Tokenization>> {
    let mut paths: Vec<(f64, Vec<usize>)> = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    fn walk(
        lat: &Lattice,
        word_logprobs: &[f64],
        pos: usize,
        score: f64,
        stack: &mut Vec<usize>,
        paths: &mut Vec<(f64, Vec<usize>)>,
    ) -> Result<()> {
        if pos == lat.num_chars() {
            if paths.len() >= ENUMERATION_CAP {
                return Err(Error::OracleBlowup(ENUMERATION_CAP));
            }
            paths.push((score, stack.clone()));
            return Ok(());
        }
        for &e in &lat.starting_at[pos] {
            stack.push(e);
            walk(
                lat,
                word_logprobs,
                lat.edges[e].end,
                score + lat.edge_logprob(e, word_logprobs),
                stack,
                paths,
            )?;
            stack.pop();
        }
        Ok(())
    }
    walk(lat, word_logprobs, 0, 0.0, &mut stack, &mut paths)?;
    if paths.is_empty() {
        return Err(Error::NoPath(lat.sentence.clone()));
    }
    paths.sort_by(|a, b| cmp_paths(lat, (a.0, &a.1), (b.0, &b.1)));
    Ok(paths
        .iter()
        .map(|(score, path)| to_tokenization(lat, *score, path))
        .collect())
}
