//! Segment records, JSONL storage, and the synthetic long-tail benchmark
//! generator with its exact label-probability oracle.
//!
//! Generation is deterministic given the seed, with a fixed per-record draw
//! order (primary class, actional coins, spatial coins, feature noise) so the
//! stream consumes the same number of RNG values regardless of outcomes.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DllError, Result};
use crate::vocab::{Predicate, PredicateVocabulary};

/// One labeled sample: a feature vector and the set of active class indices.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SegmentRecord {
    pub id: String,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

/// Load newline-delimited JSON records, validating against the class count.
pub fn load_records(path: &Path, n_p: usize) -> Result<Vec<SegmentRecord>> {
    let file = fs::File::open(path).map_err(|e| DllError::Parse {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut width: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let parse_err = |message: String| DllError::Parse {
            path: path.display().to_string(),
            line: lineno,
            message,
        };
        let line = line.map_err(|e| parse_err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SegmentRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if rec.labels.is_empty() {
            return Err(parse_err(format!("record '{}' has no labels", rec.id)));
        }
        let mut seen = BTreeSet::new();
        for &l in &rec.labels {
            if l >= n_p {
                return Err(parse_err(format!(
                    "record '{}' label {l} out of range for {n_p} classes",
                    rec.id
                )));
            }
            if !seen.insert(l) {
                return Err(parse_err(format!("record '{}' repeats label {l}", rec.id)));
            }
        }
        match width {
            None => width = Some(rec.features.len()),
            Some(w) if w != rec.features.len() => {
                return Err(parse_err(format!(
                    "record '{}' has {} features, earlier records have {w}",
                    rec.id,
                    rec.features.len()
                )));
            }
            Some(_) => {}
        }
        if rec.features.is_empty() {
            return Err(parse_err(format!("record '{}' has no features", rec.id)));
        }
        if rec.features.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(format!(
                "record '{}' has a non-finite feature",
                rec.id
            )));
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(DllError::Parse {
            path: path.display().to_string(),
            line: 0,
            message: "no records".into(),
        });
    }
    Ok(records)
}

pub fn save_records(path: &Path, records: &[SegmentRecord]) -> Result<()> {
    let mut out = Vec::new();
    for rec in records {
        serde_json::to_writer(&mut out, rec).map_err(|e| DllError::Checkpoint(e.to_string()))?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// A predicate table: per predicate, optional actional and spatial pattern
/// ids. Entries must be unique as pairs.
pub type PatternTable = Vec<(Option<usize>, Option<usize>)>;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_a: usize,
    pub n_s: usize,
    pub table: PatternTable,
    /// Feature width.
    pub d: usize,
    /// Rank exponent of the primary-class draw.
    pub zipf_s: f64,
    pub noise_sigma: f64,
    /// Chance that a pattern outside the primary predicate's own set fires.
    pub extra_pattern_prob: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub data_seed: u64,
}

impl SyntheticConfig {
    pub fn with_table(n_a: usize, n_s: usize, table: PatternTable) -> Self {
        SyntheticConfig {
            n_a,
            n_s,
            table,
            d: 64,
            zipf_s: 1.5,
            noise_sigma: 0.6,
            extra_pattern_prob: 0.07,
            n_train: 20_000,
            n_test: 4_000,
            data_seed: 0,
        }
    }

    pub fn default_for(n_a: usize, n_s: usize, n_p: usize) -> Result<Self> {
        Ok(Self::with_table(n_a, n_s, default_table(n_a, n_s, n_p)?))
    }

    pub fn n_p(&self) -> usize {
        self.table.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_a == 0 || self.n_s == 0 || self.d == 0 {
            return Err(DllError::InvalidConfig(
                "pattern counts and feature width must be positive".into(),
            ));
        }
        if self.table.is_empty() {
            return Err(DllError::InvalidConfig("empty predicate table".into()));
        }
        if !(self.zipf_s.is_finite() && self.zipf_s >= 0.0) {
            return Err(DllError::InvalidConfig(format!(
                "zipf_s must be finite and non-negative, got {}",
                self.zipf_s
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(DllError::InvalidConfig(format!(
                "noise_sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.extra_pattern_prob) {
            return Err(DllError::InvalidConfig(format!(
                "extra_pattern_prob must be in [0, 1], got {}",
                self.extra_pattern_prob
            )));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(DllError::InvalidConfig(
                "n_train and n_test must be positive".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for (j, &(a, s)) in self.table.iter().enumerate() {
            if a.is_none() && s.is_none() {
                return Err(DllError::InvalidConfig(format!(
                    "table entry {j} has no patterns"
                )));
            }
            if let Some(a) = a {
                if a >= self.n_a {
                    return Err(DllError::InvalidConfig(format!(
                        "table entry {j}: actional id {a} out of range for {}",
                        self.n_a
                    )));
                }
            }
            if let Some(s) = s {
                if s >= self.n_s {
                    return Err(DllError::InvalidConfig(format!(
                        "table entry {j}: spatial id {s} out of range for {}",
                        self.n_s
                    )));
                }
            }
            if !seen.insert((a, s)) {
                return Err(DllError::InvalidConfig(format!(
                    "table entries collide: {:?} appears more than once (entry {j})",
                    (a, s)
                )));
            }
        }
        Ok(())
    }
}

/// Latent pattern state behind one record, kept out of the training path.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub primary: usize,
    pub actional: Vec<bool>,
    pub spatial: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: Vec<SegmentRecord>,
    pub test: Vec<SegmentRecord>,
    pub vocab: PredicateVocabulary,
    /// Test-set latents, index-aligned with `test`. Debug and probe use only.
    pub test_latents: Vec<LatentState>,
}

/// Rank-block predicate table: ranks map to actional ids in contiguous blocks
/// (head classes share actional patterns with mid-tail ones) while spatial ids
/// cycle. For 10 classes or more the last six entries are single-pattern
/// predicates, three per side.
pub fn default_table(n_a: usize, n_s: usize, n_p: usize) -> Result<PatternTable> {
    if n_a == 0 || n_s == 0 || n_p == 0 {
        return Err(DllError::InvalidConfig(
            "pattern and class counts must be positive".into(),
        ));
    }
    let singles = if n_p >= 10 { 6.min(n_a.min(3) + n_s.min(3)) } else { 0 };
    let n_duals = n_p - singles;
    if n_duals > n_a * n_s {
        return Err(DllError::InvalidConfig(format!(
            "cannot place {n_duals} distinct dual predicates on a {n_a} x {n_s} grid"
        )));
    }
    let mut table: PatternTable = Vec::with_capacity(n_p);
    let mut used = BTreeSet::new();
    for i in 0..n_duals {
        let mut a = i * n_a / n_duals;
        let mut s = i % n_s;
        // Nudge along the spatial axis on collision; the grid has room.
        while !used.insert((a, s)) {
            s = (s + 1) % n_s;
            if s == i % n_s {
                a = (a + 1) % n_a;
            }
        }
        table.push((Some(a), Some(s)));
    }
    for c in 0..n_a.min(3).min(singles) {
        table.push((Some(c), None));
    }
    for c in 0..singles.saturating_sub(n_a.min(3)) {
        table.push((None, Some(c)));
    }
    debug_assert_eq!(table.len(), n_p);
    Ok(table)
}

/// Zipf probabilities over ranks 0..n: rank r gets weight (r+1)^(-s).
pub fn zipf_weights(n: usize, s: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|r| ((r + 1) as f64).powf(-s)).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / z).collect()
}

/// Exact probability that class `j` is active in a generated record: the sum
/// over primary classes of the primary's weight times the chance that every
/// pattern of `j` fires (certain when the primary shares it, the extra-pattern
/// coin otherwise).
pub fn expected_label_probability(cfg: &SyntheticConfig, j: usize) -> f64 {
    let weights = zipf_weights(cfg.n_p(), cfg.zipf_s);
    let (ja, js) = cfg.table[j];
    let mut total = 0.0;
    for (prim, &w) in weights.iter().enumerate() {
        let (pa, ps) = cfg.table[prim];
        let mut prob = 1.0;
        if let Some(a) = ja {
            if pa != Some(a) {
                prob *= cfg.extra_pattern_prob;
            }
        }
        if let Some(s) = js {
            if ps != Some(s) {
                prob *= cfg.extra_pattern_prob;
            }
        }
        total += w * prob;
    }
    total
}

fn pattern_names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|c| format!("{prefix}{c}")).collect()
}

fn draw_record<R: Rng>(
    cfg: &SyntheticConfig,
    weights: &[f64],
    w_a: &[f64],
    w_s: &[f64],
    id: String,
    rng: &mut R,
) -> (SegmentRecord, LatentState) {
    let n_p = cfg.n_p();
    // Primary class by inverse CDF.
    let u: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    let mut primary = n_p - 1;
    for (j, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            primary = j;
            break;
        }
    }
    let (pa, ps) = cfg.table[primary];
    // Every coin is always drawn so the stream position is outcome-free.
    let mut actional = vec![false; cfg.n_a];
    for (c, slot) in actional.iter_mut().enumerate() {
        let coin: f64 = rng.random_range(0.0..1.0);
        *slot = pa == Some(c) || coin < cfg.extra_pattern_prob;
    }
    let mut spatial = vec![false; cfg.n_s];
    for (c, slot) in spatial.iter_mut().enumerate() {
        let coin: f64 = rng.random_range(0.0..1.0);
        *slot = ps == Some(c) || coin < cfg.extra_pattern_prob;
    }
    let mut features = vec![0.0; cfg.d];
    for (k, f) in features.iter_mut().enumerate() {
        let noise: f64 = StandardNormal.sample(rng);
        let mut v = cfg.noise_sigma * noise;
        for (c, &on) in actional.iter().enumerate() {
            if on {
                v += w_a[c * cfg.d + k];
            }
        }
        for (c, &on) in spatial.iter().enumerate() {
            if on {
                v += w_s[c * cfg.d + k];
            }
        }
        *f = v;
    }
    let labels: Vec<usize> = (0..n_p)
        .filter(|&j| {
            let (a, s) = cfg.table[j];
            a.is_none_or(|c| actional[c]) && s.is_none_or(|c| spatial[c])
        })
        .collect();
    debug_assert!(labels.contains(&primary));
    (
        SegmentRecord {
            id,
            features,
            labels,
        },
        LatentState {
            primary,
            actional,
            spatial,
        },
    )
}

/// Generate the benchmark: a Zipf-distributed primary class activates its
/// patterns, independent coins add extras, features are a fixed random linear
/// code of the active patterns plus Gaussian noise, and the labels are every
/// class whose full pattern set is active.
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let n_p = cfg.n_p();
    let weights = zipf_weights(n_p, cfg.zipf_s);

    let mut init_rng = ChaCha12Rng::seed_from_u64(cfg.data_seed.wrapping_mul(2).wrapping_add(1));
    let mut code = |n: usize| -> Vec<f64> {
        (0..n * cfg.d)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut init_rng);
                v / (cfg.d as f64).sqrt()
            })
            .collect()
    };
    let w_a = code(cfg.n_a);
    let w_s = code(cfg.n_s);

    let mut train_rng = ChaCha12Rng::seed_from_u64(cfg.data_seed.wrapping_mul(2));
    let mut train = Vec::with_capacity(cfg.n_train);
    let mut freq = vec![0u64; n_p];
    for i in 0..cfg.n_train {
        let (rec, _) = draw_record(cfg, &weights, &w_a, &w_s, format!("train{i:05}"), &mut train_rng);
        for &l in &rec.labels {
            freq[l] += 1;
        }
        train.push(rec);
    }
    let mut test = Vec::with_capacity(cfg.n_test);
    let mut test_latents = Vec::with_capacity(cfg.n_test);
    for i in 0..cfg.n_test {
        let (rec, lat) = draw_record(cfg, &weights, &w_a, &w_s, format!("test{i:05}"), &mut train_rng);
        test.push(rec);
        test_latents.push(lat);
    }

    let predicates: Vec<Predicate> = cfg
        .table
        .iter()
        .enumerate()
        .map(|(j, &(a, s))| Predicate {
            name: format!("p{j:02}"),
            actional: a,
            spatial: s,
            train_frequency: freq[j],
        })
        .collect();
    let vocab = PredicateVocabulary::new(
        predicates,
        pattern_names("a", cfg.n_a),
        pattern_names("s", cfg.n_s),
    )?;

    Ok(SyntheticData {
        train,
        test,
        vocab,
        test_latents,
    })
}

/// Split class indices into head and tail: classes are ordered by descending
/// training frequency (ties toward the lower index) and the head is the
/// shortest prefix holding at least `quantile` of the total label mass.
pub fn head_tail_partition(
    frequencies: &[u64],
    quantile: f64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if frequencies.is_empty() {
        return Err(DllError::InvalidArgument {
            op: "head_tail_partition".into(),
            detail: "no classes".into(),
        });
    }
    if !(0.0..=1.0).contains(&quantile) {
        return Err(DllError::InvalidArgument {
            op: "head_tail_partition".into(),
            detail: format!("quantile must be in [0, 1], got {quantile}"),
        });
    }
    let total: u64 = frequencies.iter().sum();
    if total == 0 {
        return Err(DllError::InvalidArgument {
            op: "head_tail_partition".into(),
            detail: "all class frequencies are zero".into(),
        });
    }
    let mut order: Vec<usize> = (0..frequencies.len()).collect();
    order.sort_by_key(|&j| (std::cmp::Reverse(frequencies[j]), j));
    let target = quantile * total as f64;
    let mut head = Vec::new();
    let mut mass = 0u64;
    let mut it = order.iter();
    while (mass as f64) < target {
        match it.next() {
            Some(&j) => {
                head.push(j);
                mass += frequencies[j];
            }
            None => break,
        }
    }
    let tail: Vec<usize> = it.copied().collect();
    head.sort_unstable();
    let mut tail = tail;
    tail.sort_unstable();
    Ok((head, tail))
}
