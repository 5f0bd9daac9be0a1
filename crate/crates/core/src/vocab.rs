//! Predicate vocabulary and the pattern-space mappings.
//!
//! A predicate carries an actional pattern, a spatial pattern, or one of each.
//! Scores move between predicate space and the two pattern spaces through a
//! pair of linear maps: dual-pattern predicates average their two pattern
//! scores, and a pattern recovers its score as the mean over the predicates
//! that contain it. Both directions are exactly representable as constant
//! matrices, which is how the training graph consumes them.

use std::fs;
use std::path::Path;

use crate::error::{DllError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Predicate {
    pub name: String,
    pub actional: Option<usize>,
    pub spatial: Option<usize>,
    pub train_frequency: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredicateVocabulary {
    predicates: Vec<Predicate>,
    actional: Vec<String>,
    spatial: Vec<String>,
}

impl PredicateVocabulary {
    pub fn new(
        predicates: Vec<Predicate>,
        actional: Vec<String>,
        spatial: Vec<String>,
    ) -> Result<Self> {
        let v = PredicateVocabulary {
            predicates,
            actional,
            spatial,
        };
        v.validate()?;
        Ok(v)
    }

    fn validate(&self) -> Result<()> {
        if self.predicates.is_empty() {
            return Err(DllError::InvalidVocabulary("no predicates".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for p in &self.predicates {
            if p.name.is_empty() {
                return Err(DllError::InvalidVocabulary("empty predicate name".into()));
            }
            if !seen.insert(&p.name) {
                return Err(DllError::InvalidVocabulary(format!(
                    "duplicate predicate name '{}'",
                    p.name
                )));
            }
            if p.actional.is_none() && p.spatial.is_none() {
                return Err(DllError::InvalidVocabulary(format!(
                    "predicate '{}' has neither an actional nor a spatial pattern",
                    p.name
                )));
            }
            if let Some(a) = p.actional {
                if a >= self.actional.len() {
                    return Err(DllError::InvalidVocabulary(format!(
                        "predicate '{}' references actional pattern {a} but only {} exist",
                        p.name,
                        self.actional.len()
                    )));
                }
            }
            if let Some(s) = p.spatial {
                if s >= self.spatial.len() {
                    return Err(DllError::InvalidVocabulary(format!(
                        "predicate '{}' references spatial pattern {s} but only {} exist",
                        p.name,
                        self.spatial.len()
                    )));
                }
            }
        }
        for (role, names) in [("actional", &self.actional), ("spatial", &self.spatial)] {
            let mut seen = std::collections::HashSet::new();
            for n in names {
                if n.is_empty() || !seen.insert(n) {
                    return Err(DllError::InvalidVocabulary(format!(
                        "empty or duplicate {role} pattern name '{n}'"
                    )));
                }
            }
        }
        for (c, name) in self.actional.iter().enumerate() {
            if !self.predicates.iter().any(|p| p.actional == Some(c)) {
                return Err(DllError::InvalidVocabulary(format!(
                    "actional pattern '{name}' is used by no predicate"
                )));
            }
        }
        for (c, name) in self.spatial.iter().enumerate() {
            if !self.predicates.iter().any(|p| p.spatial == Some(c)) {
                return Err(DllError::InvalidVocabulary(format!(
                    "spatial pattern '{name}' is used by no predicate"
                )));
            }
        }
        Ok(())
    }

    pub fn n_p(&self) -> usize {
        self.predicates.len()
    }

    pub fn n_a(&self) -> usize {
        self.actional.len()
    }

    pub fn n_s(&self) -> usize {
        self.spatial.len()
    }

    pub fn predicate(&self, j: usize) -> &Predicate {
        &self.predicates[j]
    }

    pub fn predicates(&self) -> &[Predicate] {
        &self.predicates
    }

    pub fn actional_names(&self) -> &[String] {
        &self.actional
    }

    pub fn spatial_names(&self) -> &[String] {
        &self.spatial
    }

    pub fn is_dual(&self, j: usize) -> bool {
        self.predicates[j].actional.is_some() && self.predicates[j].spatial.is_some()
    }

    /// Predicate scores from pattern scores. Dual predicates average their two
    /// pattern entries; single-pattern predicates pass theirs through.
    pub fn map_to_predicates(&self, p_a: &[f64], p_s: &[f64]) -> Result<Vec<f64>> {
        if p_a.len() != self.n_a() || p_s.len() != self.n_s() {
            return Err(DllError::ShapeMismatch {
                op: "map_to_predicates",
                detail: format!(
                    "got {} actional / {} spatial scores, vocabulary has {} / {}",
                    p_a.len(),
                    p_s.len(),
                    self.n_a(),
                    self.n_s()
                ),
            });
        }
        Ok(self
            .predicates
            .iter()
            .map(|p| match (p.actional, p.spatial) {
                (Some(a), Some(s)) => 0.5 * (p_a[a] + p_s[s]),
                (Some(a), None) => p_a[a],
                (None, Some(s)) => p_s[s],
                (None, None) => unreachable!("validated at construction"),
            })
            .collect())
    }

    /// Pattern scores from predicate scores: each pattern takes the mean over
    /// the predicates containing it. Exact inverse of `map_to_predicates` on
    /// vocabularies where every predicate is single-pattern.
    pub fn map_to_patterns(&self, p: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if p.len() != self.n_p() {
            return Err(DllError::ShapeMismatch {
                op: "map_to_patterns",
                detail: format!("got {} predicate scores, vocabulary has {}", p.len(), self.n_p()),
            });
        }
        let mut p_a = vec![0.0; self.n_a()];
        let mut count_a = vec![0usize; self.n_a()];
        let mut p_s = vec![0.0; self.n_s()];
        let mut count_s = vec![0usize; self.n_s()];
        for (j, pred) in self.predicates.iter().enumerate() {
            if let Some(a) = pred.actional {
                p_a[a] += p[j];
                count_a[a] += 1;
            }
            if let Some(s) = pred.spatial {
                p_s[s] += p[j];
                count_s[s] += 1;
            }
        }
        for (v, c) in p_a.iter_mut().zip(&count_a) {
            *v /= *c as f64; // counts are >= 1 by validation
        }
        for (v, c) in p_s.iter_mut().zip(&count_s) {
            *v /= *c as f64;
        }
        Ok((p_a, p_s))
    }

    /// Constant matrices `(Ma, Ms)` with `p = p_a * Ma + p_s * Ms` (row-vector
    /// convention), matching `map_to_predicates` to round-off.
    pub fn map_matrices(&self) -> (Tensor, Tensor) {
        let mut ma = Tensor::zeros(&[self.n_a(), self.n_p()]);
        let mut ms = Tensor::zeros(&[self.n_s(), self.n_p()]);
        let n_p = self.n_p();
        for (j, pred) in self.predicates.iter().enumerate() {
            let w = if self.is_dual(j) { 0.5 } else { 1.0 };
            if let Some(a) = pred.actional {
                ma.data_mut()[a * n_p + j] = w;
            }
            if let Some(s) = pred.spatial {
                ms.data_mut()[s * n_p + j] = w;
            }
        }
        (ma, ms)
    }

    /// Constant matrices `(Ia, Is)` with `(p_a, p_s) = (p * Ia, p * Is)`,
    /// matching `map_to_patterns` to round-off.
    pub fn inverse_map_matrices(&self) -> (Tensor, Tensor) {
        let mut count_a = vec![0usize; self.n_a()];
        let mut count_s = vec![0usize; self.n_s()];
        for pred in &self.predicates {
            if let Some(a) = pred.actional {
                count_a[a] += 1;
            }
            if let Some(s) = pred.spatial {
                count_s[s] += 1;
            }
        }
        let mut ia = Tensor::zeros(&[self.n_p(), self.n_a()]);
        let mut is = Tensor::zeros(&[self.n_p(), self.n_s()]);
        let (n_a, n_s) = (self.n_a(), self.n_s());
        for (j, pred) in self.predicates.iter().enumerate() {
            if let Some(a) = pred.actional {
                ia.data_mut()[j * n_a + a] = 1.0 / count_a[a] as f64;
            }
            if let Some(s) = pred.spatial {
                is.data_mut()[j * n_s + s] = 1.0 / count_s[s] as f64;
            }
        }
        (ia, is)
    }

    /// The transfer header for predicate `k`: the most frequent other predicate
    /// sharing at least one pattern id with `k` (either role), provided it is
    /// strictly more frequent than `k`. Ties break toward the lower index.
    pub fn header_for(&self, k: usize) -> Option<usize> {
        let pk = &self.predicates[k];
        let mut best: Option<usize> = None;
        for (j, pj) in self.predicates.iter().enumerate() {
            if j == k {
                continue;
            }
            let shares = (pk.actional.is_some() && pk.actional == pj.actional)
                || (pk.spatial.is_some() && pk.spatial == pj.spatial);
            if !shares {
                continue;
            }
            match best {
                None => best = Some(j),
                Some(b) => {
                    if pj.train_frequency > self.predicates[b].train_frequency {
                        best = Some(j);
                    }
                }
            }
        }
        best.filter(|&b| self.predicates[b].train_frequency > pk.train_frequency)
    }

    /// `header_for` evaluated over the whole vocabulary.
    pub fn headers(&self) -> Vec<Option<usize>> {
        (0..self.n_p()).map(|k| self.header_for(k)).collect()
    }

    /// Tab-separated serialization: `name  actional|-  spatial|-  count`.
    pub fn to_file_string(&self) -> String {
        let mut out = String::from("# name\tactional\tspatial\ttrain_count\n");
        for p in &self.predicates {
            let a = p.actional.map_or("-", |a| self.actional[a].as_str());
            let s = p.spatial.map_or("-", |s| self.spatial[s].as_str());
            out.push_str(&format!("{}\t{}\t{}\t{}\n", p.name, a, s, p.train_frequency));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    /// Parse the tab-separated format. Pattern ids are assigned by first
    /// appearance; `#` starts a comment line.
    pub fn from_file_string(text: &str, path: &str) -> Result<Self> {
        let mut predicates = Vec::new();
        let mut actional: Vec<String> = Vec::new();
        let mut spatial: Vec<String> = Vec::new();
        let intern = |names: &mut Vec<String>, name: &str| -> usize {
            match names.iter().position(|n| n == name) {
                Some(i) => i,
                None => {
                    names.push(name.to_string());
                    names.len() - 1
                }
            }
        };
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(DllError::Parse {
                    path: path.to_string(),
                    line: lineno + 1,
                    message: format!("expected 4 tab-separated fields, got {}", fields.len()),
                });
            }
            let a = match fields[1] {
                "-" => None,
                name => Some(intern(&mut actional, name)),
            };
            let s = match fields[2] {
                "-" => None,
                name => Some(intern(&mut spatial, name)),
            };
            let freq: u64 = fields[3].parse().map_err(|_| DllError::Parse {
                path: path.to_string(),
                line: lineno + 1,
                message: format!("bad train count '{}'", fields[3]),
            })?;
            predicates.push(Predicate {
                name: fields[0].to_string(),
                actional: a,
                spatial: s,
                train_frequency: freq,
            });
        }
        PredicateVocabulary::new(predicates, actional, spatial)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_file_string(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(name: &str, a: Option<usize>, s: Option<usize>, f: u64) -> Predicate {
        Predicate {
            name: name.into(),
            actional: a,
            spatial: s,
            train_frequency: f,
        }
    }

    fn small_vocab() -> PredicateVocabulary {
        // A: dual (a0, s0); B: actional-only (a0); C: spatial-only (s0).
        PredicateVocabulary::new(
            vec![
                pred("A", Some(0), Some(0), 10),
                pred("B", Some(0), None, 5),
                pred("C", None, Some(0), 1),
            ],
            vec!["a0".into()],
            vec!["s0".into()],
        )
        .unwrap()
    }

    #[test]
    fn rejects_predicate_with_no_patterns() {
        let err = PredicateVocabulary::new(
            vec![pred("bad", None, None, 1)],
            vec![],
            vec![],
        )
        .unwrap_err();
        assert!(err.to_string().contains("bad"));
    }

    #[test]
    fn rejects_unreferenced_pattern() {
        let err = PredicateVocabulary::new(
            vec![pred("A", Some(0), None, 1)],
            vec!["a0".into(), "fly".into()],
            vec![],
        )
        .unwrap_err();
        assert!(err.to_string().contains("fly"));
    }

    #[test]
    fn rejects_duplicate_predicate_names() {
        let err = PredicateVocabulary::new(
            vec![pred("A", Some(0), None, 1), pred("A", Some(0), None, 2)],
            vec!["a0".into()],
            vec![],
        )
        .unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn dual_predicate_averages_its_patterns() {
        let v = small_vocab();
        let p = v.map_to_predicates(&[0.9], &[0.5]).unwrap();
        assert!((p[0] - 0.7).abs() < 1e-15); // (0.9 + 0.5) / 2
        assert_eq!(p[1], 0.9); // passthrough
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn constant_vectors_are_preserved_both_ways() {
        let v = small_vocab();
        let p = v.map_to_predicates(&[0.3], &[0.3]).unwrap();
        assert!(p.iter().all(|&x| (x - 0.3).abs() < 1e-15));
        let (pa, ps) = v.map_to_patterns(&[0.3, 0.3, 0.3]).unwrap();
        assert!((pa[0] - 0.3).abs() < 1e-15 && (ps[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn pattern_recovery_is_group_mean() {
        let v = small_vocab();
        let (pa, ps) = v.map_to_patterns(&[0.2, 0.4, 0.6]).unwrap();
        assert!((pa[0] - 0.3).abs() < 1e-15); // mean(A, B)
        assert!((ps[0] - 0.4).abs() < 1e-15); // mean(A, C)
    }

    #[test]
    fn both_maps_are_linear() {
        let v = small_vocab();
        let (x_a, x_s) = ([0.1], [0.9]);
        let (y_a, y_s) = ([0.7], [0.2]);
        let (alpha, beta) = (0.6, 1.7);
        let mixed_a = [alpha * x_a[0] + beta * y_a[0]];
        let mixed_s = [alpha * x_s[0] + beta * y_s[0]];
        let lhs = v.map_to_predicates(&mixed_a, &mixed_s).unwrap();
        let px = v.map_to_predicates(&x_a, &x_s).unwrap();
        let py = v.map_to_predicates(&y_a, &y_s).unwrap();
        for j in 0..3 {
            assert!((lhs[j] - (alpha * px[j] + beta * py[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn matrix_forms_match_direct_maps() {
        let v = PredicateVocabulary::new(
            vec![
                pred("p0", Some(0), Some(1), 4),
                pred("p1", Some(1), Some(0), 3),
                pred("p2", Some(0), None, 2),
                pred("p3", None, Some(1), 1),
            ],
            vec!["a0".into(), "a1".into()],
            vec!["s0".into(), "s1".into()],
        )
        .unwrap();
        let (ma, ms) = v.map_matrices();
        let (ia, is) = v.inverse_map_matrices();
        let p_a = [0.11, 0.93];
        let p_s = [0.45, 0.08];
        let direct = v.map_to_predicates(&p_a, &p_s).unwrap();
        for j in 0..4 {
            let via: f64 = (0..2).map(|c| p_a[c] * ma.at(c, j)).sum::<f64>()
                + (0..2).map(|c| p_s[c] * ms.at(c, j)).sum::<f64>();
            assert!((via - direct[j]).abs() < 1e-12);
        }
        let (da, ds) = v.map_to_patterns(&direct).unwrap();
        for c in 0..2 {
            let via_a: f64 = (0..4).map(|j| direct[j] * ia.at(j, c)).sum();
            let via_s: f64 = (0..4).map(|j| direct[j] * is.at(j, c)).sum();
            assert!((via_a - da[c]).abs() < 1e-12);
            assert!((via_s - ds[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_pattern_vocab_round_trips_exactly() {
        let v = PredicateVocabulary::new(
            vec![pred("x", Some(0), None, 1), pred("y", None, Some(0), 1)],
            vec!["a0".into()],
            vec!["s0".into()],
        )
        .unwrap();
        let p = v.map_to_predicates(&[0.62], &[0.31]).unwrap();
        let (pa, ps) = v.map_to_patterns(&p).unwrap();
        assert_eq!((pa[0], ps[0]), (0.62, 0.31));
    }

    #[test]
    fn header_prefers_most_frequent_sharer() {
        let v = PredicateVocabulary::new(
            vec![
                pred("sit_above", Some(0), Some(0), 900),
                pred("stand_above", Some(1), Some(0), 50),
                pred("jump_above", Some(2), Some(0), 10),
                pred("isolated", Some(3), None, 700),
            ],
            vec!["sit".into(), "stand".into(), "jump".into(), "walk".into()],
            vec!["above".into()],
        )
        .unwrap();
        assert_eq!(v.header_for(2), Some(0));
        assert_eq!(v.header_for(1), Some(0));
        assert_eq!(v.header_for(0), None); // nothing more frequent shares a pattern
        assert_eq!(v.header_for(3), None); // shares with nobody
    }

    #[test]
    fn header_tie_breaks_to_lower_index() {
        let v = PredicateVocabulary::new(
            vec![
                pred("a", Some(0), None, 7),
                pred("b", Some(0), None, 7),
                pred("c", Some(0), None, 2),
            ],
            vec!["a0".into()],
            vec![],
        )
        .unwrap();
        assert_eq!(v.header_for(2), Some(0));
    }

    #[test]
    fn file_round_trip_preserves_structure() {
        let v = small_vocab();
        let text = v.to_file_string();
        let back = PredicateVocabulary::from_file_string(&text, "mem").unwrap();
        assert_eq!(v, back);
        assert_eq!(back.to_file_string(), text);
    }

    #[test]
    fn parse_error_reports_line_number() {
        let text = "# comment\nok\ta0\t-\t3\nbroken line\n";
        let err = PredicateVocabulary::from_file_string(text, "vocab.tsv").unwrap_err();
        assert!(err.to_string().contains("vocab.tsv:3"), "{err}");
    }
}
