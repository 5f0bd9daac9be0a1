//! Checkpoints: a text manifest (`.ckpt`) describing the run plus a raw
//! little-endian f64 blob (`.bin`) holding parameter values and optimizer
//! moments. Loading a checkpoint and continuing at the next epoch reproduces
//! the unbroken run bit for bit, because batch order is derived from the seed
//! and epoch number rather than carried RNG state.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::error::{DllError, Result};
use crate::params::ParameterSet;
use crate::tensor::Tensor;
use crate::vocab::PredicateVocabulary;

const FORMAT: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    /// Epochs fully completed; training resumes at this epoch index.
    pub epochs_done: usize,
    /// Global iteration counter (never resets across epochs).
    pub iteration: u64,
    /// Input feature width of the trained model.
    pub d: usize,
    pub vocab: PredicateVocabulary,
    pub model: ParameterSet,
    pub correlation: Option<ParameterSet>,
}

fn manifest_path(base: &Path) -> PathBuf {
    base.with_extension("ckpt")
}

fn blob_path(base: &Path) -> PathBuf {
    base.with_extension("bin")
}

struct ArrayEntry {
    set: &'static str,
    name: String,
    steps: u64,
    offset: usize,
    len: usize,
    dims: Vec<usize>,
}

fn push_set(
    set_label: &'static str,
    set: &ParameterSet,
    entries: &mut Vec<ArrayEntry>,
    blob: &mut Vec<f64>,
) {
    for p in set.iter() {
        let offset = blob.len();
        blob.extend_from_slice(p.value.data());
        blob.extend_from_slice(p.m.data());
        blob.extend_from_slice(p.v.data());
        entries.push(ArrayEntry {
            set: set_label,
            name: p.name.clone(),
            steps: p.steps,
            offset,
            len: p.value.len(),
            dims: p.value.shape().to_vec(),
        });
    }
}

impl Checkpoint {
    /// Write `<base>.ckpt` and `<base>.bin`.
    pub fn save(&self, base: &Path) -> Result<()> {
        let mut entries = Vec::new();
        let mut blob: Vec<f64> = Vec::new();
        push_set("model", &self.model, &mut entries, &mut blob);
        if let Some(cm) = &self.correlation {
            push_set("correlation", cm, &mut entries, &mut blob);
        }

        let mut manifest = String::new();
        manifest.push_str(&format!("format {FORMAT}\n"));
        manifest.push_str(&format!("epochs_done {}\n", self.epochs_done));
        manifest.push_str(&format!("iteration {}\n", self.iteration));
        manifest.push_str(&format!("d {}\n", self.d));
        manifest.push_str("config_begin\n");
        manifest.push_str(&self.config.to_file_string());
        manifest.push_str("config_end\n");
        manifest.push_str("vocab_begin\n");
        manifest.push_str(&self.vocab.to_file_string());
        manifest.push_str("vocab_end\n");
        for e in &entries {
            manifest.push_str(&format!(
                "param {} {} {} {} {}",
                e.set,
                e.steps,
                e.offset,
                e.len,
                e.dims.len()
            ));
            for d in &e.dims {
                manifest.push_str(&format!(" {d}"));
            }
            manifest.push_str(&format!(" {}\n", e.name));
        }
        manifest.push_str("end\n");
        fs::write(manifest_path(base), manifest)?;

        let mut bytes = Vec::with_capacity(blob.len() * 8);
        for v in &blob {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut file = fs::File::create(blob_path(base))?;
        file.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(base: &Path) -> Result<Checkpoint> {
        let mpath = manifest_path(base);
        let text = fs::read_to_string(&mpath)?;
        let label = mpath.display().to_string();
        let corrupt = |msg: String| DllError::Checkpoint(format!("{label}: {msg}"));

        let mut lines = text.lines();
        let mut epochs_done: Option<usize> = None;
        let mut iteration: Option<u64> = None;
        let mut d: Option<usize> = None;
        let mut config: Option<ExperimentConfig> = None;
        let mut vocab: Option<PredicateVocabulary> = None;
        let mut entries: Vec<ArrayEntry> = Vec::new();
        let mut saw_end = false;

        match lines.next() {
            Some(line) if line == format!("format {FORMAT}") => {}
            Some(line) => {
                return Err(corrupt(format!(
                    "unsupported format line '{line}' (expected 'format {FORMAT}')"
                )))
            }
            None => return Err(corrupt("empty manifest".into())),
        }

        while let Some(line) = lines.next() {
            let mut fields = line.split_whitespace();
            let Some(head) = fields.next() else { continue };
            match head {
                "epochs_done" | "iteration" | "d" => {
                    let value = fields
                        .next()
                        .ok_or_else(|| corrupt(format!("'{head}' missing its value")))?;
                    match head {
                        "epochs_done" => {
                            epochs_done = Some(value.parse().map_err(|_| {
                                corrupt(format!("bad epochs_done '{value}'"))
                            })?)
                        }
                        "iteration" => {
                            iteration = Some(
                                value
                                    .parse()
                                    .map_err(|_| corrupt(format!("bad iteration '{value}'")))?,
                            )
                        }
                        _ => {
                            d = Some(
                                value
                                    .parse()
                                    .map_err(|_| corrupt(format!("bad d '{value}'")))?,
                            )
                        }
                    }
                }
                "config_begin" => {
                    let mut body = String::new();
                    for inner in lines.by_ref() {
                        if inner == "config_end" {
                            break;
                        }
                        body.push_str(inner);
                        body.push('\n');
                    }
                    config = Some(ExperimentConfig::parse(&body, &label)?);
                }
                "vocab_begin" => {
                    let mut body = String::new();
                    for inner in lines.by_ref() {
                        if inner == "vocab_end" {
                            break;
                        }
                        body.push_str(inner);
                        body.push('\n');
                    }
                    vocab = Some(PredicateVocabulary::from_file_string(&body, &label)?);
                }
                "param" => {
                    let mut take = || {
                        fields
                            .next()
                            .ok_or_else(|| corrupt(format!("truncated param line '{line}'")))
                    };
                    let set = match take()? {
                        "model" => "model",
                        "correlation" => "correlation",
                        other => return Err(corrupt(format!("unknown parameter set '{other}'"))),
                    };
                    let steps: u64 = take()?
                        .parse()
                        .map_err(|_| corrupt(format!("bad steps in '{line}'")))?;
                    let offset: usize = take()?
                        .parse()
                        .map_err(|_| corrupt(format!("bad offset in '{line}'")))?;
                    let len: usize = take()?
                        .parse()
                        .map_err(|_| corrupt(format!("bad length in '{line}'")))?;
                    let rank: usize = take()?
                        .parse()
                        .map_err(|_| corrupt(format!("bad rank in '{line}'")))?;
                    let mut dims = Vec::with_capacity(rank);
                    for _ in 0..rank {
                        dims.push(
                            take()?
                                .parse()
                                .map_err(|_| corrupt(format!("bad dims in '{line}'")))?,
                        );
                    }
                    let rest: Vec<&str> = fields.collect();
                    if rest.is_empty() {
                        return Err(corrupt(format!("param line missing name: '{line}'")));
                    }
                    let name = rest.join(" ");
                    if dims.iter().product::<usize>() != len {
                        return Err(corrupt(format!(
                            "param '{name}': dims {dims:?} do not hold {len} values"
                        )));
                    }
                    entries.push(ArrayEntry {
                        set,
                        name,
                        steps,
                        offset,
                        len,
                        dims,
                    });
                }
                "end" => {
                    saw_end = true;
                    break;
                }
                other => return Err(corrupt(format!("unknown manifest entry '{other}'"))),
            }
        }
        if !saw_end {
            return Err(corrupt("manifest truncated (no 'end' line)".into()));
        }
        let epochs_done = epochs_done.ok_or_else(|| corrupt("missing epochs_done".into()))?;
        let iteration = iteration.ok_or_else(|| corrupt("missing iteration".into()))?;
        let d = d.ok_or_else(|| corrupt("missing d".into()))?;
        let config = config.ok_or_else(|| corrupt("missing config section".into()))?;
        let vocab = vocab.ok_or_else(|| corrupt("missing vocabulary section".into()))?;

        let bytes = fs::read(blob_path(base))?;
        if bytes.len() % 8 != 0 {
            return Err(corrupt(format!(
                "blob length {} is not a multiple of 8",
                bytes.len()
            )));
        }
        let blob: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let expected: usize = entries.iter().map(|e| 3 * e.len).sum();
        if blob.len() != expected {
            return Err(corrupt(format!(
                "blob holds {} values, manifest expects {expected}",
                blob.len()
            )));
        }

        let mut model = ParameterSet::new();
        let mut correlation: Option<ParameterSet> = None;
        for e in &entries {
            if e.offset + 3 * e.len > blob.len() {
                return Err(corrupt(format!("param '{}' overruns the blob", e.name)));
            }
            let slice = |at: usize| -> Result<Tensor> {
                let data = blob[at..at + e.len].to_vec();
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(corrupt(format!("param '{}' holds non-finite values", e.name)));
                }
                Tensor::from_vec(&e.dims, data)
            };
            let value = slice(e.offset)?;
            let m = slice(e.offset + e.len)?;
            let v = slice(e.offset + 2 * e.len)?;
            let set = if e.set == "model" {
                &mut model
            } else {
                correlation.get_or_insert_with(ParameterSet::new)
            };
            let idx = set.add(&e.name, value)?;
            let p = set.param_mut(idx);
            p.m = m;
            p.v = v;
            p.steps = e.steps;
        }

        Ok(Checkpoint {
            config,
            epochs_done,
            iteration,
            d,
            vocab,
            model,
            correlation,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticConfig};
    use crate::kdl::CorrelationMatrix;
    use crate::pdl::{ModelDims, PDLModel};
    use rand::SeedableRng;
    use tempfile::tempdir;

    fn sample() -> Checkpoint {
        let mut syn = SyntheticConfig::default_for(3, 2, 5).unwrap();
        syn.d = 4;
        syn.n_train = 50;
        syn.n_test = 10;
        let data = generate(&syn).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        let mut model = PDLModel::new(
            ModelDims {
                d: 4,
                h: 3,
                n_a: 3,
                n_s: 2,
            },
            &mut rng,
        )
        .unwrap();
        // Dirty the optimizer state so the round trip covers it.
        for (i, p) in model.params.params_mut().enumerate() {
            p.steps = i as u64 + 1;
            for (j, v) in p.m.data_mut().iter_mut().enumerate() {
                *v = (i + j) as f64 * 0.25;
            }
        }
        let cm = CorrelationMatrix::new(5).unwrap();
        let mut config = ExperimentConfig::default();
        config.data = crate::config::DataSource::Synthetic(syn);
        config.hidden = 3;
        Checkpoint {
            config,
            epochs_done: 12,
            iteration: 3751,
            d: 4,
            vocab: data.vocab,
            model: model.params,
            correlation: Some(cm.params().clone()),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let base = dir.path().join("epoch12");
        let ck = sample();
        ck.save(&base).unwrap();
        let loaded = Checkpoint::load(&base).unwrap();
        assert_eq!(loaded.epochs_done, 12);
        assert_eq!(loaded.iteration, 3751);
        assert_eq!(loaded.d, 4);
        assert_eq!(loaded.config, ck.config);
        assert_eq!(loaded.vocab.to_file_string(), ck.vocab.to_file_string());
        assert_eq!(loaded.model.len(), ck.model.len());
        for (a, b) in loaded.model.iter().zip(ck.model.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.steps, b.steps);
            assert_eq!(a.value.shape(), b.value.shape());
            assert_eq!(a.value.data(), b.value.data());
            assert_eq!(a.m.data(), b.m.data());
            assert_eq!(a.v.data(), b.v.data());
        }
        let cm = loaded.correlation.unwrap();
        assert_eq!(cm.len(), 1);
        assert_eq!(cm.get("cm").unwrap().value.shape(), &[5, 5]);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempdir().unwrap();
        let base = dir.path().join("ck");
        sample().save(&base).unwrap();
        let blob = dir.path().join("ck.bin");
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
        let err = Checkpoint::load(&base).unwrap_err().to_string();
        assert!(err.contains("values"), "{err}");
    }

    #[test]
    fn wrong_format_line_is_rejected() {
        let dir = tempdir().unwrap();
        let base = dir.path().join("ck");
        sample().save(&base).unwrap();
        let manifest = dir.path().join("ck.ckpt");
        let text = std::fs::read_to_string(&manifest).unwrap();
        std::fs::write(&manifest, text.replace("format 1", "format 9")).unwrap();
        let err = Checkpoint::load(&base).unwrap_err().to_string();
        assert!(err.contains("unsupported format"), "{err}");
    }

    #[test]
    fn missing_blob_is_an_io_error() {
        let dir = tempdir().unwrap();
        let base = dir.path().join("ck");
        sample().save(&base).unwrap();
        std::fs::remove_file(dir.path().join("ck.bin")).unwrap();
        assert!(matches!(
            Checkpoint::load(&base),
            Err(DllError::Io(_))
        ));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let dir = tempdir().unwrap();
        let base = dir.path().join("ck");
        sample().save(&base).unwrap();
        let blob = dir.path().join("ck.bin");
        let mut bytes = std::fs::read(&blob).unwrap();
        bytes[..8].copy_from_slice(&f64::NAN.to_le_bytes());
        std::fs::write(&blob, bytes).unwrap();
        let err = Checkpoint::load(&base).unwrap_err().to_string();
        assert!(err.contains("non-finite"), "{err}");
    }
}
