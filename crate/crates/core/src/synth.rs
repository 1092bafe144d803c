//! Synthetic multilingual benchmark with a known related language.
//!
//! Every language has a mean direction μ_l at a configured cosine to the
//! target's, and topics τ_t are shared across languages. A bank-side row is
//! `a·μ_l + b·τ_t + σ·ξ`; its query-side row adds a language nuisance `ζ·u_l`.
//! Related languages share the target's nuisance direction (up to a small
//! perturbation) so what they teach the retriever transfers; unrelated
//! languages get an independent one.
//!
//! Texts carry topic words (so BM25 finds same-topic neighbours), language
//! filler and a unique key. Outputs depend only on language, topic and key.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_embedding_file, write_examples, Example, ExampleBank};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthLanguage {
    pub tag: String,
    /// Cosine between this language's mean direction and the target's.
    pub cosine: f64,
    /// Shares the target's query nuisance direction.
    pub related: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub dim: usize,
    pub target: String,
    pub candidates: Vec<SynthLanguage>,
    pub target_size: usize,
    pub auxiliary_size: usize,
    pub validation_size: usize,
    pub topics: usize,
    pub words_per_topic: usize,
    pub language_weight: f64,
    pub topic_weight: f64,
    pub noise: f64,
    pub nuisance: f64,
    /// Perturbation of a related language's nuisance direction.
    pub nuisance_drift: f64,
    /// Copies of every bank row; above 1 gives exact duplicates.
    pub copies: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            dim: 16,
            target: "tgt".into(),
            candidates: vec![
                SynthLanguage {
                    tag: "rel1".into(),
                    cosine: 0.9,
                    related: true,
                },
                SynthLanguage {
                    tag: "rel2".into(),
                    cosine: 0.85,
                    related: true,
                },
            ],
            target_size: 40,
            auxiliary_size: 200,
            validation_size: 40,
            topics: 8,
            words_per_topic: 6,
            language_weight: 1.0,
            topic_weight: 1.0,
            noise: 0.8,
            nuisance: 2.0,
            nuisance_drift: 0.1,
            copies: 1,
        }
    }
}

impl SynthConfig {
    /// Target plus `n` candidates: the first related at cosine 0.9, the rest
    /// unrelated with cosines spread below it.
    pub fn with_clusters(seed: u64, n: usize) -> Self {
        let candidates = (0..n)
            .map(|i| SynthLanguage {
                tag: format!("c{}", i + 1),
                cosine: if i == 0 {
                    0.9
                } else {
                    0.5 - 0.6 * (i - 1) as f64 / n.max(2) as f64
                },
                related: i == 0,
            })
            .collect();
        SynthConfig {
            seed,
            candidates,
            ..SynthConfig::default()
        }
    }

    /// One related and one unrelated candidate at the same mean cosine, so
    /// only the shared nuisance direction tells them apart.
    pub fn related_and_unrelated(seed: u64) -> Self {
        SynthConfig {
            seed,
            candidates: vec![
                SynthLanguage {
                    tag: "rel".into(),
                    cosine: 0.6,
                    related: true,
                },
                SynthLanguage {
                    tag: "unr".into(),
                    cosine: 0.6,
                    related: false,
                },
            ],
            ..SynthConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.topics == 0 || self.words_per_topic < 2 || self.copies == 0 {
            return Err(Error::Parameter(
                "synthetic dim, topics, words and copies must be positive".into(),
            ));
        }
        if self.target_size < 2 || self.validation_size == 0 {
            return Err(Error::Parameter(
                "synthetic target needs at least 2 examples and a validation split".into(),
            ));
        }
        if self.candidates.iter().any(|c| !(-1.0..=1.0).contains(&c.cosine)) {
            return Err(Error::Parameter("candidate cosines must lie in [-1, 1]".into()));
        }
        let mut tags: Vec<&str> = self.candidates.iter().map(|c| c.tag.as_str()).collect();
        tags.push(&self.target);
        tags.sort_unstable();
        if tags.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Parameter("synthetic language tags must be distinct".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub dim: usize,
    pub target: String,
    pub related: Vec<String>,
    pub unrelated: Vec<String>,
    pub languages: Vec<SynthLanguage>,
    pub files: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SynthBenchmark {
    pub target: ExampleBank,
    pub validation: ExampleBank,
    pub auxiliaries: Vec<ExampleBank>,
    pub manifest: SynthManifest,
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    Array1::from_shape_fn(d, |_| rng.sample(StandardNormal))
}

/// Random unit vector orthogonal to `to`.
fn orthogonal_unit(rng: &mut ChaCha8Rng, to: &Array1<f64>) -> Array1<f64> {
    let g = gaussian(rng, to.len());
    unit(&g - &(to * g.dot(to)))
}

// values are stored as f32 on disk; generating them at that precision keeps
// in-memory and reloaded banks identical
fn f32_round(m: Array2<f64>) -> Array2<f64> {
    m.mapv(|x| x as f32 as f64)
}

struct Language<'a> {
    tag: &'a str,
    mean: Array1<f64>,
    nuisance: Array1<f64>,
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    topics: Vec<Array1<f64>>,
}

impl Generator<'_> {
    fn bank(&self, lang: &Language, size: usize, id_prefix: &str, rng: &mut ChaCha8Rng) -> Result<ExampleBank> {
        let cfg = self.cfg;
        let d = cfg.dim;
        let n = size * cfg.copies;
        let mut rows = Array2::zeros((n, d));
        let mut qrows = Array2::zeros((n, d));
        let mut examples = Vec::with_capacity(n);
        for i in 0..size {
            let topic = rng.random_range(0..cfg.topics);
            let xi = gaussian(rng, d) / (d as f64).sqrt();
            let row = &lang.mean * cfg.language_weight + &self.topics[topic] * cfg.topic_weight + xi * cfg.noise;
            let qnoise = gaussian(rng, d) / (d as f64).sqrt() * (0.05 * cfg.noise);
            let qrow = &row + &(&lang.nuisance * cfg.nuisance) + qnoise;
            let words: Vec<String> = index::sample(rng, cfg.words_per_topic, cfg.words_per_topic.div_ceil(2))
                .into_iter()
                .map(|w| format!("tpc{topic}w{w}"))
                .collect();
            let filler: Vec<String> = index::sample(rng, 10, 2)
                .into_iter()
                .map(|f| format!("{}f{f}", lang.tag))
                .collect();
            let input = format!("{} {} {id_prefix}q{i}", words.join(" "), filler.join(" "));
            let output = format!("{id_prefix}o{topic}x{i}");
            for c in 0..cfg.copies {
                let r = i * cfg.copies + c;
                rows.row_mut(r).assign(&row);
                qrows.row_mut(r).assign(&qrow);
                let id = if cfg.copies == 1 {
                    format!("{id_prefix}-{i:04}")
                } else {
                    format!("{id_prefix}-{i:04}-{c}")
                };
                examples.push(Example::new(id, input.clone(), output.clone(), lang.tag));
            }
        }
        ExampleBank::new(lang.tag, examples)?
            .with_embeddings(f32_round(rows))?
            .with_query_embeddings(f32_round(qrows))
    }
}

/// Builds the benchmark in memory; identical configs give identical banks.
pub fn generate(cfg: &SynthConfig) -> Result<SynthBenchmark> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.dim;
    let target_mean = unit(gaussian(&mut rng, d));
    let target_nuisance = orthogonal_unit(&mut rng, &target_mean);
    let topics: Vec<Array1<f64>> = (0..cfg.topics).map(|_| unit(gaussian(&mut rng, d))).collect();
    let mut langs = vec![Language {
        tag: &cfg.target,
        mean: target_mean.clone(),
        nuisance: target_nuisance.clone(),
    }];
    for c in &cfg.candidates {
        let o = orthogonal_unit(&mut rng, &target_mean);
        let mean = &target_mean * c.cosine + o * (1.0 - c.cosine * c.cosine).sqrt();
        let fresh = unit(gaussian(&mut rng, d));
        let nuisance = if c.related {
            unit(&target_nuisance + &(fresh * cfg.nuisance_drift))
        } else {
            fresh
        };
        langs.push(Language {
            tag: &c.tag,
            mean,
            nuisance,
        });
    }
    let gen = Generator { cfg, topics };
    let target = gen.bank(&langs[0], cfg.target_size, &cfg.target, &mut rng)?;
    let validation = gen.bank(&langs[0], cfg.validation_size, &format!("{}-val", cfg.target), &mut rng)?;
    let auxiliaries = langs[1..]
        .iter()
        .map(|l| gen.bank(l, cfg.auxiliary_size, l.tag, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let (related, unrelated): (Vec<_>, Vec<_>) = cfg.candidates.iter().partition(|c| c.related);
    Ok(SynthBenchmark {
        target,
        validation,
        auxiliaries,
        manifest: SynthManifest {
            seed: cfg.seed,
            dim: d,
            target: cfg.target.clone(),
            related: related.into_iter().map(|c| c.tag.clone()).collect(),
            unrelated: unrelated.into_iter().map(|c| c.tag.clone()).collect(),
            languages: cfg.candidates.clone(),
            files: Vec::new(),
        },
    })
}

/// File stem of a bank: the language tag, or `<tag>.validation`.
pub fn bank_stem(tag: &str, validation: bool) -> String {
    if validation {
        format!("{tag}.validation")
    } else {
        tag.to_owned()
    }
}

fn write_bank(dir: &Path, stem: &str, bank: &ExampleBank, files: &mut Vec<String>) -> Result<()> {
    let names = [
        format!("{stem}.jsonl"),
        format!("{stem}.emb"),
        format!("{stem}.query.emb"),
    ];
    write_examples(dir.join(&names[0]), &bank.examples)?;
    write_embedding_file(dir.join(&names[1]), bank.embeddings()?)?;
    write_embedding_file(dir.join(&names[2]), bank.query_embeddings()?)?;
    files.extend(names);
    Ok(())
}

impl SynthBenchmark {
    /// Writes every bank (examples, bank-side and query-side embeddings) and
    /// `synth.json` into `dir`. Returns the manifest path.
    pub fn write_to(&mut self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();
        write_bank(dir, &bank_stem(&self.target.language, false), &self.target, &mut files)?;
        write_bank(
            dir,
            &bank_stem(&self.validation.language, true),
            &self.validation,
            &mut files,
        )?;
        for aux in &self.auxiliaries {
            write_bank(dir, &bank_stem(&aux.language, false), aux, &mut files)?;
        }
        self.manifest.files = files;
        let path = dir.join("synth.json");
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serialises");
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
