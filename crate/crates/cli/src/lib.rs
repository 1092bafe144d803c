//! Command implementations behind the `exemplar` binary.

pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use exemplar::altmin::{self, AuxSelection, ValidationMode};
use exemplar::corpus::{self, BankCollection, Example, ExampleBank};
use exemplar::dpp::{self, Retrieval};
use exemplar::metrics::{self, EvalRecord, EvalSummary};
use exemplar::prompt::{self, TemplateSet};
use exemplar::retriever::RetrieverParams;
use exemplar::scorer::{OracleScorer, RemoteConfig, RemoteScorer, Scorer};
use exemplar::synth::{self, SynthConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{Mode, Overrides, RunConfig, UsageError};

pub const ENDPOINT_ENV: &str = "SCORER_ENDPOINT";
pub const TOKEN_ENV: &str = "SCORER_TOKEN";
pub const CHECKPOINT: &str = "retriever.ckpt";

/// Written next to every command's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: u64,
    /// Artifact path (relative to the output directory) to SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub details: serde_json::Value,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_manifest(
    dir: &Path,
    command: &str,
    cfg: &RunConfig,
    outputs: &[PathBuf],
    details: impl Serialize,
) -> Result<PathBuf> {
    let mut sums = BTreeMap::new();
    for p in outputs {
        let key = p.strip_prefix(dir).unwrap_or(p).to_string_lossy().replace('\\', "/");
        sums.insert(key, sha256_file(p)?);
    }
    let manifest = Manifest {
        command: command.to_owned(),
        config: cfg.clone(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        outputs: sums,
        details: serde_json::to_value(details)?,
    };
    let path = dir.join(format!("{command}.manifest.json"));
    write_json(&path, &manifest)?;
    Ok(path)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn checked(cfg: &RunConfig) -> Result<()> {
    cfg.validate().map_err(anyhow::Error::new)
}

/// Loads `<stem>.jsonl` with `<stem>.emb` and, when present, `<stem>.query.emb`.
pub fn load_bank(dir: &Path, language: &str, validation: bool) -> Result<ExampleBank> {
    let stem = synth::bank_stem(language, validation);
    let jsonl = dir.join(format!("{stem}.jsonl"));
    let bank = corpus::ingest_bank(&jsonl, language).with_context(|| format!("loading {}", jsonl.display()))?;
    let bank = corpus::attach_embeddings(bank, dir.join(format!("{stem}.emb")))
        .with_context(|| format!("embeddings of {stem}"))?;
    let query = dir.join(format!("{stem}.query.emb"));
    if query.exists() {
        Ok(corpus::attach_query_embeddings(bank, &query).with_context(|| format!("query embeddings of {stem}"))?)
    } else {
        Ok(bank)
    }
}

/// Every bank a run touches: target, validation and all candidate auxiliaries.
pub struct LoadedBanks {
    pub target: ExampleBank,
    pub validation: ExampleBank,
    pub candidates: Vec<ExampleBank>,
}

impl LoadedBanks {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let dir = cfg.data_path();
        Ok(LoadedBanks {
            target: load_bank(&dir, &cfg.target, false)?,
            validation: load_bank(&dir, &cfg.target, true)?,
            candidates: cfg
                .auxiliary
                .iter()
                .map(|l| load_bank(&dir, l, false))
                .collect::<Result<_>>()?,
        })
    }

    pub fn all(&self) -> Vec<&ExampleBank> {
        let mut v = vec![&self.target, &self.validation];
        v.extend(self.candidates.iter());
        v
    }

    /// δ-filtered auxiliaries; `None` when no candidates are configured.
    pub fn selection(&self, delta: f64) -> Result<Option<AuxSelection>> {
        if self.candidates.is_empty() {
            return Ok(None);
        }
        let refs: Vec<&ExampleBank> = self.candidates.iter().collect();
        Ok(Some(altmin::select_auxiliary(&self.target, &refs, delta)?))
    }

    pub fn selected(&self, selection: Option<&AuxSelection>) -> Vec<ExampleBank> {
        let Some(sel) = selection else { return Vec::new() };
        self.candidates
            .iter()
            .filter(|b| sel.selected.contains(&b.language))
            .cloned()
            .collect()
    }

    /// Target plus selected auxiliaries as one retrieval pool.
    pub fn pool(&self, selection: Option<&AuxSelection>) -> Result<ExampleBank> {
        let aux = self.selected(selection);
        let mut refs = vec![&self.target];
        refs.extend(aux.iter());
        Ok(ExampleBank::merged(self.target.language.clone(), &refs)?)
    }
}

/// Remote backend when an endpoint is configured (flag, config or
/// environment), otherwise the embedding oracle over `banks`.
pub fn build_scorer(cfg: &RunConfig, banks: &[&ExampleBank]) -> Result<Box<dyn Scorer>> {
    let endpoint = cfg
        .endpoint
        .clone()
        .or_else(|| std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.is_empty()));
    match endpoint {
        Some(url) => {
            let mut rc = RemoteConfig::new(url);
            rc.token = std::env::var(TOKEN_ENV).ok().filter(|s| !s.is_empty());
            Ok(Box::new(RemoteScorer::new(rc)?))
        }
        None => Ok(Box::new(OracleScorer::from_banks(banks)?)),
    }
}

fn templates(cfg: &RunConfig) -> Result<TemplateSet> {
    Ok(match &cfg.templates {
        Some(p) => TemplateSet::load_overrides(cfg.resolve(p))?,
        None => TemplateSet::builtin(),
    })
}

pub fn cmd_select_aux(cfg: &RunConfig) -> Result<AuxSelection> {
    checked(cfg)?;
    if cfg.auxiliary.is_empty() {
        return Err(UsageError {
            field: "auxiliary".into(),
            message: "no candidate auxiliary languages given".into(),
        }
        .into());
    }
    let banks = LoadedBanks::load(cfg)?;
    let sel = banks.selection(cfg.delta)?.expect("candidates present");
    let out = cfg.out_path();
    create_dir(&out)?;
    let path = out.join("selection.json");
    write_json(&path, &sel)?;
    write_manifest(&out, "select-aux", cfg, &[path], &sel)?;
    Ok(sel)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: Mode,
    pub selection: Option<AuxSelection>,
    pub banks: Vec<String>,
    pub validation_trace: Vec<f64>,
    /// 1-based iteration of the kept checkpoint.
    pub best_iteration: Option<usize>,
    pub bank_losses: Vec<Vec<f64>>,
    pub dpp_loss_trace: Vec<f64>,
    pub dpp_flagged: usize,
}

/// Seed of the DPP stage: the stream after the last relevance iteration.
pub fn dpp_seed(cfg: &RunConfig) -> u64 {
    altmin::stream_seed(cfg.seed, cfg.iterations + 1, 0)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    checked(cfg)?;
    let banks = LoadedBanks::load(cfg)?;
    let selection = banks.selection(cfg.delta)?;
    let aux = banks.selected(selection.as_ref());
    let collection = BankCollection::new(banks.target.clone(), banks.validation.clone(), aux)?;
    let scorer = build_scorer(cfg, &banks.all())?;
    let out = cfg.out_path();
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let mut outputs = Vec::new();
    let dim = banks.target.dim().context("target bank has no embeddings")?;

    let mut report = TrainReport {
        mode: cfg.mode,
        selection: selection.clone(),
        banks: collection.training_banks().iter().map(|b| b.language.clone()).collect(),
        validation_trace: Vec::new(),
        best_iteration: None,
        bank_losses: Vec::new(),
        dpp_loss_trace: Vec::new(),
        dpp_flagged: 0,
    };

    let rho_star = if cfg.mode.uses_altmin() {
        let mode = if cfg.validate_with_generation {
            ValidationMode::Generation {
                template: templates(cfg)?.get(cfg.task).clone(),
                k: cfg.k,
            }
        } else {
            ValidationMode::Mrr
        };
        let state = altmin::run_alternating_minimization(&collection, scorer.as_ref(), &cfg.altmin(), &mode)?;
        for (i, p) in state.checkpoints.iter().enumerate() {
            let path = ckpt_dir.join(format!("iter_{:02}.ckpt", i + 1));
            p.save(&path)?;
            outputs.push(path);
        }
        report.validation_trace = state.trace.clone();
        report.best_iteration = state.best.map(|b| b + 1);
        report.bank_losses = state.bank_losses.clone();
        let best = state.best_params().cloned().context("no iteration completed")?;
        let path = ckpt_dir.join("rho_star.ckpt");
        best.save(&path)?;
        outputs.push(path);
        best
    } else {
        RetrieverParams::identity(dim)
    };

    let final_params = if cfg.mode.uses_dpp() {
        let mut refs = vec![&collection.target];
        refs.extend(collection.auxiliaries.iter());
        let merged = ExampleBank::merged(collection.target.language.clone(), &refs)?;
        let outcome = dpp::train_dpp(&rho_star, &merged, &cfg.dpp(), dpp_seed(cfg))?;
        report.dpp_loss_trace = outcome.loss_trace;
        report.dpp_flagged = outcome.flagged;
        outcome.params
    } else {
        rho_star
    };
    let path = out.join(CHECKPOINT);
    final_params.save(&path)?;
    outputs.push(path);
    write_manifest(&out, "train", cfg, &outputs, &report)?;
    Ok(report)
}

/// One line of the retrieval output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub query_id: String,
    pub selected: Vec<String>,
    pub log_det: f64,
    pub similarities: Vec<f64>,
}

/// Where `retrieve` and `eval` read their queries from.
#[derive(Debug, Clone, Default)]
pub struct QuerySource {
    pub examples: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
}

impl QuerySource {
    /// The given files, or the target's validation split.
    pub fn load(&self, cfg: &RunConfig, banks: &LoadedBanks) -> Result<ExampleBank> {
        let Some(path) = &self.examples else {
            return Ok(banks.validation.clone());
        };
        let examples = corpus::read_examples(path)?;
        let bank = ExampleBank::new(cfg.target.clone(), examples)?;
        let emb = self.embeddings.clone().unwrap_or_else(|| path.with_extension("emb"));
        let bank =
            corpus::attach_embeddings(bank, &emb).with_context(|| format!("query embeddings {}", emb.display()))?;
        let qpath = emb.with_extension("query.emb");
        match self.embeddings {
            None if qpath.exists() => Ok(corpus::attach_query_embeddings(bank, &qpath)?),
            _ => Ok(bank),
        }
    }
}

fn retrieve_one(
    cfg: &RunConfig,
    params: &RetrieverParams,
    pool: &ExampleBank,
    query: ndarray::ArrayView1<f64>,
) -> Result<Retrieval> {
    Ok(match cfg.mode {
        Mode::RelevanceOnly => dpp::retrieve_top_k(params, pool, query, cfg.k)?,
        Mode::Full | Mode::DppOnly => dpp::retrieve(params, pool, query, cfg.k, &cfg.dpp())?,
    })
}

pub fn cmd_retrieve(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    queries: &QuerySource,
    out_file: Option<&Path>,
) -> Result<Vec<RetrievalRecord>> {
    checked(cfg)?;
    let out = cfg.out_path();
    create_dir(&out)?;
    let ckpt = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join(CHECKPOINT));
    let params = RetrieverParams::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let banks = LoadedBanks::load(cfg)?;
    let selection = banks.selection(cfg.delta)?;
    let pool = banks.pool(selection.as_ref())?;
    let qbank = queries.load(cfg, &banks)?;
    let qemb = qbank.query_embeddings()?;
    let mut records = Vec::with_capacity(qbank.len());
    for (i, q) in qbank.examples.iter().enumerate() {
        let r = retrieve_one(cfg, &params, &pool, qemb.row(i)).with_context(|| format!("query {}", q.id))?;
        records.push(RetrievalRecord {
            query_id: q.id.clone(),
            selected: r.indices.iter().map(|&j| pool.examples[j].id.clone()).collect(),
            log_det: r.log_det,
            similarities: r.similarities,
        });
    }
    let path = out_file
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join("retrieval.jsonl"));
    write_jsonl(&path, &records)?;
    write_manifest(
        &out,
        "retrieve",
        cfg,
        &[path],
        serde_json::json!({ "queries": records.len(), "checkpoint": sha256_file(&ckpt)? }),
    )?;
    Ok(records)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

/// What `eval` scores: existing predictions, or generations over a retrieval file.
#[derive(Debug, Clone)]
pub enum EvalInput {
    Predictions(PathBuf),
    Retrieval { retrieval: PathBuf, queries: QuerySource },
}

pub fn cmd_eval(cfg: &RunConfig, input: &EvalInput) -> Result<EvalSummary> {
    let out = cfg.out_path();
    create_dir(&out)?;
    let mut outputs = Vec::new();
    let records: Vec<EvalRecord> = match input {
        EvalInput::Predictions(p) => read_jsonl(p)?,
        EvalInput::Retrieval { retrieval, queries } => {
            checked(cfg)?;
            let banks = LoadedBanks::load(cfg)?;
            let selection = banks.selection(cfg.delta)?;
            let pool = banks.pool(selection.as_ref())?;
            let qbank = queries.load(cfg, &banks)?;
            let mut all = banks.all();
            all.push(&qbank);
            let scorer = build_scorer(cfg, &all)?;
            let template = templates(cfg)?.get(cfg.task).clone();
            let mut recs = Vec::new();
            for r in read_jsonl::<RetrievalRecord>(retrieval)? {
                let q = qbank
                    .position(&r.query_id)
                    .map(|i| &qbank.examples[i])
                    .with_context(|| format!("unknown query id {:?}", r.query_id))?;
                let demos = r
                    .selected
                    .iter()
                    .map(|id| {
                        pool.position(id)
                            .map(|i| &pool.examples[i])
                            .with_context(|| format!("unknown example id {id:?}"))
                    })
                    .collect::<Result<Vec<&Example>>>()?;
                let mut query = q.clone();
                query.output_text.clear();
                let text = prompt::render(&template, &demos, &query)?;
                let hyp = scorer.generate(&text, 256)?;
                recs.push(EvalRecord::new(&q.id, hyp, &q.output_text).scored());
            }
            let path = out.join("predictions.jsonl");
            write_jsonl(&path, &recs)?;
            outputs.push(path);
            recs
        }
    };
    let records: Vec<EvalRecord> = records.into_iter().map(EvalRecord::scored).collect();
    let summary = metrics::evaluate_run(&records, cfg.task.as_str())?;
    let path = out.join("summary.json");
    write_json(&path, &summary)?;
    outputs.push(path);
    write_manifest(&out, "eval", cfg, &outputs, &summary)?;
    Ok(summary)
}

/// Copies a bank into the data directory under the standard file names.
pub fn cmd_ingest(
    cfg: &RunConfig,
    input: &Path,
    language: &str,
    embeddings: &Path,
    query_embeddings: Option<&Path>,
    validation: bool,
) -> Result<PathBuf> {
    let bank = corpus::ingest_bank(input, language).with_context(|| format!("ingesting {}", input.display()))?;
    let bank = corpus::attach_embeddings(bank, embeddings)?;
    let bank = match query_embeddings {
        Some(q) => corpus::attach_query_embeddings(bank, q)?,
        None => bank,
    };
    let dir = cfg.data_path();
    create_dir(&dir)?;
    let stem = synth::bank_stem(language, validation);
    let mut outputs = vec![dir.join(format!("{stem}.jsonl")), dir.join(format!("{stem}.emb"))];
    corpus::write_examples(&outputs[0], &bank.examples)?;
    corpus::write_embedding_file(&outputs[1], bank.embeddings()?)?;
    if bank.has_query_embeddings() {
        let q = dir.join(format!("{stem}.query.emb"));
        corpus::write_embedding_file(&q, bank.query_embeddings()?)?;
        outputs.push(q);
    }
    let details = serde_json::json!({
        "language": language,
        "validation": validation,
        "examples": bank.len(),
        "dim": bank.dim(),
    });
    write_manifest(&dir, &format!("ingest-{stem}"), cfg, &outputs, details)
}

/// Synthetic benchmark presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Target plus two related auxiliaries.
    TwoRelated,
    /// Target plus N candidates, only the first related.
    Clusters,
    /// One related and one unrelated auxiliary at equal mean cosine.
    RelatedUnrelated,
}

#[derive(Debug, Clone)]
pub struct SynthRequest {
    pub dir: PathBuf,
    pub seed: u64,
    pub preset: Preset,
    pub clusters: usize,
    pub copies: usize,
    pub generator: Option<PathBuf>,
}

/// Config for running the pipeline on a generated benchmark at desk scale.
pub fn synth_run_config(sc: &SynthConfig, preset: Option<Preset>) -> RunConfig {
    RunConfig {
        data_dir: PathBuf::from("data"),
        out_dir: PathBuf::from("out"),
        target: sc.target.clone(),
        auxiliary: sc.candidates.iter().map(|c| c.tag.clone()).collect(),
        delta: if preset == Some(Preset::Clusters) {
            altmin::DEFAULT_DELTA
        } else {
            0.0
        },
        iterations: 10,
        epochs: 20,
        dpp_epochs: 3,
        lr: 5e-4,
        k: 4,
        seed: sc.seed,
        ..RunConfig::default()
    }
}

/// Writes the benchmark under `<dir>/data`, a run config at
/// `<dir>/config.json` and a manifest; returns the config path.
pub fn cmd_synth(req: &SynthRequest) -> Result<PathBuf> {
    let mut sc = match &req.generator {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<SynthConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => match req.preset {
            Preset::TwoRelated => SynthConfig::default(),
            Preset::Clusters => SynthConfig::with_clusters(req.seed, req.clusters),
            Preset::RelatedUnrelated => SynthConfig::related_and_unrelated(req.seed),
        },
    };
    if req.generator.is_none() {
        sc.seed = req.seed;
        sc.copies = req.copies;
    }
    if req.clusters == 0 && req.preset == Preset::Clusters {
        bail!(UsageError {
            field: "clusters".into(),
            message: "must be positive".into()
        });
    }
    let mut bench = synth::generate(&sc)?;
    let data = req.dir.join("data");
    bench.write_to(&data)?;
    let cfg = synth_run_config(&sc, req.generator.is_none().then_some(req.preset));
    let cfg_path = req.dir.join("config.json");
    write_json(&cfg_path, &cfg)?;
    let mut outputs: Vec<PathBuf> = bench.manifest.files.iter().map(|f| data.join(f)).collect();
    outputs.push(data.join("synth.json"));
    outputs.push(cfg_path.clone());
    write_manifest(&req.dir, "synth", &cfg, &outputs, &bench.manifest)?;
    Ok(cfg_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_keys_are_relative() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.txt");
        fs::write(&f, "x").unwrap();
        let cfg = RunConfig {
            target: "t".into(),
            ..RunConfig::default()
        };
        let m = write_manifest(dir.path(), "demo", &cfg, &[f], serde_json::json!({})).unwrap();
        let parsed: Manifest = serde_json::from_str(&fs::read_to_string(m).unwrap()).unwrap();
        assert_eq!(
            parsed.outputs["a.txt"],
            "2d711642b726b04401627ca9fbac32f5c8530fb1903cc4db02258717921a4881"
        );
        assert_eq!(parsed.config_hash, cfg.hash());
    }

    #[test]
    fn select_aux_requires_candidates() {
        let cfg = RunConfig {
            target: "t".into(),
            ..RunConfig::default()
        };
        let err = cmd_select_aux(&cfg).unwrap_err();
        assert_eq!(err.downcast_ref::<UsageError>().unwrap().field, "auxiliary");
    }
}
