//! Scoring and generation backends.
//!
//! The relevance labels come from a language model scoring the gold output
//! given one demonstration and the input. Two backends implement [`Scorer`]:
//! [`RemoteScorer`] speaks a small JSON-over-HTTP protocol, and
//! [`OracleScorer`] is a deterministic offline stand-in that scores
//! `-|ê(a) - ê(x, y)|²` over unit-normalised base embeddings.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::corpus::{unit, Example, ExampleBank};
use crate::error::{Error, Result};

pub const DEFAULT_RETRIES: u32 = 3;
pub const DEFAULT_CONCURRENCY: usize = 8;
pub const DEFAULT_MAX_TOKENS: usize = 128;

/// One scoring call: log π(continuation | prompt).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRequest {
    pub prompt_text: String,
    pub continuation_text: String,
    demonstration: Option<(String, String)>,
    query_input: Option<String>,
}

impl ScoreRequest {
    /// A free-form request.
    pub fn new(prompt_text: impl Into<String>, continuation_text: impl Into<String>) -> Result<Self> {
        let (prompt_text, continuation_text) = (prompt_text.into(), continuation_text.into());
        if prompt_text.is_empty() || continuation_text.is_empty() {
            return Err(Error::EmptyInput(
                "score request needs a prompt and a continuation".into(),
            ));
        }
        Ok(ScoreRequest {
            prompt_text,
            continuation_text,
            demonstration: None,
            query_input: None,
        })
    }

    /// Scores `sample.output` given the single demonstration `demo` followed by `sample.input`.
    pub fn for_demonstration(demo: &Example, sample: &Example) -> Result<Self> {
        let prompt = format!("{}\n{}\n{}", demo.input_text, demo.output_text, sample.input_text);
        let mut req = ScoreRequest::new(prompt, sample.output_text.clone())?;
        req.demonstration = Some((demo.input_text.clone(), demo.output_text.clone()));
        req.query_input = Some(sample.input_text.clone());
        Ok(req)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub index: usize,
    pub logprob: f64,
}

/// Backend for π_Scorer and π_LM.
pub trait Scorer: Send + Sync {
    fn score(&self, request: &ScoreRequest) -> Result<f64>;

    /// Scores a batch; results are in request order.
    fn score_batch(&self, requests: &[ScoreRequest]) -> Result<Vec<f64>> {
        requests.iter().map(|r| self.score(r)).collect()
    }

    fn generate(&self, prompt: &str, max_tokens: usize) -> Result<String>;
}

/// Candidate with the largest logprob; ties go to the lower candidate index.
pub fn best_candidate(scored: &[ScoredCandidate]) -> Result<usize> {
    scored
        .iter()
        .copied()
        .reduce(|best, c| {
            if c.logprob > best.logprob || (c.logprob == best.logprob && c.index < best.index) {
                c
            } else {
                best
            }
        })
        .map(|c| c.index)
        .ok_or_else(|| Error::EmptyInput("no scored candidates".into()))
}

/// Deterministic offline backend keyed by example text.
#[derive(Debug, Default, Clone)]
pub struct OracleScorer {
    // (input, output) -> unit bank-side embedding
    entries: HashMap<(String, String), Array1<f64>>,
    // insertion order, used for nearest-neighbour generation
    ordered: Vec<(String, String)>,
    // query input -> unit query-side embedding
    queries: HashMap<String, Array1<f64>>,
}

impl OracleScorer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers every example of every bank as a scorable text pair, and its
    /// query-side row as a generation query.
    pub fn from_banks(banks: &[&ExampleBank]) -> Result<Self> {
        let mut oracle = OracleScorer::new();
        for bank in banks {
            oracle.register_bank(bank)?;
        }
        Ok(oracle)
    }

    pub fn register_bank(&mut self, bank: &ExampleBank) -> Result<()> {
        let emb = bank.embeddings()?;
        let qemb = bank.query_embeddings()?;
        for (i, ex) in bank.examples.iter().enumerate() {
            let key = (ex.input_text.clone(), ex.output_text.clone());
            if !self.entries.contains_key(&key) {
                self.ordered.push(key.clone());
            }
            self.entries.insert(key, unit(emb.row(i))?);
            self.queries.entry(ex.input_text.clone()).or_insert(unit(qemb.row(i))?);
        }
        Ok(())
    }

    /// Registers query inputs (with query-side rows) for generation only.
    pub fn register_queries(&mut self, bank: &ExampleBank) -> Result<()> {
        let qemb = bank.query_embeddings()?;
        for (i, ex) in bank.examples.iter().enumerate() {
            self.queries.insert(ex.input_text.clone(), unit(qemb.row(i))?);
        }
        Ok(())
    }

    fn lookup(&self, input: &str, output: &str) -> Result<&Array1<f64>> {
        self.entries
            .get(&(input.to_owned(), output.to_owned()))
            .ok_or_else(|| Error::Protocol(format!("oracle has no embedding for example with input {input:?}")))
    }
}

impl Scorer for OracleScorer {
    fn score(&self, request: &ScoreRequest) -> Result<f64> {
        let (demo_in, demo_out) = request
            .demonstration
            .as_ref()
            .ok_or_else(|| Error::Protocol("oracle needs a structured demonstration request".into()))?;
        let query = request
            .query_input
            .as_ref()
            .ok_or_else(|| Error::Protocol("oracle needs a structured demonstration request".into()))?;
        let a = self.lookup(demo_in, demo_out)?;
        let xy = self.lookup(query, &request.continuation_text)?;
        let diff = a - xy;
        Ok(-diff.dot(&diff))
    }

    /// Gold output of the demonstration nearest to the prompt's query. The
    /// query is the registered input occurring last in the prompt; the
    /// demonstrations are the registered examples whose input and output both
    /// appear before it (every other registered example when none do).
    fn generate(&self, prompt: &str, _max_tokens: usize) -> Result<String> {
        let mut found: Option<(usize, usize, &str)> = None;
        for q in self.queries.keys() {
            if let Some(pos) = prompt.rfind(q.as_str()) {
                let end = pos + q.len();
                let better = match found {
                    None => true,
                    Some((fe, fl, fq)) => {
                        end > fe || (end == fe && (q.len() > fl || (q.len() == fl && q.as_str() < fq)))
                    }
                };
                if better {
                    found = Some((end, q.len(), q.as_str()));
                }
            }
        }
        let (end, len, query) =
            found.ok_or_else(|| Error::Protocol("oracle found no registered query in prompt".into()))?;
        let context = &prompt[..end - len];
        let qv = &self.queries[query];
        let others = self.ordered.iter().filter(|k| k.0 != query);
        let shown: Vec<&(String, String)> = others
            .clone()
            .filter(|k| context.contains(k.0.as_str()) && context.contains(k.1.as_str()))
            .collect();
        let pool: Vec<&(String, String)> = if shown.is_empty() { others.collect() } else { shown };
        let mut best: Option<(f64, &(String, String))> = None;
        for key in pool {
            let s = self.entries[key].dot(qv);
            if best.is_none_or(|(b, _)| s > b) {
                best = Some((s, key));
            }
        }
        best.map(|(_, k)| k.1.clone())
            .ok_or_else(|| Error::Protocol("oracle has no registered examples".into()))
    }
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub token: Option<String>,
    pub retries: u32,
    pub concurrency: usize,
    pub timeout: Duration,
    pub backoff: Duration,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        RemoteConfig {
            endpoint: endpoint.into(),
            token: None,
            retries: DEFAULT_RETRIES,
            concurrency: DEFAULT_CONCURRENCY,
            timeout: Duration::from_secs(60),
            backoff: Duration::from_millis(200),
        }
    }
}

#[derive(Serialize)]
struct ScoreBody<'a> {
    prompt: &'a str,
    continuation: &'a str,
}

#[derive(Deserialize)]
struct ScoreReply {
    logprob: f64,
}

#[derive(Serialize)]
struct GenerateBody<'a> {
    prompt: &'a str,
    max_tokens: usize,
}

#[derive(Deserialize)]
struct GenerateReply {
    text: String,
}

/// HTTP backend: `POST /score` and `POST /generate` with JSON bodies.
pub struct RemoteScorer {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
}

impl RemoteScorer {
    pub fn new(config: RemoteConfig) -> Result<Self> {
        if config.concurrency == 0 {
            return Err(Error::Parameter("remote concurrency must be at least 1".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(RemoteScorer { config, client })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn url(&self, route: &str) -> String {
        format!("{}/{}", self.config.endpoint.trim_end_matches('/'), route)
    }

    /// POSTs `body`, retrying transport failures and non-success statuses
    /// with exponential backoff; payload errors are not retried.
    fn post<B: Serialize, R: for<'de> Deserialize<'de>>(&self, route: &str, body: &B) -> Result<R> {
        let url = self.url(route);
        let attempts = self.config.retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let factor = 1u32 << (attempt - 1).min(5);
                std::thread::sleep(self.config.backoff * factor);
            }
            let mut req = self.client.post(&url).json(body);
            if let Some(token) = &self.config.token {
                req = req.bearer_auth(token);
            }
            match req.send() {
                Ok(resp) if resp.status().is_success() => {
                    let bytes = resp.bytes().map_err(|e| Error::Protocol(e.to_string()))?;
                    return serde_json::from_slice(&bytes)
                        .map_err(|e| Error::Protocol(format!("malformed reply from {url}: {e}")));
                }
                Ok(resp) => last = format!("HTTP {} from {url}", resp.status()),
                Err(e) => last = e.to_string(),
            }
            log::warn!("request to {url} failed (attempt {}): {last}", attempt + 1);
        }
        Err(Error::Transport {
            attempts,
            message: last,
        })
    }
}

impl Scorer for RemoteScorer {
    fn score(&self, request: &ScoreRequest) -> Result<f64> {
        let reply: ScoreReply = self.post(
            "score",
            &ScoreBody {
                prompt: &request.prompt_text,
                continuation: &request.continuation_text,
            },
        )?;
        if !reply.logprob.is_finite() {
            return Err(Error::Protocol(format!("non-finite logprob {}", reply.logprob)));
        }
        Ok(reply.logprob)
    }

    /// At most `concurrency` requests in flight; results joined in request order.
    fn score_batch(&self, requests: &[ScoreRequest]) -> Result<Vec<f64>> {
        let workers = self.config.concurrency.min(requests.len()).max(1);
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<Result<f64>>>> = Mutex::new((0..requests.len()).map(|_| None).collect());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= requests.len() {
                        break;
                    }
                    let r = self.score(&requests[i]);
                    results.lock().unwrap()[i] = Some(r);
                });
            }
        });
        results
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|r| r.expect("every slot filled"))
            .collect()
    }

    fn generate(&self, prompt: &str, max_tokens: usize) -> Result<String> {
        let reply: GenerateReply = self.post("generate", &GenerateBody { prompt, max_tokens })?;
        Ok(reply.text)
    }
}
