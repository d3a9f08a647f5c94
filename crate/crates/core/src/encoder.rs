//! Utterance encoders, the learned downsampler, and the external encoder
//! adapter boundary.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Corpus, Utterance};
use crate::error::{Error, Result};
use crate::nn::math::mean_rows;
use crate::nn::params::{init_rng, ParamStore, Slot};
use crate::nn::{BiLstm, BiLstmCache, Embedding};
use crate::rng::StreamRng;

pub const UNK: &str = "<unk>";
pub const SEP: &str = "<sep>";

/// Token to row index. Index 0 is `<unk>`, index 1 is the turn separator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let set: BTreeSet<String> = tokens.into_iter().filter(|t| t != UNK && t != SEP).collect();
        let mut all = vec![UNK.to_string(), SEP.to_string()];
        all.extend(set);
        Self::from_list(all)
    }

    /// Every token seen in the given corpora, sorted.
    pub fn build<'a>(corpora: impl IntoIterator<Item = &'a Corpus>) -> Self {
        Self::from_tokens(corpora.into_iter().flat_map(|c| {
            c.dialogues
                .iter()
                .flat_map(|d| d.utterances.iter().flat_map(|u| u.tokens.iter().cloned()))
        }))
    }

    /// Restores a vocabulary from its stored token list (specials first).
    pub fn from_list(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn sep_id(&self) -> usize {
        1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    ToyMeanEmbed,
    ToyRecurrent,
    ExternalAdapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub embed_dim: usize,
    /// Encoder output width `B`.
    pub out_dim: usize,
    pub seed: u64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            kind: EncoderKind::ToyRecurrent,
            embed_dim: 32,
            out_dim: 64,
            seed: 0,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.out_dim == 0 {
            return Err(Error::Argument("encoder dims must be positive".into()));
        }
        match self.kind {
            EncoderKind::ToyMeanEmbed if self.embed_dim != self.out_dim => Err(Error::Argument(format!(
                "toy_mean_embed outputs its embedding rows: embed_dim ({}) must equal out_dim ({})",
                self.embed_dim, self.out_dim
            ))),
            EncoderKind::ToyRecurrent if !self.out_dim.is_multiple_of(2) => Err(Error::Argument(format!(
                "toy_recurrent concatenates two directions: out_dim ({}) must be even",
                self.out_dim
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceEmbedding {
    pub values: Vec<f64>,
    pub source_dim: usize,
}

/// A fixed-vector encoder backed by something outside this crate (a
/// pretrained transformer in a subprocess, a plugin, a test stub).
pub trait ExternalEncoder: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn encode(&self, tokens: &[String]) -> Result<Vec<f32>>;
    /// Which pooled output the adapter returns; stored in checkpoint metadata.
    fn pooling(&self) -> &str {
        "adapter-defined"
    }
}

/// Returns the same vector for every input.
#[derive(Debug, Clone)]
pub struct ConstantAdapter {
    pub id: String,
    pub vector: Vec<f32>,
}

impl ExternalEncoder for ConstantAdapter {
    fn id(&self) -> &str {
        &self.id
    }
    fn dim(&self) -> usize {
        self.vector.len()
    }
    fn encode(&self, _tokens: &[String]) -> Result<Vec<f32>> {
        Ok(self.vector.clone())
    }
}

/// Deterministic feature hashing of unigrams and position-tagged bigrams,
/// L2-normalized. Stands in for a pretrained encoder in tests and demos.
#[derive(Debug, Clone)]
pub struct HashAdapter {
    pub id: String,
    pub dim: usize,
}

impl HashAdapter {
    pub fn new(dim: usize) -> Self {
        HashAdapter {
            id: format!("hash-{dim}"),
            dim,
        }
    }

    fn bucket(&self, feature: &str) -> (usize, f32) {
        let h = Sha256::digest(feature.as_bytes());
        let v = u64::from_le_bytes(h[..8].try_into().expect("8 bytes"));
        ((v % self.dim as u64) as usize, if h[8] & 1 == 0 { 1.0 } else { -1.0 })
    }
}

impl ExternalEncoder for HashAdapter {
    fn id(&self) -> &str {
        &self.id
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn encode(&self, tokens: &[String]) -> Result<Vec<f32>> {
        let mut v = vec![0f32; self.dim];
        for t in tokens {
            let (i, s) = self.bucket(&format!("u:{t}"));
            v[i] += s;
        }
        for w in tokens.windows(2) {
            let (i, s) = self.bucket(&format!("b:{} {}", w[0], w[1]));
            v[i] += 0.5 * s;
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
    fn pooling(&self) -> &str {
        "feature-hash"
    }
}

/// Writes a vector as `u32` little-endian length followed by `f32` LE values.
pub fn write_vector(w: &mut impl Write, v: &[f32]) -> std::io::Result<()> {
    w.write_all(&(v.len() as u32).to_le_bytes())?;
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_vector(r: &mut impl Read) -> std::io::Result<Vec<f32>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let n = u32::from_le_bytes(len) as usize;
    let mut buf = vec![0u8; 4 * n];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

/// Talks to a long-running child process. Each request is one line of
/// space-separated tokens on the child's stdin; each reply is one
/// length-prefixed little-endian `f32` vector on its stdout.
pub struct SubprocessAdapter {
    id: String,
    program: String,
    args: Vec<String>,
    dim: usize,
    pooling: String,
    child: Mutex<Option<(Child, ChildStdin, BufReader<ChildStdout>)>>,
}

impl SubprocessAdapter {
    pub fn new(program: impl Into<String>, args: Vec<String>, dim: usize) -> Result<Self> {
        let program = program.into();
        if program.trim().is_empty() {
            return Err(Error::AdapterNotConfigured("empty adapter command".into()));
        }
        Ok(SubprocessAdapter {
            id: format!("subprocess:{program}"),
            program,
            args,
            dim,
            pooling: "adapter-defined".into(),
            child: Mutex::new(None),
        })
    }

    pub fn with_pooling(mut self, pooling: impl Into<String>) -> Self {
        self.pooling = pooling.into();
        self
    }

    fn spawn(&self) -> Result<(Child, ChildStdin, BufReader<ChildStdout>)> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::AdapterCallFailed(format!("spawning `{}`: {e}", self.program)))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok((child, stdin, stdout))
    }
}

impl ExternalEncoder for SubprocessAdapter {
    fn id(&self) -> &str {
        &self.id
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn pooling(&self) -> &str {
        &self.pooling
    }
    fn encode(&self, tokens: &[String]) -> Result<Vec<f32>> {
        let mut guard = self.child.lock().expect("adapter lock");
        if guard.is_none() {
            *guard = Some(self.spawn()?);
        }
        let (_, stdin, stdout) = guard.as_mut().expect("spawned");
        let fail = |e: std::io::Error| Error::AdapterCallFailed(format!("`{}`: {e}", self.program));
        writeln!(stdin, "{}", tokens.join(" ")).map_err(fail)?;
        stdin.flush().map_err(fail)?;
        let v = read_vector(stdout).map_err(fail)?;
        if v.len() != self.dim {
            return Err(Error::AdapterCallFailed(format!(
                "`{}` returned {} values, expected {}",
                self.program,
                v.len(),
                self.dim
            )));
        }
        Ok(v)
    }
}

impl Drop for SubprocessAdapter {
    fn drop(&mut self) {
        if let Ok(mut guard) = self.child.lock() {
            if let Some((mut child, stdin, _)) = guard.take() {
                drop(stdin);
                let _ = child.wait();
            }
        }
    }
}

/// Memoizes an external encoder by `(adapter id, token sequence)`.
pub struct CachedAdapter {
    inner: Arc<dyn ExternalEncoder>,
    cache: Mutex<HashMap<Vec<String>, Vec<f32>>>,
    calls: AtomicUsize,
}

impl CachedAdapter {
    pub fn new(inner: Arc<dyn ExternalEncoder>) -> Self {
        CachedAdapter {
            inner,
            cache: Mutex::new(HashMap::new()),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn id(&self) -> &str {
        self.inner.id()
    }

    pub fn dim(&self) -> usize {
        self.inner.dim()
    }

    pub fn pooling(&self) -> &str {
        self.inner.pooling()
    }

    /// Number of calls that reached the wrapped adapter.
    pub fn inner_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<f32>> {
        if let Some(v) = self.cache.lock().expect("cache lock").get(tokens) {
            return Ok(v.clone());
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let v = self.inner.encode(tokens)?;
        if v.len() != self.inner.dim() || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::AdapterCallFailed(format!(
                "adapter `{}` returned a malformed vector (len {}, expected {})",
                self.inner.id(),
                v.len(),
                self.inner.dim()
            )));
        }
        self.cache
            .lock()
            .expect("cache lock")
            .insert(tokens.to_vec(), v.clone());
        Ok(v)
    }
}

impl std::fmt::Debug for CachedAdapter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CachedAdapter")
            .field("id", &self.inner.id())
            .field("dim", &self.inner.dim())
            .finish()
    }
}

/// Pooled sentence vector from an external adapter.
pub fn external_encode(adapter: Option<&CachedAdapter>, u: &Utterance) -> Result<UtteranceEmbedding> {
    let adapter = adapter.ok_or_else(|| Error::AdapterNotConfigured("no external encoder attached".into()))?;
    let v = adapter.encode(&u.tokens)?;
    Ok(UtteranceEmbedding {
        source_dim: v.len(),
        values: v.into_iter().map(f64::from).collect(),
    })
}

/// Encoder layers addressed through slots in a shared [`ParamStore`].
#[derive(Debug, Clone)]
pub enum EncoderNet {
    MeanEmbed { embedding: Embedding },
    Recurrent { embedding: Embedding, rnn: BiLstm },
    External { adapter: Arc<CachedAdapter> },
}

#[derive(Debug, Clone)]
pub enum EncodeCache {
    MeanEmbed { ids: Vec<usize> },
    Recurrent { ids: Vec<usize>, rnn: BiLstmCache },
    External,
}

impl EncoderNet {
    pub fn build(
        spec: &EncoderSpec,
        vocab_len: usize,
        adapter: Option<Arc<CachedAdapter>>,
        store: &mut ParamStore,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        spec.validate()?;
        Ok(match spec.kind {
            EncoderKind::ToyMeanEmbed => EncoderNet::MeanEmbed {
                embedding: Embedding::new(store, "encoder.embedding", vocab_len, spec.embed_dim, rng),
            },
            EncoderKind::ToyRecurrent => EncoderNet::Recurrent {
                embedding: Embedding::new(store, "encoder.embedding", vocab_len, spec.embed_dim, rng),
                rnn: BiLstm::new(store, "encoder.rnn", spec.embed_dim, spec.out_dim / 2, rng),
            },
            EncoderKind::ExternalAdapter => {
                let adapter = adapter.ok_or_else(|| {
                    Error::AdapterNotConfigured("external_adapter encoder requires an adapter".into())
                })?;
                if adapter.dim() != spec.out_dim {
                    return Err(Error::Shape(format!(
                        "adapter `{}` produces {} values but out_dim is {}",
                        adapter.id(),
                        adapter.dim(),
                        spec.out_dim
                    )));
                }
                EncoderNet::External { adapter }
            }
        })
    }

    pub fn output_dim(&self) -> usize {
        match self {
            EncoderNet::MeanEmbed { embedding } => embedding.dim,
            EncoderNet::Recurrent { rnn, .. } => rnn.output_dim(),
            EncoderNet::External { adapter } => adapter.dim(),
        }
    }

    pub fn adapter(&self) -> Option<&Arc<CachedAdapter>> {
        match self {
            EncoderNet::External { adapter } => Some(adapter),
            _ => None,
        }
    }

    /// Encodes a token sequence. External adapters see the raw tokens; toy
    /// encoders map unknown tokens to `<unk>`.
    pub fn forward(&self, p: &ParamStore, vocab: &Vocab, tokens: &[String]) -> Result<(Vec<f64>, EncodeCache)> {
        if tokens.is_empty() {
            return Err(Error::Argument("cannot encode an empty token sequence".into()));
        }
        match self {
            EncoderNet::MeanEmbed { embedding } => {
                let ids = vocab.ids(tokens);
                let rows: Vec<Vec<f64>> = ids.iter().map(|&i| embedding.row(p, i).to_vec()).collect();
                Ok((mean_rows(&rows), EncodeCache::MeanEmbed { ids }))
            }
            EncoderNet::Recurrent { embedding, rnn } => {
                let ids = vocab.ids(tokens);
                let xs: Vec<&[f64]> = ids.iter().map(|&i| embedding.row(p, i)).collect();
                let (states, cache) = rnn.forward(p, &xs);
                Ok((mean_rows(&states), EncodeCache::Recurrent { ids, rnn: cache }))
            }
            EncoderNet::External { adapter } => Ok((
                adapter.encode(tokens)?.into_iter().map(f64::from).collect(),
                EncodeCache::External,
            )),
        }
    }

    pub fn backward(&self, p: &ParamStore, cache: &EncodeCache, dout: &[f64], grad: &mut [f64]) {
        match (self, cache) {
            (EncoderNet::MeanEmbed { embedding }, EncodeCache::MeanEmbed { ids }) => {
                let scale = 1.0 / ids.len() as f64;
                let d: Vec<f64> = dout.iter().map(|v| v * scale).collect();
                for &i in ids {
                    embedding.accumulate(grad, i, &d);
                }
            }
            (EncoderNet::Recurrent { embedding, rnn }, EncodeCache::Recurrent { ids, rnn: rc }) => {
                let scale = 1.0 / ids.len() as f64;
                let d: Vec<f64> = dout.iter().map(|v| v * scale).collect();
                let douts = vec![d; ids.len()];
                let xs: Vec<&[f64]> = ids.iter().map(|&i| embedding.row(p, i)).collect();
                let dxs = rnn.backward(p, &xs, rc, &douts, grad);
                for (&i, dx) in ids.iter().zip(&dxs) {
                    embedding.accumulate(grad, i, dx);
                }
            }
            (EncoderNet::External { .. }, EncodeCache::External) => {}
            _ => unreachable!("encoder cache does not match encoder"),
        }
    }
}

/// `out = hᵀ M` for a row-major `in_dim x out_dim` matrix.
pub fn project(matrix: &[f64], in_dim: usize, out_dim: usize, h: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; out_dim];
    for (i, &hi) in h.iter().enumerate().take(in_dim) {
        if hi == 0.0 {
            continue;
        }
        add_scaled(&mut out, &matrix[i * out_dim..(i + 1) * out_dim], hi);
    }
    out
}

fn add_scaled(acc: &mut [f64], x: &[f64], s: f64) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += s * b;
    }
}

/// Learned global linear map from encoder width `B` to model width `d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DownsampleLayer {
    pub matrix: Slot,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DownsampleLayer {
    pub fn new(store: &mut ParamStore, in_dim: usize, out_dim: usize, rng: &mut StreamRng) -> Result<Self> {
        if out_dim == 0 || out_dim > in_dim {
            return Err(Error::Argument(format!(
                "downsampler needs 0 < d <= B, got d = {out_dim}, B = {in_dim}"
            )));
        }
        let matrix = store.alloc_uniform("downsampler.matrix", &[in_dim, out_dim], in_dim, rng);
        Ok(DownsampleLayer {
            matrix,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, p: &ParamStore, h: &[f64]) -> Vec<f64> {
        project(p.get(self.matrix), self.in_dim, self.out_dim, h)
    }

    pub fn backward(&self, p: &ParamStore, h: &[f64], dout: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let m = p.get(self.matrix);
        let g = &mut grad[self.matrix.range()];
        let mut dh = vec![0.0; self.in_dim];
        for i in 0..self.in_dim {
            let row = &m[i * self.out_dim..(i + 1) * self.out_dim];
            add_scaled(&mut g[i * self.out_dim..(i + 1) * self.out_dim], dout, h[i]);
            dh[i] = row.iter().zip(dout).map(|(a, b)| a * b).sum();
        }
        dh
    }
}

/// Standalone downsampler value, e.g. one read back from a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Downsampler {
    /// Row-major `in_dim x out_dim`.
    pub matrix: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Downsampler {
    pub fn new(matrix: Vec<f64>, in_dim: usize, out_dim: usize) -> Result<Self> {
        if matrix.len() != in_dim * out_dim {
            return Err(Error::Shape(format!(
                "downsampler matrix has {} entries, expected {in_dim} x {out_dim}",
                matrix.len()
            )));
        }
        if out_dim > in_dim {
            return Err(Error::Argument(format!(
                "downsampler needs d <= B, got {out_dim} > {in_dim}"
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("downsampler matrix has non-finite entries".into()));
        }
        Ok(Downsampler {
            matrix,
            in_dim,
            out_dim,
        })
    }

    /// `hᵀ · matrix`: linear, no bias, no activation.
    pub fn downsample(&self, h: &UtteranceEmbedding) -> Result<Vec<f64>> {
        if h.values.len() != self.in_dim {
            return Err(Error::Shape(format!(
                "embedding has {} values, downsampler expects {}",
                h.values.len(),
                self.in_dim
            )));
        }
        Ok(project(&self.matrix, self.in_dim, self.out_dim, &h.values))
    }
}

/// A self-contained utterance encoder with its own parameters.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub net: EncoderNet,
}

impl Encoder {
    pub fn new(spec: EncoderSpec, vocab: Vocab, adapter: Option<Arc<CachedAdapter>>) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = init_rng(spec.seed);
        let net = EncoderNet::build(&spec, vocab.len(), adapter, &mut params, &mut rng)?;
        Ok(Encoder {
            spec,
            vocab,
            params,
            net,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.net.output_dim()
    }

    /// Deterministic: depends only on the utterance tokens.
    pub fn encode_utterance(&self, u: &Utterance) -> Result<UtteranceEmbedding> {
        let (values, _) = self.net.forward(&self.params, &self.vocab, &u.tokens)?;
        Ok(UtteranceEmbedding {
            source_dim: values.len(),
            values,
        })
    }

    pub fn encode_tokens(&self, tokens: &[String]) -> Result<Vec<f64>> {
        Ok(self.net.forward(&self.params, &self.vocab, tokens)?.0)
    }
}

/// Runs [`HashAdapter`] behind the subprocess protocol: token lines in,
/// length-prefixed vectors out. Used as a reference adapter process.
pub fn serve_hash_adapter(dim: usize, input: impl BufRead, mut output: impl Write) -> std::io::Result<()> {
    let adapter = HashAdapter::new(dim);
    for line in input.lines() {
        let tokens: Vec<String> = line?.split_whitespace().map(str::to_string).collect();
        let v = adapter.encode(&tokens).expect("hash adapter is infallible");
        write_vector(&mut output, &v)?;
        output.flush()?;
    }
    Ok(())
}
