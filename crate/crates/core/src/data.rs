//! Synthetic alignment task: each token holds its class template for a
//! random number of frames, so the ground-truth alignment is monotone and
//! known exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::FIRST_CONTENT;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyTaskConfig {
    /// Total vocabulary including the two reserved symbols.
    pub vocab_size: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub feature_dim: usize,
    pub noise: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub seed: u64,
}

impl ToyTaskConfig {
    pub fn noiseless() -> Self {
        Self { vocab_size: 12, min_duration: 2, max_duration: 4, feature_dim: 16, noise: 0.0, min_tokens: 3, max_tokens: 8, seed: 7 }
    }

    pub fn noisy() -> Self {
        Self { noise: 1.0, max_duration: 5, ..Self::noiseless() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < FIRST_CONTENT + 1 {
            return Err(Error::Config("vocab_size must be at least 3".into()));
        }
        if self.min_duration < 1 || self.min_duration > self.max_duration {
            return Err(Error::Config(format!("duration range [{}, {}] is invalid", self.min_duration, self.max_duration)));
        }
        if self.min_tokens < 1 || self.min_tokens > self.max_tokens {
            return Err(Error::Config(format!("token-count range [{}, {}] is invalid", self.min_tokens, self.max_tokens)));
        }
        if self.feature_dim < 1 {
            return Err(Error::Config("feature_dim must be at least 1".into()));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Config(format!("noise level {} must be finite and non-negative", self.noise)));
        }
        Ok(())
    }

    pub fn content_tokens(&self) -> usize {
        self.vocab_size - FIRST_CONTENT
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub features: Matrix,
    pub tokens: Vec<usize>,
    /// 1-based frame index of the last frame of each token.
    pub ends: Vec<usize>,
}

/// Class templates plus a seeded sampler for one task configuration.
#[derive(Clone, Debug)]
pub struct ToyTask {
    cfg: ToyTaskConfig,
    templates: Matrix,
}

impl ToyTask {
    pub fn new(cfg: ToyTaskConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (v, d) = (cfg.vocab_size, cfg.feature_dim);
        let data = (0..v * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok(Self { templates: Matrix::new(v, d, data)?, cfg })
    }

    pub fn config(&self) -> &ToyTaskConfig {
        &self.cfg
    }

    /// `V x d_feat`; rows of reserved symbols are unused.
    pub fn templates(&self) -> &Matrix {
        &self.templates
    }

    /// `n` utterances from an independent random stream; distinct streams
    /// give disjoint train/dev/test draws over the same templates.
    pub fn generate(&self, n: usize, stream: u64) -> Result<Vec<Utterance>> {
        if n < 1 {
            return Err(Error::Config("dataset size must be at least 1".into()));
        }
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream + 1);
        let content = cfg.content_tokens();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let len = rng.random_range(cfg.min_tokens..=cfg.max_tokens);
            let mut tokens = Vec::with_capacity(len);
            let mut ends = Vec::with_capacity(len);
            let mut rows = Vec::new();
            for _ in 0..len {
                // adjacent repeats would merge into one indistinguishable segment
                let tok = loop {
                    let t = FIRST_CONTENT + rng.random_range(0..content);
                    if content == 1 || tokens.last() != Some(&t) {
                        break t;
                    }
                };
                let dur = rng.random_range(cfg.min_duration..=cfg.max_duration);
                for _ in 0..dur {
                    for &base in self.templates.row(tok) {
                        let eps: f64 = StandardNormal.sample(&mut rng);
                        rows.push(base + cfg.noise * eps);
                    }
                }
                tokens.push(tok);
                ends.push(rows.len() / cfg.feature_dim);
            }
            let frames = rows.len() / cfg.feature_dim;
            out.push(Utterance { features: Matrix::new(frames, cfg.feature_dim, rows)?, tokens, ends });
        }
        Ok(out)
    }
}

pub fn gen_toy_dataset(cfg: &ToyTaskConfig, n: usize) -> Result<Vec<Utterance>> {
    ToyTask::new(cfg.clone())?.generate(n, 0)
}

const DATA_MAGIC: &[u8; 8] = b"DACSDATA";
const DATA_VERSION: u32 = 1;

fn put_u64(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    w.write_all(&(v as u64).to_le_bytes())
}

pub(crate) struct Reader<R> {
    inner: R,
    path: std::path::PathBuf,
}

impl<R: Read> Reader<R> {
    pub(crate) fn new(inner: R, path: &Path) -> Self {
        Self { inner, path: path.to_path_buf() }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.inner.read_exact(&mut buf).map_err(|e| self.truncated(e))?;
        Ok(buf)
    }

    fn truncated(&self, e: std::io::Error) -> Error {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(&self.path, "file ends early")
        } else {
            Error::io(&self.path, e)
        }
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let mut b = [0; 4];
        self.inner.read_exact(&mut b).map_err(|e| self.truncated(e))?;
        Ok(u32::from_le_bytes(b))
    }

    pub(crate) fn u64(&mut self) -> Result<usize> {
        let mut b = [0; 8];
        self.inner.read_exact(&mut b).map_err(|e| self.truncated(e))?;
        usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::format(&self.path, "length overflows usize"))
    }

    /// A length field, sanity-limited so corrupt files fail cleanly.
    pub(crate) fn len(&mut self, limit: usize, what: &str) -> Result<usize> {
        let n = self.u64()?;
        if n > limit {
            return Err(Error::format(&self.path, format!("{what} {n} exceeds limit {limit}")));
        }
        Ok(n)
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.bytes(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect())
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 8], version: u32) -> Result<()> {
        if &self.bytes(8)?[..] != expected {
            return Err(Error::format(&self.path, "bad magic bytes"));
        }
        let v = self.u32()?;
        if v != version {
            return Err(Error::format(&self.path, format!("unsupported version {v}")));
        }
        Ok(())
    }

    pub(crate) fn finish(mut self) -> Result<()> {
        let mut rest = [0u8; 1];
        match self.inner.read(&mut rest) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::format(&self.path, "trailing bytes")),
            Err(e) => Err(Error::io(&self.path, e)),
        }
    }
}

const LIMIT: usize = 1 << 32;

/// Little-endian binary cache: magic, version, task config as JSON, then
/// per utterance the frame matrix, tokens and alignment ends.
pub fn save_dataset(path: &Path, cfg: &ToyTaskConfig, data: &[Utterance]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let json = serde_json::to_vec(cfg).expect("task config serializes");
    let io = |e| Error::io(path, e);
    (|| -> std::io::Result<()> {
        w.write_all(DATA_MAGIC)?;
        w.write_all(&DATA_VERSION.to_le_bytes())?;
        put_u64(&mut w, json.len())?;
        w.write_all(&json)?;
        put_u64(&mut w, data.len())?;
        for u in data {
            put_u64(&mut w, u.features.rows())?;
            put_u64(&mut w, u.features.cols())?;
            for v in u.features.data() {
                w.write_all(&v.to_le_bytes())?;
            }
            put_u64(&mut w, u.tokens.len())?;
            for (&t, &e) in u.tokens.iter().zip(&u.ends) {
                put_u64(&mut w, t)?;
                put_u64(&mut w, e)?;
            }
        }
        w.flush()
    })()
    .map_err(io)
}

pub fn load_dataset(path: &Path) -> Result<(ToyTaskConfig, Vec<Utterance>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(BufReader::new(file), path);
    r.magic(DATA_MAGIC, DATA_VERSION)?;
    let n = r.len(1 << 24, "config length")?;
    let cfg: ToyTaskConfig =
        serde_json::from_slice(&r.bytes(n)?).map_err(|e| Error::format(path, format!("config: {e}")))?;
    let count = r.len(LIMIT, "utterance count")?;
    let mut data = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let rows = r.len(LIMIT, "frame count")?;
        let cols = r.len(LIMIT, "feature width")?;
        let values = r.f64s(rows * cols)?;
        let features = Matrix::new(rows, cols, values).map_err(|e| Error::format(path, e.to_string()))?;
        let len = r.len(LIMIT, "token count")?;
        let mut tokens = Vec::with_capacity(len);
        let mut ends = Vec::with_capacity(len);
        for _ in 0..len {
            tokens.push(r.u64()?);
            ends.push(r.u64()?);
        }
        data.push(Utterance { features, tokens, ends });
    }
    r.finish()?;
    Ok((cfg, data))
}
