//! MoE layer shape, weights, synthetic generation and the `MOE1` weight file.
//!
//! Synthetic weights come from a SplitMix64 stream (`rand_xoshiro::SplitMix64`
//! seeded with `seed_from_u64(seed)`, i.e. the raw seed as initial state).
//! Each `f32` consumes one `u64`: the top 24 bits give `u = k / 2^24` in
//! `[0, 1)` and the weight is `scale * (2u - 1)`. Matrices are drawn in file
//! order: router, then per expert gate, up and down (drawn `D x N` row-major,
//! then stored transposed), then the shared expert in the same order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Neuron tile processed by one unit of sparse work.
pub const TILE: usize = 64;

pub const DEFAULT_ALIGN_BLOCK: usize = 64;

const MAGIC: &[u8; 4] = b"MOE1";
const HEADER_LEN: usize = 4 + 6 * 4;
const FLAG_SHARED: u32 = 1;
const FLAG_RENORMALIZE: u32 = 1 << 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MoEConfig {
    pub n_experts: usize,
    pub top_k: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    /// Shared-expert FFN width; zero when the layer has no shared expert.
    pub d_shared: usize,
    pub renormalize: bool,
    /// Block size used when aligning dispatch groups.
    pub align_block: usize,
}

impl MoEConfig {
    pub fn new(n_experts: usize, top_k: usize, d_model: usize, d_ffn: usize) -> Self {
        Self {
            n_experts,
            top_k,
            d_model,
            d_ffn,
            d_shared: 0,
            renormalize: true,
            align_block: DEFAULT_ALIGN_BLOCK,
        }
    }

    pub fn with_shared(mut self, d_shared: usize) -> Self {
        self.d_shared = d_shared;
        self
    }

    pub fn with_renormalize(mut self, renormalize: bool) -> Self {
        self.renormalize = renormalize;
        self
    }

    pub fn has_shared(&self) -> bool {
        self.d_shared > 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 {
            return Err(Error::config("n_experts must be at least 1"));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::config(format!(
                "top_k must be in 1..={}, got {}",
                self.n_experts, self.top_k
            )));
        }
        if self.d_model == 0 || self.d_ffn == 0 {
            return Err(Error::config("d_model and d_ffn must be at least 1"));
        }
        if self.align_block == 0 {
            return Err(Error::config("align_block must be at least 1"));
        }
        Ok(())
    }

    /// Capacity of the per-token active-index buffer: `K * N` rounded up to
    /// a multiple of 32.
    pub fn k_total_pad(&self) -> usize {
        (self.top_k * self.d_ffn).div_ceil(32) * 32
    }
}

/// Gate, up and transposed down projections of one SwiGLU FFN.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertWeights {
    /// `N x D`
    pub gate: Matrix,
    /// `N x D`
    pub up: Matrix,
    /// `N x D`, row `n` is column `n` of the `D x N` down projection.
    pub down_t: Matrix,
}

impl ExpertWeights {
    pub fn width(&self) -> usize {
        self.gate.rows()
    }

    fn check(&self, n: usize, d: usize, what: &str) -> Result<()> {
        for (name, m) in [("gate", &self.gate), ("up", &self.up), ("down_t", &self.down_t)] {
            if m.rows() != n || m.cols() != d {
                return Err(Error::shape(format!(
                    "{what} {name} is {}x{}, expected {n}x{d}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoELayerWeights {
    pub config: MoEConfig,
    /// `E x D`
    pub router: Matrix,
    pub experts: Vec<ExpertWeights>,
    pub shared: Option<ExpertWeights>,
}

impl MoELayerWeights {
    pub fn new(
        config: MoEConfig,
        router: Matrix,
        experts: Vec<ExpertWeights>,
        shared: Option<ExpertWeights>,
    ) -> Result<Self> {
        config.validate()?;
        let (e, d, n) = (config.n_experts, config.d_model, config.d_ffn);
        if router.rows() != e || router.cols() != d {
            return Err(Error::shape(format!(
                "router is {}x{}, expected {e}x{d}",
                router.rows(),
                router.cols()
            )));
        }
        if experts.len() != e {
            return Err(Error::shape(format!("{} experts given, expected {e}", experts.len())));
        }
        for (i, ex) in experts.iter().enumerate() {
            ex.check(n, d, &format!("expert {i}"))?;
        }
        match (&shared, config.has_shared()) {
            (Some(s), true) => s.check(config.d_shared, d, "shared expert")?,
            (None, false) => {}
            _ => return Err(Error::shape("shared expert presence disagrees with d_shared")),
        }
        Ok(Self {
            config,
            router,
            experts,
            shared,
        })
    }

    pub fn expert(&self, e: usize) -> Result<&ExpertWeights> {
        self.experts.get(e).ok_or(Error::Index {
            index: e,
            len: self.experts.len(),
        })
    }

    fn matrices(&self) -> impl Iterator<Item = &Matrix> {
        std::iter::once(&self.router)
            .chain(self.experts.iter().chain(self.shared.iter()).flat_map(|x| [&x.gate, &x.up, &x.down_t]))
    }

    /// Exact size of the serialized weight file.
    pub fn file_len(&self) -> usize {
        HEADER_LEN + self.matrices().map(Matrix::byte_len).sum::<usize>()
    }
}

/// Maps one SplitMix64 output to a uniform value in `[-scale, scale)`.
#[inline]
fn uniform_from_bits(bits: u64, scale: f32) -> f32 {
    let u = (bits >> 40) as f32 * (1.0 / (1u32 << 24) as f32);
    scale * (2.0 * u - 1.0)
}

fn uniform_matrix(rng: &mut SplitMix64, rows: usize, cols: usize, scale: f32) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| uniform_from_bits(rng.next_u64(), scale))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("uniform draws are finite")
}

fn synthetic_expert(rng: &mut SplitMix64, n: usize, d: usize, scale: f32) -> ExpertWeights {
    let gate = uniform_matrix(rng, n, d, scale);
    let up = uniform_matrix(rng, n, d, scale);
    let down = uniform_matrix(rng, d, n, scale);
    ExpertWeights {
        gate,
        up,
        down_t: down.transpose(),
    }
}

/// Deterministic i.i.d. uniform weights in `[-scale, scale)`.
pub fn generate_synthetic(config: MoEConfig, seed: u64, scale: f32) -> Result<MoELayerWeights> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::config(format!("scale must be positive and finite, got {scale}")));
    }
    config.validate()?;
    let mut rng = SplitMix64::seed_from_u64(seed);
    let (e, d, n) = (config.n_experts, config.d_model, config.d_ffn);
    let router = uniform_matrix(&mut rng, e, d, scale);
    let experts = (0..e).map(|_| synthetic_expert(&mut rng, n, d, scale)).collect();
    let shared = config
        .has_shared()
        .then(|| synthetic_expert(&mut rng, config.d_shared, d, scale));
    MoELayerWeights::new(config, router, experts, shared)
}

/// `rows x d_model` i.i.d. standard-normal inputs (Ziggurat sampling over the
/// same SplitMix64 stream).
pub fn synthetic_tokens(rows: usize, d_model: usize, seed: u64) -> Matrix {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let data = (0..rows * d_model)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, d_model, data).expect("normal draws are finite")
}

pub fn encode_weights(w: &MoELayerWeights) -> Vec<u8> {
    let c = &w.config;
    let mut flags = 0u32;
    if c.has_shared() {
        flags |= FLAG_SHARED;
    }
    if c.renormalize {
        flags |= FLAG_RENORMALIZE;
    }
    let mut out = Vec::with_capacity(w.file_len());
    out.extend_from_slice(MAGIC);
    for v in [c.n_experts, c.top_k, c.d_model, c.d_ffn, c.d_shared] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&flags.to_le_bytes());
    for m in w.matrices() {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_weights(w: &MoELayerWeights, path: impl AsRef<Path>) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(&encode_weights(w))?;
    f.flush()?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<MoELayerWeights> {
    decode_weights(&fs::read(path)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Matrix> {
        let start = self.pos;
        let bytes = self.take(rows * cols * 4, what)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Matrix::from_vec(rows, cols, data).map_err(|e| Error::Format {
            offset: start as u64,
            msg: format!("{what}: {e}"),
        })
    }

    fn expert(&mut self, n: usize, d: usize, what: &str) -> Result<ExpertWeights> {
        Ok(ExpertWeights {
            gate: self.matrix(n, d, &format!("{what} gate"))?,
            up: self.matrix(n, d, &format!("{what} up"))?,
            down_t: self.matrix(n, d, &format!("{what} down_t"))?,
        })
    }
}

pub fn decode_weights(buf: &[u8]) -> Result<MoELayerWeights> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {:?}", String::from_utf8_lossy(magic)),
        });
    }
    let mut dims = [0usize; 5];
    for (slot, name) in dims.iter_mut().zip(["E", "K", "D", "N", "d_shared"]) {
        *slot = r.u32(name)? as usize;
    }
    let flags_at = r.pos as u64;
    let flags = r.u32("flags")?;
    let [e, k, d, n, d_shared] = dims;
    let has_shared = flags & FLAG_SHARED != 0;
    if flags & !(FLAG_SHARED | FLAG_RENORMALIZE) != 0 || has_shared != (d_shared > 0) {
        return Err(Error::Format {
            offset: flags_at,
            msg: format!("inconsistent flags {flags:#x} for d_shared={d_shared}"),
        });
    }
    let config = MoEConfig {
        n_experts: e,
        top_k: k,
        d_model: d,
        d_ffn: n,
        d_shared,
        renormalize: flags & FLAG_RENORMALIZE != 0,
        align_block: DEFAULT_ALIGN_BLOCK,
    };
    config.validate().map_err(|err| Error::Format {
        offset: 4,
        msg: err.to_string(),
    })?;
    let router = r.matrix(e, d, "router")?;
    let experts = (0..e)
        .map(|i| r.expert(n, d, &format!("expert {i}")))
        .collect::<Result<Vec<_>>>()?;
    let shared = if has_shared {
        Some(r.expert(d_shared, d, "shared expert")?)
    } else {
        None
    };
    if r.pos != buf.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: format!("{} trailing bytes", buf.len() - r.pos),
        });
    }
    MoELayerWeights::new(config, router, experts, shared)
}
