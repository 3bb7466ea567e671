//! Versioned little-endian checkpoint container.
//!
//! Layout, in order:
//!
//! ```text
//! magic    8 bytes  "CMLABCK\0"
//! major    u16
//! minor    u16
//! kind     u8       0 = score network, 1 = consistency model, 2 = Gaussian oracle
//! iter     u64
//! config   str      JSON echo of the run config
//! layout   u32 count, then per tensor: str name, u32 rank, u64 dims
//! online   f64 array
//! target   f64 array
//! opt      u8 tag (0 none, 1 sgd, 2 adam), then lr and rule constants,
//!          u64 step count, f64 array first moment, f64 array second moment
//! rng      32-byte seed, u64 stream, u128 word position
//! ext      u32 count of (str tag, u64 length, bytes) blocks
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8, an `f64 array` is a u64
//! length followed by IEEE-754 values. Readers accept any minor version of
//! their major and skip extension blocks they do not know.

use std::path::Path;

use cmlab_core::nn::ParamShape;
use cmlab_core::optim::{Optimizer, OptimizerConfig};
use cmlab_core::Rng;
use rand::SeedableRng;

use crate::error::{LabError, Result};
use crate::io::atomic_write;

const MAGIC: &[u8; 8] = b"CMLABCK\0";
pub const FORMAT_MAJOR: u16 = 1;
pub const FORMAT_MINOR: u16 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Score,
    Consistency,
    /// Closed-form consistency function of `N(mean, variance I)`; the online
    /// array holds the mean followed by the variance.
    GaussianOracle,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            ModelKind::Score => 0,
            ModelKind::Consistency => 1,
            ModelKind::GaussianOracle => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(ModelKind::Score),
            1 => Ok(ModelKind::Consistency),
            2 => Ok(ModelKind::GaussianOracle),
            other => Err(LabError::Checkpoint(format!("unknown model kind {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Score => "score",
            ModelKind::Consistency => "consistency",
            ModelKind::GaussianOracle => "gaussian_oracle",
        }
    }
}

/// Full generator state: the next draw after [`RngState::restore`] equals
/// the next draw of the captured generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> Rng {
        let mut rng = Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub major: u16,
    pub minor: u16,
    pub kind: ModelKind,
    pub iteration: u64,
    pub config: String,
    pub layout: Vec<ParamShape>,
    pub online: Vec<f64>,
    pub target: Vec<f64>,
    pub optimizer: Option<Optimizer>,
    pub rng: RngState,
    /// Extension blocks carried through unchanged.
    pub extensions: Vec<(String, Vec<u8>)>,
}

impl Checkpoint {
    pub fn new(kind: ModelKind, config: String, layout: Vec<ParamShape>, online: Vec<f64>, target: Vec<f64>, rng: &Rng) -> Self {
        Self {
            major: FORMAT_MAJOR,
            minor: FORMAT_MINOR,
            kind,
            iteration: 0,
            config,
            layout,
            online,
            target,
            optimizer: None,
            rng: RngState::capture(rng),
            extensions: Vec::new(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::with_capacity(64 + 16 * (self.online.len() + self.target.len())));
        w.bytes(MAGIC);
        w.u16(self.major);
        w.u16(self.minor);
        w.u8(self.kind.tag());
        w.u64(self.iteration);
        w.str(&self.config);
        w.u32(self.layout.len() as u32);
        for p in &self.layout {
            w.str(&p.name);
            w.u32(p.shape.len() as u32);
            p.shape.iter().for_each(|&d| w.u64(d as u64));
        }
        w.f64s(&self.online);
        w.f64s(&self.target);
        match &self.optimizer {
            None => w.u8(0),
            Some(opt) => {
                match *opt.config() {
                    OptimizerConfig::Sgd { lr, momentum } => {
                        w.u8(1);
                        [lr, momentum].iter().for_each(|&v| w.f64(v));
                    }
                    OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                        w.u8(2);
                        [lr, beta1, beta2, eps].iter().for_each(|&v| w.f64(v));
                    }
                }
                w.u64(opt.steps());
                w.f64s(opt.first_moment());
                w.f64s(opt.second_moment());
            }
        }
        w.bytes(&self.rng.seed);
        w.u64(self.rng.stream);
        w.bytes(&self.rng.word_pos.to_le_bytes());
        w.u32(self.extensions.len() as u32);
        for (tag, data) in &self.extensions {
            w.str(tag);
            w.u64(data.len() as u64);
            w.bytes(data);
        }
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(LabError::Checkpoint("not a checkpoint file".into()));
        }
        let major = r.u16()?;
        let minor = r.u16()?;
        if major != FORMAT_MAJOR {
            return Err(LabError::Checkpoint(format!(
                "format version {major}.{minor} is not readable by this build (major {FORMAT_MAJOR})"
            )));
        }
        let kind = ModelKind::from_tag(r.u8()?)?;
        let iteration = r.u64()?;
        let config = r.str()?;
        let count = r.u32()? as usize;
        let mut layout = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            layout.push(ParamShape { name, shape });
        }
        let online = r.f64s()?;
        let target = r.f64s()?;
        let optimizer = match r.u8()? {
            0 => None,
            tag @ (1 | 2) => {
                let config = if tag == 1 {
                    OptimizerConfig::Sgd { lr: r.f64()?, momentum: r.f64()? }
                } else {
                    OptimizerConfig::Adam { lr: r.f64()?, beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()? }
                };
                let steps = r.u64()?;
                let first = r.f64s()?;
                let second = r.f64s()?;
                Some(Optimizer::from_state(config, steps, first, second).map_err(|e| LabError::Checkpoint(e.to_string()))?)
            }
            other => return Err(LabError::Checkpoint(format!("unknown optimizer tag {other}"))),
        };
        let mut seed = [0u8; 32];
        seed.copy_from_slice(r.take(32)?);
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let mut extensions = Vec::new();
        for _ in 0..r.u32()? {
            let tag = r.str()?;
            let len = r.u64()? as usize;
            extensions.push((tag, r.take(len)?.to_vec()));
        }
        if r.pos != bytes.len() {
            return Err(LabError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let ck = Self {
            major,
            minor,
            kind,
            iteration,
            config,
            layout,
            online,
            target,
            optimizer,
            rng: RngState { seed, stream, word_pos },
            extensions,
        };
        ck.check()?;
        Ok(ck)
    }

    fn check(&self) -> Result<()> {
        let expected: usize = self.layout.iter().map(ParamShape::numel).sum();
        if self.kind != ModelKind::GaussianOracle && self.online.len() != expected {
            return Err(LabError::Checkpoint(format!(
                "layout describes {expected} parameters, online array has {}",
                self.online.len()
            )));
        }
        if !self.target.is_empty() && self.target.len() != self.online.len() {
            return Err(LabError::Checkpoint("online and target arrays differ in length".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| LabError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::decode(&bytes).map_err(|e| match e {
            LabError::Checkpoint(msg) => LabError::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| LabError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| LabError::Checkpoint("string is not UTF-8".into()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| LabError::Checkpoint("array length overflows".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}
