//! Binary checkpoint format: magic + version header, a config echo, the
//! exact rng states, the iteration counter, and a named f64 tensor table
//! (weights and optimizer velocities) in little-endian layout.
//!
//! Every parse error reports the byte offset of the first inconsistency so
//! corrupt or truncated files are easy to diagnose.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"WSOD1";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    Io(String),
    /// What went wrong and at which byte offset it was detected.
    Corrupt { offset: usize, what: String },
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(msg) => write!(f, "{msg}"),
            CheckpointError::Corrupt { offset, what } => {
                write!(f, "corrupt checkpoint at byte {offset}: {what}")
            }
        }
    }
}

impl std::error::Error for CheckpointError {}

/// Serializable snapshot of a deterministic rng.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to resume training exactly where it stopped.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_text: String,
    pub iteration: u64,
    pub data_rng: RngState,
    pub model_rng: RngState,
    /// Named tensors: model weights plus `vel.`-prefixed velocities.
    pub tensors: Vec<(String, Tensor)>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    fn rng(&mut self, s: &RngState) {
        self.bytes(&s.seed);
        self.u64(s.stream);
        self.u128(s.word_pos);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn corrupt<T>(&self, what: impl Into<String>) -> Result<T, CheckpointError> {
        Err(CheckpointError::Corrupt { offset: self.pos, what: what.into() })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return self.corrupt(format!(
                "truncated while reading {what} ({n} bytes needed, {} left)",
                self.buf.len() - self.pos
            ));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn u128(&mut self, what: &str) -> Result<u128, CheckpointError> {
        Ok(u128::from_le_bytes(self.take(16, what)?.try_into().unwrap()))
    }

    fn str(&mut self, what: &str) -> Result<String, CheckpointError> {
        let len = self.u32(what)? as usize;
        let start = self.pos;
        let bytes = self.take(len, what)?;
        match std::str::from_utf8(bytes) {
            Ok(s) => Ok(s.to_string()),
            Err(_) => Err(CheckpointError::Corrupt {
                offset: start,
                what: format!("{what} is not valid utf-8"),
            }),
        }
    }

    fn rng(&mut self, what: &str) -> Result<RngState, CheckpointError> {
        let seed: [u8; 32] = self.take(32, what)?.try_into().unwrap();
        let stream = self.u64(what)?;
        let word_pos = self.u128(what)?;
        Ok(RngState { seed, stream, word_pos })
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.str(&self.config_text);
        w.u64(self.iteration);
        w.rng(&self.data_rng);
        w.rng(&self.model_rng);
        w.u32(self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            w.str(name);
            w.buf.push(0); // dtype code 0 = f64
            w.buf.push(t.rank() as u8);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            for v in t.data() {
                w.buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint, CheckpointError> {
        let mut r = Reader::new(buf);
        let magic = r.take(MAGIC.len(), "magic")?;
        if magic != MAGIC {
            return Err(CheckpointError::Corrupt {
                offset: 0,
                what: format!("bad magic {magic:?}, expected {MAGIC:?}"),
            });
        }
        let ver_at = r.pos;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::Corrupt {
                offset: ver_at,
                what: format!("unsupported version {version}, expected {VERSION}"),
            });
        }
        let config_text = r.str("config echo")?;
        let iteration = r.u64("iteration")?;
        let data_rng = r.rng("data rng state")?;
        let model_rng = r.rng("model rng state")?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count);
        for i in 0..count {
            let name = r.str("tensor name")?;
            let dtype_at = r.pos;
            let dtype = r.take(1, "dtype")?[0];
            if dtype != 0 {
                return Err(CheckpointError::Corrupt {
                    offset: dtype_at,
                    what: format!("tensor {i} has dtype code {dtype}, only 0 (f64) is defined"),
                });
            }
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("dimension")? as usize);
            }
            let numel: usize = shape.iter().product();
            let payload_at = r.pos;
            let payload = r.take(numel * 8, "tensor payload")?;
            let data: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::from_vec(shape, data).map_err(|e| CheckpointError::Corrupt {
                offset: payload_at,
                what: format!("tensor {name:?}: {e}"),
            })?;
            tensors.push((name, t));
        }
        if r.pos != buf.len() {
            return Err(CheckpointError::Corrupt {
                offset: r.pos,
                what: format!("{} trailing bytes after the tensor table", buf.len() - r.pos),
            });
        }
        Ok(Checkpoint { config_text, iteration, data_rng, model_rng, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let buf = std::fs::read(path)
            .map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))?;
        Checkpoint::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let _ = rng.random::<f64>(); // advance so word_pos is interesting
        Checkpoint {
            config_text: "seed = 17\nbatch_size = 2\n".into(),
            iteration: 42,
            data_rng: RngState::capture(&rng),
            model_rng: RngState::capture(&ChaCha8Rng::seed_from_u64(18)),
            tensors: vec![
                ("a.w".into(), Tensor::from_vec(vec![2, 3], vec![1.0, -2.5, 0.0, 4.0, 5.0, 6.25]).unwrap()),
                ("vel.a.w".into(), Tensor::zeros(vec![2, 3])),
                ("b".into(), Tensor::scalar(0.125)),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.config_text, ck.config_text);
        assert_eq!(back.iteration, ck.iteration);
        assert_eq!(back.data_rng, ck.data_rng);
        assert_eq!(back.model_rng, ck.model_rng);
        assert_eq!(back.tensors.len(), ck.tensors.len());
        for ((n1, t1), (n2, t2)) in back.tensors.iter().zip(&ck.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let bits2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits1, bits2);
        }
    }

    #[test]
    fn rng_state_restores_the_exact_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..13 {
            let _ = rng.random::<u64>();
        }
        let state = RngState::capture(&rng);
        let mut restored = state.restore();
        for _ in 0..50 {
            assert_eq!(rng.random::<u64>(), restored.random::<u64>());
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.iteration, 42);
        assert_eq!(back.tensors[0].1.data(), ck.tensors[0].1.data());
    }

    #[test]
    fn bad_magic_is_rejected_at_offset_zero() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        match Checkpoint::from_bytes(&bytes) {
            Err(CheckpointError::Corrupt { offset: 0, .. }) => {}
            other => panic!("expected corrupt-at-0, got {other:?}"),
        }
    }

    #[test]
    fn wrong_version_is_rejected_at_its_offset() {
        let mut bytes = sample().to_bytes();
        bytes[5] = 99;
        match Checkpoint::from_bytes(&bytes) {
            Err(CheckpointError::Corrupt { offset: 5, what }) => {
                assert!(what.contains("version"), "{what}");
            }
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_reports_the_failing_offset() {
        let bytes = sample().to_bytes();
        for cut in [3, 8, 20, bytes.len() / 2, bytes.len() - 1] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(CheckpointError::Corrupt { offset, what }) => {
                    assert!(offset <= cut, "offset {offset} beyond cut {cut}");
                    assert!(!what.is_empty());
                }
                other => panic!("cut at {cut}: expected corrupt, got {other:?}"),
            }
        }
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let mut bytes = sample().to_bytes();
        let end = bytes.len();
        bytes.push(0);
        match Checkpoint::from_bytes(&bytes) {
            Err(CheckpointError::Corrupt { offset, .. }) => assert_eq!(offset, end),
            other => panic!("expected trailing-byte error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_dtype_is_rejected() {
        let ck = sample();
        let bytes = ck.to_bytes();
        // find the first tensor's dtype byte: it follows the name "a.w"
        let name_pos = bytes.windows(3).position(|w| w == b"a.w").unwrap();
        let mut bad = bytes.clone();
        bad[name_pos + 3] = 7;
        match Checkpoint::from_bytes(&bad) {
            Err(CheckpointError::Corrupt { what, .. }) => assert!(what.contains("dtype"), "{what}"),
            other => panic!("expected dtype error, got {other:?}"),
        }
    }
}
