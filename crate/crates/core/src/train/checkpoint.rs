//! Single-file binary checkpoints: model configuration, alphabet, all
//! parameter tensors, optional optimizer state, and training metadata,
//! sealed with a trailing whole-file checksum.
//!
//! Layout (all integers and floats little-endian): an 8-byte magic, a
//! format version, the model configuration, the alphabet (with its own
//! digest), named tensor records, the optional Adam state, the epoch
//! counter and best validation loss, then a SHA-256 of everything above.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ctc::Alphabet;
use crate::model::{ModelConfig, ModelParams, RnnKind};
use crate::tensor::Tensor;
use crate::train::AdamState;

const MAGIC: &[u8; 8] = b"CRNNCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("checkpoint integrity: {0}")]
    Integrity(String),
    #[error("checkpoint format version {found} is not supported (this build reads version {supported})")]
    Version { found: u32, supported: u32 },
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub alphabet: Alphabet,
    pub adam: Option<AdamState>,
    pub epoch: u32,
    pub best_val_loss: f64,
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_str(out: &mut Vec<u8>, s: &str) {
    push_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn push_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    push_str(out, name);
    push_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        push_u32(out, d as u32);
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize to the on-disk byte layout, checksum included.
pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, FORMAT_VERSION);

    let config = &ckpt.params.config;
    push_u32(&mut out, config.input_height as u32);
    push_u32(&mut out, config.input_width as u32);
    push_u32(&mut out, config.conv_channels.len() as u32);
    for &c in &config.conv_channels {
        push_u32(&mut out, c as u32);
    }
    push_u32(&mut out, config.rnn_hidden as u32);
    out.push(match config.rnn_kind {
        RnnKind::Simple => 0,
        RnnKind::Gru => 1,
    });
    out.push(u8::from(config.bidirectional));
    push_u32(&mut out, config.alphabet_size as u32);

    let alphabet: String = ckpt.alphabet.chars().iter().collect();
    push_str(&mut out, &alphabet);
    out.extend_from_slice(&Sha256::digest(alphabet.as_bytes()));

    let named = ckpt.params.named_tensors();
    push_u32(&mut out, named.len() as u32);
    for (name, t) in &named {
        push_tensor(&mut out, name, t);
    }

    match &ckpt.adam {
        None => out.push(0),
        Some(state) => {
            out.push(1);
            out.extend_from_slice(&state.step.to_le_bytes());
            for moments in [&state.m, &state.v] {
                push_u32(&mut out, moments.len() as u32);
                for ((name, _), t) in named.iter().zip(moments) {
                    push_tensor(&mut out, name, t);
                }
            }
        }
    }

    push_u32(&mut out, ckpt.epoch);
    out.extend_from_slice(&ckpt.best_val_loss.to_le_bytes());

    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let slice = &self.buf[self.pos..end];
                self.pos = end;
                Ok(slice)
            }
            None => Err(CheckpointError::Format(format!(
                "file ends inside {what}"
            ))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String, CheckpointError> {
        let len = self.u32(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| CheckpointError::Format(format!("{what} is not valid utf-8")))
    }

    fn tensor_into(&mut self, expected_name: &str, target: &mut Tensor) -> Result<(), CheckpointError> {
        let name = self.string("tensor name")?;
        if name != expected_name {
            return Err(CheckpointError::Format(format!(
                "expected tensor {expected_name}, found {name}"
            )));
        }
        let ndim = self.u32("tensor rank")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(self.u32("tensor extent")? as usize);
        }
        if dims != target.shape() {
            return Err(CheckpointError::Format(format!(
                "tensor {name} has shape {dims:?}, expected {:?}",
                target.shape()
            )));
        }
        let n = target.data().len();
        let payload = self.take(n * 8, "tensor payload")?;
        for (slot, chunk) in target.data_mut().iter_mut().zip(payload.chunks_exact(8)) {
            *slot = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(())
    }
}

/// Parse checkpoint bytes, verifying the trailing checksum before
/// trusting any field.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(CheckpointError::Integrity(format!(
            "file is {} bytes, too short to be a checkpoint",
            bytes.len()
        )));
    }
    let (body, stored) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored {
        return Err(CheckpointError::Integrity(
            "checksum mismatch, the file is corrupt or truncated".into(),
        ));
    }

    let mut cur = Cursor { buf: body, pos: 0 };
    let magic = cur.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::Format(
            "bad magic, not a checkpoint file".into(),
        ));
    }
    let version = cur.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }

    let input_height = cur.u32("input height")? as usize;
    let input_width = cur.u32("input width")? as usize;
    let n_conv = cur.u32("conv layer count")? as usize;
    let mut conv_channels = Vec::with_capacity(n_conv);
    for _ in 0..n_conv {
        conv_channels.push(cur.u32("conv channels")? as usize);
    }
    let rnn_hidden = cur.u32("rnn hidden size")? as usize;
    let rnn_kind = match cur.u8("rnn kind")? {
        0 => RnnKind::Simple,
        1 => RnnKind::Gru,
        other => {
            return Err(CheckpointError::Format(format!(
                "unknown rnn kind tag {other}"
            )))
        }
    };
    let bidirectional = match cur.u8("bidirectional flag")? {
        0 => false,
        1 => true,
        other => {
            return Err(CheckpointError::Format(format!(
                "bidirectional flag must be 0 or 1, found {other}"
            )))
        }
    };
    let alphabet_size = cur.u32("alphabet size")? as usize;
    let config = ModelConfig {
        input_height,
        input_width,
        conv_channels,
        rnn_hidden,
        rnn_kind,
        bidirectional,
        alphabet_size,
    };
    config
        .validate()
        .map_err(|e| CheckpointError::Format(e.to_string()))?;

    let alphabet_text = cur.string("alphabet")?;
    let stored_hash = cur.take(32, "alphabet digest")?;
    if Sha256::digest(alphabet_text.as_bytes()).as_slice() != stored_hash {
        return Err(CheckpointError::Integrity(
            "alphabet digest mismatch".into(),
        ));
    }
    let chars: Vec<char> = alphabet_text.chars().collect();
    let alphabet =
        Alphabet::new(&chars).map_err(|e| CheckpointError::Format(e.to_string()))?;
    if alphabet.size() != config.alphabet_size {
        return Err(CheckpointError::Format(format!(
            "alphabet has {} characters but the configuration says {}",
            alphabet.size(),
            config.alphabet_size
        )));
    }

    let mut params =
        ModelParams::zeros(&config).map_err(|e| CheckpointError::Format(e.to_string()))?;
    let expected_names: Vec<String> = params
        .named_tensors()
        .iter()
        .map(|(n, _)| n.clone())
        .collect();
    let n_tensors = cur.u32("tensor count")? as usize;
    if n_tensors != expected_names.len() {
        return Err(CheckpointError::Format(format!(
            "{n_tensors} tensors recorded, this architecture has {}",
            expected_names.len()
        )));
    }
    for (name, (_, target)) in expected_names.iter().zip(params.named_tensors_mut()) {
        cur.tensor_into(name, target)?;
    }

    let adam = match cur.u8("optimizer flag")? {
        0 => None,
        1 => {
            let step = cur.u64("optimizer step")?;
            let mut moments = Vec::new();
            for which in ["first", "second"] {
                let count = cur.u32("moment count")? as usize;
                if count != expected_names.len() {
                    return Err(CheckpointError::Format(format!(
                        "{count} {which}-moment tensors recorded, expected {}",
                        expected_names.len()
                    )));
                }
                let mut tensors = Vec::with_capacity(count);
                for (name, (_, param)) in
                    expected_names.iter().zip(params.named_tensors())
                {
                    let mut t = Tensor::zeros(param.shape().to_vec());
                    cur.tensor_into(name, &mut t)?;
                    tensors.push(t);
                }
                moments.push(tensors);
            }
            let v = moments.pop().unwrap();
            let m = moments.pop().unwrap();
            Some(AdamState { step, m, v })
        }
        other => {
            return Err(CheckpointError::Format(format!(
                "optimizer flag must be 0 or 1, found {other}"
            )))
        }
    };

    let epoch = cur.u32("epoch counter")?;
    let best_val_loss = cur.f64("best validation loss")?;
    if cur.pos != body.len() {
        return Err(CheckpointError::Format(format!(
            "{} unexpected trailing bytes",
            body.len() - cur.pos
        )));
    }

    Ok(Checkpoint {
        params,
        alphabet,
        adam,
        epoch,
        best_val_loss,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(ckpt)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}
