//! Binary model container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DBNCKPT1"                    8-byte ASCII tag
//! u32 L                         number of RBM layers, L >= 1
//! u32 × (L+1)                   layer sizes, visible first
//! u32 C                         classes; 0 for a bare pretrained stack
//! f64 × P                       per layer W (row-major), b, c; then U (row-major), d
//! u64 n, n bytes                JSON trailer: strategy, hyper, history
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierParams, Network};
use crate::dbn::DbnParams;
use crate::error::{Error, Result};
use crate::history::RunHistory;
use crate::hyper::Hyper;
use crate::strategies::{StrategyId, TrainedModel};

pub const TAG: &[u8; 8] = b"DBNCKPT1";

#[derive(Serialize, Deserialize)]
struct Trailer {
    strategy: Option<StrategyId>,
    hyper: Hyper,
    history: RunHistory,
}

/// Network parameters plus metadata as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Stored {
    pub dbn: DbnParams,
    /// `None` when the container holds a pretrained stack without a head.
    pub head: Option<ClassifierParams>,
    pub strategy: Option<StrategyId>,
    pub hyper: Hyper,
    pub history: RunHistory,
}

pub fn encode(stored: &Stored) -> Result<Vec<u8>> {
    let arch = stored.dbn.architecture();
    let classes = stored.head.as_ref().map_or(0, |h| h.classes());
    let mut params = stored.dbn.flatten();
    if let Some(h) = &stored.head {
        params.extend(h.flatten());
    }
    let trailer = serde_json::to_vec(&Trailer {
        strategy: stored.strategy,
        hyper: stored.hyper.clone(),
        history: stored.history.clone(),
    })?;

    let mut out = Vec::with_capacity(8 + 4 * (arch.len() + 2) + 8 * params.len() + 8 + trailer.len());
    out.extend_from_slice(TAG);
    out.extend((stored.dbn.depth() as u32).to_le_bytes());
    for d in arch {
        out.extend((d as u32).to_le_bytes());
    }
    out.extend((classes as u32).to_le_bytes());
    for p in params {
        out.extend(p.to_le_bytes());
    }
    out.extend((trailer.len() as u64).to_le_bytes());
    out.extend(trailer);
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::CheckpointTruncated(format!(
                "{what}: need {n} bytes at offset {}, have {}",
                self.at,
                self.bytes.len() - self.at
            ))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Stored> {
    let mut cur = Cursor { bytes, at: 0 };
    let tag = cur.take(8, "tag")?;
    if tag != TAG {
        return Err(Error::CheckpointVersion(String::from_utf8_lossy(tag).into_owned()));
    }
    let depth = cur.u32("layer count")?;
    if depth == 0 {
        return Err(Error::CheckpointInconsistent("zero layers".into()));
    }
    // Every layer size costs four bytes, so a huge count is caught here.
    if depth > bytes.len() / 4 {
        return Err(Error::CheckpointTruncated(format!("{depth} layer sizes")));
    }
    let arch: Vec<usize> = (0..=depth).map(|_| cur.u32("layer sizes")).collect::<Result<_>>()?;
    if arch.contains(&0) {
        return Err(Error::CheckpointInconsistent(format!("zero-width layer in {arch:?}")));
    }
    let classes = cur.u32("class count")?;
    let top = *arch.last().unwrap();
    let dbn_len: usize = arch.windows(2).map(|d| d[0] * d[1] + d[0] + d[1]).sum();
    let total = dbn_len + classes * top + classes;
    let raw = cur.take(total * 8, "parameters")?;
    let params: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let n = u64::from_le_bytes(cur.take(8, "trailer length")?.try_into().unwrap()) as usize;
    let trailer: Trailer = serde_json::from_slice(cur.take(n, "trailer")?)
        .map_err(|e| Error::CheckpointInconsistent(format!("trailer: {e}")))?;
    if cur.at != bytes.len() {
        return Err(Error::CheckpointInconsistent(format!(
            "{} bytes after the trailer",
            bytes.len() - cur.at
        )));
    }

    let inconsistent = |e: Error| Error::CheckpointInconsistent(e.to_string());
    let dbn = DbnParams::from_flat(&arch, &params[..dbn_len]).map_err(inconsistent)?;
    let head = if classes == 0 {
        None
    } else {
        let net = Network::from_flat(&arch, classes, &params).map_err(inconsistent)?;
        Some(net.head)
    };
    Ok(Stored {
        dbn,
        head,
        strategy: trailer.strategy,
        hyper: trailer.hyper,
        history: trailer.history,
    })
}

pub fn save_checkpoint(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(&Stored {
        dbn: model.network.dbn.clone(),
        head: Some(model.network.head.clone()),
        strategy: Some(model.strategy),
        hyper: model.hyper.clone(),
        history: model.history.clone(),
    })?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let stored = decode(&fs::read(path)?)?;
    let (Some(head), Some(strategy)) = (stored.head, stored.strategy) else {
        return Err(Error::CheckpointInconsistent(
            "container holds a pretrained stack, not a trained model".into(),
        ));
    };
    Ok(TrainedModel {
        network: Network::new(stored.dbn, head).map_err(|e| Error::CheckpointInconsistent(e.to_string()))?,
        strategy,
        hyper: stored.hyper,
        history: stored.history,
    })
}

/// Stores a pretrained stack (no classifier head).
pub fn save_pretrained(
    dbn: &DbnParams,
    hyper: &Hyper,
    reconstruction: &[Vec<f64>],
    path: impl AsRef<Path>,
) -> Result<()> {
    let bytes = encode(&Stored {
        dbn: dbn.clone(),
        head: None,
        strategy: None,
        hyper: hyper.clone(),
        history: RunHistory {
            pretrain: reconstruction.to_vec(),
            epochs: Vec::new(),
        },
    })?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_stored(path: impl AsRef<Path>) -> Result<Stored> {
    decode(&fs::read(path)?)
}
