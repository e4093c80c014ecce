//! Chain files: `<id>.chain` holds canonical blocks back to back, `<id>.json`
//! is a sidecar with the ledger config and the recorded head hash.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{verify_blocks, Block, ChainReport, Ledger, LedgerConfig};
use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::hash::Digest;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad sidecar {path}: {source}")]
    Sidecar {
        path: PathBuf,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    #[serde(flatten)]
    pub config: LedgerConfig,
    pub head_hash: Digest,
    pub height: u64,
}

pub fn chain_path(dir: &Path, ledger_id: &str) -> PathBuf {
    dir.join(format!("{ledger_id}.chain"))
}

pub fn sidecar_path(dir: &Path, ledger_id: &str) -> PathBuf {
    dir.join(format!("{ledger_id}.json"))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode_chain(blocks: &[Block]) -> Vec<u8> {
    let mut enc = Encoder::new();
    for b in blocks {
        b.encode(&mut enc);
    }
    enc.into_bytes()
}

/// A chain file that stopped decoding part-way.
#[derive(Debug, Clone)]
pub struct PartialChain {
    pub blocks: Vec<Block>,
    pub failed_at: u64,
    pub error: DecodeError,
}

pub fn decode_chain(bytes: &[u8]) -> Result<Vec<Block>, PartialChain> {
    let mut dec = Decoder::new(bytes);
    let mut blocks = Vec::new();
    while !dec.is_at_end() {
        match Block::decode(&mut dec) {
            Ok(b) => blocks.push(b),
            Err(error) => {
                let failed_at = blocks.len() as u64;
                return Err(PartialChain {
                    blocks,
                    failed_at,
                    error,
                });
            }
        }
    }
    Ok(blocks)
}

/// Byte range of each block inside an encoded chain.
pub fn block_offsets(bytes: &[u8]) -> Vec<Range<usize>> {
    let mut dec = Decoder::new(bytes);
    let mut out = Vec::new();
    while !dec.is_at_end() {
        let start = dec.position();
        if Block::decode(&mut dec).is_err() {
            break;
        }
        out.push(start..dec.position());
    }
    out
}

pub fn save_ledger(dir: &Path, ledger: &Ledger) -> Result<(), StoreError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let chain = chain_path(dir, ledger.id());
    fs::write(&chain, encode_chain(ledger.blocks())).map_err(io_err(&chain))?;
    let sidecar = Sidecar {
        config: ledger.config().clone(),
        head_hash: ledger.tip_hash(),
        height: ledger.height(),
    };
    let side = sidecar_path(dir, ledger.id());
    let json = serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&side, json).map_err(io_err(&side))
}

pub fn read_sidecar(dir: &Path, ledger_id: &str) -> Result<Sidecar, StoreError> {
    let path = sidecar_path(dir, ledger_id);
    let raw = fs::read(&path).map_err(io_err(&path))?;
    serde_json::from_slice(&raw).map_err(|source| StoreError::Sidecar { path, source })
}

/// Verifies an encoded chain against its config and recorded head.
pub fn verify_chain_bytes(config: &LedgerConfig, head: Digest, bytes: &[u8]) -> ChainReport {
    match decode_chain(bytes) {
        Ok(blocks) => verify_blocks(config, &blocks, Some(head)),
        Err(partial) => {
            let prefix = verify_blocks(config, &partial.blocks, None);
            if !prefix.ok && !partial.blocks.is_empty() {
                return prefix;
            }
            ChainReport::bad(
                partial.failed_at,
                format!(
                    "block {} does not decode: {}",
                    partial.failed_at, partial.error
                ),
                partial.failed_at,
            )
        }
    }
}

pub fn verify_chain_file(dir: &Path, ledger_id: &str) -> Result<ChainReport, StoreError> {
    let sidecar = read_sidecar(dir, ledger_id)?;
    let path = chain_path(dir, ledger_id);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let mut report = verify_chain_bytes(&sidecar.config, sidecar.head_hash, &bytes);
    if report.ok && report.height != sidecar.height {
        report = ChainReport::bad(
            report.height,
            "chain height differs from sidecar",
            report.height,
        );
    }
    Ok(report)
}

/// Ledger ids with a sidecar in `dir`, sorted.
pub fn ledger_ids(dir: &Path) -> Result<Vec<String>, StoreError> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                if chain_path(dir, stem).exists() {
                    ids.push(stem.to_string());
                }
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn verify_dir(dir: &Path) -> Result<BTreeMap<String, ChainReport>, StoreError> {
    ledger_ids(dir)?
        .into_iter()
        .map(|id| Ok((id.clone(), verify_chain_file(dir, &id)?)))
        .collect()
}

/// Loads blocks from a chain file without verifying them.
pub fn load_blocks(
    dir: &Path,
    ledger_id: &str,
) -> Result<Result<Vec<Block>, PartialChain>, StoreError> {
    let path = chain_path(dir, ledger_id);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    Ok(decode_chain(&bytes))
}
