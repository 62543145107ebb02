//! Binary time-tag files.
//!
//! Little-endian. A 16-byte header (`b"TTAG"`, version `u16`, 10 reserved
//! zero bytes) is followed by fixed 16-byte records: `u64` timestamp in ps,
//! `u8` channel (0 = A, 1 = B), 7 pad bytes. Records are written in time
//! order, ties broken by channel.

use std::io::{self, Read, Write};

use itertools::Itertools;
use thiserror::Error;

use crate::Channel;

pub const MAGIC: [u8; 4] = *b"TTAG";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;
pub const RECORD_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum TtagError {
    #[error("not a time-tag file (bad magic)")]
    BadMagic,
    #[error("unsupported time-tag version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated file: {0} trailing bytes")]
    Truncated(usize),
    #[error("record {index}: unknown channel {channel}")]
    BadChannel { index: usize, channel: u8 },
    #[error("record {index}: timestamps go backwards")]
    Unsorted { index: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Per-channel tag lists, each sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TagSet {
    pub tags: [Vec<u64>; 2],
}

impl TagSet {
    pub fn channel(&self, ch: Channel) -> &[u64] {
        &self.tags[ch.index()]
    }

    pub fn len(&self) -> usize {
        self.tags[0].len() + self.tags[1].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn first_last(&self) -> Option<(u64, u64)> {
        let first = self.tags.iter().filter_map(|t| t.first()).min()?;
        let last = self.tags.iter().filter_map(|t| t.last()).max()?;
        Some((*first, *last))
    }

    /// All records in file order.
    pub fn records(&self) -> impl Iterator<Item = (u64, Channel)> + '_ {
        let a = self.tags[0].iter().map(|&t| (t, Channel::A));
        let b = self.tags[1].iter().map(|&t| (t, Channel::B));
        a.merge_by(b, |x, y| x <= y)
    }
}

pub fn write<W: Write>(mut w: W, tags: &TagSet) -> Result<(), TtagError> {
    let mut header = [0u8; HEADER_LEN];
    header[..4].copy_from_slice(&MAGIC);
    header[4..6].copy_from_slice(&VERSION.to_le_bytes());
    w.write_all(&header)?;
    let mut rec = [0u8; RECORD_LEN];
    for (t, ch) in tags.records() {
        rec[..8].copy_from_slice(&t.to_le_bytes());
        rec[8] = ch.index() as u8;
        w.write_all(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<TagSet, TtagError> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => TtagError::BadMagic,
        _ => TtagError::Io(e),
    })?;
    if header[..4] != MAGIC {
        return Err(TtagError::BadMagic);
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != VERSION {
        return Err(TtagError::UnsupportedVersion(version));
    }
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() % RECORD_LEN != 0 {
        return Err(TtagError::Truncated(body.len() % RECORD_LEN));
    }
    let mut out = TagSet::default();
    let mut prev = 0u64;
    for (index, rec) in body.chunks_exact(RECORD_LEN).enumerate() {
        let t = u64::from_le_bytes(rec[..8].try_into().expect("8 bytes"));
        let ch = Channel::from_index(rec[8]).ok_or(TtagError::BadChannel {
            index,
            channel: rec[8],
        })?;
        if t < prev {
            return Err(TtagError::Unsorted { index });
        }
        prev = t;
        out.tags[ch.index()].push(t);
    }
    Ok(out)
}
