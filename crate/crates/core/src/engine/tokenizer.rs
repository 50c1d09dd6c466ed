//! Byte-level tokenizer: ids 0..=255 are bytes, then BOS and EOS.

use crate::error::{Error, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const BYTE_VOCAB: usize = 258;

pub fn tokenize(text: &[u8]) -> Vec<u32> {
    std::iter::once(BOS)
        .chain(text.iter().map(|&b| u32::from(b)))
        .collect()
}

/// Inverse of [`tokenize`]; BOS and EOS produce no bytes.
pub fn detokenize(ids: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            0..=255 => out.push(id as u8),
            BOS | EOS => {}
            _ => return Err(Error::input(format!("token id {id} outside byte vocabulary"))),
        }
    }
    Ok(out)
}
