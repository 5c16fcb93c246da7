//! LSB-first bit packing of low-bit integer codes.
//!
//! Codes are laid out back to back with no per-byte alignment: code `i`
//! occupies bits `[i * bits, (i + 1) * bits)` of the little-endian bit stream.
//! The high bits of the final byte are zero.

use crate::error::{Error, Result};

pub fn packed_len(count: usize, bits: u8) -> usize {
    (count * bits as usize).div_ceil(8)
}

fn check_bits(bits: u8) -> Result<()> {
    if (1..=8).contains(&bits) {
        Ok(())
    } else {
        Err(Error::Invalid(format!("bit width {bits} outside 1..=8")))
    }
}

pub fn pack_codes(codes: &[u8], bits: u8) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let limit = ((1u16 << bits) - 1) as u8;
    let mut out = Vec::with_capacity(packed_len(codes.len(), bits));
    let mut acc: u32 = 0;
    let mut filled = 0u32;
    for &code in codes {
        if code > limit {
            return Err(Error::CodeOutOfRange { code, bits });
        }
        acc |= (code as u32) << filled;
        filled += bits as u32;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
    Ok(out)
}

pub fn unpack_codes(bytes: &[u8], bits: u8, count: usize) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let needed = packed_len(count, bits);
    if bytes.len() < needed {
        return Err(Error::Truncated(format!(
            "{count} codes of {bits} bits need {needed} bytes, got {}",
            bytes.len()
        )));
    }
    let mask = (1u32 << bits) - 1;
    let mut out = Vec::with_capacity(count);
    let mut acc: u32 = 0;
    let mut filled = 0u32;
    let mut src = bytes.iter();
    for _ in 0..count {
        while filled < bits as u32 {
            acc |= (*src.next().unwrap() as u32) << filled;
            filled += 8;
        }
        out.push((acc & mask) as u8);
        acc >>= bits;
        filled -= bits as u32;
    }
    Ok(out)
}
