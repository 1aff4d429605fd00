//! Key to hash slot mapping.
//!
//! A key's slot is the CRC-16/XMODEM checksum of the key modulo the slot
//! count. When the key contains a non-empty `{...}` section, only the text
//! between the first `{` and the next `}` is hashed, so keys sharing a tag
//! land on the same slot.

use crc::{Crc, CRC_16_XMODEM};

pub const DEFAULT_NUM_SLOTS: u32 = 16384;

const CRC16: Crc<u16> = Crc::<u16>::new(&CRC_16_XMODEM);

/// The part of `key` that determines its slot.
pub fn hash_tag(key: &[u8]) -> &[u8] {
    if let Some(open) = key.iter().position(|&b| b == b'{') {
        if let Some(len) = key[open + 1..].iter().position(|&b| b == b'}') {
            if len > 0 {
                return &key[open + 1..open + 1 + len];
            }
        }
    }
    key
}

pub fn slot_for_key(key: &[u8], num_slots: u32) -> u32 {
    assert!(num_slots > 0, "slot count must be positive");
    u32::from(CRC16.checksum(hash_tag(key))) % num_slots
}
