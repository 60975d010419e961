//! Shared plumbing: seeded RNG derivation, float formatting for artifacts,
//! hashing, and atomic file writes.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

/// Stream tags for deriving independent RNG streams from one base seed.
/// Every source of randomness in the crate names its stream so that adding a
/// consumer never shifts the draws of another.
pub mod stream {
    pub const EPISODE: u64 = 0x45504953;
    pub const SPAWN: u64 = 0x5350574e;
    pub const DISTURB: u64 = 0x44535442;
    pub const FLOW_SAMPLE: u64 = 0x464c4f57;
    pub const SHUFFLE: u64 = 0x5348464c;
    pub const TRAIN_NOISE: u64 = 0x544e4f49;
    pub const INIT: u64 = 0x494e4954;
    pub const EVAL: u64 = 0x4556414c;
    pub const HARVEST: u64 = 0x48525653;
    pub const ADAPTER: u64 = 0x41445054;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and a stream/index tag.
pub fn derive(base: u64, tag: u64) -> u64 {
    splitmix64(base ^ splitmix64(tag))
}

/// Derive a child seed from a base seed and several tags (stream, indices).
pub fn derive_n(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(base, |acc, &t| derive(acc, t))
}

/// The crate-wide RNG. ChaCha8 is portable and stable across releases, which
/// the byte-identical rerun guarantees depend on.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Render a float with 17 significant digits so that parsing the text
/// reproduces the exact f64 bit pattern.
pub fn fmt_f64(x: f64) -> String {
    debug_assert!(x.is_finite(), "artifacts never contain non-finite floats");
    format!("{:.16e}", x)
}

/// Escape a string for embedding in a JSON document.
pub fn json_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out
}

/// Join float slices as a JSON array with exact formatting.
pub fn json_f64_array(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| fmt_f64(*v)).collect();
    format!("[{}]", parts.join(","))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{:02x}", b)).collect()
}

/// Write a file atomically: write to a temp sibling, then rename over the
/// destination.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp-{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or(""),
        std::process::id()
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}
