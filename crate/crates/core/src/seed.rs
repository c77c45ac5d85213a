//! Hierarchical seed derivation. Every random stream in a run is derived
//! from one master seed through named splits, so streams never overlap and
//! any stream can be rebuilt from the master seed alone.

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines a parent seed with a child index.
pub fn mix(parent: u64, child: u64) -> u64 {
    splitmix64(parent ^ splitmix64(child))
}

/// Combines a parent seed with a stream name.
pub fn split(parent: u64, name: &str) -> u64 {
    // FNV-1a over the name, then mixed with the parent.
    let h = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    });
    mix(parent, h)
}
