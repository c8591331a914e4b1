//! Named sub-seeds: every random stream derives from one root seed and a
//! label, so adding a stream never perturbs the others.

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the stream `name` under `root`.
pub fn sub_seed(root: u64, name: &str) -> u64 {
    // FNV-1a over the label, then mixed with the root.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(root ^ splitmix64(h))
}

/// Seed for the `i`-th member of a family of streams.
pub fn indexed_seed(root: u64, name: &str, i: u64) -> u64 {
    splitmix64(sub_seed(root, name).wrapping_add(i))
}
