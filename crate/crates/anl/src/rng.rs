//! Deterministic random-number plumbing.
//!
//! Every stochastic component draws from its own ChaCha stream derived from
//! one master seed, so adding draws to one component never shifts another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

/// Stream ids reserved per component. Epoch-indexed components add the epoch
/// (or round) number to their base, so bases are spaced far apart.
pub mod stream {
    pub const WORLD_LATENTS: u64 = 1;
    pub const WORLD_CAMERAS: u64 = 2;
    pub const WORLD_ASSIGN: u64 = 3;
    pub const WORLD_NOISE: u64 = 4;
    pub const WORLD_SHIFT: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const VARIANT_OP: u64 = 7;

    pub const INIT_ENCODER: u64 = 0x100;
    pub const INIT_SOURCE_HEAD: u64 = 0x101;
    pub const INIT_DISCRIMINATOR: u64 = 0x102;
    /// Auxiliary-model head re-init, plus the round number.
    pub const INIT_AUX_HEAD: u64 = 0x110;
    /// Main-model head re-init, plus the round number.
    pub const INIT_MAIN_HEAD: u64 = 0x180;

    /// Feature-alignment batch order, plus the epoch number.
    pub const FDA_BATCH: u64 = 0x10_000;
    /// Per-epoch variant regeneration, plus the epoch number.
    pub const FDA_VARIANT: u64 = 0x20_000;
    /// Label-correction stage batches: base plus `round * 0x100 + epoch`.
    pub const RSS_STAGE1: u64 = 0x30_000;
    pub const RSS_STAGE2: u64 = 0x40_000;
    /// Main training epoch batches, plus the epoch number.
    pub const MAIN_BATCH: u64 = 0x50_000;
    /// Outlier-variant perturbations in main training, plus the epoch number.
    pub const MAIN_VARIANT: u64 = 0x60_000;
}

/// An rng for one component: one master seed, one stream id.
pub fn component_rng(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
