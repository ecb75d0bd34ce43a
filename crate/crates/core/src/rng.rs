use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent deterministic stream `stream` under `seed`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// Stream ids for model components. Keeping each component on its own stream
// means adding or removing one (e.g. the prompt module) leaves every other
// component's initialization bit-identical.
pub(crate) const STREAM_ENCODER: u64 = 1;
pub(crate) const STREAM_DECODER: u64 = 2;
pub(crate) const STREAM_CONNECTOR: u64 = 3;
pub(crate) const STREAM_PROMPT: u64 = 4;
pub(crate) const STREAM_GRADCHECK: u64 = 5;
/// LoRA adapters take `STREAM_LORA_BASE + 1000 * generation + index`.
pub(crate) const STREAM_LORA_BASE: u64 = 1 << 20;
pub(crate) const STREAM_SHUFFLE: u64 = 1 << 30;
/// Dataset samples take `STREAM_DATA | split << 40 | index`.
pub(crate) const STREAM_DATA: u64 = 1 << 48;
