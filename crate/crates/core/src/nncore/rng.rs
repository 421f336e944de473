use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Fixed stream offsets so each component draws from its own sequence of the
/// run seed regardless of how much the others consume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RngStream {
    Data = 1,
    Sampling = 2,
    CorrInit = 3,
    CorrTrain = 4,
    PolicyInit = 5,
    PolicyTrain = 6,
    Eval = 7,
}

pub fn component_rng(seed: u64, stream: RngStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
