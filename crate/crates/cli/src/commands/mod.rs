pub mod ablate;
pub mod bench_latency;
pub mod bench_mem;
pub mod encode;
pub mod inspect;
pub mod toy_train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams derived from the run seed.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Stream {
    Weights = 1,
    Tokens = 2,
    Baseline = 3,
    Frames = 4,
}

pub(crate) fn rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream as u64);
    r
}

/// Runs `$body` with `$F` bound to the scalar type the precision selects.
macro_rules! with_precision {
    ($p:expr, $F:ident => $body:expr) => {
        match $p {
            $crate::config::Precision::Single => {
                type $F = f32;
                $body
            }
            $crate::config::Precision::Double => {
                type $F = f64;
                $body
            }
        }
    };
}
pub(crate) use with_precision;
