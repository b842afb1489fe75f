//! Small shared helpers: seeded RNG streams and PSD matrix factors.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Independent, reproducible RNG stream `stream` of a master seed. Parallel
/// workers each derive their own stream so results do not depend on thread
/// count or scheduling.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_mul(2) + 1);
    rng
}

/// Factor F with `m = F F^T` for a symmetric PSD matrix, via the eigen square
/// root. Tolerates singular and (slightly) indefinite inputs by clamping
/// eigenvalues at zero.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = 0.5 * (m + m.transpose());
    let eig = sym.symmetric_eigen();
    let mut f = eig.eigenvectors.clone();
    for j in 0..f.ncols() {
        let s = eig.eigenvalues[j].max(0.0).sqrt();
        for i in 0..f.nrows() {
            f[(i, j)] *= s;
        }
    }
    f
}
