//! Global worker-pool setup.
//!
//! The `FBM_THREADS` environment variable caps how many worker threads the
//! crate's parallel loops may use. Parallelism never changes results: every
//! parallel section maps independent jobs to an ordered collection and
//! reduces sequentially, so outputs are byte-identical for any thread count.

use std::sync::Once;

static INIT: Once = Once::new();

/// Install the global pool on first use, honoring `FBM_THREADS`.
///
/// Later calls are no-ops; if another component already installed a global
/// pool, that pool wins silently.
pub(crate) fn ensure_pool() {
    INIT.call_once(|| {
        if let Ok(v) = std::env::var("FBM_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new()
                        .num_threads(n)
                        .build_global();
                }
            }
        }
    });
}
