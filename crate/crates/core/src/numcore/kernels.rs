//! Dense matrix products and the multiply-accumulate counter.
//!
//! Every matrix product in the crate goes through [`gemm`], which bumps a
//! thread-local counter by `m * k * n` when counting is enabled. The
//! profiler uses this as the instrumented oracle for its analytic MACs.

use std::cell::Cell;

thread_local! {
    static MAC_COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Run `f` with MAC counting enabled and return its result and the number
/// of multiply-accumulates performed by matrix products inside it.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let previous = MAC_COUNTER.with(|c| c.replace(Some(0)));
    let out = f();
    let counted = MAC_COUNTER.with(|c| c.replace(previous)).unwrap_or(0);
    if let Some(outer) = previous {
        MAC_COUNTER.with(|c| c.set(Some(outer + counted)));
    }
    (out, counted)
}

fn record(macs: u64) {
    MAC_COUNTER.with(|c| {
        if let Some(n) = c.get() {
            c.set(Some(n + macs));
        }
    });
}

/// How an operand is laid out in its row-major buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Stored as given: `rows x cols`.
    Normal,
    /// Stored transposed: the buffer holds `cols x rows`.
    Transposed,
}

/// `c (m x n) += a (m x k) * b (k x n)` where `a`/`b` may be stored
/// transposed. `c` must already be sized and is accumulated into.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    record((m * k * n) as u64);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: strides describe exactly the m*k, k*n and m*n buffers above,
    // whose lengths are checked in debug builds and by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
