use std::cell::Cell;

/// Per-element FLOP charges shared by the instrumented kernels and the
/// analytic cost model. A multiply-add counts as 2.
pub mod flop_constants {
    /// max, subtract, exp, accumulate, divide.
    pub const SOFTMAX_PER_ELEM: u64 = 5;
    /// mean, centre, square-accumulate (2), scale, affine (2), plus the
    /// per-row reciprocal square root amortised into one.
    pub const LAYER_NORM_PER_ELEM: u64 = 8;
    /// cube (2), fused polynomial (2), scale, tanh, shift, half-product (2).
    pub const GELU_PER_ELEM: u64 = 9;
    /// pre-softmax score scaling by 1/sqrt(d_head).
    pub const ATTN_SCALE_PER_ELEM: u64 = 1;
}

thread_local! {
    static FLOPS: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Adds `n` to the active counter, if any.
pub fn record_flops(n: u64) {
    FLOPS.with(|c| {
        if let Some(v) = c.get() {
            c.set(Some(v + n));
        }
    });
}

/// Runs `f` and returns its result together with the FLOPs recorded by
/// kernels on this thread while it ran. Nested calls each see their own total.
pub fn count_flops<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let outer = FLOPS.with(|c| c.replace(Some(0)));
    let out = f();
    let inner = FLOPS.with(|c| c.get()).unwrap_or(0);
    FLOPS.with(|c| c.set(outer.map(|v| v + inner)));
    (out, inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_counts_propagate() {
        let ((_, inner), outer) = count_flops(|| {
            record_flops(3);
            count_flops(|| record_flops(4))
        });
        assert_eq!(inner, 4);
        assert_eq!(outer, 7);
    }

    #[test]
    fn no_counter_is_a_noop() {
        record_flops(10);
        let (_, n) = count_flops(|| ());
        assert_eq!(n, 0);
    }
}
