//! Fault-injection hook for negative-control testing.
//!
//! Setting `TRANSFUSION_FAULT=softmax-grad` in the environment makes the
//! softmax adjoint apply twice the correct scaling, simulating a
//! forward/backward mismatch. The gradient-check suite must then fail; a
//! passing suite under injection would mean the checks test nothing.

use std::sync::OnceLock;

/// True when the softmax-adjoint fault is active for this process.
pub fn softmax_grad_fault() -> bool {
    static FLAG: OnceLock<bool> = OnceLock::new();
    *FLAG.get_or_init(|| {
        std::env::var("TRANSFUSION_FAULT")
            .map(|v| v == "softmax-grad")
            .unwrap_or(false)
    })
}
