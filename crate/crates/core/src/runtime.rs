//! Process-wide numeric and threading setup.

use crate::error::{Error, Result};

/// Sets the flush-to-zero and denormals-are-zero bits for the calling
/// thread. Saturated sigmoids otherwise push long runs of subnormal values
/// through the backward pass, which slows x86 arithmetic by an order of
/// magnitude.
pub fn flush_denormals() {
    #[cfg(target_arch = "x86_64")]
    unsafe {
        let mut csr: u32 = 0;
        std::arch::asm!("stmxcsr [{}]", in(reg) &mut csr, options(nostack));
        csr |= 0x8040;
        std::arch::asm!("ldmxcsr [{}]", in(reg) &csr, options(nostack));
    }
}

/// Builds the global worker pool with `threads` workers, each flushing
/// denormals, and configures the calling thread the same way. Only the
/// first call configures the pool.
pub fn init_runtime(threads: usize) -> Result<()> {
    flush_denormals();
    let built = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .start_handler(|_| flush_denormals())
        .build_global();
    match built {
        Ok(()) => Ok(()),
        Err(_) if rayon::current_num_threads() == threads.max(1) => Ok(()),
        Err(e) => Err(Error::InvalidArgument(format!("thread pool: {e}"))),
    }
}
