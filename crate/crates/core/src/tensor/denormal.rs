//! Scoped flush-to-zero for subnormal floats on the current thread.

/// Sets flush-to-zero and denormals-are-zero while alive, restoring the
/// previous control register on drop. A no-op on other architectures.
pub struct FlushDenormals {
    #[allow(dead_code)]
    saved: u64,
}

impl FlushDenormals {
    pub fn new() -> Self {
        let saved = read_control();
        write_control(saved | FLUSH_BITS);
        FlushDenormals { saved }
    }
}

impl Default for FlushDenormals {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for FlushDenormals {
    fn drop(&mut self) {
        write_control(self.saved);
    }
}

// MXCSR: FTZ (bit 15) and DAZ (bit 6)
#[cfg(target_arch = "x86_64")]
const FLUSH_BITS: u64 = 0x8040;

#[cfg(target_arch = "x86_64")]
fn read_control() -> u64 {
    let mut csr: u32 = 0;
    // SAFETY: stmxcsr only stores the SSE control register to the given address.
    unsafe { std::arch::asm!("stmxcsr [{}]", in(reg) &mut csr, options(nostack)) };
    csr as u64
}

#[cfg(target_arch = "x86_64")]
fn write_control(v: u64) {
    let csr = v as u32;
    // SAFETY: loads a value derived from the current MXCSR with only mode bits changed.
    unsafe { std::arch::asm!("ldmxcsr [{}]", in(reg) &csr, options(nostack, readonly)) };
}

// FPCR: FZ (bit 24)
#[cfg(target_arch = "aarch64")]
const FLUSH_BITS: u64 = 1 << 24;

#[cfg(target_arch = "aarch64")]
fn read_control() -> u64 {
    let v: u64;
    // SAFETY: reading FPCR has no side effects.
    unsafe { std::arch::asm!("mrs {}, fpcr", out(reg) v, options(nomem, nostack)) };
    v
}

#[cfg(target_arch = "aarch64")]
fn write_control(v: u64) {
    // SAFETY: writes FPCR with only the flush mode bit changed.
    unsafe { std::arch::asm!("msr fpcr, {}", in(reg) v, options(nomem, nostack)) };
}

#[cfg(not(any(target_arch = "x86_64", target_arch = "aarch64")))]
const FLUSH_BITS: u64 = 0;

#[cfg(not(any(target_arch = "x86_64", target_arch = "aarch64")))]
fn read_control() -> u64 {
    0
}

#[cfg(not(any(target_arch = "x86_64", target_arch = "aarch64")))]
fn write_control(_: u64) {}
