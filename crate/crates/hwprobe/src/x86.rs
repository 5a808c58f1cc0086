//! Raw gadgets. Everything here is x86-64 only.

use std::arch::asm;
use std::arch::global_asm;

// Two identical 256-byte functions whose entry points are 512 bytes apart.
// Each runs `rdi` passes over a body of serial inc/dec pairs spanning all
// four cache lines of the function.
global_asm!(
    ".pushsection .text.mchammer_victim,\"ax\",@progbits",
    ".p2align 12",
    ".globl mchammer_victim_0",
    "mchammer_victim_0:",
    "    xor ecx, ecx",
    "2:",
    "    .rept 40",
    "    inc rcx",
    "    dec rcx",
    "    .endr",
    "    dec rdi",
    "    jnz 2b",
    "    ret",
    ".p2align 9",
    ".globl mchammer_victim_1",
    "mchammer_victim_1:",
    "    xor ecx, ecx",
    "3:",
    "    .rept 40",
    "    inc rcx",
    "    dec rcx",
    "    .endr",
    "    dec rdi",
    "    jnz 3b",
    "    ret",
    ".p2align 8",
    ".popsection",
);

extern "C" {
    fn mchammer_victim_0(iterations: u64);
    fn mchammer_victim_1(iterations: u64);
}

pub fn victim_entry(second: bool) -> usize {
    if second {
        mchammer_victim_1 as *const () as usize
    } else {
        mchammer_victim_0 as *const () as usize
    }
}

pub fn run_victim(second: bool, iterations: u64) {
    if iterations == 0 {
        return;
    }
    // SAFETY: the fixture only touches rcx and rdi and returns normally.
    unsafe {
        if second {
            mchammer_victim_1(iterations)
        } else {
            mchammer_victim_0(iterations)
        }
    }
}

/// One MC-Hammer sample: fence, read the counter, fold the counter's high
/// bit into the flush address, flush, read the counter, fence.
#[inline(always)]
pub fn mc_hammer_sample(line: *const u8) -> (u64, u64) {
    let (lo0, hi0, lo1, hi1): (u32, u32, u32, u32);
    // SAFETY: `line` points into a live read-only mapping; clflush does not
    // write to it.
    unsafe {
        asm!(
            "mfence",
            "rdtsc",
            "mov {lo0:e}, eax",
            "mov {hi0:e}, edx",
            "shr edx, 31",
            "clflush [{line} + rdx]",
            "rdtsc",
            "mfence",
            line = in(reg) line,
            lo0 = out(reg) lo0,
            hi0 = out(reg) hi0,
            out("eax") lo1,
            out("edx") hi1,
            options(nostack),
        );
    }
    (join(lo0, hi0), join(lo1, hi1))
}

/// MC-Hammer with `lfence` ordering instead of the data dependency.
#[inline(always)]
pub fn mc_hammer_sample_lfence(line: *const u8) -> (u64, u64) {
    let (lo0, hi0, lo1, hi1): (u32, u32, u32, u32);
    // SAFETY: as above.
    unsafe {
        asm!(
            "mfence",
            "rdtsc",
            "lfence",
            "mov {lo0:e}, eax",
            "mov {hi0:e}, edx",
            "clflush [{line}]",
            "rdtsc",
            "mfence",
            line = in(reg) line,
            lo0 = out(reg) lo0,
            hi0 = out(reg) hi0,
            out("eax") lo1,
            out("edx") hi1,
            options(nostack),
        );
    }
    (join(lo0, hi0), join(lo1, hi1))
}

#[inline(always)]
pub fn rdtsc() -> u64 {
    // SAFETY: rdtsc has no memory effects.
    unsafe { std::arch::x86_64::_rdtsc() }
}

#[inline(always)]
pub fn clflush(line: *const u8) {
    // SAFETY: flushing a mapped address has no architectural effect on its
    // contents.
    unsafe { std::arch::x86_64::_mm_clflush(line) }
}

/// Timed load of one byte.
#[inline(always)]
pub fn timed_reload(line: *const u8) -> (u64, u64) {
    let (lo0, hi0, lo1, hi1): (u32, u32, u32, u32);
    // SAFETY: `line` is readable.
    unsafe {
        asm!(
            "mfence",
            "lfence",
            "rdtsc",
            "lfence",
            "mov {lo0:e}, eax",
            "mov {hi0:e}, edx",
            "movzx eax, byte ptr [{line}]",
            "lfence",
            "rdtsc",
            line = in(reg) line,
            lo0 = out(reg) lo0,
            hi0 = out(reg) hi0,
            out("eax") lo1,
            out("edx") hi1,
            options(nostack, readonly),
        );
    }
    (join(lo0, hi0), join(lo1, hi1))
}

fn join(lo: u32, hi: u32) -> u64 {
    (u64::from(hi) << 32) | u64::from(lo)
}
