//! PCG32 (XSH-RR, 64-bit state) with Box–Muller normals.
//!
//! The constants and draw layout are fixed so that other implementations can
//! reproduce the exact weight streams:
//! - multiplier `6364136223846793005`, seeding as in the reference
//!   `pcg32_srandom_r(initstate, initseq)`;
//! - `next_f64` = `(a << 21 ^ b >> 11) / 2^53` from two consecutive draws `a`, `b`
//!   (53 random bits in `[0, 1)`);
//! - `normal` consumes two uniforms `u1, u2` and returns
//!   `sqrt(-2 ln(1 - u1)) * cos(2π u2)`; the sine branch is discarded.

const MULTIPLIER: u64 = 6_364_136_223_846_793_005;
/// Default stream selector of the reference implementation.
pub const DEFAULT_STREAM: u64 = 0xda3e_39cb_94b9_5bdb;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pcg32 {
    state: u64,
    inc: u64,
}

impl Pcg32 {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = Pcg32 {
            state: 0,
            inc: (stream << 1) | 1,
        };
        rng.next_u32();
        rng.state = rng.state.wrapping_add(seed);
        rng.next_u32();
        rng
    }

    pub fn seeded(seed: u64) -> Self {
        Self::new(seed, DEFAULT_STREAM)
    }

    /// Independent stream for a named purpose (FNV-1a of `label`).
    pub fn for_label(seed: u64, label: &str) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        Self::new(seed, h)
    }

    pub fn next_u32(&mut self) -> u32 {
        let old = self.state;
        self.state = old.wrapping_mul(MULTIPLIER).wrapping_add(self.inc);
        let xorshifted = (((old >> 18) ^ old) >> 27) as u32;
        let rot = (old >> 59) as u32;
        xorshifted.rotate_right(rot)
    }

    pub fn next_f64(&mut self) -> f64 {
        let a = self.next_u32() as u64;
        let b = self.next_u32() as u64;
        (((a << 21) ^ (b >> 11)) as f64) / (1u64 << 53) as f64
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `[0, n)` by rejection (unbiased).
    pub fn below(&mut self, n: u32) -> u32 {
        assert!(n > 0);
        let threshold = n.wrapping_neg() % n;
        loop {
            let r = self.next_u32();
            if r >= threshold {
                return r % n;
            }
        }
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u32 + 1) as usize;
            items.swap(i, j);
        }
    }
}
