//! Work counters recorded by the pipeline stages.
//!
//! Counts are derived from operand shapes at each kernel call, so they are
//! exact and independent of timing noise.

use crate::{conv::ConvSpec, Real, Shape};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    /// Multiply-accumulates in convolutions and resampling.
    pub macs: u64,
    /// Elementwise and reduction operations, one per output value.
    pub elementwise: u64,
    /// Kernel invocations.
    pub calls: u64,
}

impl OpCounter {
    pub fn record_conv<T: Real>(&mut self, spec: &ConvSpec<T>, out: Shape) {
        self.macs += spec.macs(out);
        self.calls += 1;
    }

    pub fn record_macs(&mut self, macs: u64) {
        self.macs += macs;
        self.calls += 1;
    }

    pub fn record_elementwise(&mut self, values: usize) {
        self.elementwise += values as u64;
        self.calls += 1;
    }

    pub fn total(&self) -> u64 {
        self.macs + self.elementwise
    }
}

impl core::ops::AddAssign for OpCounter {
    fn add_assign(&mut self, rhs: Self) {
        self.macs += rhs.macs;
        self.elementwise += rhs.elementwise;
        self.calls += rhs.calls;
    }
}

/// Counters split by where the work happens.
///
/// `latent` covers everything between the base downsample and the final
/// upsample; it must not depend on the native image size.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StageCounters {
    pub base: OpCounter,
    pub latent: OpCounter,
    pub heads: OpCounter,
    pub reconstruct: OpCounter,
}

impl StageCounters {
    pub fn native(&self) -> OpCounter {
        let mut n = self.base;
        n += self.heads;
        n += self.reconstruct;
        n
    }
}
