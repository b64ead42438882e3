//! Operation counts of batch normalization versus second moment normalization.
//!
//! `R[m]`/`E[m]` are reductions and element-wise ops over the `m`
//! pre-activations, `R[q]`/`E[q]` the same over the `q` kernel entries.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMethod {
    BatchNorm,
    SecondMoment,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OpCount {
    pub reductions_m: u32,
    pub reductions_q: u32,
    pub elementwise_m: u32,
    pub elementwise_q: u32,
}

impl OpCount {
    /// Ops that scale with `m`; the `q` terms are negligible for `q << m`.
    pub fn m_total(&self) -> u32 {
        self.reductions_m + self.elementwise_m
    }
}

impl std::ops::Add for OpCount {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            reductions_m: self.reductions_m + o.reductions_m,
            reductions_q: self.reductions_q + o.reductions_q,
            elementwise_m: self.elementwise_m + o.elementwise_m,
            elementwise_q: self.elementwise_q + o.elementwise_q,
        }
    }
}

const fn ops(rm: u32, rq: u32, em: u32, eq: u32) -> OpCount {
    OpCount {
        reductions_m: rm,
        reductions_q: rq,
        elementwise_m: em,
        elementwise_q: eq,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormCost {
    pub method: NormMethod,
    pub forward: OpCount,
    pub backward: OpCount,
    pub total: OpCount,
}

pub fn normalization_op_count(method: NormMethod) -> NormCost {
    let (forward, backward) = match method {
        NormMethod::BatchNorm => (ops(2, 0, 4, 0), ops(2, 0, 5, 0)),
        NormMethod::SecondMoment => (ops(1, 1, 3, 1), ops(2, 1, 4, 1)),
    };
    NormCost {
        method,
        forward,
        backward,
        total: forward + backward,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    pub bn_ops: u32,
    pub smn_ops: u32,
    /// Saved ops relative to the SMN count, `(13 - 10) / 10`.
    pub speedup: f64,
    /// Saved ops relative to the BN count, `(13 - 10) / 13`.
    pub reduction: f64,
}

pub fn smn_speedup() -> Speedup {
    let bn = normalization_op_count(NormMethod::BatchNorm).total.m_total();
    let smn = normalization_op_count(NormMethod::SecondMoment).total.m_total();
    let saved = f64::from(bn - smn);
    Speedup {
        bn_ops: bn,
        smn_ops: smn,
        speedup: saved / f64::from(smn),
        reduction: saved / f64::from(bn),
    }
}
