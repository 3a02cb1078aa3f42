//! Attention cost accounting under spatial reduction.

use std::fmt;

use crate::error::{Error, Result};

/// Multiply-adds in the attention score term: `2 * L_q * L_kv * d`.
pub fn attention_flops(seq_len_q: u64, seq_len_kv: u64, d_c: u64) -> Result<u64> {
    if seq_len_q == 0 || seq_len_kv == 0 || d_c == 0 {
        return Err(Error::Config(format!(
            "attention_flops needs positive arguments, got ({seq_len_q}, {seq_len_kv}, {d_c})"
        )));
    }
    Ok(2 * seq_len_q * seq_len_kv * d_c)
}

/// Which attention operands shrink when the grid is reduced by `r` per side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reading {
    /// Queries and keys/values both come from the reduced grid.
    BothOperands,
    /// Only keys/values are reduced; queries stay at full resolution.
    KeysValuesOnly,
}

/// An exact, reduced non-negative fraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        let g = gcd(num, den).max(1);
        Ratio {
            num: num / g,
            den: den / g,
        }
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// Score-term cost after reducing an `h x w` grid by `r` per side, divided
/// by the cost before reduction.
pub fn reduction_ratio(h: u64, w: u64, d_c: u64, r: u64, reading: Reading) -> Result<Ratio> {
    if r == 0 || !h.is_multiple_of(r) || !w.is_multiple_of(r) {
        return Err(Error::Config(format!(
            "reduction ratio {r} does not divide the {h}x{w} grid"
        )));
    }
    let full = h * w;
    let reduced = full / (r * r);
    let before = attention_flops(full, full, d_c)?;
    let after = match reading {
        Reading::BothOperands => attention_flops(reduced, reduced, d_c)?,
        Reading::KeysValuesOnly => attention_flops(full, reduced, d_c)?,
    };
    Ok(Ratio::new(after, before))
}
