use std::fmt;
use std::str::FromStr;

use crate::compress::quant::check_bits;
use crate::error::{Error, Result};

pub const PLAN_GRAMMAR: &str = "fp32 | q<b> | p | q<b>+p | p+q<b> | p+ft+q<b>  (b in 1..=8)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Fp32,
    Quant(u8),
    Prune,
    /// Quantize, then prune on the dequantized magnitudes.
    QuantPrune(u8),
    /// Prune, then quantize over the surviving weights.
    PruneQuant(u8),
    /// Prune, fine-tune with masks pinned, then quantize.
    PruneFtQuant(u8),
}

impl Strategy {
    pub fn bits(&self) -> Option<u8> {
        match *self {
            Strategy::Fp32 | Strategy::Prune => None,
            Strategy::Quant(b) | Strategy::QuantPrune(b) | Strategy::PruneQuant(b) | Strategy::PruneFtQuant(b) => Some(b),
        }
    }

    pub fn prunes(&self) -> bool {
        !matches!(self, Strategy::Fp32 | Strategy::Quant(_))
    }

    pub fn fine_tunes(&self) -> bool {
        matches!(self, Strategy::PruneFtQuant(_))
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Fp32 => write!(f, "fp32"),
            Strategy::Quant(b) => write!(f, "q{b}"),
            Strategy::Prune => write!(f, "p"),
            Strategy::QuantPrune(b) => write!(f, "q{b}+p"),
            Strategy::PruneQuant(b) => write!(f, "p+q{b}"),
            Strategy::PruneFtQuant(b) => write!(f, "p+ft+q{b}"),
        }
    }
}

fn parse_bits(s: &str) -> Option<u8> {
    let digits = s.strip_prefix('q')?;
    if digits.is_empty() || !digits.bytes().all(|c| c.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown strategy {s:?}; expected {PLAN_GRAMMAR}"));
        let parts: Vec<&str> = s.trim().split('+').collect();
        let strategy = match parts.as_slice() {
            ["fp32"] => Strategy::Fp32,
            ["p"] => Strategy::Prune,
            [q] => Strategy::Quant(parse_bits(q).ok_or_else(bad)?),
            [q, "p"] => Strategy::QuantPrune(parse_bits(q).ok_or_else(bad)?),
            ["p", q] => Strategy::PruneQuant(parse_bits(q).ok_or_else(bad)?),
            ["p", "ft", q] => Strategy::PruneFtQuant(parse_bits(q).ok_or_else(bad)?),
            _ => return Err(bad()),
        };
        if let Some(b) = strategy.bits() {
            check_bits(b)?;
        }
        Ok(strategy)
    }
}

/// A strategy plus its pruning and fine-tuning fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressionPlan {
    pub strategy: Strategy,
    /// Fraction of each eligible weight matrix zeroed by magnitude.
    pub p_u: f64,
    /// Fraction of feed-forward hidden units removed per block.
    pub p_s: f64,
    /// Fine-tuning steps as a fraction of the original training steps.
    pub ft_fraction: f64,
}

impl CompressionPlan {
    pub const DEFAULT_P_U: f64 = 0.3;
    pub const DEFAULT_P_S: f64 = 0.1;
    pub const DEFAULT_FT_FRACTION: f64 = 0.2;

    pub fn new(strategy: Strategy) -> Self {
        CompressionPlan {
            strategy,
            p_u: Self::DEFAULT_P_U,
            p_s: Self::DEFAULT_P_S,
            ft_fraction: Self::DEFAULT_FT_FRACTION,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(Self::new(s.parse()?))
    }

    pub fn validate(&self) -> Result<()> {
        for (what, p) in [("p_u", self.p_u), ("p_s", self.p_s)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{what} must be in [0, 1), got {p}")));
            }
        }
        if !(self.ft_fraction >= 0.0 && self.ft_fraction.is_finite()) {
            return Err(Error::Config(format!("ft_fraction must be finite and non-negative, got {}", self.ft_fraction)));
        }
        if let Some(b) = self.strategy.bits() {
            check_bits(b)?;
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        self.strategy.to_string()
    }
}

impl fmt::Display for CompressionPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.strategy.fmt(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar_round_trips() {
        for s in ["fp32", "q1", "q4", "q8", "p", "q4+p", "p+q4", "p+ft+q4", "p+ft+q2"] {
            assert_eq!(s.parse::<Strategy>().unwrap().to_string(), s);
        }
        assert_eq!(" q6 ".parse::<Strategy>().unwrap(), Strategy::Quant(6));
    }

    #[test]
    fn rejects_unknown_strings() {
        for s in ["", "q", "q0", "q9", "q32", "fp16", "p+p", "ft+q4", "q4+q4", "p+ft", "q+4", "Q4", "q-1"] {
            let err = s.parse::<Strategy>().unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{s}: {err}");
        }
        assert!("bogus".parse::<Strategy>().unwrap_err().to_string().contains("p+ft+q<b>"));
    }

    #[test]
    fn defaults() {
        let p = CompressionPlan::parse("p+ft+q4").unwrap();
        assert_eq!((p.p_u, p.p_s, p.ft_fraction), (0.3, 0.1, 0.2));
        assert!(p.strategy.fine_tunes() && p.strategy.prunes());
        assert!(!Strategy::Quant(4).prunes());
        let bad = CompressionPlan { p_u: 1.0, ..p };
        assert!(bad.validate().is_err());
    }
}
