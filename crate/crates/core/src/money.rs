//! Money as a counter of minor currency units.
//!
//! All arithmetic is checked: overflow and underflow are reported as errors,
//! never wrapped. This is what makes conservation exactly checkable across a
//! transfer — the sum of two wallets is either correct or the operation
//! refused to happen.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MoneyError {
    #[error("amount arithmetic overflow")]
    Overflow,
    #[error("amount arithmetic underflow")]
    Underflow,
}

/// An amount of digital money in minor units (e.g. cents).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct MoneyAmount(u64);

impl MoneyAmount {
    pub const ZERO: MoneyAmount = MoneyAmount(0);

    pub const fn new(minor_units: u64) -> Self {
        MoneyAmount(minor_units)
    }

    pub const fn minor_units(self) -> u64 {
        self.0
    }

    pub const fn is_zero(self) -> bool {
        self.0 == 0
    }

    pub fn checked_add(self, other: MoneyAmount) -> Result<MoneyAmount, MoneyError> {
        self.0
            .checked_add(other.0)
            .map(MoneyAmount)
            .ok_or(MoneyError::Overflow)
    }

    pub fn checked_sub(self, other: MoneyAmount) -> Result<MoneyAmount, MoneyError> {
        self.0
            .checked_sub(other.0)
            .map(MoneyAmount)
            .ok_or(MoneyError::Underflow)
    }
}

impl fmt::Display for MoneyAmount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u64> for MoneyAmount {
    fn from(v: u64) -> Self {
        MoneyAmount(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checked_add_overflow() {
        let a = MoneyAmount::new(u64::MAX);
        assert_eq!(a.checked_add(MoneyAmount::new(1)), Err(MoneyError::Overflow));
        assert_eq!(a.checked_add(MoneyAmount::ZERO), Ok(a));
    }

    #[test]
    fn checked_sub_underflow() {
        let a = MoneyAmount::new(3);
        assert_eq!(a.checked_sub(MoneyAmount::new(4)), Err(MoneyError::Underflow));
        assert_eq!(a.checked_sub(MoneyAmount::new(3)), Ok(MoneyAmount::ZERO));
    }
}
