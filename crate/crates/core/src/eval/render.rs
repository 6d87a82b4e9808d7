//! Fixed-point percentages rendered to two decimals.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A percentage stored in integer hundredths, so `57.33` is `5733`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Percent(pub i64);

impl Percent {
    /// `100 * correct / n`, rounded half up to hundredths. `n == 0` gives 0.
    pub fn from_counts(correct: u64, n: u64) -> Self {
        if n == 0 {
            return Percent(0);
        }
        let num = 20_000u128 * correct as u128 + n as u128;
        Percent((num / (2 * n as u128)) as i64)
    }

    pub fn hundredths(self) -> i64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 100.0
    }
}

fn write_fixed(f: &mut fmt::Formatter<'_>, v: i64) -> fmt::Result {
    let a = v.unsigned_abs();
    write!(f, "{}.{:02}", a / 100, a % 100)
}

impl fmt::Display for Percent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 < 0 {
            f.write_str("-")?;
        }
        write_fixed(f, self.0)
    }
}

/// Parses `57.33`, `57.3`, `57` and signed forms.
fn parse_hundredths(s: &str) -> Result<i64, String> {
    let err = || format!("invalid percentage {s:?}");
    let t = s.trim();
    let (neg, body) = match t.as_bytes().first() {
        Some(b'-') => (true, &t[1..]),
        Some(b'+') => (false, &t[1..]),
        _ => (false, t),
    };
    let (int, frac) = body.split_once('.').unwrap_or((body, ""));
    if int.is_empty() || frac.len() > 2 || !int.bytes().chain(frac.bytes()).all(|b| b.is_ascii_digit()) {
        return Err(err());
    }
    let i: i64 = int.parse().map_err(|_| err())?;
    let fr: i64 = if frac.is_empty() { 0 } else { format!("{frac:0<2}").parse().map_err(|_| err())? };
    let v = i.checked_mul(100).and_then(|x| x.checked_add(fr)).ok_or_else(err)?;
    Ok(if neg { -v } else { v })
}

impl FromStr for Percent {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_hundredths(s).map(Percent)
    }
}

/// Signed change between two percentages: `+2.00`, `-0.09`, `0.00`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Delta(pub i64);

pub fn delta(base: Percent, candidate: Percent) -> Delta {
    Delta(candidate.0 - base.0)
}

impl fmt::Display for Delta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0.signum() {
            1 => f.write_str("+")?,
            -1 => f.write_str("-")?,
            _ => {}
        }
        write_fixed(f, self.0)
    }
}

impl FromStr for Delta {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_hundredths(s).map(Delta)
    }
}

macro_rules! serde_as_string {
    ($t:ty) => {
        impl Serialize for $t {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }
        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}
serde_as_string!(Percent);
serde_as_string!(Delta);

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn table_goldens() {
        assert_eq!(Percent::from_counts(86, 150).to_string(), "57.33");
        assert_eq!(Percent::from_counts(0, 150).to_string(), "0.00");
        let d = |a: &str, b: &str| delta(a.parse().unwrap(), b.parse().unwrap()).to_string();
        assert_eq!(d("55.33", "57.33"), "+2.00");
        assert_eq!(d("28.47", "34.03"), "+5.56");
        assert_eq!(d("43.14", "43.05"), "-0.09");
        assert_eq!(d("43.14", "43.14"), "0.00");
    }

    #[test]
    fn half_rounds_up() {
        // 1/8 = 12.5%; 1/800 = 0.125%
        assert_eq!(Percent::from_counts(1, 8).to_string(), "12.50");
        assert_eq!(Percent::from_counts(1, 800).to_string(), "0.13");
        assert_eq!(Percent::from_counts(2, 3).to_string(), "66.67");
        assert_eq!(Percent::from_counts(1, 3).to_string(), "33.33");
    }

    #[test]
    fn parse_rejects_garbage() {
        for s in ["", "a", "1.234", "--1", ".5", "1.x"] {
            assert!(s.parse::<Percent>().is_err(), "{s}");
        }
        assert_eq!("7.5".parse::<Percent>().unwrap(), Percent(750));
        assert_eq!("-0.09".parse::<Delta>().unwrap(), Delta(-9));
    }

    proptest! {
        #[test]
        fn counts_match_float_rounding(n in 1u64..5000, frac in 0.0f64..=1.0) {
            let c = (frac * n as f64).floor() as u64;
            let p = Percent::from_counts(c, n);
            let exact = 10_000.0 * c as f64 / n as f64;
            prop_assert!((p.0 as f64 - exact).abs() <= 0.5 + 1e-9);
            prop_assert_eq!(p.to_string().parse::<Percent>().unwrap(), p);
        }

        #[test]
        fn delta_round_trips(v in -100_000i64..100_000) {
            prop_assert_eq!(Delta(v).to_string().parse::<Delta>().unwrap(), Delta(v));
        }
    }
}
