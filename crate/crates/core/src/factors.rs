//! Power-of-two arithmetic and the `{OX, OY, K}` factor triple shared by every
//! layout type.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub fn is_pow2(x: u64) -> bool {
    x != 0 && x & (x - 1) == 0
}

pub fn log2(x: u64) -> u32 {
    debug_assert!(is_pow2(x));
    x.trailing_zeros()
}

pub fn ceil_div(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

pub fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

pub fn lcm(a: u64, b: u64) -> u64 {
    if a == 0 || b == 0 {
        return 0;
    }
    a / gcd(a, b) * b
}

/// Number of ways to pick `k` items out of `n`.
pub fn binomial(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * u128::from(n - i) / u128::from(i + 1);
    }
    acc
}

/// All exponent triples `(a, b, c)` with `a + b + c == total`.
///
/// Ordered by the descending multiset of exponents first, then by the tuple
/// itself descending, so `total = 2` yields
/// `(2,0,0) (0,2,0) (0,0,2) (1,1,0) (1,0,1) (0,1,1)`.
pub fn exponent_triples(total: u32) -> Vec<[u32; 3]> {
    let mut out = Vec::new();
    for a in 0..=total {
        for b in 0..=total - a {
            out.push([a, b, total - a - b]);
        }
    }
    out.sort_by(|x, y| {
        let mut sx = *x;
        let mut sy = *y;
        sx.sort_unstable_by(|p, q| q.cmp(p));
        sy.sort_unstable_by(|p, q| q.cmp(p));
        sy.cmp(&sx).then_with(|| y.cmp(x))
    });
    out
}

/// The three dimensions a data layout may group along.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayoutDim {
    OX,
    OY,
    K,
}

impl LayoutDim {
    /// Fill order used by greedy layout construction and demand splitting.
    pub const FILL_ORDER: [LayoutDim; 3] = [LayoutDim::OX, LayoutDim::OY, LayoutDim::K];
    /// Order used when rendering layouts, e.g. `[OY:4, OX:2, K:2]`.
    pub const RENDER_ORDER: [LayoutDim; 3] = [LayoutDim::OY, LayoutDim::OX, LayoutDim::K];

    pub fn name(self) -> &'static str {
        match self {
            LayoutDim::OX => "OX",
            LayoutDim::OY => "OY",
            LayoutDim::K => "K",
        }
    }
}

/// Power-of-two factors along `OX`, `OY` and `K`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayoutFactors {
    pub ox: u32,
    pub oy: u32,
    pub k: u32,
}

impl LayoutFactors {
    pub const ONES: LayoutFactors = LayoutFactors { ox: 1, oy: 1, k: 1 };

    pub fn new(ox: u32, oy: u32, k: u32) -> Self {
        Self { ox, oy, k }
    }

    pub fn from_exponents(e: [u32; 3]) -> Self {
        Self::new(1 << e[0], 1 << e[1], 1 << e[2])
    }

    pub fn get(&self, dim: LayoutDim) -> u32 {
        match dim {
            LayoutDim::OX => self.ox,
            LayoutDim::OY => self.oy,
            LayoutDim::K => self.k,
        }
    }

    pub fn set(&mut self, dim: LayoutDim, value: u32) {
        match dim {
            LayoutDim::OX => self.ox = value,
            LayoutDim::OY => self.oy = value,
            LayoutDim::K => self.k = value,
        }
    }

    pub fn product(&self) -> u64 {
        u64::from(self.ox) * u64::from(self.oy) * u64::from(self.k)
    }

    /// True when every factor of `self` divides the matching factor of `other`.
    pub fn divides(&self, other: &LayoutFactors) -> bool {
        LayoutDim::FILL_ORDER
            .iter()
            .all(|&d| other.get(d) % self.get(d) == 0)
    }

    pub fn zip_with(&self, other: &LayoutFactors, f: impl Fn(u32, u32) -> u32) -> LayoutFactors {
        LayoutFactors::new(f(self.ox, other.ox), f(self.oy, other.oy), f(self.k, other.k))
    }

    pub fn is_pow2(&self) -> bool {
        LayoutDim::FILL_ORDER
            .iter()
            .all(|&d| is_pow2(u64::from(self.get(d))))
    }

    /// All power-of-two triples whose product is `total` (a power of two).
    pub fn all_with_product(total: u64) -> Vec<LayoutFactors> {
        exponent_triples(log2(total))
            .into_iter()
            .map(LayoutFactors::from_exponents)
            .collect()
    }
}

impl fmt::Display for LayoutFactors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        let mut first = true;
        for dim in LayoutDim::RENDER_ORDER {
            let v = self.get(dim);
            if v == 1 {
                continue;
            }
            if !first {
                f.write_str(", ")?;
            }
            write!(f, "{}:{}", dim.name(), v)?;
            first = false;
        }
        f.write_str("]")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid layout `{text}`: {reason}")]
pub struct LayoutParseError {
    pub text: String,
    pub reason: String,
}

impl FromStr for LayoutFactors {
    type Err = LayoutParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = |reason: &str| LayoutParseError {
            text: s.to_string(),
            reason: reason.to_string(),
        };
        let inner = s
            .trim()
            .strip_prefix('[')
            .and_then(|r| r.strip_suffix(']'))
            .ok_or_else(|| err("expected `[DIM:n, ...]`"))?;
        let mut out = LayoutFactors::ONES;
        let mut seen = [false; 3];
        for part in inner.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, value) = part.split_once(':').ok_or_else(|| err("missing `:`"))?;
            let dim = match name.trim() {
                "OX" => LayoutDim::OX,
                "OY" => LayoutDim::OY,
                "K" => LayoutDim::K,
                _ => return Err(err("unknown dimension")),
            };
            let slot = dim as usize;
            if seen[slot] {
                return Err(err("duplicate dimension"));
            }
            seen[slot] = true;
            let value: u32 = value.trim().parse().map_err(|_| err("bad factor"))?;
            if !is_pow2(u64::from(value)) {
                return Err(err("factor is not a power of two"));
            }
            out.set(dim, value);
        }
        Ok(out)
    }
}

impl Serialize for LayoutFactors {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayoutFactors {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triples_follow_canonical_order() {
        let got: Vec<_> = exponent_triples(2)
            .into_iter()
            .map(|e| LayoutFactors::from_exponents(e))
            .map(|f| (f.ox, f.oy, f.k))
            .collect();
        assert_eq!(
            got,
            vec![(4, 1, 1), (1, 4, 1), (1, 1, 4), (2, 2, 1), (2, 1, 2), (1, 2, 2)]
        );
    }

    #[test]
    fn triple_count_is_stars_and_bars() {
        for n in 0..8u32 {
            let expected = (n as usize + 2) * (n as usize + 1) / 2;
            assert_eq!(exponent_triples(n).len(), expected);
        }
    }

    #[test]
    fn render_and_parse() {
        let f = LayoutFactors::new(2, 4, 2);
        assert_eq!(f.to_string(), "[OY:4, OX:2, K:2]");
        assert_eq!("[OY:4, OX:2, K:2]".parse::<LayoutFactors>().unwrap(), f);
        assert_eq!(LayoutFactors::ONES.to_string(), "[]");
        assert_eq!("[]".parse::<LayoutFactors>().unwrap(), LayoutFactors::ONES);
        assert!("[OX:3]".parse::<LayoutFactors>().is_err());
        assert!("[OX:2, OX:2]".parse::<LayoutFactors>().is_err());
        assert!("OX:2".parse::<LayoutFactors>().is_err());
    }

    #[test]
    fn lcm_gcd_binomial() {
        assert_eq!(lcm(4, 6), 12);
        assert_eq!(gcd(12, 18), 6);
        assert_eq!(binomial(16, 2), 120);
        assert_eq!(binomial(3, 2), 3);
        assert_eq!(binomial(4, 4), 1);
    }
}
