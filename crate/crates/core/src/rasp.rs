//! A minimal select/aggregate interpreter over exact rationals.
//!
//! Enough of RASP to build the unit left-shift `shift(z)_i = z_{i+1}`
//! (last row defaulting to `z_n`) and to check that composing it after any
//! program built from these primitives yields the program's output moved one
//! position left. Means are computed exactly, so the checks use `==`.

use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};

use crate::{Error, Result};

pub type Rational = BigRational;

/// Values that `aggregate` can average.
pub trait Aggregatable: Clone + PartialEq {
    fn mean(items: &[&Self]) -> Self;
}

impl Aggregatable for Rational {
    fn mean(items: &[&Self]) -> Self {
        let sum = items.iter().fold(Rational::zero(), |acc, v| acc + *v);
        sum / Rational::from_integer(BigInt::from(items.len()))
    }
}

/// Element-wise mean; all vectors must share a length.
impl Aggregatable for Vec<Rational> {
    fn mean(items: &[&Self]) -> Self {
        let dim = items[0].len();
        (0..dim)
            .map(|k| {
                let col: Vec<&Rational> = items.iter().map(|v| &v[k]).collect();
                Rational::mean(&col)
            })
            .collect()
    }
}

/// A sequence of values, one per position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqOp<V> {
    values: Vec<V>,
}

impl<V> SeqOp<V> {
    pub fn new(values: Vec<V>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Input(
                "sequence operators need at least one position".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn values(&self) -> &[V] {
        &self.values
    }

    pub fn into_values(self) -> Vec<V> {
        self.values
    }

    pub fn map<U>(&self, f: impl Fn(&V) -> U) -> SeqOp<U> {
        SeqOp {
            values: self.values.iter().map(f).collect(),
        }
    }

    /// Element-wise combination of two equal-length sequences.
    pub fn zip_map<W, U>(&self, other: &SeqOp<W>, f: impl Fn(&V, &W) -> U) -> SeqOp<U> {
        assert_eq!(
            self.len(),
            other.len(),
            "zip_map on sequences of different length"
        );
        SeqOp {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| f(a, b))
                .collect(),
        }
    }
}

pub fn rational(n: i64) -> Rational {
    Rational::from_integer(BigInt::from(n))
}

/// `[0, 1, …, n−1]`.
pub fn indices(n: usize) -> Result<SeqOp<Rational>> {
    SeqOp::new((0..n).map(|i| rational(i as i64)).collect())
}

/// The length broadcast to every position.
pub fn length<V>(x: &SeqOp<V>) -> SeqOp<Rational> {
    x.map(|_| rational(x.len() as i64))
}

/// Binary matrix with `M[i][j] = p(query_i, key_j)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selector {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Selector {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn to_matrix(&self) -> Vec<Vec<u8>> {
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| u8::from(self.get(i, j))).collect())
            .collect()
    }
}

pub fn select<A, B>(query: &SeqOp<A>, key: &SeqOp<B>, p: impl Fn(&A, &B) -> bool) -> Selector {
    let mut bits = Vec::with_capacity(query.len() * key.len());
    for q in &query.values {
        for k in &key.values {
            bits.push(p(q, k));
        }
    }
    Selector {
        rows: query.len(),
        cols: key.len(),
        bits,
    }
}

/// Row `i` is the mean of the selected `x_j`, or `default` if none is selected.
pub fn aggregate<V: Aggregatable>(m: &Selector, x: &SeqOp<V>, default: &V) -> SeqOp<V> {
    assert_eq!(
        m.cols,
        x.len(),
        "selector width must match the aggregated sequence"
    );
    let values = (0..m.rows)
        .map(|i| {
            let picked: Vec<&V> = (0..m.cols)
                .filter(|&j| m.get(i, j))
                .map(|j| &x.values[j])
                .collect();
            if picked.is_empty() {
                default.clone()
            } else {
                V::mean(&picked)
            }
        })
        .collect();
    SeqOp { values }
}

/// `aggregate(select(indices + 1, indices, =), z; z_n)`.
pub fn shift<V: Aggregatable>(z: &SeqOp<V>) -> SeqOp<V> {
    let idx = indices(z.len()).expect("nonempty");
    let next = idx.map(|i| i + Rational::one());
    let m = select(&next, &idx, |a, b| a == b);
    let last = z.values.last().expect("nonempty").clone();
    aggregate(&m, z, &last)
}

/// Programs used to exercise the shift property.
pub mod programs {
    use super::*;

    /// Running mean of the prefix ending at each position.
    pub fn prefix_mean(x: &SeqOp<Rational>) -> SeqOp<Rational> {
        let idx = indices(x.len()).expect("nonempty");
        aggregate(&select(&idx, &idx, |q, k| k <= q), x, &Rational::zero())
    }

    /// The sequence read back to front.
    pub fn reverse(x: &SeqOp<Rational>) -> SeqOp<Rational> {
        let idx = indices(x.len()).expect("nonempty");
        let opp = length(x).zip_map(&idx, |n, i| n - i - Rational::one());
        aggregate(&select(&opp, &idx, |q, k| q == k), x, &Rational::zero())
    }

    /// Mean position of every occurrence of each position's value.
    pub fn mean_position_of_value(x: &SeqOp<Rational>) -> SeqOp<Rational> {
        let idx = indices(x.len()).expect("nonempty");
        aggregate(&select(x, x, |q, k| q == k), &idx, &Rational::zero())
    }

    /// `x² − 3x + ½`, position-wise.
    pub fn polynomial(x: &SeqOp<Rational>) -> SeqOp<Rational> {
        let half = Rational::new(BigInt::from(1), BigInt::from(2));
        x.map(|v| v * v - rational(3) * v + &half)
    }

    /// `x` plus the mean of all strictly smaller values (0 if none), then
    /// the running mean of that.
    pub fn smaller_mean_then_prefix(x: &SeqOp<Rational>) -> SeqOp<Rational> {
        let smaller = aggregate(&select(x, x, |q, k| k < q), x, &Rational::zero());
        prefix_mean(&x.zip_map(&smaller, |a, b| a + b))
    }

    pub type Program = fn(&SeqOp<Rational>) -> SeqOp<Rational>;

    pub const ALL: [(&str, Program); 5] = [
        ("prefix_mean", prefix_mean),
        ("reverse", reverse),
        ("mean_position_of_value", mean_position_of_value),
        ("polynomial", polynomial),
        ("smaller_mean_then_prefix", smaller_mean_then_prefix),
    ];
}

/// True iff `g(i) == f(i+1)` for every `i < n − 1` and `g(n−1) == f(n−1)`,
/// where `g = shift(f)`.
pub fn is_left_shift_of<V: PartialEq>(shifted: &SeqOp<V>, original: &SeqOp<V>) -> bool {
    let n = original.len();
    shifted.len() == n
        && (0..n - 1).all(|i| shifted.values[i] == original.values[i + 1])
        && shifted.values[n - 1] == original.values[n - 1]
}

/// Parses whitespace- or comma-separated rationals such as `4 7/2 -1`.
pub fn parse_sequence(text: &str) -> Result<SeqOp<Rational>> {
    let values = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<Rational>()
                .map_err(|_| Error::Input(format!("not a rational number: {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    SeqOp::new(values)
}

/// Text rendering of the shift construction on `z`.
pub struct ShiftDemo<'a> {
    pub z: &'a SeqOp<Rational>,
}

impl fmt::Display for ShiftDemo<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let z = self.z;
        let idx = indices(z.len()).expect("nonempty");
        let next = idx.map(|i| i + Rational::one());
        let m = select(&next, &idx, |a, b| a == b);
        let out = shift(z);
        let join = |s: &SeqOp<Rational>| {
            s.values
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        writeln!(f, "z        = [{}]", join(z))?;
        writeln!(f, "selector = select(indices + 1, indices, ==)")?;
        for row in m.to_matrix() {
            let cells: Vec<String> = row.iter().map(|b| b.to_string()).collect();
            writeln!(f, "           [{}]", cells.join(" "))?;
        }
        writeln!(f, "default  = z_n = {}", z.values.last().expect("nonempty"))?;
        writeln!(f, "shift(z) = [{}]", join(&out))?;
        let ok = is_left_shift_of(&out, z);
        write!(
            f,
            "check    : shift(z)_i == z_(i+1), shift(z)_n == z_n: {}",
            if ok { "ok" } else { "FAILED" }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(v: &[i64]) -> SeqOp<Rational> {
        SeqOp::new(v.iter().map(|&x| rational(x)).collect()).unwrap()
    }

    #[test]
    fn select_examples() {
        let idx = indices(3).unwrap();
        let next = idx.map(|i| i + Rational::one());
        let m = select(&next, &idx, |a, b| a == b);
        assert_eq!(
            m.to_matrix(),
            vec![vec![0, 1, 0], vec![0, 0, 1], vec![0, 0, 0]]
        );
        let z = select(&idx, &idx, |_, _| false);
        assert!(z.to_matrix().iter().flatten().all(|&b| b == 0));
        let id = select(&idx, &idx, |a, b| a == b);
        assert_eq!(
            id.to_matrix(),
            vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]
        );
    }

    #[test]
    fn aggregate_examples() {
        let x = seq(&[2, 4, 9]);
        let idx = indices(3).unwrap();
        assert_eq!(
            aggregate(&select(&idx, &idx, |a, b| a == b), &x, &rational(0)),
            x
        );
        assert_eq!(
            aggregate(&select(&idx, &idx, |_, _| false), &x, &rational(7)),
            seq(&[7, 7, 7])
        );
        let first_two = select(&idx, &idx, |_, k| *k < rational(2));
        assert_eq!(
            aggregate(&first_two, &x, &rational(0)).values()[0],
            rational(3)
        );
    }

    #[test]
    fn vector_values_average_per_component() {
        let x = SeqOp::new(vec![
            vec![rational(1), rational(0)],
            vec![rational(2), rational(4)],
        ])
        .unwrap();
        let idx = indices(2).unwrap();
        let all = select(&idx, &idx, |_, _| true);
        let out = aggregate(&all, &x, &vec![rational(0), rational(0)]);
        let three_halves = Rational::new(BigInt::from(3), BigInt::from(2));
        assert_eq!(out.values()[0], vec![three_halves, rational(2)]);
        assert!(is_left_shift_of(&shift(&x), &x));
    }

    #[test]
    fn shift_examples() {
        assert_eq!(shift(&seq(&[4, 7, 9])), seq(&[7, 9, 9]));
        assert_eq!(shift(&seq(&[5])), seq(&[5]));
        assert_eq!(shift(&seq(&[3, 3, 3, 3])), seq(&[3, 3, 3, 3]));
        assert!(SeqOp::<Rational>::new(vec![]).is_err());
    }

    #[test]
    fn program_examples() {
        use programs::*;
        assert_eq!(reverse(&seq(&[1, 2, 3])), seq(&[3, 2, 1]));
        assert_eq!(
            prefix_mean(&seq(&[2, 4, 0])).values(),
            &[rational(2), rational(3), rational(2)]
        );
        assert_eq!(mean_position_of_value(&seq(&[5, 6, 5])), seq(&[1, 1, 1]));
    }

    #[test]
    fn parse_and_demo() {
        let z = parse_sequence("4, 7/2 -1").unwrap();
        assert_eq!(
            z.values()[1],
            Rational::new(BigInt::from(7), BigInt::from(2))
        );
        let text = ShiftDemo { z: &z }.to_string();
        assert!(text.contains("shift(z) = [7/2 -1 -1]"));
        assert!(text.ends_with("ok"));
        assert!(parse_sequence("1 x").is_err());
        assert!(parse_sequence("  ").is_err());
    }

    fn rationals() -> impl Strategy<Value = SeqOp<Rational>> {
        prop::collection::vec((-20i64..20, 1i64..6), 1..12).prop_map(|v| {
            SeqOp::new(
                v.into_iter()
                    .map(|(p, q)| Rational::new(BigInt::from(p), BigInt::from(q)))
                    .collect(),
            )
            .unwrap()
        })
    }

    proptest! {
        #[test]
        fn shift_fixed_points_are_constant(z in rationals()) {
            let constant = z.values().iter().all(|v| *v == z.values()[0]);
            prop_assert_eq!(shift(&z) == z, constant);
        }

        #[test]
        fn shift_is_idempotent_iff_tail_is_constant(z in rationals()) {
            let s = shift(&z);
            let tail_constant = z.values()[1..].iter().all(|v| *v == z.values()[z.len() - 1]);
            prop_assert_eq!(shift(&s) == s, tail_constant);
        }
    }
}
