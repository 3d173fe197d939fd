//! Exact ±1 Hadamard matrices and the multiply-free transforms built on them.
//!
//! Power-of-two orders come from the Sylvester (Kronecker) construction.
//! Other orders are built from Paley I (prime `q ≡ 3 mod 4`, order `q + 1`)
//! or Paley II (prime `q ≡ 1 mod 4`, order `2(q + 1)`), optionally scaled up
//! by Sylvester factors. Orders outside that family can be loaded from the
//! `+`/`-` text format handled by [`HadamardMatrix::parse`].

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Neg, Sub};

use thiserror::Error;

/// Largest Sylvester exponent accepted by [`construct_sylvester`].
pub const MAX_SYLVESTER_K: u32 = 16;

/// Largest order built on demand by [`construct_npt`].
pub const MAX_NPT_ORDER: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HadamardError {
    #[error("sylvester exponent {k} out of range (max {max})")]
    Size { k: u32, max: u32 },
    #[error("unsupported Hadamard order {order}; supported: {supported}")]
    UnsupportedOrder { order: usize, supported: String },
    #[error("shape mismatch: expected length {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("matrix file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("matrix of order {order} is not Hadamard: row {row} · row {col} = {dot}")]
    NotOrthogonal {
        order: usize,
        row: usize,
        col: usize,
        dot: i64,
    },
}

/// Square matrix with entries in {+1, −1}, stored row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct HadamardMatrix {
    order: usize,
    entries: Vec<i8>,
}

impl fmt::Debug for HadamardMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HadamardMatrix")
            .field("order", &self.order)
            .finish_non_exhaustive()
    }
}

impl HadamardMatrix {
    /// Wraps raw entries after checking the ±1 alphabet and `H·Hᵀ = n·I`.
    pub fn from_entries(order: usize, entries: Vec<i8>) -> Result<Self, HadamardError> {
        if entries.len() != order * order {
            return Err(HadamardError::Shape {
                expected: order * order,
                got: entries.len(),
            });
        }
        if let Some(pos) = entries.iter().position(|&e| e != 1 && e != -1) {
            return Err(HadamardError::Parse {
                line: pos / order.max(1) + 2,
                msg: format!("entry {} is not ±1", entries[pos]),
            });
        }
        let h = Self { order, entries };
        h.check_orthogonal()?;
        Ok(h)
    }

    pub(crate) fn from_entries_unchecked(order: usize, entries: Vec<i8>) -> Self {
        debug_assert_eq!(entries.len(), order * order);
        Self { order, entries }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn entries(&self) -> &[i8] {
        &self.entries
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> i8 {
        self.entries[row * self.order + col]
    }

    pub fn row(&self, row: usize) -> &[i8] {
        &self.entries[row * self.order..(row + 1) * self.order]
    }

    /// Column `col` as a vector (used by tests and the verify suite).
    pub fn column(&self, col: usize) -> Vec<i8> {
        (0..self.order).map(|r| self.get(r, col)).collect()
    }

    /// Exact integer Gram matrix `H·Hᵀ`, row-major.
    pub fn gram(&self) -> Vec<i64> {
        let n = self.order;
        let mut out = vec![0i64; n * n];
        for i in 0..n {
            let ri = self.row(i);
            for j in i..n {
                let rj = self.row(j);
                let dot: i64 = ri.iter().zip(rj).map(|(&a, &b)| (a * b) as i64).sum();
                out[i * n + j] = dot;
                out[j * n + i] = dot;
            }
        }
        out
    }

    /// Checks `H·Hᵀ = order·I` exactly.
    pub fn check_orthogonal(&self) -> Result<(), HadamardError> {
        let n = self.order;
        let gram = self.gram();
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { n as i64 } else { 0 };
                let dot = gram[i * n + j];
                if dot != want {
                    return Err(HadamardError::NotOrthogonal {
                        order: n,
                        row: i,
                        col: j,
                        dot,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn is_orthogonal(&self) -> bool {
        self.check_orthogonal().is_ok()
    }

    /// Kronecker product `self ⊗ other`.
    pub fn kron(&self, other: &HadamardMatrix) -> HadamardMatrix {
        let (a, b) = (self.order, other.order);
        let n = a * b;
        let mut entries = vec![0i8; n * n];
        for i in 0..a {
            for j in 0..a {
                let s = self.get(i, j);
                for k in 0..b {
                    let dst = (i * b + k) * n + j * b;
                    for (d, &e) in entries[dst..dst + b].iter_mut().zip(other.row(k)) {
                        *d = s * e;
                    }
                }
            }
        }
        Self::from_entries_unchecked(n, entries)
    }

    /// Flips one entry's sign. Only used for fault injection.
    pub fn with_flipped_entry(mut self, row: usize, col: usize) -> Self {
        let idx = row * self.order + col;
        self.entries[idx] = -self.entries[idx];
        self
    }

    /// Parses the text format: the order on line 1, then `order` lines of
    /// `order` characters from `{+, -}`. Blank trailing lines are ignored.
    pub fn parse(text: &str) -> Result<Self, HadamardError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(HadamardError::Parse {
            line: 1,
            msg: "empty file".into(),
        })?;
        let order: usize = header.trim().parse().map_err(|_| HadamardError::Parse {
            line: 1,
            msg: format!("invalid order {:?}", header.trim()),
        })?;
        if order == 0 {
            return Err(HadamardError::Parse {
                line: 1,
                msg: "order must be positive".into(),
            });
        }
        let mut entries = Vec::with_capacity(order * order);
        let mut rows = 0usize;
        for (i, raw) in lines.enumerate() {
            let line_no = i + 2;
            let line = raw.trim_end_matches('\r');
            if rows == order {
                if line.trim().is_empty() {
                    continue;
                }
                return Err(HadamardError::Parse {
                    line: line_no,
                    msg: format!("expected {order} rows, found more"),
                });
            }
            let mut count = 0usize;
            for ch in line.chars() {
                match ch {
                    '+' => entries.push(1),
                    '-' => entries.push(-1),
                    other => {
                        return Err(HadamardError::Parse {
                            line: line_no,
                            msg: format!("invalid character {other:?}"),
                        })
                    }
                }
                count += 1;
            }
            if count != order {
                return Err(HadamardError::Parse {
                    line: line_no,
                    msg: format!("expected {order} characters, found {count}"),
                });
            }
            rows += 1;
        }
        if rows != order {
            return Err(HadamardError::Parse {
                line: rows + 2,
                msg: format!("expected {order} rows, found {rows}"),
            });
        }
        Self::from_entries(order, entries)
    }

    /// Serializes into the text format accepted by [`HadamardMatrix::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.order * (self.order + 1) + 8);
        out.push_str(&self.order.to_string());
        out.push('\n');
        for r in 0..self.order {
            for &e in self.row(r) {
                out.push(if e > 0 { '+' } else { '-' });
            }
            out.push('\n');
        }
        out
    }
}

/// Sylvester construction: `H(2^k) = H(2) ⊗ H(2^{k-1})`, `H(1) = [1]`.
pub fn construct_sylvester(k: u32) -> Result<HadamardMatrix, HadamardError> {
    if k > MAX_SYLVESTER_K {
        return Err(HadamardError::Size {
            k,
            max: MAX_SYLVESTER_K,
        });
    }
    let base = HadamardMatrix::from_entries_unchecked(2, vec![1, 1, 1, -1]);
    let mut h = HadamardMatrix::from_entries_unchecked(1, vec![1]);
    for _ in 0..k {
        h = base.kron(&h);
    }
    Ok(h)
}

fn is_prime(q: usize) -> bool {
    if q < 2 {
        return false;
    }
    let mut d = 2;
    while d * d <= q {
        if q % d == 0 {
            return false;
        }
        d += 1;
    }
    true
}

/// Quadratic character of `a` modulo the odd prime `q`.
fn legendre(a: usize, q: usize) -> i8 {
    let a = a % q;
    if a == 0 {
        return 0;
    }
    let mut squares = vec![false; q];
    for x in 1..q {
        squares[x * x % q] = true;
    }
    if squares[a] {
        1
    } else {
        -1
    }
}

/// Jacobsthal matrix `Q[i][j] = χ(j − i)` over `GF(q)`.
fn jacobsthal(q: usize) -> Vec<i8> {
    let chi: Vec<i8> = (0..q).map(|a| legendre(a, q)).collect();
    let mut out = vec![0i8; q * q];
    for i in 0..q {
        for j in 0..q {
            out[i * q + j] = chi[(j + q - i) % q];
        }
    }
    out
}

/// Paley I: `H = I + [[0, 1ᵀ], [−1, Q]]` for prime `q ≡ 3 (mod 4)`.
fn paley_one(q: usize) -> HadamardMatrix {
    let n = q + 1;
    let jac = jacobsthal(q);
    let mut e = vec![0i8; n * n];
    for j in 1..n {
        e[j] = 1;
        e[j * n] = -1;
    }
    for i in 0..q {
        for j in 0..q {
            e[(i + 1) * n + j + 1] = jac[i * q + j];
        }
    }
    for i in 0..n {
        e[i * n + i] += 1;
    }
    HadamardMatrix::from_entries_unchecked(n, e)
}

/// Paley II for prime `q ≡ 1 (mod 4)`: expand the symmetric conference
/// matrix `C = [[0, 1ᵀ], [1, Q]]`, replacing zeros with `[[1, −1], [−1, −1]]`
/// and `±1` with `±[[1, 1], [1, −1]]`.
fn paley_two(q: usize) -> HadamardMatrix {
    let c_order = q + 1;
    let jac = jacobsthal(q);
    let conf = |i: usize, j: usize| -> i8 {
        match (i, j) {
            (0, 0) => 0,
            (0, _) | (_, 0) => 1,
            _ => jac[(i - 1) * q + (j - 1)],
        }
    };
    let n = 2 * c_order;
    let mut e = vec![0i8; n * n];
    for i in 0..c_order {
        for j in 0..c_order {
            let c = conf(i, j);
            let blk: [[i8; 2]; 2] = if c == 0 {
                [[1, -1], [-1, -1]]
            } else {
                [[c, c], [c, -c]]
            };
            for (a, row) in blk.iter().enumerate() {
                for (b, &v) in row.iter().enumerate() {
                    e[(2 * i + a) * n + 2 * j + b] = v;
                }
            }
        }
    }
    HadamardMatrix::from_entries_unchecked(n, e)
}

/// Paley base for `order`, if one exists.
fn paley_base(order: usize) -> Option<HadamardMatrix> {
    if order >= 4 && order % 4 == 0 {
        let q = order - 1;
        if q % 4 == 3 && is_prime(q) {
            return Some(paley_one(q));
        }
    }
    if order >= 12 && order % 4 == 0 {
        let q = order / 2 - 1;
        if q % 4 == 1 && is_prime(q) {
            return Some(paley_two(q));
        }
    }
    None
}

/// Whether [`construct_npt`] can build `order` without a matrix file.
pub fn is_constructible(order: usize) -> bool {
    if order == 0 || order > MAX_NPT_ORDER {
        return false;
    }
    let mut base = order;
    loop {
        if base.is_power_of_two() || paley_base(base).is_some() {
            return true;
        }
        if base % 2 != 0 {
            return false;
        }
        base /= 2;
    }
}

/// Constructible orders up to `limit`, ascending.
pub fn constructible_orders(limit: usize) -> Vec<usize> {
    (1..=limit.min(MAX_NPT_ORDER))
        .filter(|&n| is_constructible(n))
        .collect()
}

fn supported_summary() -> String {
    let small: Vec<String> = constructible_orders(64)
        .into_iter()
        .map(|n| n.to_string())
        .collect();
    format!(
        "{{{}, ...}} (powers of two, Paley I/II orders, and their 2^j multiples up to {MAX_NPT_ORDER}; others via matrix file)",
        small.join(", ")
    )
}

/// Builds a Hadamard matrix of order `m`: the largest Paley (or trivial)
/// base dividing `m` by a power of two, Kronecker-expanded by `H(2^j)`.
pub fn construct_npt(m: usize) -> Result<HadamardMatrix, HadamardError> {
    let unsupported = || HadamardError::UnsupportedOrder {
        order: m,
        supported: supported_summary(),
    };
    if !is_constructible(m) {
        return Err(unsupported());
    }
    let mut base = m;
    let mut j = 0u32;
    loop {
        if let Some(h) = paley_base(base) {
            return Ok(construct_sylvester(j)?.kron(&h));
        }
        if base.is_power_of_two() {
            return construct_sylvester(j + base.trailing_zeros());
        }
        base /= 2;
        j += 1;
    }
}

/// In-place unnormalized FWHT. After the call `x` holds `H(2^k)·x`.
pub fn fwht_in_place<T>(x: &mut [T]) -> Result<(), HadamardError>
where
    T: Copy + Add<Output = T> + Sub<Output = T>,
{
    let n = x.len();
    if !n.is_power_of_two() {
        return Err(HadamardError::Shape {
            expected: n.next_power_of_two(),
            got: n,
        });
    }
    let mut half = 1;
    while half < n {
        for start in (0..n).step_by(2 * half) {
            for i in start..start + half {
                let a = x[i];
                let b = x[i + half];
                x[i] = a + b;
                x[i + half] = a - b;
            }
        }
        half *= 2;
    }
    Ok(())
}

/// Unnormalized FWHT of a vector of length `2^k`.
pub fn fwht(x: &[f64], k: u32) -> Result<Vec<f64>, HadamardError> {
    let expected = 1usize.checked_shl(k).unwrap_or(0);
    if x.len() != expected {
        return Err(HadamardError::Shape {
            expected,
            got: x.len(),
        });
    }
    let mut out = x.to_vec();
    fwht_in_place(&mut out)?;
    Ok(out)
}

/// `H·x` using only additions and subtractions.
pub fn apply_npt<T>(x: &[T], h: &HadamardMatrix) -> Result<Vec<T>, HadamardError>
where
    T: Copy + Add<Output = T> + Sub<Output = T> + Neg<Output = T>,
{
    if x.len() != h.order() {
        return Err(HadamardError::Shape {
            expected: h.order(),
            got: x.len(),
        });
    }
    Ok((0..h.order()).map(|r| signed_sum(h.row(r), x)).collect())
}

#[inline]
fn signed_sum<T>(signs: &[i8], x: &[T]) -> T
where
    T: Copy + Add<Output = T> + Sub<Output = T> + Neg<Output = T>,
{
    let mut acc = if signs[0] > 0 { x[0] } else { -x[0] };
    for (&s, &v) in signs[1..].iter().zip(&x[1..]) {
        acc = if s > 0 { acc + v } else { acc - v };
    }
    acc
}

/// Hadamard matrices keyed by order: matrices loaded from files take
/// precedence, everything else is constructed on demand.
#[derive(Debug, Clone, Default)]
pub struct HadamardLibrary {
    loaded: BTreeMap<usize, HadamardMatrix>,
}

impl HadamardLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, h: HadamardMatrix) {
        self.loaded.insert(h.order(), h);
    }

    pub fn load_text(&mut self, text: &str) -> Result<usize, HadamardError> {
        let h = HadamardMatrix::parse(text)?;
        let order = h.order();
        self.insert(h);
        Ok(order)
    }

    pub fn contains(&self, order: usize) -> bool {
        self.loaded.contains_key(&order) || is_constructible(order)
    }

    pub fn get(&self, order: usize) -> Result<HadamardMatrix, HadamardError> {
        match self.loaded.get(&order) {
            Some(h) => Ok(h.clone()),
            None => construct_npt(order),
        }
    }
}
