//! Space-filling-curve orderings of key points.
//!
//! Points are quantized per sample onto a `2^bits` grid per axis, mapped to
//! a curve rank, and stably sorted by rank (ties keep the original index
//! order). The Hilbert encoder is Skilling's transpose algorithm.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::Point;
use crate::{Error, Result};

pub const DEFAULT_GRID_BITS: u32 = 9;
pub const MAX_GRID_BITS: u32 = 20;

/// A scan order over the grid. Serializes as its label, e.g. `"hilbert"` or
/// `"random(7)"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum CurveKind {
    Hilbert,
    TransHilbert,
    ZOrder,
    TransZOrder,
    Random(u64),
}

impl CurveKind {
    /// Stable numeric code used in CSV output.
    pub fn code(self) -> u8 {
        match self {
            CurveKind::Hilbert => 0,
            CurveKind::TransHilbert => 1,
            CurveKind::ZOrder => 2,
            CurveKind::TransZOrder => 3,
            CurveKind::Random(_) => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CurveKind::Hilbert => "hilbert",
            CurveKind::TransHilbert => "trans_hilbert",
            CurveKind::ZOrder => "z_order",
            CurveKind::TransZOrder => "trans_z_order",
            CurveKind::Random(_) => "random",
        }
    }

    /// Parses a curve name; `seed` is only used by `random`.
    pub fn parse(name: &str, seed: u64) -> Result<Self> {
        Ok(
            match name.trim().to_ascii_lowercase().replace('-', "_").as_str() {
                "hilbert" => CurveKind::Hilbert,
                "trans_hilbert" | "transhilbert" => CurveKind::TransHilbert,
                "z_order" | "zorder" | "z" => CurveKind::ZOrder,
                "trans_z_order" | "trans_zorder" | "transzorder" => CurveKind::TransZOrder,
                "random" => CurveKind::Random(seed),
                other => return Err(Error::invalid("curve", format!("unknown curve `{other}`"))),
            },
        )
    }

    /// Inverse of `Display`: a plain name, or `random(<seed>)`.
    pub fn from_label(label: &str) -> Result<Self> {
        let t = label.trim();
        if let Some(inner) = t.strip_prefix("random(").and_then(|r| r.strip_suffix(')')) {
            let seed = inner
                .trim()
                .parse()
                .map_err(|_| Error::invalid("curve", format!("bad random seed in `{t}`")))?;
            return Ok(CurveKind::Random(seed));
        }
        CurveKind::parse(t, 0)
    }

    fn transposed(self) -> bool {
        matches!(self, CurveKind::TransHilbert | CurveKind::TransZOrder)
    }
}

impl fmt::Display for CurveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CurveKind::Random(seed) => write!(f, "random({seed})"),
            c => f.write_str(c.name()),
        }
    }
}

impl From<CurveKind> for String {
    fn from(c: CurveKind) -> String {
        c.to_string()
    }
}

impl TryFrom<String> for CurveKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        CurveKind::from_label(&s)
    }
}

/// A permutation of key-point indices and the curve that produced it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SerializedOrder {
    pub order: Vec<usize>,
    pub curve: CurveKind,
    pub grid_bits: u32,
}

impl SerializedOrder {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// `rank[i]` is the position of point `i` in the order.
    pub fn ranks(&self) -> Vec<usize> {
        let mut r = alloc::vec![0; self.order.len()];
        for (pos, &i) in self.order.iter().enumerate() {
            r[i] = pos;
        }
        r
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if !(1..=MAX_GRID_BITS).contains(&bits) {
        return Err(Error::invalid(
            "grid",
            format!("bits must be in 1..={MAX_GRID_BITS}, got {bits}"),
        ));
    }
    Ok(())
}

fn check_coord(c: [u32; 3], bits: u32) -> Result<()> {
    check_bits(bits)?;
    match c.iter().find(|&&v| v >> bits != 0) {
        Some(&value) => Err(Error::CoordinateOutOfRange { value, bits }),
        None => Ok(()),
    }
}

/// Per-axis min–max scaling to `[0, 2^bits - 1]`, rounded half up.
/// An axis with zero extent maps to 0.
pub fn quantize_to_grid(points: &[Point], bits: u32) -> Result<Vec<[u32; 3]>> {
    check_bits(bits)?;
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "quantize_to_grid",
        });
    }
    let top = ((1u64 << bits) - 1) as f64;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    Ok(points
        .iter()
        .map(|p| {
            let mut q = [0u32; 3];
            for a in 0..3 {
                let extent = hi[a] - lo[a];
                if extent > 0.0 {
                    let v = libm::floor((p[a] - lo[a]) / extent * top + 0.5);
                    q[a] = v.clamp(0.0, top) as u32;
                }
            }
            q
        })
        .collect())
}

/// Rank of a cell along the 3-D Hilbert curve.
pub fn hilbert_index(coord: [u32; 3], bits: u32) -> Result<u64> {
    check_coord(coord, bits)?;
    let mut x = coord;
    let m = 1u32 << (bits - 1);
    // inverse undo
    let mut q = m;
    while q > 1 {
        let p = q - 1;
        for i in 0..3 {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q >>= 1;
    }
    // Gray encode
    for i in 1..3 {
        x[i] ^= x[i - 1];
    }
    let mut t = 0;
    let mut q = m;
    while q > 1 {
        if x[2] & q != 0 {
            t ^= q - 1;
        }
        q >>= 1;
    }
    for v in &mut x {
        *v ^= t;
    }
    let mut index = 0u64;
    for b in (0..bits).rev() {
        for v in x {
            index = (index << 1) | u64::from((v >> b) & 1);
        }
    }
    Ok(index)
}

/// Inverse of [`hilbert_index`].
pub fn hilbert_point(index: u64, bits: u32) -> Result<[u32; 3]> {
    check_bits(bits)?;
    if index >> (3 * bits) != 0 {
        return Err(Error::invalid(
            "hilbert_point",
            format!("index {index} outside a {bits}-bit grid"),
        ));
    }
    let mut x = [0u32; 3];
    for b in 0..bits {
        for (i, v) in x.iter_mut().enumerate() {
            let shift = 3 * b + (2 - i as u32);
            *v |= (((index >> shift) & 1) as u32) << b;
        }
    }
    let n = 2u32 << (bits - 1);
    // Gray decode
    let t = x[2] >> 1;
    for i in (1..3).rev() {
        x[i] ^= x[i - 1];
    }
    x[0] ^= t;
    // undo excess work
    let mut q = 2;
    while q != n {
        let p = q - 1;
        for i in (0..3).rev() {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q <<= 1;
    }
    Ok(x)
}

/// Morton code, interleaving from the most significant bit with `x` as the
/// most significant axis of each triple.
pub fn z_index(coord: [u32; 3], bits: u32) -> Result<u64> {
    check_coord(coord, bits)?;
    let mut code = 0u64;
    for b in (0..bits).rev() {
        for v in coord {
            code = (code << 1) | u64::from((v >> b) & 1);
        }
    }
    Ok(code)
}

/// The fixed axis permutation behind the `Trans` curves: `(x, y, z) -> (z, x, y)`.
pub fn transpose_axes(c: [u32; 3]) -> [u32; 3] {
    [c[2], c[0], c[1]]
}

/// Orders `points` along `curve`.
pub fn serialize(points: &[Point], curve: CurveKind, bits: u32) -> Result<SerializedOrder> {
    if points.is_empty() {
        return Err(Error::Empty("key points"));
    }
    check_bits(bits)?;
    let order = match curve {
        CurveKind::Random(seed) => {
            let mut order: Vec<usize> = (0..points.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            order
        }
        _ => {
            let grid = quantize_to_grid(points, bits)?;
            let mut keyed = Vec::with_capacity(points.len());
            for (i, &c) in grid.iter().enumerate() {
                let c = if curve.transposed() {
                    transpose_axes(c)
                } else {
                    c
                };
                let key = match curve {
                    CurveKind::Hilbert | CurveKind::TransHilbert => hilbert_index(c, bits)?,
                    _ => z_index(c, bits)?,
                };
                keyed.push((key, i));
            }
            keyed.sort_unstable();
            keyed.into_iter().map(|(_, i)| i).collect()
        }
    };
    Ok(SerializedOrder {
        order,
        curve,
        grid_bits: bits,
    })
}

/// Mean Euclidean distance between consecutive points of the order.
pub fn locality_score(order: &SerializedOrder, points: &[Point]) -> Result<f64> {
    if order.len() < 2 {
        return Err(Error::invalid(
            "locality_score",
            "needs at least two points",
        ));
    }
    if order.len() != points.len() {
        return Err(Error::shape(
            "locality_score",
            format!("{} ranks for {} points", order.len(), points.len()),
        ));
    }
    let total: f64 = order
        .order
        .windows(2)
        .map(|w| libm::sqrt(crate::geometry::dist2(&points[w[0]], &points[w[1]])))
        .sum();
    Ok(total / (order.len() - 1) as f64)
}
