//! Point-cloud primitives: farthest point sampling, nearest neighbours,
//! patch grouping and the Chamfer distance.
//!
//! All searches are brute force over squared distances. Ties are broken by
//! the smaller original index.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::numerics::BackwardRule;
use crate::{Error, GradTape, Result, Tensor, Var};

pub type Point = [f64; 3];

#[inline]
pub fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// An ordered set of 3-D points with optional per-point labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("point cloud"));
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite { op: "point cloud" });
        }
        Ok(PointCloud {
            points,
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != self.points.len() {
            return Err(Error::shape(
                "point cloud",
                format!("{} labels for {} points", labels.len(), self.len()),
            ));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    /// Applies `f` to every point. The result must stay finite.
    pub fn map(&self, f: impl Fn(Point) -> Point) -> Result<Self> {
        let mut out = PointCloud::new(self.points.iter().map(|&p| f(p)).collect())?;
        out.labels = self.labels.clone();
        Ok(out)
    }

    /// Translates to zero centroid and scales into the unit ball.
    pub fn normalized(&self) -> Result<Self> {
        let n = self.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a] / n;
            }
        }
        let r = libm::sqrt(self.points.iter().map(|p| dist2(p, &c)).fold(0.0, f64::max));
        let s = if r > 0.0 { 1.0 / r } else { 1.0 };
        self.map(|p| [(p[0] - c[0]) * s, (p[1] - c[1]) * s, (p[2] - c[2]) * s])
    }
}

/// Greedy max-min subsampling. The first pick is `start`; each later pick
/// maximises the distance to the picks so far. Returns indices in
/// selection order.
pub fn farthest_point_sampling(points: &[Point], n: usize, start: usize) -> Result<Vec<usize>> {
    let m = points.len();
    if m == 0 {
        return Err(Error::Empty("point cloud"));
    }
    if n == 0 || n > m {
        return Err(Error::invalid(
            "farthest_point_sampling",
            format!("cannot pick {n} of {m} points"),
        ));
    }
    if start >= m {
        return Err(Error::invalid(
            "farthest_point_sampling",
            format!("start {start} of {m} points"),
        ));
    }
    let mut picked = Vec::with_capacity(n);
    let mut min_d = vec![f64::INFINITY; m];
    let mut cur = start;
    for _ in 0..n {
        picked.push(cur);
        let p = points[cur];
        let mut best = 0;
        let mut best_d = -1.0;
        for (i, (q, md)) in points.iter().zip(min_d.iter_mut()).enumerate() {
            let d = dist2(&p, q);
            if d < *md {
                *md = d;
            }
            // strict `>` keeps the smallest index on ties
            if *md > best_d {
                best_d = *md;
                best = i;
            }
        }
        cur = best;
    }
    Ok(picked)
}

/// FPS with a uniformly drawn start point.
pub fn farthest_point_sampling_seeded<R: Rng + ?Sized>(
    points: &[Point],
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::Empty("point cloud"));
    }
    let start = rng.random_range(0..points.len());
    farthest_point_sampling(points, n, start)
}

/// Indices of the `k` points closest to `query`, nearest first.
pub fn knn(points: &[Point], query: &Point, k: usize) -> Result<Vec<usize>> {
    let m = points.len();
    if k == 0 || k > m {
        return Err(Error::invalid("knn", format!("k = {k} with {m} points")));
    }
    let mut cand: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (dist2(p, query), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < m {
        cand.select_nth_unstable_by(k - 1, cmp);
        cand.truncate(k);
    }
    cand.sort_unstable_by(cmp);
    Ok(cand.into_iter().map(|(_, i)| i).collect())
}

/// A key point and its neighbourhood in key-relative coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PointPatch {
    pub key_point: Point,
    pub relative_points: Vec<Point>,
    pub key_index: usize,
    pub member_indices: Vec<usize>,
}

/// One patch per key index, in the given order, with neighbours drawn from
/// the whole cloud.
pub fn make_patches(points: &[Point], key_indices: &[usize], k: usize) -> Result<Vec<PointPatch>> {
    key_indices
        .iter()
        .map(|&ki| {
            let key = *points.get(ki).ok_or_else(|| {
                Error::invalid(
                    "make_patches",
                    format!("key index {ki} of {}", points.len()),
                )
            })?;
            let members = knn(points, &key, k)?;
            let relative_points = members
                .iter()
                .map(|&j| {
                    [
                        points[j][0] - key[0],
                        points[j][1] - key[1],
                        points[j][2] - key[2],
                    ]
                })
                .collect();
            Ok(PointPatch {
                key_point: key,
                relative_points,
                key_index: ki,
                member_indices: members,
            })
        })
        .collect()
}

fn nearest(p: &Point, set: &[Point]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, q) in set.iter().enumerate() {
        let d = dist2(p, q);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Two-sided Chamfer distance with squared Euclidean terms, each side
/// averaged over its own set.
pub fn chamfer_distance(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("chamfer point set"));
    }
    let ab: f64 = a.iter().map(|p| nearest(p, b).1).sum::<f64>() / a.len() as f64;
    let ba: f64 = b.iter().map(|p| nearest(p, a).1).sum::<f64>() / b.len() as f64;
    Ok(ab + ba)
}

pub(crate) fn as_points(t: &Tensor) -> Result<Vec<Point>> {
    if t.cols() != 3 {
        return Err(Error::shape(
            "points",
            format!("expected [_, 3], got {:?}", t.shape()),
        ));
    }
    Ok(t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
}

pub fn points_tensor(points: &[Point]) -> Result<Tensor> {
    if points.is_empty() {
        return Err(Error::Empty("point set"));
    }
    Tensor::new(
        [points.len(), 3],
        points.iter().flatten().copied().collect(),
    )
}

struct ChamferRule;

impl BackwardRule for ChamferRule {
    fn name(&self) -> &'static str {
        "chamfer"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Result<Vec<Option<Vec<f64>>>> {
        let a = as_points(inputs[0])?;
        let b = as_points(inputs[1])?;
        let mut ga = vec![0.0; a.len() * 3];
        let mut gb = vec![0.0; b.len() * 3];
        one_side(&a, &b, g[0], &mut ga, &mut gb);
        one_side(&b, &a, g[0], &mut gb, &mut ga);
        Ok(vec![needs[0].then_some(ga), needs[1].then_some(gb)])
    }
}

/// Gradient of `mean_i min_j |from_i - to_j|^2` scattered into both sets.
fn one_side(from: &[Point], to: &[Point], g: f64, g_from: &mut [f64], g_to: &mut [f64]) {
    let scale = 2.0 * g / from.len() as f64;
    for (i, p) in from.iter().enumerate() {
        let (j, _) = nearest(p, to);
        for ax in 0..3 {
            let d = scale * (p[ax] - to[j][ax]);
            g_from[i * 3 + ax] += d;
            g_to[j * 3 + ax] -= d;
        }
    }
}

/// [`chamfer_distance`] between two `[_, 3]` tape values.
pub fn chamfer_on_tape(tape: &mut GradTape, a: Var, b: Var) -> Result<Var> {
    let v = chamfer_distance(&as_points(tape.value(a))?, &as_points(tape.value(b))?)?;
    tape.custom(&[a, b], Tensor::scalar(v), Box::new(ChamferRule))
}

struct PatchChamferRule {
    k: usize,
    target: Tensor,
}

impl BackwardRule for PatchChamferRule {
    fn name(&self) -> &'static str {
        "patch_chamfer"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Result<Vec<Option<Vec<f64>>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        let pred = inputs[0];
        let rows = pred.rows();
        let w = 3 * self.k;
        let mut gp = vec![0.0; pred.len()];
        let mut scratch = vec![0.0; w];
        for r in 0..rows {
            let a = row_points(pred.row(r));
            let b = row_points(self.target.row(r));
            let ga = &mut gp[r * w..(r + 1) * w];
            scratch.fill(0.0);
            one_side(&a, &b, g[0] / rows as f64, ga, &mut scratch);
            one_side(&b, &a, g[0] / rows as f64, &mut scratch, ga);
        }
        Ok(vec![Some(gp)])
    }
}

fn row_points(row: &[f64]) -> Vec<Point> {
    row.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Mean over rows of the Chamfer distance between row `i` of `pred` and row
/// `i` of `target`, each row read as `k` packed `xyz` triples.
pub fn patch_chamfer(pred: &Tensor, target: &Tensor, k: usize) -> Result<f64> {
    if pred.shape() != target.shape() || pred.cols() != 3 * k || pred.rows() == 0 {
        return Err(Error::shape(
            "patch_chamfer",
            format!("{:?} vs {:?} with k = {k}", pred.shape(), target.shape()),
        ));
    }
    let mut total = 0.0;
    for r in 0..pred.rows() {
        total += chamfer_distance(&row_points(pred.row(r)), &row_points(target.row(r)))?;
    }
    Ok(total / pred.rows() as f64)
}

/// [`patch_chamfer`] with the gradient flowing into `pred`.
pub fn patch_chamfer_on_tape(
    tape: &mut GradTape,
    pred: Var,
    target: &Tensor,
    k: usize,
) -> Result<Var> {
    let v = patch_chamfer(tape.value(pred), target, k)?;
    tape.custom(
        &[pred],
        Tensor::scalar(v),
        Box::new(PatchChamferRule {
            k,
            target: target.clone(),
        }),
    )
}
