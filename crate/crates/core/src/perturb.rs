//! Appearance perturbations applied to patches before restoration.
//!
//! Every operator is split into a sampling step, which realizes all random
//! choices into an [`Op`] record, and [`apply_op`], which is a pure function
//! of the record and the patch. A [`PerturbationSpec`] is therefore an
//! exact replay recipe.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::seed;

const LUT_SIZE: usize = 1024;

/// Axis-aligned box inside a patch, `[z, y, x]` order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub start: [usize; 3],
    pub extent: [usize; 3],
}

impl Block {
    fn check(&self, shape: [usize; 3]) -> Result<()> {
        for a in 0..3 {
            if self.extent[a] == 0 || self.start[a] + self.extent[a] > shape[a] {
                return Err(Error::usage(format!("block {self:?} does not fit patch {shape:?}")));
            }
        }
        Ok(())
    }

    /// Flat indices of the block's voxels, in raster order.
    pub fn indices(&self, shape: [usize; 3]) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.extent.iter().product());
        for z in self.start[0]..self.start[0] + self.extent[0] {
            for y in self.start[1]..self.start[1] + self.extent[1] {
                for x in self.start[2]..self.start[2] + self.extent[2] {
                    out.push((z * shape[1] + y) * shape[2] + x);
                }
            }
        }
        out
    }

    pub fn contains(&self, c: [usize; 3]) -> bool {
        (0..3).all(|a| c[a] >= self.start[a] && c[a] < self.start[a] + self.extent[a])
    }

    fn overlaps(&self, o: &Block) -> bool {
        (0..3).all(|a| self.start[a] < o.start[a] + o.extent[a] && o.start[a] < self.start[a] + self.extent[a])
    }
}

/// One realized perturbation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Op {
    Identity,
    Bezier {
        points: [[f64; 2]; 4],
    },
    LocalShuffle {
        tiles: Vec<Block>,
        seed: u64,
    },
    Inpaint {
        blocks: Vec<Block>,
        seed: u64,
    },
    Outpaint {
        kept: Block,
        seed: u64,
    },
    /// Exchanges the contents of each block pair.
    Swap {
        pairs: Vec<(Block, Block)>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub seed: u64,
    pub ops: Vec<Op>,
}

impl PerturbationSpec {
    pub fn is_identity(&self) -> bool {
        self.ops.iter().all(|o| matches!(o, Op::Identity))
    }

    pub fn replay(&self, patch: &Grid) -> Result<Grid> {
        let mut out = patch.clone();
        for op in &self.ops {
            out = apply_op(op, &out)?;
        }
        Ok(out)
    }
}

fn de_casteljau(p: &[[f64; 2]; 4], t: f64, axis: usize) -> f64 {
    let lerp = |a: f64, b: f64| a * (1.0 - t) + b * t;
    let mut v = [p[0][axis], p[1][axis], p[2][axis], p[3][axis]];
    for n in (1..4).rev() {
        for i in 0..n {
            v[i] = lerp(v[i], v[i + 1]);
        }
    }
    v[0]
}

fn check_bezier(points: &[[f64; 2]; 4]) -> Result<()> {
    if points[0][0] != 0.0 || points[3][0] != 1.0 {
        return Err(Error::usage("bezier end points must have x = 0 and x = 1"));
    }
    if points.windows(2).any(|w| w[0][0] > w[1][0]) {
        return Err(Error::usage("bezier control x-coordinates must be sorted ascending"));
    }
    if points.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::usage("bezier control points must lie in [0, 1]^2"));
    }
    Ok(())
}

/// Maps intensities through the Bézier curve's `y(x)`, inverting `x(t)`
/// through a dense lookup table.
pub struct BezierMap {
    points: [[f64; 2]; 4],
    xs: Vec<f64>,
    diagonal: bool,
}

impl BezierMap {
    pub fn new(points: [[f64; 2]; 4]) -> Result<Self> {
        check_bezier(&points)?;
        let xs = (0..LUT_SIZE)
            .map(|i| de_casteljau(&points, i as f64 / (LUT_SIZE - 1) as f64, 0))
            .collect();
        let diagonal = points.iter().all(|p| p[0] == p[1]);
        Ok(BezierMap { points, xs, diagonal })
    }

    /// Curve parameter `t` with `x(t) = v`.
    pub fn invert(&self, v: f64) -> f64 {
        let step = 1.0 / (LUT_SIZE - 1) as f64;
        let hi = self.xs.partition_point(|&x| x < v);
        if hi == 0 {
            return 0.0;
        }
        if hi >= LUT_SIZE {
            return 1.0;
        }
        let (x0, x1) = (self.xs[hi - 1], self.xs[hi]);
        let t0 = (hi - 1) as f64 * step;
        let f = ((v - x0) / (x1 - x0)).clamp(0.0, 1.0);
        if f == 1.0 {
            return hi as f64 * step;
        }
        t0 + f * step
    }

    /// `y(x)`; curves with every control point on the diagonal are exactly the identity.
    pub fn map(&self, v: f64) -> f64 {
        if self.diagonal {
            return v;
        }
        de_casteljau(&self.points, self.invert(v), 1)
    }
}

fn check_unit_range(patch: &Grid) -> Result<()> {
    if patch.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::usage("perturbation input must lie in [0, 1]"));
    }
    Ok(())
}

pub fn bezier_intensity(patch: &Grid, points: [[f64; 2]; 4]) -> Result<Grid> {
    apply_op(&Op::Bezier { points }, patch)
}

/// Draws a monotone Bézier curve with two random interior control points,
/// decreasing `(0,1)-(1,0)` with probability `flip_prob` and increasing
/// `(0,0)-(1,1)` otherwise.
pub fn sample_bezier(rng: &mut seed::Rng, flip_prob: f64) -> Op {
    let mut x = [rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0)];
    x.sort_by(f64::total_cmp);
    let mut y = [rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0)];
    y.sort_by(f64::total_cmp);
    let (y0, y3) = if rng.random_bool(flip_prob) {
        y.reverse();
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    Op::Bezier {
        points: [[0.0, y0], [x[0], y[0]], [x[1], y[1]], [1.0, y3]],
    }
}

fn window_extent(shape: [usize; 3], w: usize) -> Result<[usize; 3]> {
    let mut e = [w; 3];
    if shape[0] == 1 {
        e[0] = 1;
    }
    if w == 0 || (0..3).any(|a| e[a] > shape[a]) {
        return Err(Error::usage(format!("window extent {w} does not fit patch {shape:?}")));
    }
    Ok(e)
}

/// Picks `n` distinct tiles from the non-overlapping `w`-sided tiling of the
/// patch (fewer if the tiling has fewer tiles).
pub fn sample_local_shuffle(shape: [usize; 3], w: usize, n: usize, seed: u64) -> Result<Op> {
    let e = window_extent(shape, w)?;
    let counts = [shape[0] / e[0], shape[1] / e[1], shape[2] / e[2]];
    let mut all = Vec::new();
    for z in 0..counts[0] {
        for y in 0..counts[1] {
            for x in 0..counts[2] {
                all.push(Block {
                    start: [z * e[0], y * e[1], x * e[2]],
                    extent: e,
                });
            }
        }
    }
    let mut rng = seed::derived_rng(seed, "perturb.shuffle.tiles", 0);
    all.shuffle(&mut rng);
    all.truncate(n);
    Ok(Op::LocalShuffle {
        tiles: all,
        seed: seed::derive(seed, "perturb.shuffle.perm", 0),
    })
}

pub fn local_shuffle(patch: &Grid, w: usize, n: usize, seed: u64) -> Result<Grid> {
    apply_op(&sample_local_shuffle(patch.shape(), w, n, seed)?, patch)
}

fn frac_extent(shape: [usize; 3], f: f64, axis: usize) -> usize {
    if shape[axis] == 1 {
        1
    } else {
        ((f * shape[axis] as f64).round() as usize).clamp(1, shape[axis])
    }
}

fn check_fraction_range(range: [f64; 2], what: &str) -> Result<()> {
    let [lo, hi] = range;
    if !(lo > 0.0 && lo <= hi) {
        return Err(Error::usage(format!(
            "{what} extent range {range:?} must satisfy 0 < lo <= hi"
        )));
    }
    if hi > 1.0 {
        return Err(Error::usage(format!("{what} extent {hi} exceeds the patch")));
    }
    Ok(())
}

fn sample_block(rng: &mut seed::Rng, shape: [usize; 3], range: [f64; 2]) -> Block {
    let mut b = Block {
        start: [0; 3],
        extent: [1; 3],
    };
    for a in 0..3 {
        let f = if range[0] == range[1] {
            range[0]
        } else {
            rng.random_range(range[0]..=range[1])
        };
        b.extent[a] = frac_extent(shape, f, a);
        b.start[a] = rng.random_range(0..=shape[a] - b.extent[a]);
    }
    b
}

/// `n` blocks whose per-axis extents are fractions of the patch drawn from
/// `range`.
pub fn sample_inpaint(shape: [usize; 3], n: usize, range: [f64; 2], seed: u64) -> Result<Op> {
    check_fraction_range(range, "inpaint block")?;
    let mut rng = seed::derived_rng(seed, "perturb.inpaint.blocks", 0);
    let blocks = (0..n).map(|_| sample_block(&mut rng, shape, range)).collect();
    Ok(Op::Inpaint {
        blocks,
        seed: seed::derive(seed, "perturb.inpaint.noise", 0),
    })
}

pub fn inpaint_distort(patch: &Grid, n: usize, range: [f64; 2], seed: u64) -> Result<Grid> {
    apply_op(&sample_inpaint(patch.shape(), n, range, seed)?, patch)
}

pub fn sample_outpaint(shape: [usize; 3], range: [f64; 2], seed: u64) -> Result<Op> {
    check_fraction_range(range, "outpaint window")?;
    let mut rng = seed::derived_rng(seed, "perturb.outpaint.window", 0);
    Ok(Op::Outpaint {
        kept: sample_block(&mut rng, shape, range),
        seed: seed::derive(seed, "perturb.outpaint.noise", 0),
    })
}

pub fn outpaint_distort(patch: &Grid, range: [f64; 2], seed: u64) -> Result<Grid> {
    apply_op(&sample_outpaint(patch.shape(), range, seed)?, patch)
}

/// Up to `n` pairs of non-overlapping `w`-sided blocks to exchange.
pub fn sample_swap(shape: [usize; 3], w: usize, n: usize, seed: u64) -> Result<Op> {
    let e = window_extent(shape, w)?;
    let mut rng = seed::derived_rng(seed, "perturb.swap", 0);
    let draw = |rng: &mut seed::Rng| Block {
        start: [
            rng.random_range(0..=shape[0] - e[0]),
            rng.random_range(0..=shape[1] - e[1]),
            rng.random_range(0..=shape[2] - e[2]),
        ],
        extent: e,
    };
    let mut pairs = Vec::new();
    for _ in 0..n {
        for _ in 0..100 {
            let (a, b) = (draw(&mut rng), draw(&mut rng));
            if !a.overlaps(&b) {
                pairs.push((a, b));
                break;
            }
        }
    }
    Ok(Op::Swap { pairs })
}

pub fn apply_op(op: &Op, patch: &Grid) -> Result<Grid> {
    check_unit_range(patch)?;
    let shape = patch.shape();
    let mut out = patch.clone();
    match op {
        Op::Identity => {}
        Op::Bezier { points } => {
            let m = BezierMap::new(*points)?;
            for v in out.data_mut() {
                *v = m.map(*v as f64) as f32;
            }
        }
        Op::LocalShuffle { tiles, seed } => {
            let mut rng = seed::rng(*seed);
            let data = out.data_mut();
            for t in tiles {
                t.check(shape)?;
                let idx = t.indices(shape);
                let mut vals: Vec<f32> = idx.iter().map(|&i| data[i]).collect();
                vals.shuffle(&mut rng);
                for (&i, v) in idx.iter().zip(vals) {
                    data[i] = v;
                }
            }
        }
        Op::Inpaint { blocks, seed } => {
            let mut rng = seed::rng(*seed);
            let data = out.data_mut();
            for b in blocks {
                b.check(shape)?;
                for i in b.indices(shape) {
                    data[i] = rng.random::<f32>();
                }
            }
        }
        Op::Outpaint { kept, seed } => {
            kept.check(shape)?;
            let mut rng = seed::rng(*seed);
            for z in 0..shape[0] {
                for y in 0..shape[1] {
                    for x in 0..shape[2] {
                        if !kept.contains([z, y, x]) {
                            out.set(z, y, x, rng.random::<f32>());
                        }
                    }
                }
            }
        }
        Op::Swap { pairs } => {
            let data = out.data_mut();
            for (a, b) in pairs {
                a.check(shape)?;
                b.check(shape)?;
                if a.extent != b.extent || a.overlaps(b) {
                    return Err(Error::usage("swapped blocks must be equal-sized and disjoint"));
                }
                for (i, j) in a.indices(shape).into_iter().zip(b.indices(shape)) {
                    data.swap(i, j);
                }
            }
        }
    }
    Ok(out)
}

/// Probabilities and magnitudes of the perturbation chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbPolicy {
    pub identity_prob: f64,
    pub bezier_prob: f64,
    /// Probability that a sampled intensity curve is decreasing.
    pub bezier_flip_prob: f64,
    pub shuffle_prob: f64,
    pub paint_prob: f64,
    /// Share of painting steps that in-paint rather than out-paint.
    pub inpaint_share: f64,
    pub shuffle_window: usize,
    pub shuffle_windows: usize,
    pub inpaint_blocks: usize,
    pub inpaint_extent: [f64; 2],
    pub outpaint_extent: [f64; 2],
}

impl Default for PerturbPolicy {
    fn default() -> Self {
        PerturbPolicy {
            identity_prob: 0.1,
            bezier_prob: 0.9,
            bezier_flip_prob: 0.0,
            shuffle_prob: 0.5,
            paint_prob: 0.5,
            inpaint_share: 0.5,
            shuffle_window: 4,
            shuffle_windows: 6,
            inpaint_blocks: 2,
            inpaint_extent: [0.15, 0.35],
            outpaint_extent: [0.4, 0.8],
        }
    }
}

impl PerturbPolicy {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("identity_prob", self.identity_prob),
            ("bezier_prob", self.bezier_prob),
            ("bezier_flip_prob", self.bezier_flip_prob),
            ("shuffle_prob", self.shuffle_prob),
            ("paint_prob", self.paint_prob),
            ("inpaint_share", self.inpaint_share),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("perturb.{name} = {p} is not a probability")));
            }
        }
        check_fraction_range(self.inpaint_extent, "inpaint block").map_err(|e| Error::config(e.to_string()))?;
        check_fraction_range(self.outpaint_extent, "outpaint window").map_err(|e| Error::config(e.to_string()))?;
        if self.shuffle_window == 0 {
            return Err(Error::config("perturb.shuffle_window must be positive"));
        }
        Ok(())
    }
}

/// Samples and applies one perturbation chain.
pub fn sample_perturbation(patch: &Grid, seed: u64, policy: &PerturbPolicy) -> Result<(Grid, PerturbationSpec)> {
    let spec = sample_spec(patch.shape(), seed, policy)?;
    let out = spec.replay(patch)?;
    Ok((out, spec))
}

/// Realizes the chain for a patch of `shape` without touching any data.
pub fn sample_spec(shape: [usize; 3], seed: u64, policy: &PerturbPolicy) -> Result<PerturbationSpec> {
    policy.validate()?;
    let mut rng = seed::derived_rng(seed, "perturb.chain", 0);
    let mut ops = Vec::new();
    if rng.random_bool(policy.identity_prob) {
        ops.push(Op::Identity);
        return Ok(PerturbationSpec { seed, ops });
    }
    if rng.random_bool(policy.bezier_prob) {
        ops.push(sample_bezier(&mut rng, policy.bezier_flip_prob));
    }
    if rng.random_bool(policy.shuffle_prob) {
        let w = policy.shuffle_window.min(shape[1]).min(shape[2]);
        ops.push(sample_local_shuffle(
            shape,
            if shape[0] == 1 { w } else { w.min(shape[0]) },
            policy.shuffle_windows,
            seed::derive(seed, "perturb.shuffle", 0),
        )?);
    }
    if rng.random_bool(policy.paint_prob) {
        if rng.random_bool(policy.inpaint_share) {
            ops.push(sample_inpaint(
                shape,
                policy.inpaint_blocks,
                policy.inpaint_extent,
                seed::derive(seed, "perturb.inpaint", 0),
            )?);
        } else {
            ops.push(sample_outpaint(
                shape,
                policy.outpaint_extent,
                seed::derive(seed, "perturb.outpaint", 0),
            )?);
        }
    }
    Ok(PerturbationSpec { seed, ops })
}
