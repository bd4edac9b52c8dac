//! Dense scalar grids holding image data (whole volumes and patches).
//!
//! A grid is always stored as `[depth, height, width]`; 2D data uses
//! `depth == 1` and `dims == 2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dims: usize,
    shape: [usize; 3],
    data: Vec<f32>,
}

impl Grid {
    pub fn new(dims: usize, shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if dims != 2 && dims != 3 {
            return Err(Error::config(format!("grid rank must be 2 or 3, got {dims}")));
        }
        if dims == 2 && shape[0] != 1 {
            return Err(Error::config("2D grids must have depth 1"));
        }
        if shape.contains(&0) {
            return Err(Error::config(format!("grid extents must be positive: {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::config(format!(
                "grid data length {} != product of extents {n}",
                data.len()
            )));
        }
        Ok(Grid { dims, shape, data })
    }

    pub fn zeros(dims: usize, shape: [usize; 3]) -> Result<Self> {
        Grid::new(dims, shape, vec![0.0; shape.iter().product()])
    }

    pub fn filled(dims: usize, shape: [usize; 3], value: f32) -> Result<Self> {
        Grid::new(dims, shape, vec![value; shape.iter().product()])
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    /// Extents of the spatial axes only (`[h, w]` or `[d, h, w]`).
    pub fn spatial_shape(&self) -> Vec<usize> {
        if self.dims == 2 {
            vec![self.shape[1], self.shape[2]]
        } else {
            self.shape.to_vec()
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: f32) {
        let i = self.index(z, y, x);
        self.data[i] = v;
    }

    /// Copies the box `[start, start + extent)`; the box must lie inside.
    pub fn crop(&self, start: [usize; 3], extent: [usize; 3]) -> Result<Grid> {
        for a in 0..3 {
            if extent[a] == 0 || start[a] + extent[a] > self.shape[a] {
                return Err(Error::usage(format!(
                    "crop start {start:?} extent {extent:?} exceeds grid {:?}",
                    self.shape
                )));
            }
        }
        let mut out = Vec::with_capacity(extent.iter().product());
        for z in start[0]..start[0] + extent[0] {
            for y in start[1]..start[1] + extent[1] {
                let row = self.index(z, y, start[2]);
                out.extend_from_slice(&self.data[row..row + extent[2]]);
            }
        }
        Grid::new(self.dims, extent, out)
    }

    /// Linear resampling with half-pixel centres, separable per axis.
    /// Axes whose extent is unchanged are copied exactly.
    pub fn resize_linear(&self, target: [usize; 3]) -> Result<Grid> {
        if self.dims == 2 && target[0] != 1 {
            return Err(Error::usage("2D grids resize to depth 1 only"));
        }
        let mut cur = self.clone();
        for axis in 0..3 {
            if cur.shape[axis] != target[axis] {
                cur = cur.resize_axis(axis, target[axis])?;
            }
        }
        Ok(cur)
    }

    fn resize_axis(&self, axis: usize, out_len: usize) -> Result<Grid> {
        if out_len == 0 {
            return Err(Error::usage("resize to zero extent"));
        }
        let in_len = self.shape[axis];
        let mut shape = self.shape;
        shape[axis] = out_len;
        let taps: Vec<(usize, usize, f64)> = (0..out_len)
            .map(|i| {
                let src = ((i as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).clamp(0.0, (in_len - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(in_len - 1);
                (lo, hi, src - lo as f64)
            })
            .collect();
        let mut out = Grid::zeros(self.dims, shape)?;
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    let mut at = [z, y, x];
                    let (lo, hi, frac) = taps[at[axis]];
                    at[axis] = lo;
                    let a = self.get(at[0], at[1], at[2]) as f64;
                    at[axis] = hi;
                    let b = self.get(at[0], at[1], at[2]) as f64;
                    out.set(z, y, x, (a * (1.0 - frac) + b * frac) as f32);
                }
            }
        }
        Ok(out)
    }

    /// Block-average downsampling by an integer factor per axis.
    pub fn area_downsample(&self, factor: [usize; 3]) -> Result<Grid> {
        for a in 0..3 {
            if factor[a] == 0 || !self.shape[a].is_multiple_of(factor[a]) {
                return Err(Error::config(format!(
                    "downsample factor {factor:?} does not divide {:?}",
                    self.shape
                )));
            }
        }
        let shape = [
            self.shape[0] / factor[0],
            self.shape[1] / factor[1],
            self.shape[2] / factor[2],
        ];
        let norm = (factor[0] * factor[1] * factor[2]) as f64;
        let mut out = Grid::zeros(self.dims, shape)?;
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    let mut acc = 0.0f64;
                    for dz in 0..factor[0] {
                        for dy in 0..factor[1] {
                            for dx in 0..factor[2] {
                                acc += self.get(z * factor[0] + dz, y * factor[1] + dy, x * factor[2] + dx) as f64;
                            }
                        }
                    }
                    out.set(z, y, x, (acc / norm) as f32);
                }
            }
        }
        Ok(out)
    }

    /// Downsamples (area average when divisible, linear otherwise) to `target`.
    pub fn downsample_to(&self, target: [usize; 3]) -> Result<Grid> {
        let divisible = (0..3).all(|a| target[a] > 0 && self.shape[a].is_multiple_of(target[a]));
        if divisible {
            self.area_downsample([
                self.shape[0] / target[0],
                self.shape[1] / target[1],
                self.shape[2] / target[2],
            ])
        } else {
            self.resize_linear(target)
        }
    }

    /// Rotates every depth slice by `k` quarter turns in the height/width plane.
    pub fn rotate90(&self, k: usize) -> Result<Grid> {
        let k = k % 4;
        if k == 0 {
            return Ok(self.clone());
        }
        let [d, h, w] = self.shape;
        if h != w {
            return Err(Error::usage(format!("rotation needs square slices, got {h}x{w}")));
        }
        let n = h;
        let mut out = Grid::zeros(self.dims, self.shape)?;
        for z in 0..d {
            for y in 0..n {
                for x in 0..n {
                    let (sy, sx) = match k {
                        1 => (x, n - 1 - y),
                        2 => (n - 1 - y, n - 1 - x),
                        _ => (n - 1 - x, y),
                    };
                    out.set(z, y, x, self.get(z, sy, sx));
                }
            }
        }
        Ok(out)
    }

    /// The middle depth slice as a `[1, h, w]` 2D grid.
    pub fn mid_slice(&self) -> Grid {
        let z = self.shape[0] / 2;
        let start = self.index(z, 0, 0);
        let n = self.shape[1] * self.shape[2];
        Grid {
            dims: 2,
            shape: [1, self.shape[1], self.shape[2]],
            data: self.data[start..start + n].to_vec(),
        }
    }

    pub fn l2_distance(&self, other: &Grid) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}
