//! BEV scope and resolution algebra.
//!
//! A scope is the axis-aligned window of world space covered by a BEV grid
//! together with its meters-per-pixel resolution. All pixel/world mapping,
//! per-pixel coverage, pooled coverage, and scale-factor derivation live
//! here as pure functions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned BEV window with independent X/Y resolutions (meters per pixel).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevScope {
    pub lb_x: f64,
    pub ub_x: f64,
    pub lb_y: f64,
    pub ub_y: f64,
    pub r_x: f64,
    pub r_y: f64,
}

/// Integer pixel coordinate bound to some scope: `u` = column (X), `v` = row (Y).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PixelCoord {
    pub u: usize,
    pub v: usize,
}

/// Pooling kernel footprint: a contiguous `size_u x size_v` block of offsets
/// anchored at the pooled pixel's top-left member.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Kernel2 {
    pub size_u: usize,
    pub size_v: usize,
}

/// Axis-aligned rectangle in meters, half-open on both axes: `[min, max)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub min_x: f64,
    pub max_x: f64,
    pub min_y: f64,
    pub max_y: f64,
}

fn exact_dim(lb: f64, ub: f64, r: f64, axis: &str) -> Result<usize> {
    if !(ub > lb) || !(r > 0.0) {
        return Err(Error::Config(format!(
            "invalid scope on {axis}: lb={lb}, ub={ub}, r={r}"
        )));
    }
    let n = (ub - lb) / r;
    let rounded = n.round();
    if rounded < 1.0 || (n - rounded).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "scope extent on {axis} not an integer number of pixels: ({ub} - {lb}) / {r} = {n}"
        )));
    }
    Ok(rounded as usize)
}

impl BevScope {
    pub fn new(lb_x: f64, ub_x: f64, lb_y: f64, ub_y: f64, r_x: f64, r_y: f64) -> Result<Self> {
        let s = BevScope { lb_x, ub_x, lb_y, ub_y, r_x, r_y };
        s.validate()?;
        Ok(s)
    }

    /// Square scope: same bounds and resolution on both axes.
    pub fn square(lb: f64, ub: f64, r: f64) -> Result<Self> {
        Self::new(lb, ub, lb, ub, r, r)
    }

    pub fn validate(&self) -> Result<()> {
        exact_dim(self.lb_x, self.ub_x, self.r_x, "x")?;
        exact_dim(self.lb_y, self.ub_y, self.r_y, "y")?;
        Ok(())
    }

    /// Grid width in pixels (X axis).
    pub fn width(&self) -> usize {
        ((self.ub_x - self.lb_x) / self.r_x).round() as usize
    }

    /// Grid depth in pixels (Y axis, rows).
    pub fn depth(&self) -> usize {
        ((self.ub_y - self.lb_y) / self.r_y).round() as usize
    }

    /// World coordinate sampled for pixel `(u, v)`: the cell's lower corner.
    ///
    /// Corner sampling keeps multi-resolution rasterization exact: the sample
    /// points of a scope downscaled by `s` are a stride-`s` subset of the
    /// original sample points, for every integer `s`.
    pub fn sample_point(&self, u: usize, v: usize) -> (f64, f64) {
        (self.lb_x + u as f64 * self.r_x, self.lb_y + v as f64 * self.r_y)
    }

    /// Center of the cell `(u, v)` in meters.
    pub fn cell_center(&self, u: usize, v: usize) -> (f64, f64) {
        (
            self.lb_x + (u as f64 + 0.5) * self.r_x,
            self.lb_y + (v as f64 + 0.5) * self.r_y,
        )
    }
}

impl PixelCoord {
    pub fn new(u: usize, v: usize) -> Self {
        PixelCoord { u, v }
    }
}

impl Kernel2 {
    pub fn new(size_u: usize, size_v: usize) -> Result<Self> {
        if size_u == 0 || size_v == 0 {
            return Err(Error::Config("kernel sizes must be positive".into()));
        }
        Ok(Kernel2 { size_u, size_v })
    }

    /// The relative offset set: the contiguous block `{(i, j) : 0 <= i < size_u, 0 <= j < size_v}`.
    pub fn offsets(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.size_u * self.size_v);
        for j in 0..self.size_v {
            for i in 0..self.size_u {
                out.push((i, j));
            }
        }
        out
    }
}

impl Rect {
    pub fn area(&self) -> f64 {
        (self.max_x - self.min_x) * (self.max_y - self.min_y)
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.min_x < other.max_x
            && other.min_x < self.max_x
            && self.min_y < other.max_y
            && other.min_y < self.max_y
    }
}

/// Half-open world-space coverage `[lb + u*r, lb + (u+1)*r)` of one BEV pixel.
pub fn pixel_coverage(u: PixelCoord, scope: &BevScope) -> Result<Rect> {
    if u.u >= scope.width() || u.v >= scope.depth() {
        return Err(Error::Bounds(format!(
            "pixel ({}, {}) outside {}x{} grid",
            u.u,
            u.v,
            scope.width(),
            scope.depth()
        )));
    }
    Ok(Rect {
        min_x: scope.lb_x + u.u as f64 * scope.r_x,
        max_x: scope.lb_x + (u.u + 1) as f64 * scope.r_x,
        min_y: scope.lb_y + u.v as f64 * scope.r_y,
        max_y: scope.lb_y + (u.v + 1) as f64 * scope.r_y,
    })
}

/// Inverse of [`pixel_coverage`]: the unique pixel whose half-open cell
/// contains `p`. Points on shared cell boundaries belong to the upper cell.
pub fn world_to_pixel(x: f64, y: f64, scope: &BevScope) -> Result<PixelCoord> {
    if x < scope.lb_x || x >= scope.ub_x || y < scope.lb_y || y >= scope.ub_y {
        return Err(Error::Bounds(format!("point ({x}, {y}) outside scope window")));
    }
    let u = ((x - scope.lb_x) / scope.r_x).floor() as usize;
    let v = ((y - scope.lb_y) / scope.r_y).floor() as usize;
    // Floating-point floor can land one past the end right at the upper bound.
    let u = u.min(scope.width() - 1);
    let v = v.min(scope.depth() - 1);
    Ok(PixelCoord { u, v })
}

/// Coverage of a pooled pixel: the union of its member cells, together with
/// the enlarged resolution `r' = (r_x * |chi_u|, r_y * |chi_v|)`.
pub fn pooled_coverage(u: PixelCoord, scope: &BevScope, k: Kernel2) -> Result<(Rect, (f64, f64))> {
    if scope.width() % k.size_u != 0 || scope.depth() % k.size_v != 0 {
        return Err(Error::Config(format!(
            "grid {}x{} not divisible by kernel {}x{}",
            scope.width(),
            scope.depth(),
            k.size_u,
            k.size_v
        )));
    }
    let pooled_w = scope.width() / k.size_u;
    let pooled_d = scope.depth() / k.size_v;
    if u.u >= pooled_w || u.v >= pooled_d {
        return Err(Error::Bounds(format!(
            "pooled pixel ({}, {}) outside {pooled_w}x{pooled_d} grid",
            u.u, u.v
        )));
    }
    let new_r = (scope.r_x * k.size_u as f64, scope.r_y * k.size_v as f64);
    // Contiguous kernel anchored top-left, so the union is one rectangle.
    let base = PixelCoord::new(u.u * k.size_u, u.v * k.size_v);
    let first = pixel_coverage(base, scope)?;
    let last = pixel_coverage(
        PixelCoord::new(base.u + k.size_u - 1, base.v + k.size_v - 1),
        scope,
    )?;
    Ok((
        Rect {
            min_x: first.min_x,
            max_x: last.max_x,
            min_y: first.min_y,
            max_y: last.max_y,
        },
        new_r,
    ))
}

/// Same window, resolution multiplied by `s`, grid dimensions divided by `s`.
pub fn downscale_scope(scope: &BevScope, s: usize) -> Result<BevScope> {
    if s == 0 {
        return Err(Error::Config("scale factor must be positive".into()));
    }
    if scope.width() % s != 0 || scope.depth() % s != 0 {
        return Err(Error::Config(format!(
            "grid {}x{} not divisible by scale {s}",
            scope.width(),
            scope.depth()
        )));
    }
    BevScope::new(
        scope.lb_x,
        scope.ub_x,
        scope.lb_y,
        scope.ub_y,
        scope.r_x * s as f64,
        scope.r_y * s as f64,
    )
}
