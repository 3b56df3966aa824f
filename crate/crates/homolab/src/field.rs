//! Stationary random and periodic coefficient fields.
//!
//! Every model produces a diagonal, uniformly elliptic matrix `a(x)` on the
//! torus `[0, L)^d` together with its closed-form drift `b_i = ½ Σ_j ∂_j a_ji`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng;

/// Largest dimension supported by the coefficient models.
pub const MAX_D: usize = 4;

const RESAMPLE_TAG: u64 = 0x7E5A_3D1C;

/// Law of the marks attached to Poisson points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "kebab-case")]
pub enum MarkLaw {
    /// Independent uniform components on `[lo, hi)`.
    Uniform { lo: f64, hi: f64, dim: usize },
    /// Deterministic mark.
    Constant { value: Vec<f64> },
}

impl Default for MarkLaw {
    fn default() -> Self {
        MarkLaw::Uniform { lo: 0.0, hi: 1.0, dim: 1 }
    }
}

impl MarkLaw {
    pub fn dim(&self) -> usize {
        match self {
            MarkLaw::Uniform { dim, .. } => *dim,
            MarkLaw::Constant { value } => value.len(),
        }
    }

    /// Mean of the first component, which scales the bump.
    pub fn mean_first(&self) -> f64 {
        match self {
            MarkLaw::Uniform { lo, hi, .. } => 0.5 * (lo + hi),
            MarkLaw::Constant { value } => value[0],
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            MarkLaw::Uniform { lo, hi, dim } => {
                ensure(*dim >= 1, "mark_dim", dim, "must be at least 1")?;
                ensure(lo.is_finite() && hi.is_finite() && lo < hi, "mark_law", format!("[{lo}, {hi})"), "needs finite lo < hi")
            }
            MarkLaw::Constant { value } => ensure(
                !value.is_empty() && value.iter().all(|v| v.is_finite()),
                "mark_law",
                format!("{value:?}"),
                "needs a non-empty finite vector",
            ),
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R, out: &mut Vec<f64>) {
        match self {
            MarkLaw::Uniform { lo, hi, dim } => {
                for _ in 0..*dim {
                    out.push(lo + (hi - lo) * rng.random::<f64>());
                }
            }
            MarkLaw::Constant { value } => out.extend_from_slice(value),
        }
    }
}

/// One marked point.
#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub mark: Vec<f64>,
    pub location: Vec<f64>,
}

/// Marked Poisson configuration on a periodic box, stored cell by cell.
///
/// Cell `k` is drawn from its own substream, so cells are independent and
/// resampling one of them never touches another.
#[derive(Clone, Debug, PartialEq)]
pub struct PoissonCloud {
    d: usize,
    box_length: f64,
    intensity: f64,
    cell_size: f64,
    seed: u64,
    mark_law: MarkLaw,
    cells_per_axis: usize,
    start: Vec<usize>,
    locs: Vec<f64>,
    marks: Vec<f64>,
}

impl PoissonCloud {
    /// Samples a cloud with unit resampling cells.
    pub fn sample(d: usize, box_length: f64, intensity: f64, mark_law: MarkLaw, seed: u64) -> Result<Self> {
        Self::sample_with_cells(d, box_length, intensity, 1.0, mark_law, seed)
    }

    pub fn sample_with_cells(
        d: usize,
        box_length: f64,
        intensity: f64,
        cell_size: f64,
        mark_law: MarkLaw,
        seed: u64,
    ) -> Result<Self> {
        ensure((1..=MAX_D).contains(&d), "d", d, "must lie in 1..=4")?;
        ensure(box_length.is_finite() && box_length > 0.0, "box_length", box_length, "must be positive")?;
        ensure(intensity.is_finite() && intensity >= 0.0, "intensity", intensity, "must be non-negative and finite")?;
        ensure(cell_size.is_finite() && cell_size > 0.0, "cell_size", cell_size, "must be positive")?;
        mark_law.validate()?;
        let ratio = box_length / cell_size;
        let cells_per_axis = ratio.round() as usize;
        ensure(
            cells_per_axis >= 1 && (ratio - cells_per_axis as f64).abs() < 1e-9 * ratio.max(1.0),
            "cell_size",
            cell_size,
            "must divide box_length",
        )?;
        let mut cloud = PoissonCloud {
            d,
            box_length,
            intensity,
            cell_size,
            seed,
            mark_law,
            cells_per_axis,
            start: vec![0],
            locs: Vec::new(),
            marks: Vec::new(),
        };
        for k in 0..cloud.n_cells() {
            let mut r = rng::stream(seed, k as u64);
            cloud.push_cell(k, &mut r);
        }
        Ok(cloud)
    }

    fn push_cell<R: Rng>(&mut self, k: usize, r: &mut R) {
        let mean = self.intensity * self.cell_size.powi(self.d as i32);
        let count = if mean > 0.0 {
            Poisson::new(mean).expect("positive Poisson mean").sample(r) as usize
        } else {
            0
        };
        let origin = self.cell_origin(k);
        for _ in 0..count {
            for o in origin.iter().take(self.d) {
                let mut x = o + self.cell_size * r.random::<f64>();
                if x >= self.box_length {
                    x = self.box_length.next_down();
                }
                self.locs.push(x);
            }
            self.mark_law.sample(r, &mut self.marks);
        }
        self.start.push(self.locs.len() / self.d);
    }

    fn cell_origin(&self, k: usize) -> [f64; MAX_D] {
        let mut o = [0.0; MAX_D];
        let mut rem = k;
        for j in (0..self.d).rev() {
            o[j] = (rem % self.cells_per_axis) as f64 * self.cell_size;
            rem /= self.cells_per_axis;
        }
        o
    }

    pub fn d(&self) -> usize {
        self.d
    }
    pub fn box_length(&self) -> f64 {
        self.box_length
    }
    pub fn intensity(&self) -> f64 {
        self.intensity
    }
    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn mark_law(&self) -> &MarkLaw {
        &self.mark_law
    }
    pub fn cells_per_axis(&self) -> usize {
        self.cells_per_axis
    }
    pub fn n_cells(&self) -> usize {
        self.cells_per_axis.pow(self.d as u32)
    }
    pub fn len(&self) -> usize {
        self.locs.len() / self.d
    }
    pub fn is_empty(&self) -> bool {
        self.locs.is_empty()
    }

    /// Linear (row-major) index of a cell multi-index, validated.
    pub fn cell_index(&self, k: &[i64]) -> Result<usize> {
        ensure(k.len() == self.d, "cell", format!("{k:?}"), "needs one index per dimension")?;
        let mut lin = 0usize;
        for &kj in k {
            ensure(
                kj >= 0 && (kj as usize) < self.cells_per_axis,
                "cell",
                format!("{k:?}"),
                "lies outside the box",
            )?;
            lin = lin * self.cells_per_axis + kj as usize;
        }
        Ok(lin)
    }

    /// Number of points in the cell with linear index `k`.
    pub fn count_in_cell(&self, k: usize) -> usize {
        self.start[k + 1] - self.start[k]
    }

    /// Locations and marks of the points in cell `k`.
    pub fn cell_points(&self, k: usize) -> impl Iterator<Item = (&[f64], &[f64])> {
        let md = self.mark_law.dim();
        (self.start[k]..self.start[k + 1]).map(move |i| (&self.locs[i * self.d..(i + 1) * self.d], &self.marks[i * md..(i + 1) * md]))
    }

    pub fn points(&self) -> Vec<Point> {
        (0..self.n_cells())
            .flat_map(|k| self.cell_points(k))
            .map(|(l, m)| Point {
                mark: m.to_vec(),
                location: l.to_vec(),
            })
            .collect()
    }

    /// Replaces the points of cell `k` by a fresh sample from the same law.
    pub fn resample_cell(&self, k: &[i64], seed: u64) -> Result<Self> {
        let target = self.cell_index(k)?;
        let mut r = rng::stream(rng::derive(seed, RESAMPLE_TAG), target as u64);
        Ok(self.rebuild_cell(target, &mut r))
    }

    /// Resamples cell `k` (linear index) from an explicit generator.
    pub fn resample_cell_with<R: Rng>(&self, k: usize, r: &mut R) -> Self {
        self.rebuild_cell(k, r)
    }

    fn rebuild_cell<R: Rng>(&self, target: usize, r: &mut R) -> Self {
        let md = self.mark_law.dim();
        let mut out = PoissonCloud {
            start: vec![0],
            locs: Vec::with_capacity(self.locs.len()),
            marks: Vec::with_capacity(self.marks.len()),
            mark_law: self.mark_law.clone(),
            ..*self
        };
        for k in 0..self.n_cells() {
            if k == target {
                out.push_cell(k, r);
            } else {
                let (a, b) = (self.start[k], self.start[k + 1]);
                out.locs.extend_from_slice(&self.locs[a * self.d..b * self.d]);
                out.marks.extend_from_slice(&self.marks[a * md..b * md]);
                out.start.push(out.locs.len() / self.d);
            }
        }
        out
    }

    /// CSV with one point per row: mark components then location components.
    pub fn to_csv(&self) -> String {
        let md = self.mark_law.dim();
        let mut header: Vec<String> = (0..md).map(|i| format!("m{i}")).collect();
        header.extend((0..self.d).map(|j| format!("x{j}")));
        let mut s = header.join(",");
        s.push('\n');
        for p in self.points() {
            let row: Vec<String> = p.mark.iter().chain(&p.location).map(|v| format!("{v:.17e}")).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    /// Parses the CSV produced by [`PoissonCloud::to_csv`] back into points.
    pub fn points_from_csv(text: &str, d: usize) -> Result<Vec<Point>> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::Parse {
            line: 1,
            column: 1,
            message: "missing header".into(),
        })?;
        let cols = header.split(',').count();
        ensure(cols > d, "csv header", header, "needs mark and location columns")?;
        let md = cols - d;
        let mut pts = Vec::new();
        for (ln, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let vals: std::result::Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|e| Error::Parse {
                line: ln + 1,
                column: 1,
                message: e.to_string(),
            })?;
            if vals.len() != cols {
                return Err(Error::Parse {
                    line: ln + 1,
                    column: 1,
                    message: format!("expected {cols} columns, found {}", vals.len()),
                });
            }
            pts.push(Point {
                mark: vals[..md].to_vec(),
                location: vals[md..].to_vec(),
            });
        }
        Ok(pts)
    }
}

/// Quartic B-spline on `[-5/2, 5/2]` and its derivative, for `x >= 0`.
/// Written in the mirrored form so the tail carries no cancellation.
fn quartic_spline(x: f64) -> (f64, f64) {
    const TERMS: [(f64, f64); 3] = [(2.5, 1.0), (1.5, -5.0), (0.5, 10.0)];
    let mut v = 0.0;
    let mut dv = 0.0;
    for (knot, c) in TERMS {
        let t = knot - x;
        if t > 0.0 {
            let t3 = t * t * t;
            v += c * t3 * t;
            dv -= c * t3;
        }
    }
    (v / 24.0, dv / 6.0)
}

const SPLINE_PEAK: f64 = 115.0 / 192.0;

/// Radial C² bump of radius `radius`: value and radial derivative at distance `rho`.
fn radial_bump(rho: f64, radius: f64) -> (f64, f64) {
    if rho >= radius {
        return (0.0, 0.0);
    }
    let s = 2.5 * rho / radius;
    let (v, dv) = quartic_spline(s);
    (v / SPLINE_PEAK, dv * 2.5 / (radius * SPLINE_PEAK))
}

/// Shape function of a Poisson point: a compact C² bump, optionally skewed so
/// that it is not even under `z -> -z`.
#[derive(Clone, Debug, PartialEq)]
pub struct Bump {
    pub radius: f64,
    pub skew: f64,
    v: [f64; MAX_D],
}

impl Bump {
    pub fn new(radius: f64, skewed: bool) -> Self {
        const DIR: [f64; MAX_D] = [1.0, 0.6, 0.35, 0.2];
        let mut v = [0.0; MAX_D];
        for (vj, dj) in v.iter_mut().zip(DIR) {
            *vj = PI / radius * dj;
        }
        Bump {
            radius,
            skew: if skewed { 0.5 } else { 0.0 },
            v,
        }
    }

    /// Value at offset `z`, adding the gradient into `grad`.
    #[inline]
    pub fn eval(&self, z: &[f64], grad: &mut [f64], weight: f64) -> f64 {
        let r2: f64 = z.iter().map(|c| c * c).sum();
        if r2 >= self.radius * self.radius {
            return 0.0;
        }
        let rho = r2.sqrt();
        let (g0, dg0) = radial_bump(rho, self.radius);
        let (h, phase_cos) = if self.skew != 0.0 {
            let arg: f64 = z.iter().zip(&self.v).map(|(a, b)| a * b).sum();
            (1.0 + self.skew * arg.sin(), self.skew * arg.cos())
        } else {
            (1.0, 0.0)
        };
        let radial = if rho > 0.0 { dg0 / rho } else { 0.0 };
        for (j, gj) in grad.iter_mut().enumerate() {
            *gj += weight * (radial * z[j] * h + g0 * phase_cos * self.v[j]);
        }
        weight * g0 * h
    }

    /// Value only.
    #[inline]
    pub fn value(&self, z: &[f64], weight: f64) -> f64 {
        let r2: f64 = z.iter().map(|c| c * c).sum();
        if r2 >= self.radius * self.radius {
            return 0.0;
        }
        let g0 = radial_bump(r2.sqrt(), self.radius).0;
        let h = if self.skew != 0.0 {
            let arg: f64 = z.iter().zip(&self.v).map(|(a, b)| a * b).sum();
            1.0 + self.skew * arg.sin()
        } else {
            1.0
        };
        weight * g0 * h
    }

    /// `∫ g dz` over `R^d` for a unit mark. The skew factor integrates out by oddness.
    pub fn integral(&self, d: usize) -> f64 {
        let (x, w) = crate::stats::gauss_legendre(8);
        let knots = [0.0, 0.2, 0.6, 1.0];
        let mut radial = 0.0;
        for p in knots.windows(2) {
            let (a, b) = (p[0] * self.radius, p[1] * self.radius);
            for (xi, wi) in x.iter().zip(&w) {
                let r = 0.5 * (a + b) + 0.5 * (b - a) * xi;
                radial += 0.5 * (b - a) * wi * radial_bump(r, self.radius).0 * r.powi(d as i32 - 1);
            }
        }
        sphere_area(d) * radial
    }
}

/// Surface area of the unit sphere in `R^d`.
pub fn sphere_area(d: usize) -> f64 {
    2.0 * PI.powf(d as f64 / 2.0) / statrs::function::gamma::gamma(d as f64 / 2.0)
}

/// Smooth saturating map of the local sum into the ellipticity window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cutoff {
    pub lo: f64,
    pub hi: f64,
    pub s0: f64,
    pub gain: f64,
}

impl Cutoff {
    #[inline]
    pub fn eval(&self, s: f64) -> (f64, f64) {
        let t = (self.gain * (s - self.s0)).tanh();
        let span = self.hi - self.lo;
        (self.lo + 0.5 * span * (1.0 + t), 0.5 * span * self.gain * (1.0 - t * t))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Laminate {
    pub lo: f64,
    pub hi: f64,
    pub sharpness: f64,
    /// Constant transverse value; `None` makes every diagonal entry equal to `α(x₁)`.
    pub beta: Option<f64>,
}

impl Laminate {
    /// Profile `α(y)` on the period `l` and its derivative.
    pub fn alpha(&self, y: f64, l: f64) -> (f64, f64) {
        let w = 2.0 * PI / l;
        let (s, c) = (w * y).sin_cos();
        let k = self.sharpness;
        let norm = k.tanh();
        let t = (k * s).tanh();
        let mid = 0.5 * (self.lo + self.hi);
        let amp = 0.5 * (self.hi - self.lo);
        (mid + amp * t / norm, amp * k * w * c * (1.0 - t * t) / norm)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PeriodicSmooth {
    /// `(amplitude, angular wavevector, phase)` of each cosine mode.
    pub modes: Vec<(f64, [f64; MAX_D], f64)>,
    pub cutoff: Cutoff,
    pub aniso: [f64; MAX_D],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkerboard {
    pub cells_per_axis: usize,
    pub cell_size: f64,
    pub values: Vec<f64>,
    pub window: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoissonBump {
    pub cloud: PoissonCloud,
    pub bump: Bump,
    pub cutoff: Cutoff,
    pub aniso: [f64; MAX_D],
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Constant { c: f64 },
    Laminate(Laminate),
    PeriodicSmooth(PeriodicSmooth),
    Checkerboard(Checkerboard),
    PoissonBump(PoissonBump),
}

/// A realized coefficient field on the torus `[0, L)^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientField {
    d: usize,
    box_length: f64,
    c_minus: f64,
    c_plus: f64,
    r_dep: Option<f64>,
    model: Model,
}

/// Visits every cell index within `reach` of `center` (periodically), once.
fn for_each_near_cell(d: usize, n: usize, center: &[i64; MAX_D], reach: i64, mut f: impl FnMut(usize)) {
    let width = 2 * reach + 1;
    if width as usize >= n {
        for k in 0..n.pow(d as u32) {
            f(k);
        }
        return;
    }
    let total = (width as usize).pow(d as u32);
    for t in 0..total {
        let mut rem = t;
        let mut lin = 0usize;
        for c in center.iter().take(d) {
            let o = (rem % width as usize) as i64 - reach;
            rem /= width as usize;
            lin = lin * n + (c + o).rem_euclid(n as i64) as usize;
        }
        f(lin);
    }
}

/// Visits the cells (side `cs`, `n` per axis) that meet the ball of radius `r` around `y`.
#[inline]
fn for_each_cell_in_ball(d: usize, n: usize, cs: f64, y: &[f64; MAX_D], r: f64, mut f: impl FnMut(usize)) {
    let mut lo = [0i64; MAX_D];
    let mut width = [0usize; MAX_D];
    for j in 0..d {
        lo[j] = ((y[j] - r) / cs).floor() as i64;
        let hi = ((y[j] + r) / cs).floor() as i64;
        width[j] = ((hi - lo[j] + 1) as usize).min(n);
    }
    let total: usize = width[..d].iter().product();
    for t in 0..total {
        let mut rem = t;
        let mut lin = 0usize;
        for j in 0..d {
            let o = (rem % width[j]) as i64;
            rem /= width[j];
            lin = lin * n + (lo[j] + o).rem_euclid(n as i64) as usize;
        }
        f(lin);
    }
}

impl CoefficientField {
    pub fn constant(d: usize, c: f64, box_length: f64) -> Result<Self> {
        ensure(c.is_finite() && c > 0.0, "value", c, "must be positive")?;
        Self::checked(d, box_length, c, c, None, Model::Constant { c })
    }

    pub fn laminate(d: usize, box_length: f64, lam: Laminate) -> Result<Self> {
        ensure(lam.lo > 0.0 && lam.lo < lam.hi, "alpha_lo", lam.lo, "needs 0 < alpha_lo < alpha_hi")?;
        ensure(lam.sharpness > 0.0, "sharpness", lam.sharpness, "must be positive")?;
        let (mut lo, mut hi) = (lam.lo, lam.hi);
        if let Some(b) = lam.beta {
            ensure(b > 0.0, "beta", b, "must be positive")?;
            lo = lo.min(b);
            hi = hi.max(b);
        }
        Self::checked(d, box_length, lo, hi, None, Model::Laminate(lam))
    }

    /// Smooth periodic field `F(S(x)) I + diag(δ)` with `S` a few random cosine modes.
    pub fn periodic_smooth(
        d: usize,
        box_length: f64,
        (c_minus, c_plus): (f64, f64),
        n_modes: usize,
        max_wavenumber: i64,
        amplitude: f64,
        aniso: &[f64],
        seed: u64,
    ) -> Result<Self> {
        ensure(n_modes >= 1, "n_modes", n_modes, "must be at least 1")?;
        ensure(max_wavenumber >= 1, "max_wavenumber", max_wavenumber, "must be at least 1")?;
        let aniso = Self::aniso_array(d, aniso)?;
        let cutoff = Self::cutoff_for(c_minus, c_plus, &aniso, 0.0, 1.0)?;
        let mut r = rng::stream(seed, 0);
        let mut modes = Vec::with_capacity(n_modes);
        while modes.len() < n_modes {
            let mut k = [0.0; MAX_D];
            let mut nonzero = false;
            for kj in k.iter_mut().take(d) {
                let v = r.random_range(-max_wavenumber..=max_wavenumber);
                nonzero |= v != 0;
                *kj = 2.0 * PI * v as f64 / box_length;
            }
            if !nonzero {
                continue;
            }
            let a = amplitude * r.random_range(0.5..1.0) / (n_modes as f64).sqrt();
            let phase = r.random_range(0.0..2.0 * PI);
            modes.push((a, k, phase));
        }
        Self::checked(d, box_length, c_minus, c_plus, None, Model::PeriodicSmooth(PeriodicSmooth { modes, cutoff, aniso }))
    }

    /// Two-valued i.i.d. cell values blended by a smooth partition of unity.
    pub fn checkerboard(d: usize, box_length: f64, (lo, hi): (f64, f64), cell_size: f64, seed: u64) -> Result<Self> {
        ensure(lo > 0.0 && lo < hi, "checker_lo", lo, "needs 0 < lo < hi")?;
        let ratio = box_length / cell_size;
        let n = ratio.round() as usize;
        ensure(n >= 1 && (ratio - n as f64).abs() < 1e-9 * ratio, "cell_size", cell_size, "must divide box_length")?;
        let values = (0..n.pow(d as u32))
            .map(|k| if rng::stream(seed, k as u64).random::<bool>() { hi } else { lo })
            .collect();
        let window = 0.75 * (d as f64).sqrt() * cell_size;
        let cb = Checkerboard {
            cells_per_axis: n,
            cell_size,
            values,
            window,
        };
        Self::checked(d, box_length, lo, hi, Some(window), Model::Checkerboard(cb))
    }

    /// Poisson-bump field `F(Σ m g(x - z)) I + diag(δ)`.
    pub fn poisson_bump(
        cloud: PoissonCloud,
        bump: Bump,
        (c_minus, c_plus): (f64, f64),
        gain: f64,
        s0: Option<f64>,
        aniso: &[f64],
    ) -> Result<Self> {
        let d = cloud.d();
        ensure(d >= 2, "d", d, "must be at least 2")?;
        ensure(bump.radius > 0.0, "bump_radius", bump.radius, "must be positive")?;
        ensure(
            cloud.box_length() >= 2.0 * bump.radius,
            "bump_radius",
            bump.radius,
            "must not exceed half the box",
        )?;
        let aniso = Self::aniso_array(d, aniso)?;
        let s0 = s0.unwrap_or_else(|| cloud.intensity() * cloud.mark_law().mean_first() * bump.integral(d));
        let cutoff = Self::cutoff_for(c_minus, c_plus, &aniso, s0, gain)?;
        let (l, r) = (cloud.box_length(), bump.radius);
        Self::checked(d, l, c_minus, c_plus, Some(r), Model::PoissonBump(PoissonBump { cloud, bump, cutoff, aniso }))
    }

    fn aniso_array(d: usize, aniso: &[f64]) -> Result<[f64; MAX_D]> {
        ensure(aniso.is_empty() || aniso.len() == d, "aniso", format!("{aniso:?}"), "needs 0 or d entries")?;
        let mut a = [0.0; MAX_D];
        for (j, v) in aniso.iter().enumerate() {
            ensure(v.is_finite() && *v >= 0.0, "aniso", v, "entries must be non-negative")?;
            a[j] = *v;
        }
        Ok(a)
    }

    fn cutoff_for(c_minus: f64, c_plus: f64, aniso: &[f64; MAX_D], s0: f64, gain: f64) -> Result<Cutoff> {
        ensure(c_minus > 0.0 && c_minus < c_plus, "c_minus", c_minus, "needs 0 < c_minus < c_plus")?;
        ensure(gain.is_finite() && gain > 0.0, "gain", gain, "must be positive")?;
        let top = aniso.iter().cloned().fold(0.0, f64::max);
        ensure(c_minus < c_plus - top, "aniso", top, "must be smaller than c_plus - c_minus")?;
        Ok(Cutoff {
            lo: c_minus,
            hi: c_plus - top,
            s0,
            gain,
        })
    }

    fn checked(d: usize, box_length: f64, c_minus: f64, c_plus: f64, r_dep: Option<f64>, model: Model) -> Result<Self> {
        ensure((2..=MAX_D).contains(&d), "d", d, "must lie in 2..=4")?;
        ensure(box_length.is_finite() && box_length > 0.0, "box_length", box_length, "must be positive")?;
        Ok(CoefficientField {
            d,
            box_length,
            c_minus,
            c_plus,
            r_dep,
            model,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }
    pub fn box_length(&self) -> f64 {
        self.box_length
    }
    pub fn ellipticity(&self) -> (f64, f64) {
        (self.c_minus, self.c_plus)
    }
    /// Dependence radius; `None` for deterministic models.
    pub fn r_dep(&self) -> Option<f64> {
        self.r_dep
    }
    pub fn model(&self) -> &Model {
        &self.model
    }
    pub fn cloud(&self) -> Option<&PoissonCloud> {
        match &self.model {
            Model::PoissonBump(p) => Some(&p.cloud),
            _ => None,
        }
    }

    /// Same field with a replaced cloud (used by resampling experiments).
    pub fn with_cloud(&self, cloud: PoissonCloud) -> Result<Self> {
        match &self.model {
            Model::PoissonBump(p) => {
                ensure(cloud.d() == self.d && cloud.box_length() == self.box_length, "cloud", "mismatch", "must share d and L")?;
                let mut out = self.clone();
                out.model = Model::PoissonBump(PoissonBump { cloud, ..p.clone() });
                Ok(out)
            }
            _ => Err(Error::invalid("model", "non-poisson", "only poisson-bump fields carry a cloud")),
        }
    }

    /// Whether the shape function is even under `z -> -z`.
    pub fn shape_symmetric(&self) -> bool {
        match &self.model {
            Model::PoissonBump(p) => p.bump.skew == 0.0,
            _ => true,
        }
    }

    /// Evaluates `(a, b)` with `a` as a row-major `d × d` matrix.
    pub fn evaluate(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        ensure(x.len() == self.d, "x", format!("{x:?}"), "needs d components")?;
        ensure(x.iter().all(|v| v.is_finite()), "x", format!("{x:?}"), "must be finite")?;
        let mut diag = [0.0; MAX_D];
        let mut b = vec![0.0; self.d];
        self.eval_diag(x, &mut diag[..self.d], &mut b);
        let mut a = vec![0.0; self.d * self.d];
        for j in 0..self.d {
            a[j * self.d + j] = diag[j];
        }
        Ok((a, b))
    }

    /// Fast path: diagonal of `a(x)` and the drift. `x` must be finite.
    #[inline]
    pub fn eval_diag(&self, x: &[f64], a: &mut [f64], b: &mut [f64]) {
        let d = self.d;
        let l = self.box_length;
        let mut y = [0.0; MAX_D];
        for j in 0..d {
            y[j] = x[j] - l * (x[j] / l).floor();
        }
        b[..d].fill(0.0);
        match &self.model {
            Model::Constant { c } => a[..d].fill(*c),
            Model::Laminate(lam) => {
                let (al, dal) = lam.alpha(y[0], l);
                a[0] = al;
                for aj in a.iter_mut().take(d).skip(1) {
                    *aj = lam.beta.unwrap_or(al);
                }
                b[0] = 0.5 * dal;
            }
            Model::PeriodicSmooth(ps) => {
                let mut s = 0.0;
                let mut g = [0.0; MAX_D];
                for (amp, k, ph) in &ps.modes {
                    let arg: f64 = (0..d).map(|j| k[j] * y[j]).sum::<f64>() + ph;
                    let (sn, cs) = arg.sin_cos();
                    s += amp * cs;
                    for j in 0..d {
                        g[j] -= amp * sn * k[j];
                    }
                }
                let (f, df) = ps.cutoff.eval(s);
                for j in 0..d {
                    a[j] = f + ps.aniso[j];
                    b[j] = 0.5 * df * g[j];
                }
            }
            Model::Checkerboard(cb) => {
                let n = cb.cells_per_axis;
                let mut center = [0i64; MAX_D];
                for j in 0..d {
                    center[j] = ((y[j] / cb.cell_size).floor() as i64).min(n as i64 - 1);
                }
                let reach = (cb.window / cb.cell_size + 0.5).ceil() as i64;
                let (mut num, mut den) = (0.0, 0.0);
                let mut gnum = [0.0; MAX_D];
                let mut gden = [0.0; MAX_D];
                for_each_near_cell(d, n, &center, reach, |k| {
                    let mut rem = k;
                    let mut z = [0.0; MAX_D];
                    for j in (0..d).rev() {
                        let c = ((rem % n) as f64 + 0.5) * cb.cell_size;
                        rem /= n;
                        let mut dz = y[j] - c;
                        dz -= l * (dz / l).round();
                        z[j] = dz;
                    }
                    let rho = z[..d].iter().map(|c| c * c).sum::<f64>().sqrt();
                    let (w, dw) = radial_bump(rho, cb.window);
                    if w > 0.0 {
                        let v = cb.values[k];
                        num += v * w;
                        den += w;
                        if rho > 0.0 {
                            for j in 0..d {
                                let gj = dw * z[j] / rho;
                                gnum[j] += v * gj;
                                gden[j] += gj;
                            }
                        }
                    }
                });
                let val = num / den;
                for j in 0..d {
                    a[j] = val;
                    b[j] = 0.5 * (gnum[j] - val * gden[j]) / den;
                }
            }
            Model::PoissonBump(pb) => {
                let cloud = &pb.cloud;
                let n = cloud.cells_per_axis();
                let cs = cloud.cell_size();
                let mut s = 0.0;
                let mut g = [0.0; MAX_D];
                let md = cloud.mark_law().dim();
                for_each_cell_in_ball(d, n, cs, &y, pb.bump.radius, |k| {
                    for i in cloud.start[k]..cloud.start[k + 1] {
                        let mut z = [0.0; MAX_D];
                        for j in 0..d {
                            let mut dz = y[j] - cloud.locs[i * d + j];
                            dz -= l * (dz / l).round();
                            z[j] = dz;
                        }
                        s += pb.bump.eval(&z[..d], &mut g[..d], cloud.marks[i * md]);
                    }
                });
                let (f, df) = pb.cutoff.eval(s);
                for j in 0..d {
                    a[j] = f + pb.aniso[j];
                    b[j] = 0.5 * df * g[j];
                }
            }
        }
    }

    /// Diagonal of `a(x)` without the drift (cheaper for Poisson-bump fields).
    #[inline]
    pub fn eval_coeff(&self, x: &[f64], a: &mut [f64]) {
        let Model::PoissonBump(pb) = &self.model else {
            let mut b = [0.0; MAX_D];
            return self.eval_diag(x, a, &mut b[..self.d]);
        };
        let d = self.d;
        let l = self.box_length;
        let cloud = &pb.cloud;
        let n = cloud.cells_per_axis();
        let cs = cloud.cell_size();
        let mut y = [0.0; MAX_D];
        for j in 0..d {
            y[j] = x[j] - l * (x[j] / l).floor();
        }
        let md = cloud.mark_law().dim();
        let mut s = 0.0;
        for_each_cell_in_ball(d, n, cs, &y, pb.bump.radius, |k| {
            for i in cloud.start[k]..cloud.start[k + 1] {
                let mut z = [0.0; MAX_D];
                for j in 0..d {
                    let dz = y[j] - cloud.locs[i * d + j];
                    z[j] = dz - l * (dz / l).round();
                }
                s += pb.bump.value(&z[..d], cloud.marks[i * md]);
            }
        });
        let f = pb.cutoff.eval(s).0;
        for j in 0..d {
            a[j] = f + pb.aniso[j];
        }
    }

    /// Local sum `S(x)` for Poisson-bump fields (zero otherwise).
    pub fn local_sum(&self, x: &[f64]) -> f64 {
        match &self.model {
            Model::PoissonBump(pb) => {
                let mut a = [0.0; MAX_D];
                let mut b = [0.0; MAX_D];
                self.eval_diag(x, &mut a[..self.d], &mut b[..self.d]);
                let f = a[0] - pb.aniso[0];
                let c = pb.cutoff;
                let t = (2.0 * (f - c.lo) / (c.hi - c.lo) - 1.0).clamp(-1.0, 1.0);
                c.s0 + t.atanh() / c.gain
            }
            _ => 0.0,
        }
    }
}

/// Model names accepted in configuration files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Constant,
    Laminate,
    PeriodicSmooth,
    MollifiedCheckerboard,
    PoissonBump,
}

impl ModelKind {
    pub const ALL: [&'static str; 5] = ["constant", "laminate", "periodic-smooth", "mollified-checkerboard", "poisson-bump"];

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "constant" => ModelKind::Constant,
            "laminate" => ModelKind::Laminate,
            "periodic-smooth" => ModelKind::PeriodicSmooth,
            "mollified-checkerboard" => ModelKind::MollifiedCheckerboard,
            "poisson-bump" => ModelKind::PoissonBump,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        Self::ALL[self as usize]
    }
}

/// Flat, serializable description of a field; builds a [`CoefficientField`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub model: ModelKind,
    pub d: usize,
    pub box_length: f64,
    pub intensity: f64,
    pub c_minus: f64,
    pub c_plus: f64,
    pub skew: bool,
    pub seed: u64,
    pub value: f64,
    pub sharpness: f64,
    pub beta: Option<f64>,
    pub bump_radius: f64,
    pub gain: f64,
    pub s0: Option<f64>,
    pub aniso: Vec<f64>,
    pub cell_size: f64,
    pub mark_lo: f64,
    pub mark_hi: f64,
    pub n_modes: usize,
    pub max_wavenumber: i64,
    pub amplitude: f64,
}

impl Default for FieldSpec {
    fn default() -> Self {
        FieldSpec {
            model: ModelKind::Constant,
            d: 2,
            box_length: 1.0,
            intensity: 1.0,
            c_minus: 1.0,
            c_plus: 4.0,
            skew: false,
            seed: 0,
            value: 1.0,
            sharpness: 3.0,
            beta: None,
            bump_radius: 0.5,
            gain: 4.0,
            s0: None,
            aniso: Vec::new(),
            cell_size: 1.0,
            mark_lo: 0.0,
            mark_hi: 1.0,
            n_modes: 6,
            max_wavenumber: 2,
            amplitude: 1.0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str, slot: &mut T, problems: &mut Vec<String>) {
    if let Some(v) = map.get(key) {
        match v.trim().parse::<T>() {
            Ok(x) => *slot = x,
            Err(_) => problems.push(format!("field.{key}: cannot parse `{v}`")),
        }
    }
}

impl FieldSpec {
    /// Keys understood by [`FieldSpec::from_kv`].
    pub const KEYS: [&'static str; 21] = [
        "model",
        "d",
        "L",
        "intensity",
        "c_minus",
        "c_plus",
        "skew",
        "seed",
        "value",
        "sharpness",
        "beta",
        "bump_radius",
        "gain",
        "s0",
        "aniso",
        "cell_size",
        "mark_lo",
        "mark_hi",
        "n_modes",
        "max_wavenumber",
        "amplitude",
    ];

    /// Reads a flat key=value section. Every problem is reported, not just the first.
    pub fn from_kv(map: &BTreeMap<String, String>) -> std::result::Result<Self, Vec<String>> {
        let mut s = FieldSpec::default();
        let mut problems = Vec::new();
        match map.get("model") {
            None => problems.push("field.model: missing".to_string()),
            Some(m) => match ModelKind::parse(m.trim()) {
                Some(k) => s.model = k,
                None => problems.push(format!("field.model: unknown model `{m}` (allowed: {})", ModelKind::ALL.join(", "))),
            },
        }
        match map.get("seed") {
            None => problems.push("field.seed: missing (seeds must be explicit)".to_string()),
            Some(_) => parse_num(map, "seed", &mut s.seed, &mut problems),
        }
        parse_num(map, "d", &mut s.d, &mut problems);
        parse_num(map, "L", &mut s.box_length, &mut problems);
        parse_num(map, "intensity", &mut s.intensity, &mut problems);
        parse_num(map, "c_minus", &mut s.c_minus, &mut problems);
        parse_num(map, "c_plus", &mut s.c_plus, &mut problems);
        parse_num(map, "skew", &mut s.skew, &mut problems);
        parse_num(map, "value", &mut s.value, &mut problems);
        parse_num(map, "sharpness", &mut s.sharpness, &mut problems);
        parse_num(map, "bump_radius", &mut s.bump_radius, &mut problems);
        parse_num(map, "gain", &mut s.gain, &mut problems);
        parse_num(map, "cell_size", &mut s.cell_size, &mut problems);
        parse_num(map, "mark_lo", &mut s.mark_lo, &mut problems);
        parse_num(map, "mark_hi", &mut s.mark_hi, &mut problems);
        parse_num(map, "n_modes", &mut s.n_modes, &mut problems);
        parse_num(map, "max_wavenumber", &mut s.max_wavenumber, &mut problems);
        parse_num(map, "amplitude", &mut s.amplitude, &mut problems);
        for (key, slot) in [("beta", &mut s.beta), ("s0", &mut s.s0)] {
            if let Some(v) = map.get(key) {
                match v.trim().parse::<f64>() {
                    Ok(x) => *slot = Some(x),
                    Err(_) => problems.push(format!("field.{key}: cannot parse `{v}`")),
                }
            }
        }
        if let Some(v) = map.get("aniso") {
            let parsed: std::result::Result<Vec<f64>, _> = v.split_whitespace().map(str::parse::<f64>).collect();
            match parsed {
                Ok(a) => s.aniso = a,
                Err(_) => problems.push(format!("field.aniso: cannot parse `{v}`")),
            }
        }
        for k in map.keys() {
            if !Self::KEYS.contains(&k.as_str()) {
                problems.push(format!("field.{k}: unknown key"));
            }
        }
        if problems.is_empty() {
            Ok(s)
        } else {
            Err(problems)
        }
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("model", self.model.name().to_string());
        put("d", self.d.to_string());
        put("L", format!("{:?}", self.box_length));
        put("intensity", format!("{:?}", self.intensity));
        put("c_minus", format!("{:?}", self.c_minus));
        put("c_plus", format!("{:?}", self.c_plus));
        put("skew", self.skew.to_string());
        put("seed", self.seed.to_string());
        put("value", format!("{:?}", self.value));
        put("sharpness", format!("{:?}", self.sharpness));
        if let Some(b) = self.beta {
            put("beta", format!("{b:?}"));
        }
        put("bump_radius", format!("{:?}", self.bump_radius));
        put("gain", format!("{:?}", self.gain));
        if let Some(s0) = self.s0 {
            put("s0", format!("{s0:?}"));
        }
        if !self.aniso.is_empty() {
            put("aniso", self.aniso.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" "));
        }
        put("cell_size", format!("{:?}", self.cell_size));
        put("mark_lo", format!("{:?}", self.mark_lo));
        put("mark_hi", format!("{:?}", self.mark_hi));
        put("n_modes", self.n_modes.to_string());
        put("max_wavenumber", self.max_wavenumber.to_string());
        put("amplitude", format!("{:?}", self.amplitude));
        m
    }

    /// Same description with a different seed (ensemble members).
    pub fn with_seed(&self, seed: u64) -> Self {
        FieldSpec { seed, ..self.clone() }
    }

    pub fn build(&self) -> Result<CoefficientField> {
        let d = self.d;
        let l = self.box_length;
        match self.model {
            ModelKind::Constant => CoefficientField::constant(d, self.value, l),
            ModelKind::Laminate => CoefficientField::laminate(
                d,
                l,
                Laminate {
                    lo: self.c_minus,
                    hi: self.c_plus,
                    sharpness: self.sharpness,
                    beta: self.beta,
                },
            ),
            ModelKind::PeriodicSmooth => CoefficientField::periodic_smooth(
                d,
                l,
                (self.c_minus, self.c_plus),
                self.n_modes,
                self.max_wavenumber,
                self.amplitude,
                &self.aniso,
                self.seed,
            ),
            ModelKind::MollifiedCheckerboard => CoefficientField::checkerboard(d, l, (self.c_minus, self.c_plus), self.cell_size, self.seed),
            ModelKind::PoissonBump => {
                let law = MarkLaw::Uniform {
                    lo: self.mark_lo,
                    hi: self.mark_hi,
                    dim: 1,
                };
                let cloud = PoissonCloud::sample_with_cells(d, l, self.intensity, self.cell_size, law, self.seed)?;
                CoefficientField::poisson_bump(
                    cloud,
                    Bump::new(self.bump_radius, self.skew),
                    (self.c_minus, self.c_plus),
                    self.gain,
                    self.s0,
                    &self.aniso,
                )
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spline_is_normalized_and_smooth_at_knots() {
        let (v0, d0) = radial_bump(0.0, 0.5);
        assert!((v0 - 1.0).abs() < 1e-15 && d0.abs() < 1e-15);
        assert_eq!(radial_bump(0.5, 0.5), (0.0, 0.0));
        let (v, dv) = radial_bump(0.5 - 1e-9, 0.5);
        assert!(v < 1e-30 && dv.abs() < 1e-20);
        // derivative of the spline matches a difference quotient
        let h = 1e-6;
        let (a, _) = quartic_spline(1.3 + h);
        let (b, _) = quartic_spline(1.3 - h);
        assert!(((a - b) / (2.0 * h) - quartic_spline(1.3).1).abs() < 1e-8);
    }

    #[test]
    fn bump_integral_matches_cartesian_sum() {
        let bump = Bump::new(0.5, false);
        let n = 200;
        let h = 1.0 / n as f64;
        let mut s = 0.0;
        let mut g = [0.0; 2];
        for i in 0..n {
            for j in 0..n {
                let z = [(i as f64 + 0.5) * h - 0.5, (j as f64 + 0.5) * h - 0.5];
                s += bump.eval(&z, &mut g, 1.0) * h * h;
            }
        }
        assert!((s - bump.integral(2)).abs() < 1e-5, "{s} vs {}", bump.integral(2));
    }

    #[test]
    fn constant_field_has_zero_drift() {
        let f = CoefficientField::constant(3, 2.5, 4.0).unwrap();
        let (a, b) = f.evaluate(&[0.3, -7.0, 11.0]).unwrap();
        assert_eq!(a, vec![2.5, 0.0, 0.0, 0.0, 2.5, 0.0, 0.0, 0.0, 2.5]);
        assert_eq!(b, vec![0.0; 3]);
    }

    #[test]
    fn nan_input_is_rejected() {
        let f = CoefficientField::constant(2, 1.0, 1.0).unwrap();
        assert!(matches!(f.evaluate(&[f64::NAN, 0.0]), Err(Error::InvalidParameter { .. })));
    }

    #[test]
    fn zero_intensity_gives_empty_cloud_and_negative_is_rejected() {
        let c = PoissonCloud::sample(2, 4.0, 0.0, MarkLaw::default(), 3).unwrap();
        assert!(c.is_empty());
        let r = c.resample_cell(&[1, 2], 9).unwrap();
        assert!(r.is_empty());
        assert!(PoissonCloud::sample(2, 4.0, -1.0, MarkLaw::default(), 3).is_err());
        assert!(PoissonCloud::sample(2, 0.0, 1.0, MarkLaw::default(), 3).is_err());
        assert!(c.resample_cell(&[4, 0], 1).is_err());
    }

    #[test]
    fn spec_round_trips_through_kv() {
        let spec = FieldSpec {
            model: ModelKind::PoissonBump,
            d: 3,
            box_length: 8.0,
            skew: true,
            seed: 42,
            aniso: vec![0.1, 0.0, 0.2],
            s0: Some(0.1),
            ..FieldSpec::default()
        };
        let back = FieldSpec::from_kv(&spec.to_kv()).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn kv_reports_every_problem() {
        let mut m = BTreeMap::new();
        m.insert("model".into(), "zebra".into());
        m.insert("d".into(), "three".into());
        m.insert("colour".into(), "red".into());
        let errs = FieldSpec::from_kv(&m).unwrap_err();
        assert_eq!(errs.len(), 4, "{errs:?}");
    }
}
