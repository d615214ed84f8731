//! Scalar nonlinearities with flat (zero-derivative) regions and their
//! complementary penalty functions.
//!
//! For an activation `f` with saturation set `S = { z : f'(z) = 0 }`, the
//! complementary function is the distance to that set,
//!
//! ```text
//! f_c(z) = inf { |z - z'| : z' in S },
//! ```
//!
//! which is zero exactly on `S` and grows with slope 1 away from it. Penalizing
//! `f_c` at the hidden pre-activations pushes units towards saturation.
//!
//! Activations whose derivative never vanishes exactly (or only at isolated
//! points) get a smoothed stand-in instead: [`numeric_comp`] averages `|f'|`
//! over windows of every width `l`, weights the averages by a decreasing
//! scale weight `w(l)`, and takes the smaller of the left/right results. For
//! activations with genuine flat regions the construction recovers a scaled,
//! rounded version of the distance; for `f` with isolated critical points it
//! yields a strictly positive, smooth penalty.

use std::io;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NonlinError {
    /// The activation's derivative never vanishes, so the distance penalty
    /// does not exist.
    #[error("activation has an empty saturation set; its penalty is undefined")]
    EmptySaturationSet,
    /// The sample grid cannot resolve the activation's narrowest flat or
    /// active feature well enough for reliable quadrature.
    #[error(
        "sample grid too coarse: step {step} against a feature of width {feature} \
         (need at least 10 samples across every interior feature)"
    )]
    GridTooCoarse { step: f64, feature: f64 },
    /// Malformed sampled-activation input.
    #[error("invalid activation samples: {0}")]
    BadSamples(String),
    /// Malformed scale-weight configuration.
    #[error("invalid variation weights: {0}")]
    BadWeights(String),
}

/// Closed interval, possibly unbounded on either side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        assert!(lo <= hi, "interval bounds out of order: [{lo}, {hi}]");
        Interval { lo, hi }
    }

    pub fn contains(&self, z: f64) -> bool {
        z >= self.lo && z <= self.hi
    }

    /// Distance from `z` to the interval; 0 inside.
    pub fn distance(&self, z: f64) -> f64 {
        (self.lo - z).max(z - self.hi).max(0.0)
    }
}

/// Union of disjoint closed intervals with non-empty interior, kept in
/// ascending order. Isolated critical points do not count as saturation:
/// a set is only worth penalizing towards if it has width to sit in.
#[derive(Debug, Clone, PartialEq)]
pub struct SaturationSet {
    intervals: Vec<Interval>,
}

impl SaturationSet {
    pub fn empty() -> Self {
        SaturationSet { intervals: Vec::new() }
    }

    pub fn new(intervals: Vec<Interval>) -> Self {
        for w in intervals.windows(2) {
            assert!(w[0].hi < w[1].lo, "saturation intervals must be disjoint and sorted");
        }
        for iv in &intervals {
            assert!(iv.lo < iv.hi, "saturation intervals must have non-empty interior");
        }
        SaturationSet { intervals }
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn contains(&self, z: f64) -> bool {
        self.intervals.iter().any(|iv| iv.contains(z))
    }

    /// Distance from `z` to the set; `None` when the set is empty.
    pub fn distance(&self, z: f64) -> Option<f64> {
        self.intervals
            .iter()
            .map(|iv| iv.distance(z))
            .min_by(|a, b| a.partial_cmp(b).expect("distances are never NaN"))
    }
}

/// A nonlinearity sampled on a uniform grid together with its penalty values,
/// as produced by [`numeric_comp`]. Evaluation interpolates linearly and
/// clamps to the edge values outside the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Tabulation {
    grid: Vec<f64>,
    f: Vec<f64>,
    fc: Vec<f64>,
}

impl Tabulation {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn f(&self) -> &[f64] {
        &self.f
    }

    pub fn fc(&self) -> &[f64] {
        &self.fc
    }

    fn step(&self) -> f64 {
        (self.grid[self.grid.len() - 1] - self.grid[0]) / (self.grid.len() - 1) as f64
    }

    fn interp(&self, vals: &[f64], z: f64) -> f64 {
        let n = self.grid.len();
        let (g0, gn) = (self.grid[0], self.grid[n - 1]);
        if z <= g0 {
            return vals[0];
        }
        if z >= gn {
            return vals[n - 1];
        }
        let h = self.step();
        let k = (((z - g0) / h).floor() as usize).min(n - 2);
        let t = ((z - self.grid[k]) / h).clamp(0.0, 1.0);
        vals[k] * (1.0 - t) + vals[k + 1] * t
    }

    /// Piecewise slope of the interpolant. At a node the two one-sided slopes
    /// are compared: if they agree the common slope is returned, otherwise the
    /// node is a kink and the slope is 0. Outside the grid the extension is
    /// constant, so the slope is 0.
    fn interp_slope(&self, vals: &[f64], z: f64) -> f64 {
        let n = self.grid.len();
        let (g0, gn) = (self.grid[0], self.grid[n - 1]);
        if z < g0 || z > gn {
            return 0.0;
        }
        let h = self.step();
        let slope = |seg: isize| -> f64 {
            if seg < 0 || seg as usize >= n - 1 {
                0.0
            } else {
                let s = seg as usize;
                (vals[s + 1] - vals[s]) / h
            }
        };
        let pos = (z - g0) / h;
        let nearest = pos.round();
        if (pos - nearest).abs() * h <= 1e-9 * h.max(1.0) {
            let j = nearest as isize;
            let (left, right) = (slope(j - 1), slope(j));
            if (left - right).abs() <= 1e-9 {
                (left + right) / 2.0
            } else {
                0.0
            }
        } else {
            slope(pos.floor() as isize)
        }
    }

    /// Saturation intervals read off the table: maximal runs of at least two
    /// grid nodes with negligible penalty. Runs touching a grid edge extend to
    /// infinity, matching the clamped extension of the table.
    fn zero_intervals(&self) -> SaturationSet {
        let n = self.grid.len();
        let flat: Vec<bool> = self.fc.iter().map(|&v| v.abs() <= 1e-12).collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < n {
            if !flat[i] {
                i += 1;
                continue;
            }
            let start = i;
            while i < n && flat[i] {
                i += 1;
            }
            let end = i - 1;
            if end > start {
                let lo = if start == 0 { f64::NEG_INFINITY } else { self.grid[start] };
                let hi = if end == n - 1 { f64::INFINITY } else { self.grid[end] };
                out.push(Interval::new(lo, hi));
            }
        }
        SaturationSet::new(out)
    }

    /// Write the table as CSV with header `z,fc` and 17 significant digits,
    /// enough to reproduce every f64 exactly.
    pub fn write_csv<W: io::Write>(&self, mut w: W) -> io::Result<()> {
        write_comp_table_csv(&mut w, &self.grid, &self.fc)
    }
}

/// CSV export for a penalty table: header `z,fc`, one row per grid node,
/// 17 significant digits per value.
pub fn write_comp_table_csv<W: io::Write>(w: &mut W, zs: &[f64], fcs: &[f64]) -> io::Result<()> {
    writeln!(w, "z,fc")?;
    for (z, fc) in zs.iter().zip(fcs) {
        writeln!(w, "{z:.16e},{fc:.16e}")?;
    }
    Ok(())
}

/// Scalar activation applied element-wise to hidden pre-activations.
#[derive(Debug, Clone, PartialEq)]
pub enum Nonlinearity {
    /// Soft-threshold: `sign(z) * max(|z| - width, 0)`. Flat on `[-width, width]`.
    Shrink { width: f64 },
    /// `max(z, 0)`. Flat on `(-inf, 0]`.
    RectifiedLinear,
    /// `clamp(z, -width, width)`. Flat outside `(-width, width)`.
    SaturatedLinear { width: f64 },
    /// Identity. No flat region, so the penalty is undefined.
    Linear,
    /// Interpolated table from [`numeric_comp`].
    Tabulated(Tabulation),
}

impl Nonlinearity {
    pub fn shrink(width: f64) -> Self {
        assert!(width > 0.0 && width.is_finite(), "shrink width must be positive");
        Nonlinearity::Shrink { width }
    }

    pub fn relu() -> Self {
        Nonlinearity::RectifiedLinear
    }

    pub fn satlin(width: f64) -> Self {
        assert!(width > 0.0 && width.is_finite(), "saturation width must be positive");
        Nonlinearity::SaturatedLinear { width }
    }

    pub fn linear() -> Self {
        Nonlinearity::Linear
    }

    /// Short stable name, used in logs and file names.
    pub fn kind_name(&self) -> &'static str {
        match self {
            Nonlinearity::Shrink { .. } => "shrink",
            Nonlinearity::RectifiedLinear => "relu",
            Nonlinearity::SaturatedLinear { .. } => "satlin",
            Nonlinearity::Linear => "linear",
            Nonlinearity::Tabulated(_) => "tabulated",
        }
    }

    pub fn width(&self) -> Option<f64> {
        match self {
            Nonlinearity::Shrink { width } | Nonlinearity::SaturatedLinear { width } => Some(*width),
            _ => None,
        }
    }

    pub fn eval(&self, z: f64) -> f64 {
        match self {
            Nonlinearity::Shrink { width } => z.signum() * (z.abs() - width).max(0.0),
            Nonlinearity::RectifiedLinear => z.max(0.0),
            Nonlinearity::SaturatedLinear { width } => z.clamp(-*width, *width),
            Nonlinearity::Linear => z,
            Nonlinearity::Tabulated(t) => t.interp(&t.f, z),
        }
    }

    /// Derivative of [`eval`](Self::eval). At kink points the flat side wins:
    /// the subderivative is pinned to 0, so a pre-activation sitting exactly
    /// on a saturation boundary is already stationary.
    pub fn eval_deriv(&self, z: f64) -> f64 {
        match self {
            Nonlinearity::Shrink { width } => {
                if z.abs() > *width {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlinearity::RectifiedLinear => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlinearity::SaturatedLinear { width } => {
                if z.abs() < *width {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlinearity::Linear => 1.0,
            Nonlinearity::Tabulated(t) => t.interp_slope(&t.f, z),
        }
    }

    /// Whether [`eval_comp`](Self::eval_comp) is defined for this activation.
    /// Only the identity lacks a penalty; a tabulated activation always
    /// carries one, even when its table has no exact zero run.
    pub fn has_penalty(&self) -> bool {
        !matches!(self, Nonlinearity::Linear)
    }

    /// The zero-derivative set of the activation.
    pub fn saturation_set(&self) -> SaturationSet {
        match self {
            Nonlinearity::Shrink { width } => {
                SaturationSet::new(vec![Interval::new(-*width, *width)])
            }
            Nonlinearity::RectifiedLinear => {
                SaturationSet::new(vec![Interval::new(f64::NEG_INFINITY, 0.0)])
            }
            Nonlinearity::SaturatedLinear { width } => SaturationSet::new(vec![
                Interval::new(f64::NEG_INFINITY, -*width),
                Interval::new(*width, f64::INFINITY),
            ]),
            Nonlinearity::Linear => SaturationSet::empty(),
            Nonlinearity::Tabulated(t) => t.zero_intervals(),
        }
    }

    /// Complementary function: distance from `z` to the saturation set.
    ///
    /// For shrink this equals `max(|z| - width, 0)` and for the rectifier
    /// `max(z, 0)`; both coincide with `|f(z)|`, and the implementation
    /// computes them through `eval` so the identity holds bit for bit. For
    /// the saturating-linear activation it is the tent `max(width - |z|, 0)`.
    ///
    /// Errors with [`NonlinError::EmptySaturationSet`] for the identity,
    /// whose derivative never vanishes.
    pub fn eval_comp(&self, z: f64) -> Result<f64, NonlinError> {
        match self {
            Nonlinearity::Shrink { .. } | Nonlinearity::RectifiedLinear => Ok(self.eval(z).abs()),
            Nonlinearity::SaturatedLinear { width } => Ok((*width - z.abs()).max(0.0)),
            Nonlinearity::Linear => Err(NonlinError::EmptySaturationSet),
            Nonlinearity::Tabulated(t) => Ok(t.interp(&t.fc, z)),
        }
    }

    /// Derivative of the complementary function: `±1` outside the saturation
    /// set (pointing up the distance slope), `0` inside, and `0` at every
    /// kink, mirroring the convention of [`eval_deriv`](Self::eval_deriv).
    pub fn eval_comp_deriv(&self, z: f64) -> Result<f64, NonlinError> {
        match self {
            Nonlinearity::Shrink { width } => Ok(if z.abs() > *width { z.signum() } else { 0.0 }),
            Nonlinearity::RectifiedLinear => Ok(if z > 0.0 { 1.0 } else { 0.0 }),
            Nonlinearity::SaturatedLinear { width } => {
                Ok(if z.abs() >= *width || z == 0.0 { 0.0 } else { -z.signum() })
            }
            Nonlinearity::Linear => Err(NonlinError::EmptySaturationSet),
            Nonlinearity::Tabulated(t) => Ok(t.interp_slope(&t.fc, z)),
        }
    }
}

/// Decreasing weight over window widths used by [`numeric_comp`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightKind {
    /// `w(l) = exp(-rate * l)`.
    Exponential { rate: f64 },
}

impl WeightKind {
    fn weight(&self, l: f64) -> f64 {
        match self {
            WeightKind::Exponential { rate } => (-rate * l).exp(),
        }
    }

    /// Fraction of total weight mass beyond the cutoff.
    fn tail_fraction(&self, cutoff: f64) -> f64 {
        match self {
            WeightKind::Exponential { rate } => (-rate * cutoff).exp(),
        }
    }
}

/// Configuration of the multi-scale average in [`numeric_comp`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariationWeights {
    pub kind: WeightKind,
    /// Largest window width considered. Must leave less than 1e-8 of the
    /// weight mass in the discarded tail.
    pub scale_cutoff: f64,
    /// Quadrature step for the integral over window widths.
    pub grid_step: f64,
}

impl Default for VariationWeights {
    fn default() -> Self {
        VariationWeights {
            kind: WeightKind::Exponential { rate: 1.0 },
            scale_cutoff: 20.0,
            grid_step: 1e-2,
        }
    }
}

impl VariationWeights {
    pub fn new(kind: WeightKind, scale_cutoff: f64, grid_step: f64) -> Result<Self, NonlinError> {
        let w = VariationWeights { kind, scale_cutoff, grid_step };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), NonlinError> {
        let WeightKind::Exponential { rate } = self.kind;
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(NonlinError::BadWeights(format!("rate must be positive, got {rate}")));
        }
        if !(self.scale_cutoff > 0.0 && self.scale_cutoff.is_finite()) {
            return Err(NonlinError::BadWeights(format!(
                "scale cutoff must be positive, got {}",
                self.scale_cutoff
            )));
        }
        if !(self.grid_step > 0.0 && self.grid_step.is_finite()) {
            return Err(NonlinError::BadWeights(format!(
                "grid step must be positive, got {}",
                self.grid_step
            )));
        }
        let tail = self.kind.tail_fraction(self.scale_cutoff);
        if tail > 1e-8 {
            return Err(NonlinError::BadWeights(format!(
                "cutoff {} leaves {tail:.3e} of the weight mass in the tail (limit 1e-8)",
                self.scale_cutoff
            )));
        }
        Ok(())
    }
}

/// An activation sampled on a uniform grid: values and derivative magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledActivation {
    grid: Vec<f64>,
    f: Vec<f64>,
    d_abs: Vec<f64>,
}

impl SampledActivation {
    pub fn new(grid: Vec<f64>, f: Vec<f64>, d_abs: Vec<f64>) -> Result<Self, NonlinError> {
        if grid.len() < 2 {
            return Err(NonlinError::BadSamples("need at least two grid nodes".into()));
        }
        if f.len() != grid.len() || d_abs.len() != grid.len() {
            return Err(NonlinError::BadSamples(format!(
                "length mismatch: grid {}, f {}, |f'| {}",
                grid.len(),
                f.len(),
                d_abs.len()
            )));
        }
        let h = (grid[grid.len() - 1] - grid[0]) / (grid.len() - 1) as f64;
        if !(h > 0.0 && h.is_finite()) {
            return Err(NonlinError::BadSamples("grid must be strictly increasing".into()));
        }
        for w in grid.windows(2) {
            let d = w[1] - w[0];
            if (d - h).abs() > 1e-9 * h.max(1.0) {
                return Err(NonlinError::BadSamples(format!(
                    "grid spacing not uniform: saw {d}, expected {h}"
                )));
            }
        }
        for (&v, &d) in f.iter().zip(&d_abs) {
            if !v.is_finite() || !d.is_finite() {
                return Err(NonlinError::BadSamples("samples must be finite".into()));
            }
            if d < 0.0 {
                return Err(NonlinError::BadSamples("derivative magnitudes must be >= 0".into()));
            }
        }
        Ok(SampledActivation { grid, f, d_abs })
    }

    /// Sample closures for `f` and `|f'|` on `[lo, hi]` with spacing `step`.
    pub fn sample(
        lo: f64,
        hi: f64,
        step: f64,
        f: impl Fn(f64) -> f64,
        d_abs: impl Fn(f64) -> f64,
    ) -> Result<Self, NonlinError> {
        if !(step > 0.0) || !(hi > lo) {
            return Err(NonlinError::BadSamples(format!("bad range {lo}..{hi} step {step}")));
        }
        let n = ((hi - lo) / step).round() as usize + 1;
        let grid: Vec<f64> = (0..n).map(|i| lo + i as f64 * step).collect();
        let fv = grid.iter().map(|&z| f(z)).collect();
        let dv = grid.iter().map(|&z| d_abs(z).abs()).collect();
        SampledActivation::new(grid, fv, dv)
    }

    /// Sample an existing nonlinearity, taking `|f'|` from its derivative.
    pub fn from_nonlinearity(
        nl: &Nonlinearity,
        lo: f64,
        hi: f64,
        step: f64,
    ) -> Result<Self, NonlinError> {
        Self::sample(lo, hi, step, |z| nl.eval(z), |z| nl.eval_deriv(z).abs())
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    fn step(&self) -> f64 {
        (self.grid[self.grid.len() - 1] - self.grid[0]) / (self.grid.len() - 1) as f64
    }
}

/// Exact integrals of the piecewise-linear interpolant of sampled values,
/// extended as a constant beyond the grid. `cum` is O(1) per query thanks to
/// prefix sums, which keeps the double integral in `numeric_comp` linear in
/// grid size times scale nodes.
struct PlIntegrator<'a> {
    grid: &'a [f64],
    vals: &'a [f64],
    step: f64,
    prefix: Vec<f64>,
}

impl<'a> PlIntegrator<'a> {
    fn new(grid: &'a [f64], vals: &'a [f64], step: f64) -> Self {
        let mut prefix = Vec::with_capacity(grid.len());
        prefix.push(0.0);
        for i in 1..grid.len() {
            let last = prefix[i - 1];
            prefix.push(last + 0.5 * (vals[i - 1] + vals[i]) * step);
        }
        PlIntegrator { grid, vals, step, prefix }
    }

    /// Integral from `grid[0]` to `t`, with `t` inside the grid span.
    fn cum(&self, t: f64) -> f64 {
        let n = self.grid.len();
        let k = (((t - self.grid[0]) / self.step).floor() as usize).min(n - 2);
        let gk = self.grid[k];
        let frac = ((t - gk) / self.step).clamp(0.0, 1.0);
        let vt = self.vals[k] * (1.0 - frac) + self.vals[k + 1] * frac;
        self.prefix[k] + 0.5 * (self.vals[k] + vt) * (t - gk)
    }

    /// Integral over `[a, b]`, `a <= b`, using the clamped extension outside
    /// the grid.
    fn integral(&self, a: f64, b: f64) -> f64 {
        let g0 = self.grid[0];
        let gn = self.grid[self.grid.len() - 1];
        let mut total = 0.0;
        if a < g0 {
            total += self.vals[0] * (b.min(g0) - a);
        }
        if b > gn {
            total += self.vals[self.vals.len() - 1] * (b - a.max(gn));
        }
        let u = a.max(g0);
        let v = b.min(gn);
        if v > u {
            total += self.cum(v) - self.cum(u);
        }
        total
    }
}

/// Reject grids whose interior features (maximal runs of flat or active
/// nodes not touching a grid edge) are crossed by fewer than ~10 steps.
/// Single-node features are exempt: an isolated critical point is a real
/// shape, not an artifact of coarse sampling.
fn check_feature_resolution(samples: &SampledActivation, eff_step: f64) -> Result<(), NonlinError> {
    let n = samples.grid.len();
    let scale = samples.d_abs.iter().cloned().fold(0.0_f64, f64::max);
    let thr = 1e-9 * scale.max(1e-300);
    let flat: Vec<bool> = samples.d_abs.iter().map(|&v| v <= thr).collect();
    let h = samples.step();
    let mut i = 0;
    while i < n {
        let start = i;
        while i < n && flat[i] == flat[start] {
            i += 1;
        }
        let end = i - 1;
        let interior = start > 0 && end < n - 1;
        if interior && end > start {
            let width = (end - start) as f64 * h;
            if width < 10.0 * eff_step {
                return Err(NonlinError::GridTooCoarse { step: eff_step, feature: width });
            }
        }
    }
    Ok(())
}

/// Build a smoothed complementary function for a sampled activation.
///
/// At each grid node `x` the derivative magnitude is averaged over one-sided
/// windows `[x, x+l]` and `[x-l, x]` for every width `l`, each average is
/// weighted by `w(l)` and integrated over `l` up to the cutoff, and the
/// penalty is the smaller of the two directional results:
///
/// ```text
/// D±(x, l) = (1/l) ∫ over the window of |f'|,
/// M±(x)    = ∫_0^L w(l) D±(x, l) dl,      f_c(x) = min(M+(x), M-(x)).
/// ```
///
/// Both integrals use trapezoid quadrature; `|f'|` is extended as a constant
/// beyond the grid, and `D±(x, 0)` is taken as the limit `|f'(x)|`. The result
/// is a [`Nonlinearity::Tabulated`] carrying the activation samples and the
/// computed penalty on the same grid.
///
/// # Errors
///
/// [`NonlinError::GridTooCoarse`] when an interior flat or active feature
/// spans fewer than ten quadrature steps, and [`NonlinError::BadWeights`] for
/// an invalid weight configuration.
pub fn numeric_comp(
    samples: &SampledActivation,
    weights: &VariationWeights,
) -> Result<Nonlinearity, NonlinError> {
    weights.validate()?;
    let h = samples.step();
    let eff_step = h.max(weights.grid_step);
    check_feature_resolution(samples, eff_step)?;

    let integ = PlIntegrator::new(&samples.grid, &samples.d_abs, h);
    let l_max = weights.scale_cutoff;
    let h_l = weights.grid_step;
    let n_l = (l_max / h_l).ceil() as usize;
    let l_node = |k: usize| (k as f64 * h_l).min(l_max);

    let n = samples.grid.len();
    let mut fc = Vec::with_capacity(n);
    for i in 0..n {
        let x = samples.grid[i];
        let mut m = [0.0_f64; 2];
        for (side, m_side) in m.iter_mut().enumerate() {
            let delta = |l: f64| -> f64 {
                if l == 0.0 {
                    samples.d_abs[i]
                } else if side == 0 {
                    integ.integral(x, x + l) / l
                } else {
                    integ.integral(x - l, x) / l
                }
            };
            let mut acc = 0.0;
            let mut prev_l = l_node(0);
            let mut prev_g = weights.kind.weight(prev_l) * delta(prev_l);
            for k in 1..=n_l {
                let l = l_node(k);
                let g = weights.kind.weight(l) * delta(l);
                acc += 0.5 * (prev_g + g) * (l - prev_l);
                prev_l = l;
                prev_g = g;
            }
            *m_side = acc;
        }
        fc.push(m[0].min(m[1]));
    }

    Ok(Nonlinearity::Tabulated(Tabulation {
        grid: samples.grid.clone(),
        f: samples.f.clone(),
        fc,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Brute-force distance to a saturation set: scan candidate points of every
    // interval at a fixed small step and keep the closest. Slow and dumb on
    // purpose; the closed forms must agree with it.
    fn distance_by_scan(set: &SaturationSet, z: f64) -> f64 {
        let bound = z.abs() + 10.0;
        let step = 1e-4;
        let mut best = f64::INFINITY;
        for iv in set.intervals() {
            let lo = iv.lo.max(-bound);
            let hi = iv.hi.min(bound);
            if lo > hi {
                continue;
            }
            let mut p = lo;
            while p <= hi {
                best = best.min((z - p).abs());
                p += step;
            }
            best = best.min((z - hi).abs());
        }
        best
    }

    fn catalog() -> Vec<Nonlinearity> {
        vec![
            Nonlinearity::shrink(1.0),
            Nonlinearity::shrink(0.4),
            Nonlinearity::relu(),
            Nonlinearity::satlin(1.0),
            Nonlinearity::satlin(2.5),
        ]
    }

    #[test]
    fn eval_matches_closed_forms() {
        let sh = Nonlinearity::shrink(1.0);
        assert_eq!(sh.eval(0.5), 0.0);
        assert_eq!(sh.eval(2.0), 1.0);
        assert_eq!(sh.eval(-3.0), -2.0);
        let re = Nonlinearity::relu();
        assert_eq!(re.eval(-2.0), 0.0);
        assert_eq!(re.eval(1.5), 1.5);
        let sl = Nonlinearity::satlin(1.0);
        assert_eq!(sl.eval(3.0), 1.0);
        assert_eq!(sl.eval(-3.0), -1.0);
        assert_eq!(sl.eval(0.25), 0.25);
        assert_eq!(Nonlinearity::linear().eval(-7.5), -7.5);
    }

    #[test]
    fn derivs_match_closed_forms_and_zero_at_kinks() {
        let sh = Nonlinearity::shrink(1.0);
        assert_eq!(sh.eval_deriv(2.0), 1.0);
        assert_eq!(sh.eval_deriv(0.5), 0.0);
        assert_eq!(sh.eval_deriv(1.0), 0.0);
        assert_eq!(sh.eval_deriv(-1.0), 0.0);
        let re = Nonlinearity::relu();
        assert_eq!(re.eval_deriv(0.0), 0.0);
        assert_eq!(re.eval_deriv(1e-12), 1.0);
        let sl = Nonlinearity::satlin(1.0);
        assert_eq!(sl.eval_deriv(0.0), 1.0);
        assert_eq!(sl.eval_deriv(1.0), 0.0);
        assert_eq!(sl.eval_deriv(-1.0), 0.0);
        assert_eq!(Nonlinearity::linear().eval_deriv(123.0), 1.0);
    }

    #[test]
    fn saturation_sets_have_expected_shape() {
        let s = Nonlinearity::shrink(1.0).saturation_set();
        assert_eq!(s.intervals(), &[Interval::new(-1.0, 1.0)]);
        let r = Nonlinearity::relu().saturation_set();
        assert_eq!(r.intervals(), &[Interval::new(f64::NEG_INFINITY, 0.0)]);
        let t = Nonlinearity::satlin(1.0).saturation_set();
        assert_eq!(
            t.intervals(),
            &[
                Interval::new(f64::NEG_INFINITY, -1.0),
                Interval::new(1.0, f64::INFINITY)
            ]
        );
        assert!(Nonlinearity::linear().saturation_set().is_empty());
    }

    #[test]
    fn comp_matches_frozen_values() {
        assert_eq!(Nonlinearity::shrink(1.0).eval_comp(3.0).unwrap(), 2.0);
        assert_eq!(Nonlinearity::shrink(1.0).eval_comp(0.5).unwrap(), 0.0);
        assert_eq!(Nonlinearity::relu().eval_comp(-5.0).unwrap(), 0.0);
        assert_eq!(Nonlinearity::relu().eval_comp(2.0).unwrap(), 2.0);
        assert_eq!(Nonlinearity::satlin(1.0).eval_comp(0.0).unwrap(), 1.0);
        assert_eq!(Nonlinearity::satlin(1.0).eval_comp(0.75).unwrap(), 0.25);
        assert_eq!(Nonlinearity::satlin(1.0).eval_comp(4.0).unwrap(), 0.0);
        assert_eq!(
            Nonlinearity::linear().eval_comp(1.0),
            Err(NonlinError::EmptySaturationSet)
        );
    }

    #[test]
    fn comp_agrees_with_distance_scan() {
        let mut z = -6.0;
        while z <= 6.0 {
            for nl in catalog() {
                let got = nl.eval_comp(z).unwrap();
                let want = distance_by_scan(&nl.saturation_set(), z);
                assert!(
                    (got - want).abs() <= 1e-4 + 1e-12,
                    "{} at z={z}: comp {got} vs scan {want}",
                    nl.kind_name()
                );
            }
            z += 0.317;
        }
    }

    #[test]
    fn comp_deriv_matches_frozen_values_and_kink_convention() {
        let sh = Nonlinearity::shrink(1.0);
        assert_eq!(sh.eval_comp_deriv(3.0).unwrap(), 1.0);
        assert_eq!(sh.eval_comp_deriv(-3.0).unwrap(), -1.0);
        assert_eq!(sh.eval_comp_deriv(0.5).unwrap(), 0.0);
        assert_eq!(sh.eval_comp_deriv(1.0).unwrap(), 0.0);
        let re = Nonlinearity::relu();
        assert_eq!(re.eval_comp_deriv(-5.0).unwrap(), 0.0);
        assert_eq!(re.eval_comp_deriv(0.0).unwrap(), 0.0);
        assert_eq!(re.eval_comp_deriv(2.0).unwrap(), 1.0);
        let sl = Nonlinearity::satlin(1.0);
        assert_eq!(sl.eval_comp_deriv(0.5).unwrap(), -1.0);
        assert_eq!(sl.eval_comp_deriv(-0.5).unwrap(), 1.0);
        assert_eq!(sl.eval_comp_deriv(0.0).unwrap(), 0.0);
        assert_eq!(sl.eval_comp_deriv(1.0).unwrap(), 0.0);
        assert_eq!(sl.eval_comp_deriv(2.0).unwrap(), 0.0);
        assert!(Nonlinearity::linear().eval_comp_deriv(0.0).is_err());
    }

    // Central finite differences validate both derivative functions away from
    // kinks, where the piecewise-linear pieces make the quotient exact.
    #[test]
    fn derivs_match_finite_differences_off_kinks() {
        let eps = 1e-4;
        let mut z: f64 = -4.0005;
        while z <= 4.0 {
            for nl in catalog() {
                let kink_dist = match &nl {
                    Nonlinearity::Shrink { width } | Nonlinearity::SaturatedLinear { width } => {
                        (z.abs() - width).abs().min(z.abs())
                    }
                    _ => z.abs(),
                };
                if kink_dist < 5e-3 {
                    continue;
                }
                let fd = (nl.eval(z + eps) - nl.eval(z - eps)) / (2.0 * eps);
                assert!(
                    (fd - nl.eval_deriv(z)).abs() < 1e-9,
                    "{} eval_deriv at {z}",
                    nl.kind_name()
                );
                let fdc = (nl.eval_comp(z + eps).unwrap() - nl.eval_comp(z - eps).unwrap())
                    / (2.0 * eps);
                assert!(
                    (fdc - nl.eval_comp_deriv(z).unwrap()).abs() < 1e-9,
                    "{} eval_comp_deriv at {z}",
                    nl.kind_name()
                );
            }
            z += 0.0101;
        }
    }

    #[test]
    fn penalty_equals_abs_activation_exactly_for_one_sided_kinds() {
        let zs = [
            0.0, -0.0, 1.0, -1.0, 0.3, -0.3, 1.5, -1.5, 1e6, -1e6, 1e-300, 0.9999999,
        ];
        for nl in [Nonlinearity::shrink(1.0), Nonlinearity::relu()] {
            for &z in &zs {
                let lhs = nl.eval(z).abs().to_bits();
                let rhs = nl.eval_comp(z).unwrap().to_bits();
                assert_eq!(lhs, rhs, "{} at z={z}", nl.kind_name());
            }
        }
    }

    proptest! {
        #[test]
        fn penalty_abs_identity_holds_everywhere(z in -1e6_f64..1e6) {
            for nl in [Nonlinearity::shrink(1.0), Nonlinearity::shrink(0.4), Nonlinearity::relu()] {
                prop_assert_eq!(nl.eval(z).abs().to_bits(), nl.eval_comp(z).unwrap().to_bits());
            }
        }

        #[test]
        fn penalty_is_1_lipschitz_and_zero_exactly_on_the_set(
            a in -8.0_f64..8.0,
            b in -8.0_f64..8.0,
        ) {
            for nl in catalog() {
                let fa = nl.eval_comp(a).unwrap();
                let fb = nl.eval_comp(b).unwrap();
                prop_assert!(fa >= 0.0 && fb >= 0.0);
                prop_assert!((fa - fb).abs() <= (a - b).abs() + 1e-12);
                let set = nl.saturation_set();
                prop_assert_eq!(fa == 0.0, set.contains(a));
            }
        }
    }

    #[test]
    fn set_distance_matches_comp() {
        for nl in catalog() {
            let set = nl.saturation_set();
            let mut z = -5.0;
            while z <= 5.0 {
                assert_eq!(set.distance(z).unwrap(), nl.eval_comp(z).unwrap());
                z += 0.17;
            }
        }
        assert_eq!(Nonlinearity::linear().saturation_set().distance(1.0), None);
    }

    // ---- numeric (smoothed) penalty ----

    // Independent evaluation of the window-averaged construction: explicit
    // node walks for the inner integral, no prefix sums.
    fn pl_value(grid: &[f64], vals: &[f64], z: f64) -> f64 {
        let n = grid.len();
        if z <= grid[0] {
            return vals[0];
        }
        if z >= grid[n - 1] {
            return vals[n - 1];
        }
        let h = (grid[n - 1] - grid[0]) / (n - 1) as f64;
        let k = (((z - grid[0]) / h).floor() as usize).min(n - 2);
        let t = ((z - grid[k]) / h).clamp(0.0, 1.0);
        vals[k] * (1.0 - t) + vals[k + 1] * t
    }

    fn window_integral_naive(grid: &[f64], vals: &[f64], a: f64, b: f64) -> f64 {
        // Trapezoid over a, every interior grid node, b. Exact for the
        // piecewise-linear model with clamped extension.
        let mut nodes = vec![a];
        for &g in grid {
            if g > a && g < b {
                nodes.push(g);
            }
        }
        nodes.push(b);
        let mut acc = 0.0;
        for w in nodes.windows(2) {
            acc += 0.5 * (pl_value(grid, vals, w[0]) + pl_value(grid, vals, w[1])) * (w[1] - w[0]);
        }
        acc
    }

    fn numeric_comp_oracle(samples: &SampledActivation, weights: &VariationWeights, x: f64, dx: f64) -> f64 {
        let h_l = weights.grid_step;
        let n_l = (weights.scale_cutoff / h_l).ceil() as usize;
        let mut m = [0.0_f64; 2];
        for (side, m_side) in m.iter_mut().enumerate() {
            let mut gs = Vec::with_capacity(n_l + 1);
            for k in 0..=n_l {
                let l = (k as f64 * h_l).min(weights.scale_cutoff);
                let delta = if l == 0.0 {
                    dx
                } else if side == 0 {
                    window_integral_naive(&samples.grid, &samples.d_abs, x, x + l) / l
                } else {
                    window_integral_naive(&samples.grid, &samples.d_abs, x - l, x) / l
                };
                gs.push(((-1.0_f64 * l).exp(), delta, l));
            }
            let mut acc = 0.0;
            for w in gs.windows(2) {
                let (w0, d0, l0) = w[0];
                let (w1, d1, l1) = w[1];
                acc += 0.5 * (w0 * d0 + w1 * d1) * (l1 - l0);
            }
            *m_side = acc;
        }
        m[0].min(m[1])
    }

    fn tab(nl: Nonlinearity) -> Tabulation {
        match nl {
            Nonlinearity::Tabulated(t) => t,
            other => panic!("expected a table, got {}", other.kind_name()),
        }
    }

    #[test]
    fn numeric_comp_agrees_with_naive_double_integral() {
        let sl = Nonlinearity::satlin(1.0);
        let samples = SampledActivation::from_nonlinearity(&sl, -3.0, 3.0, 0.05).unwrap();
        let weights = VariationWeights::default();
        let t = tab(numeric_comp(&samples, &weights).unwrap());
        for idx in [0, 7, 23, 60, 61, 77, 100, 119, 120] {
            let x = t.grid()[idx];
            let dx = samples.d_abs[idx];
            let want = numeric_comp_oracle(&samples, &weights, x, dx);
            let got = t.fc()[idx];
            assert!(
                (got - want).abs() <= 1e-9,
                "fc({x}) = {got}, oracle says {want}"
            );
        }
    }

    #[test]
    fn numeric_comp_on_cubic_agrees_with_naive_double_integral() {
        let samples =
            SampledActivation::sample(-2.0, 2.0, 0.02, |z| z * z * z, |z| 3.0 * z * z).unwrap();
        let weights = VariationWeights::default();
        let t = tab(numeric_comp(&samples, &weights).unwrap());
        for idx in [0, 31, 100, 101, 150, 200] {
            let x = t.grid()[idx];
            let dx = samples.d_abs[idx];
            let want = numeric_comp_oracle(&samples, &weights, x, dx);
            let got = t.fc()[idx];
            assert!(
                (got - want).abs() <= 1e-9,
                "fc({x}) = {got}, oracle says {want}"
            );
        }
    }

    #[test]
    fn numeric_comp_vanishes_on_true_flat_regions() {
        // For the clamp the averaged variation towards the nearer flat side is
        // exactly zero everywhere outside (-1, 1).
        let sl = Nonlinearity::satlin(1.0);
        let samples = SampledActivation::from_nonlinearity(&sl, -6.0, 6.0, 0.01).unwrap();
        let t = tab(numeric_comp(&samples, &VariationWeights::default()).unwrap());
        for (z, fc) in t.grid().iter().zip(t.fc()) {
            assert!(*fc >= 0.0);
            if z.abs() >= 1.0 {
                assert!(*fc <= 1e-3, "tail not flat at z={z}: {fc}");
            }
        }
        // And the recovered saturation set matches the analytic one up to the
        // grid bounds.
        let set = t.zero_intervals();
        assert_eq!(set.intervals().len(), 2);
        assert!(set.contains(-1.0) && set.contains(1.0));
        assert!(set.contains(-50.0) && set.contains(50.0));
        assert!(!set.contains(0.0) && !set.contains(0.99));
    }

    #[test]
    fn numeric_comp_is_positive_at_isolated_critical_points() {
        let samples =
            SampledActivation::sample(-2.0, 2.0, 0.01, |z| z * z * z, |z| 3.0 * z * z).unwrap();
        let t = tab(numeric_comp(&samples, &VariationWeights::default()).unwrap());
        let mid = t.grid().iter().position(|&z| z.abs() < 1e-12).unwrap();
        assert_eq!(samples.d_abs[mid], 0.0);
        assert!(
            t.fc()[mid] > 1e-2,
            "penalty at the cubic's critical point should stay clearly positive, got {}",
            t.fc()[mid]
        );
        // No flat run of width, so no saturation interval either.
        assert!(t.zero_intervals().is_empty());
    }

    #[test]
    fn numeric_comp_of_zero_derivative_is_zero() {
        let samples = SampledActivation::sample(-1.0, 1.0, 0.05, |_| 0.7, |_| 0.0).unwrap();
        let t = tab(numeric_comp(&samples, &VariationWeights::default()).unwrap());
        assert!(t.fc().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn numeric_comp_of_identity_is_constant() {
        let samples = SampledActivation::sample(-3.0, 3.0, 0.05, |z| z, |_| 1.0).unwrap();
        let t = tab(numeric_comp(&samples, &VariationWeights::default()).unwrap());
        let expect = 1.0 - (-20.0_f64).exp();
        for (z, fc) in t.grid().iter().zip(t.fc()) {
            assert!((fc - expect).abs() < 1e-3, "fc({z}) = {fc}, expected ~{expect}");
        }
    }

    #[test]
    fn coarse_grids_are_rejected() {
        let sl = Nonlinearity::satlin(1.0);
        let samples = SampledActivation::from_nonlinearity(&sl, -6.0, 6.0, 0.3).unwrap();
        match numeric_comp(&samples, &VariationWeights::default()) {
            Err(NonlinError::GridTooCoarse { .. }) => {}
            other => panic!("expected GridTooCoarse, got {other:?}"),
        }
        // A fine enough grid on the same activation is accepted.
        let fine = SampledActivation::from_nonlinearity(&sl, -6.0, 6.0, 0.01).unwrap();
        assert!(numeric_comp(&fine, &VariationWeights::default()).is_ok());
    }

    #[test]
    fn tabulated_nonlinearity_interpolates_and_clamps() {
        let sl = Nonlinearity::satlin(1.0);
        let samples = SampledActivation::from_nonlinearity(&sl, -3.0, 3.0, 0.01).unwrap();
        let t = numeric_comp(&samples, &VariationWeights::default()).unwrap();
        for &z in &[-2.5, -0.737, 0.0, 0.255, 1.9] {
            assert!((t.eval(z) - sl.eval(z)).abs() < 1e-9, "eval mismatch at {z}");
        }
        // Clamped beyond the grid.
        assert_eq!(t.eval(100.0), sl.eval(3.0));
        assert_eq!(t.eval(-100.0), sl.eval(-3.0));
        assert_eq!(t.eval_deriv(100.0), 0.0);
        // Interior slopes of the table match the activation off kinks.
        assert!((t.eval_deriv(0.505) - 1.0).abs() < 1e-9);
        assert_eq!(t.eval_deriv(2.0), 0.0);
    }

    #[test]
    fn weight_validation_rejects_fat_tails() {
        let err = VariationWeights::new(WeightKind::Exponential { rate: 1.0 }, 5.0, 0.01);
        assert!(matches!(err, Err(NonlinError::BadWeights(_))));
        assert!(VariationWeights::new(WeightKind::Exponential { rate: 1.0 }, 20.0, 0.01).is_ok());
        assert!(VariationWeights::new(WeightKind::Exponential { rate: 4.0 }, 5.0, 0.01).is_ok());
    }

    #[test]
    fn csv_export_has_header_and_full_precision() {
        let mut buf = Vec::new();
        write_comp_table_csv(&mut buf, &[0.1, 0.2], &[1.0 / 3.0, 0.0]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("z,fc"));
        let row = lines.next().unwrap();
        let fc: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(fc, 1.0 / 3.0);
        assert_eq!(lines.next(), Some("2.0000000000000001e-1,0.0000000000000000e0"));
    }

    #[test]
    fn sampled_activation_validation() {
        assert!(SampledActivation::new(vec![0.0], vec![0.0], vec![0.0]).is_err());
        assert!(SampledActivation::new(
            vec![0.0, 0.1, 0.3],
            vec![0.0; 3],
            vec![0.0; 3]
        )
        .is_err());
        assert!(SampledActivation::new(
            vec![0.0, 0.1, 0.2],
            vec![0.0; 3],
            vec![-1.0, 0.0, 0.0]
        )
        .is_err());
    }
}
