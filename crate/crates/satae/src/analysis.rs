//! Post-training analysis: reconstruction-energy landscapes over 2-D input
//! space, contrast ratios, activation-saturation statistics, decoder-filter
//! tilings, and a small symmetric eigensolver backing the PCA baseline.
//!
//! Everything here is a pure function of model parameters and data. The only
//! concurrency is the embarrassingly parallel energy-grid evaluation, whose
//! output is deterministic regardless of how nodes are scheduled.

use std::io;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use thiserror::Error;

use crate::data::Dataset;
use crate::model::{ModelError, ModelParams};
use crate::netpbm;
use crate::nonlin::Nonlinearity;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("energy grids are only defined for 2-dimensional models (input dim {0})")]
    NotTwoDimensional(usize),
    #[error("grid bounds must be finite with lo < hi on both axes")]
    BadBounds,
    #[error("grid resolution must be at least 2 (got {0})")]
    BadResolution(usize),
    #[error("tile geometry {rows}x{cols}x{channels} covers {covered} values but the model input dimension is {dim}")]
    ShapeMismatch {
        rows: usize,
        cols: usize,
        channels: usize,
        covered: usize,
        dim: usize,
    },
    #[error("tilings support 1 (grayscale) or 3 (rgb) channels, got {0}")]
    BadChannels(usize),
    #[error("the saturation set is empty; saturation statistics are undefined")]
    EmptySaturationSet,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Rectangular region of the 2-D input plane covered by an energy grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridBounds {
    pub x_lo: f64,
    pub x_hi: f64,
    pub y_lo: f64,
    pub y_hi: f64,
}

impl Default for GridBounds {
    /// The unit square `[-1, 1]^2`, which contains every toy manifold.
    fn default() -> Self {
        GridBounds {
            x_lo: -1.0,
            x_hi: 1.0,
            y_lo: -1.0,
            y_hi: 1.0,
        }
    }
}

impl GridBounds {
    pub fn new(x_lo: f64, x_hi: f64, y_lo: f64, y_hi: f64) -> Result<Self, AnalysisError> {
        let b = GridBounds { x_lo, x_hi, y_lo, y_hi };
        if ![x_lo, x_hi, y_lo, y_hi].iter().all(|v| v.is_finite())
            || x_lo >= x_hi
            || y_lo >= y_hi
        {
            return Err(AnalysisError::BadBounds);
        }
        Ok(b)
    }
}

/// Reconstruction energy sampled on a regular grid of cell centers.
///
/// `values[[i, j]]` is the energy at the node with y-index `i` (counting up
/// from `y_lo`) and x-index `j` (counting up from `x_lo`). Nodes sit at cell
/// centers rather than corners, so the full bounds are covered without
/// duplicating edges.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyGrid {
    bounds: GridBounds,
    resolution: usize,
    values: Array2<f64>,
}

impl EnergyGrid {
    pub fn bounds(&self) -> GridBounds {
        self.bounds
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Coordinates of the node at y-index `i`, x-index `j`.
    pub fn node(&self, i: usize, j: usize) -> (f64, f64) {
        (
            node_coord(self.bounds.x_lo, self.bounds.x_hi, self.resolution, j),
            node_coord(self.bounds.y_lo, self.bounds.y_hi, self.resolution, i),
        )
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Writes the grid as `x,y,energy` CSV, full precision, row-major
    /// (y outer, x inner).
    pub fn write_csv<W: io::Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "x,y,energy")?;
        for i in 0..self.resolution {
            for j in 0..self.resolution {
                let (x, y) = self.node(i, j);
                writeln!(w, "{x:.16e},{y:.16e},{e:.16e}", e = self.values[[i, j]])?;
            }
        }
        Ok(())
    }

    /// Renders the grid as an 8-bit grayscale raster, minimum energy black.
    ///
    /// Rows run top to bottom in image order, i.e. from `y_hi` down to
    /// `y_lo`. With `log_scale` the intensities follow `ln(1 + E - min)`
    /// instead of `E - min`, which keeps low-energy structure visible when a
    /// few far-off-manifold nodes dominate the range. A constant grid
    /// renders all black.
    pub fn to_pgm_bytes(&self, log_scale: bool) -> Vec<u8> {
        let lo = self.min();
        let hi = self.max();
        let range = hi - lo;
        let denom = if log_scale { range.ln_1p() } else { range };
        let res = self.resolution;
        let mut pixels = vec![0u8; res * res];
        if denom > 0.0 {
            for i in 0..res {
                for j in 0..res {
                    let shifted = self.values[[res - 1 - i, j]] - lo;
                    let t = if log_scale { shifted.ln_1p() } else { shifted } / denom;
                    pixels[i * res + j] = (255.0 * t).round() as u8;
                }
            }
        }
        let mut out = Vec::with_capacity(pixels.len() + 32);
        netpbm::write_pgm(&mut out, res, res, &pixels).expect("writing to Vec cannot fail");
        out
    }
}

fn node_coord(lo: f64, hi: f64, resolution: usize, index: usize) -> f64 {
    lo + (index as f64 + 0.5) * (hi - lo) / resolution as f64
}

/// Evaluates the reconstruction energy of `(p, f)` at every node of a
/// `resolution`-per-axis grid of cell centers over `bounds`.
///
/// Nodes are evaluated in parallel; the result is independent of scheduling.
pub fn energy_grid(
    p: &ModelParams,
    f: &Nonlinearity,
    bounds: GridBounds,
    resolution: usize,
) -> Result<EnergyGrid, AnalysisError> {
    if p.input_dim() != 2 {
        return Err(AnalysisError::NotTwoDimensional(p.input_dim()));
    }
    GridBounds::new(bounds.x_lo, bounds.x_hi, bounds.y_lo, bounds.y_hi)?;
    if resolution < 2 {
        return Err(AnalysisError::BadResolution(resolution));
    }
    let rows: Vec<Vec<f64>> = (0..resolution)
        .into_par_iter()
        .map(|i| {
            let y = node_coord(bounds.y_lo, bounds.y_hi, resolution, i);
            (0..resolution)
                .map(|j| {
                    let x = node_coord(bounds.x_lo, bounds.x_hi, resolution, j);
                    p.recon_energy(f, ndarray::aview1(&[x, y]))
                })
                .collect::<Result<Vec<f64>, ModelError>>()
        })
        .collect::<Result<_, _>>()?;
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let values = Array2::from_shape_vec((resolution, resolution), flat)
        .expect("row collection has resolution^2 entries");
    Ok(EnergyGrid { bounds, resolution, values })
}

fn energies(
    p: &ModelParams,
    f: &Nonlinearity,
    data: &Dataset,
) -> Result<Vec<f64>, AnalysisError> {
    (0..data.len())
        .map(|i| p.recon_energy(f, data.row(i)).map_err(AnalysisError::from))
        .collect()
}

fn median(values: &[f64]) -> f64 {
    debug_assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Median reconstruction energy over `off_points` divided by the median over
/// `on_points` (plus a 1e-12 guard against a perfectly reconstructed
/// on-manifold set).
///
/// A trained model that carves an energy ravine along the data manifold
/// scores high; a model indifferent to the manifold scores near 1.
pub fn contrast_ratio(
    p: &ModelParams,
    f: &Nonlinearity,
    on_points: &Dataset,
    off_points: &Dataset,
) -> Result<f64, AnalysisError> {
    let on = energies(p, f, on_points)?;
    let off = energies(p, f, off_points)?;
    Ok(median(&off) / (median(&on) + 1e-12))
}

/// Fraction of (sample, hidden unit) pre-activation pairs that lie inside the
/// activation's zero-derivative set.
pub fn saturation_fraction(
    p: &ModelParams,
    f: &Nonlinearity,
    data: &Dataset,
) -> Result<f64, AnalysisError> {
    let set = f.saturation_set();
    if set.is_empty() {
        return Err(AnalysisError::EmptySaturationSet);
    }
    let mut inside = 0usize;
    let mut total = 0usize;
    for i in 0..data.len() {
        let z = p.pre_activations(data.row(i))?;
        for &zi in z.iter() {
            total += 1;
            if set.contains(zi) {
                inside += 1;
            }
        }
    }
    Ok(inside as f64 / total as f64)
}

/// Decoder basis elements rendered as a grid of small images.
///
/// Each decoder column is reshaped to a `tile_rows x tile_cols` tile
/// (channel-planar source order for RGB) and min-max normalized on its own:
/// the tile's minimum maps to 0, its maximum to 255, and a constant tile
/// renders mid-gray (128) — training from small or zero initialization
/// legitimately passes through that state. Tiles are laid out in a
/// near-square grid with 1-pixel black separators; unused trailing cells stay
/// black.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterTiling {
    grid_rows: usize,
    grid_cols: usize,
    tile_rows: usize,
    tile_cols: usize,
    channels: usize,
    width: usize,
    height: usize,
    /// Row-major, channel-interleaved, top row first.
    pixels: Vec<u8>,
}

impl FilterTiling {
    pub fn grid_rows(&self) -> usize {
        self.grid_rows
    }

    pub fn grid_cols(&self) -> usize {
        self.grid_cols
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Intensity of pixel (`row`, `col`) in channel `ch`, image order.
    pub fn pixel(&self, row: usize, col: usize, ch: usize) -> u8 {
        self.pixels[(row * self.width + col) * self.channels + ch]
    }

    /// Serializes as PGM (1 channel) or PPM (3 channels).
    pub fn write_netpbm<W: io::Write>(&self, w: &mut W) -> io::Result<()> {
        match self.channels {
            1 => netpbm::write_pgm(w, self.width, self.height, &self.pixels),
            3 => netpbm::write_ppm(w, self.width, self.height, &self.pixels),
            _ => unreachable!("tilings are constructed with 1 or 3 channels"),
        }
    }
}

/// Renders every decoder column of `p` as a `tile_rows x tile_cols` image
/// with `channels` color channels, arranged in a near-square grid.
///
/// The product `tile_rows * tile_cols * channels` must equal the model input
/// dimension. RGB columns are read channel-planar (all of channel 0, then
/// channel 1, then channel 2), matching the raw CIFAR layout.
pub fn tile_filters(
    p: &ModelParams,
    tile_rows: usize,
    tile_cols: usize,
    channels: usize,
) -> Result<FilterTiling, AnalysisError> {
    if channels != 1 && channels != 3 {
        return Err(AnalysisError::BadChannels(channels));
    }
    let covered = tile_rows * tile_cols * channels;
    if covered != p.input_dim() || tile_rows == 0 || tile_cols == 0 {
        return Err(AnalysisError::ShapeMismatch {
            rows: tile_rows,
            cols: tile_cols,
            channels,
            covered,
            dim: p.input_dim(),
        });
    }
    let d_h = p.hidden_dim();
    let grid_cols = (d_h as f64).sqrt().ceil() as usize;
    let grid_rows = d_h.div_ceil(grid_cols);
    let width = grid_cols * tile_cols + (grid_cols - 1);
    let height = grid_rows * tile_rows + (grid_rows - 1);
    let mut pixels = vec![0u8; width * height * channels];
    for unit in 0..d_h {
        let column = p.dec_weight().column(unit);
        let lo = column.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        let origin_row = (unit / grid_cols) * (tile_rows + 1);
        let origin_col = (unit % grid_cols) * (tile_cols + 1);
        for r in 0..tile_rows {
            for c in 0..tile_cols {
                for ch in 0..channels {
                    let v = column[ch * tile_rows * tile_cols + r * tile_cols + c];
                    let byte = if range > 0.0 {
                        (255.0 * (v - lo) / range).round() as u8
                    } else {
                        128
                    };
                    let row = origin_row + r;
                    let col = origin_col + c;
                    pixels[(row * width + col) * channels + ch] = byte;
                }
            }
        }
    }
    Ok(FilterTiling {
        grid_rows,
        grid_cols,
        tile_rows,
        tile_cols,
        channels,
        width,
        height,
        pixels,
    })
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order with matching eigenvector
/// columns. The input is symmetrized as `(A + A^T) / 2` first, so tiny
/// asymmetries from accumulated covariance sums are harmless. Intended for
/// the small, dense matrices that arise here (covariances up to a few dozen
/// dimensions); cost is O(n^3) per sweep.
pub fn symmetric_eigen(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "matrix must be square");
    let mut m = (a + &a.t()) * 0.5;
    let mut v = Array2::<f64>::eye(n);
    let total: f64 = m.iter().map(|x| x * x).sum();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| (p + 1..n).map(move |q| (p, q)))
            .map(|(p, q)| m[[p, q]] * m[[p, q]])
            .sum();
        if off <= total * 1e-30 {
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].total_cmp(&m[[i, i]]));
    let eigenvalues = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let mut eigenvectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.column_mut(dst).assign(&v.column(src));
    }
    (eigenvalues, eigenvectors)
}

fn column_means(samples: &Array2<f64>) -> Array1<f64> {
    samples
        .mean_axis(Axis(0))
        .expect("dataset has at least one row")
}

fn sample_covariance(data: &Dataset) -> Array2<f64> {
    let x = data.samples();
    let mean = column_means(x);
    let centered = x - &mean;
    centered.t().dot(&centered) / x.nrows() as f64
}

/// Top-`k` eigenvectors of the sample covariance, as the columns of a
/// `d x k` matrix.
pub fn pca_basis(data: &Dataset, k: usize) -> Array2<f64> {
    let d = data.dim();
    assert!(k >= 1 && k <= d, "k must be in 1..=d");
    let (_, vecs) = symmetric_eigen(&sample_covariance(data));
    vecs.slice(ndarray::s![.., ..k]).to_owned()
}

/// Orthogonal projector onto the span of the top-`k` principal directions of
/// `data`: `P = V_k V_k^T`.
pub fn pca_projector(data: &Dataset, k: usize) -> Array2<f64> {
    let basis = pca_basis(data, k);
    basis.dot(&basis.t())
}

/// Orthonormalizes the columns of `a` by modified Gram-Schmidt.
///
/// Columns must be linearly independent; each must keep at least 1e-12 of
/// its norm after projection (callers pass trained decoder weights or
/// eigenvector sets, which are far from degenerate).
fn orthonormalize(a: ArrayView2<f64>) -> Array2<f64> {
    let mut q = a.to_owned();
    let k = q.ncols();
    for j in 0..k {
        for i in 0..j {
            let proj = q.column(i).dot(&q.column(j));
            let qi = q.column(i).to_owned();
            q.column_mut(j).scaled_add(-proj, &qi);
        }
        let norm = q.column(j).dot(&q.column(j)).sqrt();
        assert!(norm > 1e-12, "columns are numerically dependent");
        q.column_mut(j).mapv_inplace(|v| v / norm);
    }
    q
}

/// Largest principal angle (radians) between the column spans of `a` and
/// `b`, both `d x k` with independent columns.
///
/// Computed as `acos` of the smallest singular value of `Q_a^T Q_b`; 0 means
/// identical spans, pi/2 means some direction of one span is orthogonal to
/// all of the other.
pub fn largest_principal_angle(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    assert_eq!(a.nrows(), b.nrows(), "spans live in different spaces");
    assert_eq!(a.ncols(), b.ncols(), "spans have different dimensions");
    let qa = orthonormalize(a);
    let qb = orthonormalize(b);
    let m = qa.t().dot(&qb);
    let gram = m.t().dot(&m);
    let (eigs, _) = symmetric_eigen(&gram);
    let smallest = eigs[eigs.len() - 1].max(0.0);
    smallest.sqrt().clamp(0.0, 1.0).acos()
}
