//! Single-hidden-layer auto-encoder with a saturation penalty.
//!
//! The model reconstructs `x` through `G(x) = W_d f(W_e x + b_e) + b_d` and is
//! scored by the energy `E(x) = 0.5 * ||x - G(x)||^2`. Training minimizes
//!
//! ```text
//! L = sum over samples of  E(x) + alpha * sum_i f_c(z_i),
//! ```
//!
//! where `z = W_e x + b_e` are the hidden pre-activations and `f_c` is the
//! complementary function of the activation `f`. All gradients here are exact
//! (up to the fixed subderivative convention at kinks) and are validated
//! against finite differences in the tests.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use thiserror::Error;

use crate::nonlin::{NonlinError, Nonlinearity};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Nonlin(#[from] NonlinError),
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("model file corrupt: {0}")]
    Corrupt(String),
    #[error("a {0} nonlinearity cannot be stored in a model file")]
    UnsupportedKind(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Encoder/decoder parameters. In tied mode the decoder weight is maintained
/// as the exact transpose of the encoder weight; every update re-derives it,
/// so the invariant holds bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub(crate) enc_weight: Array2<f64>, // d_h x d
    pub(crate) enc_bias: Array1<f64>,   // d_h
    pub(crate) dec_weight: Array2<f64>, // d x d_h
    pub(crate) dec_bias: Array1<f64>,   // d
    tied: bool,
}

/// Per-parameter gradient of the loss for one sample. In tied mode the
/// decoder-weight contribution is folded into `enc_weight` (as its transpose)
/// and the `dec_weight` slot is all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct GradRecord {
    pub enc_weight: Array2<f64>,
    pub enc_bias: Array1<f64>,
    pub dec_weight: Array2<f64>,
    pub dec_bias: Array1<f64>,
}

/// Loss of a batch split into its two terms; `total = reconstruction + alpha * saturation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub saturation: f64,
    pub alpha: f64,
    pub total: f64,
}

/// Per-sample diagnostics collected during a gradient step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleStats {
    /// Reconstruction energy `0.5 * ||x - G(x)||^2`.
    pub recon: f64,
    /// Unweighted saturation penalty `sum_i f_c(z_i)` (0 when `f_c` is undefined).
    pub sat: f64,
    /// Number of hidden units whose pre-activation sits inside the saturation set.
    pub saturated: usize,
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

impl ModelParams {
    pub fn new(
        enc_weight: Array2<f64>,
        enc_bias: Array1<f64>,
        dec_weight: Array2<f64>,
        dec_bias: Array1<f64>,
    ) -> Result<Self, ModelError> {
        let (d_h, d) = enc_weight.dim();
        if d_h == 0 || d == 0 {
            return Err(ModelError::DimensionMismatch("dimensions must be positive".into()));
        }
        if dec_weight.dim() != (d, d_h) {
            return Err(ModelError::DimensionMismatch(format!(
                "decoder weight is {:?}, expected ({d}, {d_h})",
                dec_weight.dim()
            )));
        }
        if enc_bias.len() != d_h || dec_bias.len() != d {
            return Err(ModelError::DimensionMismatch(format!(
                "bias lengths ({}, {}) do not match dims ({d_h}, {d})",
                enc_bias.len(),
                dec_bias.len()
            )));
        }
        Ok(ModelParams { enc_weight, enc_bias, dec_weight, dec_bias, tied: false })
    }

    /// Tied variant: the decoder weight is the encoder weight transposed.
    pub fn new_tied(
        enc_weight: Array2<f64>,
        enc_bias: Array1<f64>,
        dec_bias: Array1<f64>,
    ) -> Result<Self, ModelError> {
        let dec_weight = enc_weight.t().to_owned();
        let mut p = ModelParams::new(enc_weight, enc_bias, dec_weight, dec_bias)?;
        p.tied = true;
        Ok(p)
    }

    pub fn input_dim(&self) -> usize {
        self.enc_weight.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.enc_weight.nrows()
    }

    pub fn tied(&self) -> bool {
        self.tied
    }

    pub fn enc_weight(&self) -> &Array2<f64> {
        &self.enc_weight
    }

    pub fn enc_bias(&self) -> &Array1<f64> {
        &self.enc_bias
    }

    pub fn dec_weight(&self) -> &Array2<f64> {
        &self.dec_weight
    }

    pub fn dec_bias(&self) -> &Array1<f64> {
        &self.dec_bias
    }

    fn check_input(&self, x: ArrayView1<f64>) -> Result<(), ModelError> {
        if x.len() != self.input_dim() {
            return Err(ModelError::DimensionMismatch(format!(
                "input has {} entries, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Hidden pre-activations `z = W_e x + b_e`.
    pub fn pre_activations(&self, x: ArrayView1<f64>) -> Result<Array1<f64>, ModelError> {
        self.check_input(x)?;
        Ok(self.enc_weight.dot(&x) + &self.enc_bias)
    }

    /// Hidden code `h = f(W_e x + b_e)`.
    pub fn encode(&self, f: &Nonlinearity, x: ArrayView1<f64>) -> Result<Array1<f64>, ModelError> {
        Ok(self.pre_activations(x)?.mapv(|z| f.eval(z)))
    }

    /// Reconstruction from a hidden code: `W_d h + b_d`.
    pub fn decode(&self, h: ArrayView1<f64>) -> Result<Array1<f64>, ModelError> {
        if h.len() != self.hidden_dim() {
            return Err(ModelError::DimensionMismatch(format!(
                "code has {} entries, model expects {}",
                h.len(),
                self.hidden_dim()
            )));
        }
        Ok(self.dec_weight.dot(&h) + &self.dec_bias)
    }

    /// Full forward pass `G(x)`.
    pub fn reconstruct(
        &self,
        f: &Nonlinearity,
        x: ArrayView1<f64>,
    ) -> Result<Array1<f64>, ModelError> {
        let h = self.encode(f, x)?;
        self.decode(h.view())
    }

    /// Reconstruction energy `E(x) = 0.5 * ||x - G(x)||^2`.
    pub fn recon_energy(&self, f: &Nonlinearity, x: ArrayView1<f64>) -> Result<f64, ModelError> {
        let g = self.reconstruct(f, x)?;
        let mut acc = 0.0;
        for (gi, xi) in g.iter().zip(x.iter()) {
            let r = gi - xi;
            acc += r * r;
        }
        Ok(0.5 * acc)
    }

    /// Unweighted saturation penalty `sum_i f_c(z_i)`.
    pub fn sat_penalty(&self, f: &Nonlinearity, x: ArrayView1<f64>) -> Result<f64, ModelError> {
        let z = self.pre_activations(x)?;
        let mut acc = 0.0;
        for &zi in z.iter() {
            acc += f.eval_comp(zi)?;
        }
        Ok(acc)
    }

    /// Total loss of a batch (rows of `xs` are samples).
    ///
    /// The saturation term is reported whenever the activation has one. With
    /// `alpha == 0` an activation without a saturation set is fine (the term
    /// is 0); with `alpha != 0` it is an error.
    pub fn loss(
        &self,
        f: &Nonlinearity,
        alpha: f64,
        xs: ArrayView2<f64>,
    ) -> Result<LossBreakdown, ModelError> {
        let has_sat = f.has_penalty();
        if alpha != 0.0 && !has_sat {
            return Err(NonlinError::EmptySaturationSet.into());
        }
        let mut recon = 0.0;
        let mut sat = 0.0;
        for x in xs.outer_iter() {
            recon += self.recon_energy(f, x)?;
            if has_sat {
                sat += self.sat_penalty(f, x)?;
            }
        }
        Ok(LossBreakdown { reconstruction: recon, saturation: sat, alpha, total: recon + alpha * sat })
    }

    /// Exact per-sample gradient of `E(x) + alpha * sum_i f_c(z_i)`.
    ///
    /// With residual `r = G(x) - x` and code `h = f(z)`:
    ///
    /// ```text
    /// dL/dW_d = r h^T          dL/db_d = r
    /// u = (W_d^T r) .* f'(z) + alpha * f_c'(z)
    /// dL/dW_e = u x^T          dL/db_e = u
    /// ```
    ///
    /// In tied mode the decoder term re-appears transposed in the encoder
    /// slot and `dL/dW_d` is zeroed, matching the tied parameterization.
    pub fn loss_grad(
        &self,
        f: &Nonlinearity,
        alpha: f64,
        x: ArrayView1<f64>,
    ) -> Result<GradRecord, ModelError> {
        Ok(self.loss_grad_stats(f, alpha, x)?.0)
    }

    /// [`loss_grad`](Self::loss_grad) plus the diagnostics of the same
    /// forward pass, so training does not pay for a second one.
    pub fn loss_grad_stats(
        &self,
        f: &Nonlinearity,
        alpha: f64,
        x: ArrayView1<f64>,
    ) -> Result<(GradRecord, SampleStats), ModelError> {
        self.check_input(x)?;
        let z = self.enc_weight.dot(&x) + &self.enc_bias;
        let h = z.mapv(|v| f.eval(v));
        let r = self.dec_weight.dot(&h) + &self.dec_bias - &x;

        let has_sat = f.has_penalty();
        if alpha != 0.0 && !has_sat {
            return Err(NonlinError::EmptySaturationSet.into());
        }
        let mut sat = 0.0;
        let mut saturated = 0;
        let mut comp_deriv = Array1::zeros(z.len());
        if has_sat {
            for (i, &zi) in z.iter().enumerate() {
                let c = f.eval_comp(zi)?;
                sat += c;
                if c == 0.0 {
                    saturated += 1;
                }
                comp_deriv[i] = f.eval_comp_deriv(zi)?;
            }
        }

        let back = self.dec_weight.t().dot(&r);
        let mut delta = Array1::zeros(z.len());
        for i in 0..z.len() {
            delta[i] = back[i] * f.eval_deriv(z[i]) + alpha * comp_deriv[i];
        }

        let dec_b = r.clone();
        let enc_b = delta.clone();
        let (enc_w, dec_w) = if self.tied {
            let mut g = outer(delta.view(), x);
            g += &outer(h.view(), r.view());
            (g, Array2::zeros(self.dec_weight.dim()))
        } else {
            (outer(delta.view(), x), outer(r.view(), h.view()))
        };

        let recon = 0.5 * r.iter().map(|v| v * v).sum::<f64>();
        Ok((
            GradRecord { enc_weight: enc_w, enc_bias: enc_b, dec_weight: dec_w, dec_bias: dec_b },
            SampleStats { recon, sat, saturated },
        ))
    }

    /// One SGD step: `p <- p - lr * g`. Tied models re-derive the decoder
    /// weight from the updated encoder weight.
    pub fn apply_update(&mut self, g: &GradRecord, lr: f64) {
        self.enc_weight.scaled_add(-lr, &g.enc_weight);
        self.enc_bias.scaled_add(-lr, &g.enc_bias);
        self.dec_bias.scaled_add(-lr, &g.dec_bias);
        if self.tied {
            self.dec_weight = self.enc_weight.t().to_owned();
        } else {
            self.dec_weight.scaled_add(-lr, &g.dec_weight);
        }
    }

    /// Contractive penalty `||J||_F^2` of the encoder Jacobian
    /// `J = diag(f'(z)) W_e`, i.e. `sum_i f'(z_i)^2 ||row_i(W_e)||^2`.
    /// For a linear activation this is exactly `||W_e||_F^2`.
    pub fn cae_penalty(&self, f: &Nonlinearity, x: ArrayView1<f64>) -> Result<f64, ModelError> {
        let z = self.pre_activations(x)?;
        let mut acc = 0.0;
        for (i, row) in self.enc_weight.axis_iter(Axis(0)).enumerate() {
            let d = f.eval_deriv(z[i]);
            let n2: f64 = row.iter().map(|v| v * v).sum();
            acc += d * d * n2;
        }
        Ok(acc)
    }
}

const MAGIC: &[u8; 8] = b"SATAE001";

fn kind_code(f: &Nonlinearity) -> Result<(u8, f64), ModelError> {
    match f {
        Nonlinearity::Shrink { width } => Ok((0, *width)),
        Nonlinearity::RectifiedLinear => Ok((1, 1.0)),
        Nonlinearity::SaturatedLinear { width } => Ok((2, *width)),
        Nonlinearity::Linear => Ok((3, 1.0)),
        Nonlinearity::Tabulated(_) => Err(ModelError::UnsupportedKind("tabulated")),
    }
}

fn kind_from_code(code: u8, width: f64) -> Result<Nonlinearity, ModelError> {
    if !(width.is_finite() && width > 0.0) {
        return Err(ModelError::Corrupt(format!("bad activation width {width}")));
    }
    match code {
        0 => Ok(Nonlinearity::shrink(width)),
        1 => Ok(Nonlinearity::relu()),
        2 => Ok(Nonlinearity::satlin(width)),
        3 => Ok(Nonlinearity::linear()),
        other => Err(ModelError::Corrupt(format!("unknown nonlinearity code {other}"))),
    }
}

/// Serialize a model to the fixed binary layout:
/// magic `SATAE001`, little-endian `u32` input and hidden dims, `u8` tied
/// flag, `u8` activation code (0 shrink, 1 relu, 2 satlin, 3 linear), `f64`
/// activation width (1.0 when the kind has none), then the four parameter
/// arrays as row-major `f64`: encoder weight, encoder bias, decoder weight,
/// decoder bias.
pub fn to_bytes(p: &ModelParams, f: &Nonlinearity) -> Result<Vec<u8>, ModelError> {
    let (code, width) = kind_code(f)?;
    let (d_h, d) = (p.hidden_dim(), p.input_dim());
    let mut out = Vec::with_capacity(26 + 8 * (d_h * d * 2 + d_h + d));
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(d as u32)?;
    out.write_u32::<LittleEndian>(d_h as u32)?;
    out.write_u8(p.tied as u8)?;
    out.write_u8(code)?;
    out.write_f64::<LittleEndian>(width)?;
    for &v in p.enc_weight.iter().chain(&p.enc_bias).chain(&p.dec_weight).chain(&p.dec_bias) {
        out.write_f64::<LittleEndian>(v)?;
    }
    Ok(out)
}

/// Parse the layout written by [`to_bytes`]. Rejects wrong magic, unknown
/// codes, size mismatches, and tied models whose stored decoder weight is not
/// exactly the encoder transpose.
pub fn from_bytes(bytes: &[u8]) -> Result<(ModelParams, Nonlinearity), ModelError> {
    if bytes.len() < 26 {
        return Err(ModelError::Corrupt("file shorter than header".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(ModelError::BadMagic);
    }
    let mut cur = Cursor::new(&bytes[8..]);
    let d = cur.read_u32::<LittleEndian>()? as usize;
    let d_h = cur.read_u32::<LittleEndian>()? as usize;
    let tied_flag = cur.read_u8()?;
    let code = cur.read_u8()?;
    let width = cur.read_f64::<LittleEndian>()?;
    if d == 0 || d_h == 0 {
        return Err(ModelError::Corrupt("zero dimension".into()));
    }
    if tied_flag > 1 {
        return Err(ModelError::Corrupt(format!("bad tied flag {tied_flag}")));
    }
    let f = kind_from_code(code, width)?;
    let n_params = 2 * d * d_h + d + d_h;
    let expect = 26 + 8 * n_params;
    if bytes.len() != expect {
        return Err(ModelError::Corrupt(format!(
            "expected {expect} bytes for a {d}x{d_h} model, file has {}",
            bytes.len()
        )));
    }
    let mut read_vec = |n: usize| -> Result<Vec<f64>, ModelError> {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(cur.read_f64::<LittleEndian>()?);
        }
        Ok(v)
    };
    let enc_w = Array2::from_shape_vec((d_h, d), read_vec(d_h * d)?)
        .expect("shape checked against length");
    let enc_b = Array1::from_vec(read_vec(d_h)?);
    let dec_w = Array2::from_shape_vec((d, d_h), read_vec(d * d_h)?)
        .expect("shape checked against length");
    let dec_b = Array1::from_vec(read_vec(d)?);
    let mut p = ModelParams::new(enc_w, enc_b, dec_w, dec_b)?;
    if tied_flag == 1 {
        if p.dec_weight != p.enc_weight.t() {
            return Err(ModelError::Corrupt(
                "tied flag set but decoder weight is not the encoder transpose".into(),
            ));
        }
        p.tied = true;
    }
    Ok((p, f))
}

pub fn save_model(path: &Path, p: &ModelParams, f: &Nonlinearity) -> Result<(), ModelError> {
    Ok(fs::write(path, to_bytes(p, f)?)?)
}

pub fn load_model(path: &Path) -> Result<(ModelParams, Nonlinearity), ModelError> {
    from_bytes(&fs::read(path)?)
}
