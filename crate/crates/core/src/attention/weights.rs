use rand::Rng;

use super::AttentionGeometry;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

fn expect_shape(name: &str, t: &Tensor, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::Geometry(format!(
            "{name} has shape {:?}, expected {shape:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Projections of a standard (possibly grouped) attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MhaWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
}

impl MhaWeights {
    pub fn random<R: Rng + ?Sized>(geo: &AttentionGeometry, std: f64, rng: &mut R) -> Self {
        let (d, hq, hkv) = (geo.d, geo.n_h * geo.d_h, geo.n_kv * geo.d_h);
        Self {
            w_q: Tensor::randn(&[d, hq], std, rng),
            w_k: Tensor::randn(&[d, hkv], std, rng),
            w_v: Tensor::randn(&[d, hkv], std, rng),
            w_o: Tensor::randn(&[hq, d], std, rng),
        }
    }

    pub fn check(&self, geo: &AttentionGeometry) -> Result<()> {
        let (d, hq, hkv) = (geo.d, geo.n_h * geo.d_h, geo.n_kv * geo.d_h);
        expect_shape("w_q", &self.w_q, &[d, hq])?;
        expect_shape("w_k", &self.w_k, &[d, hkv])?;
        expect_shape("w_v", &self.w_v, &[d, hkv])?;
        expect_shape("w_o", &self.w_o, &[hq, d])
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("w_o", &self.w_o)]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_o", &mut self.w_o),
        ]
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> MhaVars<'t> {
        self.bind_with(&mut |t| bind_one(tape, t, trainable))
    }

    /// Binds through `b`, called once per tensor in [`named`](Self::named) order.
    pub fn bind_with<'t>(&self, b: &mut dyn FnMut(&Tensor) -> Var<'t>) -> MhaVars<'t> {
        MhaVars {
            w_q: b(&self.w_q),
            w_k: b(&self.w_k),
            w_v: b(&self.w_v),
            w_o: b(&self.w_o),
        }
    }
}

pub(crate) fn bind_one<'t>(tape: &'t Tape, t: &Tensor, trainable: bool) -> Var<'t> {
    if trainable {
        tape.param(t)
    } else {
        tape.leaf(t)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MhaVars<'t> {
    pub w_q: Var<'t>,
    pub w_k: Var<'t>,
    pub w_v: Var<'t>,
    pub w_o: Var<'t>,
}

impl<'t> MhaVars<'t> {
    pub fn all(&self) -> Vec<Var<'t>> {
        vec![self.w_q, self.w_k, self.w_v, self.w_o]
    }
}

/// Gain and bias of an intermediate layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    /// Identity gain, zero bias.
    pub fn identity(width: usize) -> Self {
        Self {
            gain: Tensor::full(&[width], 1.0),
            bias: Tensor::zeros(&[width]),
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Projections of a multi-head latent attention layer.
///
/// Shapes: `w_dq d×r_q`, `w_uq r_q×n_h·d_qk`, `w_qr r_q×n_h·d_r`,
/// `w_dkv d×r_kv`, `w_uk r_kv×n_h·d_qk`, `w_uv r_kv×n_h·d_h`, `w_kr d×d_r`,
/// `w_o n_h·d_h×d`. The optional norms sit between down- and up-projection.
#[derive(Clone, Debug, PartialEq)]
pub struct MlaWeights {
    pub w_dq: Tensor,
    pub w_uq: Tensor,
    pub w_qr: Tensor,
    pub w_dkv: Tensor,
    pub w_uk: Tensor,
    pub w_uv: Tensor,
    pub w_kr: Tensor,
    pub w_o: Tensor,
    pub ln_q: Option<LayerNormParams>,
    pub ln_kv: Option<LayerNormParams>,
}

impl MlaWeights {
    pub fn check(&self, geo: &AttentionGeometry) -> Result<()> {
        let g = geo;
        expect_shape("w_dq", &self.w_dq, &[g.d, g.r_q])?;
        expect_shape("w_uq", &self.w_uq, &[g.r_q, g.n_h * g.d_qk])?;
        expect_shape("w_qr", &self.w_qr, &[g.r_q, g.n_h * g.d_r])?;
        expect_shape("w_dkv", &self.w_dkv, &[g.d, g.r_kv])?;
        expect_shape("w_uk", &self.w_uk, &[g.r_kv, g.n_h * g.d_qk])?;
        expect_shape("w_uv", &self.w_uv, &[g.r_kv, g.n_h * g.d_h])?;
        expect_shape("w_kr", &self.w_kr, &[g.d, g.d_r])?;
        expect_shape("w_o", &self.w_o, &[g.n_h * g.d_h, g.d])?;
        if self.ln_q.is_some() != self.ln_kv.is_some() {
            return Err(Error::Geometry("ln_q and ln_kv must be enabled together".into()));
        }
        if let Some(ln) = &self.ln_q {
            expect_shape("ln_q.gain", &ln.gain, &[g.r_q])?;
            expect_shape("ln_q.bias", &ln.bias, &[g.r_q])?;
        }
        if let Some(ln) = &self.ln_kv {
            expect_shape("ln_kv.gain", &ln.gain, &[g.r_kv])?;
            expect_shape("ln_kv.bias", &ln.bias, &[g.r_kv])?;
        }
        Ok(())
    }

    pub fn layer_norm_enabled(&self) -> bool {
        self.ln_q.is_some()
    }

    /// Latent ranks `(r_q, r_kv)` implied by the tensor shapes.
    pub fn ranks(&self) -> (usize, usize) {
        (self.w_dq.cols(), self.w_dkv.cols())
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![
            ("w_dq", &self.w_dq),
            ("w_uq", &self.w_uq),
            ("w_qr", &self.w_qr),
            ("w_dkv", &self.w_dkv),
            ("w_uk", &self.w_uk),
            ("w_uv", &self.w_uv),
            ("w_kr", &self.w_kr),
            ("w_o", &self.w_o),
        ];
        if let (Some(q), Some(kv)) = (&self.ln_q, &self.ln_kv) {
            out.extend([
                ("ln_q.gain", &q.gain),
                ("ln_q.bias", &q.bias),
                ("ln_kv.gain", &kv.gain),
                ("ln_kv.bias", &kv.bias),
            ]);
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = vec![
            ("w_dq", &mut self.w_dq),
            ("w_uq", &mut self.w_uq),
            ("w_qr", &mut self.w_qr),
            ("w_dkv", &mut self.w_dkv),
            ("w_uk", &mut self.w_uk),
            ("w_uv", &mut self.w_uv),
            ("w_kr", &mut self.w_kr),
            ("w_o", &mut self.w_o),
        ];
        if let (Some(q), Some(kv)) = (&mut self.ln_q, &mut self.ln_kv) {
            out.extend([
                ("ln_q.gain", &mut q.gain),
                ("ln_q.bias", &mut q.bias),
                ("ln_kv.gain", &mut kv.gain),
                ("ln_kv.bias", &mut kv.bias),
            ]);
        }
        out
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> MlaVars<'t> {
        self.bind_with(&mut |t| bind_one(tape, t, trainable))
    }

    /// Binds through `b`, called once per tensor in [`named`](Self::named) order.
    pub fn bind_with<'t>(&self, b: &mut dyn FnMut(&Tensor) -> Var<'t>) -> MlaVars<'t> {
        MlaVars {
            w_dq: b(&self.w_dq),
            w_uq: b(&self.w_uq),
            w_qr: b(&self.w_qr),
            w_dkv: b(&self.w_dkv),
            w_uk: b(&self.w_uk),
            w_uv: b(&self.w_uv),
            w_kr: b(&self.w_kr),
            w_o: b(&self.w_o),
            ln_q: self.ln_q.as_ref().map(|ln| (b(&ln.gain), b(&ln.bias))),
            ln_kv: self.ln_kv.as_ref().map(|ln| (b(&ln.gain), b(&ln.bias))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MlaVars<'t> {
    pub w_dq: Var<'t>,
    pub w_uq: Var<'t>,
    pub w_qr: Var<'t>,
    pub w_dkv: Var<'t>,
    pub w_uk: Var<'t>,
    pub w_uv: Var<'t>,
    pub w_kr: Var<'t>,
    pub w_o: Var<'t>,
    pub ln_q: Option<(Var<'t>, Var<'t>)>,
    pub ln_kv: Option<(Var<'t>, Var<'t>)>,
}

impl<'t> MlaVars<'t> {
    /// Handles in the same order as [`MlaWeights::named`].
    pub fn all(&self) -> Vec<Var<'t>> {
        let mut out = vec![
            self.w_dq, self.w_uq, self.w_qr, self.w_dkv, self.w_uk, self.w_uv, self.w_kr, self.w_o,
        ];
        if let (Some(q), Some(kv)) = (self.ln_q, self.ln_kv) {
            out.extend([q.0, q.1, kv.0, kv.1]);
        }
        out
    }
}
