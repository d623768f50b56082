//! Scaled dot-product attention over complex queries, keys and values.
//!
//! A similarity kernel produces complex scores, and a variant maps them to
//! attention weights:
//!
//! * `CAtt`   softmax over the real part of the scores,
//! * `AAtt`   softmax over the score magnitudes,
//! * `APAtt`  magnitude softmax, re-phased elementwise by sgn(S),
//! * `RIAtt`  independent softmaxes over real and imaginary parts, recombined
//!            as a complex weight matrix,
//! * `Yang`   split construction from four real softmax attentions over the
//!            component blocks of Q, K, V,
//! * `Real`   the ordinary real-valued baseline.
//!
//! Kernels: `DotProduct` scores Q K^H (conjugated), `PlainProduct` scores
//! Q K^T (unconjugated). The 1/sqrt(d_k) scaling and any additive mask are
//! applied to the real-valued map right before each softmax, in that order.

use std::sync::Arc;

use crate::autodiff::{NodeId, Tape};
use crate::ctensor::CTensor;
use crate::error::{CvError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    CAtt,
    AAtt,
    APAtt,
    RIAtt,
    Yang,
    Real,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::CAtt => "catt",
            Variant::AAtt => "aatt",
            Variant::APAtt => "apatt",
            Variant::RIAtt => "riatt",
            Variant::Yang => "yang",
            Variant::Real => "real",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "catt" => Ok(Variant::CAtt),
            "aatt" => Ok(Variant::AAtt),
            "apatt" => Ok(Variant::APAtt),
            "riatt" => Ok(Variant::RIAtt),
            "yang" => Ok(Variant::Yang),
            "real" => Ok(Variant::Real),
            other => Err(CvError::InvalidArgument(format!(
                "unknown attention variant '{other}' (expected catt|aatt|apatt|riatt|yang|real)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kernel {
    DotProduct,
    PlainProduct,
}

impl Kernel {
    pub fn as_str(&self) -> &'static str {
        match self {
            Kernel::DotProduct => "dot",
            Kernel::PlainProduct => "qkt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(Kernel::DotProduct),
            "qkt" => Ok(Kernel::PlainProduct),
            other => Err(CvError::InvalidArgument(format!(
                "unknown kernel '{other}' (expected dot|qkt)"
            ))),
        }
    }
}

impl std::fmt::Display for Kernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The Yang split is only defined over the unconjugated product, and the real
/// baseline only has the conjugated (= plain transpose) form.
pub fn check_compatible(variant: Variant, kernel: Kernel) -> Result<()> {
    match (variant, kernel) {
        (Variant::Yang, Kernel::DotProduct) => Err(CvError::InvalidArgument(
            "variant 'yang' requires kernel 'qkt'".into(),
        )),
        (Variant::Real, Kernel::PlainProduct) => Err(CvError::InvalidArgument(
            "variant 'real' requires kernel 'dot'".into(),
        )),
        _ => Ok(()),
    }
}

/// All valid (variant, kernel) pairs: the complex variants under both
/// kernels, the Yang split, and the real baseline.
pub fn valid_combinations() -> Vec<(Variant, Kernel)> {
    let mut v = Vec::new();
    for variant in [Variant::CAtt, Variant::AAtt, Variant::APAtt, Variant::RIAtt] {
        v.push((variant, Kernel::DotProduct));
        v.push((variant, Kernel::PlainProduct));
    }
    v.push((Variant::Yang, Kernel::PlainProduct));
    v.push((Variant::Real, Kernel::DotProduct));
    v
}

/// Additive causal mask: 0 on and below the diagonal, -inf above.
pub fn causal_mask<T: Scalar>(n: usize) -> CTensor<T> {
    let mut m = CTensor::zeros(&[n, n]);
    for i in 0..n {
        for j in (i + 1)..n {
            m.re_mut()[i * n + j] = T::neg_infinity();
        }
    }
    m
}

/// Unscaled similarity scores between query and key rows: Q K^H under the
/// conjugated kernel, Q K^T under the plain one. The 1/sqrt(d_k) factor is
/// applied later, by the variant.
pub fn similarity<T: Scalar>(
    q: &CTensor<T>,
    k: &CTensor<T>,
    kernel: Kernel,
) -> Result<CTensor<T>> {
    match kernel {
        Kernel::DotProduct => crate::ctensor::cmatmul(q, &k.hermitian()),
        Kernel::PlainProduct => crate::ctensor::cmatmul(q, &k.transpose()),
    }
}

fn scores<T: Scalar>(tape: &mut Tape<T>, kernel: Kernel, q: NodeId, k: NodeId) -> Result<NodeId> {
    let kt = match kernel {
        Kernel::DotProduct => tape.hermitian(k),
        Kernel::PlainProduct => tape.transpose(k),
    };
    tape.matmul(q, kt)
}

/// scale -> mask -> softmax over a real-valued map of the scores.
fn weights<T: Scalar>(
    tape: &mut Tape<T>,
    map: NodeId,
    scale: T,
    mask: Option<&Arc<CTensor<T>>>,
) -> Result<NodeId> {
    let mut s = tape.scale_real(map, scale);
    if let Some(m) = mask {
        s = tape.add_const(s, m.clone())?;
    }
    tape.softmax_rows(s)
}

/// One attention application on the tape. `q` is (n x d_k), `k`/`v` are
/// (m x d_k) / (m x d_v); the mask, if any, is additive over the (n x m)
/// score map.
pub fn attend<T: Scalar>(
    tape: &mut Tape<T>,
    variant: Variant,
    kernel: Kernel,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: Option<&Arc<CTensor<T>>>,
) -> Result<NodeId> {
    check_compatible(variant, kernel)?;
    let d_k = tape.value(q).cols();
    let scale = T::one() / T::from_f64(d_k as f64).sqrt();
    match variant {
        Variant::CAtt => {
            let s = scores(tape, kernel, q, k)?;
            let re = tape.real_part(s);
            let w = weights(tape, re, scale, mask)?;
            tape.matmul(w, v)
        }
        Variant::AAtt => {
            let s = scores(tape, kernel, q, k)?;
            let a = tape.abs(s);
            let w = weights(tape, a, scale, mask)?;
            tape.matmul(w, v)
        }
        Variant::APAtt => {
            let s = scores(tape, kernel, q, k)?;
            let a = tape.abs(s);
            let w = weights(tape, a, scale, mask)?;
            let phase = tape.sgn(s);
            let wp = tape.mul_elem(w, phase)?;
            tape.matmul(wp, v)
        }
        Variant::RIAtt => {
            let s = scores(tape, kernel, q, k)?;
            let re = tape.real_part(s);
            let im = tape.imag_part(s);
            let wr = weights(tape, re, scale, mask)?;
            let wi = weights(tape, im, scale, mask)?;
            let w = tape.complexify(wr, wi)?;
            tape.matmul(w, v)
        }
        Variant::Yang => {
            let a = tape.real_part(q);
            let b = tape.imag_part(q);
            let c = tape.real_part(k);
            let d = tape.imag_part(k);
            let e = tape.real_part(v);
            let f = tape.imag_part(v);
            let mut att = |x: NodeId, y: NodeId, z: NodeId| -> Result<NodeId> {
                let yt = tape.transpose(y);
                let s = tape.matmul(x, yt)?;
                let w = weights(tape, s, scale, mask)?;
                tape.matmul(w, z)
            };
            let ace = att(a, c, e)?;
            let adf = att(a, d, f)?;
            let bcf = att(b, c, f)?;
            let bde = att(b, d, e)?;
            let acf = att(a, c, f)?;
            let ade = att(a, d, e)?;
            let bce = att(b, c, e)?;
            let bdf = att(b, d, f)?;
            let re1 = tape.sub(ace, adf)?;
            let re2 = tape.sub(re1, bcf)?;
            let re = tape.sub(re2, bde)?;
            let im1 = tape.add(acf, ade)?;
            let im2 = tape.add(im1, bce)?;
            let im = tape.sub(im2, bdf)?;
            tape.complexify(re, im)
        }
        Variant::Real => {
            debug_assert!(
                tape.value(q).max_abs_im() == T::zero()
                    && tape.value(k).max_abs_im() == T::zero()
                    && tape.value(v).max_abs_im() == T::zero(),
                "real attention expects real-valued inputs"
            );
            let s = scores(tape, kernel, q, k)?;
            let re = tape.real_part(s);
            let w = weights(tape, re, scale, mask)?;
            tape.matmul(w, v)
        }
    }
}

/// The split-path attention on its own; shorthand for `attend` with the one
/// kernel that variant admits.
pub fn yang_attend<T: Scalar>(
    tape: &mut Tape<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: Option<&Arc<CTensor<T>>>,
) -> Result<NodeId> {
    attend(tape, Variant::Yang, Kernel::PlainProduct, q, k, v, mask)
}

/// Multi-head attention: project q/k/v with (bias-free) square maps, run
/// `attend` independently on each d_model/n_heads-wide head slice, then mix
/// the concatenated head outputs with the output projection.
///
/// All four projection weights must be (d_model x d_model) and d_model must
/// divide evenly into heads.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    variant: Variant,
    kernel: Kernel,
    n_heads: usize,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
    mask: Option<&Arc<CTensor<T>>>,
) -> Result<NodeId> {
    let d_model = tape.value(q).cols();
    if n_heads == 0 || d_model % n_heads != 0 {
        return Err(CvError::InvalidArgument(format!(
            "n_heads {} must evenly divide d_model {}",
            n_heads, d_model
        )));
    }
    let d_head = d_model / n_heads;
    let qp = tape.matmul(q, wq)?;
    let kp = tape.matmul(k, wk)?;
    let vp = tape.matmul(v, wv)?;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(qp, h * d_head, d_head)?;
        let kh = tape.slice_cols(kp, h * d_head, d_head)?;
        let vh = tape.slice_cols(vp, h * d_head, d_head)?;
        heads.push(attend(tape, variant, kernel, qh, kh, vh, mask)?);
    }
    let cat = tape.concat_cols(&heads)?;
    tape.matmul(cat, wo)
}
