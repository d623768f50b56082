//! Self-check suites behind `cvattn verify`: algebraic invariants of the
//! attention family and finite-difference validation of every autodiff op,
//! plus whole-model gradient probes.
//!
//! Each check returns a [`CheckRow`] with the measured deviation, so the CLI
//! can print a pass/fail table and callers (like the acceptance tests) can
//! assert on the outcome.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::attention::{self, Kernel, Variant};
use crate::autodiff::{grad_check, CheckMode, NodeId, ParamStore, Tape};
use crate::ctensor::{softmax_rows, CTensor, ConvGeom};
use crate::error::Result;
use crate::model::{Mode, Model, ModelConfig};
use crate::norm;
use crate::rngs;
use crate::tasks;

#[derive(Debug, Clone)]
pub struct CheckRow {
    pub suite: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn push<F>(rows: &mut Vec<CheckRow>, suite: &'static str, name: &'static str, f: F)
where
    F: FnOnce() -> Result<(bool, String)>,
{
    let (passed, detail) = match f() {
        Ok(x) => x,
        Err(e) => (false, format!("errored: {e}")),
    };
    rows.push(CheckRow {
        suite,
        name,
        passed,
        detail,
    });
}

fn rand_ct(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CTensor<f64> {
    let re = (0..rows * cols).map(|_| rngs::randn(rng)).collect();
    let im = (0..rows * cols).map(|_| rngs::randn(rng)).collect();
    CTensor::new(&[rows, cols], re, im).expect("component lengths match")
}

fn attend_value(
    variant: Variant,
    kernel: Kernel,
    q: &CTensor<f64>,
    k: &CTensor<f64>,
    v: &CTensor<f64>,
    mask: Option<&Arc<CTensor<f64>>>,
) -> Result<CTensor<f64>> {
    let mut tape = Tape::new();
    let qn = tape.leaf(q.clone());
    let kn = tape.leaf(k.clone());
    let vn = tape.leaf(v.clone());
    let out = attention::attend(&mut tape, variant, kernel, qn, kn, vn, mask)?;
    Ok(tape.value(out).clone())
}

/// Quadratic-time reference transform (verification oracle).
fn naive_dft(re: &[f64], im: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = re.len();
    let mut or = vec![0.0; n];
    let mut oi = vec![0.0; n];
    for k in 0..n {
        for t in 0..n {
            let ang = -2.0 * std::f64::consts::PI * ((k * t) % n) as f64 / n as f64;
            let (s, c) = ang.sin_cos();
            or[k] += re[t] * c - im[t] * s;
            oi[k] += re[t] * s + im[t] * c;
        }
    }
    (or, oi)
}

/// Algebraic invariants of the attention family, the normalization layer and
/// the FFT front end, each measured against an explicit tolerance.
pub fn invariant_suite() -> Vec<CheckRow> {
    let mut rows = Vec::new();
    const S: &str = "invariants";
    let thetas = [0.3, 0.7, 2.1];

    push(&mut rows, S, "conjugated scores are hermitian across the argument swap", || {
        let mut worst = 0.0f64;
        for seed in 0..20u64 {
            let mut rng = rngs::stream(seed, "verify/symmetry");
            let q = rand_ct(&mut rng, 5, 4);
            let k = rand_ct(&mut rng, 5, 4);
            let a = attention::similarity(&q, &k, Kernel::DotProduct)?;
            let b = attention::similarity(&k, &q, Kernel::DotProduct)?;
            for i in 0..5 {
                for j in 0..5 {
                    let (are, aim) = a.at2(i, j);
                    let (bre, bim) = b.at2(j, i);
                    worst = worst.max((are - bre).abs()).max((aim + bim).abs());
                }
            }
        }
        Ok((worst < 1e-12, format!("max deviation {worst:.3e} (tol 1e-12)")))
    });

    push(&mut rows, S, "joint rotation fixes every conjugated-kernel variant", || {
        let mut worst = 0.0f64;
        let mut which = "";
        for variant in [Variant::CAtt, Variant::AAtt, Variant::APAtt, Variant::RIAtt] {
            for seed in 0..5u64 {
                let mut rng = rngs::stream(seed, "verify/joint-rotation");
                let q = rand_ct(&mut rng, 6, 4);
                let k = rand_ct(&mut rng, 6, 4);
                let v = rand_ct(&mut rng, 6, 4);
                let base = attend_value(variant, Kernel::DotProduct, &q, &k, &v, None)?;
                for theta in thetas {
                    let rotated = attend_value(
                        variant,
                        Kernel::DotProduct,
                        &q.rotate(theta),
                        &k.rotate(theta),
                        &v,
                        None,
                    )?;
                    let d = base.max_abs_diff(&rotated);
                    if d > worst {
                        worst = d;
                        which = variant.as_str();
                    }
                }
            }
        }
        Ok((
            worst < 1e-12,
            format!("max deviation {worst:.3e} at {which} (tol 1e-12)"),
        ))
    });

    push(&mut rows, S, "joint rotation moves the unconjugated kernels", || {
        // ... for every variant whose scores keep the e^(2i theta) factor;
        // the magnitude-only variant is the exception checked separately
        let mut least = f64::INFINITY;
        let mut which = "";
        for variant in [Variant::CAtt, Variant::APAtt, Variant::RIAtt, Variant::Yang] {
            let mut rng = rngs::stream(3, "verify/plain-rotation");
            let q = rand_ct(&mut rng, 6, 4);
            let k = rand_ct(&mut rng, 6, 4);
            let v = rand_ct(&mut rng, 6, 4);
            let base = attend_value(variant, Kernel::PlainProduct, &q, &k, &v, None)?;
            let rotated = attend_value(
                variant,
                Kernel::PlainProduct,
                &q.rotate(0.7),
                &k.rotate(0.7),
                &v,
                None,
            )?;
            let d: f64 = base.max_abs_diff(&rotated);
            if d < least {
                least = d;
                which = variant.as_str();
            }
        }
        Ok((
            least > 1e-3,
            format!("min movement {least:.3e} at {which} (must exceed 1e-3)"),
        ))
    });

    push(&mut rows, S, "magnitude scores ignore rotation even unconjugated", || {
        let mut worst = 0.0f64;
        for seed in 0..5u64 {
            let mut rng = rngs::stream(seed, "verify/aatt-plain");
            let q = rand_ct(&mut rng, 6, 4);
            let k = rand_ct(&mut rng, 6, 4);
            let v = rand_ct(&mut rng, 6, 4);
            let base = attend_value(Variant::AAtt, Kernel::PlainProduct, &q, &k, &v, None)?;
            for theta in thetas {
                let rotated = attend_value(
                    Variant::AAtt,
                    Kernel::PlainProduct,
                    &q.rotate(theta),
                    &k.rotate(theta),
                    &v,
                    None,
                )?;
                worst = worst.max(base.max_abs_diff(&rotated));
            }
        }
        Ok((worst < 1e-12, format!("max deviation {worst:.3e} (tol 1e-12)")))
    });

    push(&mut rows, S, "magnitude scores ignore one-sided rotation", || {
        let mut worst = 0.0f64;
        for kernel in [Kernel::DotProduct, Kernel::PlainProduct] {
            for seed in 0..5u64 {
                let mut rng = rngs::stream(seed, "verify/aatt-one-sided");
                let q = rand_ct(&mut rng, 6, 4);
                let k = rand_ct(&mut rng, 6, 4);
                let v = rand_ct(&mut rng, 6, 4);
                let base = attend_value(Variant::AAtt, kernel, &q, &k, &v, None)?;
                for theta in thetas {
                    let qr = attend_value(Variant::AAtt, kernel, &q.rotate(theta), &k, &v, None)?;
                    worst = worst.max(base.max_abs_diff(&qr));
                }
            }
        }
        Ok((worst < 1e-12, format!("max deviation {worst:.3e} (tol 1e-12)")))
    });

    push(&mut rows, S, "real inputs reduce the projected variant to real attention", || {
        let mut worst = 0.0f64;
        for seed in 0..10u64 {
            let mut rng = rngs::stream(seed, "verify/real-reduction");
            let n = 5;
            let d = 4;
            let mut q = rand_ct(&mut rng, n, d);
            let mut k = rand_ct(&mut rng, n, d);
            let mut v = rand_ct(&mut rng, n, d);
            for t in [&mut q, &mut k, &mut v] {
                t.im_mut().iter_mut().for_each(|x| *x = 0.0);
            }
            let got = attend_value(Variant::CAtt, Kernel::DotProduct, &q, &k, &v, None)?;

            // hand-rolled real attention: scores, row softmax, value average
            let scale = 1.0 / (d as f64).sqrt();
            for i in 0..n {
                let mut srow = vec![0.0f64; n];
                for j in 0..n {
                    for c in 0..d {
                        srow[j] += q.re()[i * d + c] * k.re()[j * d + c];
                    }
                    srow[j] *= scale;
                }
                let m = srow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = srow.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                for c in 0..d {
                    let mut want = 0.0;
                    for j in 0..n {
                        want += exps[j] / z * v.re()[j * d + c];
                    }
                    let (gre, gim) = got.at2(i, c);
                    worst = worst.max((gre - want).abs()).max(gim.abs());
                }
            }
        }
        Ok((worst < 1e-12, format!("max deviation {worst:.3e} (tol 1e-12)")))
    });

    push(&mut rows, S, "masked positions carry exactly zero weight", || {
        let mut rng = rngs::stream(0, "verify/masked-zero");
        let mut scores = rand_ct(&mut rng, 3, 4);
        scores.im_mut().iter_mut().for_each(|x| *x = 0.0);
        let masked = [(0usize, 2usize), (1, 0), (2, 3), (2, 1)];
        for &(i, j) in &masked {
            scores.re_mut()[i * 4 + j] = f64::NEG_INFINITY;
        }
        let w = softmax_rows(&scores)?;
        let mut exact = true;
        for &(i, j) in &masked {
            exact &= w.re()[i * 4 + j] == 0.0 && w.im()[i * 4 + j] == 0.0;
        }
        let mut row_err = 0.0f64;
        for i in 0..3 {
            let s: f64 = (0..4).map(|j| w.re()[i * 4 + j]).sum();
            row_err = row_err.max((s - 1.0).abs());
        }
        Ok((
            exact && row_err < 1e-15,
            format!("masked weights exact zeros: {exact}, row sums off by {row_err:.3e}"),
        ))
    });

    push(&mut rows, S, "causal masking blocks information from the future", || {
        let n = 6;
        let d = 4;
        let mut mask = CTensor::<f64>::zeros(&[n, n]);
        for i in 0..n {
            for j in i + 1..n {
                mask.re_mut()[i * n + j] = f64::NEG_INFINITY;
            }
        }
        let mask = Arc::new(mask);
        let mut rng = rngs::stream(1, "verify/causal");
        let q = rand_ct(&mut rng, n, d);
        let k = rand_ct(&mut rng, n, d);
        let v = rand_ct(&mut rng, n, d);
        let base = attend_value(Variant::CAtt, Kernel::DotProduct, &q, &k, &v, Some(&mask))?;

        // rewrite the last two tokens of K and V entirely
        let (mut k2, mut v2) = (k.clone(), v.clone());
        for t in [&mut k2, &mut v2] {
            for j in (n - 2) * d..n * d {
                t.re_mut()[j] = 9.0;
                t.im_mut()[j] = -9.0;
            }
        }
        let edited = attend_value(Variant::CAtt, Kernel::DotProduct, &q, &k2, &v2, Some(&mask))?;
        let mut bitwise = true;
        for i in 0..n - 2 {
            for c in 0..d {
                bitwise &= base.at2(i, c) == edited.at2(i, c);
            }
        }
        let last_moved = (0..d).any(|c| base.at2(n - 1, c) != edited.at2(n - 1, c));
        Ok((
            bitwise && last_moved,
            format!("prefix rows bitwise equal: {bitwise}, edited row changed: {last_moved}"),
        ))
    });

    push(&mut rows, S, "the phase factor lies on the unit circle", || {
        let mut worst = 0.0f64;
        let mut rng = rngs::stream(2, "verify/csgn");
        let z = rand_ct(&mut rng, 8, 8);
        let s = z.csgn();
        for i in 0..s.len() {
            let (re, im) = s.at(i);
            worst = worst.max(((re * re + im * im).sqrt() - 1.0).abs());
        }
        // and agrees with z/|z| on a known point
        let known = CTensor::<f64>::from_pairs(&[1, 1], &[(3.0, 4.0)])?.csgn();
        worst = worst
            .max((known.re()[0] - 0.6).abs())
            .max((known.im()[0] - 0.8).abs());
        Ok((worst < 1e-12, format!("max deviation {worst:.3e} (tol 1e-12)")))
    });

    push(&mut rows, S, "layer normalization whitens each token", || {
        let mut rng = rngs::stream(4, "verify/whitening");
        // correlate the components so the whitening has real work to do
        let mut x = rand_ct(&mut rng, 64, 8);
        for i in 0..x.len() {
            let (re, im) = x.at(i);
            x.im_mut()[i] = 0.6 * re + 0.4 * im + 0.3;
            x.re_mut()[i] = 2.0 * re - 1.0;
        }
        let id = norm::identity_zeta_param();
        let scalar = |v: f64| CTensor::<f64>::from_re(&[1, 1], vec![v]).expect("1x1");
        let (out, _) = norm::complex_ln_forward(
            &x,
            &scalar(id),
            &scalar(id),
            &scalar(0.0),
            &CTensor::zeros(&[1, 1]),
            1e-12,
        )?;
        let (mean, cov) = norm::complex_stats(&out)?;
        let mut worst = 0.0f64;
        for t in 0..out.rows() {
            let (mre, mim) = mean.at(t);
            let [suu, suv, svv] = cov[t];
            worst = worst
                .max(mre.abs())
                .max(mim.abs())
                .max((suu - 1.0).abs())
                .max(suv.abs())
                .max((svv - 1.0).abs());
        }
        Ok((worst < 1e-8, format!("max deviation {worst:.3e} (tol 1e-8)")))
    });

    push(&mut rows, S, "the fast transform matches the quadratic one", || {
        let mut worst = 0.0f64;
        let mut rng = rngs::stream(5, "verify/fft");
        let mut n = 2;
        while n <= 1024 {
            let re0: Vec<f64> = (0..n).map(|_| rngs::randn(&mut rng)).collect();
            let im0: Vec<f64> = (0..n).map(|_| rngs::randn(&mut rng)).collect();
            let (want_re, want_im) = naive_dft(&re0, &im0);
            let (mut re, mut im) = (re0, im0);
            tasks::fft_in_place(&mut re, &mut im, false)?;
            for k in 0..n {
                worst = worst
                    .max((re[k] - want_re[k]).abs())
                    .max((im[k] - want_im[k]).abs());
            }
            n *= 2;
        }
        Ok((worst < 1e-10, format!("max deviation {worst:.3e} (tol 1e-10)")))
    });

    push(&mut rows, S, "transform energy obeys the 1/n identity", || {
        let mut worst = 0.0f64;
        for seed in 0..5u64 {
            let mut rng = rngs::stream(seed, "verify/parseval");
            let n = 256;
            let re0: Vec<f64> = (0..n).map(|_| rngs::randn(&mut rng)).collect();
            let im0: Vec<f64> = (0..n).map(|_| rngs::randn(&mut rng)).collect();
            let time: f64 = re0.iter().zip(&im0).map(|(r, i)| r * r + i * i).sum();
            let (mut re, mut im) = (re0, im0);
            tasks::fft_in_place(&mut re, &mut im, false)?;
            let freq: f64 = re.iter().zip(&im).map(|(r, i)| r * r + i * i).sum();
            worst = worst.max((time - freq / n as f64).abs());
        }
        Ok((worst < 1e-10, format!("max deviation {worst:.3e} (tol 1e-10)")))
    });

    rows
}

const FD_H: f64 = 1e-6;
const FD_FLOOR: f64 = 1e-3;

type BuildOp = fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>;

/// Finite-difference one op across `seeds` random parameter draws. `shapes`
/// lists the complex parameter tensors handed to `op`; the op output is
/// reduced to a scalar with fixed random weights.
fn fd_op(seeds: u64, tag: &'static str, shapes: &[(usize, usize)], op: BuildOp) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = rngs::stream(seed, tag);
        let mut store = ParamStore::<f64>::new();
        let ids: Vec<_> = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| store.add(format!("p{i}"), rand_ct(&mut rng, r, c), false))
            .collect();
        let build = |st: &ParamStore<f64>| -> Result<(Tape<f64>, NodeId)> {
            let mut tape = Tape::new();
            let nodes: Vec<_> = ids.iter().map(|&id| tape.param(st, id)).collect();
            let out = op(&mut tape, &nodes)?;
            let n = tape.value(out).len();
            let mut wrng = rngs::stream(seed, "verify/fd-weights");
            let wre: Vec<f64> = (0..n).map(|_| rngs::randn(&mut wrng)).collect();
            let wim: Vec<f64> = (0..n).map(|_| rngs::randn(&mut wrng)).collect();
            let loss = tape.weighted_sum_real(out, Arc::new(wre), Arc::new(wim))?;
            Ok((tape, loss))
        };
        let report = grad_check(&mut store, build, CheckMode::All, FD_H, FD_FLOOR)?;
        worst = worst.max(report.max_rel_err);
    }
    Ok(worst)
}

/// Like [`fd_op`] but with full control over parameter registration and the
/// loss (no implicit reduction).
fn fd_custom(
    seeds: u64,
    tag: &'static str,
    register: fn(&mut ChaCha8Rng, &mut ParamStore<f64>) -> Vec<crate::autodiff::ParamId>,
    graph: fn(&mut Tape<f64>, &ParamStore<f64>, &[crate::autodiff::ParamId]) -> Result<NodeId>,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = rngs::stream(seed, tag);
        let mut store = ParamStore::<f64>::new();
        let ids = register(&mut rng, &mut store);
        let build = |st: &ParamStore<f64>| -> Result<(Tape<f64>, NodeId)> {
            let mut tape = Tape::new();
            let loss = graph(&mut tape, st, &ids)?;
            Ok((tape, loss))
        };
        let report = grad_check(&mut store, build, CheckMode::All, FD_H, FD_FLOOR)?;
        worst = worst.max(report.max_rel_err);
    }
    Ok(worst)
}

fn reduce_real(tape: &mut Tape<f64>, out: NodeId, seed: u64) -> Result<NodeId> {
    let n = tape.value(out).len();
    let mut wrng = rngs::stream(seed, "verify/fd-weights");
    let wre: Vec<f64> = (0..n).map(|_| rngs::randn(&mut wrng)).collect();
    let wim: Vec<f64> = (0..n).map(|_| rngs::randn(&mut wrng)).collect();
    tape.weighted_sum_real(out, Arc::new(wre), Arc::new(wim))
}

/// Finite-difference probe of a whole model: random tokens and targets, the
/// task loss, and a parameter store jittered away from initialization (fresh
/// parameters hold biases at exactly zero, which parks rectifier
/// pre-activations on their kink where central differences are undefined).
fn fd_model(seed: u64, variant: Variant, kernel: Kernel, conv: bool, sequence: bool) -> Result<f64> {
    let cfg = ModelConfig {
        variant,
        kernel,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 12,
        dropout_p: 0.0,
        in_channels: 6,
        n_classes: 5,
        seq_in: 3,
        seq_out: if sequence { 2 } else { 0 },
        conv_embedding: conv,
        per_feature_ln: false,
        pe_to_imag: false,
        ln_eps: 1e-5,
    };
    let model = Model::<f64>::init(cfg.clone(), seed)?;
    let mut probe = model.store.clone();
    let mut jrng = rngs::stream(seed, "verify/model-jitter");
    for (_, p) in probe.iter_mut() {
        for i in 0..p.value.len() {
            p.value.re_mut()[i] += 0.05 * rngs::randn(&mut jrng);
            if !p.is_real {
                p.value.im_mut()[i] += 0.05 * rngs::randn(&mut jrng);
            }
        }
    }

    let mut drng = rngs::stream(seed, "verify/model-data");
    let tokens = rand_ct(&mut drng, cfg.seq_in, cfg.in_channels);
    let rows = if sequence { cfg.seq_out } else { 1 };
    let mut targets = CTensor::<f64>::zeros(&[rows, cfg.n_classes]);
    for i in 0..targets.len() {
        if rngs::randn(&mut drng) > 0.2 {
            targets.re_mut()[i] = 1.0;
        }
    }
    let targets = Arc::new(targets);

    let build = |st: &ParamStore<f64>| -> Result<(Tape<f64>, NodeId)> {
        let m = model.with_store(st.clone());
        let mut tape = Tape::new();
        let logits = if sequence {
            m.sequence_logits(&mut tape, &tokens, &targets, &mut Mode::Eval)?
        } else {
            m.classify_logits(&mut tape, &tokens, &mut Mode::Eval)?
        };
        let loss = tape.bce_with_logits(logits, Arc::clone(&targets))?;
        Ok((tape, loss))
    };
    let report = grad_check(
        &mut probe,
        build,
        CheckMode::Sampled {
            per_tensor: 2,
            seed: seed.wrapping_add(101),
        },
        1e-5,
        FD_FLOOR,
    )?;
    Ok(report.max_rel_err)
}

/// Central-difference checks of every tape operation and of four end-to-end
/// models, `seeds` random draws each.
pub fn gradient_suite(seeds: u64) -> Vec<CheckRow> {
    let mut rows = Vec::new();
    const S: &str = "gradients";
    const TOL: f64 = 1e-5;
    // paths through the 2x2 inverse square root pick up extra conditioning
    const LN_TOL: f64 = 1e-4;

    let op = |rows: &mut Vec<CheckRow>,
                  name: &'static str,
                  tol: f64,
                  shapes: &'static [(usize, usize)],
                  f: BuildOp| {
        push(rows, S, name, || {
            let worst = fd_op(seeds, name, shapes, f)?;
            Ok((worst < tol, format!("max rel err {worst:.3e} (tol {tol:.0e})")))
        });
    };

    op(&mut rows, "add", TOL, &[(2, 3), (2, 3)], |t, n| t.add(n[0], n[1]));
    op(&mut rows, "sub", TOL, &[(2, 3), (2, 3)], |t, n| t.sub(n[0], n[1]));
    op(&mut rows, "neg", TOL, &[(2, 3)], |t, n| Ok(t.neg(n[0])));
    op(&mut rows, "scale_real", TOL, &[(2, 3)], |t, n| Ok(t.scale_real(n[0], 1.7)));
    op(&mut rows, "add_const", TOL, &[(2, 2)], |t, n| {
        let c = CTensor::<f64>::from_pairs(&[2, 2], &[(0.3, -1.1), (2.0, 0.4), (-0.7, 0.9), (1.5, -0.2)])?;
        t.add_const(n[0], Arc::new(c))
    });
    op(&mut rows, "add_row_broadcast", TOL, &[(3, 4), (1, 4)], |t, n| {
        t.add_row_broadcast(n[0], n[1])
    });
    op(&mut rows, "mul_elem", TOL, &[(2, 3), (2, 3)], |t, n| t.mul_elem(n[0], n[1]));
    op(&mut rows, "matmul", TOL, &[(2, 3), (3, 2)], |t, n| t.matmul(n[0], n[1]));
    op(&mut rows, "transpose", TOL, &[(2, 3)], |t, n| Ok(t.transpose(n[0])));
    op(&mut rows, "hermitian", TOL, &[(2, 3)], |t, n| Ok(t.hermitian(n[0])));
    op(&mut rows, "real_part", TOL, &[(2, 3)], |t, n| Ok(t.real_part(n[0])));
    op(&mut rows, "imag_part", TOL, &[(2, 3)], |t, n| Ok(t.imag_part(n[0])));
    op(&mut rows, "complexify", TOL, &[(2, 3), (2, 3)], |t, n| {
        let a = t.real_part(n[0]);
        let b = t.real_part(n[1]);
        t.complexify(a, b)
    });
    op(&mut rows, "abs", TOL, &[(2, 3)], |t, n| Ok(t.abs(n[0])));
    op(&mut rows, "softmax_rows", TOL, &[(2, 4)], |t, n| {
        let r = t.real_part(n[0]);
        t.softmax_rows(r)
    });
    op(&mut rows, "crelu", TOL, &[(2, 3)], |t, n| Ok(t.crelu(n[0])));
    op(&mut rows, "dropout", TOL, &[(2, 3)], |t, n| {
        let keep = vec![true, false, true, true, true, false];
        t.dropout(n[0], Arc::new(keep), 0.8)
    });
    op(&mut rows, "concat_cols", TOL, &[(2, 2), (2, 3)], |t, n| t.concat_cols(n));
    op(&mut rows, "slice_cols", TOL, &[(2, 5)], |t, n| t.slice_cols(n[0], 1, 3));
    op(&mut rows, "mean_rows", TOL, &[(4, 3)], |t, n| Ok(t.mean_rows(n[0])));
    op(&mut rows, "conv1d", TOL, &[(5, 2), (3, 4)], |t, n| {
        t.conv1d(
            n[0],
            n[1],
            ConvGeom {
                kernel: 3,
                ch_in: 2,
                ch_out: 2,
                stride: 1,
                padding: 1,
            },
        )
    });

    // sgn needs inputs away from its branch point at the origin
    push(&mut rows, S, "sgn", || {
        let worst = fd_custom(
            seeds,
            "sgn",
            |rng, store| {
                let mut z = rand_ct(rng, 2, 3);
                for i in 0..z.len() {
                    let (re, im) = z.at(i);
                    let mag = (re * re + im * im).sqrt();
                    if mag < 0.3 {
                        z.re_mut()[i] = re / mag * 0.5;
                        z.im_mut()[i] = im / mag * 0.5;
                    }
                }
                vec![store.add("z", z, false)]
            },
            |tape, st, ids| {
                let z = tape.param(st, ids[0]);
                let s = tape.sgn(z);
                reduce_real(tape, s, 7)
            },
        )?;
        Ok((worst < TOL, format!("max rel err {worst:.3e} (tol {TOL:.0e})")))
    });

    push(&mut rows, S, "complex_layer_norm", || {
        let worst = fd_custom(
            seeds,
            "complex_layer_norm",
            |rng, store| {
                vec![
                    store.add("x", rand_ct(rng, 4, 6), false),
                    store.add("alpha", CTensor::from_re(&[1, 1], vec![0.4]).unwrap(), true),
                    store.add("gamma", CTensor::from_re(&[1, 1], vec![-0.6]).unwrap(), true),
                    store.add("delta", CTensor::from_re(&[1, 1], vec![0.9]).unwrap(), true),
                    store.add("beta", rand_ct(rng, 1, 1), false),
                ]
            },
            |tape, st, ids| {
                let n: Vec<_> = ids.iter().map(|&id| tape.param(st, id)).collect();
                let out = tape.complex_layer_norm(n[0], n[1], n[2], n[3], n[4], 1e-5)?;
                reduce_real(tape, out, 8)
            },
        )?;
        Ok((worst < LN_TOL, format!("max rel err {worst:.3e} (tol {LN_TOL:.0e})")))
    });

    push(&mut rows, S, "real_layer_norm", || {
        let worst = fd_custom(
            seeds,
            "real_layer_norm",
            |rng, store| {
                let mut x = rand_ct(rng, 4, 6);
                x.im_mut().iter_mut().for_each(|v| *v = 0.0);
                vec![
                    store.add("x", x, true),
                    store.add("gamma", CTensor::from_re(&[1, 1], vec![1.2]).unwrap(), true),
                    store.add("beta", CTensor::from_re(&[1, 1], vec![-0.3]).unwrap(), true),
                ]
            },
            |tape, st, ids| {
                let n: Vec<_> = ids.iter().map(|&id| tape.param(st, id)).collect();
                let out = tape.real_layer_norm(n[0], n[1], n[2], 1e-5)?;
                reduce_real(tape, out, 9)
            },
        )?;
        Ok((worst < LN_TOL, format!("max rel err {worst:.3e} (tol {LN_TOL:.0e})")))
    });

    push(&mut rows, S, "bce_with_logits", || {
        let worst = fd_custom(
            seeds,
            "bce_with_logits",
            |rng, store| vec![store.add("x", rand_ct(rng, 2, 3), false)],
            |tape, st, ids| {
                let x = tape.param(st, ids[0]);
                let logits = tape.real_part(x);
                let targets =
                    CTensor::<f64>::from_re(&[2, 3], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0])?;
                tape.bce_with_logits(logits, Arc::new(targets))
            },
        )?;
        Ok((worst < TOL, format!("max rel err {worst:.3e} (tol {TOL:.0e})")))
    });

    push(&mut rows, S, "weighted_sum_real", || {
        let worst = fd_custom(
            seeds,
            "weighted_sum_real",
            |rng, store| vec![store.add("x", rand_ct(rng, 2, 3), false)],
            |tape, st, ids| {
                let x = tape.param(st, ids[0]);
                reduce_real(tape, x, 10)
            },
        )?;
        Ok((worst < TOL, format!("max rel err {worst:.3e} (tol {TOL:.0e})")))
    });

    let whole = |rows: &mut Vec<CheckRow>,
                     name: &'static str,
                     variant: Variant,
                     kernel: Kernel,
                     conv: bool,
                     sequence: bool| {
        push(rows, S, name, || {
            let mut worst = 0.0f64;
            for seed in 0..seeds {
                worst = worst.max(fd_model(seed, variant, kernel, conv, sequence)?);
            }
            Ok((worst < LN_TOL, format!("max rel err {worst:.3e} (tol {LN_TOL:.0e})")))
        });
    };
    whole(&mut rows, "model: projected variant, conjugated kernel, conv embedding",
        Variant::CAtt, Kernel::DotProduct, true, false);
    whole(&mut rows, "model: phase-preserving variant, plain kernel, seq2seq",
        Variant::APAtt, Kernel::PlainProduct, false, true);
    whole(&mut rows, "model: split recombination, plain kernel, seq2seq",
        Variant::Yang, Kernel::PlainProduct, false, true);
    whole(&mut rows, "model: real baseline", Variant::Real, Kernel::DotProduct, false, false);

    rows
}

/// Both suites back to back.
pub fn all_suites(seeds: u64) -> Vec<CheckRow> {
    let mut rows = invariant_suite();
    rows.extend(gradient_suite(seeds));
    rows
}
