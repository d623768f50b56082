//! Encoder-decoder sequence model over complex activations.
//!
//! The encoder embeds a sequence of complex feature vectors (optionally
//! through a small convolutional front end), adds sinusoidal positional
//! encodings to the real component, and applies post-LN residual blocks:
//! multi-head attention followed by a CReLU feed-forward with dropout between
//! its two linear maps. The decoder embeds previously produced label vectors
//! (zero row as the start symbol), runs causally masked self-attention plus
//! cross-attention into the encoder memory, and a per-token real linear head
//! maps the concatenated real/imaginary features to class logits.
//!
//! Setting the variant to `Real` builds the width-matched real baseline: the
//! input is interleaved as [re0, im0, re1, im1, ...], every embedded
//! dimension doubles, and all parameters stay real. The `Yang` variant keeps
//! the model complex but uses real-valued attention projections, matching the
//! split construction it implements.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{causal_mask, check_compatible, multi_head_attention, Kernel, Variant};
use crate::autodiff::{NodeId, ParamId, ParamStore, Tape};
use crate::ctensor::{CTensor, ConvGeom};
use crate::error::{CvError, Result};
use crate::norm::identity_zeta_param;
use crate::rngs;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub variant: Variant,
    pub kernel: Kernel,
    /// Width of the complex residual stream (the real baseline doubles it).
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub dropout_p: f64,
    /// Complex features per input token (spectrum bins).
    pub in_channels: usize,
    pub n_classes: usize,
    /// Tokens consumed by the encoder.
    pub seq_in: usize,
    /// Tokens produced by the decoder; 0 builds an encoder-only classifier.
    pub seq_out: usize,
    /// Convolutional embedding stack in front of the linear projection.
    pub conv_embedding: bool,
    /// One layer-norm parameter set per feature instead of per layer.
    pub per_feature_ln: bool,
    /// Also add the positional encoding to the imaginary component.
    pub pe_to_imag: bool,
    pub ln_eps: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        check_compatible(self.variant, self.kernel)?;
        let positive: [(&str, usize); 7] = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("in_channels", self.in_channels),
            ("n_classes", self.n_classes),
            ("seq_in", self.seq_in),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CvError::Config {
                    key: name.into(),
                    message: "must be positive".into(),
                });
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(CvError::Config {
                key: "n_heads".into(),
                message: format!("{} does not divide d_model {}", self.n_heads, self.d_model),
            });
        }
        if self.d_model % 2 != 0 {
            return Err(CvError::Config {
                key: "d_model".into(),
                message: "must be even for sin/cos positional pairs".into(),
            });
        }
        if self.conv_embedding && self.d_model % 4 != 0 {
            return Err(CvError::Config {
                key: "d_model".into(),
                message: "conv embedding needs d_model divisible by 4".into(),
            });
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(CvError::Config {
                key: "dropout".into(),
                message: format!("{} outside [0, 1)", self.dropout_p),
            });
        }
        if !(self.ln_eps > 0.0) {
            return Err(CvError::Config {
                key: "ln_eps".into(),
                message: "must be positive".into(),
            });
        }
        Ok(())
    }

    pub fn is_real(&self) -> bool {
        self.variant == Variant::Real
    }

    /// Residual stream width as built (doubled for the real baseline).
    pub fn width(&self) -> usize {
        if self.is_real() {
            2 * self.d_model
        } else {
            self.d_model
        }
    }

    pub fn ff_width(&self) -> usize {
        if self.is_real() {
            2 * self.d_ff
        } else {
            self.d_ff
        }
    }

    /// Columns of the embedded input (interleaved for the real baseline).
    pub fn input_width(&self) -> usize {
        if self.is_real() {
            2 * self.in_channels
        } else {
            self.in_channels
        }
    }
}

/// Forward mode: training draws fresh dropout masks from its stream,
/// evaluation applies none.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

/// Sinusoidal positional encodings: even columns sin(pos / 10000^(2i/d)),
/// odd columns the matching cos. Row 0 is [0, 1, 0, 1, ...]. The table lands
/// on the real component; `to_imag` mirrors it onto the imaginary one.
pub fn positional_encoding<T: Scalar>(seq: usize, d: usize, to_imag: bool) -> CTensor<T> {
    let mut pe = CTensor::zeros(&[seq, d]);
    for pos in 0..seq {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let s = T::from_f64(angle.sin());
            let c = T::from_f64(angle.cos());
            pe.re_mut()[pos * d + 2 * i] = s;
            pe.re_mut()[pos * d + 2 * i + 1] = c;
            if to_imag {
                pe.im_mut()[pos * d + 2 * i] = s;
                pe.im_mut()[pos * d + 2 * i + 1] = c;
            }
        }
    }
    pe
}

/// Real view of a complex sequence for the baseline model: each complex
/// column becomes the adjacent pair [re, im].
pub fn interleave_complex<T: Scalar>(x: &CTensor<T>) -> CTensor<T> {
    let (n, m) = (x.rows(), x.cols());
    let mut out = CTensor::zeros(&[n, 2 * m]);
    for i in 0..n {
        for j in 0..m {
            out.re_mut()[i * 2 * m + 2 * j] = x.re()[i * m + j];
            out.re_mut()[i * 2 * m + 2 * j + 1] = x.im()[i * m + j];
        }
    }
    out
}

/// Teacher-forcing input: a zero start row followed by all but the last
/// target row.
pub fn shift_right_labels<T: Scalar>(targets: &CTensor<T>) -> CTensor<T> {
    let (n, m) = (targets.rows(), targets.cols());
    let mut out = CTensor::zeros(&[n, m]);
    for i in 1..n {
        for j in 0..m {
            out.re_mut()[i * m + j] = targets.re()[(i - 1) * m + j];
            out.im_mut()[i * m + j] = targets.im()[(i - 1) * m + j];
        }
    }
    out
}

/// Rayleigh-magnitude, uniform-phase init: E|w|^2 = 1 / fan_in.
pub(crate) fn complex_init<T: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
) -> CTensor<T> {
    let n: usize = shape.iter().product();
    let sigma = (1.0 / (2.0 * fan_in as f64)).sqrt();
    let mut re = Vec::with_capacity(n);
    let mut im = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = 1.0 - rng.gen::<f64>();
        let r = sigma * (-2.0 * u.ln()).sqrt();
        let theta: f64 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        re.push(T::from_f64(r * theta.cos()));
        im.push(T::from_f64(r * theta.sin()));
    }
    CTensor::new(shape, re, im).expect("element count matches shape")
}

/// Gaussian init for real weights with the matching second moment.
pub(crate) fn real_init<T: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
) -> CTensor<T> {
    let n: usize = shape.iter().product();
    let std = (1.0 / fan_in as f64).sqrt();
    let re = (0..n)
        .map(|_| T::from_f64(rngs::randn(rng) * std))
        .collect();
    CTensor::from_re(shape, re).expect("element count matches shape")
}

pub struct Model<T: Scalar> {
    cfg: ModelConfig,
    pub store: ParamStore<T>,
    ids: HashMap<String, ParamId>,
    pe_enc: Arc<CTensor<T>>,
    pe_dec: Arc<CTensor<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let pe_enc = Arc::new(positional_encoding(cfg.seq_in, cfg.width(), cfg.pe_to_imag));
        let pe_dec = Arc::new(positional_encoding(
            cfg.seq_out.max(1),
            cfg.width(),
            cfg.pe_to_imag,
        ));
        let mut m = Model {
            cfg,
            store: ParamStore::new(),
            ids: HashMap::new(),
            pe_enc,
            pe_dec,
        };
        m.build_params(seed);
        Ok(m)
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    /// The same architecture over a different parameter store, e.g. a
    /// perturbed copy probed by a finite-difference check.
    pub fn with_store(&self, store: ParamStore<T>) -> Model<T> {
        Model {
            cfg: self.cfg.clone(),
            store,
            ids: self.ids.clone(),
            pe_enc: Arc::clone(&self.pe_enc),
            pe_dec: Arc::clone(&self.pe_dec),
        }
    }

    fn add_weight(&mut self, seed: u64, name: &str, shape: &[usize], fan_in: usize, real: bool) {
        let mut rng = rngs::stream(seed, &format!("init/{name}"));
        let value = if real {
            real_init(&mut rng, shape, fan_in)
        } else {
            complex_init(&mut rng, shape, fan_in)
        };
        let id = self.store.add(name, value, real);
        self.ids.insert(name.to_string(), id);
    }

    fn add_zeros(&mut self, name: &str, shape: &[usize], real: bool) {
        let id = self.store.add(name, CTensor::zeros(shape), real);
        self.ids.insert(name.to_string(), id);
    }

    fn add_const_real(&mut self, name: &str, shape: &[usize], v: f64) {
        let n: usize = shape.iter().product();
        let value = CTensor::from_re(shape, vec![T::from_f64(v); n]).expect("count matches");
        let id = self.store.add(name, value, true);
        self.ids.insert(name.to_string(), id);
    }

    fn add_ln(&mut self, prefix: &str) {
        let k = if self.cfg.per_feature_ln {
            self.cfg.width()
        } else {
            1
        };
        if self.cfg.is_real() {
            self.add_const_real(&format!("{prefix}.gamma"), &[k], 1.0);
            self.add_zeros(&format!("{prefix}.beta"), &[k], true);
        } else {
            let idv = identity_zeta_param();
            self.add_const_real(&format!("{prefix}.alpha"), &[k], idv);
            self.add_const_real(&format!("{prefix}.gamma"), &[k], idv);
            self.add_zeros(&format!("{prefix}.delta"), &[k], true);
            self.add_zeros(&format!("{prefix}.beta"), &[k], false);
        }
    }

    fn add_attention(&mut self, seed: u64, prefix: &str) {
        let d = self.cfg.width();
        // split-path attention keeps its projections real by construction
        let real = self.cfg.is_real() || self.cfg.variant == Variant::Yang;
        for w in ["wq", "wk", "wv", "wo"] {
            self.add_weight(seed, &format!("{prefix}.{w}"), &[d, d], d, real);
        }
    }

    fn add_ff(&mut self, seed: u64, prefix: &str) {
        let (d, f) = (self.cfg.width(), self.cfg.ff_width());
        let real = self.cfg.is_real();
        self.add_weight(seed, &format!("{prefix}.w1"), &[d, f], d, real);
        self.add_zeros(&format!("{prefix}.b1"), &[1, f], real);
        self.add_weight(seed, &format!("{prefix}.w2"), &[f, d], f, real);
        self.add_zeros(&format!("{prefix}.b2"), &[1, d], real);
    }

    fn build_params(&mut self, seed: u64) {
        let real = self.cfg.is_real();
        let d = self.cfg.width();
        let din = self.cfg.input_width();

        if self.cfg.conv_embedding {
            let chans = [din, d / 4, d / 2, d, d];
            for s in 0..4 {
                let (ci, co) = (chans[s], chans[s + 1]);
                self.add_weight(seed, &format!("embed.conv{s}.w"), &[3, ci * co], 3 * ci, real);
                self.add_zeros(&format!("embed.conv{s}.b"), &[1, co], real);
            }
            self.add_weight(seed, "embed.proj.w", &[d, d], d, real);
        } else {
            self.add_weight(seed, "embed.proj.w", &[din, d], din, real);
        }
        self.add_zeros("embed.proj.b", &[1, d], real);

        for l in 0..self.cfg.n_layers {
            self.add_attention(seed, &format!("enc{l}.attn"));
            self.add_ln(&format!("enc{l}.ln1"));
            self.add_ff(seed, &format!("enc{l}.ff"));
            self.add_ln(&format!("enc{l}.ln2"));
        }

        if self.cfg.seq_out > 0 {
            self.add_weight(
                seed,
                "dec.embed.w",
                &[self.cfg.n_classes, d],
                self.cfg.n_classes,
                real,
            );
            self.add_zeros("dec.embed.b", &[1, d], real);
            for l in 0..self.cfg.n_layers {
                self.add_attention(seed, &format!("dec{l}.self"));
                self.add_ln(&format!("dec{l}.ln1"));
                self.add_attention(seed, &format!("dec{l}.cross"));
                self.add_ln(&format!("dec{l}.ln2"));
                self.add_ff(seed, &format!("dec{l}.ff"));
                self.add_ln(&format!("dec{l}.ln3"));
            }
        }

        // the head reads concat(re, im) features, which for the real model is
        // simply its (already doubled) stream: 2 * d_model columns either way
        self.add_weight(seed, "head.w", &[2 * self.cfg.d_model, self.cfg.n_classes], 2 * self.cfg.d_model, true);
        self.add_zeros("head.b", &[1, self.cfg.n_classes], true);
    }

    fn p(&self, tape: &mut Tape<T>, name: &str) -> NodeId {
        tape.param(&self.store, self.ids[name])
    }

    fn linear(&self, tape: &mut Tape<T>, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = self.p(tape, &format!("{prefix}.w"));
        let b = self.p(tape, &format!("{prefix}.b"));
        let y = tape.matmul(x, w)?;
        tape.add_row_broadcast(y, b)
    }

    fn layer_norm(&self, tape: &mut Tape<T>, x: NodeId, prefix: &str) -> Result<NodeId> {
        let eps = T::from_f64(self.cfg.ln_eps);
        if self.cfg.is_real() {
            let gamma = self.p(tape, &format!("{prefix}.gamma"));
            let beta = self.p(tape, &format!("{prefix}.beta"));
            tape.real_layer_norm(x, gamma, beta, eps)
        } else {
            let alpha = self.p(tape, &format!("{prefix}.alpha"));
            let gamma = self.p(tape, &format!("{prefix}.gamma"));
            let delta = self.p(tape, &format!("{prefix}.delta"));
            let beta = self.p(tape, &format!("{prefix}.beta"));
            tape.complex_layer_norm(x, alpha, gamma, delta, beta, eps)
        }
    }

    fn maybe_dropout(&self, tape: &mut Tape<T>, x: NodeId, mode: &mut Mode) -> Result<NodeId> {
        let p = self.cfg.dropout_p;
        match mode {
            Mode::Eval => Ok(x),
            Mode::Train(_) if p == 0.0 => Ok(x),
            Mode::Train(rng) => {
                let keep_prob = 1.0 - p;
                let n = tape.value(x).len();
                let keep: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < keep_prob).collect();
                tape.dropout(x, Arc::new(keep), T::from_f64(keep_prob))
            }
        }
    }

    fn mha(
        &self,
        tape: &mut Tape<T>,
        prefix: &str,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        mask: Option<&Arc<CTensor<T>>>,
    ) -> Result<NodeId> {
        let wq = self.p(tape, &format!("{prefix}.wq"));
        let wk = self.p(tape, &format!("{prefix}.wk"));
        let wv = self.p(tape, &format!("{prefix}.wv"));
        let wo = self.p(tape, &format!("{prefix}.wo"));
        multi_head_attention(
            tape,
            self.cfg.variant,
            self.cfg.kernel,
            self.cfg.n_heads,
            q,
            k,
            v,
            wq,
            wk,
            wv,
            wo,
            mask,
        )
    }

    /// Encoder stack over one token sequence of complex spectra.
    pub fn encode(&self, tape: &mut Tape<T>, tokens: &CTensor<T>, mode: &mut Mode) -> Result<NodeId> {
        if tokens.rows() != self.cfg.seq_in || tokens.cols() != self.cfg.in_channels {
            return Err(CvError::ShapeMismatch {
                context: "encoder input",
                expected: format!("[{}, {}]", self.cfg.seq_in, self.cfg.in_channels),
                got: format!("{:?}", tokens.shape()),
            });
        }
        let embedded = if self.cfg.is_real() {
            interleave_complex(tokens)
        } else {
            tokens.clone()
        };
        let mut x = tape.leaf(embedded);
        if self.cfg.conv_embedding {
            let d = self.cfg.width();
            let chans = [self.cfg.input_width(), d / 4, d / 2, d, d];
            for s in 0..4 {
                let w = self.p(tape, &format!("embed.conv{s}.w"));
                let b = self.p(tape, &format!("embed.conv{s}.b"));
                let geom = ConvGeom {
                    kernel: 3,
                    ch_in: chans[s],
                    ch_out: chans[s + 1],
                    stride: 1,
                    padding: 1,
                };
                x = tape.conv1d(x, w, geom)?;
                x = tape.add_row_broadcast(x, b)?;
                x = tape.crelu(x);
            }
        }
        x = self.linear(tape, x, "embed.proj")?;
        x = tape.add_const(x, Arc::clone(&self.pe_enc))?;
        for l in 0..self.cfg.n_layers {
            let a = self.mha(tape, &format!("enc{l}.attn"), x, x, x, None)?;
            let r = tape.add(x, a)?;
            x = self.layer_norm(tape, r, &format!("enc{l}.ln1"))?;
            let f = self.ff_block(tape, x, &format!("enc{l}.ff"), mode)?;
            let r = tape.add(x, f)?;
            x = self.layer_norm(tape, r, &format!("enc{l}.ln2"))?;
        }
        Ok(x)
    }

    fn ff_block(
        &self,
        tape: &mut Tape<T>,
        x: NodeId,
        prefix: &str,
        mode: &mut Mode,
    ) -> Result<NodeId> {
        let w1 = self.p(tape, &format!("{prefix}.w1"));
        let b1 = self.p(tape, &format!("{prefix}.b1"));
        let w2 = self.p(tape, &format!("{prefix}.w2"));
        let b2 = self.p(tape, &format!("{prefix}.b2"));
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row_broadcast(h, b1)?;
        let h = tape.crelu(h);
        let h = self.maybe_dropout(tape, h, mode)?;
        let h = tape.matmul(h, w2)?;
        tape.add_row_broadcast(h, b2)
    }

    /// Decoder stack over already shifted label rows (row 0 is the zero start
    /// symbol). Accepts any prefix of the output window, which is how
    /// autoregressive generation calls it.
    pub fn decode(
        &self,
        tape: &mut Tape<T>,
        memory: NodeId,
        labels_in: &CTensor<T>,
        mode: &mut Mode,
    ) -> Result<NodeId> {
        if self.cfg.seq_out == 0 {
            return Err(CvError::InvalidArgument(
                "model was built without a decoder (seq_out = 0)".into(),
            ));
        }
        let rows = labels_in.rows();
        if rows == 0 || rows > self.cfg.seq_out || labels_in.cols() != self.cfg.n_classes {
            return Err(CvError::ShapeMismatch {
                context: "decoder input",
                expected: format!("[1..={}, {}]", self.cfg.seq_out, self.cfg.n_classes),
                got: format!("{:?}", labels_in.shape()),
            });
        }
        let mask = Arc::new(causal_mask::<T>(rows));
        let lab = tape.leaf(labels_in.clone());
        let mut y = self.linear(tape, lab, "dec.embed")?;
        let pe = if rows == self.pe_dec.rows() {
            Arc::clone(&self.pe_dec)
        } else {
            let d = self.cfg.width();
            let mut head = CTensor::zeros(&[rows, d]);
            head.re_mut().copy_from_slice(&self.pe_dec.re()[..rows * d]);
            head.im_mut().copy_from_slice(&self.pe_dec.im()[..rows * d]);
            Arc::new(head)
        };
        y = tape.add_const(y, pe)?;
        for l in 0..self.cfg.n_layers {
            let a = self.mha(tape, &format!("dec{l}.self"), y, y, y, Some(&mask))?;
            let r = tape.add(y, a)?;
            y = self.layer_norm(tape, r, &format!("dec{l}.ln1"))?;
            let c = self.mha(tape, &format!("dec{l}.cross"), y, memory, memory, None)?;
            let r = tape.add(y, c)?;
            y = self.layer_norm(tape, r, &format!("dec{l}.ln2"))?;
            let f = self.ff_block(tape, y, &format!("dec{l}.ff"), mode)?;
            let r = tape.add(y, f)?;
            y = self.layer_norm(tape, r, &format!("dec{l}.ln3"))?;
        }
        Ok(y)
    }

    /// Real class logits from complex features: concat(re, im) then linear.
    pub fn head(&self, tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
        let feats = if self.cfg.is_real() {
            x
        } else {
            let r = tape.real_part(x);
            let i = tape.imag_part(x);
            tape.concat_cols(&[r, i])?
        };
        self.linear(tape, feats, "head")
    }

    /// Sequence-level logits for multi-label classification: encoder output
    /// pooled over tokens, then the shared head. Shape [1, n_classes].
    pub fn classify_logits(
        &self,
        tape: &mut Tape<T>,
        tokens: &CTensor<T>,
        mode: &mut Mode,
    ) -> Result<NodeId> {
        let enc = self.encode(tape, tokens, mode)?;
        let pooled = tape.mean_rows(enc);
        self.head(tape, pooled)
    }

    /// Teacher-forced per-token logits for the sequence task. `targets` are
    /// the ground-truth label rows; they are shifted right internally.
    pub fn sequence_logits(
        &self,
        tape: &mut Tape<T>,
        tokens: &CTensor<T>,
        targets: &CTensor<T>,
        mode: &mut Mode,
    ) -> Result<NodeId> {
        if targets.rows() != self.cfg.seq_out {
            return Err(CvError::ShapeMismatch {
                context: "sequence targets",
                expected: format!("[{}, {}]", self.cfg.seq_out, self.cfg.n_classes),
                got: format!("{:?}", targets.shape()),
            });
        }
        let mem = self.encode(tape, tokens, mode)?;
        let dec_in = shift_right_labels(targets);
        let dec = self.decode(tape, mem, &dec_in, mode)?;
        self.head(tape, dec)
    }

    /// Autoregressive generation: each step feeds back the thresholded hard
    /// labels (probability 0.5, i.e. logit 0) of the steps before it.
    /// Returns (logits, hard labels), both [seq_out, n_classes] real.
    pub fn generate(&self, tokens: &CTensor<T>) -> Result<(CTensor<T>, CTensor<T>)> {
        let mut enc_tape = Tape::new();
        let mem = self.encode(&mut enc_tape, tokens, &mut Mode::Eval)?;
        let memval = enc_tape.value(mem).clone();
        let c = self.cfg.n_classes;
        let steps = self.cfg.seq_out;
        let mut logits = CTensor::<T>::zeros(&[steps, c]);
        let mut hard = CTensor::<T>::zeros(&[steps, c]);
        for j in 0..steps {
            let mut tape = Tape::new();
            let m = tape.leaf(memval.clone());
            let mut dec_in = CTensor::<T>::zeros(&[j + 1, c]);
            for r in 1..=j {
                for cc in 0..c {
                    dec_in.re_mut()[r * c + cc] = hard.re()[(r - 1) * c + cc];
                }
            }
            let y = self.decode(&mut tape, m, &dec_in, &mut Mode::Eval)?;
            let lg = self.head(&mut tape, y)?;
            let v = tape.value(lg);
            for cc in 0..c {
                let l = v.at2(j, cc).0;
                logits.re_mut()[j * c + cc] = l;
                hard.re_mut()[j * c + cc] = if l >= T::zero() { T::one() } else { T::zero() };
            }
        }
        Ok((logits, hard))
    }

    /// Trainable real scalars per top-level module, in network order.
    pub fn param_counts(&self) -> Vec<(String, usize)> {
        let group = |name: &str| -> &'static str {
            if name.starts_with("embed") {
                "embedding"
            } else if name.starts_with("enc") {
                "encoder"
            } else if name.starts_with("dec") {
                "decoder"
            } else {
                "head"
            }
        };
        let mut rows: Vec<(String, usize)> = Vec::new();
        for (_, p) in self.store.iter() {
            let g = group(&p.name);
            let n = p.value.len() * if p.is_real { 1 } else { 2 };
            match rows.iter_mut().find(|(name, _)| name == g) {
                Some((_, total)) => *total += n,
                None => rows.push((g.to_string(), n)),
            }
        }
        rows
    }

    pub fn n_scalars(&self) -> usize {
        self.store.n_scalars()
    }

    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        save_checkpoint(&self.store, manifest_path)
    }

    pub fn load(&mut self, manifest_path: &Path) -> Result<()> {
        load_checkpoint(&mut self.store, manifest_path)
    }
}

fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

/// Write the parameter store as a text manifest plus one raw little-endian
/// blob next to it. Layout per parameter: the `re` array, then (for complex
/// parameters) the `im` array.
pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, manifest_path: &Path) -> Result<()> {
    let blob = blob_path(manifest_path);
    let blob_name = blob
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| CvError::Io(format!("bad checkpoint path {}", manifest_path.display())))?;
    let mut manifest = String::new();
    manifest.push_str("format cvattn-checkpoint 1\n");
    manifest.push_str(&format!("dtype {}\n", T::DTYPE));
    manifest.push_str(&format!("blob {blob_name}\n"));
    let mut bytes: Vec<u8> = Vec::new();
    for (_, p) in store.iter() {
        let offset = bytes.len();
        for &v in p.value.re() {
            v.write_le(&mut bytes);
        }
        if !p.is_real {
            for &v in p.value.im() {
                v.write_le(&mut bytes);
            }
        }
        let shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!(
            "param {} {} {} {} {offset}\n",
            p.name,
            T::DTYPE,
            if p.is_real { "real" } else { "complex" },
            shape.join("x"),
        ));
    }
    std::fs::write(manifest_path, manifest)?;
    std::fs::write(&blob, bytes)?;
    Ok(())
}

/// Restore parameter values saved by [`save_checkpoint`]. The store must
/// already contain the same parameters (name, shape, kind) in the same order.
pub fn load_checkpoint<T: Scalar>(store: &mut ParamStore<T>, manifest_path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(manifest_path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("format cvattn-checkpoint 1") => {}
        other => {
            return Err(CvError::DataFormat(format!(
                "unrecognized checkpoint header {other:?}"
            )))
        }
    }
    let mut blob_name = None;
    let mut entries = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["dtype", d] => {
                if *d != T::DTYPE.as_str() {
                    return Err(CvError::Config {
                        key: "precision".into(),
                        message: format!("checkpoint is {d}, model is {}", T::DTYPE),
                    });
                }
            }
            ["blob", name] => blob_name = Some(name.to_string()),
            ["param", name, dtype, kind, shape, offset] => {
                entries.push((
                    name.to_string(),
                    dtype.to_string(),
                    kind.to_string(),
                    shape.to_string(),
                    offset.parse::<usize>().map_err(|_| {
                        CvError::DataFormat(format!("bad offset in checkpoint line: {line}"))
                    })?,
                ));
            }
            [] => {}
            _ => return Err(CvError::DataFormat(format!("bad checkpoint line: {line}"))),
        }
    }
    let blob_name =
        blob_name.ok_or_else(|| CvError::DataFormat("checkpoint manifest lists no blob".into()))?;
    let blob_file = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(blob_name);
    let bytes = std::fs::read(blob_file)?;
    if entries.len() != store.len() {
        return Err(CvError::ShapeMismatch {
            context: "checkpoint parameter list",
            expected: format!("{} parameters", store.len()),
            got: format!("{}", entries.len()),
        });
    }
    let width = T::DTYPE.byte_width();
    for ((_, p), (name, _dtype, kind, shape, offset)) in store.iter_mut().zip(entries) {
        let want_kind = if p.is_real { "real" } else { "complex" };
        let want_shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        if name != p.name || kind != want_kind || shape != want_shape.join("x") {
            return Err(CvError::ShapeMismatch {
                context: "checkpoint parameter",
                expected: format!("{} {} {}", p.name, want_kind, want_shape.join("x")),
                got: format!("{name} {kind} {shape}"),
            });
        }
        let n = p.value.len();
        let arrays = if p.is_real { 1 } else { 2 };
        let end = offset + arrays * n * width;
        if end > bytes.len() {
            return Err(CvError::DataFormat(format!(
                "checkpoint blob too short for parameter {name}"
            )));
        }
        for i in 0..n {
            let at = offset + i * width;
            p.value.re_mut()[i] = T::read_le(&bytes[at..at + width]);
        }
        if !p.is_real {
            for i in 0..n {
                let at = offset + (n + i) * width;
                p.value.im_mut()[i] = T::read_le(&bytes[at..at + width]);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, CheckMode};


    fn tiny_cfg(variant: Variant, kernel: Kernel) -> ModelConfig {
        ModelConfig {
            variant,
            kernel,
            d_model: 4,
            n_heads: 2,
            n_layers: 1,
            d_ff: 6,
            dropout_p: 0.0,
            in_channels: 3,
            n_classes: 4,
            seq_in: 3,
            seq_out: 2,
            conv_embedding: false,
            per_feature_ln: false,
            pe_to_imag: false,
            ln_eps: 1e-5,
        }
    }

    fn random_tokens(cfg: &ModelConfig, seed: u64) -> CTensor<f64> {
        let mut rng = rngs::stream(seed, "tokens");
        let n = cfg.seq_in * cfg.in_channels;
        let re = (0..n).map(|_| rngs::randn(&mut rng)).collect();
        let im = (0..n).map(|_| rngs::randn(&mut rng)).collect();
        CTensor::new(&[cfg.seq_in, cfg.in_channels], re, im).unwrap()
    }

    fn random_labels(cfg: &ModelConfig, seed: u64) -> CTensor<f64> {
        let mut rng = rngs::stream(seed, "labels");
        let n = cfg.seq_out * cfg.n_classes;
        let re = (0..n)
            .map(|_| if rng.gen::<f64>() < 0.4 { 1.0 } else { 0.0 })
            .collect();
        CTensor::from_re(&[cfg.seq_out, cfg.n_classes], re).unwrap()
    }

    #[test]
    fn positional_encoding_matches_the_formula() {
        let pe = positional_encoding::<f64>(8, 6, false);
        // position zero alternates 0, 1
        for i in 0..3 {
            assert_eq!(pe.at2(0, 2 * i), (0.0, 0.0));
            assert_eq!(pe.at2(0, 2 * i + 1), (1.0, 0.0));
        }
        for pos in 0..8 {
            for i in 0..3 {
                let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / 6.0);
                assert!((pe.at2(pos, 2 * i).0 - angle.sin()).abs() < 1e-15);
                assert!((pe.at2(pos, 2 * i + 1).0 - angle.cos()).abs() < 1e-15);
                assert_eq!(pe.at2(pos, 2 * i).1, 0.0);
            }
        }
        let both = positional_encoding::<f64>(4, 6, true);
        assert_eq!(both.at2(2, 1).0, both.at2(2, 1).1);
    }

    #[test]
    fn interleave_pairs_real_and_imaginary_columns() {
        let x = CTensor::<f64>::from_pairs(&[1, 2], &[(1.0, 2.0), (3.0, 4.0)]).unwrap();
        let y = interleave_complex(&x);
        assert_eq!(y.shape(), &[1, 4]);
        assert_eq!(y.re(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(y.max_abs_im() == 0.0);
    }

    #[test]
    fn shift_right_prepends_the_zero_start_row() {
        let t = CTensor::<f64>::from_re(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = shift_right_labels(&t);
        assert_eq!(s.re(), &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn complex_init_second_moment_tracks_fan_in() {
        let mut rng = rngs::stream(11, "init moment test");
        for fan_in in [16usize, 100] {
            let w: CTensor<f64> = complex_init(&mut rng, &[100_000], fan_in);
            let m2: f64 = w
                .re()
                .iter()
                .zip(w.im())
                .map(|(&r, &i)| r * r + i * i)
                .sum::<f64>()
                / 100_000.0;
            let want = 1.0 / fan_in as f64;
            assert!((m2 - want).abs() / want < 0.05, "E|w|^2 {m2} vs {want}");
            let mean_r: f64 = w.re().iter().sum::<f64>() / 100_000.0;
            assert!(mean_r.abs() < 0.01 / (fan_in as f64).sqrt());
        }
    }

    #[test]
    fn real_init_second_moment_matches_complex() {
        let mut rng = rngs::stream(13, "real init moment test");
        let w: CTensor<f64> = real_init(&mut rng, &[100_000], 25);
        let m2: f64 = w.re().iter().map(|&r| r * r).sum::<f64>() / 100_000.0;
        assert!((m2 - 0.04).abs() / 0.04 < 0.05, "E w^2 {m2}");
        assert!(w.max_abs_im() == 0.0);
    }

    #[test]
    fn dropout_keep_rate_and_identities() {
        // masked-out elements drop both components; kept ones rescale
        let cfg = ModelConfig {
            dropout_p: 0.4,
            ..tiny_cfg(Variant::CAtt, Kernel::DotProduct)
        };
        let model = Model::<f64>::init(cfg, 5).unwrap();
        let mut tape = Tape::new();
        let n = 1_000_000usize;
        let x = tape.leaf(CTensor::from_re(&[1, n], vec![1.0; n]).unwrap());
        let mut rng = rngs::stream(17, "dropout mc");
        let y = model
            .maybe_dropout(&mut tape, x, &mut Mode::Train(&mut rng))
            .unwrap();
        let v = tape.value(y);
        let kept = v.re().iter().filter(|&&r| r != 0.0).count();
        let rate = kept as f64 / n as f64;
        assert!((rate - 0.6).abs() < 0.003, "keep rate {rate}");
        for &r in v.re() {
            assert!(r == 0.0 || (r - 1.0 / 0.6).abs() < 1e-12);
        }
        // eval mode and p = 0 leave the node untouched
        let e = model.maybe_dropout(&mut tape, x, &mut Mode::Eval).unwrap();
        assert_eq!(e, x);
        let p0 = Model::<f64>::init(tiny_cfg(Variant::CAtt, Kernel::DotProduct), 5).unwrap();
        let z = p0
            .maybe_dropout(&mut tape, x, &mut Mode::Train(&mut rng))
            .unwrap();
        assert_eq!(z, x);
    }

    #[test]
    fn forward_shapes_and_determinism() {
        for (variant, kernel) in [
            (Variant::CAtt, Kernel::DotProduct),
            (Variant::Yang, Kernel::PlainProduct),
            (Variant::Real, Kernel::DotProduct),
        ] {
            let cfg = tiny_cfg(variant, kernel);
            let model = Model::<f64>::init(cfg.clone(), 7).unwrap();
            let tokens = random_tokens(&cfg, 1);
            let targets = random_labels(&cfg, 2);

            let mut t1 = Tape::new();
            let c1 = model.classify_logits(&mut t1, &tokens, &mut Mode::Eval).unwrap();
            assert_eq!(t1.value(c1).shape(), &[1, cfg.n_classes]);
            assert!(t1.value(c1).max_abs_im() == 0.0, "logits must be real");

            let mut t2 = Tape::new();
            let c2 = model.classify_logits(&mut t2, &tokens, &mut Mode::Eval).unwrap();
            assert_eq!(t1.value(c1).max_abs_diff(t2.value(c2)), 0.0);

            let mut t3 = Tape::new();
            let s = model
                .sequence_logits(&mut t3, &tokens, &targets, &mut Mode::Eval)
                .unwrap();
            assert_eq!(t3.value(s).shape(), &[cfg.seq_out, cfg.n_classes]);
            t3.value(s).validate_finite("sequence logits").unwrap();
        }
    }

    #[test]
    fn same_seed_same_dropout_masks() {
        let cfg = ModelConfig {
            dropout_p: 0.3,
            ..tiny_cfg(Variant::CAtt, Kernel::DotProduct)
        };
        let model = Model::<f64>::init(cfg.clone(), 9).unwrap();
        let tokens = random_tokens(&cfg, 3);
        let run = |seed: u64| {
            let mut rng = rngs::stream(seed, "drop");
            let mut tape = Tape::new();
            let out = model
                .classify_logits(&mut tape, &tokens, &mut Mode::Train(&mut rng))
                .unwrap();
            tape.value(out).clone()
        };
        assert_eq!(run(4).max_abs_diff(&run(4)), 0.0);
        assert!(run(4).max_abs_diff(&run(5)) > 0.0);
    }

    #[test]
    fn decoder_rows_ignore_later_label_rows() {
        let cfg = ModelConfig {
            seq_out: 3,
            ..tiny_cfg(Variant::CAtt, Kernel::DotProduct)
        };
        let model = Model::<f64>::init(cfg.clone(), 21).unwrap();
        let tokens = random_tokens(&cfg, 4);
        let dec_a = shift_right_labels(&random_labels(&cfg, 5));
        let mut dec_b = dec_a.clone();
        // flip every class in the final decoder input row only
        for cc in 0..cfg.n_classes {
            let at = (cfg.seq_out - 1) * cfg.n_classes + cc;
            dec_b.re_mut()[at] = 1.0 - dec_b.re()[at];
        }
        let run = |dec_in: &CTensor<f64>| {
            let mut tape = Tape::new();
            let mem = model.encode(&mut tape, &tokens, &mut Mode::Eval).unwrap();
            let y = model.decode(&mut tape, mem, dec_in, &mut Mode::Eval).unwrap();
            let lg = model.head(&mut tape, y).unwrap();
            tape.value(lg).clone()
        };
        let la = run(&dec_a);
        let lb = run(&dec_b);
        for i in 0..cfg.seq_out - 1 {
            for cc in 0..cfg.n_classes {
                assert_eq!(la.at2(i, cc), lb.at2(i, cc), "row {i} saw the future");
            }
        }
        assert!(la.max_abs_diff(&lb) > 0.0, "perturbation should reach the last row");
    }

    #[test]
    fn one_step_generation_equals_teacher_forced_first_step() {
        for (variant, kernel) in [
            (Variant::APAtt, Kernel::DotProduct),
            (Variant::Real, Kernel::DotProduct),
        ] {
            let cfg = tiny_cfg(variant, kernel);
            let model = Model::<f64>::init(cfg.clone(), 23).unwrap();
            let tokens = random_tokens(&cfg, 6);
            let targets = random_labels(&cfg, 7);
            let (gen_logits, _) = model.generate(&tokens).unwrap();
            let mut tape = Tape::new();
            let tf = model
                .sequence_logits(&mut tape, &tokens, &targets, &mut Mode::Eval)
                .unwrap();
            let tfv = tape.value(tf);
            for cc in 0..cfg.n_classes {
                assert_eq!(
                    gen_logits.at2(0, cc).0,
                    tfv.at2(0, cc).0,
                    "{variant} step 0 differs"
                );
            }
        }
    }

    #[test]
    fn generated_hard_labels_threshold_the_logits() {
        let cfg = tiny_cfg(Variant::CAtt, Kernel::DotProduct);
        let model = Model::<f64>::init(cfg.clone(), 29).unwrap();
        let (logits, hard) = model.generate(&random_tokens(&cfg, 8)).unwrap();
        for i in 0..logits.len() {
            let want = if logits.re()[i] >= 0.0 { 1.0 } else { 0.0 };
            assert_eq!(hard.re()[i], want);
        }
    }

    #[test]
    fn param_count_ordering_real_complex_yang() {
        let base = tiny_cfg(Variant::CAtt, Kernel::DotProduct);
        let complex = Model::<f64>::init(base.clone(), 1).unwrap().n_scalars();
        let yang = Model::<f64>::init(
            ModelConfig {
                variant: Variant::Yang,
                kernel: Kernel::PlainProduct,
                ..base.clone()
            },
            1,
        )
        .unwrap()
        .n_scalars();
        let real = Model::<f64>::init(
            ModelConfig {
                variant: Variant::Real,
                ..base.clone()
            },
            1,
        )
        .unwrap()
        .n_scalars();
        assert!(real > complex, "real {real} <= complex {complex}");
        assert!(complex >= yang, "complex {complex} < yang {yang}");
    }

    #[test]
    fn dropping_the_conv_stack_strictly_shrinks_the_model() {
        let with = ModelConfig {
            conv_embedding: true,
            ..tiny_cfg(Variant::CAtt, Kernel::DotProduct)
        };
        let without = ModelConfig {
            conv_embedding: false,
            ..with.clone()
        };
        let a = Model::<f64>::init(with, 1).unwrap().n_scalars();
        let b = Model::<f64>::init(without, 1).unwrap().n_scalars();
        assert!(b < a, "{b} !< {a}");
    }

    #[test]
    fn param_counts_cover_every_module() {
        let cfg = tiny_cfg(Variant::CAtt, Kernel::DotProduct);
        let model = Model::<f64>::init(cfg, 1).unwrap();
        let counts = model.param_counts();
        let names: Vec<&str> = counts.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["embedding", "encoder", "decoder", "head"]);
        let total: usize = counts.iter().map(|(_, n)| n).sum();
        assert_eq!(total, model.n_scalars());
        // the worked example: one complex 2x2 linear with bias
        let mut store = ParamStore::<f64>::new();
        store.add("w", CTensor::zeros(&[2, 2]), false);
        store.add("b", CTensor::zeros(&[1, 2]), false);
        assert_eq!(store.n_scalars(), 12);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = tiny_cfg(Variant::CAtt, Kernel::DotProduct);
        let bad = [
            ModelConfig { n_heads: 3, ..base.clone() },
            ModelConfig { dropout_p: 1.0, ..base.clone() },
            ModelConfig { dropout_p: -0.1, ..base.clone() },
            ModelConfig { d_model: 6, conv_embedding: true, ..base.clone() },
            ModelConfig { variant: Variant::Yang, kernel: Kernel::DotProduct, ..base.clone() },
            ModelConfig { d_model: 0, ..base.clone() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
        assert!(base.validate().is_ok());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = std::env::temp_dir().join(format!("cvattn-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let cfg = tiny_cfg(Variant::CAtt, Kernel::DotProduct);
        let a = Model::<f32>::init(cfg.clone(), 31).unwrap();
        let pa = dir.join("a.ckpt");
        a.save(&pa).unwrap();

        // a different seed gives different weights; loading must restore A's
        let mut b = Model::<f32>::init(cfg.clone(), 32).unwrap();
        assert!(b.store.get(crate::autodiff::ParamId(0)).value.max_abs_diff(
            &a.store.get(crate::autodiff::ParamId(0)).value
        ) > 0.0);
        b.load(&pa).unwrap();
        for ((_, pa_), (_, pb_)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(pa_.name, pb_.name);
            for i in 0..pa_.value.len() {
                assert_eq!(pa_.value.re()[i].to_bits(), pb_.value.re()[i].to_bits());
                assert_eq!(pa_.value.im()[i].to_bits(), pb_.value.im()[i].to_bits());
            }
        }

        // saving the restored copy reproduces both files byte for byte
        let pb = dir.join("b.ckpt");
        b.save(&pb).unwrap();
        let ma = std::fs::read(&pa).unwrap();
        let mb = std::fs::read(&pb).unwrap();
        // manifests differ only in the blob file name they reference
        let sa = String::from_utf8(ma).unwrap().replace("a.bin", "X.bin");
        let sb = String::from_utf8(mb).unwrap().replace("b.bin", "X.bin");
        assert_eq!(sa, sb);
        assert_eq!(
            std::fs::read(dir.join("a.bin")).unwrap(),
            std::fs::read(dir.join("b.bin")).unwrap()
        );

        // a mismatched dtype is a configuration error
        let mut c = Model::<f64>::init(cfg, 33).unwrap();
        assert!(c.load(&pa).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        // classification and teacher-forced sequence losses, several model
        // families, sampled coordinates across every parameter tensor
        let combos = [
            (Variant::CAtt, Kernel::DotProduct, true),
            (Variant::RIAtt, Kernel::PlainProduct, false),
            (Variant::Yang, Kernel::PlainProduct, false),
            (Variant::Real, Kernel::DotProduct, false),
        ];
        for (variant, kernel, conv) in combos {
            let cfg = ModelConfig {
                conv_embedding: conv,
                ..tiny_cfg(variant, kernel)
            };
            let model = Model::<f64>::init(cfg.clone(), 41).unwrap();
            let tokens = random_tokens(&cfg, 9);
            let targets_cls =
                Arc::new(CTensor::<f64>::from_re(&[1, cfg.n_classes], vec![1.0, 0.0, 1.0, 0.0]).unwrap());
            let targets_seq = Arc::new(random_labels(&cfg, 10));

            // check at a generic point: zero-initialized biases put CReLU
            // pre-activations exactly on the kink, where central differences
            // and any subgradient choice legitimately disagree
            let mut probe_store = model.store.clone();
            let mut jrng = rngs::stream(77, "grad jitter");
            for (_, p) in probe_store.iter_mut() {
                for i in 0..p.value.len() {
                    p.value.re_mut()[i] += 0.05 * rngs::randn(&mut jrng);
                    if !p.is_real {
                        p.value.im_mut()[i] += 0.05 * rngs::randn(&mut jrng);
                    }
                }
            }
            let report = grad_check(
                &mut probe_store,
                |store| {
                    let probe = Model {
                        cfg: cfg.clone(),
                        store: store.clone(),
                        ids: model.ids.clone(),
                        pe_enc: Arc::clone(&model.pe_enc),
                        pe_dec: Arc::clone(&model.pe_dec),
                    };
                    let mut tape = Tape::new();
                    let cls = probe.classify_logits(&mut tape, &tokens, &mut Mode::Eval)?;
                    let l1 = tape.bce_with_logits(cls, Arc::clone(&targets_cls))?;
                    let seq = probe.sequence_logits(&mut tape, &tokens, &targets_seq, &mut Mode::Eval)?;
                    let l2 = tape.bce_with_logits(seq, Arc::clone(&targets_seq))?;
                    let loss = tape.add(l1, l2)?;
                    Ok((tape, loss))
                },
                CheckMode::Sampled {
                    per_tensor: 2,
                    seed: 51,
                },
                1e-5,
                1e-3,
            )
            .unwrap();
            assert!(
                report.max_rel_err < 1e-4,
                "{variant}/{kernel} conv={conv}: {:?}",
                report
            );
        }
    }
}
