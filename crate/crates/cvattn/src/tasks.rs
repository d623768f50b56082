//! Synthetic polyphonic-tone tasks and the FFT front end that frames them.
//!
//! A sample is a bank of complex exponentials ("notes"), one frequency bin
//! per class, with random amplitudes and phases plus complex Gaussian noise.
//! The time signal is cut into frames of `frame_len` steps, each frame is
//! transformed with an FFT and scaled by 1/N, and the resulting spectra are
//! the model's input tokens.
//!
//! * classification: a fixed subset of at most `max_active` notes plays for
//!   the whole sample; the target is the multi-hot set of active classes.
//! * sequence: each note switches on/off at token boundaries under a
//!   persistence prior; the encoder sees the first `seq_in` token spectra and
//!   the decoder predicts the note states of the remaining `seq_out` tokens.
//!
//! Every sample draws from its own named random stream, so splits are
//! disjoint by construction and any sample can be regenerated independently.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::ctensor::CTensor;
use crate::error::{CvError, Result};
use crate::rngs;
use crate::scalar::Scalar;

/// In-place radix-2 decimation-in-time FFT over split re/im slices.
/// Forward uses exp(-2*pi*i*k*n/N); the inverse flips the sign and divides
/// by N, so inverse(forward(x)) == x.
pub fn fft_in_place<T: Scalar>(re: &mut [T], im: &mut [T], inverse: bool) -> Result<()> {
    let n = re.len();
    if im.len() != n {
        return Err(CvError::ShapeMismatch {
            context: "fft components",
            expected: format!("{n}"),
            got: format!("{}", im.len()),
        });
    }
    if n == 0 || !n.is_power_of_two() {
        return Err(CvError::InvalidArgument(format!(
            "fft length {n} is not a power of two"
        )));
    }
    if n == 1 {
        return Ok(());
    }
    // bit-reversal permutation
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = (i.reverse_bits() >> (usize::BITS - bits)) & (n - 1);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
        let (wr, wi) = (T::from_f64(ang.cos()), T::from_f64(ang.sin()));
        for start in (0..n).step_by(len) {
            let mut cr = T::one();
            let mut ci = T::zero();
            for k in 0..len / 2 {
                let a = start + k;
                let b = a + len / 2;
                let tr = re[b] * cr - im[b] * ci;
                let ti = re[b] * ci + im[b] * cr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
        }
        len <<= 1;
    }
    if inverse {
        let inv = T::one() / T::from_f64(n as f64);
        for i in 0..n {
            re[i] *= inv;
            im[i] *= inv;
        }
    }
    Ok(())
}

/// FFT applied independently to each row of a (rows x n) tensor.
pub fn fft_rows<T: Scalar>(x: &CTensor<T>, inverse: bool) -> Result<CTensor<T>> {
    let mut out = x.clone();
    let (rows, n) = (out.rows(), out.cols());
    let (re, im) = out.components_mut();
    for i in 0..rows {
        fft_in_place(&mut re[i * n..(i + 1) * n], &mut im[i * n..(i + 1) * n], inverse)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Classification,
    Sequence,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Sequence => "sequence",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(TaskKind::Classification),
            "sequence" => Ok(TaskKind::Sequence),
            other => Err(CvError::Config {
                key: "task".into(),
                message: format!("unknown task {other:?}"),
            }),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Complete recipe for one synthetic dataset. Two specs with equal fields
/// produce byte-identical data.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub task: TaskKind,
    pub n_samples: usize,
    /// Tokens per sample; for the sequence task, seq_in + seq_out.
    pub seq_len: usize,
    /// Time steps per token (power of two; one FFT frame).
    pub frame_len: usize,
    pub n_classes: usize,
    /// Classification: largest simultaneous note subset.
    pub max_active: usize,
    /// Per-component standard deviation of the additive noise.
    pub noise_sigma: f64,
    /// Sequence: stationary probability that a note is on.
    pub activation: f64,
    /// Sequence: probability a note keeps its state across a boundary.
    pub persistence: f64,
    pub seq_in: usize,
    pub seq_out: usize,
    pub seed: u64,
    /// Train/val/test fractions, summing to 1.
    pub split: [f64; 3],
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frame_len < 2 || !self.frame_len.is_power_of_two() {
            return Err(CvError::Config {
                key: "frame_len".into(),
                message: format!("{} is not a power of two >= 2", self.frame_len),
            });
        }
        if self.n_classes == 0 || self.n_classes >= self.frame_len {
            return Err(CvError::Config {
                key: "n_classes".into(),
                message: format!(
                    "{} classes do not fit in bins 1..{}",
                    self.n_classes, self.frame_len
                ),
            });
        }
        if self.n_samples == 0 || self.seq_len == 0 {
            return Err(CvError::Config {
                key: "n_samples".into(),
                message: "need at least one sample and one token".into(),
            });
        }
        let split_sum: f64 = self.split.iter().sum();
        if self.split.iter().any(|&f| f < 0.0) || (split_sum - 1.0).abs() > 1e-9 {
            return Err(CvError::Config {
                key: "split".into(),
                message: format!("fractions {:?} must be nonnegative and sum to 1", self.split),
            });
        }
        match self.task {
            TaskKind::Classification => {
                if self.max_active == 0 || self.max_active > self.n_classes {
                    return Err(CvError::Config {
                        key: "max_active".into(),
                        message: format!(
                            "{} outside 1..={}",
                            self.max_active, self.n_classes
                        ),
                    });
                }
                if self.seq_in != self.seq_len || self.seq_out != 0 {
                    return Err(CvError::Config {
                        key: "seq_in".into(),
                        message: "classification consumes the whole sequence (seq_in = seq_len, seq_out = 0)"
                            .into(),
                    });
                }
            }
            TaskKind::Sequence => {
                if self.seq_in == 0 || self.seq_out == 0 || self.seq_in + self.seq_out != self.seq_len {
                    return Err(CvError::Config {
                        key: "seq_in".into(),
                        message: format!(
                            "seq_in {} + seq_out {} must equal seq_len {}",
                            self.seq_in, self.seq_out, self.seq_len
                        ),
                    });
                }
                for (k, v) in [("activation", self.activation), ("persistence", self.persistence)] {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(CvError::Config {
                            key: k.into(),
                            message: format!("{v} outside [0, 1]"),
                        });
                    }
                }
                if self.activation == 0.0 {
                    return Err(CvError::Config {
                        key: "activation".into(),
                        message: "an always-silent sequence task has no positives".into(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Split sizes: train and val round down, test takes the remainder.
    pub fn split_sizes(&self) -> [usize; 3] {
        let n = self.n_samples;
        let tr = (n as f64 * self.split[0]).floor() as usize;
        let va = (n as f64 * self.split[1]).floor() as usize;
        [tr, va, n - tr - va]
    }
}

/// One example: encoder token spectra and the real multi-hot target rows
/// ([1, n_classes] for classification, [seq_out, n_classes] for sequences).
#[derive(Debug, Clone)]
pub struct Sample<T: Scalar> {
    pub tokens: CTensor<T>,
    pub labels: CTensor<T>,
}

#[derive(Debug, Clone)]
pub struct Splits<T: Scalar> {
    pub train: Vec<Sample<T>>,
    pub val: Vec<Sample<T>>,
    pub test: Vec<Sample<T>>,
}

impl<T: Scalar> Splits<T> {
    pub fn split(&self, name: &str) -> Result<&[Sample<T>]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(CvError::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// Generate all three splits of a dataset in canonical f64.
pub fn generate(spec: &SyntheticSpec) -> Result<Splits<f64>> {
    spec.validate()?;
    let sizes = spec.split_sizes();
    let mut out: [Vec<Sample<f64>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (s, name) in SPLIT_NAMES.iter().enumerate() {
        out[s].reserve(sizes[s]);
        for i in 0..sizes[s] {
            out[s].push(generate_sample(spec, name, i)?);
        }
    }
    let [train, val, test] = out;
    Ok(Splits { train, val, test })
}

/// Deterministically synthesize sample `index` of a split.
pub fn generate_sample(spec: &SyntheticSpec, split: &str, index: usize) -> Result<Sample<f64>> {
    let mut rng = rngs::stream(spec.seed, &format!("data/{split}/{index}"));
    let n = spec.frame_len;
    let c = spec.n_classes;

    // per-class note parameters for this sample
    let amps: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..1.25)).collect();
    let phases: Vec<f64> = (0..c)
        .map(|_| rng.gen_range(0.0..2.0 * std::f64::consts::PI))
        .collect();

    // which notes sound in each token
    let states: Vec<Vec<bool>> = match spec.task {
        TaskKind::Classification => {
            let count = rng.gen_range(1..=spec.max_active);
            let mut classes: Vec<usize> = (0..c).collect();
            classes.shuffle(&mut rng);
            let mut on = vec![false; c];
            for &k in &classes[..count] {
                on[k] = true;
            }
            vec![on; spec.seq_len]
        }
        TaskKind::Sequence => {
            let mut states = Vec::with_capacity(spec.seq_len);
            let mut on: Vec<bool> = (0..c).map(|_| rng.gen::<f64>() < spec.activation).collect();
            states.push(on.clone());
            for _ in 1..spec.seq_len {
                for slot in on.iter_mut() {
                    if rng.gen::<f64>() >= spec.persistence {
                        *slot = rng.gen::<f64>() < spec.activation;
                    }
                }
                states.push(on.clone());
            }
            states
        }
    };

    // synthesize per-token frames and transform them; note k sits in bin k+1
    let mut tokens = CTensor::<f64>::zeros(&[spec.seq_in, n]);
    for t in 0..spec.seq_in {
        let mut re = vec![0.0f64; n];
        let mut im = vec![0.0f64; n];
        for k in 0..c {
            if !states[t][k] {
                continue;
            }
            let w = 2.0 * std::f64::consts::PI * (k + 1) as f64 / n as f64;
            for (step, (r, i)) in re.iter_mut().zip(im.iter_mut()).enumerate() {
                let ang = w * step as f64 + phases[k];
                *r += amps[k] * ang.cos();
                *i += amps[k] * ang.sin();
            }
        }
        for j in 0..n {
            re[j] += spec.noise_sigma * rngs::randn(&mut rng);
            im[j] += spec.noise_sigma * rngs::randn(&mut rng);
        }
        fft_in_place(&mut re, &mut im, false)?;
        let inv = 1.0 / n as f64;
        for j in 0..n {
            tokens.re_mut()[t * n + j] = re[j] * inv;
            tokens.im_mut()[t * n + j] = im[j] * inv;
        }
    }

    let labels = match spec.task {
        TaskKind::Classification => {
            let mut l = CTensor::<f64>::zeros(&[1, c]);
            for k in 0..c {
                if states[0][k] {
                    l.re_mut()[k] = 1.0;
                }
            }
            l
        }
        TaskKind::Sequence => {
            let mut l = CTensor::<f64>::zeros(&[spec.seq_out, c]);
            for t in 0..spec.seq_out {
                for k in 0..c {
                    if states[spec.seq_in + t][k] {
                        l.re_mut()[t * c + k] = 1.0;
                    }
                }
            }
            l
        }
    };
    Ok(Sample { tokens, labels })
}

pub fn cast_samples<T: Scalar>(samples: &[Sample<f64>]) -> Vec<Sample<T>> {
    samples
        .iter()
        .map(|s| Sample {
            tokens: s.tokens.cast(),
            labels: s.labels.cast(),
        })
        .collect()
}

fn header_string(spec: &SyntheticSpec, sizes: [usize; 3]) -> String {
    format!(
        "cvattn-dataset 1\n\
         task {}\n\
         n_samples {}\n\
         seq_len {}\n\
         frame_len {}\n\
         n_classes {}\n\
         max_active {}\n\
         noise_sigma {}\n\
         activation {}\n\
         persistence {}\n\
         seq_in {}\n\
         seq_out {}\n\
         seed {}\n\
         split {} {} {}\n\
         counts {} {} {}\n\
         end-header\n",
        spec.task,
        spec.n_samples,
        spec.seq_len,
        spec.frame_len,
        spec.n_classes,
        spec.max_active,
        spec.noise_sigma,
        spec.activation,
        spec.persistence,
        spec.seq_in,
        spec.seq_out,
        spec.seed,
        spec.split[0],
        spec.split[1],
        spec.split[2],
        sizes[0],
        sizes[1],
        sizes[2],
    )
}

/// Write a generated dataset: a text header describing the spec followed by
/// raw little-endian f64 blocks (tokens re, tokens im, labels re per sample,
/// splits in train/val/test order). The same spec always produces the same
/// bytes.
pub fn save_dataset(path: &Path, spec: &SyntheticSpec, splits: &Splits<f64>) -> Result<()> {
    let sizes = [splits.train.len(), splits.val.len(), splits.test.len()];
    let mut bytes = header_string(spec, sizes).into_bytes();
    for split in [&splits.train, &splits.val, &splits.test] {
        for sample in split {
            for &v in sample.tokens.re() {
                v.write_le(&mut bytes);
            }
            for &v in sample.tokens.im() {
                v.write_le(&mut bytes);
            }
            for &v in sample.labels.re() {
                v.write_le(&mut bytes);
            }
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Read a dataset written by [`save_dataset`].
pub fn load_dataset(path: &Path) -> Result<(SyntheticSpec, Splits<f64>)> {
    let bytes = std::fs::read(path)?;
    let head_end = bytes
        .windows(11)
        .position(|w| w == b"end-header\n")
        .ok_or_else(|| CvError::DataFormat("dataset header terminator missing".into()))?
        + 11;
    let header = std::str::from_utf8(&bytes[..head_end])
        .map_err(|_| CvError::DataFormat("dataset header is not utf-8".into()))?;

    let mut fields = std::collections::HashMap::new();
    for (ln, line) in header.lines().enumerate() {
        if ln == 0 {
            if line != "cvattn-dataset 1" {
                return Err(CvError::DataFormat(format!(
                    "unrecognized dataset header {line:?}"
                )));
            }
            continue;
        }
        if line == "end-header" {
            break;
        }
        let (key, value) = line
            .split_once(' ')
            .ok_or_else(|| CvError::DataFormat(format!("bad dataset header line {line:?}")))?;
        fields.insert(key.to_string(), value.to_string());
    }
    let get = |key: &str| -> Result<&str> {
        fields
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| CvError::DataFormat(format!("dataset header misses {key}")))
    };
    let usize_of = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| CvError::DataFormat(format!("bad integer for {key}")))
    };
    let f64_of = |key: &str| -> Result<f64> {
        get(key)?
            .parse()
            .map_err(|_| CvError::DataFormat(format!("bad float for {key}")))
    };
    let split_parts: Vec<f64> = get("split")?
        .split(' ')
        .map(|p| p.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CvError::DataFormat("bad split fractions".into()))?;
    let count_parts: Vec<usize> = get("counts")?
        .split(' ')
        .map(|p| p.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CvError::DataFormat("bad split counts".into()))?;
    if split_parts.len() != 3 || count_parts.len() != 3 {
        return Err(CvError::DataFormat("split lines need three entries".into()));
    }
    let spec = SyntheticSpec {
        task: TaskKind::parse(get("task")?)?,
        n_samples: usize_of("n_samples")?,
        seq_len: usize_of("seq_len")?,
        frame_len: usize_of("frame_len")?,
        n_classes: usize_of("n_classes")?,
        max_active: usize_of("max_active")?,
        noise_sigma: f64_of("noise_sigma")?,
        activation: f64_of("activation")?,
        persistence: f64_of("persistence")?,
        seq_in: usize_of("seq_in")?,
        seq_out: usize_of("seq_out")?,
        seed: get("seed")?
            .parse()
            .map_err(|_| CvError::DataFormat("bad seed".into()))?,
        split: [split_parts[0], split_parts[1], split_parts[2]],
    };
    spec.validate()?;

    let token_len = spec.seq_in * spec.frame_len;
    let label_rows = match spec.task {
        TaskKind::Classification => 1,
        TaskKind::Sequence => spec.seq_out,
    };
    let label_len = label_rows * spec.n_classes;
    let per_sample = (2 * token_len + label_len) * 8;
    let want = head_end + per_sample * count_parts.iter().sum::<usize>();
    if bytes.len() != want {
        return Err(CvError::DataFormat(format!(
            "dataset body is {} bytes, expected {}",
            bytes.len() - head_end,
            want - head_end
        )));
    }

    let mut at = head_end;
    let mut read_block = |len: usize| -> Vec<f64> {
        let v = bytes[at..at + 8 * len]
            .chunks_exact(8)
            .map(f64::read_le)
            .collect();
        at += 8 * len;
        v
    };
    let mut splits: [Vec<Sample<f64>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (s, &count) in count_parts.iter().enumerate() {
        for _ in 0..count {
            let re = read_block(token_len);
            let im = read_block(token_len);
            let lab = read_block(label_len);
            splits[s].push(Sample {
                tokens: CTensor::new(&[spec.seq_in, spec.frame_len], re, im)?,
                labels: CTensor::from_re(&[label_rows, spec.n_classes], lab)?,
            });
        }
    }
    let [train, val, test] = splits;
    Ok((spec, Splits { train, val, test }))
}
