//! A small differentiable omni policy.
//!
//! ```text
//! h      = tanh(U_a·a + U_v·v + E_x[prompt])
//! logits = W_out·h + b
//! log π  = log_softmax(logits)
//! ```
//!
//! Responses are single vocabulary items, so the log-probability of a whole
//! response is one entry of the output vector. Gradients are computed by a
//! hand-written reverse pass. Detached evaluations return a [`Detached`]
//! value that has no path back into [`backward`], which is how corrupted and
//! text-only passes are kept out of the gradient.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which modality a prompt is about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityTag {
    AudioRelated,
    VisualRelated,
    Audiovisual,
}

impl ModalityTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ModalityTag::AudioRelated => "audio_related",
            ModalityTag::VisualRelated => "visual_related",
            ModalityTag::Audiovisual => "audiovisual",
        }
    }
}

/// The `(a, v, x)` triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityContext {
    pub audio: Vec<f64>,
    pub visual: Vec<f64>,
    pub prompt_id: usize,
    pub modality_tag: ModalityTag,
}

impl ModalityContext {
    /// Same prompt with both feature vectors zeroed: the text-only input.
    pub fn text_only(&self) -> Self {
        Self {
            audio: vec![0.0; self.audio.len()],
            visual: vec![0.0; self.visual.len()],
            prompt_id: self.prompt_id,
            modality_tag: self.modality_tag,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub d_audio: usize,
    pub d_visual: usize,
    pub d_hidden: usize,
    pub n_prompts: usize,
    pub vocab: usize,
}

impl Default for PolicyDims {
    fn default() -> Self {
        Self {
            d_audio: 8,
            d_visual: 8,
            d_hidden: 16,
            n_prompts: 15,
            vocab: 8,
        }
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out += self · x`
    fn matvec_acc(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o += self.row(r).iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
        }
    }

    /// `self += scale · u ⊗ v`
    fn add_outer(&mut self, u: &[f64], v: &[f64], scale: f64) {
        for (r, ui) in u.iter().enumerate() {
            let s = scale * ui;
            for (w, vj) in self.row_mut(r).iter_mut().zip(v) {
                *w += s * vj;
            }
        }
    }
}

pub const TENSOR_NAMES: [&str; 5] = ["u_audio", "u_visual", "e_prompt", "w_out", "b_out"];

/// Policy weights. The same shape doubles as a gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub dims: PolicyDims,
    /// `d_h × d_a`
    pub u_audio: Tensor,
    /// `d_h × d_v`
    pub u_visual: Tensor,
    /// `n_prompts × d_h`
    pub e_prompt: Tensor,
    /// `V × d_h`
    pub w_out: Tensor,
    /// `V × 1`
    pub b_out: Tensor,
}

/// Gradient of some scalar with respect to every entry of [`PolicyParams`].
pub type GradAccumulator = PolicyParams;

pub const INIT_SCALE: f64 = 0.1;

impl PolicyParams {
    pub fn zeros(dims: PolicyDims) -> Self {
        Self {
            dims,
            u_audio: Tensor::zeros(dims.d_hidden, dims.d_audio),
            u_visual: Tensor::zeros(dims.d_hidden, dims.d_visual),
            e_prompt: Tensor::zeros(dims.n_prompts, dims.d_hidden),
            w_out: Tensor::zeros(dims.vocab, dims.d_hidden),
            b_out: Tensor::zeros(dims.vocab, 1),
        }
    }

    /// Entries drawn from `uniform(−0.1, 0.1)`.
    pub fn init(dims: PolicyDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            dims,
            u_audio: Tensor::uniform(dims.d_hidden, dims.d_audio, INIT_SCALE, &mut rng),
            u_visual: Tensor::uniform(dims.d_hidden, dims.d_visual, INIT_SCALE, &mut rng),
            e_prompt: Tensor::uniform(dims.n_prompts, dims.d_hidden, INIT_SCALE, &mut rng),
            w_out: Tensor::uniform(dims.vocab, dims.d_hidden, INIT_SCALE, &mut rng),
            b_out: Tensor::uniform(dims.vocab, 1, INIT_SCALE, &mut rng),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 5] {
        [
            (TENSOR_NAMES[0], &self.u_audio),
            (TENSOR_NAMES[1], &self.u_visual),
            (TENSOR_NAMES[2], &self.e_prompt),
            (TENSOR_NAMES[3], &self.w_out),
            (TENSOR_NAMES[4], &self.b_out),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 5] {
        [
            (TENSOR_NAMES[0], &mut self.u_audio),
            (TENSOR_NAMES[1], &mut self.u_visual),
            (TENSOR_NAMES[2], &mut self.e_prompt),
            (TENSOR_NAMES[3], &mut self.w_out),
            (TENSOR_NAMES[4], &mut self.b_out),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data.len()).sum()
    }

    /// `self += scale · other`
    pub fn add_scaled(&mut self, other: &PolicyParams, scale: f64) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(&src.data) {
                *d += scale * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .fold(0.0, |m: f64, x| m.max(x.abs()))
    }

    /// Bit patterns of every entry, in tensor order.
    pub fn to_bits(&self) -> Vec<u64> {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.data.iter().map(|x| x.to_bits()))
            .collect()
    }

    fn check_context(&self, ctx: &ModalityContext) -> Result<()> {
        let d = self.dims;
        if ctx.audio.len() != d.d_audio {
            return Err(Error::Dimension {
                what: "audio features",
                expected: d.d_audio,
                got: ctx.audio.len(),
            });
        }
        if ctx.visual.len() != d.d_visual {
            return Err(Error::Dimension {
                what: "visual features",
                expected: d.d_visual,
                got: ctx.visual.len(),
            });
        }
        if ctx.prompt_id >= d.n_prompts {
            return Err(Error::Dimension {
                what: "prompt table",
                expected: d.n_prompts,
                got: ctx.prompt_id,
            });
        }
        Ok(())
    }
}

/// Log-probabilities from a gradient-tracked forward pass, with the
/// activations the reverse pass needs.
#[derive(Debug, Clone)]
pub struct Tracked {
    log_probs: Vec<f64>,
    hidden: Vec<f64>,
    context: ModalityContext,
}

impl Tracked {
    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }
}

/// Log-probabilities from a stop-gradient pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Detached(Vec<f64>);

impl Detached {
    pub fn log_probs(&self) -> &[f64] {
        &self.0
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

fn hidden_and_logprobs(params: &PolicyParams, ctx: &ModalityContext) -> Result<(Vec<f64>, Vec<f64>)> {
    params.check_context(ctx)?;
    let mut pre = params.e_prompt.row(ctx.prompt_id).to_vec();
    params.u_audio.matvec_acc(&ctx.audio, &mut pre);
    params.u_visual.matvec_acc(&ctx.visual, &mut pre);
    let hidden: Vec<f64> = pre.into_iter().map(f64::tanh).collect();
    let mut logits = params.b_out.data.clone();
    params.w_out.matvec_acc(&hidden, &mut logits);
    Ok((hidden, log_softmax(&logits)))
}

/// Gradient-tracked forward pass.
pub fn forward_logprobs(params: &PolicyParams, ctx: &ModalityContext) -> Result<Tracked> {
    let (hidden, log_probs) = hidden_and_logprobs(params, ctx)?;
    Ok(Tracked {
        log_probs,
        hidden,
        context: ctx.clone(),
    })
}

/// Stop-gradient forward pass; numerically identical to [`forward_logprobs`].
pub fn forward_detached(params: &PolicyParams, ctx: &ModalityContext) -> Result<Detached> {
    let (_, log_probs) = hidden_and_logprobs(params, ctx)?;
    Ok(Detached(log_probs))
}

/// Accumulates `∂(upstream · log π)/∂params` into `grads`.
pub fn backward_into(
    params: &PolicyParams,
    tracked: &Tracked,
    upstream: &[f64],
    grads: &mut GradAccumulator,
) -> Result<()> {
    let vocab = params.dims.vocab;
    if upstream.len() != vocab {
        return Err(Error::Dimension {
            what: "upstream gradient",
            expected: vocab,
            got: upstream.len(),
        });
    }
    let total: f64 = upstream.iter().sum();
    // d/dlogit_k of Σ_j g_j log_softmax_j = g_k − softmax_k · Σ_j g_j
    let d_logits: Vec<f64> = upstream
        .iter()
        .zip(&tracked.log_probs)
        .map(|(g, lp)| g - lp.exp() * total)
        .collect();

    grads.w_out.add_outer(&d_logits, &tracked.hidden, 1.0);
    for (b, d) in grads.b_out.data.iter_mut().zip(&d_logits) {
        *b += d;
    }

    let mut d_pre = vec![0.0; params.dims.d_hidden];
    for (k, dk) in d_logits.iter().enumerate() {
        for (dp, w) in d_pre.iter_mut().zip(params.w_out.row(k)) {
            *dp += dk * w;
        }
    }
    for (dp, h) in d_pre.iter_mut().zip(&tracked.hidden) {
        *dp *= 1.0 - h * h;
    }

    let ctx = &tracked.context;
    grads.u_audio.add_outer(&d_pre, &ctx.audio, 1.0);
    grads.u_visual.add_outer(&d_pre, &ctx.visual, 1.0);
    for (e, dp) in grads.e_prompt.row_mut(ctx.prompt_id).iter_mut().zip(&d_pre) {
        *e += dp;
    }
    Ok(())
}

/// Forward then reverse pass; returns a fresh gradient.
pub fn backward(
    params: &PolicyParams,
    ctx: &ModalityContext,
    upstream: &[f64],
) -> Result<GradAccumulator> {
    let tracked = forward_logprobs(params, ctx)?;
    let mut grads = PolicyParams::zeros(params.dims);
    backward_into(params, &tracked, upstream, &mut grads)?;
    Ok(grads)
}

const CHECKPOINT_MAGIC: &str = "moddpo-policy";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes parameters to the versioned text checkpoint format.
///
/// ```text
/// moddpo-policy 1
/// dims d_audio=8 d_visual=8 d_hidden=16 n_prompts=15 vocab=8
/// tensor u_audio 16 8
/// <16 lines of 8 values>
/// tensor u_visual 16 8
/// ...
/// end
/// ```
///
/// Values use Rust's shortest round-trip `{:e}` formatting, so a reload is
/// bit-exact.
pub fn checkpoint_to_string(params: &PolicyParams) -> String {
    let d = params.dims;
    let mut out = String::new();
    let _ = writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
    let _ = writeln!(
        out,
        "dims d_audio={} d_visual={} d_hidden={} n_prompts={} vocab={}",
        d.d_audio, d.d_visual, d.d_hidden, d.n_prompts, d.vocab
    );
    for (name, t) in params.tensors() {
        let _ = writeln!(out, "tensor {name} {} {}", t.rows, t.cols);
        for r in 0..t.rows {
            let line: Vec<String> = t.row(r).iter().map(|x| format!("{x:e}")).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
    }
    out.push_str("end\n");
    out
}

pub fn save_checkpoint(params: &PolicyParams, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(checkpoint_to_string(params).as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&lines, path)
}

fn parse_checkpoint(lines: &[String], path: &Path) -> Result<PolicyParams> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: line + 1,
        msg,
    };
    let header = lines.first().ok_or_else(|| err(0, "empty checkpoint".into()))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(CHECKPOINT_MAGIC) {
        return Err(err(0, format!("missing '{CHECKPOINT_MAGIC}' header")));
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| err(0, "missing version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(err(0, format!("unsupported checkpoint version {version}")));
    }

    let dims_line = lines.get(1).ok_or_else(|| err(1, "missing dims line".into()))?;
    let mut fields = dims_line.split_whitespace();
    if fields.next() != Some("dims") {
        return Err(err(1, "expected 'dims'".into()));
    }
    let mut dims = PolicyDims::default();
    let mut seen = 0;
    for field in fields {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| err(1, format!("malformed dims field '{field}'")))?;
        let value: usize = value
            .parse()
            .map_err(|_| err(1, format!("bad value in '{field}'")))?;
        match key {
            "d_audio" => dims.d_audio = value,
            "d_visual" => dims.d_visual = value,
            "d_hidden" => dims.d_hidden = value,
            "n_prompts" => dims.n_prompts = value,
            "vocab" => dims.vocab = value,
            other => return Err(err(1, format!("unknown dims key '{other}'"))),
        }
        seen += 1;
    }
    if seen != 5 {
        return Err(err(1, "dims line must list all five sizes".into()));
    }

    let mut params = PolicyParams::zeros(dims);
    let mut cursor = 2;
    for (name, tensor) in params.tensors_mut() {
        let head = lines
            .get(cursor)
            .ok_or_else(|| err(cursor, format!("missing tensor {name}")))?;
        let expected = format!("tensor {name} {} {}", tensor.rows, tensor.cols);
        if head.trim() != expected {
            return Err(err(cursor, format!("expected '{expected}', found '{head}'")));
        }
        cursor += 1;
        for r in 0..tensor.rows {
            let line = lines
                .get(cursor)
                .ok_or_else(|| err(cursor, format!("truncated tensor {name}")))?;
            let values: Vec<f64> = line
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| err(cursor, format!("bad number: {e}")))?;
            if values.len() != tensor.cols {
                return Err(err(
                    cursor,
                    format!("row has {} values, expected {}", values.len(), tensor.cols),
                ));
            }
            tensor.row_mut(r).copy_from_slice(&values);
            cursor += 1;
        }
    }
    match lines.get(cursor).map(|l| l.trim()) {
        Some("end") => Ok(params),
        _ => Err(err(cursor, "missing 'end' trailer".into())),
    }
}
