//! Connectionist temporal classification: the alignment-free sequence loss,
//! its analytic gradient, and the decoders that turn per-frame distributions
//! back into label sequences.
//!
//! Everything runs in log space. A label of length L is expanded to the
//! blank-interleaved form ∅ l₁ ∅ l₂ … ∅ (length 2L+1) and scored by the
//! standard alpha/beta dynamic program; impossible labels come out at +∞
//! loss rather than as errors so a training loop can skip them.

use std::collections::HashMap;

use crate::tensor::{Graph, NodeId, Tensor};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CtcError {
    #[error("alphabet is empty")]
    EmptyAlphabet,
    #[error("duplicate character {0:?} in alphabet")]
    DuplicateCharacter(char),
    #[error("unknown character {ch:?} at position {position}")]
    UnknownCharacter { ch: char, position: usize },
    #[error("index {index} out of range for {size} classes")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("label contains the blank index at position {0}")]
    BlankInLabel(usize),
    #[error("frame row {row} is not log-normalized: probabilities sum to {sum}")]
    NotNormalized { row: usize, sum: f64 },
    #[error("invalid logits sequence: {0}")]
    InvalidLogits(String),
    #[error("loss is infinite (label infeasible for this frame count), gradient undefined")]
    InfiniteLoss,
    #[error("beam width must be at least 1")]
    ZeroBeamWidth,
    #[error("oracle enumeration too large: T={t}, K={k} (limits: T ≤ 8, K ≤ 3)")]
    OracleTooLarge { t: usize, k: usize },
}

/// Ordered character set. The blank class is not a character; it always
/// takes the index one past the last character, so alphabet indices stay
/// stable if the set grows.
#[derive(Debug, Clone, PartialEq)]
pub struct Alphabet {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Alphabet {
    pub fn new(chars: &[char]) -> Result<Self, CtcError> {
        if chars.is_empty() {
            return Err(CtcError::EmptyAlphabet);
        }
        let mut index = HashMap::new();
        for (i, &ch) in chars.iter().enumerate() {
            if index.insert(ch, i).is_some() {
                return Err(CtcError::DuplicateCharacter(ch));
            }
        }
        Ok(Alphabet {
            chars: chars.to_vec(),
            index,
        })
    }

    /// The 19 characters that occur in the common text-captcha corpus,
    /// sorted by code point.
    pub fn standard() -> Self {
        let chars: Vec<char> = "2345678bcdefgmnpwxy".chars().collect();
        Alphabet::new(&chars).expect("distinct by construction")
    }

    /// Number of characters K; valid class indices are 0..=K with K = blank.
    pub fn size(&self) -> usize {
        self.chars.len()
    }

    pub fn blank_index(&self) -> usize {
        self.chars.len()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn char_index(&self, ch: char) -> Option<usize> {
        self.index.get(&ch).copied()
    }

    pub fn encode(&self, text: &str) -> Result<LabelSequence, CtcError> {
        let mut indices = Vec::new();
        for (position, ch) in text.chars().enumerate() {
            match self.index.get(&ch) {
                Some(&i) => indices.push(i),
                None => return Err(CtcError::UnknownCharacter { ch, position }),
            }
        }
        Ok(LabelSequence(indices))
    }

    pub fn decode(&self, label: &LabelSequence) -> Result<String, CtcError> {
        label
            .indices()
            .iter()
            .map(|&i| {
                self.chars.get(i).copied().ok_or(CtcError::IndexOutOfRange {
                    index: i,
                    size: self.chars.len(),
                })
            })
            .collect()
    }
}

/// Blank-free sequence of alphabet indices: ground truth or decoder output.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct LabelSequence(Vec<usize>);

impl LabelSequence {
    /// Checked construction: every index must name one of the
    /// `alphabet_size` characters (the blank is excluded by definition).
    pub fn new(indices: Vec<usize>, alphabet_size: usize) -> Result<Self, CtcError> {
        for &i in &indices {
            if i >= alphabet_size {
                return Err(CtcError::IndexOutOfRange {
                    index: i,
                    size: alphabet_size,
                });
            }
        }
        Ok(LabelSequence(indices))
    }

    pub fn empty() -> Self {
        LabelSequence(Vec::new())
    }

    #[cfg(test)]
    pub(crate) fn from_raw(indices: Vec<usize>) -> Self {
        LabelSequence(indices)
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// T×(K+1) per-frame log-probabilities (K characters plus blank).
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsSequence {
    frames: Tensor,
}

impl LogitsSequence {
    pub fn new(frames: Tensor) -> Result<Self, CtcError> {
        let (t, c) = frames
            .dims2()
            .map_err(|e| CtcError::InvalidLogits(e.to_string()))?;
        if t < 1 || c < 2 {
            return Err(CtcError::InvalidLogits(format!(
                "need T ≥ 1 and at least 2 classes, got {t}×{c}"
            )));
        }
        Ok(LogitsSequence { frames })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn time_steps(&self) -> usize {
        self.frames.shape()[0]
    }

    /// Class count including the blank (K+1).
    pub fn n_classes(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let c = self.n_classes();
        &self.frames.data()[t * c..(t + 1) * c]
    }
}

/// Loss plus the two DP tables, each T×(2L+1) in log domain.
#[derive(Debug, Clone)]
pub struct CtcResult {
    pub loss: f64,
    pub alpha: Tensor,
    pub beta: Tensor,
}

const NEG_INF: f64 = f64::NEG_INFINITY;

fn lse2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == NEG_INF {
        return NEG_INF;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn lse3(a: f64, b: f64, c: f64) -> f64 {
    let m = a.max(b).max(c);
    if m == NEG_INF {
        return NEG_INF;
    }
    m + ((a - m).exp() + (b - m).exp() + (c - m).exp()).ln()
}

/// Collapse a frame-level path to its label: merge adjacent duplicates,
/// then drop blanks. `[a a ∅ b b]` → `ab`, `[a ∅ a]` → `aa`.
pub fn collapse(path: &[usize], blank: usize) -> Result<LabelSequence, CtcError> {
    let mut out = Vec::new();
    let mut prev: Option<usize> = None;
    for &p in path {
        if p > blank {
            return Err(CtcError::IndexOutOfRange {
                index: p,
                size: blank + 1,
            });
        }
        if prev != Some(p) {
            if p != blank {
                out.push(p);
            }
            prev = Some(p);
        }
    }
    Ok(LabelSequence(out))
}

fn validate_inputs(
    log_probs: &LogitsSequence,
    label: &LabelSequence,
    blank: usize,
) -> Result<(), CtcError> {
    let c = log_probs.n_classes();
    if blank >= c {
        return Err(CtcError::IndexOutOfRange { index: blank, size: c });
    }
    for (pos, &l) in label.indices().iter().enumerate() {
        if l == blank {
            return Err(CtcError::BlankInLabel(pos));
        }
        if l >= c {
            return Err(CtcError::IndexOutOfRange { index: l, size: c });
        }
    }
    for t in 0..log_probs.time_steps() {
        let sum: f64 = log_probs.row(t).iter().map(|v| v.exp()).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(CtcError::NotNormalized { row: t, sum });
        }
    }
    Ok(())
}

fn extended_label(label: &LabelSequence, blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * label.len() + 1);
    ext.push(blank);
    for &l in label.indices() {
        ext.push(l);
        ext.push(blank);
    }
    ext
}

/// True when the DP may skip from extended position s-2 straight to s:
/// only onto a character, and only when it differs from the one at s-2.
fn skip_allowed(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

struct ForwardBackward {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    s_len: usize,
    loss: f64,
}

fn forward_backward(log_probs: &LogitsSequence, ext: &[usize], blank: usize) -> ForwardBackward {
    let t_len = log_probs.time_steps();
    let s_len = ext.len();
    let mut alpha = vec![NEG_INF; t_len * s_len];
    let mut beta = vec![NEG_INF; t_len * s_len];

    let row0 = log_probs.row(0);
    alpha[0] = row0[ext[0]];
    if s_len > 1 {
        alpha[1] = row0[ext[1]];
    }
    for t in 1..t_len {
        let row = log_probs.row(t);
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let stay = prev[s];
            let step = if s >= 1 { prev[s - 1] } else { NEG_INF };
            let skip = if skip_allowed(ext, s, blank) { prev[s - 2] } else { NEG_INF };
            cur[s] = row[ext[s]] + lse3(stay, step, skip);
        }
    }

    // Beta here excludes the emission at the current frame, so that
    // alpha[t,s] + beta[t,s] counts every frame's emission exactly once and
    // logsumexp over s reproduces the total path mass at every t.
    beta[(t_len - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        let next_row = log_probs.row(t + 1);
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        let next = &next[..s_len];
        for s in 0..s_len {
            let stay = next[s] + next_row[ext[s]];
            let step = if s + 1 < s_len {
                next[s + 1] + next_row[ext[s + 1]]
            } else {
                NEG_INF
            };
            let skip = if s + 2 < s_len && skip_allowed(ext, s + 2, blank) {
                next[s + 2] + next_row[ext[s + 2]]
            } else {
                NEG_INF
            };
            cur[s] = lse3(stay, step, skip);
        }
    }

    let last = &alpha[(t_len - 1) * s_len..];
    let total = if s_len > 1 {
        lse2(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    };
    ForwardBackward {
        alpha,
        beta,
        s_len,
        loss: -total,
    }
}

/// Negative log probability of `label` under the per-frame distributions,
/// summed over every path that collapses to it. Infeasible labels yield
/// +∞ loss, not an error.
pub fn ctc_loss(
    log_probs: &LogitsSequence,
    label: &LabelSequence,
    blank: usize,
) -> Result<CtcResult, CtcError> {
    validate_inputs(log_probs, label, blank)?;
    let ext = extended_label(label, blank);
    let fb = forward_backward(log_probs, &ext, blank);
    let t_len = log_probs.time_steps();
    Ok(CtcResult {
        loss: fb.loss,
        alpha: Tensor::from_vec(vec![t_len, fb.s_len], fb.alpha).expect("table shape"),
        beta: Tensor::from_vec(vec![t_len, fb.s_len], fb.beta).expect("table shape"),
    })
}

/// Per-class posterior mass at each frame: posterior[t][k] sums the path
/// probability flowing through symbol k at time t, normalized by the total.
fn posterior(log_probs: &LogitsSequence, ext: &[usize], fb: &ForwardBackward) -> Tensor {
    let t_len = log_probs.time_steps();
    let c = log_probs.n_classes();
    let mut post = Tensor::zeros(vec![t_len, c]);
    let data = post.data_mut();
    for t in 0..t_len {
        for (s, &sym) in ext.iter().enumerate() {
            let log_mass = fb.alpha[t * fb.s_len + s] + fb.beta[t * fb.s_len + s] + fb.loss;
            data[t * c + sym] += log_mass.exp();
        }
    }
    post
}

/// Gradient of `ctc_loss` with respect to the pre-softmax logits:
/// softmax(logits) − posterior. Refuses infeasible labels.
pub fn ctc_gradient(
    log_probs: &LogitsSequence,
    label: &LabelSequence,
    blank: usize,
) -> Result<Tensor, CtcError> {
    validate_inputs(log_probs, label, blank)?;
    let ext = extended_label(label, blank);
    let fb = forward_backward(log_probs, &ext, blank);
    if !fb.loss.is_finite() {
        return Err(CtcError::InfiniteLoss);
    }
    let post = posterior(log_probs, &ext, &fb);
    let mut grad = log_probs.frames().map(f64::exp);
    for (g, p) in grad.data_mut().iter_mut().zip(post.data()) {
        *g -= p;
    }
    Ok(grad)
}

/// Splice the loss into an autodiff graph as a scalar node downstream of the
/// node holding log-probabilities (typically a `log_softmax_rows` output).
/// The injected local gradient is with respect to the log-probabilities, so
/// composing with log-softmax's own backward yields softmax − posterior.
pub fn attach_ctc_loss(
    graph: &mut Graph,
    log_probs_node: NodeId,
    label: &LabelSequence,
    blank: usize,
) -> Result<(NodeId, f64), CtcError> {
    let frames = graph.value(log_probs_node).clone();
    let log_probs = LogitsSequence::new(frames)?;
    validate_inputs(&log_probs, label, blank)?;
    let ext = extended_label(label, blank);
    let fb = forward_backward(&log_probs, &ext, blank);
    if !fb.loss.is_finite() {
        return Err(CtcError::InfiniteLoss);
    }
    let mut local_grad = posterior(&log_probs, &ext, &fb);
    for v in local_grad.data_mut() {
        *v = -*v;
    }
    let node = graph
        .scalar_with_grad(log_probs_node, fb.loss, local_grad)
        .expect("gradient shape matches frames");
    Ok((node, fb.loss))
}

/// Best-path decoding: per-frame argmax (ties to the lowest index), then
/// collapse.
pub fn ctc_greedy_decode(log_probs: &LogitsSequence, blank: usize) -> Result<LabelSequence, CtcError> {
    let c = log_probs.n_classes();
    if blank >= c {
        return Err(CtcError::IndexOutOfRange { index: blank, size: c });
    }
    let mut path = Vec::with_capacity(log_probs.time_steps());
    for t in 0..log_probs.time_steps() {
        let row = log_probs.row(t);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        path.push(best);
    }
    collapse(&path, blank)
}

/// Prefix beam search: tracks blank-ending and non-blank-ending mass per
/// collapsed prefix, merging every path that collapses to the same prefix.
/// Returns the prefix with the highest total mass; exact ties break
/// lexicographically by index sequence.
pub fn ctc_beam_decode(
    log_probs: &LogitsSequence,
    blank: usize,
    beam_width: usize,
) -> Result<LabelSequence, CtcError> {
    if beam_width == 0 {
        return Err(CtcError::ZeroBeamWidth);
    }
    let c = log_probs.n_classes();
    if blank >= c {
        return Err(CtcError::IndexOutOfRange { index: blank, size: c });
    }

    // (prefix, log mass ending in blank, log mass ending in its last char)
    let mut beams: Vec<(Vec<usize>, f64, f64)> = vec![(Vec::new(), 0.0, NEG_INF)];
    for t in 0..log_probs.time_steps() {
        let row = log_probs.row(t);
        let mut next: HashMap<Vec<usize>, (f64, f64)> = HashMap::new();
        for (prefix, p_b, p_nb) in &beams {
            let total = lse2(*p_b, *p_nb);

            let slot = next.entry(prefix.clone()).or_insert((NEG_INF, NEG_INF));
            // Emit blank: prefix unchanged, mass moves to the blank bucket.
            slot.0 = lse2(slot.0, total + row[blank]);
            // Re-emit the final character: merges into the same prefix.
            if let Some(&last) = prefix.last() {
                slot.1 = lse2(slot.1, *p_nb + row[last]);
            }

            for ch in 0..c {
                if ch == blank {
                    continue;
                }
                // Extending with the same character needs a blank in
                // between, so only blank-ending mass carries over.
                let base = if prefix.last() == Some(&ch) { *p_b } else { total };
                if base == NEG_INF {
                    continue;
                }
                let mut extended = prefix.clone();
                extended.push(ch);
                let slot = next.entry(extended).or_insert((NEG_INF, NEG_INF));
                slot.1 = lse2(slot.1, base + row[ch]);
            }
        }
        beams = next.into_iter().map(|(p, (b, nb))| (p, b, nb)).collect();
        beams.sort_by(|x, y| {
            lse2(y.1, y.2)
                .total_cmp(&lse2(x.1, x.2))
                .then_with(|| x.0.cmp(&y.0))
        });
        beams.truncate(beam_width);
    }
    Ok(LabelSequence(beams.remove(0).0))
}

/// Decoding strategy selector used by evaluation and the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoder {
    Greedy,
    Beam { width: usize },
}

impl Decoder {
    pub fn decode(&self, log_probs: &LogitsSequence, blank: usize) -> Result<LabelSequence, CtcError> {
        match *self {
            Decoder::Greedy => ctc_greedy_decode(log_probs, blank),
            Decoder::Beam { width } => ctc_beam_decode(log_probs, blank, width),
        }
    }
}

/// Exhaustive reference: sums the probability of every frame-level path
/// that collapses to `label`. `probs` holds probability-domain rows
/// (each summing to 1), not log-probabilities. Exponential in T, so the
/// instance size is capped.
pub fn ctc_oracle(probs: &Tensor, label: &LabelSequence, blank: usize) -> Result<f64, CtcError> {
    let (t_len, c) = probs
        .dims2()
        .map_err(|e| CtcError::InvalidLogits(e.to_string()))?;
    if t_len > 8 || c - 1 > 3 {
        return Err(CtcError::OracleTooLarge { t: t_len, k: c - 1 });
    }
    if blank >= c {
        return Err(CtcError::IndexOutOfRange { index: blank, size: c });
    }
    let mut total = 0.0;
    let mut path = vec![0usize; t_len];
    let n_paths = c.pow(t_len as u32);
    for code in 0..n_paths {
        let mut x = code;
        for slot in path.iter_mut() {
            *slot = x % c;
            x /= c;
        }
        let collapsed = collapse(&path, blank)?;
        if collapsed.indices() == label.indices() {
            total += path
                .iter()
                .enumerate()
                .map(|(t, &s)| probs.data()[t * c + s])
                .product::<f64>();
        }
    }
    Ok(total)
}
