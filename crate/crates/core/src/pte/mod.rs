//! Predictive transformer encoder.
//!
//! Sequence layout per branch: `[clip tokens | object tokens | prediction tokens]`.
//! Every token gets a sinusoidal segment encoding (prediction token `z` sits at
//! position `n_observed + z`), object tokens additionally get a learned
//! per-frame-slot encoding, and every token gets a learned modality embedding.
//! The encoded prediction tokens go through one shared verb head and one shared
//! noun head.
//!
//! Late fusion keeps two independent branches (`video.*` and `object.*`
//! parameters) and averages their logits.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use crate::error::{Error, Result};
use crate::numcore::{derive_seed, dropout_mask, hash_str, BoundParams, ParamStore, Real, Tape, Tensor, Var};
use crate::tokens::ModelInput;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    VideoOnly,
    ObjectOnly,
    #[default]
    Early,
    Late,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PTEConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Future steps `Z`.
    pub horizon: usize,
    /// Observed segments `N_v`.
    pub n_observed: usize,
    pub n_img: usize,
    pub n_obj: usize,
    /// Dropout on attention and feed-forward residual branches.
    pub dropout: f64,
    pub verb_count: usize,
    pub noun_count: usize,
    pub fusion: Fusion,
    pub clip_input_dim: usize,
    pub object_input_dim: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
}

fn default_ffn_mult() -> usize {
    4
}

impl PTEConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("horizon", self.horizon),
            ("n_observed", self.n_observed),
            ("n_img", self.n_img),
            ("n_obj", self.n_obj),
            ("verb_count", self.verb_count),
            ("noun_count", self.noun_count),
            ("ffn_mult", self.ffn_mult),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Parameter(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Parameter("d_model must be even for sinusoidal encodings".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Parameter(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Object tokens per example.
    pub fn object_tokens(&self) -> usize {
        self.n_observed * self.n_img * self.n_obj
    }

    pub fn branches(&self) -> Vec<Branch> {
        match self.fusion {
            Fusion::VideoOnly => vec![Branch::new("", true, false)],
            Fusion::ObjectOnly => vec![Branch::new("", false, true)],
            Fusion::Early => vec![Branch::new("", true, true)],
            Fusion::Late => vec![Branch::new("video.", true, false), Branch::new("object.", false, true)],
        }
    }

    /// Sequence length of one branch.
    pub fn seq_len(&self, branch: &Branch) -> usize {
        let mut l = self.horizon;
        if branch.clips {
            l += self.n_observed;
        }
        if branch.objects {
            l += self.object_tokens();
        }
        l
    }
}

/// One encoder stack and the token classes it reads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Branch {
    pub prefix: String,
    pub clips: bool,
    pub objects: bool,
}

impl Branch {
    fn new(prefix: &str, clips: bool, objects: bool) -> Self {
        Branch {
            prefix: prefix.into(),
            clips,
            objects,
        }
    }

    fn name(&self, p: &str) -> String {
        format!("{}{p}", self.prefix)
    }
}

/// `pe[2i] = sin(pos / 10000^(2i/D))`, `pe[2i+1] = cos(...)`.
pub fn sinusoidal_encoding(position: usize, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::Parameter(format!("sinusoidal encoding needs even dim, got {dim}")));
    }
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let angle = position as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    Ok(out)
}

fn uniform_weight(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let bound = 1.0 / (rows as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data).expect("shape from arguments")
}

fn normal(rows: usize, cols: usize, std: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
    Tensor::matrix(rows, cols, data).expect("shape from arguments")
}

/// Fresh parameters; every tensor is drawn from its own seed stream derived
/// from `seed` and the parameter name, so the set is reproducible.
pub fn init_params<T: Real>(cfg: &PTEConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let d = cfg.d_model;
    let hidden = d * cfg.ffn_mult;
    let mut p = ParamStore::<f64>::new();
    let s = |name: &str| derive_seed(seed, &[hash_str(name)]);
    let linear = |p: &mut ParamStore<f64>, name: String, fan_in: usize, fan_out: usize| -> Result<()> {
        p.insert(format!("{name}.weight"), uniform_weight(fan_in, fan_out, s(&name)))?;
        p.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]))
    };
    for b in cfg.branches() {
        let n = |x: &str| b.name(x);
        if b.clips {
            linear(&mut p, n("clip_proj"), cfg.clip_input_dim, d)?;
        }
        if b.objects {
            linear(&mut p, n("obj_proj"), cfg.object_input_dim, d)?;
            p.insert(n("frame_pos"), Tensor::zeros(&[cfg.n_img, d]))?;
        }
        p.insert(n("pred_tokens"), normal(cfg.horizon, d, INIT_STD, s(&n("pred_tokens"))))?;
        p.insert(n("modality"), normal(3, d, INIT_STD, s(&n("modality"))))?;
        for i in 0..cfg.n_layers {
            let l = |x: &str| n(&format!("layers.{i}.{x}"));
            for ln in ["ln1", "ln2"] {
                p.insert(l(&format!("{ln}.gamma")), Tensor::full(&[d], 1.0))?;
                p.insert(l(&format!("{ln}.beta")), Tensor::zeros(&[d]))?;
            }
            for proj in ["q", "v", "o"] {
                linear(&mut p, l(&format!("attn.{proj}")), d, d)?;
            }
            // no key bias: it shifts every logit of a query row equally
            p.insert(l("attn.k.weight"), uniform_weight(d, d, s(&l("attn.k"))))?;
            linear(&mut p, l("ffn.up"), d, hidden)?;
            linear(&mut p, l("ffn.down"), hidden, d)?;
        }
        p.insert(n("final_ln.gamma"), Tensor::full(&[d], 1.0))?;
        p.insert(n("final_ln.beta"), Tensor::zeros(&[d]))?;
        linear(&mut p, n("verb_head"), d, cfg.verb_count)?;
        linear(&mut p, n("noun_head"), d, cfg.noun_count)?;
    }
    Ok(p.cast())
}

/// Token class, also the row of the modality table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Clip = 0,
    Object = 1,
    Prediction = 2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenMeta {
    pub modality: Modality,
    /// Sinusoidal position: window position for observed tokens, `n_observed + z` for predictions.
    pub segment_pos: usize,
    /// Frame slot for object tokens.
    pub frame_slot: Option<usize>,
    /// Index into [`ModelInput::slots`] for object tokens.
    pub object: Option<usize>,
}

/// Token order and masking of one branch's sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLayout {
    pub tokens: Vec<TokenMeta>,
    /// `true` = masked key (null padding or dropped).
    pub mask: Vec<bool>,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Index of the first prediction token.
    pub fn prediction_start(&self) -> usize {
        self.tokens
            .iter()
            .position(|t| t.modality == Modality::Prediction)
            .unwrap_or(self.tokens.len())
    }
}

fn check_input(cfg: &PTEConfig, branch: &Branch, input: &ModelInput) -> Result<()> {
    if branch.clips && input.clips.shape() != [cfg.n_observed, cfg.clip_input_dim] {
        return Err(Error::Dimension(format!(
            "clip tokens {:?}, config expects [{}, {}]",
            input.clips.shape(),
            cfg.n_observed,
            cfg.clip_input_dim
        )));
    }
    if branch.objects
        && (input.objects.shape() != [cfg.object_tokens(), cfg.object_input_dim]
            || input.slots.len() != cfg.object_tokens())
    {
        return Err(Error::Dimension(format!(
            "object tokens {:?}, config expects [{}, {}]",
            input.objects.shape(),
            cfg.object_tokens(),
            cfg.object_input_dim
        )));
    }
    Ok(())
}

/// Token order, metadata and key mask for one branch. `dropped` marks object
/// tokens removed for this pass.
pub fn sequence_layout(
    cfg: &PTEConfig,
    branch: &Branch,
    input: &ModelInput,
    dropped: Option<&[bool]>,
) -> Result<SequenceLayout> {
    check_input(cfg, branch, input)?;
    let mut tokens = Vec::with_capacity(cfg.seq_len(branch));
    let mut mask = Vec::with_capacity(cfg.seq_len(branch));
    if branch.clips {
        for s in 0..cfg.n_observed {
            tokens.push(TokenMeta {
                modality: Modality::Clip,
                segment_pos: s,
                frame_slot: None,
                object: None,
            });
            mask.push(false);
        }
    }
    if branch.objects {
        if dropped.is_some_and(|d| d.len() != input.slots.len()) {
            return Err(Error::Dimension("object drop mask length".into()));
        }
        for (i, slot) in input.slots.iter().enumerate() {
            if slot.segment_pos >= cfg.n_observed || slot.frame_slot >= cfg.n_img {
                return Err(Error::Index(format!("object token {i} has slot {slot:?}")));
            }
            tokens.push(TokenMeta {
                modality: Modality::Object,
                segment_pos: slot.segment_pos,
                frame_slot: Some(slot.frame_slot),
                object: Some(i),
            });
            mask.push(slot.null || dropped.is_some_and(|d| d[i]));
        }
    }
    for z in 0..cfg.horizon {
        tokens.push(TokenMeta {
            modality: Modality::Prediction,
            segment_pos: cfg.n_observed + z,
            frame_slot: None,
            object: None,
        });
        mask.push(false);
    }
    Ok(SequenceLayout { tokens, mask })
}

/// Constant segment-level encodings `[L, D]` for a layout.
pub fn segment_encodings<T: Real>(layout: &SequenceLayout, dim: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(layout.len() * dim);
    for t in &layout.tokens {
        data.extend(sinusoidal_encoding(t.segment_pos, dim)?.into_iter().map(T::lit));
    }
    Tensor::matrix(layout.len(), dim, data)
}

/// Stochastic parts of a forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    pub training: bool,
    /// Element-wise dropout on the encoded input sequence (training only).
    pub token_dropout: f64,
    /// Object tokens removed from attention for this pass (training only).
    pub dropped_objects: Option<Vec<bool>>,
    pub seed: u64,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        ForwardOptions::default()
    }
}

/// Tape handles of one branch.
#[derive(Clone, Debug)]
pub struct BranchVars {
    pub layout: SequenceLayout,
    pub sequence: Var,
    pub z: Var,
    pub verb_logits: Var,
    pub noun_logits: Var,
    pub attentions: Vec<Var>,
}

/// Tape handles of a full forward pass; logits are fused across branches.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub branches: Vec<BranchVars>,
    pub verb_logits: Var,
    pub noun_logits: Var,
}

fn dropout<T: Real>(tape: &mut Tape<T>, x: Var, rate: f64, seed: u64) -> Result<Var> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let mask = tape.constant(dropout_mask(tape.value(x).shape(), rate, seed)?);
    tape.mul(x, mask)
}

/// Embedded input sequence `[L, D]` of one branch.
pub fn build_sequence<T: Real>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    cfg: &PTEConfig,
    branch: &Branch,
    input: &ModelInput,
    opts: &ForwardOptions,
) -> Result<(Var, SequenceLayout)> {
    let dropped = opts.dropped_objects.as_deref().filter(|_| opts.training);
    let layout = sequence_layout(cfg, branch, input, dropped)?;
    let p = |n: &str| params.get(&branch.name(n));
    let mut parts = Vec::new();
    if branch.clips {
        let x = tape.constant(input.clips.cast());
        parts.push(tape.linear(x, p("clip_proj.weight")?, Some(p("clip_proj.bias")?))?);
    }
    if branch.objects {
        let x = tape.constant(input.objects.cast());
        parts.push(tape.linear(x, p("obj_proj.weight")?, Some(p("obj_proj.bias")?))?);
    }
    parts.push(p("pred_tokens")?);
    let mut x = tape.concat_rows(&parts)?;

    let pe = tape.constant(segment_encodings(&layout, cfg.d_model)?);
    x = tape.add(x, pe)?;
    if branch.objects {
        // row 0 is a fixed zero row for tokens without a frame slot
        let zero = tape.constant(Tensor::zeros(&[1, cfg.d_model]));
        let table = tape.concat_rows(&[zero, p("frame_pos")?])?;
        let idx: Vec<usize> = layout.tokens.iter().map(|t| t.frame_slot.map_or(0, |f| f + 1)).collect();
        let frame = tape.gather_rows(table, &idx)?;
        x = tape.add(x, frame)?;
    }
    let idx: Vec<usize> = layout.tokens.iter().map(|t| t.modality as usize).collect();
    let modality = tape.gather_rows(p("modality")?, &idx)?;
    x = tape.add(x, modality)?;
    if opts.training {
        x = dropout(tape, x, opts.token_dropout, derive_seed(opts.seed, &[hash_str(&branch.prefix), 0]))?;
    }
    Ok((x, layout))
}

/// One pre-norm block: `x + MHA(LN(x))`, then `+ FFN(LN(.))`. Returns the
/// output and the attention node.
pub fn encoder_block<T: Real>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    prefix: &str,
    cfg: &PTEConfig,
    x: Var,
    mask: &[bool],
    opts: &ForwardOptions,
) -> Result<(Var, Var)> {
    let p = |n: &str| params.get(&format!("{prefix}{n}"));
    let eps = T::lit(LN_EPS);
    let rate = if opts.training { cfg.dropout } else { 0.0 };
    let site = |k: u64| derive_seed(opts.seed, &[hash_str(prefix), k]);

    let h = tape.layer_norm(x, p("ln1.gamma")?, p("ln1.beta")?, eps)?;
    let q = tape.linear(h, p("attn.q.weight")?, Some(p("attn.q.bias")?))?;
    let k = tape.linear(h, p("attn.k.weight")?, None)?;
    let v = tape.linear(h, p("attn.v.weight")?, Some(p("attn.v.bias")?))?;
    let attn = tape.attention(q, k, v, mask, cfg.n_heads)?;
    let o = tape.linear(attn, p("attn.o.weight")?, Some(p("attn.o.bias")?))?;
    let o = dropout(tape, o, rate, site(1))?;
    let x = tape.add(x, o)?;

    let h = tape.layer_norm(x, p("ln2.gamma")?, p("ln2.beta")?, eps)?;
    let u = tape.linear(h, p("ffn.up.weight")?, Some(p("ffn.up.bias")?))?;
    let u = tape.gelu(u);
    let f = tape.linear(u, p("ffn.down.weight")?, Some(p("ffn.down.bias")?))?;
    let f = dropout(tape, f, rate, site(2))?;
    Ok((tape.add(x, f)?, attn))
}

/// Record the whole model for one example on `tape`.
pub fn record_forward<T: Real>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    cfg: &PTEConfig,
    input: &ModelInput,
    opts: &ForwardOptions,
) -> Result<ForwardVars> {
    cfg.validate()?;
    let mut branches = Vec::new();
    for b in cfg.branches() {
        let (mut x, layout) = build_sequence(tape, params, cfg, &b, input, opts)?;
        let sequence = x;
        let mut attentions = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let (y, a) = encoder_block(tape, params, &b.name(&format!("layers.{i}.")), cfg, x, &layout.mask, opts)?;
            x = y;
            attentions.push(a);
        }
        let p = |n: &str| params.get(&b.name(n));
        let x = tape.layer_norm(x, p("final_ln.gamma")?, p("final_ln.beta")?, T::lit(LN_EPS))?;
        let start = layout.prediction_start();
        let z = tape.slice_rows(x, start, start + cfg.horizon)?;
        let verb_logits = tape.linear(z, p("verb_head.weight")?, Some(p("verb_head.bias")?))?;
        let noun_logits = tape.linear(z, p("noun_head.weight")?, Some(p("noun_head.bias")?))?;
        branches.push(BranchVars {
            layout,
            sequence,
            z,
            verb_logits,
            noun_logits,
            attentions,
        });
    }
    let (verb_logits, noun_logits) = match branches.as_slice() {
        [one] => (one.verb_logits, one.noun_logits),
        many => {
            let mean = |tape: &mut Tape<T>, vars: Vec<Var>| -> Result<Var> {
                let mut acc = vars[0];
                for v in &vars[1..] {
                    acc = tape.add(acc, *v)?;
                }
                Ok(tape.scale(acc, T::lit(1.0 / vars.len() as f64)))
            };
            (
                mean(tape, many.iter().map(|b| b.verb_logits).collect())?,
                mean(tape, many.iter().map(|b| b.noun_logits).collect())?,
            )
        }
    };
    Ok(ForwardVars {
        branches,
        verb_logits,
        noun_logits,
    })
}

/// Materialised outputs of one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutput<T> {
    pub layout: SequenceLayout,
    /// `[Z, D]`
    pub z_features: Tensor<T>,
    /// Per layer `[heads, L, L]`, post-softmax.
    pub attentions: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<T> {
    /// `[Z, verb_count]`
    pub verb_logits: Tensor<T>,
    /// `[Z, noun_count]`
    pub noun_logits: Tensor<T>,
    pub branches: Vec<BranchOutput<T>>,
}

/// Forward pass without gradients.
pub fn pte_forward<T: Real>(
    params: &ParamStore<T>,
    cfg: &PTEConfig,
    input: &ModelInput,
    opts: &ForwardOptions,
) -> Result<EncoderOutput<T>> {
    let mut tape = Tape::new();
    let bound = tape.bind_constants(params);
    let vars = record_forward(&mut tape, &bound, cfg, input, opts)?;
    let out = EncoderOutput {
        verb_logits: tape.value(vars.verb_logits).clone(),
        noun_logits: tape.value(vars.noun_logits).clone(),
        branches: vars
            .branches
            .iter()
            .map(|b| BranchOutput {
                layout: b.layout.clone(),
                z_features: tape.value(b.z).clone(),
                attentions: b
                    .attentions
                    .iter()
                    .map(|a| tape.attention_probs(*a).expect("attention node"))
                    .collect(),
            })
            .collect(),
    };
    if !out.verb_logits.is_finite() || !out.noun_logits.is_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(out)
}

/// Shared verb and noun heads applied to every step of `z_features` `[Z, D]`.
pub fn decode<T: Real>(
    params: &ParamStore<T>,
    prefix: &str,
    z_features: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let head = |n: &str| -> Result<Tensor<T>> {
        crate::numcore::linear(
            z_features,
            params.get(&format!("{prefix}{n}_head.weight"))?,
            params.get(&format!("{prefix}{n}_head.bias"))?,
        )
    };
    Ok((head("verb")?, head("noun")?))
}

/// Element-wise mean of two logit tensors.
pub fn late_fuse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "late fusion of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let half = T::lit(0.5);
    let data = a.data().iter().zip(b.data()).map(|(x, y)| (*x + *y) * half).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Row-wise argmax; ties go to the lower index.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            logits
                .row(r)
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, v)| if *v > best.1 { (i, *v) } else { best })
                .0
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::tokens::TokenSlot;

    pub(crate) fn tiny_config(fusion: Fusion) -> PTEConfig {
        PTEConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            horizon: 3,
            n_observed: 2,
            n_img: 2,
            n_obj: 2,
            dropout: 0.1,
            verb_count: 4,
            noun_count: 5,
            fusion,
            clip_input_dim: 3,
            object_input_dim: 4,
            ffn_mult: 2,
        }
    }

    pub(crate) fn tiny_input(cfg: &PTEConfig, seed: u64) -> ModelInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut slots = Vec::new();
        for s in 0..cfg.n_observed {
            for f in 0..cfg.n_img {
                for k in 0..cfg.n_obj {
                    slots.push(TokenSlot {
                        segment_pos: s,
                        segment_idx: s as u32,
                        frame_slot: f,
                        frame_idx: f as u32,
                        slot: k,
                        whole_frame: k == 0,
                        null: k > 0 && (s + f) % 2 == 1,
                        category: None,
                    });
                }
            }
        }
        let mut fill = |r, c| {
            Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let mut objects = fill(slots.len(), cfg.object_input_dim);
        for (i, s) in slots.iter().enumerate() {
            if s.null {
                let c = cfg.object_input_dim;
                objects.data_mut()[i * c..(i + 1) * c].fill(0.0);
            }
        }
        ModelInput {
            example_id: "v:1".into(),
            clips: fill(cfg.n_observed, cfg.clip_input_dim),
            objects,
            slots,
            target_verbs: vec![0, 1, 2],
            target_nouns: vec![4, 3, 2],
        }
    }

    #[test]
    fn sinusoid_examples() {
        let pe = sinusoidal_encoding(0, 8).unwrap();
        assert_eq!(pe, [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let d = 16;
        let pe = sinusoidal_encoding(10000, d).unwrap();
        let i = d / 2 - 1;
        let want = (10000.0 / 10000f64.powf((d - 2) as f64 / d as f64)).sin();
        assert_eq!(pe[2 * i], want);
        let p1 = sinusoidal_encoding(1, d).unwrap();
        assert!((p1[0] - 0.0 - 1f64.sin()).abs() < 1e-15);
        assert!(sinusoidal_encoding(3, 7).is_err());
    }

    #[test]
    fn init_contract() {
        let cfg = PTEConfig {
            d_model: 16,
            ..tiny_config(Fusion::Early)
        };
        let a: ParamStore<f64> = init_params(&cfg, 3).unwrap();
        let b: ParamStore<f64> = init_params(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.get("frame_pos").unwrap().data().iter().all(|v| *v == 0.0));
        assert_eq!(a.get("pred_tokens").unwrap().shape(), &[3, 16]);
        assert_eq!(a.get("modality").unwrap().shape(), &[3, 16]);
        assert!(!a.contains("video.clip_proj.weight"));
        let late: ParamStore<f64> = init_params(&tiny_config(Fusion::Late), 3).unwrap();
        assert!(late.contains("video.clip_proj.weight") && !late.contains("video.obj_proj.weight"));
        assert!(late.contains("object.frame_pos") && !late.contains("object.clip_proj.weight"));
    }

    #[test]
    fn modality_init_std() {
        let cfg = PTEConfig {
            d_model: 3334,
            n_heads: 2,
            ..tiny_config(Fusion::VideoOnly)
        };
        let p: ParamStore<f64> = init_params(&cfg, 1).unwrap();
        let m = p.get("modality").unwrap().data();
        assert!(m.len() >= 10_000);
        let mean = m.iter().sum::<f64>() / m.len() as f64;
        let var = m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m.len() as f64;
        assert!((var.sqrt() / 0.02 - 1.0).abs() < 0.1);
    }

    #[test]
    fn default_sequence_length() {
        let cfg = PTEConfig {
            d_model: 8,
            n_layers: 5,
            n_heads: 8,
            horizon: 20,
            n_observed: 3,
            n_img: 4,
            n_obj: 11,
            dropout: 0.1,
            verb_count: 2,
            noun_count: 2,
            fusion: Fusion::Early,
            clip_input_dim: 2,
            object_input_dim: 2,
            ffn_mult: 4,
        };
        assert_eq!(cfg.seq_len(&cfg.branches()[0]), 155);
    }

    #[test]
    fn encodings_by_token_class() {
        let cfg = tiny_config(Fusion::Early);
        let mut params: ParamStore<f64> = init_params(&cfg, 0).unwrap();
        for name in ["clip_proj.weight", "obj_proj.weight"] {
            params.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let fp = params.get_mut("frame_pos").unwrap();
        for (i, v) in fp.data_mut().iter_mut().enumerate() {
            *v = i as f64 * 0.1;
        }
        let input = tiny_input(&cfg, 0);
        let mut tape = Tape::new();
        let bound = tape.bind(&params);
        let (x, layout) = build_sequence(&mut tape, &bound, &cfg, &cfg.branches()[0], &input, &ForwardOptions::eval()).unwrap();
        let x = tape.value(x).clone();
        let modality = params.get("modality").unwrap();
        let fp = params.get("frame_pos").unwrap();
        let n_v = cfg.n_observed;
        // object token 3 is segment 0, frame 1
        let obj = n_v + 3;
        assert_eq!(layout.tokens[obj].segment_pos, 0);
        assert_eq!(layout.tokens[obj].frame_slot, Some(1));
        for c in 0..cfg.d_model {
            let delta = x.row(obj)[c] - x.row(0)[c];
            let want = modality.row(1)[c] - modality.row(0)[c] + fp.row(1)[c];
            assert!((delta - want).abs() < 1e-12);
        }
        let enc: Tensor<f64> = segment_encodings(&layout, cfg.d_model).unwrap();
        assert_eq!(enc.row(n_v), enc.row(n_v + 3));
        assert_ne!(enc.row(n_v), enc.row(n_v + cfg.n_img * cfg.n_obj));
        let pred = layout.prediction_start();
        assert_eq!(layout.tokens[pred].segment_pos, n_v);
        assert_eq!(layout.tokens[pred + 2].segment_pos, n_v + 2);
    }

    #[test]
    fn forward_shapes_and_attention_rows() {
        for fusion in [Fusion::VideoOnly, Fusion::ObjectOnly, Fusion::Early, Fusion::Late] {
            let cfg = tiny_config(fusion);
            let params: ParamStore<f64> = init_params(&cfg, 5).unwrap();
            let input = tiny_input(&cfg, 1);
            let out = pte_forward(&params, &cfg, &input, &ForwardOptions::eval()).unwrap();
            assert_eq!(out.verb_logits.shape(), &[3, 4]);
            assert_eq!(out.noun_logits.shape(), &[3, 5]);
            for b in &out.branches {
                assert_eq!(b.z_features.shape(), &[3, 8]);
                assert_eq!(b.attentions.len(), cfg.n_layers);
                let a = &b.attentions[0];
                let l = b.layout.len();
                assert_eq!(a.shape(), &[2, l, l]);
                for row in a.data().chunks(l) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                    for (p, m) in row.iter().zip(&b.layout.mask) {
                        if *m {
                            assert!(p.abs() < 1e-8);
                        }
                    }
                }
            }
            assert_eq!(out, pte_forward(&params, &cfg, &input, &ForwardOptions::eval()).unwrap());
        }
    }

    #[test]
    fn zero_value_and_ffn_give_identity_block() {
        let cfg = tiny_config(Fusion::VideoOnly);
        let mut params: ParamStore<f64> = init_params(&cfg, 5).unwrap();
        for n in ["attn.v.weight", "attn.o.weight", "ffn.down.weight"] {
            params.get_mut(&format!("layers.0.{n}")).unwrap().data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let bound = tape.bind(&params);
        let x = tape.constant(Tensor::matrix(3, 8, (0..24).map(|v| v as f64 * 0.1).collect()).unwrap());
        let (y, _) = encoder_block(&mut tape, &bound, "layers.0.", &cfg, x, &[false; 3], &ForwardOptions::eval()).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let one = tape.constant(Tensor::matrix(1, 8, vec![0.3; 8]).unwrap());
        let (_, a) = encoder_block(&mut tape, &bound, "layers.0.", &cfg, one, &[false], &ForwardOptions::eval()).unwrap();
        assert_eq!(tape.attention_probs(a).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn object_order_within_frame_does_not_matter() {
        let cfg = PTEConfig {
            n_obj: 3,
            ..tiny_config(Fusion::Early)
        };
        let params: ParamStore<f64> = init_params(&cfg, 2).unwrap();
        let mut input = tiny_input(&cfg, 3);
        for s in &mut input.slots {
            s.null = false;
        }
        let base = pte_forward(&params, &cfg, &input, &ForwardOptions::eval()).unwrap();
        // swap two detections of frame 1 in segment 0
        let (i, j) = (cfg.n_obj + 1, cfg.n_obj + 2);
        let c = cfg.object_input_dim;
        let mut swapped = input.clone();
        let data = swapped.objects.data_mut();
        for k in 0..c {
            data.swap(i * c + k, j * c + k);
        }
        let out = pte_forward(&params, &cfg, &swapped, &ForwardOptions::eval()).unwrap();
        let (a, b) = (&base.branches[0].z_features, &out.branches[0].z_features);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn decode_and_fuse() {
        let cfg = tiny_config(Fusion::VideoOnly);
        let mut params: ParamStore<f64> = init_params(&cfg, 5).unwrap();
        let z = Tensor::zeros(&[3, 8]);
        let (v, n) = decode(&params, "", &z).unwrap();
        assert!(v.data().iter().chain(n.data()).all(|x| *x == 0.0));
        params.get_mut("verb_head.bias").unwrap().data_mut()[1] = 1.0;
        let z = Tensor::matrix(2, 8, [0.5; 8].iter().chain(&[0.5; 8]).copied().collect()).unwrap();
        let (v, _) = decode(&params, "", &z).unwrap();
        assert_eq!(v.row(0), v.row(1));

        let a = Tensor::from_vec(vec![2.0, 0.0]).unwrap();
        let b = Tensor::from_vec(vec![0.0, 2.0]).unwrap();
        assert_eq!(late_fuse(&a, &b).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(late_fuse(&a, &a).unwrap(), a);
        assert!(late_fuse(&a, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn tiny_end_to_end_gradients() {
        let cfg = tiny_config(Fusion::Early);
        let params: ParamStore<f64> = init_params(&cfg, 9).unwrap();
        let input = tiny_input(&cfg, 4);
        let report = crate::numcore::grad_check(
            |tape, bound| {
                let v = record_forward(tape, bound, &cfg, &input, &ForwardOptions::eval())?;
                let lv = tape.cross_entropy(v.verb_logits, &input.target_verbs)?;
                let ln = tape.cross_entropy(v.noun_logits, &input.target_nouns)?;
                let s = tape.add(lv, ln)?;
                Ok(tape.scale(s, 0.5))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}
