//! Miniature pre-layer-norm transformer encoder with mask-aware multi-head
//! attention, first-position pooling and a three-layer tanh regression head.
//!
//! One [`ModelParams`] value scores every [`TaskFormat`]; the format only
//! changes how the input is packed and which mask the attention layers use.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::corpus::TokenSeq;
use crate::error::{Error, Result};
use crate::mra::{build_mask, AttnMask, MaskVariant};
use crate::packing::{pack, PackedInput, Segment, TaskFormat};
use crate::tensor::{self, Matrix};

/// Mask variant used for each input format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatMasks {
    #[serde(rename = "ref")]
    pub ref_format: MaskVariant,
    #[serde(rename = "src")]
    pub src_format: MaskVariant,
    #[serde(rename = "src+ref")]
    pub src_ref_format: MaskVariant,
}

impl Default for FormatMasks {
    fn default() -> Self {
        Self {
            ref_format: MaskVariant::Full,
            src_format: MaskVariant::Full,
            src_ref_format: MaskVariant::NoHypToSrc,
        }
    }
}

impl FormatMasks {
    pub fn get(&self, format: TaskFormat) -> MaskVariant {
        match format {
            TaskFormat::Ref => self.ref_format,
            TaskFormat::Src => self.src_format,
            TaskFormat::SrcRef => self.src_ref_format,
        }
    }

    pub fn set(&mut self, format: TaskFormat, variant: MaskVariant) {
        match format {
            TaskFormat::Ref => self.ref_format = variant,
            TaskFormat::Src => self.src_format = variant,
            TaskFormat::SrcRef => self.src_ref_format = variant,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub head_dims: [usize; 3],
    pub max_len: usize,
    pub masks: FormatMasks,
    /// Adds a learned per-segment embedding to each position.
    pub segment_embeddings: bool,
    pub precision: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ffn: 256,
            head_dims: [192, 64, 1],
            max_len: 128,
            masks: FormatMasks::default(),
            segment_embeddings: false,
            precision: "f64".into(),
        }
    }
}

impl ModelConfig {
    /// Head widths `(3d, d, 1)` for the given model width.
    pub fn scaled_head(d_model: usize) -> [usize; 3] {
        [3 * d_model, d_model, 1]
    }

    pub fn head_width(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.head_dims[2] != 1 || self.head_dims[..2].contains(&0) {
            return bad(format!("head_dims {:?} must be positive and end in 1", self.head_dims));
        }
        if self.vocab_size < 4 || self.max_len == 0 || self.d_ffn == 0 {
            return bad("vocab_size ≥ 4, max_len and d_ffn must be positive".into());
        }
        if self.precision != "f64" {
            return bad(format!("unsupported precision {:?}", self.precision));
        }
        for format in TaskFormat::ALL {
            let v = self.masks.get(format);
            if !v.supports(format) {
                return bad(format!("mask {v} cannot apply to {format} inputs"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub w_query: Matrix,
    pub b_query: Matrix,
    pub w_key: Matrix,
    pub b_key: Matrix,
    pub w_value: Matrix,
    pub b_value: Matrix,
    pub w_out: Matrix,
    pub b_out: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub w_ffn_in: Matrix,
    pub b_ffn_in: Matrix,
    pub w_ffn_out: Matrix,
    pub b_ffn_out: Matrix,
}

/// All trainable weights. [`ModelParams::tensors`] fixes the declaration
/// order used by gradients, the optimizer and checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub segment_embedding: Option<Matrix>,
    pub layers: Vec<LayerParams>,
    pub final_ln_gain: Matrix,
    pub final_ln_bias: Matrix,
    pub head_w1: Matrix,
    pub head_b1: Matrix,
    pub head_w2: Matrix,
    pub head_b2: Matrix,
    pub head_w3: Matrix,
    pub head_b3: Matrix,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized buffer")
}

fn linear(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> (Matrix, Matrix) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (uniform(rng, fan_in, fan_out, bound), uniform(rng, 1, fan_out, bound))
}

impl ModelParams {
    /// Seeded initialization. Linear layers use `U(±1/√fan_in)`, embeddings
    /// `U(±0.1·√3)`, layer norms start at the identity.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let emb = 0.1 * 3f64.sqrt();
        let token_embedding = uniform(&mut rng, config.vocab_size, d, emb);
        let position_embedding = uniform(&mut rng, config.max_len, d, emb);
        let segment_embedding = config
            .segment_embeddings
            .then(|| uniform(&mut rng, 3, d, emb));
        let layers = (0..config.n_layers)
            .map(|_| {
                let (w_query, b_query) = linear(&mut rng, d, d);
                let (w_key, b_key) = linear(&mut rng, d, d);
                let (w_value, b_value) = linear(&mut rng, d, d);
                let (w_out, b_out) = linear(&mut rng, d, d);
                let (w_ffn_in, b_ffn_in) = linear(&mut rng, d, config.d_ffn);
                let (w_ffn_out, b_ffn_out) = linear(&mut rng, config.d_ffn, d);
                LayerParams {
                    ln1_gain: Matrix::filled(1, d, 1.0),
                    ln1_bias: Matrix::zeros(1, d),
                    w_query,
                    b_query,
                    w_key,
                    b_key,
                    w_value,
                    b_value,
                    w_out,
                    b_out,
                    ln2_gain: Matrix::filled(1, d, 1.0),
                    ln2_bias: Matrix::zeros(1, d),
                    w_ffn_in,
                    b_ffn_in,
                    w_ffn_out,
                    b_ffn_out,
                }
            })
            .collect();
        let [h1, h2, h3] = config.head_dims;
        let (head_w1, head_b1) = linear(&mut rng, d, h1);
        let (head_w2, head_b2) = linear(&mut rng, h1, h2);
        let (head_w3, head_b3) = linear(&mut rng, h2, h3);
        Ok(Self {
            token_embedding,
            position_embedding,
            segment_embedding,
            layers,
            final_ln_gain: Matrix::filled(1, d, 1.0),
            final_ln_bias: Matrix::zeros(1, d),
            head_w1,
            head_b1,
            head_w2,
            head_b2,
            head_w3,
            head_b3,
        })
    }

    /// Named tensors in declaration order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("token_embedding".into(), &self.token_embedding),
            ("position_embedding".into(), &self.position_embedding),
        ];
        if let Some(seg) = &self.segment_embedding {
            out.push(("segment_embedding".into(), seg));
        }
        for (i, l) in self.layers.iter().enumerate() {
            for (name, m) in [
                ("ln1_gain", &l.ln1_gain),
                ("ln1_bias", &l.ln1_bias),
                ("w_query", &l.w_query),
                ("b_query", &l.b_query),
                ("w_key", &l.w_key),
                ("b_key", &l.b_key),
                ("w_value", &l.w_value),
                ("b_value", &l.b_value),
                ("w_out", &l.w_out),
                ("b_out", &l.b_out),
                ("ln2_gain", &l.ln2_gain),
                ("ln2_bias", &l.ln2_bias),
                ("w_ffn_in", &l.w_ffn_in),
                ("b_ffn_in", &l.b_ffn_in),
                ("w_ffn_out", &l.w_ffn_out),
                ("b_ffn_out", &l.b_ffn_out),
            ] {
                out.push((format!("layer{i}.{name}"), m));
            }
        }
        for (name, m) in [
            ("final_ln_gain", &self.final_ln_gain),
            ("final_ln_bias", &self.final_ln_bias),
            ("head_w1", &self.head_w1),
            ("head_b1", &self.head_b1),
            ("head_w2", &self.head_w2),
            ("head_b2", &self.head_b2),
            ("head_w3", &self.head_w3),
            ("head_b3", &self.head_b3),
        ] {
            out.push((name.into(), m));
        }
        out
    }

    /// Mutable tensors, same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![&mut self.token_embedding, &mut self.position_embedding];
        if let Some(seg) = &mut self.segment_embedding {
            out.push(seg);
        }
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.w_query,
                &mut l.b_query,
                &mut l.w_key,
                &mut l.b_key,
                &mut l.w_value,
                &mut l.b_value,
                &mut l.w_out,
                &mut l.b_out,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
                &mut l.w_ffn_in,
                &mut l.b_ffn_in,
                &mut l.w_ffn_out,
                &mut l.b_ffn_out,
            ]);
        }
        out.extend([
            &mut self.final_ln_gain,
            &mut self.final_ln_bias,
            &mut self.head_w1,
            &mut self.head_b1,
            &mut self.head_w2,
            &mut self.head_b2,
            &mut self.head_w3,
            &mut self.head_b3,
        ]);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    /// Checks that tensor shapes match `config`.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let reference = ModelParams::init(config, 0)?;
        let mine = self.tensors();
        let theirs = reference.tensors();
        if mine.len() != theirs.len() {
            return Err(Error::Shape(format!(
                "{} tensors, config implies {}",
                mine.len(),
                theirs.len()
            )));
        }
        for ((name, a), (_, b)) in mine.iter().zip(&theirs) {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "{name}: {:?}, config implies {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Parameter leaves registered on a tape, in declaration order.
pub struct ParamNodes {
    nodes: Vec<NodeId>,
}

impl ParamNodes {
    pub fn register<'a>(tape: &mut Tape<'a>, params: &'a ModelParams) -> Self {
        Self {
            nodes: params.tensors().into_iter().map(|(_, m)| tape.borrowed(m)).collect(),
        }
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.nodes
    }

    fn layout(&self, has_segment: bool, n_layers: usize) -> NodeLayout<'_> {
        let base = if has_segment { 3 } else { 2 };
        NodeLayout {
            nodes: &self.nodes,
            base,
            n_layers,
        }
    }
}

struct NodeLayout<'n> {
    nodes: &'n [NodeId],
    base: usize,
    n_layers: usize,
}

impl NodeLayout<'_> {
    fn layer(&self, i: usize, field: usize) -> NodeId {
        self.nodes[self.base + i * 16 + field]
    }

    fn tail(&self, field: usize) -> NodeId {
        self.nodes[self.base + self.n_layers * 16 + field]
    }
}

/// Intermediate node ids of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Residual stream after each encoder layer.
    pub layer_outputs: Vec<NodeId>,
    /// Attention weights per layer, per head.
    pub attention: Vec<Vec<NodeId>>,
    /// Final-layer-normed encoder output, `L × d`.
    pub encoded: NodeId,
    pub pooled: NodeId,
    pub prediction: NodeId,
}

/// Records a full forward pass on `tape`.
pub fn forward<'a>(
    tape: &mut Tape<'a>,
    nodes: &ParamNodes,
    params: &'a ModelParams,
    config: &ModelConfig,
    packed: &PackedInput,
    mask: &AttnMask,
) -> Result<ForwardTrace> {
    forward_layers(tape, nodes, params, config, packed, mask, config.n_layers)
}

/// Forward pass through the first `layers` encoder layers, then the final
/// layer norm, pooling and head.
pub fn forward_layers<'a>(
    tape: &mut Tape<'a>,
    nodes: &ParamNodes,
    params: &'a ModelParams,
    config: &ModelConfig,
    packed: &PackedInput,
    mask: &AttnMask,
    layers: usize,
) -> Result<ForwardTrace> {
    let len = packed.len();
    if len > config.max_len {
        return Err(Error::SequenceTooLong {
            len,
            max_len: config.max_len,
        });
    }
    if mask.len() != len {
        return Err(Error::Shape(format!("mask of {} for sequence of {len}", mask.len())));
    }
    let layout = nodes.layout(params.segment_embedding.is_some(), params.layers.len());
    let ids: Vec<usize> = packed.tokens().iter().map(|&t| t as usize).collect();
    let tok = tape.gather(nodes.nodes[0], ids)?;
    let pos = tape.gather(nodes.nodes[1], (0..len).collect())?;
    let mut x = tape.add(tok, pos)?;
    if params.segment_embedding.is_some() {
        let seg_ids = (0..len)
            .map(|i| packed.spans().segment_at(i).map_or(0, Segment::index))
            .collect();
        let seg = tape.gather(nodes.nodes[2], seg_ids)?;
        x = tape.add(x, seg)?;
    }

    let mask_const = mask.any_blocked().then(|| tape.constant(mask.as_matrix().clone()));
    let heads = config.n_heads;
    let dh = config.head_width();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    let mut layer_outputs = Vec::new();
    let mut attention = Vec::new();
    for li in 0..layers.min(params.layers.len()) {
        let p = |f| layout.layer(li, f);
        let a = tape.layer_norm(x, p(0), p(1))?;
        let q = tape.affine(a, p(2), p(3))?;
        let k = tape.affine(a, p(4), p(5))?;
        let v = tape.affine(a, p(6), p(7))?;
        let mut head_out = Vec::with_capacity(heads);
        let mut head_att = Vec::with_capacity(heads);
        for h in 0..heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (tape.slice_cols(q, s, e)?, tape.slice_cols(k, s, e)?, tape.slice_cols(v, s, e)?)
            };
            let logits = tape.matmul_nt(qh, kh)?;
            let logits = tape.scale(logits, inv_sqrt);
            let att = tape.masked_softmax(logits, mask_const)?;
            head_att.push(att);
            head_out.push(tape.matmul(att, vh)?);
        }
        let merged = if heads == 1 { head_out[0] } else { tape.concat_cols(head_out)? };
        let o = tape.affine(merged, p(8), p(9))?;
        x = tape.add(x, o)?;
        let b = tape.layer_norm(x, p(10), p(11))?;
        let f = tape.affine(b, p(12), p(13))?;
        let f = tape.gelu(f);
        let f = tape.affine(f, p(14), p(15))?;
        x = tape.add(x, f)?;
        layer_outputs.push(x);
        attention.push(head_att);
    }

    let encoded = tape.layer_norm(x, layout.tail(0), layout.tail(1))?;
    let pooled = tape.select_row(encoded, 0)?;
    let h1 = tape.affine(pooled, layout.tail(2), layout.tail(3))?;
    let h1 = tape.tanh(h1);
    let h2 = tape.affine(h1, layout.tail(4), layout.tail(5))?;
    let h2 = tape.tanh(h2);
    let prediction = tape.affine(h2, layout.tail(6), layout.tail(7))?;
    Ok(ForwardTrace {
        layer_outputs,
        attention,
        encoded,
        pooled,
        prediction,
    })
}

/// `L × d` contextual representations.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput(pub Matrix);

/// Token plus positional (plus optional segment) embeddings.
pub fn embed(packed: &PackedInput, params: &ModelParams, config: &ModelConfig) -> Result<Matrix> {
    if packed.len() > config.max_len {
        return Err(Error::SequenceTooLong {
            len: packed.len(),
            max_len: config.max_len,
        });
    }
    let ids: Vec<usize> = packed.tokens().iter().map(|&t| t as usize).collect();
    let mut out = tensor::gather_rows(&params.token_embedding, &ids)?;
    let pos = tensor::gather_rows(&params.position_embedding, &(0..packed.len()).collect::<Vec<_>>())?;
    out.add_assign(&pos);
    if let Some(seg) = &params.segment_embedding {
        let seg_ids: Vec<usize> = (0..packed.len())
            .map(|i| packed.spans().segment_at(i).map_or(0, Segment::index))
            .collect();
        out.add_assign(&tensor::gather_rows(seg, &seg_ids)?);
    }
    Ok(out)
}

/// Single-head scaled dot-product attention with an additive mask. Returns
/// the output `A·V` and the attention weights `A`.
pub fn masked_attention(
    query: &Matrix,
    key: &Matrix,
    value: &Matrix,
    mask: Option<&AttnMask>,
) -> Result<(Matrix, Matrix)> {
    if key.rows() != value.rows() {
        return Err(Error::Shape(format!(
            "keys {:?} and values {:?}",
            key.shape(),
            value.shape()
        )));
    }
    let mut logits = tensor::matmul_nt(query, key)?;
    logits.scale_in_place(1.0 / (query.cols() as f64).sqrt());
    let weights = tensor::masked_softmax(&logits, mask.map(AttnMask::as_matrix))?;
    let out = tensor::matmul(&weights, value)?;
    Ok((out, weights))
}

pub fn encode(
    packed: &PackedInput,
    params: &ModelParams,
    config: &ModelConfig,
    variant: MaskVariant,
) -> Result<EncoderOutput> {
    let mask = build_mask(variant, packed)?;
    let mut tape = Tape::new();
    let nodes = ParamNodes::register(&mut tape, params);
    let trace = forward(&mut tape, &nodes, params, config, packed, &mask)?;
    Ok(EncoderOutput(tape.value(trace.encoded).clone()))
}

/// Representation of the first position.
pub fn pool_first(encoded: &EncoderOutput) -> Result<Matrix> {
    if encoded.0.rows() == 0 {
        return Err(Error::Shape("empty encoder output".into()));
    }
    Ok(Matrix::row_vector(encoded.0.row(0).to_vec()))
}

/// Regression head: three affine maps with tanh between them.
pub fn predict(pooled: &Matrix, params: &ModelParams) -> Result<f64> {
    let h = tensor::add_row(&tensor::matmul(pooled, &params.head_w1)?, &params.head_b1)?.map(f64::tanh);
    let h = tensor::add_row(&tensor::matmul(&h, &params.head_w2)?, &params.head_b2)?.map(f64::tanh);
    let p = tensor::add_row(&tensor::matmul(&h, &params.head_w3)?, &params.head_b3)?;
    Ok(p.item())
}

/// Packs, masks with `variant` (or the configured mask for `format`), and
/// returns the scalar prediction.
pub fn score_packed(
    packed: &PackedInput,
    params: &ModelParams,
    config: &ModelConfig,
    variant: Option<MaskVariant>,
) -> Result<f64> {
    let variant = variant.unwrap_or_else(|| config.masks.get(packed.format()));
    let mask = build_mask(variant, packed)?;
    let mut tape = Tape::new();
    let nodes = ParamNodes::register(&mut tape, params);
    let trace = forward(&mut tape, &nodes, params, config, packed, &mask)?;
    let p = tape.value(trace.prediction).item();
    if !p.is_finite() {
        return Err(Error::NonFinite(format!("prediction {p}")));
    }
    Ok(p)
}

pub fn score(
    hyp: &TokenSeq,
    src: Option<&TokenSeq>,
    reference: Option<&TokenSeq>,
    format: TaskFormat,
    params: &ModelParams,
    config: &ModelConfig,
    variant: Option<MaskVariant>,
) -> Result<f64> {
    let packed = pack(hyp, src, reference, format)?;
    score_packed(&packed, params, config, variant)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mra::build_mask_for_spans;
    use crate::packing::Spans;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 40,
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            d_ffn: 32,
            head_dims: ModelConfig::scaled_head(16),
            max_len: 32,
            ..ModelConfig::default()
        }
    }

    fn seq(ids: &[u32]) -> TokenSeq {
        TokenSeq::new(ids.to_vec()).unwrap()
    }

    fn sample_packed(format: TaskFormat) -> PackedInput {
        pack(&seq(&[5, 6, 7]), Some(&seq(&[8, 9])), Some(&seq(&[10, 11, 12])), format).unwrap()
    }

    #[test]
    fn default_config_is_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.head_dims, ModelConfig::scaled_head(c.d_model));
        let mut bad = c.clone();
        bad.n_heads = 3;
        assert!(bad.validate().is_err());
        let mut bad = c;
        bad.masks.ref_format = MaskVariant::NoHypToSrc;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn embed_shapes_and_zero_tables() {
        let config = tiny_config();
        let mut params = ModelParams::init(&config, 0).unwrap();
        let packed = sample_packed(TaskFormat::SrcRef);
        assert_eq!(embed(&packed, &params, &config).unwrap().shape(), (packed.len(), 16));
        params.token_embedding = Matrix::zeros(40, 16);
        params.position_embedding = Matrix::zeros(32, 16);
        assert!(embed(&packed, &params, &config)
            .unwrap()
            .as_slice()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn embed_selects_rows() {
        let config = ModelConfig {
            vocab_size: 16,
            d_model: 16,
            n_heads: 1,
            ..tiny_config()
        };
        let mut params = ModelParams::init(&config, 0).unwrap();
        let mut eye = Matrix::zeros(16, 16);
        for i in 0..16 {
            eye.set(i, i, 1.0);
        }
        params.token_embedding = eye;
        params.position_embedding = Matrix::zeros(32, 16);
        let packed = pack(&seq(&[5, 9]), None, Some(&seq(&[7])), TaskFormat::Ref).unwrap();
        let e = embed(&packed, &params, &config).unwrap();
        for (row, &tok) in packed.tokens().iter().enumerate() {
            for c in 0..16 {
                assert_eq!(e.get(row, c), if c == tok as usize { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn embed_rejects_long_sequences() {
        let config = ModelConfig {
            max_len: 5,
            ..tiny_config()
        };
        let params = ModelParams::init(&config, 0).unwrap();
        let err = embed(&sample_packed(TaskFormat::Ref), &params, &config).unwrap_err();
        assert!(err.to_string().starts_with("sequence too long"));
    }

    #[test]
    fn single_position_attention_is_identity() {
        let q = Matrix::row_vector(vec![0.3, -0.2]);
        let v = Matrix::row_vector(vec![1.5, 2.5]);
        let (out, w) = masked_attention(&q, &q, &v, None).unwrap();
        assert_eq!(w.as_slice(), &[1.0]);
        assert_eq!(out, v);
    }

    #[test]
    fn hand_softmax_three_by_three() {
        // q = k = I (d = 3) → logits = I/√3; block query 0 from key 2.
        let mut eye = Matrix::zeros(3, 3);
        for i in 0..3 {
            eye.set(i, i, 1.0);
        }
        let mask = build_mask_for_spans(
            MaskVariant::NoRefToHyp,
            &Spans::from_widths(TaskFormat::Ref, &[2, 1]).unwrap(),
        )
        .unwrap();
        let (_, w) = masked_attention(&eye, &eye, &eye, Some(&mask)).unwrap();
        let e = (1.0 / 3f64.sqrt()).exp();
        // Rows 0,1 (Hyp) cannot see key 2 (Ref).
        let expected = [
            [e / (e + 1.0), 1.0 / (e + 1.0), 0.0],
            [1.0 / (e + 1.0), e / (e + 1.0), 0.0],
            [1.0 / (e + 2.0), 1.0 / (e + 2.0), e / (e + 2.0)],
        ];
        for (r, row) in expected.iter().enumerate() {
            for (c, &x) in row.iter().enumerate() {
                assert!((w.get(r, c) - x).abs() < 1e-15, "({r},{c})");
            }
        }
    }

    #[test]
    fn encode_shapes_for_each_format() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 1).unwrap();
        for format in TaskFormat::ALL {
            let packed = sample_packed(format);
            let out = encode(&packed, &params, &config, MaskVariant::Full).unwrap();
            assert_eq!(out.0.shape(), (packed.len(), 16));
            assert_eq!(out, encode(&packed, &params, &config, MaskVariant::Full).unwrap());
        }
        let err = encode(&sample_packed(TaskFormat::Ref), &params, &config, MaskVariant::Hard).unwrap_err();
        assert!(err.to_string().starts_with("mask/format mismatch"));
    }

    #[test]
    fn pool_takes_first_row_only() {
        let mut m = Matrix::zeros(3, 4);
        m.set(0, 0, 1.0);
        m.set(1, 3, 7.0);
        m.set(2, 2, -1.0);
        let pooled = pool_first(&EncoderOutput(m.clone())).unwrap();
        assert_eq!(pooled.as_slice(), &[1.0, 0.0, 0.0, 0.0]);
        let swapped = Matrix::from_rows(&[m.row(0).to_vec(), m.row(2).to_vec(), m.row(1).to_vec()]).unwrap();
        assert_eq!(pool_first(&EncoderOutput(swapped)).unwrap(), pooled);
    }

    #[test]
    fn predict_zero_head_gives_zero() {
        let config = tiny_config();
        let mut params = ModelParams::init(&config, 0).unwrap();
        for m in [
            &mut params.head_w1,
            &mut params.head_b1,
            &mut params.head_w2,
            &mut params.head_b2,
            &mut params.head_w3,
            &mut params.head_b3,
        ] {
            *m = Matrix::zeros(m.rows(), m.cols());
        }
        assert_eq!(predict(&Matrix::filled(1, 16, 0.7), &params).unwrap(), 0.0);
    }

    #[test]
    fn predict_scalar_sanity() {
        let config = ModelConfig {
            d_model: 1,
            n_heads: 1,
            head_dims: [1, 1, 1],
            ..tiny_config()
        };
        let mut params = ModelParams::init(&config, 0).unwrap();
        params.head_w1 = Matrix::scalar(1.0);
        params.head_w2 = Matrix::scalar(1.0);
        params.head_w3 = Matrix::scalar(1.0);
        params.head_b1 = Matrix::scalar(0.0);
        params.head_b2 = Matrix::scalar(0.0);
        params.head_b3 = Matrix::scalar(0.0);
        assert_eq!(predict(&Matrix::scalar(0.0), &params).unwrap(), 0.0);
    }

    #[test]
    fn score_matches_pool_then_predict() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 3).unwrap();
        let packed = sample_packed(TaskFormat::SrcRef);
        let variant = config.masks.get(TaskFormat::SrcRef);
        let enc = encode(&packed, &params, &config, variant).unwrap();
        let manual = predict(&pool_first(&enc).unwrap(), &params).unwrap();
        assert_eq!(score_packed(&packed, &params, &config, None).unwrap(), manual);
    }

    #[test]
    fn tensors_and_mut_agree() {
        let config = ModelConfig {
            segment_embeddings: true,
            ..tiny_config()
        };
        let mut params = ModelParams::init(&config, 0).unwrap();
        let shapes: Vec<_> = params.tensors().iter().map(|(_, m)| m.shape()).collect();
        let shapes_mut: Vec<_> = params.tensors_mut().iter().map(|m| m.shape()).collect();
        assert_eq!(shapes, shapes_mut);
        assert_eq!(shapes.len(), 3 + 16 * 2 + 8);
        params.check_shapes(&config).unwrap();
        assert!(params.check_shapes(&tiny_config()).is_err());
    }
}
