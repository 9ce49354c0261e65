//! The five-network self-explaining classifier.
//!
//! `F` maps an input to `K` concepts of dimension `d`; `H` (same topology,
//! separate weights) scores each concept's relevance; `G` decodes concepts
//! back to the input; `A` aggregates the elementwise product `F(x) ⊙ H(x)`
//! into class scores; `T` selects the concepts most responsible for the
//! prediction from `F(x)` alone. The final score is the weighted sum
//! `ω₁·A(F⊙H) + ω₂·T(F)`; softmax is applied downstream in the loss/eval
//! layer, never here.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{conv_output_size, Graph, VarId};
use crate::nn::{BoundConv, BoundConvTranspose, BoundLinear, Conv, ConvTranspose, Linear, Mode};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    SmallConv,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// (channels, height, width)
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
    pub num_concepts: usize,
    pub concept_dim: usize,
    pub backbone: Backbone,
    pub seed: u64,
}

impl ModelSpec {
    /// Default concept layout: one concept per class, one dimension each.
    pub fn with_defaults(input_shape: (usize, usize, usize), num_classes: usize, seed: u64) -> Self {
        ModelSpec {
            input_shape,
            num_classes,
            num_concepts: num_classes,
            concept_dim: 1,
            backbone: Backbone::SmallConv,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::config("input_shape components must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be >= 1"));
        }
        if self.num_concepts == 0 || self.concept_dim == 0 {
            return Err(Error::config("num_concepts and concept_dim must be >= 1"));
        }
        Ok(())
    }

    /// Flattened concept length `K * d`.
    pub fn concept_len(&self) -> usize {
        self.num_concepts * self.concept_dim
    }

    pub fn input_len(&self) -> usize {
        let (c, h, w) = self.input_shape;
        c * h * w
    }
}

/// Layer widths; defaults give the desk-scale three-convolution backbone.
#[derive(Debug, Clone, Copy)]
pub struct Widths {
    pub conv_channels: [usize; 3],
    pub mlp_hidden: [usize; 2],
    pub head_hidden: usize,
}

impl Default for Widths {
    fn default() -> Self {
        Widths {
            conv_channels: [8, 16, 32],
            mlp_hidden: [128, 64],
            head_hidden: 32,
        }
    }
}

const CONV_KERNEL: usize = 3;
const CONV_STRIDE: usize = 2;
const CONV_PAD: usize = 1;
pub const DROPOUT_P: f64 = 0.1;

#[derive(Debug, Clone)]
struct ConvEncoder {
    convs: Vec<Conv>,
    fc: Linear,
    /// Spatial dims after each conv, starting with the input dims.
    dims: Vec<(usize, usize)>,
    channels: Vec<usize>,
}

impl ConvEncoder {
    fn new(spec: &ModelSpec, widths: &Widths, rng: &mut ChaCha8Rng) -> Self {
        let (c, h, w) = spec.input_shape;
        let mut channels = vec![c];
        channels.extend_from_slice(&widths.conv_channels);
        let mut dims = vec![(h, w)];
        let mut convs = Vec::new();
        for i in 0..3 {
            convs.push(Conv::new(
                channels[i],
                channels[i + 1],
                CONV_KERNEL,
                CONV_STRIDE,
                CONV_PAD,
                rng,
            ));
            let (ph, pw) = dims[i];
            dims.push((
                conv_output_size(ph, CONV_KERNEL, CONV_STRIDE, CONV_PAD),
                conv_output_size(pw, CONV_KERNEL, CONV_STRIDE, CONV_PAD),
            ));
        }
        let (fh, fw) = dims[3];
        let fc = Linear::new(channels[3] * fh * fw, spec.concept_len(), rng);
        ConvEncoder {
            convs,
            fc,
            dims,
            channels,
        }
    }

    fn flat_len(&self) -> usize {
        let (h, w) = self.dims[3];
        self.channels[3] * h * w
    }
}

#[derive(Debug, Clone)]
struct ConvDecoder {
    fc: Linear,
    deconvs: Vec<ConvTranspose>,
}

impl ConvDecoder {
    /// Mirrors the encoder: dense back to the deepest feature map, then
    /// three transposed convolutions walking the recorded dims back up.
    fn new(spec: &ModelSpec, enc: &ConvEncoder, rng: &mut ChaCha8Rng) -> Self {
        let fc = Linear::new(spec.concept_len(), enc.flat_len(), rng);
        let mut deconvs = Vec::new();
        for i in (0..3).rev() {
            let (oh, ow) = enc.dims[i];
            deconvs.push(ConvTranspose::new(
                enc.channels[i + 1],
                enc.channels[i],
                CONV_KERNEL,
                CONV_STRIDE,
                CONV_PAD,
                oh,
                ow,
                rng,
            ));
        }
        ConvDecoder { fc, deconvs }
    }
}

#[derive(Debug, Clone)]
struct MlpEncoder {
    fcs: Vec<Linear>,
}

impl MlpEncoder {
    fn new(spec: &ModelSpec, widths: &Widths, rng: &mut ChaCha8Rng) -> Self {
        let n = spec.input_len();
        let [h1, h2] = widths.mlp_hidden;
        MlpEncoder {
            fcs: vec![
                Linear::new(n, h1, rng),
                Linear::new(h1, h2, rng),
                Linear::new(h2, spec.concept_len(), rng),
            ],
        }
    }
}

#[derive(Debug, Clone)]
struct MlpDecoder {
    fcs: Vec<Linear>,
}

impl MlpDecoder {
    fn new(spec: &ModelSpec, widths: &Widths, rng: &mut ChaCha8Rng) -> Self {
        let n = spec.input_len();
        let [h1, h2] = widths.mlp_hidden;
        MlpDecoder {
            fcs: vec![
                Linear::new(spec.concept_len(), h2, rng),
                Linear::new(h2, h1, rng),
                Linear::new(h1, n, rng),
            ],
        }
    }
}

#[derive(Debug, Clone)]
enum Encoder {
    Conv(ConvEncoder),
    Mlp(MlpEncoder),
}

#[derive(Debug, Clone)]
enum Decoder {
    Conv(ConvDecoder),
    Mlp(MlpDecoder),
}

/// Concept/relevance/selection model with its decoder and aggregation heads.
#[derive(Debug, Clone)]
pub struct RceModel {
    spec: ModelSpec,
    f: Encoder,
    h: Encoder,
    g: Decoder,
    a: Vec<Linear>, // 2 layers
    t: Vec<Linear>, // 3 layers
}

/// All five heads of one forward pass over a single sample.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `F(x)`, shape `[K, d]`.
    pub concepts: Tensor,
    /// `H(x)`, shape `[K, d]`.
    pub relevances: Tensor,
    /// `G(F(x))`, input-shaped.
    pub reconstruction: Tensor,
    /// `A(F(x) ⊙ H(x))`, length `N`.
    pub aggregator_logits: Vec<f64>,
    /// `T(F(x))`, length `N`.
    pub selector_logits: Vec<f64>,
}

/// Batched head outputs used by evaluation and the prototype bank.
#[derive(Debug, Clone)]
pub struct BatchOutputs {
    pub concepts: Tensor,   // [B, K*d]
    pub relevances: Tensor, // [B, K*d]
    pub aggregator_logits: Tensor, // [B, N]
    pub selector_logits: Tensor,   // [B, N]
}

impl RceModel {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        Self::with_widths(spec, Widths::default())
    }

    /// Construction with explicit layer widths; used for small stub models
    /// in gradient checks. Initialization order is fixed (F, H, G, A, T) so
    /// equal seeds give identical parameters.
    pub fn with_widths(spec: ModelSpec, widths: Widths) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (f, h, g) = match spec.backbone {
            Backbone::SmallConv => {
                let fe = ConvEncoder::new(&spec, &widths, &mut rng);
                let he = ConvEncoder::new(&spec, &widths, &mut rng);
                let de = ConvDecoder::new(&spec, &fe, &mut rng);
                (Encoder::Conv(fe), Encoder::Conv(he), Decoder::Conv(de))
            }
            Backbone::Mlp => {
                let fe = MlpEncoder::new(&spec, &widths, &mut rng);
                let he = MlpEncoder::new(&spec, &widths, &mut rng);
                let de = MlpDecoder::new(&spec, &widths, &mut rng);
                (Encoder::Mlp(fe), Encoder::Mlp(he), Decoder::Mlp(de))
            }
        };
        let kd = spec.concept_len();
        let n = spec.num_classes;
        let hh = widths.head_hidden;
        let a = vec![Linear::new(kd, hh, &mut rng), Linear::new(hh, n, &mut rng)];
        let t = vec![
            Linear::new(kd, hh, &mut rng),
            Linear::new(hh, hh, &mut rng),
            Linear::new(hh, n, &mut rng),
        ];
        Ok(RceModel { spec, f, h, g, a, t })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Visits every parameter tensor in canonical order with a stable name.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (name, t) in self.named_params() {
            f(&name, t);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (name, t) in self.named_params_mut() {
            f(&name, t);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        collect_encoder(&self.f, "f", &mut |n, t| out.push((n, t)));
        collect_encoder(&self.h, "h", &mut |n, t| out.push((n, t)));
        collect_decoder(&self.g, "g", &mut |n, t| out.push((n, t)));
        for (i, l) in self.a.iter().enumerate() {
            out.push((format!("a.fc{i}.w"), &l.w));
            out.push((format!("a.fc{i}.b"), &l.b));
        }
        for (i, l) in self.t.iter().enumerate() {
            out.push((format!("t.fc{i}.w"), &l.w));
            out.push((format!("t.fc{i}.b"), &l.b));
        }
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        collect_encoder_mut(&mut self.f, "f", &mut out);
        collect_encoder_mut(&mut self.h, "h", &mut out);
        collect_decoder_mut(&mut self.g, "g", &mut out);
        for (i, l) in self.a.iter_mut().enumerate() {
            out.push((format!("a.fc{i}.w"), &mut l.w));
            out.push((format!("a.fc{i}.b"), &mut l.b));
        }
        for (i, l) in self.t.iter_mut().enumerate() {
            out.push((format!("t.fc{i}.w"), &mut l.w));
            out.push((format!("t.fc{i}.b"), &mut l.b));
        }
        out
    }

    pub fn params_finite(&self) -> bool {
        let mut ok = true;
        self.visit_params(&mut |_, t| ok &= t.is_finite());
        ok
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (c, h, w) = self.spec.input_shape;
        if x.shape() != [c, h, w] {
            return Err(Error::config(format!(
                "input shape {:?} does not match model input {:?}",
                x.shape(),
                (c, h, w)
            )));
        }
        if !x.is_finite() {
            return Err(Error::config("input contains non-finite values"));
        }
        Ok(())
    }

    /// Single-sample forward pass in eval mode (no dropout).
    pub fn forward(&self, x: &Tensor) -> Result<ForwardOutput> {
        self.check_input(x)?;
        if !self.params_finite() {
            return Err(Error::config("corrupted model: non-finite parameter"));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let batch = Tensor::stack(std::slice::from_ref(x))?;
        let xid = g.constant(batch);
        let mut mode = Mode::Eval;
        let concepts = bound.concepts(&mut g, xid, &mut mode);
        let relevances = bound.relevances(&mut g, xid, &mut mode);
        let recon = bound.reconstruct(&mut g, concepts);
        let fh = g.mul(concepts, relevances);
        let agg = bound.aggregate(&mut g, fh);
        let sel = bound.select(&mut g, concepts);
        let (k, d) = (self.spec.num_concepts, self.spec.concept_dim);
        let (c, h, w) = self.spec.input_shape;
        Ok(ForwardOutput {
            concepts: g.value(concepts).reshaped(&[k, d])?,
            relevances: g.value(relevances).reshaped(&[k, d])?,
            reconstruction: g.value(recon).reshaped(&[c, h, w])?,
            aggregator_logits: g.value(agg).data().to_vec(),
            selector_logits: g.value(sel).data().to_vec(),
        })
    }

    /// Weighted class scores `ω₁·A(F⊙H) + ω₂·T(F)`.
    pub fn predict(&self, x: &Tensor, omega1: f64, omega2: f64) -> Result<Vec<f64>> {
        if omega1 < 0.0 || omega2 < 0.0 {
            return Err(Error::config("prediction weights must be non-negative"));
        }
        let out = self.forward(x)?;
        Ok(combine_logits(
            &out.aggregator_logits,
            &out.selector_logits,
            omega1,
            omega2,
        ))
    }

    /// Batched eval-mode pass over all heads except the decoder.
    pub fn eval_outputs(&self, xs: &[Tensor]) -> Result<BatchOutputs> {
        for x in xs {
            self.check_input(x)?;
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let xid = g.constant(Tensor::stack(xs)?);
        let mut mode = Mode::Eval;
        let concepts = bound.concepts(&mut g, xid, &mut mode);
        let relevances = bound.relevances(&mut g, xid, &mut mode);
        let fh = g.mul(concepts, relevances);
        let agg = bound.aggregate(&mut g, fh);
        let sel = bound.select(&mut g, concepts);
        Ok(BatchOutputs {
            concepts: g.value(concepts).clone(),
            relevances: g.value(relevances).clone(),
            aggregator_logits: g.value(agg).clone(),
            selector_logits: g.value(sel).clone(),
        })
    }

    /// Batched eval-mode concept embeddings only (`[B, K*d]`); the cheap path
    /// for prototype-bank refreshes.
    pub fn eval_concepts(&self, xs: &[Tensor]) -> Result<Tensor> {
        for x in xs {
            self.check_input(x)?;
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let xid = g.constant(Tensor::stack(xs)?);
        let mut mode = Mode::Eval;
        let concepts = bound.concepts(&mut g, xid, &mut mode);
        Ok(g.value(concepts).clone())
    }

    /// Inserts all parameters into the tape as gradient-tracked leaves.
    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        BoundModel {
            spec: self.spec.clone(),
            f: bind_encoder(&self.f, g),
            h: bind_encoder(&self.h, g),
            dec: bind_decoder(&self.g, g),
            a: self.a.iter().map(|l| l.bind(g)).collect(),
            t: self.t.iter().map(|l| l.bind(g)).collect(),
        }
    }

    /// Copies the `F` encoder weights from another model (the supervised
    /// concept-alignment warm start). Shapes must match.
    pub fn init_f_from(&mut self, other: &RceModel) -> Result<()> {
        let mut donor: Vec<(String, Tensor)> = Vec::new();
        other.visit_params(&mut |name, t| {
            if name.starts_with("f.") {
                donor.push((name.to_string(), t.clone()));
            }
        });
        let mut missing = Vec::new();
        self.visit_params_mut(&mut |name, t| {
            if let Some((_, src)) = donor.iter().find(|(n, _)| n == name) {
                if src.shape() == t.shape() {
                    *t = src.clone();
                } else {
                    missing.push(format!("{name} (shape mismatch)"));
                }
            } else if name.starts_with("f.") {
                missing.push(name.to_string());
            }
        });
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!(
                "encoder init: incompatible parameters: {}",
                missing.join(", ")
            )))
        }
    }
}

fn collect_encoder<'a>(e: &'a Encoder, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
    match e {
        Encoder::Conv(c) => {
            for (i, conv) in c.convs.iter().enumerate() {
                f(format!("{prefix}.conv{i}.w"), &conv.w);
                f(format!("{prefix}.conv{i}.b"), &conv.b);
            }
            f(format!("{prefix}.fc.w"), &c.fc.w);
            f(format!("{prefix}.fc.b"), &c.fc.b);
        }
        Encoder::Mlp(m) => {
            for (i, l) in m.fcs.iter().enumerate() {
                f(format!("{prefix}.fc{i}.w"), &l.w);
                f(format!("{prefix}.fc{i}.b"), &l.b);
            }
        }
    }
}

fn collect_encoder_mut<'a>(e: &'a mut Encoder, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
    match e {
        Encoder::Conv(c) => {
            for (i, conv) in c.convs.iter_mut().enumerate() {
                out.push((format!("{prefix}.conv{i}.w"), &mut conv.w));
                out.push((format!("{prefix}.conv{i}.b"), &mut conv.b));
            }
            out.push((format!("{prefix}.fc.w"), &mut c.fc.w));
            out.push((format!("{prefix}.fc.b"), &mut c.fc.b));
        }
        Encoder::Mlp(m) => {
            for (i, l) in m.fcs.iter_mut().enumerate() {
                out.push((format!("{prefix}.fc{i}.w"), &mut l.w));
                out.push((format!("{prefix}.fc{i}.b"), &mut l.b));
            }
        }
    }
}

fn collect_decoder<'a>(d: &'a Decoder, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
    match d {
        Decoder::Conv(c) => {
            f(format!("{prefix}.fc.w"), &c.fc.w);
            f(format!("{prefix}.fc.b"), &c.fc.b);
            for (i, dc) in c.deconvs.iter().enumerate() {
                f(format!("{prefix}.deconv{i}.w"), &dc.w);
                f(format!("{prefix}.deconv{i}.b"), &dc.b);
            }
        }
        Decoder::Mlp(m) => {
            for (i, l) in m.fcs.iter().enumerate() {
                f(format!("{prefix}.fc{i}.w"), &l.w);
                f(format!("{prefix}.fc{i}.b"), &l.b);
            }
        }
    }
}

fn collect_decoder_mut<'a>(d: &'a mut Decoder, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
    match d {
        Decoder::Conv(c) => {
            out.push((format!("{prefix}.fc.w"), &mut c.fc.w));
            out.push((format!("{prefix}.fc.b"), &mut c.fc.b));
            for (i, dc) in c.deconvs.iter_mut().enumerate() {
                out.push((format!("{prefix}.deconv{i}.w"), &mut dc.w));
                out.push((format!("{prefix}.deconv{i}.b"), &mut dc.b));
            }
        }
        Decoder::Mlp(m) => {
            for (i, l) in m.fcs.iter_mut().enumerate() {
                out.push((format!("{prefix}.fc{i}.w"), &mut l.w));
                out.push((format!("{prefix}.fc{i}.b"), &mut l.b));
            }
        }
    }
}

enum BoundEncoder {
    Conv {
        convs: Vec<BoundConv>,
        fc: BoundLinear,
        flat_len: usize,
    },
    Mlp {
        fcs: Vec<BoundLinear>,
        input_len: usize,
    },
}

enum BoundDecoder {
    Conv {
        fc: BoundLinear,
        deconvs: Vec<BoundConvTranspose>,
        deep_shape: (usize, usize, usize),
    },
    Mlp {
        fcs: Vec<BoundLinear>,
    },
}

fn bind_encoder(e: &Encoder, g: &mut Graph) -> BoundEncoder {
    match e {
        Encoder::Conv(c) => BoundEncoder::Conv {
            convs: c.convs.iter().map(|cv| cv.bind(g)).collect(),
            fc: c.fc.bind(g),
            flat_len: c.flat_len(),
        },
        Encoder::Mlp(m) => BoundEncoder::Mlp {
            fcs: m.fcs.iter().map(|l| l.bind(g)).collect(),
            input_len: m.fcs[0].w.shape()[0],
        },
    }
}

fn bind_decoder(d: &Decoder, g: &mut Graph) -> BoundDecoder {
    match d {
        Decoder::Conv(c) => {
            let deep_c = c.deconvs[0].w.shape()[0];
            let flat = c.fc.w.shape()[1];
            let hw = flat / deep_c;
            // Deepest feature map is square in both recorded dims only if the
            // input was; recover dims from the first deconv's mirror target.
            let d0 = &c.deconvs[0];
            let (h, w) = (
                conv_output_size(d0.out_h, CONV_KERNEL, CONV_STRIDE, CONV_PAD),
                conv_output_size(d0.out_w, CONV_KERNEL, CONV_STRIDE, CONV_PAD),
            );
            debug_assert_eq!(h * w, hw);
            BoundDecoder::Conv {
                fc: c.fc.bind(g),
                deconvs: c.deconvs.iter().map(|dc| dc.bind(g)).collect(),
                deep_shape: (deep_c, h, w),
            }
        }
        Decoder::Mlp(m) => BoundDecoder::Mlp {
            fcs: m.fcs.iter().map(|l| l.bind(g)).collect(),
        },
    }
}

/// Parameters of one model bound into a live tape.
pub struct BoundModel {
    spec: ModelSpec,
    f: BoundEncoder,
    h: BoundEncoder,
    dec: BoundDecoder,
    a: Vec<BoundLinear>,
    t: Vec<BoundLinear>,
}

impl BoundModel {
    fn encode(&self, enc: &BoundEncoder, g: &mut Graph, x: VarId, mode: &mut Mode) -> VarId {
        let bsz = g.value(x).shape()[0];
        match enc {
            BoundEncoder::Conv { convs, fc, flat_len } => {
                let mut y = x;
                for (i, conv) in convs.iter().enumerate() {
                    y = conv.apply(g, y);
                    y = g.relu(y);
                    if i + 1 < convs.len() {
                        y = mode.dropout(g, y);
                    }
                }
                let flat = g.reshape(y, &[bsz, *flat_len]);
                fc.apply(g, flat)
            }
            BoundEncoder::Mlp { fcs, input_len } => {
                let mut y = g.reshape(x, &[bsz, *input_len]);
                for (i, fc) in fcs.iter().enumerate() {
                    y = fc.apply(g, y);
                    if i + 1 < fcs.len() {
                        y = g.relu(y);
                        y = mode.dropout(g, y);
                    }
                }
                y
            }
        }
    }

    /// `F(x)` as `[B, K*d]`.
    pub fn concepts(&self, g: &mut Graph, x: VarId, mode: &mut Mode) -> VarId {
        self.encode(&self.f, g, x, mode)
    }

    /// `H(x)` as `[B, K*d]`.
    pub fn relevances(&self, g: &mut Graph, x: VarId, mode: &mut Mode) -> VarId {
        self.encode(&self.h, g, x, mode)
    }

    /// `G(concepts)` as `[B, C, H, W]` (or `[B, n]` for the MLP decoder,
    /// reshaped to the input shape).
    pub fn reconstruct(&self, g: &mut Graph, concepts: VarId) -> VarId {
        let bsz = g.value(concepts).shape()[0];
        let (c, h, w) = self.spec.input_shape;
        match &self.dec {
            BoundDecoder::Conv {
                fc,
                deconvs,
                deep_shape,
            } => {
                let y = fc.apply(g, concepts);
                let y = g.relu(y);
                let (dc, dh, dw) = *deep_shape;
                let mut y = g.reshape(y, &[bsz, dc, dh, dw]);
                for (i, dcv) in deconvs.iter().enumerate() {
                    y = dcv.apply(g, y);
                    if i + 1 < deconvs.len() {
                        y = g.relu(y);
                    }
                }
                y
            }
            BoundDecoder::Mlp { fcs } => {
                let mut y = concepts;
                for (i, fc) in fcs.iter().enumerate() {
                    y = fc.apply(g, y);
                    if i + 1 < fcs.len() {
                        y = g.relu(y);
                    }
                }
                g.reshape(y, &[bsz, c, h, w])
            }
        }
    }

    /// `A(F ⊙ H)` class scores from the already-multiplied product.
    pub fn aggregate(&self, g: &mut Graph, fh: VarId) -> VarId {
        let y = self.a[0].apply(g, fh);
        let y = g.relu(y);
        self.a[1].apply(g, y)
    }

    /// `T(F)` class scores.
    pub fn select(&self, g: &mut Graph, concepts: VarId) -> VarId {
        let mut y = concepts;
        for (i, fc) in self.t.iter().enumerate() {
            y = fc.apply(g, y);
            if i + 1 < self.t.len() {
                y = g.relu(y);
            }
        }
        y
    }

    /// Gradient leaves in the canonical parameter order.
    pub fn param_ids(&self) -> Vec<VarId> {
        let mut ids = Vec::new();
        match &self.f {
            BoundEncoder::Conv { convs, fc, .. } => {
                for c in convs {
                    ids.push(c.w);
                    ids.push(c.b);
                }
                ids.push(fc.w);
                ids.push(fc.b);
            }
            BoundEncoder::Mlp { fcs, .. } => {
                for l in fcs {
                    ids.push(l.w);
                    ids.push(l.b);
                }
            }
        }
        match &self.h {
            BoundEncoder::Conv { convs, fc, .. } => {
                for c in convs {
                    ids.push(c.w);
                    ids.push(c.b);
                }
                ids.push(fc.w);
                ids.push(fc.b);
            }
            BoundEncoder::Mlp { fcs, .. } => {
                for l in fcs {
                    ids.push(l.w);
                    ids.push(l.b);
                }
            }
        }
        match &self.dec {
            BoundDecoder::Conv { fc, deconvs, .. } => {
                ids.push(fc.w);
                ids.push(fc.b);
                for d in deconvs {
                    ids.push(d.w);
                    ids.push(d.b);
                }
            }
            BoundDecoder::Mlp { fcs } => {
                for l in fcs {
                    ids.push(l.w);
                    ids.push(l.b);
                }
            }
        }
        for l in &self.a {
            ids.push(l.w);
            ids.push(l.b);
        }
        for l in &self.t {
            ids.push(l.w);
            ids.push(l.b);
        }
        ids
    }
}

/// `ω₁·agg + ω₂·sel`.
pub fn combine_logits(agg: &[f64], sel: &[f64], omega1: f64, omega2: f64) -> Vec<f64> {
    agg.iter()
        .zip(sel)
        .map(|(a, s)| omega1 * a + omega2 * s)
        .collect()
}

// ---------------------------------------------------------------------------
// Checkpoint container: magic, version, JSON metadata, named f64 arrays.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"RCECKPT1";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub step: u64,
    pub config_hash: u64,
}

impl RceModel {
    /// Writes a value-exact checkpoint: little-endian f64 payloads keyed by
    /// canonical parameter names, preceded by a JSON metadata record.
    pub fn save_checkpoint(&self, path: &Path, step: u64, config_hash: u64) -> Result<()> {
        let meta = CheckpointMeta {
            spec: self.spec.clone(),
            step,
            config_hash,
        };
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let meta_bytes = serde_json::to_vec(&meta).expect("meta serializes");
        buf.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta_bytes);
        let named = self.named_params();
        buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in named {
            write_entry(&mut buf, &name, t);
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<(RceModel, CheckpointMeta)> {
        let bytes = std::fs::read(path)?;
        let mut r = ByteReader::new(&bytes);
        let magic = r.take(8, "magic")?;
        if magic != CKPT_MAGIC {
            return Err(Error::data(format!(
                "checkpoint magic mismatch at offset 0 (got {:02x?})",
                magic
            )));
        }
        let version = r.u32("version")?;
        if version != CKPT_VERSION {
            return Err(Error::data(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let meta_len = r.u32("meta length")? as usize;
        let meta_bytes = r.take(meta_len, "metadata")?;
        let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
            .map_err(|e| Error::data(format!("checkpoint metadata: {e}")))?;
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            entries.push(read_entry(&mut r)?);
        }
        r.expect_eof("checkpoint")?;
        let mut model = RceModel::new(meta.spec.clone())?;
        apply_entries(&mut model, &entries, "checkpoint")?;
        Ok((model, meta))
    }
}

pub(crate) fn write_entry(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    let nb = name.as_bytes();
    buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
    buf.extend_from_slice(nb);
    buf.push(t.shape().len() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn read_entry(r: &mut ByteReader) -> Result<(String, Tensor)> {
    let name_len = r.u16("entry name length")? as usize;
    let name = String::from_utf8(r.take(name_len, "entry name")?.to_vec())
        .map_err(|_| Error::data("entry name is not utf-8"))?;
    let ndim = r.u8("entry rank")? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u32("entry dim")? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(r.f64(&format!("payload of '{name}'"))?);
    }
    Ok((name, Tensor::new(shape, data).expect("sizes agree")))
}

pub(crate) fn apply_entries(model: &mut RceModel, entries: &[(String, Tensor)], what: &str) -> Result<()> {
    let mut problems = Vec::new();
    let mut seen = vec![false; entries.len()];
    model.visit_params_mut(&mut |name, t| {
        match entries.iter().position(|(n, _)| n == name) {
            Some(i) => {
                let src = &entries[i].1;
                if src.shape() == t.shape() {
                    *t = src.clone();
                    seen[i] = true;
                } else {
                    problems.push(format!(
                        "'{name}': shape {:?} vs expected {:?}",
                        src.shape(),
                        t.shape()
                    ));
                }
            }
            None => problems.push(format!("'{name}': missing")),
        }
    });
    for (i, s) in seen.iter().enumerate() {
        if !s && !problems.iter().any(|p| p.contains(&entries[i].0)) {
            problems.push(format!("'{}': unknown parameter", entries[i].0));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::data(format!("{what} parameters: {}", problems.join("; "))))
    }
}

/// Cursor over a byte buffer with offset-aware error messages.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::data(format!(
                "truncated file: {what} needs {n} bytes at offset {}, only {} remain",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn expect_eof(&self, what: &str) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::data(format!(
                "{what}: {} trailing bytes after offset {}",
                self.bytes.len() - self.pos,
                self.pos
            )));
        }
        Ok(())
    }
}
