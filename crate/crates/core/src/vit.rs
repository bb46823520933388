//! Toy-scale Vision Transformer trunk with a Bayesian classification head.
//!
//! Images are cut into `p × p` patches, projected without bias, prefixed by
//! a learnable class token, offset by learnable positional embeddings and
//! passed through pre-norm encoder blocks (multi-head self-attention, then a
//! GELU MLP). The final class-token feature feeds a [`BayesianClassifier`].
//! The trunk is deterministic; only the head is variational.

use serde::{Deserialize, Serialize};

use crate::bayes::{
    BayesianClassifier, ClassifierSpec, ElboBreakdown, PredictiveDistribution, VariationalModel,
};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numeric::{Rng, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Section tag for trunk parameters inside a model checkpoint.
pub const VIT_SECTION: &[u8; 4] = b"VIT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    /// `[H, W, C]`.
    pub image_size: [usize; 3],
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: f64,
    /// Head classifier; `layer_dims[0]` must equal `embed_dim`.
    pub head: ClassifierSpec,
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let [h, w, c] = self.image_size;
        let p = self.patch_size;
        if h == 0 || w == 0 || c == 0 || p == 0 {
            return Err(Error::Config(format!(
                "image size {:?} and patch size {p} must be positive",
                self.image_size
            )));
        }
        if h % p != 0 || w % p != 0 {
            return Err(Error::Config(format!(
                "image {h}x{w} not divisible by patch size {p}"
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) {
            return Err(Error::Config(format!(
                "mlp_ratio must be positive, got {}",
                self.mlp_ratio
            )));
        }
        if self.head.layer_dims.first() != Some(&self.embed_dim) {
            return Err(Error::Config(format!(
                "head input width {:?} must equal embed_dim {}",
                self.head.layer_dims.first(),
                self.embed_dim
            )));
        }
        self.head.validate()
    }

    pub fn patch_count(&self) -> usize {
        (self.image_size[0] / self.patch_size) * (self.image_size[1] / self.patch_size)
    }

    pub fn patch_width(&self) -> usize {
        self.patch_size * self.patch_size * self.image_size[2]
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f64) * self.mlp_ratio).round().max(1.0) as usize
    }
}

/// Splits an `[H × W × C]` image into `[N × p·p·C]` patches in raster order.
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    let [h, w, c] = image.shape() else {
        return Err(Error::Shape(format!(
            "patchify expects [H, W, C], got {:?}",
            image.shape()
        )));
    };
    let (h, w, c) = (*h, *w, *c);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} not divisible by patch size {p}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for pr in 0..gh {
        for pc in 0..gw {
            for r in 0..p {
                let start = ((pr * p + r) * w + pc * p) * c;
                out.extend_from_slice(&src[start..start + p * c]);
            }
        }
    }
    Tensor::new(&[gh * gw, p * p * c], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, p: usize, image_size: [usize; 3]) -> Result<Tensor> {
    let [h, w, c] = image_size;
    if p == 0 || h % p != 0 || w % p != 0 || patches.shape() != [(h / p) * (w / p), p * p * c] {
        return Err(Error::Shape(format!(
            "patches {:?} do not tile image {image_size:?} at p={p}",
            patches.shape()
        )));
    }
    let gw = w / p;
    let mut out = vec![0.0; h * w * c];
    for (n, patch) in patches.data().chunks(p * p * c).enumerate() {
        let (pr, pc) = (n / gw, n % gw);
        for r in 0..p {
            let start = ((pr * p + r) * w + pc * p) * c;
            out[start..start + p * c].copy_from_slice(&patch[r * p * c..(r + 1) * p * c]);
        }
    }
    Tensor::new(&image_size, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderBlock {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_mlp1: Tensor,
    pub b_mlp1: Tensor,
    pub w_mlp2: Tensor,
    pub b_mlp2: Tensor,
}

const BLOCK_TENSORS: usize = 12;

fn gaussian(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, rng.normals(n).into_iter().map(|v| v * std).collect())
        .expect("positive shape")
        .with_grad()
}

impl EncoderBlock {
    fn init(d: usize, hidden: usize, rng: &mut Rng) -> Self {
        let s = (1.0 / d as f64).sqrt();
        Self {
            ln1_gain: Tensor::filled(&[d], 1.0).with_grad(),
            ln1_bias: Tensor::zeros(&[d]).with_grad(),
            w_q: gaussian(rng, &[d, d], s),
            w_k: gaussian(rng, &[d, d], s),
            w_v: gaussian(rng, &[d, d], s),
            w_o: gaussian(rng, &[d, d], s),
            ln2_gain: Tensor::filled(&[d], 1.0).with_grad(),
            ln2_bias: Tensor::zeros(&[d]).with_grad(),
            w_mlp1: gaussian(rng, &[d, hidden], s),
            b_mlp1: Tensor::zeros(&[hidden]).with_grad(),
            w_mlp2: gaussian(rng, &[hidden, d], (1.0 / hidden as f64).sqrt()),
            b_mlp2: Tensor::zeros(&[d]).with_grad(),
        }
    }

    fn tensors(&self) -> [&Tensor; BLOCK_TENSORS] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_mlp1,
            &self.b_mlp1,
            &self.w_mlp2,
            &self.b_mlp2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; BLOCK_TENSORS] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_mlp1,
            &mut self.b_mlp1,
            &mut self.w_mlp2,
            &mut self.b_mlp2,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitModel {
    pub config: VitConfig,
    /// `[p·p·C × d]`, no bias.
    pub projection: Tensor,
    /// `[(N + 1) × d]`.
    pub positional: Tensor,
    /// `[d]`.
    pub class_token: Tensor,
    pub blocks: Vec<EncoderBlock>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    pub head: BayesianClassifier,
}

impl VitModel {
    pub fn init(config: &VitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derive(seed, &[0x7669_74]);
        let d = config.embed_dim;
        let pw = config.patch_width();
        let projection = gaussian(&mut rng, &[pw, d], (1.0 / pw as f64).sqrt());
        let positional = gaussian(&mut rng, &[config.patch_count() + 1, d], 0.02);
        let class_token = gaussian(&mut rng, &[d], 0.02);
        let blocks = (0..config.depth)
            .map(|_| EncoderBlock::init(d, config.mlp_hidden(), &mut rng))
            .collect();
        Ok(Self {
            config: config.clone(),
            projection,
            positional,
            class_token,
            blocks,
            final_gain: Tensor::filled(&[d], 1.0).with_grad(),
            final_bias: Tensor::zeros(&[d]).with_grad(),
            head: BayesianClassifier::init(&config.head, seed)?,
        })
    }

    pub fn trunk_tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.projection, &self.positional, &self.class_token];
        for b in &self.blocks {
            v.extend(b.tensors());
        }
        v.extend([&self.final_gain, &self.final_bias]);
        v
    }

    fn trunk_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.projection,
            &mut self.positional,
            &mut self.class_token,
        ];
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v.extend([&mut self.final_gain, &mut self.final_bias]);
        v
    }

    fn trunk_len(&self) -> usize {
        5 + BLOCK_TENSORS * self.blocks.len()
    }

    fn image_at(&self, x: &Tensor, i: usize) -> Result<Tensor> {
        let [h, w, c] = self.config.image_size;
        let width = h * w * c;
        if x.numel() != x.shape()[0] * width || x.shape().len() < 2 {
            return Err(Error::dim("vit input", x.shape(), &[x.shape()[0], h, w, c]));
        }
        Tensor::new(&[h, w, c], x.data()[i * width..(i + 1) * width].to_vec())
    }

    /// `[(N + 1) × d]` token matrix: class token then projected patches,
    /// each offset by its positional row.
    fn embed_on_tape(&self, tape: &mut Tape, trunk: &[Var], image: &Tensor) -> Result<Var> {
        let patches = patchify(image, self.config.patch_size)?;
        let pv = tape.constant(patches);
        let proj = tape.matmul(pv, trunk[0])?;
        let cls = tape.reshape(trunk[2], &[1, self.config.embed_dim])?;
        let tokens = tape.concat_rows(&[cls, proj])?;
        tape.add(tokens, trunk[1])
    }

    /// Multi-head self-attention on already-normalised tokens; returns the
    /// concatenated head outputs before the output projection and, if asked,
    /// each head's attention matrix.
    fn attention_on_tape(
        &self,
        tape: &mut Tape,
        p: &[Var],
        x: Var,
        mut weights: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let heads = self.config.heads;
        let dh = self.config.embed_dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = tape.matmul(x, p[2])?;
        let k = tape.matmul(x, p[3])?;
        let v = tape.matmul(x, p[4])?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let a = tape.softmax(scores);
            if let Some(w) = weights.as_deref_mut() {
                w.push(a);
            }
            outs.push(tape.matmul(a, vh)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            tape.concat_cols(&outs)
        }
    }

    fn block_on_tape(
        &self,
        tape: &mut Tape,
        p: &[Var],
        x: Var,
        weights: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let n1 = tape.layer_norm(x, p[0], p[1], LAYER_NORM_EPS)?;
        let att = self.attention_on_tape(tape, p, n1, weights)?;
        let att = tape.matmul(att, p[5])?;
        let x = tape.add(x, att)?;
        let n2 = tape.layer_norm(x, p[6], p[7], LAYER_NORM_EPS)?;
        let hdn = tape.matmul(n2, p[8])?;
        let hdn = tape.add_row(hdn, p[9])?;
        let hdn = tape.gelu(hdn);
        let out = tape.matmul(hdn, p[10])?;
        let out = tape.add_row(out, p[11])?;
        tape.add(x, out)
    }

    /// Class-token feature `[1 × d]` after all blocks and the final norm.
    fn features_on_tape(&self, tape: &mut Tape, trunk: &[Var], image: &Tensor) -> Result<Var> {
        let mut x = self.embed_on_tape(tape, trunk, image)?;
        for b in 0..self.blocks.len() {
            let p = &trunk[3 + b * BLOCK_TENSORS..3 + (b + 1) * BLOCK_TENSORS];
            x = self.block_on_tape(tape, p, x, None)?;
        }
        let cls = tape.slice_rows(x, 0, 1)?;
        let n = trunk.len();
        tape.layer_norm(cls, trunk[n - 2], trunk[n - 1], LAYER_NORM_EPS)
    }

    fn features_batch_on_tape(&self, tape: &mut Tape, trunk: &[Var], x: &Tensor) -> Result<Var> {
        let rows = (0..x.shape()[0])
            .map(|i| {
                let img = self.image_at(x, i)?;
                self.features_on_tape(tape, trunk, &img)
            })
            .collect::<Result<Vec<_>>>()?;
        tape.concat_rows(&rows)
    }

    fn constant_trunk(&self, tape: &mut Tape) -> Vec<Var> {
        self.trunk_tensors()
            .into_iter()
            .map(|t| tape.constant(t.clone()))
            .collect()
    }

    /// Embedded tokens `[(N + 1) × d]` for one image.
    pub fn embed(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let trunk = self.constant_trunk(&mut tape);
        let v = self.embed_on_tape(&mut tape, &trunk, image)?;
        Ok(tape.value(v).clone())
    }

    /// Applies block `index` to tokens `x`; also returns each head's
    /// attention matrix.
    pub fn encoder_block(&self, index: usize, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        if index >= self.blocks.len() {
            return Err(Error::Index(format!(
                "block {index} of {}",
                self.blocks.len()
            )));
        }
        let mut tape = Tape::new();
        let p: Vec<Var> = self.blocks[index]
            .tensors()
            .into_iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        let xv = tape.constant(x.clone());
        let mut weights = Vec::new();
        let out = self.block_on_tape(&mut tape, &p, xv, Some(&mut weights))?;
        Ok((
            tape.value(out).clone(),
            weights.into_iter().map(|w| tape.value(w).clone()).collect(),
        ))
    }

    /// Attention output of block `index` before the output projection, on
    /// un-normalised tokens.
    pub fn raw_attention(&self, index: usize, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p: Vec<Var> = self.blocks[index]
            .tensors()
            .into_iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        let xv = tape.constant(x.clone());
        let out = self.attention_on_tape(&mut tape, &p, xv, None)?;
        Ok(tape.value(out).clone())
    }

    /// Deterministic trunk features `[n × d]` for a batch of images.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let trunk = self.constant_trunk(&mut tape);
        let f = self.features_batch_on_tape(&mut tape, &trunk, x)?;
        Ok(tape.value(f).clone())
    }

    /// Head logits at the posterior means for a batch of images.
    pub fn logits_mean(&self, x: &Tensor) -> Result<Tensor> {
        self.head.forward_mean(&self.features(x)?)
    }

    pub fn forward_features(
        &self,
        image: &Tensor,
        rng: &mut Rng,
        m: usize,
        lambda: f64,
    ) -> Result<PredictiveDistribution> {
        let [h, w, c] = self.config.image_size;
        let batch = image.clone().reshape(&[1, h, w, c])?;
        Ok(self.predict_mc(&batch, m, lambda, rng)?.remove(0))
    }

    pub fn write_trunk(&self, w: &mut Writer) {
        w.raw(VIT_SECTION);
        let c = &self.config;
        for v in c.image_size {
            w.u64(v as u64);
        }
        for v in [c.patch_size, c.embed_dim, c.heads, c.depth] {
            w.u64(v as u64);
        }
        w.f64(c.mlp_ratio);
        for t in self.trunk_tensors() {
            w.f64s(t.data());
        }
    }

    /// Reads a trunk section written by [`VitModel::write_trunk`] and
    /// attaches `head`.
    pub fn read_trunk(r: &mut Reader, head: BayesianClassifier) -> Result<Self> {
        let tag = r
            .peek(4)
            .ok_or_else(|| Error::Integrity("missing trunk section".into()))?;
        if tag != VIT_SECTION {
            return Err(Error::Integrity("trunk section tag mismatch".into()));
        }
        for _ in 0..4 {
            r.u8()?;
        }
        let mut dims = [0usize; 7];
        for d in &mut dims {
            *d = r.u64()? as usize;
        }
        let config = VitConfig {
            image_size: [dims[0], dims[1], dims[2]],
            patch_size: dims[3],
            embed_dim: dims[4],
            heads: dims[5],
            depth: dims[6],
            mlp_ratio: r.f64()?,
            head: ClassifierSpec {
                layer_dims: head.layer_dims(),
                activations: head.activations.clone(),
                prior: head.prior.clone(),
                posterior: head.posterior,
            },
        };
        config
            .validate()
            .map_err(|e| Error::Integrity(format!("invalid trunk header: {e}")))?;
        if config.depth > 256 {
            return Err(Error::Integrity(format!(
                "implausible depth {}",
                config.depth
            )));
        }
        let mut model = Self::init(&config, 0)?;
        model.head = head;
        for t in model.trunk_tensors_mut() {
            let data = r.f64s()?;
            if data.len() != t.numel() {
                return Err(Error::Integrity(format!(
                    "trunk tensor has {} values, expected {}",
                    data.len(),
                    t.numel()
                )));
            }
            t.data_mut().copy_from_slice(&data);
        }
        Ok(model)
    }
}

impl VariationalModel for VitModel {
    fn bind_params(&self, tape: &mut Tape) -> Vec<Var> {
        let mut leaves: Vec<Var> = self
            .trunk_tensors()
            .into_iter()
            .map(|t| tape.leaf(t))
            .collect();
        leaves.extend(self.head.bind(tape).0);
        leaves
    }

    fn elbo_graph(
        &self,
        tape: &mut Tape,
        leaves: &[Var],
        x: &Tensor,
        labels: &[usize],
        m_train: usize,
        kl_weight: f64,
        lambda: f64,
        rng: &mut Rng,
    ) -> Result<(Var, ElboBreakdown)> {
        let (trunk, head) = leaves.split_at(self.trunk_len());
        let feats = self.features_batch_on_tape(tape, trunk, x)?;
        let bound = self.head.bind_leaves(head);
        self.head
            .elbo_on_tape(tape, &bound, feats, labels, m_train, kl_weight, lambda, rng)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        let Self {
            projection,
            positional,
            class_token,
            blocks,
            final_gain,
            final_bias,
            head,
            ..
        } = self;
        v.extend([projection, positional, class_token]);
        for b in blocks {
            v.extend(b.tensors_mut());
        }
        v.extend([final_gain, final_bias]);
        v.extend(head.tensors_mut());
        v
    }

    fn predict_mc(
        &self,
        x: &Tensor,
        m: usize,
        lambda: f64,
        rng: &mut Rng,
    ) -> Result<Vec<PredictiveDistribution>> {
        let feats = self.features(x)?;
        self.head.predict_mc(&feats, m, lambda, rng)
    }

    fn class_count(&self) -> usize {
        self.head.class_count
    }

    fn end_of_epoch(&mut self) -> Result<()> {
        self.head.end_of_epoch()
    }
}
