//! Pixel-to-token network: an encoder over full images and a transformer
//! decoder that predicts a token distribution at every lattice position.

use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{embedding, linear, Embedding, Linear, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::error::{ensure, Error, Result};
use crate::macros::string_enum;
use crate::nn::{new_varmap_builder, seeded_init, soft_cross_entropy_rows, space_to_depth, ConvNhwc, Transformer};
use crate::types::{ImageBatch, ReliabilityMask, SoftTokenDist, TokenGrid};

pub const CHECKPOINT_KIND: &str = "addp-model";
/// Additive attention bias that removes a key entirely.
const HIDDEN: f32 = -1e9;

string_enum!(EncoderKind { VitSmall => "vit-small", ConvSmall => "conv-small" });
string_enum!(TokenInput {
    EncoderDecoder => "encoder-decoder",
    DecoderOnly => "decoder-only",
    None => "none",
});
string_enum!(TargetKind { SoftPredictor => "soft_predictor", HardZ0 => "hard_z0", Both => "both" });
string_enum!(Condition { Zt => "z_t", Zt1 => "z_t1" });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub encoder_kind: EncoderKind,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub token_input: TokenInput,
    pub target_kind: TargetKind,
    pub condition: Condition,
    pub codebook_size: usize,
    pub resolution: usize,
    /// Pixel side of one token position.
    pub patch: usize,
    pub conv_channels: [usize; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            encoder_kind: EncoderKind::VitSmall,
            encoder_depth: 4,
            decoder_depth: 2,
            heads: 4,
            token_input: TokenInput::DecoderOnly,
            target_kind: TargetKind::SoftPredictor,
            condition: Condition::Zt1,
            codebook_size: 64,
            resolution: 32,
            patch: 4,
            conv_channels: [32, 64],
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.resolution / self.patch, self.resolution / self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.patch > 0 && self.resolution.is_multiple_of(self.patch),
            Config,
            "resolution {} not divisible by patch {}",
            self.resolution,
            self.patch
        );
        ensure!(
            self.d_model.is_multiple_of(self.heads),
            Config,
            "d_model {} not divisible by heads {}",
            self.d_model,
            self.heads
        );
        ensure!(self.codebook_size > 0, Config, "codebook_size must be positive");
        ensure!(
            self.encoder_kind != EncoderKind::ConvSmall || self.patch == 4,
            Config,
            "conv-small encoder downsamples by exactly 4"
        );
        Ok(())
    }
}

/// Encoder output aligned with the token grid, `[B, h, w, d_model]`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    feats: Tensor,
}

impl FeatureMap {
    pub fn new(feats: Tensor) -> Result<Self> {
        ensure!(feats.rank() == 4, Shape, "feature map must be [B, h, w, d], got {:?}", feats.dims());
        Ok(Self { feats })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.feats
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.feats.dims();
        (d[0], d[1], d[2], d[3])
    }

    /// Mean over lattice positions, `[B, d_model]`.
    pub fn pooled(&self) -> Result<Tensor> {
        let (b, h, w, d) = self.dims();
        Ok(self.feats.reshape((b, h * w, d))?.mean(1)?)
    }

    pub fn all_finite(&self) -> Result<bool> {
        let v = self.feats.flatten_all()?.to_vec1::<f32>()?;
        Ok(v.iter().all(|x| x.is_finite()))
    }
}

/// Embeddings of reliable tokens plus a key bias hiding masked slots.
struct TokenSeq {
    embed: Embedding,
    pos: Tensor,
}

impl TokenSeq {
    fn new(c: usize, n: usize, d: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self { embed: embedding(c, d, vb.pp("tok_embed"))?, pos: vb.get((n, d), "tok_pos")? })
    }

    fn build(&self, tokens: &TokenGrid, mask: &ReliabilityMask) -> Result<(Tensor, Tensor)> {
        let b = tokens.batch();
        let n = tokens.tokens_per_sample();
        // Masked slots look up id 0 but are hidden from attention, so their
        // true ids never reach the output.
        let ids: Vec<u32> = tokens.ids().iter().zip(mask.bits()).map(|(&id, &m)| if m == 1 { 0 } else { id }).collect();
        let ids = Tensor::from_vec(ids, (b, n), &Device::Cpu)?;
        let seq = self.embed.forward(&ids)?.broadcast_add(&self.pos)?;
        let bias: Vec<f32> = mask.bits().iter().map(|&m| if m == 1 { HIDDEN } else { 0.0 }).collect();
        Ok((seq, Tensor::from_vec(bias, (b, n), &Device::Cpu)?))
    }
}

enum Encoder {
    Vit { patch_proj: Linear, pix_pos: Tensor, body: Transformer },
    Conv { convs: Vec<ConvNhwc> },
}

pub struct AddpModel {
    cfg: ModelConfig,
    varmap: VarMap,
    encoder: Encoder,
    enc_tokens: Option<TokenSeq>,
    feat_proj: Linear,
    dec_pix_pos: Tensor,
    mask_token: Tensor,
    dec_mask_pos: Tensor,
    dec_tokens: Option<TokenSeq>,
    decoder: Transformer,
    head: Linear,
}

fn zero_bias(b: usize, n: usize) -> Result<Tensor> {
    Ok(Tensor::zeros((b, n), DType::F32, &Device::Cpu)?)
}

impl AddpModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let varmap = VarMap::new();
        let vb = new_varmap_builder(&varmap);
        let d = cfg.d_model;
        let (h, w) = cfg.grid();
        let n = h * w;
        let c = cfg.codebook_size;
        let e = vb.pp("encoder");
        let encoder = match cfg.encoder_kind {
            EncoderKind::VitSmall => Encoder::Vit {
                patch_proj: linear(3 * cfg.patch * cfg.patch, d, e.pp("patch_proj"))?,
                pix_pos: e.get((n, d), "pix_pos")?,
                body: Transformer::new(d, cfg.encoder_depth, cfg.heads, e.pp("body"))?,
            },
            EncoderKind::ConvSmall => {
                let [c1, c2] = cfg.conv_channels;
                Encoder::Conv {
                    convs: vec![
                        ConvNhwc::new(12, c1, 3, e.pp("conv0"))?,
                        ConvNhwc::new(c1, c1, 3, e.pp("conv1"))?,
                        ConvNhwc::new(4 * c1, c2, 1, e.pp("conv2"))?,
                        ConvNhwc::new(c2, c2, 3, e.pp("conv3"))?,
                        ConvNhwc::new(c2, d, 1, e.pp("out"))?,
                    ],
                }
            }
        };
        let enc_tokens = match cfg.token_input {
            TokenInput::EncoderDecoder => Some(TokenSeq::new(c, n, d, e.pp("tokens"))?),
            _ => None,
        };
        let g = vb.pp("decoder");
        let dec_tokens = match cfg.token_input {
            TokenInput::None => None,
            _ => Some(TokenSeq::new(c, n, d, g.pp("tokens"))?),
        };
        let model = Self {
            cfg: cfg.clone(),
            encoder,
            enc_tokens,
            feat_proj: linear(d, d, g.pp("feat_proj"))?,
            dec_pix_pos: g.get((n, d), "pix_pos")?,
            mask_token: g.get((1, d), "mask_token")?,
            dec_mask_pos: g.get((n, d), "mask_pos")?,
            dec_tokens,
            decoder: Transformer::new(d, cfg.decoder_depth, cfg.heads, g.pp("body"))?,
            head: linear(d, c, g.pp("head"))?,
            varmap,
        };
        seeded_init(&model.varmap, seed)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    /// Independent copy with the same weights.
    pub fn duplicate(&self) -> Result<Self> {
        let copy = Self::new(&self.cfg, 0)?;
        let src = crate::nn::sorted_vars(&self.varmap);
        for ((_, s), (_, d)) in src.iter().zip(crate::nn::sorted_vars(&copy.varmap)) {
            d.set(s.as_tensor())?;
        }
        Ok(copy)
    }

    /// Variables of the encoder alone.
    pub fn encoder_vars(&self) -> Vec<candle_core::Var> {
        crate::nn::sorted_vars(&self.varmap)
            .into_iter()
            .filter(|(k, _)| k.starts_with("encoder."))
            .map(|(_, v)| v)
            .collect()
    }

    fn check_image(&self, x: &ImageBatch) -> Result<()> {
        let (_, ch, h, w) = x.dims();
        ensure!(
            ch == 3 && h == self.cfg.resolution && w == self.cfg.resolution,
            Validation,
            "image [{ch}, {h}, {w}] does not match model resolution {}",
            self.cfg.resolution
        );
        Ok(())
    }

    fn encode_raw(&self, x: &Tensor, tokens: Option<(&Tensor, &Tensor)>) -> Result<Tensor> {
        let b = x.dims4()?.0;
        let (h, w) = self.cfg.grid();
        let n = h * w;
        let d = self.cfg.d_model;
        match &self.encoder {
            Encoder::Vit { patch_proj, pix_pos, body } => {
                let p = self.cfg.patch;
                let patches = x.reshape((b, 3, h, p, w, p))?.permute((0, 2, 4, 1, 3, 5))?.reshape((b, n, 3 * p * p))?;
                let seq = patch_proj.forward(&patches)?.broadcast_add(pix_pos)?;
                let out = match tokens {
                    Some((tok, bias)) => {
                        let full = Tensor::cat(&[&seq, tok], 1)?;
                        let key_bias = Tensor::cat(&[&zero_bias(b, n)?, bias], 1)?.reshape((b, 1, 1, 2 * n))?;
                        body.forward_biased(&full, Some(&key_bias))?.narrow(1, 0, n)?
                    }
                    None => body.forward(&seq)?,
                };
                Ok(out.reshape((b, h, w, d))?)
            }
            Encoder::Conv { convs: c } => {
                let x = space_to_depth(&x.permute((0, 2, 3, 1))?, 2)?;
                let f = c[1].forward(&c[0].forward(&x)?.relu()?)?.relu()?;
                let f = c[3].forward(&c[2].forward(&space_to_depth(&f, 2)?)?.relu()?)?.relu()?;
                let mut f = c[4].forward(&f)?.reshape((b, n, d))?;
                if let Some((tok, bias)) = tokens {
                    let keep = (bias.ge(0f32)?.to_dtype(DType::F32)?).unsqueeze(2)?;
                    f = (f + tok.broadcast_mul(&keep)?)?;
                }
                Ok(f.reshape((b, h, w, d))?)
            }
        }
    }

    /// Features of a full image; no input masking.
    pub fn encode_pixels(&self, x: &ImageBatch) -> Result<FeatureMap> {
        self.check_image(x)?;
        FeatureMap::new(self.encode_raw(x.tensor(), None)?)
    }

    /// Decoder logits `[B, n, C]`.
    fn decode_logits(&self, feats: &Tensor, reliable: &TokenGrid, mask: &ReliabilityMask) -> Result<Tensor> {
        let (b, h, w, d) = feats.dims4()?;
        let n = h * w;
        let f = self.feat_proj.forward(&feats.reshape((b, n, d))?)?.broadcast_add(&self.dec_pix_pos)?;
        let masked = self.mask_token.broadcast_add(&self.dec_mask_pos)?.unsqueeze(0)?.broadcast_as((b, n, d))?;
        let sel = Tensor::from_slice(mask.bits(), (b, n, 1), &Device::Cpu)?.broadcast_as((b, n, d))?;
        let primary = sel.where_cond(&masked, &f)?;
        let out = match &self.dec_tokens {
            Some(seq) => {
                let (tok, bias) = seq.build(reliable, mask)?;
                let full = Tensor::cat(&[&primary, &tok], 1)?;
                let key_bias = Tensor::cat(&[&zero_bias(b, n)?, &bias], 1)?.reshape((b, 1, 1, 2 * n))?;
                self.decoder.forward_biased(&full, Some(&key_bias))?.narrow(1, 0, n)?
            }
            None => self.decoder.forward(&primary)?,
        };
        Ok(self.head.forward(&out)?)
    }

    fn check_tokens(&self, reliable: &TokenGrid, mask: &ReliabilityMask, batch: usize) -> Result<()> {
        mask.check_matches(reliable)?;
        ensure!(
            reliable.batch() == batch && reliable.grid() == self.cfg.grid(),
            Shape,
            "tokens [{}, {:?}] do not match batch {batch} and grid {:?}",
            reliable.batch(),
            reliable.grid(),
            self.cfg.grid()
        );
        reliable.validate(self.cfg.codebook_size)
    }

    pub fn decode_tokens(
        &self,
        feats: &FeatureMap,
        reliable: &TokenGrid,
        mask: &ReliabilityMask,
    ) -> Result<SoftTokenDist> {
        let (b, h, w, _) = feats.dims();
        ensure!((h, w) == self.cfg.grid(), Shape, "feature grid {h}x{w} does not match model grid");
        self.check_tokens(reliable, mask, b)?;
        let logits = self.decode_logits(feats.tensor(), reliable, mask)?.detach();
        SoftTokenDist::from_logits(&logits.reshape((b, h, w, self.cfg.codebook_size))?)
    }

    /// Full forward pass, including tokens fed to the encoder when configured.
    /// Returns logits `[B*n, C]`.
    pub fn forward_logits(&self, x: &ImageBatch, reliable: &TokenGrid, mask: &ReliabilityMask) -> Result<Tensor> {
        self.check_image(x)?;
        self.check_tokens(reliable, mask, x.batch())?;
        let enc_tokens = match &self.enc_tokens {
            Some(seq) => Some(seq.build(reliable, mask)?),
            None => None,
        };
        let feats = self.encode_raw(x.tensor(), enc_tokens.as_ref().map(|(a, b)| (a, b)))?;
        let logits = self.decode_logits(&feats, reliable, mask)?;
        Ok(logits.reshape(((), self.cfg.codebook_size))?)
    }

    /// Token distribution given the current image and reliable tokens.
    /// Inference only: the result carries no graph.
    pub fn predict(&self, x: &ImageBatch, reliable: &TokenGrid, mask: &ReliabilityMask) -> Result<SoftTokenDist> {
        let (h, w) = self.cfg.grid();
        let logits = self.forward_logits(x, reliable, mask)?.detach();
        SoftTokenDist::from_logits(&logits.reshape((x.batch(), h, w, self.cfg.codebook_size))?)
    }

    /// Prediction from an all-mask decoder input; identical for every sample.
    pub fn predict_from_empty(&self, batch: usize) -> Result<SoftTokenDist> {
        let (h, w) = self.cfg.grid();
        let d = self.cfg.d_model;
        let feats = FeatureMap::new(Tensor::zeros((batch, h, w, d), DType::F32, &Device::Cpu)?)?;
        let tokens = TokenGrid::filled(0, batch, h, w);
        self.decode_tokens(&feats, &tokens, &ReliabilityMask::all_ones(batch, h, w))
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let meta = CheckpointMeta {
            kind: CHECKPOINT_KIND.into(),
            config_hash: config_hash.into(),
            config: serde_json::to_string(&self.cfg)?,
        };
        checkpoint::save_varmap(path, &meta, &self.varmap)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let (meta, tensors) = checkpoint::load_tensors(path, CHECKPOINT_KIND)?;
        let cfg: ModelConfig = serde_json::from_str(&meta.config)
            .map_err(|e| Error::checkpoint(path, format!("bad embedded config: {e}")))?;
        let m = Self::new(&cfg, 0)?;
        checkpoint::load_into_varmap(&m.varmap, &tensors, None)?;
        Ok((m, meta))
    }
}

/// Differentiable masked soft cross-entropy: mean over rows with `mask = 1`
/// of `sum_c target_c * -log softmax(logits)_c`. Rows with `mask = 0`
/// contribute nothing; an empty mask yields zero with a warning.
pub fn masked_ce_from_logits(logits: &Tensor, target: &Tensor, mask: &[u8]) -> Result<Tensor> {
    let rows = logits.dims2()?.0;
    ensure!(
        target.dims() == logits.dims() && mask.len() == rows,
        Shape,
        "logits {:?}, target {:?} and mask len {} disagree",
        logits.dims(),
        target.dims(),
        mask.len()
    );
    let count = mask.iter().filter(|&&m| m == 1).count();
    if count == 0 {
        log::warn!("masked loss over an empty mask is defined as 0");
        return Ok((logits.sum_all()? * 0.0)?);
    }
    let idx: Vec<u32> = (0..rows as u32).filter(|&i| mask[i as usize] == 1).collect();
    let idx = Tensor::from_vec(idx, count, &Device::Cpu)?;
    let ce = soft_cross_entropy_rows(&logits.index_select(&idx, 0)?, &target.index_select(&idx, 0)?)?;
    Ok(ce.mean_all()?)
}

/// Masked cross-entropy between distributions, in f64.
pub fn masked_ce_loss(pred: &SoftTokenDist, target: &SoftTokenDist, mask: &ReliabilityMask) -> Result<f64> {
    let (b, h, w, c) = pred.dims();
    ensure!(
        target.dims() == (b, h, w, c) && (mask.batch(), mask.grid()) == (b, (h, w)),
        Shape,
        "prediction, target and mask shapes disagree"
    );
    let p = pred.rows()?;
    let q = target.rows()?;
    let (mut total, mut count) = (0f64, 0usize);
    for (i, &m) in mask.bits().iter().enumerate() {
        if m == 0 {
            continue;
        }
        count += 1;
        for (&qc, &pc) in q[i].iter().zip(&p[i]) {
            if qc > 0.0 {
                total -= qc as f64 * (pc as f64).ln();
            }
        }
    }
    if count == 0 {
        log::warn!("masked loss over an empty mask is defined as 0");
        return Ok(0.0);
    }
    Ok(total / count as f64)
}

/// Top-1 agreement with `truth` over masked positions.
pub fn masked_accuracy(logits: &Tensor, truth: &TokenGrid, mask: &ReliabilityMask) -> Result<f64> {
    let pred = logits.argmax(D::Minus1)?.to_vec1::<u32>()?;
    let (mut hit, mut count) = (0usize, 0usize);
    for ((p, t), &m) in pred.iter().zip(truth.ids()).zip(mask.bits()) {
        if m == 1 {
            count += 1;
            hit += usize::from(p == t);
        }
    }
    Ok(if count == 0 { 0.0 } else { hit as f64 / count as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng;
    use candle_core::Var;
    use rand::Rng;

    fn small(kind: EncoderKind, token_input: TokenInput) -> ModelConfig {
        ModelConfig {
            d_model: 32,
            encoder_depth: 1,
            decoder_depth: 1,
            encoder_kind: kind,
            token_input,
            conv_channels: [8, 16],
            codebook_size: 16,
            ..Default::default()
        }
    }

    fn image(seed: u64, b: usize) -> ImageBatch {
        let mut r = rng(seed);
        let v = (0..b * 3 * 32 * 32).map(|_| r.random_range(-1.0f32..1.0)).collect();
        ImageBatch::from_vec(v, (b, 3, 32, 32)).unwrap()
    }

    fn grid(seed: u64, b: usize, c: u32) -> TokenGrid {
        let mut r = rng(seed);
        TokenGrid::new((0..b * 64).map(|_| r.random_range(0..c)).collect(), b, 8, 8).unwrap()
    }

    fn mask(seed: u64, b: usize) -> ReliabilityMask {
        let mut r = rng(seed);
        ReliabilityMask::new((0..b * 64).map(|_| r.random_range(0..2u8)).collect(), b, 8, 8).unwrap()
    }

    #[test]
    fn every_parameter_receives_gradient() {
        for &kind in EncoderKind::ALL {
            for &input in TokenInput::ALL {
                let model = AddpModel::new(&small(kind, input), 0).unwrap();
                let logits = model.forward_logits(&image(1, 2), &grid(2, 2, 16), &mask(3, 2)).unwrap();
                let probe = Tensor::randn(0f32, 1.0, logits.shape(), &Device::Cpu).unwrap();
                let grads = (logits * probe).unwrap().sum_all().unwrap().backward().unwrap();
                for (name, var) in crate::nn::sorted_vars(model.varmap()) {
                    let g = grads.get(var.as_tensor());
                    let norm = g.map(|g| g.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap());
                    assert!(norm.is_some_and(|n| n > 0.0), "{kind:?}/{input:?}: no gradient for {name}");
                }
            }
        }
    }

    #[test]
    fn enum_names_roundtrip() {
        for k in TokenInput::ALL {
            assert_eq!(k.as_str().parse::<TokenInput>().unwrap(), *k);
        }
        assert!("both-ish".parse::<TargetKind>().is_err());
        let cfg: ModelConfig = toml::from_str("token_input = \"none\"\ncondition = \"z_t\"").unwrap();
        assert_eq!((cfg.token_input, cfg.condition), (TokenInput::None, Condition::Zt));
        assert!(toml::from_str::<ModelConfig>("token_input = \"sideways\"").is_err());
    }

    #[test]
    fn feature_shapes_for_both_encoders() {
        for kind in EncoderKind::ALL {
            let m = AddpModel::new(&small(*kind, TokenInput::None), 0).unwrap();
            let f = m.encode_pixels(&image(0, 2)).unwrap();
            assert_eq!(f.dims(), (2, 8, 8, 32));
            assert!(f.all_finite().unwrap());
        }
    }

    #[test]
    fn wrong_resolution_is_rejected() {
        let m = AddpModel::new(&small(EncoderKind::VitSmall, TokenInput::None), 0).unwrap();
        let x = ImageBatch::new(Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert!(matches!(m.encode_pixels(&x), Err(Error::Validation(_))));
    }

    #[test]
    fn all_masked_ignores_features_and_tokens() {
        for ti in TokenInput::ALL {
            let m = AddpModel::new(&small(EncoderKind::VitSmall, *ti), 1).unwrap();
            let ones = ReliabilityMask::all_ones(2, 8, 8);
            let f1 = m.encode_pixels(&image(1, 2)).unwrap();
            let f2 = m.encode_pixels(&image(2, 2)).unwrap();
            let a = m.decode_tokens(&f1, &grid(1, 2, 16), &ones).unwrap().rows().unwrap();
            let b = m.decode_tokens(&f2, &grid(2, 2, 16), &ones).unwrap().rows().unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn masked_feature_perturbations_are_invisible() {
        let m = AddpModel::new(&small(EncoderKind::VitSmall, TokenInput::DecoderOnly), 2).unwrap();
        let f = m.encode_pixels(&image(3, 1)).unwrap();
        let z = grid(3, 1, 16);
        let mk = mask(4, 1);
        let base = m.decode_tokens(&f, &z, &mk).unwrap().rows().unwrap();
        let sel = mk.to_tensor(&Device::Cpu).unwrap().reshape((1, 8, 8, 1)).unwrap();
        for s in 0..50 {
            let noise = Tensor::randn(0f32, 3.0, (1, 8, 8, 32), &Device::Cpu).unwrap();
            let _ = s;
            let pert = (f.tensor() + noise.broadcast_mul(&sel).unwrap()).unwrap();
            let out = m.decode_tokens(&FeatureMap::new(pert).unwrap(), &z, &mk).unwrap().rows().unwrap();
            assert_eq!(out, base);
        }
    }

    #[test]
    fn masked_token_ids_do_not_leak() {
        for ti in TokenInput::ALL {
            let m = AddpModel::new(&small(EncoderKind::VitSmall, *ti), 3).unwrap();
            let x = image(5, 1);
            let mk = mask(6, 1);
            let z1 = grid(7, 1, 16);
            let mut z2 = z1.clone();
            for (i, id) in z2.ids_mut().iter_mut().enumerate() {
                if mk.bits()[i] == 1 {
                    *id = (*id + 5) % 16;
                }
            }
            let a = m.predict(&x, &z1, &mk).unwrap().rows().unwrap();
            let b = m.predict(&x, &z2, &mk).unwrap().rows().unwrap();
            assert_eq!(a, b, "{ti}");
        }
    }

    #[test]
    fn unmasked_none_depends_only_on_features() {
        let m = AddpModel::new(&small(EncoderKind::ConvSmall, TokenInput::None), 4).unwrap();
        let f = m.encode_pixels(&image(8, 1)).unwrap();
        let zeros = ReliabilityMask::all_zeros(1, 8, 8);
        let a = m.decode_tokens(&f, &grid(1, 1, 16), &zeros).unwrap().rows().unwrap();
        let b = m.decode_tokens(&f, &grid(2, 1, 16), &zeros).unwrap().rows().unwrap();
        assert_eq!(a, b);
        m.decode_tokens(&f, &grid(1, 1, 16), &zeros).unwrap().validate(1e-5).unwrap();
    }

    #[test]
    fn empty_prediction_is_batch_constant() {
        let m = AddpModel::new(&small(EncoderKind::VitSmall, TokenInput::DecoderOnly), 5).unwrap();
        let p = m.predict_from_empty(3).unwrap();
        p.validate(1e-5).unwrap();
        let rows = p.rows().unwrap();
        assert_eq!(rows[..64], rows[64..128]);
        assert_eq!(rows[..64], rows[128..]);
    }

    #[test]
    fn loss_reference_values() {
        let z = grid(9, 1, 16);
        let onehot = SoftTokenDist::one_hot(&z, 16).unwrap();
        let mk = mask(10, 1);
        assert_eq!(masked_ce_loss(&onehot, &onehot, &mk).unwrap(), 0.0);
        let uni = SoftTokenDist::uniform(1, 8, 8, 64).unwrap();
        let target = SoftTokenDist::one_hot(&grid(9, 1, 64), 64).unwrap();
        let l = masked_ce_loss(&uni, &target, &mk).unwrap();
        assert!((l - 64f64.ln()).abs() < 1e-5, "{l}");
        let empty = ReliabilityMask::all_zeros(1, 8, 8);
        assert_eq!(masked_ce_loss(&uni, &target, &empty).unwrap(), 0.0);
    }

    #[test]
    fn loss_ignores_unmasked_targets_and_gradients() {
        let logits = Var::from_tensor(&Tensor::randn(0f32, 1.0, (6, 5), &Device::Cpu).unwrap()).unwrap();
        let mk = [1u8, 0, 1, 0, 0, 1];
        let t1 = candle_nn::ops::softmax(&Tensor::randn(0f32, 1.0, (6, 5), &Device::Cpu).unwrap(), 1).unwrap();
        let mut t2v = t1.to_vec2::<f32>().unwrap();
        t2v[1] = vec![1.0, 0.0, 0.0, 0.0, 0.0];
        let t2 = Tensor::new(t2v, &Device::Cpu).unwrap();
        let l1 = masked_ce_from_logits(logits.as_tensor(), &t1, &mk).unwrap();
        let l2 = masked_ce_from_logits(logits.as_tensor(), &t2, &mk).unwrap();
        assert_eq!(l1.to_scalar::<f32>().unwrap(), l2.to_scalar::<f32>().unwrap());
        let g = l1.backward().unwrap();
        let grad = g.get(logits.as_tensor()).unwrap().to_vec2::<f32>().unwrap();
        for (i, row) in grad.iter().enumerate() {
            if mk[i] == 0 {
                assert!(row.iter().all(|v| v.abs() < 1e-8));
            }
        }
    }

    #[test]
    fn hard_target_matches_direct_cross_entropy() {
        let logits = Tensor::randn(0f32, 1.0, (4, 7), &Device::Cpu).unwrap();
        let labels = [3u32, 1, 6, 0];
        let mk = [1u8, 1, 0, 1];
        let mut t = vec![0f32; 28];
        for (i, &l) in labels.iter().enumerate() {
            t[i * 7 + l as usize] = 1.0;
        }
        let target = Tensor::from_vec(t, (4, 7), &Device::Cpu).unwrap();
        let ours = masked_ce_from_logits(&logits, &target, &mk).unwrap().to_scalar::<f32>().unwrap() as f64;
        let rows = logits.to_vec2::<f32>().unwrap();
        let mut direct = 0.0;
        for i in [0usize, 1, 3] {
            let lse = rows[i].iter().map(|&v| (v as f64).exp()).sum::<f64>().ln();
            direct += lse - rows[i][labels[i] as usize] as f64;
        }
        direct /= 3.0;
        assert!((ours - direct).abs() < 1e-5, "{ours} vs {direct}");
    }
}
