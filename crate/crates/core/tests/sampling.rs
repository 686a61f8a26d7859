use addp::model::{AddpModel, ModelConfig};
use addp::nn::rng;
use addp::sampler::{generate, inpaint, PixelMask, SamplerConfig};
use addp::tokenizer::{TokenizerConfig, VqTokenizer};

fn untrained() -> (AddpModel, VqTokenizer) {
    let tok = VqTokenizer::new(&TokenizerConfig { channels: [8, 16], ..Default::default() }, 1).unwrap();
    let model_cfg = ModelConfig { d_model: 32, encoder_depth: 1, decoder_depth: 1, heads: 2, ..Default::default() };
    (AddpModel::new(&model_cfg, 2).unwrap(), tok)
}

fn expected_masked(t: usize, total: usize, n: usize) -> usize {
    let ratio = (std::f64::consts::FRAC_PI_2 * (1.0 - t as f64 / total as f64)).cos();
    ((n as f64 * ratio + 0.5).floor() as usize).min(n)
}

#[test]
fn untrained_generation_follows_the_schedule() {
    let (model, tok) = untrained();
    for total in [4, 10] {
        let cfg = SamplerConfig { steps: total, ..Default::default() };
        let g = generate(3, &model, &tok, &cfg, &mut rng(9), true).unwrap();
        assert_eq!(g.steps_run, total);
        assert_eq!(g.trajectory.len(), total + 1);
        for frame in &g.trajectory {
            for b in 0..3 {
                assert_eq!(frame.m.masked_count(b), expected_masked(frame.t, total, 64), "t={} T={total}", frame.t);
            }
        }
        assert!(g.tokens.ids().iter().all(|&id| (id as usize) < tok.codebook_size()));
        let px = g.images.to_vec().unwrap();
        assert!(px.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn generation_is_reproducible_from_the_seed() {
    let (model, tok) = untrained();
    let cfg = SamplerConfig { steps: 4, ..Default::default() };
    let a = generate(2, &model, &tok, &cfg, &mut rng(3), false).unwrap();
    let b = generate(2, &model, &tok, &cfg, &mut rng(3), false).unwrap();
    assert_eq!(a.tokens.ids(), b.tokens.ids());
    assert_eq!(a.images.to_vec().unwrap(), b.images.to_vec().unwrap());
}

#[test]
fn inpainting_leaves_distant_pixels_alone() {
    let (model, tok) = untrained();
    let cfg = SamplerConfig { steps: 4, ..Default::default() };
    let source = generate(1, &model, &tok, &cfg, &mut rng(5), false).unwrap().images;
    let region = PixelMask::rect(32, 32, 8, 16, 8, 16);
    let out = inpaint(&source, &region, &model, &tok, &cfg, &mut rng(6)).unwrap();
    let (before, after) = (source.to_vec().unwrap(), out.to_vec().unwrap());
    let weights = region.blend_weights(model.config().patch as f64);
    for c in 0..3 {
        for (i, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                assert_eq!(before[c * 1024 + i].to_bits(), after[c * 1024 + i].to_bits());
            }
        }
    }
}
