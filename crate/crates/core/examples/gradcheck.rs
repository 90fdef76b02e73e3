//! Finite-difference check of the full encoder-decoder loss in f64.

use cotprompt::numerics::{grad_check, GradCheckOptions, ParamStore};
use cotprompt::transformer::{EncoderDecoderModel, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let config = ModelConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        n_enc_layers: 1,
        n_dec_layers: 2,
        vocab_size: 11,
        n_relpos_buckets: 8,
        max_relpos_distance: 16,
        rms_eps: 1e-6,
    };
    let mut store = ParamStore::new();
    let model = EncoderDecoderModel::new(config, &mut store, &mut ChaCha8Rng::seed_from_u64(1))?;
    let mut store = store.cast::<f64>();
    let prompt = [5u32, 6, 7, 8];
    let targets = [1u32, 9, 10, 2];
    let report = grad_check(
        |g| {
            let x = model.embed_tokens(g, &prompt)?;
            let enc = model.encoder_forward(g, x, &[true; 4])?;
            let logits = model.decoder_forward(g, &targets[..3], enc, &[true; 4])?;
            let t: Vec<usize> = targets[1..].iter().map(|&t| t as usize).collect();
            g.cross_entropy(logits, &t, &[true; 3])
        },
        &mut store,
        &GradCheckOptions::default(),
    )?;
    println!("{} parameters checked", store.len());
    println!("{report:#?}");
    Ok(())
}
