use abq_core::calibration::{calibrate_block, initial_params, synthetic_segments, CalibOptions};
use abq_core::quantizer::Scheme;
use abq_core::toymodel::{
    first_token_attention_share, forward_fp, forward_quant, BlockConfig, BlockParams, LayerSpecs,
    ToyBlock,
};
use abq_core::{Matrix, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mean_share_gap(
    block: &ToyBlock<f64>,
    data: &[Matrix<f64>],
    specs: &LayerSpecs<f64>,
    params: &BlockParams<f64>,
) -> Result<f64> {
    let mut gap = 0.0;
    for x in data {
        let (_, fp) = forward_fp(block, x)?;
        let (_, q) = forward_quant(block, x, specs, params)?;
        gap += (first_token_attention_share(&q) - first_token_attention_share(&fp)).abs();
    }
    Ok(gap / data.len() as f64)
}

#[test]
fn calibration_does_not_widen_first_token_share_gap() {
    let opts = CalibOptions {
        segments: 16,
        seed: 5,
        ..Default::default()
    };
    let block =
        ToyBlock::random(BlockConfig::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let data = synthetic_segments(opts.segments, opts.tokens, opts.dim, 6);
    let specs = LayerSpecs::uniform(opts.bits_w, opts.bits_a, Scheme::Asymmetric).unwrap();

    let before = initial_params(&block, &data, &specs, opts.gamma()).unwrap();
    let after = calibrate_block(&block, &data, &specs, &opts)
        .unwrap()
        .params;
    let gap_before = mean_share_gap(&block, &data, &specs, &before).unwrap();
    let gap_after = mean_share_gap(&block, &data, &specs, &after).unwrap();
    eprintln!("first-token share gap {gap_before:.3e} -> {gap_after:.3e}");
    assert!(gap_after <= gap_before);
}

#[test]
fn w2_balanced_calibration_runs_and_descends() {
    let opts = CalibOptions {
        segments: 8,
        epochs: 10,
        bits_w: 2,
        bits_a: 8,
        scheme: Scheme::Balanced,
        ..Default::default()
    };
    let block: ToyBlock<f64> =
        ToyBlock::random(BlockConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let data = synthetic_segments(opts.segments, opts.tokens, opts.dim, 2);
    let specs = LayerSpecs::uniform(opts.bits_w, opts.bits_a, opts.scheme).unwrap();
    let state = calibrate_block(&block, &data, &specs, &opts).unwrap();
    let (i, f) = (state.initial_loss.unwrap(), state.final_loss.unwrap());
    assert_eq!(state.loss_history.len(), opts.epochs * opts.segments);
    assert!(f.loss < i.loss, "{} -> {}", i.loss, f.loss);
}
