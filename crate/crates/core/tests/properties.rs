use metascreen::models::layers::self_attention_with_weights;
use metascreen::models::{build_model, Batch, ForwardBatch, InverseBatch, SpectralBatch};
use metascreen::screen::random_pattern;
use metascreen::{
    Band, Channel, Direction, Family, ModelConfig, PixelGrid, SpectralResponse, SupplementBand,
    Tape, Target, Tensor,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SAMPLES: usize = 32;

fn fake_response(rng: &mut ChaCha8Rng) -> SpectralResponse {
    let mut draw = |lo: f64, hi: f64| {
        (0..SAMPLES)
            .map(|_| rng.gen_range(lo..hi))
            .collect::<Vec<_>>()
    };
    SpectralResponse {
        amp_x: draw(0.0, 1.0),
        amp_y: draw(0.0, 1.0),
        phase: draw(-3.1, 3.1),
    }
}

fn config_strategy() -> impl Strategy<Value = ModelConfig> {
    (
        prop::sample::select(Family::ALL.to_vec()),
        prop::sample::select(vec![
            Direction::Forward,
            Direction::Inverse,
            Direction::Spectral,
        ]),
        prop::sample::select(vec![Channel::AmpX, Channel::AmpY, Channel::Phase]),
        prop::sample::select(Band::ALL.to_vec()),
        any::<bool>(),
        1usize..=2,
        prop::sample::select(vec![(16usize, 1usize), (16, 2), (16, 4)]),
        any::<u64>(),
    )
        .prop_map(
            |(family, direction, channel, band, supplement, depth, (hidden, heads), seed)| {
                let target = Target { channel, band };
                let mut cfg = match direction {
                    Direction::Forward => ModelConfig::forward(family, target),
                    Direction::Inverse => ModelConfig::inverse(family, band),
                    Direction::Spectral => ModelConfig::spectral(family, target),
                };
                cfg.hidden_size = hidden;
                cfg.attention_heads = heads;
                cfg.depth = depth;
                cfg.band_samples = SAMPLES;
                cfg.patch = 8;
                cfg.seed = seed;
                if supplement && direction == Direction::Forward {
                    cfg.supplement_band = SupplementBand::from_band(band.opposite());
                }
                cfg
            },
        )
}

fn make_batch(cfg: &ModelConfig, n: usize, rng: &mut ChaCha8Rng) -> Batch {
    let spectra: Vec<SpectralResponse> = (0..n).map(|_| fake_response(rng)).collect();
    let refs: Vec<&SpectralResponse> = spectra.iter().collect();
    match cfg.direction {
        Direction::Forward => {
            let grids: Vec<PixelGrid> = (0..n)
                .map(|_| random_pattern(rng.gen(), 0.5).unwrap())
                .collect();
            let grid_refs: Vec<&PixelGrid> = grids.iter().collect();
            let supp = cfg.supplement_band.band().map(|_| refs.as_slice());
            Batch::Forward(ForwardBatch::new(&grid_refs, cfg.input_mode, supp).unwrap())
        }
        Direction::Inverse => Batch::Inverse(InverseBatch::new(&refs).unwrap()),
        Direction::Spectral => Batch::Spectral(SpectralBatch::new(&refs).unwrap()),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn output_shapes_follow_config(cfg in config_strategy(), n in 1usize..4) {
        let model = build_model(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let batch = make_batch(&cfg, n, &mut rng);
        let out = model.predict(&batch).unwrap();
        let width = if cfg.direction == Direction::Inverse { 625 } else { SAMPLES };
        prop_assert_eq!(out.shape(), &[n, width][..]);
        let raw = model.predict_raw(&batch).unwrap();
        prop_assert_eq!(raw.shape(), &[n, cfg.output_len()][..]);
        if cfg.direction == Direction::Inverse {
            prop_assert!(out.data().iter().all(|&p| p > 0.0 && p < 1.0));
        }
        if cfg.direction != Direction::Inverse && cfg.target.channel == Channel::Phase {
            prop_assert!(out.data().iter().all(|p| p.abs() <= std::f64::consts::PI));
        }
        let again = build_model(&cfg).unwrap();
        prop_assert_eq!(again.parameter_count(), model.parameter_count());
    }

    #[test]
    fn every_parameter_receives_gradient(cfg in config_strategy()) {
        let model = build_model(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 1);
        let batch = make_batch(&cfg, 4, &mut rng);
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape, true);
        let out = model.forward(&mut tape, &p, &batch).unwrap();
        let shape = tape.shape(out).to_vec();
        let target = Tensor::from_fn(&shape, |_| rng.gen_range(0.0..1.0));
        let t = tape.constant(&target);
        let loss = tape.mse_loss(out, t).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (name, var) in model.params().names().iter().zip(&p) {
            let g = grads.get(*var);
            prop_assert!(g.is_some_and(|g| g.iter().any(|&x| x != 0.0)), "{} has no gradient", name);
        }
    }

    #[test]
    fn attention_rows_are_distributions(b in 1usize..3, len in 1usize..6, heads in 1usize..4, d in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hd = heads * d;
        let x = Tensor::from_fn(&[b, len, hd], |_| rng.gen_range(-3.0..3.0));
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let w = tape.constant(&Tensor::from_fn(&[hd, hd], |i| if i % (hd + 1) == 0 { 1.0 } else { 0.0 }));
        let bias = tape.constant(&Tensor::zeros(&[hd]));
        let (_, weights) = self_attention_with_weights(&mut tape, xv, heads, w, bias).unwrap();
        for row in tape.value(weights).chunks(len) {
            prop_assert!(row.iter().all(|&a| a >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
