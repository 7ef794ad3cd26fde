use candle_core::{Device, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use uses2::audio::{read_wav, write_wav, WavEncoding, Waveform};
use uses2::evalcli::si_sdr;
use uses2::objective::{loss, LossConfig};
use uses2::spectral_codec::{istft, stft, StftPlan};
use uses2::tf_blocks::{merge_windows, partition_windows, WindowSpec};
use uses2::training::{lr_after_history, lr_at, sample_channels, Plateau, StageSpec, TrainConfig};

fn wave(samples: Vec<f32>, channels: usize, rate: u32) -> Waveform {
    Waveform::new(samples, channels, rate).unwrap()
}

fn signal(len: usize, seed: u64) -> Vec<f32> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn stft_round_trip(rate in prop::sample::select(vec![8000u32, 16000, 24000, 48000]),
                       channels in 1usize..4, len in 1usize..6000, seed in any::<u64>()) {
        let w = wave(signal(channels * len, seed), channels, rate);
        let s = stft(&w).unwrap();
        prop_assert_eq!(s.frames(), StftPlan::for_rate(rate).unwrap().frames(len));
        let y = istft(&s, len).unwrap();
        let err = w.samples().iter().zip(y.samples()).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
        prop_assert!(err < 1e-4, "error {}", err);
    }

    #[test]
    fn frame_count_depends_on_duration_only(ms in 1u32..3000) {
        let frames: Vec<usize> = [8000u32, 16000, 32000, 48000]
            .iter()
            .map(|&r| StftPlan::for_rate(r).unwrap().frames((r / 1000 * ms) as usize))
            .collect();
        prop_assert!(frames.windows(2).all(|w| w[0] == w[1]), "{:?}", frames);
    }

    #[test]
    fn window_round_trip(c in 1usize..3, f in 1usize..20, t in 1usize..20,
                         wf in 1usize..6, wt in 1usize..6, shifted in any::<bool>()) {
        let x = Tensor::randn(0f32, 1.0, (c, f, t, 2), &Device::Cpu).unwrap();
        let spec = WindowSpec::new(wf, wt, shifted).unwrap();
        let p = partition_windows(&x, &spec).unwrap();
        prop_assert_eq!(p.windows.dim(1).unwrap(), wf * wt);
        let y = merge_windows(&p.windows, &p.record, &spec).unwrap();
        let same = x.flatten_all().unwrap().to_vec1::<f32>().unwrap() == y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        prop_assert!(same);
    }

    #[test]
    fn loss_ignores_estimate_scale(a in 0.05f32..20.0, seed in any::<u64>()) {
        let cfg = LossConfig { fft_sizes: vec![64, 128], time_weight: 0.5 };
        let s = signal(1000, seed);
        let e = signal(1000, seed ^ 1);
        let l = loss(&wave(e.clone(), 1, 8000), &wave(s.clone(), 1, 8000), &cfg).unwrap();
        let la = loss(&wave(e.iter().map(|v| a * v).collect(), 1, 8000), &wave(s.clone(), 1, 8000), &cfg).unwrap();
        prop_assert!((l - la).abs() <= 1e-4 * l.max(1e-3), "{} vs {}", l, la);
        let exact = loss(&wave(s.iter().map(|v| a * v).collect(), 1, 8000), &wave(s, 1, 8000), &cfg).unwrap();
        prop_assert!(exact < 1e-5, "{}", exact);
    }

    #[test]
    fn si_sdr_ignores_estimate_scale(a in 0.05f32..20.0, seed in any::<u64>()) {
        let s = signal(800, seed);
        let e: Vec<f32> = s.iter().zip(signal(800, seed ^ 7)).map(|(x, n)| x + 0.3 * n).collect();
        let scaled: Vec<f32> = e.iter().map(|v| a * v).collect();
        prop_assert!((si_sdr(&e, &s).unwrap() - si_sdr(&scaled, &s).unwrap()).abs() < 1e-4);
    }

    #[test]
    fn schedule_matches_closed_form(step in 0u64..20000, halvings in 0u32..6) {
        let c = TrainConfig::default();
        let expected = 4e-4 * (step as f64 / 4000.0).min(1.0) * 0.5f64.powi(halvings as i32);
        prop_assert!((lr_at(step, halvings, &c) - expected).abs() < 1e-18);
    }

    #[test]
    fn plateau_replay_matches_reference(history in prop::collection::vec(0u8..5, 0..30)) {
        // Reference: count halvings by walking runs of non-improving epochs.
        let vals: Vec<f64> = history.iter().map(|&v| v as f64).collect();
        let (mut best, mut run, mut halvings) = (f64::INFINITY, 0, 0);
        for &v in &vals {
            if v < best {
                best = v;
                run = 0;
            } else {
                run += 1;
                if run == 2 {
                    run = 0;
                    halvings += 1;
                }
            }
        }
        let mut p = Plateau::default();
        for &v in &vals {
            p.observe(v, 2);
        }
        prop_assert_eq!(p.halvings, halvings);
        let c = TrainConfig::default();
        prop_assert_eq!(lr_after_history(5000, &vals, &c), lr_at(5000, halvings, &c));
    }

    #[test]
    fn stage_two_channel_subsets(channels in 2usize..8, max in 2usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pick = sample_channels(channels, StageSpec::new(2).unwrap(), max, &mut rng).unwrap();
        prop_assert!(pick.len() >= 2 && pick.len() <= channels.min(max));
        let mut sorted = pick.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), pick.len());
        prop_assert!(pick.iter().all(|&c| c < channels));
    }

    #[test]
    fn float_wav_round_trip(channels in 1usize..4, len in 1usize..500, seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let w = wave(signal(channels * len, seed), channels, 16000);
        write_wav(&path, &w, WavEncoding::Float32).unwrap();
        prop_assert_eq!(read_wav(&path).unwrap(), w);
    }
}
