use alive_core::dit::{DiTConfig, DiTModel};
use alive_core::flow::{degrade_video, RefinerSample, Stage, StepMetrics, TrainConfig, Trainer};
use alive_core::params::ParamGroup;
use alive_core::rng::SeedTree;
use alive_core::synth::{make_synthetic_av_dataset, AvDataset};
use alive_core::Error;

fn model(seed: u64) -> DiTModel {
    DiTModel::new(DiTConfig::desk(), &mut SeedTree::new(seed).derive("init").rng()).unwrap()
}

fn desk_config(stage: Stage, lr: f64) -> TrainConfig {
    let mut c = TrainConfig::preset(stage);
    c.lr_video = lr;
    c.lr_audio = lr;
    c.lr_v2a_cross = lr;
    c.batch = 4;
    c
}

fn run(trainer: &mut Trainer, data: &AvDataset, steps: usize) -> Vec<StepMetrics> {
    (0..steps)
        .map(|_| {
            let b: Vec<_> = trainer.sample_batch(&data.samples).into_iter().cloned().collect();
            trainer.train_step(&b, &data.layout).unwrap()
        })
        .collect()
}

#[test]
fn zero_audio_rate_freezes_audio_bits() {
    let data = make_synthetic_av_dataset(32, 1).unwrap();
    let mut cfg = desk_config(Stage::Joint, 1e-3);
    cfg.lr_audio = 0.0;
    let mut t = Trainer::new(model(1), cfg).unwrap();
    let audio = t.model.params().checksum(Some(ParamGroup::Audio));
    let video = t.model.params().checksum(Some(ParamGroup::Video));
    run(&mut t, &data, 5);
    assert_eq!(t.model.params().checksum(Some(ParamGroup::Audio)), audio);
    assert_ne!(t.model.params().checksum(Some(ParamGroup::Video)), video);
}

#[test]
fn full_dropout_disables_every_forward() {
    let data = make_synthetic_av_dataset(32, 2).unwrap();
    let mut cfg = desk_config(Stage::Joint, 1e-3);
    cfg.mutual_dropout_prob = 1.0;
    let mut t = Trainer::new(model(2), cfg).unwrap();
    let cross = t.model.params().checksum(Some(ParamGroup::VideoToAudioCross));
    let metrics = run(&mut t, &data, 6);
    assert_eq!(t.counter.forwards, 24);
    assert_eq!(t.counter.mutual_disabled, 24);
    assert!(metrics.iter().all(|m| m.mutual_active_fraction == 0.0));
    // A pathway that never runs never receives gradient.
    assert_eq!(t.model.params().checksum(Some(ParamGroup::VideoToAudioCross)), cross);
}

#[test]
fn default_dropout_rate_is_observed() {
    let data = make_synthetic_av_dataset(32, 3).unwrap();
    let mut t = Trainer::new(model(3), desk_config(Stage::Joint, 1e-3)).unwrap();
    run(&mut t, &data, 100);
    let p = t.counter.mutual_disabled as f64 / t.counter.forwards as f64;
    assert!((p - 0.3).abs() < 0.07, "{p}");
}

#[test]
fn identical_seeds_give_identical_trajectories() {
    let data = make_synthetic_av_dataset(32, 4).unwrap();
    let go = || {
        let mut cfg = desk_config(Stage::Ct, 1e-3);
        cfg.seed = 9;
        let mut t = Trainer::new(model(4), cfg).unwrap();
        let m = run(&mut t, &data, 8);
        (m, t.model.params().checksum(None))
    };
    let (a, ca) = go();
    let (b, cb) = go();
    assert_eq!(ca, cb);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.video_mse.to_bits(), y.video_mse.to_bits());
        assert_eq!(x.audio_mse.to_bits(), y.audio_mse.to_bits());
    }
}

#[test]
fn non_finite_loss_aborts_with_dump() {
    let mut data = make_synthetic_av_dataset(4, 5).unwrap();
    for s in &mut data.samples {
        s.video.data_mut()[0] = f64::NAN;
    }
    let mut t = Trainer::new(model(5), desk_config(Stage::Joint, 1e-3)).unwrap();
    let b: Vec<_> = data.samples.clone();
    match t.train_step(&b, &data.layout) {
        Err(Error::NonFinite { location, detail }) => {
            assert_eq!(location, "train step 0");
            let dump: serde_json::Value = serde_json::from_str(&detail).unwrap();
            assert_eq!(dump["timesteps"].as_array().unwrap().len(), 4);
            assert!(dump["param_checksum"].is_u64());
        }
        other => panic!("{:?}", other.map(|m| m.video_mse)),
    }
}

fn refiner_samples(data: &AvDataset) -> Vec<RefinerSample> {
    data.samples
        .iter()
        .map(|s| RefinerSample {
            clean_video: s.video.clone(),
            degraded_video: degrade_video(&s.video),
            clean_audio: s.audio.clone(),
            caption: s.caption,
        })
        .collect()
}

#[test]
fn refiner_leaves_audio_untouched() {
    let data = make_synthetic_av_dataset(64, 6).unwrap();
    let samples = refiner_samples(&data);
    let audio_in: Vec<_> = samples.iter().map(|s| s.clean_audio.clone()).collect();
    let mut t = Trainer::new(model(6), desk_config(Stage::Refiner, 3e-3)).unwrap();
    let audio = t.model.params().checksum(Some(ParamGroup::Audio));
    let v2a = t.model.params().checksum(Some(ParamGroup::VideoToAudioCross));
    let video = t.model.params().checksum(Some(ParamGroup::Video));
    for k in 0..100 {
        let batch = &samples[(k * 4) % 64..(k * 4) % 64 + 4];
        t.refiner_step(batch, &data.layout).unwrap();
    }
    assert_eq!(t.model.params().checksum(Some(ParamGroup::Audio)), audio);
    assert_eq!(t.model.params().checksum(Some(ParamGroup::VideoToAudioCross)), v2a);
    assert_ne!(t.model.params().checksum(Some(ParamGroup::Video)), video);
    for (a, s) in audio_in.iter().zip(&samples) {
        assert_eq!(a.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                   s.clean_audio.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn refiner_rejects_unfrozen_audio() {
    let mut cfg = desk_config(Stage::Refiner, 1e-3);
    cfg.freeze_audio = false;
    assert!(matches!(Trainer::new(model(7), cfg), Err(Error::Config(_))));
}

#[test]
fn refiner_restores_degraded_video() {
    let data = make_synthetic_av_dataset(256, 8).unwrap();
    let samples = refiner_samples(&data);
    let mut cfg = desk_config(Stage::Refiner, 3e-3);
    cfg.seed = 8;
    let mut t = Trainer::new(model(8), cfg).unwrap();
    let losses: Vec<f64> = (0..500)
        .map(|k| {
            let lo = (k * 4) % 256;
            t.refiner_step(&samples[lo..lo + 4], &data.layout).unwrap().video_mse
        })
        .collect();
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let (first, last) = (mean(&losses[..25]), mean(&losses[475..]));
    assert!(last < 0.5 * first, "first {first} last {last}");
}
