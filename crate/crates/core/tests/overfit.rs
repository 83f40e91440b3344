//! A single fixed segment must be learnable: the generator's mel L1 on it
//! falls window after window.

use wolonet::dsp::Waveform;
use wolonet::trainer::{Dataset, RunConfig, Trainer};

const STEPS: usize = 1000;
const WINDOW: usize = 50;

#[test]
fn mel_loss_on_one_segment_falls_every_window() {
    let segment = 2048;
    let clip = Dataset::synthetic(1, 21, 22050, 0.5).clips.remove(0);
    let clip = Waveform::new(clip.samples[..segment].to_vec(), clip.sample_rate);

    let mut cfg = RunConfig::desk();
    cfg.train.batch_size = 1;
    cfg.train.segment_samples = segment;
    cfg.train.total_steps = STEPS as u64;
    cfg.train.validation_clips = 0;
    cfg.train.validation_every = 0;
    cfg.train.checkpoint_every = 0;

    let mut trainer = Trainer::new(cfg, Dataset::new(vec![clip])).unwrap();
    let report = trainer.run(None).unwrap();
    assert_eq!(report.steps.len(), STEPS);
    let means: Vec<f64> = report
        .steps
        .chunks(WINDOW)
        .map(|w| w.iter().map(|s| s.loss_mel).sum::<f64>() / WINDOW as f64)
        .collect();
    for (i, pair) in means.windows(2).enumerate() {
        assert!(pair[1] < pair[0], "window {} rose: {means:?}", i + 1);
    }
}
