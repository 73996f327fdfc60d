//! Overfit one synthetic track and separate it.
//!
//! The fastest meaningful experiment: train the full masker/denoiser/twin
//! stack on the windows of a single four-second fixture until it memorizes
//! them, then separate that same mixture and compare against the clean
//! stems. Loss should collapse and the separated voice should beat the
//! "just return the mixture" baseline by a wide margin. Takes about a
//! minute in release mode.
//!
//! ```text
//! cargo run --release --example train_fixture
//! ```

use std::time::Instant;

use madtwin::cli::separate_samples;
use madtwin::config::RunConfig;
use madtwin::data::synth_fixture;
use madtwin::error::Result;
use madtwin::eval::voice_scores;
use madtwin::training::{track_items, train, TrainConfig};

fn main() -> Result<()> {
    let config = RunConfig::desk();
    let model = config.model();
    let track = synth_fixture(0, 4.0, config.stft.sample_rate)?;
    let items = track_items(&config.stft, &model, &track)?;
    let steps = 500;
    println!(
        "fixture: {:.1} s at {} Hz -> {} training window(s)",
        track.mixture.len() as f64 / config.stft.sample_rate as f64,
        config.stft.sample_rate,
        items.len()
    );

    let cfg = TrainConfig {
        epochs: usize::MAX,
        max_steps: Some(steps),
        ..TrainConfig::default()
    };
    let started = Instant::now();
    let run = train(&model, &cfg, &items)?;
    println!(
        "{} optimizer step(s) in {:.1} s",
        run.records.len(),
        started.elapsed().as_secs_f64()
    );
    for record in run.records.iter().step_by(100).chain(run.records.last()) {
        println!(
            "  step {:>3}: total {:>12.3}  masked-out {:>11.3}  mask {:>11.3}  \
             twin-out {:>11.3}  twin-reg {:>8.3}",
            record.step,
            record.losses.total,
            record.losses.l_d,
            record.losses.l_m,
            record.losses.l_tw,
            record.losses.l_twin
        );
    }
    let first = &run.records[0].losses;
    let last = &run.records.last().unwrap().losses;
    println!(
        "total loss fell by {:.1}%, twin regularizer by {:.1}%",
        100.0 * (1.0 - last.total / first.total),
        100.0 * (1.0 - last.l_twin / first.l_twin)
    );

    let voice = separate_samples(
        &run.params,
        &model,
        &config.stft,
        config.griffin_lim_iterations,
        &track.mixture,
    )?;
    let (sdr, sir) = voice_scores(&voice, &track.voice, &track.accompaniment)?;
    let (base_sdr, base_sir) =
        voice_scores(&track.mixture, &track.voice, &track.accompaniment)?;
    println!("mixture baseline: SDR {base_sdr:6.2} dB, SIR {base_sir:6.2} dB");
    println!("separated voice:  SDR {sdr:6.2} dB, SIR {sir:6.2} dB");
    Ok(())
}
