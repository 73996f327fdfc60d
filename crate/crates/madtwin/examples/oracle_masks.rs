//! Oracle time-frequency masks as separation upper bounds.
//!
//! With the clean stems in hand one can build the ideal ratio mask (bounded
//! in [0, 1]) and the ideal amplitude mask (unbounded), apply them to the
//! mixture magnitude, and resynthesize with the mixture phase. No trained
//! model can beat these masks under the same pipeline, so their SDR/SIR
//! scores bound what mask-based separation of this material can achieve.
//!
//! ```text
//! cargo run --release --example oracle_masks
//! ```

use madtwin::data::{ideal_amplitude_mask, ideal_ratio_mask, synth_fixture};
use madtwin::error::Result;
use madtwin::eval::voice_scores;
use madtwin::signal::{griffin_lim, stft, MagnitudeSpectrogram, StftConfig};

fn main() -> Result<()> {
    let cfg = StftConfig {
        frame_length: 512,
        fft_length: 512,
        hop: 128,
        sample_rate: 8000,
    };
    let track = synth_fixture(11, 3.0, cfg.sample_rate)?;
    let mix_spec = stft(&track.mixture, &cfg)?;
    let mix_mag = mix_spec.magnitude();
    let mix_phase = mix_spec.phase();
    let voice_mag = stft(&track.voice, &cfg)?.magnitude();
    let accomp_mag = stft(&track.accompaniment, &cfg)?.magnitude();

    let irm = ideal_ratio_mask(&[&voice_mag, &accomp_mag], 0)?;
    let iam = ideal_amplitude_mask(&voice_mag, &mix_mag)?;

    let (base_sdr, base_sir) =
        voice_scores(&track.mixture, &track.voice, &track.accompaniment)?;
    println!("mixture as the estimate: SDR {base_sdr:6.2} dB, SIR {base_sir:6.2} dB");

    for (label, mask) in [("ideal ratio mask    ", &irm), ("ideal amplitude mask", &iam)] {
        let masked = MagnitudeSpectrogram::new(mask * &mix_mag.data, cfg)?;
        let mut voice = griffin_lim(&masked, &mix_phase, 10, &cfg)?.to_vec();
        voice.truncate(track.mixture.len());
        let (sdr, sir) = voice_scores(&voice, &track.voice, &track.accompaniment)?;
        println!("{label}: SDR {sdr:6.2} dB, SIR {sir:6.2} dB");
    }
    println!(
        "a trained masker approximates these oracles from the mixture alone"
    );
    Ok(())
}
