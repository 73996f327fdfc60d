//! Data preparation: oracle masks, training targets, overlapping
//! subsequence extraction, and a deterministic synthetic voice/accompaniment
//! fixture with its on-disk dataset layout.

use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::signal::wav::{read_wav, write_wav, SampleFormat};
use crate::signal::MagnitudeSpectrogram;

/// Floor applied to mask denominators to keep silent bins finite.
pub const MASK_EPSILON: f64 = 1e-6;

/// Subsequencing geometry: windows of `total_len` frames whose first and
/// last `context` frames are temporal context that the network consumes but
/// does not predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceConfig {
    /// Frames per window (`T`).
    pub total_len: usize,
    /// Context frames dropped from each end (`L`).
    pub context: usize,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        SequenceConfig {
            total_len: 60,
            context: 10,
        }
    }
}

impl SequenceConfig {
    /// Frames each window actually predicts: `T - 2L`.
    pub fn central_len(&self) -> usize {
        self.total_len - 2 * self.context
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_len <= 2 * self.context {
            return Err(Error::InvalidArgument(format!(
                "window length {} leaves no central frames with context {}",
                self.total_len, self.context
            )));
        }
        Ok(())
    }
}

/// A stack of overlapping analysis windows cut from one spectrogram.
#[derive(Debug, Clone)]
pub struct SubsequenceBatch {
    /// `windows x total_len x bins`.
    pub windows: Array3<f64>,
    /// Frame count of the source spectrogram, for reconstruction.
    pub source_frames: usize,
    pub config: SequenceConfig,
}

impl SubsequenceBatch {
    pub fn count(&self) -> usize {
        self.windows.shape()[0]
    }
}

/// Ideal ratio mask for source `j`: its magnitude over the sum of all source
/// magnitudes, with the denominator floored at [`MASK_EPSILON`]. Entries lie
/// in [0, 1], and wherever the summed magnitude exceeds the floor the masks
/// of all sources sum to one.
pub fn ideal_ratio_mask(sources: &[&MagnitudeSpectrogram], j: usize) -> Result<Array2<f64>> {
    if sources.is_empty() {
        return Err(Error::InvalidArgument("need at least one source".into()));
    }
    if j >= sources.len() {
        return Err(Error::InvalidArgument(format!(
            "source index {} out of range for {} sources",
            j,
            sources.len()
        )));
    }
    let dim = sources[0].data.dim();
    for s in sources {
        if s.data.dim() != dim {
            return Err(Error::InvalidArgument(
                "all sources must share one spectrogram shape".into(),
            ));
        }
    }
    let mut denom = Array2::<f64>::zeros(dim);
    for s in sources {
        denom += &s.data;
    }
    let mut mask = sources[j].data.clone();
    mask.zip_mut_with(&denom, |m, &d| *m /= d.max(MASK_EPSILON));
    Ok(mask)
}

/// Ideal amplitude mask: source magnitude over mixture magnitude with a
/// floored denominator. Non-negative but unbounded above, since a source can
/// exceed the mixture through phase cancellation.
pub fn ideal_amplitude_mask(
    source: &MagnitudeSpectrogram,
    mixture: &MagnitudeSpectrogram,
) -> Result<Array2<f64>> {
    if source.data.dim() != mixture.data.dim() {
        return Err(Error::InvalidArgument(
            "source and mixture shapes differ".into(),
        ));
    }
    let mut mask = source.data.clone();
    mask.zip_mut_with(&mixture.data, |m, &d| *m /= d.max(MASK_EPSILON));
    Ok(mask)
}

/// Training target for the voice: twice the voice's ideal ratio mask applied
/// to the summed source magnitudes. For a track where the voice is the only
/// active source this reduces to twice the voice magnitude.
pub fn make_training_target(
    voice: &MagnitudeSpectrogram,
    all_sources: &[&MagnitudeSpectrogram],
) -> Result<Array2<f64>> {
    if all_sources.is_empty() {
        return Err(Error::InvalidArgument("need at least one source".into()));
    }
    let dim = voice.data.dim();
    for s in all_sources {
        if s.data.dim() != dim {
            return Err(Error::InvalidArgument(
                "all sources must share one spectrogram shape".into(),
            ));
        }
    }
    let mut sum = Array2::<f64>::zeros(dim);
    for s in all_sources {
        sum += &s.data;
    }
    // 2 * (voice / max(sum, eps)) * sum, written to avoid forming the
    // intermediate mask.
    let mut target = voice.data.clone();
    target.zip_mut_with(&sum, |t, &s| *t = 2.0 * (*t / s.max(MASK_EPSILON)) * s);
    Ok(target)
}

/// Cuts a magnitude spectrogram into `ceil(M / central_len)` overlapping
/// windows. Window `b` covers source frames
/// `[b * central_len - context, b * central_len - context + total_len)`;
/// positions outside the spectrogram are zero-filled, so consecutive windows
/// share `2 * context` frames and their central parts tile the time axis.
pub fn make_subsequences(
    mag: &Array2<f64>,
    cfg: &SequenceConfig,
) -> Result<SubsequenceBatch> {
    cfg.validate()?;
    let frames = mag.nrows();
    if frames == 0 {
        return Err(Error::InvalidArgument("spectrogram has no frames".into()));
    }
    let bins = mag.ncols();
    let central = cfg.central_len();
    let count = frames.div_ceil(central);
    let mut windows = Array3::<f64>::zeros((count, cfg.total_len, bins));
    for b in 0..count {
        let start = b as isize * central as isize - cfg.context as isize;
        for t in 0..cfg.total_len {
            let src = start + t as isize;
            if src >= 0 && (src as usize) < frames {
                windows
                    .slice_mut(s![b, t, ..])
                    .assign(&mag.row(src as usize));
            }
        }
    }
    Ok(SubsequenceBatch {
        windows,
        source_frames: frames,
        config: *cfg,
    })
}

/// Reassembles per-window central outputs (`windows x central_len x bins`)
/// into a full spectrogram of `source_frames` rows. The central blocks tile
/// the time axis, so this is concatenation plus truncation of the tail
/// added by the final partial window.
pub fn overlap_reconstruct(
    outputs: &Array3<f64>,
    source_frames: usize,
    cfg: &SequenceConfig,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    let (count, central, bins) = outputs.dim();
    if central != cfg.central_len() {
        return Err(Error::InvalidArgument(format!(
            "window output has {} frames but config central length is {}",
            central,
            cfg.central_len()
        )));
    }
    if count * central < source_frames {
        return Err(Error::InvalidArgument(format!(
            "{count} windows of {central} frames cannot cover {source_frames} frames"
        )));
    }
    let mut out = Array2::<f64>::zeros((source_frames, bins));
    for b in 0..count {
        for t in 0..central {
            let dst = b * central + t;
            if dst < source_frames {
                out.row_mut(dst).assign(&outputs.slice(s![b, t, ..]));
            }
        }
    }
    Ok(out)
}

/// One track's worth of aligned audio.
#[derive(Debug, Clone)]
pub struct TrackPair {
    pub mixture: Vec<f64>,
    pub voice: Vec<f64>,
    pub accompaniment: Vec<f64>,
    pub sample_rate: u32,
}

/// Deterministic synthetic track: a vibrato "voice" of harmonic tones over a
/// chordal pad plus low-passed noise, peak-normalized so the mixture tops
/// out at 0.8. The mixture is exactly the sample-wise sum of the stems.
pub fn synth_fixture(seed: u64, duration_s: f64, sample_rate: u32) -> Result<TrackPair> {
    if duration_s <= 0.0 {
        return Err(Error::InvalidArgument(
            "fixture duration must be positive".into(),
        ));
    }
    let len = (duration_s * sample_rate as f64).round() as usize;
    if len == 0 {
        return Err(Error::InvalidArgument("fixture would be empty".into()));
    }
    let sr = sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = 2.0 * std::f64::consts::PI;

    // Voice: a run of notes, each a vibrato-modulated harmonic stack in a
    // roughly vocal register with a smooth amplitude envelope.
    let mut voice = vec![0.0f64; len];
    let note_len = (0.4 * sr) as usize;
    let mut start = 0;
    while start < len {
        let f0 = rng.gen_range(220.0..660.0);
        let vibrato_hz = rng.gen_range(5.0..6.5);
        let vibrato_depth = rng.gen_range(0.01..0.02); // relative excursion
        let stop = (start + note_len).min(len);
        let n_len = stop - start;
        for h in 1..=5u32 {
            let amp = 0.5 / h as f64;
            let mut phase = rng.gen_range(0.0..tau);
            for i in 0..n_len {
                let t = i as f64 / sr;
                let inst =
                    f0 * h as f64 * (1.0 + vibrato_depth * (tau * vibrato_hz * t).sin());
                phase += tau * inst / sr;
                let env = (std::f64::consts::PI * i as f64 / n_len as f64).sin();
                voice[start + i] += amp * env * phase.sin();
            }
        }
        start = stop;
    }

    // Accompaniment: sustained low triads plus one-pole low-passed noise.
    let mut accomp = vec![0.0f64; len];
    let chord_len = (0.8 * sr) as usize;
    let mut start = 0;
    while start < len {
        let root = rng.gen_range(82.0..165.0);
        let stop = (start + chord_len).min(len);
        for ratio in [1.0, 1.25, 1.5] {
            let f = root * ratio;
            let phase0: f64 = rng.gen_range(0.0..tau);
            for i in 0..stop - start {
                let t = i as f64 / sr;
                accomp[start + i] += 0.3 * (tau * f * t + phase0).sin();
            }
        }
        start = stop;
    }
    let alpha = 0.02; // one-pole coefficient, cutoff well below the voice
    let mut state = 0.0;
    for slot in accomp.iter_mut() {
        let white: f64 = rng.gen_range(-1.0..1.0);
        state += alpha * (white - state);
        *slot += 0.8 * state;
    }

    let mut mixture: Vec<f64> = voice.iter().zip(&accomp).map(|(v, a)| v + a).collect();
    let peak = mixture.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let scale = if peak > 0.0 { 0.8 / peak } else { 1.0 };
    for v in &mut voice {
        *v *= scale;
    }
    for a in &mut accomp {
        *a *= scale;
    }
    for m in &mut mixture {
        *m *= scale;
    }
    Ok(TrackPair {
        mixture,
        voice,
        accompaniment: accomp,
        sample_rate,
    })
}

/// File name for the mixture inside a track directory.
pub const MIXTURE_FILE: &str = "mixture.wav";
/// File name for the voice stem inside a track directory.
pub const VOICE_FILE: &str = "vocals.wav";
/// File name for the accompaniment stem inside a track directory.
pub const ACCOMPANIMENT_FILE: &str = "accompaniment.wav";

/// Writes a track under `<root>/<name>/` in the standard layout.
pub fn write_track(root: &Path, name: &str, track: &TrackPair) -> Result<()> {
    let dir = root.join(name);
    std::fs::create_dir_all(&dir)?;
    write_wav(
        &dir.join(MIXTURE_FILE),
        &track.mixture,
        track.sample_rate,
        SampleFormat::Float32,
    )?;
    write_wav(
        &dir.join(VOICE_FILE),
        &track.voice,
        track.sample_rate,
        SampleFormat::Float32,
    )?;
    write_wav(
        &dir.join(ACCOMPANIMENT_FILE),
        &track.accompaniment,
        track.sample_rate,
        SampleFormat::Float32,
    )?;
    Ok(())
}

/// A track directory discovered inside a dataset root.
#[derive(Debug, Clone)]
pub struct TrackEntry {
    pub name: String,
    pub dir: PathBuf,
}

/// Lists track directories under `root` in name order. Every subdirectory
/// must contain the three standard files.
pub fn list_tracks(root: &Path) -> Result<Vec<TrackEntry>> {
    if !root.is_dir() {
        return Err(Error::DatasetLayout(format!(
            "{} is not a directory",
            root.display()
        )));
    }
    let mut entries = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            let dir = entry.path();
            for file in [MIXTURE_FILE, VOICE_FILE, ACCOMPANIMENT_FILE] {
                if !dir.join(file).is_file() {
                    return Err(Error::DatasetLayout(format!(
                        "missing {} in {}",
                        file,
                        dir.display()
                    )));
                }
            }
            entries.push(TrackEntry {
                name: entry.file_name().to_string_lossy().into_owned(),
                dir,
            });
        }
    }
    if entries.is_empty() {
        return Err(Error::DatasetLayout(format!(
            "no track directories under {}",
            root.display()
        )));
    }
    entries.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(entries)
}

/// Loads one track's three stems, truncating all to their common length.
pub fn load_track(entry: &TrackEntry) -> Result<TrackPair> {
    let mixture = read_wav(&entry.dir.join(MIXTURE_FILE))?;
    let voice = read_wav(&entry.dir.join(VOICE_FILE))?;
    let accomp = read_wav(&entry.dir.join(ACCOMPANIMENT_FILE))?;
    if mixture.sample_rate != voice.sample_rate || mixture.sample_rate != accomp.sample_rate {
        return Err(Error::DatasetLayout(format!(
            "stems of {} disagree on sample rate",
            entry.name
        )));
    }
    let len = mixture
        .samples
        .len()
        .min(voice.samples.len())
        .min(accomp.samples.len());
    if len == 0 {
        return Err(Error::DatasetLayout(format!("track {} is empty", entry.name)));
    }
    let mut pair = TrackPair {
        mixture: mixture.samples,
        voice: voice.samples,
        accompaniment: accomp.samples,
        sample_rate: mixture.sample_rate,
    };
    pair.mixture.truncate(len);
    pair.voice.truncate(len);
    pair.accompaniment.truncate(len);
    Ok(pair)
}

/// Peak absolute amplitude of a signal.
pub fn peak(samples: &[f64]) -> f64 {
    samples.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
}

/// Central portion of a window, dropping `context` frames from each end.
pub fn central_frames(window: &Array2<f64>, cfg: &SequenceConfig) -> Array2<f64> {
    window
        .slice(s![cfg.context..cfg.total_len - cfg.context, ..])
        .to_owned()
}
