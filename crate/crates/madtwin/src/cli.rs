//! Command-line front end: train a model, separate a mixture, score
//! estimates against references, run numeric self-checks, and generate
//! synthetic fixture datasets.
//!
//! Every command works on plain files: WAV audio, `key=value` config text,
//! binary checkpoints, and CSV reports. Exit codes distinguish usage errors
//! (2), data and file problems (3), and numeric failures (4); the `check`
//! command exits 1 when a self-check fails.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{RunConfig, CONFIG_FILE};
use crate::data::{
    self, ideal_ratio_mask, make_subsequences, overlap_reconstruct, synth_fixture, write_track,
};
use crate::denoiser::denoise;
use crate::error::{Error, Result};
use crate::eval::{evaluate_tracks, scores_csv};
use crate::masker::masker_forward;
use crate::signal::wav::{read_wav, write_wav, SampleFormat};
use crate::signal::{griffin_lim, griffin_lim_trace, istft, stft, MagnitudeSpectrogram, StftConfig};
use crate::training::checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FILE};
use crate::training::gradcheck::{gradient_check_full, small_check_model};
use crate::training::params::ParameterSet;
use crate::training::{
    collect_items, composite_losses, log_csv, train_from, worker_pool, AdamState, ModelConfig,
    TrainingItem,
};
use crate::twinnet::TwinOptions;

/// Name of the per-run loss log written next to checkpoints.
pub const LOG_FILE: &str = "training_log.csv";

/// Relative-error tolerance for the gradient self-check.
pub const GRAD_CHECK_TOL: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "madtwin",
    about = "Monaural singing-voice separation: recurrent mask estimation \
             with a twin-decoder regularizer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a directory of mixture/vocals/accompaniment tracks.
    Train {
        /// Run configuration file (key=value lines).
        #[arg(long)]
        config: PathBuf,
        /// Dataset root: one subdirectory per track.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoint, config echo, and loss log.
        #[arg(long)]
        out: PathBuf,
        /// Override the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Separate the singing voice from a mixture recording.
    Separate {
        /// Trained checkpoint; a config file must sit beside it.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Mixture WAV to separate.
        #[arg(long)]
        input: PathBuf,
        /// Where to write the estimated voice WAV.
        #[arg(long)]
        output: PathBuf,
        /// Override the configured phase-refinement iteration count.
        #[arg(long)]
        gla_iters: Option<usize>,
    },
    /// Score voice estimates against reference stems and report medians.
    Evaluate {
        /// Root of estimate directories (`<track>/vocals.wav`).
        #[arg(long)]
        estimates: PathBuf,
        /// Root of reference directories (vocals and accompaniment stems).
        #[arg(long)]
        references: PathBuf,
        /// CSV report destination.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run gradient and signal-processing self-checks on this machine.
    Check {
        /// Base seed; the gradient check runs this and the two following.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a synthetic dataset with known clean stems.
    Fixture {
        /// Directory to create the tracks under.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        tracks: usize,
        /// Track duration in seconds.
        #[arg(long, default_value_t = 4.0)]
        duration: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8000)]
        sample_rate: u32,
    },
}

/// Dispatches a parsed command line. Returns the process exit code for
/// outcomes that are not errors: 0 for success, 1 for failed self-checks.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            epochs,
            seed,
        } => {
            cmd_train(&config, &data, &out, epochs, seed)?;
            Ok(0)
        }
        Command::Separate {
            checkpoint,
            input,
            output,
            gla_iters,
        } => {
            cmd_separate(&checkpoint, &input, &output, gla_iters)?;
            Ok(0)
        }
        Command::Evaluate {
            estimates,
            references,
            out,
        } => {
            cmd_evaluate(&estimates, &references, &out)?;
            Ok(0)
        }
        Command::Check { seed } => Ok(if cmd_check(seed)? { 0 } else { 1 }),
        Command::Fixture {
            out,
            tracks,
            duration,
            seed,
            sample_rate,
        } => {
            cmd_fixture(&out, tracks, duration, seed, sample_rate)?;
            Ok(0)
        }
    }
}

fn cmd_train(
    config_path: &Path,
    data_dir: &Path,
    out_dir: &Path,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(e) = epochs {
        config.train.epochs = e;
    }
    if let Some(s) = seed {
        config.train.seed = s;
    }
    config.validate()?;
    let model = config.model();

    let tracks = data::list_tracks(data_dir)?;
    let items = collect_items(&config.stft, &model, &tracks)?;
    println!(
        "training on {} window(s) from {} track(s)",
        items.len(),
        tracks.len()
    );

    std::fs::create_dir_all(out_dir)?;
    config.save(&out_dir.join(CONFIG_FILE))?;
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);

    // The initial state is checkpointed before any step so a zero-epoch run
    // still produces a loadable model.
    let params = model.init(config.train.seed)?;
    let opt = AdamState::new(params.flat_len());
    save_checkpoint(&ckpt_path, &params, Some(&opt))?;

    let run = train_from(&model, &config.train, &items, params, opt, 0, |epoch, p, o| {
        save_checkpoint(&ckpt_path, p, Some(o))?;
        println!("epoch {} of {} checkpointed", epoch + 1, config.train.epochs);
        Ok(())
    })?;
    save_checkpoint(&ckpt_path, &run.params, Some(&run.opt))?;
    std::fs::write(out_dir.join(LOG_FILE), log_csv(&run.records))?;

    if let Some(last) = run.records.last() {
        println!(
            "finished after {} step(s); final total loss {:.6}",
            last.step, last.losses.total
        );
    } else {
        println!("finished without optimizer steps");
    }
    println!("model written to {}", ckpt_path.display());
    Ok(())
}

/// Runs the separation pipeline on raw samples: analyze the mixture, mask
/// and denoise each window, stitch the window outputs back into a full
/// spectrogram, then rebuild a waveform with the mixture's phase as the
/// starting point for phase refinement.
///
/// Only the masker and denoiser weights participate; the twin branch is a
/// training-time regularizer and never touches inference.
pub fn separate_samples(
    params: &ParameterSet,
    model: &ModelConfig,
    stft_cfg: &StftConfig,
    gla_iters: usize,
    samples: &[f64],
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("input audio is empty".into()));
    }
    if stft_cfg.retained_bins() != model.masker.n_bins {
        return Err(Error::Config(format!(
            "analysis yields {} bins but the model expects {}",
            stft_cfg.retained_bins(),
            model.masker.n_bins
        )));
    }
    let spec = stft(samples, stft_cfg)?;
    let mag = spec.magnitude();
    let phase = spec.phase();

    let batch = make_subsequences(&mag.data, &model.masker.seq)?;
    let count = batch.count();
    let central = model.masker.seq.central_len();
    let outputs: Vec<Array2<f64>> = worker_pool().install(|| {
        (0..count)
            .into_par_iter()
            .map(|w| {
                let window = batch.windows.index_axis(Axis(0), w).to_owned();
                let filtered = masker_forward(&params.masker, &window, &model.masker)?.filtered;
                denoise(&params.denoiser, &filtered)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut stacked = Array3::zeros((count, central, model.masker.n_bins));
    for (w, out) in outputs.iter().enumerate() {
        stacked.index_axis_mut(Axis(0), w).assign(out);
    }
    let voice_mag = overlap_reconstruct(&stacked, batch.source_frames, &model.masker.seq)?;
    let voice_mag = MagnitudeSpectrogram::new(voice_mag, *stft_cfg)?;

    let voice = griffin_lim(&voice_mag, &phase, gla_iters, stft_cfg)?;
    let mut out = voice.to_vec();
    out.truncate(samples.len());
    Ok(out)
}

fn cmd_separate(
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    gla_iters: Option<usize>,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let config_path = checkpoint
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .join(CONFIG_FILE);
    if !config_path.is_file() {
        return Err(Error::Config(format!(
            "expected run configuration at {} beside the checkpoint",
            config_path.display()
        )));
    }
    let mut config = RunConfig::load(&config_path)?;
    if let Some(n) = gla_iters {
        config.griffin_lim_iterations = n;
    }
    let model = config.model();
    if ckpt.params.dims() != model.dims() {
        return Err(Error::Config(format!(
            "checkpoint geometry {:?} does not match configuration {:?}",
            ckpt.params.dims(),
            model.dims()
        )));
    }

    let audio = read_wav(input)?;
    if audio.sample_rate != config.stft.sample_rate {
        return Err(Error::InvalidArgument(format!(
            "input is {} Hz but the model was trained at {} Hz",
            audio.sample_rate, config.stft.sample_rate
        )));
    }
    let voice = separate_samples(
        &ckpt.params,
        &model,
        &config.stft,
        config.griffin_lim_iterations,
        &audio.samples,
    )?;
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_wav(output, &voice, audio.sample_rate, SampleFormat::Float32)?;
    println!(
        "separated {} sample(s) ({:.2} s) to {}",
        voice.len(),
        voice.len() as f64 / audio.sample_rate as f64,
        output.display()
    );
    Ok(())
}

fn cmd_evaluate(estimates: &Path, references: &Path, out: &Path) -> Result<()> {
    let scores = evaluate_tracks(estimates, references)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, scores_csv(&scores))?;
    for t in &scores.per_track {
        println!("{}: SDR {:.2} dB, SIR {:.2} dB", t.track, t.sdr_db, t.sir_db);
    }
    println!(
        "median over {} track(s): SDR {:.2} dB, SIR {:.2} dB",
        scores.per_track.len(),
        scores.median_sdr,
        scores.median_sir
    );
    println!(
        "note: scores use whole-track projection decompositions and are not \
         comparable to published evaluation-campaign numbers"
    );
    println!("report written to {}", out.display());
    Ok(())
}

type CheckOutcome = std::result::Result<String, String>;
type CheckFn = fn(u64) -> CheckOutcome;

fn check_gradients(seed: u64) -> CheckOutcome {
    let model = small_check_model(TwinOptions::default());
    let mut worst: Option<(f64, String, usize)> = None;
    for s in seed..seed + 3 {
        let report = gradient_check_full(s, &model).map_err(|e| e.to_string())?;
        if !report.passes(GRAD_CHECK_TOL) {
            return Err(format!(
                "seed {s}: max rel err {:.3e} at {}[{}] exceeds {GRAD_CHECK_TOL:.0e}",
                report.max_rel_err, report.worst_name, report.worst_index
            ));
        }
        if worst.as_ref().is_none_or(|(w, _, _)| report.max_rel_err > *w) {
            worst = Some((report.max_rel_err, report.worst_name, report.worst_index));
        }
    }
    let (err, name, index) = worst.expect("three seeds were checked");
    Ok(format!(
        "3 seed(s), worst rel err {err:.3e} at {name}[{index}]"
    ))
}

fn check_stft_roundtrip(seed: u64) -> CheckOutcome {
    let cfg = StftConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = cfg.sample_rate as usize;
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let signal: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let spec = stft(&signal, &cfg).map_err(|e| e.to_string())?;
        let rec = istft(&spec, &cfg).map_err(|e| e.to_string())?;
        let (mut err, mut ref_e) = (0.0, 0.0);
        for i in cfg.frame_length..len - cfg.frame_length {
            let d = rec[i] - signal[i];
            err += d * d;
            ref_e += signal[i] * signal[i];
        }
        worst = worst.max((err / ref_e).sqrt());
    }
    if worst <= 1e-6 {
        Ok(format!("10 signal(s), worst interior rel RMS {worst:.3e}"))
    } else {
        Err(format!("interior rel RMS {worst:.3e} exceeds 1e-6"))
    }
}

fn check_phase_refinement(seed: u64) -> CheckOutcome {
    let cfg = StftConfig {
        frame_length: 512,
        fft_length: 512,
        hop: 128,
        sample_rate: 8000,
    };
    let bins = cfg.retained_bins();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..5 {
        let mag = Array2::from_shape_fn((24, bins), |_| rng.gen_range(0.0..1.0));
        let mag = MagnitudeSpectrogram::new(mag, cfg).map_err(|e| e.to_string())?;
        let phase = Array2::zeros((24, bins));
        let (_, trace) =
            griffin_lim_trace(&mag, &phase, 10, &cfg).map_err(|e| e.to_string())?;
        for (i, pair) in trace.windows(2).enumerate() {
            if pair[1] > pair[0] + 1e-9 {
                return Err(format!(
                    "case {case}: inconsistency rose from {} to {} at iteration {}",
                    pair[0],
                    pair[1],
                    i + 1
                ));
            }
        }
    }
    Ok("5 magnitude(s), inconsistency non-increasing over 10 iterations".into())
}

fn check_mask_and_loss_invariants(seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = StftConfig {
        frame_length: 32,
        fft_length: 32,
        hop: 8,
        sample_rate: 8000,
    };
    let a = MagnitudeSpectrogram::new(
        Array2::from_shape_fn((12, cfg.retained_bins()), |_| rng.gen_range(0.1..1.0)),
        cfg,
    )
    .map_err(|e| e.to_string())?;
    let b = MagnitudeSpectrogram::new(
        Array2::from_shape_fn((12, cfg.retained_bins()), |_| rng.gen_range(0.1..1.0)),
        cfg,
    )
    .map_err(|e| e.to_string())?;
    let m0 = ideal_ratio_mask(&[&a, &b], 0).map_err(|e| e.to_string())?;
    let m1 = ideal_ratio_mask(&[&a, &b], 1).map_err(|e| e.to_string())?;
    for ((&x, &y), idx) in m0.iter().zip(m1.iter()).zip(0..) {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(format!("mask value outside [0, 1] at flat index {idx}"));
        }
        if (x + y - 1.0).abs() > 1e-6 {
            return Err(format!("mask sum {} at flat index {idx}", x + y));
        }
    }

    let kl_same =
        crate::training::generalized_kl(&m0, &m0).map_err(|e| e.to_string())?;
    if kl_same != 0.0 {
        return Err(format!("divergence of a matrix from itself is {kl_same}"));
    }
    let two = Array2::from_elem((1, 1), 2.0);
    let one = Array2::ones((1, 1));
    let kl_hand = crate::training::generalized_kl(&two, &one).map_err(|e| e.to_string())?;
    let expected = 2.0 * std::f64::consts::LN_2 - 1.0;
    if (kl_hand - expected).abs() > 1e-12 {
        return Err(format!("divergence(2 || 1) = {kl_hand}, expected {expected}"));
    }

    // A random small model: the reported total must equal the sum of its
    // parts, and every data term must be non-negative.
    let model = small_check_model(TwinOptions::default());
    let params = model.init(seed).map_err(|e| e.to_string())?;
    let n = model.masker.n_bins;
    let t = model.masker.seq.total_len;
    let c = model.masker.seq.central_len();
    let items: Vec<TrainingItem> = (0..2)
        .map(|_| TrainingItem {
            window: Array2::from_shape_fn((t, n), |_| rng.gen_range(0.2..1.2)),
            target: Array2::from_shape_fn((c, n), |_| rng.gen_range(0.2..1.5)),
        })
        .collect();
    let losses = composite_losses(
        &params,
        &model,
        &crate::training::TrainConfig::default(),
        &items,
        None,
    )
    .map_err(|e| e.to_string())?;
    for (name, value) in [
        ("masked-output divergence", losses.l_d),
        ("mask divergence", losses.l_m),
        ("twin divergence", losses.l_tw),
        ("twin regularizer", losses.l_twin),
        ("diagonal L1", losses.diag_l1),
        ("decoder L2", losses.dec_l2),
    ] {
        if value < 0.0 {
            return Err(format!("{name} is negative: {value}"));
        }
    }
    let recomposed = losses.recomposed_total(&crate::training::TrainConfig::default());
    if (losses.total - recomposed).abs() > 1e-12 {
        return Err(format!(
            "total {} differs from recomposed {recomposed}",
            losses.total
        ));
    }
    Ok("masks in range and complementary; divergence identities and loss \
        composition hold"
        .into())
}

fn check_checkpoint_roundtrip(seed: u64) -> CheckOutcome {
    use crate::training::checkpoint::{checkpoint_bytes, parse_checkpoint};
    let model = small_check_model(TwinOptions::default());
    let params = model.init(seed).map_err(|e| e.to_string())?;
    let bytes = checkpoint_bytes(&params, None);
    let back = parse_checkpoint(&bytes).map_err(|e| e.to_string())?;
    let again = checkpoint_bytes(&back.params, None);
    if bytes == again {
        Ok(format!("{} byte(s), parse/serialize is idempotent", bytes.len()))
    } else {
        Err("re-serialized checkpoint differs".into())
    }
}

fn cmd_check(seed: u64) -> Result<bool> {
    println!("self-checks (base seed {seed})");
    let checks: [(&str, CheckFn); 5] = [
        ("gradient fidelity", check_gradients),
        ("analysis round-trip", check_stft_roundtrip),
        ("phase refinement descent", check_phase_refinement),
        ("mask and loss invariants", check_mask_and_loss_invariants),
        ("checkpoint round-trip", check_checkpoint_roundtrip),
    ];
    let mut all_ok = true;
    for (name, check) in checks {
        match check(seed) {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                all_ok = false;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{}", if all_ok { "all checks passed" } else { "CHECKS FAILED" });
    Ok(all_ok)
}

fn cmd_fixture(
    out: &Path,
    tracks: usize,
    duration: f64,
    seed: u64,
    sample_rate: u32,
) -> Result<()> {
    if tracks == 0 {
        return Err(Error::InvalidArgument("track count must be positive".into()));
    }
    for i in 0..tracks {
        let track = synth_fixture(seed.wrapping_add(i as u64), duration, sample_rate)?;
        write_track(out, &format!("track{:02}", i + 1), &track)?;
    }
    println!(
        "wrote {tracks} track(s) of {duration} s at {sample_rate} Hz under {}",
        out.display()
    );
    Ok(())
}
