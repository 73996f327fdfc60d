//! Objective separation quality: SDR and SIR from an orthogonal-projection
//! decomposition of the estimate, aggregated as dataset medians.
//!
//! The estimate splits into three additive parts: its projection onto the
//! target reference, the extra component lying in the span of all
//! references (interference), and the remainder (artifacts). Ratios are
//! reported in decibels, capped at +100 dB where an error energy vanishes.
//!
//! The decomposition uses plain time-invariant projections, not the
//! allowed-distortion filter banks of the full campaign protocol, so
//! absolute numbers are not comparable to published campaign scores.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::{ACCOMPANIMENT_FILE, VOICE_FILE};
use crate::error::{Error, Result};
use crate::signal::wav::read_wav;
use crate::training::worker_pool;

/// Upper cap for SDR/SIR, standing in for infinity.
pub const DB_CAP: f64 = 100.0;

/// Relative threshold below which a reference direction is treated as
/// linearly dependent and dropped from the interference span.
const DEPENDENCE_TOL: f64 = 1e-10;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn energy(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Additive split of an estimate against references.
#[derive(Debug, Clone)]
pub struct BssDecomposition {
    pub s_target: Vec<f64>,
    pub e_interf: Vec<f64>,
    pub e_artif: Vec<f64>,
}

/// Projects the estimate onto the target reference and onto the span of all
/// references. Requires equal lengths and a target with nonzero energy.
pub fn bss_decompose(
    estimate: &[f64],
    target: &[f64],
    interferers: &[&[f64]],
) -> Result<BssDecomposition> {
    let len = estimate.len();
    if len == 0 {
        return Err(Error::InvalidArgument("empty signals".into()));
    }
    if target.len() != len || interferers.iter().any(|i| i.len() != len) {
        return Err(Error::InvalidArgument(
            "estimate and references must share one length".into(),
        ));
    }
    let target_energy = energy(target);
    if target_energy <= 0.0 {
        return Err(Error::UndefinedMetric(
            "target reference has zero energy".into(),
        ));
    }
    let coef = dot(estimate, target) / target_energy;
    let s_target: Vec<f64> = target.iter().map(|&t| coef * t).collect();

    // Orthonormal basis of the reference span (modified Gram-Schmidt,
    // dropping dependent directions), then the projection onto it.
    let mut basis: Vec<&[f64]> = vec![target];
    basis.extend(interferers);
    let mut ortho: Vec<Vec<f64>> = Vec::new();
    for b in basis {
        let scale = energy(b).sqrt();
        if scale == 0.0 {
            continue;
        }
        let mut v = b.to_vec();
        for q in &ortho {
            let c = dot(&v, q);
            for (vi, qi) in v.iter_mut().zip(q) {
                *vi -= c * qi;
            }
        }
        let norm = energy(&v).sqrt();
        if norm <= DEPENDENCE_TOL * scale {
            continue;
        }
        for vi in &mut v {
            *vi /= norm;
        }
        ortho.push(v);
    }
    let mut p_all = vec![0.0; len];
    for q in &ortho {
        let c = dot(estimate, q);
        for (pi, qi) in p_all.iter_mut().zip(q) {
            *pi += c * qi;
        }
    }

    let e_interf: Vec<f64> = p_all
        .iter()
        .zip(&s_target)
        .map(|(p, s)| p - s)
        .collect();
    let e_artif: Vec<f64> = estimate
        .iter()
        .zip(&p_all)
        .map(|(e, p)| e - p)
        .collect();
    Ok(BssDecomposition {
        s_target,
        e_interf,
        e_artif,
    })
}

fn ratio_db(num: f64, den: f64) -> f64 {
    if den <= 0.0 {
        return DB_CAP;
    }
    (10.0 * (num / den).log10()).min(DB_CAP)
}

/// Signal-to-distortion and signal-to-interference ratios in dB.
pub fn sdr_sir(d: &BssDecomposition) -> Result<(f64, f64)> {
    let signal = energy(&d.s_target);
    if signal <= 0.0 {
        return Err(Error::UndefinedMetric(
            "estimate has no component along the target".into(),
        ));
    }
    let distortion: Vec<f64> = d
        .e_interf
        .iter()
        .zip(&d.e_artif)
        .map(|(i, a)| i + a)
        .collect();
    let sdr = ratio_db(signal, energy(&distortion));
    let sir = ratio_db(signal, energy(&d.e_interf));
    Ok((sdr, sir))
}

/// Convenience: decompose a voice estimate against voice and accompaniment
/// references and return (SDR, SIR).
pub fn voice_scores(
    estimate: &[f64],
    voice_ref: &[f64],
    accompaniment_ref: &[f64],
) -> Result<(f64, f64)> {
    let d = bss_decompose(estimate, voice_ref, &[accompaniment_ref])?;
    sdr_sir(&d)
}

/// Scores for one track.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackScore {
    pub track: String,
    pub sdr_db: f64,
    pub sir_db: f64,
}

/// Per-track scores plus dataset medians.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalScores {
    pub per_track: Vec<TrackScore>,
    pub median_sdr: f64,
    pub median_sir: f64,
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty set");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite metric values"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn reference_tracks(references: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !references.is_dir() {
        return Err(Error::DatasetLayout(format!(
            "{} is not a directory",
            references.display()
        )));
    }
    let mut tracks = Vec::new();
    for entry in std::fs::read_dir(references)? {
        let entry = entry?;
        let dir = entry.path();
        if !dir.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        for file in [VOICE_FILE, ACCOMPANIMENT_FILE] {
            if !dir.join(file).is_file() {
                return Err(Error::DatasetLayout(format!(
                    "reference track {name} is missing {file}"
                )));
            }
        }
        tracks.push((name, dir));
    }
    if tracks.is_empty() {
        return Err(Error::DatasetLayout(format!(
            "no reference tracks under {}",
            references.display()
        )));
    }
    tracks.sort();
    Ok(tracks)
}

fn score_one(estimates: &Path, name: &str, ref_dir: &Path) -> Result<TrackScore> {
    let est_path = estimates.join(name).join(VOICE_FILE);
    if !est_path.is_file() {
        return Err(Error::DatasetLayout(format!(
            "estimate for track {name} not found at {}",
            est_path.display()
        )));
    }
    let est = read_wav(&est_path)?;
    let voice = read_wav(&ref_dir.join(VOICE_FILE))?;
    let accomp = read_wav(&ref_dir.join(ACCOMPANIMENT_FILE))?;
    if est.sample_rate != voice.sample_rate || est.sample_rate != accomp.sample_rate {
        return Err(Error::DatasetLayout(format!(
            "track {name}: sample rates disagree"
        )));
    }
    let len = est
        .samples
        .len()
        .min(voice.samples.len())
        .min(accomp.samples.len());
    if len == 0 {
        return Err(Error::DatasetLayout(format!("track {name}: empty audio")));
    }
    let (sdr_db, sir_db) = voice_scores(
        &est.samples[..len],
        &voice.samples[..len],
        &accomp.samples[..len],
    )?;
    Ok(TrackScore {
        track: name.to_string(),
        sdr_db,
        sir_db,
    })
}

/// Scores every reference track against `estimates/<track>/vocals.wav` and
/// aggregates medians. Tracks are truncated to their shortest stem.
pub fn evaluate_tracks(estimates: &Path, references: &Path) -> Result<EvalScores> {
    let tracks = reference_tracks(references)?;
    let per_track: Vec<TrackScore> = worker_pool().install(|| {
        tracks
            .par_iter()
            .map(|(name, dir)| score_one(estimates, name, dir))
            .collect::<Result<Vec<_>>>()
    })?;
    let sdrs: Vec<f64> = per_track.iter().map(|t| t.sdr_db).collect();
    let sirs: Vec<f64> = per_track.iter().map(|t| t.sir_db).collect();
    Ok(EvalScores {
        median_sdr: median(&sdrs),
        median_sir: median(&sirs),
        per_track,
    })
}

/// CSV rendering: one row per track and a final MEDIAN row.
pub fn scores_csv(scores: &EvalScores) -> String {
    use std::fmt::Write;
    let mut out = String::from("track,sdr_db,sir_db\n");
    for t in &scores.per_track {
        writeln!(out, "{},{},{}", t.track, t.sdr_db, t.sir_db)
            .expect("writing to a String cannot fail");
    }
    writeln!(out, "MEDIAN,{},{}", scores.median_sdr, scores.median_sir)
        .expect("writing to a String cannot fail");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_fixture, write_track};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_signal(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Removes the component of `v` along `onto` (in place).
    fn orthogonalize(v: &mut [f64], onto: &[f64]) {
        let c = dot(v, onto) / energy(onto);
        for (vi, oi) in v.iter_mut().zip(onto) {
            *vi -= c * oi;
        }
    }

    #[test]
    fn perfect_estimate_caps_both_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let target = random_signal(&mut rng, 400);
        let interferer = random_signal(&mut rng, 400);
        let d = bss_decompose(&target, &target, &[&interferer]).unwrap();
        assert!(energy(&d.e_interf) < 1e-20);
        assert!(energy(&d.e_artif) < 1e-20);
        let (sdr, sir) = sdr_sir(&d).unwrap();
        assert_eq!(sdr, DB_CAP);
        assert_eq!(sir, DB_CAP);
    }

    #[test]
    fn scaling_the_estimate_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target = random_signal(&mut rng, 300);
        let interferer = random_signal(&mut rng, 300);
        let artifact = random_signal(&mut rng, 300);
        let estimate: Vec<f64> = (0..300)
            .map(|i| target[i] + 0.3 * interferer[i] + 0.2 * artifact[i])
            .collect();
        let doubled: Vec<f64> = estimate.iter().map(|v| 2.0 * v).collect();
        let a = sdr_sir(&bss_decompose(&estimate, &target, &[&interferer]).unwrap()).unwrap();
        let b = sdr_sir(&bss_decompose(&doubled, &target, &[&interferer]).unwrap()).unwrap();
        assert_abs_diff_eq!(a.0, b.0, epsilon = 1e-9);
        assert_abs_diff_eq!(a.1, b.1, epsilon = 1e-9);

        // Pure rescaling of the target is still a perfect estimate.
        let scaled: Vec<f64> = target.iter().map(|v| 2.0 * v).collect();
        let d = bss_decompose(&scaled, &target, &[&interferer]).unwrap();
        for (s, e) in d.s_target.iter().zip(&scaled) {
            assert_abs_diff_eq!(s, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn closed_form_interference_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let target = random_signal(&mut rng, 500);
        let mut interferer = random_signal(&mut rng, 500);
        orthogonalize(&mut interferer, &target);
        let (et, ei) = (energy(&target), energy(&interferer));
        for _ in 0..20 {
            let a: f64 = rng.gen_range(0.2..3.0);
            let b: f64 = rng.gen_range(0.05..2.0);
            let estimate: Vec<f64> = (0..500)
                .map(|i| a * target[i] + b * interferer[i])
                .collect();
            let (_, sir) =
                sdr_sir(&bss_decompose(&estimate, &target, &[&interferer]).unwrap()).unwrap();
            let expected = 10.0 * (a * a * et / (b * b * ei)).log10();
            assert_abs_diff_eq!(sir, expected, epsilon = 1e-6);
        }
    }

    #[test]
    fn equal_energy_artifact_gives_zero_sdr() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let target = random_signal(&mut rng, 400);
        let mut interferer = random_signal(&mut rng, 400);
        orthogonalize(&mut interferer, &target);
        // An artifact orthogonal to the whole reference span, scaled to the
        // target's energy.
        let mut artifact = random_signal(&mut rng, 400);
        orthogonalize(&mut artifact, &target);
        orthogonalize(&mut artifact, &interferer);
        let s = (energy(&target) / energy(&artifact)).sqrt();
        let estimate: Vec<f64> = (0..400).map(|i| target[i] + s * artifact[i]).collect();
        let (sdr, sir) =
            sdr_sir(&bss_decompose(&estimate, &target, &[&interferer]).unwrap()).unwrap();
        assert_abs_diff_eq!(sdr, 0.0, epsilon = 1e-9);
        assert_eq!(sir, DB_CAP);
    }

    #[test]
    fn equal_energy_interferer_gives_zero_sir() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let target = random_signal(&mut rng, 400);
        let mut interferer = random_signal(&mut rng, 400);
        orthogonalize(&mut interferer, &target);
        let s = (energy(&target) / energy(&interferer)).sqrt();
        let estimate: Vec<f64> = (0..400).map(|i| target[i] + s * interferer[i]).collect();
        let (_, sir) =
            sdr_sir(&bss_decompose(&estimate, &target, &[&interferer]).unwrap()).unwrap();
        assert_abs_diff_eq!(sir, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn components_sum_back_to_the_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let target = random_signal(&mut rng, 250);
            let interferer = random_signal(&mut rng, 250);
            let estimate = random_signal(&mut rng, 250);
            let d = bss_decompose(&estimate, &target, &[&interferer]).unwrap();
            let scale = energy(&estimate).sqrt().max(1.0);
            for (i, ((s, ei), ea)) in d
                .s_target
                .iter()
                .zip(&d.e_interf)
                .zip(&d.e_artif)
                .enumerate()
            {
                let sum = s + ei + ea;
                assert!(
                    (sum - estimate[i]).abs() <= 1e-10 * scale,
                    "index {i}: {sum} vs {}",
                    estimate[i]
                );
            }
        }
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let zeros = vec![0.0; 100];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sig = random_signal(&mut rng, 100);
        assert!(matches!(
            bss_decompose(&sig, &zeros, &[]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(bss_decompose(&sig, &sig[..50], &[]).is_err());

        // An estimate with exactly no target component (disjoint support).
        let mut front = zeros.clone();
        let mut back = zeros.clone();
        front[..50].copy_from_slice(&sig[..50]);
        back[50..].copy_from_slice(&sig[50..]);
        let d = bss_decompose(&back, &front, &[]).unwrap();
        assert!(matches!(sdr_sir(&d), Err(Error::UndefinedMetric(_))));

        // A duplicated reference direction must not break the span.
        let dup: Vec<f64> = sig.iter().map(|v| 2.0 * v).collect();
        let d = bss_decompose(&sig, &sig, &[&dup]).unwrap();
        assert!(energy(&d.e_interf) < 1e-18);
    }

    #[test]
    fn median_conventions() {
        assert_eq!(median(&[9.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
        assert_eq!(median(&[7.0]), 7.0);
    }

    #[test]
    fn evaluate_directory_trees() {
        let dir = tempfile::tempdir().unwrap();
        let refs = dir.path().join("refs");
        let ests = dir.path().join("ests");
        for (i, name) in ["alpha", "beta", "gamma"].iter().enumerate() {
            let track = synth_fixture(i as u64, 0.2, 8000).unwrap();
            write_track(&refs, name, &track).unwrap();
            write_track(&ests, name, &track).unwrap();
        }
        let scores = evaluate_tracks(&ests, &refs).unwrap();
        assert_eq!(scores.per_track.len(), 3);
        assert_eq!(scores.per_track[0].track, "alpha");
        // Identical estimates: capped, up to f32 storage rounding.
        for t in &scores.per_track {
            assert!(t.sdr_db > 90.0, "{t:?}");
        }
        assert!(scores.median_sdr > 90.0);

        let csv = scores_csv(&scores);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "track,sdr_db,sir_db");
        assert_eq!(lines.len(), 5);
        assert!(lines[4].starts_with("MEDIAN,"));

        // A missing estimate directory is a layout error.
        std::fs::remove_dir_all(ests.join("beta")).unwrap();
        assert!(matches!(
            evaluate_tracks(&ests, &refs),
            Err(Error::DatasetLayout(_))
        ));
    }
}
