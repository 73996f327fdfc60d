//! The whole workflow on disk: fixture dataset, training with checkpoints,
//! separation from a loaded checkpoint, and a scored evaluation report.
//!
//! This mirrors what the `madtwin` binary does across `fixture`, `train`,
//! `separate`, and `evaluate`, but through the library API, in a temporary
//! directory. Training is kept to a couple of epochs; the point here is the
//! plumbing, not the score.
//!
//! ```text
//! cargo run --release --example end_to_end
//! ```

use madtwin::cli::separate_samples;
use madtwin::config::{RunConfig, CONFIG_FILE};
use madtwin::data::{self, synth_fixture, write_track, VOICE_FILE};
use madtwin::error::Result;
use madtwin::eval::{evaluate_tracks, scores_csv};
use madtwin::signal::wav::{read_wav, write_wav, SampleFormat};
use madtwin::training::checkpoint::CHECKPOINT_FILE;
use madtwin::training::{
    collect_items, load_checkpoint, save_checkpoint, train_with, AdamState,
};

fn main() -> Result<()> {
    let root = tempfile::tempdir()?;
    let dataset = root.path().join("dataset");
    let run_dir = root.path().join("run");
    let estimates = root.path().join("estimates");

    // Fixture: three tracks with known clean stems.
    for (i, name) in ["track01", "track02", "track03"].iter().enumerate() {
        let track = synth_fixture(i as u64, 3.0, 8000)?;
        write_track(&dataset, name, &track)?;
    }
    println!("dataset written under {}", dataset.display());

    // Train briefly and checkpoint after every epoch.
    let mut config = RunConfig::desk();
    config.train.epochs = 2;
    let model = config.model();
    let tracks = data::list_tracks(&dataset)?;
    let items = collect_items(&config.stft, &model, &tracks)?;
    std::fs::create_dir_all(&run_dir)?;
    config.save(&run_dir.join(CONFIG_FILE))?;
    let ckpt_path = run_dir.join(CHECKPOINT_FILE);
    let run = train_with(&model, &config.train, &items, |epoch, params, opt| {
        save_checkpoint(&ckpt_path, params, Some(opt))?;
        println!("epoch {}: checkpoint updated", epoch + 1);
        Ok(())
    })?;
    println!(
        "trained {} step(s) on {} window(s); final total loss {:.3}",
        run.records.len(),
        items.len(),
        run.records.last().unwrap().losses.total
    );

    // Separate every mixture with the loaded (not in-memory) model.
    let restored = load_checkpoint(&ckpt_path)?;
    let restored_config = RunConfig::load(&run_dir.join(CONFIG_FILE))?;
    assert!(restored.opt.is_some_and(|o: AdamState| !o.is_empty()));
    for entry in &tracks {
        let track = data::load_track(entry)?;
        let voice = separate_samples(
            &restored.params,
            &restored_config.model(),
            &restored_config.stft,
            restored_config.griffin_lim_iterations,
            &track.mixture,
        )?;
        let out = estimates.join(&entry.name);
        std::fs::create_dir_all(&out)?;
        write_wav(
            &out.join(VOICE_FILE),
            &voice,
            track.sample_rate,
            SampleFormat::Float32,
        )?;
    }
    let one = read_wav(&estimates.join("track01").join(VOICE_FILE))?;
    println!(
        "separated {} track(s); track01 estimate has {} samples",
        tracks.len(),
        one.samples.len()
    );

    // Score the estimates against the dataset's clean stems.
    let scores = evaluate_tracks(&estimates, &dataset)?;
    print!("{}", scores_csv(&scores));
    println!(
        "(two epochs of training; run the train_fixture example for a model \
         that actually separates)"
    );
    Ok(())
}
