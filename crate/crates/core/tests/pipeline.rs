//! Data files, splits and patch extraction working together.

use hsi_peft::config::RunConfig;
use hsi_peft::harness::{prepare, write_synth};
use hsi_peft::hsi::{HsiCube, SplitTable};

#[test]
fn synthetic_scene_survives_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default();
    let (cube_path, label_path) = write_synth(&cfg, dir.path(), "scene").unwrap();
    let from_disk = HsiCube::read(&cube_path, &label_path).unwrap();

    let text = format!(
        "[data]\ncube = {}\nlabels = {}\ntrain_per_class = 50\n",
        cube_path.display(),
        label_path.display()
    );
    let files = prepare(&RunConfig::from_text(&text).unwrap()).unwrap();
    let synth = prepare(&cfg).unwrap();
    assert_eq!(files.split, synth.split);
    assert_eq!(files.source.stats, synth.source.stats);
    assert_eq!(from_disk.n_classes(), 5);
}

#[test]
fn split_file_pins_the_partition() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepare(&RunConfig::default()).unwrap();
    let path = dir.path().join("split.txt");
    data.split.write(&path).unwrap();
    assert_eq!(SplitTable::read(&path).unwrap(), data.split);

    // A different seed would reshuffle, unless the split comes from the file.
    let reseeded = RunConfig::from_text("[train]\nseed = 99\n").unwrap();
    assert_ne!(prepare(&reseeded).unwrap().split, data.split);
    let text = format!("[data]\nsplit = {}\n[train]\nseed = 99\n", path.display());
    assert_eq!(prepare(&RunConfig::from_text(&text).unwrap()).unwrap().split, data.split);
}

#[test]
fn patches_are_normalized_with_training_statistics() {
    let data = prepare(&RunConfig::default()).unwrap();
    let batch = data.source.batch(&data.split.train).unwrap();
    let len = data.source.patch_len();
    assert_eq!(batch.len(), data.split.train.len() * len);
    // Training patches come out roughly centred per component.
    let bands = data.source.cube.bands;
    let n = (batch.len() / bands) as f64;
    for b in 0..bands {
        let mean: f64 = batch.iter().skip(b).step_by(bands).map(|&v| v as f64).sum::<f64>() / n;
        assert!(mean.abs() < 0.2, "component {b} mean {mean}");
    }
}
