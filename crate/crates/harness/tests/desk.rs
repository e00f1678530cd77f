use mutualnet_harness::config::{DataConfig, TrainMode};
use mutualnet_harness::desk::{run_desk, DeskOptions, DeskSummary, DESK_MODES, SUMMARY_FILE};

#[test]
fn desk_pipeline_on_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let opts = DeskOptions {
        epochs: 1,
        data: DataConfig::Synthetic {
            classes: 10,
            train: 40,
            val: 20,
            resolution: 32,
            noise: 0.5,
            seed: 9,
        },
        width_step: 0.25,
        modes: DESK_MODES.to_vec(),
    };
    let summary = run_desk(dir.path(), &opts).unwrap();
    assert_eq!(summary.dataset, "synthetic");
    assert_eq!(summary.runs.len(), 4);
    assert_eq!(DeskSummary::load(&dir.path().join(SUMMARY_FILE)).unwrap(), summary);
    for mode in DESK_MODES {
        let run = summary.run(mode).unwrap();
        assert_eq!(run.accuracy.len(), 3 * 4, "{}", mode.name());
        assert_eq!(run.uncalibrated.len(), run.accuracy.len());
        assert!(run.accuracy_at(0.5, 32).is_some() && run.accuracy_at(1.0, 20).is_some());
        // The full configuration's statistics are its own calibration.
        assert_eq!(run.uncalibrated_at(1.0, 32), run.accuracy_at(1.0, 32));
        assert!(dir.path().join(mode.name()).join("query_table.csv").exists());
    }
    assert_ne!(
        summary.run(TrainMode::Mutualnet).unwrap().config_hash,
        summary.run(TrainMode::Conventional).unwrap().config_hash
    );
}
