mod common;

use common::repo_root;
use mutualnet::net3d::TwoBranchSpec;
use mutualnet::{archs, ModelSpec};
use mutualnet_harness::config::{builtin_model, ExperimentConfig, ModelSource, TrainMode, BUILTIN_MODELS};

#[test]
fn model_files_equal_the_builtins() {
    for name in BUILTIN_MODELS {
        let text = std::fs::read_to_string(repo_root().join(format!("models/{name}.json"))).unwrap();
        assert_eq!(ModelSpec::from_json(&text).unwrap(), builtin_model(name).unwrap(), "{name}");
    }
    let text = std::fs::read_to_string(repo_root().join("models/tiny_slowfast.json")).unwrap();
    let two: TwoBranchSpec = serde_json::from_str(&text).unwrap();
    two.validate().unwrap();
    assert_eq!(two, archs::tiny_slowfast());
}

#[test]
fn example_configs_load() {
    let dir = repo_root().join("configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert!(!cfg.eval_grid().unwrap().is_empty());
            seen += 1;
        }
    }
    assert!(seen >= 5);
}

#[test]
fn desk_configs_are_the_recipe() {
    for mode in [TrainMode::Mutualnet, TrainMode::MutualnetNoKl, TrainMode::Conventional, TrainMode::Multiscale] {
        let path = repo_root().join(format!("configs/desk_cifar_{}.toml", mode.name()));
        let cfg = ExperimentConfig::load(&path).unwrap();
        let recipe = mutualnet_harness::config::cifar_recipe(mode, cfg.output_dir.clone());
        assert_eq!(cfg.hash(), recipe.hash(), "{}", mode.name());
        assert_eq!(cfg.model, ModelSource::Builtin("cifar_convnet".into()));
    }
}
