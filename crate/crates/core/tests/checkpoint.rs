mod common;

use candle_core::{DType, Device};
use eyewear_core::checkpoint::{
    check_compatible, load_checkpoint, param_digests, read_config, save_checkpoint, WEIGHTS_FILE,
};
use eyewear_core::config::Config;
use eyewear_core::losses::Stage;
use eyewear_core::model::GlassModel;
use eyewear_core::Error;

fn model(cfg: &Config) -> GlassModel {
    GlassModel::new(&cfg.model, DType::F32, &Device::Cpu).unwrap()
}

#[test]
fn round_trip_restores_every_parameter() {
    let cfg = Config::toy();
    let a = model(&cfg);
    common::jitter_params(&a, 0.01, 1);
    let dir = tempfile::tempdir().unwrap();
    let ck = save_checkpoint(dir.path(), &a, &cfg, Stage::MaskPhase, 7, true).unwrap();
    let b = model(&cfg);
    assert_ne!(param_digests(&a).unwrap(), param_digests(&b).unwrap());
    let manifest = load_checkpoint(dir.path(), &b).unwrap();
    assert_eq!(manifest, ck.manifest);
    assert_eq!(param_digests(&a).unwrap(), param_digests(&b).unwrap());
    assert_eq!(read_config(dir.path()).unwrap(), cfg);
}

#[test]
fn flipped_byte_is_detected() {
    let cfg = Config::toy();
    let m = model(&cfg);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &m, &cfg, Stage::MaskPhase, 1, true).unwrap();
    let path = dir.path().join(WEIGHTS_FILE);
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(load_checkpoint(dir.path(), &m), Err(Error::CorruptCheckpoint { .. })));
}

#[test]
fn missing_checkpoint_is_corrupt() {
    let cfg = Config::toy();
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_checkpoint(dir.path().join("nothing"), &model(&cfg)),
        Err(Error::CorruptCheckpoint { .. })
    ));
}

#[test]
fn compatibility_rules() {
    let cfg = Config::toy();
    let m = model(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let done = save_checkpoint(dir.path().join("done"), &m, &cfg, Stage::MaskPhase, 2000, true).unwrap().manifest;
    let partial = save_checkpoint(dir.path().join("part"), &m, &cfg, Stage::MaskPhase, 10, false).unwrap().manifest;

    assert!(check_compatible(&done, &cfg, Stage::TextPhase, false).is_ok());
    assert!(check_compatible(&partial, &cfg, Stage::MaskPhase, false).is_ok());
    assert!(matches!(
        check_compatible(&partial, &cfg, Stage::TextPhase, false),
        Err(Error::StageOrder { .. })
    ));
    assert!(matches!(
        check_compatible(&done, &cfg, Stage::Joint, false),
        Err(Error::ResumeStageMismatch { .. })
    ));

    let mut other = cfg.clone();
    other.model.mapper.leaky_slope = 0.1;
    assert!(matches!(
        check_compatible(&done, &other, Stage::TextPhase, false),
        Err(Error::ConfigHashMismatch { .. })
    ));
    assert!(check_compatible(&done, &other, Stage::TextPhase, true).is_ok());

    let mut retuned = cfg.clone();
    retuned.stage1_mask.learning_rate = 0.01;
    assert!(matches!(
        check_compatible(&partial, &retuned, Stage::MaskPhase, false),
        Err(Error::ConfigHashMismatch { .. })
    ));
}
