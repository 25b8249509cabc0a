use super::*;
use crate::dataset::SlicePosition;
use crate::model::ModelConfig;
use crate::phantom::{generate_sax_clip, PhantomParams};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        num_blocks: 1,
        num_heads: 2,
        encoder_channels: vec![4, 8],
        adapter_bottleneck: 4,
        decoder_heads: 2,
        mhca_kv_grid: 4,
        ..ModelConfig::default()
    }
}

fn clips(n: usize) -> Vec<(CineClip, MaskClip)> {
    (0..n)
        .map(|i| {
            let mut p = PhantomParams::new(16, 16, 4, SlicePosition::LEVELS[i % 3]);
            p.seed = i as u64;
            let (mut c, m) = generate_sax_clip(&p).unwrap();
            c.meta.scan_id = format!("s{i}");
            (c, m)
        })
        .collect()
}

fn trainer(epochs: usize) -> Trainer {
    let model = Model::build(tiny_model(), 3).unwrap();
    let cfg = TrainConfig { epochs, batch_size: 2, lr0: 1e-3, seed: 5, ..TrainConfig::default() };
    Trainer::new(model, cfg, AugmentConfig::default(), TrainMode::Sax).unwrap()
}

#[test]
fn schedule_examples() {
    let c = TrainConfig::default();
    assert_eq!(lr_at_epoch(&c, 0), 1e-4);
    assert_eq!(lr_at_epoch(&c, 99), 1e-4);
    assert!((lr_at_epoch(&c, 250) - 1e-6).abs() < 1e-18);
}

#[test]
fn modes_parse_and_filter() {
    for m in TrainMode::ALL {
        assert_eq!(m.name().parse::<TrainMode>().unwrap(), m);
    }
    assert!("both".parse::<TrainMode>().is_err());
    assert!(TrainMode::MultiPrompt.prompted() && !TrainMode::Multi.prompted());
    assert_eq!(TrainMode::Lax.views(), &[View::Lax]);
}

#[test]
fn zero_epochs_keep_initial_parameters() {
    let mut t = trainer(0);
    let before = t.model.clone();
    train_loop(&mut t, &clips(2), &LoopOptions::default()).unwrap();
    assert_eq!(t.model, before);
}

#[test]
fn frozen_parameters_never_move() {
    let mut t = trainer(5);
    let before = t.model.clone();
    // 4 clips at batch size 2: two steps per epoch, ten steps in total
    train_loop(&mut t, &clips(4), &LoopOptions::default()).unwrap();
    assert_eq!(t.optimizer.step, 10);
    let mut moved = 0;
    for (a, b) in before.params.iter().zip(t.model.params.iter()) {
        if a.frozen {
            assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", a.name);
        } else if a.value != b.value {
            moved += 1;
        }
    }
    assert!(moved > 0);
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let data = clips(3);
    let mut straight = trainer(4);
    train_loop(&mut straight, &data, &LoopOptions::default()).unwrap();

    let mut first = trainer(4);
    first.config.epochs = 2;
    train_loop(&mut first, &data, &LoopOptions::default()).unwrap();
    let bytes = first.checkpoint().to_bytes();
    let mut resumed = Checkpoint::from_bytes(&bytes).unwrap().into_trainer();
    assert_eq!(resumed, first);
    resumed.config.epochs = 4;
    train_loop(&mut resumed, &data, &LoopOptions::default()).unwrap();
    assert_eq!(resumed.model, straight.model);
    assert_eq!(resumed.optimizer, straight.optimizer);
    assert_eq!(resumed.history, straight.history);
}

#[test]
fn checkpoint_rejects_corruption() {
    let t = trainer(1);
    let bytes = t.checkpoint().to_bytes();
    assert_eq!(&bytes[..5], b"CKPT1");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(crate::error::FormatError::BadMagic)));
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
        Err(crate::error::FormatError::Truncated { .. })
    ));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Checkpoint::from_bytes(&long), Err(crate::error::FormatError::Trailing(1))));
}

#[test]
fn non_finite_loss_aborts_and_keeps_state() {
    let mut t = trainer(3);
    let name = t.model.params.iter().find(|p| p.name == "decoder.output_token").unwrap().name.clone();
    t.model.params.get_mut(&name).unwrap().value.data_mut()[0] = f32::NAN;
    let before = t.clone();
    let err = train_loop(&mut t, &clips(2), &LoopOptions::default()).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert_eq!(t.optimizer, before.optimizer);
    assert_eq!(t.epoch, 0);
}

#[test]
fn loop_writes_log_and_final_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(2);
    t.config.checkpoint_every = 1;
    let opts = LoopOptions { out_dir: Some(dir.path().to_path_buf()), verbose: false };
    train_loop(&mut t, &clips(2), &opts).unwrap();
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,lr,loss,train_dice,wall_seconds");
    assert_eq!(lines.len(), 3);
    assert!(dir.path().join("epoch_0001.ckpt").exists());
    let back = Checkpoint::load(dir.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(back.trainer, t);
}
