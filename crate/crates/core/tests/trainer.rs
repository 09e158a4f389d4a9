use gridvid::model::ModelConfig;
use gridvid::sgp::{compose_grid, TokenOrder};
use gridvid::synthdata::generate_clip;
use gridvid::trainer::{format_metrics, Checkpoint, Dataset, TrainConfig, Trainer};
use gridvid::vq::{fit_codebook, CodeBook};
use gridvid::Error;

fn tiny_data(order: TokenOrder) -> (Dataset, CodeBook) {
    let clips: Vec<_> = (0..6)
        .map(|i| generate_clip((i % 3) as u32, 100 + i as u64, 8, 16, 16).unwrap())
        .collect();
    let images: Vec<_> = clips.iter().map(|c| compose_grid(c.frames(), 2, 4).unwrap()).collect();
    let cb = fit_codebook(&images, 16, 4, 4, 4, 3).unwrap().codebook;
    (Dataset::from_clips(&clips, &cb, order).unwrap(), cb)
}

fn tiny_config(seed: u64, steps: u64) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            vocab: 16,
            num_classes: 3,
            seq_len: 128,
            dim: 16,
            layers: 1,
            heads: 2,
            mlp_ratio: 2,
            dropout: 0.0,
        },
        batch_size: 4,
        steps,
        segment_len: 8,
        seed,
        eval_every: 3,
        checkpoint_every: 0,
        reference: true,
        ..TrainConfig::default()
    }
}

fn run(seed: u64, steps: u64) -> (Trainer, String) {
    let (data, cb) = tiny_data(TokenOrder::GridRaster);
    let mut t = Trainer::new(tiny_config(seed, steps), cb, data.layout, data.order).unwrap();
    let log = t.run(&data, None).unwrap();
    (t, format_metrics(&log.metrics))
}

#[test]
fn identical_seeds_give_identical_logs_and_checkpoints() {
    let (a, la) = run(9, 6);
    let (b, lb) = run(9, 6);
    assert_eq!(la, lb);
    assert_eq!(a.checkpoint().to_bytes().unwrap(), b.checkpoint().to_bytes().unwrap());
    let (_, lc) = run(10, 6);
    assert_ne!(la, lc);
}

#[test]
fn save_load_save_is_bitwise_stable() {
    let (t, _) = run(1, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    let ckpt = t.checkpoint();
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    assert_eq!(loaded.to_bytes().unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (data, cb) = tiny_data(TokenOrder::GridRaster);
    let mut full = Trainer::new(tiny_config(4, 7), cb.clone(), data.layout, data.order).unwrap();
    let full_log = full.run(&data, None).unwrap();

    let mut first = Trainer::new(tiny_config(4, 3), cb, data.layout, data.order).unwrap();
    let head = first.run(&data, None).unwrap();
    let bytes = first.checkpoint().to_bytes().unwrap();
    let restored = Checkpoint::from_bytes(&bytes, "mem".as_ref()).unwrap();
    let mut second = Trainer::from_checkpoint(restored).unwrap();
    second.set_total_steps(7);
    let tail = second.run(&data, None).unwrap();

    let stitched: Vec<_> = head.metrics.iter().chain(&tail.metrics).copied().collect();
    assert_eq!(format_metrics(&stitched), format_metrics(&full_log.metrics));
    let mut a = full.checkpoint();
    let mut b = second.checkpoint();
    a.config.steps = 0;
    b.config.steps = 0;
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
}

#[test]
fn zero_p_max_masks_nothing() {
    let (data, cb) = tiny_data(TokenOrder::GridRaster);
    let mut cfg = tiny_config(2, 4);
    cfg.p_max = 0.0;
    let mut t = Trainer::new(cfg, cb, data.layout, data.order).unwrap();
    let log = t.run(&data, None).unwrap();
    assert!(log.metrics.iter().all(|r| r.masked_fraction == 0.0));
}

#[test]
fn masking_leaves_evaluation_targets_alone() {
    // Same frozen parameters, SAT off at evaluation: training-time p_max is irrelevant.
    let (data, cb) = tiny_data(TokenOrder::GridRaster);
    let (t, _) = run(5, 2);
    let mut ckpt = t.checkpoint();
    let a = Trainer::from_checkpoint(ckpt.clone()).unwrap().eval_loss(&data).unwrap();
    ckpt.config.p_max = 0.0;
    let b = Trainer::from_checkpoint(ckpt).unwrap().eval_loss(&data).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    drop(cb);
}

#[test]
fn corrupted_magic_names_offset() {
    let (t, _) = run(1, 1);
    let mut bytes = t.checkpoint().to_bytes().unwrap();
    bytes[0] = b'X';
    let err = Checkpoint::from_bytes(&bytes, "bad.ckpt".as_ref()).unwrap_err().to_string();
    assert!(err.contains("offset 0"), "{err}");
}

#[test]
fn version_and_hash_mismatch_are_incompatible() {
    let (t, _) = run(1, 1);
    let bytes = t.checkpoint().to_bytes().unwrap();
    let mut v = bytes.clone();
    v[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&v, "v".as_ref()), Err(Error::Incompatible(_))));
    let mut h = bytes;
    h[6] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&h, "h".as_ref()), Err(Error::Incompatible(_))));
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let (t, _) = run(1, 1);
    let bytes = t.checkpoint().to_bytes().unwrap();
    let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3], "t".as_ref()).unwrap_err();
    assert!(err.to_string().contains("truncated"), "{err}");
    let mut long = bytes;
    long.push(0);
    assert!(Checkpoint::from_bytes(&long, "t".as_ref()).is_err());
}

#[test]
fn inconsistent_shapes_fail_before_training() {
    let (data, cb) = tiny_data(TokenOrder::GridRaster);
    let mut cfg = tiny_config(1, 1);
    cfg.model.seq_len = 64;
    let err = Trainer::new(cfg, cb.clone(), data.layout, data.order).err().unwrap().to_string();
    assert!(err.contains("seq_len"), "{err}");
    let mut cfg = tiny_config(1, 1);
    cfg.segment_len = 7;
    let err = Trainer::new(cfg, cb.clone(), data.layout, data.order).err().unwrap().to_string();
    assert!(err.contains("segment_len"), "{err}");
    let mut cfg = tiny_config(1, 1);
    cfg.model.num_classes = 2;
    let mut t = Trainer::new(cfg, cb, data.layout, data.order).unwrap();
    let err = t.run(&data, None).unwrap_err().to_string();
    assert!(err.contains("num_classes"), "{err}");
    assert_eq!(t.step_count(), 0);
}

#[test]
fn frame_major_order_is_recorded() {
    let (data, cb) = tiny_data(TokenOrder::FrameMajor);
    let mut t = Trainer::new(tiny_config(3, 1), cb, data.layout, data.order).unwrap();
    t.run(&data, None).unwrap();
    let ckpt = Checkpoint::from_bytes(&t.checkpoint().to_bytes().unwrap(), "m".as_ref()).unwrap();
    assert_eq!(ckpt.order, TokenOrder::FrameMajor);
}
