//! End-to-end runs of the whole stack in one process: phantom → degrade
//! → two-stage training → inference → scoring, plus the bit-for-bit
//! reproducibility the training loop promises.

use cvs_core::metrics::evaluate;
use cvs_core::networks::{load_checkpoint, NetConfig};
use cvs_core::training::{infer, train, TrainConfig, TrainLogLine};
use cvs_core::volume::{degrade, make_phantom, DegradationSpec, PhantomKind};

fn micro_config() -> TrainConfig {
    TrainConfig {
        net: NetConfig {
            r: 2,
            base_channels: 8,
            blocks_per_group: 1,
            s2d_block: 2,
            attention_reduction: 4,
            pint_groups: 1,
            memory_items: 3,
        },
        epochs: 2,
        stage1_epochs: 1,
        steps_per_epoch: 25,
        batch_size: 1,
        lr: 1e-3,
        patch: 8,
        seed: 21,
        ..TrainConfig::desk_preset(2)
    }
}

#[test]
fn fifty_steps_of_self_supervision_reduce_the_loss() {
    let cfg = micro_config();
    let volumes = vec![
        make_phantom(PhantomKind::LayeredSine, (24, 24, 9), 31).unwrap(),
        make_phantom(PhantomKind::Ellipsoids, (24, 24, 9), 32).unwrap(),
    ];
    let dir = tempfile::tempdir().unwrap();
    let outcome = train(&cfg, &volumes, dir.path()).unwrap();
    assert_eq!(outcome.steps_run, 50);

    let first = outcome.first_loss.unwrap();
    let last = outcome.final_loss.unwrap();
    assert!(last.is_finite() && first.is_finite());
    assert!(last < first, "loss went {first} -> {last}");

    // The trained model reconstructs a held-out coarse volume at a
    // finite, sane score, and fusion produces the advertised geometry.
    let gt = make_phantom(PhantomKind::LayeredSine, (24, 24, 9), 33).unwrap();
    let coarse = degrade(&gt, &DegradationSpec::direct(2)).unwrap();
    let ckpt = load_checkpoint(&outcome.checkpoint).unwrap();
    let result = infer(&ckpt, &coarse, true, false).unwrap();
    let fused = result.fused.as_ref().unwrap();
    assert_eq!(fused.dims(), gt.dims());

    let report = evaluate(fused, &gt, Some((&coarse, 2))).unwrap();
    assert!(report.psnr.is_finite() && report.psnr > 0.0);
    assert!(report.ssim_a > 0.0 && report.ssim_a <= 1.0);
    assert!(report.baseline_psnr_linear.unwrap().is_finite());
}

#[test]
fn identical_runs_leave_identical_logs_and_checkpoints() {
    let mut cfg = micro_config();
    cfg.epochs = 2;
    cfg.steps_per_epoch = 3;
    let volumes = vec![make_phantom(PhantomKind::Ellipsoids, (20, 20, 9), 5).unwrap()];

    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let outcome = train(&cfg, &volumes, dir.path()).unwrap();
        let log = std::fs::read_to_string(&outcome.log).unwrap();
        let ckpt = std::fs::read(&outcome.checkpoint).unwrap();
        (log, ckpt)
    };
    let (log_a, ckpt_a) = run();
    let (log_b, ckpt_b) = run();

    // Wall-clock fields differ; the numeric trace must not.
    let losses = |log: &str| -> Vec<f64> {
        log.lines()
            .map(|l| serde_json::from_str::<TrainLogLine>(l).unwrap().loss.total)
            .collect()
    };
    assert_eq!(losses(&log_a), losses(&log_b));
    assert_eq!(ckpt_a, ckpt_b, "checkpoint bytes diverged");
}
