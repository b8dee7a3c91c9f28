// Scratch driver for sizing the desk-scale experiment. Not a test.

use std::time::Instant;

use cvs_core::metrics::{baseline_interpolate, psnr, BaselineMethod};
use cvs_core::networks::load_checkpoint;
use cvs_core::training::{infer, train, TrainConfig};
use cvs_core::volume::{degrade, make_phantom, DegradationSpec, PhantomKind, Volume};

fn phantoms() -> cvs_core::Result<(Vec<Volume>, Vec<Volume>)> {
    let mut train_vols = Vec::new();
    for i in 0..4 {
        train_vols.push(make_phantom(PhantomKind::LayeredSine, (48, 48, 33), 100 + i)?);
        train_vols.push(make_phantom(PhantomKind::Ellipsoids, (48, 48, 33), 200 + i)?);
    }
    let tests = vec![
        make_phantom(PhantomKind::LayeredSine, (48, 48, 33), 110)?,
        make_phantom(PhantomKind::Ellipsoids, (48, 48, 33), 210)?,
    ];
    Ok((train_vols, tests))
}

fn sq_err_sum(pred: &Volume, gt: &Volume) -> (f64, usize) {
    let s: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| (p as f64 - g as f64).powi(2))
        .sum();
    (s, gt.data().len())
}

fn main() -> cvs_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = TrainConfig::desk_preset(2);
    cfg.seed = 7;
    let mut stage1_only = false;
    let mut tag = String::new();
    for a in &args {
        if a == "--stage1-only" {
            stage1_only = true;
            continue;
        }
        let (k, v) = a.split_once('=').unwrap_or((a.as_str(), ""));
        match k {
            "seed" => cfg.seed = v.parse().unwrap(),
            "m" => cfg.net.memory_items = v.parse().unwrap(),
            "s2d" => cfg.net.s2d_block = v.parse().unwrap(),
            "lr" => cfg.lr = v.parse().unwrap(),
            "patch" => cfg.patch = v.parse().unwrap(),
            "decay" => cfg.lr_decay_epoch = v.parse().unwrap(),
            "epochs" => cfg.epochs = v.parse().unwrap(),
            "stage1" => cfg.stage1_epochs = v.parse().unwrap(),
            "steps" => cfg.steps_per_epoch = v.parse().unwrap(),
            "batch" => cfg.batch_size = v.parse().unwrap(),
            "wmem" => cfg.weights.memory = v.parse().unwrap(),
            "tag" => tag = v.to_string(),
            _ => panic!("unknown arg {a}"),
        }
    }
    if stage1_only {
        cfg.stage1_epochs = cfg.epochs;
    }

    let (train_vols, tests) = phantoms()?;
    println!(
        "seed={} s1only={} epochs={} stage1={} steps={} lr={} decay@{} patch={} m={} s2d={}",
        cfg.seed,
        stage1_only,
        cfg.epochs,
        cfg.stage1_epochs,
        cfg.steps_per_epoch,
        cfg.lr,
        cfg.lr_decay_epoch,
        cfg.patch,
        cfg.net.memory_items,
        cfg.net.s2d_block
    );

    let dir = std::env::temp_dir().join(format!("desk_tune_{}_{}_{}", cfg.seed, stage1_only, tag));
    let t0 = Instant::now();
    let outcome = train(&cfg, &train_vols, &dir)?;
    let train_secs = t0.elapsed().as_secs_f64();
    println!(
        "train: {:.1}s  loss {:.4} -> {:.4}  ratio {:.3}  ckpt {}",
        train_secs,
        outcome.first_loss.unwrap(),
        outcome.final_loss.unwrap(),
        outcome.final_loss.unwrap() / outcome.first_loss.unwrap(),
        outcome.checkpoint.display()
    );

    let ckpt = load_checkpoint(&outcome.checkpoint)?;
    // columns: fused, axial, coronal, sagittal, linear
    let mut pooled = [0.0f64; 5];
    let mut count = 0usize;
    for (i, gt) in tests.iter().enumerate() {
        let lr = degrade(gt, &DegradationSpec::direct(2))?;
        let res = infer(&ckpt, &lr, true, false)?;
        let fused = res.fused.as_ref().unwrap();
        let lin = baseline_interpolate(&lr, 2, BaselineMethod::Linear)?;
        let vols = [fused, &res.axial, &res.coronal, &res.sagittal, &lin];
        let mut row = [0.0f64; 5];
        for (j, v) in vols.iter().enumerate() {
            let (s, n) = sq_err_sum(v, gt);
            pooled[j] += s;
            count = n; // same for every volume
            row[j] = psnr(v, gt)?;
        }
        println!(
            "test{i}: fused {:.3} axial {:.3} coronal {:.3} sagittal {:.3} | linear {:.3}",
            row[0], row[1], row[2], row[3], row[4]
        );
    }
    let total_n = (count * tests.len()) as f64;
    let db: Vec<f64> = pooled.iter().map(|&s| -10.0 * (s / total_n).log10()).collect();
    println!(
        "pooled: fused {:.3} axial {:.3} coronal {:.3} sagittal {:.3} | linear {:.3}",
        db[0], db[1], db[2], db[3], db[4]
    );
    println!(
        "(b) fused - linear = {:+.3} dB (need >= +0.3)   (c) fused - best_view = {:+.3} dB (need >= -0.05)",
        db[0] - db[4],
        db[0] - db[1].max(db[2]).max(db[3])
    );
    println!("total: {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
