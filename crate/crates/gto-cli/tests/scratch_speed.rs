//! Temporary calibration harness (not part of the final suite).

use gto_cli::exec::Threaded;
use gto_core::model::{Mode, ModelConfig, ModelParams};
use gto_core::synth::{build_diffusion_dataset, DiffusionSpec};
use gto_core::train::{
    eval_transient_epsilon, fit_transient_stats, prepare_transient, train_transient, TrainConfig,
};
use std::time::Instant;

#[test]
#[ignore]
fn calibrate_transient() {
    let spec = DiffusionSpec::default(); // N ~ 289, T = 30
    let t0 = Instant::now();
    let train_raw = build_diffusion_dataset(&spec, 24, 1000).unwrap();
    let test_raw = build_diffusion_dataset(&spec, 8, 2000).unwrap();
    println!("datagen: {:?}", t0.elapsed());

    let stats = fit_transient_stats(&train_raw).unwrap();
    println!(
        "field std {:?} target(inc) std {:?}",
        stats.field_std.data(),
        stats.target_std.data()
    );

    let mut cfg = ModelConfig::new(Mode::Transient, 2, 1, 1, 1);
    cfg.latent = 64;
    cfg.blocks = 2;
    cfg.queries = 64;
    cfg.heads = 4;
    let stats32 = {
        let s: gto_core::encoder::NormStats<f64> = stats.clone();
        gto_core::encoder::NormStats {
            field_mean: s.field_mean.cast::<f32>(),
            field_std: s.field_std.cast::<f32>(),
            global_mean: s.global_mean.cast::<f32>(),
            global_std: s.global_std.cast::<f32>(),
            target_mean: s.target_mean.cast::<f32>(),
            target_std: s.target_std.cast::<f32>(),
        }
    };
    let mut params = ModelParams::<f32>::init(cfg, stats32, 7).unwrap();

    let to32 = |samples: &[gto_core::train::TransientSample<f64>]| {
        samples
            .iter()
            .map(|s| gto_core::train::TransientSample {
                mesh: s.mesh.clone(),
                frames: s.frames.iter().map(|f| f.cast::<f32>()).collect(),
                conds: s
                    .conds
                    .iter()
                    .map(|(g, t)| (g.iter().map(|&x| x as f32).collect(), *t as f32))
                    .collect(),
            })
            .collect::<Vec<_>>()
    };
    let train_prep = prepare_transient(to32(&train_raw), 4).unwrap();
    let val = prepare_transient(to32(&test_raw), 4).unwrap();

    let untrained5 = eval_transient_epsilon(&params, &val, 5).unwrap();
    let untrained25 = eval_transient_epsilon(&params, &val, 25).unwrap();
    println!("untrained eps +5 = {untrained5:.4}, +25 = {untrained25:.4}");

    let mut tc = TrainConfig::transient_defaults();
    tc.epochs = 40;
    tc.windows_per_sample = 2;
    tc.base_lr = 5e-3;
    tc.final_lr = 2e-4;
    tc.batch_size = 2;
    tc.seed = 3;
    let exec = Threaded::new(2);
    let t1 = Instant::now();
    let report = train_transient(&train_prep, &val, &mut params, &tc, &exec).unwrap();
    println!(
        "train {} epochs: {:?} ({:?}/epoch)",
        tc.epochs,
        t1.elapsed(),
        t1.elapsed() / tc.epochs as u32
    );
    for h in report.history.iter().step_by(3) {
        println!(
            "epoch {} loss {:.4} val_eps {:.4} lr {:.2e}",
            h.epoch, h.train_loss, h.val_epsilon, h.lr
        );
    }
    let train_eps = eval_transient_epsilon(&params, &train_prep, 5).unwrap();
    println!("final: train eps+5 {train_eps:.4} val eps+5 {:.4}", report.history.last().unwrap().val_epsilon);
    let eps25 = eval_transient_epsilon(&params, &val, 25).unwrap();
    println!("after: eps+25 {eps25:.4}");

    // Per-frame diagnostics on one validation sample.
    let prep = &val[0];
    for t in [0usize, 1, 2, 5, 10, 20] {
        let frame = gto_core::encoder::FieldFrame {
            fields: prep.sample.frames[t].clone(),
            globals: prep.sample.conds[t].0.clone(),
            time: prep.sample.conds[t].1,
        };
        let mut one = gto_core::model::step_transient(&params, &prep.sample.mesh, &frame, &prep.cache).unwrap();
        gto_core::model::bc_correct(&mut one, &prep.bc).unwrap();
        let (err, _) = gto_core::train::relative_l2_loss(&one, &prep.sample.frames[t + 1]).unwrap();
        // Relative size of the true increment at this frame.
        let diff = gto_core::tensor::sub(&prep.sample.frames[t + 1], &prep.sample.frames[t]);
        let relinc = diff.norm() / prep.sample.frames[t + 1].norm();
        println!("frame {t}: one-step rel err {err:.4}, true increment {relinc:.4}");
    }
    // Rollout error growth from frame 0.
    let initial = gto_core::encoder::FieldFrame {
        fields: prep.sample.frames[0].clone(),
        globals: prep.sample.conds[0].0.clone(),
        time: prep.sample.conds[0].1,
    };
    let conds: Vec<(Vec<f32>, f32)> = prep.sample.conds[0..10].to_vec();
    let pred = gto_core::model::rollout(&params, &prep.sample.mesh, &initial, &conds, &prep.bc, &prep.cache).unwrap();
    for (k, p) in pred.iter().enumerate() {
        let (err, _) = gto_core::train::relative_l2_loss(p, &prep.sample.frames[k + 1]).unwrap();
        println!("rollout +{}: rel err {err:.4}", k + 1);
    }
}
