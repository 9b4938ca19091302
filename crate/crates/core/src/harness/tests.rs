use super::*;
use crate::data::dataset_write;
use crate::model::{checkpoint_save, CmclModel, EmaState, ModelConfig};
use crate::trainer::METRICS_HEADER;

fn tiny() -> RunConfig {
    let mut cfg = scenarios::rotated();
    cfg.scenario.samples_per_domain = 80;
    cfg.train.outer_iters = 4;
    cfg.train.eval_every = 2;
    cfg.train.batch_size = 8;
    cfg.train.extractor_layers = vec![8, 6];
    cfg.seeds = vec![3, 4];
    cfg
}

#[test]
fn zero_iterations_write_header_only_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.train.outer_iters = 0;
    let r = cmd_train(&cfg, dir.path()).unwrap();
    assert_eq!(r.rows.len(), 2);
    let csv = std::fs::read_to_string(dir.path().join("seed-3/unseen/metrics.csv")).unwrap();
    assert_eq!(csv, format!("{METRICS_HEADER}\n"));
    assert!(dir.path().join("seed-3/unseen/final.ckpt").exists());
    assert!(!dir.path().join("seed-3/unseen/best.ckpt").exists());
    assert!(r.rows.iter().all(|row| row.selected_outer_iter.is_none()));
}

#[test]
fn rerun_is_byte_identical_and_thread_count_is_irrelevant() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    let ra = cmd_train(&cfg, a.path()).unwrap();
    cfg.jobs = 2;
    let rb = cmd_train(&cfg, b.path()).unwrap();
    assert_eq!(ra, rb);
    for seed in [3, 4] {
        for file in ["metrics.csv", "final.ckpt", "best.ckpt"] {
            let rel = format!("seed-{seed}/unseen/{file}");
            assert_eq!(
                std::fs::read(a.path().join(&rel)).unwrap(),
                std::fs::read(b.path().join(&rel)).unwrap(),
                "{rel}"
            );
        }
    }
    let loaded = RunResult::load(a.path().join("summary.json")).unwrap();
    assert_eq!(loaded, ra);
}

#[test]
fn leave_one_domain_out_holds_out_every_domain() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.protocol = Protocol::LeaveOneDomainOut;
    cfg.seeds = vec![1];
    cfg.train.outer_iters = 1;
    let r = cmd_train(&cfg, dir.path()).unwrap();
    let held: Vec<&str> = r.rows.iter().map(|row| row.held_out.as_str()).collect();
    assert_eq!(held, ["source0", "source1", "source2", "unseen"]);
    assert!(dir.path().join("seed-1/source1/metrics.csv").exists());
}

#[test]
fn prepare_run_excludes_held_out() {
    let cfg = tiny();
    let domains = generate_domains(&cfg, 9).unwrap();
    let data = prepare_run(&domains, 1, 0.25, 9).unwrap();
    assert_eq!(data.held_out.name, "source1");
    let names: Vec<&str> = data.train.iter().map(|d| d.name.as_str()).collect();
    assert_eq!(names, ["source0", "source2", "unseen"]);
    assert_eq!(data.train[0].len() + data.val[0].len(), 80);
}

#[test]
fn eval_matches_counting_loop_and_trainer_validation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let domains = generate_domains(&cfg, 3).unwrap();
    let data = prepare_run(&domains, 3, cfg.val_fraction, 3).unwrap();
    let (_, out) = run_single(&cfg.train, &data, 3).unwrap();
    let ckpt = dir.path().join("final.ckpt");
    checkpoint_save(&out.model, &out.ema, &ckpt).unwrap();

    let val_path = dir.path().join("val.cmds");
    dataset_write(&data.val[1], &val_path).unwrap();
    let report = cmd_eval(&ckpt, &val_path).unwrap();
    let last = out.evals.last().unwrap();
    assert_eq!(last.outer_iter, cfg.train.outer_iters);
    assert!((report.acc_target - last.val_acc_target[1]).abs() <= 1e-12);
    assert!((report.acc_online - last.val_acc_online[1]).abs() <= 1e-12);

    let ds = &data.val[1];
    let z = out.ema.extract_features(&ds.x).unwrap();
    let pred = out.ema.target_global.predict(&z).unwrap();
    let mut correct = 0usize;
    for (p, y) in pred.iter().zip(&ds.y) {
        if p == y {
            correct += 1;
        }
    }
    assert_eq!(report.acc_target, correct as f64 / ds.len() as f64);
    assert_eq!(report.examples, ds.len());
}

#[test]
fn zero_classifier_is_uniform_guess() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.scenario.samples_per_domain = 400;
    let ds = &generate_domains(&cfg, 0).unwrap()[0];
    let model = CmclModel::init(
        &ModelConfig {
            input_dim: 4,
            layers: vec![5],
            classes: 4,
            domains: 2,
            final_relu: true,
        },
        0,
    )
    .unwrap();
    let ema = EmaState::new(&model, 0.5).unwrap();
    let ckpt = dir.path().join("zero.ckpt");
    checkpoint_save(&model, &ema, &ckpt).unwrap();
    let data = dir.path().join("d.cmds");
    dataset_write(ds, &data).unwrap();
    let r = cmd_eval(&ckpt, &data).unwrap();
    // all scores tie, so every prediction is class 0 on balanced data
    assert_eq!(r.acc_target, 0.25);
}

#[test]
fn eval_rejects_incompatible_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let model = CmclModel::init(
        &ModelConfig {
            input_dim: 7,
            layers: vec![5],
            classes: 4,
            domains: 2,
            final_relu: true,
        },
        0,
    )
    .unwrap();
    let ema = EmaState::new(&model, 0.5).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    checkpoint_save(&model, &ema, &ckpt).unwrap();
    let paths = cmd_gen_data(&cfg, 0, dir.path()).unwrap();
    let err = cmd_eval(&ckpt, &paths[0]).unwrap_err();
    assert_eq!(err.exit_code(), crate::error::exit::CONFIG);
    assert!(err.to_string().contains("input_dim"), "{err}");
}

#[test]
fn gen_data_writes_every_domain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let paths = cmd_gen_data(&cfg, 5, dir.path()).unwrap();
    assert_eq!(paths.len(), 4);
    let domains = generate_domains(&cfg, 5).unwrap();
    for (p, d) in paths.iter().zip(&domains) {
        assert_eq!(&crate::data::dataset_read(p).unwrap(), d);
    }
}

#[test]
fn benchmark_table_shape_and_means() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let report = cmd_benchmark(&cfg, dir.path()).unwrap();
    assert_eq!(report.table_rows().len(), cfg.seeds.len() * 2);
    assert_eq!(report.erm.method, "erm");
    for r in [&report.cmcl, &report.erm] {
        let accs: Vec<f64> = r.rows.iter().map(|row| row.acc_target).collect();
        let m = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((r.aggregate.mean_acc_target - m).abs() <= 1e-12);
    }
    assert!(dir.path().join("erm/seed-4/unseen/metrics.csv").exists());
    let csv = std::fs::read_to_string(dir.path().join("erm/seed-4/unseen/metrics.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(1) == Some("A")));
    assert!(dir.path().join("benchmark.json").exists());
    assert!(report.table().contains("mean"));
}

#[test]
fn numeric_failures_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.train.main_optimizer.lr = 1e300;
    let err = cmd_train(&cfg, dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), crate::error::exit::NUMERIC, "{err}");
    assert!(err.to_string().contains("seed 3"), "{err}");
}
