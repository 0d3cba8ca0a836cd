use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use dtinet::mlp::init_params;
use dtinet::quality::evaluate;
use dtinet::trainer::{
    assign_blocks, build_dataset, dataset_loss, infer, infer_with, read_checkpoint, train, write_checkpoint, DataConfig, Mode, NormalizationSpec, PreparedData,
    Split, SplitSpec, TrainConfig, TrainOutcome, TrainStatus,
};
use dtinet::{Dims, Metric};

fn data_with(dims: [usize; 3], preset: &str, block_size: usize, noise_sigma: f64) -> PreparedData {
    let cfg = DataConfig {
        dims,
        preset: preset.into(),
        full_directions: 30,
        subsample_restarts: 2,
        noise_sigma,
        split: SplitSpec {
            block_size,
            ..SplitSpec::default()
        },
        ..DataConfig::default()
    };
    build_dataset(&cfg, 5, 3, 1, NormalizationSpec::default()).unwrap()
}

fn small_data(noise_sigma: f64) -> PreparedData {
    data_with([10, 10, 10], "mixed", 5, noise_sigma)
}

fn config(mode: Mode, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        hidden: vec![32, 32],
        batch_size: 16,
        mode,
        ..TrainConfig::default()
    }
}

fn run(cfg: &TrainConfig, data: &PreparedData) -> TrainOutcome {
    train(cfg, data.patches(Split::Train), data.patches(Split::Val)).unwrap()
}

fn same_params(a: &TrainOutcome, b: &TrainOutcome) -> bool {
    a.params.tensors().flatten().zip(b.params.tensors().flatten()).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[test]
fn mode_a_descends_on_noiseless_data() {
    let data = data_with([16, 16, 16], "mixed", 4, 0.0);
    let out = run(&config(Mode::Plain, 200), &data);
    let first = out.history[0].val.unwrap().data_term;
    let last = out.history.last().unwrap().val.unwrap().data_term;
    assert!(last < 0.1 * first, "epoch-0 {first}, final {last}");
}

#[test]
fn mode_b_at_zero_lambda_matches_mode_a() {
    let data = small_data(0.025);
    let a = run(&config(Mode::Plain, 6), &data);
    let b = run(
        &TrainConfig {
            fixed_lambda: Some(0.0),
            ..config(Mode::SvdRegFixed, 6)
        },
        &data,
    );
    assert!(same_params(&a, &b));
    for (x, y) in a.history.iter().zip(&b.history) {
        assert_eq!(x.train.map(|l| l.total.to_bits()), y.train.map(|l| l.total.to_bits()));
        assert_eq!(x.val.map(|l| l.total.to_bits()), y.val.map(|l| l.total.to_bits()));
    }
}

#[test]
fn mode_c_with_zero_kappa_matches_mode_b() {
    let data = small_data(0.025);
    let b = run(
        &TrainConfig {
            fixed_lambda: Some(0.1),
            ..config(Mode::SvdRegFixed, 6)
        },
        &data,
    );
    let mut cc = config(Mode::SvdRegNala, 6);
    cc.nala.kappa = 0.0;
    cc.nala.lambda0 = 0.1;
    let c = run(&cc, &data);
    assert!(same_params(&b, &c));
    assert!(c.history.iter().all(|r| r.lambda == 0.1));
    for (x, y) in b.history.iter().zip(&c.history) {
        assert_eq!(x.val.map(|l| l.total.to_bits()), y.val.map(|l| l.total.to_bits()));
    }
}

#[test]
fn training_is_reproducible_across_thread_counts() {
    let data = small_data(0.025);
    let cfg = config(Mode::SvdRegNala, 4);
    let pool = |n| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
    let a = pool(1).install(|| run(&cfg, &data));
    let b = pool(1).install(|| run(&cfg, &data));
    let c = pool(3).install(|| run(&cfg, &data));
    assert_eq!(a.history_jsonl(), b.history_jsonl());
    assert_eq!(a.history_jsonl(), c.history_jsonl());
    assert!(same_params(&a, &c));
}

#[test]
fn single_patch_is_memorized() {
    let data = small_data(0.0);
    let patch = data.patches(Split::Train)[0].clone();
    let set = vec![patch];
    let cfg = TrainConfig {
        epochs: 1500,
        hidden: vec![64],
        batch_size: 1,
        ..TrainConfig::default()
    };
    let out = train(&cfg, &set, &set).unwrap();
    let loss = dataset_loss(&out.params, &set, 0.0).unwrap();
    assert!(loss.data_term <= 1e-4, "data term {}", loss.data_term);
}

#[test]
fn lambda_derivative_at_frozen_weights_is_regularizer() {
    let data = small_data(0.025);
    let cfg = config(Mode::SvdRegFixed, 1);
    let params = init_params(&cfg.arch(data.input.n_dirs()), 3).unwrap();
    let val = data.patches(Split::Val);
    for lambda in [0.0, 0.1, 2.0] {
        let h = 1e-3;
        let lo = dataset_loss(&params, val, lambda).unwrap();
        let hi = dataset_loss(&params, val, lambda + h).unwrap();
        let fd = (hi.total - lo.total) / h;
        assert!((fd - lo.reg_term).abs() <= 1e-9 * lo.reg_term.max(1.0), "{fd} vs {}", lo.reg_term);
    }
}

#[test]
fn divergence_keeps_finite_parameters() {
    let data = small_data(0.025);
    let cfg = TrainConfig {
        learning_rate: 1e300,
        ..config(Mode::Plain, 5)
    };
    let out = run(&cfg, &data);
    assert!(matches!(out.status, TrainStatus::Diverged { .. }));
    assert!(out.params.is_finite());
}

#[test]
fn inference_respects_mask_and_checkpoint_round_trip() {
    let data = small_data(0.025);
    let cfg = config(Mode::Plain, 3);
    let out = run(&cfg, &data);
    let maps = infer_with(&out.params, cfg.patch_size, &cfg.normalization, &data.input).unwrap();
    for m in Metric::ALL {
        for (v, &inside) in maps.get(m).iter().zip(data.input.mask()) {
            if !inside {
                assert_eq!(*v, 0.0);
            }
        }
    }
    assert!(maps.fa.iter().all(|f| (0.0..=1.0).contains(f)));

    let dir = tempfile::tempdir().unwrap();
    write_checkpoint(&out.checkpoint(&cfg, data.input.n_dirs()), dir.path().join("m")).unwrap();
    let ckpt = read_checkpoint(dir.path().join("m")).unwrap();
    let from_file = infer(&ckpt, &data.input).unwrap();
    for m in Metric::ALL {
        let scale = cfg.normalization.scales()[m.channel()];
        for (a, b) in maps.get(m).iter().zip(from_file.get(m)) {
            assert!((a - b).abs() <= 1e-5 * scale);
        }
    }
}

#[test]
fn split_membership_is_seed_determined() {
    let dims = Dims::cube(12);
    let spec = SplitSpec::default();
    assert_eq!(assign_blocks(dims, &spec).unwrap(), assign_blocks(dims, &spec).unwrap());
    let other = SplitSpec { seed: 4, ..spec };
    assert_ne!(assign_blocks(dims, &spec).unwrap(), assign_blocks(dims, &other).unwrap());
}

#[test]
fn psnr_decreases_with_prediction_noise() {
    let data = data_with([12, 12, 12], "mixed", 4, 0.0);
    let gt = data.normalization.normalize(&data.gt);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut last = [f64::INFINITY; 3];
    for sigma in [0.01, 0.02, 0.05] {
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut pred = gt.clone();
        for m in Metric::ALL {
            pred.get_mut(m).iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        }
        let report = evaluate(&pred, &gt, &gt.mask).unwrap();
        for m in Metric::ALL {
            let p = report.scores(m).psnr.unwrap();
            assert!(p < last[m.channel()], "{m:?} at sigma {sigma}");
            last[m.channel()] = p;
        }
    }
}
