//! End-to-end behaviour on a small trained model: splits, training, fabrication
//! trajectories, game bookkeeping and persistence.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};

use memfab::data::{read_archive, synthetic, SyntheticSpec};
use memfab::defense::{Backend, DetectorRule, RobustWeightConfig};
use memfab::fabrication::{fabricate, fabricate_all, save_fabricated, FabricationConfig, Variant};
use memfab::games::{
    load_outcome, run_armia_game, run_mfd_game, save_outcome, score_mfa_game, EvalSet, FabricatedSet, MixtureSpec,
};
use memfab::geometry::{fd_grad_estimate_fn, grad_norm, FdConfig};
use memfab::mia::{loss_statistic, StatisticKind};
use memfab::split::make_membership_splits;
use memfab::train::{train_classifier, LrSchedule};
use memfab::{Activation, ArchSpec, Classifier, Dataset, LabeledExample, MembershipSplit, Shape, SplitConfig, TrainConfig};

struct Small {
    ds: Dataset,
    split: MembershipSplit,
    model: Classifier,
    eval: EvalSet,
    cfg: TrainConfig,
    arch: ArchSpec,
}

fn small() -> &'static Small {
    static S: OnceLock<Small> = OnceLock::new();
    S.get_or_init(|| {
        let spec = SyntheticSpec { n_examples: 1500, shape: Shape::new(1, 8, 8), seed: 4, ..Default::default() };
        let ds = synthetic(&spec).unwrap();
        let split = make_membership_splits(&ds, &SplitConfig { n_train: 500, n_eval: 250, n_shadow: 4, seed: 2 }).unwrap();
        let arch = ArchSpec::Mlp { hidden: vec![64], activation: Activation::Tanh };
        let cfg = TrainConfig {
            epochs: 25,
            batch_size: 32,
            learning_rate: 0.05,
            augment: false,
            lr_schedule: LrSchedule::Cosine,
            ..Default::default()
        };
        let train = ds.select(&split.train_members).unwrap();
        let model = train_classifier(&train, &ds, &arch, &cfg).unwrap().model;
        let eval = EvalSet::from_split(&ds, &split).unwrap();
        Small { ds, split, model, eval, cfg, arch }
    })
}

#[test]
fn splits_are_disjoint() {
    let s = small();
    s.split.validate().unwrap();
    for seed in 0..5 {
        make_membership_splits(&s.ds, &SplitConfig { n_train: 400, n_eval: 200, n_shadow: 3, seed }).unwrap().validate().unwrap();
    }
}

#[test]
fn training_is_deterministic() {
    let s = small();
    let train = s.ds.select(&s.split.train_members).unwrap();
    let cfg = TrainConfig { epochs: 2, ..s.cfg.clone() };
    let a = train_classifier(&train, &s.ds, &s.arch, &cfg).unwrap().model;
    let b = train_classifier(&train, &s.ds, &s.arch, &cfg).unwrap().model;
    for e in &s.eval.members {
        assert_eq!(loss_statistic(&a, e).unwrap(), loss_statistic(&b, e).unwrap());
    }
}

#[test]
fn members_have_higher_mean_statistic() {
    let s = small();
    let mean = |v: &[LabeledExample]| v.iter().map(|e| loss_statistic(&s.model, e).unwrap()).sum::<f64>() / v.len() as f64;
    assert!(mean(&s.eval.members) > mean(&s.eval.nonmembers));
}

#[test]
fn input_gradients_match_central_differences() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
    let shape = Shape::new(1, 3, 3);
    for trial in 0..100 {
        let arch = if trial % 2 == 0 {
            ArchSpec::Mlp { hidden: vec![5], activation: Activation::Tanh }
        } else {
            ArchSpec::Cnn { channels: vec![2], hidden: 4, activation: Activation::Tanh }
        };
        let m = Classifier::new(arch, shape, 3, trial).unwrap();
        let x: Vec<f64> = (0..9).map(|_| rng.gen()).collect();
        let e = LabeledExample::new("p", x.clone(), rng.gen_range(0..3));
        let g = m.input_gradient(&e).unwrap();
        for i in 0..9 {
            let h = 1e-5;
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let fd = (m.sample_loss(&e.with_pixels(xp)).unwrap() - m.sample_loss(&e.with_pixels(xm)).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * g[i].abs().max(1e-3), "trial {trial} coord {i}: {fd} vs {}", g[i]);
        }
    }
}

#[test]
fn best_iterate_dominates_trajectory() {
    let s = small();
    for v in [Variant::Mfa, Variant::IFgsm, Variant::IBim, Variant::IPgd, Variant::ICw, Variant::IApgd] {
        let cfg = FabricationConfig::mfa(4.0 / 255.0).with_variant(v);
        for e in &s.eval.nonmembers[..20] {
            let r = fabricate(&s.model, e, &cfg).unwrap();
            let lx = s.model.sample_loss(e).unwrap();
            let lb = s.model.sample_loss(&e.with_pixels(r.x_bar.clone())).unwrap();
            let min = r.loss_trajectory.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(lb <= min + 1e-12 && lb <= lx + 1e-12, "{v}: {lb} vs min {min}, start {lx}");
        }
    }
}

#[test]
fn fabrication_is_deterministic() {
    let s = small();
    for v in [Variant::Mfa, Variant::IPgd, Variant::IApgd] {
        let cfg = FabricationConfig::mfa(4.0 / 255.0).with_variant(v);
        let e = &s.eval.nonmembers[3];
        assert_eq!(fabricate(&s.model, e, &cfg).unwrap().x_bar, fabricate(&s.model, e, &cfg).unwrap().x_bar);
    }
    let a = FabricationConfig { seed: 1, ..FabricationConfig::mfa(4.0 / 255.0).with_variant(Variant::IPgd) };
    let b = FabricationConfig { seed: 2, ..a.clone() };
    let e = &s.eval.nonmembers[3];
    assert_ne!(fabricate(&s.model, e, &a).unwrap().x_bar, fabricate(&s.model, e, &b).unwrap().x_bar);
}

#[test]
fn confidence_ascends_and_gradient_norm_collapses() {
    let s = small();
    let cfg = FabricationConfig::mfa(4.0 / 255.0);
    let results = fabricate_all(&s.model, &s.eval.nonmembers, &cfg).unwrap();
    assert!(results.len() >= 200);
    let up = s
        .eval
        .nonmembers
        .iter()
        .zip(&results)
        .filter(|(e, r)| s.model.confidence(&e.with_pixels(r.x_bar.clone())).unwrap() >= s.model.confidence(e).unwrap())
        .count();
    assert!(up as f64 >= 0.95 * results.len() as f64);
    let n = results.iter().map(|r| r.gradnorm_trajectory.len()).min().unwrap();
    let mean = |k: usize| results.iter().map(|r| r.gradnorm_trajectory[k]).sum::<f64>() / results.len() as f64;
    let q = n / 4;
    let avg = |r: std::ops::Range<usize>| r.clone().map(mean).sum::<f64>() / r.len() as f64;
    let (first, last) = (avg(0..q), avg(n - q..n));
    assert!(last <= first, "first quartile {first}, last quartile {last}");
    assert!(mean(n - 1) < mean(0));
}

#[test]
fn fd_norm_converges_on_smooth_field() {
    let d = 32;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let a: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let f = |x: &[f64]| -> memfab::Result<f64> {
        Ok(x.iter().zip(&a).map(|(xi, ai)| ai * xi + 0.5 * xi * xi).sum::<f64>().sin())
    };
    let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let s: f64 = x.iter().zip(&a).map(|(xi, ai)| ai * xi + 0.5 * xi * xi).sum();
    let truth = s.cos().abs() * x.iter().zip(&a).map(|(xi, ai)| (ai + xi).powi(2)).sum::<f64>().sqrt();
    let mut errors = Vec::new();
    for n in [16, 64, 256, 1024] {
        let mut e: Vec<f64> = (0..21)
            .map(|seed| {
                let cfg = FdConfig { n_directions: n, h: 1e-4, seed };
                let (g, _) = fd_grad_estimate_fn(f, &x, &cfg, 0).unwrap();
                // Unit directions shrink the expectation by 1/d.
                let norm = d as f64 * g.iter().map(|v| v * v).sum::<f64>().sqrt();
                (norm - truth).abs()
            })
            .collect();
        e.sort_by(f64::total_cmp);
        errors.push(e[10]);
    }
    assert!(errors.windows(2).all(|w| w[1] < w[0]), "{errors:?}");
}

#[test]
fn games_keep_labels_consistent_and_reproduce() {
    let s = small();
    let fab = FabricationConfig::mfa(4.0 / 255.0);
    let run = || {
        run_armia_game(
            &s.model,
            &s.eval,
            StatisticKind::Loss,
            &fab,
            &RobustWeightConfig::default(),
            &MixtureSpec::default(),
            None,
            5,
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.records, b.records);
    assert!(a.records.iter().all(|r| !(r.fabricated && r.member)));
    let n = a.records.len() as f64;
    let m = a.records.iter().filter(|r| r.member).count() as f64;
    let f = a.records.iter().filter(|r| r.fabricated).count() as f64;
    assert!((m - 0.5 * n).abs() <= 1.0 && (f - 0.25 * n).abs() <= 1.0);

    let d = run_mfd_game(&s.model, &s.eval, &fab, &DetectorRule { tau_prime: 0.05, backend: Backend::Exact }, &FdConfig::default())
        .unwrap();
    assert!(d.records.iter().all(|r| !(r.fabricated && r.member)));
    for r in &d.records {
        assert_eq!(r.detected_fabricated, Some(r.grad_norm.unwrap() <= 0.05));
    }
}

#[test]
fn statistics_are_computed_on_persisted_perturbed_inputs() {
    let s = small();
    let dir = tempfile::tempdir().unwrap();
    let cfg = FabricationConfig::mfa(4.0 / 255.0);
    let set = FabricatedSet::generate(&s.model, &s.eval.nonmembers, &cfg).unwrap();
    let (archive, manifest) = (dir.path().join("fab.bin"), dir.path().join("fab.csv"));
    save_fabricated(&archive, &manifest, s.ds.shape, s.ds.n_classes, &s.eval.nonmembers, &set.results, &cfg).unwrap();
    let (_, _, stored) = read_archive(&archive).unwrap();

    let outcome = score_mfa_game(&s.model, &s.eval, StatisticKind::Loss, &set, None).unwrap();
    let (csv, json) = (dir.path().join("records.csv"), dir.path().join("manifest.json"));
    save_outcome(&outcome, &s.model, 0, &csv, &json).unwrap();
    let (loaded, _) = load_outcome(&csv, &json).unwrap();
    assert_eq!(loaded.records, outcome.records);

    let k = rand_chacha::ChaCha8Rng::seed_from_u64(1).gen_range(0..stored.len());
    let record = loaded.records.iter().find(|r| r.sample_id == stored[k].id && r.fabricated).unwrap();
    assert_eq!(record.statistic, loss_statistic(&s.model, &stored[k]).unwrap());
    assert_ne!(record.statistic, loss_statistic(&s.model, &s.eval.nonmembers[k]).unwrap());
    assert!(record.grad_norm.unwrap() == grad_norm(&s.model, &stored[k]).unwrap());
}
