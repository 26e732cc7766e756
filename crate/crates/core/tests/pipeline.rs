use altermoma::baselines::Method;
use altermoma::compact::compact;
use altermoma::config::ExperimentConfig;
use altermoma::experiment::{compare, finetune_pruned, prepare, prune};

fn small(extra: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(&format!(
        "seed = 2\n[data]\nn_train = 256\nn_val = 64\n[pretrain]\nepochs = 2\n[train]\nepochs = 2\n[finetune]\nepochs = 1\n[imp]\nrounds = 2\n[synflow]\niterations = 4\n{extra}"
    ))
    .unwrap()
}

#[test]
fn preparation_is_deterministic() {
    let cfg = small("");
    let a = prepare(&cfg).unwrap();
    let b = prepare(&cfg).unwrap();
    assert_eq!(a.model.params(), b.model.params());
    assert_eq!(a.history, b.history);
    let other = prepare(&ExperimentConfig { seed: 3, ..cfg }).unwrap();
    assert_ne!(a.model.params(), other.model.params());
}

#[test]
fn every_method_keeps_exactly_k_and_finetuning_keeps_pruned_zero() {
    let cfg = small("[prune]\nrho = 0.85\neval_batches = 2\nreactivation_batches = 4\n");
    let p = prepare(&cfg).unwrap();
    let s = &p.splits;
    for m in Method::ALL {
        let mut out = prune(&cfg, &p.model, &s.train, &s.val, m).unwrap();
        assert_eq!(out.kept, out.k, "{m}");
        assert_eq!(out.model.kept_scalars(), out.k, "{m}");
        finetune_pruned(&cfg, &mut out, &s.train, &s.val).unwrap();
        for prm in out.model.params() {
            for (v, mask) in prm.values.data().iter().zip(prm.mask.data()) {
                assert!(
                    *mask == 1.0 || *v == 0.0,
                    "{m}: pruned entry of {} moved",
                    prm.id
                );
            }
        }
    }
}

#[test]
fn structured_pruning_removes_whole_channels() {
    let cfg = small(
        "[prune]\nrho = 0.5\nstructured = true\neval_batches = 2\nreactivation_batches = 4\n",
    );
    let p = prepare(&cfg).unwrap();
    for m in [Method::AlterMoma, Method::Snip, Method::Magnitude] {
        let out = prune(&cfg, &p.model, &p.splits.train, &p.splits.val, m).unwrap();
        assert_eq!(out.kept, out.k);
        for c in out.model.channels() {
            let flags: Vec<f64> = c
                .members
                .iter()
                .map(|&(i, e)| out.model.params()[i].mask.data()[e])
                .collect();
            assert!(
                flags.iter().all(|&f| f == flags[0]),
                "{m}: channel {} partly masked",
                c.id
            );
        }
        let kept_channels: usize = compact(&out.model)
            .unwrap()
            .layers
            .iter()
            .map(|l| l.kept.len())
            .sum();
        let out_width = out.model.arch().out;
        assert_eq!(kept_channels, out.k + out_width);
    }
}

#[test]
fn comparison_rows_cover_methods_and_ratios() {
    let cfg = small("[prune]\neval_batches = 2\nreactivation_batches = 4\n");
    let p = prepare(&cfg).unwrap();
    let rows = compare(&cfg, &p, &[Method::AlterMoma, Method::Random], &[0.8, 0.9]).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows
        .iter()
        .all(|r| r.val_loss.is_finite() && r.kept == r.k && r.seed == 2));
}
