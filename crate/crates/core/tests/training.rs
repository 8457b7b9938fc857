use hyperfuse::checkpoint;
use hyperfuse::data::synth_corpus;
use hyperfuse::trainer::{train, TrainConfig};
use hyperfuse::{fuse_images, FusionOptions};
use tempfile::TempDir;

fn small(epochs: usize, max_steps: Option<usize>) -> TrainConfig {
    TrainConfig {
        epochs,
        max_steps,
        batch_size: 2,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn identical_inputs_give_identical_runs() {
    let ds = synth_corpus(4, 12, 5).unwrap();
    let cfg = small(2, None);
    let (p1, log1) = train(&ds, &cfg).unwrap();
    let (p2, log2) = train(&ds, &cfg).unwrap();
    assert_eq!(log1.to_csv(), log2.to_csv());

    let tmp = TempDir::new().unwrap();
    let (f1, f2) = (tmp.path().join("one.hfn"), tmp.path().join("two.hfn"));
    checkpoint::save(&p1, &f1).unwrap();
    checkpoint::save(&p2, &f2).unwrap();
    assert_eq!(std::fs::read(&f1).unwrap(), std::fs::read(&f2).unwrap());

    let other = TrainConfig { seed: 6, ..cfg };
    let (p3, _) = train(&ds, &other).unwrap();
    assert_ne!(p1, p3);
}

#[test]
fn trained_checkpoint_round_trips_through_a_file() {
    let ds = synth_corpus(4, 12, 2).unwrap();
    let (params, _) = train(&ds, &small(1, Some(1))).unwrap();
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("model.hfn");
    checkpoint::save(&params, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back, params);

    let pair = &ds.pairs()[0];
    let opts = FusionOptions::default();
    let a = fuse_images(&pair.infrared, &pair.visible, &params, &opts).unwrap();
    let b = fuse_images(&pair.infrared, &pair.visible, &back, &opts).unwrap();
    assert_eq!(a.pixels(), b.pixels());

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(
        checkpoint::load(&path),
        Err(hyperfuse::Error::Format(_))
    ));
}

#[test]
fn epoch_losses_settle_with_default_settings() {
    let ds = synth_corpus(4, 16, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 40,
        ..TrainConfig::default()
    };
    let (_, log) = train(&ds, &cfg).unwrap();
    assert_eq!(log.epochs.len(), 40);
    let totals: Vec<f64> = log.epochs.iter().map(|e| e.total).collect();
    for w in totals[19..].windows(2) {
        assert!(w[1] <= w[0], "{totals:?}");
    }
    assert_eq!(log.fusion_invocations, 0);
}
