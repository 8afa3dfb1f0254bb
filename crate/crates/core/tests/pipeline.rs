//! End-to-end use of the public API: files in, trained model out, model back in.

use dbn_core::checkpoint::{decode, encode, load_checkpoint, save_checkpoint, Stored};
use dbn_core::data::{load_idx, split, write_idx, RawDataset};
use dbn_core::strategies::{
    pretrain_reference, train, BoxConstraint, References, Splits, StrategyId,
};
use dbn_core::{DbnParams, Hyper, Matrix, RngStream, RunHistory};
use proptest::prelude::*;

/// 3×3 "images" of a horizontal (class 0) or vertical (class 1) bar.
fn bars(n: usize) -> RawDataset {
    let mut rng = RngStream::new(5, 0);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..n {
        let y = i % 2;
        let line = rng.below(3);
        let x = (0..9)
            .map(|p| {
                let on = if y == 0 { p / 3 == line } else { p % 3 == line };
                if on { 1.0 } else { f64::from(rng.below(8) as u8) / 255.0 }
            })
            .collect();
        xs.push(x);
        ys.push(y);
    }
    RawDataset::new(Matrix::from_rows(&xs).unwrap(), ys, 2).unwrap()
}

#[test]
fn idx_files_to_checkpoint_and_back() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img.gz"), dir.path().join("lab.gz"));
    let raw = bars(120);
    write_idx(&raw, 3, 3, &img, &lab).unwrap();
    let loaded = load_idx(&img, &lab).unwrap();
    assert_eq!(loaded.features(), raw.features());

    let parts = split(&loaded, [0.6, 0.2, 0.2], &RngStream::new(1, 1)).unwrap();
    let splits = Splits {
        train: parts.train.to_labeled().unwrap(),
        valid: parts.valid.to_labeled().unwrap(),
        test: parts.test.to_labeled().unwrap(),
    };
    let hyper = Hyper {
        pretrain_epochs: 5,
        finetune_epochs: 40,
        batch_size: 6,
        ..Hyper::default()
    };
    let arch = [9, 6];
    let rng = RngStream::new(3, 0);
    let refs = References {
        pretrained: Some(pretrain_reference(&arch, &splits.train, &hyper, &rng).unwrap()),
        two_phase: None,
    };
    let out = train(StrategyId::DbnFfn, &arch, &splits, &hyper, &rng, &refs).unwrap();
    assert!(out.best.valid_error.unwrap() <= 0.1, "valid error {:?}", out.best.valid_error);

    let path = dir.path().join("m.ckpt");
    save_checkpoint(&out.model, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, out.model);
    assert_eq!(
        back.network.error_rate(&splits.test).unwrap(),
        out.model.network.error_rate(&splits.test).unwrap()
    );
}

fn arch_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 2..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stack_containers_round_trip(arch in arch_strategy(), seed in any::<u64>()) {
        let dbn = DbnParams::init(&arch, &RngStream::new(seed, 0)).unwrap();
        let stored = Stored {
            dbn,
            head: None,
            strategy: None,
            hyper: Hyper::default(),
            history: RunHistory::default(),
        };
        let bytes = encode(&stored).unwrap();
        prop_assert_eq!(decode(&bytes).unwrap(), stored);
        // Any strict prefix is rejected.
        let cut = (seed as usize) % bytes.len();
        prop_assert!(decode(&bytes[..cut]).is_err());
    }

    #[test]
    fn projection_lands_in_the_box_and_is_idempotent(
        arch in arch_strategy(),
        seed in any::<u64>(),
        radius in 0.0f64..0.5,
        scale in 0.0f64..10.0,
    ) {
        let reference = DbnParams::init(&arch, &RngStream::new(seed, 0)).unwrap();
        let bx = BoxConstraint::around(&reference, radius).unwrap();
        let mut rng = RngStream::new(seed, 1);
        let mut theta: Vec<f64> = reference.flatten().iter().map(|v| v + scale * rng.standard_normal()).collect();
        bx.project_in_place(&mut theta).unwrap();
        for (t, r) in theta.iter().zip(bx.reference()) {
            prop_assert!((t - r).abs() <= radius);
        }
        let once = theta.clone();
        bx.project_in_place(&mut theta).unwrap();
        prop_assert_eq!(once, theta);
    }
}
