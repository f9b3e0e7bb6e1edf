use oca_core::datagen::{gen_synthetic, restrict_classes, Dataset, SynthParams};
use oca_core::linalg::SkewParams;
use oca_core::nn::checkpoint::{read_checkpoint, write_checkpoint};
use oca_core::nn::{Classifier, OrthoLayer};
use oca_core::trainer::{
    compute_prototypes, extract_features, train_new, train_new_from, train_old,
};
use oca_core::{Mode, Part, TrainConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn data(num_classes: usize, separation: f64, noise: f64) -> (Dataset, Dataset) {
    let params = SynthParams {
        num_classes,
        per_class_train: 40,
        per_class_eval: 10,
        input_dim: 8,
        class_separation: separation,
        noise_sigma: noise,
    };
    gen_synthetic(&params, 5).unwrap()
}

fn small_config(mode: Mode, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        lr: 5e-3,
        d_old: 4,
        d_extra: 2,
        mode,
        hidden_dims: vec![16],
        ..TrainConfig::default()
    }
}

fn train_accuracy(bundle: &oca_core::ModelBundle, ds: &Dataset) -> f64 {
    let h = bundle.backbone.embed(&ds.inputs()).unwrap();
    let logits = h.matmul_nt(bundle.classifier.weight()).unwrap();
    let hits = logits
        .row_iter()
        .zip(ds.labels())
        .filter(|(row, y)| {
            let best = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap();
            best == *y
        })
        .count();
    hits as f64 / ds.len() as f64
}

#[test]
fn separable_two_class_problem_is_learned() {
    let (train, _) = data(2, 3.0, 0.2);
    let model = train_old(&small_config(Mode::Independent, 50), &train).unwrap();
    let acc = train_accuracy(&model, &train);
    assert!(acc >= 0.99, "train accuracy {acc}");
}

#[test]
fn losses_are_finite_and_fall() {
    let (train, _) = data(4, 1.5, 0.3);
    let old = train_old(
        &small_config(Mode::Independent, 10),
        &restrict_classes(&train, 2).unwrap(),
    )
    .unwrap();
    let protos = compute_prototypes(&old, &train).unwrap();
    for mode in Mode::ALL {
        let m = train_new(&small_config(mode, 10), &train, &protos).unwrap();
        assert_eq!(m.history.len(), 10);
        assert!(m.history.iter().all(|r| r.loss.total.is_finite()));
        let (first, last) = (m.history[0].loss.total, m.final_loss().unwrap().total);
        assert!(last < first, "{mode}: {first} -> {last}");
    }
}

#[test]
fn same_seed_gives_identical_bytes() {
    let (train, _) = data(3, 1.5, 0.3);
    let old = train_old(
        &small_config(Mode::Independent, 3),
        &restrict_classes(&train, 2).unwrap(),
    )
    .unwrap();
    let protos = compute_prototypes(&old, &train).unwrap();
    let bytes = || {
        let m = train_new(&small_config(Mode::Oca, 3), &train, &protos).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        buf
    };
    let a = bytes();
    assert_eq!(a, bytes());
    let back = read_checkpoint(&a[..]).unwrap();
    let mut again = Vec::new();
    write_checkpoint(&back, &mut again).unwrap();
    assert_eq!(a, again);
}

#[test]
fn sample_order_on_input_does_not_matter() {
    let (train, _) = data(3, 1.5, 0.3);
    let mut shuffled = train.samples().to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let shuffled = Dataset::new(
        train.input_dim(),
        train.num_classes(),
        train.split(),
        shuffled,
    )
    .unwrap();
    let cfg = small_config(Mode::Independent, 3);
    assert_eq!(
        train_old(&cfg, &train).unwrap(),
        train_old(&cfg, &shuffled).unwrap()
    );
}

#[test]
fn orthogonal_layer_stays_orthogonal_every_epoch() {
    let (train, _) = data(3, 1.5, 0.3);
    let old = train_old(
        &small_config(Mode::Independent, 3),
        &restrict_classes(&train, 2).unwrap(),
    )
    .unwrap();
    let protos = compute_prototypes(&old, &train).unwrap();
    for mode in [Mode::Oca, Mode::OcaNoCos] {
        let m = train_new(&small_config(mode, 15), &train, &protos).unwrap();
        for r in &m.history {
            let defect = r.ortho_defect.expect("ortho modes report a defect");
            assert!(defect <= 1e-8, "{mode} epoch {}: {defect}", r.epoch);
        }
    }
    let plain = train_new(&small_config(Mode::OcaNoOrtho, 2), &train, &protos).unwrap();
    assert!(plain.ortho.is_none() && plain.history.iter().all(|r| r.ortho_defect.is_none()));
}

#[test]
fn inference_ignores_ortho_and_classifier() {
    let (train, eval) = data(3, 1.5, 0.3);
    let old = train_old(
        &small_config(Mode::Independent, 2),
        &restrict_classes(&train, 2).unwrap(),
    )
    .unwrap();
    let protos = compute_prototypes(&old, &train).unwrap();
    let m = train_new(&small_config(Mode::Oca, 2), &train, &protos).unwrap();
    let before = extract_features(&m, &eval, Part::Full).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut scrambled = m.clone();
    scrambled.ortho = Some(OrthoLayer::new(SkewParams::random(6, 3.0, &mut rng)).unwrap());
    scrambled.classifier = Classifier::random(3, 6, &mut rng).unwrap();
    assert_eq!(
        before,
        extract_features(&scrambled, &eval, Part::Full).unwrap()
    );
}

#[test]
fn bct_part_is_the_leading_slice_of_full() {
    let (train, eval) = data(3, 1.5, 0.3);
    let old = train_old(
        &small_config(Mode::Independent, 2),
        &restrict_classes(&train, 2).unwrap(),
    )
    .unwrap();
    let protos = compute_prototypes(&old, &train).unwrap();
    let m = train_new(&small_config(Mode::Oca, 2), &train, &protos).unwrap();
    let full = extract_features(&m, &eval, Part::Full).unwrap();
    let bct = extract_features(&m, &eval, Part::Bct).unwrap();
    assert_eq!((full.dim(), bct.dim()), (6, 4));
    assert_eq!(full.slice(4).unwrap(), bct);
    assert!(extract_features(&old, &eval, Part::Full).is_err());
}

#[test]
fn prototypes_cover_every_new_class() {
    let (train, _) = data(5, 1.5, 0.3);
    let old = train_old(
        &small_config(Mode::Independent, 2),
        &restrict_classes(&train, 3).unwrap(),
    )
    .unwrap();
    let protos = compute_prototypes(&old, &train).unwrap();
    assert_eq!(protos.num_classes(), 5);
    assert_eq!(protos.dim(), 4);
    assert_eq!(protos.counts(), &[40; 5]);
}

#[test]
fn warm_start_copies_the_old_backbone() {
    let (train, _) = data(3, 1.5, 0.3);
    let old = train_old(
        &small_config(Mode::Independent, 2),
        &restrict_classes(&train, 2).unwrap(),
    )
    .unwrap();
    let protos = compute_prototypes(&old, &train).unwrap();
    let cfg = TrainConfig {
        warm_start: true,
        // steps far below one ulp of the weights
        lr: 1e-30,
        ..small_config(Mode::Oca, 1)
    };
    assert!(train_new_from(&cfg, &train, Some(&protos), None).is_err());
    let m = train_new_from(&cfg, &train, Some(&protos), Some(&old.backbone)).unwrap();
    let (nl, ol) = (m.backbone.layers(), old.backbone.layers());
    assert_eq!(nl[0], ol[0]);
    assert_eq!(nl[1].weight.block(0, 0, 4, 16), ol[1].weight);
}
