//! End-to-end gradient checks: backbone, skew parameters and classifier
//! against central finite differences of the full training loss.

use oca_core::linalg::Matrix;
use oca_core::losses::mode_loss;
use oca_core::nn::{backward, Backbone, Classifier, OrthoLayer};
use oca_core::{LossSpec, Mode, Prototypes};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D_OLD: usize = 4;
const D_EXTRA: usize = 2;
const CLASSES: usize = 3;

#[derive(Clone)]
struct Model {
    backbone: Backbone,
    ortho: Option<OrthoLayer>,
    classifier: Classifier,
}

impl Model {
    fn param_count(&self) -> usize {
        self.backbone.param_count()
            + self.ortho.as_ref().map_or(0, |o| o.params().values().len())
            + self.classifier.weight().as_slice().len()
    }

    fn nudged(&self, mut k: usize, delta: f64) -> Model {
        let mut m = self.clone();
        for layer in m.backbone.layers_mut() {
            let n = layer.weight.as_slice().len();
            if k < n {
                layer.weight.as_mut_slice()[k] += delta;
                return m;
            }
            k -= n;
            if k < layer.bias.len() {
                layer.bias[k] += delta;
                return m;
            }
            k -= layer.bias.len();
        }
        if let Some(o) = m.ortho.as_mut() {
            let n = o.params().values().len();
            if k < n {
                o.params_mut()[k] += delta;
                o.refresh().unwrap();
                return m;
            }
            k -= n;
        }
        m.classifier.weight_mut().as_mut_slice()[k] += delta;
        m
    }
}

fn loss(m: &Model, x: &Matrix, labels: &[usize], protos: &Prototypes, spec: &LossSpec) -> f64 {
    let h = m.backbone.embed(x).unwrap();
    mode_loss(
        &h,
        m.ortho.as_ref(),
        labels,
        &m.classifier,
        Some(protos),
        spec,
    )
    .unwrap()
    .breakdown
    .total
}

fn check_mode(mode: Mode, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let emb = if mode.is_oca() {
        D_OLD + D_EXTRA
    } else {
        D_OLD
    };
    let model = Model {
        backbone: Backbone::init_with(&[5, 8, emb], &mut rng).unwrap(),
        ortho: mode
            .uses_ortho()
            .then(|| OrthoLayer::random(emb, 0.5, &mut rng).unwrap()),
        classifier: Classifier::random(CLASSES, emb, &mut rng).unwrap(),
    };
    assert!(model.param_count() <= 200, "{}", model.param_count());
    let x = Matrix::new(4, 5, (0..20).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap();
    let labels = [0, 1, 2, 1];
    let protos = Prototypes::from_matrix(
        Matrix::new(
            CLASSES,
            D_OLD,
            (0..CLASSES * D_OLD)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap(),
    )
    .unwrap();
    let spec = LossSpec::new(mode, 10.0, 5.0, 1.0).unwrap();

    let (_, cache) = model.backbone.forward(&x).unwrap();
    let (_, grads) = backward(
        &model.backbone,
        &cache,
        model.ortho.as_ref(),
        &model.classifier,
        Some(&protos),
        &labels,
        &spec,
        1.0,
    )
    .unwrap();
    let analytic: Vec<f64> = grads.slices().concat();
    assert_eq!(analytic.len(), model.param_count());

    let h = 1e-6;
    let numeric: Vec<f64> = (0..analytic.len())
        .map(|k| {
            let up = loss(&model.nudged(k, h), &x, &labels, &protos, &spec);
            let down = loss(&model.nudged(k, -h), &x, &labels, &protos, &spec);
            (up - down) / (2.0 * h)
        })
        .collect();
    let diff = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    assert!(scale > 0.0);
    assert!(
        diff / scale <= 1e-4,
        "mode {mode}: relative error {}",
        diff / scale
    );
}

#[test]
fn every_mode_matches_finite_differences() {
    for mode in Mode::ALL {
        for seed in 0..3 {
            check_mode(mode, seed);
        }
    }
}

#[test]
fn ortho_gradient_is_nonzero_and_checked() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let emb = D_OLD + D_EXTRA;
    let backbone = Backbone::init_with(&[5, 8, emb], &mut rng).unwrap();
    let ortho = OrthoLayer::random(emb, 0.5, &mut rng).unwrap();
    let classifier = Classifier::random(CLASSES, emb, &mut rng).unwrap();
    let x = Matrix::new(2, 5, (0..10).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let protos = Prototypes::from_matrix(
        Matrix::new(
            CLASSES,
            D_OLD,
            (0..CLASSES * D_OLD)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap(),
    )
    .unwrap();
    let (_, cache) = backbone.forward(&x).unwrap();
    let spec = LossSpec::new(Mode::Oca, 10.0, 5.0, 0.0).unwrap();
    let (_, g) = backward(
        &backbone,
        &cache,
        Some(&ortho),
        &classifier,
        Some(&protos),
        &[0, 2],
        &spec,
        1.0,
    )
    .unwrap();
    let skew = g.ortho.expect("oca trains the orthogonal layer");
    assert!(skew.iter().any(|v| v.abs() > 1e-8));
}
