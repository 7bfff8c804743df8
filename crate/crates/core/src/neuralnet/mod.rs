//! Graph-convolutional autoencoders and the coarse-to-fine transformer,
//! trained with an in-crate reverse-mode differentiator.

pub mod autoencoder;
pub mod layers;
pub mod model;
pub mod tape;
pub mod train;
pub mod transformer;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use autoencoder::{FeatureStats, FrameAutoencoder};
pub use layers::{Binder, GraphConv, ParamStore};
pub use model::{DeformModels, Hyperparameters};
pub use tape::{Tape, Tensor, Var};
pub use train::{synthesize_latents, teacher_forced_feature_mse, train_autoencoder, train_transformer, TrainConfig, WindowData};
pub use transformer::{DeformTransformer, TransformerShape};

/// Central-difference step used by [`gradient_check`].
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely rather than relatively.
pub const FD_FLOOR: f64 = 1e-6;

/// Worst relative disagreement between analytic and central-difference
/// gradients for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub name: String,
    pub checked: usize,
    pub worst: f64,
}

/// Compares `loss`'s tape gradients with central differences on up to
/// `samples` randomly chosen entries of every tensor in `store`. `loss` must
/// build the same scalar on every call.
pub fn gradient_check(
    store: &mut ParamStore,
    samples: usize,
    seed: u64,
    loss: impl Fn(&ParamStore, &mut Tape, &mut Binder) -> Var,
) -> Vec<GradientReport> {
    let analytic = {
        let mut tape = Tape::new();
        let mut p = Binder::new(store, true);
        let l = loss(store, &mut tape, &mut p);
        tape.backward(l, store.len())
    };
    let eval = |store: &ParamStore| {
        let mut tape = Tape::new();
        let mut p = Binder::new(store, false);
        let l = loss(store, &mut tape, &mut p);
        tape.value(l).data[0]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(store.len());
    for id in 0..store.len() {
        let n = store.tensors[id].len();
        let picks: Vec<usize> = if n <= samples { (0..n).collect() } else { (0..samples).map(|_| rng.gen_range(0..n)).collect() };
        let mut worst: f64 = 0.0;
        for &k in &picks {
            let a = analytic.grads[id].as_ref().map_or(0.0, |g| g.data[k]);
            let orig = store.tensors[id].data[k];
            store.tensors[id].data[k] = orig + FD_STEP;
            let up = eval(store);
            store.tensors[id].data[k] = orig - FD_STEP;
            let down = eval(store);
            store.tensors[id].data[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(rel);
        }
        reports.push(GradientReport {
            name: store.names[id].clone(),
            checked: picks.len(),
            worst,
        });
    }
    reports
}
