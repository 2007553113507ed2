//! A 2-D generative adversarial network fit by a single trial.
//!
//! The forward pass combines both networks and stores every intermediate
//! in state; the loss callback assembles the adversarial objective from
//! those entries and adds it to the zero base loss. One optimizer spans
//! the union of generator and discriminator parameters; the detach and
//! mid-forward zero_grad are what keep the two gradient paths apart.

use std::sync::LazyLock;

use fitcore::metrics::StateFloat;
use fitcore::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::models::{Activation, Mlp};

pub static GEN_IMGS: LazyLock<StateKey> = LazyLock::new(|| state_key("gen_imgs"));
pub static DISC_GEN: LazyLock<StateKey> = LazyLock::new(|| state_key("disc_gen"));
pub static DISC_GEN_DET: LazyLock<StateKey> = LazyLock::new(|| state_key("disc_gen_det"));
pub static DISC_REAL: LazyLock<StateKey> = LazyLock::new(|| state_key("disc_real"));
pub static G_LOSS: LazyLock<StateKey> = LazyLock::new(|| state_key("g_loss"));
pub static D_LOSS: LazyLock<StateKey> = LazyLock::new(|| state_key("d_loss"));

/// Hidden width of both networks.
pub const HIDDEN: usize = 32;

/// Steps of the combined forward pass, recorded for wiring checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardStep {
    Generate,
    DiscriminateGenerated,
    ZeroGradDiscriminator,
    DiscriminateDetached,
    DiscriminateReal,
}

/// Generator (noise to 2-D sample) and discriminator (2-D sample to
/// probability), fit together.
pub struct GanModel {
    generator: Mlp,
    discriminator: Mlp,
    latent_dim: usize,
    rng: ChaCha8Rng,
    last_trace: Vec<ForwardStep>,
}

impl GanModel {
    pub fn new(latent_dim: usize, init_rng: &mut ChaCha8Rng, noise_rng: ChaCha8Rng) -> GanModel {
        let generator = Mlp::new(
            "gen",
            &[latent_dim, HIDDEN, HIDDEN, 2],
            Activation::Tanh,
            Activation::Linear,
            init_rng,
        );
        let discriminator = Mlp::new(
            "disc",
            &[2, HIDDEN, HIDDEN, 1],
            Activation::Tanh,
            Activation::Sigmoid,
            init_rng,
        );
        GanModel {
            generator,
            discriminator,
            latent_dim,
            rng: noise_rng,
            last_trace: Vec::new(),
        }
    }

    fn noise(&mut self, rows: usize) -> Tensor {
        let z: Vec<f64> = (0..rows * self.latent_dim)
            .map(|_| self.rng.sample(StandardNormal))
            .collect();
        Tensor::from_vec(z, [rows, self.latent_dim], false).unwrap()
    }

    /// Draws `n` generator samples with a caller-provided noise source,
    /// leaving the training noise stream untouched.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
        let z: Vec<f64> = (0..n * self.latent_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let z = Tensor::from_vec(z, [n, self.latent_dim], false).unwrap();
        let out = self.generator.forward(&z).expect("generator shapes are fixed");
        out.values().chunks(2).map(|c| [c[0], c[1]]).collect()
    }

    /// Order of operations in the most recent forward pass.
    pub fn last_trace(&self) -> &[ForwardStep] {
        &self.last_trace
    }
}

impl Model for GanModel {
    fn parameters(&self) -> Vec<Parameter> {
        let mut params = self.generator.parameters();
        params.extend(self.discriminator.parameters());
        params
    }

    fn forward(&mut self, real_imgs: &Tensor, state: Option<&mut State>) -> Result<Tensor> {
        let state = state.ok_or_else(|| {
            Error::Contract("the GAN forward pass needs state; set pass_state".into())
        })?;
        let rows = real_imgs.shape().dims()[0];
        self.last_trace.clear();

        let z = self.noise(rows);
        let gen_imgs = self.generator.forward(&z)?;
        self.last_trace.push(ForwardStep::Generate);
        state.put(&GEN_IMGS, StateValue::Tensor(gen_imgs.clone()));

        let disc_gen = self.discriminator.forward(&gen_imgs)?;
        self.last_trace.push(ForwardStep::DiscriminateGenerated);
        state.put(&DISC_GEN, StateValue::Tensor(disc_gen));

        zero_grad(&self.discriminator.parameters());
        self.last_trace.push(ForwardStep::ZeroGradDiscriminator);

        let disc_gen_det = self.discriminator.forward(&gen_imgs.detach())?;
        self.last_trace.push(ForwardStep::DiscriminateDetached);
        state.put(&DISC_GEN_DET, StateValue::Tensor(disc_gen_det));

        let disc_real = self.discriminator.forward(real_imgs)?;
        self.last_trace.push(ForwardStep::DiscriminateReal);
        state.put(&DISC_REAL, StateValue::Tensor(disc_real));

        Ok(gen_imgs)
    }
}

/// The adversarial objective, assembled from the state entries the
/// forward pass wrote:
///
/// ```text
/// fake_loss = bce(disc(detached generated), fake)
/// real_loss = bce(disc(real), valid)
/// g_loss    = bce(disc(generated), valid)
/// d_loss    = (real_loss + fake_loss) / 2
/// total     = g_loss + d_loss
/// ```
///
/// `g_loss` and `d_loss` land in state as plain numbers for the metric
/// trees; the returned sum stays differentiable.
pub fn gan_loss(state: &mut State) -> Result<Tensor> {
    let disc_gen_det = state.get_tensor(&DISC_GEN_DET)?;
    let disc_real = state.get_tensor(&DISC_REAL)?;
    let disc_gen = state.get_tensor(&DISC_GEN)?;

    let fake = Tensor::zeros(disc_gen_det.shape());
    let valid = Tensor::ones(disc_real.shape());

    let fake_loss = binary_cross_entropy(&disc_gen_det, &fake)?;
    let real_loss = binary_cross_entropy(&disc_real, &valid)?;
    let g_loss = binary_cross_entropy(&disc_gen, &Tensor::ones(disc_gen.shape()))?;
    let d_loss = real_loss.add(&fake_loss)?.mul(&Tensor::scalar(0.5))?;

    state.put(&G_LOSS, StateValue::Float(g_loss.item()));
    state.put(&D_LOSS, StateValue::Float(d_loss.item()));
    g_loss.add(&d_loss)
}

/// The loss as an `add_to_loss` callback for trial construction.
pub fn gan_loss_callback() -> impl Callback {
    add_to_loss(gan_loss)
}

/// Registers `g_loss` / `d_loss` metric trees reading the values the
/// loss callback writes.
pub fn register_gan_metrics() {
    register_default("g_loss", || {
        standard_tree(StateFloat::new("g_loss", G_LOSS.clone()))
    });
    register_default("d_loss", || {
        standard_tree(StateFloat::new("d_loss", D_LOSS.clone()))
    });
}
