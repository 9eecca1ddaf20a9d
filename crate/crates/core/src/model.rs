//! The full matting network: configuration, construction, forward pass and
//! eval-mode prediction.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Scalar, Var};
use crate::decoder::Decoder;
use crate::encoder::{encode, Encoder};
use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, ParamStore, StatObservation};
use crate::tri_token::{init_tokens, TriTokenSet};
use crate::types::{AlphaMatte, ImageRgb, Trimap};

/// Architecture hyperparameters. Stage channel widths must double from one
/// stage to the next because patch merging concatenates 2x2 neighborhoods
/// and projects `4C -> 2C`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub embed_dims: [usize; 4],
    pub num_heads: [usize; 4],
    pub window_size: usize,
    pub mlp_ratio: f64,
    pub blocks_per_stage: [usize; 4],
    /// Tri-token attention on block indices `b % period == 0` per stage.
    pub tri_token_period: usize,
    pub use_tgtb: bool,
    pub tri_token_stages: [bool; 4],
    pub use_mgf: bool,
    pub use_shifted_windows: bool,
    pub use_rel_pos_bias: bool,
    pub squeeze_ratio: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig::desk_default()
    }
}

impl NetworkConfig {
    /// Desk-scale configuration small enough for CPU training and tests.
    pub fn desk_default() -> Self {
        NetworkConfig {
            embed_dims: [32, 64, 128, 256],
            num_heads: [2, 4, 8, 8],
            window_size: 4,
            mlp_ratio: 4.0,
            blocks_per_stage: [2, 2, 6, 2],
            tri_token_period: 5,
            use_tgtb: true,
            tri_token_stages: [true; 4],
            use_mgf: true,
            use_shifted_windows: true,
            use_rel_pos_bias: false,
            squeeze_ratio: 4,
        }
    }

    /// Tiny configuration for double-precision gradient verification.
    pub fn toy() -> Self {
        NetworkConfig {
            embed_dims: [8, 16, 32, 64],
            num_heads: [2, 2, 2, 2],
            window_size: 4,
            mlp_ratio: 2.0,
            blocks_per_stage: [1, 1, 1, 1],
            tri_token_period: 5,
            use_tgtb: true,
            tri_token_stages: [true; 4],
            use_mgf: true,
            use_shifted_windows: true,
            use_rel_pos_bias: false,
            squeeze_ratio: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..4 {
            if self.embed_dims[i] == 0 || self.num_heads[i] == 0 || self.blocks_per_stage[i] == 0 {
                return Err(Error::InvalidConfig(format!(
                    "stage {i} has a zero dimension, head count or block count"
                )));
            }
            if self.embed_dims[i] % self.num_heads[i] != 0 {
                return Err(Error::InvalidConfig(format!(
                    "embed dim {} not divisible by heads {} at stage {i}",
                    self.embed_dims[i], self.num_heads[i]
                )));
            }
        }
        for i in 0..3 {
            if self.embed_dims[i + 1] != 2 * self.embed_dims[i] {
                return Err(Error::InvalidConfig(format!(
                    "embed dims must double per stage (patch merging), got {:?}",
                    self.embed_dims
                )));
            }
        }
        if self.embed_dims[0] % 2 != 0 {
            return Err(Error::InvalidConfig(
                "embed_dims[0] must be even (stem runs at half width)".into(),
            ));
        }
        if self.window_size == 0 {
            return Err(Error::InvalidConfig("window_size must be >= 1".into()));
        }
        if self.tri_token_period == 0 {
            return Err(Error::InvalidConfig("tri_token_period must be >= 1".into()));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::InvalidConfig("mlp_ratio must be positive".into()));
        }
        if self.squeeze_ratio == 0 {
            return Err(Error::InvalidConfig("squeeze_ratio must be >= 1".into()));
        }
        Ok(())
    }

    pub fn stem_channels(&self) -> [usize; 2] {
        [self.embed_dims[0] / 2, self.embed_dims[0]]
    }

    /// Channel widths of the six pyramid levels, shallow to deep.
    pub fn level_channels(&self) -> [usize; 6] {
        let [c1, c2] = self.stem_channels();
        [
            c1,
            c2,
            self.embed_dims[1],
            self.embed_dims[2],
            self.embed_dims[3],
            2 * self.embed_dims[3],
        ]
    }

    /// Canonical text used for the checkpoint compatibility hash.
    pub fn canonical_text(&self) -> String {
        format!(
            "embed_dims={:?};num_heads={:?};window_size={};mlp_ratio={};blocks_per_stage={:?};\
             tri_token_period={};use_tgtb={};tri_token_stages={:?};use_mgf={};\
             use_shifted_windows={};use_rel_pos_bias={};squeeze_ratio={}",
            self.embed_dims,
            self.num_heads,
            self.window_size,
            self.mlp_ratio,
            self.blocks_per_stage,
            self.tri_token_period,
            self.use_tgtb,
            self.tri_token_stages,
            self.use_mgf,
            self.use_shifted_windows,
            self.use_rel_pos_bias,
            self.squeeze_ratio
        )
    }
}

/// Result of one forward pass, with everything the training loop needs to
/// run backward and update state.
pub struct ForwardPass<F: Scalar> {
    /// `(1, H, W)` predicted alpha in `[0, 1]`.
    pub alpha: Var,
    /// Normalization statistics observed during a training-mode pass.
    pub stat_obs: Vec<StatObservation<F>>,
    /// Graph variable bound to each parameter index, when it participated.
    pub bound: Vec<Option<Var>>,
}

pub struct Model<F: Scalar> {
    pub cfg: NetworkConfig,
    pub params: ParamStore<F>,
    pub(crate) encoder: Encoder,
    pub(crate) decoder: Decoder,
    pub(crate) token_sets: [Option<TriTokenSet>; 4],
}

impl<F: Scalar> Model<F> {
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut token_sets: [Option<TriTokenSet>; 4] = [None; 4];
        for i in 0..4 {
            if cfg.use_tgtb && cfg.tri_token_stages[i] {
                token_sets[i] = Some(init_tokens(
                    &mut params,
                    &format!("tri_tokens.stage{}", i + 1),
                    cfg.embed_dims[i],
                    &mut rng,
                ));
            }
        }
        let encoder = Encoder::new(&mut params, &cfg, &mut rng);
        let decoder = Decoder::new(
            &mut params,
            &cfg.level_channels(),
            cfg.use_mgf,
            cfg.squeeze_ratio,
            &mut rng,
        );
        Ok(Model {
            cfg,
            params,
            encoder,
            decoder,
            token_sets,
        })
    }

    /// Trainable scalar parameter count.
    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Builds the full forward graph for one sample.
    pub fn forward(
        &self,
        graph: &mut Graph<F>,
        image: &ImageRgb,
        trimap: &Trimap,
        train_mode: bool,
    ) -> Result<ForwardPass<F>> {
        let mut ctx = ForwardCtx::new(graph, &self.params, train_mode);
        let pyramid = encode(&mut ctx, &self.encoder, &self.token_sets, image, trimap)?;
        let alpha = self.decoder.forward(&mut ctx, &pyramid, trimap);
        let (bound, stat_obs) = ctx.into_parts();
        Ok(ForwardPass {
            alpha,
            stat_obs,
            bound,
        })
    }

    /// Eval-mode prediction with frozen normalization statistics.
    pub fn predict(&self, image: &ImageRgb, trimap: &Trimap) -> Result<AlphaMatte> {
        let mut graph = Graph::new();
        let pass = self.forward(&mut graph, image, trimap, false)?;
        let value = graph.value(pass.alpha);
        let (h, w) = image.shape2();
        let data = Array2::from_shape_fn((h, w), |(r, c)| {
            (value[[0, r, c]].as_f64() as f32).clamp(0.0, 1.0)
        });
        Ok(AlphaMatte::new(data))
    }

    /// Casts all parameters (used to build an f64 twin for gradient checks).
    pub fn cast<G: Scalar>(&self) -> Result<Model<G>> {
        let mut twin: Model<G> = Model::new(self.cfg.clone(), 0)?;
        twin.params = self.params.cast::<G>();
        Ok(twin)
    }
}
