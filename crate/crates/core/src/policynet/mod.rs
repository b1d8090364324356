//! Small policy network on a hand-written reverse-mode tape.

pub mod checkpoint;
pub mod model;
pub mod params;
pub mod tape;

pub use model::{
    film, HeadMask, HorizonPrediction, LayerPrediction, LayerVars, ModelInput, PolicyConfig, PolicyNet,
    PredictionBundle, PreparedAnchors, Stage, TokenMask, FINE_TOKENS,
};
pub use params::{Optimizer, OptimizerKind, ParamStore};
pub use tape::{Tape, Tensor, Var};
