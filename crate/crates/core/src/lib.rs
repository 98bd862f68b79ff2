pub mod attack;
pub mod container;
pub mod data;
pub mod error;
pub mod fft;
pub mod graph;
pub mod image_io;
pub mod labels;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod registration;
pub mod rng;
pub mod tensor;
pub mod victim;

pub use error::{Error, Result};
pub use graph::{finite_difference_gradient, Graph, Var};
pub use nn::{BnMode, Model, ModelSpec, Preset};
pub use tensor::{ConvGeom, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    struct Autodiff;
    #[doc = include_str!("../../../book/src/victims.md")]
    struct Victims;
    #[doc = include_str!("../../../book/src/labels.md")]
    struct Labels;
    #[doc = include_str!("../../../book/src/inversion.md")]
    struct Inversion;
    #[doc = include_str!("../../../book/src/metrics.md")]
    struct Metrics;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
