//! FlexIO: prompt-conditional speech separation for arbitrary microphone
//! counts (M) and speaker counts (N).
//!
//! One trained model accepts any number of input channels and produces any
//! number of output streams. Repeated prompt vectors prepended along the
//! time axis set the output count; array-agnostic channel-communication
//! layers (TAC, cross-channel attention, or co-attention) make the
//! parameters independent of the channel count.

pub mod autograd;
pub mod checkpoint;
pub mod comm;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod parallel;
pub mod model;
pub mod params;
pub mod stft;
pub mod synth;
pub mod train;
pub mod wav;

pub use comm::{co_attention_weights, CommMechanism, CommSpec};
pub use config::{DataConfig, RunConfig};
pub use error::{FlexioError, Result};
pub use loss::{neg_snr, neg_snr_graph, pit_assign, pit_loss, LOSS_EPS, MAX_PIT_SPEAKERS};
pub use metrics::{evaluate, pit_si_sdr, si_sdr, si_sdr_improvement, EvalSummary};
pub use model::{FlexioModel, ModelConfig, SeparationResult};
pub use params::{Bind, ParamInit, ParamSet};
pub use stft::{stft, ComplexSpec, StftConfig, Waveform, WindowKind, SAMPLE_RATE};
pub use synth::{
    generate_dataset, load_manifest, render_scene, synth_source, GroupSpec, ReverbSpec, Scene,
    SceneRecord, SceneSpec, SynthConfig,
};
pub use train::{train, validation_loss, AdamW, TrainConfig, TrainOutcome, TrainSession};
pub use wav::{read_wav, write_wav};
