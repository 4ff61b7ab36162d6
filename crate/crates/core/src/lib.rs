pub mod evalkit;
pub mod histaug;
pub mod io;
pub mod milbench;
pub mod patchlab;
pub mod tensorcore;
pub mod toyencoder;

pub use histaug::{GeneratorConfig, GeneratorModel};
pub use patchlab::{Patch, TransformKind, TransformSequence, TransformStep};
pub use tensorcore::{Tape, Tensor, Var};
pub use toyencoder::{Embedding, EncoderWeights};
