//! Signal processing shared by the simulation, encoders and metrics.

mod convolve;
mod resample;
mod stft;
mod wav;

pub use convolve::{convolve, convolve_many};
pub use resample::{resample, Resampler};
pub use stft::{hann, Spectrogram, Stft};
pub use wav::{read_wav, write_wav, Audio, WavEncoding};
