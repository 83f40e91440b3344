//! Audio I/O and the log-mel frontend shared by feature extraction and the
//! mel reconstruction loss.

mod mel;
mod melfile;
mod wav;

pub use mel::{hz_to_mel, log_mel, mel_filterbank, mel_to_hz, MelConfig, MelSpectrogram};
pub use melfile::{load_mel, read_mel, save_mel, write_mel};
pub use wav::{load_wav, save_wav, Waveform};
