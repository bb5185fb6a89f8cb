"""Front-end: log-mel filterbanks, fixed-length resampling and model tensors.

Audio goes waveform -> (T', 80) FBank -> 256 frames -> 64 sliding windows of
80x80 (stride 4). Video goes F lip frames -> 64 frames scaled to [0, 1].
"""

import numpy as np
from scipy.signal import get_window
from sklearn.base import BaseEstimator, TransformerMixin

from .validation import ValidationError, check_shape

N_MELS = 80
SPEC_FRAMES = 256
MODEL_FRAMES = 64
WINDOW = 80
STRIDE = 4
PADDED_FRAMES = (MODEL_FRAMES - 1) * STRIDE + WINDOW  # 332
LOG_FLOOR = 1e-10


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate, n_fft, n_mels=N_MELS, f_min=0.0, f_max=None):
    """Triangular HTK-mel filters, shape ``(n_mels, n_fft // 2 + 1)``."""
    f_max = sample_rate / 2.0 if f_max is None else f_max
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    return np.clip(np.minimum(rising, falling), 0.0, None)


def compute_fbank(waveform, sample_rate, n_mels=N_MELS, frame_length_ms=25.0, frame_shift_ms=10.0):
    """Natural-log mel filterbank energies, shape ``(frames, n_mels)``.

    Frames use a periodic Hann window; the FFT size is the next power of two
    above the frame length. Energies are floored at 1e-10 before the log.
    """
    if sample_rate <= 0:
        raise ValidationError("sample_rate must be positive")
    x = np.asarray(waveform, dtype=np.float64).ravel()
    flen = int(round(frame_length_ms * sample_rate / 1000.0))
    fshift = int(round(frame_shift_ms * sample_rate / 1000.0))
    if x.size < flen:
        raise ValidationError(f"waveform has {x.size} samples, shorter than one {flen}-sample frame")
    n_frames = 1 + (x.size - flen) // fshift
    idx = np.arange(flen)[None, :] + fshift * np.arange(n_frames)[:, None]
    frames = x[idx] * get_window("hann", flen, fftbins=True)[None, :]
    n_fft = 1 << (flen - 1).bit_length()
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    energies = power @ mel_filterbank(sample_rate, n_fft, n_mels).T
    return np.log(np.maximum(energies, LOG_FLOOR)).astype(np.float32)


def resample_indices(n_in, n_out):
    """Nearest-frame indices ``round(i * (n_in - 1) / (n_out - 1))``, halves rounded up."""
    if n_in < 1:
        raise ValidationError("cannot resample an empty sequence")
    if n_out == 1:
        return np.zeros(1, dtype=np.int64)
    i = np.arange(n_out, dtype=np.int64)
    # exact integer round-half-up
    return (2 * i * (n_in - 1) + (n_out - 1)) // (2 * (n_out - 1))


def normalize_time(spec, target_frames=SPEC_FRAMES):
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[0] < 1:
        raise ValidationError("spectrogram must be a non-empty (frames, bins) matrix")
    return spec[resample_indices(spec.shape[0], target_frames)]


def tensorize_windows(spec):
    """Slice a (256, 80) spectrogram into 64 windows of 80 frames, stride 4.

    The time axis is zero-padded to 332 frames so the last window fits.
    Returns an array of shape (64, 80, 80, 1).
    """
    spec = np.asarray(spec)
    check_shape(spec, (SPEC_FRAMES, N_MELS), "spectrogram")
    padded = np.zeros((PADDED_FRAMES, N_MELS), dtype=spec.dtype)
    padded[:SPEC_FRAMES] = spec
    idx = STRIDE * np.arange(MODEL_FRAMES)[:, None] + np.arange(WINDOW)[None, :]
    return padded[idx][..., None]


def untensorize_windows(windows):
    """Inverse of :func:`tensorize_windows` on the non-padded region."""
    windows = np.asarray(windows)
    check_shape(windows, (MODEL_FRAMES, WINDOW, N_MELS, None), "audio tensor")
    return windows[:, :STRIDE, :, 0].reshape(SPEC_FRAMES, N_MELS)


def sample_video_frames(clip, n_frames=MODEL_FRAMES):
    """Resample a lip clip to 64 frames, scaled to [0, 1].

    ``uint8`` clips are divided by 255; float clips must already lie in [0, 1].
    """
    clip = np.asarray(clip)
    check_shape(clip, (None, 112, 112, 3), "video clip")
    if clip.shape[0] < 1:
        raise ValidationError("video clip has no frames")
    out = clip[resample_indices(clip.shape[0], n_frames)]
    if out.dtype == np.uint8:
        return out.astype(np.float32) / 255.0
    out = out.astype(np.float32)
    if out.size and (out.min() < 0.0 or out.max() > 1.0):
        raise ValidationError("float video frames must lie in [0, 1]")
    return out


def audio_input(waveform, sample_rate, layout="windows", spec_augment=None):
    """Model input for one waveform.

    Args:
        layout: ``"windows"`` gives the channels-first (1, 64, 80, 80) tensor
            of the 3D and hybrid models; ``"spectrogram"`` gives (1, 256, 80)
            for the 2D model.
        spec_augment: optional callable applied to the raw spectrogram.
    """
    spec = compute_fbank(waveform, sample_rate)
    if spec_augment is not None:
        spec = spec_augment(spec)
    return layout_input(normalize_time(spec), layout)


def layout_input(spec, layout="windows"):
    """Model input from a time-normalized (256, 80) spectrogram."""
    if layout == "spectrogram":
        return np.asarray(spec, dtype=np.float32)[None]
    if layout == "windows":
        return np.moveaxis(tensorize_windows(spec), -1, 0).astype(np.float32)
    raise ValidationError(f"unknown audio layout {layout!r}")


def video_input(clip):
    """Channels-first (3, 64, 112, 112) tensor for one clip."""
    return np.ascontiguousarray(np.moveaxis(sample_video_frames(clip), -1, 0))


class AudioFrontend(BaseEstimator, TransformerMixin):
    """Stateless transformer: list of waveforms -> stacked model inputs."""

    def __init__(self, sample_rate=16000, layout="windows"):
        self.sample_rate = sample_rate
        self.layout = layout

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return np.stack([audio_input(w, self.sample_rate, self.layout) for w in X])


class VideoFrontend(BaseEstimator, TransformerMixin):
    """Stateless transformer: list of (F, 112, 112, 3) clips -> (N, 3, 64, 112, 112)."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return np.stack([video_input(c) for c in X])
