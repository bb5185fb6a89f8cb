"""Seeded audio and video augmentations.

Audio (waveform unless noted): noise + reverberation (NR), negative
sub-segmentation (NS), volume (VP), speed (SP), slight trimming (TS) and
SpecAugment (SA, on the spectrogram). Video: speed, rotation, horizontal
flip, crop, colour jitter and grey scaling, with parameters shared by every
frame of a clip.

All randomness flows from an explicit integer seed; see :func:`derive_seed`.
"""

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .validation import ValidationError, check_in_range

AUDIO_METHODS = ("NR", "NS", "VP", "SP", "TS", "SA")
VIDEO_METHODS = ("speed", "rotate", "hflip", "crop", "color_jitter", "gray")

SNR_RANGE = (-15.0, 15.0)
GAIN_RANGE = (0.125, 2.0)
SPEED_RANGE = (0.9, 1.1)
TRIM_KEEP = 0.95


def derive_seed(global_seed, sample_id, epoch=0):
    """Stable 63-bit seed from (global seed, sample id, epoch)."""
    digest = hashlib.sha256(f"{global_seed}:{sample_id}:{epoch}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


# ---------------------------------------------------------------------------
# audio
# ---------------------------------------------------------------------------


def reverberate(wave, rir):
    """Convolve with an impulse response, truncated to the input length."""
    wave = np.asarray(wave, dtype=np.float64)
    rir = np.asarray(rir, dtype=np.float64)
    if rir.size == 0 or not np.any(rir):
        raise ValidationError("impulse response must be non-empty with nonzero energy")
    return np.convolve(wave, rir)[: wave.size]


def add_noise_reverb(wave, noise, rir, snr_db):
    """Reverberate ``wave`` and add ``noise`` at ``snr_db`` (powers measured after convolution).

    Noise shorter than the wave is tiled; longer noise is cut.
    """
    check_in_range(snr_db, *SNR_RANGE, "snr_db")
    wet = reverberate(wave, rir)
    noise = np.asarray(noise, dtype=np.float64).ravel()
    if noise.size == 0:
        raise ValidationError("noise is empty")
    noise = np.resize(noise, wet.size)
    p_sig = np.mean(wet**2)
    p_noise = np.mean(noise**2)
    if p_sig == 0.0 or p_noise == 0.0:
        raise ValidationError("SNR undefined for zero-energy signal or noise")
    scale = math.sqrt(p_sig / (p_noise * 10.0 ** (snr_db / 10.0)))
    return wet + scale * noise


def synthetic_rir(rng, sample_rate, rt60_range=(0.2, 0.8)):
    """Exponentially decaying noise tail after a unit direct path."""
    rt60 = rng.uniform(*rt60_range)
    n = max(2, int(rt60 * sample_rate))
    t = np.arange(n) / sample_rate
    # 60 dB amplitude decay over rt60
    tail = rng.standard_normal(n) * np.exp(-6.9078 * t / rt60)
    tail[0] = 1.0
    return tail / np.sqrt(np.sum(tail**2))


def volume_perturb(wave, gain, full_scale=1.0):
    check_in_range(gain, *GAIN_RANGE, "gain")
    return np.clip(np.asarray(wave, dtype=np.float64) * gain, -full_scale, full_scale)


def speed_length(n, ratio):
    """Output length of :func:`speed_perturb`: round(n / ratio), halves up."""
    return int(math.floor(n / ratio + 0.5))


def speed_perturb(wave, ratio):
    """Resample so playback is ``ratio`` times faster (pitch moves with speed)."""
    check_in_range(ratio, *SPEED_RANGE, "ratio")
    wave = np.asarray(wave, dtype=np.float64)
    m = speed_length(wave.size, ratio)
    pos = np.minimum(np.arange(m) * ratio, wave.size - 1)
    return np.interp(pos, np.arange(wave.size), wave)


def trim_slightly(wave, side, keep_ratio=TRIM_KEEP):
    wave = np.asarray(wave)
    if wave.size == 0:
        raise ValidationError("cannot trim an empty waveform")
    keep = max(1, int(math.floor(keep_ratio * wave.size + 1e-9)))
    if side == "end":
        return wave[:keep]
    if side == "begin":
        return wave[wave.size - keep :]
    raise ValidationError(f"side must be 'begin' or 'end', got {side!r}")


def apply_masks(spec, freq_masks=(), time_masks=()):
    """Zero ``[f0, f0+f)`` mel bins and ``[t0, t0+t)`` frames of a (time, bins) matrix."""
    out = np.array(spec, copy=True)
    n_t, n_f = out.shape
    for f0, f in freq_masks:
        if f0 < 0 or f0 + f > n_f:
            raise ValidationError(f"frequency mask [{f0}, {f0 + f}) exceeds {n_f} bins")
        out[:, f0 : f0 + f] = 0
    for t0, t in time_masks:
        if t0 < 0 or t0 + t > n_t:
            raise ValidationError(f"time mask [{t0}, {t0 + t}) exceeds {n_t} frames")
        out[t0 : t0 + t, :] = 0
    return out


def draw_masks(rng, size, n_masks, max_width):
    masks = []
    for _ in range(n_masks):
        w = int(rng.integers(0, max_width + 1))
        masks.append((int(rng.integers(0, size - w + 1)), w))
    return masks


def spec_augment(spec, n_freq_masks=2, max_F=10, n_time_masks=2, max_T=20, seed=0):
    """SpecAugment frequency and time masking with mask widths ~ U{0..max}."""
    spec = np.asarray(spec)
    n_t, n_f = spec.shape
    if max_F > n_f or max_F < 0:
        raise ValidationError(f"max_F={max_F} exceeds {n_f} mel bins")
    if max_T > n_t or max_T < 0:
        raise ValidationError(f"max_T={max_T} exceeds {n_t} frames")
    rng = np.random.default_rng(seed)
    freq = draw_masks(rng, n_f, n_freq_masks, max_F)
    time = draw_masks(rng, n_t, n_time_masks, max_T)
    return apply_masks(spec, freq, time)


def negative_subsegment(wave, label, seed, sample_rate=16000, min_seconds=0.5, min_fraction=0.5):
    """Random contiguous slice of a negative utterance, 50-100% of its length.

    Positives are rejected since a crop could cut the wake word. Waves shorter
    than ``min_seconds`` are returned unchanged.
    """
    if label != 0:
        raise ValidationError("negative sub-segmentation applies to negative samples only")
    wave = np.asarray(wave)
    n = wave.size
    if n < min_seconds * sample_rate:
        return wave
    rng = np.random.default_rng(seed)
    length = int(rng.integers(int(math.ceil(min_fraction * n)), n + 1))
    start = int(rng.integers(0, n - length + 1))
    return wave[start : start + length]


# ---------------------------------------------------------------------------
# video
# ---------------------------------------------------------------------------


def hflip(clip):
    return np.ascontiguousarray(np.asarray(clip)[:, :, ::-1])


def to_gray(clip):
    clip = np.asarray(clip, dtype=np.float32)
    luma = clip @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
    return np.repeat(luma[..., None], 3, axis=-1)


def rotate_clip(clip, angle):
    return np.clip(ndimage.rotate(clip, angle, axes=(2, 1), reshape=False, order=1, mode="nearest"), 0.0, 1.0)


def crop_resize(clip, top, left, size, out_size=112):
    crop = torch.from_numpy(np.ascontiguousarray(clip[:, top : top + size, left : left + size]))
    crop = crop.permute(0, 3, 1, 2)
    resized = F.interpolate(crop, size=(out_size, out_size), mode="bilinear", align_corners=False)
    return resized.permute(0, 2, 3, 1).numpy().clip(0.0, 1.0)


def temporal_speed(clip, ratio):
    n = clip.shape[0]
    m = max(1, speed_length(n, ratio))
    idx = np.minimum(np.floor(np.arange(m) * ratio + 0.5).astype(np.int64), n - 1)
    return clip[idx]


def color_jitter(clip, brightness, contrast):
    mean = clip.mean(axis=(1, 2, 3), keepdims=True)
    return np.clip((clip * brightness - mean) * contrast + mean, 0.0, 1.0)


# ---------------------------------------------------------------------------
# policy
# ---------------------------------------------------------------------------


@dataclass
class AugmentPolicy:
    """Which augmentations run and how often.

    ``audio`` and ``video`` name the enabled methods; ``prob`` maps a method
    name to its apply-probability (default ``default_prob``).
    """

    audio: frozenset = frozenset()
    video: frozenset = frozenset()
    prob: dict = field(default_factory=dict)
    default_prob: float = 0.5
    seed: int = 0
    noise_dir: str | None = None
    snr_range: tuple = SNR_RANGE
    rt60_range: tuple = (0.2, 0.8)
    n_freq_masks: int = 2
    max_F: int = 10
    n_time_masks: int = 2
    max_T: int = 20
    rotate_deg: float = 10.0
    crop_scale: tuple = (0.8, 1.0)
    jitter: float = 0.2

    def __post_init__(self):
        self.audio = frozenset(self.audio)
        self.video = frozenset(self.video)
        unknown = (self.audio - set(AUDIO_METHODS)) | (self.video - set(VIDEO_METHODS))
        if unknown:
            raise ValidationError(f"unknown augmentation(s): {sorted(unknown)}")
        for name, p in {**self.prob, "default_prob": self.default_prob}.items():
            check_in_range(p, 0.0, 1.0, f"probability[{name}]")
        if "NR" in self.audio and not self.noise_dir:
            raise ValidationError("NR augmentation needs a noise pool directory (noise_dir)")
        lo, hi = self.snr_range
        check_in_range(lo, *SNR_RANGE, "snr_range[0]")
        check_in_range(hi, lo, SNR_RANGE[1], "snr_range[1]")

    @classmethod
    def table1_best(cls, **kw):
        """NR + NS + SP + TS + SA, the best audio combination in the ablation."""
        return cls(audio=frozenset({"NR", "NS", "SP", "TS", "SA"}), **kw)

    def p(self, name):
        return self.prob.get(name, self.default_prob)

    def _fires(self, rng, name, enabled):
        # always draw so later decisions do not shift when a method is toggled
        u = rng.random()
        return name in enabled and u < self.p(name)


def augment_waveform(wave, label, policy, seed, sample_rate=16000, noise_pool=None):
    """Apply NR, NS, VP, SP and TS (each with its probability) to one waveform."""
    rng = np.random.default_rng(seed)
    out = np.asarray(wave, dtype=np.float64)
    if policy._fires(rng, "NR", policy.audio):
        if not noise_pool:
            raise ValidationError("NR enabled but no noise pool was loaded")
        noise = noise_pool[int(rng.integers(0, len(noise_pool)))]
        offset = int(rng.integers(0, max(1, len(noise))))
        noise = np.roll(noise, -offset)
        snr = rng.uniform(*policy.snr_range)
        rir = synthetic_rir(rng, sample_rate, policy.rt60_range)
        if np.any(out) and np.any(noise):
            out = add_noise_reverb(out, noise, rir, snr)
    if label == 0 and policy._fires(rng, "NS", policy.audio):
        out = negative_subsegment(out, 0, int(rng.integers(2**62)), sample_rate)
    if policy._fires(rng, "VP", policy.audio):
        out = volume_perturb(out, rng.uniform(*GAIN_RANGE))
    if policy._fires(rng, "SP", policy.audio):
        out = speed_perturb(out, rng.uniform(*SPEED_RANGE))
    if policy._fires(rng, "TS", policy.audio):
        out = trim_slightly(out, "begin" if rng.random() < 0.5 else "end")
    return out


def augment_spectrogram(spec, policy, seed):
    """SpecAugment step of the policy (identity unless SA fires)."""
    rng = np.random.default_rng(seed)
    if not policy._fires(rng, "SA", policy.audio):
        return spec
    n_t = spec.shape[0]
    return spec_augment(
        spec,
        policy.n_freq_masks,
        min(policy.max_F, spec.shape[1]),
        policy.n_time_masks,
        min(policy.max_T, n_t),
        seed=int(rng.integers(2**62)),
    )


def augment_video(clip, policy, seed):
    """Apply the enabled video transforms to a (F, H, W, 3) clip.

    One parameter draw per clip, shared across frames. ``uint8`` input is
    scaled to [0, 1]; output is float32 in [0, 1] with spatial size 112.
    """
    clip = np.asarray(clip)
    if clip.ndim != 4 or clip.shape[-1] != 3 or clip.shape[0] < 1:
        raise ValidationError(f"video clip must be (F, H, W, 3), got {clip.shape}")
    out = clip.astype(np.float32) / 255.0 if clip.dtype == np.uint8 else clip.astype(np.float32)
    rng = np.random.default_rng(seed)
    enabled = policy.video
    if policy._fires(rng, "speed", enabled):
        out = temporal_speed(out, rng.uniform(*SPEED_RANGE))
    if policy._fires(rng, "crop", enabled):
        h = out.shape[1]
        size = max(1, int(round(h * rng.uniform(*policy.crop_scale))))
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, out.shape[2] - size + 1))
        out = crop_resize(out, top, left, size)
    if policy._fires(rng, "rotate", enabled):
        out = rotate_clip(out, rng.uniform(-policy.rotate_deg, policy.rotate_deg))
    if policy._fires(rng, "hflip", enabled):
        out = hflip(out)
    if policy._fires(rng, "color_jitter", enabled):
        j = policy.jitter
        out = color_jitter(out, rng.uniform(1 - j, 1 + j), rng.uniform(1 - j, 1 + j))
    if policy._fires(rng, "gray", enabled):
        out = to_gray(out)
    if out.shape[1:3] != (112, 112):
        out = crop_resize(out, 0, 0, min(out.shape[1:3]))
    return out.astype(np.float32)
