"""Dataset schema, JSON-lines manifests and a synthetic audio-visual corpus.

The synthetic corpus stands in for a real far-field recording set. A positive
utterance carries a fixed "wake word": two 0.2 s chirps (1-2 kHz up, then
2-1 kHz down) separated by 0.1 s. The lip patch in the paired video moves
vertically in step with the chirp envelope. Negatives carry noise, unrelated
tone bursts and lip motion that is not tied to the audio.

Files on disk::

    <out>/train.jsonl, dev.jsonl, eval.jsonl   manifests
    <out>/audio/<id>.wav                       16-bit PCM mono
    <out>/video/<id>.npy                       uint8 frames, (F, 112, 112, 3)
    <out>/noise/noise_<k>.wav                  noise pool for NR augmentation
"""

import json
import os
import wave
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .validation import ManifestParseError, ValidationError

SPLITS = ("train", "dev", "eval")
FIELDS = ("near", "mid", "far")
MANIFEST_KEYS = ("id", "audio_path", "video_path", "label", "split", "field")

FRAME_SIZE = 112
CHIRP_SECONDS = 0.2
GAP_SECONDS = 0.1
WAKE_SECONDS = 2 * CHIRP_SECONDS + GAP_SECONDS
CHIRP_BAND = (1000.0, 2000.0)


@dataclass(frozen=True)
class SampleRecord:
    """One labelled utterance. Paths are absolute once loaded from a manifest."""

    id: str
    audio_path: str
    video_path: str
    label: int
    split: str = "train"
    field: str = "far"

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValidationError(f"record {self.id!r}: label must be 0 or 1, got {self.label!r}")
        if self.split not in SPLITS:
            raise ValidationError(f"record {self.id!r}: unknown split {self.split!r}")
        if self.field not in FIELDS:
            raise ValidationError(f"record {self.id!r}: unknown field {self.field!r}")


@dataclass
class SynthConfig:
    n_train_pos: int = 100
    n_train_neg: int = 300
    n_dev_pos: int = 30
    n_dev_neg: int = 90
    n_eval_pos: int = 30
    n_eval_neg: int = 90
    sample_rate: int = 16000
    duration_range: tuple = (1.0, 3.0)
    seed: int = 0
    fps: int = 25
    # positives are drawn from the lower part of duration_range
    positive_duration_fraction: float = 0.5
    # per-field SNR (dB) of the wake word / distractors against background noise
    field_snr_db: dict = dc_field(default_factory=lambda: {"near": 15.0, "mid": 5.0, "far": -5.0})
    n_noise_files: int = 8

    def __post_init__(self):
        counts = self.counts()
        if any(n < 0 for pair in counts.values() for n in pair):
            raise ValidationError("sample counts must be >= 0")
        if self.sample_rate <= 0:
            raise ValidationError("sample_rate must be positive")
        lo, hi = self.duration_range
        if lo > hi:
            raise ValidationError("duration_range min exceeds max")
        if lo < WAKE_SECONDS + 0.1:
            raise ValidationError(f"duration_range min must be >= {WAKE_SECONDS + 0.1} s")
        if self.fps <= 0:
            raise ValidationError("fps must be positive")

    def counts(self):
        return {
            "train": (self.n_train_pos, self.n_train_neg),
            "dev": (self.n_dev_pos, self.n_dev_neg),
            "eval": (self.n_eval_pos, self.n_eval_neg),
        }


# ---------------------------------------------------------------------------
# manifest I/O
# ---------------------------------------------------------------------------


def load_manifest(path, check_files=True):
    """Read a JSON-lines manifest, resolving paths against its directory.

    Raises:
        FileNotFoundError: missing manifest (or referenced file, if ``check_files``).
        ManifestParseError: malformed line; the message names the line number.
        ValidationError: duplicate ids.
    """
    path = Path(path)
    root = path.parent.resolve()
    records, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(path, lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or set(obj) != set(MANIFEST_KEYS):
                raise ManifestParseError(path, lineno, f"expected keys {list(MANIFEST_KEYS)}")
            try:
                rec = SampleRecord(
                    id=str(obj["id"]),
                    audio_path=str(root / obj["audio_path"]),
                    video_path=str(root / obj["video_path"]),
                    label=obj["label"],
                    split=obj["split"],
                    field=obj["field"],
                )
            except ValidationError as exc:
                raise ManifestParseError(path, lineno, str(exc)) from None
            if rec.id in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate id {rec.id!r}")
            seen.add(rec.id)
            if check_files:
                for p in (rec.audio_path, rec.video_path):
                    if not os.path.exists(p):
                        raise FileNotFoundError(f"{path}:{lineno}: referenced file {p} does not exist")
            records.append(rec)
    return records


def format_manifest_line(record, root):
    obj = {
        "id": record.id,
        "audio_path": Path(os.path.relpath(record.audio_path, root)).as_posix(),
        "video_path": Path(os.path.relpath(record.video_path, root)).as_posix(),
        "label": int(record.label),
        "split": record.split,
        "field": record.field,
    }
    return json.dumps(obj, ensure_ascii=False)


def write_manifest(path, records):
    """Write records as JSON lines with paths relative to the manifest directory."""
    path = Path(path)
    root = path.parent.resolve()
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate ids in records")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(format_manifest_line(rec, root) + "\n")
    return path


# ---------------------------------------------------------------------------
# waveform / clip I/O
# ---------------------------------------------------------------------------


def write_wav(path, samples, sample_rate):
    """Write float samples in [-1, 1] as 16-bit PCM mono."""
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(sample_rate))
        wf.writeframes(pcm.tobytes())


def read_wav(path):
    """Return ``(samples, sample_rate)`` with samples as float32 in [-1, 1)."""
    with wave.open(str(path), "rb") as wf:
        if wf.getsampwidth() != 2 or wf.getnchannels() != 1:
            raise ValidationError(f"{path}: expected 16-bit mono PCM")
        sr = wf.getframerate()
        data = wf.readframes(wf.getnframes())
    return np.frombuffer(data, dtype="<i2").astype(np.float32) / 32768.0, sr


def write_clip(path, frames):
    np.save(path, np.ascontiguousarray(frames, dtype=np.uint8), allow_pickle=False)


def read_clip(path):
    return np.load(path, allow_pickle=False)


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------


def _tukey(n, alpha=0.25):
    if n <= 1:
        return np.ones(n)
    x = np.linspace(0.0, 1.0, n)
    w = np.ones(n)
    edge = alpha / 2
    lo = x < edge
    hi = x > 1 - edge
    w[lo] = 0.5 * (1 + np.cos(np.pi * (x[lo] / edge - 1)))
    w[hi] = 0.5 * (1 + np.cos(np.pi * ((x[hi] - 1) / edge + 1)))
    return w


def _chirp(n, sr, f0, f1):
    t = np.arange(n) / sr
    dur = n / sr
    phase = 2 * np.pi * (f0 * t + 0.5 * (f1 - f0) / dur * t**2)
    return np.sin(phase) * _tukey(n)


def wake_word(sample_rate):
    """The synthetic wake word waveform and its amplitude envelope."""
    nc = int(round(CHIRP_SECONDS * sample_rate))
    ng = int(round(GAP_SECONDS * sample_rate))
    lo, hi = CHIRP_BAND
    sig = np.concatenate([_chirp(nc, sample_rate, lo, hi), np.zeros(ng), _chirp(nc, sample_rate, hi, lo)])
    env = np.concatenate([_tukey(nc), np.zeros(ng), _tukey(nc)])
    return sig, env


def _distractor(rng, n, sr):
    """A few tone bursts well away from the chirp band."""
    out = np.zeros(n)
    for _ in range(int(rng.integers(1, 4))):
        if rng.random() < 0.5:
            freq = rng.uniform(250.0, 700.0)
        else:
            freq = rng.uniform(3000.0, 5000.0)
        length = int(rng.uniform(0.1, 0.5) * sr)
        length = min(length, n)
        start = int(rng.integers(0, n - length + 1))
        t = np.arange(length) / sr
        out[start : start + length] += np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi)) * _tukey(length)
    return out


def _colored_noise(rng, n):
    white = rng.standard_normal(n)
    # mild low-pass tilt so noise is not perfectly flat
    noise = lfilter([1.0], [1.0, -rng.uniform(0.0, 0.6)], white)
    return noise / (noise.std() + 1e-12)


def _mix_at_snr(signal, noise, snr_db):
    ps = np.mean(signal**2)
    pn = np.mean(noise**2)
    return signal + noise * np.sqrt(ps / (pn * 10 ** (snr_db / 10.0)))


def _render_frames(rng, motion, n_frames):
    """Draw a face-like background with a bright lip patch displaced by ``motion`` pixels."""
    skin = rng.uniform(0.45, 0.75, size=3) * np.array([1.0, 0.8, 0.7])
    lip = np.array([0.95, rng.uniform(0.3, 0.5), rng.uniform(0.3, 0.5)])
    yy, xx = np.mgrid[0:FRAME_SIZE, 0:FRAME_SIZE].astype(np.float64)
    shade = 0.85 + 0.15 * (xx / FRAME_SIZE)
    base = shade[..., None] * skin[None, None, :]
    cy0 = FRAME_SIZE / 2 + rng.uniform(-4, 4)
    cx0 = FRAME_SIZE / 2 + rng.uniform(-4, 4)
    half_w, half_h = rng.uniform(16, 22), rng.uniform(6, 9)
    frames = np.empty((n_frames, FRAME_SIZE, FRAME_SIZE, 3), dtype=np.uint8)
    for k in range(n_frames):
        cy = cy0 + motion[k]
        mask = ((xx - cx0) / half_w) ** 2 + ((yy - cy) / half_h) ** 2 <= 1.0
        img = base.copy()
        img[mask] = lip
        img *= 1.0 + rng.uniform(-0.03, 0.03)
        frames[k] = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return frames


def synthesize_sample(rng, label, field, cfg):
    """Return ``(waveform, frames)`` for one synthetic utterance."""
    sr = cfg.sample_rate
    lo, hi = cfg.duration_range
    if label:
        dur = rng.uniform(lo, lo + (hi - lo) * cfg.positive_duration_fraction)
    else:
        dur = rng.uniform(lo, hi)
    n = int(round(dur * sr))
    n_frames = max(1, int(round(dur * cfg.fps)))
    snr = cfg.field_snr_db[field]
    env_audio = np.zeros(n)
    sig = np.zeros(n)
    if label:
        ww, env = wake_word(sr)
        start = int(rng.integers(int(0.05 * sr), n - len(ww) - int(0.05 * sr) + 1))
        sig[start : start + len(ww)] += ww * rng.uniform(0.6, 1.0)
        env_audio[start : start + len(ww)] = env
    if not label or rng.random() < 0.3:
        sig += 0.5 * _distractor(rng, n, sr)
    noise = _colored_noise(rng, n)
    wave_ = _mix_at_snr(sig, noise, snr)
    wave_ *= rng.uniform(0.2, 0.5) / (np.abs(wave_).max() + 1e-12)

    t_frames = (np.arange(n_frames) + 0.5) / cfg.fps
    if label:
        # lip patch opens (moves down) with the chirp envelope
        env_v = np.interp(t_frames * sr, np.arange(n), env_audio)
        motion = rng.uniform(7.0, 10.0) * env_v
    else:
        motion = np.zeros(n_frames)
        for _ in range(int(rng.integers(0, 3))):
            width = rng.uniform(0.1, 0.6)
            centre = rng.uniform(0, dur)
            bump = np.clip(1 - np.abs(t_frames - centre) / width, 0, None)
            motion += rng.uniform(2.0, 9.0) * bump * rng.choice((-1.0, 1.0))
    motion = motion + rng.normal(0.0, 0.7, size=n_frames)
    frames = _render_frames(rng, motion, n_frames)
    return wave_.astype(np.float32), frames


def generate_synthetic_dataset(cfg, out_dir):
    """Write a deterministic synthetic corpus under ``out_dir``.

    Returns:
        dict mapping split name to manifest path.
    """
    counts = cfg.counts()
    if sum(p + n for p, n in counts.values()) == 0:
        raise ValidationError("synthetic dataset must contain at least one sample")
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    (out / "video").mkdir(parents=True, exist_ok=True)
    (out / "noise").mkdir(parents=True, exist_ok=True)

    manifests = {}
    for s_idx, split in enumerate(SPLITS):
        n_pos, n_neg = counts[split]
        labels = [1] * n_pos + [0] * n_neg
        order = np.random.default_rng([cfg.seed, s_idx, 0]).permutation(len(labels))
        records = []
        for k, j in enumerate(order):
            label = labels[j]
            rng = np.random.default_rng([cfg.seed, s_idx, 1, k])
            fld = FIELDS[int(rng.integers(0, len(FIELDS)))] if split != "eval" else "far"
            sid = f"{split}_{k:05d}"
            wave_, frames = synthesize_sample(rng, label, fld, cfg)
            apath = out / "audio" / f"{sid}.wav"
            vpath = out / "video" / f"{sid}.npy"
            write_wav(apath, wave_, cfg.sample_rate)
            write_clip(vpath, frames)
            records.append(SampleRecord(sid, str(apath.resolve()), str(vpath.resolve()), label, split, fld))
        manifests[split] = write_manifest(out / f"{split}.jsonl", records)

    for k in range(cfg.n_noise_files):
        rng = np.random.default_rng([cfg.seed, 99, k])
        noise = _colored_noise(rng, 2 * cfg.sample_rate)
        write_wav(out / "noise" / f"noise_{k:02d}.wav", 0.3 * noise / np.abs(noise).max(), cfg.sample_rate)
    return manifests


def load_noise_pool(noise_dir):
    """All noise waveforms in ``noise_dir`` (sorted by name)."""
    paths = sorted(Path(noise_dir).glob("*.wav"))
    if not paths:
        raise FileNotFoundError(f"no noise files in {noise_dir}")
    return [read_wav(p)[0] for p in paths]
