"""Training loop, class-weighted BCE and the sklearn-style classifier wrapper."""

import ast
import logging
import math
import os
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin

from . import augment as aug
from .backbones import build_model, make_header, model_input_layout, save_checkpoint, load_checkpoint
from .data import load_noise_pool, read_clip, read_wav
from .features import audio_input, layout_input, video_input
from .metrics import evaluate
from .validation import NumericError, ValidationError

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7


def weighted_bce(probs, labels, w_neg=5.0, w_pos=1.0, eps=BCE_EPS):
    """Mean of ``-[w_pos*y*log p + w_neg*(1-y)*log(1-p)]`` with p clamped to [eps, 1-eps]."""
    probs = torch.as_tensor(probs)
    labels = torch.as_tensor(labels, dtype=probs.dtype if probs.is_floating_point() else torch.float64)
    if probs.shape != labels.shape:
        raise ValidationError(f"probs {tuple(probs.shape)} and labels {tuple(labels.shape)} differ")
    if w_neg <= 0 or w_pos <= 0:
        raise ValidationError("class weights must be positive")
    p = probs.clamp(eps, 1.0 - eps)
    per_sample = -(w_pos * labels * torch.log(p) + w_neg * (1.0 - labels) * torch.log1p(-p))
    return per_sample.mean()


def device_from_env():
    return torch.device(os.environ.get("AVWWS_DEVICE", "cpu"))


def set_determinism(seed, deterministic=False):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.backends.cudnn.benchmark = False


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def parse_value(text):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        if "," in text:
            return tuple(parse_value(t) for t in text.split(",") if t.strip())
        return text


def read_config(path):
    """Flat ``key = value`` file; ``#`` starts a comment."""
    cfg = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            cfg[key.strip()] = parse_value(value)
    return cfg


@dataclass
class TrainConfig:
    arch: str = "hybrid_simam"
    modality: str = "audio"
    batch_size: int = 64
    micro_batch_size: int = 8
    lr: float = 1e-3
    epochs: int = 50
    w_neg: float = 5.0
    w_pos: float = 1.0
    seed: int = 0
    deterministic: bool = False
    threshold: float = 0.5
    target_dev_wws: float | None = None
    patience: int | None = None
    sample_rate: int = 16000
    augment_audio: tuple = ()
    augment_video: tuple = ()
    augment_prob: float = 0.5
    noise_dir: str | None = None
    # bfloat16 autocast for the convolutions; the head and the loss stay float32
    amp: bool = False
    # stop after the first epoch that ends past this wall-clock budget
    max_minutes: float | None = None

    def __post_init__(self):
        from .backbones import ARCHITECTURES

        if self.arch not in ARCHITECTURES:
            raise ValidationError(f"unknown architecture {self.arch!r}; choose from {ARCHITECTURES}")
        if self.modality not in ("audio", "video"):
            raise ValidationError(f"modality must be 'audio' or 'video', got {self.modality!r}")
        if self.batch_size < 1 or self.micro_batch_size < 1:
            raise ValidationError("batch sizes must be >= 1")
        if self.lr <= 0:
            raise ValidationError("lr must be positive")
        if self.w_neg <= 0 or self.w_pos <= 0:
            raise ValidationError("loss weights must be positive")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if isinstance(self.augment_audio, str):
            self.augment_audio = (self.augment_audio,)
        if isinstance(self.augment_video, str):
            self.augment_video = (self.augment_video,)

    @classmethod
    def from_mapping(cls, mapping):
        """Build from a config dict, ignoring keys meant for other commands."""
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in mapping.items() if k in names})

    def policy(self):
        return aug.AugmentPolicy(
            audio=frozenset(self.augment_audio or ()),
            video=frozenset(self.augment_video or ()),
            default_prob=self.augment_prob,
            seed=self.seed,
            noise_dir=self.noise_dir,
        )


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


class InputBuilder:
    """Turns records into model inputs, applying per-sample seeded augmentation."""

    def __init__(self, modality, layout, policy=None, sample_rate=16000, cache=True):
        self.modality = modality
        self.layout = layout
        self.policy = policy
        self.sample_rate = sample_rate
        self.noise_pool = load_noise_pool(policy.noise_dir) if policy and "NR" in policy.audio else None
        self._waves = {}
        self._clean = {} if cache else None

    def _wave(self, rec):
        if rec.id not in self._waves:
            wave, sr = read_wav(rec.audio_path)
            if sr != self.sample_rate:
                raise ValidationError(f"{rec.audio_path}: sample rate {sr} != {self.sample_rate}")
            self._waves[rec.id] = wave
        return self._waves[rec.id]

    def _augmenting(self):
        if self.policy is None:
            return False
        return bool(self.policy.audio if self.modality == "audio" else self.policy.video)

    def build(self, rec, epoch=None):
        """Input array for ``rec``; ``epoch=None`` means no augmentation."""
        augmenting = epoch is not None and self._augmenting()
        if self.modality == "audio" and not augmenting:
            # only the small (256, 80) spectrogram is cached, windows are re-tiled
            spec = self._clean.get(rec.id) if self._clean is not None else None
            if spec is None:
                spec = audio_input(self._wave(rec), self.sample_rate, "spectrogram")[0]
                if self._clean is not None:
                    self._clean[rec.id] = spec
            return layout_input(spec, self.layout)
        seed = aug.derive_seed(self.policy.seed if self.policy else 0, rec.id, epoch)
        if self.modality == "audio":
            wave = aug.augment_waveform(self._wave(rec), rec.label, self.policy, seed, self.sample_rate,
                                        self.noise_pool)
            spec_fn = lambda s: aug.augment_spectrogram(s, self.policy, seed + 1)  # noqa: E731
            return audio_input(wave, self.sample_rate, self.layout, spec_fn)
        clip = read_clip(rec.video_path)
        if augmenting:
            clip = aug.augment_video(clip, self.policy, seed)
        return video_input(clip)

    def batch(self, records, epoch=None):
        return torch.from_numpy(np.stack([self.build(r, epoch) for r in records]))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    epoch: int
    train_loss: float
    dev_loss: float
    dev_wws: float | None
    header: dict
    path: str | None = None
    state_dict: dict | None = field(default=None, repr=False)

    def state(self):
        if self.state_dict is not None:
            return self.state_dict
        if self.path is None:
            raise ValidationError(f"checkpoint of epoch {self.epoch} has neither state nor path")
        return load_checkpoint(self.path)[1]


def _autocast(device, enabled):
    device = torch.device(device)
    return torch.autocast(device.type, dtype=torch.bfloat16, enabled=enabled)


@torch.no_grad()
def predict(model, builder, records, batch_size=8, device=None, with_levels=False, amp=False):
    """Posteriors (and optionally concatenated level embeddings) for ``records``."""
    device = device or next(model.parameters()).device
    was_training = model.training
    model.eval()
    probs, levels = [], []
    try:
        for i in range(0, len(records), batch_size):
            x = builder.batch(records[i : i + batch_size]).to(device, next(model.parameters()).dtype)
            with _autocast(device, amp):
                out = model(x)
            probs.append(out.prob.double().cpu().numpy())
            if with_levels:
                levels.append(torch.cat(out.levels, dim=1).double().cpu().numpy())
    finally:
        model.train(was_training)
    probs = np.concatenate(probs) if probs else np.zeros(0)
    if with_levels:
        return probs, (np.concatenate(levels) if levels else np.zeros((0, 0)))
    return probs


def train(model, train_records, dev_records, cfg, ckpt_dir=None, log_fn=None):
    """Adam + weighted BCE; one checkpoint per epoch with its dev loss and dev WWS.

    Each optimiser step covers ``cfg.batch_size`` samples, accumulated over
    micro-batches of ``cfg.micro_batch_size``. With ``ckpt_dir`` the states go
    to ``epochNNN.pt`` files, otherwise they are kept in memory.

    Training stops early once dev WWS <= ``cfg.target_dev_wws``, dev loss has
    not improved for ``cfg.patience`` epochs, or ``cfg.max_minutes`` have passed.

    Raises:
        ValidationError: empty training split.
        NumericError: non-finite loss.
    """
    if not train_records:
        raise ValidationError("training split is empty")
    if not dev_records:
        raise ValidationError("dev split is empty")
    if model.arch != cfg.arch or model.modality != cfg.modality:
        raise ValidationError(f"model is {model.arch}/{model.modality}, config asks {cfg.arch}/{cfg.modality}")
    set_determinism(cfg.seed, cfg.deterministic)
    device = next(model.parameters()).device
    layout = model_input_layout(cfg.arch) if cfg.modality == "audio" else "windows"
    builder = InputBuilder(cfg.modality, layout, cfg.policy(), cfg.sample_rate)
    dev_builder = InputBuilder(cfg.modality, layout, None, cfg.sample_rate)
    dev_labels = np.array([r.label for r in dev_records])
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    if ckpt_dir is not None:
        Path(ckpt_dir).mkdir(parents=True, exist_ok=True)

    start_time = time.perf_counter()
    order_rng = np.random.default_rng(cfg.seed)
    checkpoints = []
    best_loss, stale = math.inf, 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = order_rng.permutation(len(train_records))
        total, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_records[i] for i in order[start : start + cfg.batch_size]]
            optimizer.zero_grad(set_to_none=True)
            for m0 in range(0, len(batch), cfg.micro_batch_size):
                micro = batch[m0 : m0 + cfg.micro_batch_size]
                x = builder.batch(micro, epoch).to(device)
                y = torch.tensor([r.label for r in micro], dtype=x.dtype, device=device)
                with _autocast(device, cfg.amp):
                    prob = model(x).prob
                loss = weighted_bce(prob, y, cfg.w_neg, cfg.w_pos)
                if not torch.isfinite(loss):
                    raise NumericError(f"non-finite loss {loss.item()} at epoch {epoch}, batch starting {start}")
                (loss * len(micro) / len(batch)).backward()
                total += loss.item() * len(micro)
                seen += len(micro)
            optimizer.step()
        train_loss = total / seen

        dev_probs = predict(model, dev_builder, dev_records, cfg.micro_batch_size, device, amp=cfg.amp)
        dev_loss = weighted_bce(torch.from_numpy(dev_probs), torch.from_numpy(dev_labels).double(),
                                cfg.w_neg, cfg.w_pos).item()
        if not math.isfinite(dev_loss):
            raise NumericError(f"non-finite dev loss at epoch {epoch}")
        dev_wws = evaluate((dev_probs, dev_labels), cfg.threshold).wws
        header = make_header(model, seed=cfg.seed, epoch=epoch, dev_loss=dev_loss, dev_wws=dev_wws,
                             train_loss=train_loss)
        state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
        ckpt = Checkpoint(epoch, train_loss, dev_loss, dev_wws, header)
        if ckpt_dir is not None:
            ckpt.path = str(Path(ckpt_dir) / f"epoch{epoch:03d}.pt")
            save_checkpoint(ckpt.path, state, header)
        else:
            ckpt.state_dict = state
        checkpoints.append(ckpt)
        msg = f"epoch {epoch}: train_loss={train_loss:.4f} dev_loss={dev_loss:.4f} dev_wws={dev_wws}"
        logger.info(msg)
        if log_fn is not None:
            log_fn({"epoch": epoch, "train_loss": train_loss, "dev_loss": dev_loss, "dev_wws": dev_wws})

        if cfg.target_dev_wws is not None and dev_wws is not None and dev_wws <= cfg.target_dev_wws:
            break
        if cfg.max_minutes is not None and time.perf_counter() - start_time >= 60 * cfg.max_minutes:
            logger.info("time budget of %.1f min used up after epoch %d", cfg.max_minutes, epoch)
            break
        if dev_loss < best_loss:
            best_loss, stale = dev_loss, 0
        else:
            stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                break
    return checkpoints


# ---------------------------------------------------------------------------
# estimator
# ---------------------------------------------------------------------------


class WakeWordClassifier(BaseEstimator, ClassifierMixin):
    """Unimodal wake-word detector with a scikit-learn interface.

    ``X`` is a list of :class:`~avwws.data.SampleRecord`; labels come from the
    records unless ``y`` is given. After ``fit`` the model holds the average of
    the ``average_top_k`` checkpoints with the lowest dev loss.
    """

    def __init__(self, arch="hybrid_simam", modality="audio", epochs=50, batch_size=64,
                 micro_batch_size=8, lr=1e-3, w_neg=5.0, w_pos=1.0, seed=0, threshold=0.5,
                 target_dev_wws=None, patience=None, average_top_k=3, augment_audio=(),
                 augment_video=(), augment_prob=0.5, noise_dir=None, deterministic=False,
                 amp=False, max_minutes=None, checkpoint_dir=None):
        self.arch = arch
        self.modality = modality
        self.epochs = epochs
        self.batch_size = batch_size
        self.micro_batch_size = micro_batch_size
        self.lr = lr
        self.w_neg = w_neg
        self.w_pos = w_pos
        self.seed = seed
        self.threshold = threshold
        self.target_dev_wws = target_dev_wws
        self.patience = patience
        self.average_top_k = average_top_k
        self.augment_audio = augment_audio
        self.augment_video = augment_video
        self.augment_prob = augment_prob
        self.noise_dir = noise_dir
        self.deterministic = deterministic
        self.amp = amp
        self.max_minutes = max_minutes
        self.checkpoint_dir = checkpoint_dir

    def train_config(self):
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.get_params().items() if k in names})

    def _layout(self):
        return model_input_layout(self.arch) if self.modality == "audio" else "windows"

    def fit(self, X, y=None, dev=None):
        """Train on records ``X``; ``dev`` (records) drives checkpoint selection.

        Without ``dev`` the training records double as the dev split.
        """
        from .fusion import average_checkpoints

        records = _relabel(X, y)
        dev = list(dev) if dev is not None else records
        cfg = self.train_config()
        set_determinism(cfg.seed, cfg.deterministic)
        model = build_model(self.arch, self.modality).to(device_from_env())
        self.checkpoints_ = train(model, records, dev, cfg, ckpt_dir=self.checkpoint_dir)
        self.header_, state = average_checkpoints(self.checkpoints_, self.average_top_k)
        model.load_state_dict(state)
        model.eval()
        self.model_ = model
        self.classes_ = np.array([0, 1])
        self.history_ = [(c.epoch, c.train_loss, c.dev_loss, c.dev_wws) for c in self.checkpoints_]
        return self

    @classmethod
    def from_checkpoint(cls, path, **params):
        header, state = load_checkpoint(path)
        est = cls(arch=header["arch"], modality=header["modality"], **params)
        model = build_model(header["arch"], header["modality"], use_simam=header["use_simam"])
        model.load_state_dict(state)
        model.eval()
        est.model_ = model.to(device_from_env())
        est.header_ = header
        est.classes_ = np.array([0, 1])
        return est

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("WakeWordClassifier is not fitted yet")

    def _builder(self):
        sr = 16000
        return InputBuilder(self.modality, self._layout(), None, sr)

    def predict_proba(self, X):
        self._check_fitted()
        p = predict(self.model_, self._builder(), list(X), self.micro_batch_size, amp=self.amp)
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= self.threshold).astype(np.int64)

    def embed(self, X):
        """Concatenated level embeddings, shape (n, 64 + 128 + 256 + 512)."""
        self._check_fitted()
        return predict(self.model_, self._builder(), list(X), self.micro_batch_size, with_levels=True,
                       amp=self.amp)[1]

    def save(self, path):
        self._check_fitted()
        save_checkpoint(path, self.model_, self.header_)
        return path


def _relabel(X, y):
    records = list(X)
    if y is None:
        return records
    y = np.asarray(y)
    if len(y) != len(records):
        raise ValidationError("X and y differ in length")
    from dataclasses import replace

    return [replace(r, label=int(v)) for r, v in zip(records, y)]
