"""Audio-visual fusion: weighted score sum, two-stage cascade and HMA.

HMA (hierarchical modality aggregation) concatenates the audio and video
embeddings pooled at the same residual level, projects every level to a
shared width, weighs the levels with a softmax attention and classifies the
weighted sum.
"""

import warnings

import numpy as np
import torch
import torch.nn as nn
from sklearn.base import BaseEstimator, ClassifierMixin

from .backbones import STAGE_WIDTHS, load_checkpoint
from .validation import ValidationError, check_binary_labels, check_in_range, check_probabilities

LEVEL_DIMS = STAGE_WIDTHS
EMBED_DIM = sum(LEVEL_DIMS)


def score_fusion(p_a, p_v, alpha=0.5, beta=0.5):
    """``alpha * p_a + beta * p_v`` with alpha + beta = 1."""
    check_in_range(alpha, 0.0, 1.0, "alpha")
    check_in_range(beta, 0.0, 1.0, "beta")
    if abs(alpha + beta - 1.0) > 1e-12:
        raise ValidationError(f"alpha + beta must equal 1, got {alpha + beta}")
    p_a = check_probabilities(p_a, "p_a")
    p_v = check_probabilities(p_v, "p_v")
    out = alpha * p_a + beta * p_v
    return float(out) if out.ndim == 0 else out


def cascaded_decision(p_v, p_a, th_l=0.1, th_h=0.4):
    """Video screens at ``th_l``; survivors are accepted when ``p_a >= th_h``."""
    if th_l > th_h:
        raise ValidationError(f"th_l={th_l} exceeds th_h={th_h}")
    p_v = check_probabilities(p_v, "p_v")
    p_a = check_probabilities(p_a, "p_a")
    out = (p_v >= th_l) & (p_a >= th_h)
    return bool(out) if out.ndim == 0 else out.astype(np.int64)


class HMAHead(nn.Module):
    """Level-wise projections, softmax attention over levels, linear classifier."""

    def __init__(self, audio_dims=LEVEL_DIMS, video_dims=LEVEL_DIMS, hidden=128):
        super().__init__()
        if len(audio_dims) != len(video_dims):
            raise ValidationError("audio and video need the same number of levels")
        self.audio_dims = tuple(audio_dims)
        self.video_dims = tuple(video_dims)
        self.proj = nn.ModuleList(nn.Linear(a + v, hidden) for a, v in zip(audio_dims, video_dims))
        self.score = nn.Sequential(nn.Linear(hidden, hidden), nn.Tanh(), nn.Linear(hidden, 1, bias=False))
        self.classifier = nn.Linear(hidden, 1)

    def forward(self, audio_levels, video_levels):
        if len(audio_levels) != len(self.proj) or len(video_levels) != len(self.proj):
            raise ValidationError(f"expected {len(self.proj)} levels per modality")
        z = []
        for l, (a, v, proj) in enumerate(zip(audio_levels, video_levels, self.proj)):
            if a.shape[-1] != self.audio_dims[l] or v.shape[-1] != self.video_dims[l]:
                raise ValidationError(
                    f"level {l}: got dims ({a.shape[-1]}, {v.shape[-1]}), "
                    f"expected ({self.audio_dims[l]}, {self.video_dims[l]})"
                )
            z.append(torch.relu(proj(torch.cat([a, v], dim=-1))))
        z = torch.stack(z, dim=-2)  # (..., L, hidden)
        weights = torch.softmax(self.score(z).squeeze(-1), dim=-1)
        pooled = (weights.unsqueeze(-1) * z).sum(dim=-2)
        return torch.sigmoid(self.classifier(pooled).squeeze(-1))


def split_levels(embeddings, dims=LEVEL_DIMS):
    """Split concatenated (..., sum(dims)) embeddings into per-level tensors."""
    if embeddings.shape[-1] != sum(dims):
        raise ValidationError(f"embedding width {embeddings.shape[-1]} != {sum(dims)}")
    return list(torch.split(embeddings, list(dims), dim=-1))


def hma_forward(audio_levels, video_levels, head):
    """Fused posterior from per-level audio and video embeddings."""
    return head([torch.as_tensor(a) for a in audio_levels], [torch.as_tensor(v) for v in video_levels])


# ---------------------------------------------------------------------------
# checkpoint averaging
# ---------------------------------------------------------------------------


def _ckpt_entry(c):
    if isinstance(c, (str, bytes)) or hasattr(c, "__fspath__"):
        header, state = load_checkpoint(c)
        return header, header.get("dev_loss"), lambda s=state: s
    if isinstance(c, tuple):
        header, state = c
        return header, header.get("dev_loss"), lambda s=state: s
    return c.header, c.dev_loss, c.state


def average_checkpoints(checkpoints, k=3):
    """Parameter-wise mean of the ``k`` checkpoints with the lowest dev loss.

    Args:
        checkpoints: :class:`~avwws.training.Checkpoint` objects, checkpoint
            paths or ``(header, state_dict)`` pairs.

    Returns:
        ``(header, state_dict)``; the header is the best checkpoint's, with
        ``averaged_epochs`` added.
    """
    entries = [_ckpt_entry(c) for c in checkpoints]
    if not entries:
        raise ValidationError("no checkpoints to average")
    archs = {(h["arch"], h["modality"], h["use_simam"]) for h, _, _ in entries}
    if len(archs) != 1:
        raise ValidationError(f"cannot average checkpoints of different architectures: {sorted(archs)}")
    if len(entries) < k:
        warnings.warn(f"only {len(entries)} checkpoints available, averaging all of them", stacklevel=2)
        k = len(entries)
    order = sorted(range(len(entries)), key=lambda i: (entries[i][1], i))
    chosen = [entries[i] for i in order[:k]]
    states = [load() for _, _, load in chosen]
    keys = set(states[0])
    if any(set(s) != keys for s in states[1:]):
        raise ValidationError("checkpoints have different parameter names")
    averaged = {}
    for key, ref in states[0].items():
        if ref.is_floating_point():
            acc = torch.zeros_like(ref, dtype=torch.float64)
            for s in states:
                if s[key].shape != ref.shape:
                    raise ValidationError(f"shape mismatch for {key}")
                acc += s[key].double()
            averaged[key] = (acc / len(states)).to(ref.dtype)
        else:
            # integer buffers (e.g. BN step counters) come from the best checkpoint
            averaged[key] = ref.clone()
    header = dict(chosen[0][0])
    header["averaged_epochs"] = [h.get("epoch") for h, _, _ in chosen]
    return header, averaged


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------


def _two_columns(X):
    X = check_probabilities(X, "X")
    if X.ndim != 2 or X.shape[1] != 2:
        raise ValidationError(f"X must have shape (n, 2) = [p_a, p_v], got {X.shape}")
    return X


class ScoreFusion(BaseEstimator, ClassifierMixin):
    """Weighted sum of audio and video posteriors; ``X`` columns are [p_a, p_v]."""

    def __init__(self, alpha=0.5, beta=0.5, threshold=0.5):
        self.alpha = alpha
        self.beta = beta
        self.threshold = threshold

    def fit(self, X, y=None):
        _two_columns(X)
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        X = _two_columns(X)
        p = score_fusion(X[:, 0], X[:, 1], self.alpha, self.beta)
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= self.threshold).astype(np.int64)


class CascadedFusion(BaseEstimator, ClassifierMixin):
    """Video-then-audio cascade; ``X`` columns are [p_a, p_v]."""

    def __init__(self, th_l=0.1, th_h=0.4):
        self.th_l = th_l
        self.th_h = th_h

    def fit(self, X, y=None):
        _two_columns(X)
        self.classes_ = np.array([0, 1])
        return self

    def predict(self, X):
        X = _two_columns(X)
        return cascaded_decision(X[:, 1], X[:, 0], self.th_l, self.th_h)


class HMAFusion(BaseEstimator, ClassifierMixin):
    """Trainable HMA head over frozen backbone embeddings.

    ``X`` rows are ``[audio levels | video levels]`` as produced by
    :meth:`~avwws.training.WakeWordClassifier.embed` for each modality,
    i.e. width 2 * 960.
    """

    def __init__(self, hidden=128, lr=1e-4, epochs=200, batch_size=64, w_neg=5.0, w_pos=1.0,
                 seed=0, threshold=0.5, standardize=True):
        self.hidden = hidden
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.w_neg = w_neg
        self.w_pos = w_pos
        self.seed = seed
        self.threshold = threshold
        self.standardize = standardize

    def _check_X(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != 2 * EMBED_DIM:
            raise ValidationError(f"X must have shape (n, {2 * EMBED_DIM}), got {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValidationError("X contains non-finite values")
        return X

    def _levels(self, X):
        X = (X - self.mean_) / self.scale_
        t = torch.from_numpy(X)
        return split_levels(t[:, :EMBED_DIM]), split_levels(t[:, EMBED_DIM:])

    def fit(self, X, y):
        from .training import weighted_bce

        X = self._check_X(X)
        y = check_binary_labels(y)
        if len(y) != len(X):
            raise ValidationError("X and y differ in length")
        if self.standardize:
            self.mean_ = X.mean(axis=0)
            self.scale_ = X.std(axis=0) + 1e-6
        else:
            self.mean_ = np.zeros(X.shape[1])
            self.scale_ = np.ones(X.shape[1])
        gen = torch.Generator().manual_seed(self.seed)
        torch.manual_seed(self.seed)
        head = HMAHead(hidden=self.hidden).double()
        opt = torch.optim.Adam(head.parameters(), lr=self.lr)
        audio, video = self._levels(X)
        target = torch.from_numpy(y.astype(np.float64))
        self.loss_curve_ = []
        for _ in range(self.epochs):
            perm = torch.randperm(len(y), generator=gen)
            total = 0.0
            for i in range(0, len(y), self.batch_size):
                idx = perm[i : i + self.batch_size]
                opt.zero_grad()
                p = head([a[idx] for a in audio], [v[idx] for v in video])
                loss = weighted_bce(p, target[idx], self.w_neg, self.w_pos)
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            self.loss_curve_.append(total / len(y))
        head.eval()
        self.head_ = head
        self.classes_ = np.array([0, 1])
        return self

    @torch.no_grad()
    def predict_proba(self, X):
        if not hasattr(self, "head_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("HMAFusion is not fitted yet")
        audio, video = self._levels(self._check_X(X))
        p = self.head_(audio, video).numpy()
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= self.threshold).astype(np.int64)
