"""Unimodal wake-word networks and the SimAM attention they use.

Four architectures, all returning a posterior and four pooled level
embeddings of widths (64, 128, 256, 512):

* ``resnet2d34``  -- 2D ResNet34 over the (1, 256, 80) spectrogram image.
* ``resnet3d34``  -- 3D ResNet34 over (C, 64, H, W) audio windows or lip frames.
* ``hybrid``      -- 3D ResNet18, spatially averaged to (512, T'), viewed as a
  one-channel (T', 512) image and passed through a 2D ResNet18.
* ``hybrid_simam`` -- ``hybrid`` with SimAM inside every residual block.
"""

from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .validation import ValidationError

ARCHITECTURES = ("resnet2d34", "resnet3d34", "hybrid", "hybrid_simam")
STAGE_WIDTHS = (64, 128, 256, 512)
INPUT_SHAPES = {
    "audio": (1, 64, 80, 80),
    "video": (3, 64, 112, 112),
}
SPECTROGRAM_SHAPE = (1, 256, 80)
DEFAULT_LAMBDA = 1e-3


# ---------------------------------------------------------------------------
# SimAM
# ---------------------------------------------------------------------------


def _peer_stats(d2_sum, d, m):
    """Mean offset and variance of the m-1 peers of each neuron.

    ``d`` is each neuron's deviation from the full-channel mean and ``d2_sum``
    the channel's sum of squared deviations. Returns ``(t - peer_mean, peer_var)``.
    """
    diff = d * (m / (m - 1))
    var = (d2_sum - d * d * (m / (m - 1))) / (m - 1)
    return diff, var


def simam_energy(x, e_lambda=DEFAULT_LAMBDA, peers_only=True):
    """Closed-form minimal energy of every neuron in a 1-D channel.

    ``4 (var + lambda) / ((t - mean)^2 + 2 var + 2 lambda)``. With
    ``peers_only`` the mean and (population) variance are taken over the other
    M-1 neurons, which makes this the exact minimum of the regularised
    energy; otherwise over all M neurons, as in the usual SimAM shortcut.
    """
    if e_lambda <= 0:
        raise ValidationError("lambda must be positive")
    x = np.asarray(x, dtype=np.float64).ravel()
    m = x.size
    if m < 2:
        raise ValidationError("a channel needs at least two neurons")
    d = x - x.mean()
    if peers_only:
        diff, var = _peer_stats(np.sum(d * d), d, m)
        var = np.maximum(var, 0.0)
    else:
        diff, var = d, np.mean(d * d)
    return 4.0 * (var + e_lambda) / (diff**2 + 2.0 * var + 2.0 * e_lambda)


def simam(x, e_lambda=DEFAULT_LAMBDA, batched=True, peers_only=True):
    """Scale each neuron by sigmoid(1 / minimal energy).

    Statistics are per channel over every non-channel axis, so a 3D feature
    map (C, H, W) uses M = H*W and a 4D one (C, T, H, W) uses M = T*H*W.

    Args:
        x: tensor; with ``batched`` the layout is (N, C, ...), else (C, ...).
    """
    if e_lambda <= 0:
        raise ValidationError("lambda must be positive")
    first = 2 if batched else 1
    if x.dim() <= first:
        raise ValidationError(f"simam needs spatial axes, got shape {tuple(x.shape)}")
    dims = tuple(range(first, x.dim()))
    m = 1
    for i in dims:
        m *= x.shape[i]
    if m < 2:
        raise ValidationError("simam needs at least two neurons per channel")
    d = x - x.mean(dim=dims, keepdim=True)
    d2 = d.pow(2)
    if peers_only:
        diff, var = _peer_stats(d2.sum(dim=dims, keepdim=True), d, m)
        var = var.clamp_min(0.0)
        diff2 = diff.pow(2)
    else:
        diff2, var = d2, d2.mean(dim=dims, keepdim=True)
    inv_energy = (diff2 + 2 * var + 2 * e_lambda) / (4 * (var + e_lambda))
    return x * torch.sigmoid(inv_energy)


class SimAM(nn.Module):
    """Parameter-free attention; see :func:`simam`."""

    def __init__(self, e_lambda=DEFAULT_LAMBDA, peers_only=True):
        super().__init__()
        if e_lambda <= 0:
            raise ValidationError("lambda must be positive")
        self.e_lambda = e_lambda
        self.peers_only = peers_only

    def forward(self, x):
        return simam(x, self.e_lambda, peers_only=self.peers_only)

    def extra_repr(self):
        return f"e_lambda={self.e_lambda}, peers_only={self.peers_only}"


# ---------------------------------------------------------------------------
# residual networks
# ---------------------------------------------------------------------------


def _ops(dim):
    if dim == 2:
        return nn.Conv2d, nn.BatchNorm2d, nn.MaxPool2d
    return nn.Conv3d, nn.BatchNorm3d, nn.MaxPool3d


class BasicBlock(nn.Module):
    def __init__(self, dim, in_ch, out_ch, stride=1, use_simam=False, e_lambda=DEFAULT_LAMBDA):
        super().__init__()
        Conv, BN, _ = _ops(dim)
        self.conv1 = Conv(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = BN(out_ch)
        self.conv2 = Conv(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = BN(out_ch)
        self.relu = nn.ReLU(inplace=True)
        self.attn = SimAM(e_lambda) if use_simam else nn.Identity()
        strided = stride != 1 and stride != (1,) * dim
        if strided or in_ch != out_ch:
            self.downsample = nn.Sequential(Conv(in_ch, out_ch, 1, stride, bias=False), BN(out_ch))
        else:
            self.downsample = None

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.attn(self.bn2(self.conv2(out)))
        identity = x if self.downsample is None else self.downsample(x)
        return self.relu(out + identity)


class FramePool(nn.Module):
    """3x3 spatial max-pool applied to every frame of a (N, C, T, H, W) map.

    Same result as ``MaxPool3d((1, 3, 3), (1, s, s), (0, 1, 1))``, but pools
    the (N, C*T, H, W) view with the much faster 2D kernel.
    """

    def __init__(self, stride):
        super().__init__()
        self.stride = stride

    def forward(self, x):
        n, c, t, h, w = x.shape
        y = F.max_pool2d(x.reshape(n, c * t, h, w), 3, self.stride, 1)
        return y.view(n, c, t, *y.shape[-2:])


class ResNet(nn.Module):
    """Stem + four residual stages; ``forward`` returns every stage output.

    Args:
        dim: 2 or 3 (convolution dimensionality).
        layers: blocks per stage, e.g. (3, 4, 6, 3) for ResNet34.
        stage_strides: stride of the first block of each stage.
    """

    def __init__(self, dim, in_channels, layers, stem_kernel, stem_stride, pool_stride,
                 stage_strides, use_simam=False, e_lambda=DEFAULT_LAMBDA):
        super().__init__()
        Conv, BN, Pool = _ops(dim)
        padding = tuple(k // 2 for k in stem_kernel)
        pool_kernel = tuple(3 if s > 1 else 1 for s in pool_stride)
        self.stem = nn.Sequential(
            Conv(in_channels, STAGE_WIDTHS[0], stem_kernel, stem_stride, padding, bias=False),
            BN(STAGE_WIDTHS[0]),
            nn.ReLU(inplace=True),
            FramePool(pool_stride[1]) if dim == 3 and pool_stride[0] == 1 and pool_stride[1] == pool_stride[2]
            else Pool(pool_kernel, pool_stride, tuple(k // 2 for k in pool_kernel)),
        )
        stages = []
        in_ch = STAGE_WIDTHS[0]
        for width, n_blocks, stride in zip(STAGE_WIDTHS, layers, stage_strides):
            blocks = [BasicBlock(dim, in_ch, width, stride, use_simam, e_lambda)]
            blocks += [BasicBlock(dim, width, width, 1, use_simam, e_lambda) for _ in range(n_blocks - 1)]
            stages.append(nn.Sequential(*blocks))
            in_ch = width
        self.stages = nn.ModuleList(stages)
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Conv3d)):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def forward(self, x):
        x = self.stem(x)
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs


def resnet2d(layers, in_channels=1, use_simam=False, e_lambda=DEFAULT_LAMBDA):
    return ResNet(2, in_channels, layers, (7, 7), (2, 2), (2, 2), (1, 2, 2, 2), use_simam, e_lambda)


def resnet3d(layers, in_channels, use_simam=False, e_lambda=DEFAULT_LAMBDA):
    # time is kept at full rate through stage 1 and halved in stages 2-4 (64 -> 8)
    return ResNet(3, in_channels, layers, (3, 7, 7), (1, 2, 2), (1, 2, 2),
                  (1, 2, 2, 2), use_simam, e_lambda)


def _gap(x):
    return x.flatten(2).mean(dim=2)


class ModelOutput(NamedTuple):
    prob: torch.Tensor
    logit: torch.Tensor
    levels: list


class WakeWordNet(nn.Module):
    """Common head: global average pool of the last stage -> linear -> sigmoid."""

    arch = None

    def __init__(self, modality):
        super().__init__()
        if modality not in INPUT_SHAPES:
            raise ValidationError(f"unknown modality {modality!r}")
        self.modality = modality
        self.head = nn.Linear(STAGE_WIDTHS[-1], 1)

    @property
    def input_shape(self):
        return INPUT_SHAPES[self.modality]

    def check_input(self, x):
        if x.dim() != 1 + len(self.input_shape) or tuple(x.shape[1:]) != self.input_shape:
            raise ValidationError(
                f"{self.arch} ({self.modality}) expects (N, {', '.join(map(str, self.input_shape))}), "
                f"got {tuple(x.shape)}"
            )

    def features(self, x):
        """Return (final pooled vector, list of four level embeddings)."""
        raise NotImplementedError

    def forward(self, x):
        pooled, levels = self.features(x)
        # under autocast the trunk may run in bfloat16; the head stays in full precision
        dtype = self.head.weight.dtype
        with torch.autocast(x.device.type, enabled=False):
            logit = self.head(pooled.to(dtype)).squeeze(-1)
        return ModelOutput(torch.sigmoid(logit), logit, [lv.to(dtype) for lv in levels])


class ResNet2d34(WakeWordNet):
    """2D ResNet34.

    Audio: the spectrogram is a single one-channel image. Accepts (N, 1, 256, 80)
    directly, or the (N, 1, 64, 80, 80) window tensor, which is folded back
    into the spectrogram first.

    Video: every frame goes through the network on its own and the pooled
    embeddings are averaged over time.
    """

    arch = "resnet2d34"

    def __init__(self, modality="audio", use_simam=False, e_lambda=DEFAULT_LAMBDA):
        super().__init__(modality)
        self.use_simam = use_simam
        self.backbone = resnet2d((3, 4, 6, 3), INPUT_SHAPES[modality][0], use_simam, e_lambda)

    @property
    def input_shape(self):
        return SPECTROGRAM_SHAPE if self.modality == "audio" else INPUT_SHAPES["video"]

    def features(self, x):
        if self.modality == "audio" and x.dim() == 5 and tuple(x.shape[1:]) == INPUT_SHAPES["audio"]:
            # rows 0-3 of each stride-4 window tile the 256 spectrogram frames
            x = x[:, :, :, :4, :].reshape(x.shape[0], 1, 256, 80)
        self.check_input(x)
        if self.modality == "audio":
            return self._pool(self.backbone(x))
        n, c, t, h, w = x.shape
        frames = x.transpose(1, 2).reshape(n * t, c, h, w)
        levels = [_gap(o).view(n, t, -1).mean(dim=1) for o in self.backbone(frames)]
        return levels[-1], levels

    @staticmethod
    def _pool(outs):
        levels = [_gap(o) for o in outs]
        return levels[-1], levels


class ResNet3d34(WakeWordNet):
    arch = "resnet3d34"

    def __init__(self, modality="audio", use_simam=False, e_lambda=DEFAULT_LAMBDA):
        super().__init__(modality)
        self.use_simam = use_simam
        self.backbone = resnet3d((3, 4, 6, 3), INPUT_SHAPES[modality][0], use_simam, e_lambda)

    def features(self, x):
        self.check_input(x)
        outs = self.backbone(x)
        levels = [_gap(o) for o in outs]
        return levels[-1], levels


class Hybrid3d2d(WakeWordNet):
    """3D ResNet18 followed by a 2D ResNet18 over the (T', 512) latent image.

    Level taps: stage-1 pool of the 3D part, then stages 2-4 of the 2D part.
    """

    arch = "hybrid"

    def __init__(self, modality="audio", use_simam=False, e_lambda=DEFAULT_LAMBDA):
        super().__init__(modality)
        self.use_simam = use_simam
        self.front3d = resnet3d((2, 2, 2, 2), INPUT_SHAPES[modality][0], use_simam, e_lambda)
        self.back2d = resnet2d((2, 2, 2, 2), 1, use_simam, e_lambda)

    def latent(self, x):
        """3D stage outputs and the (N, 1, T', 512) latent image."""
        self.check_input(x)
        outs3d = self.front3d(x)
        seq = outs3d[-1].mean(dim=(3, 4))  # (N, 512, T')
        return outs3d, seq.transpose(1, 2).unsqueeze(1)

    def features(self, x):
        outs3d, image = self.latent(x)
        outs2d = self.back2d(image)
        levels = [_gap(outs3d[0])] + [_gap(o) for o in outs2d[1:]]
        return levels[-1], levels


class HybridSimAM(Hybrid3d2d):
    arch = "hybrid_simam"

    def __init__(self, modality="audio", use_simam=True, e_lambda=DEFAULT_LAMBDA):
        super().__init__(modality, use_simam=use_simam, e_lambda=e_lambda)


_REGISTRY = {cls.arch: cls for cls in (ResNet2d34, ResNet3d34, Hybrid3d2d, HybridSimAM)}


def build_model(arch, modality="audio", e_lambda=DEFAULT_LAMBDA, **kwargs):
    """Instantiate an architecture by id (see ``ARCHITECTURES``)."""
    if arch not in _REGISTRY:
        raise ValidationError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")
    return _REGISTRY[arch](modality=modality, e_lambda=e_lambda, **kwargs)


def count_parameters(model, trainable_only=True):
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


def model_input_layout(arch):
    """Front-end layout feeding an architecture: 'spectrogram' or 'windows'."""
    return "spectrogram" if arch == "resnet2d34" else "windows"


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

HEADER_KEYS = ("arch", "modality", "use_simam", "seed", "epoch", "dev_loss")


def make_header(model, seed=None, epoch=None, dev_loss=None, **extra):
    return {
        "arch": model.arch,
        "modality": model.modality,
        "use_simam": bool(model.use_simam),
        "seed": seed,
        "epoch": epoch,
        "dev_loss": dev_loss,
        **extra,
    }


def save_checkpoint(path, model_or_state, header):
    state = model_or_state.state_dict() if isinstance(model_or_state, nn.Module) else model_or_state
    missing = [k for k in HEADER_KEYS if k not in header]
    if missing:
        raise ValidationError(f"checkpoint header missing {missing}")
    torch.save({"header": dict(header), "state_dict": {k: v.detach().cpu() for k, v in state.items()}}, path)


def load_checkpoint(path):
    """Return ``(header, state_dict)``."""
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(blob, dict) or "header" not in blob or "state_dict" not in blob:
        raise ValidationError(f"{path} is not a checkpoint file")
    return blob["header"], blob["state_dict"]


def model_from_checkpoint(path):
    header, state = load_checkpoint(path)
    model = build_model(header["arch"], header["modality"], use_simam=header["use_simam"])
    model.load_state_dict(state)
    model.eval()
    return model, header
