"""Mask-based two-speaker separator at configurable, desk-runnable scale.

Pipeline: a strided 1-dim conv encoder lifts the waveform into a latent
(channels x frames) representation; stacks of exponentially dilated
convolutional blocks with residual and skip connections produce per-source
sigmoid masks; masked features are mapped back to waveforms by a transposed
1-dim convolution. Training minimizes the permutation-invariant negative
Si-SNR over both source assignments.

All forward paths are built from the autodiff primitives, so losses are
differentiable (to second order) with respect to every parameter.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import dsp
from .autodiff import ParamVector, Tensor
from .dsp import Waveform

GLN_EPS = 1e-8

CHECKPOINT_FORMAT = "metasep-checkpoint-v1"
_HEADER = struct.Struct("<Q")


@dataclass(frozen=True)
class SeparatorConfig:
    """Architecture hyperparameters.

    The defaults are the desk-scale working point; the full-size published
    configuration is reachable through the same fields, it is just not
    trainable on a laptop-class budget.
    """

    enc_channels: int = 64       # latent channels produced by the encoder
    enc_kernel: int = 16         # encoder filter length in samples
    enc_stride: int = 8
    bottleneck_channels: int = 32
    conv_channels: int = 64      # channels inside each dilated block
    kernel: int = 3              # depthwise kernel length
    blocks_per_stack: int = 4    # dilations 2^0 .. 2^(X-1)
    stacks: int = 2
    num_sources: int = 2
    norm: str = "gln"            # "gln" or "none" (global layer norm couples
                                 # every frame, so probes of the pure conv
                                 # receptive field need "none")

    def __post_init__(self):
        for field in ("enc_channels", "enc_kernel", "enc_stride", "bottleneck_channels",
                      "conv_channels", "kernel", "blocks_per_stack", "stacks"):
            if getattr(self, field) <= 0:
                raise ValueError(f"{field} must be positive, got {getattr(self, field)}")
        if self.num_sources != 2:
            raise ValueError(f"this artifact separates exactly 2 sources, got {self.num_sources}")
        if self.norm not in ("gln", "none"):
            raise ValueError(f"norm must be 'gln' or 'none', got {self.norm!r}")

    def frames(self, n_samples: int) -> int:
        """Latent frame count for an n-sample input; requires clean alignment."""
        if n_samples < self.enc_kernel:
            raise ValueError(f"input of {n_samples} samples is shorter than the "
                             f"{self.enc_kernel}-sample encoder kernel")
        if (n_samples - self.enc_kernel) % self.enc_stride != 0:
            raise ValueError(
                f"input length {n_samples} does not align with kernel "
                f"{self.enc_kernel} / stride {self.enc_stride}; the decoder could "
                f"not reproduce the full length")
        return (n_samples - self.enc_kernel) // self.enc_stride + 1

    def dilations(self) -> list[int]:
        return [2 ** x for _ in range(self.stacks) for x in range(self.blocks_per_stack)]

    def receptive_field_frames(self) -> int:
        return 1 + (self.kernel - 1) * sum(self.dilations())

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SeparatorConfig":
        return cls(**dict(d))


@dataclass
class MaskSet:
    """Per-source masks over the latent representation, each value in [0, 1]."""

    masks: tuple[np.ndarray, ...]

    def __post_init__(self):
        shapes = {m.shape for m in self.masks}
        if len(shapes) != 1:
            raise ValueError(f"masks must share a shape, got {shapes}")
        for m in self.masks:
            if m.min() < 0.0 or m.max() > 1.0:
                raise ValueError("mask values must lie in [0, 1]")


# ---------------------------------------------------------------------------
# parameters


def param_shapes(config: SeparatorConfig) -> "OrderedDict[str, tuple[int, ...]]":
    h, b, hc = config.enc_channels, config.bottleneck_channels, config.conv_channels
    shapes: "OrderedDict[str, tuple[int, ...]]" = OrderedDict()
    shapes["encoder.weight"] = (h, 1, config.enc_kernel)
    shapes["bottleneck.weight"] = (b, h, 1)
    shapes["bottleneck.bias"] = (b,)
    for r in range(config.stacks):
        for x in range(config.blocks_per_stack):
            p = f"tcn.{r}.{x}."
            shapes[p + "expand.weight"] = (hc, b, 1)
            shapes[p + "expand.bias"] = (hc,)
            shapes[p + "expand.prelu"] = ()
            if config.norm == "gln":
                shapes[p + "expand.norm.gamma"] = (hc,)
                shapes[p + "expand.norm.beta"] = (hc,)
            shapes[p + "depthwise.weight"] = (hc, 1, config.kernel)
            shapes[p + "depthwise.bias"] = (hc,)
            shapes[p + "depthwise.prelu"] = ()
            if config.norm == "gln":
                shapes[p + "depthwise.norm.gamma"] = (hc,)
                shapes[p + "depthwise.norm.beta"] = (hc,)
            shapes[p + "residual.weight"] = (b, hc, 1)
            shapes[p + "residual.bias"] = (b,)
            shapes[p + "skip.weight"] = (b, hc, 1)
            shapes[p + "skip.bias"] = (b,)
    shapes["mask.prelu"] = ()
    shapes["mask.weight"] = (config.num_sources * h, b, 1)
    shapes["mask.bias"] = (config.num_sources * h,)
    shapes["decoder.weight"] = (h, 1, config.enc_kernel)
    return shapes


def init_params(config: SeparatorConfig, seed: int) -> ParamVector:
    """Seeded uniform(+-sqrt(1/fan_in)) conv weights; unit norms, 0.25 prelus."""
    rng = np.random.default_rng(seed)
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, shape in param_shapes(config).items():
        if name.endswith(".prelu"):
            arrays[name] = np.array(0.25)
        elif name.endswith("norm.gamma"):
            arrays[name] = np.ones(shape)
        elif name.endswith("norm.beta"):
            arrays[name] = np.zeros(shape)
        elif name.endswith(".weight") and len(shape) == 3:
            bound = np.sqrt(1.0 / (shape[1] * shape[2]))
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".bias"):
            w_shape = param_shapes(config)[name.replace(".bias", ".weight")]
            bound = np.sqrt(1.0 / (w_shape[1] * w_shape[2]))
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        else:  # pragma: no cover - no other shapes exist
            raise AssertionError(name)
    return ParamVector.from_arrays(arrays)


def _as_param_tensors(params: ParamVector | Mapping[str, Tensor]) -> Mapping[str, Tensor]:
    if isinstance(params, ParamVector):
        return {name: ad.tensor(params.view(name)) for name in params.names()}
    return params


# ---------------------------------------------------------------------------
# building blocks over tensors


def _prelu(x: Tensor, alpha: Tensor) -> Tensor:
    # max(x, 0) + alpha * min(x, 0)
    return ad.sub(ad.relu(x), ad.scale(ad.relu(ad.neg(x)), alpha))


def _gln(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Global layer normalization over channels and time."""
    n = x.data.size
    mu = ad.scalar_mul(1.0 / n, ad.sum_all(x))
    centered = ad.sub(x, ad.expand_scalar(mu, x.data.shape))
    var = ad.scalar_mul(1.0 / n, ad.sum_all(ad.mul(centered, centered)))
    inv = ad.div(ad.tensor(1.0), ad.sqrt(ad.add_constant(var, GLN_EPS)))
    t = x.data.shape[1]
    normed = ad.scale(centered, inv)
    return ad.add(ad.mul(normed, ad.expand_time(gamma, t)), ad.expand_time(beta, t))


def _conv_block(x: Tensor, w: Tensor, b: Tensor | None, **kw) -> Tensor:
    y = ad.conv1d(x, w, **kw)
    if b is not None:
        y = ad.add(y, ad.expand_time(b, y.data.shape[1]))
    return y


def encode_tensors(x: Tensor, p: Mapping[str, Tensor], config: SeparatorConfig) -> Tensor:
    t = x.data.shape[-1]
    config.frames(t)
    xin = ad.reshape(x, (1, t))
    return ad.conv1d(xin, p["encoder.weight"], stride=config.enc_stride)


def separate_mask_tensors(x_enc: Tensor, p: Mapping[str, Tensor],
                          config: SeparatorConfig) -> list[Tensor]:
    feat = _conv_block(x_enc, p["bottleneck.weight"], p["bottleneck.bias"])
    skip_sum: Tensor | None = None
    for r in range(config.stacks):
        for x in range(config.blocks_per_stack):
            pre = f"tcn.{r}.{x}."
            dilation = 2 ** x
            h = _conv_block(feat, p[pre + "expand.weight"], p[pre + "expand.bias"])
            h = _prelu(h, p[pre + "expand.prelu"])
            if config.norm == "gln":
                h = _gln(h, p[pre + "expand.norm.gamma"], p[pre + "expand.norm.beta"])
            h = _conv_block(h, p[pre + "depthwise.weight"], p[pre + "depthwise.bias"],
                            dilation=dilation, groups=config.conv_channels,
                            pad=dilation * (config.kernel - 1) // 2)
            h = _prelu(h, p[pre + "depthwise.prelu"])
            if config.norm == "gln":
                h = _gln(h, p[pre + "depthwise.norm.gamma"], p[pre + "depthwise.norm.beta"])
            res = _conv_block(h, p[pre + "residual.weight"], p[pre + "residual.bias"])
            skip = _conv_block(h, p[pre + "skip.weight"], p[pre + "skip.bias"])
            feat = ad.add(feat, res)
            skip_sum = skip if skip_sum is None else ad.add(skip_sum, skip)
    head = _prelu(skip_sum, p["mask.prelu"])
    logits = _conv_block(head, p["mask.weight"], p["mask.bias"])
    stacked = ad.sigmoid(logits)
    h = config.enc_channels
    return [ad.slice_channels(stacked, c * h, (c + 1) * h)
            for c in range(config.num_sources)]


def apply_mask_tensors(x_enc: Tensor, masks: Sequence[Tensor]) -> list[Tensor]:
    return [ad.mul(x_enc, m) for m in masks]


def decode_tensors(d: Tensor, p: Mapping[str, Tensor], config: SeparatorConfig) -> Tensor:
    t_frames = d.data.shape[1]
    out_len = (t_frames - 1) * config.enc_stride + config.enc_kernel
    y = ad.conv1d_input_grad(d, p["decoder.weight"], stride=config.enc_stride,
                             out_len=out_len)
    return ad.reshape(y, (out_len,))


def forward_separate_tensors(x: Tensor, p: Mapping[str, Tensor],
                             config: SeparatorConfig) -> list[Tensor]:
    x_enc = encode_tensors(x, p, config)
    masks = separate_mask_tensors(x_enc, p, config)
    return [decode_tensors(d, p, config)
            for d in apply_mask_tensors(x_enc, masks)]


# ---------------------------------------------------------------------------
# public array-level surface


def encode(x, params, config: SeparatorConfig) -> np.ndarray:
    p = _as_param_tensors(params)
    with ad.no_grad():
        return encode_tensors(ad.tensor(dsp._as_samples(x)), p, config).data


def separate_masks(x_enc: np.ndarray, params, config: SeparatorConfig) -> MaskSet:
    p = _as_param_tensors(params)
    with ad.no_grad():
        masks = separate_mask_tensors(ad.tensor(x_enc), p, config)
    return MaskSet(tuple(m.data for m in masks))


def apply_masks(x_enc: np.ndarray, masks: MaskSet) -> list[np.ndarray]:
    out = []
    for m in masks.masks:
        if m.shape != x_enc.shape:
            raise ValueError(f"mask shape {m.shape} does not match features {x_enc.shape}")
        out.append(x_enc * m)
    return out


def decode(d: np.ndarray, params, config: SeparatorConfig) -> Waveform:
    p = _as_param_tensors(params)
    with ad.no_grad():
        return Waveform(decode_tensors(ad.tensor(d), p, config).data)


def forward_separate(x, params, config: SeparatorConfig) -> tuple[Waveform, Waveform]:
    p = _as_param_tensors(params)
    with ad.no_grad():
        outs = forward_separate_tensors(ad.tensor(dsp._as_samples(x)), p, config)
    return tuple(Waveform(o.data) for o in outs)


# ---------------------------------------------------------------------------
# permutation-invariant loss


def upit_loss(estimates, sources):
    """Utterance-level permutation-invariant loss over both assignments.

    Returns (loss, permutation). With Tensor estimates the loss is a scalar
    graph node; with arrays it is a float. The permutation maps source index
    to the estimate assigned to it; ties break toward the identity.
    """
    srcs = [dsp._as_samples(s) for s in sources]
    if len(srcs) != 2 or len(estimates) != 2:
        raise ValueError("uPIT here is defined for exactly two sources")
    for s in srcs:
        if float(np.dot(s, s)) <= 0.0:
            raise dsp.ZeroSignalError("uPIT source has zero energy")

    if isinstance(estimates[0], Tensor):
        snr = [[dsp.si_snr_graph(srcs[c], estimates[e]) for e in range(2)]
               for c in range(2)]
        loss_id = ad.scalar_mul(-0.5, ad.add(snr[0][0], snr[1][1]))
        loss_swap = ad.scalar_mul(-0.5, ad.add(snr[0][1], snr[1][0]))
        if loss_id.item() <= loss_swap.item():
            return loss_id, (0, 1)
        return loss_swap, (1, 0)

    ests = [dsp._as_samples(e) for e in estimates]
    loss_id = -0.5 * (dsp.si_snr(srcs[0], ests[0]) + dsp.si_snr(srcs[1], ests[1]))
    loss_swap = -0.5 * (dsp.si_snr(srcs[0], ests[1]) + dsp.si_snr(srcs[1], ests[0]))
    if loss_id <= loss_swap:
        return loss_id, (0, 1)
    return loss_swap, (1, 0)


def mixture_loss_tensors(pair: dsp.MixturePair, p: Mapping[str, Tensor],
                         config: SeparatorConfig) -> Tensor:
    """uPIT loss graph of the separator run on one mixture."""
    estimates = forward_separate_tensors(ad.tensor(pair.mixture.samples), p, config)
    loss, _ = upit_loss(estimates, pair.sources)
    return loss


def evaluate_si_snri(pair: dsp.MixturePair, params: ParamVector,
                     config: SeparatorConfig) -> float:
    """Si-SNR improvement of the separated estimates, uPIT-aligned."""
    estimates = forward_separate(pair.mixture, params, config)
    _, perm = upit_loss(estimates, pair.sources)
    aligned = tuple(estimates[perm[c]] for c in range(2))
    return dsp.si_snr_improvement(pair, aligned)


# ---------------------------------------------------------------------------
# checkpoints


def config_hash(config: SeparatorConfig, train_config: Mapping | None = None) -> str:
    blob = json.dumps({"model": config.to_dict(), "train": dict(train_config or {})},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(path, params: ParamVector, config: SeparatorConfig,
                    extra: Mapping | None = None) -> None:
    header = {
        "format": CHECKPOINT_FORMAT,
        "config": config.to_dict(),
        "dim": params.dim,
        "layout": [[name, off, list(shape)] for name, (off, shape) in params.layout.items()],
        "extra": dict(extra or {}),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_HEADER.pack(len(blob)))
        f.write(blob)
        f.write(np.ascontiguousarray(params.values, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ParamVector, SeparatorConfig, dict]:
    raw = open(path, "rb").read()
    (hlen,) = _HEADER.unpack_from(raw)
    header = json.loads(raw[_HEADER.size:_HEADER.size + hlen])
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    values = np.frombuffer(raw, dtype="<f8", count=header["dim"],
                           offset=_HEADER.size + hlen).copy()
    layout = OrderedDict((name, (off, tuple(shape)))
                         for name, off, shape in header["layout"])
    params = ParamVector(values, layout)
    return params, SeparatorConfig.from_dict(header["config"]), header["extra"]
