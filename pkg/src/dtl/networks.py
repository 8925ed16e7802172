"""Shared encoder, end-task decoder, image-translation decoder and teacher.

Parameters live in a flat ``dict`` mapping dotted paths to leaf tensors, e.g.
``encoder.conv1.kernels``. The end-task path (encoder + ``eel.*``) never reads
``eit.*`` parameters, so the translation decoder and the teacher can be
dropped after training without touching inference.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffnum as dn
from .diffnum import Tensor

Params = dict[str, Tensor]

ENC_WIDTHS = (16, 32, 64)
FEAT = 64  # C' of the penultimate features


def _conv_shapes(prefix: str, c_out: int, c_in: int, k: int) -> list[tuple[str, tuple]]:
    return [(f"{prefix}.kernels", (c_out, c_in, k, k)), (f"{prefix}.bias", (c_out,))]


def eel_manifest(in_channels: int, out_channels: int) -> list[tuple[str, tuple]]:
    """(path, shape) of encoder + end-task decoder. out_channels = K, or 1 for depth."""
    c1, c2, c3 = ENC_WIDTHS
    return (
        _conv_shapes("encoder.conv1", c1, in_channels, 3)
        + _conv_shapes("encoder.conv2", c2, c1, 3)
        + _conv_shapes("encoder.conv3", c3, c2, 3)
        + _conv_shapes("eel.conv", FEAT, c3, 3)
        + _conv_shapes("eel.head", out_channels, FEAT, 1)
    )


def eit_manifest() -> list[tuple[str, tuple]]:
    return (
        _conv_shapes("eit.res1.conv1", FEAT, FEAT, 3)
        + _conv_shapes("eit.res1.conv2", FEAT, FEAT, 3)
        + _conv_shapes("eit.up1", 32, FEAT, 3)
        + _conv_shapes("eit.res2.conv1", 32, 32, 3)
        + _conv_shapes("eit.res2.conv2", 32, 32, 3)
        + _conv_shapes("eit.up2", 16, 32, 3)
        + _conv_shapes("eit.out", 1, 16, 3)
    )


def model_manifest(in_channels: int, out_channels: int, with_eit: bool = True) -> list[tuple[str, tuple]]:
    manifest = eel_manifest(in_channels, out_channels)
    return manifest + eit_manifest() if with_eit else manifest


# convs whose output does not pass through a ReLU get unit gain
LINEAR_OUTPUT = ("eel.head", "eit.res1.conv2", "eit.res2.conv2", "eit.out")


def init_params(manifest: list[tuple[str, tuple]], seed: int) -> Params:
    """Fan-in scaled normal kernels (Kaiming gain for ReLU layers), zero biases."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for path, shape in manifest:
        if path.endswith(".bias"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            gain = 1.0 if path.rsplit(".", 1)[0] in LINEAR_OUTPUT else 2.0
            data = rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)
        params[path] = Tensor(data, requires_grad=True)
    return params


def _conv(params: Params, name: str, x: Tensor, stride: int = 1) -> Tensor:
    w = params[f"{name}.kernels"]
    pad = w.shape[-1] // 2
    return dn.conv2d(x, w, params[f"{name}.bias"], stride=stride, padding=pad)


@dataclass
class EELOutput:
    penultimate: Tensor
    logits: Tensor | None = None
    depth: Tensor | None = None

    @property
    def prediction(self) -> Tensor:
        return self.logits if self.logits is not None else self.depth


@dataclass
class EITOutput:
    penultimate: Tensor
    image: Tensor


def encoder_forward(params: Params, x) -> Tensor:
    x = dn.as_tensor(x)
    h, w = x.shape[-2:]
    if h % 4 or w % 4:
        raise ValueError(f"input height/width must be divisible by 4, got {h}×{w}")
    expected = params["encoder.conv1.kernels"].shape[1]
    if x.shape[-3] != expected:
        raise ValueError(f"encoder expects {expected} input channels, got {x.shape[-3]}")
    x = dn.relu(_conv(params, "encoder.conv1", x))
    x = dn.relu(_conv(params, "encoder.conv2", x, stride=2))
    return dn.relu(_conv(params, "encoder.conv3", x, stride=2))


def eel_decoder_forward(params: Params, latent: Tensor, task: str = "segmentation") -> EELOutput:
    if latent.shape[-3] != ENC_WIDTHS[-1]:
        raise ValueError(f"latent must have {ENC_WIDTHS[-1]} channels, got {latent.shape}")
    feat = dn.relu(_conv(params, "eel.conv", latent))
    out = dn.upsample2x(dn.upsample2x(_conv(params, "eel.head", feat), "bilinear"), "bilinear")
    if task == "depth":
        return EELOutput(penultimate=feat, depth=dn.softplus(out))
    return EELOutput(penultimate=feat, logits=out)


def eel_forward(params: Params, x, task: str = "segmentation") -> EELOutput:
    return eel_decoder_forward(params, encoder_forward(params, x), task)


def _resblock(params: Params, name: str, x: Tensor) -> Tensor:
    inner = dn.relu(_conv(params, f"{name}.conv1", x))
    return x + _conv(params, f"{name}.conv2", inner)


def eit_decoder_forward(params: Params, penultimate: Tensor) -> EITOutput:
    if penultimate.shape[-3] != FEAT:
        raise ValueError(f"EIT decoder expects {FEAT} channels, got {penultimate.shape}")
    r1 = _resblock(params, "eit.res1", penultimate)
    x = dn.relu(_conv(params, "eit.up1", dn.upsample2x(r1, "nearest")))
    x = _resblock(params, "eit.res2", x)
    x = dn.relu(_conv(params, "eit.up2", dn.upsample2x(x, "nearest")))
    image = dn.tanh(_conv(params, "eit.out", x))
    return EITOutput(penultimate=r1, image=image)


def teacher_forward(teacher: Params, image, task: str = "segmentation") -> Tensor:
    """Class probabilities (softmax over the channel axis) or depth from an intensity image.

    Teacher parameters should not require gradients; the pass stays
    differentiable with respect to ``image``.
    """
    out = eel_forward(teacher, image, task)
    if task == "depth":
        return out.depth
    axis = 0 if out.logits.ndim == 3 else 1
    return dn.softmax(out.logits, axis=axis)


def freeze(params: Params) -> Params:
    """Copy of `params` whose tensors never accumulate gradients."""
    return {k: Tensor(v.data.copy()) for k, v in params.items()}


def checksum(t: Tensor) -> float:
    """Order-sensitive scalar digest used by the golden regression tests."""
    flat = t.data.reshape(-1)
    weights = np.cos(np.arange(flat.size) * 0.618)
    return float(flat @ weights)
