"""
Retinex-induced encoder-decoder with a residual noise estimator.

Parameters live in flat ``dict[str, np.ndarray]`` maps keyed by dotted names
("encoder.down0.conv.weight", ...). Batchnorm running statistics sit in the
same maps under ``*.running_mean`` / ``*.running_var``; they are state, not
trainable, and `trainable_names` filters them out.

The encoder is four (block, 2x max-pool) steps plus a bottleneck block; the
decoder is four (block, 2x upsample, skip concat) steps, a final block and a
3-channel sigmoid head that produces the illumination map.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Mapping, MutableMapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .functional import batchnorm2d, conv2d, maxpool2d, upsample_nearest
from .tensor import DENOM_FLOOR, DimensionError, Tensor

ENCODER_WIDTHS = (8, 16, 32, 64, 64)
DENOISER_WIDTH = 8
LEAKY_SLOPE = 0.2
Z_MAX = 4.0

ParamDict = dict


def is_buffer(name: str) -> bool:
    return ".running_" in name


def trainable_names(params: Mapping[str, object]) -> list:
    return [k for k in params if not is_buffer(k)]


def _he_uniform(rng: np.random.Generator, shape: tuple, dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _block_params(prefix: str, cin: int, cout: int, rng, dtype) -> dict:
    return {
        f"{prefix}.conv.weight": _he_uniform(rng, (cout, cin, 3, 3), dtype),
        f"{prefix}.bn.gamma": np.ones(cout, dtype),
        f"{prefix}.bn.beta": np.zeros(cout, dtype),
        f"{prefix}.bn.running_mean": np.zeros(cout, dtype),
        f"{prefix}.bn.running_var": np.ones(cout, dtype),
    }


def init_encoder(rng: np.random.Generator, widths: Sequence[int] = ENCODER_WIDTHS, dtype=np.float32) -> dict:
    p = {}
    cin = 3
    for i, w in enumerate(widths[:4]):
        p.update(_block_params(f"encoder.down{i}", cin, w, rng, dtype))
        cin = w
    p.update(_block_params("encoder.bottom", cin, widths[4], rng, dtype))
    return p


def init_decoder(rng: np.random.Generator, widths: Sequence[int] = ENCODER_WIDTHS, dtype=np.float32) -> dict:
    p = {}
    cin = widths[4]
    # up0 works at the bottleneck resolution and feeds the deepest skip
    for i in range(4):
        skip = widths[3 - i]
        cout = widths[3 - i]
        p.update(_block_params(f"decoder.up{i}", cin, cout, rng, dtype))
        cin = cout + skip
    p.update(_block_params("decoder.final", cin, widths[0], rng, dtype))
    p["decoder.head.weight"] = _he_uniform(rng, (3, widths[0], 3, 3), dtype)
    p["decoder.head.bias"] = np.zeros(3, dtype)
    return p


def init_denoiser(rng: np.random.Generator, width: int = DENOISER_WIDTH, dtype=np.float32) -> dict:
    p = {}
    chans = [3, width, width, width, width, 3]
    for i in range(5):
        p[f"denoiser.conv{i}.weight"] = _he_uniform(rng, (chans[i + 1], chans[i], 3, 3), dtype)
        p[f"denoiser.conv{i}.bias"] = np.zeros(chans[i + 1], dtype)
    # the residual starts as an exact identity
    p["denoiser.conv4.weight"][...] = 0.0
    return p


@dataclass
class ParameterPartition:
    """Encoder (hyper-parameters), decoder, denoiser and optional decoder meta-init."""

    encoder: dict
    decoder: dict
    denoiser: dict
    meta_init: Optional[dict] = None

    def copy(self) -> "ParameterPartition":
        return ParameterPartition(
            copy_params(self.encoder),
            copy_params(self.decoder),
            copy_params(self.denoiser),
            copy_params(self.meta_init) if self.meta_init is not None else None,
        )

    def flat(self) -> dict:
        """Checkpoint view; meta-init keys are re-rooted under ``meta_init.``."""
        out = {**self.encoder, **self.decoder, **self.denoiser}
        if self.meta_init is not None:
            out.update({"meta_init." + k[len("decoder."):]: v for k, v in self.meta_init.items()})
        return out

    @classmethod
    def from_flat(cls, flat: Mapping[str, np.ndarray]) -> "ParameterPartition":
        groups: dict = {"encoder": {}, "decoder": {}, "denoiser": {}, "meta_init": {}}
        for k, v in flat.items():
            root = k.split(".", 1)[0]
            if root not in groups:
                raise KeyError(f"unexpected parameter group in {k!r}")
            if root == "meta_init":
                groups[root]["decoder." + k.split(".", 1)[1]] = v
            else:
                groups[root][k] = v
        return cls(groups["encoder"], groups["decoder"], groups["denoiser"], groups["meta_init"] or None)


def init_partition(seed_rng: np.random.Generator, dtype=np.float32, denoiser_width: int = DENOISER_WIDTH) -> ParameterPartition:
    return ParameterPartition(
        init_encoder(seed_rng, dtype=dtype),
        init_decoder(seed_rng, dtype=dtype),
        init_denoiser(seed_rng, width=denoiser_width, dtype=dtype),
    )


def copy_params(p: Mapping[str, np.ndarray]) -> dict:
    return {k: np.array(v, copy=True) for k, v in p.items()}


def cast_params(p: Mapping[str, np.ndarray], dtype) -> dict:
    return {k: np.asarray(v, dtype=dtype).copy() for k, v in p.items()}


def checksum(p: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(p):
        arr = np.ascontiguousarray(p[k])
        h.update(k.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def _arr(v) -> np.ndarray:
    return v.data if isinstance(v, Tensor) else np.asarray(v)


def _block(x: Tensor, p: Mapping, prefix: str, training: bool, stats_out) -> Tensor:
    x = conv2d(x, p[prefix + ".conv.weight"], None, padding=1)
    x = batchnorm2d(
        x,
        p[prefix + ".bn.gamma"],
        p[prefix + ".bn.beta"],
        _arr(p[prefix + ".bn.running_mean"]),
        _arr(p[prefix + ".bn.running_var"]),
        training=training,
        stats_out=stats_out,
        key=prefix + ".bn",
    )
    return T.leaky_relu(x, LEAKY_SLOPE)


def encode(y: Tensor, u: Mapping, training: bool = True, stats_out=None) -> list:
    """Return the skip features (full, 1/2, 1/4, 1/8 res) and the bottleneck."""
    feats = []
    h = y
    for i in range(4):
        h = _block(h, u, f"encoder.down{i}", training, stats_out)
        feats.append(h)
        h = maxpool2d(h, 2)
    feats.append(_block(h, u, "encoder.bottom", training, stats_out))
    return feats


def decode(feats: Sequence[Tensor], v: Mapping, training: bool = True, stats_out=None) -> Tensor:
    h = feats[4]
    for i in range(4):
        h = _block(h, v, f"decoder.up{i}", training, stats_out)
        h = upsample_nearest(h, 2)
        h = T.concat([h, feats[3 - i]], axis=1)
    h = _block(h, v, "decoder.final", training, stats_out)
    h = conv2d(h, v["decoder.head.weight"], v["decoder.head.bias"], padding=1)
    return T.sigmoid(h)


def check_spatial(shape: tuple) -> None:
    if len(shape) != 4 or shape[1] != 3:
        raise DimensionError(f"expected an [N,3,H,W] image batch, got {shape}")
    if shape[2] % 16 or shape[3] % 16:
        raise DimensionError(f"spatial axes H={shape[2]}, W={shape[3]} must be divisible by 16")


def estimate_illumination(
    y,
    u: Mapping,
    v: Mapping,
    enc_training: bool = True,
    dec_training: bool = True,
    stats_out: Optional[MutableMapping] = None,
) -> Tensor:
    y = T.as_tensor(y)
    check_spatial(y.shape)
    feats = encode(y, u, enc_training, stats_out)
    return decode(feats, v, dec_training, stats_out)


def reflectance(y, x: Tensor, z_max: float = Z_MAX) -> Tensor:
    """z = y / max(x, floor), clipped to [0, z_max]."""
    return T.clamp(T.div(y, x, clamp=True, floor=DENOM_FLOOR), 0.0, z_max)


def noise_map(z, g: Mapping) -> Tensor:
    h = T.as_tensor(z)
    for i in range(5):
        h = conv2d(h, g[f"denoiser.conv{i}.weight"], g[f"denoiser.conv{i}.bias"], padding=1)
        if i < 4:
            h = T.relu(h)
    return h


def denoise(z, g: Mapping) -> tuple:
    """Return (clamp(z - G(z), 0, 1), G(z))."""
    n = noise_map(z, g)
    return T.clamp(T.sub(z, n), 0.0, 1.0), n


@dataclass
class Enhanced:
    illumination: Tensor
    reflectance: Tensor
    noise: Optional[Tensor]
    output: Tensor


def run_pipeline(
    y,
    u: Mapping,
    v: Mapping,
    g: Optional[Mapping],
    enc_training: bool = False,
    dec_training: bool = False,
    stats_out=None,
) -> Enhanced:
    """All intermediates of the enhancement; ``g=None`` skips the denoiser."""
    x = estimate_illumination(y, u, v, enc_training, dec_training, stats_out)
    z = reflectance(y, x)
    if g is None:
        return Enhanced(x, z, None, T.clamp(z, 0.0, 1.0))
    out, n = denoise(z, g)
    return Enhanced(x, z, n, out)


def enhance(y, u: Mapping, v: Mapping, g: Optional[Mapping], training: bool = False) -> Tensor:
    return run_pipeline(y, u, v, g, training, training).output


def as_leaves(params: Mapping[str, np.ndarray], names=None, prefix: str = "") -> dict:
    """Wrap trainable arrays as named leaf tensors; buffers pass through as arrays."""
    wanted = set(trainable_names(params) if names is None else names)
    out = {}
    for k, v in params.items():
        if k in wanted:
            out[k] = Tensor(v, requires_grad=True, name=prefix + k)
        else:
            out[k] = v
    return out
