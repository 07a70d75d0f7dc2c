"""Desk-scale networks: the action classifier and the 3D APE-GAN pair.

All models are channels-last and expose ``named_parameters()`` in a fixed
declaration order, which is also the order used by checkpoints.
"""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor


class Model:
    """Base class: an ordered parameter table plus a pure forward function."""

    kind = "model"

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        p = Tensor(value, requires_grad=True)
        self._params[name] = p
        return p

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in self._params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {k}: expected shape {p.shape}, got {arr.shape}")
            p.data = np.array(arr, dtype=p.dtype)

    def zero_grad(self) -> None:
        T.zero_grad(self.parameters())

    def descriptor(self) -> dict:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x if isinstance(x, Tensor) else Tensor(x))

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError


def _kaiming(rng: Rng, shape: Sequence[int], fan_in: int, gain: float = 2.0, dtype=np.float32) -> np.ndarray:
    return (rng.normal(0.0, np.sqrt(gain / fan_in), size=tuple(shape))).astype(dtype)


class ClassifierF(Model):
    """Three [conv 3x3x3 -> relu -> 2x max-pool] blocks, global average pool, linear head."""

    kind = "classifier"

    def __init__(self, num_classes: int, widths: Sequence[int] = (16, 32, 64), in_channels: int = 3,
                 seed: int = 0, dtype=np.float32):
        super().__init__()
        self.num_classes = int(num_classes)
        self.widths = tuple(int(w) for w in widths)
        self.in_channels = int(in_channels)
        rng = Rng(seed, "init/classifier")
        cin = self.in_channels
        for i, cout in enumerate(self.widths):
            self.add_param(f"conv{i}.w", _kaiming(rng, (3, 3, 3, cin, cout), 27 * cin, dtype=dtype))
            self.add_param(f"conv{i}.b", np.zeros(cout, dtype=dtype))
            cin = cout
        self.add_param("fc.w", _kaiming(rng, (cin, self.num_classes), cin, gain=1.0, dtype=dtype))
        self.add_param("fc.b", np.zeros(self.num_classes, dtype=dtype))

    def descriptor(self) -> dict:
        return {"kind": self.kind, "num_classes": self.num_classes, "widths": list(self.widths),
                "in_channels": self.in_channels}

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 5 or x.shape[-1] != self.in_channels:
            raise ValueError(f"classify: expected (B,T,H,W,{self.in_channels}) clips, got {x.shape}")
        p = self._params
        h = x - 0.5
        for i in range(len(self.widths)):
            h = T.conv3d(h, p[f"conv{i}.w"], p[f"conv{i}.b"], stride=1, padding=1)
            h = T.max_pool3d(T.relu(h), 2)
        h = T.global_avg_pool(h)
        return T.matmul(h, p["fc.w"]) + p["fc.b"]


class GeneratorG(Model):
    """Encoder of 4x4x4/stride-2/pad-1 convs, mirrored transposed-conv decoder.

    The decoder predicts a correction that is added to the input before the
    final clamp to [0, 1]. A strided bottleneck cannot reproduce pixel-level
    corrections, so an optional full-resolution branch (two 3x3x3 convs of
    ``refine`` channels and a 1x1x1 projection) adds its own correction.
    Output layers start near zero so an untrained generator is close to the
    identity map.
    """

    kind = "generator"

    def __init__(self, channels: int = 3, widths: Sequence[int] = (32, 64), seed: int = 0,
                 dtype=np.float32, refine: int = 32):
        super().__init__()
        self.channels = int(channels)
        self.widths = tuple(int(w) for w in widths)
        self.refine = int(refine)
        rng = Rng(seed, "init/generator")
        cin = self.channels
        for i, cout in enumerate(self.widths):
            self.add_param(f"enc{i}.w", _kaiming(rng, (4, 4, 4, cin, cout), 64 * cin, dtype=dtype))
            self.add_param(f"enc{i}.b", np.zeros(cout, dtype=dtype))
            cin = cout
        outs = list(reversed(self.widths[:-1])) + [self.channels]
        for i, cout in enumerate(outs):
            last = i == len(outs) - 1
            # transposed kernel layout (k,k,k,C_out,C_in); fan-in per output voxel ~ 8*C_in
            w = _kaiming(rng, (4, 4, 4, cout, cin), 8 * cin, dtype=dtype)
            self.add_param(f"dec{i}.w", w * (0.01 if last else 1.0))
            self.add_param(f"dec{i}.b", np.zeros(cout, dtype=dtype))
            cin = cout
        if self.refine:
            r, c = self.refine, self.channels
            self.add_param("ref0.w", _kaiming(rng, (3, 3, 3, c, r), 27 * c, dtype=dtype))
            self.add_param("ref0.b", np.zeros(r, dtype=dtype))
            self.add_param("ref1.w", _kaiming(rng, (3, 3, 3, r, r), 27 * r, dtype=dtype))
            self.add_param("ref1.b", np.zeros(r, dtype=dtype))
            self.add_param("ref2.w", _kaiming(rng, (1, 1, 1, r, c), r, dtype=dtype) * 0.01)
            self.add_param("ref2.b", np.zeros(c, dtype=dtype))

    @property
    def stride(self) -> int:
        return 2 ** len(self.widths)

    def descriptor(self) -> dict:
        return {"kind": self.kind, "channels": self.channels, "widths": list(self.widths), "refine": self.refine}

    def forward(self, x: Tensor) -> Tensor:
        s = self.stride
        if x.ndim != 5 or any(n % s for n in x.shape[1:4]):
            raise ValueError(f"generator: T,H,W of {x.shape} must be divisible by {s}")
        p = self._params
        h = x - 0.5
        for i in range(len(self.widths)):
            h = T.relu(T.conv3d(h, p[f"enc{i}.w"], p[f"enc{i}.b"], stride=2, padding=1))
        n_dec = len(self.widths)
        for i in range(n_dec):
            h = T.conv_transpose3d(h, p[f"dec{i}.w"], p[f"dec{i}.b"], stride=2, padding=1)
            if i < n_dec - 1:
                h = T.relu(h)
        if self.refine:
            r = T.relu(T.conv3d(x - 0.5, p["ref0.w"], p["ref0.b"], padding=1))
            r = T.relu(T.conv3d(r, p["ref1.w"], p["ref1.b"], padding=1))
            h = h + T.conv3d(r, p["ref2.w"], p["ref2.b"])
        return T.clamp(x + h, 0.0, 1.0)


class DiscriminatorD(Model):
    """Three strided conv blocks, global pooling, one logit per clip.

    ``forward`` returns the logit; :meth:`prob` applies the sigmoid. Losses use
    the logit through ``log_sigmoid`` for numerical stability.
    """

    kind = "discriminator"

    def __init__(self, channels: int = 3, widths: Sequence[int] = (16, 32, 64), seed: int = 0,
                 dtype=np.float32):
        super().__init__()
        self.channels = int(channels)
        self.widths = tuple(int(w) for w in widths)
        rng = Rng(seed, "init/discriminator")
        cin = self.channels
        for i, cout in enumerate(self.widths):
            self.add_param(f"conv{i}.w", _kaiming(rng, (4, 4, 4, cin, cout), 64 * cin, dtype=dtype))
            self.add_param(f"conv{i}.b", np.zeros(cout, dtype=dtype))
            cin = cout
        self.add_param("fc.w", _kaiming(rng, (cin, 1), cin, gain=1.0, dtype=dtype))
        self.add_param("fc.b", np.zeros(1, dtype=dtype))

    def descriptor(self) -> dict:
        return {"kind": self.kind, "channels": self.channels, "widths": list(self.widths)}

    def forward(self, x: Tensor) -> Tensor:
        p = self._params
        h = x - 0.5
        for i in range(len(self.widths)):
            h = T.relu(T.conv3d(h, p[f"conv{i}.w"], p[f"conv{i}.b"], stride=2, padding=1))
        h = T.global_avg_pool(h)
        return T.reshape(T.matmul(h, p["fc.w"]) + p["fc.b"], (x.shape[0],))

    def prob(self, x: Tensor) -> Tensor:
        return T.sigmoid(self(x))


class Composite(Model):
    """``outer(inner(x))``; used to attack and train F through a denoising generator."""

    kind = "composite"

    def __init__(self, inner: Model, outer: Model):
        super().__init__()
        self.inner = inner
        self.outer = outer
        for name, p in inner.named_parameters():
            self._params[f"inner.{name}"] = p
        for name, p in outer.named_parameters():
            self._params[f"outer.{name}"] = p

    def forward(self, x: Tensor) -> Tensor:
        return self.outer(self.inner(x))


class Identity(Model):
    kind = "identity"

    def descriptor(self) -> dict:
        return {"kind": self.kind}

    def forward(self, x: Tensor) -> Tensor:
        return x


def classify(model: Model, clips) -> Tensor:
    """Logits for a batch ``(B,T,H,W,C)`` or a single clip ``(T,H,W,C)`` (returns ``(1,K)``)."""
    x = clips if isinstance(clips, Tensor) else Tensor(clips)
    if x.ndim == 4:
        x = T.reshape(x, (1, *x.shape))
    return model(x)


def build_model(desc: dict, seed: int = 0) -> Model:
    kind = desc.get("kind")
    if kind == "classifier":
        return ClassifierF(desc["num_classes"], desc.get("widths", (16, 32, 64)),
                           desc.get("in_channels", 3), seed=seed)
    if kind == "generator":
        return GeneratorG(desc.get("channels", 3), desc.get("widths", (32, 64)), seed=seed,
                          refine=desc.get("refine", 0))
    if kind == "discriminator":
        return DiscriminatorD(desc.get("channels", 3), desc.get("widths", (16, 32, 64)), seed=seed)
    raise ValueError(f"unknown architecture kind {kind!r}")
