"""Small CNN binary classifier with FuseStyle insertion points between blocks."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import CorruptionError, DimensionError, ValidationError
from .layer import FuseStyle, FuseStyleConfig, MixDecision, Mode
from .tensor import Tensor, avgpool2d, conv2d, dense, flatten, no_grad, relu

CHECKPOINT_MAGIC = b"FSMODEL1"


@dataclass(frozen=True)
class ModelConfig:
    input_shape: Tuple[int, int, int] = (3, 32, 32)
    block_channels: Tuple[int, ...] = (16, 32, 64, 64)
    # 1-based block indices; FuseStyle runs on the output of each listed block
    mix_points: Tuple[int, ...] = (1, 4)
    fusestyle: FuseStyleConfig = field(default_factory=FuseStyleConfig)
    seed: int = 0
    kernel_size: int = 3
    pool: int = 2

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "block_channels", tuple(int(v) for v in self.block_channels))
        object.__setattr__(self, "mix_points", tuple(sorted(set(int(v) for v in self.mix_points))))
        if isinstance(self.fusestyle, dict):
            object.__setattr__(self, "fusestyle", FuseStyleConfig.from_dict(self.fusestyle))
        n = len(self.block_channels)
        if n < 1:
            raise ValidationError("need at least one block")
        bad = [p for p in self.mix_points if not 1 <= p <= n]
        if bad:
            raise ValidationError(f"mix points {bad} outside blocks 1..{n}")
        _, H, W = self.input_shape
        shrink = self.pool ** n
        if H % shrink or W % shrink:
            raise ValidationError(f"input {H}x{W} is not divisible by pool^{n} = {shrink}")

    @property
    def head_features(self) -> int:
        _, H, W = self.input_shape
        shrink = self.pool ** len(self.block_channels)
        return self.block_channels[-1] * (H // shrink) * (W // shrink)

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "block_channels": list(self.block_channels),
            "mix_points": list(self.mix_points),
            "fusestyle": self.fusestyle.to_dict(),
            "seed": self.seed,
            "kernel_size": self.kernel_size,
            "pool": self.pool,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class Model:
    def __init__(self, config: ModelConfig, params: List[Tuple[str, Tensor]]):
        self.config = config
        self.named_params = params
        self.fusestyle = {p: FuseStyle(config.fusestyle) for p in config.mix_points}

    @property
    def params(self) -> List[Tensor]:
        return [t for _, t in self.named_params]

    @property
    def parameter_count(self) -> int:
        return sum(t.size for t in self.params)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self.params])

    def set_flat(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.size != self.parameter_count:
            raise DimensionError(f"expected {self.parameter_count} values, got {values.size}")
        offset = 0
        for t in self.params:
            t.data = values[offset:offset + t.size].reshape(t.shape).copy()
            offset += t.size

    def __call__(self, batch, mode=Mode.Eval, rng=None, decisions=None):
        return forward(self, batch, mode, rng, decisions)


def parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count for a config."""
    k = config.kernel_size
    total, c_in = 0, config.input_shape[0]
    for c_out in config.block_channels:
        total += c_in * c_out * k * k + c_out
        c_in = c_out
    return total + config.head_features + 1


def build_model(config: ModelConfig) -> Model:
    """Uniform +-sqrt(1/fan_in) initialisation drawn from ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    k = config.kernel_size
    params: List[Tuple[str, Tensor]] = []
    c_in = config.input_shape[0]

    def uniform(shape, fan_in):
        bound = np.sqrt(1.0 / fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    for b, c_out in enumerate(config.block_channels, start=1):
        fan_in = c_in * k * k
        params.append((f"block{b}.weight", uniform((c_out, c_in, k, k), fan_in)))
        params.append((f"block{b}.bias", uniform((c_out,), fan_in)))
        c_in = c_out
    params.append(("head.weight", uniform((1, config.head_features), config.head_features)))
    params.append(("head.bias", uniform((1,), config.head_features)))
    return Model(config, params)


def forward(
    model: Model,
    batch,
    mode: Mode = Mode.Eval,
    rng: Optional[np.random.Generator] = None,
    decisions: Optional[Sequence[MixDecision]] = None,
) -> Tuple[Tensor, List[MixDecision]]:
    """Logits for ``batch`` plus one MixDecision per mix point, in block order.

    ``decisions`` replays earlier decisions instead of sampling new ones.
    """
    mode = Mode(mode)
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    cfg = model.config
    if x.ndim != 4 or x.shape[1:] != cfg.input_shape:
        raise DimensionError(f"batch shape {x.shape} does not match input {cfg.input_shape}")
    params = model.params
    out: List[MixDecision] = []
    replay = list(decisions) if decisions is not None else None
    if replay is not None and len(replay) != len(cfg.mix_points):
        raise DimensionError(f"need {len(cfg.mix_points)} decisions to replay, got {len(replay)}")
    pad = cfg.kernel_size // 2
    h = x
    for b in range(len(cfg.block_channels)):
        h = avgpool2d(relu(conv2d(h, params[2 * b], params[2 * b + 1], 1, pad)), cfg.pool)
        layer = model.fusestyle.get(b + 1)
        if layer is not None:
            given = replay[len(out)] if replay is not None else None
            h, decision = layer(h, rng=rng, mode=mode, decision=given)
            out.append(decision)
    logits = dense(flatten(h), params[-2], params[-1])
    return logits, out


def predict(model: Model, batch) -> np.ndarray:
    with no_grad():
        logits, _ = forward(model, batch, Mode.Eval)
    return predict_from_logits(logits.data)


def predict_from_logits(logits) -> np.ndarray:
    """Label 1 iff the logit is >= 0 (sigmoid >= 0.5)."""
    return (np.asarray(logits).reshape(-1) >= 0).astype(np.int64)


def save_checkpoint(model: Model, path) -> None:
    text = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    flat = model.get_flat().astype("<f8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        fh.write(flat.tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CorruptionError(f"{path} is not a FuseStyle checkpoint")
    (n,) = struct.unpack("<I", raw[8:12])
    config = ModelConfig.from_dict(json.loads(raw[12:12 + n].decode("utf-8")))
    model = build_model(config)
    values = np.frombuffer(raw[12 + n:], dtype="<f8")
    if values.size != model.parameter_count:
        raise CorruptionError(f"{path} holds {values.size} parameters, config needs {model.parameter_count}")
    model.set_flat(values)
    return model
