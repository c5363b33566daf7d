"""The full forecaster: embedding, stacked M3 layers, per-node regression head."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import kernel as K
from .embedding import EmbeddingParams, embed
from .kernel import Parameter, ParamStore, Tensor
from .layers import (VARIANTS, ConfigError, M3LayerParams, MLPParams, MoEParams,
                     SpatialMLPParams, m3_forward)

CKPT_MAGIC = b"M3NETCKPT1"
CKPT_VERSION = 1


@dataclass
class ModelConfig:
    N: int
    L: int = 12
    F: int = 12
    C: int = 1
    D_F: int = 32
    D_S: int = 32
    D_d: int = 32
    D_w: int = 32
    T_d: int = 288
    T_w: int = 7
    g: int = 10
    K: int = 4
    num_layers: int = 3
    variant: str = "full"
    moe_residual: bool = True
    grouping_softmax: bool = False
    layer_norm: bool = False
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant == "no_moe":
            self.K = 1
        for name in ("N", "L", "F", "C", "T_d", "T_w", "g", "K"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.num_layers < 0:
            raise ConfigError("num_layers must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def D(self) -> int:
        return self.D_F + self.D_S + self.D_d + self.D_w

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def from_mapping(cls, values: dict) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in values:
                kwargs[f.name] = coerce_value(f.type, values[f.name])
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls.from_mapping(parse_kv(text))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def coerce_value(type_name, raw):
    if not isinstance(raw, str):
        return raw
    t = type_name if isinstance(type_name, str) else getattr(type_name, "__name__", "")
    if t == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if t == "int":
        return int(raw)
    if t == "float":
        return float(raw)
    return raw


def parse_kv(text: str) -> dict[str, str]:
    """Parse flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


class M3Net:
    """Parameter layout and forward pass of the forecaster.

    With ``store`` given, parameters are looked up by name (as after loading a
    checkpoint); otherwise they are created from ``config.seed``.
    """

    def __init__(self, config: ModelConfig, store: ParamStore | None = None):
        self.config = config
        dtype = np.dtype(config.dtype).type
        self._loading = store is not None
        self._order: list[str] = []
        self.store = store if store is not None else ParamStore(config.seed, dtype)
        c = config
        D = c.D
        self.embedding = EmbeddingParams(
            W_F=self._param("embed.W_F", (c.L * c.C, c.D_F), c.L * c.C),
            b_F=self._param("embed.b_F", (c.D_F,), c.L * c.C),
            E_S=self._param("embed.E_S", (c.N, c.D_S), c.D_S),
            E_d=self._param("embed.E_d", (c.T_d, c.D_d), c.D_d),
            E_w=self._param("embed.E_w", (c.T_w, c.D_w), c.D_w),
        )
        self.layers = []
        for i in range(c.num_layers):
            pre = f"layer{i}"
            spatial = None
            if c.variant != "no_spatial":
                G = None
                if c.variant != "no_grouping":
                    G = self._param(f"{pre}.spatial.G", (c.N, c.g), c.g)
                spatial = SpatialMLPParams(G, self._mlp(f"{pre}.spatial.mlp", D))
            if c.variant == "no_moe":
                moe = MoEParams(None, None, [self._mlp(f"{pre}.moe.expert0", D)])
            else:
                moe = MoEParams(self._param(f"{pre}.moe.gate.W", (D, c.K), D),
                                self._param(f"{pre}.moe.gate.b", (c.K,), D),
                                [self._mlp(f"{pre}.moe.expert{k}", D) for k in range(c.K)])
            self.layers.append(M3LayerParams(spatial, moe))
        self.head_W = self._param("head.W", (D, c.F), D)
        self.head_b = self._param("head.b", (c.F,), D)
        if self._loading and len(self.store) != len(self._order):
            extra = sorted(set(self.store.names()) - set(self._order))
            raise ConfigError(f"checkpoint holds parameters the config does not use: {extra}")

    def _param(self, name, shape, fan_in) -> Parameter:
        self._order.append(name)
        if not self._loading:
            return self.store.create(name, shape, fan_in)
        if name not in self.store:
            raise ConfigError(f"checkpoint lacks parameter {name!r}")
        p = self.store[name]
        if p.shape != tuple(shape):
            raise ConfigError(f"parameter {name} has shape {p.shape}, config implies {tuple(shape)}")
        return p

    def _mlp(self, prefix, D) -> MLPParams:
        return MLPParams(self._param(f"{prefix}.W1", (D, D), D), self._param(f"{prefix}.b1", (D,), D),
                         self._param(f"{prefix}.W2", (D, D), D), self._param(f"{prefix}.b2", (D,), D))

    def grouping_matrices(self) -> list[np.ndarray]:
        """Per-layer grouping matrices as used in the forward pass (N x g)."""
        out = []
        for layer in self.layers:
            if layer.spatial is None or layer.spatial.G is None:
                continue
            G = layer.spatial.G
            out.append(K.softmax_rows(G).data if self.config.grouping_softmax else G.data.copy())
        return out

    def forward(self, x, tod_idx, dow_idx, variant: str | None = None) -> Tensor:
        """Normalised-scale predictions, ``B x N x F`` (or ``N x F`` for one window)."""
        c = self.config
        H = embed(x, tod_idx, dow_idx, self.embedding)
        for layer in self.layers:
            H = m3_forward(H, layer, variant or c.variant, c.moe_residual,
                           c.grouping_softmax, c.layer_norm)
        return K.affine(H, self.head_W, self.head_b)

    __call__ = forward

    def predict(self, x, tod_idx, dow_idx, stats) -> np.ndarray:
        """Raw-scale flow predictions."""
        with K.no_grad():
            out = self.forward(x, tod_idx, dow_idx).data
        return stats.denormalize_flow(out)


def parameter_count(config: ModelConfig) -> int:
    """Closed-form count, matching what :class:`M3Net` allocates."""
    c = config
    D = c.D
    mlp = 2 * (D * D + D)
    n = (c.L * c.C + 1) * c.D_F + c.N * c.D_S + c.T_d * c.D_d + c.T_w * c.D_w
    per_layer = 0
    if c.variant != "no_spatial":
        per_layer += mlp + (c.N * c.g if c.variant != "no_grouping" else 0)
    per_layer += c.K * mlp + (0 if c.variant == "no_moe" else D * c.K + c.K)
    return n + c.num_layers * per_layer + D * c.F + c.F


# ------------------------------------------------------------ checkpoints


class CheckpointError(Exception):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


class IncompatibleCheckpoint(CheckpointError):
    pass


class Checkpoint(NamedTuple):
    params: ParamStore
    config: ModelConfig
    meta: dict


def save_checkpoint(store: ParamStore, config: ModelConfig, path, meta: dict | None = None) -> None:
    text = config.to_text() + "".join(f"meta.{k}={v}\n" for k, v in (meta or {}).items())
    blob = text.encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(blob)), blob]
    for p in store:
        name = p.name.encode("utf-8")
        data = np.ascontiguousarray(p.data, dtype="<f4")
        parts += [struct.pack("<I", len(name)), name, struct.pack("<B", data.ndim),
                  struct.pack(f"<{data.ndim}I", *data.shape), data.tobytes()]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if not buf.startswith(CKPT_MAGIC):
        raise CorruptCheckpoint(f"{path}: bad magic, not an M3NETCKPT1 file")
    view = _Reader(buf, len(CKPT_MAGIC), path)
    version = view.u32()
    if version != CKPT_VERSION:
        raise IncompatibleCheckpoint(f"{path}: checkpoint version {version}, "
                                     f"this build reads version {CKPT_VERSION}")
    try:
        text = view.take(view.u32()).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptCheckpoint(f"{path}: config block is not UTF-8") from exc
    try:
        kv = parse_kv(text)
        config = ModelConfig.from_mapping({k: v for k, v in kv.items() if not k.startswith("meta.")})
    except (ValueError, TypeError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable config block ({exc})") from exc
    meta = {k[5:]: v for k, v in kv.items() if k.startswith("meta.")}
    store = ParamStore(config.seed, np.dtype(config.dtype).type)
    while not view.done():
        try:
            name = view.take(view.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpoint(f"{path}: parameter name is not UTF-8") from exc
        rank = view.take(1)[0]
        shape = tuple(view.u32() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(view.take(4 * count), dtype="<f4").reshape(shape)
        store.add(Parameter(name, values.astype(config.dtype)))
    return Checkpoint(store, config, meta)


class _Reader:
    def __init__(self, buf, pos, path):
        self.buf, self.pos, self.path = buf, pos, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpoint(f"{self.path}: truncated at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def done(self) -> bool:
        return self.pos >= len(self.buf)


def model_from_checkpoint(path) -> tuple[M3Net, dict]:
    ckpt = load_checkpoint(path)
    try:
        model = M3Net(ckpt.config, ckpt.params)
    except ConfigError as exc:
        raise CorruptCheckpoint(f"{path}: parameters do not match the stored config ({exc})") from exc
    return model, ckpt.meta
