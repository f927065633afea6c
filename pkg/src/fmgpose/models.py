"""Sequence regressors mapping an H x n sensor window to elbow/wrist positions.

Four architectures share one interface: a pre-norm Transformer encoder with
separate elbow/wrist/reconstruction heads, a flattened fully-connected
baseline, a trend/seasonal decomposed linear model, and a strided temporal
CNN. All are built on the tape engine in :mod:`fmgpose.autodiff`, so the
same forward code serves training and inference.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Tensor
from .dataset import Normalizer


class CheckpointError(ValueError):
    """Bad magic, version, or architecture mismatch on checkpoint load."""


@dataclass
class ModelOutput:
    """Batched predictions; x_recon/attn are None where a model has neither."""

    p_el: Tensor
    p_wr: Tensor
    x_recon: Tensor | None = None
    attn: list[np.ndarray] | None = None


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(np.float32)


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    """Fixed sin/cos position table, shape (length, dim), float32."""
    pos = np.arange(length)[:, None].astype(np.float64)
    i = np.arange(0, dim, 2).astype(np.float64)
    angles = pos / np.power(10000.0, i / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles[:, : pe[:, 1::2].shape[1]])
    return pe.astype(np.float32)


class BaseModel:
    """Shared parameter bookkeeping for all architectures."""

    arch = "base"

    def __init__(self):
        self._params: dict[str, Param] = {}

    def _add(self, name: str, data: np.ndarray) -> Param:
        p = Param(data)
        self._params[name] = p
        return p

    def params(self) -> dict[str, Param]:
        return self._params

    def param_list(self) -> list[Param]:
        return list(self._params.values())

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self._params.items()}

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self._params.items():
            if k not in state:
                raise CheckpointError(f"missing parameter {k!r} in state")
            if state[k].shape != p.data.shape:
                raise CheckpointError(
                    f"parameter {k!r} shape {state[k].shape} != expected {p.data.shape}")
            p.data = state[k].astype(p.data.dtype).copy()

    def cast(self, dtype) -> None:
        """In-place dtype change (float64 is used by gradient-check oracles)."""
        for k, p in self._params.items():
            p.data = p.data.astype(dtype)
            p.m = p.m.astype(dtype)
            p.v = p.v.astype(dtype)
            p.grad = np.zeros_like(p.data)

    def config_dict(self) -> dict:
        return asdict(self.config)

    def default_finetune_params(self) -> list[str]:
        raise NotImplementedError

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None) -> ModelOutput:
        raise NotImplementedError

    def _prep_input(self, x) -> tuple[Tensor, bool]:
        arr = x.data if isinstance(x, Tensor) else np.asarray(x)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        single = arr.ndim == 2
        if single:
            arr = arr[None]
        if arr.ndim != 3:
            raise ad.ShapeError(f"{self.arch}: expected (B, H, C) or (H, C) input, got {arr.shape}")
        H, C = self.config.window, self.config.n_channels
        if arr.shape[1] != H or arr.shape[2] != C:
            raise ad.ShapeError(
                f"{self.arch}: input window {arr.shape[1:]} != configured ({H}, {C})")
        dtype = next(iter(self._params.values())).dtype
        return Tensor(arr.astype(dtype, copy=False)), single

    def predict(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Inference-only forward; returns (p_el, p_wr) numpy arrays."""
        out = self.forward(x, train=False)
        return out.p_el.data, out.p_wr.data


def _head_forward(params: dict[str, Param], prefix: str, h: Tensor, n_hidden: int,
                  dropout_p: float, train: bool, rng) -> Tensor:
    """FC stack with ReLU hidden layers and a linear output. Dropout only
    after the first (widest) hidden layer; the later layers are too narrow
    to survive it."""
    for j in range(n_hidden):
        h = ad.relu(ad.linear(h, params[f"{prefix}.w{j}"], params[f"{prefix}.b{j}"]))
        if dropout_p > 0 and j == 0:
            h = ad.dropout(h, dropout_p, train, rng)
    j = n_hidden
    return ad.linear(h, params[f"{prefix}.w{j}"], params[f"{prefix}.b{j}"])


# --- transformer ----------------------------------------------------------------


@dataclass
class TransformerConfig:
    n_channels: int = 32
    window: int = 128
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 8
    d_ff: int = 128
    dropout_ff: float = 0.2
    dropout_attn: float = 0.1
    head_hidden: tuple[int, ...] = (32, 10)
    recon_mode: str = "window"          # "window" or "last"
    use_positional_encoding: bool = True

    def __post_init__(self):
        self.head_hidden = tuple(self.head_hidden)
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.recon_mode not in ("window", "last"):
            raise ValueError(f"recon_mode must be 'window' or 'last', got {self.recon_mode!r}")


class TransformerRegressor(BaseModel):
    """Pre-norm encoder over per-timestep embeddings; pooling takes the last
    timestep's representation (the window is labeled by its last frame)."""

    arch = "transformer"

    def __init__(self, config: TransformerConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config or TransformerConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        d, dff = cfg.d_model, cfg.d_ff

        self._add("embed.w", _xavier(rng, cfg.n_channels, d))
        self._add("embed.b", np.zeros(d, dtype=np.float32))
        for l in range(cfg.n_layers):
            p = f"enc{l}"
            self._add(f"{p}.ln1.g", np.ones(d, dtype=np.float32))
            self._add(f"{p}.ln1.b", np.zeros(d, dtype=np.float32))
            for nm in ("wq", "wk", "wv", "wo"):
                self._add(f"{p}.attn.{nm}", _xavier(rng, d, d))
            for nm in ("bq", "bk", "bv", "bo"):
                self._add(f"{p}.attn.{nm}", np.zeros(d, dtype=np.float32))
            self._add(f"{p}.ln2.g", np.ones(d, dtype=np.float32))
            self._add(f"{p}.ln2.b", np.zeros(d, dtype=np.float32))
            self._add(f"{p}.ffn.w1", _xavier(rng, d, dff))
            self._add(f"{p}.ffn.b1", np.zeros(dff, dtype=np.float32))
            self._add(f"{p}.ffn.w2", _xavier(rng, dff, d))
            self._add(f"{p}.ffn.b2", np.zeros(d, dtype=np.float32))
        self._add("final_ln.g", np.ones(d, dtype=np.float32))
        self._add("final_ln.b", np.zeros(d, dtype=np.float32))

        for head, out_dim in (("head_el", 3), ("head_wr", 3),
                              ("head_recon", cfg.n_channels)):
            dims = (d,) + cfg.head_hidden + (out_dim,)
            for j in range(len(dims) - 1):
                self._add(f"{head}.w{j}", _xavier(rng, dims[j], dims[j + 1]))
                self._add(f"{head}.b{j}", np.zeros(dims[j + 1], dtype=np.float32))

        self._pe = sinusoidal_encoding(cfg.window, d)

    def default_finetune_params(self) -> list[str]:
        j = len(self.config.head_hidden)
        return [f"head_el.w{j}", f"head_el.b{j}", f"head_wr.w{j}", f"head_wr.b{j}"]

    def _affine_ln(self, x: Tensor, gname: str, bname: str) -> Tensor:
        y = ad.layer_norm(x, axis=-1)
        return ad.add(ad.mul(y, self._params[gname]), self._params[bname])

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None,
                return_attn: bool = False, need_recon: bool = True) -> ModelOutput:
        cfg = self.config
        xt, single = self._prep_input(x)
        B, H, _ = xt.shape
        d, nh = cfg.d_model, cfg.n_heads
        dh = d // nh
        P = self._params

        h = ad.linear(xt, P["embed.w"], P["embed.b"])
        if cfg.use_positional_encoding:
            h = ad.add(h, Tensor(self._pe.astype(h.dtype, copy=False)))

        attn_maps: list[np.ndarray] = []
        for l in range(cfg.n_layers):
            p = f"enc{l}"
            a = self._affine_ln(h, f"{p}.ln1.g", f"{p}.ln1.b")
            q = ad.linear(a, P[f"{p}.attn.wq"], P[f"{p}.attn.bq"])
            k = ad.linear(a, P[f"{p}.attn.wk"], P[f"{p}.attn.bk"])
            v = ad.linear(a, P[f"{p}.attn.wv"], P[f"{p}.attn.bv"])
            # scale q up front: cheaper than scaling the (H x H) score array
            q = ad.scale(q, 1.0 / math.sqrt(dh))
            # (B, H, d) -> (B, nh, H, dh)
            q = ad.transpose(ad.reshape(q, (B, H, nh, dh)), (0, 2, 1, 3))
            k = ad.transpose(ad.reshape(k, (B, H, nh, dh)), (0, 2, 1, 3))
            v = ad.transpose(ad.reshape(v, (B, H, nh, dh)), (0, 2, 1, 3))
            scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
            weights = ad.softmax(scores, axis=-1)
            if return_attn:
                attn_maps.append(weights.data.copy())
            ctx = ad.matmul(weights, v)
            ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, H, d))
            ctx = ad.linear(ctx, P[f"{p}.attn.wo"], P[f"{p}.attn.bo"])
            ctx = ad.dropout(ctx, cfg.dropout_attn, train, rng)
            h = ad.add(h, ctx)

            a2 = self._affine_ln(h, f"{p}.ln2.g", f"{p}.ln2.b")
            f = ad.relu(ad.linear(a2, P[f"{p}.ffn.w1"], P[f"{p}.ffn.b1"]))
            f = ad.linear(f, P[f"{p}.ffn.w2"], P[f"{p}.ffn.b2"])
            f = ad.dropout(f, cfg.dropout_ff, train, rng)
            h = ad.add(h, f)

        h = self._affine_ln(h, "final_ln.g", "final_ln.b")
        pooled = ad.select_index(h, 1, H - 1)

        nh_layers = len(cfg.head_hidden)
        p_el = _head_forward(P, "head_el", pooled, nh_layers, cfg.dropout_ff, train, rng)
        p_wr = _head_forward(P, "head_wr", pooled, nh_layers, cfg.dropout_ff, train, rng)
        x_recon = None
        if need_recon:
            src = pooled if cfg.recon_mode == "last" else h
            x_recon = _head_forward(P, "head_recon", src, nh_layers, cfg.dropout_ff, train, rng)

        if single:
            p_el = ad.reshape(p_el, (3,))
            p_wr = ad.reshape(p_wr, (3,))
            if x_recon is not None and cfg.recon_mode == "window":
                x_recon = ad.reshape(x_recon, (H, cfg.n_channels))
            elif x_recon is not None:
                x_recon = ad.reshape(x_recon, (cfg.n_channels,))
        return ModelOutput(p_el=p_el, p_wr=p_wr, x_recon=x_recon,
                           attn=attn_maps if return_attn else None)


# --- fully-connected baseline ------------------------------------------------------


@dataclass
class FcnnConfig:
    n_channels: int = 32
    window: int = 128
    hidden: tuple[int, ...] = (1024, 256, 64)

    def __post_init__(self):
        self.hidden = tuple(self.hidden)


class FcnnRegressor(BaseModel):
    """Flatten the window to one vector and run it through an FC stack."""

    arch = "fcnn"

    def __init__(self, config: FcnnConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config or FcnnConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        dims = (cfg.window * cfg.n_channels,) + cfg.hidden
        for j in range(len(dims) - 1):
            self._add(f"fc.w{j}", _xavier(rng, dims[j], dims[j + 1]))
            self._add(f"fc.b{j}", np.zeros(dims[j + 1], dtype=np.float32))
        for head in ("head_el", "head_wr"):
            self._add(f"{head}.w", _xavier(rng, dims[-1], 3))
            self._add(f"{head}.b", np.zeros(3, dtype=np.float32))

    def default_finetune_params(self) -> list[str]:
        return ["head_el.w", "head_el.b", "head_wr.w", "head_wr.b"]

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None) -> ModelOutput:
        cfg = self.config
        xt, single = self._prep_input(x)
        B = xt.shape[0]
        h = ad.reshape(xt, (B, cfg.window * cfg.n_channels))
        for j in range(len(cfg.hidden)):
            h = ad.relu(ad.linear(h, self._params[f"fc.w{j}"], self._params[f"fc.b{j}"]))
        p_el = ad.linear(h, self._params["head_el.w"], self._params["head_el.b"])
        p_wr = ad.linear(h, self._params["head_wr.w"], self._params["head_wr.b"])
        if single:
            p_el, p_wr = ad.reshape(p_el, (3,)), ad.reshape(p_wr, (3,))
        return ModelOutput(p_el=p_el, p_wr=p_wr)


# --- decomposed linear baseline ------------------------------------------------------


@dataclass
class DLinearConfig:
    n_channels: int = 32
    window: int = 128
    kernel: int = 25

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise ValueError("moving-average kernel must be odd")


class DLinearRegressor(BaseModel):
    """Moving-average trend/seasonal split, per-channel linear maps over time,
    then one linear read-out to the 6 pose coordinates."""

    arch = "dlinear"

    def __init__(self, config: DLinearConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config or DLinearConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        H, C = cfg.window, cfg.n_channels
        # per-channel weights over the time axis; init mirrors an average
        for branch in ("trend", "seasonal"):
            self._add(f"{branch}.w", np.full((H, C), 1.0 / H, dtype=np.float32)
                      + rng.normal(0, 0.01, size=(H, C)).astype(np.float32))
            self._add(f"{branch}.b", np.zeros(C, dtype=np.float32))
        self._add("readout.w", _xavier(rng, 2 * C, 6))
        self._add("readout.b", np.zeros(6, dtype=np.float32))

        pad = (cfg.kernel - 1) // 2
        self._ma_idx = np.clip(np.arange(H)[:, None] + np.arange(cfg.kernel) - pad, 0, H - 1)

    def default_finetune_params(self) -> list[str]:
        return ["readout.w", "readout.b"]

    def decompose(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """(trend, seasonal): edge-replicated moving average and residual."""
        gathered = ad.gather_time(x, self._ma_idx)        # (B, H, K, C)
        trend = ad.mean(gathered, axis=2)                 # (B, H, C)
        seasonal = ad.sub(x, trend)
        return trend, seasonal

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None) -> ModelOutput:
        xt, single = self._prep_input(x)
        trend, seasonal = self.decompose(xt)
        feats = []
        for branch, part in (("trend", trend), ("seasonal", seasonal)):
            w = self._params[f"{branch}.w"]
            f = ad.sum_(ad.mul(part, w), axis=1)          # (B, C)
            feats.append(ad.add(f, self._params[f"{branch}.b"]))
        h = ad.concat(feats, axis=1)
        out = ad.linear(h, self._params["readout.w"], self._params["readout.b"])
        p_el = ad.narrow(out, 1, 0, 3)
        p_wr = ad.narrow(out, 1, 3, 3)
        if single:
            p_el, p_wr = ad.reshape(p_el, (3,)), ad.reshape(p_wr, (3,))
        return ModelOutput(p_el=p_el, p_wr=p_wr)


# --- temporal CNN baseline -------------------------------------------------------------


@dataclass
class Cnn1dConfig:
    n_channels: int = 32
    window: int = 128
    conv_channels: tuple[int, int] = (64, 64)
    kernel: int = 5
    stride: int = 2
    head_hidden: int = 32

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)


def _conv_positions(length: int, kernel: int, stride: int) -> int:
    return (length - kernel) // stride + 1


class Cnn1dRegressor(BaseModel):
    """Two valid strided temporal convolutions, global average pool, FC heads."""

    arch = "cnn1d"

    def __init__(self, config: Cnn1dConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config or Cnn1dConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        k, s = cfg.kernel, cfg.stride
        c_in = cfg.n_channels
        length = cfg.window
        self._conv_idx: list[np.ndarray] = []
        for j, c_out in enumerate(cfg.conv_channels):
            L = _conv_positions(length, k, s)
            if L < 1:
                raise ValueError(f"window {cfg.window} too short for conv layer {j}")
            self._conv_idx.append(np.arange(L)[:, None] * s + np.arange(k))
            self._add(f"conv{j}.w", _xavier(rng, k * c_in, c_out))
            self._add(f"conv{j}.b", np.zeros(c_out, dtype=np.float32))
            c_in, length = c_out, L
        feat = cfg.conv_channels[-1]
        for head in ("head_el", "head_wr"):
            self._add(f"{head}.w0", _xavier(rng, feat, cfg.head_hidden))
            self._add(f"{head}.b0", np.zeros(cfg.head_hidden, dtype=np.float32))
            self._add(f"{head}.w1", _xavier(rng, cfg.head_hidden, 3))
            self._add(f"{head}.b1", np.zeros(3, dtype=np.float32))

    def default_finetune_params(self) -> list[str]:
        return ["head_el.w1", "head_el.b1", "head_wr.w1", "head_wr.b1"]

    def features(self, x) -> np.ndarray:
        """Pre-pool feature map (B, L2, C2); used to check shift behavior."""
        xt, single = self._prep_input(x)
        h = self._conv_stack(xt)
        return h.data[0] if single else h.data

    def _conv_stack(self, h: Tensor) -> Tensor:
        cfg = self.config
        for j in range(len(cfg.conv_channels)):
            g = ad.gather_time(h, self._conv_idx[j])      # (B, L, K, C)
            B, L, K, C = g.shape
            g = ad.reshape(g, (B, L, K * C))
            h = ad.relu(ad.linear(g, self._params[f"conv{j}.w"], self._params[f"conv{j}.b"]))
        return h

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None) -> ModelOutput:
        xt, single = self._prep_input(x)
        h = self._conv_stack(xt)
        pooled = ad.mean(h, axis=1)
        outs = []
        for head in ("head_el", "head_wr"):
            z = ad.relu(ad.linear(pooled, self._params[f"{head}.w0"], self._params[f"{head}.b0"]))
            outs.append(ad.linear(z, self._params[f"{head}.w1"], self._params[f"{head}.b1"]))
        p_el, p_wr = outs
        if single:
            p_el, p_wr = ad.reshape(p_el, (3,)), ad.reshape(p_wr, (3,))
        return ModelOutput(p_el=p_el, p_wr=p_wr)


# --- registry and checkpoints -------------------------------------------------------------

MODEL_REGISTRY = {
    "transformer": (TransformerConfig, TransformerRegressor),
    "fcnn": (FcnnConfig, FcnnRegressor),
    "dlinear": (DLinearConfig, DLinearRegressor),
    "cnn1d": (Cnn1dConfig, Cnn1dRegressor),
}

_CKPT_MAGIC = b"FMGC"
_CKPT_VERSION = 1


def build_model(arch: str, seed: int = 0, **config_overrides) -> BaseModel:
    if arch not in MODEL_REGISTRY:
        raise ValueError(f"unknown architecture {arch!r}; choices: {sorted(MODEL_REGISTRY)}")
    cfg_cls, model_cls = MODEL_REGISTRY[arch]
    cfg = cfg_cls(**config_overrides)
    return model_cls(cfg, seed=seed)


def save_checkpoint(model: BaseModel, path: str | Path, normalizer: Normalizer | None = None) -> None:
    path = Path(path)
    manifest = [{"name": k, "shape": list(p.data.shape), "dtype": "<f4"}
                for k, p in model.params().items()]
    header = {
        "format_version": _CKPT_VERSION,
        "arch": model.arch,
        "config": model.config_dict(),
        "normalizer": None if normalizer is None else
            {"mean": normalizer.mean.tolist(), "std": normalizer.std.tolist()},
        "params": manifest,
    }
    head = json.dumps(header).encode()
    with path.open("wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        for p in model.params().values():
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path, expect_arch: str | None = None
                    ) -> tuple[BaseModel, Normalizer | None]:
    path = Path(path)
    with path.open("rb") as f:
        if f.read(4) != _CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (head_len,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(head_len))
        if header.get("format_version") != _CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version")
        arch = header["arch"]
        if expect_arch is not None and arch != expect_arch:
            raise CheckpointError(f"{path}: checkpoint is {arch!r}, expected {expect_arch!r}")
        if arch not in MODEL_REGISTRY:
            raise CheckpointError(f"{path}: unknown architecture {arch!r}")
        cfg_cls, model_cls = MODEL_REGISTRY[arch]
        cfg = cfg_cls(**{k: tuple(v) if isinstance(v, list) else v
                         for k, v in header["config"].items()})
        model = model_cls(cfg, seed=0)
        state = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(n * 4)
            if len(buf) != n * 4:
                raise CheckpointError(f"{path}: truncated blob for {entry['name']!r}")
            state[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
        model.load_state_arrays(state)
    norm = None
    if header["normalizer"] is not None:
        norm = Normalizer(mean=np.asarray(header["normalizer"]["mean"]),
                          std=np.asarray(header["normalizer"]["std"]))
    return model, norm
