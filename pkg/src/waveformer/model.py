"""WaveFormer: patch embedding -> WaveletConv -> RoPE transformer -> linear head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Mapping

import numpy as np

from . import ops
from .encoder import classify, encode, flatten_tokens
from .errors import ConfigError
from .quant import QuantizedTensor
from .signals import fit_length
from .tensor import RngStreams, Tensor, no_grad
from .wavelet import init_wavelet_params, patch_embed, waveletconv_forward


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters (defaults are the published configuration)."""

    channels: int = 8
    window: int = 200
    patch: int = 40
    embed_dim: int = 256
    levels: int = 3
    hf_dropout: float = 0.1
    layers: int = 6
    heads: int = 8
    ffn_dim: int = 1024
    rope_base: float = 10000.0
    stochastic_depth: float = 0.1
    num_classes: int = 6
    init_std: float = 0.02
    dtype: str = "float32"

    def __post_init__(self):
        if min(self.channels, self.window, self.patch, self.embed_dim, self.layers,
               self.heads, self.ffn_dim, self.num_classes, self.levels) < 1:
            raise ConfigError("sizes must be positive")
        if self.window % self.patch:
            raise ConfigError(f"window {self.window} is not a multiple of patch {self.patch}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if (self.embed_dim // self.heads) % 2:
            raise ConfigError("head dimension must be even for rotary embedding")
        if not 0.0 <= self.stochastic_depth < 1.0:
            raise ConfigError("stochastic_depth must be in [0, 1)")
        if self.hf_dropout < 0.0:
            raise ConfigError("hf_dropout must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def num_patches(self) -> int:
        return self.window // self.patch

    @property
    def seq_len(self) -> int:
        return 1 + self.channels * self.num_patches

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass(frozen=True)
class AblationConfig:
    """Component switches; a disabled component is replaced by the identity."""

    use_waveletconv: bool = True
    use_rope: bool = True


def init_params(cfg: ModelConfig, ablation: AblationConfig = AblationConfig(), seed: int = 0
                ) -> dict[str, Tensor]:
    """Seed-deterministic initial parameters, keyed by dotted name."""
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype
    D, F, P, K = cfg.embed_dim, cfg.ffn_dim, cfg.patch, cfg.num_classes

    def normal(*shape):
        return (rng.standard_normal(shape) * cfg.init_std).astype(dt)

    p: dict[str, np.ndarray] = {
        "patch.weight": normal(P, D),
        "patch.bias": np.zeros(D, dt),
        "patch.ln.gamma": np.ones(D, dt),
        "patch.ln.beta": np.zeros(D, dt),
    }
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}
    if ablation.use_waveletconv:
        params.update(init_wavelet_params(D, cfg.levels, dt))
    p = {"cls_token": normal(D)}
    for i in range(cfg.layers):
        b = f"block{i}"
        p[f"{b}.ln1.gamma"] = np.ones(D, dt)
        p[f"{b}.ln1.beta"] = np.zeros(D, dt)
        for proj in ("q", "k", "v", "out"):
            p[f"{b}.attn.{proj}.weight"] = normal(D, D)
            p[f"{b}.attn.{proj}.bias"] = np.zeros(D, dt)
        p[f"{b}.ln2.gamma"] = np.ones(D, dt)
        p[f"{b}.ln2.beta"] = np.zeros(D, dt)
        p[f"{b}.ffn.fc1.weight"] = normal(D, F)
        p[f"{b}.ffn.fc1.bias"] = np.zeros(F, dt)
        p[f"{b}.ffn.fc2.weight"] = normal(F, D)
        p[f"{b}.ffn.fc2.bias"] = np.zeros(D, dt)
    p["final_ln.gamma"] = np.ones(D, dt)
    p["final_ln.beta"] = np.zeros(D, dt)
    p["head.weight"] = normal(D, K)
    p["head.bias"] = np.zeros(K, dt)
    params.update({k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()})
    return params


def param_count(cfg: ModelConfig, ablation: AblationConfig = AblationConfig()) -> int:
    """Closed-form parameter count."""
    D, F, P, K, J = cfg.embed_dim, cfg.ffn_dim, cfg.patch, cfg.num_classes, cfg.levels
    patch = P * D + D + 2 * D
    wavelet = (2 * 4 * D * 4 + J * (4 * D * 9 + 4 * D) + D * 9 + D) if ablation.use_waveletconv else 0
    block = 4 * D + 4 * (D * D + D) + (D * F + F) + (F * D + D)
    return patch + wavelet + D + cfg.layers * block + 2 * D + D * K + K


def count_parameters(params: Mapping[str, object]) -> int:
    return int(sum(p.size for p in params.values()))


def param_breakdown(params: Mapping[str, object]) -> dict[str, int]:
    """Parameter totals grouped by module (first name component, blocks merged)."""
    out: dict[str, int] = {}
    for name, p in params.items():
        head = name.split(".")[0]
        key = "encoder" if head.startswith("block") else head
        out[key] = out.get(key, 0) + int(p.size)
    return out


class WaveFormer:
    """A WaveFormer model: configuration plus a flat dict of named parameters.

    Parameters may be :class:`Tensor` (trainable FP32/FP64) or
    :class:`QuantizedTensor` (INT8 inference); the forward pass is shared.
    """

    def __init__(self, config: ModelConfig = ModelConfig(),
                 ablation: AblationConfig = AblationConfig(),
                 params: dict[str, object] | None = None, seed: int = 0):
        self.config = config
        self.ablation = ablation
        self.params = params if params is not None else init_params(config, ablation, seed)

    def with_params(self, params: dict[str, object]) -> "WaveFormer":
        return WaveFormer(self.config, self.ablation, params)

    def with_config(self, **changes) -> "WaveFormer":
        return WaveFormer(replace(self.config, **changes), self.ablation, self.params)

    def parameters(self) -> list[Tensor]:
        return [p for p in self.params.values() if isinstance(p, Tensor) and p.requires_grad]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.params.items() if isinstance(p, Tensor) and p.requires_grad]

    @property
    def num_params(self) -> int:
        return count_parameters(self.params)

    @property
    def is_quantized(self) -> bool:
        return any(isinstance(p, QuantizedTensor) for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        """Copy of the FP parameter arrays (for best-epoch snapshots)."""
        return {n: p.data.copy() for n, p in self.params.items() if isinstance(p, Tensor)}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        for n, arr in state.items():
            self.params[n].data = arr.copy()

    def _prepare_input(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x
        x = fit_length(np.asarray(x), self.config.window)
        return Tensor(np.ascontiguousarray(x, dtype=self.config.np_dtype))

    def features(self, x, training: bool = False, rng: RngStreams | None = None, step: int = 0
                 ) -> Tensor:
        """(B, D, C, N) map after patch embedding and (optionally) WaveletConv."""
        cfg, p = self.config, self.params
        xt = self._prepare_input(x)
        if xt.shape[1] != cfg.channels:
            raise ConfigError(f"input has {xt.shape[1]} channels, model expects {cfg.channels}")
        fmap = patch_embed(xt, p["patch.weight"], p["patch.bias"], p["patch.ln.gamma"],
                           p["patch.ln.beta"], cfg.patch)
        if self.ablation.use_waveletconv:
            fmap = waveletconv_forward(fmap, p, cfg.levels, cfg.hf_dropout, training, rng, step)
        return fmap

    def embed(self, x, training: bool = False, rng: RngStreams | None = None, step: int = 0
              ) -> Tensor:
        """Normalized class-token embedding, (B, D)."""
        cfg = self.config
        tokens = flatten_tokens(self.features(x, training, rng, step), self.params["cls_token"])
        return encode(tokens, self.params, cfg.layers, cfg.heads, self.ablation.use_rope,
                      cfg.rope_base, cfg.stochastic_depth, training, rng, step)

    def forward(self, x, training: bool = False, rng: RngStreams | None = None, step: int = 0
                ) -> Tensor:
        """Logits (B, num_classes)."""
        if training and rng is None:
            raise ConfigError("training-mode forward needs an RngStreams instance")
        return classify(self.embed(x, training, rng, step), self.params)

    __call__ = forward

    def predict_logits(self, x, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(x)
        outs = []
        with no_grad():
            for s in range(0, len(x), batch_size):
                outs.append(self.forward(x[s:s + batch_size]).data)
        return np.concatenate(outs) if outs else np.zeros((0, self.config.num_classes))

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.predict_logits(x), axis=-1)

    def loss(self, x, labels, training: bool = False, rng: RngStreams | None = None,
             step: int = 0) -> Tensor:
        return ops.cross_entropy(self.forward(x, training, rng, step), labels)


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
