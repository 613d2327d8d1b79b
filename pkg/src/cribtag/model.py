"""Patch-transformer classifier over log-Mel spectrograms.

The spectrogram is cut into overlapping 16x16 patches (stride 10 on both
axes), each flattened and linearly projected into the embedding space. A
learned CLS token is prepended, a trainable positional table added, and the
sequence runs through pre-norm transformer blocks (multi-head self-attention
plus a GELU MLP). After the final norm the tokens are pooled and fed to the
classification head: two FC layers with layer norm and GELU, then a linear
layer with per-class sigmoid outputs.

Patch sequence order is time-major: sequence index = t * F_p + f, where
(f, t) indexes the frequency/time patch grid. The positional table stores
the CLS slot first, then the grid in the same order.

Also here: the adaptations applied when importing vision-transformer
weights (3-channel patch kernels averaged to 1 channel, positional grids
center-cut or bilinearly interpolated).
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence, Union

import numpy as np
from scipy.stats import truncnorm

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .frontend import LogMelSpectrogram


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 768
    n_layers: int = 12
    n_heads: int = 12
    mlp_ratio: int = 4
    patch: int = 16
    overlap: int = 6
    n_mels: int = 128
    n_frames: int = 398
    head_dims: tuple = (3072, 768)
    n_classes: int = 7
    pool: str = "mean"  # "mean" over all tokens, or "cls"

    def __post_init__(self):
        object.__setattr__(self, "head_dims", tuple(self.head_dims))
        if self.embed_dim % self.n_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.stride < 1:
            raise ConfigError(f"overlap {self.overlap} must be smaller than patch {self.patch}")
        if self.patch > self.n_mels or self.patch > self.n_frames:
            raise ConfigError(f"patch {self.patch} exceeds input {self.n_mels}x{self.n_frames}")
        if self.pool not in ("mean", "cls"):
            raise ConfigError(f"pool must be 'mean' or 'cls', got {self.pool!r}")
        if not self.head_dims:
            raise ConfigError("head_dims must be nonempty")

    @property
    def stride(self) -> int:
        return self.patch - self.overlap

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch

    def patch_grid(self, n_frames: Optional[int] = None) -> tuple:
        """(F_p, T_p): patch counts along frequency and time."""
        t = self.n_frames if n_frames is None else n_frames
        if t < self.patch:
            raise ContractError(f"need at least {self.patch} frames, got {t}")
        f_p = (self.n_mels - self.patch) // self.stride + 1
        t_p = (t - self.patch) // self.stride + 1
        return f_p, t_p

    @property
    def n_patches(self) -> int:
        f_p, t_p = self.patch_grid()
        return f_p * t_p

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """3-layer preset small enough for CPU tests."""
        base = dict(embed_dim=96, n_layers=3, n_heads=3, head_dims=(192, 96))
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_dims"] = list(self.head_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["head_dims"] = tuple(d.get("head_dims", (3072, 768)))
        return cls(**d)


def extract_patches(values: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Flatten overlapping patches into an (n_patches, patch*patch) matrix.

    Patch (f, t) covers rows [f*stride, f*stride+patch) and columns
    [t*stride, t*stride+patch); it lands at sequence index t*F_p + f and is
    flattened row-major (frequency rows, time columns).
    """
    values = np.asarray(values)
    if values.ndim != 2 or values.shape[0] != cfg.n_mels:
        raise DimensionError(f"expected a {cfg.n_mels}xT spectrogram, got shape {values.shape}")
    if values.shape[1] < cfg.patch:
        raise ContractError(f"need at least {cfg.patch} frames, got {values.shape[1]}")
    f_p, t_p = cfg.patch_grid(values.shape[1])
    s, p = cfg.stride, cfg.patch
    # windows[f, t] is the (p, p) patch at grid position (f, t)
    windows = np.lib.stride_tricks.sliding_window_view(values, (p, p))[::s, ::s]
    windows = windows[:f_p, :t_p]
    seq = windows.transpose(1, 0, 2, 3).reshape(t_p * f_p, p * p)
    return np.ascontiguousarray(seq)


def _expected_shapes(cfg: ModelConfig) -> dict:
    e = cfg.embed_dim
    shapes = {
        "patch_embed.weight": (cfg.patch_dim, e),
        "patch_embed.bias": (e,),
        "cls_token": (1, e),
        "pos_embed": (1 + cfg.n_patches, e),
    }
    for i in range(cfg.n_layers):
        b = f"blocks.{i}"
        shapes[f"{b}.ln1.gamma"] = (e,)
        shapes[f"{b}.ln1.beta"] = (e,)
        shapes[f"{b}.attn.qkv.weight"] = (e, 3 * e)
        shapes[f"{b}.attn.qkv.bias"] = (3 * e,)
        shapes[f"{b}.attn.proj.weight"] = (e, e)
        shapes[f"{b}.attn.proj.bias"] = (e,)
        shapes[f"{b}.ln2.gamma"] = (e,)
        shapes[f"{b}.ln2.beta"] = (e,)
        shapes[f"{b}.mlp.fc1.weight"] = (e, cfg.mlp_ratio * e)
        shapes[f"{b}.mlp.fc1.bias"] = (cfg.mlp_ratio * e,)
        shapes[f"{b}.mlp.fc2.weight"] = (cfg.mlp_ratio * e, e)
        shapes[f"{b}.mlp.fc2.bias"] = (e,)
    shapes["encoder_norm.gamma"] = (e,)
    shapes["encoder_norm.beta"] = (e,)
    prev = e
    for j, dim in enumerate(cfg.head_dims, start=1):
        shapes[f"head.fc{j}.weight"] = (prev, dim)
        shapes[f"head.fc{j}.bias"] = (dim,)
        shapes[f"head.ln{j}.gamma"] = (dim,)
        shapes[f"head.ln{j}.beta"] = (dim,)
        prev = dim
    shapes["head.out.weight"] = (prev, cfg.n_classes)
    shapes["head.out.bias"] = (cfg.n_classes,)
    return shapes


def _trunc_normal(rng: np.random.Generator, shape: tuple, std: float = 0.02) -> np.ndarray:
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


class AstClassifier:
    """The classifier: named parameters plus the forward computation.

    Parameters are plain ``Tensor`` objects with ``requires_grad=True``;
    recording onto a gradient tape happens only when the caller opens one
    around ``forward_batch``, so inference stays allocation-light.
    """

    def __init__(self, cfg: ModelConfig, params: dict):
        expected = _expected_shapes(cfg)
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        if missing or extra:
            raise ConfigError(f"parameter set mismatch: missing={missing[:4]} extra={extra[:4]}")
        for name, p in params.items():
            if p.shape != expected[name]:
                raise ConfigError(f"parameter {name}: shape {p.shape}, expected {expected[name]}")
        self.cfg = cfg
        self.params = params

    @classmethod
    def init_scratch(cls, cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> "AstClassifier":
        """Fresh weights: truncated normal (std 0.02) matrices and embedding
        tables, zero biases, unit layer-norm gains."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in _expected_shapes(cfg).items():
            if name.endswith(".bias") or name.endswith(".beta") or name == "head.out.bias":
                data = np.zeros(shape)
            elif name.endswith(".gamma"):
                data = np.ones(shape)
            else:
                data = _trunc_normal(rng, shape)
            params[name] = T.Tensor(data, requires_grad=True, dtype=dtype)
        return cls(cfg, params)

    @property
    def dtype(self):
        return self.params["patch_embed.weight"].dtype

    def parameter_names(self) -> list:
        return sorted(self.params)

    def parameters(self, names: Optional[Sequence[str]] = None) -> list:
        names = self.parameter_names() if names is None else list(names)
        return [self.params[n] for n in names]

    def weights_snapshot(self) -> dict:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_weights(self, weights: dict) -> None:
        for name, arr in weights.items():
            if name not in self.params:
                raise ConfigError(f"unknown parameter {name}")
            if tuple(arr.shape) != self.params[name].shape:
                raise ConfigError(f"parameter {name}: shape {arr.shape}, expected {self.params[name].shape}")
            self.params[name].data = np.ascontiguousarray(arr.astype(self.dtype))

    def _linear(self, x: "T.Tensor", prefix: str) -> "T.Tensor":
        return T.add(T.matmul(x, self.params[f"{prefix}.weight"]), self.params[f"{prefix}.bias"])

    def _layer_norm(self, x: "T.Tensor", prefix: str) -> "T.Tensor":
        return T.layer_norm(x, self.params[f"{prefix}.gamma"], self.params[f"{prefix}.beta"])

    def forward_batch(self, patches: np.ndarray, return_attention: bool = False):
        """Probabilities for a batch of patch sequences.

        ``patches``: (B, n_patches, patch*patch) array from
        ``extract_patches``. Returns a (B, n_classes) tensor of sigmoid
        outputs; with ``return_attention`` also a list of per-layer
        post-softmax attention arrays (detached).
        """
        cfg = self.cfg
        patches = np.asarray(patches, dtype=self.dtype)
        if patches.ndim != 3 or patches.shape[1:] != (cfg.n_patches, cfg.patch_dim):
            raise DimensionError(
                f"expected patches of shape (B, {cfg.n_patches}, {cfg.patch_dim}), got {patches.shape}"
            )
        batch = patches.shape[0]
        e, heads = cfg.embed_dim, cfg.n_heads
        head_dim = e // heads
        seq = 1 + cfg.n_patches
        attns = []

        x = self._linear(T.Tensor(patches), "patch_embed")
        cls = T.broadcast_to(T.reshape(self.params["cls_token"], (1, 1, e)), (batch, 1, e))
        x = T.concat([cls, x], axis=1)
        x = T.add(x, self.params["pos_embed"])

        for i in range(cfg.n_layers):
            b = f"blocks.{i}"
            h = self._layer_norm(x, f"{b}.ln1")
            qkv = self._linear(h, f"{b}.attn.qkv")
            qkv = T.transpose(T.reshape(qkv, (batch, seq, 3, heads, head_dim)), (2, 0, 3, 1, 4))
            q, k, v = qkv[0], qkv[1], qkv[2]
            q = T.mul(q, 1.0 / np.sqrt(head_dim))
            att = T.softmax(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), axis=-1)
            if return_attention:
                attns.append(att.data.copy())
            o = T.matmul(att, v)
            o = T.reshape(T.transpose(o, (0, 2, 1, 3)), (batch, seq, e))
            x = T.add(x, self._linear(o, f"{b}.attn.proj"))
            h2 = self._layer_norm(x, f"{b}.ln2")
            m = T.gelu(self._linear(h2, f"{b}.mlp.fc1"))
            x = T.add(x, self._linear(m, f"{b}.mlp.fc2"))

        x = self._layer_norm(x, "encoder_norm")
        pooled = T.mean(x, axis=1) if cfg.pool == "mean" else x[:, 0, :]
        h = pooled
        for j in range(1, len(cfg.head_dims) + 1):
            h = T.gelu(self._layer_norm(self._linear(h, f"head.fc{j}"), f"head.ln{j}"))
        probs = T.sigmoid(self._linear(h, "head.out"))
        if return_attention:
            return probs, attns
        return probs

    def predict_spectrograms(self, spectrograms: Sequence, batch_size: int = 16) -> np.ndarray:
        """Class probabilities for normalized spectrograms (no gradients)."""
        arrays = [s.values if isinstance(s, LogMelSpectrogram) else np.asarray(s) for s in spectrograms]
        out = []
        for i in range(0, len(arrays), batch_size):
            batch = np.stack([extract_patches(a, self.cfg) for a in arrays[i : i + batch_size]])
            out.append(self.forward_batch(batch).data)
        return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# imported-weight adaptation


def adapt_channel_weights(kernel: np.ndarray) -> np.ndarray:
    """Average a 3-channel vision patch kernel into a single channel.

    (3, p, p, d) -> (1, p, p, d), per-position arithmetic mean over the
    channel axis.
    """
    kernel = np.asarray(kernel)
    if kernel.ndim != 4 or kernel.shape[0] != 3:
        raise DimensionError(f"expected a (3, p, p, d) kernel, got shape {kernel.shape}")
    return kernel.mean(axis=0, keepdims=True)


def _interp_axis(grid: np.ndarray, target: int, axis: int) -> np.ndarray:
    """Center-cut or linearly interpolate one grid axis to ``target``."""
    src = grid.shape[axis]
    if target == src:
        return grid
    if target < src:
        start = (src - target) // 2
        sl = [slice(None)] * grid.ndim
        sl[axis] = slice(start, start + target)
        return grid[tuple(sl)]
    if src == 1:
        reps = [1] * grid.ndim
        reps[axis] = target
        return np.tile(grid, reps)
    if target == 1:
        pos = np.array([(src - 1) / 2.0])
    else:
        pos = np.arange(target) * (src - 1) / (target - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, src - 1)
    w = (pos - i0).reshape([-1 if d == axis else 1 for d in range(grid.ndim)])
    lo = np.take(grid, i0, axis=axis)
    hi = np.take(grid, i1, axis=axis)
    return lo * (1.0 - w) + hi * w


def interpolate_pos_embed(src: np.ndarray, target_grid: tuple) -> np.ndarray:
    """Resize a positional grid (F_s, T_s, d) to (F_t, T_t, d).

    Axes with a smaller target are center-cut; larger targets are bilinearly
    interpolated (endpoints preserved, so linear ramps stay linear).
    """
    src = np.asarray(src)
    if src.ndim != 3:
        raise DimensionError(f"expected a (F, T, d) grid, got shape {src.shape}")
    f_t, t_t = target_grid
    if f_t < 1 or t_t < 1:
        raise DimensionError(f"target grid must be >= 1 on both axes, got {target_grid}")
    out = _interp_axis(src, f_t, axis=0)
    out = _interp_axis(out, t_t, axis=1)
    return np.ascontiguousarray(out)


def pos_embed_seq_to_grid(pos: np.ndarray, f_p: int, t_p: int) -> np.ndarray:
    """Split a (1 + F_p*T_p, d) positional table into its (F_p, T_p, d) grid
    part (CLS slot excluded), honoring the time-major sequence order."""
    if pos.shape[0] != 1 + f_p * t_p:
        raise DimensionError(f"positional table has {pos.shape[0]} rows, expected {1 + f_p * t_p}")
    return pos[1:].reshape(t_p, f_p, -1).transpose(1, 0, 2)


def pos_embed_grid_to_seq(cls_row: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Inverse of ``pos_embed_seq_to_grid``."""
    f_p, t_p, d = grid.shape
    seq = grid.transpose(1, 0, 2).reshape(f_p * t_p, d)
    return np.concatenate([cls_row.reshape(1, d), seq], axis=0)
