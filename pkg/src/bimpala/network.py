"""MiniBimpala: a desk-scale, bias-free bilinear policy network.

Layout (default widths)::

    obs [3,16,16]
    initial_conv            linear conv 3->16
    seq{s}.conv             linear conv -> C_s
    seq{s}.maxpool          2x2
    seq{s}.res{r}           y = x + BConv2D(x)    (r = 0, 1)
    flatten                 C_last * 4 * 4
    gated_fc                (xF) . (xH)
    logits_fc / value_fc    linear heads

Every named stage is recorded in the forward cache so probes and the
decomposition code can read activations by name.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .layers import (
    BConvParams,
    FCBilinearParams,
    bconv_cb,
    bconv_cb_backward,
    conv_cb,
    conv_cb_backward,
    maxpool2x2,
    maxpool2x2_backward,
)
from .linalg import make_rng

N_ACTIONS = 4


@dataclass(frozen=True)
class NetConfig:
    obs_channels: int = 3
    obs_size: int = 16
    stem_channels: int = 16
    seq_channels: tuple[int, ...] = (16, 32)
    blocks_per_seq: int = 2
    hidden: int = 64
    kernel_size: int = 3
    n_actions: int = N_ACTIONS

    def __post_init__(self):
        object.__setattr__(self, "seq_channels", tuple(int(c) for c in self.seq_channels))
        if self.obs_size % (2 ** len(self.seq_channels)):
            raise ValueError("obs_size must be divisible by 2**len(seq_channels)")

    @property
    def final_size(self) -> int:
        return self.obs_size // 2 ** len(self.seq_channels)

    @property
    def flat_dim(self) -> int:
        return self.seq_channels[-1] * self.final_size**2

    @property
    def block_names(self) -> list[str]:
        return [f"seq{s}.res{r}" for s in range(len(self.seq_channels)) for r in range(self.blocks_per_seq)]

    @property
    def layer_names(self) -> list[str]:
        names = ["initial_conv"]
        for s in range(len(self.seq_channels)):
            names += [f"seq{s}.conv", f"seq{s}.maxpool"]
            for r in range(self.blocks_per_seq):
                names += [f"seq{s}.res{r}.gated_conv", f"seq{s}.res{r}"]
        return names + ["flatten", "gated_fc", "logits_fc", "value_fc"]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        k = self.kernel_size
        shapes = {"initial_conv.w": (self.stem_channels, self.obs_channels, k, k)}
        c_in = self.stem_channels
        for s, c in enumerate(self.seq_channels):
            shapes[f"seq{s}.conv.w"] = (c, c_in, k, k)
            for r in range(self.blocks_per_seq):
                shapes[f"seq{s}.res{r}.u"] = (c, c, k, k)
                shapes[f"seq{s}.res{r}.v"] = (c, c, k, k)
            c_in = c
        shapes["gated_fc.f"] = (self.flat_dim, self.hidden)
        shapes["gated_fc.h"] = (self.flat_dim, self.hidden)
        shapes["logits_fc.w"] = (self.hidden, self.n_actions)
        shapes["value_fc.w"] = (self.hidden, 1)
        return shapes

    def to_dict(self) -> dict:
        return {
            "obs_channels": self.obs_channels,
            "obs_size": self.obs_size,
            "stem_channels": self.stem_channels,
            "seq_channels": list(self.seq_channels),
            "blocks_per_seq": self.blocks_per_seq,
            "hidden": self.hidden,
            "kernel_size": self.kernel_size,
            "n_actions": self.n_actions,
        }


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    return shape[0]


@dataclass
class PolicyNetwork:
    config: NetConfig
    params: dict[str, np.ndarray]
    version: int = 0

    def bconv(self, block: str) -> BConvParams:
        return BConvParams(self.params[f"{block}.u"], self.params[f"{block}.v"])

    @property
    def fc(self) -> FCBilinearParams:
        return FCBilinearParams(self.params["gated_fc.f"], self.params["gated_fc.h"])

    @property
    def logits_head(self) -> np.ndarray:
        return self.params["logits_fc.w"]

    @property
    def value_head(self) -> np.ndarray:
        return self.params["value_fc.w"]

    def copy(self) -> "PolicyNetwork":
        return PolicyNetwork(self.config, {k: v.copy() for k, v in self.params.items()}, self.version)

    def touch(self) -> None:
        """Mark parameters as modified; caches from earlier forwards become stale."""
        self.version += 1


def init_network(config: NetConfig | None = None, seed: int = 0) -> PolicyNetwork:
    """Gaussian init, std 1/sqrt(fan_in); bilinear pairs get an extra 1/sqrt(2)."""
    config = config or NetConfig()
    rng = make_rng(seed)
    params = {}
    for name, shape in config.param_shapes().items():
        std = 1.0 / np.sqrt(_fan_in(name, shape))
        if name.endswith((".u", ".v", ".f", ".h")):
            std /= np.sqrt(2.0)
        params[name] = rng.standard_normal(shape) * std
    return PolicyNetwork(config, params)


ConvOverride = Callable[[np.ndarray], np.ndarray]
FcOverride = Callable[[np.ndarray], np.ndarray]


@dataclass
class ForwardCache:
    """Named activations from one forward pass.

    Spatial activations are held as ``[C, B, H, W]``; indexing by name returns
    the standard ``[B, C, H, W]`` (or ``[C, H, W]`` for an unbatched call).
    """

    raw: dict[str, np.ndarray]
    version: int
    single: bool = False
    tape: list = field(default_factory=list, repr=False)
    differentiable: bool = True
    params: dict | None = field(default=None, repr=False)  # the weights used, in compute dtype

    def __getitem__(self, name: str) -> np.ndarray:
        if name not in self.raw:
            raise KeyError(f"unknown layer {name!r}; valid names: {', '.join(self.raw)}")
        a = self.raw[name]
        if a.ndim == 4:
            a = a[:, 0] if self.single else np.ascontiguousarray(a.transpose(1, 0, 2, 3))
        elif self.single:
            a = a[0]
        return a

    def names(self) -> list[str]:
        return list(self.raw)


def network_forward(
    net: PolicyNetwork,
    obs: np.ndarray,
    conv_override: dict[str, ConvOverride] | None = None,
    fc_override: FcOverride | None = None,
    dtype=np.float64,
):
    """Run the policy on ``obs`` ([3,S,S] or [B,3,S,S]).

    ``conv_override`` maps block names to callables replacing that block's
    bilinear term (the skip path is kept); they receive and return
    ``[C, B, H, W]`` arrays.  ``fc_override`` maps the flattened features
    ``[B, D]`` to logits, replacing gated_fc + logits_fc.  ``dtype`` sets the
    compute precision (training uses float32 for speed; everything else float64).
    Returns ``(logits, value, cache)``.
    """
    cfg = net.config
    dtype = np.dtype(dtype)
    p = net.params if dtype == np.float64 else {k: v.astype(dtype) for k, v in net.params.items()}
    obs = np.asarray(obs, dtype=dtype)
    expected = (cfg.obs_channels, cfg.obs_size, cfg.obs_size)
    single = obs.ndim == 3
    if obs.shape[-3:] != expected or obs.ndim not in (3, 4):
        raise ValueError(f"observation must have shape {expected} (optionally batched), got {obs.shape}")
    x = obs[:, None] if single else obs.transpose(1, 0, 2, 3)
    conv_override = conv_override or {}
    unknown = set(conv_override) - set(cfg.block_names)
    if unknown:
        raise KeyError(f"unknown blocks {sorted(unknown)}; valid: {cfg.block_names}")
    acts: dict[str, np.ndarray] = {}
    tape: list = []

    h, cols = conv_cb(x, p["initial_conv.w"])
    tape.append(("conv", "initial_conv.w", cols, x.shape))
    acts["initial_conv"] = h
    for s in range(len(cfg.seq_channels)):
        prev = h
        h, cols = conv_cb(h, p[f"seq{s}.conv.w"])
        tape.append(("conv", f"seq{s}.conv.w", cols, prev.shape))
        acts[f"seq{s}.conv"] = h
        pre_pool = h.shape
        h, am = maxpool2x2(h)
        tape.append(("pool", None, am, pre_pool))
        acts[f"seq{s}.maxpool"] = h
        for r in range(cfg.blocks_per_seq):
            name = f"seq{s}.res{r}"
            if name in conv_override:
                bl = conv_override[name](h)
            else:
                bl, uo, vo, cols = bconv_cb(h, BConvParams(p[f"{name}.u"], p[f"{name}.v"]))
                tape.append(("bconv", name, (uo, vo, cols), h.shape))
            acts[f"{name}.gated_conv"] = bl
            h = h + bl
            acts[name] = h
    # per-sample channel-major flatten
    flat = h.transpose(1, 0, 2, 3).reshape(h.shape[1], -1)
    acts["flatten"] = flat
    xf = flat @ p["gated_fc.f"]
    xh = flat @ p["gated_fc.h"]
    g = xf * xh
    acts["gated_fc"] = g
    tape.append(("fc", None, (flat, xf, xh), h.shape))
    logits = g @ p["logits_fc.w"]
    value = (g @ p["value_fc.w"])[:, 0]
    if fc_override is not None:
        logits = np.asarray(fc_override(flat), dtype=np.float64)
    acts["logits_fc"] = logits
    acts["value_fc"] = value[:, None]
    differentiable = not conv_override and fc_override is None
    cache = ForwardCache(acts, net.version, single, tape, differentiable, p)
    if single:
        return logits[0], float(value[0]), cache
    return logits, value, cache


def network_backward(
    net: PolicyNetwork,
    cache: ForwardCache,
    dlogits: np.ndarray,
    dvalue: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Parameter gradients given upstream gradients on logits [B,A] and value [B]."""
    if cache.version != net.version:
        raise RuntimeError("stale forward cache: parameters changed since the forward pass")
    if not cache.differentiable:
        raise RuntimeError("cannot backpropagate through an ablated (overridden) forward pass")
    p = cache.params if cache.params is not None else net.params
    dt = p["logits_fc.w"].dtype
    dlogits = np.atleast_2d(np.asarray(dlogits, dtype=dt))
    b = dlogits.shape[0]
    dvalue = np.zeros(b, dt) if dvalue is None else np.asarray(dvalue, dtype=dt).reshape(b)
    grads = {name: np.zeros_like(w) for name, w in p.items()}
    g = cache.raw["gated_fc"]
    grads["logits_fc.w"] = g.T @ dlogits
    grads["value_fc.w"] = g.T @ dvalue[:, None]
    dg = dlogits @ p["logits_fc.w"].T + dvalue[:, None] @ p["value_fc.w"].T
    tape = list(cache.tape)
    _, _, (flat, xf, xh), last_shape = tape.pop()
    gf = dg * xh
    gh = dg * xf
    grads["gated_fc.f"] = flat.T @ gf
    grads["gated_fc.h"] = flat.T @ gh
    dflat = gf @ p["gated_fc.f"].T + gh @ p["gated_fc.h"].T
    c, _, hh, ww = last_shape
    dh = dflat.reshape(b, c, hh, ww).transpose(1, 0, 2, 3)
    for kind, name, data, shape in reversed(tape):
        if kind == "bconv":
            uo, vo, cols = data
            dx, du, dv = bconv_cb_backward(dh, uo, vo, cols, BConvParams(p[f"{name}.u"], p[f"{name}.v"]), shape)
            grads[f"{name}.u"] = du
            grads[f"{name}.v"] = dv
            dh = dh + dx
        elif kind == "pool":
            dh = maxpool2x2_backward(dh, data, shape)
        elif kind == "conv":
            if name == "initial_conv.w":
                # input gradient is never needed
                m = p[name].shape[0]
                grads[name] = (dh.reshape(m, -1) @ data.T).reshape(p[name].shape)
            else:
                dh, dw = conv_cb_backward(dh, data, p[name], shape)
                grads[name] = dw
    if dt != np.float64:
        grads = {k: v.astype(np.float64) for k, v in grads.items()}
    return grads


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def greedy_action(logits: np.ndarray) -> int:
    """Argmax with ties to the lowest action index."""
    return int(np.argmax(logits))
