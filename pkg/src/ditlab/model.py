"""Miniature conditioned diffusion transformer.

Token sequence: ``[noise tokens + zero-projected pose tokens] ++ [reference tokens]``.
The three pose streams are channel-concatenated, patchified by their own
patchifier and passed through a zero-initialised projection before being added
to the noise tokens. Reference tokens come from a patchifier that starts as a
bit-exact copy of the noise patchifier and use spatially shifted RoPE
positions. Only noise-token positions reach the output head.

In the Reference-Net variant the reference tokens are not sequence-concatenated.
A shallow parallel stack processes them instead, and the output of its block
``j`` is added (through a zero-initialised linear layer, broadcast over frames)
to the main stream before main blocks ``j*k .. j*k+k-1``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, fields
from typing import Mapping

import numpy as np

from . import tensor as T
from .rope import build_rope, positions_for_noise, positions_for_reference, rope_angles, split_head_dim
from .tensor import Tape, Tensor

GROUP_SUFFIXES = ("self_attention", "feed_forward", "modulation")
PARTIAL_GROUPS = ("pose_patchifier", "ref_patchifier", "zero_projection")


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 3
    pose_channels: int = 3
    frames: int = 8
    height: int = 32
    width: int = 48
    patch: int = 4
    embed_dim: int = 64
    num_blocks: int = 2
    num_heads: int = 2
    mlp_ratio: float = 2.0
    ref_net_k: int = 0  # 0: simple modification; k > 0: lightweight Reference Net
    t_max: float = 1000.0
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ValueError(
                f"frame {self.height}x{self.width} is not divisible by patch {self.patch}"
            )
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        split_head_dim(self.head_dim)
        if self.ref_net_k < 0 or (self.ref_net_k and self.num_blocks % self.ref_net_k):
            raise ValueError(
                f"num_blocks {self.num_blocks} is not divisible by reference-net factor {self.ref_net_k}"
            )

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def grid(self) -> tuple[int, int, int]:
        return self.frames, self.height // self.patch, self.width // self.patch

    @property
    def num_noise_tokens(self) -> int:
        f, h, w = self.grid
        return f * h * w

    @property
    def num_ref_tokens(self) -> int:
        _, h, w = self.grid
        return h * w

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch**2

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    @property
    def ref_blocks(self) -> int:
        return self.num_blocks // self.ref_net_k if self.ref_net_k else 0

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: Mapping[str, str]) -> ModelConfig:
        kwargs = {}
        for f in fields(cls):
            if f.name in d:
                kwargs[f.name] = float(d[f.name]) if f.type == "float" else int(d[f.name])
        return cls(**kwargs)


def group_of(name: str) -> str:
    return name.rsplit(".", 1)[0]


def param_groups(params: Mapping[str, np.ndarray]) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {}
    for name in params:
        groups.setdefault(group_of(name), []).append(name)
    return groups


def trainable_mask(mode: str, params: Mapping[str, np.ndarray]) -> frozenset[str]:
    """Trainable group names: every group for ``full``; for ``partial`` the
    condition patchifiers, the zero projection, every self-attention group and
    (Reference-Net variant only) the newly added injection layers.

    ``backbone`` trains everything except the pose path, which stays silent
    behind its zero projection; it is used to pretrain a stand-in foundation
    model before a fine-tuning comparison.
    """
    groups = param_groups(params)
    if mode == "full":
        return frozenset(groups)
    if mode == "backbone":
        return frozenset(g for g in groups if g not in ("pose_patchifier", "zero_projection"))
    if mode != "partial":
        raise ValueError(f"mask mode must be 'full', 'partial' or 'backbone', got {mode!r}")
    return frozenset(
        g for g in groups
        if g in PARTIAL_GROUPS or g.endswith(".self_attention") or g.startswith("ref_net.injection")
    )


def count_parameters(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(p.size for p in params.values()))


# ---------------------------------------------------------------------------
# initialisation


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _block_params(prefix: str, cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, m = cfg.embed_dim, cfg.mlp_dim
    p = {}
    a = f"{prefix}.self_attention"
    p[f"{a}.norm"] = np.ones(d)
    for w in ("wq", "wk", "wv", "wo"):
        p[f"{a}.{w}"] = trunc_normal(rng, (d, d))
    f = f"{prefix}.feed_forward"
    p[f"{f}.norm"] = np.ones(d)
    p[f"{f}.w1"] = trunc_normal(rng, (d, m))
    p[f"{f}.b1"] = np.zeros(m)
    p[f"{f}.w2"] = trunc_normal(rng, (m, d))
    p[f"{f}.b2"] = np.zeros(d)
    p[f"{prefix}.modulation.weight"] = trunc_normal(rng, (d, 6 * d))
    p[f"{prefix}.modulation.bias"] = np.zeros(6 * d)
    return p


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Seeded truncated-normal init (std 0.02) with the conditioning rules:
    zero projection is all zeros and the reference patchifier copies the noise
    patchifier exactly."""
    rng = np.random.default_rng(seed)
    d, pd = cfg.embed_dim, cfg.patch_dim
    p: dict[str, np.ndarray] = {}
    p["noise_patchifier.weight"] = trunc_normal(rng, (pd, d))
    p["noise_patchifier.bias"] = np.zeros(d)
    p["pose_patchifier.weight"] = trunc_normal(rng, (cfg.pose_channels * cfg.patch**2, d))
    p["pose_patchifier.bias"] = np.zeros(d)
    p["ref_patchifier.weight"] = p["noise_patchifier.weight"].copy()
    p["ref_patchifier.bias"] = p["noise_patchifier.bias"].copy()
    p["zero_projection.weight"] = np.zeros((d, d))
    p["zero_projection.bias"] = np.zeros(d)
    p["timestep_embedder.w1"] = trunc_normal(rng, (d, d))
    p["timestep_embedder.b1"] = np.zeros(d)
    p["timestep_embedder.w2"] = trunc_normal(rng, (d, d))
    p["timestep_embedder.b2"] = np.zeros(d)
    p["null_context_token.token"] = trunc_normal(rng, (d,))
    for i in range(cfg.num_blocks):
        p.update(_block_params(f"blocks.{i}", cfg, rng))
    p["output_head.modulation_weight"] = trunc_normal(rng, (d, 2 * d))
    p["output_head.modulation_bias"] = np.zeros(2 * d)
    p["output_head.norm"] = np.ones(d)
    p["output_head.weight"] = trunc_normal(rng, (d, pd))
    p["output_head.bias"] = np.zeros(pd)
    for j in range(cfg.ref_blocks):
        p.update(_block_params(f"ref_net.blocks.{j}", cfg, rng))
        p[f"ref_net.injection.{j}.weight"] = np.zeros((d, d))
        p[f"ref_net.injection.{j}.bias"] = np.zeros(d)
    return p


def build_reference_net_variant(cfg: ModelConfig, k: int, seed: int) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    if k <= 0 or cfg.num_blocks % k:
        raise ValueError(f"num_blocks {cfg.num_blocks} is not divisible by reference-net factor {k}")
    new_cfg = ModelConfig(**{**cfg.to_dict(), "ref_net_k": k})
    return new_cfg, init_params(new_cfg, seed)


# ---------------------------------------------------------------------------
# building blocks


def patchify(frames, weight: Tensor, bias: Tensor | None, patch: int) -> Tensor:
    """``[B,C,F,H,W]`` (or unbatched ``[C,F,H,W]``) to ``[B, F*(H/p)*(W/p), D]``."""
    x = T.as_tensor(frames)
    if x.ndim == 4:
        x = T.reshape(x, (1,) + x.shape)
    b, c, f, h, w = x.shape
    if h % patch or w % patch:
        raise ValueError(f"frame {h}x{w} is not divisible by patch {patch}")
    hn, wn = h // patch, w // patch
    x = T.reshape(x, (b, c, f, hn, patch, wn, patch))
    x = T.transpose(x, (0, 2, 3, 5, 1, 4, 6))
    x = T.reshape(x, (b, f * hn * wn, c * patch * patch))
    return T.linear(x, weight, bias)


def unpatchify(tokens: np.ndarray, channels: int, frames: int, height: int, width: int, patch: int) -> np.ndarray:
    """Inverse rearrangement of :func:`patchify` (without the projection)."""
    b = tokens.shape[0]
    hn, wn = height // patch, width // patch
    x = tokens.reshape(b, frames, hn, wn, channels, patch, patch)
    return x.transpose(0, 4, 1, 2, 5, 3, 6).reshape(b, channels, frames, height, width)


def patch_tokens(frames: np.ndarray, patch: int) -> np.ndarray:
    """Rearrange ``[B,C,F,H,W]`` into raw patch vectors ``[B, N, C*p*p]``."""
    b, c, f, h, w = frames.shape
    hn, wn = h // patch, w // patch
    x = frames.reshape(b, c, f, hn, patch, wn, patch).transpose(0, 2, 3, 5, 1, 4, 6)
    return x.reshape(b, f * hn * wn, c * patch * patch)


def timestep_features(t: np.ndarray, dim: int, t_max: float) -> np.ndarray:
    """Sinusoidal features of ``t / t_max`` (rescaled to a 0..1000 clock)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = (np.asarray(t, dtype=np.float64) / t_max * 1000.0)[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


def timestep_embed(p: Mapping[str, Tensor], t: np.ndarray, cfg: ModelConfig) -> Tensor:
    feats = Tensor(timestep_features(t, cfg.embed_dim, cfg.t_max))
    h = T.silu(T.linear(feats, p["timestep_embedder.w1"], p["timestep_embedder.b1"]))
    return T.linear(h, p["timestep_embedder.w2"], p["timestep_embedder.b2"])


def _modulate(x: Tensor, shift: Tensor, scale_: Tensor) -> Tensor:
    return T.add(T.mul(x, T.add(scale_, 1.0)), shift)


def attention(h: Tensor, p: Mapping[str, Tensor], prefix: str, cfg: ModelConfig, angles) -> Tensor:
    b, n, d = h.shape
    nh, hd = cfg.num_heads, cfg.head_dim
    cos, sin = angles

    def heads(w):
        y = T.reshape(T.matmul(h, p[f"{prefix}.{w}"]), (b, n, nh, hd))
        return T.transpose(y, (0, 2, 1, 3))

    q = T.rotate_pairs(heads("wq"), cos, sin)
    k = T.rotate_pairs(heads("wk"), cos, sin)
    v = heads("wv")
    logits = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    o = T.matmul(T.softmax(logits, axis=-1), v)
    o = T.reshape(T.transpose(o, (0, 2, 1, 3)), (b, n, d))
    return T.matmul(o, p[f"{prefix}.wo"])


def block(x: Tensor, p: Mapping[str, Tensor], prefix: str, cfg: ModelConfig, cond: Tensor, angles) -> Tensor:
    """Pre-norm transformer block with timestep scale/shift/gate modulation."""
    d = cfg.embed_dim
    b = x.shape[0]
    mod = T.reshape(
        T.linear(cond, p[f"{prefix}.modulation.weight"], p[f"{prefix}.modulation.bias"]),
        (b, 1, 6 * d),
    )
    shift1, scale1, gate1, shift2, scale2, gate2 = (T.slice(mod, 2, j * d, (j + 1) * d) for j in range(6))

    a = f"{prefix}.self_attention"
    h = _modulate(T.rms_norm(x, p[f"{a}.norm"]), shift1, scale1)
    x = T.add(x, T.mul(T.add(gate1, 1.0), attention(h, p, a, cfg, angles)))

    f = f"{prefix}.feed_forward"
    h = _modulate(T.rms_norm(x, p[f"{f}.norm"]), shift2, scale2)
    h = T.linear(T.gelu(T.linear(h, p[f"{f}.w1"], p[f"{f}.b1"])), p[f"{f}.w2"], p[f"{f}.b2"])
    return T.add(x, T.mul(T.add(gate2, 1.0), h))


@functools.lru_cache(maxsize=32)
def _angles(cfg: ModelConfig, dtype_name: str):
    f, hn, wn = cfg.grid
    table = build_rope(cfg.head_dim, f - 1, 2 * hn, 2 * wn, cfg.rope_base)
    noise = rope_angles(positions_for_noise(f, hn, wn), table)
    ref = rope_angles(positions_for_reference(hn, wn, hn, wn), table)
    plain = rope_angles(positions_for_noise(1, hn, wn), table)
    dt = np.dtype(dtype_name)
    joint = tuple(np.concatenate([a, r]).astype(dt) for a, r in zip(noise, ref))
    return (
        tuple(a.astype(dt) for a in noise),
        joint,
        tuple(a.astype(dt) for a in plain),
    )


def encode_pose(p: Mapping[str, Tensor], poses, cfg: ModelConfig) -> Tensor:
    """Channel-concatenate the pose streams, patchify, then zero-project."""
    if isinstance(poses, (list, tuple)):
        shapes = {np.shape(s) for s in poses}
        if len(shapes) != 1:
            raise ValueError(f"pose streams differ in shape: {sorted(shapes)}")
        poses = np.concatenate([np.asarray(s) for s in poses], axis=-4)
    poses = np.asarray(poses)
    if poses.ndim == 4:
        poses = poses[None]
    if poses.shape[1] != cfg.pose_channels or poses.shape[2:] != (cfg.frames, cfg.height, cfg.width):
        raise ValueError(
            f"pose shape {poses.shape[1:]} does not match "
            f"({cfg.pose_channels}, {cfg.frames}, {cfg.height}, {cfg.width})"
        )
    tokens = patchify(Tensor(poses), p["pose_patchifier.weight"], p["pose_patchifier.bias"], cfg.patch)
    return T.linear(tokens, p["zero_projection.weight"], p["zero_projection.bias"])


def _reference_tokens(p, reference: np.ndarray, drop: np.ndarray, cfg: ModelConfig) -> Tensor:
    ref = np.asarray(reference)[:, :, None]  # [B, C, 1, H, W]
    tokens = patchify(Tensor(ref), p["ref_patchifier.weight"], p["ref_patchifier.bias"], cfg.patch)
    if not drop.any():
        return tokens
    dt = tokens.data.dtype
    keep = Tensor((~drop).astype(dt)[:, None, None])
    null = T.broadcast_to(p["null_context_token.token"], tokens.shape)
    return T.add(T.mul(tokens, keep), T.mul(null, Tensor(drop.astype(dt)[:, None, None])))


def forward(
    p: Mapping[str, Tensor],
    cfg: ModelConfig,
    noisy: np.ndarray,
    poses,
    reference: np.ndarray,
    t,
    drop_reference=False,
) -> Tensor:
    """Predicted velocity as patch tokens ``[B, N_noise, C*p*p]``.

    ``noisy`` is ``[B,C,F,H,W]``, ``poses`` ``[B,3,F,H,W]`` (or a sequence of
    three single-channel streams), ``reference`` ``[B,C,H,W]``, ``t`` ``[B]``.
    ``drop_reference`` (scalar or per-sample) swaps reference tokens for the
    learned null token.
    """
    noisy = np.asarray(noisy)
    if noisy.ndim == 4:
        noisy = noisy[None]
    reference = np.asarray(reference)
    if reference.ndim == 3:
        reference = reference[None]
    b = noisy.shape[0]
    if noisy.shape[1:] != (cfg.channels, cfg.frames, cfg.height, cfg.width):
        raise ValueError(f"noisy latent shape {noisy.shape[1:]} does not match model grid")
    if reference.shape[1:] != (cfg.channels, cfg.height, cfg.width):
        raise ValueError(f"reference shape {reference.shape[1:]} does not match model grid")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
    drop = np.broadcast_to(np.asarray(drop_reference, dtype=bool), (b,))
    dtype_name = T.get_dtype().__name__
    noise_angles, joint_angles, plain_angles = _angles(cfg, dtype_name)

    x = patchify(Tensor(noisy), p["noise_patchifier.weight"], p["noise_patchifier.bias"], cfg.patch)
    x = T.add(x, encode_pose(p, poses, cfg))
    ref = _reference_tokens(p, reference, drop, cfg)
    temb = timestep_embed(p, t, cfg)
    cond = T.silu(temb)
    n = cfg.num_noise_tokens

    if cfg.ref_net_k:
        f, hn, wn = cfg.grid
        r = ref
        for i in range(cfg.num_blocks):
            if i % cfg.ref_net_k == 0:
                j = i // cfg.ref_net_k
                r = block(r, p, f"ref_net.blocks.{j}", cfg, cond, plain_angles)
                inj = T.linear(r, p[f"ref_net.injection.{j}.weight"], p[f"ref_net.injection.{j}.bias"])
                inj = T.reshape(inj, (b, 1, hn * wn, cfg.embed_dim))
            x = T.reshape(T.add(T.reshape(x, (b, f, hn * wn, cfg.embed_dim)), inj), (b, n, cfg.embed_dim))
            x = block(x, p, f"blocks.{i}", cfg, cond, noise_angles)
    else:
        x = T.concat([x, ref], axis=1)
        for i in range(cfg.num_blocks):
            x = block(x, p, f"blocks.{i}", cfg, cond, joint_angles)
        x = T.slice(x, 1, 0, n)

    d = cfg.embed_dim
    mod = T.reshape(T.linear(cond, p["output_head.modulation_weight"], p["output_head.modulation_bias"]), (b, 1, 2 * d))
    h = _modulate(T.rms_norm(x, p["output_head.norm"]), T.slice(mod, 2, 0, d), T.slice(mod, 2, d, 2 * d))
    return T.linear(h, p["output_head.weight"], p["output_head.bias"])


def as_tensors(params: Mapping[str, np.ndarray], tape: Tape | None = None) -> dict[str, Tensor]:
    if tape is None:
        return {k: Tensor(v) for k, v in params.items()}
    return {k: tape.watch(v) for k, v in params.items()}


class DiT:
    """A config plus its parameter arrays; the unit sampled from and checkpointed."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> DiT:
        return cls(config, init_params(config, seed))

    def velocity(self, noisy, poses, reference, t, drop_reference=False) -> np.ndarray:
        """Velocity prediction in frame layout ``[B,C,F,H,W]``; no tape."""
        cfg = self.config
        out = forward(as_tensors(self.params), cfg, noisy, poses, reference, t, drop_reference)
        return unpatchify(out.data, cfg.channels, cfg.frames, cfg.height, cfg.width, cfg.patch)
