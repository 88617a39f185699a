"""Representative attention: gather -> interact -> distribute.

The layer replaces dense token-to-token attention with a compact latent
bottleneck. Per head, the N spatial tokens are softly routed onto M latent
representatives by similarity of their key features to learned anchor
columns (gather), the representatives exchange information through a small
residual self-attention (interact), and every spatial query reads the
refined representatives back through cross-attention (distribute). A
depthwise-convolution bypass on the value features preserves local detail
and is fused before the output projection.

Shape conventions: inputs are [B, N, C] with N = grid_h * grid_w tokens in
row-major grid order; per-head tensors are [B, h, N, d] with C = h * d, head
r owning channels [r*d, (r+1)*d).
"""

import math
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError

_DTYPES = {"float64": np.float64, "float32": np.float32}

ROUTING_MODES = ("learned", "kmeans")


@dataclass(frozen=True)
class AttnConfig:
    """Hyperparameters of one representative-attention layer."""

    channels: int                  # C
    heads: int                     # h, with d = C // h
    num_representatives: int       # M latent slots
    grid_h: int
    grid_w: int
    dwc_kernel: int = 3            # odd depthwise kernel size
    epsilon: float = 1e-6          # slot-mass normalization guard
    ln_eps: float = 1e-5           # latent layer-norm epsilon
    enable_interact: bool = True
    enable_dwc: bool = True
    routing: str = "learned"       # "learned" soft gather or "kmeans" hard routing
    dtype: str = "float64"         # "float64" deterministic / "float32" benchmark
    kmeans_iters: int = 3
    kmeans_seed: int = 0

    def __post_init__(self):
        if self.channels <= 0 or self.heads <= 0:
            raise ConfigError("channels and heads must be positive")
        if self.channels % self.heads != 0:
            raise ConfigError(f"channels ({self.channels}) not divisible by heads ({self.heads})")
        if self.num_representatives < 1:
            raise ConfigError("num_representatives must be >= 1")
        if self.grid_h <= 0 or self.grid_w <= 0:
            raise ConfigError("grid dims must be positive")
        if self.dwc_kernel <= 0 or self.dwc_kernel % 2 == 0:
            raise ConfigError(f"dwc_kernel must be odd and positive, got {self.dwc_kernel}")
        if self.epsilon <= 0 or self.ln_eps <= 0:
            raise ConfigError("epsilon and ln_eps must be positive")
        if self.routing not in ROUTING_MODES:
            raise ConfigError(f"routing must be one of {ROUTING_MODES}, got {self.routing!r}")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {tuple(_DTYPES)}, got {self.dtype!r}")
        if self.kmeans_iters < 1:
            raise ConfigError("kmeans_iters must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    @property
    def num_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]


# Serialization order of parameter fields. Fixed; tensor files written by
# save_params/load_params follow exactly this sequence.
PARAM_FIELDS = (
    "w_q", "w_k", "w_v", "w_o",
    "w_g",
    "w_lq", "w_lk", "w_lv",
    "ln_k_gamma", "ln_k_beta", "ln_v_gamma", "ln_v_beta",
    "dwc_kernel", "dwc_bias",
)


@dataclass
class RPAttnParams:
    """Learnable weights of one layer. Arrays are never mutated by forward/backward."""

    w_q: np.ndarray        # [C, C]
    w_k: np.ndarray        # [C, C]
    w_v: np.ndarray        # [C, C]
    w_o: np.ndarray        # [C, C]
    w_g: np.ndarray        # [d, M] gather anchors, shared across heads
    w_lq: np.ndarray       # [d, d]
    w_lk: np.ndarray       # [d, d]
    w_lv: np.ndarray       # [d, d]
    ln_k_gamma: np.ndarray  # [d]
    ln_k_beta: np.ndarray   # [d]
    ln_v_gamma: np.ndarray  # [d]
    ln_v_beta: np.ndarray   # [d]
    dwc_kernel: np.ndarray  # [k, k, C]
    dwc_bias: np.ndarray    # [C]

    def field_dict(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_FIELDS}


def param_shapes(config: AttnConfig) -> dict:
    """Shape of every parameter field for the given config, in field order."""
    c = config.channels
    d = config.head_dim
    m = config.num_representatives
    k = config.dwc_kernel
    return {
        "w_q": (c, c), "w_k": (c, c), "w_v": (c, c), "w_o": (c, c),
        "w_g": (d, m),
        "w_lq": (d, d), "w_lk": (d, d), "w_lv": (d, d),
        "ln_k_gamma": (d,), "ln_k_beta": (d,), "ln_v_gamma": (d,), "ln_v_beta": (d,),
        "dwc_kernel": (k, k, c), "dwc_bias": (c,),
    }


def param_count(config: AttnConfig) -> int:
    """Exact number of scalar parameters in one layer."""
    return sum(math.prod(shape) for shape in param_shapes(config).values())


def init_params(config: AttnConfig, seed: int) -> RPAttnParams:
    """Deterministic initialization.

    Projection matrices draw uniform(+-1/sqrt(fan_in)); the gather anchors
    draw normal(0, 0.02) so the initial routing is near uniform and no slot
    starts dead; layer-norm affines start at identity; the depthwise kernel
    draws uniform(+-1/k) with zero bias.
    """
    rng = np.random.default_rng(seed)
    dt = config.np_dtype
    shapes = param_shapes(config)
    c = config.channels
    d = config.head_dim
    k = config.dwc_kernel

    def uni(name, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, shapes[name]).astype(dt)

    return RPAttnParams(
        w_q=uni("w_q", c), w_k=uni("w_k", c), w_v=uni("w_v", c), w_o=uni("w_o", c),
        w_g=(rng.normal(0.0, 0.02, shapes["w_g"])).astype(dt),
        w_lq=uni("w_lq", d), w_lk=uni("w_lk", d), w_lv=uni("w_lv", d),
        ln_k_gamma=np.ones(d, dtype=dt), ln_k_beta=np.zeros(d, dtype=dt),
        ln_v_gamma=np.ones(d, dtype=dt), ln_v_beta=np.zeros(d, dtype=dt),
        dwc_kernel=uni("dwc_kernel", k * k),
        dwc_bias=np.zeros(c, dtype=dt),
    )


@dataclass
class ForwardTrace:
    """Every intermediate of one forward call, retained for backward and inspection."""

    x: np.ndarray          # [B, N, C] layer input
    q: np.ndarray          # [B, h, N, d]
    k: np.ndarray          # [B, h, N, d]
    v: np.ndarray          # [B, h, N, d]
    a: np.ndarray          # [B, h, N, M] row-stochastic assignments
    a_hat: np.ndarray      # [B, h, N, M] slot-mass normalized assignments
    k_l: np.ndarray        # [B, h, M, d] gathered latent keys
    v_l: np.ndarray        # [B, h, M, d] gathered latent values
    k_l_bar: np.ndarray    # [B, h, M, d] normalized latent keys
    v_l_bar: np.ndarray    # [B, h, M, d] normalized latent values
    p_lat: Optional[np.ndarray]  # [B, h, M, M] latent attention, None when interact is off
    z_l: np.ndarray        # [B, h, M, d] refined latent values
    p_dist: np.ndarray     # [B, h, N, M] distribution attention
    o_global: np.ndarray   # [B, N, C] cross-attention readout, heads merged
    bypass_out: np.ndarray  # [B, N, C] depthwise bypass (zeros when disabled)
    output: np.ndarray     # [B, N, C]


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    """[B, N, C] -> [B, h, N, d] with d = C // h."""
    b, n, c = x.shape
    return x.reshape(b, n, heads, c // heads).transpose(0, 2, 1, 3)


def merge_heads(x: np.ndarray) -> np.ndarray:
    """[B, h, N, d] -> [B, N, h*d], inverse of split_heads."""
    b, h, n, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * d)


def project_qkv(x: np.ndarray, params: RPAttnParams, config: AttnConfig):
    """Query/key/value projections, reshaped to per-head tensors."""
    q = split_heads(kernels.linear(x, params.w_q), config.heads)
    k = split_heads(kernels.linear(x, params.w_k), config.heads)
    v = split_heads(kernels.linear(x, params.w_v), config.heads)
    return q, k, v


def gather_assign(k: np.ndarray, w_g: np.ndarray) -> np.ndarray:
    """Soft assignment of tokens to slots: softmax over slots of key-anchor products."""
    return kernels.softmax_lastdim(kernels.matmul(k, w_g))


def mass_normalize(a: np.ndarray, epsilon: float) -> np.ndarray:
    """Divide each slot column by its token mass plus epsilon.

    Keeps slots gathered from many tokens on the same scale as slots fed by
    few tokens; epsilon guards columns with no mass, which simply stay zero.
    """
    col = a.sum(axis=-2, keepdims=True)
    return a / (col + epsilon)


def gather_latents(a_hat: np.ndarray, k: np.ndarray, v: np.ndarray):
    """Weighted aggregation of spatial keys/values into the M slots."""
    a_t = np.swapaxes(a_hat, -1, -2)
    return kernels.matmul(a_t, k), kernels.matmul(a_t, v)


def latent_interact(k_l: np.ndarray, v_l: np.ndarray, params: RPAttnParams, config: AttnConfig):
    """Normalize the latents and run residual self-attention among them.

    Latent queries, keys and values all derive from the normalized latent
    values, keeping the key space dedicated to routing. Returns
    (k_l_bar, v_l_bar, p_lat, z_l); with interact disabled z_l is exactly
    v_l_bar and p_lat is None.
    """
    k_l_bar = kernels.layer_norm(k_l, params.ln_k_gamma, params.ln_k_beta, config.ln_eps)
    v_l_bar = kernels.layer_norm(v_l, params.ln_v_gamma, params.ln_v_beta, config.ln_eps)
    if not config.enable_interact:
        return k_l_bar, v_l_bar, None, v_l_bar
    q_t = kernels.matmul(v_l_bar, params.w_lq)
    k_t = kernels.matmul(v_l_bar, params.w_lk)
    v_t = kernels.matmul(v_l_bar, params.w_lv)
    scale = 1.0 / math.sqrt(config.head_dim)
    p_lat = kernels.softmax_lastdim(kernels.matmul(q_t, np.swapaxes(k_t, -1, -2)) * scale)
    z_l = v_l_bar + kernels.matmul(p_lat, v_t)
    return k_l_bar, v_l_bar, p_lat, z_l


def distribute_global(q: np.ndarray, k_l_bar: np.ndarray, z_l: np.ndarray):
    """Cross-attention of the N spatial queries over the M slots.

    Returns (p_dist, o_global) with heads merged back to C channels.
    """
    d = q.shape[-1]
    scale = 1.0 / math.sqrt(d)
    p_dist = kernels.softmax_lastdim(kernels.matmul(q, np.swapaxes(k_l_bar, -1, -2)) * scale)
    return p_dist, merge_heads(kernels.matmul(p_dist, z_l))


def local_bypass(x: np.ndarray, params: RPAttnParams, config: AttnConfig) -> np.ndarray:
    """Depthwise convolution over the value features on the token grid.

    Returns zeros when the bypass is disabled.
    """
    b, n, c = x.shape
    if not config.enable_dwc:
        return np.zeros_like(x)
    if n != config.num_tokens:
        raise ConfigError(f"token count {n} does not match grid {config.grid_h}x{config.grid_w}")
    xv = kernels.linear(x, params.w_v)
    grid = xv.reshape(b, config.grid_h, config.grid_w, c)
    out = kernels.depthwise_conv2d(grid, params.dwc_kernel, params.dwc_bias)
    return out.reshape(b, n, c)


def rpattention_forward(x: np.ndarray, params: RPAttnParams, config: AttnConfig):
    """Full layer forward. Returns (output, ForwardTrace).

    Output shape equals input shape. The trace retains every intermediate
    needed by the analytic backward pass.
    """
    x = np.asarray(x, dtype=config.np_dtype)
    if x.ndim != 3:
        raise ShapeError(f"input must be [B, N, C], got {x.shape}")
    b, n, c = x.shape
    if b == 0:
        raise ConfigError("batch dimension must be >= 1")
    if c != config.channels:
        raise ShapeError(f"input channels {c} != config channels {config.channels}")
    if n != config.num_tokens:
        raise ConfigError(f"token count {n} does not match grid {config.grid_h}x{config.grid_w}")

    q, k, v = project_qkv(x, params, config)

    if config.routing == "kmeans":
        from .baselines import kmeans_gather  # runtime import: baselines builds on this module

        a = kmeans_gather(k, config.num_representatives, config.kmeans_iters, config.kmeans_seed)
        a = a.astype(config.np_dtype)
    else:
        a = gather_assign(k, params.w_g)
    a_hat = mass_normalize(a, config.epsilon)
    k_l, v_l = gather_latents(a_hat, k, v)
    k_l_bar, v_l_bar, p_lat, z_l = latent_interact(k_l, v_l, params, config)
    p_dist, o_global = distribute_global(q, k_l_bar, z_l)
    bypass = local_bypass(x, params, config)
    output = kernels.linear(o_global + bypass, params.w_o)

    trace = ForwardTrace(
        x=x, q=q, k=k, v=v, a=a, a_hat=a_hat, k_l=k_l, v_l=v_l,
        k_l_bar=k_l_bar, v_l_bar=v_l_bar, p_lat=p_lat, z_l=z_l,
        p_dist=p_dist, o_global=o_global, bypass_out=bypass, output=output,
    )
    return output, trace
