"""Neural-network building blocks on top of the tape engine.

Parameters are plain named float64 arrays (``Param``). A forward pass
binds them as leaves on a fresh tape; optimizers mutate the master
arrays in place between tapes. Nothing here owns a tape across steps.
"""

from __future__ import annotations

import struct

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, Tape


class Param:
    """Named mutable float64 array. The single source of truth for a weight."""

    __slots__ = ("name", "data")

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.data = np.ascontiguousarray(data, dtype=np.float64)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.data.shape})"


class Binding:
    """Per-tape map from parameter name to its leaf tensor.

    Created once per forward pass; ``leaf`` is idempotent so layers can
    share parameters within one tape.
    """

    def __init__(self, tape: Tape):
        self.tape = tape
        self._leaves: dict[str, Tensor] = {}
        self._params: dict[str, Param] = {}

    def leaf(self, param: Param) -> Tensor:
        t = self._leaves.get(param.name)
        if t is None:
            t = self.tape.leaf(param.data, name=param.name)
            self._leaves[param.name] = t
            self._params[param.name] = param
        return t

    def names(self):
        return list(self._leaves)

    def tensors(self):
        return list(self._leaves.values())

    def tensor(self, name: str) -> Tensor:
        return self._leaves[name]

    def grads_by_name(self, gm: ad.GradientMap) -> dict[str, np.ndarray]:
        return {name: gm.get(t) for name, t in self._leaves.items()}


def init_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    """Affine layer, weight [in_dim x out_dim] and bias [out_dim]."""

    def __init__(self, name: str, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Param(f"{name}/w", init_uniform(rng, in_dim, (in_dim, out_dim)))
        self.bias = Param(f"{name}/b", init_uniform(rng, in_dim, (out_dim,)))

    def params(self) -> list[Param]:
        return [self.weight, self.bias]

    def forward(self, binding: Binding, x: Tensor) -> Tensor:
        w = binding.leaf(self.weight)
        b = binding.leaf(self.bias)
        h = ad.matmul(x, w)
        if x.ndim == 2:
            b = ad.broadcast_to(b, h.shape)
        return ad.add(h, b)

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight.data + self.bias.data


class LayerTrace:
    """Per-layer record from an MLP forward: input values and the
    pre-activation tensor. The meta-gradient path reads the cotangent at
    ``pre`` to recover per-row gradients."""

    __slots__ = ("x_value", "pre")

    def __init__(self, x_value: np.ndarray, pre: Tensor):
        self.x_value = x_value
        self.pre = pre


def mlp_forward(
    binding: Binding,
    layers: list[Linear],
    x: Tensor,
    collect: list[LayerTrace] | None = None,
) -> Tensor:
    """ReLU MLP: affine stack with ReLU between layers, none on the output."""
    if not layers:
        raise ValueError("mlp_forward: empty layer list")
    if x.shape[-1] != layers[0].in_dim:
        raise ad.ShapeError(
            f"mlp_forward: input dim {x.shape[-1]} != first layer in_dim {layers[0].in_dim}"
        )
    h = x
    for i, layer in enumerate(layers):
        pre = layer.forward(binding, h)
        if collect is not None:
            collect.append(LayerTrace(h.data, pre))
        h = ad.relu(pre) if i + 1 < len(layers) else pre
    return h


def mlp_forward_np(layers: list[Linear], x: np.ndarray) -> np.ndarray:
    """Tape-free twin of mlp_forward; bitwise-identical values."""
    h = x
    for i, layer in enumerate(layers):
        h = layer.forward_np(h)
        if i + 1 < len(layers):
            h = np.maximum(h, 0.0)
    return h


class LayerNorm:
    def __init__(self, name: str, dim: int, eps: float = 1e-5):
        self.dim = dim
        self.eps = eps
        self.scale = Param(f"{name}/scale", np.ones(dim))
        self.shift = Param(f"{name}/shift", np.zeros(dim))

    def params(self) -> list[Param]:
        return [self.scale, self.shift]

    def forward(self, binding: Binding, x: Tensor) -> Tensor:
        # row-wise: (x - mean) / sqrt(var + eps) * scale + shift
        tape = binding.tape
        mu = ad.mean(x, axis=1, keepdims=True)
        centered = ad.sub(x, ad.broadcast_to(mu, x.shape))
        var = ad.mean(ad.mul(centered, centered), axis=1, keepdims=True)
        eps = tape.constant(np.full(var.shape, self.eps))
        std = ad.sqrt(ad.add(var, eps))
        normed = ad.div(centered, ad.broadcast_to(std, x.shape))
        scale = ad.broadcast_to(binding.leaf(self.scale), x.shape)
        shift = ad.broadcast_to(binding.leaf(self.shift), x.shape)
        return ad.add(ad.mul(normed, scale), shift)


class EncoderLayer:
    """Self-attention sublayer plus position-wise feed-forward sublayer,
    each with residual connection and post-sublayer layer norm.

    With ``attention=False`` the attention sublayer is swapped for a
    position-wise feed-forward stack of near-equal parameter count
    (2*d inner width; within 0.5% of the attention projections), keeping
    residuals and norms in place.
    """

    def __init__(
        self,
        name: str,
        d_model: int,
        n_heads: int,
        ffn_dim: int,
        rng: np.random.Generator,
        use_layer_norm: bool = True,
        attention: bool = True,
    ):
        if d_model % n_heads != 0:
            raise ad.ShapeError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.use_layer_norm = use_layer_norm
        self.attention = attention
        if attention:
            self.wq = Linear(f"{name}/q", d_model, d_model, rng)
            self.wk = Linear(f"{name}/k", d_model, d_model, rng)
            self.wv = Linear(f"{name}/v", d_model, d_model, rng)
            self.wo = Linear(f"{name}/o", d_model, d_model, rng)
        else:
            self.sub1_a = Linear(f"{name}/ff1a", d_model, 2 * d_model, rng)
            self.sub1_b = Linear(f"{name}/ff1b", 2 * d_model, d_model, rng)
        self.ln1 = LayerNorm(f"{name}/ln1", d_model)
        self.ffn_a = Linear(f"{name}/ffa", d_model, ffn_dim, rng)
        self.ffn_b = Linear(f"{name}/ffb", ffn_dim, d_model, rng)
        self.ln2 = LayerNorm(f"{name}/ln2", d_model)

    def params(self) -> list[Param]:
        out: list[Param] = []
        if self.attention:
            for lin in (self.wq, self.wk, self.wv, self.wo):
                out.extend(lin.params())
        else:
            out.extend(self.sub1_a.params())
            out.extend(self.sub1_b.params())
        out.extend(self.ln1.params())
        out.extend(self.ffn_a.params())
        out.extend(self.ffn_b.params())
        out.extend(self.ln2.params())
        return out

    def forward(
        self,
        binding: Binding,
        x: Tensor,
        attn_out: list[np.ndarray] | None = None,
    ) -> Tensor:
        tokens = x.shape[0]
        if x.ndim != 2 or x.shape[1] != self.d_model:
            raise ad.ShapeError(
                f"encoder layer: expected [T x {self.d_model}] input, got {x.shape}"
            )
        if self.attention:
            q = self.wq.forward(binding, x)
            k = self.wk.forward(binding, x)
            v = self.wv.forward(binding, x)
            heads = []
            scale = 1.0 / np.sqrt(self.d_head)
            for h in range(self.n_heads):
                lo, hi = h * self.d_head, (h + 1) * self.d_head
                qh = ad.slice_(q, (slice(0, tokens), slice(lo, hi)))
                kh = ad.slice_(k, (slice(0, tokens), slice(lo, hi)))
                vh = ad.slice_(v, (slice(0, tokens), slice(lo, hi)))
                scores = ad.scalar_mul(ad.matmul(qh, ad.transpose(kh)), scale)
                weights = ad.softmax(scores, axis=1)
                if attn_out is not None:
                    attn_out.append(weights.data)
                heads.append(ad.matmul(weights, vh))
            mixed = heads[0] if len(heads) == 1 else ad.concat(heads, axis=1)
            sub1 = self.wo.forward(binding, mixed)
        else:
            sub1 = self.sub1_b.forward(binding, ad.relu(self.sub1_a.forward(binding, x)))
        h = ad.add(x, sub1)
        if self.use_layer_norm:
            h = self.ln1.forward(binding, h)
        ff = self.ffn_b.forward(binding, ad.relu(self.ffn_a.forward(binding, h)))
        out = ad.add(h, ff)
        if self.use_layer_norm:
            out = self.ln2.forward(binding, out)
        return out


def multi_head_attention(
    binding: Binding,
    layer: EncoderLayer,
    x: Tensor,
    attn_out: list[np.ndarray] | None = None,
) -> Tensor:
    """One full encoder layer applied to [T x d] inputs."""
    return layer.forward(binding, x, attn_out=attn_out)


def position_encoding(length: int, dim: int) -> np.ndarray:
    """Sinusoidal position table [length x dim]; dim must be even."""
    if length < 1:
        raise ValueError("position_encoding: length must be >= 1")
    if dim % 2 != 0:
        raise ValueError(f"position_encoding: dim must be even, got {dim}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class Optimizer:
    """Shared step logic: subclasses provide the per-parameter delta.

    ``direction`` is "descent" (minimize) or "ascent" (maximize).
    """

    algorithm = "base"

    def __init__(self, lr: float):
        self.lr = float(lr)
        self.step_count = 0
        self._state: dict[str, dict[str, np.ndarray]] = {}

    def _delta(self, name: str, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def step(self, params: list[Param], grads: dict[str, np.ndarray], direction: str = "descent"):
        if direction not in ("descent", "ascent"):
            raise ValueError(f"unknown direction {direction!r}")
        sign = -1.0 if direction == "descent" else 1.0
        self.step_count += 1
        for p in params:
            if p.name not in grads:
                raise KeyError(f"missing gradient for parameter {p.name!r}")
            g = grads[p.name]
            if g.shape != p.data.shape:
                raise ad.ShapeError(
                    f"gradient shape {g.shape} != parameter shape {p.data.shape} for {p.name!r}"
                )
            p.data += sign * self._delta(p.name, g)


class Sgd(Optimizer):
    algorithm = "sgd"

    def _delta(self, name, grad):
        return self.lr * grad


class RmsProp(Optimizer):
    algorithm = "rmsprop"

    def __init__(self, lr: float, decay: float = 0.99, eps: float = 1e-8):
        super().__init__(lr)
        self.decay = decay
        self.eps = eps

    def _delta(self, name, grad):
        st = self._state.setdefault(name, {"sq": np.zeros_like(grad)})
        st["sq"] = self.decay * st["sq"] + (1.0 - self.decay) * grad * grad
        return self.lr * grad / (np.sqrt(st["sq"]) + self.eps)


class Adam(Optimizer):
    algorithm = "adam"

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._t: dict[str, int] = {}

    def _delta(self, name, grad):
        st = self._state.setdefault(name, {"m": np.zeros_like(grad), "v": np.zeros_like(grad)})
        t = self._t.get(name, 0) + 1
        self._t[name] = t
        st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * grad
        st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * grad * grad
        m_hat = st["m"] / (1.0 - self.beta1 ** t)
        v_hat = st["v"] / (1.0 - self.beta2 ** t)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(tag: str, lr: float, **kwargs) -> Optimizer:
    table = {"sgd": Sgd, "rmsprop": RmsProp, "adam": Adam}
    try:
        cls = table[tag]
    except KeyError:
        raise ValueError(f"unknown optimizer {tag!r} (expected sgd|rmsprop|adam)") from None
    return cls(lr, **kwargs)


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------
#
# Flat little-endian binary layout, identical across platforms:
#   magic   4 bytes  b"MRC1"
#   version u32      currently 1
#   count   u32      number of parameters
#   then per parameter, in written order:
#     name_len u16, name utf-8 bytes,
#     ndim     u8,  dims u32 each,
#     data     float64 little-endian, C order
#
CHECKPOINT_MAGIC = b"MRC1"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: list[Param]):
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(struct.pack("<B", p.data.ndim))
            for dim in p.data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
            out[name] = np.ascontiguousarray(data, dtype=np.float64)
        return out


def restore_params(params: list[Param], saved: dict[str, np.ndarray]):
    """Load saved arrays into existing Param objects, shape-checked."""
    for p in params:
        if p.name not in saved:
            raise KeyError(f"checkpoint missing parameter {p.name!r}")
        arr = saved[p.name]
        if arr.shape != p.data.shape:
            raise ad.ShapeError(
                f"checkpoint shape {arr.shape} != parameter shape {p.data.shape} for {p.name!r}"
            )
        p.data[...] = arr
