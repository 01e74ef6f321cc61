"""Differentiable primitives, parameter store, Adam, checkpoint IO, seeded RNG.

Gradients come from torch's reverse-mode autograd; the contract each primitive
must satisfy is the central finite-difference check in the test suite, not the
mechanism. Training math runs at float32, gradient oracles at float64.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from typing import Iterable, Mapping

import torch
import torch.nn.functional as F

CHECKPOINT_MAGIC = b"DGAE"
CHECKPOINT_VERSION = 1
OPT_PREFIX = "!opt/"          # reserved prefix: optimizer state records
SCHED_BETA_KEY = "!sched/beta"  # reserved record: noise schedule betas


# ---------------------------------------------------------------------------
# seeded RNG
# ---------------------------------------------------------------------------

def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def mix_seed(seed: int, stream: str, counter: int = 0) -> int:
    """Stable 64-bit seed for a named stream at a given counter (resumable draws)."""
    h = seed & 0xFFFFFFFFFFFFFFFF
    for b in stream.encode():
        h = _splitmix64(h ^ b)
    return _splitmix64(h ^ (counter & 0xFFFFFFFFFFFFFFFF))


def generator(seed: int, stream: str = "", counter: int = 0) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(mix_seed(seed, stream, counter))
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def conv2d(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> torch.Tensor:
    """Cross-correlation of NCHW input with OIkk weight."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape[1]} vs weight {weight.shape[1]}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Affine map x @ weight.T + bias over the last axis."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"feature mismatch: input {x.shape[-1]} vs weight {weight.shape[1]}")
    return F.linear(x, weight, bias)


def group_norm(
    x: torch.Tensor,
    groups: int,
    gamma: torch.Tensor | None = None,
    beta_aff: torch.Tensor | None = None,
    eps: float = 1e-5,
) -> torch.Tensor:
    """Per-(sample, group) standardization over NCHW input, then channel affine."""
    if x.shape[1] % groups != 0:
        raise ValueError(f"channels {x.shape[1]} not divisible by groups {groups}")
    return F.group_norm(x, groups, gamma, beta_aff, eps)


def layer_norm(
    x: torch.Tensor,
    gamma: torch.Tensor | None = None,
    beta_aff: torch.Tensor | None = None,
    eps: float = 1e-5,
) -> torch.Tensor:
    """Standardization over the last axis, then affine."""
    return F.layer_norm(x, (x.shape[-1],), gamma, beta_aff, eps)


def silu(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(x)


def attention_core(x: torch.Tensor, heads: int, proj: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """Scaled dot-product attention over flattened spatial positions, without residual.

    proj holds the four C x C projection weights wq/wk/wv/wo and biases bq/bk/bv/bo.
    """
    n, c, h, w = x.shape
    if c % heads != 0:
        raise ValueError(f"channels {c} not divisible by heads {heads}")
    d = c // heads
    tokens = x.reshape(n, c, h * w).transpose(1, 2)  # [N, HW, C]
    q = linear(tokens, proj["wq"], proj.get("bq"))
    k = linear(tokens, proj["wk"], proj.get("bk"))
    v = linear(tokens, proj["wv"], proj.get("bv"))
    q = q.reshape(n, h * w, heads, d).transpose(1, 2)  # [N, heads, HW, d]
    k = k.reshape(n, h * w, heads, d).transpose(1, 2)
    v = v.reshape(n, h * w, heads, d).transpose(1, 2)
    att = torch.softmax(q @ k.transpose(-1, -2) / (d**0.5), dim=-1)
    out = (att @ v).transpose(1, 2).reshape(n, h * w, c)
    out = linear(out, proj["wo"], proj.get("bo"))
    return out.transpose(1, 2).reshape(n, c, h, w)


def self_attention(x: torch.Tensor, heads: int, proj: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """Multi-head self-attention over spatial tokens, residual-added."""
    return x + attention_core(x, heads, proj)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def kaiming_uniform_(w: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Kaiming-uniform init in place; fan-in taken over all non-output axes."""
    fan_in = w.shape[1] * (w[0, 0].numel() if w.ndim > 2 else 1)
    bound = (6.0 / fan_in) ** 0.5
    with torch.no_grad():
        w.uniform_(-bound, bound, generator=gen)
    return w


# ---------------------------------------------------------------------------
# parameter store + Adam
# ---------------------------------------------------------------------------

class ParamStore:
    """Named parameter map with per-parameter Adam moments and a step counter."""

    def __init__(self, params: Mapping[str, torch.Tensor]):
        self.params: OrderedDict[str, torch.Tensor] = OrderedDict(params)
        if len(self.params) != len(set(self.params)):
            raise ValueError("duplicate parameter names")
        self.m = {k: torch.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: torch.zeros_like(v) for k, v in self.params.items()}
        self.step_count = 0

    def names(self) -> list[str]:
        return list(self.params)


def adam_step(
    store: ParamStore,
    grads: Mapping[str, torch.Tensor],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamStore:
    """Bias-corrected Adam update, no weight decay. Updates the store in place."""
    if set(grads) != set(store.params):
        missing = set(store.params) - set(grads)
        extra = set(grads) - set(store.params)
        raise KeyError(f"gradient keys mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    with torch.no_grad():
        for k, p in store.params.items():
            g = grads[k]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape mismatch for {k}")
            store.m[k].mul_(beta1).add_(g, alpha=1.0 - beta1)
            store.v[k].mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            m_hat = store.m[k] / bc1
            v_hat = store.v[k] / bc2
            p.add_(-lr * m_hat / (v_hat.sqrt() + eps))
    return store


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------
# magic "DGAE", version u32 LE, record count u64 LE, then per record:
#   name length u64 LE, UTF-8 name, rank u64 LE, dims u64 LE each, f32 LE payload.
# Optimizer state and the schedule betas are plain records under reserved names.

def _write_record(out: list[bytes], name: str, tensor: torch.Tensor) -> None:
    nb = name.encode()
    out.append(struct.pack("<Q", len(nb)))
    out.append(nb)
    out.append(struct.pack("<Q", tensor.ndim))
    out.append(struct.pack(f"<{tensor.ndim}Q", *tensor.shape) if tensor.ndim else b"")
    out.append(tensor.detach().to(torch.float32).contiguous().numpy().tobytes())


def save_checkpoint(
    path,
    params: Mapping[str, torch.Tensor],
    store: ParamStore | None = None,
    beta: torch.Tensor | None = None,
) -> None:
    records: list[tuple[str, torch.Tensor]] = list(params.items())
    if beta is not None:
        records.append((SCHED_BETA_KEY, beta))
    if store is not None:
        records.append((OPT_PREFIX + "step", torch.tensor([float(store.step_count)])))
        for k in store.params:
            records.append((OPT_PREFIX + "m/" + k, store.m[k]))
            records.append((OPT_PREFIX + "v/" + k, store.v[k]))
    out: list[bytes] = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    out.append(struct.pack("<Q", len(records)))
    for name, tensor in records:
        _write_record(out, name, tensor)
    with open(path, "wb") as f:
        f.write(b"".join(out))


def load_checkpoint(path) -> OrderedDict[str, torch.Tensor]:
    """Raw record map, reserved names included. Payloads come back as float32."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<Q", blob, 8)
    off = 16
    records: OrderedDict[str, torch.Tensor] = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<Q", blob, off)
        off += 8
        name = blob[off : off + nlen].decode()
        off += nlen
        (rank,) = struct.unpack_from("<Q", blob, off)
        off += 8
        dims = struct.unpack_from(f"<{rank}Q", blob, off) if rank else ()
        off += 8 * rank
        numel = 1
        for d in dims:
            numel *= d
        data = torch.frombuffer(bytearray(blob[off : off + 4 * numel]), dtype=torch.float32)
        off += 4 * numel
        records[name] = data.reshape(dims).clone()
    return records


def split_checkpoint(
    records: Mapping[str, torch.Tensor],
) -> tuple[OrderedDict[str, torch.Tensor], dict, torch.Tensor | None]:
    """Split raw records into (parameters, optimizer state, schedule betas)."""
    params: OrderedDict[str, torch.Tensor] = OrderedDict()
    opt: dict = {"step": 0, "m": {}, "v": {}}
    beta = None
    for name, tensor in records.items():
        if name == SCHED_BETA_KEY:
            beta = tensor
        elif name == OPT_PREFIX + "step":
            opt["step"] = int(tensor.item())
        elif name.startswith(OPT_PREFIX + "m/"):
            opt["m"][name[len(OPT_PREFIX) + 2 :]] = tensor
        elif name.startswith(OPT_PREFIX + "v/"):
            opt["v"][name[len(OPT_PREFIX) + 2 :]] = tensor
        else:
            params[name] = tensor
    return params, opt, beta


def load_into(module: torch.nn.Module, params: Mapping[str, torch.Tensor], prefix: str) -> None:
    """Copy checkpointed values into a module's parameters, by prefixed name."""
    own = dict(module.named_parameters())
    wanted = {k[len(prefix) :]: v for k, v in params.items() if k.startswith(prefix)}
    if set(wanted) != set(own):
        raise KeyError(f"checkpoint prefix {prefix!r} does not match module parameters")
    with torch.no_grad():
        for k, p in own.items():
            if wanted[k].shape != p.shape:
                raise ValueError(
                    f"shape mismatch for {prefix}{k}: checkpoint {tuple(wanted[k].shape)} "
                    f"vs module {tuple(p.shape)}"
                )
            p.copy_(wanted[k].to(p.dtype))


def named_params(module: torch.nn.Module, prefix: str) -> "OrderedDict[str, torch.Tensor]":
    return OrderedDict((prefix + k, v) for k, v in module.named_parameters())


# ---------------------------------------------------------------------------
# parameterized layers (thin holders around the functional primitives)
# ---------------------------------------------------------------------------

class Conv2d(torch.nn.Module):
    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1, padding: int = 0,
                 gen: torch.Generator | None = None, dtype=torch.float32):
        super().__init__()
        w = torch.empty(c_out, c_in, k, k, dtype=dtype)
        kaiming_uniform_(w, gen or torch.Generator().manual_seed(0))
        self.weight = torch.nn.Parameter(w)
        self.bias = torch.nn.Parameter(torch.zeros(c_out, dtype=dtype))
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(torch.nn.Module):
    def __init__(self, d_in: int, d_out: int, gen: torch.Generator | None = None,
                 dtype=torch.float32, zero_init: bool = False):
        super().__init__()
        w = torch.empty(d_out, d_in, dtype=dtype)
        if zero_init:
            w.zero_()
        else:
            kaiming_uniform_(w, gen or torch.Generator().manual_seed(0))
        self.weight = torch.nn.Parameter(w)
        self.bias = torch.nn.Parameter(torch.zeros(d_out, dtype=dtype))

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class GroupNormAffine(torch.nn.Module):
    def __init__(self, groups: int, channels: int, dtype=torch.float32):
        super().__init__()
        self.groups = groups
        self.gamma = torch.nn.Parameter(torch.ones(channels, dtype=dtype))
        self.beta = torch.nn.Parameter(torch.zeros(channels, dtype=dtype))

    def forward(self, x):
        return group_norm(x, self.groups, self.gamma, self.beta)


class LayerNormAffine(torch.nn.Module):
    def __init__(self, dim: int, dtype=torch.float32):
        super().__init__()
        self.gamma = torch.nn.Parameter(torch.ones(dim, dtype=dtype))
        self.beta = torch.nn.Parameter(torch.zeros(dim, dtype=dtype))

    def forward(self, x):
        return layer_norm(x, self.gamma, self.beta)


class AttentionProj(torch.nn.Module):
    """The four projections feeding self_attention / attention_core."""

    def __init__(self, channels: int, gen: torch.Generator | None = None, dtype=torch.float32):
        super().__init__()
        g = gen or torch.Generator().manual_seed(0)
        for name in ("wq", "wk", "wv", "wo"):
            w = torch.empty(channels, channels, dtype=dtype)
            kaiming_uniform_(w, g)
            setattr(self, name, torch.nn.Parameter(w))
        for name in ("bq", "bk", "bv", "bo"):
            setattr(self, name, torch.nn.Parameter(torch.zeros(channels, dtype=dtype)))

    def as_dict(self) -> dict:
        return {n: getattr(self, n) for n in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")}
