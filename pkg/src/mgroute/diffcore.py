"""Dense float64 tensors with reverse-mode gradients.

Thin layer over torch: every learnable weight is a float64 ``torch.nn.Parameter``
and this module adds the pieces the model and trainer rely on beyond that:
the op suite with explicit shape and finiteness checks, a checked
``backward``, decoupled-weight-decay Adam, a versioned checkpoint format and
a central finite-difference gradient oracle.

Broadcasting follows numpy rules; ops raise :class:`ShapeError` where numpy
would raise.
"""

from __future__ import annotations

import io
import json
import os
import math
import struct
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

DTYPE = torch.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    return torch.as_tensor(np.asarray(data, dtype=np.float64)).clone().requires_grad_(requires_grad)


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return t


def _guard(fn):
    def wrapped(*args, **kwargs):
        try:
            out = fn(*args, **kwargs)
        except RuntimeError as exc:
            if "size" in str(exc) or "shape" in str(exc) or "dimension" in str(exc):
                raise ShapeError(str(exc)) from exc
            raise
        return check_finite(out, fn.__name__)

    wrapped.__name__ = fn.__name__
    wrapped.__doc__ = fn.__doc__
    return wrapped


# --- op suite ---------------------------------------------------------------


@_guard
def matmul(a, b):
    return torch.matmul(a, b)


@_guard
def add(a, b):
    return a + b


@_guard
def mul(a, b):
    return a * b


@_guard
def concat(xs: Sequence[torch.Tensor], axis: int = -1):
    return torch.cat(list(xs), dim=axis)


@_guard
def sum(x, axis=None, keepdims: bool = False):  # noqa: A001
    return x.sum() if axis is None else x.sum(dim=axis, keepdim=keepdims)


@_guard
def mean(x, axis=None, keepdims: bool = False):
    return x.mean() if axis is None else x.mean(dim=axis, keepdim=keepdims)


@_guard
def masked_sum(x, mask, axis: int):
    """Sum of ``x`` along ``axis`` where ``mask`` is true (mask broadcasts against ``x``)."""
    return torch.where(mask, x, torch.zeros((), dtype=x.dtype)).sum(dim=axis)


@_guard
def softmax(x, axis: int = -1, mask=None):
    """Softmax along ``axis``; entries where ``mask`` is false get probability exactly 0."""
    if mask is None:
        return torch.softmax(x, dim=axis)
    if not mask.any(dim=axis).all():
        raise ShapeError("softmax mask leaves an empty slice")
    filled = x.masked_fill(~mask, -math.inf)
    return torch.softmax(filled, dim=axis).masked_fill(~mask, 0.0)


def log_softmax(x, axis: int = -1, mask=None):
    if mask is None:
        return check_finite(torch.log_softmax(x, dim=axis), "log_softmax")
    filled = x.masked_fill(~mask, -math.inf)
    out = torch.log_softmax(filled, dim=axis)
    # masked entries stay -inf by design; only check the live ones
    check_finite(out[mask.expand_as(out)], "log_softmax")
    return out


@_guard
def tanh(x):
    return torch.tanh(x)


@_guard
def sigmoid(x):
    return torch.sigmoid(x)


@_guard
def relu(x):
    return torch.relu(x)


@_guard
def log(x):
    return torch.log(x)


@_guard
def exp(x):
    return torch.exp(x)


@_guard
def layer_norm(x, gain=None, bias=None, eps: float = 1e-5):
    """Normalize the last axis to zero mean and unit (biased) variance."""
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    y = (x - mu) / torch.sqrt(var + eps)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


@_guard
def embedding_lookup(table, index):
    return table[index]


@_guard
def masked_fill(x, mask, value: float):
    return x.masked_fill(mask, value)


def lstm_cell(x, h, c, w_ih, w_hh, b):
    """One LSTM step; gate order (input, forget, cell, output).

    Shapes: ``x (..., in)``, ``h, c (..., hid)``, ``w_ih (in, 4 hid)``,
    ``w_hh (hid, 4 hid)``, ``b (4 hid,)``.
    """
    hid = h.shape[-1]
    if w_ih.shape[-1] != 4 * hid or w_hh.shape != (hid, 4 * hid) or x.shape[-1] != w_ih.shape[0]:
        raise ShapeError("lstm_cell weight shapes do not match the state")
    gates = x @ w_ih + h @ w_hh + b
    i, f, g, o = gates.split(hid, dim=-1)
    c_new = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
    h_new = torch.sigmoid(o) * torch.tanh(c_new)
    return check_finite(h_new, "lstm_cell"), check_finite(c_new, "lstm_cell")


# --- parameters --------------------------------------------------------------


def uniform_init(shape, fan_in: int, generator: torch.Generator) -> torch.nn.Parameter:
    bound = 1.0 / math.sqrt(fan_in)
    w = (torch.rand(shape, dtype=DTYPE, generator=generator) * 2.0 - 1.0) * bound
    return torch.nn.Parameter(w)


class Linear(torch.nn.Module):
    """``x @ W + b`` with uniform(+-1/sqrt(fan_in)) weights and zero bias."""

    def __init__(self, d_in: int, d_out: int, generator: torch.Generator, bias: bool = True):
        super().__init__()
        self.weight = uniform_init((d_in, d_out), d_in, generator)
        self.bias = torch.nn.Parameter(torch.zeros(d_out, dtype=DTYPE)) if bias else None

    def forward(self, x):
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class MLP(torch.nn.Module):
    """Two linear layers with a ReLU in between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, generator: torch.Generator):
        super().__init__()
        self.l1 = Linear(d_in, d_hidden, generator)
        self.l2 = Linear(d_hidden, d_out, generator)

    def forward(self, x):
        return self.l2(torch.relu(self.l1(x)))


class LayerNorm(torch.nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.gain = torch.nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.bias = torch.nn.Parameter(torch.zeros(d, dtype=DTYPE))

    def forward(self, x):
        return layer_norm(x, self.gain, self.bias)


class LSTM(torch.nn.Module):
    """Unidirectional LSTM over the second-to-last axis, built from :func:`lstm_cell`."""

    def __init__(self, d_in: int, d_hidden: int, generator: torch.Generator):
        super().__init__()
        self.d_hidden = d_hidden
        self.w_ih = uniform_init((d_in, 4 * d_hidden), d_hidden, generator)
        self.w_hh = uniform_init((d_hidden, 4 * d_hidden), d_hidden, generator)
        self.b = torch.nn.Parameter(torch.zeros(4 * d_hidden, dtype=DTYPE))

    def step(self, x, state=None):
        if state is None:
            z = x.new_zeros(x.shape[:-1] + (self.d_hidden,))
            state = (z, z)
        return lstm_cell(x, state[0], state[1], self.w_ih, self.w_hh, self.b)

    def forward(self, xs, reverse: bool = False):
        T = xs.shape[-2]
        steps = range(T - 1, -1, -1) if reverse else range(T)
        outs = [None] * T
        state = None
        for t in steps:
            state = self.step(xs[..., t, :], state)
            outs[t] = state[0]
        return torch.stack(outs, dim=-2)


# --- gradients ----------------------------------------------------------------


def backward(loss: torch.Tensor, params: Iterable[torch.Tensor] | None = None) -> None:
    """Populate ``.grad`` from a scalar loss, refusing non-finite values."""
    if loss.numel() != 1:
        raise ShapeError("backward needs a scalar loss")
    check_finite(loss.detach(), "loss")
    loss.backward()
    for p in params or ():
        if p.grad is not None:
            check_finite(p.grad, "gradient")


def finite_difference_grad(
    fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], step: float = 1e-6
) -> list[torch.Tensor]:
    """Central differences of ``fn()`` w.r.t. every scalar in ``params``.

    The step for a weight ``w`` is ``step * max(1, |w|)``.
    """
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                h = step * max(1.0, abs(orig))
                flat[i] = orig + h
                up = fn().item()
                flat[i] = orig - h
                down = fn().item()
                flat[i] = orig
                gflat[i] = (up - down) / (2.0 * h)
            grads.append(g)
    return grads


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-6) -> torch.Tensor:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    scale = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.tensor(floor, dtype=analytic.dtype))
    return (analytic - numeric).abs() / scale


# --- optimizer -----------------------------------------------------------------


class Adam:
    """Adam with decoupled weight decay.

    ``w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * w)``
    """

    def __init__(
        self,
        named_params: Iterable[tuple[str, torch.nn.Parameter]],
        lr: float = 1e-4,
        weight_decay: float = 1e-6,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = dict(named_params)
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            update = (m / c1) / (torch.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p
            p.sub_(self.lr * update)


def adam_step(optimizer: Adam) -> None:
    optimizer.step()


# --- checkpoints ----------------------------------------------------------------

MAGIC = b"MGRCKPT1"


def save_checkpoint(path, params: dict[str, torch.Tensor], optimizer: Adam | None = None, meta: dict | None = None) -> None:
    """Write a checkpoint: magic, JSON header length, JSON header, f64 LE payload.

    The header lists every tensor name and shape in payload order; optimizer
    moments follow the parameters as ``adam.m.<name>`` / ``adam.v.<name>``.
    """
    tensors: list[tuple[str, torch.Tensor]] = [(k, v.detach()) for k, v in params.items()]
    header = {"version": 1, "meta": meta or {}, "tensors": []}
    if optimizer is not None:
        header["adam_step"] = optimizer.t
        tensors += [(f"adam.m.{k}", v) for k, v in optimizer.m.items()]
        tensors += [(f"adam.v.{k}", v) for k, v in optimizer.v.items()]
    header["tensors"] = [{"name": k, "shape": list(v.shape)} for k, v in tensors]
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    for _, v in tensors:
        buf.write(v.cpu().numpy().astype("<f8").tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    """Return ``(tensors, header)``; tensors include optimizer moments if saved."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise ValueError("not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    if header.get("version") != 1:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    off = 16 + hlen
    out = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(entry["shape"])
        out[entry["name"]] = torch.from_numpy(arr.astype(np.float64))
        off += 8 * n
    return out, header
