"""Dense float64 tensor core with taped reverse-mode differentiation.

The op catalog is closed: every kind has a hand-written backward rule that is
finite-difference tested on its own.  Forward values are recorded on a `Tape`
when any input is differentiable; inference-style calls (no tape anywhere)
pay no recording cost.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable

import numpy as np

from .errors import ConfigurationError, ContractError, NumericError

LOG_CLAMP = 1e-12

OP_KINDS = (
    "add", "sub", "mul", "matmul", "conv2d", "relu", "sigmoid", "mean",
    "sum", "scale", "concat", "slice", "masked_fill", "log", "powc",
    "upsample",
)


class Tensor:
    """Shape + float64 values, optionally bound to a tape node."""

    __slots__ = ("values", "tape", "node_id", "param_name")

    def __init__(self, values, tape: "Tape | None" = None,
                 node_id: int | None = None, param_name: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id
        self.param_name = param_name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.node_id})"


def const(values) -> Tensor:
    return Tensor(values)


class TapeNode:
    __slots__ = ("kind", "input_ids", "saved", "values", "needs", "input_needs")

    def __init__(self, kind: str, input_ids: tuple, saved: dict,
                 values: np.ndarray, needs: bool = False,
                 input_needs: tuple = ()):
        self.kind = kind
        self.input_ids = input_ids
        self.saved = saved
        self.values = values
        self.needs = needs          # some parameter is reachable below
        self.input_needs = input_needs


class Tape:
    """Append-only record of one forward computation."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def _record(self, kind: str, input_ids: tuple, saved: dict,
                values: np.ndarray) -> int:
        input_needs = tuple(self.nodes[i].needs for i in input_ids)
        self.nodes.append(TapeNode(kind, input_ids, saved, values,
                                   any(input_needs), input_needs))
        return len(self.nodes) - 1

    def leaf(self, values: np.ndarray, param_name: str | None = None) -> int:
        self.nodes.append(TapeNode("leaf", (), {"param": param_name}, values,
                                   param_name is not None))
        return len(self.nodes) - 1

    def replay(self) -> bool:
        """Recompute every op node from recorded leaves; True if bit-identical."""
        memo: dict[int, np.ndarray] = {}
        for nid, node in enumerate(self.nodes):
            if node.kind == "leaf":
                memo[nid] = node.values
                continue
            inputs = [memo[i] for i in node.input_ids]
            out = _FORWARD_RULES[node.kind](inputs, node.saved)
            if out.shape != node.values.shape or not np.array_equal(out, node.values):
                return False
            memo[nid] = out
        return True


def _bind(tensor: Tensor, tape: Tape) -> int:
    """Ensure `tensor` has a leaf node on `tape`; returns its node id."""
    if tensor.tape is tape and tensor.node_id is not None:
        return tensor.node_id
    if tensor.tape is not None:
        raise ContractError(
            "tensor belongs to a different tape; wrap its values in a new "
            "Tensor to use it as a constant")
    nid = tape.leaf(tensor.values, tensor.param_name)
    tensor.tape = tape
    tensor.node_id = nid
    return nid


def _finite(values: np.ndarray, kind: str, node_id: int | None) -> None:
    # Summation detects any nan/inf in one cheap pass; magnitudes in this
    # package can never overflow a finite sum.
    if not np.isfinite(values.sum()):
        raise NumericError(f"non-finite output of op '{kind}' (node {node_id})")


def forward_op(kind: str, *inputs: Tensor, **attrs) -> Tensor:
    """Apply one catalog op; records on the tape of the first taped input."""
    if kind not in OP_KINDS:
        raise ConfigurationError(f"unknown op kind '{kind}'")
    vals = [t.values for t in inputs]
    out = _FORWARD_RULES[kind](vals, attrs)

    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError(
                    f"op '{kind}' mixes tensors from two tapes; detach one "
                    "by wrapping its values in a new Tensor")
            tape = t.tape
    if tape is None:
        _finite(out, kind, None)
        return Tensor(out)
    ids = tuple(_bind(t, tape) for t in inputs)
    nid = tape._record(kind, ids, dict(attrs), out)
    _finite(out, kind, nid)
    return Tensor(out, tape, nid)


# ---------------------------------------------------------------- forward --

def _require(cond: bool, kind: str, msg: str) -> None:
    if not cond:
        raise ConfigurationError(f"op '{kind}': {msg}")


def _fw_add(vals, attrs):
    a, b = vals
    _require(a.shape == b.shape, "add", f"shape mismatch {a.shape} vs {b.shape}")
    return a + b


def _fw_sub(vals, attrs):
    a, b = vals
    _require(a.shape == b.shape, "sub", f"shape mismatch {a.shape} vs {b.shape}")
    return a - b


def _fw_mul(vals, attrs):
    a, b = vals
    _require(a.shape == b.shape, "mul", f"shape mismatch {a.shape} vs {b.shape}")
    return a * b


def _fw_matmul(vals, attrs):
    a, b = vals
    _require(a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[0],
             "matmul", f"incompatible shapes {a.shape} @ {b.shape}")
    return a @ b


def _im2col(x: np.ndarray, kh: int, kw: int, pad: int):
    n, c, h, w = x.shape
    if pad > 0:
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
        xp[:, :, pad:pad + h, pad:pad + w] = x
        x = xp
    hh = h + 2 * pad - kh + 1
    ww = w + 2 * pad - kw + 1
    if kh == 1 and kw == 1:
        return np.ascontiguousarray(x.reshape(n, c, hh * ww)), hh, ww
    s = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x, (n, c, kh, kw, hh, ww), (s[0], s[1], s[2], s[3], s[2], s[3]))
    return windows.reshape(n, c * kh * kw, hh * ww), hh, ww


def _fw_conv2d(vals, attrs):
    x, w = vals[0], vals[1]
    b = vals[2] if len(vals) > 2 else None
    pad = attrs.get("padding", 0)
    _require(x.ndim == 4 and w.ndim == 4, "conv2d",
             f"need 4D input and kernel, got {x.shape} and {w.shape}")
    _require(x.shape[1] == w.shape[1], "conv2d",
             f"channel mismatch {x.shape} vs {w.shape}")
    _require(pad >= 0, "conv2d", "padding must be >= 0")
    n, _, h, wd = x.shape
    co, _, kh, kw = w.shape
    _require(h + 2 * pad >= kh and wd + 2 * pad >= kw, "conv2d",
             f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    if b is not None:
        _require(b.shape == (co,), "conv2d",
                 f"bias shape {b.shape} != ({co},)")
    cols, hh, ww = _im2col(x, kh, kw, pad)
    wm = w.reshape(co, -1)
    out = np.empty((n, co, hh * ww), dtype=np.float64)
    for i in range(n):
        np.matmul(wm, cols[i], out=out[i])
    out = out.reshape(n, co, hh, ww)
    if b is not None:
        out += b[None, :, None, None]
    attrs["_cols"] = cols
    attrs["_outhw"] = (hh, ww)
    return out


def _fw_relu(vals, attrs):
    return np.maximum(vals[0], 0.0)


def _fw_sigmoid(vals, attrs):
    x = vals[0]
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def _fw_mean(vals, attrs):
    return np.asarray(vals[0].mean())


def _fw_sum(vals, attrs):
    return np.asarray(vals[0].sum())


def _fw_scale(vals, attrs):
    return vals[0] * float(attrs["factor"])


def _fw_concat(vals, attrs):
    axis = attrs["axis"]
    base = list(vals[0].shape)
    for v in vals[1:]:
        other = list(v.shape)
        other[axis] = base[axis]
        _require(other == base, "concat",
                 f"non-axis dims differ: {vals[0].shape} vs {v.shape}")
    return np.concatenate(vals, axis=axis)


def _slice_obj(x_ndim, attrs):
    sl = [slice(None)] * x_ndim
    sl[attrs["axis"]] = slice(attrs.get("start"), attrs.get("stop"),
                              attrs.get("step"))
    return tuple(sl)


def _fw_slice(vals, attrs):
    step = attrs.get("step")
    _require(step is None or step > 0, "slice", "step must be positive")
    return vals[0][_slice_obj(vals[0].ndim, attrs)].copy()


def _fw_masked_fill(vals, attrs):
    x = vals[0]
    mask = np.broadcast_to(np.asarray(attrs["mask"], dtype=bool), x.shape)
    return np.where(mask, float(attrs["value"]), x)


def _fw_log(vals, attrs):
    return np.log(np.maximum(vals[0], LOG_CLAMP))


def _fw_powc(vals, attrs):
    with np.errstate(divide="ignore"):
        return np.power(vals[0], float(attrs["exponent"]))


def _fw_upsample(vals, attrs):
    x = vals[0]
    f = int(attrs["factor"])
    _require(x.ndim >= 2 and f >= 1, "upsample", "need >=2D input, factor >= 1")
    return x.repeat(f, axis=-2).repeat(f, axis=-1)


_FORWARD_RULES: dict[str, Callable] = {
    "add": _fw_add, "sub": _fw_sub, "mul": _fw_mul, "matmul": _fw_matmul,
    "conv2d": _fw_conv2d, "relu": _fw_relu, "sigmoid": _fw_sigmoid,
    "mean": _fw_mean, "sum": _fw_sum, "scale": _fw_scale,
    "concat": _fw_concat, "slice": _fw_slice, "masked_fill": _fw_masked_fill,
    "log": _fw_log, "powc": _fw_powc, "upsample": _fw_upsample,
}


# --------------------------------------------------------------- backward --

def _bw_add(node, g, ins):
    return [(g, False), (g, False)]


def _bw_sub(node, g, ins):
    return [(g, False), (-g, True)]


def _bw_mul(node, g, ins):
    return [(g * ins[1], True), (g * ins[0], True)]


def _bw_matmul(node, g, ins):
    return [(g @ ins[1].T, True), (ins[0].T @ g, True)]


def _bw_conv2d(node, g, ins):
    x, w = ins[0], ins[1]
    pad = node.saved.get("padding", 0)
    cols = node.saved["_cols"]
    hh, ww = node.saved["_outhw"]
    n, _, h, wd = x.shape
    co, ci, kh, kw = w.shape
    need_dx = not node.input_needs or node.input_needs[0]
    gflat = g.reshape(n, co, hh * ww)
    dw = np.zeros((co, ci * kh * kw))
    dxp = (np.zeros((n, ci, h + 2 * pad, wd + 2 * pad)) if need_dx else None)
    wm_t = w.reshape(co, -1).T
    for i in range(n):
        dw += gflat[i] @ cols[i].T
        if need_dx:
            dcols = (wm_t @ gflat[i]).reshape(ci, kh, kw, hh, ww)
            for a in range(kh):
                for b in range(kw):
                    dxp[i, :, a:a + hh, b:b + ww] += dcols[:, a, b]
    dx = ((dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp)
          if need_dx else None)
    grads = [(dx, True), (dw.reshape(w.shape), True)]
    if len(node.input_ids) > 2:
        grads.append((gflat.sum(axis=(0, 2)), True))
    return grads


def _bw_relu(node, g, ins):
    return [(g * (ins[0] > 0), True)]


def _bw_sigmoid(node, g, ins):
    s = node.values
    return [(g * s * (1.0 - s), True)]


def _bw_mean(node, g, ins):
    x = ins[0]
    return [(np.full(x.shape, float(g) / x.size), True)]


def _bw_sum(node, g, ins):
    return [(np.full(ins[0].shape, float(g)), True)]


def _bw_scale(node, g, ins):
    return [(g * float(node.saved["factor"]), True)]


def _bw_concat(node, g, ins):
    axis = node.saved["axis"]
    sizes = [v.shape[axis] for v in ins]
    pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
    return [(p, False) for p in pieces]


def _bw_slice(node, g, ins):
    dx = np.zeros(ins[0].shape)
    dx[_slice_obj(ins[0].ndim, node.saved)] = g
    return [(dx, True)]


def _bw_masked_fill(node, g, ins):
    mask = np.broadcast_to(np.asarray(node.saved["mask"], dtype=bool),
                           ins[0].shape)
    return [(g * ~mask, True)]


def _bw_log(node, g, ins):
    x = ins[0]
    inside = x >= LOG_CLAMP
    return [(np.where(inside, g / np.maximum(x, LOG_CLAMP), 0.0), True)]


def _bw_powc(node, g, ins):
    c = float(node.saved["exponent"])
    x = ins[0]
    # derivative taken as 0 at x == 0 (subgradient choice for c < 1)
    dx = np.where(x > 0, c * np.power(np.where(x > 0, x, 1.0), c - 1.0), 0.0)
    return [(g * dx, True)]


def _bw_upsample(node, g, ins):
    f = int(node.saved["factor"])
    if f == 1:
        return [(g, False)]
    shp = ins[0].shape
    lead = shp[:-2]
    h, w = shp[-2], shp[-1]
    return [(g.reshape(*lead, h, f, w, f).sum(axis=(-3, -1)), True)]


_BACKWARD_RULES: dict[str, Callable] = {
    "add": _bw_add, "sub": _bw_sub, "mul": _bw_mul, "matmul": _bw_matmul,
    "conv2d": _bw_conv2d, "relu": _bw_relu, "sigmoid": _bw_sigmoid,
    "mean": _bw_mean, "sum": _bw_sum, "scale": _bw_scale,
    "concat": _bw_concat, "slice": _bw_slice, "masked_fill": _bw_masked_fill,
    "log": _bw_log, "powc": _bw_powc, "upsample": _bw_upsample,
}


# ------------------------------------------------------------- parameters --

class Param:
    __slots__ = ("values", "grad", "m", "v")

    def __init__(self, values: np.ndarray):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.m = np.zeros_like(self.values)
        self.v = np.zeros_like(self.values)


class ParamSet:
    """Named parameters with gradient and optimizer-state storage."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, values: np.ndarray) -> None:
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter name '{name}'")
        self._params[name] = Param(values)

    def names(self) -> list[str]:
        return list(self._params)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def items(self) -> Iterable[tuple[str, Param]]:
        return self._params.items()

    def leaf(self, tape: Tape | None, name: str) -> Tensor:
        """Tensor view of a parameter, registered on `tape` if given."""
        p = self._params[name]
        t = Tensor(p.values, param_name=name)
        if tape is not None:
            _bind(t, tape)
        return t

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad.fill(0.0)

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, p in self._params.items():
            out.add(name, p.values.copy())
        return out

    def values_dict(self) -> dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            p = self._params.get(name)
            if p is None:
                raise ConfigurationError(f"unknown parameter '{name}'")
            if p.values.shape != arr.shape:
                raise ConfigurationError(
                    f"shape mismatch for '{name}': {p.values.shape} vs {arr.shape}")
            p.values[...] = arr


def backward(loss: Tensor, params: ParamSet) -> None:
    """Populate `params` gradients from a scalar loss (zeroes them first)."""
    if loss.values.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    if loss.tape is None or loss.node_id is None:
        raise ContractError("loss is not on a tape")
    params.zero_grad()

    tape = loss.tape
    grads: dict[int, np.ndarray] = {
        loss.node_id: np.ones_like(tape.nodes[loss.node_id].values)}

    def acc(nid: int, contrib: np.ndarray, fresh: bool) -> None:
        cur = grads.get(nid)
        if cur is None:
            grads[nid] = contrib if fresh else contrib.copy()
        else:
            cur += contrib

    for nid in range(loss.node_id, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.kind == "leaf":
            name = node.saved.get("param")
            if name is not None and name in params:
                params[name].grad += g
            continue
        ins = [tape.nodes[i].values for i in node.input_ids]
        for (contrib, fresh), in_id, needed in zip(
                _BACKWARD_RULES[node.kind](node, g, ins), node.input_ids,
                node.input_needs):
            if needed and contrib is not None:
                acc(in_id, contrib, fresh)


# -------------------------------------------------------------- optimizer --

def optimizer_step(params: ParamSet, lr: float = 1e-3, wd: float = 1e-4,
                   betas: tuple[float, float] = (0.9, 0.999), step: int = 1,
                   eps: float = 1e-8) -> None:
    """Adaptive-moment update with bias correction and decoupled weight decay."""
    if step <= 0:
        raise ContractError(f"optimizer step must be >= 1, got {step}")
    if lr < 0 or wd < 0:
        raise ConfigurationError("lr and wd must be nonnegative")
    b1, b2 = betas
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for _, p in params.items():
        p.m *= b1
        p.m += (1.0 - b1) * p.grad
        p.v *= b2
        p.v += (1.0 - b2) * p.grad * p.grad
        p.values -= lr * (p.m / c1) / (np.sqrt(p.v / c2) + eps)
        p.values -= lr * wd * p.values
        p.grad.fill(0.0)


# ------------------------------------------------- finite-difference check --

class FdReport:
    """Per-parameter maximum relative gradient error."""

    def __init__(self, tol: float):
        self.tol = tol
        self.per_param: dict[str, float] = {}
        self.failures: list[tuple[str, int, float]] = []

    @property
    def max_error(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.failures


def finite_difference_check(f: Callable[[ParamSet], Tensor], params: ParamSet,
                            eps: float = 1e-5, tol: float = 1e-4) -> FdReport:
    """Compare backward() gradients of f against central differences."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    loss = f(params)
    backward(loss, params)
    analytic = {name: p.grad.copy() for name, p in params.items()}

    report = FdReport(tol)
    for name, p in params.items():
        flat = p.values.reshape(-1)
        ana = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f(params).values)
            flat[i] = orig - eps
            dn = float(f(params).values)
            flat[i] = orig
            fd = (up - dn) / (2.0 * eps)
            denom = max(abs(fd), abs(ana[i]), 1e-6)
            rel = abs(fd - ana[i]) / denom
            if rel > worst:
                worst = rel
            if rel > tol:
                report.failures.append((name, i, rel))
        report.per_param[name] = worst
    return report


# -------------------------------------------------------------- checkpoint --

CHECKPOINT_MAGIC = b"BEVSSL01"


def save_checkpoint(path, entries: dict[str, np.ndarray] | ParamSet) -> None:
    """Binary parameter container; round-trips bit-exactly."""
    if isinstance(entries, ParamSet):
        entries = {name: p.values for name, p in entries.items()}
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, arr in entries.items():
            arr = np.asarray(arr, dtype=np.float64)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ConfigurationError(f"bad checkpoint magic in {path!s}")
    out: dict[str, np.ndarray] = {}
    off = 8
    while off < len(data):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).copy()
        off += 8 * count
        out[name] = arr.reshape(dims)
    return out
