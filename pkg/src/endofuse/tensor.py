"""Dense tensors with a reverse-mode differentiation tape.

Only the operations the fusion model needs are provided: affine maps,
3x3 / 1x1 convolutions, ReLU, batch norm, inverted dropout, channel
concatenation, average pooling and softmax cross-entropy.  All math is
float64; gradients are checked against central finite differences in the
test suite.
"""

from __future__ import annotations

import numpy as np

# When enabled (tests), every op output is checked for NaN/Inf.
check_finite = False


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Tape misuse: backward on a spent tape or a non-scalar loss."""


class Tensor:
    """N-dimensional float array, optionally tracked for gradients.

    float64 by default; a float32 input array is kept as float32 (the
    training pipeline's storage mode).  Gradient checking always runs
    in float64.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, np.ndarray) and data.dtype == np.float32:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Recorder of forward operations, consumed by one backward pass.

    Use as a context manager; ops executed inside record their backward
    rules when an input requires gradients.  A tape can be played back
    exactly once.
    """

    def __init__(self):
        # each node: (output tensor, input tensors, fn(grad_out) -> input grads)
        self._nodes = []
        self._spent = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TapeError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self):
        return len(self._nodes)


def _finite(out):
    if check_finite and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite value produced by a forward op")
    return out


def _record(inputs, out, backward_fn):
    out.requires_grad = any(t.requires_grad for t in inputs)
    if _ACTIVE_TAPE is not None and out.requires_grad:
        _ACTIVE_TAPE._nodes.append((out, tuple(inputs), backward_fn))
    return _finite(out)


def backward(loss, tape):
    """Populate .grad on every requires_grad tensor reachable from loss."""
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if tape._spent:
        raise TapeError("tape already consumed by a previous backward call")
    tape._spent = True

    grads = {id(loss): np.ones_like(loss.data)}
    holders = {id(loss): loss}
    for out, inputs, fn in reversed(tape._nodes):
        g = grads.get(id(out))
        if g is None:
            continue
        for t, gi in zip(inputs, fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if id(t) in grads:
                grads[id(t)] = grads[id(t)] + gi
            else:
                grads[id(t)] = gi
                holders[id(t)] = t
    for key, t in holders.items():
        if t.requires_grad:
            t.grad = grads[key]


# ---------------------------------------------------------------------------
# ops


def affine(x, w, b):
    """out[n, j] = sum_i w[j, i] * x[n, i] + b[j]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise DimensionError(
            f"affine: x {x.data.shape} incompatible with w {w.data.shape}"
        )
    if b.data.shape != (w.data.shape[0],):
        raise DimensionError(f"affine: b {b.data.shape} vs w {w.data.shape}")
    out = Tensor(x.data @ w.data.T + b.data)

    def bwd(g):
        return g @ w.data, g.T @ x.data, g.sum(axis=0)

    return _record((x, w, b), out, bwd)


def conv2d(x, k, b, stride=1, pad=1):
    """3x3 cross-correlation with zero padding, spatial size preserved."""
    if stride != 1 or pad != 1:
        raise DimensionError("conv2d supports stride=1, pad=1 only")
    if x.data.ndim != 4 or k.data.ndim != 4 or k.data.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d: x {x.data.shape}, k {k.data.shape}")
    n, c, h, w_ = x.data.shape
    c_out, c_k = k.data.shape[:2]
    if c_k != c:
        raise DimensionError(f"conv2d: input channels {c} != kernel channels {c_k}")
    if b.data.shape != (c_out,):
        raise DimensionError(f"conv2d: bias {b.data.shape} vs {c_out} kernels")

    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    acc = np.zeros((n, c_out, h, w_), dtype=x.data.dtype)
    # decompose the 3x3 window into 9 shifted channel contractions
    for di in range(3):
        for dj in range(3):
            patch = xp[:, :, di : di + h, dj : dj + w_]
            acc += np.tensordot(patch, k.data[:, :, di, dj], axes=([1], [1])).transpose(
                0, 3, 1, 2
            )
    out = Tensor(acc + b.data[None, :, None, None])

    def bwd(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(k.data)
        for di in range(3):
            for dj in range(3):
                patch = xp[:, :, di : di + h, dj : dj + w_]
                gk[:, :, di, dj] = np.tensordot(g, patch, axes=([0, 2, 3], [0, 2, 3]))
                gxp[:, :, di : di + h, dj : dj + w_] += np.tensordot(
                    g, k.data[:, :, di, dj], axes=([1], [0])
                ).transpose(0, 3, 1, 2)
        return gxp[:, :, 1:-1, 1:-1], gk, g.sum(axis=(0, 2, 3))

    return _record((x, k, b), out, bwd)


def conv1x1(x, w, b):
    """Per-pixel affine over channels: 1x1 convolution."""
    if x.data.ndim != 4 or w.data.ndim != 2 or w.data.shape[1] != x.data.shape[1]:
        raise DimensionError(f"conv1x1: x {x.data.shape} vs w {w.data.shape}")
    out = Tensor(
        np.tensordot(x.data, w.data, axes=([1], [1])).transpose(0, 3, 1, 2)
        + b.data[None, :, None, None]
    )

    def bwd(g):
        gx = np.tensordot(g, w.data, axes=([1], [0])).transpose(0, 3, 1, 2)
        gw = np.tensordot(g, x.data, axes=([0, 2, 3], [0, 2, 3]))
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _record((x, w, b), out, bwd)


def relu(x):
    out = Tensor(np.maximum(x.data, 0.0))
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return _record((x,), out, bwd)


def batch_norm(x, gamma, beta, running_mean, running_var, mode, momentum=0.1, eps=1e-5):
    """Per-channel normalization over axis 1 of a 2-D or 4-D tensor.

    Train mode uses biased batch statistics and updates the running
    stats in place; eval mode normalizes with the running stats.
    """
    if x.data.ndim not in (2, 4):
        raise DimensionError(f"batch_norm: rank {x.data.ndim} unsupported")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError(f"batch_norm: affine params do not match {c} channels")
    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    expand = (lambda v: v) if x.data.ndim == 2 else (lambda v: v[:, None, None])

    if mode == "train":
        if x.data.shape[0] < 2:
            raise DimensionError("batch_norm train mode needs batch size >= 2")
        m = x.data.mean(axis=axes)
        v = x.data.var(axis=axes)  # biased
        running_mean.data *= 1.0 - momentum
        running_mean.data += momentum * m
        running_var.data *= 1.0 - momentum
        running_var.data += momentum * v
    elif mode == "eval":
        m = running_mean.data
        v = running_var.data
    else:
        raise ValueError(f"batch_norm: unknown mode {mode!r}")

    inv_std = 1.0 / np.sqrt(v + eps)
    x_hat = (x.data - expand(m)) * expand(inv_std)
    out = Tensor(expand(gamma.data) * x_hat + expand(beta.data))
    if mode == "eval":
        return _finite(out)

    n_red = x.data.size // c

    def bwd(g):
        dgamma = (g * x_hat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gh = g * expand(gamma.data)
        dx = expand(inv_std) * (
            gh
            - expand(gh.sum(axis=axes) / n_red)
            - x_hat * expand((gh * x_hat).sum(axis=axes) / n_red)
        )
        return dx, dgamma, dbeta

    return _record((x, gamma, beta), out, bwd)


def dropout(x, p, mode, rng=None):
    """Inverted dropout: survivors scaled by 1/(1-p); eval mode is identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        out = Tensor(x.data.copy())

        def bwd(g):
            return (g,)

        return _record((x,), out, bwd)
    if mode != "train":
        raise ValueError(f"dropout: unknown mode {mode!r}")
    if rng is None:
        raise ValueError("dropout in train mode needs a seeded generator")
    scale = 1.0 / (1.0 - p)
    mask = (rng.random(x.data.shape) >= p).astype(x.data.dtype) * scale
    out = Tensor(x.data * mask)

    def bwd(g):
        return (g * mask,)

    return _record((x,), out, bwd)


def concat_channels(xs):
    """Concatenate along the channel axis (axis 1)."""
    if not xs:
        raise DimensionError("concat_channels: empty input list")
    ref = xs[0].data.shape
    for t in xs[1:]:
        s = t.data.shape
        if len(s) != len(ref) or s[0] != ref[0] or s[2:] != ref[2:]:
            raise DimensionError(f"concat_channels: {s} incompatible with {ref}")
    out = Tensor(np.concatenate([t.data for t in xs], axis=1))
    splits = np.cumsum([t.data.shape[1] for t in xs])[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=1))

    return _record(tuple(xs), out, bwd)


def global_avg_pool(x):
    """Spatial mean per channel: (N,C,H,W) -> (N,C)."""
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool: rank {x.data.ndim}")
    n, c, h, w = x.data.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).copy(),)

    return _record((x,), out, bwd)


def avg_pool_2x2(x):
    """Non-overlapping 2x2 mean pooling, stride 2.

    An odd trailing row/column is averaged over the pixels that exist.
    """
    if x.data.ndim != 4 or x.data.shape[2] < 2 or x.data.shape[3] < 2:
        raise DimensionError(f"avg_pool_2x2: shape {x.data.shape}")
    n, c, h, w = x.data.shape
    ho, wo = (h + 1) // 2, (w + 1) // 2
    sums = np.zeros((n, c, ho, wo), dtype=x.data.dtype)
    counts = np.zeros((ho, wo), dtype=x.data.dtype)
    for di in range(2):
        for dj in range(2):
            sub = x.data[:, :, di::2, dj::2]
            sums[:, :, : sub.shape[2], : sub.shape[3]] += sub
            counts[: sub.shape[2], : sub.shape[3]] += 1.0
    out = Tensor(sums / counts)

    def bwd(g):
        gn = g / counts
        gx = np.zeros_like(x.data)
        for di in range(2):
            for dj in range(2):
                tgt = gx[:, :, di::2, dj::2]
                tgt += gn[:, :, : tgt.shape[2], : tgt.shape[3]]
        return (gx,)

    return _record((x,), out, bwd)


def softmax(logits):
    """Row-wise softmax of a plain array (no tape)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits rank {logits.data.ndim}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy: labels shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must be in [0, {c}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = Tensor(np.asarray(-log_probs[np.arange(n), labels].mean()))
    probs = np.exp(log_probs)

    def bwd(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (g * d / n,)

    return _record((logits,), out, bwd)


def reduce_sum(x):
    """Sum of all elements, as a scalar tensor."""
    out = Tensor(np.asarray(x.data.sum()))

    def bwd(g):
        return (np.full_like(x.data, float(g)),)

    return _record((x,), out, bwd)
