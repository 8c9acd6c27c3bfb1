"""Dense tensors with reverse-mode automatic differentiation.

Implements the five layer families the damage-classification models need
(convolution, max pooling, batch normalization, global pooling, dense) plus
the sigmoid/binary-cross-entropy head, an Adam optimizer and a central
finite-difference gradient checker. Layout is batch-major channel-major
(N, C, H, W) throughout.

Training runs use float32; gradient checks should be run in float64.
"""

from __future__ import annotations

import warnings

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor extents are incompatible with an operation."""


class GraphStateError(RuntimeError):
    """Raised when backward is invoked without a recorded forward pass."""


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64:
        return arr
    return arr.astype(np.float32, copy=False)


class Tensor:
    """N-dimensional array with optional gradient tracking.

    Operations on Tensors record a tape (parent links plus a backward
    closure); calling ``backward()`` on a scalar result fills ``grad`` on
    every tensor with ``requires_grad`` set that contributed to it.
    """

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._parents = ()

    # -- introspection ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def assert_finite(self):
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError("tensor contains NaN or Inf")

    def detach(self):
        return Tensor(self.data.copy())

    # -- autograd ---------------------------------------------------------
    def _accumulate(self, grad):
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise ShapeError(f"gradient shape {grad.shape} != data shape {self.data.shape}")
        if self.grad is None:
            # adopt freshly-allocated arrays; copy views/broadcasts
            if grad.base is None and grad.flags.c_contiguous:
                self.grad = grad
            else:
                self.grad = grad.copy()
        else:
            self.grad += grad

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        """Reverse-mode sweep from this (scalar) tensor.

        ``seed`` overrides the default all-ones upstream gradient.
        """
        if self._backward is None and not self._parents:
            if not self.requires_grad:
                raise GraphStateError("backward called on a tensor with no recorded forward pass")
        if seed is None:
            if self.data.size != 1:
                raise GraphStateError("backward without seed requires a scalar tensor")
            seed = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(seed, dtype=self.data.dtype).reshape(self.data.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- small generic ops (tests and heads) ------------------------------
    def sum(self):
        out = Tensor(self.data.sum().reshape(()), requires_grad=self.requires_grad)
        out._parents = (self,)

        def _bwd(g):
            self._accumulate(np.broadcast_to(g, self.data.shape))

        out._backward = _bwd
        return out

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), requires_grad=self.requires_grad)
        out._parents = (self,)

        def _bwd(g):
            self._accumulate(g.reshape(self.data.shape))

        out._backward = _bwd
        return out


def _check_positive_int(value, name):
    if not isinstance(value, (int, np.integer)) or value <= 0:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _same_padding(extent, kernel, stride):
    out = -(-extent // stride)  # ceil division
    total = max((out - 1) * stride + kernel - extent, 0)
    return total // 2, total - total // 2


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation over (N, C, H, W) input with (F, C, kh, kw) kernel.

    Uses a patch-matrix (im2col) fast path; the direct-summation oracle in
    the test suite anchors its correctness.
    """
    _check_positive_int(stride, "stride")
    if padding not in ("same", "valid"):
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and kernel")
    n, c, h, w = x.data.shape
    f, ck, kh, kw = kernel.data.shape
    if ck != c:
        raise ShapeError(f"kernel channels {ck} != input channels {c}")
    if bias.data.shape != (f,):
        raise ShapeError(f"bias shape {bias.data.shape} != ({f},)")

    if kh == 1 and kw == 1 and stride == 1:
        return _conv1x1(x, kernel, bias, n, c, h, w, f)

    if padding == "same":
        pt, pb = _same_padding(h, kh, stride)
        pl, pr = _same_padding(w, kw, stride)
    else:
        pt = pb = pl = pr = 0
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("kernel larger than padded input")

    if stride == 1:
        return _conv_shift(x, kernel, bias, xp, (pt, pl), (n, c, h, w, f, kh, kw, ho, wo))

    # general strided path: patch matrix (N*ho*wo, C*kh*kw)
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = kernel.data.reshape(f, c * kh * kw)
    out_data = cols @ kmat.T + bias.data
    out_data = out_data.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    out = Tensor(out_data, requires_grad=x.requires_grad or kernel.requires_grad or bias.requires_grad)
    out._parents = (x, kernel, bias)

    def _bwd(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        if bias.requires_grad:
            bias._accumulate(gmat.sum(axis=0))
        if kernel.requires_grad:
            kernel._accumulate((gmat.T @ cols).reshape(kernel.data.shape))
        if x.requires_grad:
            gcols = gmat @ kmat  # (N*ho*wo, C*kh*kw)
            gcols = gcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gpad = np.zeros_like(xp)
            for i in range(kh):
                hi = i + stride * ho
                for j in range(kw):
                    wj = j + stride * wo
                    gpad[:, :, i:hi:stride, j:wj:stride] += gcols[:, :, :, :, i, j]
            x._accumulate(gpad[:, :, pt:pt + h, pl:pl + w])

    out._backward = _bwd
    return out


def _conv_shift(x, kernel, bias, xp, pad, dims):
    # stride-1 path: per-image patch matrix (C*kh*kw, ho*wo) laid out so the
    # channel-mixing contraction is one batched GEMM against the flat kernel
    n, c, h, w, f, kh, kw, ho, wo = dims
    pt, pl = pad
    kmat = kernel.data.reshape(f, c * kh * kw)
    cols = np.empty((n, c, kh * kw, ho, wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i * kw + j] = xp[:, :, i:i + ho, j:j + wo]
    cols = cols.reshape(n, c * kh * kw, ho * wo)
    acc = np.matmul(kmat, cols)
    acc += bias.data[:, None]
    out = Tensor(acc.reshape(n, f, ho, wo),
                 requires_grad=x.requires_grad or kernel.requires_grad or bias.requires_grad)
    out._parents = (x, kernel, bias)

    def _bwd(g):
        gr = g.reshape(n, f, ho * wo)
        if bias.requires_grad:
            bias._accumulate(gr.sum(axis=(0, 2)))
        if kernel.requires_grad:
            gk = np.matmul(gr, cols.transpose(0, 2, 1)).sum(axis=0)
            kernel._accumulate(gk.reshape(kernel.data.shape))
        if x.requires_grad:
            gcols = np.matmul(kmat.T, gr).reshape(n, c, kh * kw, ho, wo)
            gpad = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gpad[:, :, i:i + ho, j:j + wo] += gcols[:, :, i * kw + j]
            x._accumulate(gpad[:, :, pt:pt + h, pl:pl + w])

    out._backward = _bwd
    return out


def _conv1x1(x, kernel, bias, n, c, h, w, f):
    # 1x1 stride-1 convolution degenerates to a channel-mixing GEMM
    kmat = kernel.data.reshape(f, c)
    xr = x.data.reshape(n, c, h * w)
    out_data = (np.matmul(kmat, xr) + bias.data[:, None]).reshape(n, f, h, w)
    out = Tensor(out_data, requires_grad=x.requires_grad or kernel.requires_grad or bias.requires_grad)
    out._parents = (x, kernel, bias)

    def _bwd(g):
        gr = g.reshape(n, f, h * w)
        if bias.requires_grad:
            bias._accumulate(gr.sum(axis=(0, 2)))
        if kernel.requires_grad:
            gk = np.matmul(gr, xr.transpose(0, 2, 1)).sum(axis=0)
            kernel._accumulate(gk.reshape(kernel.data.shape))
        if x.requires_grad:
            x._accumulate(np.matmul(kmat.T, gr).reshape(x.data.shape))

    out._backward = _bwd
    return out


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------

def maxpool2d(x: Tensor, pool: int = 2) -> Tensor:
    """Max pooling over non-overlapping pool x pool windows.

    Gradient routes entirely to each window's argmax; ties break to the
    first index in row-major order for determinism.
    """
    _check_positive_int(pool, "pool")
    n, c, h, w = x.data.shape
    if h % pool or w % pool:
        raise ShapeError(f"spatial extents ({h},{w}) not divisible by pool {pool}")
    ho, wo = h // pool, w // pool
    tiled = x.data.reshape(n, c, ho, pool, wo, pool).transpose(0, 1, 2, 4, 3, 5)
    flat = tiled.reshape(n, c, ho, wo, pool * pool)
    idx = flat.argmax(axis=-1)  # first max in row-major window order
    out_data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    out = Tensor(out_data, requires_grad=x.requires_grad)
    out._parents = (x,)

    def _bwd(g):
        gflat = np.zeros((n, c, ho, wo, pool * pool), dtype=g.dtype)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(n, c, ho, wo, pool, pool).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        x._accumulate(gx)

    out._backward = _bwd
    return out


def global_pool(x: Tensor, mode: str = "avg") -> Tensor:
    """Reduce (N, C, H, W) to (N, C) by spatial mean or maximum."""
    if mode not in ("avg", "max"):
        raise ValueError(f"mode must be 'avg' or 'max', got {mode!r}")
    n, c, h, w = x.data.shape
    if mode == "avg":
        out_data = x.data.mean(axis=(2, 3))
    else:
        out_data = x.data.max(axis=(2, 3))
        flat = x.data.reshape(n, c, h * w)
        idx = flat.argmax(axis=-1)

    out = Tensor(out_data, requires_grad=x.requires_grad)
    out._parents = (x,)

    if mode == "avg":
        def _bwd(g):
            x._accumulate(np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape))
    else:
        def _bwd(g):
            gflat = np.zeros((n, c, h * w), dtype=g.dtype)
            np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
            x._accumulate(gflat.reshape(n, c, h, w))

    out._backward = _bwd
    return out


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

class BatchNormState:
    """Per-channel learnable scale/shift plus running statistics.

    ``momentum`` follows the moving-average convention
    ``moving = momentum * moving + (1 - momentum) * batch``.
    """

    def __init__(self, channels, momentum=0.99, epsilon=1e-3, dtype=np.float32):
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        self.channels = channels
        self.momentum = momentum
        self.epsilon = epsilon
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.moving_mean = np.zeros(channels, dtype=dtype)
        self.moving_variance = np.ones(channels, dtype=dtype)
        self.updated = False


def batchnorm2d(x: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-channel normalization of an (N, C, H, W) tensor.

    Train mode normalizes by batch statistics and updates the moving
    averages; infer mode normalizes by the moving statistics and is a pure
    function of (input, state).
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    n, c, h, w = x.data.shape
    if c != state.channels:
        raise ShapeError(f"input channels {c} != state channels {state.channels}")
    gamma, beta = state.gamma, state.beta

    if mode == "train":
        count = n * h * w
        mu = np.einsum("nchw->c", x.data, optimize=True) / count
        sumsq = np.einsum("nchw,nchw->c", x.data, x.data, optimize=True)
        var = np.maximum(sumsq / count - mu * mu, 0.0)
        m = state.momentum
        state.moving_mean = m * state.moving_mean + (1.0 - m) * mu.astype(state.moving_mean.dtype)
        state.moving_variance = m * state.moving_variance + (1.0 - m) * var.astype(state.moving_variance.dtype)
        state.updated = True
    else:
        if not state.updated:
            warnings.warn("batchnorm2d infer mode before any training update: using initialized moving statistics")
        mu = state.moving_mean.astype(x.data.dtype)
        var = state.moving_variance.astype(x.data.dtype)

    inv_std = (1.0 / np.sqrt(var + state.epsilon)).astype(x.data.dtype)
    mu = mu.astype(x.data.dtype)
    # fused y = x * a + b with a = gamma/std, b = beta - mu*a
    a = gamma.data * inv_std
    b = beta.data - mu * a
    out_data = x.data * a[None, :, None, None]
    out_data += b[None, :, None, None]

    def _xhat():
        return (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]

    out = Tensor(out_data, requires_grad=x.requires_grad or gamma.requires_grad or beta.requires_grad)
    out._parents = (x, gamma, beta)

    if mode == "train":
        def _bwd(g):
            xh = _xhat()
            gsum = np.einsum("nchw->c", g, optimize=True)
            gxsum = np.einsum("nchw,nchw->c", g, xh, optimize=True)
            if beta.requires_grad:
                beta._accumulate(gsum)
            if gamma.requires_grad:
                gamma._accumulate(gxsum)
            if x.requires_grad:
                m_count = n * h * w
                coeff = (gamma.data * inv_std / m_count)[None, :, None, None]
                gx = coeff * (m_count * g - gsum[None, :, None, None] - xh * gxsum[None, :, None, None])
                x._accumulate(gx)
    else:
        def _bwd(g):
            if beta.requires_grad:
                beta._accumulate(np.einsum("nchw->c", g, optimize=True))
            if gamma.requires_grad:
                gamma._accumulate(np.einsum("nchw,nchw->c", g, _xhat(), optimize=True))
            if x.requires_grad:
                x._accumulate(g * (gamma.data * inv_std)[None, :, None, None])

    out._backward = _bwd
    return out


# ---------------------------------------------------------------------------
# Structural ops
# ---------------------------------------------------------------------------

def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis; gradient splits back exactly."""
    na, ca, ha, wa = a.data.shape
    nb, cb, hb, wb = b.data.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(f"batch/spatial mismatch: {a.data.shape} vs {b.data.shape}")
    out = Tensor(np.concatenate([a.data, b.data], axis=1), requires_grad=a.requires_grad or b.requires_grad)
    out._parents = (a, b)

    def _bwd(g):
        if a.requires_grad:
            a._accumulate(g[:, :ca])
        if b.requires_grad:
            b._accumulate(g[:, ca:])

    out._backward = _bwd
    return out


def split_channels(x: Tensor, ca: int):
    """Inverse of concat_channels (data only): first ca channels, remainder."""
    return x.data[:, :ca].copy(), x.data[:, ca:].copy()


def add(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise addition of same-shape tensors (addition skip connections)."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)
    out._parents = (a, b)

    def _bwd(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    out._backward = _bwd
    return out


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)
    out = Tensor(out_data, requires_grad=x.requires_grad)
    out._parents = (x,)

    def _bwd(g):
        x._accumulate(g * (out_data > 0))

    out._backward = _bwd
    return out


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map (N, D) @ (D, U) + (U,)."""
    if x.data.ndim != 2 or weights.data.ndim != 2:
        raise ShapeError("dense expects 2-D input and weights")
    n, d = x.data.shape
    dw, u = weights.data.shape
    if d != dw:
        raise ShapeError(f"input features {d} != weight rows {dw}")
    if bias.data.shape != (u,):
        raise ShapeError(f"bias shape {bias.data.shape} != ({u},)")
    out = Tensor(x.data @ weights.data + bias.data,
                 requires_grad=x.requires_grad or weights.requires_grad or bias.requires_grad)
    out._parents = (x, weights, bias)

    def _bwd(g):
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
        if weights.requires_grad:
            weights._accumulate(x.data.T @ g)
        if x.requires_grad:
            x._accumulate(g @ weights.data.T)

    out._backward = _bwd
    return out


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

BCE_CLAMP = 1e-7  # probability clamp; avoids infinite loss on saturated predictions


def sigmoid(data):
    out = np.empty_like(data)
    pos = data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-data[pos]))
    ex = np.exp(data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_bce(logits: Tensor, labels: Tensor):
    """Sigmoid head plus mean binary cross-entropy.

    Returns ``(probs, loss)``. ``probs`` is detached from the tape; the loss
    gradient w.r.t. each logit is (p - y) / N.
    """
    y = labels.data
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    if y.shape != logits.data.shape:
        raise ShapeError(f"label shape {y.shape} != logit shape {logits.data.shape}")
    p = sigmoid(logits.data)
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    n = p.size
    loss_val = float(-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).mean())

    loss = Tensor(np.asarray(loss_val, dtype=logits.data.dtype).reshape(()),
                  requires_grad=logits.requires_grad)
    loss._parents = (logits,)

    def _bwd(g):
        if logits.requires_grad:
            logits._accumulate(g * (pc - y) / n)

    loss._backward = _bwd
    return Tensor(p), loss


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class OptimizerState:
    """Adaptive-moment (Adam) optimizer state over a parameter dict.

    ``learning_rate`` is mutable; the plateau scheduler writes it directly.
    """

    def __init__(self, params, learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-7):
        if learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        self.params = dict(params)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.params.items()}


def optimizer_step(state: OptimizerState):
    """One bias-corrected Adam update using each parameter's current grad."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    lr = state.learning_rate
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in state.params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


# ---------------------------------------------------------------------------
# Verification harness
# ---------------------------------------------------------------------------

def finite_diff_check(fn, tensors, eps=1e-5, tol=1e-4):
    """Central finite differences vs autograd for every coordinate.

    ``fn(*tensors)`` must return a scalar Tensor. All inputs should be
    float64. Returns the max relative error; raises AssertionError listing
    the worst coordinate when ``tol`` is exceeded.
    """
    for t in tensors:
        if t.data.dtype != np.float64:
            raise ValueError("finite_diff_check requires float64 tensors")
        t.zero_grad()
    loss = fn(*tensors)
    loss.backward()
    worst = 0.0
    worst_loc = None
    for ti, t in enumerate(tensors):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn(*tensors).data)
            flat[i] = orig - eps
            fm = float(fn(*tensors).data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1.0)
            err = abs(a - numeric) / denom
            if err > worst:
                worst = err
                worst_loc = (ti, i, a, numeric)
    if worst > tol:
        ti, i, a, numeric = worst_loc
        raise AssertionError(
            f"finite_diff_check failed: tensor {ti} coord {i}: autograd {a} vs numeric {numeric} (rel err {worst:.3e} > tol {tol:.0e})"
        )
    return worst
