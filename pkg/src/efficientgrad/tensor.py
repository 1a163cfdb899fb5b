"""Dense numeric kernels on NCHW numpy arrays.

Tensors are plain :class:`numpy.ndarray` objects. 64-bit arrays are used for
gradient checks, 32-bit arrays for training. Convolutions are
cross-correlations computed through an im2col matrix product.

Work on a batch is split into fixed-size sample chunks. The chunk layout
never depends on the worker count, and partial sums are merged in chunk
order with 64-bit accumulation, so results are bit-identical for any
``set_num_threads`` value.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "DimensionError",
    "set_num_threads",
    "get_num_threads",
    "conv_output_size",
    "conv2d_forward",
    "conv2d_input_grad",
    "conv2d_weight_grad",
    "im2col",
    "col2im",
    "matmul",
    "transpose",
    "add",
    "mul",
    "scale",
    "reduce_sum",
    "reduce_mean",
    "reduce_std",
]

CHUNK = 32

_num_threads = 1
_executor: ThreadPoolExecutor | None = None


class DimensionError(ValueError):
    """Raised when operand shapes are inconsistent."""


def set_num_threads(n: int) -> None:
    """Cap kernel-internal parallelism at ``n`` worker threads.

    BLAS is pinned to a single thread so that the only parallelism is the
    fixed chunk decomposition done here.
    """
    global _num_threads, _executor
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    from threadpoolctl import threadpool_limits

    threadpool_limits(1)
    if _executor is not None:
        _executor.shutdown(wait=True)
        _executor = None
    _num_threads = int(n)
    if _num_threads > 1:
        _executor = ThreadPoolExecutor(max_workers=_num_threads)


def get_num_threads() -> int:
    return _num_threads


def _chunked(fn, n: int) -> list:
    slices = [slice(i, min(i + CHUNK, n)) for i in range(0, n, CHUNK)]
    if _executor is None or len(slices) == 1:
        return [fn(s) for s in slices]
    return list(_executor.map(fn, slices))


def _sum_ordered(parts: list[np.ndarray], dtype) -> np.ndarray:
    acc = np.zeros(parts[0].shape, dtype=np.float64)
    for p in parts:
        acc += p
    return acc.astype(dtype, copy=False)


def conv_output_size(size: int, k: int, stride: int, pad: int, axis: str = "H") -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise DimensionError(
            f"axis {axis}: extent {size} with kernel {k}, stride {stride}, pad {pad} "
            "does not tile to a positive integer output size"
        )
    return span // stride + 1


def _check_conv(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> tuple[int, int]:
    if x.ndim != 4:
        raise DimensionError(f"input must be 4-D NCHW, got shape {x.shape}")
    if w.ndim != 4:
        raise DimensionError(f"kernel must be 4-D (Cout,Cin,K,K), got shape {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"axis C: input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    if w.shape[2] != w.shape[3]:
        raise DimensionError(f"axis K: kernel must be square, got {w.shape[2]}x{w.shape[3]}")
    if stride < 1 or pad < 0:
        raise DimensionError(f"stride must be >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    k = w.shape[2]
    return (
        conv_output_size(x.shape[2], k, stride, pad, "H"),
        conv_output_size(x.shape[3], k, stride, pad, "W"),
    )


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """Unfold ``x`` into a ``(C*K*K, N*Hout*Wout)`` patch matrix."""
    n, c, h, w = x.shape
    hout = conv_output_size(h, k, stride, pad, "H")
    wout = conv_output_size(w, k, stride, pad, "W")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, C, Hout, Wout, K, K) -> (C, K, K, N, Hout, Wout)
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * hout * wout)
    return np.ascontiguousarray(cols)


def col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add a patch matrix back to an NCHW array (adjoint of :func:`im2col`)."""
    n, c, h, w = shape
    hout = conv_output_size(h, k, stride, pad, "H")
    wout = conv_output_size(w, k, stride, pad, "W")
    cols = cols.reshape(c, k, k, n, hout, wout)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * hout : stride, j : j + stride * wout : stride] += cols[
                :, i, j
            ].transpose(1, 0, 2, 3)
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


def conv2d_forward(x: np.ndarray, kernel: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlate ``x`` (N,Cin,H,W) with ``kernel`` (Cout,Cin,K,K), zero padded."""
    hout, wout = _check_conv(x, kernel, stride, pad)
    cout, _, k, _ = kernel.shape
    wmat = kernel.reshape(cout, -1)

    def run(s: slice) -> np.ndarray:
        xs = x[s]
        out = wmat @ im2col(xs, k, stride, pad)
        return out.reshape(cout, xs.shape[0], hout, wout).transpose(1, 0, 2, 3)

    return np.ascontiguousarray(np.concatenate(_chunked(run, x.shape[0]), axis=0))


def conv2d_input_grad(
    delta_out: np.ndarray,
    kernel: np.ndarray,
    stride: int = 1,
    pad: int = 0,
    input_hw: tuple[int, int] | None = None,
) -> np.ndarray:
    """Transposed convolution of ``delta_out`` with ``kernel``.

    ``kernel`` is whichever matrix carries the error backward: the forward
    weights for exact gradients, or a feedback substitute. ``input_hw`` is
    needed only when a stride > 1 leaves the input extent ambiguous.
    """
    if delta_out.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"expected 4-D delta and kernel, got {delta_out.shape} and {kernel.shape}")
    n, cout, hout, wout = delta_out.shape
    if kernel.shape[0] != cout:
        raise DimensionError(f"axis C: delta has {cout} channels, kernel produces {kernel.shape[0]}")
    _, cin, k, _ = kernel.shape
    if input_hw is None:
        input_hw = ((hout - 1) * stride + k - 2 * pad, (wout - 1) * stride + k - 2 * pad)
    h, w = input_hw
    if conv_output_size(h, k, stride, pad, "H") != hout or conv_output_size(w, k, stride, pad, "W") != wout:
        raise DimensionError(f"input extent {input_hw} inconsistent with delta extent {(hout, wout)}")
    wmat_t = kernel.reshape(cout, -1).T

    def run(s: slice) -> np.ndarray:
        d = delta_out[s]
        m = d.shape[0]
        dcols = wmat_t @ d.transpose(1, 0, 2, 3).reshape(cout, -1)
        return col2im(dcols, (m, cin, h, w), k, stride, pad)

    return np.ascontiguousarray(np.concatenate(_chunked(run, n), axis=0))


def conv2d_weight_grad(
    x: np.ndarray,
    delta_out: np.ndarray,
    stride: int = 1,
    pad: int = 0,
    kernel_size: int | None = None,
) -> np.ndarray:
    """Gradient of :func:`conv2d_forward` with respect to the kernel, summed over the batch."""
    if x.ndim != 4 or delta_out.ndim != 4:
        raise DimensionError(f"expected 4-D input and delta, got {x.shape} and {delta_out.shape}")
    if x.shape[0] != delta_out.shape[0]:
        raise DimensionError(f"axis N: input batch {x.shape[0]} != delta batch {delta_out.shape[0]}")
    n, cin, h, w = x.shape
    _, cout, hout, wout = delta_out.shape
    if kernel_size is None:
        kernel_size = h + 2 * pad - (hout - 1) * stride
    k = kernel_size
    if k < 1 or conv_output_size(h, k, stride, pad, "H") != hout or conv_output_size(w, k, stride, pad, "W") != wout:
        raise DimensionError(f"delta extent {(hout, wout)} inconsistent with input {(h, w)} and kernel {k}")

    def run(s: slice) -> np.ndarray:
        d = delta_out[s].transpose(1, 0, 2, 3).reshape(cout, -1)
        return d @ im2col(x[s], k, stride, pad).T

    return _sum_ordered(_chunked(run, n), x.dtype).reshape(cout, cin, k, k)


def _same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape {a.shape} does not match {b.shape}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def transpose(a: np.ndarray) -> np.ndarray:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D array, got {a.shape}")
    return np.ascontiguousarray(a.T)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "add")
    return a + b


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "mul")
    return a * b


def scale(a: np.ndarray, s: float) -> np.ndarray:
    return a * np.asarray(s, dtype=a.dtype)


def reduce_sum(a: np.ndarray, axis=None) -> np.ndarray:
    return np.sum(a, axis=axis, dtype=np.float64).astype(a.dtype)


def reduce_mean(a: np.ndarray, axis=None) -> np.ndarray:
    return np.mean(a, axis=axis, dtype=np.float64).astype(a.dtype)


def reduce_std(a: np.ndarray, axis=None) -> np.ndarray:
    """Population standard deviation (divides by the element count)."""
    return np.std(a, axis=axis, dtype=np.float64).astype(a.dtype)
