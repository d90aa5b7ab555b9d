"""Dense tensor ops with reverse-mode gradients.

Thin, shape-checked layer over torch autograd. Every op the rest of the
package relies on for correctness lives here so it can be gradient-checked
in one place. Broadcasting is allowed only over leading batch axes: the
smaller operand's shape must be a suffix of the larger one's.
"""
from __future__ import annotations

import builtins
import contextlib
import random
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor

TRAIN_DTYPE = torch.float32
VERIFY_DTYPE = torch.float64


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""


def _fail(op: str, *shapes) -> None:
    desc = " vs ".join(str(tuple(s)) for s in shapes)
    raise ShapeError(f"{op}: incompatible shapes {desc}")


def _suffix_compatible(a: Sequence[int], b: Sequence[int]) -> bool:
    a, b = tuple(a), tuple(b)
    if len(a) < len(b):
        a, b = b, a
    return a[len(a) - len(b):] == b


@contextlib.contextmanager
def precision(dtype: torch.dtype):
    """Temporarily switch the default floating dtype (e.g. to 64-bit for checks)."""
    old = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(old)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def tensor(data, requires_grad: bool = False, dtype: torch.dtype | None = None) -> Tensor:
    return torch.tensor(data, dtype=dtype or torch.get_default_dtype(), requires_grad=requires_grad)


# --------------------------------------------------------------------------
# forward ops
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 1 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        _fail("matmul", a.shape, b.shape)
    if b.dim() > 2 and a.shape[:-2] != b.shape[:-2]:
        _fail("matmul", a.shape, b.shape)
    return a @ b


def add(a: Tensor, b: Tensor) -> Tensor:
    if not _suffix_compatible(a.shape, b.shape):
        _fail("add", a.shape, b.shape)
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    if not _suffix_compatible(a.shape, b.shape):
        _fail("mul", a.shape, b.shape)
    return a * b


def exp(x: Tensor) -> Tensor:
    return torch.exp(x)


def log(x: Tensor) -> Tensor:
    return torch.log(x)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def silu(x: Tensor) -> Tensor:
    return F.silu(x)


def sum(x: Tensor, axis: int | None = None, keepdim: bool = False) -> Tensor:  # noqa: A001
    return x.sum() if axis is None else x.sum(dim=axis, keepdim=keepdim)


def mean(x: Tensor, axis: int | None = None, keepdim: bool = False) -> Tensor:
    return x.mean() if axis is None else x.mean(dim=axis, keepdim=keepdim)


def max(x: Tensor, axis: int = -1, keepdim: bool = False) -> Tensor:  # noqa: A001
    """Max along ``axis``; the gradient goes to the first (lowest-index) maximiser."""
    idx = torch.argmax(x.detach(), dim=axis, keepdim=True)
    # argmax is documented to return the first occurrence on ties
    out = torch.gather(x, axis, idx)
    return out if keepdim else out.squeeze(axis)


def softmax(x: Tensor) -> Tensor:
    return torch.softmax(x, dim=-1)


def log_softmax(x: Tensor) -> Tensor:
    return torch.log_softmax(x, dim=-1)


def cross_entropy(logits: Tensor, target: Tensor) -> Tensor:
    """Categorical cross-entropy over the last axis, averaged over the rest.

    ``target`` is either integer class ids (shape ``logits.shape[:-1]``) or a
    probability tensor of the same shape as ``logits``.
    """
    if target.dtype in (torch.int64, torch.int32, torch.long):
        if target.shape != logits.shape[:-1]:
            _fail("cross_entropy", logits.shape, target.shape)
        return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), target.reshape(-1).long())
    if target.shape != logits.shape:
        _fail("cross_entropy", logits.shape, target.shape)
    return -(target * torch.log_softmax(logits, dim=-1)).sum(-1).mean()


def one_hot(index: Tensor, num_classes: int, dtype: torch.dtype | None = None) -> Tensor:
    if index.numel() and (int(index.min()) < 0 or int(index.max()) >= num_classes):
        raise ShapeError(f"one_hot: index out of range for {num_classes} classes")
    return F.one_hot(index.long(), num_classes).to(dtype or torch.get_default_dtype())


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    ref = xs[0]
    ax = axis % ref.dim()
    for x in xs[1:]:
        if x.dim() != ref.dim() or any(
            x.shape[i] != ref.shape[i] for i in range(ref.dim()) if i != ax
        ):
            _fail("concat", *[t.shape for t in xs])
    return torch.cat(list(xs), dim=axis)


def slice_(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    n = x.shape[axis]
    if not 0 <= start <= stop <= n:
        raise ShapeError(f"slice: [{start}:{stop}] out of bounds for axis of size {n}")
    return x.narrow(axis, start, stop - start)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        return x.reshape(tuple(shape))
    except RuntimeError:
        _fail("reshape", x.shape, shape)


def rms_norm(x: Tensor, weight: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    if weight is not None and weight.shape != x.shape[-1:]:
        _fail("rms_norm", x.shape, weight.shape)
    out = x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps)
    return out if weight is None else out * weight


def embedding(table: Tensor, index: Tensor) -> Tensor:
    if table.dim() != 2:
        _fail("embedding", table.shape, index.shape)
    if index.numel() and (int(index.min()) < 0 or int(index.max()) >= table.shape[0]):
        raise ShapeError(f"embedding: index out of range for table of {table.shape[0]} rows")
    return F.embedding(index.long(), table)


def cumprod(x: Tensor, axis: int) -> Tensor:
    return torch.cumprod(x, dim=axis)


# --------------------------------------------------------------------------
# stop-gradient with a replayable constant tape
# --------------------------------------------------------------------------

class ConstantTape:
    """Holds stop-gradient values fixed across repeated evaluations.

    A finite-difference oracle must treat ``sg(x)`` as a constant equal to
    ``x`` at the base point; otherwise the perturbed forward passes would
    see the blocked paths move. The first pass records, later passes replay
    in call order.
    """

    def __init__(self) -> None:
        self.values: list[Tensor] = []
        self.recording = True
        self.cursor = 0

    def constant(self, x: Tensor) -> Tensor:
        if self.recording:
            self.values.append(x.detach().clone())
            return self.values[-1]
        v = self.values[self.cursor]
        self.cursor += 1
        if v.shape != x.shape:
            raise ShapeError(f"stop_gradient replay: {tuple(v.shape)} vs {tuple(x.shape)}")
        return v

    def replay(self) -> None:
        self.recording = False
        self.cursor = 0


_tape: ConstantTape | None = None


def stop_gradient(x: Tensor) -> Tensor:
    if _tape is None:
        return x.detach()
    return _tape.constant(x)


@contextlib.contextmanager
def frozen_constants():
    global _tape
    prev, _tape = _tape, ConstantTape()
    try:
        yield _tape
    finally:
        _tape = prev


# --------------------------------------------------------------------------
# backward and gradient utilities
# --------------------------------------------------------------------------

def backward(loss: Tensor, inputs: Sequence[Tensor] | None = None) -> list[Tensor] | None:
    """Accumulate d loss / d param into ``.grad``; returns grads of ``inputs`` if given."""
    if loss.numel() != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    loss.backward(inputs=list(inputs) if inputs is not None else None)
    if inputs is None:
        return None
    return [t.grad for t in inputs]


def grad_norm(params: Iterable[Tensor]) -> float:
    grads = [p.grad.detach().reshape(-1) for p in params if p.grad is not None]
    if not grads:
        return 0.0
    return float(torch.linalg.vector_norm(torch.cat(grads)))


def clip_gradients(params: Iterable[Tensor], max_norm: float) -> float:
    """Rescale gradients in place to global norm <= max_norm; returns the pre-clip norm."""
    params = [p for p in params if p.grad is not None]
    if not params:
        return 0.0
    return float(torch.nn.utils.clip_grad_norm_(params, max_norm))


def central_difference(fn: Callable[[], Tensor], param: Tensor, index: tuple, eps: float = 1e-4) -> float:
    """d fn / d param[index] by central differences, restoring the entry afterwards."""
    with torch.no_grad():
        orig = param[index].item()
        param[index] = orig + eps
        up = float(fn())
        param[index] = orig - eps
        down = float(fn())
        param[index] = orig
    return (up - down) / (2 * eps)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / builtins.max(abs(a), abs(b), floor)


def gradient_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    n_probes: int = 20,
    eps: float = 1e-4,
    seed: int = 0,
) -> list[dict]:
    """Compare autograd against central differences on randomly probed entries.

    ``loss_fn`` must be deterministic. Stop-gradient sites inside it are held
    at their base-point values for the perturbed evaluations.
    """
    rng = np.random.default_rng(seed)
    with frozen_constants() as tape:
        for p in params:
            p.grad = None
        loss = loss_fn()
        backward(loss)
        analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
        tape.replay()

        def replayed() -> Tensor:
            tape.cursor = 0
            return loss_fn()

        sizes = np.array([p.numel() for p in params], dtype=float)
        results = []
        for _ in range(n_probes):
            k = int(rng.choice(len(params), p=sizes / sizes.sum()))
            flat = int(rng.integers(params[k].numel()))
            index = tuple(int(i) for i in np.unravel_index(flat, tuple(params[k].shape)))
            fd = central_difference(replayed, params[k], index, eps)
            an = float(analytic[k][index])
            results.append({"param": k, "index": index, "analytic": an, "numeric": fd,
                            "rel_error": relative_error(an, fd)})
    return results
