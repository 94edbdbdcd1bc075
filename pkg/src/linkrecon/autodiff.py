"""Dense float64 matrices with a tape-based reverse-mode differentiation engine.

Only the operations the link model needs are provided.  A :class:`Tape` records
each operation in execution order; :meth:`Tape.backward` walks the records in
reverse and returns gradients for the trainable leaves.

    >>> tape = Tape()
    >>> w = tape.param("w", np.array([[3.0]]))
    >>> loss = tape.sum(tape.matmul(w, w))
    >>> tape.backward(loss)["w"]
    array([[6.]])
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
from scipy.special import expit

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Cholesky factorization failed."""


@dataclass(eq=False)
class Var:
    """Handle to a value recorded on a tape."""

    value: np.ndarray
    index: int
    tape: "Tape"
    requires_grad: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.value.shape})"


@dataclass(eq=False)
class _Node:
    op: str
    parents: tuple[int, ...]
    backward: Backward | None
    name: str | None = None


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def _check_finite(op: str, value: np.ndarray) -> None:
    if not np.isfinite(value).all():
        raise NonFiniteError(f"{op} produced non-finite values")


class Tape:
    """Append-only record of matrix operations.

    A tape is single use: record a forward pass, call :meth:`backward` once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.values: list[np.ndarray | None] = []
        self.leaves: dict[str, int] = {}
        self._used = False

    def __len__(self):
        return len(self.nodes)

    # -- recording -----------------------------------------------------

    def record(
        self,
        op: str,
        value: np.ndarray,
        parents: Sequence[Var],
        backward: Backward | None,
        check: bool = True,
    ) -> Var:
        """Append an operation.

        ``backward(g)`` receives the output cotangent and returns one cotangent
        per parent, in order (``None`` for no contribution).  ``check=False``
        is for ops that cannot turn finite inputs into non-finite outputs.
        """
        if self._used:
            raise RuntimeError("tape already consumed by backward()")
        for p in parents:
            if p.tape is not self:
                raise ValueError("operand recorded on a different tape")
        if check:
            _check_finite(op, value)
        requires_grad = any(p.requires_grad for p in parents)
        self.nodes.append(_Node(op, tuple(p.index for p in parents), backward if requires_grad else None))
        self.values.append(value)
        return Var(value, len(self.nodes) - 1, self, requires_grad)

    def param(self, name: str, value) -> Var:
        """Trainable leaf; its gradient is reported under ``name``."""
        if name in self.leaves:
            raise ValueError(f"duplicate parameter {name!r}")
        v = self.record("param", as_matrix(value), (), None)
        v.requires_grad = True
        self.nodes[v.index].name = name
        self.leaves[name] = v.index
        return v

    def constant(self, value) -> Var:
        return self.record("const", as_matrix(value), (), None)

    # -- linear algebra ------------------------------------------------

    def matmul(self, a: Var, b: Var) -> Var:
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        av, bv = a.value, b.value
        ga, gb = a.requires_grad, b.requires_grad

        def back(g):
            da = db = None
            if ga:
                # single-column b: the product is an outer product, cheaper by broadcasting
                da = g * bv.T if bv.shape[1] == 1 else g @ bv.T
            if gb:
                db = av.T @ g
            return da, db

        return self.record("matmul", av @ bv, (a, b), back)

    def transpose(self, a: Var) -> Var:
        return self.record("transpose", np.ascontiguousarray(a.value.T), (a,), lambda g: (g.T,), check=False)

    def spd_inverse(self, m: Var) -> Var:
        """Inverse of a symmetric positive definite matrix via Cholesky.

        The input is symmetrized as ``(M + M^T) / 2`` first, and the recorded
        derivative includes that projection.
        """
        mv = m.value
        if mv.shape[0] != mv.shape[1]:
            raise ValueError(f"spd_inverse needs a square matrix, got {mv.shape}")
        scale = max(1.0, float(np.abs(mv).max()))
        if np.abs(mv - mv.T).max() > 1e-9 * scale:
            raise ValueError("spd_inverse input is not symmetric")
        sym = 0.5 * (mv + mv.T)
        try:
            c = scipy.linalg.cho_factor(sym, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError(f"Cholesky failed: {exc}") from exc
        inv = scipy.linalg.cho_solve(c, np.eye(sym.shape[0]), check_finite=False)
        inv = 0.5 * (inv + inv.T)

        def back(g):
            d = -(inv @ g @ inv)
            return (0.5 * (d + d.T),)

        return self.record("spd_inverse", inv, (m,), back)

    # -- elementwise ---------------------------------------------------

    def add(self, a: Var, b: Var) -> Var:
        _same_shape("add", a, b)
        return self.record("add", a.value + b.value, (a, b), lambda g: (g, g))

    def subtract(self, a: Var, b: Var) -> Var:
        _same_shape("subtract", a, b)
        return self.record("subtract", a.value - b.value, (a, b), lambda g: (g, -g))

    def scalar_mul(self, a: Var, c: float) -> Var:
        c = float(c)
        return self.record("scalar_mul", c * a.value, (a,), lambda g: (c * g,))

    def add_row(self, a: Var, row: Var) -> Var:
        """Add a ``1 x cols`` row vector to every row of ``a`` (bias term)."""
        if row.shape != (1, a.shape[1]):
            raise ValueError(f"add_row expects 1x{a.shape[1]}, got {row.shape}")
        return self.record("add_row", a.value + row.value, (a, row), lambda g: (g, g.sum(axis=0, keepdims=True)))

    def sigmoid(self, a: Var) -> Var:
        s = expit(a.value)
        return self.record("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))

    def relu(self, a: Var) -> Var:
        out = np.maximum(a.value, 0.0)
        return self.record("relu", out, (a,), lambda g: (np.where(out > 0, g, 0.0),), check=False)

    def dropout(self, a: Var, rate: float, seed, training: bool) -> Var:
        """Inverted dropout; the identity when not training or ``rate == 0``."""
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        if not training or rate == 0.0:
            return self.record("dropout", a.value, (a,), lambda g: (g,), check=False)
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        # float32 uniforms suffice for a Bernoulli mask and halve the memory traffic
        keep = rng.random(a.shape, dtype=np.float32) >= rate
        scale = 1.0 / (1.0 - rate)
        out = a.value * keep
        out *= scale

        def back(g):
            d = g * keep
            d *= scale
            return (d,)

        return self.record("dropout", out, (a,), back, check=False)

    # -- shape ---------------------------------------------------------

    def concat_columns(self, parts: Sequence[Var]) -> Var:
        if not parts:
            raise ValueError("concat_columns needs at least one part")
        rows = parts[0].shape[0]
        if any(p.shape[0] != rows for p in parts):
            raise ValueError("concat_columns row-count mismatch")
        bounds = np.cumsum([0] + [p.shape[1] for p in parts])
        out = np.concatenate([p.value for p in parts], axis=1)

        def back(g):
            return tuple(np.ascontiguousarray(g[:, bounds[k]:bounds[k + 1]]) for k in range(len(parts)))

        return self.record("concat_columns", out, tuple(parts), back, check=False)

    def reshape(self, a: Var, rows: int, cols: int) -> Var:
        """Row-major reshape (entry ``(i, j)`` of an n x n matrix lands at ``i*n + j``)."""
        shape = a.shape
        return self.record(
            "reshape",
            a.value.reshape(rows, cols),
            (a,),
            lambda g: (np.ascontiguousarray(g).reshape(shape),),
            check=False,
        )

    def sum(self, a: Var) -> Var:
        shape = a.shape
        return self.record("sum", np.array([[a.value.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))

    # -- reverse pass --------------------------------------------------

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Gradients of the scalar ``loss`` for every trainable leaf."""
        if not self.nodes:
            raise ValueError("tape is empty")
        if loss.tape is not self:
            raise ValueError("loss was recorded on a different tape")
        if loss.shape != (1, 1):
            raise ValueError(f"loss must be 1x1, got {loss.shape}")
        if self._used:
            raise RuntimeError("backward() already called on this tape")
        self._used = True

        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.index] = np.ones((1, 1))
        leaf_idx = set(self.leaves.values())
        for i in range(loss.index, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.backward is None:
                continue
            for p, pg in zip(node.parents, node.backward(g)):
                if pg is None or (self.nodes[p].backward is None and p not in leaf_idx):
                    continue
                grads[p] = pg if grads[p] is None else grads[p] + pg
            if i not in leaf_idx:
                grads[i] = None
                self.values[i] = None
            node.backward = None

        return {
            name: grads[i] if grads[i] is not None else np.zeros_like(self.values[i])
            for name, i in self.leaves.items()
        }

    def to_json(self) -> str:
        """Debug dump of the recorded graph (ops, operands, shapes)."""
        rows = []
        for i, node in enumerate(self.nodes):
            val = self.values[i]
            rows.append(
                dict(
                    index=i,
                    op=node.op,
                    parents=list(node.parents),
                    shape=list(val.shape) if val is not None else None,
                    name=node.name,
                )
            )
        return json.dumps(rows, indent=1)


def _same_shape(op: str, a: Var, b: Var) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


def _evaluate(build, values):
    tape = Tape()
    out = build(tape, {k: tape.param(k, v) for k, v in values.items()})
    if out.shape != (1, 1):
        raise ValueError(f"build must return a 1x1 value, got {out.shape}")
    return tape, out


def analytic_gradients(build: Callable[[Tape, dict[str, Var]], Var], params: dict[str, np.ndarray]):
    tape, out = _evaluate(build, params)
    return tape.backward(out)


def numeric_gradients(
    build: Callable[[Tape, dict[str, Var]], Var],
    params: dict[str, np.ndarray],
    h: float = 1e-6,
) -> dict[str, np.ndarray]:
    """Central differences ``(f(x + h) - f(x - h)) / 2h`` for every parameter entry."""
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    grads = {}
    for name, p in work.items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            fp = _evaluate(build, work)[1].value[0, 0]
            p[idx] = orig - h
            fm = _evaluate(build, work)[1].value[0, 0]
            p[idx] = orig
            g[idx] = (fp - fm) / (2.0 * h)
        grads[name] = g
    return grads


def finite_diff_check(
    build: Callable[[Tape, dict[str, Var]], Var],
    params: dict[str, np.ndarray],
    h: float = 1e-6,
) -> float:
    """Largest relative error between tape gradients and central differences.

    ``build(tape, vars)`` records a scalar function of the parameter leaves and
    returns its 1x1 output; it must be deterministic.  Error per entry is
    ``|a - n| / max(1e-12, |a| + |n|)``.
    """
    analytic = analytic_gradients(build, params)
    numeric = numeric_gradients(build, params, h)
    worst = 0.0
    for name, num in numeric.items():
        a = analytic[name]
        err = np.abs(a - num) / np.maximum(1e-12, np.abs(a) + np.abs(num))
        worst = max(worst, float(err.max(initial=0.0)))
    return worst
