"""Generative link model: collaborative inference, high-order connectivity, fusion MLP.

Every layer works on an n x n matrix ``H``.  Collaborative inference re-expresses
``H`` through its own column space,

    CI(H) = lam * H (lam * H^T H + I)^-1 H^T H,

high-order connectivity smooths that with the renormalized adjacency of the
input graph, ``HCC(H) = Anorm CI(H)``, and the next layer is ``HCC(H) W``.
The per-pair values of CI and HCC from every layer are concatenated and passed
through a two-layer MLP that emits one link probability per ordered pair.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape, Var
from .fsutil import atomic_write_bytes

CHECKPOINT_FORMAT = "linkrecon-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    layer_weights: list[np.ndarray]
    mlp_w1: np.ndarray
    mlp_b1: np.ndarray
    mlp_w2: np.ndarray
    mlp_b2: np.ndarray
    lam: float = 0.13
    dropout_rate: float = 0.2
    layer_relu: bool = False

    def __post_init__(self):
        L = len(self.layer_weights)
        if L < 1:
            raise ValueError("need at least one layer weight")
        n = self.layer_weights[0].shape[0]
        for w in self.layer_weights:
            if w.shape != (n, n):
                raise ValueError(f"layer weight shape {w.shape}, expected {(n, n)}")
        h = self.mlp_w1.shape[1]
        expect = {
            "mlp_w1": (2 * (L + 1), h),
            "mlp_b1": (1, h),
            "mlp_w2": (h, 1),
            "mlp_b2": (1, 1),
        }
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def n(self) -> int:
        return self.layer_weights[0].shape[0]

    @property
    def depth(self) -> int:
        return len(self.layer_weights)

    @property
    def hidden(self) -> int:
        return self.mlp_w1.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name (views, not copies)."""
        out = {f"W{l}": w for l, w in enumerate(self.layer_weights)}
        out.update(mlp_w1=self.mlp_w1, mlp_b1=self.mlp_b1, mlp_w2=self.mlp_w2, mlp_b2=self.mlp_b2)
        return out

    def replace_arrays(self, arrays: dict[str, np.ndarray]) -> "ModelParams":
        return ModelParams(
            layer_weights=[arrays[f"W{l}"] for l in range(self.depth)],
            mlp_w1=arrays["mlp_w1"],
            mlp_b1=arrays["mlp_b1"],
            mlp_w2=arrays["mlp_w2"],
            mlp_b2=arrays["mlp_b2"],
            lam=self.lam,
            dropout_rate=self.dropout_rate,
            layer_relu=self.layer_relu,
        )

    def copy(self) -> "ModelParams":
        return self.replace_arrays({k: v.copy() for k, v in self.arrays().items()})


@dataclass
class ForwardArtifacts:
    ci_outputs: list[Var]
    hcc_outputs: list[Var]
    scores: Var
    hidden: list[Var] = field(default_factory=list)

    def probabilities(self) -> np.ndarray:
        return self.scores.value


def normalized_adjacency(a: np.ndarray) -> np.ndarray:
    """``D^-1/2 (A + I) D^-1/2`` with ``D`` the row sums of ``A + I``."""
    a_hat = np.asarray(a, dtype=np.float64) + np.eye(a.shape[0])
    d = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return d[:, None] * a_hat * d[None, :]


def collaborative_inference(h: Var, lam: float, tape: Tape) -> Var:
    n = h.shape[0]
    if h.shape != (n, n):
        raise ValueError(f"collaborative inference needs a square matrix, got {h.shape}")
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    gram = tape.matmul(tape.transpose(h), h)
    system = tape.add(tape.scalar_mul(gram, lam), tape.constant(np.eye(n)))
    inv = tape.spd_inverse(system)
    return tape.scalar_mul(tape.matmul(tape.matmul(h, inv), gram), lam)


def high_order_connectivity(anorm: Var, ci: Var, tape: Tape) -> Var:
    return tape.matmul(anorm, ci)


def propagate(anorm: Var, h: Var, w: Var, lam: float, tape: Tape, relu: bool = False):
    """One layer.  Returns ``(ci, hcc, h_next)`` so callers can keep the features."""
    ci = collaborative_inference(h, lam, tape)
    hcc = high_order_connectivity(anorm, ci, tape)
    h_next = tape.matmul(hcc, w)
    if relu:
        h_next = tape.relu(h_next)
    return ci, hcc, h_next


def fuse(
    ci_outputs: list[Var],
    hcc_outputs: list[Var],
    mlp: dict[str, Var],
    dropout_rate: float,
    training: bool,
    tape: Tape,
    seed=None,
) -> Var:
    """Per-pair MLP over ``[CI_0, HCC_0, ..., CI_L, HCC_L]``; returns n x n probabilities."""
    if len(ci_outputs) != len(hcc_outputs) or not ci_outputs:
        raise ValueError("need matching, non-empty CI and HCC lists")
    n = ci_outputs[0].shape[0]
    for m in (*ci_outputs, *hcc_outputs):
        if m.shape != (n, n):
            raise ValueError(f"feature matrix has shape {m.shape}, expected {(n, n)}")
    cols = []
    for ci, hcc in zip(ci_outputs, hcc_outputs):
        cols.append(tape.reshape(ci, n * n, 1))
        cols.append(tape.reshape(hcc, n * n, 1))
    feats = tape.concat_columns(cols)
    hidden = tape.relu(tape.add_row(tape.matmul(feats, mlp["mlp_w1"]), mlp["mlp_b1"]))
    hidden = tape.dropout(hidden, dropout_rate, seed, training)
    logits = tape.add_row(tape.matmul(hidden, mlp["mlp_w2"]), mlp["mlp_b2"])
    return tape.reshape(tape.sigmoid(logits), n, n)


def forward(
    a_input: np.ndarray,
    params: ModelParams,
    training: bool,
    tape: Tape,
    seed=None,
    leaves: dict[str, Var] | None = None,
) -> ForwardArtifacts:
    """Run the model on adjacency ``a_input``.

    ``leaves`` maps parameter names to tape leaves; when omitted the parameters
    are registered on ``tape`` here.  ``seed`` drives dropout in training mode.
    """
    a_input = np.asarray(a_input, dtype=np.float64)
    n = params.n
    if a_input.shape != (n, n):
        raise ValueError(f"adjacency is {a_input.shape}, model expects {(n, n)}")
    if leaves is None:
        leaves = {k: tape.param(k, v) for k, v in params.arrays().items()}

    anorm = tape.constant(normalized_adjacency(a_input))
    h = tape.constant(a_input)
    cis, hccs, hs = [], [], [h]
    for l in range(params.depth):
        ci, hcc, h = propagate(anorm, h, leaves[f"W{l}"], params.lam, tape, params.layer_relu)
        cis.append(ci)
        hccs.append(hcc)
        hs.append(h)
    ci = collaborative_inference(h, params.lam, tape)
    cis.append(ci)
    hccs.append(high_order_connectivity(anorm, ci, tape))
    scores = fuse(cis, hccs, leaves, params.dropout_rate, training, tape, seed)
    return ForwardArtifacts(cis, hccs, scores, hs)


def predict(a_input: np.ndarray, params: ModelParams) -> np.ndarray:
    """Inference-mode probabilities (dropout off)."""
    return forward(a_input, params, training=False, tape=Tape()).scores.value


# -- checkpoints -------------------------------------------------------------


def _encode(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(np.float64)


def checkpoint_bytes(params: ModelParams, extra: dict | None = None) -> bytes:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "n": params.n,
        "layers": params.depth,
        "hidden": params.hidden,
        "lambda": params.lam,
        "dropout_rate": params.dropout_rate,
        "layer_relu": params.layer_relu,
        "params": {k: _encode(v) for k, v in params.arrays().items()},
    }
    if extra:
        doc["extra"] = extra
    return (json.dumps(doc, sort_keys=True) + "\n").encode("utf-8")


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> str:
    """Write atomically; returns the SHA-256 of the file contents."""
    path = Path(path)
    blob = checkpoint_bytes(params, extra)
    atomic_write_bytes(path, blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> ModelParams:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    arrays = {k: _decode(v) for k, v in doc["params"].items()}
    return ModelParams(
        layer_weights=[arrays[f"W{l}"] for l in range(doc["layers"])],
        mlp_w1=arrays["mlp_w1"],
        mlp_b1=arrays["mlp_b1"],
        mlp_w2=arrays["mlp_w2"],
        mlp_b2=arrays["mlp_b2"],
        lam=doc["lambda"],
        dropout_rate=doc["dropout_rate"],
        layer_relu=doc["layer_relu"],
    )
