"""Two-layer ReLU update network with two scalar heads (z-update, w-update)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


@dataclass
class PolicyParams:
    w1: np.ndarray  # (in, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden, 2)
    b2: np.ndarray  # (2,)
    meta: dict = field(default_factory=dict, compare=False)

    FIELDS = ("w1", "b1", "w2", "b2")

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, k) for k in self.FIELDS]

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_vector(self, vec: np.ndarray) -> "PolicyParams":
        out, i = [], 0
        for a in self.arrays():
            out.append(np.array(vec[i:i + a.size], dtype=float).reshape(a.shape))
            i += a.size
        return PolicyParams(*out, meta=dict(self.meta))

    def zeros_like(self) -> "PolicyParams":
        return PolicyParams(*(np.zeros_like(a) for a in self.arrays()))

    def copy(self) -> "PolicyParams":
        return PolicyParams(*(a.copy() for a in self.arrays()), meta=dict(self.meta))


def init_params(seed: int, input_dim: int = 8, hidden: int = 64) -> PolicyParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)

    def glorot(fan_in, fan_out):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=(fan_in, fan_out))

    return PolicyParams(glorot(input_dim, hidden), np.zeros(hidden),
                        glorot(hidden, 2), np.zeros(2),
                        meta={"seed": seed, "input_dim": input_dim, "hidden": hidden})


def forward(params: PolicyParams, s: np.ndarray, return_hidden: bool = False):
    """Outputs (..., 2) for inputs (..., in); head 0 drives z, head 1 drives w."""
    s = np.asarray(s, dtype=float)
    if s.shape[-1] != params.input_dim:
        raise ValueError(f"expected {params.input_dim} features, got {s.shape[-1]}")
    pre = s @ params.w1 + params.b1
    h = np.maximum(pre, 0.0)
    out = h @ params.w2 + params.b2
    return (out, pre) if return_hidden else out


def backward(params: PolicyParams, s: np.ndarray, gout: np.ndarray,
             pre: np.ndarray | None = None) -> tuple[PolicyParams, np.ndarray]:
    """Reverse pass: gradients w.r.t. the parameters and the inputs.

    ``pre`` is the hidden pre-activation from :func:`forward`; it is
    recomputed when omitted.  The ReLU derivative at 0 is taken as 0.
    """
    s = np.asarray(s, dtype=float)
    gout = np.asarray(gout, dtype=float)
    if pre is None:
        pre = s @ params.w1 + params.b1
    h = np.maximum(pre, 0.0)
    s2 = s.reshape(-1, params.input_dim)
    h2 = h.reshape(-1, params.hidden)
    g2 = gout.reshape(-1, 2)
    gh = g2 @ params.w2.T
    gpre = gh * (pre.reshape(-1, params.hidden) > 0)
    grads = PolicyParams(s2.T @ gpre, gpre.sum(axis=0), h2.T @ g2, g2.sum(axis=0))
    gs = (gpre @ params.w1.T).reshape(s.shape)
    return grads, gs


def save_params(params: PolicyParams, path: str | Path, **meta) -> None:
    """JSON with shapes and metadata; float repr round-trips exactly."""
    doc = {
        "format": "riskte-policy",
        "version": FORMAT_VERSION,
        "meta": {**params.meta, **meta},
        "arrays": {k: {"shape": list(getattr(params, k).shape),
                       "data": [float(v) for v in getattr(params, k).ravel()]}
                   for k in PolicyParams.FIELDS},
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_params(path: str | Path) -> PolicyParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "riskte-policy" or doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: not a version-{FORMAT_VERSION} policy file")
    arrays = [np.array(doc["arrays"][k]["data"], dtype=float).reshape(doc["arrays"][k]["shape"])
              for k in PolicyParams.FIELDS]
    return PolicyParams(*arrays, meta=doc.get("meta", {}))
