"""Class prototype storage with momentum updates, plus imbalance gating.

The bank keeps one prototype per (level, class) for each of the two branches
("main" and "aux"). Updates blend the running value with the new batch mean
under a momentum coefficient; reads always return unit-norm vectors. The raw
running value is kept un-normalized so the momentum recursion stays exact,
and normalization is applied at read time.

Gating: a per-level Gini coefficient of the class frequencies decides whether
the auxiliary objectives are active for that level.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import Tensor


def batch_prototypes(features: Tensor, labels: Tensor, num_classes: int) -> tuple[Tensor, Tensor]:
    """Per-class mean feature vectors and a presence mask.

    Rows of absent classes are zero and masked out.
    """
    if features.ndim != 2 or labels.ndim != 1 or features.shape[0] != labels.shape[0]:
        raise ValueError("features must be (N, D) and labels (N,)")
    if not torch.isfinite(features).all():
        raise ValueError("features must be finite")
    counts = torch.bincount(labels, minlength=num_classes)
    mask = counts > 0
    protos = torch.zeros((num_classes, features.shape[1]), dtype=features.dtype)
    protos.index_add_(0, labels, features)
    protos[mask] = protos[mask] / counts[mask].to(features.dtype).unsqueeze(1)
    return protos, mask


def _normalize_rows(x: Tensor) -> Tensor:
    norms = x.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    return x / norms


class PrototypeBank:
    """Momentum-averaged class prototypes for the main and auxiliary branches."""

    BRANCHES = ("main", "aux")

    def __init__(self, class_counts: tuple[int, ...], dim: int, momentum: float = 0.999):
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must be in (0, 1)")
        self.class_counts = tuple(class_counts)
        self.dim = dim
        self.momentum = momentum
        self._raw = {
            branch: [torch.zeros((k, dim), dtype=torch.float64) for k in self.class_counts]
            for branch in self.BRANCHES
        }
        self._init = {
            branch: [torch.zeros(k, dtype=torch.bool) for k in self.class_counts]
            for branch in self.BRANCHES
        }

    def _check(self, level: int, branch: str) -> None:
        if branch not in self.BRANCHES:
            raise ValueError(f"branch must be one of {self.BRANCHES}, got {branch!r}")
        if not 0 <= level < len(self.class_counts):
            raise ValueError(f"level must be in [0, {len(self.class_counts) - 1}], got {level}")

    def ema_update(self, level: int, branch: str, new_protos: Tensor, mask: Tensor) -> None:
        """Blend new per-class means into the bank; first observation seeds directly.

        Runs without gradient tracking; the bank never appears in an autograd graph.
        """
        self._check(level, branch)
        if new_protos.shape != (self.class_counts[level], self.dim):
            raise ValueError(
                f"expected protos of shape {(self.class_counts[level], self.dim)}, "
                f"got {tuple(new_protos.shape)}"
            )
        if not torch.isfinite(new_protos[mask]).all():
            raise ValueError("masked prototypes must be finite")
        with torch.no_grad():
            new_protos = new_protos.detach().to(torch.float64)
            raw = self._raw[branch][level]
            init = self._init[branch][level]
            seed_rows = mask & ~init
            update_rows = mask & init
            raw[seed_rows] = new_protos[seed_rows]
            raw[update_rows] = (
                self.momentum * raw[update_rows] + (1.0 - self.momentum) * new_protos[update_rows]
            )
            init |= mask

    def prototypes(self, level: int, branch: str) -> Tensor:
        """Unit-norm prototypes, shape (K_level, dim); uninitialized rows are zero."""
        self._check(level, branch)
        raw = self._raw[branch][level]
        init = self._init[branch][level]
        out = torch.zeros_like(raw)
        out[init] = _normalize_rows(raw[init])
        return out

    def raw(self, level: int, branch: str) -> Tensor:
        """The un-normalized running value (copy)."""
        self._check(level, branch)
        return self._raw[branch][level].clone()

    def initialized(self, level: int, branch: str) -> Tensor:
        self._check(level, branch)
        return self._init[branch][level].clone()

    def state_dict(self) -> dict:
        return {
            "class_counts": list(self.class_counts),
            "dim": self.dim,
            "momentum": self.momentum,
            "raw": {b: [t.clone() for t in self._raw[b]] for b in self.BRANCHES},
            "init": {b: [t.clone() for t in self._init[b]] for b in self.BRANCHES},
        }

    def load_state_dict(self, state: dict) -> None:
        if tuple(state["class_counts"]) != self.class_counts or state["dim"] != self.dim:
            raise ValueError("bank state does not match this bank's shape")
        self.momentum = float(state["momentum"])
        for branch in self.BRANCHES:
            self._raw[branch] = [t.clone() for t in state["raw"][branch]]
            self._init[branch] = [t.clone() for t in state["init"][branch]]

    @classmethod
    def from_state_dict(cls, state: dict) -> "PrototypeBank":
        bank = cls(tuple(state["class_counts"]), state["dim"], state["momentum"])
        bank.load_state_dict(state)
        return bank


def gini(frequencies: np.ndarray) -> float:
    """Mean absolute frequency gap, normalized to [0, 1): 0 means perfectly balanced."""
    freqs = np.asarray(frequencies, dtype=np.float64)
    if freqs.ndim != 1 or freqs.size == 0:
        raise ValueError("frequencies must be a non-empty 1-d array")
    if (freqs < 0).any():
        raise ValueError("frequencies must be nonnegative")
    if abs(freqs.sum() - 1.0) > 1e-6:
        raise ValueError(f"frequencies must sum to 1 within 1e-6, got {freqs.sum()!r}")
    c = freqs.size
    return float(np.abs(freqs[:, None] - freqs[None, :]).sum() / (2.0 * c))


def imbalance_gate(frequencies_per_level: list[np.ndarray], threshold: float = 0.6) -> list[bool]:
    """Per-level activation of the auxiliary objectives: gate when imbalance is severe.

    Frequencies should come from the full training split, not individual batches.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must be in [0, 1]")
    return [gini(freqs) >= threshold for freqs in frequencies_per_level]
