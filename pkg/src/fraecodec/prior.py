"""Latent prior models for variable-rate coding.

Each model yields a per-frame factorized categorical distribution over the D
bottleneck dimensions (K levels each), optionally conditioned on the previous
dequantized latent or on the decoder recurrent state. The negative log
likelihood of realized indices is the rate term of the training objective
and the exact code-length target of the arithmetic coder.
"""

from __future__ import annotations

import math
from enum import IntEnum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Linear

LN2 = math.log(2.0)


class PriorKind(IntEnum):
    UNIFORM = 0
    TIME_INVARIANT = 1
    COND_PREV_LATENT = 2
    COND_DECODER_STATE = 3


PRIOR_NAMES = {
    "uniform": PriorKind.UNIFORM,
    "time_invariant": PriorKind.TIME_INVARIANT,
    "cond_prev_latent": PriorKind.COND_PREV_LATENT,
    "cond_decoder_state": PriorKind.COND_DECODER_STATE,
}

_CONDITIONAL = (PriorKind.COND_PREV_LATENT, PriorKind.COND_DECODER_STATE)


class PriorError(ValueError):
    """Missing or mismatched conditioning, or an invalid prior setup."""


def prior_name(kind: PriorKind) -> str:
    for name, k in PRIOR_NAMES.items():
        if k == kind:
            return name
    raise PriorError(f"unknown prior kind {kind}")


class PriorModel:
    """Per-dimension categorical prior over latent indices.

    UNIFORM has no parameters; TIME_INVARIANT owns a D x K logit table; the
    conditional kinds map their conditioning vector through a small
    two-layer network to D*K logits.
    """

    def __init__(self, kind: PriorKind, dim: int, levels: int,
                 table: Tensor | None = None,
                 fc1: Linear | None = None, fc2: Linear | None = None):
        self.kind = PriorKind(kind)
        self.dim = dim
        self.levels = levels
        self.table = table
        self.fc1 = fc1
        self.fc2 = fc2
        if self.kind == PriorKind.TIME_INVARIANT and table is None:
            raise PriorError("time-invariant prior needs a logit table")
        if self.kind in _CONDITIONAL and (fc1 is None or fc2 is None):
            raise PriorError("conditional prior needs its two-layer network")

    @classmethod
    def new(cls, kind: PriorKind, dim: int, levels: int,
            cond_dim: int = 0, hidden: int = 64,
            rng: np.random.Generator | None = None) -> "PriorModel":
        kind = PriorKind(kind)
        if kind == PriorKind.UNIFORM:
            return cls(kind, dim, levels)
        if kind == PriorKind.TIME_INVARIANT:
            return cls(kind, dim, levels, table=Tensor(np.zeros((dim, levels))))
        if cond_dim <= 0:
            raise PriorError(f"conditional prior needs cond_dim > 0, got {cond_dim}")
        rng = rng if rng is not None else np.random.default_rng(0)
        fc1 = Linear.create(rng, cond_dim, hidden, activation="tanh")
        fc2 = Linear.create(rng, hidden, dim * levels, activation="linear")
        return cls(kind, dim, levels, fc1=fc1, fc2=fc2)

    @property
    def requires_conditioning(self) -> bool:
        return self.kind in _CONDITIONAL

    @property
    def cond_dim(self) -> int:
        return self.fc1.fan_in if self.fc1 is not None else 0

    def parameters(self, prefix: str = "prior") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.table is not None:
            out[f"{prefix}.table"] = self.table
        if self.fc1 is not None:
            out.update(self.fc1.parameters(f"{prefix}.fc1"))
            out.update(self.fc2.parameters(f"{prefix}.fc2"))
        return out

    def _check_conditioning(self, cond: Tensor | None, batch: int = 1) -> None:
        if self.requires_conditioning:
            if cond is None:
                raise PriorError(f"{prior_name(self.kind)} prior requires conditioning")
            if cond.data.ndim != 2 or cond.shape != (batch, self.cond_dim):
                raise PriorError(
                    f"conditioning shape {cond.shape} does not match "
                    f"({batch}, {self.cond_dim})")
        elif cond is not None:
            raise PriorError(f"{prior_name(self.kind)} prior takes no conditioning")

    def _flat_logits(self, cond: Tensor) -> Tensor:
        return self.fc2(self.fc1(cond))  # [batch, D*K]

    def logits(self, cond: Tensor | None = None) -> Tensor:
        """D x K logit matrix for a single frame."""
        self._check_conditioning(cond, batch=1)
        if self.kind == PriorKind.UNIFORM:
            return Tensor(np.zeros((self.dim, self.levels)))
        if self.kind == PriorKind.TIME_INVARIANT:
            return self.table
        flat = self._flat_logits(cond)
        k = self.levels
        rows = [ad.slice_(flat, 1, d * k, (d + 1) * k) for d in range(self.dim)]
        return ad.concat(rows, axis=0)

    def prob_rows(self, cond: Tensor | None = None) -> np.ndarray:
        """Value-only D x K probability matrix (the arithmetic coder path)."""
        if self.kind == PriorKind.UNIFORM:
            self._check_conditioning(cond, batch=1)
            return np.full((self.dim, self.levels), 1.0 / self.levels)
        logits = self.logits(cond).data
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    def nll_nats(self, indices: np.ndarray, cond: Tensor | None = None) -> Tensor:
        """Total NLL in nats of a [batch, D] (or [D]) index block, on tape.

        Gradients flow into the prior parameters and, for conditional kinds,
        through the conditioning vector into whatever produced it.
        """
        idx = np.atleast_2d(np.asarray(indices))
        batch, dim = idx.shape
        if dim != self.dim:
            raise PriorError(f"index block has {dim} dims, prior expects {self.dim}")
        if self.kind == PriorKind.UNIFORM:
            self._check_conditioning(cond, batch=batch)
            return Tensor(batch * dim * math.log(self.levels))
        k = self.levels
        if self.kind == PriorKind.TIME_INVARIANT:
            self._check_conditioning(cond, batch=batch)
            logp = ad.log(ad.softmax(self.table, axis=1))
            counts = np.zeros((self.dim, k))
            np.add.at(counts, (np.broadcast_to(np.arange(dim), idx.shape), idx), 1.0)
            return ad.mul(ad.sum_(ad.mul(logp, Tensor(counts))), -1.0)
        self._check_conditioning(cond, batch=batch)
        flat = self._flat_logits(cond)
        total = None
        for d in range(dim):
            block = ad.slice_(flat, 1, d * k, (d + 1) * k)  # [batch, K]
            logp = ad.log(ad.softmax(block, axis=1))
            onehot = np.zeros((batch, k))
            onehot[np.arange(batch), idx[:, d]] = 1.0
            term = ad.sum_(ad.mul(logp, Tensor(onehot)))
            total = term if total is None else ad.add(total, term)
        return ad.mul(total, -1.0)

    def nll_bits(self, indices: np.ndarray, cond: Tensor | None = None) -> float:
        """Ideal codeword length in bits of one frame's indices."""
        idx = np.asarray(indices)
        if idx.ndim != 1 or idx.shape[0] != self.dim:
            raise PriorError(f"nll_bits expects a [{self.dim}] index vector, got {idx.shape}")
        probs = self.prob_rows(cond)
        p = probs[np.arange(self.dim), idx]
        return float(-np.log2(p).sum())


def prior_logits(model: PriorModel, conditioning: Tensor | None = None) -> Tensor:
    return model.logits(conditioning)


def nll_bits(model: PriorModel, indices: np.ndarray,
             conditioning: Tensor | None = None) -> float:
    return model.nll_bits(indices, conditioning)
