from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AttentionTrace:
    """Per-block post-softmax attention and d(score)/d(attention).

    ``attentions[b]`` and ``gradients[b]`` have shape ``heads x s x s``
    where ``s`` counts the patch tokens plus the classification token.
    """

    attentions: tuple
    gradients: tuple

    def __post_init__(self):
        if len(self.attentions) != len(self.gradients):
            raise ValueError("attention and gradient lists differ in length")
        shape = None
        for a, g in zip(self.attentions, self.gradients):
            if a.ndim != 3 or a.shape[1] != a.shape[2]:
                raise ValueError(f"attention block must be heads x s x s, got {a.shape}")
            if g.shape != a.shape:
                raise ValueError(f"gradient shape {g.shape} != attention shape {a.shape}")
            if shape is not None and a.shape != shape:
                raise ValueError("blocks differ in (heads, s)")
            shape = a.shape

    @classmethod
    def from_arrays(cls, attentions, gradients=None) -> "AttentionTrace":
        atts = tuple(np.asarray(a, dtype=np.float64) for a in attentions)
        if gradients is None:
            grads = tuple(np.ones_like(a) for a in atts)
        else:
            grads = tuple(np.asarray(g, dtype=np.float64) for g in gradients)
        return cls(atts, grads)

    @property
    def depth(self) -> int:
        return len(self.attentions)

    @property
    def heads(self) -> int:
        return self.attentions[0].shape[0]

    @property
    def tokens(self) -> int:
        return self.attentions[0].shape[1]

    def max_row_sum_error(self) -> float:
        return max(float(np.abs(a.sum(axis=-1) - 1.0).max()) for a in self.attentions)
