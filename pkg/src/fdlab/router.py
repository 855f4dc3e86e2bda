"""Selective gradient routing between two backbones and their consumers.

The router sits after the two feature pyramids and fans them out to three
consumers: auxiliary head 1 (sees pyramid 1), auxiliary head 2 (sees pyramid
2), and the fusion layer (sees both).  Forward values are always identical to
the inputs; a 3x2 pass matrix decides, per consumer and per backbone, whether
the backward path exists at all.  Entry [j][i] == 1 keeps consumer j's
gradient path into backbone i; 0 severs it exactly (a detached view, not a
multiplication by zero).

Rows 0 and 1 each touch a single pyramid, so entries [0][1] and [1][0] are
structurally inert: auxiliary head 1 has no path into backbone 2 to sever.
They are kept so a plan is a plain matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

INPUT_COUNT = 2
OUTPUT_COUNT = 3

# named configurations used by the experiments: plain fused model, fused
# model with co-trained auxiliary heads, and the fully decoupled variant
PRESETS = {
    "baseline": ((0, 0), (0, 0), (1, 1)),
    "rsc": ((1, 1), (1, 1), (1, 1)),
    "rsc-md": ((1, 0), (0, 1), (0, 0)),
}

__all__ = ["RoutePlan", "PRESETS", "route_forward", "effective_gradient"]


@dataclass(frozen=True)
class RoutePlan:
    """A 3x2 {0,1} pass matrix; rows are (aux1, aux2, fusion) consumers."""

    pass_matrix: tuple

    def __post_init__(self):
        matrix = tuple(tuple(int(v) for v in row) for row in self.pass_matrix)
        if len(matrix) != OUTPUT_COUNT or any(len(r) != INPUT_COUNT for r in matrix):
            raise ValueError(
                f"pass matrix must be {OUTPUT_COUNT}x{INPUT_COUNT}, got {self.pass_matrix!r}"
            )
        if any(v not in (0, 1) for row in matrix for v in row):
            raise ValueError(f"pass matrix entries must be 0 or 1, got {self.pass_matrix!r}")
        object.__setattr__(self, "pass_matrix", matrix)

    @classmethod
    def from_preset(cls, name: str) -> "RoutePlan":
        if name not in PRESETS:
            raise ValueError(f"unknown route preset {name!r}; know {sorted(PRESETS)}")
        return cls(PRESETS[name])

    @classmethod
    def from_config(cls, value) -> "RoutePlan":
        """Accept a preset name or an explicit 3x2 matrix."""
        if isinstance(value, str):
            return cls.from_preset(value)
        return cls(tuple(tuple(row) for row in value))

    @property
    def name(self) -> str:
        for preset, matrix in PRESETS.items():
            if self.pass_matrix == matrix:
                return preset
        return "custom"


def route_forward(f1, f2, plan: RoutePlan):
    """Fan two feature pyramids out to the three consumers.

    Returns (aux1_view, aux2_view, (fusion_view1, fusion_view2)); every view
    is value-identical to its input pyramid, with backward paths kept or
    severed per the plan.
    """
    m = plan.pass_matrix
    aux1 = tuple(ad.route_view(t, m[0][0]) for t in f1)
    aux2 = tuple(ad.route_view(t, m[1][1]) for t in f2)
    fusion1 = tuple(ad.route_view(t, m[2][0]) for t in f1)
    fusion2 = tuple(ad.route_view(t, m[2][1]) for t in f2)
    return aux1, aux2, (fusion1, fusion2)


def _check_like(name, grads, reference):
    if len(grads) != len(reference):
        raise ad.ShapeMismatchError(
            "effective_gradient", f"{name}: {len(grads)} levels, expected {len(reference)}"
        )
    for g, r in zip(grads, reference):
        if np.shape(g) != np.shape(r):
            raise ad.ShapeMismatchError(
                "effective_gradient", f"{name}: level shape {np.shape(g)} vs {np.shape(r)}"
            )


def effective_gradient(plan: RoutePlan, aux1_grads, aux2_grads, fusion_grads):
    """Pure-numpy reference of what each backbone receives.

    ``fusion_grads`` is a (wrt-pyramid-1, wrt-pyramid-2) pair;
    returns (g_backbone1, g_backbone2) as tuples of arrays.
    """
    fus1, fus2 = fusion_grads
    _check_like("fusion grads vs aux1", fus1, aux1_grads)
    _check_like("fusion grads vs aux2", fus2, aux2_grads)
    m = plan.pass_matrix
    g1 = tuple(
        m[0][0] * np.asarray(a) + m[2][0] * np.asarray(f)
        for a, f in zip(aux1_grads, fus1)
    )
    g2 = tuple(
        m[1][1] * np.asarray(a) + m[2][1] * np.asarray(f)
        for a, f in zip(aux2_grads, fus2)
    )
    return g1, g2
