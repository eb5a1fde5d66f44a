"""Shipped structural causal models with hand-checkable effect values.

Every preset uses binary variables and affine conditional probabilities, so
total/direct/indirect effects have short closed forms that the enumeration in
:func:`ffclab.scmdata.closed_form_effects` reproduces exactly.
"""
from __future__ import annotations

import numpy as np

from .numkit import Rng
from .scmdata import SCMSpec

# The two-attribute preset's mixing matrix comes from this pinned stream so
# the feature geometry is identical across dataset seeds and sweep configs.
_MIXING_SEED = 9001


def mediation_chain(d_x: int = 16, sigma: float = 0.5) -> SCMSpec:
    """a1 -> m1 -> y with a direct a1 -> y edge.

    P(m1=1|a1) = 0.2 + 0.5 a1 and P(y=1|a1,m1) = 0.1 + 0.3 a1 + 0.4 m1, so the
    arm-0-minus-arm-1 contrasts are te = -0.5, nde = -0.3, nie = -0.2 and the
    fixed-mediator contrast is -0.3 at both mediator values.
    """
    return SCMSpec(
        variables=["a1", "m1", "y"],
        parents={"m1": ["a1"], "y": ["a1", "m1"]},
        cpt={
            "a1": np.array([0.5]),
            "m1": np.array([0.2, 0.7]),
            # index = a1 + 2*m1
            "y": np.array([0.1, 0.4, 0.5, 0.8]),
        },
        attributes=["a1"],
        label="y",
        mediators=["m1"],
        d_x=d_x,
        sigma=sigma,
    )


def confounded(d_x: int = 16, sigma: float = 0.5) -> SCMSpec:
    """u -> a1, u -> y, a1 -> y: a textbook observed confounder.

    P(a1=1|u) = 0.25 + 0.5 u and P(y=1|a1,u) = 0.1 + 0.4 a1 + 0.3 u, giving
    te = -0.4 under adjustment for u, while the raw group contrast is -0.55.
    """
    return SCMSpec(
        variables=["u", "a1", "y"],
        parents={"a1": ["u"], "y": ["a1", "u"]},
        cpt={
            "u": np.array([0.5]),
            "a1": np.array([0.25, 0.75]),
            # index = a1 + 2*u
            "y": np.array([0.1, 0.5, 0.4, 0.8]),
        },
        attributes=["a1"],
        label="y",
        d_x=d_x,
        sigma=sigma,
    )


def pure_chain(d_x: int = 16, sigma: float = 0.5) -> SCMSpec:
    """a1 -> m1 -> y with no direct edge; a1 and y are independent given m1."""
    return SCMSpec(
        variables=["a1", "m1", "y"],
        parents={"m1": ["a1"], "y": ["m1"]},
        cpt={
            "a1": np.array([0.5]),
            "m1": np.array([0.2, 0.8]),
            "y": np.array([0.2, 0.8]),
        },
        attributes=["a1"],
        label="y",
        mediators=["m1"],
        d_x=d_x,
        sigma=sigma,
    )


def collider(d_x: int = 16, sigma: float = 0.5) -> SCMSpec:
    """a1 -> y <- m1; a1 and m1 are marginally independent fair coins."""
    return SCMSpec(
        variables=["a1", "m1", "y"],
        parents={"y": ["a1", "m1"]},
        cpt={
            "a1": np.array([0.5]),
            "m1": np.array([0.5]),
            # index = a1 + 2*m1
            "y": np.array([0.1, 0.5, 0.5, 0.9]),
        },
        attributes=["a1"],
        label="y",
        mediators=["m1"],
        d_x=d_x,
        sigma=sigma,
    )


def biased_two_attribute(
    effect_a1: float = 0.35,
    effect_a2: float = 0.2,
    base: float | None = 0.15,
    mean_label: float | None = None,
    attr_link: float = 0.4,
    a2_base: float = 0.3,
    leak_attr: float = 2.0,
    leak_label: float = 0.8,
    d_x: int = 16,
    sigma: float = 0.5,
) -> SCMSpec:
    """Two correlated sensitive attributes, both causal for the label.

    a1 is a root, P(a2=1|a1) = a2_base + attr_link * a1, and
    P(y=1|a1,a2) = base + effect_a1 * a1 + effect_a2 * a2.  Passing
    ``mean_label`` instead of ``base`` solves for the base rate that keeps the
    marginal label frequency fixed, which makes effect-strength sweeps
    comparable.  The mixing matrix is fixed (unit columns drawn once from a
    pinned stream) with the attribute channels scaled by ``leak_attr`` and the
    label channel by ``leak_label``, so the classifier must lean on attribute
    leakage rather than reading the label off the features.
    """
    if mean_label is not None:
        p_a2 = a2_base + attr_link * 0.5
        base = mean_label - 0.5 * effect_a1 - p_a2 * effect_a2
    if base is None:
        raise ValueError("biased_two_attribute: give either base or mean_label")
    top = base + effect_a1 + effect_a2
    if not (0.0 < base and top < 1.0):
        raise ValueError(f"biased_two_attribute: label CPT leaves (0,1): base={base}, top={top}")
    mix = Rng(_MIXING_SEED, 0).normal(size=(d_x, 3))
    mix /= np.linalg.norm(mix, axis=0, keepdims=True)
    mix *= np.array([leak_attr, leak_attr, leak_label])
    return SCMSpec(
        variables=["a1", "a2", "y"],
        parents={"a2": ["a1"], "y": ["a1", "a2"]},
        cpt={
            "a1": np.array([0.5]),
            "a2": np.array([a2_base, a2_base + attr_link]),
            # index = a1 + 2*a2
            "y": np.array([base, base + effect_a1, base + effect_a2, top]),
        },
        attributes=["a1", "a2"],
        label="y",
        d_x=d_x,
        sigma=sigma,
        mixing=mix,
    )


PRESETS = {
    "mediation-chain": mediation_chain,
    "confounded": confounded,
    "pure-chain": pure_chain,
    "collider": collider,
    "biased-two-attribute": biased_two_attribute,
}


def get_preset(name: str, **kwargs) -> SCMSpec:
    if name not in PRESETS:
        raise KeyError(f"unknown SCM preset {name!r}; available: {sorted(PRESETS)}")
    return PRESETS[name](**kwargs)
