"""Post-selection bookkeeping and key-rate assembly.

On key-generation rounds each party keeps outcome 0 always and keeps any
"1"-class outcome (second click, no click, double click) only with
probability p. The retained fraction, the renormalized distribution after
Alice re-labels her kept non-zero outcomes as 1, the error-correction cost
against Bob's multi-valued outcome, and Eve's min-entropy together give the
asymptotic one-way key rate

    r = p_V * (H_min - H_EC).
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from . import npa
from .model import (BinaryBehavior, DetectorParams, MeasurementConfig,
                    StateParams, TernaryBehavior, behavior, binarize)

NOKEY = float("-inf")
DEFAULT_TOL = npa.DEFAULT_TOL


class EmptyKeySetError(ValueError):
    """Post-selection retains nothing (p = 0 and no 00 mass)."""


@dataclass(frozen=True)
class PostSelectionPolicy:
    """Probability of retaining a "1"-class outcome on key rounds."""

    p: float

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"retain probability must lie in [0, 1], got {self.p}")


@dataclass(frozen=True)
class PSWeights:
    """Retain weights per outcome pair: 1, p or p^2 by count of non-zero indices."""

    p: float
    binary: np.ndarray = field(repr=False)  # (2, 2)
    ternary: np.ndarray = field(repr=False)  # (4, 4), double clicks in the "1" class

    def __post_init__(self):
        self.binary.flags.writeable = False
        self.ternary.flags.writeable = False


def ps_weights(policy: PostSelectionPolicy) -> PSWeights:
    p = policy.p
    binary = np.array([[1.0, p], [p, p * p]])
    nonzero = np.array([0, 1, 1, 1], dtype=float)
    ternary = p ** np.add.outer(nonzero, nonzero)
    return PSWeights(p=p, binary=binary, ternary=ternary)


def retained_fraction(tb: TernaryBehavior, w: PSWeights,
                      key_x: int = 1, key_y: int = 3) -> float:
    """p_V: probability both halves of a key-round pair survive post-selection."""
    pv = float((tb.joint(key_x, key_y) * w.ternary).sum())
    if pv <= 0.0:
        raise EmptyKeySetError(
            "post-selection retains no events: p = 0 and the key setting has "
            "no 00 mass")
    return pv


@dataclass(frozen=True)
class PostSelectedDistribution:
    """Distribution of surviving key rounds after Alice's relabeling.

    ``hat_table[â, b]`` with â in {0, 1} and Bob's outcome b in {0, 1, 2, 3};
    column 3 carries mass only when dark counts are modeled.
    """

    hat_table: np.ndarray = field(repr=False)  # (2, 4)
    p_v: float = 0.0

    def __post_init__(self):
        self.hat_table.flags.writeable = False
        total = float(self.hat_table.sum())
        if abs(total - 1.0) > 1e-10:
            raise ValueError(f"post-selected distribution sums to {total}")

    def bob_marginal(self) -> np.ndarray:
        return self.hat_table.sum(axis=0)


def postselected_distribution(tb: TernaryBehavior, w: PSWeights,
                              key_x: int = 1, key_y: int = 3,
                              ) -> PostSelectedDistribution:
    """Weight the key-setting table by the retain probabilities and renormalize.

    Alice's surviving non-zero outcomes are merged into â = 1; Bob's outcome
    stays multi-valued so error correction can use it.
    """
    pv = retained_fraction(tb, w, key_x, key_y)
    weighted = tb.joint(key_x, key_y) * w.ternary
    hat = np.empty((2, 4))
    hat[0] = weighted[0]
    hat[1] = weighted[1:].sum(axis=0)
    return PostSelectedDistribution(hat_table=hat / pv, p_v=pv)


def _h(x: np.ndarray) -> np.ndarray:
    """Elementwise -x log2 x with h(0) = 0."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    mask = x > 0
    out[mask] = -x[mask] * np.log2(x[mask])
    return out


def binary_entropy(q: float) -> float:
    if q <= 0.0 or q >= 1.0:
        return 0.0
    return float(-q * np.log2(q) - (1 - q) * np.log2(1 - q))


def conditional_entropy_bits(joint: np.ndarray) -> float:
    """H(row | column) of a normalized joint table, in bits."""
    joint = np.asarray(joint, dtype=float)
    return float(_h(joint).sum() - _h(joint.sum(axis=0)).sum())


def ec_cost(psd: PostSelectedDistribution, merge_bob: bool = False) -> float:
    """One-way error-correction cost H(Â|B) in bits.

    Bob's outcome is kept multi-valued by default; ``merge_bob`` collapses
    his non-zero outcomes into one symbol for ablation comparisons.
    """
    table = psd.hat_table
    if merge_bob:
        table = np.stack([table[:, 0], table[:, 1:].sum(axis=1)], axis=1)
    return conditional_entropy_bits(table)


@functools.lru_cache(maxsize=None)
def default_relaxation(level: int = 2, extended: bool = False) -> npa.MomentRelaxation:
    return npa.build_relaxation(level, extended)


def _min_entropy_detail(pb: BinaryBehavior, w: PSWeights, p_v: float,
                        key_pair: tuple[int, int],
                        relaxation: npa.MomentRelaxation,
                        tol: float) -> tuple[float, npa.SdpSolution, list[str]]:
    gp = npa.assemble_guessing_program(pb, w.binary, key_pair, relaxation)
    sol = npa.solve(gp, tol)
    warnings = [sol.warning] if sol.warning else []
    g = sol.value / p_v
    hmin = -np.log2(g) if g > 0 else 1.0
    if hmin < 0.0:
        if hmin < -1e-9:
            warnings.append(
                f"guessing value {g:.12g} exceeds 1; min-entropy clamped to 0")
        hmin = 0.0
    elif hmin > 1.0:
        if hmin > 1.0 + 1e-9:
            warnings.append(
                f"guessing value {g:.12g} below 1/2; min-entropy clamped to 1")
        hmin = 1.0
    return hmin, sol, warnings


def min_entropy(pb: BinaryBehavior, w: PSWeights, p_v: float,
                relaxation: npa.MomentRelaxation | None = None,
                key_pair: tuple[int, int] = (1, 3),
                tol: float = DEFAULT_TOL) -> float:
    """H_min of Alice's post-selected key bit given Eve, in bits.

    -log2 of the SDP guessing bound normalized by p_V, clamped to [0, 1]
    (values outside are solver noise and produce a warning upstream).
    """
    if relaxation is None:
        relaxation = default_relaxation()
    hmin, _, _ = _min_entropy_detail(pb, w, p_v, key_pair, relaxation, tol)
    return hmin


@dataclass(frozen=True)
class RatePoint:
    """One fully evaluated protocol configuration."""

    eta: float
    dark: float
    visibility: float
    theta: float
    angles_alice: tuple[float, float]
    angles_bob: tuple[float, float, float]
    key_x: int
    key_y: int
    p: float
    level: str
    p_v: float | None
    h_min: float | None
    h_ec: float | None
    rate: float | None
    solver_status: str
    solver_gap: float | None
    warnings: tuple[str, ...] = ()

    @property
    def solved(self) -> bool:
        return self.rate is not None

    def params_vector(self) -> np.ndarray:
        """(theta, 2 Alice angles, 3 Bob angles, p) as one flat vector."""
        return np.array([self.theta, *self.angles_alice, *self.angles_bob, self.p])


def key_rate(sp: StateParams, mc: MeasurementConfig, det: DetectorParams,
             policy: PostSelectionPolicy,
             relaxation: npa.MomentRelaxation | None = None,
             tol: float = DEFAULT_TOL,
             ec_merge_bob: bool = False) -> RatePoint:
    """Model the devices, bound Eve, and assemble the Devetak-Winter rate.

    A solver breakdown is recorded in the returned point (status set, no
    rate) instead of raised, so parameter searches can continue past it.
    """
    if relaxation is None:
        relaxation = default_relaxation()
    tb = behavior(sp, mc, det)
    w = ps_weights(policy)
    pv = retained_fraction(tb, w, mc.key_x, mc.key_y)
    psd = postselected_distribution(tb, w, mc.key_x, mc.key_y)
    hec = ec_cost(psd, merge_bob=ec_merge_bob)
    pb = binarize(tb)
    common = dict(
        eta=det.eta, dark=det.dark, visibility=sp.visibility, theta=sp.theta,
        angles_alice=mc.angles_alice, angles_bob=mc.angles_bob,
        key_x=mc.key_x, key_y=mc.key_y, p=policy.p, level=relaxation.label())
    try:
        hmin, sol, warnings = _min_entropy_detail(
            pb, w, pv, (mc.key_x, mc.key_y), relaxation, tol)
    except npa.SolverFailureError as exc:
        return RatePoint(**common, p_v=pv, h_min=None, h_ec=hec, rate=None,
                         solver_status="numerical-failure", solver_gap=None,
                         warnings=(str(exc),))
    return RatePoint(**common, p_v=pv, h_min=hmin, h_ec=hec,
                     rate=pv * (hmin - hec),
                     solver_status=sol.status, solver_gap=sol.gap,
                     warnings=tuple(warnings))


def chsh_and_qber(pb: BinaryBehavior, key_x: int = 1, key_y: int = 3,
                  ) -> tuple[float, float]:
    """CHSH value of the test settings and the key-setting error rate."""
    qber = pb.prob(key_x, key_y, 0, 1) + pb.prob(key_x, key_y, 1, 0)
    return pb.chsh(), qber


def baseline_chsh_rate(sp: StateParams, mc: MeasurementConfig,
                       det: DetectorParams) -> float:
    """Reference one-way rate from CHSH violation alone (no post-selection).

    r = 1 - h2(Q) - h2((1 + sqrt((S/2)^2 - 1)) / 2); without a violation
    there is no key, reported as the distinguished NOKEY value rather than
    an error so scans stay rectangular.
    """
    pb = binarize(behavior(sp, mc, det))
    s, qber = chsh_and_qber(pb, mc.key_x, mc.key_y)
    if s <= 2.0:
        return NOKEY
    secrecy = 1.0 - binary_entropy((1.0 + np.sqrt((s / 2) ** 2 - 1.0)) / 2.0)
    return secrecy - binary_entropy(qber)
