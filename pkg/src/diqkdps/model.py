"""Exact outcome statistics of the photonic Bell setup.

A source distributes the two-qubit state cos(theta)|00> + sin(theta)|11>
(optionally mixed with white noise) to two parties. Each party measures a
planar projective observable cos(phi)*sigma_z + sin(phi)*sigma_x behind a
lossy detector pair, so every round yields one of four events per party:

    0  only the first detector clicks
    1  only the second detector clicks
    2  no detector clicks
    3  both detectors click (dark counts only)

All functions here are pure and return exact probability tables, not samples.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ALICE_SETTINGS = 2
BOB_SETTINGS = 3
N_OUTCOMES = 4

_I2 = np.eye(2)
_SZ = np.array([[1.0, 0.0], [0.0, -1.0]])
_SX = np.array([[0.0, 1.0], [1.0, 0.0]])

NORMALIZATION_ATOL = 1e-12
NO_SIGNALING_ATOL = 1e-12


@dataclass(frozen=True)
class StateParams:
    """Entanglement angle and source quality.

    ``mean_photon_pairs`` is reserved for a multi-pair source model that is
    not implemented; any nonzero value is rejected.
    """

    theta: float
    visibility: float = 1.0
    mean_photon_pairs: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.theta <= np.pi / 2:
            raise ValueError(f"theta must lie in [0, pi/2], got {self.theta}")
        if not 0.0 <= self.visibility <= 1.0:
            raise ValueError(
                f"visibility must lie in [0, 1], got {self.visibility}")
        if self.mean_photon_pairs != 0.0:
            raise ValueError(
                "mean_photon_pairs is reserved and must stay 0: no multi-pair "
                "source model is implemented")


@dataclass(frozen=True)
class MeasurementConfig:
    """Measurement angles (radians) and the key-generation input pair."""

    angles_alice: tuple[float, float]
    angles_bob: tuple[float, float, float]
    key_x: int = 1
    key_y: int = 3

    def __post_init__(self):
        object.__setattr__(self, "angles_alice", tuple(float(a) for a in self.angles_alice))
        object.__setattr__(self, "angles_bob", tuple(float(a) for a in self.angles_bob))
        if len(self.angles_alice) != ALICE_SETTINGS:
            raise ValueError(
                f"angles_alice must hold exactly {ALICE_SETTINGS} angles, "
                f"got {len(self.angles_alice)}")
        if len(self.angles_bob) != BOB_SETTINGS:
            raise ValueError(
                f"angles_bob must hold exactly {BOB_SETTINGS} angles, "
                f"got {len(self.angles_bob)}")
        for name, angles in (("angles_alice", self.angles_alice),
                             ("angles_bob", self.angles_bob)):
            for a in angles:
                if not -np.pi <= a <= np.pi:
                    raise ValueError(f"{name} entry {a} outside [-pi, pi]")
        if self.key_x not in (1, 2):
            raise ValueError(f"key_x must be 1 or 2, got {self.key_x}")
        if self.key_y not in (1, 2, 3):
            raise ValueError(f"key_y must be 1, 2 or 3, got {self.key_y}")


@dataclass(frozen=True)
class DetectorParams:
    """Detection efficiency and per-detector dark-click probability."""

    eta: float
    dark: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if not 0.0 <= self.dark < 1.0:
            raise ValueError(f"dark must lie in [0, 1), got {self.dark}")


class TernaryBehavior:
    """Joint table P(a,b|x,y) over the four detector events per party.

    Stored as a read-only array of shape (2, 3, 4, 4) indexed by
    [x-1, y-1, a, b].
    """

    __slots__ = ("table",)

    def __init__(self, table: np.ndarray):
        table = np.asarray(table, dtype=float)
        if table.shape != (ALICE_SETTINGS, BOB_SETTINGS, N_OUTCOMES, N_OUTCOMES):
            raise ValueError(f"expected table shape (2, 3, 4, 4), got {table.shape}")
        table = table.copy()
        table.flags.writeable = False
        self.table = table

    def prob(self, x: int, y: int, a: int, b: int) -> float:
        return float(self.table[x - 1, y - 1, a, b])

    def alice_marginal(self, x: int, y: int) -> np.ndarray:
        """P(a|x) computed from the y-slice (y-independent by no-signaling)."""
        return self.table[x - 1, y - 1].sum(axis=1)

    def bob_marginal(self, y: int, x: int) -> np.ndarray:
        return self.table[x - 1, y - 1].sum(axis=0)

    def joint(self, x: int, y: int) -> np.ndarray:
        return self.table[x - 1, y - 1]

    def validate(self) -> None:
        """Raise if normalization or no-signaling is violated."""
        sums = self.table.sum(axis=(2, 3))
        if not np.allclose(sums, 1.0, rtol=0.0, atol=NORMALIZATION_ATOL):
            raise ValueError(f"slices not normalized: sums={sums}")
        a_marg = self.table.sum(axis=3)
        if np.max(np.abs(a_marg - a_marg[:, :1])) > NO_SIGNALING_ATOL:
            raise ValueError("Alice marginal depends on Bob's input")
        b_marg = self.table.sum(axis=2)
        if np.max(np.abs(b_marg - b_marg[:1])) > NO_SIGNALING_ATOL:
            raise ValueError("Bob marginal depends on Alice's input")


class BinaryBehavior:
    """Binarized view: outcomes 1, 2, 3 merged into symbol 1 on each side.

    Stored as a read-only array of shape (2, 3, 2, 2) indexed by
    [x-1, y-1, a, b].
    """

    __slots__ = ("table",)

    def __init__(self, table: np.ndarray):
        table = np.asarray(table, dtype=float)
        if table.shape != (ALICE_SETTINGS, BOB_SETTINGS, 2, 2):
            raise ValueError(f"expected table shape (2, 3, 2, 2), got {table.shape}")
        table = table.copy()
        table.flags.writeable = False
        self.table = table

    def prob(self, x: int, y: int, a: int, b: int) -> float:
        return float(self.table[x - 1, y - 1, a, b])

    def alice_zero(self, x: int) -> float:
        """P(a=0|x), taken from the y=1 slice."""
        return float(self.table[x - 1, 0, 0].sum())

    def bob_zero(self, y: int) -> float:
        return float(self.table[0, y - 1, :, 0].sum())

    def correlator(self, x: int, y: int) -> float:
        """<A_x B_y> with outcomes valued +1 (symbol 0) and -1 (symbol 1)."""
        t = self.table[x - 1, y - 1]
        return float(t[0, 0] + t[1, 1] - t[0, 1] - t[1, 0])

    def chsh(self) -> float:
        """CHSH value over inputs x,y in {1,2}: E11 + E12 + E21 - E22."""
        return (self.correlator(1, 1) + self.correlator(1, 2)
                + self.correlator(2, 1) - self.correlator(2, 2))

    def no_signaling_defect(self) -> float:
        """Largest input-dependence of either party's marginals."""
        a_marg = self.table.sum(axis=3)
        b_marg = self.table.sum(axis=2)
        return max(float(np.max(np.abs(a_marg - a_marg[:, :1]))),
                   float(np.max(np.abs(b_marg - b_marg[:1]))))


def build_state(sp: StateParams) -> np.ndarray:
    """4x4 density matrix V|psi(theta)><psi(theta)| + (1-V) I/4."""
    psi = np.array([np.cos(sp.theta), 0.0, 0.0, np.sin(sp.theta)])
    return sp.visibility * np.outer(psi, psi) + (1.0 - sp.visibility) * np.eye(4) / 4


def bloch_observable(phi: float) -> np.ndarray:
    """Planar observable cos(phi)*sigma_z + sin(phi)*sigma_x."""
    return np.cos(phi) * _SZ + np.sin(phi) * _SX


def outcome_effects(phi: float, det: DetectorParams) -> np.ndarray:
    """POVM elements for the four detector events, shape (4, 2, 2).

    A photon is projected into the detector arm (1 +/- Pi(phi))/2 and seen
    with probability eta; the undetected mass (1-eta) initially produces no
    click. Each silent detector then dark-clicks independently with
    probability ``dark``, promoting the click pattern (none -> first,
    none -> second, none -> both, single -> both).
    """
    arm0 = (_I2 + bloch_observable(phi)) / 2
    arm1 = _I2 - arm0
    click0 = det.eta * arm0
    click1 = det.eta * arm1
    none = (1.0 - det.eta) * _I2
    d = det.dark
    effects = np.empty((N_OUTCOMES, 2, 2))
    effects[0] = (1 - d) * click0 + d * (1 - d) * none
    effects[1] = (1 - d) * click1 + d * (1 - d) * none
    effects[2] = (1 - d) ** 2 * none
    effects[3] = d * click0 + d * click1 + d * d * none
    return effects


def behavior(sp: StateParams, mc: MeasurementConfig, det: DetectorParams) -> TernaryBehavior:
    """Joint distribution P(a,b|x,y) = Tr[rho (E_{a|x} x F_{b|y})]."""
    rho = build_state(sp).reshape(2, 2, 2, 2)  # row (i,k), column (j,l)
    ea = np.stack([outcome_effects(phi, det) for phi in mc.angles_alice])
    eb = np.stack([outcome_effects(phi, det) for phi in mc.angles_bob])
    # Tr[rho (E x F)] = sum_{ikjl} rho[i,k,j,l] E[j,i] F[l,k]
    table = np.einsum("ikjl,xaji,yblk->xyab", rho, ea, eb, optimize=True)
    return TernaryBehavior(table)


def binarize(tb: TernaryBehavior) -> BinaryBehavior:
    """Merge outcomes {1, 2, 3} into symbol 1 independently on each side."""
    t = tb.table
    out = np.empty((ALICE_SETTINGS, BOB_SETTINGS, 2, 2))
    out[:, :, 0, 0] = t[:, :, 0, 0]
    out[:, :, 0, 1] = t[:, :, 0, 1:].sum(axis=-1)
    out[:, :, 1, 0] = t[:, :, 1:, 0].sum(axis=-1)
    out[:, :, 1, 1] = t[:, :, 1:, 1:].sum(axis=(-2, -1))
    return BinaryBehavior(out)
