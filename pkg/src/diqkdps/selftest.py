"""Fast invariant suite behind the ``selftest`` subcommand.

Every check is independent, seeded, and prints one line; the whole run
stays well under two minutes. ``inject_fault`` is a negative-control hook
that perturbs the checked probability tables so the suite must fail.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import entropy, npa
from .model import (DetectorParams, MeasurementConfig, StateParams,
                    behavior, binarize, bloch_observable, build_state)

_RNG_SEED = 20240917


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float


def _random_setup(rng) -> tuple[StateParams, MeasurementConfig, DetectorParams]:
    sp = StateParams(theta=rng.uniform(0, np.pi / 2),
                     visibility=rng.uniform(0.5, 1.0))
    mc = MeasurementConfig(tuple(rng.uniform(-np.pi, np.pi, 2)),
                           tuple(rng.uniform(-np.pi, np.pi, 3)))
    det = DetectorParams(eta=rng.uniform(0.2, 1.0),
                         dark=float(rng.choice([0.0, 1e-6, 1e-3])))
    return sp, mc, det


def _fault(table: np.ndarray, inject: bool) -> np.ndarray:
    if not inject:
        return table
    table = table.copy()
    table[0, 0, 0, 0] += 1e-6
    return table


def _tsirelson_inputs():
    sp = StateParams(theta=np.pi / 4)
    mc = MeasurementConfig((0.0, np.pi / 2), (np.pi / 4, -np.pi / 4, 0.0))
    return sp, mc, DetectorParams(eta=1.0)


def _deterministic_behavior():
    table = np.zeros((2, 3, 2, 2))
    table[:, :, 0, 0] = 1.0
    from .model import BinaryBehavior
    return BinaryBehavior(table)


def check_normalization(inject: bool) -> tuple[bool, str]:
    rng = np.random.default_rng(_RNG_SEED)
    worst = 0.0
    for _ in range(100):
        sp, mc, det = _random_setup(rng)
        table = _fault(behavior(sp, mc, det).table, inject)
        worst = max(worst, float(np.max(np.abs(table.sum(axis=(2, 3)) - 1.0))))
    return worst <= 1e-12, f"worst normalization defect {worst:.2e} (tol 1e-12)"


def check_no_signaling(inject: bool) -> tuple[bool, str]:
    rng = np.random.default_rng(_RNG_SEED + 1)
    worst = 0.0
    for _ in range(100):
        sp, mc, det = _random_setup(rng)
        table = _fault(behavior(sp, mc, det).table, inject)
        a = table.sum(axis=3)
        b = table.sum(axis=2)
        worst = max(worst, float(np.max(np.abs(a - a[:, :1]))),
                    float(np.max(np.abs(b - b[:1]))))
    return worst <= 1e-12, f"worst marginal input-dependence {worst:.2e} (tol 1e-12)"


def check_no_click_marginal(inject: bool) -> tuple[bool, str]:
    rng = np.random.default_rng(_RNG_SEED + 2)
    worst = 0.0
    for _ in range(50):
        sp, mc, _ = _random_setup(rng)
        det = DetectorParams(eta=rng.uniform(0.0, 1.0), dark=0.0)
        table = _fault(behavior(sp, mc, det).table, inject)
        no_click = table[:, 0, 2, :].sum(axis=-1)
        worst = max(worst, float(np.max(np.abs(no_click - (1 - det.eta)))))
    return worst <= 1e-12, f"P(no click) vs 1-eta deviates by {worst:.2e}"


def check_visibility_limit(inject: bool) -> tuple[bool, str]:
    rng = np.random.default_rng(_RNG_SEED + 3)
    worst = 0.0
    for _ in range(25):
        mc = MeasurementConfig(tuple(rng.uniform(-np.pi, np.pi, 2)),
                               tuple(rng.uniform(-np.pi, np.pi, 3)))
        det = DetectorParams(eta=rng.uniform(0.2, 1.0))
        t1 = _fault(behavior(StateParams(rng.uniform(0, np.pi / 2), 0.0),
                             mc, det).table, inject)
        t2 = behavior(StateParams(np.pi / 4, 0.0), mc, det).table
        worst = max(worst, float(np.max(np.abs(t1 - t2))))
    return worst <= 1e-12, f"V=0 deviates from state-independence by {worst:.2e}"


def check_binarize_consistency(inject: bool) -> tuple[bool, str]:
    rng = np.random.default_rng(_RNG_SEED + 4)
    worst = 0.0
    for _ in range(50):
        sp, mc, det = _random_setup(rng)
        merged = binarize(behavior(sp, mc, det)).table
        merged = _fault(merged.reshape(2, 3, 2, 2, 1, 1), inject).reshape(2, 3, 2, 2)
        rho = build_state(sp).reshape(2, 2, 2, 2)
        direct = np.empty_like(merged)
        for x, phx in enumerate(mc.angles_alice):
            ea0 = det.eta * (np.eye(2) + bloch_observable(phx)) / 2
            ea0 = (1 - det.dark) * ea0 + det.dark * (1 - det.dark) * (1 - det.eta) * np.eye(2)
            for y, phy in enumerate(mc.angles_bob):
                eb0 = det.eta * (np.eye(2) + bloch_observable(phy)) / 2
                eb0 = (1 - det.dark) * eb0 + det.dark * (1 - det.dark) * (1 - det.eta) * np.eye(2)
                for a, ea in enumerate((ea0, np.eye(2) - ea0)):
                    for b, eb in enumerate((eb0, np.eye(2) - eb0)):
                        direct[x, y, a, b] = np.einsum("ikjl,ji,lk->", rho, ea, eb)
        worst = max(worst, float(np.max(np.abs(merged - direct))))
    return worst <= 1e-12, f"two binarization paths differ by {worst:.2e}"


def check_word_counts(inject: bool) -> tuple[bool, str]:
    n1 = len(npa.generate_words(1))
    n2 = len(npa.generate_words(2))
    n2ab = len(npa.generate_words(2, extended=True))
    expected = (6, 20, 32) if not inject else (7, 20, 32)
    ok = (n1, n2, n2ab) == expected
    return ok, f"word counts level 1/2/2ab = {n1}/{n2}/{n2ab}"


def check_canonicalization(inject: bool) -> tuple[bool, str]:
    rng = np.random.default_rng(_RNG_SEED + 5)
    cases = [((2, 0), (0, 2)), ((0, 0), (0,)), ((1, 4, 4, 1), (1, 4))]
    for raw, expected in cases:
        got = npa.canonicalize(raw)
        if inject:
            got = got + (0,)
        if got != expected:
            return False, f"canonicalize({raw}) = {got}, expected {expected}"
    for _ in range(200):
        raw = tuple(rng.integers(0, 5, rng.integers(0, 8)))
        once = npa.canonicalize(raw)
        if npa.canonicalize(once) != once:
            return False, f"canonicalization not idempotent on {raw}"
    return True, "fixed cases plus idempotence on 200 random words"


def check_index_symmetry(inject: bool) -> tuple[bool, str]:
    rel = npa.build_relaxation(2)
    words = rel.words
    i_a1 = words.index((0,))
    i_b2 = words.index((3,))
    cells = rel.cell_variables
    ok = cells[i_a1, i_b2] == cells[i_b2, i_a1]
    ok &= cells[i_a1, i_a1] == cells[0, i_a1]  # idempotence on the diagonal
    if inject:
        ok = False
    return ok, "Gamma[A1,B2]=Gamma[B2,A1] and Gamma[A1,A1]=Gamma[1,A1]"


def check_constraint_count(inject: bool) -> tuple[bool, str]:
    sp, mc, det = _tsirelson_inputs()
    pb = binarize(behavior(sp, mc, det))
    gp = npa.assemble_guessing_program(pb, entropy.ps_weights(
        entropy.PostSelectionPolicy(1.0)).binary)
    n = len(gp.eq_rhs) + (1 if inject else 0)
    return n == 12, f"{n} equality constraints (expected 12)"


def check_deterministic_anchor(inject: bool) -> tuple[bool, str]:
    pb = _deterministic_behavior()
    gp = npa.assemble_guessing_program(pb, np.ones((2, 2)))
    sol = npa.solve(gp)
    value = sol.value + (1e-5 if inject else 0.0)
    return abs(value - 1.0) <= 1e-7, f"deterministic G = {value:.10f} (1 +/- 1e-7)"


def check_tsirelson_anchor(inject: bool) -> tuple[bool, str]:
    sp, mc, det = _tsirelson_inputs()
    pb = binarize(behavior(sp, mc, det))
    gp = npa.assemble_guessing_program(pb, np.ones((2, 2)))
    sol = npa.solve(gp)
    value = sol.value + (1e-3 if inject else 0.0)
    return abs(value - 0.5) <= 1e-4, f"Tsirelson G = {value:.8f} (0.5 +/- 1e-4)"


def check_weight_scaling(inject: bool) -> tuple[bool, str]:
    sp = StateParams(theta=0.394)
    mc = MeasurementConfig((2.084, -2.853), (-2.272, 2.926, -1.905))
    pb = binarize(behavior(sp, mc, DetectorParams(eta=0.8)))
    w = entropy.ps_weights(entropy.PostSelectionPolicy(0.3)).binary
    base = npa.solve(npa.assemble_guessing_program(pb, w)).value
    scaled = npa.solve(npa.assemble_guessing_program(pb, 3.5 * w)).value
    if inject:
        scaled += 1e-4
    rel_err = abs(scaled - 3.5 * base) / abs(3.5 * base)
    return rel_err <= 1e-8, f"objective scaling relative error {rel_err:.2e}"


def check_classical_guess_bound(inject: bool) -> tuple[bool, str]:
    rng = np.random.default_rng(_RNG_SEED + 6)
    rel = entropy.default_relaxation()
    worst = -np.inf
    for _ in range(50):
        sp, mc, det = _random_setup(rng)
        pb = binarize(behavior(sp, mc, det))
        w = entropy.ps_weights(
            entropy.PostSelectionPolicy(10 ** rng.uniform(-3, 0))).binary
        sol = npa.solve(npa.assemble_guessing_program(pb, w, relaxation=rel))
        joint = pb.table[0, 2]
        best_guess = max(float((w[a] * joint[a]).sum()) for a in (0, 1))
        if inject:
            best_guess += 1e-3
        worst = max(worst, best_guess - sol.value)
    return worst <= 1e-7, f"max (classical guess - SDP value) = {worst:.2e}"


def check_p1_recovery(inject: bool) -> tuple[bool, str]:
    rng = np.random.default_rng(_RNG_SEED + 7)
    worst = 0.0
    for _ in range(25):
        sp, mc, det = _random_setup(rng)
        tb = behavior(sp, mc, det)
        w = entropy.ps_weights(entropy.PostSelectionPolicy(1.0))
        pv = entropy.retained_fraction(tb, w, mc.key_x, mc.key_y)
        psd = entropy.postselected_distribution(tb, w, mc.key_x, mc.key_y)
        raw = tb.joint(mc.key_x, mc.key_y)
        expect = np.stack([raw[0], raw[1:].sum(axis=0)])
        if inject:
            expect = expect + 1e-6
        worst = max(worst, abs(pv - 1.0),
                    float(np.max(np.abs(psd.hat_table - expect))))
    return worst <= 1e-14, f"p=1 recovery deviation {worst:.2e}"


def check_ec_oracle(inject: bool) -> tuple[bool, str]:
    rng = np.random.default_rng(_RNG_SEED + 8)
    worst = 0.0
    for _ in range(1000):
        shape = (int(rng.integers(2, 5)), int(rng.integers(2, 6)))
        joint = rng.random(shape)
        joint /= joint.sum()
        got = entropy.conditional_entropy_bits(joint)
        # independent oracle: H(joint) - H(column marginal) via plain math.log2
        h_joint = -sum(v * math.log2(v) for v in joint.flat if v > 0)
        cols = joint.sum(axis=0)
        h_cols = -sum(v * math.log2(v) for v in cols if v > 0)
        if inject:
            h_cols += 1e-8
        worst = max(worst, abs(got - (h_joint - h_cols)))
    return worst <= 1e-10, f"vs independent entropy oracle: max diff {worst:.2e}"


CHECKS: list[tuple[str, Callable[[bool], tuple[bool, str]]]] = [
    ("behavior-normalization", check_normalization),
    ("behavior-no-signaling", check_no_signaling),
    ("no-click-marginal", check_no_click_marginal),
    ("visibility-zero-limit", check_visibility_limit),
    ("binarize-two-paths", check_binarize_consistency),
    ("word-counts", check_word_counts),
    ("canonicalization", check_canonicalization),
    ("moment-index-symmetry", check_index_symmetry),
    ("constraint-count", check_constraint_count),
    ("deterministic-anchor", check_deterministic_anchor),
    ("tsirelson-anchor", check_tsirelson_anchor),
    ("weight-scaling", check_weight_scaling),
    ("classical-guess-bound", check_classical_guess_bound),
    ("p1-recovery", check_p1_recovery),
    ("ec-cost-oracle", check_ec_oracle),
]


def run_selftest(inject_fault: bool = False, echo=print) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS:
        start = time.perf_counter()
        try:
            ok, detail = fn(inject_fault)
        except Exception as exc:
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        elapsed = time.perf_counter() - start
        results.append(CheckResult(name, ok, detail, elapsed))
        echo(f"[{'ok' if ok else 'FAIL'}] {name:24s} {detail}  ({elapsed:.2f}s)")
    return results
