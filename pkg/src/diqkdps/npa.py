"""Moment-matrix relaxation of Eve's guessing probability.

The guessing probability of Alice's post-selected key bit is an optimization
over quantum realizations compatible with the observed binary behavior. It
relaxes to a semidefinite program over two moment-matrix blocks, one per
value of Eve's guess: block e carries the subnormalized correlations
P'_e(a,b|x,y), their sum over e is pinned to the observed behavior, and each
block must embed into a positive semidefinite matrix of operator-word
moments.

Words are built from five generators, the outcome-0 projectors of the two
Alice inputs and three Bob inputs. Generators of different parties commute
and each is idempotent, which is the entire rewriting system used here.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from cvxopt import matrix as cvx_matrix
from cvxopt import solvers as cvx_solvers
from cvxopt import spmatrix as cvx_spmatrix

from .model import BinaryBehavior

# generator symbols: 0, 1 -> Alice inputs 1, 2; 2, 3, 4 -> Bob inputs 1, 2, 3
ALICE_SYMBOLS = (0, 1)
BOB_SYMBOLS = (2, 3, 4)
_SYMBOL_NAMES = ("A1", "A2", "B1", "B2", "B3")

Word = tuple[int, ...]

MAX_LEVEL = 4
NO_SIGNALING_RTOL = 1e-9
DEFAULT_TOL = 1e-8
NEAR_OPTIMAL_FACTOR = 10.0


class SolverError(RuntimeError):
    """Base class for SDP backend failures."""


class InfeasibleBehaviorError(SolverError):
    """The equality constraints admit no quantum moment matrix."""


class SolverFailureError(SolverError):
    """The backend terminated without a usable certificate."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def canonicalize(word: Iterable[int]) -> Word:
    """Reduce a raw symbol sequence to canonical form.

    Alice symbols are moved in front of Bob symbols (parties commute) with
    the order inside each party preserved, then adjacent duplicates are
    collapsed (projectors are idempotent).
    """
    word = tuple(word)
    for s in word:
        if not 0 <= s <= 4:
            raise ValueError(f"unknown generator symbol {s}")
    merged = [s for s in word if s in ALICE_SYMBOLS]
    merged += [s for s in word if s not in ALICE_SYMBOLS]
    out: list[int] = []
    for s in merged:
        if not out or out[-1] != s:
            out.append(s)
    return tuple(out)


def _party_sequences(symbols: Sequence[int], length: int) -> list[Word]:
    """All sequences over ``symbols`` of given length with no adjacent repeats."""
    if length == 0:
        return [()]
    seqs: list[Word] = [(s,) for s in symbols]
    for _ in range(length - 1):
        seqs = [seq + (s,) for seq in seqs for s in symbols if s != seq[-1]]
    return seqs


def generate_words(level: int, extended: bool = False,
                   max_level: int = MAX_LEVEL) -> list[Word]:
    """All distinct canonical words of length <= level, graded lexicographic.

    ``extended`` additionally includes the length-3 words with one Alice and
    two Bob generators (the intermediate relaxation between levels 2 and 3).
    ``max_level`` guards against accidentally huge relaxations; raise it
    explicitly if a deeper hierarchy is really wanted.
    """
    if level < 1:
        raise ValueError(f"level must be >= 1, got {level}")
    if level > max_level:
        raise ValueError(
            f"level {level} exceeds the tractability guard {max_level}; "
            "pass a larger max_level to override")
    words: list[Word] = []
    for n in range(level + 1):
        graded: set[Word] = set()
        for i in range(n + 1):
            for wa in _party_sequences(ALICE_SYMBOLS, i):
                for wb in _party_sequences(BOB_SYMBOLS, n - i):
                    graded.add(wa + wb)
        words.extend(sorted(graded))
    if extended and level == 2:
        extra: set[Word] = set()
        for a in ALICE_SYMBOLS:
            for wb in _party_sequences(BOB_SYMBOLS, 2):
                extra.add((a,) + wb)
        words.extend(sorted(extra))
    return words


def _variable_key(word: Word) -> Word:
    """Moments of a word and its reversal coincide for real relaxations."""
    return min(word, canonicalize(reversed(word)))


@dataclass(eq=False)
class MomentRelaxation:
    """Operator-word basis and moment-variable indexing of one PSD block."""

    level: int
    extended: bool
    words: tuple[Word, ...]
    entry_index: dict[Word, int]
    dim: int
    n_moments: int
    cell_variables: np.ndarray = field(repr=False)  # (dim, dim) variable ids
    _psd_structure: list | None = field(default=None, repr=False)

    def index_of(self, word: Iterable[int]) -> int:
        """Variable index of the moment for (the canonical form of) a word."""
        return self.entry_index[_variable_key(canonicalize(word))]

    def word_table(self) -> str:
        """Diagnostic listing, one canonical word per line."""
        return "\n".join(word_str(w) for w in self.words)

    def label(self) -> str:
        return f"{self.level}ab" if self.extended else str(self.level)


def word_str(word: Word) -> str:
    return " ".join(_SYMBOL_NAMES[s] for s in word) if word else "1"


def build_relaxation(level: int, extended: bool = False,
                     max_level: int = MAX_LEVEL) -> MomentRelaxation:
    """Index the moment matrix Gamma[u,v] = <u^dagger v> for one block.

    Cells whose words share a canonical form (up to reversal) share one
    scalar variable; that equality structure is the whole relaxation.
    """
    words = generate_words(level, extended, max_level)
    dim = len(words)
    entry_index: dict[Word, int] = {}
    cells = np.empty((dim, dim), dtype=np.intp)
    for i, u in enumerate(words):
        ru = tuple(reversed(u))
        for j, v in enumerate(words):
            key = _variable_key(canonicalize(ru + v))
            if key not in entry_index:
                entry_index[key] = len(entry_index)
            cells[i, j] = entry_index[key]
    return MomentRelaxation(level=level, extended=extended, words=tuple(words),
                            entry_index=entry_index, dim=dim,
                            n_moments=len(entry_index), cell_variables=cells)


def parse_level(spec: str | int) -> tuple[int, bool]:
    """Parse a relaxation level flag: 1..4 or '2ab'. Returns (level, extended)."""
    text = str(spec).strip().lower()
    if text == "2ab":
        return 2, True
    if text in {"1", "2", "3", "4"}:
        return int(text), False
    raise ValueError(f"relaxation level must be one of 1..4 or '2ab', got {spec!r}")


_IDENTITY: Word = ()


@dataclass(eq=False)
class GuessingProgram:
    """Two-block SDP maximizing Eve's weighted guessing objective.

    Variables are the stacked moment vectors of blocks e=0 and e=1; the
    twelve equalities pin the joint <A_x B_y>, the marginals <A_x>, <B_y>
    and the block masses t_e to the observed behavior.
    """

    relaxation: MomentRelaxation
    weights: np.ndarray  # (2, 2) binary retain weights
    key_x: int
    key_y: int
    objective: np.ndarray = field(repr=False)  # (2 * n_moments,)
    eq_rhs: np.ndarray = field(repr=False)  # (12,)

    @property
    def n_variables(self) -> int:
        return 2 * self.relaxation.n_moments

    def block_slice(self, e: int) -> slice:
        n = self.relaxation.n_moments
        return slice(e * n, (e + 1) * n)


def _equality_rows(rel: MomentRelaxation) -> np.ndarray:
    """(12, 2n) equality constraint matrix; structure is behavior-independent."""
    n = rel.n_moments
    rows = np.zeros((12, 2 * n))
    r = 0
    for x in ALICE_SYMBOLS:
        for y in BOB_SYMBOLS:
            k = rel.index_of((x, y))
            rows[r, k] = rows[r, n + k] = 1.0
            r += 1
    for x in ALICE_SYMBOLS:
        k = rel.index_of((x,))
        rows[r, k] = rows[r, n + k] = 1.0
        r += 1
    for y in BOB_SYMBOLS:
        k = rel.index_of((y,))
        rows[r, k] = rows[r, n + k] = 1.0
        r += 1
    k = rel.index_of(_IDENTITY)
    rows[r, k] = rows[r, n + k] = 1.0
    return rows


def assemble_guessing_program(pb: BinaryBehavior, weights: np.ndarray,
                              key_pair: tuple[int, int] = (1, 3),
                              relaxation: MomentRelaxation | None = None,
                              ) -> GuessingProgram:
    """Build the guessing SDP for an observed behavior and retain weights.

    ``weights`` is the 2x2 table w[a][b] applied to Eve's correct guesses
    e=a of the key-setting outcome pair; behaviors that violate no-signaling
    beyond 1e-9 are rejected because the equality constraints would encode
    an inconsistent marginal.
    """
    if relaxation is None:
        relaxation = build_relaxation(2)
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (2, 2) or np.any(weights < 0):
        raise ValueError("weights must be a nonnegative 2x2 table")
    defect = pb.no_signaling_defect()
    if defect > NO_SIGNALING_RTOL:
        raise ValueError(
            f"behavior violates no-signaling by {defect:.3e} (> {NO_SIGNALING_RTOL:.0e}); "
            "equality constraints would be inconsistent")
    kx, ky = key_pair
    if kx not in (1, 2) or ky not in (1, 2, 3):
        raise ValueError(f"key pair {key_pair} outside inputs (1..2, 1..3)")

    rel = relaxation
    n = rel.n_moments
    a_word: Word = (kx - 1,)
    b_word: Word = (ky + 1,)
    ab = rel.index_of(a_word + b_word)
    a = rel.index_of(a_word)
    b = rel.index_of(b_word)
    one = rel.index_of(_IDENTITY)

    # objective = w00 P'_0(00) + w01 P'_0(01) + w10 P'_1(10) + w11 P'_1(11)
    # with P'_e expanded into moments of block e
    w00, w01, w10, w11 = weights[0, 0], weights[0, 1], weights[1, 0], weights[1, 1]
    c = np.zeros(2 * n)
    c[ab] += w00 - w01
    c[a] += w01
    c[n + b] += w10 - w11
    c[n + ab] += w11 - w10
    c[n + one] += w11
    c[n + a] -= w11

    rhs = np.empty(12)
    r = 0
    for x in (1, 2):
        for y in (1, 2, 3):
            rhs[r] = pb.prob(x, y, 0, 0)
            r += 1
    for x in (1, 2):
        rhs[r] = pb.alice_zero(x)
        r += 1
    for y in (1, 2, 3):
        rhs[r] = pb.bob_zero(y)
        r += 1
    rhs[r] = 1.0

    return GuessingProgram(relaxation=rel, weights=weights, key_x=kx, key_y=ky,
                           objective=c, eq_rhs=rhs)


@dataclass
class SdpSolution:
    """Certified outcome of one guessing-program solve."""

    value: float
    status: str  # optimal | near-optimal | infeasible | numerical-failure
    gap: float
    block_moments: np.ndarray = field(repr=False)  # (2, n_moments)
    relaxation: MomentRelaxation = field(repr=False, default=None)
    warning: str | None = None
    iterations: int = 0

    def moment_matrix(self, e: int) -> np.ndarray:
        """Reconstruct the Gamma block of Eve's guess e from the moments."""
        return self.block_moments[e][self.relaxation.cell_variables]


def _psd_structure(rel: MomentRelaxation):
    """cvxopt G matrices encoding Gamma_e = sum_k x_k E_k >= 0, cached."""
    if rel._psd_structure is None:
        dim, n = rel.dim, rel.n_moments
        flat = rel.cell_variables.ravel()
        positions = np.arange(dim * dim)
        blocks = []
        for e in (0, 1):
            blocks.append(cvx_spmatrix(
                [-1.0] * (dim * dim), positions.tolist(),
                (flat + e * n).tolist(), (dim * dim, 2 * n)))
        rel._psd_structure = [blocks, _equality_rows(rel)]
    return rel._psd_structure


def solve(gp: GuessingProgram, tol: float = DEFAULT_TOL,
          maxiters: int = 60) -> SdpSolution:
    """Maximize the guessing objective over the two PSD moment blocks.

    The backend must honor PSD-cone blocks with dense linear equalities and
    return a primal-dual pair; its duality gap certifies the optimum. Status
    is 'optimal' when the gap meets ``tol``, 'near-optimal' when it only
    reaches a usable accuracy (with a warning beyond 10x tol). Infeasibility
    signals an inconsistent input behavior and raises.

    Extremal behaviors have no strictly feasible moment completion, so the
    central path grazes the cone boundary: progress stalls near iteration 40
    and pushing much further risks an arithmetic abort inside the backend.
    The default cap reaches gap ~1e-8 on such inputs while generic inputs
    converge by ~25 iterations; after an abort, a shorter second attempt
    stops before the breakdown and is classified by its achieved gap.
    """
    rel = gp.relaxation
    gs, eq = _psd_structure(rel)
    dim = rel.dim

    def attempt(cap: int):
        options = {
            "show_progress": False,
            "abstol": tol,
            "reltol": tol,
            "feastol": tol,
            "maxiters": cap,
        }
        return cvx_solvers.sdp(
            cvx_matrix(-gp.objective),
            Gs=gs, hs=[cvx_matrix(np.zeros((dim, dim))) for _ in range(2)],
            A=cvx_matrix(eq), b=cvx_matrix(gp.eq_rhs),
            options=options)

    try:
        try:
            sol = attempt(maxiters)
        except (ValueError, ArithmeticError):
            sol = attempt(max(10, maxiters // 2))
    except (ValueError, ArithmeticError) as exc:
        raise SolverFailureError(f"SDP backend aborted: {exc}",
                                 {"exception": repr(exc)}) from exc

    status = sol["status"]
    if status in ("primal infeasible", "dual infeasible"):
        raise InfeasibleBehaviorError(
            "no quantum moment matrix matches the input behavior "
            f"(backend status: {status})")

    if sol["x"] is None:
        raise SolverFailureError("SDP backend returned no iterate",
                                 {"status": status})

    x = np.array(sol["x"]).ravel()
    value = float(gp.objective @ x)
    gap = float(sol["gap"]) if sol["gap"] is not None else np.inf
    moments = x.reshape(2, rel.n_moments)

    if status == "optimal" or gap <= tol:
        return SdpSolution(value=value, status="optimal", gap=gap,
                           block_moments=moments, relaxation=rel,
                           iterations=sol["iterations"])
    if np.isfinite(gap) and gap <= 1e-4:
        warning = None
        if gap > NEAR_OPTIMAL_FACTOR * tol:
            warning = (f"duality gap {gap:.2e} exceeds {NEAR_OPTIMAL_FACTOR:.0f}x "
                       f"the requested tolerance {tol:.0e}")
        return SdpSolution(value=value, status="near-optimal", gap=gap,
                           block_moments=moments, relaxation=rel,
                           warning=warning, iterations=sol["iterations"])
    raise SolverFailureError(
        f"SDP backend stalled with gap {gap:.2e}",
        {"status": status, "gap": gap, "iterations": sol["iterations"]})
