"""Example/test split selection under per-class box minimums.

Two phases per trial, then a seeded search over trials:

1. coverage: maximize the number of (class, example-image) incidences, i.e.
   the sum over example images of how many classes each one shows;
2. balance: keeping coverage at least at the phase-1 value, minimize the
   surplus of example boxes above the per-class minimum (weighted by each
   class's share of all boxes), then maximize the test boxes weighted by the
   inverse class share.

Every trial is scored with CPC x CBE and the best trial wins. The default
solver is a randomized greedy construction followed by best-improvement
local search over label swaps; :func:`exhaustive_split` enumerates every
split and is meant for small instances and for checking the heuristic.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

UNUSED, EXAMPLE, TEST = 0, 1, 2
PARTITION_NAMES = {UNUSED: "unused", EXAMPLE: "example", TEST: "test"}

PHASE2_INTERPRETATION = (
    "lexicographic: min sum_c share_c*max(0, example_c - m_exp), "
    "then max sum_c test_c/share_c"
)


class InfeasibleSplitError(ValueError):
    """No split satisfies the hard constraints.

    ``violations`` lists ``(class_label, partition, required, achievable)``.
    """

    def __init__(self, message: str, violations: Sequence[tuple[str, str, int, int]] = ()):
        super().__init__(message)
        self.violations = list(violations)


@dataclass(frozen=True)
class SplitConstraints:
    m_exp: int = 6
    m_test: int = 10
    n_exp: int = 10
    n_test: int = 53

    def __post_init__(self) -> None:
        for name in ("m_exp", "m_test", "n_exp", "n_test"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class SeedSearchConfig:
    trials: int = 1000
    base_seed: int = 0
    # Max (first, second) combinations scored per 2-swap round. The round is
    # exhaustive when (#single swaps)^2 fits, otherwise it starts only from the
    # best-ranked single swaps.
    two_swap_budget: int = 2500

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


@dataclass(frozen=True, eq=False)
class SplitInstance:
    image_ids: tuple[str, ...]
    classes: tuple[str, ...]
    counts: np.ndarray  # (n_images, n_classes) box counts
    source: str = ""

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts, dtype=np.int64)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "image_ids", tuple(str(i) for i in self.image_ids))
        object.__setattr__(self, "classes", tuple(self.classes))
        if counts.shape != (len(self.image_ids), len(self.classes)):
            raise ValueError(
                f"counts shape {counts.shape} does not match "
                f"{len(self.image_ids)} images x {len(self.classes)} classes"
            )
        if len(set(self.image_ids)) != len(self.image_ids):
            raise ValueError("duplicate image ids")
        if len(self.classes) == 0:
            raise ValueError("instance has no classes")
        if (counts < 0).any():
            raise ValueError("box counts must be non-negative")
        missing = [c for c, t in zip(self.classes, counts.sum(axis=0)) if t == 0]
        if missing:
            raise ValueError(f"classes without any box: {missing}")

    @classmethod
    def from_records(
        cls, records: Iterable[tuple[str, Mapping[str, int]]], classes: Optional[Sequence[str]] = None,
        source: str = "",
    ) -> "SplitInstance":
        records = list(records)
        if classes is None:
            classes = sorted({c for _, cnt in records for c, v in cnt.items() if v > 0})
        counts = np.array([[cnt.get(c, 0) for c in classes] for _, cnt in records], dtype=np.int64)
        counts = counts.reshape(len(records), len(classes))
        return cls(tuple(i for i, _ in records), tuple(classes), counts, source)

    @property
    def n_images(self) -> int:
        return len(self.image_ids)

    @property
    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def presence(self) -> np.ndarray:
        """Number of classes present in each image."""
        return (self.counts > 0).sum(axis=1)

    @property
    def class_share(self) -> np.ndarray:
        t = self.totals
        return t / t.sum()


@dataclass(frozen=True, eq=False)
class DecisionVector:
    x_exp: np.ndarray
    x_test: np.ndarray

    def __post_init__(self) -> None:
        e = np.asarray(self.x_exp, dtype=bool)
        t = np.asarray(self.x_test, dtype=bool)
        object.__setattr__(self, "x_exp", e)
        object.__setattr__(self, "x_test", t)
        if e.shape != t.shape or e.ndim != 1:
            raise ValueError("x_exp and x_test must be 1-D of equal length")
        if (e & t).any():
            raise ValueError("an image cannot be in both example and test")

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "DecisionVector":
        labels = np.asarray(labels)
        return cls(labels == EXAMPLE, labels == TEST)

    @property
    def labels(self) -> np.ndarray:
        out = np.full(self.x_exp.shape, UNUSED, dtype=np.int8)
        out[self.x_exp] = EXAMPLE
        out[self.x_test] = TEST
        return out

    @property
    def example_idx(self) -> np.ndarray:
        return np.flatnonzero(self.x_exp)

    @property
    def test_idx(self) -> np.ndarray:
        return np.flatnonzero(self.x_test)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DecisionVector):
            return NotImplemented
        return np.array_equal(self.x_exp, other.x_exp) and np.array_equal(self.x_test, other.x_test)

    def __hash__(self) -> int:
        return hash((self.x_exp.tobytes(), self.x_test.tobytes()))


@dataclass(frozen=True)
class SplitScore:
    cpc: float
    cbe: float
    sss: float

    @classmethod
    def of(cls, cpc_value: float, cbe_value: float) -> "SplitScore":
        return cls(cpc_value, cbe_value, sss(cpc_value, cbe_value))


# ---------------------------------------------------------------- scoring


def cpc(instance: SplitInstance, dv: DecisionVector) -> float:
    """Mean over classes of the fraction of example images containing the class."""
    n_exp = int(dv.x_exp.sum())
    if n_exp == 0:
        raise ValueError("class-presence coverage needs at least one example image")
    present = (instance.counts[dv.x_exp] > 0).sum(axis=0)
    return math.fsum(present / n_exp) / len(instance.classes)


def cbe(instance: SplitInstance, dv: DecisionVector) -> float:
    """Shannon entropy of example box counts per class, normalised by log(#classes)."""
    counts = instance.counts[dv.x_exp].sum(axis=0)
    total = counts.sum()
    if total == 0:
        raise ValueError("class-balance entropy needs at least one example box")
    if len(counts) == 1:
        return 1.0
    p = counts[counts > 0] / total
    h = -math.fsum(p * np.log(p))
    return min(1.0, max(0.0, h / math.log(len(counts))))


def sss(cpc_value: float, cbe_value: float) -> float:
    for name, v in (("cpc", cpc_value), ("cbe", cbe_value)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
    return cpc_value * cbe_value


def score(instance: SplitInstance, dv: DecisionVector) -> SplitScore:
    return SplitScore.of(cpc(instance, dv), cbe(instance, dv))


# ---------------------------------------------------------------- objectives


def coverage(instance: SplitInstance, dv: DecisionVector) -> int:
    """Count of distinct (class, example image) incidence pairs."""
    return int(instance.presence[dv.x_exp].sum())


def _reward_weights(totals: np.ndarray) -> tuple[np.ndarray, int]:
    """Integer weights proportional to 1/share: ``w_c = L / total_c``.

    Returns the weights and ``L``. The test reward of a split is then
    ``N / L * sum_c w_c * test_c`` where N is the total box count.
    """
    L = reduce(math.lcm, (int(t) for t in totals), 1)
    # each class contributes at most L to the reward sum
    if L * len(totals) >= 2**62:
        raise OverflowError("class totals too large for exact reward weights")
    return np.array([L // int(t) for t in totals], dtype=np.int64), L


@dataclass(frozen=True)
class Objectives:
    """Exact objective values of a split.

    ``surplus_num`` is the surplus objective times the total box count and
    ``reward_num`` the reward objective times ``L / N``; both are integers so
    comparisons are exact. ``surplus`` and ``reward`` are the real values.
    """

    deficit: int
    coverage: int
    surplus_num: int
    reward_num: int
    surplus: float
    reward: float

    @property
    def feasible(self) -> bool:
        return self.deficit == 0


def objectives(instance: SplitInstance, constraints: SplitConstraints, dv: DecisionVector) -> Objectives:
    c = instance.counts
    ex = c[dv.x_exp].sum(axis=0)
    te = c[dv.x_test].sum(axis=0)
    totals = instance.totals
    n_total = int(totals.sum())
    deficit = int(np.maximum(0, constraints.m_exp - ex).sum() + np.maximum(0, constraints.m_test - te).sum())
    over = np.maximum(0, ex - constraints.m_exp)
    w, L = _reward_weights(totals)
    return Objectives(
        deficit=deficit,
        coverage=coverage(instance, dv),
        surplus_num=int((totals * over).sum()),
        reward_num=int((w * te).sum()),
        surplus=math.fsum(totals * over) / n_total,
        reward=n_total * math.fsum(te / totals),
    )


def constraint_violations(
    instance: SplitInstance, constraints: SplitConstraints, dv: DecisionVector
) -> list[tuple[str, str, int, int]]:
    ex = instance.counts[dv.x_exp].sum(axis=0)
    te = instance.counts[dv.x_test].sum(axis=0)
    out = []
    for k, cls in enumerate(instance.classes):
        if ex[k] < constraints.m_exp:
            out.append((cls, "example", constraints.m_exp, int(ex[k])))
        if te[k] < constraints.m_test:
            out.append((cls, "test", constraints.m_test, int(te[k])))
    return out


def check_split(instance: SplitInstance, constraints: SplitConstraints, dv: DecisionVector) -> None:
    """Raise InfeasibleSplitError unless every hard constraint holds."""
    if (dv.x_exp & dv.x_test).any():
        raise InfeasibleSplitError("example and test overlap")
    if dv.x_exp.sum() != constraints.n_exp or dv.x_test.sum() != constraints.n_test:
        raise InfeasibleSplitError(
            f"split sizes {int(dv.x_exp.sum())}/{int(dv.x_test.sum())} != "
            f"{constraints.n_exp}/{constraints.n_test}"
        )
    v = constraint_violations(instance, constraints, dv)
    if v:
        raise InfeasibleSplitError(_describe(v), v)


def _describe(violations: Sequence[tuple[str, str, int, int]]) -> str:
    return "; ".join(
        f"class {c!r} needs >= {req} boxes in {part}, best achievable {got}"
        for c, part, req, got in violations
    )


def precheck(instance: SplitInstance, constraints: SplitConstraints) -> None:
    """Cheap necessary conditions; raise with the offending classes named."""
    if constraints.n_exp + constraints.n_test > instance.n_images:
        raise InfeasibleSplitError(
            f"n_exp + n_test = {constraints.n_exp + constraints.n_test} exceeds "
            f"{instance.n_images} images"
        )
    violations = []
    for k, cls in enumerate(instance.classes):
        col = np.sort(instance.counts[:, k])[::-1]
        total = int(col.sum())
        if total < constraints.m_exp + constraints.m_test:
            violations.append((cls, "example+test", constraints.m_exp + constraints.m_test, total))
            continue
        best_exp = int(col[: constraints.n_exp].sum())
        if best_exp < constraints.m_exp:
            violations.append((cls, "example", constraints.m_exp, best_exp))
        best_test = int(col[: constraints.n_test].sum())
        if best_test < constraints.m_test:
            violations.append((cls, "test", constraints.m_test, best_test))
    if violations:
        raise InfeasibleSplitError(_describe(violations), violations)


# ---------------------------------------------------------------- local search


_MASKED = -(2**60)


class _Search:
    """Label-swap local search over a fixed image order.

    A move swaps the partition labels of two images with different labels,
    which keeps both split sizes fixed. Move effects are additive, so every
    candidate is scored at once from the current class tallies.
    """

    def __init__(self, instance: SplitInstance, constraints: SplitConstraints, order: np.ndarray,
                 two_swap_budget: int):
        self.order = order
        self.cnt = instance.counts[order]
        self.pres = instance.presence[order]
        self.totals = instance.totals
        self.w, _ = _reward_weights(self.totals)
        self.m_exp = constraints.m_exp
        self.m_test = constraints.m_test
        self.budget = two_swap_budget
        I, J = np.triu_indices(len(order), k=1)
        self.I, self.J = I, J
        self.D = self.cnt[I] - self.cnt[J]
        self.dP = self.pres[I] - self.pres[J]
        self.dW = self.D @ self.w

    def _keys(self, E, T, cov, reward, phase: int, floor: int) -> list:
        """Lexicographic keys, all to be maximized."""
        deficit = np.maximum(self.m_exp - E, 0).sum(-1) + np.maximum(self.m_test - T, 0).sum(-1)
        if phase == 1:
            return [-deficit, cov]
        short = np.maximum(floor - cov, 0)
        surplus = np.maximum(E - self.m_exp, 0) @ self.totals
        return [-deficit, -short, -surplus, reward]

    @staticmethod
    def _argbest(keys: list) -> int:
        idx = np.arange(len(keys[0]))
        for k in keys:
            kk = k[idx]
            idx = idx[kk == kk.max()]
            if len(idx) == 1:
                break
        return int(idx[0])

    def run(self, labels: np.ndarray, phase: int, floor: int = 0) -> np.ndarray:
        labels = labels.copy()
        I, J = self.I, self.J
        while True:
            e = labels == EXAMPLE
            t = labels == TEST
            E = self.cnt[e].sum(0)
            T = self.cnt[t].sum(0)
            cov = int(self.pres[e].sum())
            rew = int(T @ self.w)
            cur = tuple(int(k) for k in self._keys(E, T, cov, rew, phase, floor))

            live = np.flatnonzero(labels[I] != labels[J])
            if len(live) == 0:
                return labels
            Il, Jl = I[live], J[live]
            ei = e.astype(np.int64)
            ti = t.astype(np.int64)
            a = ei[Jl] - ei[Il]
            b = ti[Jl] - ti[Il]
            Dl = self.D[live]
            dE = a[:, None] * Dl
            dT = b[:, None] * Dl
            dC = a * self.dP[live]
            dR = b * self.dW[live]
            keys = self._keys(E + dE, T + dT, cov + dC, rew + dR, phase, floor)
            best = self._argbest(keys)
            if tuple(int(k[best]) for k in keys) > cur:
                labels[Il[best]], labels[Jl[best]] = labels[Jl[best]], labels[Il[best]]
                continue

            # 2-swaps: two label swaps on four distinct images; effects add up.
            width = max(1, self.budget // len(live))
            if width < len(live):
                rank = np.lexsort([np.arange(len(live))] + [-k for k in reversed(keys)])
                first = rank[:width]
            else:
                first = np.arange(len(live))
            fi, fj = Il[first][:, None], Jl[first][:, None]
            disjoint = (fi != Il) & (fi != Jl) & (fj != Il) & (fj != Jl)
            keys2 = self._keys(
                E + dE[first][:, None, :] + dE[None, :, :],
                T + dT[first][:, None, :] + dT[None, :, :],
                cov + dC[first][:, None] + dC[None, :],
                rew + dR[first][:, None] + dR[None, :],
                phase, floor,
            )
            keys2[0] = np.where(disjoint, keys2[0], _MASKED)
            flat = [k.ravel() for k in keys2]
            r2 = self._argbest(flat)
            if not disjoint.ravel()[r2] or tuple(int(k[r2]) for k in flat) <= cur:
                return labels
            p, q = divmod(r2, len(live))
            for m in (first[p], q):
                labels[Il[m]], labels[Jl[m]] = labels[Jl[m]], labels[Il[m]]


def _construct(
    instance: SplitInstance, constraints: SplitConstraints, order: np.ndarray,
    rng: np.random.Generator, rcl: int = 3,
) -> np.ndarray:
    """Feasibility-first randomized greedy start.

    Each pick is drawn uniformly from the ``rcl`` best free images.
    """
    cnt = instance.counts[order]
    pres = instance.presence[order]
    boxes = cnt.sum(1)
    w, _ = _reward_weights(instance.totals)
    rarity = cnt @ w
    n = len(order)
    labels = np.full(n, UNUSED, dtype=np.int8)
    rare_first = np.argsort(instance.totals, kind="stable")
    size = {EXAMPLE: 0, TEST: 0}

    def pick(score: np.ndarray, tiebreak: np.ndarray) -> int:
        idx = np.flatnonzero(labels == UNUSED)
        sc = score[idx]
        r = np.lexsort((tiebreak[idx], -sc))[:rcl]
        # never trade a useful image for a useless one
        if sc[r[0]] > 0:
            r = r[sc[r] > 0]
        return int(idx[r[rng.integers(len(r))]])

    def put(i: int, part: int) -> None:
        labels[i] = part
        size[part] += 1

    for part, minimum, limit in (
        (EXAMPLE, constraints.m_exp, constraints.n_exp),
        (TEST, constraints.m_test, constraints.n_test),
    ):
        have = np.zeros(cnt.shape[1], dtype=np.int64)
        for k in rare_first:
            while size[part] < limit and have[k] < minimum:
                gain = np.minimum(cnt[:, k], minimum - have[k])
                i = pick(gain, boxes)
                if gain[i] == 0:
                    break
                put(i, part)
                have += cnt[i]
    while size[EXAMPLE] < constraints.n_exp:
        put(pick(pres, boxes), EXAMPLE)
    zeros = np.zeros(n, dtype=np.int64)
    while size[TEST] < constraints.n_test:
        put(pick(rarity, zeros), TEST)
    return labels


def _trial_rng(n: int, seed: int) -> tuple[np.ndarray, np.random.Generator]:
    rng = np.random.default_rng(seed)
    return rng.permutation(n), rng


def _unpermute(labels: np.ndarray, order: np.ndarray) -> np.ndarray:
    out = np.empty_like(labels)
    out[order] = labels
    return out


def phase1_coverage(
    instance: SplitInstance, constraints: SplitConstraints, seed: int = 0,
    two_swap_budget: int = SeedSearchConfig.two_swap_budget,
) -> DecisionVector:
    """Feasible split with (locally) maximal class-image coverage."""
    precheck(instance, constraints)
    order, rng = _trial_rng(instance.n_images, seed)
    search = _Search(instance, constraints, order, two_swap_budget)
    labels = search.run(_construct(instance, constraints, order, rng), phase=1)
    dv = DecisionVector.from_labels(_unpermute(labels, order))
    check_split(instance, constraints, dv)
    return dv


def phase2_balance(
    instance: SplitInstance, constraints: SplitConstraints, phase1_value: int, seed: int = 0,
    start: Optional[DecisionVector] = None,
    two_swap_budget: int = SeedSearchConfig.two_swap_budget,
) -> DecisionVector:
    """Refine for balance while keeping coverage >= ``phase1_value``.

    Starts from ``start`` when given (normally the phase-1 result of the same
    trial), otherwise from a fresh greedy construction.
    """
    precheck(instance, constraints)
    order, rng = _trial_rng(instance.n_images, seed)
    search = _Search(instance, constraints, order, two_swap_budget)
    if start is None:
        labels = search.run(_construct(instance, constraints, order, rng), phase=1)
    else:
        labels = start.labels[order]
    labels = search.run(labels, phase=2, floor=phase1_value)
    dv = DecisionVector.from_labels(_unpermute(labels, order))
    check_split(instance, constraints, dv)
    if coverage(instance, dv) < phase1_value:
        raise InfeasibleSplitError(f"coverage {phase1_value} not attainable from this start")
    return dv


# ---------------------------------------------------------------- search driver


@dataclass
class TrialResult:
    trial: int
    seed: int
    decision: Optional[DecisionVector]
    objectives: Optional[Objectives]
    score: Optional[SplitScore]
    error: str = ""


@dataclass
class SplitAssignment:
    instance: SplitInstance
    constraints: SplitConstraints
    decision: DecisionVector
    score: SplitScore
    objectives: Objectives
    seed: int
    trial: int
    trials: int

    @property
    def partition(self) -> dict[str, str]:
        labels = self.decision.labels
        return {iid: PARTITION_NAMES[int(l)] for iid, l in zip(self.instance.image_ids, labels)}

    def ids(self, part: str) -> list[str]:
        return [i for i, p in self.partition.items() if p == part]

    @property
    def example_ids(self) -> list[str]:
        return self.ids("example")

    @property
    def test_ids(self) -> list[str]:
        return self.ids("test")

    @property
    def unused_ids(self) -> list[str]:
        return self.ids("unused")

    def tallies(self, part: str) -> dict[str, int]:
        mask = self.decision.x_exp if part == "example" else self.decision.x_test
        return dict(zip(self.instance.classes, (int(x) for x in self.instance.counts[mask].sum(0))))


def solve_trial(
    instance: SplitInstance, constraints: SplitConstraints, seed: int,
    two_swap_budget: int = SeedSearchConfig.two_swap_budget,
) -> tuple[DecisionVector, Objectives]:
    """Phase 1 then phase 2 from its result; same answer as calling both in turn."""
    order, rng = _trial_rng(instance.n_images, seed)
    search = _Search(instance, constraints, order, two_swap_budget)
    labels = search.run(_construct(instance, constraints, order, rng), phase=1)
    p1 = DecisionVector.from_labels(_unpermute(labels, order))
    check_split(instance, constraints, p1)
    labels = search.run(labels, phase=2, floor=coverage(instance, p1))
    p2 = DecisionVector.from_labels(_unpermute(labels, order))
    check_split(instance, constraints, p2)
    return p2, objectives(instance, constraints, p2)


def trial_seed(base_seed: int, trial: int) -> int:
    """Seed of one trial; independent of the trial count so searches nest."""
    return int(np.random.SeedSequence([base_seed, trial]).generate_state(1)[0])


def run_trials(
    instance: SplitInstance, constraints: SplitConstraints, search: SeedSearchConfig = SeedSearchConfig()
) -> list[TrialResult]:
    precheck(instance, constraints)
    out = []
    for t in range(search.trials):
        seed = trial_seed(search.base_seed, t)
        try:
            dv, obj = solve_trial(instance, constraints, seed, search.two_swap_budget)
        except InfeasibleSplitError as exc:
            out.append(TrialResult(t, seed, None, None, None, str(exc)))
            continue
        out.append(TrialResult(t, seed, dv, obj, score(instance, dv)))
    return out


def solve(
    instance: SplitInstance, constraints: SplitConstraints = SplitConstraints(),
    search: SeedSearchConfig = SeedSearchConfig(),
) -> SplitAssignment:
    """Run both phases for each seeded trial and keep the highest-SSS split.

    SSS ties go to the lowest trial index.
    """
    results = run_trials(instance, constraints, search)
    ok = [r for r in results if r.decision is not None]
    if not ok:
        raise InfeasibleSplitError(
            f"no feasible split found in {search.trials} trials: {results[0].error}"
        )
    best = ok[0]
    for r in ok[1:]:
        if r.score.sss > best.score.sss:
            best = r
    log.info("split %s: best SSS %.4f at trial %d of %d", instance.source or "-",
             best.score.sss, best.trial, search.trials)
    return SplitAssignment(
        instance=instance, constraints=constraints, decision=best.decision, score=best.score,
        objectives=best.objectives, seed=best.seed, trial=best.trial, trials=search.trials,
    )


# ---------------------------------------------------------------- exact enumeration


@dataclass
class ExhaustiveResult:
    phase1_value: int
    surplus_num: int
    reward_num: int
    best: DecisionVector
    n_feasible: int


def _combo_masks(n: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    combos = np.array(list(itertools.combinations(range(n), k)), dtype=np.int64).reshape(-1, k)
    ind = np.zeros((len(combos), n), dtype=np.int64)
    np.put_along_axis(ind, combos, 1, axis=1)
    bits = (ind * (1 << np.arange(n, dtype=np.int64))).sum(1)
    return ind, bits


def exhaustive_split(
    instance: SplitInstance, constraints: SplitConstraints, max_images: int = 16
) -> ExhaustiveResult:
    """Exact two-phase lexicographic optimum by enumerating every split.

    Ties resolve to the lexicographically smallest (example bits, test bits).
    """
    n = instance.n_images
    if n > max_images:
        raise ValueError(f"exhaustive enumeration limited to {max_images} images, got {n}")
    if constraints.n_exp + constraints.n_test > n:
        raise InfeasibleSplitError("split sizes exceed image count")
    c = instance.counts
    totals = instance.totals
    w, _ = _reward_weights(totals)

    ex_ind, ex_bits = _combo_masks(n, constraints.n_exp)
    te_ind, te_bits = _combo_masks(n, constraints.n_test)
    ex_cnt = ex_ind @ c
    te_cnt = te_ind @ c
    ex_ok = (ex_cnt >= constraints.m_exp).all(1)
    te_ok = (te_cnt >= constraints.m_test).all(1)
    ex_ind, ex_bits, ex_cnt = ex_ind[ex_ok], ex_bits[ex_ok], ex_cnt[ex_ok]
    te_ind, te_bits, te_cnt = te_ind[te_ok], te_bits[te_ok], te_cnt[te_ok]
    disjoint = (ex_bits[:, None] & te_bits[None, :]) == 0
    ei, ti = np.nonzero(disjoint)
    if len(ei) == 0:
        raise InfeasibleSplitError("no split satisfies the hard constraints")

    cov = (ex_ind @ (c > 0).sum(1))[ei]
    surplus = (np.maximum(0, ex_cnt - constraints.m_exp) * totals).sum(1)[ei]
    reward = (te_cnt * w).sum(1)[ti]
    v1 = int(cov.max())
    keep = cov >= v1
    s_min = int(surplus[keep].min())
    keep &= surplus == s_min
    r_max = int(reward[keep].max())
    keep &= reward == r_max
    cand = np.flatnonzero(keep)
    pick = cand[np.lexsort((te_bits[ti[cand]], ex_bits[ei[cand]]))[0]]
    best = DecisionVector(ex_ind[ei[pick]].astype(bool), te_ind[ti[pick]].astype(bool))
    return ExhaustiveResult(v1, s_min, r_max, best, int(len(ei)))


# ---------------------------------------------------------------- split files


def write_split(assignment: SplitAssignment, path) -> None:
    """Write a JSON-lines split file: one header line, then one line per image."""
    inst = assignment.instance
    obj = assignment.objectives
    header = {
        "kind": "split_header",
        "source": inst.source,
        "classes": list(inst.classes),
        "constraints": {
            "m_exp": assignment.constraints.m_exp, "m_test": assignment.constraints.m_test,
            "n_exp": assignment.constraints.n_exp, "n_test": assignment.constraints.n_test,
        },
        "score": {"cpc": assignment.score.cpc, "cbe": assignment.score.cbe, "sss": assignment.score.sss},
        "seed": assignment.seed,
        "trial": assignment.trial,
        "trials": assignment.trials,
        "objectives": {
            "coverage": obj.coverage, "surplus": obj.surplus, "reward": obj.reward,
        },
        "phase2_interpretation": PHASE2_INTERPRETATION,
    }
    lines = [json.dumps(header, sort_keys=True)]
    part = assignment.partition
    for iid, row in zip(inst.image_ids, inst.counts):
        lines.append(json.dumps({
            "image_id": iid,
            "split": part[iid],
            "counts": {c: int(v) for c, v in zip(inst.classes, row)},
        }, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def read_split(path) -> SplitAssignment:
    lines = [json.loads(l) for l in Path(path).read_text().splitlines() if l.strip()]
    if not lines or lines[0].get("kind") != "split_header":
        raise ValueError(f"{path}: missing split header")
    header, records = lines[0], lines[1:]
    classes = tuple(header["classes"])
    inst = SplitInstance.from_records(
        ((r["image_id"], r["counts"]) for r in records), classes, header.get("source", "")
    )
    parts = np.array([r["split"] for r in records])
    dv = DecisionVector(parts == "example", parts == "test")
    cons = SplitConstraints(**header["constraints"])
    s = header["score"]
    return SplitAssignment(
        instance=inst, constraints=cons, decision=dv,
        score=SplitScore(s["cpc"], s["cbe"], s["sss"]),
        objectives=objectives(inst, cons, dv), seed=header["seed"], trial=header["trial"],
        trials=header["trials"],
    )
