"""Decision procedures for disturbance bisimulation between two finite
metric systems.

A relation R relates states whose distance is at most eps (condition a).
Conditions (b)/(c) are the alternating game: for every input on one side
there is a matching input on the other -- chosen uniformly, before the
disturbances are revealed -- such that for all disturbance pairs whose
vector mismatch is componentwise at most eps_tilde, every successor on
the challenger side is matched by a related successor on the responder
side.  Set-valued successor matching is the standard alternating
extension; it degenerates to the pointwise condition for singleton
successor sets.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import FormatError, ModelError
from .gridabs import FiniteAbstraction, _g17

_TOL = 1e-12


def vector_metric(w1, w2, blocks) -> tuple:
    """Per-block infinity norms between two disturbance vectors."""
    out = []
    pos = 0
    for size in blocks:
        a = w1[pos : pos + size]
        b = w2[pos : pos + size]
        out.append(max((abs(x - y) for x, y in zip(a, b)), default=0.0))
        pos += size
    return tuple(out)


@dataclass(frozen=True)
class RelationTable:
    """A candidate disturbance bisimulation with its parameters."""

    pairs: frozenset  # of (index in S1, index in S2)
    eps: float
    eps_tilde: tuple

    def __contains__(self, pair):
        return pair in self.pairs

    def __len__(self):
        return len(self.pairs)

    def transpose(self):
        return RelationTable(
            pairs=frozenset((j, i) for (i, j) in self.pairs),
            eps=self.eps,
            eps_tilde=self.eps_tilde,
        )


@dataclass(frozen=True)
class CheckResult:
    valid: bool
    pair: tuple | None = None
    clause: str | None = None  # 'a', 'b' or 'c'


def _state_dist(s1, s2, i, j):
    a, b = s1.states[i], s2.states[j]
    return max((abs(x - y) for x, y in zip(a, b)), default=0.0)


def _admissible_dist_pairs(s1, s2, eps_tilde):
    if s1.dist_blocks != s2.dist_blocks:
        raise ModelError(
            f"incompatible disturbance structure: {s1.dist_blocks} vs {s2.dist_blocks}"
        )
    blocks = s1.dist_blocks
    if len(eps_tilde) == 0:
        eps_tilde = (0.0,) * len(blocks)
    if len(eps_tilde) != len(blocks):
        raise ModelError(
            f"eps_tilde has {len(eps_tilde)} components, disturbances have {len(blocks)} blocks"
        )
    pairs = []
    for d1, w1 in enumerate(s1.dists):
        for d2, w2 in enumerate(s2.dists):
            e = vector_metric(w1, w2, blocks)
            if all(v <= b + _TOL for v, b in zip(e, eps_tilde)):
                pairs.append((d1, d2))
    return pairs


def _responds(challenger, responder, x_c, x_r, pairs, adm, flip):
    """Challenger side (b)-style check for one related pair.

    flip=False: challenger is S1 (pairs indexed (s, t)); flip=True:
    challenger is S2 and membership is tested transposed.
    """
    for u_c in range(len(challenger.inputs)):
        matched = False
        for u_r in range(len(responder.inputs)):
            ok = True
            for dc, dr in adm:
                succ_c = challenger.transitions[(x_c, u_c, dc)][0]
                succ_r = responder.transitions[(x_r, u_r, dr)][0]
                for s in succ_c:
                    if not any(
                        ((s, t) if not flip else (t, s)) in pairs for t in succ_r
                    ):
                        ok = False
                        break
                if not ok:
                    break
            if ok:
                matched = True
                break
        if not matched:
            return False
    return True


def check_relation(s1: FiniteAbstraction, s2: FiniteAbstraction, rel: RelationTable) -> CheckResult:
    """Verify that rel is a disturbance bisimulation between s1 and s2."""
    if s1.dim != s2.dim:
        raise ModelError(f"state dimensions differ: {s1.dim} vs {s2.dim}")
    adm = _admissible_dist_pairs(s1, s2, rel.eps_tilde)
    adm_flip = [(d2, d1) for (d1, d2) in adm]
    for (i, j) in sorted(rel.pairs):
        if _state_dist(s1, s2, i, j) > rel.eps + _TOL:
            return CheckResult(valid=False, pair=(i, j), clause="a")
        if not _responds(s1, s2, i, j, rel.pairs, adm, flip=False):
            return CheckResult(valid=False, pair=(i, j), clause="b")
        if not _responds(s2, s1, j, i, rel.pairs, adm_flip, flip=True):
            return CheckResult(valid=False, pair=(i, j), clause="c")
    return CheckResult(valid=True)


def largest_bisimulation(
    s1: FiniteAbstraction, s2: FiniteAbstraction, eps: float, eps_tilde=()
) -> RelationTable:
    """Greatest disturbance bisimulation within the eps-close pairs.

    Starts from every pair satisfying condition (a) and deletes violating
    pairs until none remain; monotone on a finite lattice, so this
    terminates, and the result contains every disturbance bisimulation
    made of (a)-admissible pairs.
    """
    if s1.dim != s2.dim:
        raise ModelError(f"state dimensions differ: {s1.dim} vs {s2.dim}")
    eps_tilde = tuple(eps_tilde)
    adm = _admissible_dist_pairs(s1, s2, eps_tilde)
    adm_flip = [(d2, d1) for (d1, d2) in adm]
    current = {
        (i, j)
        for i in range(len(s1.states))
        for j in range(len(s2.states))
        if _state_dist(s1, s2, i, j) <= eps + _TOL
    }
    while True:
        bad = [
            pair
            for pair in current
            if not _responds(s1, s2, pair[0], pair[1], current, adm, flip=False)
            or not _responds(s2, s1, pair[1], pair[0], current, adm_flip, flip=True)
        ]
        if not bad:
            break
        current.difference_update(bad)
    return RelationTable(pairs=frozenset(current), eps=eps, eps_tilde=eps_tilde)


# ---------------------------------------------------------------------------
# relation file format

REL_HEADER = "STOCHREL v1"


def save_relation(rel: RelationTable, s1: FiniteAbstraction, s2: FiniteAbstraction, path):
    lines = [
        REL_HEADER,
        f"left {s1.content_hash()}",
        f"right {s2.content_hash()}",
        f"eps {_g17(rel.eps)}",
        "epstilde" + "".join(" " + _g17(v) for v in rel.eps_tilde),
        f"pairs {len(rel.pairs)}",
    ]
    lines.extend(f"{i} {j}" for (i, j) in sorted(rel.pairs))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_relation(path):
    """Read a relation file; returns (table, left_hash, right_hash)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != REL_HEADER:
        raise FormatError(f"bad header (expected {REL_HEADER!r})")
    try:
        left = lines[1].split()[1]
        right = lines[2].split()[1]
        eps = float(lines[3].split()[1])
        eps_tilde = tuple(float(v) for v in lines[4].split()[1:])
        count = int(lines[5].split()[1])
        pairs = frozenset(
            (int(a), int(b)) for a, b in (line.split() for line in lines[6 : 6 + count])
        )
        if len(pairs) != count:
            raise FormatError("pair count mismatch")
    except (IndexError, ValueError) as exc:
        raise FormatError(f"malformed relation file: {exc}") from None
    return RelationTable(pairs=pairs, eps=eps, eps_tilde=eps_tilde), left, right
