"""Closed algebra of scalar gain functions with exact inverses.

Every bound formula in this package is assembled from strictly increasing
functions of a nonnegative real that vanish at zero (class-K envelopes).
The algebra is deliberately small -- power laws, finite sums, and
compositions -- because the quantization-parameter formulas need inverses,
and this family has them: power laws and compositions invert in closed
form, sums invert by monotone bisection.

Symbolic simplification is intentionally absent; values are combined
structurally and evaluated on demand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import InversionError

#: Absolute tolerance on the *argument* returned by bisection inverses.
BISECT_TOL = 1e-12


class ComparisonFunction:
    """A strictly increasing map from nonnegative reals to nonnegative reals.

    Subclasses implement ``_eval``.  Instances are immutable and safe to
    share between workers.
    """

    def __call__(self, r: float) -> float:
        r = float(r)
        if r < 0.0 or math.isnan(r):
            raise ValueError(f"gain functions take nonnegative arguments, got {r}")
        return self._eval(r)

    def _eval(self, r: float) -> float:
        raise NotImplementedError

    def invert(self, y: float) -> float:
        """Return x with self(x) = y.

        Closed form for power laws and compositions; monotone bisection
        for sums.  Raises InversionError when y is outside the range.
        """
        y = float(y)
        if y < 0.0 or math.isnan(y):
            raise InversionError(f"cannot invert at negative value {y}")
        if y == 0.0:
            return 0.0
        return self._invert(y)

    def _invert(self, y: float) -> float:
        raise NotImplementedError

    def __add__(self, other: "ComparisonFunction") -> "ComparisonFunction":
        if isinstance(other, Zero):
            return self
        return Sum((self, other))


@dataclass(frozen=True)
class Zero(ComparisonFunction):
    """The identically zero map (used for gains that vanish, e.g. no noise)."""

    def _eval(self, r):
        return 0.0

    def _invert(self, y):
        raise InversionError("the zero function has no inverse above 0")

    def __add__(self, other):
        return other


@dataclass(frozen=True)
class PowerLaw(ComparisonFunction):
    """r -> coef * r**exponent with coef > 0, exponent > 0."""

    coef: float
    exponent: float

    def __post_init__(self):
        if not self.coef > 0.0:
            raise ValueError(f"PowerLaw coefficient must be positive, got {self.coef}")
        if not self.exponent > 0.0:
            raise ValueError(f"PowerLaw exponent must be positive, got {self.exponent}")

    def _eval(self, r):
        return self.coef * r ** self.exponent

    def _invert(self, y):
        return (y / self.coef) ** (1.0 / self.exponent)


@dataclass(frozen=True)
class Sum(ComparisonFunction):
    """Pointwise sum of two or more gain functions."""

    terms: tuple

    def __post_init__(self):
        if len(self.terms) < 1:
            raise ValueError("Sum needs at least one term")

    def _eval(self, r):
        return sum(t._eval(r) for t in self.terms)

    def _invert(self, y):
        # Monotone bisection: guaranteed convergence, unlike Newton steps
        # on nearly-flat stretches.  Converges to 1e-12 relative on the
        # argument (absolute for arguments above one).
        hi = 1.0
        for _ in range(200):
            if self._eval(hi) >= y:
                break
            hi *= 2.0
        else:
            raise InversionError(f"value {y} not reached (function bounded?)")
        lo = 0.0
        for _ in range(500):
            if hi - lo <= BISECT_TOL * min(1.0, hi):
                break
            mid = 0.5 * (lo + hi)
            if self._eval(mid) < y:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)


@dataclass(frozen=True)
class Compose(ComparisonFunction):
    """r -> outer(inner(r))."""

    outer: ComparisonFunction
    inner: ComparisonFunction

    def _eval(self, r):
        return self.outer._eval(self.inner._eval(r))

    def _invert(self, y):
        return self.inner.invert(self.outer.invert(y))


def scale(f: ComparisonFunction, a: float) -> ComparisonFunction:
    """Return a * f as an element of the algebra (a > 0; a == 0 gives Zero)."""
    if a == 0.0 or isinstance(f, Zero):
        return Zero()
    return Compose(PowerLaw(a, 1.0), f)


def exact_inverse(f: ComparisonFunction) -> ComparisonFunction:
    """The inverse *function* of f, for variants that invert in closed form.

    PowerLaw(c, e) inverts to PowerLaw(c**(-1/e), 1/e); compositions invert
    by swapping.  Sums and Zero have no closed-form inverse and raise.
    """
    if isinstance(f, PowerLaw):
        return PowerLaw(f.coef ** (-1.0 / f.exponent), 1.0 / f.exponent)
    if isinstance(f, Compose):
        return Compose(exact_inverse(f.inner), exact_inverse(f.outer))
    raise InversionError(f"no closed-form inverse for {type(f).__name__}")


def is_linear(f: ComparisonFunction) -> bool:
    """True when f is r -> c*r for some constant c (exact structural test)."""
    if isinstance(f, PowerLaw):
        return f.exponent == 1.0
    if isinstance(f, Compose):
        return is_linear(f.outer) and is_linear(f.inner)
    if isinstance(f, Sum):
        return all(is_linear(t) for t in f.terms)
    return isinstance(f, Zero)


@dataclass(frozen=True)
class KLFunction:
    """Two-argument envelope base(r) * exp(-decay * s).

    Increasing and unbounded in r for fixed s, strictly decreasing to zero
    in s for fixed r.
    """

    base: ComparisonFunction
    decay: float

    def __post_init__(self):
        if not self.decay > 0.0:
            raise ValueError(f"decay rate must be positive, got {self.decay}")

    def __call__(self, r: float, s: float) -> float:
        if s < 0.0:
            raise ValueError(f"time argument must be nonnegative, got {s}")
        return self.base(r) * math.exp(-self.decay * s)
