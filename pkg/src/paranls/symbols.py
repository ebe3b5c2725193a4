"""Symbols a(x, xi) on T^d x R^d.

A :class:`Symbol` is an immutable, hash-consed expression tree.  Leaves are
constants, the coordinate functions ``xi_i``, band-limited coefficient
fields ``c(x)`` and radial cut-offs of ``xi``; internal nodes are sums,
products, real powers, complex conjugation, the reflection
``a(x, xi) -> a(x, -xi)`` and ``xi``-derivatives.

Derivatives in ``x`` are taken symbolically (chain rule down to the
coefficient fields, which are differentiated spectrally, hence exactly).
Derivatives in ``xi`` are exact too: evaluation propagates truncated
multivariate Taylor expansions ("jets") in ``xi`` through the tree, so any
node can be evaluated together with its ``xi``-derivatives up to a
requested total degree.
"""
from __future__ import annotations

import itertools
import math
import warnings
import weakref
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

from .torus import Field, Grid, coeffs_from_samples, samples_from_coeffs

CHI_INNER = 5.0 / 4.0
CHI_OUTER = 8.0 / 5.0
DEFAULT_EPSILON = 1.0 / 8.0


class EllipticityError(ArithmeticError):
    """A radicand or denominator left its positivity domain."""


class SeminormCapWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# Taylor jets in xi
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _monomials(nv: int, K: int) -> tuple[tuple[int, ...], ...]:
    out = []
    for deg in range(K + 1):
        for combo in itertools.combinations_with_replacement(range(nv), deg):
            alpha = [0] * nv
            for i in combo:
                alpha[i] += 1
            out.append(tuple(alpha))
    return tuple(out)


@lru_cache(maxsize=None)
def _mono_index(nv: int, K: int) -> dict:
    return {a: i for i, a in enumerate(_monomials(nv, K))}


def _nmono(nv: int, K: int) -> int:
    return math.comb(nv + K, K)


@lru_cache(maxsize=None)
def _mul_table(nv: int, ka: int, kb: int, kr: int) -> tuple[tuple[int, int, int], ...]:
    idx = _mono_index(nv, kr)
    table = []
    for ia, a in enumerate(_monomials(nv, ka)):
        for ib, b in enumerate(_monomials(nv, kb)):
            if sum(a) + sum(b) > kr:
                continue
            table.append((ia, ib, idx[tuple(x + y for x, y in zip(a, b))]))
    return tuple(table)


@lru_cache(maxsize=None)
def _shift_table(nv: int, K: int, axis: int) -> tuple[np.ndarray, np.ndarray]:
    # d/dxi_axis maps coefficient of alpha+e_axis (degree K+1 basis) to alpha
    hi = _mono_index(nv, K + 1)
    src, fac = [], []
    for a in _monomials(nv, K):
        b = list(a)
        b[axis] += 1
        src.append(hi[tuple(b)])
        fac.append(b[axis])
    return np.array(src), np.array(fac, float)


@lru_cache(maxsize=None)
def _parity(nv: int, K: int) -> np.ndarray:
    return np.array([(-1.0) ** sum(a) for a in _monomials(nv, K)])


class Jet:
    """Truncated Taylor expansion: ``c[i]`` multiplies ``(dxi)^alpha_i``."""

    __slots__ = ("c", "k")

    def __init__(self, c: np.ndarray, k: int):
        self.c = c
        self.k = k

    def truncate(self, K: int, nv: int) -> "Jet":
        if self.k <= K:
            return self
        return Jet(self.c[: _nmono(nv, K)], K)


def _tail_shape(*arrays) -> tuple:
    return np.broadcast_shapes(*(a.shape[1:] for a in arrays))


def _jet_add(a: Jet, b: Jet, nv: int) -> Jet:
    if a.k == b.k:
        return Jet(a.c + b.c, a.k)
    if a.k < b.k:
        a, b = b, a
    out = np.zeros((a.c.shape[0],) + _tail_shape(a.c, b.c), complex)
    out += a.c
    out[: b.c.shape[0]] += b.c
    return Jet(out, a.k)


def _jet_mul(a: Jet, b: Jet, K: int, nv: int) -> Jet:
    if a.k == 0:
        return Jet(a.c[0] * b.c, b.k).truncate(K, nv)
    if b.k == 0:
        return Jet(b.c[0] * a.c, a.k).truncate(K, nv)
    kr = min(K, a.k + b.k)
    out = np.zeros((_nmono(nv, kr),) + _tail_shape(a.c, b.c), complex)
    for ia, ib, it in _mul_table(nv, a.k, b.k, kr):
        out[it] += a.c[ia] * b.c[ib]
    return Jet(out, kr)


def _jet_compose(g: Jet, K: int, nv: int, taylor: Callable[[np.ndarray, int], list]) -> Jet:
    """f(g) given the Taylor coefficients f^(n)(g0)/n! from ``taylor``."""
    kk = 0 if g.k == 0 else K
    coefs = taylor(g.c[0], kk)
    if kk == 0:
        return Jet(np.asarray(coefs[0])[None], 0)
    gt = g.c.copy()
    gt[0] = 0
    gt = Jet(gt, g.k)
    r = Jet(np.asarray(coefs[kk])[None], 0)
    for n in range(kk - 1, -1, -1):
        r = _jet_add(_jet_mul(r, gt, kk, nv), Jet(np.asarray(coefs[n])[None], 0), nv)
    return r


def _power_taylor(p: float) -> Callable:
    pint = float(p).is_integer()

    def taylor(g0, n):
        out = []
        binom = 1.0
        for m in range(n + 1):
            if m > 0:
                binom *= (p - (m - 1)) / m
            if pint and p >= 0 and m > p:
                out.append(np.zeros_like(g0))
            else:
                out.append(binom * g0 ** (p - m))
        return out

    return taylor


def _exp_taylor(g0, n):
    e = np.exp(g0)
    return [e / math.factorial(m) for m in range(n + 1)]


def _uni(values: np.ndarray, n: int) -> Jet:
    # univariate jet of the identity at ``values``
    c = np.zeros((n + 1,) + values.shape, complex)
    c[0] = values
    if n >= 1:
        c[1] = 1.0
    return Jet(c, n)


def _step_taylor(q0: np.ndarray, n: int) -> np.ndarray:
    """Taylor coefficients in q of phi(q) = chi(sqrt(q)), shape (n+1, ...)."""
    q0 = np.real(q0)
    out = np.zeros((n + 1,) + q0.shape)
    inner = q0 <= CHI_INNER**2
    mid = (~inner) & (q0 < CHI_OUTER**2)
    out[0][inner] = 1.0
    if np.any(mid):
        Q = _uni(q0[mid], n)
        T = _jet_compose(Q, n, 1, _power_taylor(0.5))
        width = CHI_OUTER - CHI_INNER
        Y = Jet(-T.c / width, T.k)
        Y.c[0] += CHI_OUTER / width
        Y.c[0] = np.clip(Y.c[0].real, 1e-3, 1 - 1e-3)
        Ym = Jet(-Y.c, Y.k)
        Ym.c[0] += 1.0

        def f(J):
            inv = _jet_compose(J, n, 1, _power_taylor(-1.0))
            return _jet_compose(Jet(-inv.c, inv.k), n, 1, _exp_taylor)

        f1, f2 = f(Y), f(Ym)
        den = _jet_compose(_jet_add(f1, f2, 1), n, 1, _power_taylor(-1.0))
        psi = _jet_mul(f1, den, n, 1)
        out[: psi.c.shape[0], mid] = psi.c.real
    return out


def chi(t) -> np.ndarray:
    """The cut-off profile: 1 for |t| <= 5/4, 0 for |t| >= 8/5, smooth between."""
    t = np.asarray(t, float)
    out = _step_taylor(np.atleast_1d(t * t), 0)[0]
    return out.reshape(t.shape) if t.ndim else float(out[0])


@dataclass(frozen=True)
class CutoffSpec:
    """The band cut-off chi_eps(t) = chi(|t| / eps) of the quantization."""

    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not 0.0 < self.epsilon < 0.25:
            raise ValueError(f"epsilon must lie in (0, 1/4), got {self.epsilon}")

    def __call__(self, t) -> np.ndarray:
        return chi(np.abs(np.asarray(t, float)) / self.epsilon)

    @property
    def band(self) -> float:
        """chi_eps(t) vanishes for |t| >= band."""
        return CHI_OUTER * self.epsilon


def make_cutoff_chi(spec: CutoffSpec) -> Callable[[np.ndarray], np.ndarray]:
    return spec.__call__


# ---------------------------------------------------------------------------
# Expression tree
# ---------------------------------------------------------------------------

_INTERN: "weakref.WeakValueDictionary" = weakref.WeakValueDictionary()

_INF = float("inf")


class Symbol:
    """Immutable expression tree for a symbol a(x, xi).

    Build symbols with the module-level constructors (:func:`const`,
    :func:`xi`, :func:`coeff`, :func:`norm2`, :func:`cutoff_XR`, ...) and
    ordinary arithmetic.  ``order`` is the declared symbol order.
    """

    __slots__ = ("kind", "children", "params", "payload", "dim", "order",
                 "x_dep", "xi_dep", "_dx", "__weakref__")

    def __new__(cls, kind, children=(), params=(), payload=None, *, dim=None,
                order=0.0, x_dep=False, xi_dep=False):
        key = (kind, params, dim, tuple(id(c) for c in children),
               id(payload) if payload is not None else None)
        hit = _INTERN.get(key)
        if hit is not None:
            return hit
        self = object.__new__(cls)
        self.kind = kind
        self.children = tuple(children)
        self.params = params
        self.payload = payload
        self.dim = dim
        self.order = order
        self.x_dep = x_dep
        self.xi_dep = xi_dep
        self._dx = {}
        _INTERN[key] = self
        return self

    def __init__(self, *args, **kwargs):
        pass

    def __reduce__(self):
        raise TypeError("Symbol objects are not picklable")

    def __repr__(self):
        if self.kind == "const":
            return repr(self.params[0])
        if self.kind == "xi":
            return f"xi{self.params[0] + 1}"
        if self.kind == "coef":
            return f"c{id(self.payload) % 10000}(x)"
        if self.kind == "radial":
            return f"{self.params[1]}[R={self.params[0]:g}]"
        if self.kind in ("add", "mul"):
            op = " + " if self.kind == "add" else "*"
            return "(" + op.join(map(repr, self.children)) + ")"
        if self.kind == "pow":
            return f"{self.children[0]!r}**{self.params[0]:g}"
        if self.kind == "dxi":
            return f"d_xi{self.params[0] + 1}[{self.children[0]!r}]"
        return f"{self.kind}({self.children[0]!r})"

    # arithmetic ----------------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(const(-1.0), _lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), mul(const(-1.0), self))

    def __neg__(self):
        return mul(const(-1.0), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        if other.kind == "const":
            return mul(self, const(1.0 / other.params[0]))
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(_lift(other), power(self, -1.0))

    def __pow__(self, p):
        return power(self, float(p))

    def conj(self) -> "Symbol":
        return conj(self)

    def reflect(self) -> "Symbol":
        """a(x, xi) -> a(x, -xi)."""
        return reflect(self)

    def tilde(self) -> "Symbol":
        """conj(a(x, -xi)), the symbol of the conjugate operator."""
        return conj(reflect(self))

    def sqrt(self, tol: float = 0.0) -> "Symbol":
        return power(self, 0.5, tol)

    def dx(self, axis: int) -> "Symbol":
        """Symbolic x-derivative; ``axis`` counts from 1."""
        return _dx(self, axis - 1)

    def dxi(self, axis: int) -> "Symbol":
        return dxi(self, axis - 1)

    @property
    def is_zero(self) -> bool:
        return self.kind == "const" and self.params[0] == 0

    # evaluation ----------------------------------------------------------
    def sample(self, grid: Grid, xi_points, dx: Sequence[int] | None = None,
               dxi: Sequence[int] | None = None) -> np.ndarray:
        """Samples of d_xi^beta d_x^alpha a on the physical grid.

        Returns an array of shape ``(n_xi, *grid.phys_shape)``.
        """
        xi_points = _as_points(xi_points, grid.dim)
        node = self
        if dx is not None:
            for ax, n in enumerate(dx):
                for _ in range(int(n)):
                    node = _dx(node, ax)
        beta = tuple(int(b) for b in (dxi or (0,) * grid.dim))
        K = sum(beta)
        out = evaluate(node, grid, xi_points, K)
        idx = _mono_index(grid.dim, K)[beta] if K else 0
        fact = math.prod(math.factorial(b) for b in beta)
        return np.broadcast_to(out[idx] * fact, (len(xi_points),) + grid.phys_shape)

    def eval(self, grid: Grid, xi, dx: Sequence[int] | None = None,
             dxi: Sequence[int] | None = None) -> Field:
        """d_xi^beta d_x^alpha a(., xi) at one xi, as a Field on ``grid``.

        Only |beta| <= 2 is supported through this entry point.
        """
        if dxi is not None and sum(dxi) > 2:
            raise ValueError("xi-derivatives of total order > 2 are not supported")
        s = self.sample(grid, np.atleast_1d(np.asarray(xi, float))[None], dx, dxi)[0]
        return Field(grid, coeffs_from_samples(s, grid.dim, grid.cutoff))

    def separable_terms(self) -> list[tuple["Symbol", "Symbol"]] | None:
        """Decomposition a = sum_i c_i(x) k_i(xi), or None if not separable."""
        if not self.xi_dep or not self.x_dep:
            return [(self, ONE)] if not self.xi_dep else [(ONE, self)]
        if self.kind == "add":
            out = []
            for c in self.children:
                t = c.separable_terms()
                if t is None:
                    return None
                out.extend(t)
            return out
        if self.kind == "mul":
            xs = [c for c in self.children if not c.xi_dep]
            ks = [c for c in self.children if c.xi_dep and not c.x_dep]
            mixed = [c for c in self.children if c.x_dep and c.xi_dep]
            if not mixed:
                return [(mul(*xs), mul(*ks))]
            if len(mixed) != 1:
                return None
            inner = mixed[0].separable_terms()
            if inner is None:
                return None
            xf = mul(*xs) if xs else ONE
            kf = mul(*ks) if ks else ONE
            return [(mul(xf, c), mul(kf, k)) for c, k in inner]
        if self.kind == "conj":
            inner = self.children[0].separable_terms()
            return None if inner is None else [(conj(c), conj(k)) for c, k in inner]
        if self.kind == "refl":
            inner = self.children[0].separable_terms()
            return None if inner is None else [(c, reflect(k)) for c, k in inner]
        return None

    def nodes(self) -> Iterable["Symbol"]:
        seen = set()
        stack = [self]
        while stack:
            n = stack.pop()
            if id(n) in seen:
                continue
            seen.add(id(n))
            yield n
            stack.extend(n.children)


def _lift(v) -> Symbol:
    if isinstance(v, Symbol):
        return v
    if isinstance(v, Field):
        return coeff(v)
    if np.isscalar(v):
        return const(v)
    raise TypeError(f"cannot use {type(v).__name__} as a symbol")


def _as_points(xi, dim) -> np.ndarray:
    xi = np.asarray(xi, float)
    if xi.ndim == 1:
        xi = xi.reshape(-1, dim) if dim > 1 else xi[:, None]
    if xi.shape[-1] != dim:
        raise ValueError(f"xi points must have {dim} components")
    return xi


def _merge_dim(children) -> int | None:
    dims = {c.dim for c in children if c.dim is not None}
    if len(dims) > 1:
        raise ValueError(f"dimension mismatch among symbols: {sorted(dims)}")
    return dims.pop() if dims else None


# constructors ------------------------------------------------------------


def const(value) -> Symbol:
    v = complex(value)
    if v.imag == 0:
        v = v.real
    return Symbol("const", params=(v,), order=0.0 if v != 0 else -_INF)


ZERO = const(0.0)
ONE = const(1.0)


def xi(axis: int, dim: int) -> Symbol:
    """The coordinate xi_axis (axis from 1)."""
    if not 1 <= axis <= dim:
        raise ValueError(f"axis must be in 1..{dim}")
    return Symbol("xi", params=(axis - 1,), dim=dim, order=1.0, xi_dep=True)


def coeff(f: Field) -> Symbol:
    """x-dependent, xi-independent symbol given by a band-limited field."""
    if not np.any(f.coeffs):
        return ZERO
    return Symbol("coef", payload=f, dim=f.grid.dim, order=0.0, x_dep=True)


def norm2(dim: int) -> Symbol:
    """|xi|^2."""
    return add(*(mul(xi(i, dim), xi(i, dim)) for i in range(1, dim + 1)))


def japanese(dim: int, t: float = 1.0) -> Symbol:
    """<xi>^t = (1 + |xi|^2)^(t/2)."""
    return power(add(ONE, norm2(dim)), t / 2.0)


def _radial(R: float, which: str, dim: int, order: float) -> Symbol:
    if R <= 0:
        raise ValueError("R must be positive")
    return Symbol("radial", params=(float(R), which), dim=dim, order=order, xi_dep=True)


def cutoff_chi(R: float, dim: int) -> Symbol:
    """chi(|xi| / R), compactly supported in |xi| < 8R/5."""
    return _radial(R, "chi", dim, 0.0)


def make_cutoff_XR(R: float, dim: int) -> Symbol:
    """X_R(xi) = 1 - chi(|xi|/R): zero for |xi| <= 5R/4, one for |xi| >= 8R/5."""
    return _radial(R, "XR", dim, 0.0)


cutoff_XR = make_cutoff_XR


def cutoff_XR_over_norm2(R: float, dim: int) -> Symbol:
    """X_R(xi) / |xi|^2, smooth because X_R vanishes near the origin."""
    return _radial(R, "XRq", dim, -2.0)


def add(*terms: Symbol) -> Symbol:
    flat = []
    c = 0.0
    for t in terms:
        t = _lift(t)
        if t.kind == "add":
            for s in t.children:
                if s.kind == "const":
                    c += s.params[0]
                else:
                    flat.append(s)
        elif t.kind == "const":
            c += t.params[0]
        else:
            flat.append(t)
    if c != 0:
        flat.insert(0, const(c))
    if not flat:
        return ZERO
    if len(flat) == 1:
        return flat[0]
    return Symbol("add", tuple(flat), dim=_merge_dim(flat),
                  order=max(t.order for t in flat),
                  x_dep=any(t.x_dep for t in flat), xi_dep=any(t.xi_dep for t in flat))


def mul(*factors: Symbol) -> Symbol:
    flat = []
    c = 1.0
    for f in factors:
        f = _lift(f)
        if f.kind == "mul":
            for s in f.children:
                if s.kind == "const":
                    c *= s.params[0]
                else:
                    flat.append(s)
        elif f.kind == "const":
            c *= f.params[0]
        else:
            flat.append(f)
    if c == 0:
        return ZERO
    if c != 1:
        flat.insert(0, const(c))
    if not flat:
        return ONE
    if len(flat) == 1:
        return flat[0]
    return Symbol("mul", tuple(flat), dim=_merge_dim(flat),
                  order=sum(t.order for t in flat),
                  x_dep=any(t.x_dep for t in flat), xi_dep=any(t.xi_dep for t in flat))


def power(base: Symbol, p: float, tol: float = 0.0) -> Symbol:
    """base**p.  Non-integer or negative powers carry a positivity witness.

    For non-integer ``p`` evaluation requires Re(base) > tol (and a
    negligible imaginary part); for negative integer ``p`` it requires
    |base| > tol.  Violations raise :class:`EllipticityError`.
    """
    base = _lift(base)
    p = float(p)
    if p == 0:
        return ONE
    if p == 1:
        return base
    if base.kind == "const":
        v = base.params[0]
        if not p.is_integer() and not (np.isreal(v) and np.real(v) > tol):
            raise EllipticityError(f"power {p} of non-positive constant {v}")
        return const(np.real(v) ** p if np.isreal(v) else v**p)
    if base.kind == "pow" and float(p).is_integer():
        return power(base.children[0], base.params[0] * p, max(tol, base.params[1]))
    return Symbol("pow", (base,), params=(p, float(tol)), dim=base.dim,
                  order=p * base.order, x_dep=base.x_dep, xi_dep=base.xi_dep)


def conj(a: Symbol) -> Symbol:
    a = _lift(a)
    if a.kind == "const":
        return const(np.conj(a.params[0]))
    if a.kind in ("xi", "radial"):
        return a
    if a.kind == "conj":
        return a.children[0]
    if a.kind in ("add", "mul"):
        f = add if a.kind == "add" else mul
        return f(*(conj(c) for c in a.children))
    if a.kind == "pow" and float(a.params[0]).is_integer():
        return power(conj(a.children[0]), a.params[0], a.params[1])
    return Symbol("conj", (a,), dim=a.dim, order=a.order, x_dep=a.x_dep, xi_dep=a.xi_dep)


def reflect(a: Symbol) -> Symbol:
    a = _lift(a)
    if not a.xi_dep or a.kind == "radial":
        return a
    if a.kind == "xi":
        return mul(const(-1.0), a)
    if a.kind == "refl":
        return a.children[0]
    if a.kind in ("add", "mul"):
        f = add if a.kind == "add" else mul
        return f(*(reflect(c) for c in a.children))
    if a.kind == "pow":
        return power(reflect(a.children[0]), a.params[0], a.params[1])
    if a.kind == "conj":
        return conj(reflect(a.children[0]))
    return Symbol("refl", (a,), dim=a.dim, order=a.order, x_dep=a.x_dep, xi_dep=True)


def dxi(a: Symbol, axis: int) -> Symbol:
    """d/dxi_{axis+1} (0-based axis)."""
    a = _lift(a)
    if not a.xi_dep:
        return ZERO
    if a.kind == "xi":
        return ONE if a.params[0] == axis else ZERO
    if a.kind == "add":
        return add(*(dxi(c, axis) for c in a.children))
    if a.kind == "mul":
        dep = [c for c in a.children if c.xi_dep]
        if len(dep) == 1:
            rest = [c for c in a.children if not c.xi_dep]
            return mul(*rest, dxi(dep[0], axis))
    if a.kind == "conj":
        return conj(dxi(a.children[0], axis))
    return Symbol("dxi", (a,), params=(axis,), dim=a.dim, order=a.order - 1,
                  x_dep=a.x_dep, xi_dep=True)


def _dx(a: Symbol, axis: int) -> Symbol:
    if not a.x_dep:
        return ZERO
    hit = a._dx.get(axis)
    if hit is not None:
        return hit
    k = a.kind
    if k == "coef":
        f = a.payload
        out = coeff(Field(f.grid, 1j * f.grid.freqs[axis] * f.coeffs))
    elif k == "add":
        out = add(*(_dx(c, axis) for c in a.children))
    elif k == "mul":
        terms = []
        for i, c in enumerate(a.children):
            if c.x_dep:
                terms.append(mul(*a.children[:i], _dx(c, axis), *a.children[i + 1:]))
        out = add(*terms)
    elif k == "pow":
        b = a.children[0]
        p, tol = a.params
        out = mul(const(p), power(b, p - 1, tol), _dx(b, axis))
    elif k == "conj":
        out = conj(_dx(a.children[0], axis))
    elif k == "refl":
        out = reflect(_dx(a.children[0], axis))
    elif k == "dxi":
        out = dxi(_dx(a.children[0], axis), a.params[0])
    else:  # pragma: no cover - leaves without x dependence return early
        raise AssertionError(k)
    a._dx[axis] = out
    return out


def poisson_bracket(a: Symbol, b: Symbol) -> Symbol:
    """{a, b} = sum_j d_xi_j a d_x_j b - d_x_j a d_xi_j b."""
    a, b = _lift(a), _lift(b)
    d = _merge_dim((a, b))
    if d is None:
        return ZERO
    terms = []
    for j in range(d):
        terms.append(mul(dxi(a, j), _dx(b, j)))
        terms.append(mul(const(-1.0), _dx(a, j), dxi(b, j)))
    return add(*terms)


def sigma_bracket(a: Symbol, b: Symbol) -> Symbol:
    """sigma(a, b) = sum_jk a_{xi_j xi_k} b_{x_j x_k} - 2 a_{x_j xi_k} b_{xi_j x_k}
    + a_{x_j x_k} b_{xi_j xi_k}."""
    a, b = _lift(a), _lift(b)
    d = _merge_dim((a, b))
    if d is None:
        return ZERO
    terms = []
    for j in range(d):
        for k in range(d):
            terms.append(mul(dxi(dxi(a, j), k), _dx(_dx(b, j), k)))
            terms.append(mul(const(-2.0), _dx(dxi(a, k), j), _dx(dxi(b, j), k)))
            terms.append(mul(_dx(_dx(a, j), k), dxi(dxi(b, j), k)))
    return add(*terms)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


class _Evaluator:
    """Memoised jet evaluation of a forest of nodes at a batch of xi points."""

    def __init__(self, grid: Grid, xi_points: np.ndarray, xcache: dict | None = None,
                 points: int | None = None):
        self.grid = grid
        self.M = grid.points_per_axis if points is None else int(points)
        self.d = grid.dim
        self.xi = xi_points
        self.memo: dict = {}
        self.xcache = {} if xcache is None else xcache
        self._xi_shape = (len(xi_points),) + (1,) * self.d
        self.remaining: dict = {}
        self.need: dict = {}
        self.kids: dict = {}

    def prepare(self, root: Symbol, K0: int) -> None:
        """Plan the evaluation of ``root``.

        Every (node, sign) pair is computed once, at the largest jet order any
        parent asks for, and released after its last consumer is built.
        """
        order: list = []
        seen = set()
        kids: dict = {}
        stack = [((root, 1), False)]
        while stack:
            (n, sg), done = stack.pop()
            key = (id(n), sg)
            if done:
                order.append((n, sg))
                continue
            if key in seen:
                continue
            seen.add(key)
            stack.append(((n, sg), True))
            ch = []
            if n.xi_dep:
                csg = -sg if n.kind == "refl" else sg
                for c in {id(c): c for c in n.children}.values():
                    if c.xi_dep:
                        ch.append((c, csg))
            kids[key] = ch
            for c in ch:
                stack.append((c, False))
        need = {(id(root), 1): K0}
        rem: dict = {}
        for n, sg in reversed(order):
            key = (id(n), sg)
            k = need.get(key, 0)
            for c, csg in kids[key]:
                ck = (id(c), csg)
                kc = k + 1 if n.kind == "dxi" else k
                need[ck] = max(need.get(ck, 0), kc)
                rem[ck] = rem.get(ck, 0) + 1
        self.need = need
        self.remaining = rem
        self.kids = kids

    def jet(self, node: Symbol, K: int, sign: int = 1) -> Jet:
        if not node.xi_dep:
            K = 0
            sign = 1
            hit = self.xcache.get(id(node))
            if hit is not None:
                return hit[1]
        key = (id(node), sign)
        hit = self.memo.get(key)
        if hit is not None and hit[0] >= K:
            return hit[1].truncate(K, self.d)
        want = K
        K = max(K, self.need.get(key, 0))
        out = self._compute(node, K, sign)
        if node.xi_dep:
            self.memo[key] = (K, out)
            for c, csg in self.kids.get(key, ()):
                ck = (id(c), csg)
                left = self.remaining.get(ck)
                if left is not None:
                    self.remaining[ck] = left - 1
                    if left <= 1:
                        self.memo.pop(ck, None)
        else:
            # keep the node alive while cached so ids stay unique
            self.xcache[id(node)] = (node, out)
        return out.truncate(want, self.d) if out.k > want else out

    def _compute(self, node: Symbol, K: int, sign: int) -> Jet:
        d = self.d
        k = node.kind
        if k == "const":
            return Jet(np.full((1,) * (2 + d), node.params[0], complex), 0)
        if k == "coef":
            f = node.payload
            s = samples_from_coeffs(f.coeffs, d, self.M, fold=True)
            return Jet(s[None, None], 0)
        if k == "xi":
            ax = node.params[0]
            c = np.zeros((_nmono(d, min(K, 1)),) + self._xi_shape, complex)
            c[0] = (sign * self.xi[:, ax]).reshape(self._xi_shape)
            if K >= 1:
                c[1 + ax] = 1.0
            return Jet(c, min(K, 1))
        if k == "radial":
            return self._radial(node, K, sign)
        if k == "add":
            acc = None
            for ch in node.children:
                j = self.jet(ch, K, sign)
                acc = j if acc is None else _jet_add(acc, j, d)
            return acc
        if k == "mul":
            acc = None
            for ch in node.children:
                j = self.jet(ch, K, sign)
                acc = j if acc is None else _jet_mul(acc, j, K, d)
            return acc
        if k == "pow":
            p, tol = node.params
            g = self.jet(node.children[0], K, sign)
            g0 = g.c[0]
            if not float(p).is_integer():
                scale = 1.0 + np.abs(g0)
                if np.any(np.abs(g0.imag) > 1e-9 * scale) or np.any(g0.real <= tol):
                    raise EllipticityError(
                        f"radicand min {np.min(g0.real):.3e} not above {tol:g} "
                        f"(or non-real) for power {p:g}")
                g = Jet(g.c.copy(), g.k)
                g.c[0] = g0.real
            elif p < 0:
                if np.any(np.abs(g0) <= tol) or not np.all(np.isfinite(g0)) or np.any(g0 == 0):
                    raise EllipticityError(f"denominator vanishes for power {p:g}")
            return _jet_compose(g, K, d, _power_taylor(p))
        if k == "conj":
            j = self.jet(node.children[0], K, sign)
            return Jet(np.conj(j.c), j.k)
        if k == "refl":
            j = self.jet(node.children[0], K, -sign)
            return Jet(j.c * _parity(d, j.k).reshape((-1,) + (1,) * (j.c.ndim - 1)), j.k)
        if k == "dxi":
            ax = node.params[0]
            j = self.jet(node.children[0], K + 1, sign)
            if j.k == 0:
                return Jet(np.zeros((1,) + j.c.shape[1:], complex), 0)
            kk = min(K, j.k - 1)
            src, fac = _shift_table(d, kk, ax)
            return Jet(j.c[src] * fac.reshape((-1,) + (1,) * (j.c.ndim - 1)), kk)
        raise AssertionError(k)  # pragma: no cover

    def _radial(self, node: Symbol, K: int, sign: int) -> Jet:
        d = self.d
        R, which = node.params
        p = sign * self.xi / R
        c = np.zeros((_nmono(d, min(K, 2)),) + self._xi_shape, complex)
        c[0] = np.sum(p * p, axis=1).reshape(self._xi_shape)
        if K >= 1:
            for i in range(d):
                c[1 + i] = (2 * p[:, i] / R).reshape(self._xi_shape)
        if K >= 2:
            idx = _mono_index(d, 2)
            for i in range(d):
                e = [0] * d
                e[i] = 2
                c[idx[tuple(e)]] = 1.0 / R**2
        q = Jet(c, min(K, 2))

        def taylor(q0, n):
            phi = _step_taylor(q0, n)
            if which == "chi":
                return list(phi)
            if which == "XR":
                out = -phi
                out[0] += 1.0
                return list(out)
            # (1 - phi(q)) / (R^2 q), zero where phi == 1
            q0r = np.real(q0)
            out = np.zeros_like(phi)
            live = q0r > CHI_INNER**2
            if np.any(live):
                ql = q0r[live]
                one_m = -phi[:, live]
                one_m[0] += 1.0
                inv = np.array([(-1.0) ** m * ql ** (-m - 1) for m in range(n + 1)])
                conv = np.zeros_like(one_m)
                for m in range(n + 1):
                    for r in range(m + 1):
                        conv[m] += one_m[r] * inv[m - r]
                out[:, live] = conv / R**2
            return list(out)

        return _jet_compose(q, K, d, taylor)


def _chunk_size(phys: int, n_xi: int, target: float = 2.4e4) -> int:
    # arrays of a few 10^4 entries keep the per-node numpy work cache resident
    return max(1, min(n_xi, int(target // phys)))


def evaluate(node: Symbol, grid: Grid, xi_points, K: int = 0,
             chunk: int | None = None, points: int | None = None) -> np.ndarray:
    """Jet of ``node`` at each xi point on the physical grid of ``grid``.

    Returns the coefficient array of shape ``(n_monomials(K), n_xi, *phys)``;
    entry ``[i]`` multiplies ``dxi^alpha_i`` with the monomial ordering of
    :func:`monomials`.  ``points`` replaces the number of grid points per
    axis (coefficient fields are folded onto coarser grids exactly).
    """
    xi_points = _as_points(xi_points, grid.dim)
    n = len(xi_points)
    nm = _nmono(grid.dim, K)
    M = grid.points_per_axis if points is None else int(points)
    out = np.zeros((nm, n) + (M,) * grid.dim, complex)
    chunk = chunk or _chunk_size(M**grid.dim, n)
    xcache: dict = {}
    for start in range(0, n, chunk):
        ev = _Evaluator(grid, xi_points[start:start + chunk], xcache, M)
        ev.prepare(node, K)
        j = ev.jet(node, K)
        out[: j.c.shape[0], start:start + chunk] = j.c
    return out


def evaluate_xi_only(node: Symbol, dim: int, xi_points) -> np.ndarray:
    """Values of an x-independent symbol at xi points, shape ``(n_xi,)``."""
    if node.x_dep:
        raise ValueError("symbol depends on x")
    g = Grid(dim, 1)
    pts = _as_points(xi_points, dim)
    ev = _Evaluator(g, pts)
    c = ev.jet(node, 0).c[0]
    return np.broadcast_to(c, (len(pts),) + (1,) * dim).reshape(len(pts))


def evaluate_x_only(node: Symbol, grid: Grid) -> np.ndarray:
    """Physical samples of a xi-independent symbol, shape ``phys_shape``."""
    if node.xi_dep:
        raise ValueError("symbol depends on xi")
    ev = _Evaluator(grid, np.zeros((1, grid.dim)))
    c = ev.jet(node, 0).c[0, 0]
    return np.broadcast_to(c, grid.phys_shape)


def monomials(dim: int, K: int) -> tuple[tuple[int, ...], ...]:
    return _monomials(dim, K)


# ---------------------------------------------------------------------------
# Seminorms
# ---------------------------------------------------------------------------


def sampling_plan(grid: Grid, kmax: int = 8) -> np.ndarray:
    """Dyadic radii along axis and diagonal directions, plus half-lattice points."""
    d = grid.dim
    dirs = []
    for v in itertools.product((-1, 0, 1), repeat=d):
        if any(v):
            v = np.array(v, float)
            dirs.append(v / np.linalg.norm(v))
    pts = [np.zeros(d)]
    for k in range(kmax + 1):
        pts.extend((2.0**k) * v for v in dirs)
    h = np.arange(-2 * grid.cutoff, 2 * grid.cutoff + 1) / 2.0
    half = np.array(list(itertools.product(h, repeat=d)))
    return np.unique(np.vstack([np.array(pts), half]), axis=0)


def seminorm(a: Symbol, s: int, m: float, grid: Grid, xi_points=None) -> float:
    """Sampled lower estimate of the weighted symbol seminorm.

    max over sampled xi and |alpha| + |beta| <= s (|beta| <= 2) of
    <xi>^{-m+|beta|} sup_x |d_xi^beta d_x^alpha a(x, xi)|.
    """
    if s < 0 or s > 4:
        raise ValueError("s must lie in 0..4")
    if s > 2:
        warnings.warn("xi-derivatives are capped at order 2; estimate is partial",
                      SeminormCapWarning, stacklevel=2)
    d = grid.dim
    pts = _as_points(sampling_plan(grid) if xi_points is None else xi_points, d)
    jap = np.sqrt(1 + np.sum(pts**2, axis=1))
    best = 0.0
    multi = [al for n in range(s + 1) for al in _monomials(d, n) if sum(al) == n]
    for alpha in multi:
        node = a
        for ax, n in enumerate(alpha):
            for _ in range(n):
                node = _dx(node, ax)
        kb = min(2, s - sum(alpha))
        jets = evaluate(node, grid, pts, kb)
        for i, beta in enumerate(_monomials(d, kb)):
            fact = math.prod(math.factorial(b) for b in beta)
            vals = np.abs(jets[i]).reshape(len(pts), -1).max(axis=1) * fact
            best = max(best, float(np.max(jap ** (-m + sum(beta)) * vals)))
    return best


# ---------------------------------------------------------------------------
# 2x2 matrices of symbols
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MatrixSymbol:
    """2x2 matrix of symbols [[a, b], [c, e]].

    Real-to-real matrices have ``c = conj(b(x,-xi))`` and
    ``e = conj(a(x,-xi))``; build them with :meth:`real_to_real`.
    """

    a: Symbol
    b: Symbol
    c: Symbol
    e: Symbol

    @classmethod
    def real_to_real(cls, a1, a2) -> "MatrixSymbol":
        a1, a2 = _lift(a1), _lift(a2)
        return cls(a1, a2, a2.tilde(), a1.tilde())

    @classmethod
    def identity(cls) -> "MatrixSymbol":
        return cls(ONE, ZERO, ZERO, ONE)

    @classmethod
    def diagonal(cls, a, e=None) -> "MatrixSymbol":
        a = _lift(a)
        return cls(a, ZERO, ZERO, a if e is None else _lift(e))

    @property
    def entries(self) -> tuple[Symbol, Symbol, Symbol, Symbol]:
        return (self.a, self.b, self.c, self.e)

    @property
    def a1(self) -> Symbol:
        return self.a

    @property
    def a2(self) -> Symbol:
        return self.b

    def is_real_to_real(self) -> bool:
        return self.c is self.b.tilde() and self.e is self.a.tilde()

    def __add__(self, other: "MatrixSymbol") -> "MatrixSymbol":
        return MatrixSymbol(*(x + y for x, y in zip(self.entries, other.entries)))

    def __sub__(self, other: "MatrixSymbol") -> "MatrixSymbol":
        return MatrixSymbol(*(x - y for x, y in zip(self.entries, other.entries)))

    def scale(self, s) -> "MatrixSymbol":
        s = _lift(s)
        return MatrixSymbol(*(s * x for x in self.entries))

    def __neg__(self):
        return self.scale(-1.0)

    def __matmul__(self, o: "MatrixSymbol") -> "MatrixSymbol":
        """Pointwise matrix product of symbols (not operator composition)."""
        return MatrixSymbol(self.a * o.a + self.b * o.c, self.a * o.b + self.b * o.e,
                            self.c * o.a + self.e * o.c, self.c * o.b + self.e * o.e)

    def map(self, f: Callable[[Symbol], Symbol]) -> "MatrixSymbol":
        return MatrixSymbol(*(f(x) for x in self.entries))

    def sample(self, grid: Grid, xi_points) -> np.ndarray:
        """Values as an array of shape (2, 2, n_xi, *phys)."""
        vals = [np.asarray(s.sample(grid, xi_points)) for s in self.entries]
        return np.array([[vals[0], vals[1]], [vals[2], vals[3]]])

    def is_self_adjoint(self, grid: Grid, xi_points, tol: float = 1e-12) -> bool:
        """Real-to-real self-adjointness test: a real, b even in xi."""
        a = self.a.sample(grid, xi_points)
        b = self.b.sample(grid, xi_points)
        br = reflect(self.b).sample(grid, xi_points)
        scale = 1.0 + max(np.max(np.abs(a), initial=0), np.max(np.abs(b), initial=0))
        return bool(np.max(np.abs(a.imag), initial=0) <= tol * scale
                    and np.max(np.abs(b - br), initial=0) <= tol * scale)
