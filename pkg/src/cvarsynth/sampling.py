"""Deterministic sampling of parametric uncertainty.

Samples are reproducible by construction: sample ``i`` of seed ``s`` is
drawn from its own Philox stream keyed ``(s, i)``, so the value of any
sample is independent of batch size, evaluation order, and worker count,
and scenario sets of increasing size are nested (the first N samples of
a larger set are exactly the smaller set).  Uniform variates come from
53-bit integers mapped into the open interval (0, 1); Gaussians go
through a rational inverse normal CDF, so no rejection step ever
consumes a data-dependent amount of the stream.  Only support
constraints reject, and each rejected attempt consumes a fixed
``m``-variate block of its own sample's stream.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math

import numpy as np

from .errors import CvarSynthError, SpecError

__all__ = [
    "ParamDist",
    "DistributionSpec",
    "Constraint",
    "ScenarioSet",
    "CertifyConfig",
    "norm_ppf",
    "norm_cdf",
    "draw_samples",
    "truncate_3sigma",
    "sample_bound",
    "save_scenarios",
    "load_scenarios",
]

GENERATOR_ID = "philox-invcdf-v1"
_REJECTION_FACTOR = 1000


# ---------------------------------------------------------------------------
# Counter-based streams: Philox-4x64-10, vectorized over samples
#
# Sample i of seed s reads its variates from the Philox stream keyed
# (s, i).  The block function below reproduces numpy's Philox bit
# generator exactly (numpy advances the counter before each block, so
# block b uses counter value b+1); the unit tests cross-check against
# np.random.Philox.  A vectorized implementation is used because one
# Generator object per sample costs more than the variates themselves
# for large batches.
# ---------------------------------------------------------------------------

_PHILOX_M0 = np.uint64(0xD2E7470EE14C6C93)
_PHILOX_M1 = np.uint64(0xCA5A826395121157)
_PHILOX_W0 = np.uint64(0x9E3779B97F4A7C15)
_PHILOX_W1 = np.uint64(0xBB67AE8584CAA73B)
_MASK32 = np.uint64(0xFFFFFFFF)
_U64 = np.uint64


def _mulhilo(a, b):
    """128-bit product of scalar a and array b, as (high, low) uint64."""
    al, ah = a & _MASK32, a >> _U64(32)
    bl, bh = b & _MASK32, b >> _U64(32)
    albl = al * bl
    t = ah * bl + (albl >> _U64(32))
    t2 = al * bh + (t & _MASK32)
    hi = ah * bh + (t >> _U64(32)) + (t2 >> _U64(32))
    return hi, a * b


def _philox_block(counter: int, k0, k1):
    """One Philox-4x64-10 block for every (k0[i], k1[i]) key pair."""
    c0 = np.full(k0.shape, counter, dtype=np.uint64)
    c1 = np.zeros_like(c0)
    c2 = np.zeros_like(c0)
    c3 = np.zeros_like(c0)
    k0 = k0.copy()
    k1 = k1.copy()
    for _ in range(10):
        hi0, lo0 = _mulhilo(_PHILOX_M0, c0)
        hi1, lo1 = _mulhilo(_PHILOX_M1, c2)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
        k0 = k0 + _PHILOX_W0
        k1 = k1 + _PHILOX_W1
    return c0, c1, c2, c3


def _philox_word_range(seed: int, slots, w0: int, w1: int) -> np.ndarray:
    """Raw outputs [w0, w1) of the (seed, slot) streams, shape (len, w1-w0).

    Row i of _philox_word_range(s, [i], 0, n) matches
    np.random.Philox(key=[s, i]).random_raw(n).
    """
    slots = np.asarray(slots, dtype=np.uint64)
    k0 = np.full(slots.shape, seed & 0xFFFFFFFFFFFFFFFF, dtype=np.uint64)
    b0, b1 = w0 // 4, (w1 + 3) // 4
    words = np.empty((slots.size, 4 * (b1 - b0)), dtype=np.uint64)
    with np.errstate(over="ignore"):
        for b in range(b0, b1):
            c0, c1, c2, c3 = _philox_block(b + 1, k0, slots)
            j = 4 * (b - b0)
            words[:, j] = c0
            words[:, j + 1] = c1
            words[:, j + 2] = c2
            words[:, j + 3] = c3
    return words[:, w0 - 4 * b0 : w1 - 4 * b0]


def _philox_words(seed: int, slots, nwords: int) -> np.ndarray:
    """First ``nwords`` raw outputs of the (seed, slot) streams."""
    return _philox_word_range(seed, slots, 0, nwords)


def _slot_uniforms(seed: int, slots, m: int, attempt: int) -> np.ndarray:
    """Open-(0,1) uniforms for attempt ``attempt`` of the given slots.

    Attempt a of a slot consumes words [a*m, (a+1)*m) of that slot's
    stream; the value is the top 53 bits of each word mapped to the
    open unit interval.
    """
    if m == 0:
        return np.zeros((np.asarray(slots).size, 0))
    words = _philox_word_range(seed, slots, attempt * m, (attempt + 1) * m)
    return ((words >> _U64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


# ---------------------------------------------------------------------------
# Inverse normal CDF (rational approximation, |error| < 1e-15)
# ---------------------------------------------------------------------------

_PPF_A = (
    3.3871328727963666080e0, 1.3314166789178437745e2, 1.9715909503065514427e3,
    1.3731693765509461125e4, 4.5921953931549871457e4, 6.7265770927008700853e4,
    3.3430575583588128105e4, 2.5090809287301226727e3,
)
_PPF_B = (
    1.0, 4.2313330701600911252e1, 6.8718700749205790830e2, 5.3941960214247511077e3,
    2.1213794301586595867e4, 3.9307895800092710610e4, 2.8729085735721942674e4,
    5.2264952788528545610e3,
)
_PPF_C = (
    1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
    3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
    2.27238449892691845833e-2, 7.74545014278341407640e-4,
)
_PPF_D = (
    1.0, 2.05319162663775882187e0, 1.67638483018380384940e0, 6.89767334985100004550e-1,
    1.48103976427480074590e-1, 1.51986665636164571966e-2, 5.47593808499534494600e-4,
    1.05075007164441684324e-9,
)
_PPF_E = (
    6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
    2.96560571828504891230e-1, 2.65321895265761230930e-2, 1.24266094738807843860e-3,
    2.71155556874348757815e-5, 2.01033439929228813265e-7,
)
_PPF_F = (
    1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1, 1.48753612908506148525e-2,
    7.86869131145613259100e-4, 1.84631831751005468180e-5, 1.42151175831644588870e-7,
    2.04426310338993978564e-15,
)


def _ratpoly(coeff_num, coeff_den, x):
    num = coeff_num[7]
    den = coeff_den[7]
    for i in range(6, -1, -1):
        num = num * x + coeff_num[i]
        den = den * x + coeff_den[i]
    return num / den


def _ppf_core(p: np.ndarray) -> np.ndarray:
    """Quantile on arrays with entries strictly inside (0, 1)."""
    q = p - 0.5
    out = np.empty_like(p)
    central = np.abs(q) <= 0.425
    if np.any(central):
        qc = q[central]
        out[central] = qc * _ratpoly(_PPF_A, _PPF_B, 0.180625 - qc * qc)
    tails = ~central
    if np.any(tails):
        qt = q[tails]
        r = np.sqrt(-np.log(np.where(qt < 0.0, p[tails], 1.0 - p[tails])))
        x = np.where(
            r <= 5.0,
            _ratpoly(_PPF_C, _PPF_D, r - 1.6),
            _ratpoly(_PPF_E, _PPF_F, np.maximum(r, 5.0) - 5.0),
        )
        out[tails] = np.where(qt < 0.0, -x, x)
    return out


def norm_ppf(p):
    """Standard normal quantile function (scalar or array, |err| < 1e-15)."""
    arr = np.asarray(p, dtype=float)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    if np.any((arr < 0.0) | (arr > 1.0)):
        bad = arr[(arr < 0.0) | (arr > 1.0)][0]
        raise SpecError("quantile", f"p must be in [0, 1], got {bad}")
    out = np.full(arr.shape, np.nan)
    inner = (arr > 0.0) & (arr < 1.0)
    out[arr == 0.0] = -math.inf
    out[arr == 1.0] = math.inf
    if np.any(inner):
        out[inner] = _ppf_core(arr[inner])
    return float(out[0]) if scalar else out


def norm_cdf(x: float) -> float:
    """Standard normal CDF via the complementary error function."""
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


# ---------------------------------------------------------------------------
# Distributions
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class ParamDist:
    """Marginal distribution of one scalar parameter.

    kind "gaussian": ``mean``/``sd``; kind "uniform": ``lo``/``hi``.
    ``truncation = (a, b)`` restricts the support to [a, b] by quantile
    mapping (gaussian) or interval intersection (uniform).
    """

    name: str
    kind: str
    mean: float = 0.0
    sd: float = 1.0
    lo: float = -1.0
    hi: float = 1.0
    truncation: tuple = None

    def __post_init__(self):
        if self.kind not in ("gaussian", "uniform"):
            raise SpecError(f"dist.{self.name}", f"unknown kind {self.kind!r}")
        if self.kind == "gaussian" and self.sd <= 0.0:
            raise SpecError(f"dist.{self.name}", f"sd must be positive, got {self.sd}")
        if self.kind == "uniform" and not self.hi > self.lo:
            raise SpecError(f"dist.{self.name}", f"need hi > lo, got [{self.lo}, {self.hi}]")
        if self.truncation is not None:
            a, b = self.truncation
            if not b > a:
                raise SpecError(f"dist.{self.name}", f"empty truncation [{a}, {b}]")
            object.__setattr__(self, "truncation", (float(a), float(b)))

    def ppf(self, u: float) -> float:
        """Quantile transform of u in (0,1), truncation folded in."""
        if self.kind == "gaussian":
            if self.truncation is not None:
                a, b = self.truncation
                qa = norm_cdf((a - self.mean) / self.sd)
                qb = norm_cdf((b - self.mean) / self.sd)
                u = qa + u * (qb - qa)
            return self.mean + self.sd * norm_ppf(u)
        lo, hi = self.lo, self.hi
        if self.truncation is not None:
            lo, hi = max(lo, self.truncation[0]), min(hi, self.truncation[1])
            if not hi > lo:
                raise SpecError(f"dist.{self.name}", "truncation leaves empty support")
        return lo + u * (hi - lo)

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        if self.kind == "gaussian":
            d.update(mean=self.mean, sd=self.sd)
        else:
            d.update(lo=self.lo, hi=self.hi)
        if self.truncation is not None:
            d["truncation"] = list(self.truncation)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ParamDist":
        trunc = tuple(d["truncation"]) if d.get("truncation") is not None else None
        return ParamDist(
            name=d["name"], kind=d["kind"],
            mean=float(d.get("mean", 0.0)), sd=float(d.get("sd", 1.0)),
            lo=float(d.get("lo", -1.0)), hi=float(d.get("hi", 1.0)),
            truncation=trunc,
        )


@dataclasses.dataclass(frozen=True)
class DistributionSpec:
    """Ordered marginals for the full parameter vector (independent)."""

    params: tuple

    def __post_init__(self):
        params = tuple(self.params)
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise SpecError("distributions", "duplicate parameter names")
        object.__setattr__(self, "params", params)

    @property
    def nparams(self) -> int:
        return len(self.params)

    @property
    def names(self):
        return tuple(p.name for p in self.params)

    def to_dict(self):
        return {"params": [p.to_dict() for p in self.params]}

    @staticmethod
    def from_dict(d) -> "DistributionSpec":
        return DistributionSpec(tuple(ParamDist.from_dict(p) for p in d["params"]))


def truncate_3sigma(dists: DistributionSpec) -> DistributionSpec:
    """Clip every Gaussian marginal to +/- 3 sd around its mean.

    Uniform marginals (already bounded) pass through unchanged; existing
    truncations are intersected.
    """
    out = []
    for p in dists.params:
        if p.kind != "gaussian":
            out.append(p)
            continue
        a, b = p.mean - 3.0 * p.sd, p.mean + 3.0 * p.sd
        if p.truncation is not None:
            a, b = max(a, p.truncation[0]), min(b, p.truncation[1])
        out.append(dataclasses.replace(p, truncation=(a, b)))
    return DistributionSpec(tuple(out))


# ---------------------------------------------------------------------------
# Support constraints
# ---------------------------------------------------------------------------


class Constraint:
    """Scalar constraint g(delta) <= 0 on the parameter vector.

    Expression tree over affine and quadratic forms combined with
    min/max, enough for box corners, ellipsoids and half-spaces.  The
    tree serializes to JSON for problem files.
    """

    def __init__(self, node):
        self.node = node

    # -- constructors ----------------------------------------------------
    @staticmethod
    def affine(coeffs, offset=0.0) -> "Constraint":
        """g(d) = coeffs . d + offset"""
        return Constraint({"op": "affine", "coeffs": [float(c) for c in coeffs],
                           "offset": float(offset)})

    @staticmethod
    def quadratic(weights, offset=0.0) -> "Constraint":
        """g(d) = sum_i weights_i d_i^2 + offset"""
        return Constraint({"op": "quad", "weights": [float(w) for w in weights],
                           "offset": float(offset)})

    @staticmethod
    def min_of(*constraints) -> "Constraint":
        return Constraint({"op": "min", "args": [c.node for c in constraints]})

    @staticmethod
    def max_of(*constraints) -> "Constraint":
        return Constraint({"op": "max", "args": [c.node for c in constraints]})

    # -- evaluation ------------------------------------------------------
    def evaluate(self, samples) -> np.ndarray:
        """g at each row of an (N, m) sample matrix; returns shape (N,)."""
        s = np.asarray(samples, dtype=float)
        s = s.reshape(1, -1) if s.ndim == 1 else s
        return _eval_node(self.node, s)

    def __call__(self, delta) -> float:
        return float(self.evaluate(np.atleast_2d(np.asarray(delta, dtype=float)))[0])

    def to_dict(self) -> dict:
        return self.node

    @staticmethod
    def from_dict(d) -> "Constraint":
        _check_node(d, "constraint")
        return Constraint(d)


def _eval_node(node, samples):
    op = node["op"]
    if op == "affine":
        c = np.asarray(node["coeffs"])
        return samples[:, : c.size] @ c + node["offset"]
    if op == "quad":
        w = np.asarray(node["weights"])
        return (samples[:, : w.size] ** 2) @ w + node["offset"]
    if op == "min":
        return np.minimum.reduce([_eval_node(a, samples) for a in node["args"]])
    if op == "max":
        return np.maximum.reduce([_eval_node(a, samples) for a in node["args"]])
    raise SpecError("constraint", f"unknown op {op!r}")


def _check_node(node, path):
    if not isinstance(node, dict) or "op" not in node:
        raise SpecError(path, "constraint node must be a dict with an 'op'")
    op = node["op"]
    if op in ("affine", "quad"):
        key = "coeffs" if op == "affine" else "weights"
        if key not in node or "offset" not in node:
            raise SpecError(path, f"{op} node needs {key!r} and 'offset'")
    elif op in ("min", "max"):
        for i, a in enumerate(node.get("args", [])):
            _check_node(a, f"{path}.args[{i}]")
    else:
        raise SpecError(path, f"unknown op {op!r}")


# ---------------------------------------------------------------------------
# Sample generation
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class ScenarioSet:
    """A drawn batch: rows are samples, columns follow dists order."""

    samples: np.ndarray
    seed: int
    param_names: tuple
    rejected: int
    generator: str = GENERATOR_ID

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        s = s.reshape(s.shape[0], -1)
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "param_names", tuple(self.param_names))

    @property
    def n(self) -> int:
        return self.samples.shape[0]


def draw_samples(dists: DistributionSpec, n: int, seed: int,
                 constraint: Constraint = None) -> ScenarioSet:
    """Draw ``n`` samples; slot i depends only on (seed, i, dists, constraint).

    Rejection sampling against the constraint aborts with
    ``constraint_too_tight`` once the total number of rejected attempts
    exceeds 1000 * n, reporting the observed acceptance rate.
    """
    if n < 0:
        raise SpecError("n", f"sample count must be nonnegative, got {n}")
    m = dists.nparams
    out = np.empty((n, m))
    budget = _REJECTION_FACTOR * max(n, 1)
    rejected = 0
    pending = np.arange(n)
    attempt = 0
    while pending.size:
        U = _slot_uniforms(seed, pending, m, attempt)
        X = np.empty((pending.size, m))
        for j, p in enumerate(dists.params):
            X[:, j] = p.ppf(U[:, j])
        if constraint is None:
            ok = np.ones(pending.size, dtype=bool)
        else:
            ok = constraint.evaluate(X) <= 0.0
        out[pending[ok]] = X[ok]
        rejected += int(np.count_nonzero(~ok))
        pending = pending[~ok]
        attempt += 1
        if pending.size and rejected > budget:
            accepted = n - pending.size
            rate = max(accepted, 1) / (max(accepted, 1) + rejected)
            raise CvarSynthError(
                "constraint_too_tight",
                f"rejected {rejected} draws for {accepted} accepted "
                f"(acceptance rate ~{rate:.2e}, limit {budget} rejections)",
            )
    return ScenarioSet(out, seed=seed, param_names=dists.names, rejected=rejected)


# ---------------------------------------------------------------------------
# Certification bound
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class CertifyConfig:
    """Violation level ``epsilon`` and confidence parameter ``gamma``.

    With N >= sample_bound(cfg) i.i.d. samples all satisfying a level
    test, the probability that the true violation mass exceeds epsilon
    is at most gamma.
    """

    epsilon: float
    gamma: float

    def __post_init__(self):
        for field in ("epsilon", "gamma"):
            v = getattr(self, field)
            if not 0.0 < v < 1.0:
                raise SpecError(field, f"must lie strictly in (0, 1), got {v}")


def sample_bound(cfg: CertifyConfig) -> int:
    """Smallest N with (1 - epsilon)^N <= gamma: N = ceil(ln g / ln(1-e))."""
    ratio = math.log(cfg.gamma) / math.log(1.0 - cfg.epsilon)
    return max(int(math.ceil(ratio)), 1)


# ---------------------------------------------------------------------------
# Scenario files
# ---------------------------------------------------------------------------


def save_scenarios(csv_path, scen: ScenarioSet, sidecar_path=None):
    """Write samples as CSV (one row per sample) plus a JSON sidecar.

    The sidecar records seed, generator id, parameter names and the
    rejection count, so a set can be re-drawn and byte-compared.
    """
    csv_path = str(csv_path)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", *scen.param_names])
        for i, row in enumerate(scen.samples):
            writer.writerow([i, *[repr(float(v)) for v in row]])
    side = sidecar_path or csv_path + ".json"
    with open(side, "w") as fh:
        json.dump(
            {
                "seed": scen.seed,
                "generator": scen.generator,
                "n": scen.n,
                "param_names": list(scen.param_names),
                "rejected": scen.rejected,
            },
            fh,
            indent=1,
        )
        fh.write("\n")


def load_scenarios(csv_path, sidecar_path=None) -> ScenarioSet:
    csv_path = str(csv_path)
    side = sidecar_path or csv_path + ".json"
    try:
        with open(side) as fh:
            meta = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise SpecError("scenario_sidecar", f"cannot read {side}: {exc}")
    rows = []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        names = tuple(header[1:])
        for rec in reader:
            rows.append([float(v) for v in rec[1:]])
    samples = np.asarray(rows, dtype=float).reshape(len(rows), len(names))
    if meta.get("param_names") and tuple(meta["param_names"]) != names:
        raise SpecError("scenario_sidecar", "parameter names disagree with CSV header")
    return ScenarioSet(
        samples,
        seed=int(meta.get("seed", -1)),
        param_names=names,
        rejected=int(meta.get("rejected", 0)),
        generator=meta.get("generator", GENERATOR_ID),
    )
