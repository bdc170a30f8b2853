"""Central finite-difference checks for every differentiable op and chain.

Each case draws random inputs, projects the output onto a random direction
to get a scalar, and compares the analytic gradient with
``(f(x + h e_i) - f(x - h e_i)) / 2h`` in float64.  Coordinates whose
perturbation moves any relu, max-pool or sampler cell onto a different
smooth piece are skipped and replaced.

The error measure is norm-wise::

    max_i |analytic_i - numeric_i| / max(max_i |analytic_i|, max_i |numeric_i|, 1e-12)
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import losses as L
from . import stn
from . import tensor as T
from .model import init_classifier, predict_logprobs

STEP = 1e-3
THRESHOLD = 1e-4


@dataclass
class Case:
    """``fn(*tensors) -> Tensor``; gradients are checked for ``arrays[i]`` with ``i in wrt``.

    ``sign`` is the expected ratio analytic / numeric: 1 normally, -1 for a
    gradient reversal, 0 for a detached path.
    """

    fn: Callable[..., T.Tensor]
    arrays: list
    wrt: tuple[int, ...] = (0,)
    sign: float = 1.0
    max_coords: int | None = None


@dataclass
class CheckResult:
    op: str
    trials: int
    max_rel_err: float
    threshold: float = THRESHOLD
    worst_seed: int | None = None
    seconds: float = 0.0
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.trials > 0 and self.max_rel_err < self.threshold


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(analytic), initial=0.0)),
                float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def _scalar(out: T.Tensor, proj: np.ndarray) -> T.Tensor:
    if out.ndim == 0:
        return T.scalar_mul(out, float(proj.ravel()[0]))
    return T.tsum(T.mul(out, proj))


def check_case(case: Case, rng: np.random.Generator, step: float = STEP) -> float:
    """Max relative error over the case's inputs; ``nan`` if no coordinate was usable."""
    arrays = [np.array(a, dtype=np.float64) for a in case.arrays]

    def evaluate(values):
        ts = [T.Tensor(v, requires_grad=(i in case.wrt)) for i, v in enumerate(values)]
        return ts, case.fn(*ts)

    with T.default_dtype(np.float64):
        ts, out = evaluate(arrays)
        proj = rng.standard_normal(out.shape)
        loss = _scalar(out, proj)
        base_pattern = T.graph_pattern(loss)
        if loss.requires_grad:
            loss.backward()
        worst = 0.0
        used = 0
        for i in case.wrt:
            analytic = ts[i].grad if ts[i].grad is not None else np.zeros_like(arrays[i])
            coords = np.arange(arrays[i].size)
            if case.max_coords is not None and coords.size > case.max_coords:
                coords = rng.permutation(coords)
            got_a, got_n = [], []
            for k in coords:
                if case.max_coords is not None and len(got_a) >= case.max_coords:
                    break
                vals = []
                usable = True
                for sgn in (1.0, -1.0):
                    shifted = [a.copy() for a in arrays]
                    shifted[i].flat[k] += sgn * step
                    _, o = evaluate(shifted)
                    s = _scalar(o, proj)
                    if T.graph_pattern(s) != base_pattern:
                        usable = False
                        break
                    vals.append(s.item())
                if not usable:
                    continue
                got_a.append(analytic.flat[k])
                got_n.append(case.sign * (vals[0] - vals[1]) / (2 * step))
            if not got_a:
                continue
            used += 1
            a, n = np.asarray(got_a), np.asarray(got_n)
            if case.sign == 0:
                err = float(np.max(np.abs(a), initial=0.0))
            else:
                err = relative_error(a, n)
            worst = max(worst, err)
    return worst if used else float("nan")


# case builders -----------------------------------------------------------

def _shape(rng, max_dims=4, max_extent=4, min_dims=1):
    nd = int(rng.integers(min_dims, max_dims + 1))
    return tuple(int(e) for e in rng.integers(1, max_extent + 1, size=nd))


def _broadcast_partner(rng, shape):
    out = list(shape)
    for ax in range(len(out)):
        if rng.random() < 0.3:
            out[ax] = 1
    if len(out) > 1 and rng.random() < 0.3:
        out = out[1:]
    return tuple(out)


def _binary(fn):
    def build(rng):
        shape = _shape(rng)
        other = _broadcast_partner(rng, shape)
        a, b = rng.standard_normal(shape), rng.standard_normal(other)
        if rng.random() < 0.5:
            a, b = b, a
        return Case(fn, [a, b], wrt=(0, 1))
    return build


def _unary(fn, sampler=None):
    def build(rng):
        shape = _shape(rng)
        x = sampler(rng, shape) if sampler else rng.standard_normal(shape)
        return Case(fn, [x])
    return build


def _scalar_mul(rng):
    c = float(rng.uniform(-3, 3))
    return Case(lambda x: T.scalar_mul(x, c), [rng.standard_normal(_shape(rng))])


def _matmul(rng):
    m, k, n = (int(v) for v in rng.integers(1, 5, size=3))
    batch = () if rng.random() < 0.5 else (int(rng.integers(1, 4)),)
    a = rng.standard_normal(batch + (m, k))
    b_shape = (k, n) if rng.random() < 0.5 else batch + (k, n)
    return Case(T.matmul, [a, rng.standard_normal(b_shape)], wrt=(0, 1))


def _exp(rng):
    return Case(T.exp, [rng.uniform(-2, 2, _shape(rng))])


def _reshape(rng):
    shape = _shape(rng)
    target = (-1,) if rng.random() < 0.3 else (-1, shape[-1])
    return Case(lambda t: T.reshape(t, target), [rng.standard_normal(shape)])


def _transpose(rng):
    shape = _shape(rng, min_dims=2)
    axes = tuple(int(a) for a in rng.permutation(len(shape)))
    return Case(lambda t: T.transpose(t, axes), [rng.standard_normal(shape)])


def _reduce(fn):
    def build(rng):
        shape = _shape(rng)
        choice = rng.integers(0, 3)
        axis = None if choice == 0 else int(rng.integers(0, len(shape)))
        keep = bool(rng.integers(0, 2))
        return Case(lambda t: fn(t, axis=axis, keepdims=keep), [rng.standard_normal(shape)])
    return build


def _log_softmax(rng):
    shape = _shape(rng, min_dims=1)
    axis = int(rng.integers(-len(shape), len(shape)))
    return Case(lambda t: T.log_softmax(t, axis=axis), [3 * rng.standard_normal(shape)])


def _concat(rng):
    shape = list(_shape(rng))
    axis = int(rng.integers(0, len(shape)))
    parts = []
    for _ in range(int(rng.integers(2, 4))):
        s = list(shape)
        s[axis] = int(rng.integers(1, 4))
        parts.append(rng.standard_normal(s))
    return Case(lambda *ts: T.concat(ts, axis=axis), parts, wrt=tuple(range(len(parts))))


def _getitem(rng):
    shape = _shape(rng, min_dims=2)
    x = rng.standard_normal(shape)
    kind = rng.integers(0, 3)
    if kind == 0:
        idx = slice(int(rng.integers(0, shape[0])), None)
    elif kind == 1:
        idx = rng.integers(0, shape[0], size=int(rng.integers(1, 5)))  # repeats accumulate
    else:
        idx = (slice(None), int(rng.integers(0, shape[1])))
    return Case(lambda t: T.getitem(t, idx), [x])


def _conv2d(rng):
    n, c, o = (int(v) for v in rng.integers(1, 4, size=3))
    padding = "same" if rng.random() < 0.5 else "valid"
    k = int(rng.choice([1, 3])) if padding == "same" else int(rng.integers(1, 4))
    h, w = (int(v) for v in rng.integers(max(k, 2), 5, size=2))
    x = rng.standard_normal((n, c, h, w))
    wt = rng.standard_normal((o, c, k, k))
    return Case(lambda a, b: T.conv2d(a, b, padding=padding), [x, wt], wrt=(0, 1))


def _max_pool(rng):
    n, c = (int(v) for v in rng.integers(1, 3, size=2))
    h, w = (2 * int(v) for v in rng.integers(1, 3, size=2))
    return Case(T.max_pool2d, [rng.standard_normal((n, c, h, w))])


def _grad_reverse(rng):
    return Case(T.grad_reverse, [rng.standard_normal(_shape(rng))], sign=-1.0)


def _stop_gradient(rng):
    x = rng.standard_normal(_shape(rng))
    # d/dx sum(proj * sg(x)) must be exactly 0 although the forward depends on x
    return Case(lambda t: T.add(T.stop_gradient(t), T.scalar_mul(T.tsum(T.stop_gradient(t)), 0.5)),
                [x], sign=0.0)


def _phi(rng, b):
    return (stn.IDENTITY_AFFINE + stn.AFFINE_CAP * rng.uniform(-1, 1, (b, 2, 3)))


def _bilinear_image(rng):
    b, c = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    h, w = (int(v) for v in rng.integers(2, 5, size=2))
    ho, wo = (int(v) for v in rng.integers(2, 5, size=2))
    x = rng.standard_normal((b, c, h, w))
    grid = rng.uniform(-1.2, 1.2, (b, ho, wo, 2))
    return Case(stn.bilinear_sample, [x, grid], wrt=(0,))


def _bilinear_grid(rng):
    case = _bilinear_image(rng)
    case.wrt = (1,)
    return case


def _affine_grid(rng):
    b = int(rng.integers(1, 3))
    ho, wo = (int(v) for v in rng.integers(2, 5, size=2))
    return Case(lambda p: stn.generate_grid(p, ho, wo), [_phi(rng, b)])


def _stn_phi(rng):
    b, c = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    h, w = (int(v) for v in rng.integers(2, 5, size=2))
    x = rng.standard_normal((b, c, h, w))

    def fn(phi, img):
        return stn.bilinear_sample(img, stn.generate_grid(phi, h, w))
    return Case(fn, [_phi(rng, b), x], wrt=(0, 1))


def _localize_chain(rng):
    """d(loss)/d(theta_t) through localize, grid, sampler; all localization params."""
    c = int(rng.choice([1, 3]))
    net = stn.init_localization(rng, (c, 8, 8))
    names = sorted(net.params)
    values = [net.params[k].data.astype(np.float64) for k in names]
    # move the output layer off zero so tanh and the sampler are exercised
    values[names.index("fc2.w")] = 0.5 * rng.standard_normal(values[names.index("fc2.w")].shape)
    x = rng.uniform(0, 1, (1, c, 8, 8))

    def fn(*params):
        for k, p in zip(names, params):
            net.params[k] = p
        return stn.spatial_transform(T.Tensor(x), net)
    return Case(fn, values, wrt=tuple(range(len(values))), max_coords=12)


def _logprobs(rng, b, k):
    return T.log_softmax(T.Tensor(2 * rng.standard_normal((b, k))), axis=-1).data


def _cross_entropy(rng):
    b, k = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    labels = rng.integers(0, k, size=b)
    return Case(lambda z: L.cross_entropy(T.log_softmax(z), labels),
                [2 * rng.standard_normal((b, k))])


def _kl(rng):
    b, k = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    clean = _logprobs(rng, b, k)
    return Case(lambda z: L.kl_consistency(clean, T.log_softmax(z)), [2 * rng.standard_normal((b, k))])


def _kl_clean_side(rng):
    b, k = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    aug = 2 * rng.standard_normal((b, k))
    return Case(lambda z, a: L.kl_consistency(T.stop_gradient(T.log_softmax(z)), T.log_softmax(a)),
                [2 * rng.standard_normal((b, k)), aug], wrt=(0,), sign=0.0)


def _entropy(rng):
    b, k = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    return Case(lambda z: L.entropy_min(T.log_softmax(z)), [2 * rng.standard_normal((b, k))])


def _total_loss(rng):
    w = L.LossWeights(*(float(v) for v in rng.uniform(0, 2, 3)))
    mode = "DA" if rng.random() < 0.5 else "DG"

    def fn(m, c, e, a):
        parts = {"l_m": T.tsum(m), "l_c": T.tsum(c), "l_adv": T.tsum(a)}
        if mode == "DA":
            parts["l_e"] = T.tsum(e)
        return L.total_loss(mode, parts, w)
    return Case(fn, [rng.standard_normal(3) for _ in range(4)], wrt=(0, 1, 2, 3))


def _adversarial_theta(rng):
    """GRL chain: d(KL(p, p(T(x))))/d(theta_t) must be the negated numeric slope."""
    c = 1
    net = stn.init_localization(rng, (c, 8, 8))
    clf = init_classifier(rng, 3, (c, 8, 8))
    names = sorted(net.params)
    values = [net.params[k].data.astype(np.float64) for k in names]
    values[names.index("fc2.w")] = 0.5 * rng.standard_normal(values[names.index("fc2.w")].shape)
    x = rng.uniform(0, 1, (2, c, 8, 8))
    with T.default_dtype(np.float64):
        clean = predict_logprobs(T.Tensor(x), clf).data

    def fn(*params):
        for k, p in zip(names, params):
            net.params[k] = p
        return L.kl_consistency(clean, predict_logprobs(stn.adversarial_transform(T.Tensor(x), net), clf))
    return Case(fn, values, wrt=tuple(range(len(values))), sign=-1.0, max_coords=8)


def _classifier(rng):
    c = int(rng.choice([1, 3]))
    k = int(rng.integers(2, 5))
    clf = init_classifier(rng, k, (c, 8, 8))
    names = sorted(clf.params)
    values = [clf.params[n].data.astype(np.float64) for n in names]
    x = rng.uniform(0, 1, (2, c, 8, 8))

    def fn(img, *params):
        for n, p in zip(names, params):
            clf.params[n] = p
        return predict_logprobs(img, clf)
    return Case(fn, [x] + values, wrt=tuple(range(len(values) + 1)), max_coords=8)


SUITE: dict[str, Callable[[np.random.Generator], Case]] = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "scalar_mul": _scalar_mul,
    "matmul": _matmul,
    "exp": _exp,
    "relu": _unary(T.relu),
    "tanh": _unary(T.tanh),
    "reshape": _reshape,
    "transpose": _transpose,
    "sum": _reduce(T.tsum),
    "mean": _reduce(T.mean),
    "log_softmax": _log_softmax,
    "concat": _concat,
    "getitem": _getitem,
    "conv2d": _conv2d,
    "max_pool2d": _max_pool,
    "grad_reverse": _grad_reverse,
    "stop_gradient": _stop_gradient,
    "bilinear_image": _bilinear_image,
    "bilinear_grid": _bilinear_grid,
    "affine_grid": _affine_grid,
    "stn_phi": _stn_phi,
    "localize_chain": _localize_chain,
    "adversarial_theta": _adversarial_theta,
    "cross_entropy": _cross_entropy,
    "kl_consistency": _kl,
    "kl_clean_side": _kl_clean_side,
    "entropy_min": _entropy,
    "total_loss": _total_loss,
    "classifier": _classifier,
}

# short names accepted by ``--ops``
GROUPS = {
    "bilinear": ("bilinear_image", "bilinear_grid", "stn_phi"),
    "stn": ("bilinear_image", "bilinear_grid", "affine_grid", "stn_phi", "localize_chain",
            "adversarial_theta"),
    "losses": ("cross_entropy", "kl_consistency", "kl_clean_side", "entropy_min", "total_loss"),
    "tensor": tuple(n for n in SUITE if n not in (
        "bilinear_image", "bilinear_grid", "affine_grid", "stn_phi", "localize_chain",
        "adversarial_theta", "cross_entropy", "kl_consistency", "kl_clean_side", "entropy_min",
        "total_loss", "classifier")),
}

# chains are slower; fewer trials still leave every op above 100 checked cases
DEFAULT_TRIALS = 100
CHAIN_TRIALS = {"localize_chain": 20, "adversarial_theta": 20, "classifier": 20}


def resolve_ops(ops: Sequence[str] | None) -> list[str]:
    if not ops:
        return list(SUITE)
    out: list[str] = []
    for name in ops:
        names = GROUPS.get(name, (name,))
        for n in names:
            if n not in SUITE:
                raise ValueError(f"unknown gradcheck op {n!r}; choose from "
                                 f"{', '.join(list(GROUPS) + list(SUITE))}")
            if n not in out:
                out.append(n)
    return out


def check_op(name: str, trials: int | None = None, seed: int = 0, step: float = STEP) -> CheckResult:
    builder = SUITE[name]
    trials = trials if trials is not None else CHAIN_TRIALS.get(name, DEFAULT_TRIALS)
    start = time.perf_counter()
    result = CheckResult(name, 0, 0.0)
    for t in range(trials):
        rng = np.random.default_rng([seed, t, sum(map(ord, name))])
        with T.default_dtype(np.float64):
            case = builder(rng)
        err = check_case(case, rng, step)
        if np.isnan(err):
            result.notes.append(f"trial {t}: every coordinate crossed a kink")
            continue
        result.trials += 1
        if err >= result.max_rel_err:
            result.max_rel_err, result.worst_seed = err, t
    result.seconds = time.perf_counter() - start
    return result


def run_suite(ops: Sequence[str] | None = None, trials: int | None = None,
              seed: int = 0) -> list[CheckResult]:
    return [check_op(name, trials, seed) for name in resolve_ops(ops)]


def format_results(results: Sequence[CheckResult]) -> str:
    lines = [f"{'op':<20} {'trials':>6} {'max_rel_err':>12}  status"]
    for r in results:
        lines.append(f"{r.op:<20} {r.trials:>6} {r.max_rel_err:>12.3e}  "
                     f"{'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
