"""Central finite-difference checks for every registered kernel and both task losses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import crf, rc  # noqa: F401  (registers the CRF kernels)
from . import tensor as T
from .tensor import KERNELS, Tensor

TOLERANCE = 1e-6
STEP = 1e-5


def numerical_gradient(f: Callable[[list[np.ndarray]], float], inputs: list[np.ndarray],
                       which: int, h: float = STEP) -> np.ndarray:
    x = inputs[which]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        up = f(inputs)
        x[idx] = orig - h
        down = f(inputs)
        x[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm error scaled by the larger max-norm of the two gradients."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


@dataclass
class Case:
    fn: Callable[..., Tensor]
    inputs: list[np.ndarray]
    differentiable: tuple[int, ...] | None = None


def check_case(case: Case, rng: np.random.Generator, h: float = STEP) -> float:
    """Worst relative error over the differentiable inputs of one case.

    The scalar probed is ``sum(out * R)`` for a fixed random ``R``, which
    exercises every output element's backward path.
    """
    inputs = [np.array(x, dtype=np.float64) for x in case.inputs]
    diff = case.differentiable if case.differentiable is not None else tuple(range(len(inputs)))
    probe_shape = np.asarray(case.fn(*[Tensor(x) for x in inputs]).data).shape
    R = rng.standard_normal(probe_shape)

    def scalar(xs):
        return float((np.asarray(case.fn(*[Tensor(x) for x in xs]).data) * R).sum())

    leaves = [Tensor(x.copy(), requires_grad=i in diff) for i, x in enumerate(inputs)]
    out = case.fn(*leaves)
    T.backward(T.tsum(T.mul(out, Tensor(R))))
    worst = 0.0
    for i in diff:
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(inputs[i])
        numeric = numerical_gradient(scalar, inputs, i, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _row_mask(rng, shape) -> np.ndarray:
    mask = rng.random(shape) < 0.6
    rows = mask.reshape(-1, shape[-1])
    for r in rows:
        if not r.any():
            r[rng.integers(shape[-1])] = True
    return rows.reshape(shape)


def _n(rng, *shape):
    return rng.standard_normal(shape)


def _sample(name: str, rng: np.random.Generator) -> Case:
    if name in ("add", "sub", "mul"):
        op = KERNELS[name]
        return Case(op, [_n(rng, 2, 3, 4), _n(rng, 3, 1)])
    if name == "scale":
        c = float(rng.standard_normal())
        return Case(lambda a: T.scale(a, c), [_n(rng, 3, 4)])
    if name == "matmul":
        return Case(T.matmul, [_n(rng, 2, 3, 4), _n(rng, 4, 5)])
    if name in ("tanh", "gelu", "exp"):
        return Case(KERNELS[name], [_n(rng, 3, 4)])
    if name == "log":
        return Case(T.log, [np.exp(_n(rng, 3, 4))])
    if name == "sum":
        return Case(lambda a: T.tsum(a, axis=1), [_n(rng, 3, 4, 2)])
    if name == "mean":
        return Case(lambda a: T.mean(a, axis=(0, 2)), [_n(rng, 3, 4, 2)])
    if name == "reshape":
        return Case(lambda a: T.reshape(a, (4, 6)), [_n(rng, 2, 3, 4)])
    if name == "transpose":
        return Case(lambda a: T.transpose(a, (2, 0, 1)), [_n(rng, 2, 3, 4)])
    if name == "getitem":
        idx = rng.integers(0, 4, size=5)
        return Case(lambda a: T.getitem(a, (idx, slice(1, 3))), [_n(rng, 4, 3)])
    if name == "embedding":
        ids = rng.integers(0, 5, size=(2, 4))
        return Case(lambda t: T.embedding(t, ids), [_n(rng, 5, 3)])
    if name == "masked_softmax":
        mask = _row_mask(rng, (2, 1, 5, 5))
        return Case(lambda a: T.masked_softmax(a, mask), [_n(rng, 2, 3, 5, 5)])
    if name == "log_softmax":
        return Case(T.log_softmax, [_n(rng, 3, 6)])
    if name == "layer_norm":
        return Case(lambda x, g, b: T.layer_norm(x, g, b, 1e-5),
                    [_n(rng, 2, 3, 5), _n(rng, 5), _n(rng, 5)])
    if name == "crf_log_partition":
        lengths = np.array([4, 2])
        return Case(lambda e, a: crf.crf_log_partition(e, a, lengths), [_n(rng, 2, 4, 3), _n(rng, 4, 3)])
    if name == "crf_sequence_score":
        lengths = np.array([4, 1])
        tags = rng.integers(0, 3, size=(2, 4))
        return Case(lambda e, a: crf.crf_sequence_score(e, a, tags, lengths),
                    [_n(rng, 2, 4, 3), _n(rng, 4, 3)])
    raise KeyError(f"no gradient-check sampler for kernel {name!r}")


def _loss_case(name: str, rng: np.random.Generator) -> Case:
    if name == "crf_nll":
        lengths = np.array([5, 3, 1])
        tags = rng.integers(0, 4, size=(3, 5))
        return Case(lambda e, a: crf.crf_nll(e, tags, a, lengths), [_n(rng, 3, 5, 4), _n(rng, 5, 4)])
    if name == "rc_loss":
        gold = rng.integers(0, 6, size=4)
        return Case(lambda z: rc.rc_loss(z, gold), [_n(rng, 4, 6)])
    raise KeyError(name)


LOSSES = ("crf_nll", "rc_loss")

# kernels whose sampler substitutes a test double, keyed by name; lets a
# caller register extra kernels with their own samplers
EXTRA_SAMPLERS: dict[str, Callable[[np.random.Generator], Case]] = {}


@dataclass
class CheckResult:
    name: str
    max_error: float
    trials: int

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def run_grad_checks(trials: int = 20, seed: int = 0, names=None) -> list[CheckResult]:
    """One result per registered kernel, then one per task loss."""
    results = []
    kernel_names = list(KERNELS) if names is None else [n for n in names if n in KERNELS]
    loss_names = list(LOSSES) if names is None else [n for n in names if n in LOSSES]
    for offset, name in enumerate(kernel_names + loss_names):
        rng = np.random.default_rng([seed, offset])
        worst = 0.0
        for _ in range(trials):
            if name in LOSSES:
                case = _loss_case(name, rng)
            elif name in EXTRA_SAMPLERS:
                case = EXTRA_SAMPLERS[name](rng)
            else:
                case = _sample(name, rng)
            worst = max(worst, check_case(case, rng))
        results.append(CheckResult(name, worst, trials))
    return results


def format_report(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check'.ljust(width)}  max_rel_err  status"]
    for r in results:
        lines.append(f"{r.name.ljust(width)}  {r.max_error:11.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
