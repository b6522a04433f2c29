"""Release-gate checks: gradients, loss identities, product identities, AUC."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List

import numpy as np

from . import autodiff as ad
from . import losses
from .embedding import pair_count, pair_layout, products
from .metrics import auc, pairwise_auc
from .model import CETN, ModelConfig, through_connect

EPS = 1e-6
GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class SelfCheckReport:
    results: List[CheckResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> List[CheckResult]:
        return [r for r in self.results if not r.passed]


# ---------------------------------------------------------------------------
# per-operation gradient checks


def _u(rng, *shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def op_cases(rng: np.random.Generator) -> Dict[str, tuple]:
    """name -> (graph builder, parameter arrays). Each builder reduces to a scalar
    through a fixed random projection so every output entry is exercised."""

    def proj(shape):
        return rng.uniform(-1, 1, size=shape)

    def scalar(tape, out, w):
        return ad.sum(ad.mul(out, tape.constant(w)))

    cases = {}

    def add_case(name, fn, params, out_shape):
        w = proj(out_shape)
        cases[name] = (lambda tape, v, fn=fn, w=w: scalar(tape, fn(tape, v), w), params)

    add_case("matmul", lambda t, v: ad.matmul(v["a"], v["b"]), {"a": _u(rng, 3, 4), "b": _u(rng, 4, 2)}, (3, 2))
    add_case("add", lambda t, v: ad.add(v["a"], v["b"]), {"a": _u(rng, 3, 4), "b": _u(rng, 3, 4)}, (3, 4))
    add_case("add_scalar", lambda t, v: ad.add(v["a"], v["s"]), {"a": _u(rng, 3, 4), "s": _u(rng, 1)}, (3, 4))
    add_case("sub", lambda t, v: ad.sub(v["a"], v["b"]), {"a": _u(rng, 3, 4), "b": _u(rng, 3, 4)}, (3, 4))
    add_case("mul", lambda t, v: ad.mul(v["a"], v["b"]), {"a": _u(rng, 3, 4), "b": _u(rng, 3, 4)}, (3, 4))
    add_case("mul_scalar", lambda t, v: ad.mul(v["s"], v["a"]), {"a": _u(rng, 3, 4), "s": _u(rng, 1)}, (3, 4))
    add_case("scale", lambda t, v: ad.scale(v["a"], -1.7), {"a": _u(rng, 3, 4)}, (3, 4))
    add_case("add_row", lambda t, v: ad.add_row(v["a"], v["b"]), {"a": _u(rng, 3, 4), "b": _u(rng, 4)}, (3, 4))
    for act in ("leaky_relu", "relu", "tanh", "sigmoid", "exp"):
        add_case(act, lambda t, v, act=act: ad.elementwise(act, v["a"]), {"a": _u(rng, 3, 4)}, (3, 4))
    add_case("log", lambda t, v: ad.log(v["a"]), {"a": _u(rng, 3, 4, lo=0.2, hi=2.0)}, (3, 4))
    add_case("clip", lambda t, v: ad.clip(v["a"], -1.0, 1.0), {"a": _u(rng, 3, 4)}, (3, 4))
    add_case("sum", lambda t, v: ad.sum(v["a"], axis=1), {"a": _u(rng, 3, 4)}, (3,))
    add_case("mean", lambda t, v: ad.mean(v["a"], axis=0), {"a": _u(rng, 3, 4)}, (4,))
    add_case("sum_all", lambda t, v: ad.reshape(ad.sum(v["a"]), (1,)), {"a": _u(rng, 3, 4)}, (1,))
    add_case("logsumexp", lambda t, v: ad.logsumexp(v["a"], axis=1), {"a": _u(rng, 3, 4)}, (3,))
    add_case(
        "concat",
        lambda t, v: ad.concat([v["a"], v["b"]], axis=1),
        {"a": _u(rng, 3, 2), "b": _u(rng, 3, 3)},
        (3, 5),
    )
    add_case("reshape", lambda t, v: ad.reshape(v["a"], (2, 6)), {"a": _u(rng, 3, 4)}, (2, 6))
    for act in ("leaky_relu", "relu", "tanh", "sigmoid", "none"):
        add_case(
            f"dense_{act}",
            lambda t, v, act=act: ad.dense(v["x"], v["w"], v["b"], act),
            {"x": _u(rng, 3, 4), "w": _u(rng, 4, 5), "b": _u(rng, 5)},
            (3, 5),
        )
    idx = np.array([0, 2, 2, 3, 1, 0])
    add_case("take_columns", lambda t, v: ad.take_columns(v["a"], idx), {"a": _u(rng, 3, 4)}, (3, 6))
    rows = np.array([[0, 3], [3, 1], [4, 4]])
    add_case("embedding_lookup", lambda t, v: ad.embedding_lookup(v["E"], rows), {"E": _u(rng, 5, 3)}, (3, 6))
    add_case("l2_normalize_rows", lambda t, v: ad.l2_normalize_rows(v["a"]), {"a": _u(rng, 3, 4)}, (3, 4))
    add_case(
        "gram_logsumexp",
        lambda t, v: ad.gram_logsumexp(v["a"], v["c"], scale=1.3, chunk=2),
        {"a": _u(rng, 5, 3), "c": _u(rng, 5, 3)},
        (5,),
    )
    add_case(
        "products",
        lambda t, v: ad.concat(list(products(v["e"], 3, 2)), axis=1),
        {"e": _u(rng, 2, 6)},
        (2, pair_count(3) * 3),
    )
    return cases


def check_ops(trials: int = 5, seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    worst: Dict[str, float] = {}
    for _ in range(trials):
        for name, (fn, params) in op_cases(rng).items():
            rep = ad.grad_check(fn, params, EPS, GRAD_TOL)
            worst[name] = max(worst.get(name, 0.0), rep.max_error)
    return [CheckResult(f"grad:{k}", v < GRAD_TOL, f"max rel err {v:.2e}") for k, v in worst.items()]


# ---------------------------------------------------------------------------
# full-model gradient check


def tiny_model(kind="cetn", ablations=(), seed=0, **overrides) -> CETN:
    cfg = ModelConfig(
        kind=kind, ablations=tuple(ablations), embedding_dim=4, value_dim=4,
        hidden_dims=(6, 5), embedding_std=0.5, **overrides,
    )
    model = CETN(cfg, [5, 4, 6])
    model.init_params(seed)
    return model


def synthetic_batch(model: CETN, n: int = 4, seed: int = 1):
    rng = np.random.default_rng(seed)
    idx = np.stack([rng.integers(0, s, size=n) for s in model.vocab_sizes], axis=1)
    labels = np.arange(n) % 2
    return idx, labels.astype(float)


def model_loss_fn(model: CETN, idx, labels, weights=None, noise_seed=7, contrastive="do_infonce") -> Callable:
    weights = weights or losses.LossWeights(0.2, 0.3, 0.2, 0.2)

    def f(tape, pv):
        logit, spaces, _ = model.forward(tape, idx, np.random.default_rng(noise_seed), params=pv)
        ctr = losses.logloss(ad.sigmoid(logit), labels)
        if model.is_simmhn:
            return ctr
        return losses.total_loss(ctr, spaces[0].V, spaces[1].V, spaces[2].V, weights, model.variant.ablations, contrastive).total

    return f


def check_model_gradients() -> List[CheckResult]:
    out = []
    for kind, abl in (("cetn", ()), ("cetn", ("T",)), ("simmhn", ())):
        model = tiny_model(kind, abl)
        idx, labels = synthetic_batch(model)
        rep = ad.grad_check(model_loss_fn(model, idx, labels), model.params, EPS, GRAD_TOL)
        label = model.variant.label
        out.append(CheckResult(f"grad:full-{label}", rep.passed, f"max rel err {rep.max_error:.2e}"))
    return out


# ---------------------------------------------------------------------------
# loss identities


def do_infonce_direct(v1: np.ndarray, v2: np.ndarray, tau: float) -> float:
    """Plain evaluation of the denominator-only InfoNCE (no stabilisation)."""
    a = v1 / np.linalg.norm(v1, axis=1, keepdims=True)
    c = v2 / np.linalg.norm(v2, axis=1, keepdims=True)
    sim = a @ c.T
    num = np.exp(1.0 / tau)
    return float(np.mean([-np.log(num / np.exp(sim[i] / tau).sum()) for i in range(len(a))]))


def do_infonce_split(v1: np.ndarray, v2: np.ndarray, tau: float) -> float:
    """Diagonal term separated from the off-diagonal sum, 1/tau subtracted."""
    a = v1 / np.linalg.norm(v1, axis=1, keepdims=True)
    c = v2 / np.linalg.norm(v2, axis=1, keepdims=True)
    sim = a @ c.T
    n = len(a)
    vals = []
    for i in range(n):
        off = sum(np.exp(sim[i, j] / tau) for j in range(n) if j != i)
        vals.append(np.log(np.exp(sim[i, i] / tau) + off) - 1.0 / tau)
    return float(np.mean(vals))


def _var_loss(fn, v1, v2, tau):
    tape = ad.Tape()
    return float(fn(tape.var(v1), tape.var(v2), tau).value)


def check_loss_identities(batches: int = 100, seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    eq, split_gap, diff_gap, total_gap = 0.0, 0.0, 0.0, 0.0
    for _ in range(batches):
        b = int(rng.integers(2, 12))
        d = int(rng.integers(2, 9))
        tau = float(rng.uniform(0.1, 1.0))
        v1, v2 = rng.normal(size=(b, d)), rng.normal(size=(b, d))
        ours = _var_loss(losses.do_infonce, v1, v2, tau)
        eq = max(eq, abs(ours - do_infonce_direct(v1, v2, tau)))
        split_gap = max(split_gap, abs(ours - do_infonce_split(v1, v2, tau)))
        a = v1 / np.linalg.norm(v1, axis=1, keepdims=True)
        c = v2 / np.linalg.norm(v2, axis=1, keepdims=True)
        expected = np.mean(((a * c).sum(axis=1) - 1.0) / tau)
        diff = ours - _var_loss(losses.infonce, v1, v2, tau)
        diff_gap = max(diff_gap, abs(diff - expected))

        tape = ad.Tape()
        w = losses.LossWeights(*rng.uniform(0, 1, size=3), tau)
        ctr = tape.var(rng.uniform(0.1, 1.0))
        vs = [tape.var(rng.normal(size=(b, d))) for _ in range(3)]
        br = losses.total_loss(ctr, *vs, w)
        recomposed = br.ctr + w.alpha * br.cl + w.beta1 * br.cos1 + w.beta2 * br.cos2
        total_gap = max(total_gap, abs(float(br.total.value) - recomposed))
    return [
        CheckResult("loss:do-infonce-direct", eq < 1e-10, f"max gap {eq:.2e}"),
        CheckResult("loss:do-infonce-split-form", split_gap < 1e-10, f"max gap {split_gap:.2e}"),
        CheckResult("loss:infonce-difference", diff_gap < 1e-10, f"max gap {diff_gap:.2e}"),
        CheckResult("loss:total-decomposition", total_gap < 1e-12, f"max gap {total_gap:.2e}"),
    ]


# ---------------------------------------------------------------------------
# structural identities


def check_structure(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    gap = 0.0
    counts_ok = True
    for f in range(1, 8):
        d = int(rng.integers(1, 6))
        tape = ad.Tape()
        e = tape.var(rng.normal(size=(5, f * d)))
        ep, ip = products(e, f, d)
        p = pair_count(f)
        counts_ok &= ip.shape == (5, p) and ep.shape == (5, p * d) and len(pair_layout(f, d)[2]) == f * (f + 1) // 2
        gap = max(gap, float(np.abs(ep.value.reshape(5, p, d).sum(axis=2) - ip.value).max()))

    model = tiny_model("cetn")
    for name in model.params:
        if name.startswith(("ep.v.", "ip.v.")):
            model.params[name][...] = 0.0
    idx, _ = synthetic_batch(model)
    tape = ad.Tape()
    _, spaces, _ = model.forward(tape, idx, np.random.default_rng(3))
    main = spaces[0].V.value
    homo = max(float(np.abs(spaces[1].V.value - main).max()), float(np.abs(spaces[2].V.value - main).max()))
    return [
        CheckResult("struct:pair-identity", gap < 1e-12, f"max gap {gap:.2e}"),
        CheckResult("struct:pair-count", bool(counts_ok)),
        CheckResult("struct:zero-aux-through", homo == 0.0, f"max |V'-V|,|V''-V| = {homo:.2e}"),
        check_residual_special_case(rng),
    ]


def check_residual_special_case(rng) -> CheckResult:
    """A through connection whose shallow branch is the identity is a residual
    connection y = F(x) + x, with gradient flowing through both branches."""
    x0 = rng.normal(size=(4, 6))
    w0 = rng.normal(size=(6, 6))
    tape = ad.Tape()
    x, w = tape.var(x0), tape.var(w0)
    y = through_connect(ad.tanh(x @ w), x)
    ad.backward(tape, ad.sum(y))
    expected_y = np.tanh(x0 @ w0) + x0
    expected_gx = 1.0 + (1.0 - np.tanh(x0 @ w0) ** 2) @ w0.T
    ok = np.array_equal(y.value, expected_y) and np.allclose(x.grad, expected_gx, rtol=0, atol=1e-12)
    try:
        through_connect(ad.tanh(x @ w), tape.var(np.zeros((4, 5))))
        ok = False
    except ad.DimensionError:
        pass
    return CheckResult("struct:residual-special-case", bool(ok))


def check_auc(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    gap = 0.0
    for n, levels in ((50, 3), (500, 10), (2000, 25), (2000, None)):
        scores = rng.integers(0, levels, size=n).astype(float) if levels else rng.normal(size=n)
        labels = rng.integers(0, 2, size=n)
        labels[:2] = (0, 1)
        gap = max(gap, abs(auc(scores, labels) - pairwise_auc(scores, labels)))
    return [CheckResult("auc:pairwise-oracle", gap < 1e-12, f"max gap {gap:.2e}")]


def run(op_trials: int = 5) -> SelfCheckReport:
    start = time.perf_counter()
    report = SelfCheckReport()
    report.results += check_ops(op_trials)
    report.results += check_model_gradients()
    report.results += check_loss_identities()
    report.results += check_structure()
    report.results += check_auc()
    report.seconds = time.perf_counter() - start
    return report
