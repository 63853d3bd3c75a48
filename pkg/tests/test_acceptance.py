"""Acceptance criteria. Each test prints one ``[C<n>] PASS|FAIL`` line and checks its time limit."""

import math
import tempfile
import time

import numpy as np
import pytest
from scipy import stats

from fedtune._rng import make_rng
from fedtune.federated import aggregate_error, logistic_grad, logistic_loss
from fedtune.harness import (
    ExperimentSpec,
    _Context,
    bootstrap_rs,
    build_pool,
    load_records,
    quantiles,
    run,
    selection_is_best,
)
from fedtune.noise import BudgetExhausted, EvalPolicy, PrivacyBudget, oneshot_topk, private_release
from fedtune.proxy import oneshot_proxy_rs
from fedtune.space import default_space
from fedtune.surrogate import SurrogateWorkload, make_surrogate, specialist_surrogate, surrogate_error
from fedtune.tuners import Evaluator, RandomSearch, make_tuner, rs_run

pytestmark = pytest.mark.acceptance


@pytest.fixture
def verdict(capsys):
    """``verdict(n, ok, detail, started)`` prints the criterion line, then asserts it passed in time."""

    def report(n, ok, detail, started, limit):
        elapsed = time.perf_counter() - started
        ok = bool(ok) and elapsed < limit
        with capsys.disabled():
            print(f"\n[C{n}] {'PASS' if ok else 'FAIL'}: {detail} ({elapsed:.1f}s, limit {limit}s)")
        assert ok, detail

    return report


@pytest.fixture(scope="module")
def oracle_pools():
    """Bootstrap pools on the heterogeneous oracle workload: the original partition and its iid repartition."""
    spec = ExperimentSpec.from_dict(dict(backend="fedtrain", grid={"subsample": [1, 10, "full"]}, trials=100))
    started = time.perf_counter()
    ctx = _Context(spec)
    pools = {0.0: ctx.pool(), 1.0: ctx.pool_at(1.0)}
    return pools, time.perf_counter() - started


def oracle_medians(pools, p):
    out = {}
    for s in (1, 10, None):
        records = bootstrap_rs(pools[p], EvalPolicy(subsample=s), 16, 100, seed=5, noise_seed=11)
        out[s] = np.array([r.full_error for r in records])
    return out


def check_ledger(ledger):
    return (ledger.consumed == sum(ledger.per_config.values()) <= 6480
            and all(v <= 405 for v in ledger.per_config.values()))


def test_c1_budget_exactness(verdict):
    started = time.perf_counter()
    work = SurrogateWorkload(make_surrogate(default_space(), seed=0))
    ev = Evaluator(work)
    rs_run(default_space(), ev, rng=np.random.default_rng(0))
    exact = ev.ledger.consumed == 6480 == 16 * 405
    invariants = all(
        check_ledger(make_tuner(name, random_state=seed).fit(work, EvalPolicy(subsample=1)).ledger_)
        for name in ("RS", "HB", "TPE", "BOHB") for seed in range(1)
    )
    verdict(1, exact and invariants, f"rs_run consumed {ev.ledger.consumed}; ledgers valid={invariants}",
            started, 1.0)


def test_c2_noiseless_oracle_equivalence(verdict):
    started = time.perf_counter()
    space = default_space()
    agree = 0
    for seed in range(50):
        response = make_surrogate(space, seed=seed)
        rs = RandomSearch(space, random_state=seed).fit(SurrogateWorkload(response))
        brute = []
        for cid in range(16):
            config = rs.evaluator_.configs[cid]
            errs = [surrogate_error(response, config, k, 405) for k in range(response.n_val)]
            brute.append(sum(errs) / len(errs))
        agree += rs.best_config_id_ == min(range(16), key=lambda i: (brute[i], i))
    verdict(2, agree == 50, f"{agree}/50 selections equal the brute-force argmin", started, 10)


def test_c3_dp_mechanisms(verdict):
    started = time.perf_counter()
    rng = np.random.default_rng(0)
    M, eps, S = 16, 100.0, 4
    draws = np.array([private_release(0.5, 1.0 / S, eps / M, rng) for _ in range(100_000)])
    target = 2 * (M / (eps * S)) ** 2
    rel = abs(draws.var() - target) / target
    exact = 0
    for i in range(100):
        scores = rng.random(int(rng.integers(2, 40)))
        k = int(rng.integers(1, len(scores) + 1))
        want = sorted(range(len(scores)), key=lambda j: (scores[j], j))[:k]
        exact += list(oneshot_topk(scores, k, 5, math.inf, 1, rng)) == want
    budget = PrivacyBudget(epsilon=2.0, total=7)
    for _ in range(7):
        budget.spend()
    try:
        budget.spend()
        guarded = False
    except BudgetExhausted:
        guarded = budget.epsilon_spent <= 2.0 + 1e-12
    work = SurrogateWorkload(make_surrogate(default_space(), seed=1))
    policies = (EvalPolicy(subsample=1, epsilon=1.0), EvalPolicy(subsample=1, epsilon=1.0, privacy_mode="oneshot_topk"))
    guarded &= all(
        make_tuner(name, random_state=s).fit(work, pol).eps_spent_ <= 1.0 + 1e-12
        for name in ("RS", "HB", "TPE", "BOHB") for s in range(2) for pol in policies
    )
    verdict(3, rel < 0.05 and exact == 100 and guarded,
            f"variance off by {rel:.2%}; exact top-k {exact}/100; ledger guarded={guarded}", started, 30)


def test_c4_subsampling_trend(verdict, oracle_pools):
    started = time.perf_counter()
    pools, build_time = oracle_pools
    errs = oracle_medians(pools, 0.0)
    m1, m10, mfull = (float(np.median(errs[s])) for s in (1, 10, None))
    p = stats.wilcoxon(errs[1], errs[None], alternative="greater").pvalue
    ok = m1 > m10 > mfull and m1 - mfull >= 0.02 and p < 0.05
    verdict(4, ok, f"medians s=1 {m1:.4f}, s=10 {m10:.4f}, full {mfull:.4f}; Wilcoxon p={p:.2g}",
            started - build_time, 300)


def test_c5_heterogeneity_trend(verdict, oracle_pools):
    started = time.perf_counter()
    pools, _ = oracle_pools
    het, iid = oracle_medians(pools, 0.0), oracle_medians(pools, 1.0)
    s1 = (float(np.median(het[1])), float(np.median(iid[1])))
    full = (float(np.median(het[None])), float(np.median(iid[None])))
    ok = s1[0] > s1[1] and abs(full[0] - full[1]) < 0.01
    verdict(5, ok, f"s=1 medians p=0 {s1[0]:.4f} vs p=1 {s1[1]:.4f}; full {full[0]:.4f} vs {full[1]:.4f}",
            started, 300)


def test_c6_biased_sampling_trend(verdict):
    started = time.perf_counter()
    space = default_space()
    pool = build_pool(SurrogateWorkload(specialist_surrogate(space, 100, seed=0)), space, 128, seed=1)
    errs = {b: np.array([r.full_error for r in bootstrap_rs(pool, EvalPolicy(subsample=1, bias_b=b), 16, 100,
                                                            seed=2, noise_seed=3)]) for b in (0, 3)}
    uniform = np.array([r.full_error for r in bootstrap_rs(pool, EvalPolicy(subsample=1), 16, 100,
                                                           seed=2, noise_seed=4)])
    gap = float(np.median(errs[3]) - np.median(errs[0]))
    p = stats.mannwhitneyu(errs[0], uniform).pvalue
    verdict(6, gap >= 0.10 and p > 0.05, f"median b=3 minus b=0 {gap:.3f}; b=0 vs uniform p={p:.2f}", started, 300)


def test_c7_privacy_trend(verdict):
    started = time.perf_counter()
    space = default_space()
    pool = build_pool(SurrogateWorkload(make_surrogate(space, 100, seed=0, heterogeneity=0.01)), space, 128, seed=1)
    rate = {}
    for name, policy in (("inf", EvalPolicy(subsample=1)), ("0.1", EvalPolicy(subsample=1, epsilon=0.1))):
        rate[name] = np.mean([selection_is_best(r) for r in bootstrap_rs(pool, policy, 16, 10_000, seed=2)])
    ok = abs(rate["0.1"] - 1 / 16) <= 0.02 and rate["inf"] > 0.90
    verdict(7, ok, f"best-config rate eps=0.1 {rate['0.1']:.2%} (uniform 6.25%), eps=inf {rate['inf']:.2%}",
            started, 120)


@pytest.mark.slow
def test_c8_tuner_degradation(verdict):
    started = time.perf_counter()
    clean, noisy = {"subsample": ["full"]}, {"subsample": [1], "epsilon": [100.0]}
    degradation = {}
    for tuner in ("RS", "HB", "TPE", "BOHB"):
        med = []
        for grid in (clean, noisy):
            spec = ExperimentSpec.from_dict(dict(backend="fedtrain", tuner=tuner, grid=grid, trials=8, master_seed=3))
            with tempfile.TemporaryDirectory() as out:
                run(spec, out)
                med.append(quantiles([r.full_error for r in load_records(f"{out}/records")])["median"])
        degradation[tuner] = med[1] - med[0]
    ok = degradation["RS"] <= degradation["HB"] and degradation["RS"] <= degradation["BOHB"]
    detail = ", ".join(f"{k} {v:+.3f}" for k, v in degradation.items())
    verdict(8, ok, f"median degradation noisy minus clean: {detail}", started, 1800)


def test_c9_proxy(verdict):
    started = time.perf_counter()
    space = default_space()
    response = make_surrogate(space, 100, seed=0)
    target = SurrogateWorkload(response)
    config, error, _ = oneshot_proxy_rs(target, target, space, 16, 405, 7)
    direct = RandomSearch(space, random_state=7).fit(target)
    identical = config == direct.best_config_ and error == direct.best_error_
    proxy = SurrogateWorkload(response.far_corner())
    rng = make_rng(9)
    random_median = float(np.median([target.full_error(space.sample(rng), 405) for _ in range(1000)]))
    mismatched = oneshot_proxy_rs(proxy, target, space, 16, 405, 7)[1]
    invariant = len({
        oneshot_proxy_rs(proxy, target, space, 16, 405, 7, pol)[1]
        for pol in (None, EvalPolicy(subsample=1, epsilon=1.0), EvalPolicy(subsample=3, bias_b=3.0))
    }) == 1
    ok = identical and mismatched > random_median and invariant
    verdict(9, ok, f"identical proxy bitwise={identical}; mismatched {mismatched:.3f} vs random median "
               f"{random_median:.3f}; policy-invariant={invariant}", started, 300)


def test_c10_numerical_core(verdict):
    started = time.perf_counter()
    rng = np.random.default_rng(0)
    d, C = 6, 4
    X, y = rng.normal(size=(30, d)), rng.integers(0, C, size=30)
    w = rng.normal(size=d * C + C) * 0.3
    grad = logistic_grad(w, X, y, C)
    h = 1e-6
    fd = np.array([(logistic_loss(w + h * e, X, y, C) - logistic_loss(w - h * e, X, y, C)) / (2 * h)
                   for e in np.eye(len(w))])
    grad_rel = float(np.max(np.abs(fd - grad)) / np.max(np.abs(grad)))
    errors, weights = rng.random(50), rng.random(50) + 0.1
    scale_gap = max(abs(aggregate_error(errors, weights * c) - aggregate_error(errors, weights))
                    for c in (1e-3, 0.5, 7.0, 1e4))
    exact = True
    for _ in range(200):
        vals = list(rng.normal(size=int(rng.integers(1, 30))))
        out = quantiles(vals)
        for q, key in ((0.25, "q1"), (0.5, "median"), (0.75, "q3")):
            s = sorted(vals)
            pos = q * (len(s) - 1)
            lo = math.floor(pos)
            hi = min(lo + 1, len(s) - 1)
            t = pos - lo
            want = s[hi] - (s[hi] - s[lo]) * (1 - t) if t >= 0.5 else s[lo] + (s[hi] - s[lo]) * t
            exact &= out[key] == want
    ok = grad_rel < 1e-5 and scale_gap <= 1e-12 and exact
    verdict(10, ok, f"gradient rel err {grad_rel:.1e}; weight-scale gap {scale_gap:.1e}; quantiles exact={exact}",
            started, 10)
