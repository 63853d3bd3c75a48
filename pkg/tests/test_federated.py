import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from sklearn.base import clone

from fedtune.federated import (
    ClientDataset,
    ClientPopulation,
    FederatedLogisticRegression,
    FederatedWorkload,
    ModelState,
    aggregate_error,
    client_error,
    client_errors,
    client_opt,
    full_validation_error,
    generate_population,
    logistic_grad,
    logistic_loss,
    server_opt,
    train,
)
from fedtune.noise import repartition_iid

GOOD = dict(server_lr=1e-2, beta1=0.9, beta2=0.99, lr_decay=0.9999, client_lr=1e-1, momentum=0.0,
            weight_decay=5e-5, batch_size=32, epochs=1)


def label_hist(client, n_classes):
    return np.bincount(client.labels, minlength=n_classes) / client.n


# --- data generation -----------------------------------------------------------


def test_large_alpha_gives_near_uniform_labels():
    pop = generate_population(n_train=50, n_val=1, n_classes=5, alpha=100.0, samples_per_client=500, seed=0)
    tv = [0.5 * np.abs(label_hist(c, 5) - 0.2).sum() for c in pop.train_clients]
    # A max of 0.1 over 50 clients is exceeded by ~40% of seeds from sampling noise alone.
    assert np.median(tv) < 0.1 and max(tv) < 0.15


def test_small_alpha_skews_labels():
    def median_entropy(alpha):
        pop = generate_population(n_train=200, n_val=1, n_classes=10, alpha=alpha, samples_per_client=100, seed=1)
        return np.median([stats.entropy(label_hist(c, 10)) for c in pop.train_clients])

    assert median_entropy(0.1) < median_entropy(100.0)


def test_default_shape_matches_reference_workload():
    pop = generate_population(n_train=400, n_val=100, samples_per_client=100, n_classes=10, dim=4, seed=2)
    assert (pop.n_train, pop.n_val) == (400, 100)
    assert {c.n for c in pop.train_clients + pop.val_clients} == {100}


def test_generation_preconditions():
    with pytest.raises(ValueError):
        generate_population(alpha=0.0)
    with pytest.raises(ValueError):
        generate_population(n_val=0)
    with pytest.raises(ValueError):
        ClientDataset(np.zeros((0, 2)), np.zeros(0, dtype=int))


def test_weighting_modes(small_population):
    assert np.all(small_population.with_weighting("uniform").val_weights == 1)
    assert np.array_equal(small_population.val_weights, [c.n for c in small_population.val_clients])
    with pytest.raises(ValueError):
        small_population.with_weighting("bogus")


def test_population_regenerates_from_descriptor(small_population):
    again = ClientPopulation.from_json(small_population.to_json())
    for a, b in zip(again.val_clients, small_population.val_clients):
        assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)


def test_task_seed_shares_prototypes_not_partition():
    a = generate_population(n_train=5, n_val=5, n_classes=3, dim=2, seed=1, task_seed=9, alpha=5.0)
    b = generate_population(n_train=5, n_val=5, n_classes=3, dim=2, seed=2, task_seed=9, alpha=5.0)
    assert not np.array_equal(a.train_clients[0].labels, b.train_clients[0].labels)
    # Same prototypes: class means agree up to sampling noise.
    xa = np.concatenate([c.features for c in a.train_clients])
    ya = np.concatenate([c.labels for c in a.train_clients])
    xb = np.concatenate([c.features for c in b.train_clients])
    yb = np.concatenate([c.labels for c in b.train_clients])
    for k in range(3):
        if (ya == k).sum() > 30 and (yb == k).sum() > 30:
            assert np.linalg.norm(xa[ya == k].mean(0) - xb[yb == k].mean(0)) < 0.6


# --- client optimiser ------------------------------------------------------------


def toy_data(rng, n=12, dim=4, n_classes=3):
    return ClientDataset(rng.normal(size=(n, dim)), rng.integers(n_classes, size=n))


def test_gradient_matches_finite_differences(rng):
    data = toy_data(rng)
    w = rng.normal(size=4 * 3 + 3)
    g = logistic_grad(w, data.features, data.labels, 3)
    h = 1e-6
    fd = np.array([
        (logistic_loss(w + h * e, data.features, data.labels, 3) - logistic_loss(w - h * e, data.features, data.labels, 3))
        / (2 * h)
        for e in np.eye(w.size)
    ])
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-5


def test_zero_client_lr_gives_zero_delta(rng):
    data = toy_data(rng)
    for mu in (0.0, 0.5, 0.9):
        config = {**GOOD, "client_lr": 0.0, "momentum": mu, "batch_size": 4}
        assert np.all(client_opt(rng.normal(size=15), data, config, 3, rng) == 0)


def test_single_full_batch_step_is_plain_gradient_step(rng):
    data = toy_data(rng, n=20)
    w = rng.normal(size=15)
    config = {**GOOD, "client_lr": 0.3, "weight_decay": 0.0, "batch_size": 128}
    delta = client_opt(w, data, config, 3, rng)
    np.testing.assert_allclose(delta, -0.3 * logistic_grad(w, data.features, data.labels, 3), rtol=1e-12, atol=1e-15)


def test_momentum_and_weight_decay_follow_sgd_recursion(rng):
    data = toy_data(rng, n=8)
    w0 = rng.normal(size=15)
    config = {**GOOD, "client_lr": 0.1, "momentum": 0.5, "weight_decay": 0.01, "batch_size": 4}
    delta = client_opt(w0, data, config, 3, np.random.default_rng(5))
    order = np.random.default_rng(5).permutation(8)
    w, buf = w0.copy(), np.zeros(15)
    for idx in (order[:4], order[4:]):
        g = logistic_grad(w, data.features[idx], data.labels[idx], 3) + 0.01 * w
        buf = 0.5 * buf + g
        w = w - 0.1 * buf
    np.testing.assert_allclose(delta, w - w0, rtol=1e-12)


def test_short_final_batch_is_kept(rng):
    data = toy_data(rng, n=5)
    w0 = np.zeros(15)
    config = {**GOOD, "client_lr": 0.1, "weight_decay": 0.0, "batch_size": 2}
    delta = client_opt(w0, data, config, 3, np.random.default_rng(0))
    order = np.random.default_rng(0).permutation(5)
    w = w0.copy()
    for idx in (order[:2], order[2:4], order[4:]):
        w -= 0.1 * logistic_grad(w, data.features[idx], data.labels[idx], 3)
    np.testing.assert_allclose(delta, w - w0, rtol=1e-12)


# --- server optimiser --------------------------------------------------------------


def test_moment_free_adam_is_sign_step(rng):
    state = ModelState.zeros(2, 2)
    delta = rng.normal(size=6)
    config = {**GOOD, "beta1": 0.0, "beta2": 0.0, "lr_decay": 1.0, "server_lr": 0.01}
    server_opt(state, [delta], config)
    np.testing.assert_allclose(state.params, 0.01 * np.sign(delta), rtol=1e-6)


def test_zero_deltas_leave_weights(rng):
    state = ModelState.zeros(2, 2)
    server_opt(state, np.zeros((3, 6)), GOOD)
    assert np.all(state.params == 0) and state.round_index == 1


def test_lr_decay_applied_per_round():
    config = {**GOOD, "beta1": 0.0, "beta2": 0.0, "lr_decay": 0.9999, "server_lr": 0.01}
    state = ModelState.zeros(1, 1)
    server_opt(state, [np.ones(2)], config)
    first = state.params.copy()
    server_opt(state, [np.ones(2)], config)
    np.testing.assert_allclose(state.params - first, 0.01 * 0.9999, rtol=1e-6)


def test_server_mean_and_weighted_mean(rng):
    deltas = rng.normal(size=(3, 6))
    config = {**GOOD, "beta1": 0.0, "beta2": 0.0, "lr_decay": 1.0, "server_lr": 1.0}
    s = server_opt(ModelState.zeros(2, 2), deltas, config)
    np.testing.assert_allclose(s.params, np.sign(deltas.mean(0)), rtol=1e-6)
    s = server_opt(ModelState.zeros(2, 2), deltas, config, weights=[1, 0, 0])
    np.testing.assert_allclose(s.params, np.sign(deltas[0]), rtol=1e-6)
    assert np.all(s.server_v >= 0)


def test_server_rejects_bad_shapes():
    with pytest.raises(ValueError):
        server_opt(ModelState.zeros(2, 2), [np.zeros(5)], GOOD)
    with pytest.raises(ValueError):
        server_opt(ModelState.zeros(2, 2), np.zeros((0, 6)), GOOD)


# --- training ----------------------------------------------------------------------


def test_zero_rounds_returns_zero_model(small_population):
    state = train(GOOD, small_population, 0)
    assert np.all(state.params == 0) and state.round_index == 0


def test_training_is_deterministic(small_population):
    a = train(GOOD, small_population, 12, clients_per_round=5, seed=4)
    b = train(GOOD, small_population, 12, clients_per_round=5, seed=4)
    assert np.array_equal(a.params, b.params)
    c = train(GOOD, small_population, 12, clients_per_round=5, seed=5)
    assert not np.array_equal(a.params, c.params)


@pytest.mark.parametrize("split", [1, 7, 19])
def test_warm_start_is_bitwise_equal(small_population, split):
    whole = train(GOOD, small_population, 20, clients_per_round=5, seed=1, config_id=3)
    part = train(GOOD, small_population, split, clients_per_round=5, seed=1, config_id=3)
    rest = train(GOOD, small_population, 20 - split, clients_per_round=5, seed=1, config_id=3, state=part)
    assert np.array_equal(whole.params, rest.params)
    assert np.array_equal(whole.server_v, rest.server_v)
    assert rest.round_index == 20


def test_stacked_clients_match_reference_client_opt(small_population):
    from fedtune._rng import make_rng

    config = {**GOOD, "batch_size": 64, "momentum": 0.3}
    pop = small_population.with_weighting("uniform")
    state = train(config, pop, 1, clients_per_round=4, seed=2, config_id=1)
    rng = make_rng(2, 1, 0)
    chosen = rng.choice(pop.n_train, size=4, replace=False)
    w0 = np.zeros_like(state.params)
    deltas = [client_opt(w0, pop.train_clients[k], config, pop.n_classes, rng) for k in chosen]
    ref = server_opt(ModelState.zeros(pop.dim, pop.n_classes), deltas, config)
    np.testing.assert_allclose(state.params, ref.params, rtol=1e-9, atol=1e-12)


def test_good_hps_learn_on_easy_workload():
    pop = generate_population(n_train=100, n_val=50, n_classes=5, dim=10, alpha=100.0, samples_per_client=100, seed=0)
    assert full_validation_error(ModelState.zeros(10, 5).params, pop) > 0.7
    assert full_validation_error(train(GOOD, pop, 405, seed=0).params, pop) < 0.30


def test_loss_decreases_over_windows(small_population):
    x = np.concatenate([c.features for c in small_population.train_clients])
    y = np.concatenate([c.labels for c in small_population.train_clients])
    curves = []
    for seed in range(10):
        state, losses = None, []
        for _ in range(4):
            state = train(GOOD, small_population, 50, clients_per_round=5, seed=seed, state=state)
            losses.append(logistic_loss(state.params, x, y, small_population.n_classes))
        curves.append(losses)
    median = np.median(curves, axis=0)
    initial = np.log(small_population.n_classes)
    assert np.all(np.diff(np.concatenate([[initial], median])) < 0)


def test_divergence_is_contained(small_population):
    config = {**GOOD, "client_lr": 1.0, "server_lr": 0.1, "momentum": 0.9, "beta1": 0.0}
    state = train(config, small_population, 30, clients_per_round=5)
    err = full_validation_error(state.params, small_population)
    assert 0.0 <= err <= 1.0 and state.round_index == 30


# --- evaluation ----------------------------------------------------------------------


def test_zero_model_on_balanced_two_class_data(rng):
    data = ClientDataset(rng.normal(size=(10, 3)), np.array([0, 1] * 5))
    assert client_error(np.zeros(3 * 2 + 2), data, 2) == 0.5


def test_perfect_separation():
    x = np.array([[1.0], [2.0], [-1.0], [-3.0]])
    data = ClientDataset(x, np.array([1, 1, 0, 0]))
    params = np.array([-1.0, 1.0, 0.0, 0.0])
    assert client_error(params, data, 2) == 0.0


def test_client_error_matches_naive_loop():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n, d, c = rng.integers(1, 20), rng.integers(1, 5), rng.integers(2, 5)
        data = ClientDataset(rng.normal(size=(n, d)), rng.integers(c, size=n))
        params = rng.normal(size=d * c + c)
        if rng.random() < 0.3:
            params = np.round(params)  # exercise ties
        wrong = 0
        for i in range(n):
            s = [sum(data.features[i, j] * params[j * c + k] for j in range(d)) + params[d * c + k] for k in range(c)]
            best = 0
            for k in range(1, c):
                if s[k] > s[best]:
                    best = k
            wrong += best != data.labels[i]
        assert client_error(params, data, c) == pytest.approx(wrong / n, abs=1e-15)


def test_aggregate_error_examples():
    assert aggregate_error([0.2, 0.4], [1, 3]) == pytest.approx(0.35)
    assert aggregate_error([0.2, 0.4], [1, 1]) == pytest.approx(0.3)
    assert aggregate_error([0.7], [5]) == 0.7
    with pytest.raises(ValueError):
        aggregate_error([], [])
    with pytest.raises(ValueError):
        aggregate_error([0.1, 0.2], [1])
    with pytest.raises(ValueError):
        aggregate_error([0.1], [0])


@settings(max_examples=200, deadline=None)
@given(
    data=st.lists(st.tuples(st.floats(0, 1), st.floats(1e-3, 1e3)), min_size=1, max_size=30),
    scale=st.floats(1e-3, 1e3),
)
def test_aggregate_error_is_weight_scale_invariant(data, scale):
    errors, weights = map(np.array, zip(*data))
    assert abs(aggregate_error(errors, weights) - aggregate_error(errors, weights * scale)) <= 1e-12


def test_full_error_is_order_invariant(small_population, rng):
    params = train(GOOD, small_population, 10, clients_per_round=5).params
    direct = aggregate_error(client_errors(params, small_population.val_clients, 5), small_population.val_weights)
    assert full_validation_error(params, small_population) == direct
    perm = small_population.with_val_clients([small_population.val_clients[i] for i in rng.permutation(20)])
    assert full_validation_error(params, perm) == pytest.approx(direct, abs=1e-15)


def test_iid_repartition_shrinks_error_spread(oracle):
    params = train(GOOD, oracle, 100, seed=0).params
    iid = oracle.with_val_clients(repartition_iid(oracle.val_clients, 1.0, np.random.default_rng(0)))
    iqr = lambda pop: stats.iqr(client_errors(params, pop.val_clients, pop.n_classes))
    assert iqr(iid) < iqr(oracle)


def test_workload_adapter_matches_train(small_population):
    work = FederatedWorkload(small_population, clients_per_round=5, seed=8)
    state = work.advance(2, GOOD, None, 6)
    ref = train(GOOD, small_population, 6, 5, seed=8, config_id=2)
    assert np.array_equal(state.params, ref.params)
    assert np.array_equal(work.client_errors(state), client_errors(ref.params, small_population.val_clients, 5))


# --- estimator wrapper -------------------------------------------------------------------


def test_estimator_api(small_population):
    est = FederatedLogisticRegression(rounds=20, clients_per_round=5, random_state=1)
    assert clone(est).get_params() == est.get_params()
    est.fit(small_population)
    x = np.concatenate([c.features for c in small_population.val_clients])
    y = np.concatenate([c.labels for c in small_population.val_clients])
    assert est.predict(x).shape == y.shape
    assert est.validation_error_ == pytest.approx(full_validation_error(est.state_.params, small_population))
    with pytest.raises(ValueError):
        est.predict(x[:, :2])


def test_estimator_requires_fit():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        FederatedLogisticRegression().predict(np.zeros((1, 3)))
