import numpy as np
import pytest

from cliq.corpus import QueryPool
from cliq.extractsim import (
    INT4_LIKE,
    INT8_LIKE,
    STRATEGY_CLIQ,
    STRATEGY_RANDOM,
    QuantizedTeacher,
    SeparationError,
    SimWorld,
    fidelity,
    kd_loss,
    make_world,
    probe_grid,
    run_budget_experiment,
    save_fidelity_csv,
    teacher_full_response,
    teacher_respond,
    train_student,
)

# --------------------------------------------------------------------- world


def test_world_zipf_zero_uniform_masses():
    world = make_world(k_true=5, dim=16, pool_size=50, zipf_s=0.0, seed=1)
    assert np.allclose(world.cluster_mass, 0.2)


def test_world_zipf_mass_ratio_oracle():
    world = make_world(k_true=30, dim=32, pool_size=100, zipf_s=1.3, seed=2)
    ratio = world.cluster_mass[0] / world.cluster_mass[29]
    assert ratio == pytest.approx(30**1.3, rel=1e-12)
    assert world.cluster_mass.sum() == pytest.approx(1.0)


def test_world_duplicate_seeds_identical():
    a = make_world(k_true=4, dim=8, pool_size=40, zipf_s=1.0, seed=7)
    b = make_world(k_true=4, dim=8, pool_size=40, zipf_s=1.0, seed=7)
    assert np.array_equal(a.prototypes, b.prototypes)
    assert np.array_equal(a.embeddings, b.embeddings)
    assert np.array_equal(a.labels, b.labels)
    c = make_world(k_true=4, dim=8, pool_size=40, zipf_s=1.0, seed=8)
    assert not np.array_equal(a.embeddings, c.embeddings)


def test_world_separation_recorded_and_enforced():
    world = make_world(k_true=10, dim=32, pool_size=20, zipf_s=0.5, seed=3)
    gram = world.prototypes @ world.prototypes.T
    np.fill_diagonal(gram, -1.0)
    assert gram.max() < 0.5
    assert world.max_prototype_cos == pytest.approx(gram.max())
    with pytest.raises(SeparationError):
        make_world(k_true=12, dim=2, pool_size=20, zipf_s=0.5, seed=0)


def test_world_validation():
    with pytest.raises(ValueError):
        make_world(k_true=1, dim=8, pool_size=10, zipf_s=1.0, seed=0)
    with pytest.raises(ValueError):
        make_world(k_true=5, dim=8, pool_size=3, zipf_s=1.0, seed=0)


def test_world_pool_labels_match_queries():
    world = make_world(k_true=3, dim=8, pool_size=30, zipf_s=1.0, seed=5)
    assert len(world.pool) == 30
    assert [q.cluster_id for q in world.pool] == world.labels.tolist()
    norms = np.linalg.norm(world.embeddings, axis=1)
    assert np.allclose(norms, 1.0, atol=1e-12)


# ------------------------------------------------------------------- teacher


def _manual_world(prototypes: np.ndarray) -> SimWorld:
    k, dim = prototypes.shape
    return SimWorld(
        k_true=k,
        dim=dim,
        prototypes=prototypes,
        cluster_mass=np.full(k, 1.0 / k),
        pool=QueryPool([]),
        embeddings=np.zeros((0, dim)),
        labels=np.zeros(0, dtype=np.int64),
        seed=0,
        max_prototype_cos=0.0,
    )


def test_teacher_noiseless_returns_nearest_prototype():
    world = make_world(k_true=4, dim=16, pool_size=40, zipf_s=1.0, seed=11)
    teacher = QuantizedTeacher(world, noise_sigma=0.0, quant_step=0.0)
    for i in range(10):
        x = world.embeddings[i]
        response = teacher_respond(teacher, x, seed=0)
        assert np.array_equal(response, teacher_full_response(world, x))
        nearest = int(np.argmax(world.prototypes @ x))
        assert np.array_equal(response, world.prototypes[nearest])


def test_teacher_grid_rounding_before_noise():
    proto = np.array([[0.30, np.sqrt(1 - 0.09)]])
    world = _manual_world(proto)
    teacher = QuantizedTeacher(world, noise_sigma=0.0, quant_step=0.25)
    response = teacher_respond(teacher, np.array([1.0, 0.0]), seed=0)
    assert response[0] == pytest.approx(0.25)
    assert response[1] == pytest.approx(1.0)


def test_teacher_repeat_queries_identical_noise():
    world = make_world(k_true=3, dim=8, pool_size=12, zipf_s=1.0, seed=4)
    teacher = QuantizedTeacher(world, noise_sigma=0.05, quant_step=0.1)
    x = world.embeddings[0]
    a = teacher_respond(teacher, x, seed=77)
    b = teacher_respond(teacher, x, seed=77)
    assert np.array_equal(a, b)
    different_seed = teacher_respond(teacher, x, seed=78)
    assert not np.array_equal(a, different_seed)
    other_query = teacher_respond(teacher, world.embeddings[1], seed=77)
    assert not np.array_equal(a, other_query)


# ------------------------------------------------------------------- student


def test_student_zero_loss_on_training_pairs():
    world = make_world(k_true=3, dim=8, pool_size=15, zipf_s=1.0, seed=6)
    teacher = QuantizedTeacher(world, noise_sigma=0.03, quant_step=0.05)
    pairs = [
        (world.embeddings[i], teacher_respond(teacher, world.embeddings[i], seed=1))
        for i in range(15)
    ]
    student = train_student(pairs)
    queries = np.vstack([q for q, _ in pairs])
    targets = np.vstack([r for _, r in pairs])
    assert kd_loss(student, queries, targets) == 0.0


def test_empty_student_zero_response_and_loss():
    student = train_student([])
    probe = np.array([1.0, 0.0, 0.0])
    assert np.array_equal(student.respond(probe), np.zeros(3))
    targets = np.array([[0.5, 0.5, 0.0], [1.0, 0.0, 0.0]])
    queries = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    expected = float(np.mean(np.sum(targets**2, axis=1)))
    assert kd_loss(student, queries, targets) == pytest.approx(expected)


def test_loss_decreases_with_budget_on_average():
    losses = {10: [], 60: []}
    for trial in range(20):
        world = make_world(k_true=6, dim=16, pool_size=80, zipf_s=1.0, seed=100 + trial)
        teacher = QuantizedTeacher(world, noise_sigma=0.0, quant_step=0.0)
        probes, _ = probe_grid(world)
        targets = np.vstack([teacher_full_response(world, p) for p in probes])
        rng = np.random.default_rng(trial)
        perm = rng.permutation(80)
        for budget in losses:
            pairs = [
                (world.embeddings[i], teacher_respond(teacher, world.embeddings[i], seed=3))
                for i in perm[:budget]
            ]
            losses[budget].append(kd_loss(train_student(pairs), probes, targets))
    assert np.mean(losses[60]) < np.mean(losses[10])


# ---------------------------------------------------------------- experiment


def test_full_budget_noiseless_fidelity_exactly_one():
    world = make_world(k_true=4, dim=8, pool_size=30, zipf_s=1.0, seed=9)
    teacher = QuantizedTeacher(world, noise_sigma=0.0, quant_step=0.0)
    pairs = [
        (world.embeddings[i], teacher_respond(teacher, world.embeddings[i], seed=5))
        for i in range(30)
    ]
    student = train_student(pairs)
    assert fidelity(student, world.embeddings, world) == 1.0


def test_fidelity_range():
    world = make_world(k_true=3, dim=8, pool_size=12, zipf_s=1.0, seed=10)
    student = train_student([])
    probes, _ = probe_grid(world)
    value = fidelity(student, probes, world)
    assert -1.0 <= value <= 1.0


def test_probe_grid_fixed_per_world_seed():
    world = make_world(k_true=3, dim=8, pool_size=12, zipf_s=1.0, seed=21)
    probes_a, labels_a = probe_grid(world)
    probes_b, labels_b = probe_grid(world)
    assert np.array_equal(probes_a, probes_b)
    assert np.array_equal(labels_a, labels_b)
    assert probes_a.shape == (3 * 6, 8)  # prototype + 5 jittered per cluster


def test_experiment_cliq_beats_random_and_budget_check(tmp_path):
    world = make_world(k_true=10, dim=24, pool_size=600, zipf_s=1.3, seed=33)
    teacher = QuantizedTeacher(world, noise_sigma=INT4_LIKE[1], quant_step=INT4_LIKE[0])
    table = run_budget_experiment(
        world,
        teacher,
        [STRATEGY_RANDOM, STRATEGY_CLIQ],
        budgets=[30, 60],
        m_per_cluster=3,
        trials=8,
        seed=2,
    )
    assert table.cliq_budget == 30  # all 10 clusters retained at m=3
    cliq_mean = table.mean_for(STRATEGY_CLIQ, 30)
    random_mean = table.mean_for(STRATEGY_RANDOM, 30)
    assert cliq_mean > random_mean
    # cliq at non-matching budget 60 is reported, not silently adjusted
    assert any("60" in m for m in table.mismatches)
    with pytest.raises(KeyError):
        table.mean_for(STRATEGY_CLIQ, 60)
    out = tmp_path / "fidelity.csv"
    save_fidelity_csv(table, out)
    header = out.read_text().splitlines()[0]
    assert header == "strategy,budget,noise_sigma,quant_step,mean_fidelity,std_fidelity,trials"


def test_experiment_noise_ordering_int8_vs_int4():
    world = make_world(k_true=8, dim=24, pool_size=400, zipf_s=1.2, seed=44)
    means = {}
    for name, (step, sigma) in (("int8", INT8_LIKE), ("int4", INT4_LIKE)):
        teacher = QuantizedTeacher(world, noise_sigma=sigma, quant_step=step)
        table = run_budget_experiment(
            world, teacher, [STRATEGY_RANDOM], budgets=[80], m_per_cluster=2,
            trials=10, seed=6,
        )
        means[name] = table.mean_for(STRATEGY_RANDOM, 80)
    assert means["int8"] >= means["int4"]


def test_experiment_validation():
    world = make_world(k_true=3, dim=8, pool_size=20, zipf_s=1.0, seed=50)
    teacher = QuantizedTeacher(world)
    with pytest.raises(ValueError, match="exceeds pool size"):
        run_budget_experiment(world, teacher, [STRATEGY_RANDOM], [25], 2, 1, 0)
    with pytest.raises(ValueError, match="unknown strategy"):
        run_budget_experiment(world, teacher, ["mystery"], [5], 2, 1, 0)


def test_cliq_selection_covers_every_retained_cluster():
    from cliq.extractsim import _cliq_selection

    world = make_world(k_true=6, dim=16, pool_size=240, zipf_s=1.1, seed=13)
    selected, retained = _cliq_selection(world, m_per_cluster=4, seed=3)
    assert selected.shape[0] == retained.num_clusters * 4
    # exactly m selections inside every retained cluster, by construction
    position_to_label = dict(zip(retained.positions.tolist(), retained.assignments.tolist()))
    picked_labels = [position_to_label[int(i)] for i in selected]
    counts = np.bincount(picked_labels, minlength=retained.num_clusters)
    assert np.all(counts == 4)
