import numpy as np
import pytest

from ialsim.aip import (
    AipTrainConfig,
    FeedForwardPredictor,
    GruPredictor,
    InfluenceDataset,
    InfluenceSample,
    PredictorVariant,
    TrainingDiverged,
    _gru_batch_step,
    _track_epoch,
    collect_dataset,
    empirical_head_marginals,
    evaluate_ce,
    fit_fixed_marginal,
    make_exact_oracle,
    make_untrained,
    train,
    uniform_random_policy,
)
from ialsim.core import DsetWindow, derive_seed, make_rng
from ialsim.exact import ToyDbnConfig, ToyDbnModel, ToyDbnSim
from ialsim.neural import Adam, AdamConfig, gradient_check, cross_entropy_from_logits


@pytest.fixture(scope="module")
def toy_sim():
    return ToyDbnSim(ToyDbnModel(ToyDbnConfig(b=6, cpt_seed=1, episode_len=6)))


def _policy(sim):
    return uniform_random_policy(sim.descriptor.action_count)


def test_collect_single_sample(toy_sim):
    ds = collect_dataset(toy_sim, _policy(toy_sim), 1, seed=0, k=8)
    assert len(ds) == 1
    assert ds.samples[0].window.shape[0] == 1
    assert ds.samples[0].t == 0


def test_collect_deterministic(toy_sim, tmp_path):
    a = collect_dataset(toy_sim, _policy(toy_sim), 50, seed=3, k=8)
    b = collect_dataset(toy_sim, _policy(toy_sim), 50, seed=3, k=8)
    pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    a.save(pa)
    b.save(pb)
    assert pa.read_bytes() == pb.read_bytes()


def test_collect_windows_match_manual_replay(toy_sim):
    ds = collect_dataset(toy_sim, _policy(toy_sim), 12, seed=9, k=3)
    # re-run the same episode by reusing the derived episode seed and the
    # recorded action effects implicitly via the recorded rows
    for ep_samples in ds.episodes():
        for i, s in enumerate(ep_samples):
            assert s.window.shape[0] == min(i + 1, 3)
        # consecutive windows overlap: previous window's tail equals the
        # next window's head
        for prev, cur in zip(ep_samples, ep_samples[1:]):
            k_overlap = min(prev.window.shape[0], cur.window.shape[0] - 1) \
                if cur.window.shape[0] <= 3 else 2
            assert np.array_equal(prev.window[-k_overlap:],
                                  cur.window[:-1][-k_overlap:])


def test_dataset_round_trip(tmp_path, toy_sim):
    ds = collect_dataset(toy_sim, _policy(toy_sim), 40, seed=5, k=4)
    path = tmp_path / "ds.jsonl"
    ds.save(path)
    loaded = InfluenceDataset.load(path)
    assert len(loaded) == len(ds)
    assert loaded.provenance == ds.provenance
    for a, b in zip(ds.samples, loaded.samples):
        assert np.array_equal(a.window, b.window)
        assert a.target == b.target and a.episode == b.episode and a.t == b.t


def test_split_is_episode_wise(toy_sim):
    ds = collect_dataset(toy_sim, _policy(toy_sim), 60, seed=7, k=8)
    train_set, val_set = ds.split(0.2, seed=0)
    train_eps = {s.episode for s in train_set.samples}
    val_eps = {s.episode for s in val_set.samples}
    assert train_eps.isdisjoint(val_eps)
    assert len(train_set) + len(val_set) == len(ds)


def test_empirical_marginal_matches_fresh_rollouts(toy_sim):
    ds = collect_dataset(toy_sim, _policy(toy_sim), 4000, seed=11, k=8)
    marg = empirical_head_marginals(ds)[0]
    # independent oracle: tally influence values over fresh rollouts
    rng = make_rng(999, "mc")
    counts = np.zeros(2)
    steps = 0
    ep = 0
    while steps < 4000:
        toy_sim.reset(derive_seed(999, "mc-episode", ep))
        done = False
        while not done and steps < 4000:
            counts[toy_sim.current_influence()[0]] += 1
            _, _, done = toy_sim.step(int(rng.integers(0, 2)))
            steps += 1
        ep += 1
    mc = counts / counts.sum()
    assert abs(marg[1] - mc[1]) < 0.02


def test_fixed_marginal_is_exact_dataset_frequency(toy_sim):
    ds = collect_dataset(toy_sim, _policy(toy_sim), 500, seed=13, k=8)
    variant = fit_fixed_marginal(ds)
    count1 = sum(s.target[0] for s in ds.samples)
    assert variant.impl.marginals[0][1] == count1 / 500
    probs = variant.predict(np.zeros((1, ds.dset_width), dtype=np.uint8))
    assert np.array_equal(probs[0], variant.impl.marginals[0])


def _synthetic_dataset(n_episodes, ep_len, width, rule, classes, seed, k=4):
    rng = make_rng(seed, "synth")
    samples = []
    for e in range(n_episodes):
        window = DsetWindow(width, k)
        for t in range(ep_len):
            row = rng.integers(0, 2, size=width).astype(np.uint8)
            window.append(row)
            samples.append(InfluenceSample(window.rows().copy(),
                                           rule(row, rng), e, t))
    prov = {"env_id": "synthetic", "fingerprint": "synthetic", "policy": "n/a",
            "seed": seed, "n": len(samples), "k": k, "dset_width": width,
            "influence_classes": list(classes)}
    return InfluenceDataset(samples, prov)


def test_ff_learns_deterministic_rule():
    rule = lambda row, rng: (int(row[0] ^ row[1]),)
    ds = _synthetic_dataset(200, 20, 6, rule, (2,), seed=1)
    variant, history = train(ds, AipTrainConfig(arch="ff", epochs=60, lr=3e-3,
                                                seed=0, ff_hidden=(32, 32)))
    assert history["val_ce"][-1] < 0.05
    assert variant.tag == "trained-ff"
    # final train CE never exceeds the initial one
    assert history["train_ce"][-1] <= history["train_ce"][0]


def test_training_reaches_entropy_floor_when_unpredictable():
    probs = np.array([0.3, 0.7])
    rule = lambda row, rng: (int(rng.random() < probs[1]),)
    ds = _synthetic_dataset(150, 20, 5, rule, (2,), seed=2)
    variant, history = train(ds, AipTrainConfig(arch="ff", epochs=40, seed=0,
                                                ff_hidden=(16,)))
    entropy = -(probs * np.log(probs)).sum()
    assert abs(history["val_ce"][-1] - entropy) < 0.05
    held = _synthetic_dataset(30, 20, 5, rule, (2,), seed=77)
    assert abs(evaluate_ce(variant, held) - entropy) < 0.05


def test_gru_learns_lagged_rule():
    # target = bit 0 of the row two steps back: requires memory
    def make(seed):
        rng = make_rng(seed, "lag")
        samples = []
        for e in range(120):
            rows = [rng.integers(0, 2, size=4).astype(np.uint8) for _ in range(15)]
            window = DsetWindow(4, 6)
            for t, row in enumerate(rows):
                window.append(row)
                target = int(rows[t - 2][0]) if t >= 2 else 0
                samples.append(InfluenceSample(window.rows().copy(), (target,), e, t))
        prov = {"env_id": "synthetic", "fingerprint": "synthetic", "policy": "n/a",
                "seed": seed, "n": len(samples), "k": 6, "dset_width": 4,
                "influence_classes": [2]}
        return InfluenceDataset(samples, prov)

    ds = make(3)
    variant, history = train(ds, AipTrainConfig(arch="gru", hidden=24,
                                                epochs=80, lr=5e-3, seed=1,
                                                batch_episodes=24))
    assert history["val_ce"][-1] < 0.1
    held = make(55)
    assert evaluate_ce(variant, held) < 0.15


def test_gru_single_chunk_gradient_matches_finite_differences():
    rng = make_rng(21)
    impl = GruPredictor(k=8, width=3, classes=(2, 3), hidden=5, seed=4)
    rows = rng.integers(0, 2, size=(6, 3)).astype(np.float64)
    targets = np.stack([rng.integers(0, 2, size=6),
                        rng.integers(0, 3, size=6)], axis=1).astype(np.int64)
    batch = [(rows, targets)]

    class NoOpt:
        def step(self, grads):
            pass

    _gru_batch_step(impl, NoOpt(), batch, k=8)
    analytic = {k: v.copy() for k, v in impl.grads().items()}

    def loss_fn():
        h = impl.cell.init_hidden(1)
        total = 0.0
        for t in range(rows.shape[0]):
            h, _ = impl.cell.forward(h, rows[t][None, :])
            loss, _ = cross_entropy_from_logits(impl.heads.forward_logits(h),
                                                targets[t][None, :])
            total += loss
        return total / rows.shape[0]

    err = gradient_check(impl.params(), loss_fn, analytic)
    assert err < 1e-4


def test_predict_is_pure_and_checks_width(toy_sim):
    ds = collect_dataset(toy_sim, _policy(toy_sim), 30, seed=17, k=8)
    variant = make_untrained(ds, "gru", seed=5)
    w = ds.samples[7].window
    p1 = variant.predict(w)
    p2 = variant.predict(w)
    for a, b in zip(p1, p2):
        assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        variant.predict(np.zeros((2, ds.dset_width + 1), dtype=np.uint8))


def test_sampling_behaviour():
    from ialsim.aip import FixedMarginalPredictor
    one_hot = PredictorVariant(
        "fixed-marginal", FixedMarginalPredictor([np.array([0.0, 1.0, 0.0])], 1, 4),
        1, "synthetic", "synthetic")
    rng = make_rng(0)
    w = np.zeros((1, 4), dtype=np.uint8)
    assert all(one_hot.sample_influence(w, rng) == (1,) for _ in range(50))

    fair = PredictorVariant(
        "fixed-marginal", FixedMarginalPredictor([np.array([0.5, 0.5])], 1, 4),
        1, "synthetic", "synthetic")
    rng = make_rng(1)
    draws = [fair.sample_influence(w, rng)[0] for _ in range(10000)]
    freq = np.mean([d == 0 for d in draws])
    assert 0.48 <= freq <= 0.52
    # same seed, same sequence
    r1 = [fair.sample_influence(w, make_rng(7))[0] for _ in range(5)]
    r2 = [fair.sample_influence(w, make_rng(7))[0] for _ in range(5)]
    assert r1 == r2


def test_divergence_rule_trips():
    history = {"train_ce": [], "val_ce": []}
    best = None

    class Dummy:
        def params(self):
            return {"w": np.zeros(1)}

    cfg = AipTrainConfig(patience=100)
    ces = [1.0, 1.2, 1.5, 1.9, 2.4, 3.1]
    with pytest.raises(TrainingDiverged):
        for ce in ces:
            _, best = _track_epoch(history, ce, ce, best, Dummy(), cfg)


def test_checkpoint_round_trip(tmp_path, toy_sim):
    ds = collect_dataset(toy_sim, _policy(toy_sim), 60, seed=19, k=8)
    variant, _ = train(ds, AipTrainConfig(arch="ff", epochs=2, seed=0))
    path = tmp_path / "pred.json"
    variant.save(path)
    loaded = PredictorVariant.load(path)
    w = ds.samples[11].window
    for a, b in zip(variant.predict(w), loaded.predict(w)):
        assert np.array_equal(a, b)
    assert loaded.tag == "trained-ff"
    assert loaded.fingerprint == variant.fingerprint


def test_fixed_marginal_checkpoint_round_trip(tmp_path, toy_sim):
    ds = collect_dataset(toy_sim, _policy(toy_sim), 60, seed=23, k=8)
    variant = fit_fixed_marginal(ds)
    path = tmp_path / "marg.json"
    variant.save(path)
    loaded = PredictorVariant.load(path)
    assert np.array_equal(loaded.impl.marginals[0], variant.impl.marginals[0])


def test_evaluate_ce_rejects_mismatched_env(toy_sim):
    ds = collect_dataset(toy_sim, _policy(toy_sim), 30, seed=29, k=8)
    variant = make_untrained(ds, "ff", seed=0)
    other = InfluenceDataset(ds.samples, {**ds.provenance, "fingerprint": "zzz"})
    with pytest.raises(ValueError):
        evaluate_ce(variant, other)


def test_exact_oracle_ce_matches_mean_predictive_entropy(toy_sim):
    model = toy_sim.model
    ds = collect_dataset(toy_sim, _policy(toy_sim), 1500, seed=31, k=8)
    oracle = make_exact_oracle(model, 8, toy_sim.descriptor.fingerprint())
    ce = evaluate_ce(oracle, ds)
    # for the exact conditional, E[-log p(u)] equals E[entropy(p)]
    ent = 0.0
    for s in ds.samples:
        p = oracle.predict(s.window)[0]
        ent += -(p * np.log(p)).sum()
    ent /= len(ds.samples)
    assert abs(ce - ent) < 0.05
    # a trained predictor cannot beat the oracle floor by more than noise
    variant, _ = train(ds, AipTrainConfig(arch="gru", hidden=24, epochs=25,
                                          seed=2, batch_episodes=32))
    held = collect_dataset(toy_sim, _policy(toy_sim), 800, seed=37, k=8)
    trained_ce = evaluate_ce(variant, held)
    oracle_ce = evaluate_ce(oracle, held)
    assert trained_ce > oracle_ce - 0.05


def test_gru_stream_matches_stateless_predict(toy_sim):
    ds = collect_dataset(toy_sim, _policy(toy_sim), 30, seed=43, k=8)
    variant = make_untrained(ds, "gru", seed=6)
    rows = make_rng(44).integers(0, 2, size=(5, ds.dset_width)).astype(np.uint8)
    stream = variant.begin_stream()
    for t in range(5):
        streamed = stream.feed(rows[t])
    stateless = variant.predict(rows)
    for a, b in zip(streamed, stateless):
        assert np.allclose(a, b, atol=1e-12)


def test_fused_head_sampling_matches_probabilities():
    from ialsim.aip import _head_sample
    rng = make_rng(45)
    bounds = np.array([0, 4, 6, 9], dtype=np.int64)
    for _ in range(300):
        logits = rng.normal(scale=3.0, size=9)
        draws = rng.random(3)
        out = np.zeros(3, dtype=np.int64)
        _head_sample(logits, draws, bounds, out)
        for m in range(3):
            seg = logits[bounds[m]:bounds[m + 1]]
            w = np.exp(seg - seg.max())
            cum = np.cumsum(w)
            expected = int((cum < draws[m] * cum[-1]).sum())
            assert out[m] == expected


def test_gru_stream_sampling_frequency(toy_sim):
    ds = collect_dataset(toy_sim, _policy(toy_sim), 30, seed=47, k=8)
    variant = make_untrained(ds, "gru", seed=7)
    row = np.zeros(ds.dset_width, dtype=np.uint8)
    stream = variant.begin_stream()
    p_ref = stream.feed(row)[0]
    # fresh streams re-fed the same single row sample from that distribution
    rng = make_rng(48)
    hits = 0
    n = 4000
    for _ in range(n):
        s = variant.begin_stream()
        hits += s.feed_sample(row, rng)[0]
    assert abs(hits / n - p_ref[1]) < 0.03


def test_untrained_tag_and_determinism(toy_sim):
    ds = collect_dataset(toy_sim, _policy(toy_sim), 20, seed=41, k=8)
    v1 = make_untrained(ds, "gru", seed=3)
    v2 = make_untrained(ds, "gru", seed=3)
    w = ds.samples[3].window
    for a, b in zip(v1.predict(w), v2.predict(w)):
        assert np.array_equal(a, b)
    assert v1.tag == "untrained"
