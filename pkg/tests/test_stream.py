"""Online adaptation loop: filtering, pseudo-labels, masked loss, baselines."""

import numpy as np
import pytest

import oracles
from fewshot_tta.data import SampleRecord
from fewshot_tta.errors import ConfigError, DataError
from fewshot_tta.model import Backbone
from fewshot_tta.prototypes import init_bank
from fewshot_tta.stream import (AdaptConfig, adapt_batch, consistency_mask, entropy,
                                entropy_filter, entropy_min_loss, init_adapt_state,
                                make_stream, online_loss, pseudo_label, resolve_method,
                                run_baseline, tent_batch)
from fewshot_tta.tensor import Tensor, softmax


def _model(rng, num_classes=4, widths=(3, 4, 8, 8)):
    m = Backbone(widths=widths, num_classes=num_classes, init_seed=7)
    # a zero head blocks all upstream gradients, so give it real values
    w = m.params["head.weight"]
    w.data = rng.normal(0.0, 0.5, size=w.data.shape)
    return m


def _bank(rng, model, num_classes=4):
    emb = rng.normal(size=(num_classes * 3, model.widths[-1]))
    labels = np.repeat(np.arange(num_classes), 3)
    return init_bank(emb, labels, num_classes)


def _aligned_bank(model):
    # prototypes along the head's weight columns, so head and prototype
    # argmax agree often enough for masked updates to actually fire
    from fewshot_tta.prototypes import PrototypeBank
    return PrototypeBank(model.params["head.weight"].data.T.copy())


def _records(rng, n, num_classes=4, size=8):
    return [SampleRecord(label=int(rng.integers(num_classes)),
                         pixels=rng.normal(size=(3, size, size)), domain_id=0)
            for _ in range(n)]


class TestEntropy:
    def test_uniform_is_log_c(self):
        assert entropy(np.full(6, 1 / 6)) == pytest.approx(np.log(6), abs=1e-12)

    def test_one_hot_is_zero(self):
        assert entropy([0.0, 1.0, 0.0]) == 0.0

    def test_matches_oracle(self, rng):
        for _ in range(10):
            p = rng.dirichlet(np.ones(5))
            assert entropy(p) == pytest.approx(oracles.entropy_loops(p), abs=1e-12)


class TestEntropyFilter:
    def test_selects_most_confident(self):
        probs = np.array([[0.25, 0.25, 0.25, 0.25],
                          [0.97, 0.01, 0.01, 0.01],
                          [0.4, 0.3, 0.2, 0.1],
                          [0.01, 0.97, 0.01, 0.01]])
        assert entropy_filter(probs, 0.5).tolist() == [1, 3]

    def test_result_is_ascending(self, rng):
        probs = rng.dirichlet(np.ones(4), size=16)
        sel = entropy_filter(probs, 0.75)
        assert sel.tolist() == sorted(sel.tolist())

    def test_ties_prefer_lower_index(self):
        probs = np.tile(np.array([[0.7, 0.1, 0.1, 0.1]]), (6, 1))
        assert entropy_filter(probs, 0.5).tolist() == [0, 1, 2]

    def test_alpha_zero_empty(self, rng):
        probs = rng.dirichlet(np.ones(4), size=8)
        assert entropy_filter(probs, 0.0).size == 0

    def test_alpha_one_keeps_all(self, rng):
        probs = rng.dirichlet(np.ones(4), size=8)
        assert entropy_filter(probs, 1.0).tolist() == list(range(8))

    def test_floor_count(self, rng):
        probs = rng.dirichlet(np.ones(3), size=10)
        assert entropy_filter(probs, 0.37).size == 3
        assert entropy_filter(probs, 0.3).size == 3

    def test_matches_oracle(self, rng):
        for alpha in (0.25, 0.5, 0.6, 1.0):
            probs = rng.dirichlet(np.ones(5), size=12)
            ents = [oracles.entropy_loops(row) for row in probs]
            assert entropy_filter(probs, alpha).tolist() == oracles.entropy_filter_loops(ents, alpha)

    def test_bad_alpha_rejected(self, rng):
        with pytest.raises(ConfigError, match="alpha"):
            entropy_filter(rng.dirichlet(np.ones(3), size=4), 1.5)

    def test_bad_shape_rejected(self):
        with pytest.raises(DataError):
            entropy_filter(np.ones(5) / 5, 0.5)


class TestPseudoLabel:
    def test_argmax(self):
        z = np.array([[0.1, 2.0, -1.0], [3.0, 0.0, 1.0]])
        assert pseudo_label(z).tolist() == [1, 0]

    def test_ties_take_lowest_class(self):
        z = np.array([[1.0, 1.0, 1.0], [0.0, 2.0, 2.0]])
        assert pseudo_label(z).tolist() == [0, 1]

    def test_matches_oracle(self, rng):
        z = rng.normal(size=(8, 5))
        assert pseudo_label(z).tolist() == [oracles.argmax_loops(row) for row in z]

    def test_non_finite_rejected(self):
        with pytest.raises(DataError, match="finite"):
            pseudo_label(np.array([[np.nan, 0.0]]))


class TestConsistencyMask:
    def test_agreement_pattern(self):
        p = np.array([[0.8, 0.2], [0.3, 0.7], [0.6, 0.4]])
        q = np.array([[0.9, 0.1], [0.8, 0.2], [0.1, 0.9]])
        assert consistency_mask(p, q).tolist() == [1, 0, 0]

    def test_single_vector(self):
        assert consistency_mask([0.8, 0.2], [0.6, 0.4]).tolist() == [1]

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DataError):
            consistency_mask(np.ones((2, 3)) / 3, np.ones((3, 3)) / 3)


class TestOnlineLoss:
    def test_all_masked_out_is_none(self):
        probs = Tensor(np.full((3, 4), 0.25), requires_grad=True)
        assert online_loss(probs, [0, 1, 2], [0, 0, 0]) is None

    def test_empty_selection_is_none(self):
        probs = Tensor(np.zeros((0, 4)), requires_grad=True)
        assert online_loss(probs, np.zeros(0, dtype=int), np.zeros(0)) is None

    def test_single_sample_value(self):
        probs = Tensor(np.array([[0.2, 0.5, 0.3]]), requires_grad=True)
        loss = online_loss(probs, [1], [1])
        assert loss.item() == pytest.approx(-np.log(0.5), abs=1e-12)

    def test_mask_excludes_samples(self):
        probs = Tensor(np.array([[0.9, 0.1], [0.1, 0.9]]), requires_grad=True)
        loss = online_loss(probs, [0, 0], [1, 0])
        assert loss.item() == pytest.approx(-np.log(0.9), abs=1e-12)

    def test_matches_oracle(self, rng):
        p = rng.dirichlet(np.ones(4), size=6)
        y = rng.integers(0, 4, size=6)
        m = rng.integers(0, 2, size=6)
        if m.sum() == 0:
            m[0] = 1
        probs = Tensor(p, requires_grad=True)
        want = oracles.online_loss_loops(p.tolist(), y.tolist(), m.tolist())
        assert online_loss(probs, y, m).item() == pytest.approx(want, abs=1e-12)

    def test_masked_rows_get_no_gradient(self):
        probs = Tensor(np.array([[0.7, 0.3], [0.4, 0.6], [0.5, 0.5]]), requires_grad=True)
        loss = online_loss(probs, [0, 1, 0], [1, 0, 1])
        loss.backward()
        assert np.all(probs.grad[1] == 0.0)
        assert np.any(probs.grad[0] != 0.0)
        assert np.any(probs.grad[2] != 0.0)

    def test_bad_label_rejected(self):
        probs = Tensor(np.full((2, 3), 1 / 3), requires_grad=True)
        with pytest.raises(DataError, match="range"):
            online_loss(probs, [0, 3], [1, 1])

    def test_misaligned_rejected(self):
        probs = Tensor(np.full((2, 3), 1 / 3), requires_grad=True)
        with pytest.raises(DataError):
            online_loss(probs, [0], [1, 1])


class TestEntropyMinLoss:
    def test_value_is_mean_row_entropy(self, rng):
        z = rng.normal(size=(5, 4))
        probs = softmax(Tensor(z)).data
        want = np.mean([oracles.entropy_loops(row) for row in probs])
        assert entropy_min_loss(Tensor(z)).item() == pytest.approx(want, abs=1e-12)

    def test_confident_batch_has_tiny_gradient(self):
        z = Tensor(np.array([[40.0, 0.0, 0.0], [0.0, 40.0, 0.0]]), requires_grad=True)
        loss = entropy_min_loss(z)
        loss.backward()
        assert np.max(np.abs(z.grad)) < 1e-6


class TestAdaptBatch:
    def test_returns_pre_update_predictions(self, rng):
        model = _model(rng)
        frozen = model.copy()
        state = init_adapt_state(model, _aligned_bank(model), AdaptConfig(alpha=0.5, lr=1e-2))
        x = rng.normal(size=(8, 3, 8, 8))
        preds = adapt_batch(state, x)
        _, logits = frozen.forward(x, mode="eval")
        assert preds.tolist() == np.argmax(logits.data, axis=1).tolist()
        assert model.params_hash() != frozen.params_hash()

    def test_alpha_zero_touches_nothing(self, rng):
        model = _model(rng)
        before = model.params_hash()
        state = init_adapt_state(model, _bank(rng, model), AdaptConfig(alpha=0.0))
        proto_before = state.bank.prototypes.copy()
        preds = adapt_batch(state, rng.normal(size=(6, 3, 8, 8)))
        assert preds.shape == (6,)
        assert model.params_hash() == before
        assert state.bank.prototypes.tobytes() == proto_before.tobytes()
        assert state.bank.t == 1

    def test_selection_count_recorded(self, rng):
        model = _model(rng)
        state = init_adapt_state(model, _bank(rng, model), AdaptConfig(alpha=0.5))
        adapt_batch(state, rng.normal(size=(10, 3, 8, 8)))
        assert state.selected_total == 5
        assert state.rows[0]["selected"] == 5

    def test_bank_moves_only_pseudo_labeled_classes(self, rng):
        model = _model(rng)
        bank = _bank(rng, model)
        state = init_adapt_state(model, bank, AdaptConfig(alpha=0.5))
        proto_before = bank.prototypes.copy()
        x = rng.normal(size=(8, 3, 8, 8))
        emb, logits = model.forward(x, mode="eval")
        sel = entropy_filter(softmax(logits).data, 0.5)
        seen = set(pseudo_label(logits.data[sel]).tolist())
        adapt_batch(state, x)
        for c in range(bank.class_count):
            changed = bank.prototypes[c].tobytes() != proto_before[c].tobytes()
            assert changed == (c in seen)

    def test_needs_bank(self, rng):
        model = _model(rng)
        state = init_adapt_state(model, None, AdaptConfig())
        with pytest.raises(ConfigError, match="bank"):
            adapt_batch(state, rng.normal(size=(4, 3, 8, 8)))

    def test_proto_prediction_mode(self, rng):
        model = _model(rng)
        bank = _bank(rng, model)
        frozen_protos = bank.prototypes.copy()
        state = init_adapt_state(model, bank, AdaptConfig(alpha=0.5, predict_with="proto"))
        x = rng.normal(size=(6, 3, 8, 8))
        emb, _ = model.copy().forward(x, mode="eval")
        from fewshot_tta.prototypes import PrototypeBank, proto_classify
        want = np.argmax(proto_classify(PrototypeBank(frozen_protos), emb.data), axis=1)
        assert adapt_batch(state, x).tolist() == want.tolist()


class TestTentBatch:
    def test_norm_affine_only(self, rng):
        model = _model(rng)
        snap = {k: v.data.copy() for k, v in model.params.items()}
        state = init_adapt_state(model, None, AdaptConfig(groups=("norm_affine",), lr=1e-2))
        tent_batch(state, rng.normal(size=(6, 3, 8, 8)))
        for name, old in snap.items():
            same = np.array_equal(model.params[name].data, old)
            if name.startswith("norm"):
                assert not same, name
            else:
                assert same, name


class TestMakeStream:
    def test_partition_sizes(self, rng):
        stream = make_stream(_records(rng, 25), batch_size=8, seed=0)
        assert [len(b.hidden_labels) for b in stream] == [8, 8, 8, 1]

    def test_covers_every_record_once(self, rng):
        recs = _records(rng, 20)
        stream = make_stream(recs, batch_size=6, seed=3)
        got = np.concatenate([b.inputs for b in stream])
        want = np.stack([r.pixels for r in recs])
        assert np.sort(got.ravel()).tolist() == np.sort(want.ravel()).tolist()

    def test_seed_determinism(self, rng):
        recs = _records(rng, 16)
        a = make_stream(recs, batch_size=4, seed=5)
        b = make_stream(recs, batch_size=4, seed=5)
        c = make_stream(recs, batch_size=4, seed=6)
        assert all(np.array_equal(x.inputs, y.inputs) for x, y in zip(a, b))
        assert any(not np.array_equal(x.inputs, y.inputs) for x, y in zip(a, c))

    def test_sorted_order_groups_classes(self, rng):
        recs = _records(rng, 24)
        stream = make_stream(recs, batch_size=6, seed=0, order="sorted")
        labels = np.concatenate([b.hidden_labels for b in stream])
        assert labels.tolist() == sorted(labels.tolist())

    def test_empty_rejected(self):
        with pytest.raises(DataError, match="empty"):
            make_stream([], batch_size=4, seed=0)

    def test_bad_order_rejected(self, rng):
        with pytest.raises(ConfigError, match="order"):
            make_stream(_records(rng, 4), batch_size=2, seed=0, order="random")


class TestResolveMethod:
    def test_aliases(self):
        assert resolve_method("tent") == "entropy_min"
        assert resolve_method("erm") == "source_only"
        assert resolve_method("bn") == "norm_stat"
        assert resolve_method("ft_tent") == "ft_plus_entropy_min"
        assert resolve_method("fs_tta") == "fs_tta"

    def test_canonical_passthrough(self):
        assert resolve_method("norm_stat") == "norm_stat"

    def test_unknown_rejected(self):
        with pytest.raises(ConfigError, match="unknown method"):
            resolve_method("sgd")


class TestRunBaseline:
    def test_source_only_never_updates(self, rng):
        model = _model(rng)
        before = model.params_hash()
        stream = make_stream(_records(rng, 20), batch_size=8, seed=0)
        metrics = run_baseline("source_only", model, stream, AdaptConfig())
        assert model.params_hash() == before
        assert metrics.total == 20
        assert 0.0 <= metrics.final_accuracy <= 1.0

    def test_norm_stat_never_updates_but_changes_outputs(self, rng):
        model = _model(rng)
        before = model.params_hash()
        recs = [SampleRecord(label=int(rng.integers(4)),
                             pixels=rng.normal(size=(3, 8, 8)) * 4.0 + 3.0, domain_id=0)
                for _ in range(16)]
        stream = make_stream(recs, batch_size=8, seed=0)
        bn = run_baseline("norm_stat", model, stream, AdaptConfig())
        src = run_baseline("source_only", model, stream, AdaptConfig())
        assert model.params_hash() == before
        assert bn.correct != src.correct or bn.rows != src.rows

    def test_entropy_min_touches_norm_affine_only(self, rng):
        model = _model(rng)
        snap = {k: v.data.copy() for k, v in model.params.items()}
        stream = make_stream(_records(rng, 16), batch_size=8, seed=1)
        run_baseline("tent", model, stream, AdaptConfig(lr=1e-2))
        for name, old in snap.items():
            same = np.array_equal(model.params[name].data, old)
            assert same == (not name.startswith("norm")), name

    def test_fs_tta_requires_bank(self, rng):
        model = _model(rng)
        stream = make_stream(_records(rng, 8), batch_size=4, seed=0)
        with pytest.raises(ConfigError, match="bank"):
            run_baseline("fs_tta", model, stream, AdaptConfig())

    def test_fs_tta_runs_and_selects(self, rng):
        model = _model(rng)
        stream = make_stream(_records(rng, 24), batch_size=8, seed=0)
        metrics = run_baseline("fs_tta", model, stream, AdaptConfig(alpha=0.5),
                               bank=_bank(rng, model))
        assert metrics.total == 24
        assert metrics.selected_total == 12
        assert len(metrics.rows) == 3
        assert len(metrics.accuracy_curve) == 3

    def test_hidden_labels_never_reach_adaptation(self, rng):
        recs = _records(rng, 24)
        cfg = AdaptConfig(alpha=0.5, lr=1e-2)

        model_a = _model(np.random.default_rng(11))
        stream_a = make_stream(recs, batch_size=8, seed=2)
        ma = run_baseline("fs_tta", model_a, stream_a, cfg, bank=_aligned_bank(model_a))

        model_b = _model(np.random.default_rng(11))
        stream_b = make_stream(recs, batch_size=8, seed=2)
        shuffler = np.random.default_rng(99)
        for batch in stream_b:
            batch.hidden_labels = shuffler.permutation(batch.hidden_labels)
        run_baseline("fs_tta", model_b, stream_b, cfg, bank=_aligned_bank(model_b))

        assert ma.mask_total > 0
        assert model_a.params_hash() == model_b.params_hash()

    def test_prefix_replay_matches(self, rng):
        recs = _records(rng, 32)
        cfg = AdaptConfig(alpha=0.5, lr=1e-2)
        stream = make_stream(recs, batch_size=8, seed=4)

        model_a = _model(np.random.default_rng(21))
        state_a = init_adapt_state(model_a, _bank(np.random.default_rng(22), model_a), cfg)
        full_preds = [adapt_batch(state_a, b.inputs) for b in stream]

        model_b = _model(np.random.default_rng(21))
        state_b = init_adapt_state(model_b, _bank(np.random.default_rng(22), model_b), cfg)
        prefix_preds = [adapt_batch(state_b, b.inputs) for b in stream[:2]]

        for got, want in zip(prefix_preds, full_preds[:2]):
            assert got.tolist() == want.tolist()

    def test_same_seeds_bitwise_deterministic(self, rng):
        recs = _records(rng, 24)
        cfg = AdaptConfig(alpha=0.6, lr=1e-3)
        outs = []
        for _ in range(2):
            model = _model(np.random.default_rng(31))
            stream = make_stream(recs, batch_size=8, seed=7)
            m = run_baseline("fs_tta", model, stream, cfg, bank=_aligned_bank(model))
            outs.append((m.correct, repr(m.rows), model.params_hash()))
            last = m
        assert outs[0] == outs[1]
        assert last.mask_total > 0
