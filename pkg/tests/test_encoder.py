import numpy as np
import pytest

from cmm.encoder import (
    EncoderParams,
    TrainConfig,
    adamw_step,
    backward,
    encode,
    encode_batch,
    init_adamw_state,
    init_encoder,
    load_checkpoint,
    save_checkpoint,
    train,
)
from cmm.errors import NumericError, SchemaError
from cmm.loss import LossConfig
from cmm.schema import Dataset, LabelSet, PairExample, RelationSchema


def linear_params(w, b):
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return EncoderParams(architecture="linear", feature_dim=w.shape[1],
                         relation_count=w.shape[0] - 1, hidden_dim=0,
                         tensors={"W": w, "b": b})


def train_config(kind="cmm", **kwargs):
    loss = LossConfig(kind=kind, gamma=kwargs.pop("gamma", 1.0), m=kwargs.pop("m", 0.2))
    return TrainConfig(loss=loss, epochs=kwargs.pop("epochs", 1), **kwargs)


def toy_dataset(seed=0, n_docs=20, pairs_per_doc=10, relation_count=2, feature_dim=6,
                margin=2.0):
    """Linearly separable set: labels follow the sign of fixed teacher rows."""
    rng = np.random.default_rng(seed)
    teacher = rng.standard_normal((relation_count, feature_dim))
    teacher /= np.linalg.norm(teacher, axis=1, keepdims=True)
    examples = []
    doc_ids = []
    for d in range(n_docs):
        doc_id = f"d{d:03d}"
        doc_ids.append(doc_id)
        for i in range(pairs_per_doc):
            scores = rng.uniform(0.5, 2.0, relation_count) * margin
            signs = np.where(rng.random(relation_count) < 0.3, 1.0, -1.0)
            x = (signs * scores) @ teacher + 0.05 * rng.standard_normal(feature_dim)
            positives = frozenset(int(r + 1) for r in range(relation_count)
                                  if signs[r] > 0)
            labels = LabelSet(relation_count, positives)
            examples.append(PairExample(pair_id=f"{doc_id}:{i}", doc_id=doc_id,
                                        features=x, labels=labels, true_labels=labels))
    return Dataset(schema=RelationSchema.with_default_names(relation_count),
                   examples=tuple(examples), document_ids=tuple(doc_ids))


class TestEncode:
    def test_zero_weights_return_bias(self):
        params = linear_params(np.zeros((3, 4)), [0.5, 0.25, -0.75])
        row = encode(params, np.ones(4))
        assert np.array_equal(row.values, [0.5, 0.25, -0.75])

    def test_identity_map(self):
        params = linear_params(np.eye(3), np.zeros(3))
        row = encode(params, np.array([1.0, 0.0, 0.0]))
        assert np.array_equal(row.values, [1.0, 0.0, 0.0])

    def test_matches_explicit_dot_products(self):
        rng = np.random.default_rng(7)
        params = init_encoder("linear", feature_dim=9, relation_count=4, seed=3)
        x = rng.standard_normal(9)
        row = encode(params, x)
        for i in range(5):
            expected = sum(params.tensors["W"][i, j] * x[j] for j in range(9))
            expected += params.tensors["b"][i]
            assert row.values[i] == pytest.approx(expected, abs=1e-12)

    def test_one_hidden_matches_manual_forward(self):
        params = init_encoder("one_hidden", feature_dim=5, relation_count=3,
                              hidden_dim=4, seed=1)
        x = np.random.default_rng(2).standard_normal(5)
        row = encode(params, x)
        h = np.tanh(params.tensors["W1"] @ x + params.tensors["b1"])
        expected = params.tensors["W2"] @ h + params.tensors["b2"]
        assert np.allclose(row.values, expected, atol=1e-12)

    def test_output_dim_always_relations_plus_one(self):
        for arch in ("linear", "one_hidden"):
            params = init_encoder(arch, feature_dim=6, relation_count=5, seed=0)
            assert encode(params, np.zeros(6)).values.size == 6

    def test_dimension_mismatch(self):
        params = init_encoder("linear", feature_dim=4, relation_count=2, seed=0)
        with pytest.raises(SchemaError):
            encode(params, np.zeros(5))

    def test_batch_matches_single(self):
        params = init_encoder("one_hidden", feature_dim=5, relation_count=3, seed=5)
        x = np.random.default_rng(4).standard_normal((7, 5))
        batch = encode_batch(params, x)
        for i in range(7):
            assert np.allclose(batch[i], encode(params, x[i]).values, atol=1e-12)


class TestBackward:
    def test_all_clamped_negatives_zero_gradients(self):
        params = linear_params(np.zeros((3, 4)), [5.0, -5.0, -5.0])
        labels = LabelSet(2, frozenset())  # d_neg = 10 >> clamp
        grads = backward(params, np.ones(4), labels, LossConfig(kind="cmm", m=0.2))
        assert all(np.all(g == 0.0) for g in grads.values())

    def test_linear_chain_rule_outer_product(self):
        from cmm.loss import cmm_loss_grad
        params = init_encoder("linear", feature_dim=6, relation_count=3, seed=8)
        x = np.random.default_rng(9).standard_normal(6)
        labels = LabelSet(3, frozenset({2}))
        cfg = LossConfig(kind="cmm", gamma=1.4, m=0.3)
        grads = backward(params, x, labels, cfg)
        g_row = cmm_loss_grad(encode(params, x), labels, cfg)
        assert np.allclose(grads["W"], np.outer(g_row, x), atol=1e-12)
        assert np.allclose(grads["b"], g_row, atol=1e-12)

    @pytest.mark.parametrize("arch,kind", [
        ("linear", "cmm"), ("one_hidden", "cmm"),
        ("linear", "plain_margin"), ("one_hidden", "atl_reference"),
    ])
    def test_matches_parameter_space_finite_differences(self, arch, kind):
        from cmm.loss import get_loss
        rng = np.random.default_rng(13)
        params = init_encoder(arch, feature_dim=5, relation_count=3, hidden_dim=4, seed=13)
        x = rng.standard_normal(5)
        labels = LabelSet(3, frozenset({1, 3}))
        cfg = LossConfig(kind=kind, gamma=1.2, m=0.2)
        value_fn = get_loss(cfg).value
        grads = backward(params, x, labels, cfg)
        h = 1e-6

        def loss_at(p):
            return value_fn(encode(p, x), labels, cfg)

        for name in params.parameter_names:
            tensor = params.tensors[name]
            it = np.nditer(tensor, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                saved = tensor[idx]
                tensor[idx] = saved + h
                up = loss_at(params)
                tensor[idx] = saved - h
                down = loss_at(params)
                tensor[idx] = saved
                numeric = (up - down) / (2 * h)
                analytic = grads[name][idx]
                denom = max(1.0, abs(numeric), abs(analytic))
                assert abs(analytic - numeric) / denom < 1e-4, (name, idx)


class TestAdamW:
    def test_zero_grad_zero_decay_is_fixed_point(self):
        params = init_encoder("linear", feature_dim=3, relation_count=2, seed=0)
        before = {k: v.copy() for k, v in params.tensors.items()}
        grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        cfg = train_config(weight_decay=0.0)
        params, state = adamw_step(params, grads, cfg, init_adamw_state(params))
        for name in params.tensors:
            assert np.array_equal(params.tensors[name], before[name])
        assert state.step == 1

    def test_zero_grad_decay_only_update(self):
        params = init_encoder("linear", feature_dim=3, relation_count=2, seed=1)
        params.tensors["b"][:] = 0.5
        before = {k: v.copy() for k, v in params.tensors.items()}
        grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        cfg = train_config(weight_decay=0.01, learning_rate=0.1)
        params, _ = adamw_step(params, grads, cfg, init_adamw_state(params))
        # weights shrink by exactly (1 - lr*wd); biases are not decayed
        assert np.array_equal(params.tensors["W"], before["W"] * (1.0 - 0.001))
        assert np.array_equal(params.tensors["b"], before["b"])

    def test_unit_gradient_first_step(self):
        params = linear_params(np.zeros((3, 2)), np.zeros(3))
        grads = {"W": np.ones((3, 2)), "b": np.ones(3)}
        cfg = train_config(learning_rate=1e-3)
        params, _ = adamw_step(params, grads, cfg, init_adamw_state(params))
        # bias-corrected m/sqrt(v) is exactly 1 at step one, so each
        # parameter moves by -lr/(1+eps)
        expected = -1e-3 / (1.0 + 1e-8)
        assert np.allclose(params.tensors["W"], expected, atol=1e-15)
        assert np.allclose(params.tensors["b"], expected, atol=1e-15)

    def test_non_finite_gradient_rejected(self):
        params = init_encoder("linear", feature_dim=2, relation_count=1, seed=0)
        grads = {"W": np.full((2, 2), np.nan), "b": np.zeros(2)}
        with pytest.raises(NumericError):
            adamw_step(params, grads, train_config(), init_adamw_state(params))

    def test_step_counter_and_bias_correction(self):
        params = linear_params(np.zeros((2, 2)), np.zeros(2))
        cfg = train_config(learning_rate=0.01, weight_decay=0.0)
        state = init_adamw_state(params)
        for expected_step in (1, 2, 3):
            grads = {"W": np.ones((2, 2)), "b": np.ones(2)}
            params, state = adamw_step(params, grads, cfg, state)
            assert state.step == expected_step
        # constant gradient: every update is -lr (up to eps), independent of step
        assert np.allclose(params.tensors["W"], -3 * 0.01, atol=1e-6)


class TestTrain:
    def test_loss_decreases_on_separable_toy(self):
        ds = toy_dataset(seed=0, n_docs=20, pairs_per_doc=10)
        cfg = train_config(epochs=20, seed=0, learning_rate=0.01)
        _, trace = train(ds, ds, cfg)
        assert trace[-1].train_loss < trace[0].train_loss
        assert trace[-1].dev_f1 > 0.8

    def test_bit_identical_given_seed(self):
        ds = toy_dataset(seed=1)
        cfg = train_config(epochs=4, seed=3)
        params_a, trace_a = train(ds, ds, cfg)
        params_b, trace_b = train(ds, ds, cfg)
        assert trace_a == trace_b
        for name in params_a.tensors:
            assert np.array_equal(params_a.tensors[name], params_b.tensors[name])

    def test_seed_changes_run(self):
        ds = toy_dataset(seed=1)
        _, trace_a = train(ds, ds, train_config(epochs=3, seed=0))
        _, trace_b = train(ds, ds, train_config(epochs=3, seed=1))
        assert trace_a != trace_b

    def test_eval_every_controls_trace_grid(self):
        ds = toy_dataset(seed=2, n_docs=6)
        _, trace = train(ds, ds, train_config(epochs=7, eval_every=3, seed=0))
        assert [r.epoch for r in trace] == [3, 6, 7]

    def test_trace_epochs_strictly_increasing(self):
        ds = toy_dataset(seed=2, n_docs=6)
        _, trace = train(ds, ds, train_config(epochs=6, eval_every=2, seed=0))
        epochs = [r.epoch for r in trace]
        assert epochs == sorted(set(epochs))

    def test_empty_dataset_rejected(self):
        schema = RelationSchema.with_default_names(2)
        empty = Dataset(schema=schema, examples=(), document_ids=())
        with pytest.raises(SchemaError):
            train(empty, empty, train_config(epochs=1))

    def test_schema_mismatch_rejected(self):
        ds = toy_dataset(seed=1, relation_count=2)
        dev = toy_dataset(seed=1, relation_count=3)
        with pytest.raises(SchemaError):
            train(ds, dev, train_config(epochs=1))

    def test_accumulation_and_global_mean_run(self):
        ds = toy_dataset(seed=4, n_docs=8)
        loss = LossConfig(kind="cmm", gamma=1.0, m=0.2, aggregation="global_mean")
        cfg = TrainConfig(loss=loss, epochs=2, seed=0, accumulate_documents=3)
        _, trace = train(ds, ds, cfg)
        assert len(trace) == 2

    def test_plugin_loss_trains(self):
        from cmm.loss import register_loss, plain_margin_loss, plain_margin_grad
        register_loss("shifted_plain", lambda lg, lb, cfg: plain_margin_loss(lg, lb) + 1.0,
                      lambda lg, lb, cfg: plain_margin_grad(lg, lb))
        ds = toy_dataset(seed=5, n_docs=4, pairs_per_doc=5)
        loss = LossConfig(kind="plugin", plugin="shifted_plain")
        _, trace = train(ds, ds, TrainConfig(loss=loss, epochs=2, seed=0))
        assert len(trace) == 2


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = init_encoder("one_hidden", feature_dim=4, relation_count=3,
                              hidden_dim=5, seed=6)
        state = init_adamw_state(params)
        state.step = 7
        state.m["W1"][0, 0] = 0.25
        path = tmp_path / "ckpt.json"
        save_checkpoint(str(path), params, state, config={"epochs": 3})
        loaded, loaded_state, config = load_checkpoint(str(path))
        assert loaded.architecture == "one_hidden"
        assert config == {"epochs": 3}
        for name in params.parameter_names:
            assert np.array_equal(loaded.tensors[name], params.tensors[name])
        assert loaded_state.step == 7
        assert loaded_state.m["W1"][0, 0] == 0.25

    def test_checkpoint_without_optimizer(self, tmp_path):
        params = init_encoder("linear", feature_dim=3, relation_count=2, seed=0)
        path = tmp_path / "ckpt.json"
        save_checkpoint(str(path), params, None)
        loaded, state, _ = load_checkpoint(str(path))
        assert state is None
        assert np.array_equal(loaded.tensors["W"], params.tensors["W"])

    def test_rejects_unknown_format(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"format": "other/9"}')
        with pytest.raises(SchemaError):
            load_checkpoint(str(path))


class TestInit:
    def test_init_bounds_and_zero_biases(self):
        params = init_encoder("linear", feature_dim=16, relation_count=4, seed=2)
        bound = 1.0 / np.sqrt(16)
        assert np.all(np.abs(params.tensors["W"]) <= bound)
        assert np.all(params.tensors["b"] == 0.0)

    def test_init_deterministic(self):
        a = init_encoder("one_hidden", feature_dim=6, relation_count=3, seed=11)
        b = init_encoder("one_hidden", feature_dim=6, relation_count=3, seed=11)
        for name in a.parameter_names:
            assert np.array_equal(a.tensors[name], b.tensors[name])

    def test_unknown_architecture(self):
        with pytest.raises(ValueError):
            init_encoder("transformer", feature_dim=4, relation_count=2)
