import numpy as np
import pytest

from semisup_lfmmi.am import (
    AcousticModel, LayerConfig, ModelConfig, backward, forward, init_model, load_model,
    num_params, ortho_error, pad_features, param_shapes, read_features, save_model,
    semi_orthogonal_step, sgd_step, write_features,
)
from semisup_lfmmi.errors import ContractError, InsufficientContextError, TrainingDivergenceError


def toy_config(dropout=0.0, subsampling=1, skip=True):
    return ModelConfig(
        input_dim=3,
        layers=(LayerConfig((-1, 0, 1), 5, 2),
                LayerConfig((-2, 0), 4, 3, 0 if skip else None)),
        output_dim=3, dropout=dropout, subsampling=subsampling)


def eleven_layer_config():
    layers = [LayerConfig((-1, 0, 1), 32, 8)]
    for i in range(2, 12):
        layers.append(LayerConfig((-3, 0, 3) if i > 2 else (0,), 32, 8,
                                  i - 2 if i > 3 else None))
    return ModelConfig(140, tuple(layers), 10, 0.1, 3)


def test_init_is_deterministic():
    a = init_model(eleven_layer_config(), 7)
    b = init_model(eleven_layer_config(), 7)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_init_factors_semi_orthogonal():
    model = init_model(eleven_layer_config(), 1)
    for name, p in model.params.items():
        if name.endswith(".B"):
            assert ortho_error(p) <= 1e-3


def _shape_sum_script(cfg):
    # independent closed-form count
    total, prev = 0, cfg.input_dim
    hiddens = [cfg.input_dim]
    for layer in cfg.layers:
        width = prev + (hiddens[layer.skip] if layer.skip is not None else 0)
        total += layer.hidden * layer.bottleneck
        total += layer.bottleneck * len(layer.offsets) * width
        total += layer.hidden
        prev = layer.hidden
        hiddens.append(layer.hidden)
    return total + cfg.output_dim * prev + cfg.output_dim


def test_eleven_layer_param_count():
    cfg = eleven_layer_config()
    assert num_params(init_model(cfg, 0)) == _shape_sum_script(cfg)


def test_param_count_small_example():
    cfg = ModelConfig(4, (LayerConfig((0, 1), 4, 4),), 4, 0.0, 1)
    assert num_params(init_model(cfg, 0)) == 72


def test_doubling_hidden_doubles_A():
    cfg1 = ModelConfig(4, (LayerConfig((0,), 4, 3),), 2)
    cfg2 = ModelConfig(4, (LayerConfig((0,), 8, 3),), 2)
    s1, s2 = param_shapes(cfg1), param_shapes(cfg2)
    assert np.prod(s2["layer1.A"]) == 2 * np.prod(s1["layer1.A"])


@pytest.mark.parametrize("bad", [
    dict(layers=()), dict(output_dim=1), dict(subsampling=0),
    dict(layers=(LayerConfig((-1, 1), 2, 2),)),
    dict(layers=(LayerConfig((1, 0), 2, 2),)),
    dict(layers=(LayerConfig((0,), 2, 2), LayerConfig((0,), 2, 2, 1))),
])
def test_invalid_configs(bad):
    kw = dict(input_dim=2, layers=(LayerConfig((0,), 2, 2),), output_dim=2)
    kw.update(bad)
    with pytest.raises(ContractError):
        ModelConfig(**kw)


# -- forward --------------------------------------------------------------------------------

def test_eval_deterministic_and_dropout_zero_matches():
    model = init_model(toy_config(), 3)
    x = np.random.default_rng(0).normal(size=(12, 3))
    a = forward(model, x, "eval")
    assert np.array_equal(a.scores, forward(model, x, "eval").scores)
    assert np.array_equal(a.scores, forward(model, x, "train", seed=5).scores)


def test_dropout_deterministic_under_seed():
    model = init_model(toy_config(dropout=0.5), 3)
    x = np.random.default_rng(0).normal(size=(12, 3))
    a = forward(model, x, "train", seed=9).scores
    assert np.array_equal(a, forward(model, x, "train", seed=9).scores)
    assert not np.array_equal(a, forward(model, x, "train", seed=10).scores)
    assert not np.array_equal(a, forward(model, x, "eval").scores)


def test_hand_computed_affine_map():
    cfg = ModelConfig(2, (LayerConfig((-1, 0, 1), 1, 1),), 2, 0.0, 1)
    params = {
        "layer1.A": np.array([[2.0]]),
        "layer1.B": np.array([[1.0, 0.5, 1.0, 0.5, 1.0, 0.5]]),
        "layer1.b": np.array([0.1]),
        "output.W": np.array([[1.0], [3.0]]),
        "output.b": np.array([0.0, 1.0]),
    }
    model = AcousticModel(cfg, params)
    x = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    out = forward(model, x)
    # B . concat(x0, x1, x2) = (1+1) + (3+2) + (5+3) = 15; h = 2*15 + 0.1
    h = 30.1
    np.testing.assert_allclose(out.scores, [[h, 3 * h + 1]])
    assert list(out.frame_times) == [1]


def test_insufficient_context_names_minimum():
    model = init_model(toy_config(), 0)
    need = model.config.left_context + model.config.right_context + 1
    forward(model, np.zeros((need, 3)))
    with pytest.raises(InsufficientContextError) as e:
        forward(model, np.zeros((need - 1, 3)))
    assert e.value.required == need
    assert str(need) in str(e.value)


def test_context_arithmetic():
    cfg = toy_config()
    # layer offsets (-1..1) then (-2..0) with a skip to the input
    assert cfg.left_context == 3
    assert cfg.right_context == 1
    cfg3 = eleven_layer_config()
    assert cfg3.left_context == 1 + 9 * 3
    assert cfg3.right_context == 1 + 9 * 3


@pytest.mark.parametrize("T", [20, 21, 22, 23])
def test_output_count_and_frame_times(T):
    cfg = toy_config(subsampling=3)
    model = init_model(cfg, 0)
    out = forward(model, np.random.default_rng(1).normal(size=(T, 3)))
    usable = T - cfg.left_context - cfg.right_context
    assert out.scores.shape == (-(-usable // 3), 3)
    assert list(out.frame_times) == list(range(cfg.left_context, T - cfg.right_context, 3))


def test_subsampling_shift_invariance():
    s = 3
    model = init_model(toy_config(subsampling=s), 2)
    x = np.random.default_rng(4).normal(size=(30, 3))
    a = forward(model, x).scores
    b = forward(model, x[s:]).scores
    np.testing.assert_allclose(a[1:1 + len(b) - 1], b[:len(b) - 1], atol=1e-12)


def test_pad_features_aligns_outputs():
    model = init_model(toy_config(subsampling=3), 2)
    x = np.random.default_rng(4).normal(size=(10, 3))
    out = forward(model, pad_features(model, x))
    assert out.scores.shape[0] == 4  # frames 0, 3, 6, 9


# -- backward -------------------------------------------------------------------------------

def test_zero_gradient():
    model = init_model(toy_config(), 0)
    x = np.random.default_rng(0).normal(size=(10, 3))
    g = np.zeros_like(forward(model, x).scores)
    assert all(not np.any(v) for v in backward(model, x, g).values())


def _objective(model, x, g, mode, seed):
    return float(np.sum(forward(model, x, mode, seed).scores * g))


@pytest.mark.parametrize("trial", range(20))
def test_finite_difference_agreement(trial):
    rng = np.random.default_rng(100 + trial)
    model = init_model(toy_config(dropout=0.3 if trial % 2 else 0.0), trial)
    # non-zero biases push pre-activations away from the ReLU kink
    for k in model.params:
        model.params[k] += rng.normal(0, 0.1, size=model.params[k].shape)
    x = rng.normal(size=(9, 3))
    g = rng.normal(size=forward(model, x).scores.shape)
    mode = "train" if trial % 2 else "eval"
    grads = backward(model, x, g, mode, seed=trial)
    h = 1e-4
    for name, p in model.params.items():
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = _objective(model, x, g, mode, trial)
            p[idx] = old - h
            down = _objective(model, x, g, mode, trial)
            p[idx] = old
            num[idx] = (up - down) / (2 * h)
        err = np.linalg.norm(grads[name] - num) / max(np.linalg.norm(num), 1e-8)
        assert err < 1e-3, (name, err)


def test_gradient_linearity():
    rng = np.random.default_rng(5)
    model = init_model(toy_config(), 0)
    x = rng.normal(size=(10, 3))
    shape = forward(model, x).scores.shape
    g1, g2 = rng.normal(size=shape), rng.normal(size=shape)
    a, b, c = backward(model, x, g1), backward(model, x, g2), backward(model, x, g1 + g2)
    for k in a:
        np.testing.assert_allclose(c[k], a[k] + b[k], atol=1e-8)


def test_backward_shape_mismatch():
    model = init_model(toy_config(), 0)
    with pytest.raises(ContractError):
        backward(model, np.zeros((10, 3)), np.zeros((2, 2)))


# -- semi-orthogonal constraint ------------------------------------------------------------

def test_orthonormal_rows_fixed_point():
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(8, 4)))
    m = q.T
    assert np.linalg.norm(semi_orthogonal_step(m) - m) < 1e-12


def test_scaled_identity_decreases():
    m = 2 * np.eye(4)
    before = ortho_error(m)
    assert before == pytest.approx(3.0 * 2)
    after = semi_orthogonal_step(m)
    np.testing.assert_allclose(after, -np.eye(4))
    assert ortho_error(after) < before


def test_thirty_iterations_converge():
    rng = np.random.default_rng(12)
    for _ in range(50):
        m = rng.normal(size=(8, 16))
        m *= rng.uniform(0.1, 1.5) / np.linalg.norm(m, 2)
        for _ in range(30):
            m = semi_orthogonal_step(m)
        assert ortho_error(m) < 1e-6


def test_rows_exceeding_columns_rejected():
    with pytest.raises(ContractError):
        semi_orthogonal_step(np.zeros((3, 2)))


# -- SGD --------------------------------------------------------------------------------------

def test_zero_lr_unchanged():
    model = init_model(toy_config(), 0)
    grads = {k: np.ones_like(v) for k, v in model.params.items()}
    new = sgd_step(model, grads, 0.0, apply_constraint=False)
    assert all(np.array_equal(new.params[k], model.params[k]) for k in model.params)


def test_step_reduces_quadratic():
    rng = np.random.default_rng(1)
    model = init_model(toy_config(), 0)
    x = rng.normal(size=(10, 3))
    target = rng.normal(size=forward(model, x).scores.shape)

    def loss(m):
        return 0.5 * float(np.sum((forward(m, x).scores - target) ** 2))

    g = forward(model, x).scores - target
    new = sgd_step(model, backward(model, x, g), 1e-3, apply_constraint=False)
    assert loss(new) < loss(model)


def test_constraint_contracts_near_manifold():
    rng = np.random.default_rng(2)
    model = init_model(toy_config(), 0)
    for _ in range(20):
        grads = {k: rng.normal(0, 0.05, size=v.shape) for k, v in model.params.items()}
        pre = {k: ortho_error(model.params[k] - 0.1 * grads[k])
               for k in model.params if k.endswith(".B")}
        new = sgd_step(model, grads, 0.1, apply_constraint=True)
        for k, e in pre.items():
            if e <= 0.5:
                assert ortho_error(new.params[k]) <= e + 1e-12
        model = new


def test_non_finite_gradient_diverges():
    model = init_model(toy_config(), 0)
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    grads["output.b"][0] = np.nan
    with pytest.raises(TrainingDivergenceError):
        sgd_step(model, grads, 0.1)


# -- serialization -------------------------------------------------------------------------

def test_model_roundtrip():
    model = init_model(toy_config(dropout=0.25, subsampling=3), 4)
    data = save_model(model)
    again = load_model(data)
    assert again.config == model.config
    assert all(np.array_equal(again.params[k], model.params[k]) for k in model.params)
    assert save_model(again) == data


def test_feature_archive_roundtrip(tmp_path):
    feats = {"u1": np.arange(6.0).reshape(2, 3), "u2": np.ones((4, 3))}
    path = tmp_path / "feats.npz"
    write_features(path, feats)
    back = read_features(path)
    assert set(back) == {"u1", "u2"}
    assert back["u1"].dtype == np.float32
    np.testing.assert_array_equal(back["u1"], feats["u1"])
