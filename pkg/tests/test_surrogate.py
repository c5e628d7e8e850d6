from dataclasses import replace

import numpy as np
import pytest
import torch

from uniqcap.embedding import ClipSet, PromptBank, normalize
from uniqcap.errors import FormatError, InvalidInputError, TrainingError
from uniqcap.oracle import synth_generate
from uniqcap.surrogate import (
    SimilaritySample,
    TrainConfig,
    _autograd_gradient,
    gradient_check,
    init_model,
    load_checkpoint,
    mse,
    parameter_vector,
    predict,
    predict_tensor,
    samples_from_tensor,
    save_checkpoint,
    train,
)

SMALL = dict(model_dim=32, n_heads=4, ff_dim=64)


@pytest.fixture(scope="module")
def tiny():
    inst = synth_generate(3, 2, 1, dim=16, seed=0)
    return inst, inst.tensor()


@pytest.fixture(scope="module")
def fitted(tiny):
    inst, tensor = tiny
    model = init_model(16, 2, seed=0, **SMALL)
    samples = samples_from_tensor(inst.clips, tensor)
    model, losses = train(model, samples, TrainConfig.extended(400, lr=3e-3, batch_size=18))
    return model, samples, losses


def test_init_reproducible():
    a = parameter_vector(init_model(64, 10, seed=3))
    b = parameter_vector(init_model(64, 10, seed=3))
    c = parameter_vector(init_model(64, 10, seed=4))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_shapes_and_parameter_count():
    m = init_model(64, 10)
    assert tuple(m.prompt_tokens.shape) == (10, 128)
    count = sum(p.numel() for p in m.parameters())
    assert count == sum(p.numel() for p in init_model(64, 10, seed=9).parameters())
    assert count != sum(p.numel() for p in init_model(64, 11).parameters())


def test_init_bounds():
    m = init_model(64, 10)
    assert float(m.input_proj.weight.detach().abs().max()) <= 1 / np.sqrt(64)
    assert float(m.head.weight.detach().abs().max()) <= 1 / np.sqrt(128)


def test_bad_hparams():
    with pytest.raises(InvalidInputError):
        init_model(16, 2, model_dim=30, n_heads=4)
    with pytest.raises(InvalidInputError):
        init_model(16, 0)


def test_zero_head_predicts_zero(rng):
    m = init_model(16, 3, **SMALL)
    with torch.no_grad():
        m.head.weight.zero_()
        m.head.bias.zero_()
    x = normalize(rng.standard_normal((5, 16)))
    assert np.all(predict(m, x, x[::-1], np.array([0, 1, 2, 0, 1])) == 0)


def test_forward_deterministic(rng):
    x = normalize(rng.standard_normal((2, 16)))
    a = predict(init_model(16, 3, seed=1, **SMALL), x[0], x[1], 2)
    b = predict(init_model(16, 3, seed=1, **SMALL), x[0], x[1], 2)
    assert abs(a - b) <= 1e-6
    assert np.isfinite(a)


def test_predict_validation(rng):
    m = init_model(16, 3, **SMALL)
    x = normalize(rng.standard_normal(16))
    with pytest.raises(InvalidInputError):
        predict(m, x, x, 3)
    with pytest.raises(InvalidInputError):
        predict(m, x[:8], x[:8], 0)


def test_overfit_ten_samples(rng):
    x = normalize(rng.standard_normal((10, 2, 16)))
    samples = [SimilaritySample(x[n, 0], x[n, 1], n % 3, float(rng.uniform(-0.5, 0.5))) for n in range(10)]
    m = init_model(16, 3, seed=0, **SMALL)
    m, losses = train(m, samples, TrainConfig.extended(500, lr=3e-3, batch_size=10))
    assert mse(m, samples) < 1e-3
    assert all(np.isfinite(losses))


def test_zero_learning_rate_keeps_loss(tiny):
    inst, tensor = tiny
    m = init_model(16, 2, seed=0, **SMALL)
    _, losses = train(m, samples_from_tensor(inst.clips, tensor), TrainConfig.extended(5, lr=0.0, batch_size=4))
    assert max(losses) - min(losses) < 1e-7


def test_duplicated_dataset_same_trace(tiny):
    inst, tensor = tiny
    s = samples_from_tensor(inst.clips, tensor)
    doubled = s.take(np.repeat(np.arange(len(s)), 2))
    cfg = TrainConfig.extended(20, lr=1e-3, batch_size=1000)
    _, a = train(init_model(16, 2, seed=0, **SMALL), s, cfg)
    _, b = train(init_model(16, 2, seed=0, **SMALL), doubled, cfg)
    assert np.allclose(a, b, rtol=1e-5, atol=1e-8)


def test_training_rejects_bad_data(tiny):
    inst, tensor = tiny
    s = samples_from_tensor(inst.clips, tensor)
    with pytest.raises(InvalidInputError):
        train(init_model(16, 2, **SMALL), replace(s, target=s.target * 3), TrainConfig(epochs=1, milestones=()))
    bad = replace(s, embed_i=np.full_like(s.embed_i, np.nan))
    with pytest.raises(TrainingError):
        train(init_model(16, 2, **SMALL), bad, TrainConfig(epochs=1, milestones=()))


def test_train_config_validation():
    with pytest.raises(InvalidInputError):
        TrainConfig(epochs=10)
    assert TrainConfig.extended(25).milestones == (15, 20)
    assert TrainConfig.extended(1000).milestones == (600, 800)


def test_predict_tensor_shape_and_calls():
    clips = ClipSet(("a", "b"), np.eye(2, 8)[:, None, :])
    m = init_model(8, 1, **SMALL)
    rows = []
    hook = m.register_forward_hook(lambda mod, inp, out: rows.append(len(out)))
    t = predict_tensor(m, clips, PromptBank(("p",)))
    hook.remove()
    assert t.shape == (2, 2, 1, 1) and sum(rows) == 4
    assert t.provenance == "surrogate"
    assert np.all(np.isfinite(t.values))


def test_predict_tensor_bank_mismatch():
    clips = ClipSet(("a", "b"), np.eye(2, 8)[:, None, :])
    with pytest.raises(InvalidInputError):
        predict_tensor(init_model(8, 2, **SMALL), clips, PromptBank(("p",)))


def test_trained_tensor_close_to_exact(tiny, fitted):
    inst, tensor = tiny
    model, _, losses = fitted
    pred = predict_tensor(model, inst.clips, inst.bank)
    assert np.max(np.abs(pred.values - tensor.values)) < 0.05
    assert losses[-1] < losses[0]


def test_asymmetric_predictions(fitted, rng):
    model = fitted[0]
    x = normalize(rng.standard_normal((100, 2, 16)))
    k = rng.integers(0, 2, size=100)
    ab = predict(model, x[:, 0], x[:, 1], k)
    ba = predict(model, x[:, 1], x[:, 0], k)
    assert np.mean(ab != ba) >= 0.9


def test_gradient_check_passes(fitted):
    model, samples, _ = fitted
    sample = SimilaritySample(samples.embed_i[5], samples.embed_j[5], int(samples.k[5]), float(samples.target[5]))
    assert gradient_check(model, sample, n_coords=64) < 1e-3


def test_gradient_check_detects_corruption(rng):
    model = init_model(16, 2, seed=1, **SMALL)
    x = normalize(rng.standard_normal((2, 16)))
    sample = SimilaritySample(x[0], x[1], 1, 0.9)
    grad = _autograd_gradient(model.double(), sample).detach().numpy()
    model.float()
    target = int(np.argmax(np.abs(grad)))

    def corrupted(m, s):
        g = _autograd_gradient(m, s).clone()
        g[target] = -g[target]
        return g

    assert gradient_check(model, sample, coords=[target]) < 1e-3
    assert gradient_check(model, sample, coords=[target], gradient_fn=corrupted) > 1e-1


def test_gradient_check_degenerate():
    model = init_model(4, 1, model_dim=8, n_heads=2, ff_dim=8)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    sample = SimilaritySample(np.zeros(4, np.float32), np.zeros(4, np.float32), 0, 0.0)
    assert np.isfinite(gradient_check(model, sample, n_coords=32))


def test_checkpoint_round_trip(tmp_path, fitted, rng):
    model = fitted[0]
    path = tmp_path / "m.cdpn"
    save_checkpoint(path, model)
    back = load_checkpoint(path)
    assert back.hparams == model.hparams
    assert np.array_equal(parameter_vector(back), parameter_vector(model))
    x = normalize(rng.standard_normal((20, 2, 16)))
    k = rng.integers(0, 2, 20)
    assert np.array_equal(predict(back, x[:, 0], x[:, 1], k), predict(model, x[:, 0], x[:, 1], k))
    save_checkpoint(tmp_path / "again.cdpn", back)
    assert (tmp_path / "again.cdpn").read_bytes() == path.read_bytes()


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "m.cdpn"
    save_checkpoint(path, init_model(8, 2, **SMALL))
    data = path.read_bytes()
    cases = [
        (b"NOPE" + data[4:], "magic"),
        (data[:20], "header"),
        (data[:4] + b"\x07" + data[5:], "version"),
        (data[:-4], "payload"),
        (data[:33 - 4] + (1).to_bytes(4, "little") + data[33:], "parameter_count"),
    ]
    for blob, field in cases:
        path.write_bytes(blob)
        with pytest.raises(FormatError) as exc:
            load_checkpoint(path)
        assert exc.value.field == field
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "missing.cdpn")
