import numpy as np
import pytest
import torch

from mtseg.segnet import (
    NetConfig,
    build,
    image_pyramid,
    load_checkpoint,
    parameter_count,
    params,
    predict,
    save_checkpoint,
)


def test_build_is_deterministic():
    a = params(build(NetConfig(depth=4, base_filters=16), seed=7))
    b = params(build(NetConfig(depth=4, base_filters=16), seed=7))
    assert list(a) == list(b)
    assert all(torch.equal(a[k], b[k]) for k in a)
    c = params(build(NetConfig(depth=4, base_filters=16), seed=8))
    assert any(not torch.equal(a[k], c[k]) for k in a)


@pytest.mark.parametrize(
    "kw, msg",
    [({"depth": 1}, "depth"), ({"base_filters": 0}, "base_filters"), ({"num_classes": 3}, "num_classes")],
)
def test_invalid_config_rejected(kw, msg):
    with pytest.raises(ValueError, match=msg):
        NetConfig(**kw)


def test_key_set_levels():
    keys = params(build(NetConfig(depth=4, base_filters=32)))
    enc = {k.split(".")[1] for k in keys if k.startswith("encoders.")}
    dec = {k.split(".")[1] for k in keys if k.startswith("decoders.")}
    pyr = {k.split(".")[1] for k in keys if k.startswith("pyramid.")}
    assert enc == {"0", "1", "2", "3"}
    assert dec == {"0", "1", "2"}
    # pyramid inputs at every encoder level except the first (the input itself) and the bottom
    assert pyr == {"1", "2"}


def test_same_config_same_keys_and_shapes():
    a = params(build(NetConfig(depth=3, base_filters=4), seed=1))
    b = params(build(NetConfig(depth=3, base_filters=4), seed=2))
    assert {k: v.shape for k, v in a.items()} == {k: v.shape for k, v in b.items()}
    assert parameter_count(NetConfig(depth=3, base_filters=4)) == parameter_count(NetConfig(depth=3, base_filters=4))


def test_pyramid_sizes_full_resolution():
    levels = image_pyramid(torch.zeros(1, 3, 128, 384), depth=4)
    assert [tuple(lv.shape[-2:]) for lv in levels] == [(128, 384), (64, 192), (32, 96)]


def test_pyramid_depth_two_is_input_only():
    x = torch.rand(2, 3, 8, 8)
    levels = image_pyramid(x, depth=2)
    assert len(levels) == 1 and levels[0] is x


def test_pyramid_constant_image_and_numpy():
    img = np.full((16, 32, 3), 0.37, dtype=np.float32)
    for lv in image_pyramid(img, depth=4):
        assert lv.ndim == 3 and np.allclose(lv, 0.37, atol=1e-7)


def test_pyramid_rejects_indivisible():
    with pytest.raises(ValueError, match="divisible"):
        image_pyramid(torch.zeros(1, 3, 20, 30), depth=4)


def test_forward_full_resolution_shape_and_normalization():
    net = build(NetConfig(depth=4, base_filters=4), seed=0).eval()
    img = np.random.default_rng(0).uniform(size=(1, 128, 384, 3)).astype(np.float32)
    out = predict(net, img)
    assert out.shape == (1, 128, 384, 2)
    assert np.all(np.isfinite(out))
    assert np.max(np.abs(out.sum(-1) - 1)) <= 1e-6


@pytest.mark.parametrize("h, w", [(8, 8), (16, 24), (32, 8)])
def test_output_shape_invariance(h, w):
    net = build(NetConfig(depth=4, base_filters=2), seed=0).eval()
    with torch.no_grad():
        out = net(torch.rand(2, 3, h, w))
    assert out.shape == (2, 2, h, w)


def test_batch_equals_stacked_items_in_eval_mode():
    net = build(NetConfig(depth=3, base_filters=4), seed=3)
    x = np.random.default_rng(1).normal(size=(4, 16, 16, 3)).astype(np.float32)
    batched = predict(net, x)
    single = np.concatenate([predict(net, x[i : i + 1]) for i in range(4)])
    np.testing.assert_allclose(batched, single, atol=1e-5)


def test_identical_params_identical_outputs():
    a, b = build(NetConfig(depth=3, base_filters=4), seed=5), build(NetConfig(depth=3, base_filters=4), seed=5)
    x = np.random.default_rng(2).normal(size=(2, 16, 16, 3)).astype(np.float32)
    assert np.array_equal(predict(a, x), predict(b, x))


def test_shape_mismatch_rejected():
    net = build(NetConfig(depth=3, base_filters=2))
    with pytest.raises(ValueError, match="divisible"):
        net(torch.rand(1, 3, 10, 16))
    with pytest.raises(ValueError, match="expected input"):
        net(torch.rand(1, 1, 16, 16))


def test_gradients_reach_every_weight():
    net = build(NetConfig(depth=4, base_filters=2), seed=0).train()
    net(torch.rand(2, 3, 16, 16))[:, 1].mean().backward()
    for name, p in net.named_parameters():
        assert p.grad is not None, name
        assert torch.isfinite(p.grad).all(), name


def test_checkpoint_roundtrip(tmp_path):
    net = build(NetConfig(depth=3, base_filters=4), seed=9)
    path = tmp_path / "ck.npz"
    save_checkpoint(path, net, step=42)
    loaded, header = load_checkpoint(path)
    assert header["step"] == 42 and header["net_config"]["depth"] == 3
    a, b = params(net), params(loaded)
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_checkpoint_validation(tmp_path):
    net = build(NetConfig(depth=3, base_filters=4))
    path = tmp_path / "ck.npz"
    save_checkpoint(path, net, step=0)
    with np.load(path) as data:
        arrays = dict(data)
    arrays.pop(next(k for k in arrays if k.startswith("param/")))
    bad = tmp_path / "bad.npz"
    np.savez(bad, **arrays)
    with pytest.raises(ValueError, match="key mismatch"):
        load_checkpoint(bad)
