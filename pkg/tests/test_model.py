import numpy as np
import pytest
import torch

from conftest import randomize
from posebert.errors import AllMasked, ShapeMismatch
from posebert.model import TINY, FrameMask, PoseBertConfig, init_model, theta_mean
from posebert.rotations import rot6d_to_mat


def hand_count(L, D, T, hidden, shared=True):
    block = 2 * D + (D * 3 * D + 3 * D) + (D * D + D)
    reg = (D + 144) * hidden + hidden + hidden * hidden + hidden + hidden * 144 + 144
    return 144 * D + D + T * D + D + L * block + (1 if shared else L) * reg


def test_parameter_counts():
    assert init_model(PoseBertConfig()).num_parameters() == hand_count(4, 512, 16, 1024) == 6159504
    m = init_model(PoseBertConfig(**TINY))
    assert m.num_parameters() == hand_count(2, 64, 16, 256)
    m = init_model(PoseBertConfig(**TINY, share_regressor=False))
    assert m.num_parameters() == hand_count(2, 64, 16, 256, shared=False)
    assert "blocks.1.regressor.fc1.weight" in m.params


def test_config_validation():
    with pytest.raises(ValueError):
        PoseBertConfig(embed_dim=30, num_heads=4)
    with pytest.raises(ValueError):
        PoseBertConfig(num_layers=0)
    with pytest.raises(ValueError):
        FrameMask(np.zeros(4, bool))


def test_theta_mean_is_identity():
    np.testing.assert_array_equal(rot6d_to_mat(theta_mean(torch.float64).view(24, 6).numpy()),
                                  np.broadcast_to(np.eye(3), (24, 3, 3)))


def test_untrained_model_emits_mean_pose(tiny_model, rng):
    x = rng.normal(size=(3, 8, 144))
    vis = rng.random((3, 8)) > 0.3
    vis[:, 0] = True
    out = tiny_model(x, vis)
    assert torch.equal(out, tiny_model.theta_mean.expand(3, 8, 144))


def test_output_shapes(tiny_model, rng):
    assert tiny_model(rng.normal(size=(8, 144))).shape == (8, 144)
    assert tiny_model(rng.normal(size=(2, 5, 144))).shape == (2, 5, 144)
    out, layers, att = tiny_model(rng.normal(size=(2, 8, 144)), return_all=True, return_attention=True)
    assert len(layers) == 2 and torch.equal(layers[-1], out)
    assert att[0].shape == (2, 2, 8, 8)
    with pytest.raises(ShapeMismatch):
        tiny_model(rng.normal(size=(2, 9, 144)))
    with pytest.raises(ShapeMismatch):
        tiny_model(rng.normal(size=(2, 8, 140)))
    with pytest.raises(ShapeMismatch):
        tiny_model(rng.normal(size=(2, 8, 144)), np.ones((3, 8), bool))


def test_all_masked_window_rejected(tiny_model, rng):
    vis = np.ones((2, 8), bool)
    vis[1] = False
    with pytest.raises(AllMasked):
        tiny_model(rng.normal(size=(2, 8, 144)), vis)


def test_masked_content_never_reaches_output(tiny_model, rng):
    randomize(tiny_model, 1)
    x = rng.normal(size=(2, 8, 144))
    vis = np.ones((2, 8), bool)
    vis[0, [1, 5]] = False
    vis[1, [0, 2, 7]] = False
    a, att = tiny_model(x, vis, return_attention=True)
    x2 = x.copy()
    x2[~vis] = rng.normal(size=((~vis).sum(), 144)) * 1e3
    b = tiny_model(x2, vis)
    assert torch.equal(a, b)
    for w in att:
        assert (w.permute(0, 1, 3, 2)[torch.as_tensor(~vis)[:, None].expand(-1, 2, -1)] == 0).all()


def test_visible_content_does_matter(tiny_model, rng):
    randomize(tiny_model, 2)
    x = rng.normal(size=(1, 8, 144))
    x2 = x.copy()
    x2[0, 3] += 1.0
    assert not torch.equal(tiny_model(x), tiny_model(x2))


def test_masked_frames_get_mask_token(tiny_model, rng):
    randomize(tiny_model, 3)
    vis = np.ones((1, 8), bool)
    vis[0, 4] = False
    e = tiny_model.embed(torch.as_tensor(rng.normal(size=(1, 8, 144))), torch.as_tensor(vis))
    p = tiny_model.params
    torch.testing.assert_close(e[0, 4], p["mask_token"] + p["pos_enc"][4])


def test_positional_encoding_switch():
    m = init_model(PoseBertConfig(**TINY, use_positional_encoding=False))
    assert not m.params.is_trainable("pos_enc")


def test_permuting_frames_without_positions_permutes_output(rng):
    m = randomize(init_model(PoseBertConfig(num_layers=2, embed_dim=16, num_heads=2, seq_len=6,
                                            regressor_hidden=16, use_positional_encoding=False),
                             dtype=torch.float64), 4)
    x = rng.normal(size=(1, 6, 144))
    perm = rng.permutation(6)
    torch.testing.assert_close(m(x)[:, perm], m(x[:, perm]))


def test_init_is_deterministic():
    a, b = init_model(PoseBertConfig(**TINY), seed=7), init_model(PoseBertConfig(**TINY), seed=7)
    for (n, p), (_, q) in zip(a.params.items(), b.params.items()):
        assert torch.equal(p, q), n
    c = init_model(PoseBertConfig(**TINY), seed=8)
    assert not torch.equal(a.params["proj.weight"], c.params["proj.weight"])
