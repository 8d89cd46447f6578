import numpy as np
import pytest
import torch

from conftest import randomize
from posebert.errors import AllMasked, ParseError, ShapeMismatch
from posebert.inference import (infer_dataset, infer_rotations, parse_mask_spec, tent_weights,
                                window_starts)
from posebert.model import PoseBertConfig, init_model
from posebert.rotations import aa_to_mat


def identity_model(T=16, c=20.0, dtype=torch.float64):
    """Hand-set weights that copy each input frame to the output.

    Identity projection, no positional encoding, zero attention output, and
    a regressor computing theta + (x - theta) through GELUs kept in their
    linear regime by a large bias.
    """
    cfg = PoseBertConfig(num_layers=1, embed_dim=144, num_heads=4, seq_len=T, regressor_hidden=288)
    m = init_model(cfg, dtype=dtype)
    p = m.params
    I = torch.eye(144, dtype=dtype)
    with torch.no_grad():
        p["proj.weight"].copy_(I)
        p["proj.bias"].zero_()
        p["pos_enc"].zero_()
        p["blocks.0.attn.out.weight"].zero_()
        p["blocks.0.attn.out.bias"].zero_()
        # [x, theta] -> [x - theta + c, theta - x + c]
        d = torch.cat([I, -I], 0)
        p["regressor.fc1.weight"].copy_(torch.cat([d, -d], 1))
        p["regressor.fc1.bias"].fill_(c)
        p["regressor.fc2.weight"].copy_(torch.eye(288, dtype=dtype))
        p["regressor.fc2.bias"].zero_()
        p["regressor.out.weight"].copy_(torch.cat([I, -I], 0) / 2)
        p["regressor.out.bias"].zero_()
    return m


def test_window_layout():
    assert window_starts(10, 16) == [0]
    assert window_starts(16, 16) == [0]
    assert window_starts(40, 16) == [0, 8, 16, 24]
    assert window_starts(41, 16) == [0, 8, 16, 24, 25]
    assert tent_weights(4).tolist() == [1, 2, 2, 1]


def test_mask_spec():
    vis = parse_mask_spec("1, 4-6", 8)
    assert vis.tolist() == [True, False, True, True, False, False, False, True]
    assert parse_mask_spec("", 3).all()
    for bad in ("x", "5-3", "9", "-1"):
        with pytest.raises(ParseError):
            parse_mask_spec(bad, 8)


@pytest.mark.parametrize("F", [5, 16, 37, 64])
def test_identity_stub_reproduces_input(F, rng):
    aa = rng.normal(size=(F, 24, 3)) * 0.5
    out = infer_rotations(identity_model(), aa)
    np.testing.assert_allclose(aa_to_mat(out), aa_to_mat(aa), atol=1e-9)


def test_infill_all_visible_equals_denoise(rng):
    m = randomize(init_model(PoseBertConfig(num_layers=1, embed_dim=16, num_heads=2, seq_len=8,
                                            regressor_hidden=16), dtype=torch.float64), 0)
    aa = rng.normal(size=(21, 24, 3)) * 0.3
    np.testing.assert_array_equal(infer_rotations(m, aa), infer_rotations(m, aa, np.ones(21, bool)))


def test_masked_frames_independent_of_their_values(rng):
    m = randomize(init_model(PoseBertConfig(num_layers=2, embed_dim=16, num_heads=2, seq_len=8,
                                            regressor_hidden=16), dtype=torch.float64), 1)
    aa = rng.normal(size=(30, 24, 3)) * 0.3
    vis = parse_mask_spec("3,10-12,25", 30)
    a = infer_rotations(m, aa, vis)
    aa2 = aa.copy()
    aa2[~vis] = rng.normal(size=((~vis).sum(), 24, 3))
    np.testing.assert_array_equal(a, infer_rotations(m, aa2, vis))


def test_inference_errors(rng):
    m = identity_model(T=4)
    with pytest.raises(AllMasked):
        infer_rotations(m, np.zeros((10, 24, 3)), parse_mask_spec("0-4", 10))
    with pytest.raises(ShapeMismatch):
        infer_rotations(m, np.zeros((10, 23, 3)))
    with pytest.raises(ShapeMismatch):
        infer_rotations(m, np.zeros((10, 24, 3)), np.ones(9, bool))


def test_infer_dataset_keeps_names_and_translation(small_dataset):
    out = infer_dataset(identity_model(), small_dataset)
    for a, b in zip(small_dataset.sequences, out.sequences):
        assert a.name == b.name
        np.testing.assert_array_equal(a.translation, b.translation)
