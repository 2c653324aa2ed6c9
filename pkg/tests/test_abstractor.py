import numpy as np
import pytest

from dualpath_vlm import tensor as T
from dualpath_vlm.abstractor import (MLP_SEGMENT, QFORMER, AbstractorConfig, VisualAbstractor,
                                     fuse_soft_prompt)
from dualpath_vlm.errors import ConfigError, ContractError, ShapeError
from dualpath_vlm.lm import tokenize
from dualpath_vlm.model import pad_ids
from dualpath_vlm.tensor import Tensor, no_grad


@pytest.fixture(scope="module")
def abstractor():
    return VisualAbstractor(AbstractorConfig(seed=3))


def instr(texts):
    return pad_ids([tokenize(t) for t in texts])


def test_projection_shapes(abstractor, rng):
    x = Tensor(rng.normal(size=(36, 64)))
    assert abstractor.project_pre_qformer(x).shape == (36, 64)
    assert abstractor.project_mlp_path(x).shape == (36, 64)
    assert abstractor.project_post_qformer(Tensor(rng.normal(size=(8, 64)))).shape == (8, 64)


def test_identity_projection(rng):
    a = VisualAbstractor(AbstractorConfig())
    a.proj_pre_qformer.weight.tensor.data = np.eye(64)
    a.proj_post_qformer.weight.tensor.data = np.eye(64)
    x = rng.normal(size=(36, 64))
    np.testing.assert_array_equal(a.project_pre_qformer(Tensor(x)).data, x)
    np.testing.assert_array_equal(a.project_post_qformer(Tensor(x[:8])).data, x[:8])


def test_linear_layers_match_scalar_oracle(abstractor, rng):
    x = rng.normal(size=(5, 64))
    for layer, fn in ((abstractor.proj_pre_qformer, abstractor.project_pre_qformer),
                      (abstractor.proj_post_qformer, abstractor.project_post_qformer)):
        W, b = layer.weight.data, layer.bias.data
        out = fn(Tensor(x)).data
        for k in range(5):
            ref = [sum(x[k, i] * W[i, j] for i in range(64)) + b[j] for j in range(64)]
            assert np.max(np.abs(out[k] - ref)) < 1e-12


def test_mlp_path_scalar_oracle(abstractor, rng):
    import math

    x = rng.normal(size=(3, 64))
    mlp = abstractor.proj_mlp_path
    W1, b1, W2, b2 = mlp.fc1.weight.data, mlp.fc1.bias.data, mlp.fc2.weight.data, mlp.fc2.bias.data
    c = math.sqrt(2 / math.pi)
    out = abstractor.project_mlp_path(Tensor(x)).data
    for k in range(3):
        h = []
        for j in range(W1.shape[1]):
            z = sum(x[k, i] * W1[i, j] for i in range(64)) + b1[j]
            h.append(0.5 * z * (1 + math.tanh(c * (z + 0.044715 * z**3))))
        ref = [sum(h[j] * W2[j, m] for j in range(len(h))) + b2[m] for m in range(64)]
        assert np.max(np.abs(out[k] - ref)) < 1e-10


def test_mlp_zero_weights_give_bias(rng):
    a = VisualAbstractor(AbstractorConfig())
    mlp = a.proj_mlp_path
    for p in mlp.parameters():
        p.tensor.data = np.zeros_like(p.data)
    mlp.fc2.bias.tensor.data = rng.normal(size=64)
    out = a.project_mlp_path(Tensor(rng.normal(size=(36, 64)))).data
    np.testing.assert_array_equal(out, np.broadcast_to(mlp.fc2.bias.data, (36, 64)))


def test_projection_dim_mismatch(abstractor):
    with pytest.raises(ShapeError):
        abstractor.project_pre_qformer(Tensor(np.zeros((36, 32))))


def test_qformer_output_shape(abstractor, rng):
    ids, pad = instr(["What text is shown?"])
    proj = abstractor.project_pre_qformer(Tensor(rng.normal(size=(1, 36, 64))))
    out = abstractor.qformer.forward_tokens(proj, abstractor.qformer.embed_instruction(ids), pad)
    assert out.shape == (1, 8, 64)


def test_qformer_invariant_to_patch_order(abstractor, rng):
    ids, pad = instr(["Is there a red circle?"])
    proj = rng.normal(size=(1, 36, 64))
    perm = rng.permutation(36)
    q = abstractor.qformer
    with no_grad():
        a = q.forward_tokens(Tensor(proj), q.embed_instruction(ids), pad).data
        b = q.forward_tokens(Tensor(proj[:, perm]), q.embed_instruction(ids), pad).data
    np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)


def test_instruction_pad_keys_are_ignored(abstractor, rng):
    q = abstractor.qformer
    proj = Tensor(rng.normal(size=(2, 36, 64)))
    ids, pad = instr(["Read the text.", "How many circles are in the image?"])
    solo_ids, solo_pad = instr(["Read the text."])
    with no_grad():
        batched = q.forward_tokens(proj, q.embed_instruction(ids), pad).data[0]
        alone = q.forward_tokens(Tensor(proj.data[:1]), q.embed_instruction(solo_ids), solo_pad).data[0]
    np.testing.assert_allclose(batched, alone, atol=1e-12, rtol=0)


def test_conditioning_off_matches_empty_instruction(rng):
    on = VisualAbstractor(AbstractorConfig(seed=5))
    off = VisualAbstractor(AbstractorConfig(seed=5, instruction_conditioning=False))
    proj = Tensor(rng.normal(size=(1, 36, 64)))
    with no_grad():
        empty = on.qformer.embed_instruction(np.zeros((1, 0), dtype=np.int64))
        a = on.qformer.forward_tokens(proj, empty, np.zeros((1, 0), bool)).data
        b = off.qformer.forward_tokens(proj).data
    np.testing.assert_array_equal(a, b)


def test_conditioning_contract(rng):
    on = VisualAbstractor(AbstractorConfig())
    off = VisualAbstractor(AbstractorConfig(instruction_conditioning=False))
    proj = Tensor(rng.normal(size=(1, 36, 64)))
    with pytest.raises(ContractError):
        on.qformer.forward_tokens(proj)
    with pytest.raises(ContractError):
        off.qformer.forward_tokens(proj, Tensor(np.zeros((1, 2, 64))))


def test_fused_prompt_layout(abstractor, rng):
    ids, pad = instr(["Describe the image."])
    sp = abstractor(Tensor(rng.normal(size=(1, 36, 64))), ids, pad)
    assert sp.length == 44 and sp.dim == 64
    assert sp.segment_ids == (QFORMER,) * 8 + (MLP_SEGMENT,) * 36


def test_fuse_is_lossless(rng):
    q, m = rng.normal(size=(8, 64)), rng.normal(size=(36, 64))
    sp = fuse_soft_prompt(Tensor(q), Tensor(m))
    assert sp.segment(QFORMER).data.tobytes() == q.tobytes()
    assert sp.segment(MLP_SEGMENT).data.tobytes() == m.tobytes()
    for j in range(44):
        src = q[j] if j < 8 else m[j - 8]
        assert sp.values.data[j].tobytes() == src.tobytes()


def test_fuse_with_empty_qformer_segment(rng):
    m = rng.normal(size=(36, 64))
    sp = fuse_soft_prompt(Tensor(np.zeros((0, 64))), Tensor(m))
    np.testing.assert_array_equal(sp.values.data, m)
    assert set(sp.segment_ids) == {MLP_SEGMENT}


def test_fuse_dim_mismatch():
    with pytest.raises(ShapeError):
        fuse_soft_prompt(Tensor(np.zeros((8, 64))), Tensor(np.zeros((36, 32))))


@pytest.mark.parametrize("variant,length", [("dual_path", 44), ("qformer_only", 8), ("mlp_only", 36)])
def test_variants_run(variant, length, rng):
    a = VisualAbstractor(AbstractorConfig().for_variant(variant))
    ids, pad = instr(["What color is the circle?"])
    assert a(Tensor(rng.normal(size=(1, 36, 64))), ids, pad).length == length


def test_encoder_source_topology(rng):
    a = VisualAbstractor(AbstractorConfig(mlp_source="encoder", d_v=32, seed=1))
    ids, pad = instr(["x"])
    feats = rng.normal(size=(1, 36, 32))
    sp = a(Tensor(feats), ids, pad)
    np.testing.assert_allclose(sp.segment(MLP_SEGMENT).data, a.project_mlp_path(Tensor(feats)).data, atol=0)


def test_config_validation():
    with pytest.raises(ConfigError):
        AbstractorConfig(d_q=30, qformer_heads=4)
    with pytest.raises(ConfigError):
        AbstractorConfig(use_qformer=False, use_mlp=False)
    with pytest.raises(ConfigError):
        AbstractorConfig().for_variant("triple_path")


def test_gradients_reach_projections_and_stop_at_frozen_qformer(rng):
    a = VisualAbstractor(AbstractorConfig(seed=2))
    for name, p in a.named_parameters():
        p.freeze(name.startswith("qformer."))
    ids, pad = instr(["Read the text."])
    sp = a(Tensor(rng.normal(size=(1, 36, 64))), ids, pad)
    T.backward(T.tsum(sp.values * sp.values))
    for name, p in a.named_parameters():
        if name.startswith("qformer."):
            assert p.grad is None
        else:
            assert p.grad is not None and np.any(p.grad != 0)
