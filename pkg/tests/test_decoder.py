import numpy as np
import pytest
import torch

from oracles import hier_decoder_oracle, sigmoid
from hcep.decoder import (
    DecoderOutput,
    HierDecoder,
    HierSegModel,
    export_level_maps,
    hierarchical_probability,
    hypernetwork_logits,
    mask_statistics,
)
from hcep.errors import ShapeError, ShapeMismatchError
from hcep.hierarchy import ConceptHierarchy, ConceptNode
from hcep.nets import ImageEmbedding, position_encoding


def _embedding(g=4, d=8, seed=0):
    rng = np.random.default_rng(seed)
    tokens = torch.as_tensor(rng.standard_normal((1, g, g, d)))
    pos = position_encoding(g, d, dtype=torch.float64)
    return ImageEmbedding(tokens=tokens, pos=pos)


class TestQueryBank:
    def test_slot_map_follows_ascending_ids(self, tiny_hierarchy, tiny_net_cfg):
        dec = HierDecoder(tiny_net_cfg, tiny_hierarchy)
        assert dec.bank.slot_map["parent"] == {1: 0, 2: 1}
        assert dec.bank.slot_map["child"] == {3: 0, 4: 1, 5: 2}
        assert dec.bank.parent_queries.shape == (2, 8)
        assert dec.bank.conf_tokens.shape == (5, 8)


class TestHypernetworkLogits:
    def test_matches_loop(self):
        rng = np.random.default_rng(0)
        embed = rng.standard_normal((1, 3, 4))
        pix = rng.standard_normal((1, 5, 5, 4))
        got = hypernetwork_logits(torch.as_tensor(embed), torch.as_tensor(pix)).numpy()
        for n in range(3):
            for i in range(5):
                for j in range(5):
                    want = sum(embed[0, n, c] * pix[0, i, j, c] for c in range(4))
                    assert abs(got[0, n, i, j] - want) < 1e-12

    def test_dim_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            hypernetwork_logits(torch.zeros(1, 3, 4), torch.zeros(1, 5, 5, 6))


class TestMaskStatistics:
    def test_values(self):
        rng = np.random.default_rng(2)
        logits = rng.standard_normal((3, 6, 6))
        got = mask_statistics(torch.as_tensor(logits)).numpy()
        for i in range(3):
            p = sigmoid(logits[i]).ravel()
            assert abs(got[i, 0] - p.mean()) < 1e-12
            assert abs(got[i, 1] - p.max()) < 1e-12
            assert abs(got[i, 2] - np.abs(p - 0.5).mean()) < 1e-12
            assert abs(got[i, 3] - p.std(ddof=1)) < 1e-12
            assert abs(got[i, 4] - (p * p).sum() / (p.sum() + 1e-6)) < 1e-12


class TestForwardOracle:
    @pytest.mark.parametrize("seed", [0, 1])
    def test_matches_scalar_loop(self, tiny_hierarchy, tiny_net_cfg, seed):
        torch.manual_seed(seed)
        dec = HierDecoder(tiny_net_cfg, tiny_hierarchy).double()
        emb = _embedding(seed=seed)
        with torch.no_grad():
            out = dec(emb)
        p_logits, c_logits, p_conf, c_conf = hier_decoder_oracle(
            dec, emb.tokens[0].numpy(), emb.pos.numpy()
        )
        assert np.abs(out.parent_logits[0].numpy() - p_logits).max() < 1e-6
        assert np.abs(out.child_logits[0].numpy() - c_logits).max() < 1e-6
        assert np.abs(out.parent_conf[0].numpy() - p_conf).max() < 1e-6
        assert np.abs(out.child_conf[0].numpy() - c_conf).max() < 1e-6

    def test_matches_with_enhancer_disabled(self, tiny_hierarchy, tiny_net_cfg):
        torch.manual_seed(2)
        dec = HierDecoder(tiny_net_cfg, tiny_hierarchy).double()
        dec.enhancer_enabled = False
        emb = _embedding(seed=2)
        with torch.no_grad():
            out = dec(emb)
        p_logits, c_logits, _, _ = hier_decoder_oracle(
            dec, emb.tokens[0].numpy(), emb.pos.numpy()
        )
        assert np.abs(out.parent_logits[0].numpy() - p_logits).max() < 1e-6
        assert np.abs(out.child_logits[0].numpy() - c_logits).max() < 1e-6

    def test_output_shapes(self, tiny_hierarchy, tiny_net_cfg):
        torch.manual_seed(0)
        dec = HierDecoder(tiny_net_cfg, tiny_hierarchy)
        out = dec(ImageEmbedding(
            tokens=torch.randn(2, 4, 4, 8), pos=position_encoding(4, 8)
        ))
        assert out.parent_logits.shape == (2, 2, 16, 16)
        assert out.child_logits.shape == (2, 3, 16, 16)
        assert out.parent_conf.shape == (2, 2)
        assert out.child_conf.shape == (2, 3)
        assert (out.parent_conf > 0).all() and (out.parent_conf < 1).all()

    def test_enhancer_toggle_changes_children_only(self, tiny_hierarchy, tiny_net_cfg):
        torch.manual_seed(4)
        dec = HierDecoder(tiny_net_cfg, tiny_hierarchy).double()
        emb = _embedding(seed=4)
        with torch.no_grad():
            on = dec(emb)
            dec.enhancer_enabled = False
            off = dec(emb)
        assert torch.equal(on.parent_logits, off.parent_logits)
        assert not torch.equal(on.child_logits, off.child_logits)

    def test_detach_parent_logits_blocks_gradient(self, tiny_hierarchy, tiny_net_cfg):
        torch.manual_seed(5)
        dec = HierDecoder(tiny_net_cfg, tiny_hierarchy).double()
        dec.detach_parent_logits = True
        emb = _embedding(seed=5)
        out = dec(emb)
        out.child_logits.sum().backward()
        # parent mask mlp only feeds the child path through the enhancer
        assert dec.parent_mask_mlp[0].weight.grad is None or \
            dec.parent_mask_mlp[0].weight.grad.abs().max() == 0


class TestHierSegModel:
    def test_depth_check(self, tiny_net_cfg):
        flat = ConceptHierarchy([ConceptNode(1, "a", 0)])
        with pytest.raises(ShapeError):
            HierSegModel(tiny_net_cfg, flat)

    def test_batched_matches_unbatched(self, tiny_hierarchy, tiny_net_cfg):
        torch.manual_seed(0)
        model = HierSegModel(tiny_net_cfg, tiny_hierarchy).double()
        images = torch.rand(2, 16, 16, 3, dtype=torch.float64)
        with torch.no_grad():
            full = model(images)
            single = model(images[0])
        assert torch.allclose(full.parent_logits[0], single.parent_logits, atol=1e-10)
        assert torch.allclose(full.child_conf[0], single.child_conf, atol=1e-10)
        assert single.parent_logits.dim() == 3


class TestHierarchicalProbability:
    def test_matches_loop(self, tiny_hierarchy):
        rng = np.random.default_rng(0)
        pp = rng.random((2, 4, 4))
        cp = rng.random((3, 4, 4))
        out = hierarchical_probability(pp, cp, tiny_hierarchy)
        # children 3,4 belong to parent 1 (slot 0); child 5 to parent 2
        assert np.allclose(out[0], pp[0] * cp[0])
        assert np.allclose(out[1], pp[0] * cp[1])
        assert np.allclose(out[2], pp[1] * cp[2])

    def test_shape_errors(self, tiny_hierarchy):
        with pytest.raises(ShapeMismatchError):
            hierarchical_probability(np.zeros((1, 4, 4)), np.zeros((3, 4, 4)), tiny_hierarchy)
        with pytest.raises(ShapeMismatchError):
            hierarchical_probability(np.zeros((2, 4, 4)), np.zeros((3, 5, 5)), tiny_hierarchy)


class TestExportLevelMaps:
    def test_matches_pixel_rule(self, tiny_hierarchy):
        rng = np.random.default_rng(1)
        out = DecoderOutput(
            parent_logits=torch.as_tensor(rng.standard_normal((2, 6, 6))),
            child_logits=torch.as_tensor(rng.standard_normal((3, 6, 6))),
            parent_conf=torch.zeros(2),
            child_conf=torch.zeros(3),
        )
        maps = export_level_maps(out, tiny_hierarchy, threshold=0.5)
        for level, logits, ids in ((0, out.parent_logits, [1, 2]), (1, out.child_logits, [3, 4, 5])):
            probs = torch.sigmoid(logits).numpy()
            for i in range(6):
                for j in range(6):
                    col = probs[:, i, j]
                    want = ids[int(col.argmax())] if col.max() > 0.5 else 0
                    assert maps[level][i, j] == want

    def test_rejects_batched(self, tiny_hierarchy):
        out = DecoderOutput(
            parent_logits=torch.zeros(1, 2, 6, 6), child_logits=torch.zeros(1, 3, 6, 6),
            parent_conf=torch.zeros(1, 2), child_conf=torch.zeros(1, 3),
        )
        with pytest.raises(ShapeError):
            export_level_maps(out, tiny_hierarchy)
