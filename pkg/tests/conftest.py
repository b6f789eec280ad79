import pytest
import torch

from hcep.evolve import configure_determinism
from hcep.hierarchy import ConceptNode, ConceptHierarchy, desk_taxonomy
from hcep.nets import NetConfig
from hcep.scenes import SceneConfig, generate_dataset


@pytest.fixture(scope="session", autouse=True)
def _determinism():
    configure_determinism()


@pytest.fixture
def tiny_hierarchy():
    # 2 parents, 3 children; the shape used by the gradient-check config
    nodes = [
        ConceptNode(1, "p1", 0),
        ConceptNode(2, "p2", 0),
        ConceptNode(3, "c1", 1, 1),
        ConceptNode(4, "c2", 1, 1),
        ConceptNode(5, "c3", 1, 2),
    ]
    return ConceptHierarchy(nodes)


@pytest.fixture
def desk():
    return desk_taxonomy()


@pytest.fixture
def tiny_net_cfg():
    return NetConfig(embed_dim=8, encoder_blocks=1, heads=2, patch_size=4)


@pytest.fixture
def small_dataset(tmp_path, desk):
    """10 tiny scenes split 7/1/2."""
    root = tmp_path / "ds"
    cfg = SceneConfig(image_size=16, seed=5)
    manifest = generate_dataset(cfg, desk, 10, root)
    return root, manifest, cfg


def tiny_model(hierarchy, cfg=None, seed=0):
    from hcep.decoder import HierSegModel

    torch.manual_seed(seed)
    return HierSegModel(
        cfg or NetConfig(embed_dim=8, encoder_blocks=1, heads=2, patch_size=4), hierarchy
    )
