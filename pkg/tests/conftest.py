from dataclasses import dataclass

import numpy as np
import pytest

from reefl.backbone import BackboneConfig, BackboneParams, init_backbone
from reefl.ree import ClassifierParams, ExitSchedule, ReeParams, init_classifier, init_ree


@dataclass
class ModelView:
    backbone: BackboneParams
    ree: ReeParams
    classifier: ClassifierParams
    config: BackboneConfig
    budget: int


def make_view(
    depth=4,
    dim=8,
    heads=2,
    image=8,
    patch=4,
    classes=4,
    exit_blocks=None,
    ree_everywhere=True,
    budget=None,
    seed=0,
    dtype=np.float32,
):
    cfg = BackboneConfig(
        depth=depth, dim=dim, heads=heads, patch_size=patch,
        num_classes=classes, image_size=image, image_channels=1,
    )
    schedule = ExitSchedule(
        tuple(exit_blocks) if exit_blocks else tuple(range(1, depth + 1)),
        depth,
        ree_everywhere,
    )
    rng = np.random.default_rng(seed)
    view = ModelView(
        backbone=init_backbone(cfg, rng, dtype=dtype),
        ree=init_ree(dim, schedule.pos_rows, rng, dtype=dtype),
        classifier=init_classifier(dim, classes, rng, dtype=dtype),
        config=cfg,
        budget=budget if budget is not None else depth,
    )
    return view, schedule


@pytest.fixture
def view_factory():
    return make_view
