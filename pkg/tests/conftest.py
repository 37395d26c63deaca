from __future__ import annotations

import pytest

from waynav import worldsim as ws
from waynav.datastore import Dataset, save_lap

MINI_SEED = 5
MINI_LAPS = {"train": 3, "val": 2, "test": 2}


@pytest.fixture(scope="session")
def mini_worlds():
    """One small four-corner world per role; quick to render, full pipeline."""
    return ws.generate_world_set(
        MINI_SEED, n_train=1, n_val=1, n_test=1, corners=4, long_corners=0, min_edge=5, max_edge=6
    )


@pytest.fixture(scope="session")
def mini_dataset_root(mini_worlds, tmp_path_factory):
    root = tmp_path_factory.mktemp("mini_laps")
    roles = {}
    for world in mini_worlds:
        for course in world.courses:
            roles[course.course_id] = world.role
            for i in range(MINI_LAPS[world.role]):
                lap = ws.record_lap(world, course, f"lap{i:02d}", seed=MINI_SEED)
                lap.set_labels(*ws.segment_lap(lap, course))
                save_lap(lap, root)
    return root, roles


@pytest.fixture(scope="session")
def mini_dataset(mini_dataset_root):
    root, roles = mini_dataset_root
    return Dataset.open(root, roles)
