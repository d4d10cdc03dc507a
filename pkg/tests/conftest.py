from types import SimpleNamespace

import pytest

from aba.core import ActionPlan, Dataset, LabelGridImage, Observation, Proprioception, Trajectory


def paint(width, height, rects, background=0):
    """Build a label image from (label, left, right, top, bottom) rectangles.

    Later rectangles draw over earlier ones.
    """
    cells = [background] * (width * height)
    for label, left, right, top, bottom in rects:
        for r in range(top, bottom + 1):
            for c in range(left, right + 1):
                cells[r * width + c] = label
    return LabelGridImage(width=width, height=height, cells=tuple(cells))


def obs_at(x, y, gripper=0.0, t=0, image=None, grid=8):
    img = image if image is not None else paint(grid, grid, [])
    return Observation(image=img, proprio=Proprioception(x, y, gripper), timestep=t)


def single_obs_trajectory(obs, mode="sweep-up", env="test/env", plan_length=2):
    plan = ActionPlan(steps=((0.0, 0.0, 0.0),) * plan_length)
    return Trajectory(pairs=((obs, plan),), environment_id=env, mode_label=mode)


@pytest.fixture(scope="session")
def sweep_pipeline():
    """A small but real sweep stack: demos, fitted model, calibrated gate.

    Three demos per mode keep fitting and calibration near-instant while
    every downstream code path (retrieval, clustering, intervention) still
    has real structure to work with.
    """
    from aba import bench
    from aba.runtime import CandidateIndex
    from aba.sim import task_config

    cfg = task_config("sweep-sort")
    dataset = bench.gen_data(cfg, 3, seed=0)
    model = bench.fit_task(dataset, cfg)
    calibration = bench.calibrate_task(cfg, model, dataset, seed=0, rollouts=4)
    return SimpleNamespace(
        cfg=cfg,
        dataset=dataset,
        model=model,
        gate=calibration.gate,
        calibration=calibration,
        candidates=CandidateIndex(dataset),
    )


@pytest.fixture
def tiny_dataset():
    """Three single-observation trajectories on an 8x8 grid."""
    trajs = tuple(
        single_obs_trajectory(obs_at(float(i), 0.0), mode="sweep-up" if i % 2 == 0 else "sweep-down")
        for i in range(3)
    )
    return Dataset(
        trajectories=trajs,
        label_registry={0: "floor", 1: "agent"},
        plan_length=2,
        grid_width=8,
        grid_height=8,
        config_hash="cafebabe00000000",
    )
