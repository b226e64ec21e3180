import numpy as np
import pytest
from hypothesis import settings

from walker.morphology import preset
from walker.sim import StepSnapshot

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def planar():
    return preset("planar-walker")


@pytest.fixture(scope="session")
def paper():
    return preset("paper-dims")


def random_snapshot(rng: np.random.Generator, E: int, D: int, n_coll: int = 3) -> StepSnapshot:
    """Arbitrary (not physically consistent) snapshot covering every reward input."""
    u = rng.uniform
    standing = (rng.random(E) < 0.2).astype(float)
    commands = np.stack([standing, u(0, 1, E) * (1 - standing), np.zeros(E), np.zeros(E)], axis=1)
    contact = rng.random((E, 2)) < 0.5
    t = u(0, 5, E)
    return StepSnapshot(
        q=u(-1, 1, (E, D)),
        qd=u(-5, 5, (E, D)),
        prev_qd=u(-5, 5, (E, D)),
        tau=u(-100, 100, (E, D)),
        prev_tau=u(-100, 100, (E, D)),
        tau_max=u(50, 150, D),
        q_default=u(-0.5, 0.5, D),
        q_target=u(-1, 1, (E, D)),
        actions=rng.standard_normal((E, D)),
        prev_actions=rng.standard_normal((E, D)),
        prev_prev_actions=rng.standard_normal((E, D)),
        torso_pos=np.stack([u(-1, 1, E), u(0.5, 1.2, E), u(-1, 1, E)], axis=1),
        torso_vel=u(-2, 2, (E, 3)),
        foot_height=np.where(rng.random((E, 2)) < 0.3, u(0.045, 0.075, (E, 2)), u(0, 0.2, (E, 2))),
        foot_x=u(-1, 1, (E, 2)),
        foot_vel=u(-1, 1, (E, 2, 2)),
        foot_contact=contact,
        foot_force=u(0, 300, (E, 2)) * contact,
        first_contact=contact & (rng.random((E, 2)) < 0.3),
        touchdown_air_time=u(0, 0.6, (E, 2)) * (rng.random((E, 2)) < 0.3),
        swing_displacement=u(-0.3, 0.3, (E, 2)),
        air_time=u(0, 0.6, (E, 2)),
        collision_force=np.where(rng.random((E, n_coll)) < 0.2, u(0, 50, (E, n_coll)), 0.0),
        commands=commands,
        push_force=np.zeros(E),
        t=t,
        t_prev=t - 1 / 60,
        dt=1 / 60,
        nominal_height=0.9,
        fallen=np.zeros(E, dtype=bool),
    )


# Acceptance results, filled by test_acceptance and echoed at the end of the run.
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
