import numpy as np
import pytest

from semsplat.core import Camera, PcaModel, Scene, logit


def front_camera(size=16, f=None, depth_axis=True):
    """Camera at the origin looking down +z (identity pose)."""
    f = f if f is not None else float(size)
    return Camera(f, f, size / 2.0, size / 2.0, size, size, np.eye(4))


def random_scene(n=10, size=16, k=3, seed=0, dtype=np.float64, depth=(2.0, 4.0), spread=0.35,
                 scale=(0.05, 0.25), opacity=(0.2, 0.9)):
    """Random anisotropic Gaussians in front of :func:`front_camera`."""
    rng = np.random.default_rng(seed)
    z = rng.uniform(*depth, n)
    xy = rng.uniform(-spread, spread, (n, 2)) * z[:, None]
    positions = np.column_stack([xy, z])
    scene = Scene(
        positions=positions.astype(dtype),
        log_scales=np.log(rng.uniform(*scale, (n, 3))).astype(dtype),
        quats=rng.normal(size=(n, 4)).astype(dtype),
        opacity_logits=logit(rng.uniform(*opacity, n)).astype(dtype),
        colors=rng.uniform(0, 1, (n, 3)).astype(dtype),
        features=rng.normal(size=(n, k)).astype(dtype),
        pca=PcaModel.identity(k, dtype=dtype),
    )
    scene.quats /= np.linalg.norm(scene.quats, axis=1, keepdims=True)
    return scene


def single_gaussian_scene(position, color=(1.0, 0.0, 0.0), opacity=0.5, scale=0.05, feature=None,
                          dtype=np.float64):
    feature = np.zeros(2) if feature is None else np.asarray(feature, dtype=float)
    return Scene.from_points(np.array([position], dtype=float), np.array([color], dtype=float),
                             scales=scale, opacity=opacity, features=feature[None],
                             pca=PcaModel.identity(len(feature), dtype=dtype), dtype=dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance report ---------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def report_criterion(number: int, title: str, passed: bool, detail: str) -> bool:
    """Record one acceptance line; printed in the terminal summary."""
    line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
