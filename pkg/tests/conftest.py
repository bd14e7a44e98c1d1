import numpy as np
import pytest

from memunlearn.backend import ModelSpec, TrainConfig, train
from memunlearn.data import DatasetHandle, load_dataset

# Filled by tests/test_acceptance.py, printed after the run.
ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: int(r[0].split()[1])):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


def blobs(n=120, num_classes=3, image_size=4, channels=1, cluster_std=0.5, label_noise=0.0, seed=0):
    return load_dataset("synthetic-gauss", normalization=None, n=n, num_classes=num_classes, image_size=image_size,
                        channels=channels, cluster_std=cluster_std, label_noise=label_noise, seed=seed)


def spec_for(data: DatasetHandle, architecture="mlp", **kw) -> ModelSpec:
    c, h, _ = data.image_shape
    defaults = dict(width=16, depth=1, heads=2, patch_size=2, window=2)
    if architecture == "tiny-hier":
        defaults["width"] = 8
    return ModelSpec(architecture, num_classes=data.num_classes, image_size=h, in_channels=c, **{**defaults, **kw})


@pytest.fixture(scope="session")
def small_data():
    return blobs()


@pytest.fixture(scope="session")
def mlp_spec(small_data):
    return spec_for(small_data)


@pytest.fixture(scope="session")
def trained_mlp(small_data, mlp_spec):
    cfg = TrainConfig(base_lr=1e-2, epochs=5, batch_size=16, weight_decay=0.0, seed=0)
    ckpt, traj = train(mlp_spec, small_data, range(90), cfg)
    return ckpt, traj


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def knn_world30(seed=0):
    """30 points for the 1-NN memorization oracle.

    Three tight clusters (labels 0, 1, 2) of nine points each, plus: an
    isolated point labelled 0 sitting far out but closest to cluster 1 (id 27),
    an exact duplicate of a cluster-0 point with the same label (id 28), and a
    point inside cluster 2 labelled 0 (id 29).
    """
    rng = np.random.default_rng(seed)
    centres = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    pts, labels = [], []
    for k, c in enumerate(centres):
        pts.extend(c + 0.5 * rng.normal(size=(9, 2)))
        labels.extend([k] * 9)
    pts.append(np.array([30.0, 0.0]))
    labels.append(0)
    pts.append(pts[0].copy())
    labels.append(0)
    pts.append(centres[2] + 0.1)
    labels.append(0)
    data = DatasetHandle.from_arrays("knn30", np.stack(pts), labels, 3)
    return data, ModelSpec("knn-deterministic", num_classes=3, image_size=1, in_channels=1)
