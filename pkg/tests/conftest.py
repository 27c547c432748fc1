import numpy as np
import pytest
from hypothesis import settings

from samba.graph import RegionMap, build_graph
from samba.model import Geometry, ModelConfig
from samba.synth import SynthConfig, generate

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_ds():
    """Two short subjects; enough for a handful of 64 s windows per split."""
    return generate(SynthConfig(duration_s=400.0, n_subjects=2, seed=3))


@pytest.fixture
def micro():
    """N=3, M=6, 8 Hz, TR 2 s, 8 s windows: 64 electro samples, 4 hemo steps."""
    rmap = RegionMap.from_labels(["a", "b", "a"], ["a", "b", "a", "b", "a", "a"])
    geom = Geometry(3, 6, 8.0, 2.0)
    cfg = ModelConfig(window_s=8.0, context_s=0.0, hrf_duration_s=8.0, gat_dim=4, lift_dim=4, lstm_hidden=4,
                      hrf_embed_dim=3, hrf_hidden=4, down_dim=4, attention_dim=4)
    rng = np.random.default_rng(0)
    E = rng.standard_normal((2, 3, 64))
    H = rng.standard_normal((2, 6, 4))
    graph = build_graph(rng.standard_normal((6, 40)), k=3)
    return dict(rmap=rmap, geom=geom, cfg=cfg, E=E, H=H, graph=graph)


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def criterion(request):
    """``criterion(n, name, ok, detail)`` prints and records one PASS/FAIL line and returns ``ok``."""
    def record(n, name, ok, detail=""):
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        print(line)
        request.config.acceptance_lines.append(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
