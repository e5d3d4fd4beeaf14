from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from splitpipe.cnn_ir import KINDS, AtomicUnit, CnnModel, TensorShape, infer_shapes, linear
from splitpipe.cost_model import (
    DeviceProfile,
    KindCoeffs,
    LinkProfile,
    MeasuredProfile,
    default_profiles,
)
from splitpipe.model_zoo import GeneratorConfig, generate_random

settings.register_profile("default", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

US = 1e-6

# Three-unit toy pipeline: DPU [10, 20, 30] us, GPU [5, 8, 12] us and cut
# transfers [4, 2, 1, 0.5] us. Cut bytes are 40 (raw input), 20, 10, 5 and the
# link moves 1e7 B/s with no fixed overhead.
TOY_DPU_US = (10.0, 20.0, 30.0)
TOY_GPU_US = (5.0, 8.0, 12.0)
TOY_TRANSFER_US = (4.0, 2.0, 1.0, 0.5)


def toy_model() -> CnnModel:
    units = [
        AtomicUnit([linear(40, 16)], name="fc0"),
        AtomicUnit([linear(16, 6)], name="fc1"),
        AtomicUnit([linear(6, 1)], name="fc2"),
    ]
    return infer_shapes(CnnModel(units, TensorShape.vector(40), name="toy"))


@pytest.fixture
def toy():
    model = toy_model()
    dpu = MeasuredProfile("toy", tuple(t * US for t in TOY_DPU_US), "toy-dpu")
    gpu = MeasuredProfile("toy", tuple(t * US for t in TOY_GPU_US), "toy-gpu")
    link = LinkProfile(bandwidth=1e7, fixed_overhead=0.0)
    return model, dpu, gpu, link


@pytest.fixture(scope="session")
def profiles():
    return default_profiles()


@pytest.fixture(scope="session")
def random_models():
    return [generate_random(GeneratorConfig(seed=s)) for s in range(50)]


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(b), 1e-300)


def random_matrix(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    return rng.standard_normal((rows, cols))


# Random instances: a generated CNN, two random per-kind profiles and a link.

def random_profile(rng, name):
    kinds = {k: KindCoeffs(*(rng.uniform(0, 1, 3) * [1e-12, 1e-11, 1e-5])) for k in KINDS}
    return DeviceProfile(name, kinds, float(rng.uniform(0, 3e-5)))


def random_instance(seed):
    rng = np.random.default_rng(seed)
    model = generate_random(GeneratorConfig(seed=seed))
    link = LinkProfile(float(rng.uniform(1e9, 2e10)), float(rng.uniform(0, 1e-5)))
    return model, random_profile(rng, "a"), random_profile(rng, "b"), link


# Acceptance lines collected during the run and printed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
