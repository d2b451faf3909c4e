import functools

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("pkg", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("pkg")

_CRITERIA: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    """Record one acceptance line; the summary is printed after the run."""

    def record(name: str, passed: bool, detail: str = "") -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
        print(line)
        _CRITERIA.append((name, passed, detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _CRITERIA:
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {name}" + (f": {detail}" if detail else ""))


@functools.lru_cache(maxsize=None)
def synthetic(task: str, seconds: float = 60.0, seed: int = 0):
    from surgctx.synth import generate, script_for

    return generate(script_for(task, seconds=seconds), seed=seed)


def make_workers(vid, classes=None, capacity=6, dtype=None, stride=16):
    """One GT-FF worker per class, seeded from frame 0 of a synthetic video."""
    import numpy as np

    from surgctx.memory import InitMode, InitPair, ToyEncoder, init_bank
    from surgctx.pipeline import Worker

    enc = ToyEncoder(vid.height, vid.width, stride=stride, dtype=dtype or np.float32)
    image, masks = vid.image(0), vid.masks(0)
    out = {}
    for cls in classes or vid.classes:
        bank = init_bank(InitPair(InitMode.GT_FF, image, masks[cls], 0), enc, capacity)
        out[cls] = Worker(cls, bank, enc)
    return out
