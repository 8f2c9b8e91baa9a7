import pytest

from rawsplat.harness.scene import scene_synthesize

TINY_SCENE = {
    "width": 24,
    "height": 24,
    "seed": 3,
    "cameras": {"train": 6, "test": 2},
    "objects": {"count": 5},
    "backdrop": {"columns": 3, "rows": 2},
    "noise": {"mode": "poisson", "apply": True, "sensor": {}},
}


def tiny_spec(**changes):
    spec = {k: (dict(v) if isinstance(v, dict) else v) for k, v in TINY_SCENE.items()}
    for key, val in changes.items():
        spec[key] = dict(spec[key], **val) if isinstance(val, dict) and key in spec else val
    return spec


@pytest.fixture(scope="session")
def tiny_noisy(tmp_path_factory):
    return scene_synthesize(tiny_spec(), tmp_path_factory.mktemp("noisy"))


@pytest.fixture(scope="session")
def tiny_clean(tmp_path_factory):
    spec = tiny_spec(noise={"mode": "poisson", "apply": False, "sensor": {}})
    return scene_synthesize(spec, tmp_path_factory.mktemp("clean"))


@pytest.fixture(scope="session")
def tiny_no_fp(tmp_path_factory):
    """Noisy scene whose fixed-pattern maps are identically zero."""
    spec = tiny_spec(noise={"mode": "poisson", "apply": True,
                            "sensor": {"fp_k_std": 0.0, "fp_b_std": 0.0}})
    return scene_synthesize(spec, tmp_path_factory.mktemp("nofp"))


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict = {}


def report_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
