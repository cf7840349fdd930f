import json

import pytest

# criterion number -> (passed, detail); filled by test_acceptance.py
CRITERIA: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def sphere_fit(tmp_path_factory):
    """The shipped sphere-shell voxel fit, run once through the command line."""
    from raysplat.cli import main

    out = tmp_path_factory.mktemp("sphere_fit")
    code = main(["--seed", "0", "fit", "--out", str(out)])
    assert code == 0
    return json.loads((out / "report.json").read_text()), out
