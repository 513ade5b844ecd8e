import pytest

from stepcrs.cli import main

# small enough that a full train + eval takes a second or two
TINY = {
    "model.dim": "16", "model.num_queries": "4", "model.prefix_conv": "4", "model.prefix_rec": "2",
    "curriculum.e1": "1", "curriculum.e2": "1", "curriculum.en": "2", "eval.gen_max_len": "4",
}


def tiny_flags() -> list[str]:
    return [x for k, v in TINY.items() for x in (f"--{k}", v)]


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    rc = main(["gen-data", "--entities", "60", "--items", "20", "--dialogues", "40", "--seed", "1",
               "--out", str(out), "--force"])
    assert rc == 0
    return out


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[n])
