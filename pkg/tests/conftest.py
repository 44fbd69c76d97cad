from pathlib import Path

import pytest

from randpot import cli

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def config_command(name: str) -> str:
    """Subcommand named on the '# usage:' line of a shipped config."""
    for line in (CONFIGS / f"{name}.ini").read_text().splitlines():
        if line.startswith("# usage:"):
            return line.split()[3]
    raise LookupError(name)


def read_summary(out: Path) -> dict:
    """Parse summary.csv into {key: str}; values may be comma-joined arrays."""
    res = {}
    lines = (out / "summary.csv").read_text().splitlines()[1:]
    for line in lines:
        k, _, v = line.partition(",")
        res[k] = v
    return res


def read_manifest(out: Path) -> dict:
    res = {}
    for line in (out / "manifest.txt").read_text().splitlines():
        if line.startswith("---"):
            break
        k, sep, v = line.partition("=")
        if sep and " " not in k:
            res[k] = v
    return res


def as_floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",")]


def as_bool(s: str) -> bool:
    assert s in ("true", "false"), s
    return s == "true"


class CliRun:
    def __init__(self, status, out, stdout):
        self.status = status
        self.out = out
        self.stdout = stdout

    @property
    def summary(self) -> dict:
        return read_summary(self.out)

    @property
    def manifest(self) -> dict:
        return read_manifest(self.out)

    @property
    def wall(self) -> float:
        return float(self.manifest["wall_time_s"])

    def data_files(self) -> dict:
        return {p.name: p.read_bytes() for p in sorted(self.out.iterdir()) if p.name != "manifest.txt"}


def run_cli(capsys, out: Path, argv: list[str]) -> CliRun:
    status = cli.main(argv + ["--out", str(out)])
    captured = capsys.readouterr()
    return CliRun(status, out, captured.out)


@pytest.fixture
def cli_run(capsys, tmp_path):
    def _run(*argv, out=None):
        return run_cli(capsys, Path(out) if out else tmp_path / "out", list(argv))
    return _run


@pytest.fixture(scope="session")
def config_run(tmp_path_factory):
    """Run a shipped config once per session (keyed by name and workers)."""
    cache = {}

    def _run(name: str, workers: int = 1, *extra):
        key = (name, workers, extra)
        if key not in cache:
            command = config_command(name)
            out = tmp_path_factory.mktemp(f"{name}_w{workers}")
            status = cli.main([command, "--config", str(CONFIGS / f"{name}.ini"), "--workers", str(workers),
                               "--out", str(out), *extra])
            cache[key] = CliRun(status, out, "")
        return cache[key]
    return _run


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
