import numpy as np
import pytest

from conftest import CONFIGS, as_bool, as_floats
from randpot import cli
from randpot.oracle1d import pendulum_drift

FREE = str(CONFIGS / "examples" / "free_motion.ini")


def write(tmp_path, text, name="c.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_free_motion_trajectory(cli_run, tmp_path):
    r = cli_run("simulate", "--config", FREE)
    assert r.status == 0
    data = np.loadtxt(r.out / "trajectory.csv", delimiter=",", skiprows=1)
    t, q, p = data[:, 0], data[:, 1:3], data[:, 3:5]
    np.testing.assert_allclose(q, np.array([0.5, -1.0]) + np.outer(t, [0.3, 0.7]), atol=1e-12)
    np.testing.assert_array_equal(p, np.broadcast_to([0.3, 0.7], p.shape))
    s = r.summary
    assert float(s["reference_max_error"]) < 1e-12
    np.testing.assert_allclose(as_floats(s["velocity"]), [0.3, 0.7], rtol=1e-12)


def test_oracle1d_single_line(cli_run):
    r = cli_run("oracle1d", "--E", "2", "--potential", "cosine")
    assert r.status == 0
    lines = r.stdout.strip().splitlines()
    assert len(lines) == 1
    fields = dict(kv.split("=") for kv in lines[0].split())
    assert float(fields["v_quadrature"]) == pytest.approx(pendulum_drift(2.0), rel=1e-9)
    assert float(r.summary["rel_err"]) <= 1e-9


def test_rerun_identical_payload(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert cli.main(["simulate", "--config", FREE, "--out", str(out)]) == 0
    for name in ("trajectory.csv", "summary.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    hashes = lambda d: [l for l in (d / "manifest.txt").read_text().splitlines() if l.startswith("artifact ")]
    assert hashes(a) == hashes(b)


def test_manifest_contents(cli_run):
    r = cli_run("simulate", "--config", FREE, "--workers", "3")
    m = r.manifest
    assert m["status"] == "0" and m["workers"] == "3" and m["seed"] == "1"
    text = (r.out / "manifest.txt").read_text()
    assert "--- config ---" in text and "reference = free" in text
    assert "workers" not in (r.out / "summary.csv").read_text()


def test_set_override(cli_run):
    r = cli_run("simulate", "--config", FREE, "--set", "dynamics.T=2", "--set", "initial.p=1,0")
    assert r.status == 0
    s = r.summary
    assert float(s["t_final"]) == 2.0
    np.testing.assert_allclose(as_floats(s["velocity"]), [1.0, 0.0])


def test_set_site_key(cli_run):
    r = cli_run("simulate", "--config", str(CONFIGS / "c04_linear_flow.ini"), "--set", "site.saddle.k=-1.0",
                "--set", "dynamics.T=0.1")
    assert r.status == 0


def test_unknown_key_reports_position(tmp_path, capsys):
    path = write(tmp_path, "[run]\nseed = 1\n[field]\nkind = zero\nd = 2\nbogus = 3\n[dynamics]\nT = 1\n")
    status = cli.main(["simulate", "--config", path, "--out", str(tmp_path / "o")])
    err = capsys.readouterr().err
    assert status == 2
    assert f"{path}:6:1" in err and "bogus" in err


def test_unknown_section_reports_line(tmp_path, capsys):
    path = write(tmp_path, "[run]\nseed = 1\n\n[nonsense]\nx = 1\n")
    status = cli.main(["simulate", "--config", path, "--out", str(tmp_path / "o")])
    err = capsys.readouterr().err
    assert status == 2
    assert f"{path}:4:" in err and "nonsense" in err


def test_bad_value_reports_position(tmp_path, capsys):
    path = write(tmp_path, "[run]\nseed = 1\n[field]\nkind = zero\nd = two\n[dynamics]\nT = 1\n")
    status = cli.main(["simulate", "--config", path, "--out", str(tmp_path / "o")])
    err = capsys.readouterr().err
    assert status == 2
    assert f"{path}:5:5" in err


def test_missing_seed(tmp_path, capsys):
    path = write(tmp_path, "[field]\nkind = zero\nd = 1\n[dynamics]\nT = 1\n")
    assert cli.main(["simulate", "--config", path, "--out", str(tmp_path / "o")]) == 2
    assert "seed" in capsys.readouterr().err
    # --seed supplies it
    assert cli.main(["simulate", "--config", path, "--seed", "5", "--out", str(tmp_path / "o")]) == 0


def test_bad_override_syntax(tmp_path, capsys):
    assert cli.main(["simulate", "--config", FREE, "--set", "dynamics", "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["simulate", "--config", FREE, "--set", "nosuch.key=1", "--out", str(tmp_path / "o")]) == 2


def test_no_work_before_validation(tmp_path, capsys):
    path = write(tmp_path, "[run]\nseed = 1\n[field]\nkind = zero\nd = 2\n[dynamics]\nT = 1e9\nh = 1e-9\n"
                           "[checks]\nbogus = 1\n")
    out = tmp_path / "o"
    assert cli.main(["simulate", "--config", path, "--out", str(out)]) == 2
    assert not (out / "trajectory.csv").exists()


def test_numerical_failure_exit_3(tmp_path, capsys):
    path = write(tmp_path, "[run]\nseed = 1\n[field]\nkind = finite\nd = 2\npoints = 0, 0\npalette = w\n"
                           "[site.w]\nkind = gaussian\nheight = -1\nsigma = 0.5\n"
                           "[curvature]\nE = 1\nthreshold = true\nE_max = 1e-3\nlo = -1, -1\nhi = 1, 1\nn = 8\n")
    out = tmp_path / "o"
    assert cli.main(["curvature-map", "--config", path, "--out", str(out)]) == 3
    assert "status=3" in (out / "manifest.txt").read_text()


def test_verification_failure_exit_4(tmp_path, capsys):
    # increasing eps makes the sup error grow, so the monotone check fails
    path = write(tmp_path, "[run]\nseed = 1\n[site.W]\nkind = bump\nheight = 1\nradius = 1\n"
                           "[construct]\nkind = density\nsite = W\neps_list = 0.1, 0.2\nn_probe = 21\n")
    out = tmp_path / "o"
    assert cli.main(["construct", "--config", path, "--out", str(out)]) == 4
    report = (out / "report.txt").read_text()
    assert "passed=false" in report


def test_recurrence_example(cli_run):
    r = cli_run("recurrence", "--config", str(CONFIGS / "examples" / "torus_recurrence.ini"))
    assert r.status == 0
    assert int(r.summary["count"]) > 0


def test_workers_must_be_positive(tmp_path, capsys):
    assert cli.main(["simulate", "--config", FREE, "--workers", "0", "--out", str(tmp_path / "o")]) == 2


def test_shipped_configs_validate():
    from conftest import config_command

    names = sorted(p.stem for p in CONFIGS.glob("*.ini"))
    assert len(names) >= 19
    for n in names:
        cli.load_config(config_command(n), str(CONFIGS / f"{n}.ini"), [], None, None, 1)


def test_velocity_dist_parallel_identical(tmp_path, capsys):
    path = write(tmp_path, "[run]\nseed = 9\n[field]\nkind = lattice\nd = 2\nwindow_lo = -10, -10\n"
                           "window_hi = 10, 10\npalette = a, b\nweights = 0.5, 0.5\n"
                           "[site.a]\nkind = bump\nheight = 0.6\nradius = 0.8\n"
                           "[site.b]\nkind = bump\nheight = -0.4\nradius = 0.6\n"
                           "[dynamics]\nh = 1e-2\n"
                           "[stats]\nn_configs = 2\nper_config = 50\nT = 5\nn = 3\nE_max = 1\nchunk = 10\n")
    outs = []
    for w in ("1", "8"):
        out = tmp_path / f"w{w}"
        assert cli.main(["velocity-dist", "--config", path, "--workers", w, "--out", str(out)]) == 0
        outs.append(out)
    names = sorted(p.name for p in outs[0].iterdir() if p.name != "manifest.txt")
    assert names
    for n in names:
        assert (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes()
    assert as_bool((outs[0] / "summary.csv").read_text().split("symmetric,")[1].split()[0]) in (True, False)
