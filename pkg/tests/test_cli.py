from __future__ import annotations

import warnings
from types import SimpleNamespace

import numpy as np
import pytest

from critsp import cli
from critsp.cli import RunConfig, dump_field, load_field, main, parse_config
from critsp.errors import ConfigError, UsageError
from critsp.field import Grid3

from conftest import canonical_instance


def _cfg_file(tmp_path, text):
    p = tmp_path / "run.ini"
    p.write_text(text)
    return str(p)


def test_canonical_config_file_parses():
    from pathlib import Path

    cfg = cli.load_config(Path(__file__).parents[1] / "configs" / "canonical.ini")
    assert (cfg.L, cfg.N, cfg.q, cfg.lambda_fraction) == (12.0, 48, 1.5, 0.5)


@pytest.mark.parametrize(
    "text, line",
    [
        ("[grid]\nL = 12\nN = abc\n", 3),
        ("[grid]\nL = 12\n[bogus]\n", 3),
        ("[problem]\nq = 2.0\n", 2),
        ("[problem]\nlambda = 0.1\nlambda_fraction = 0.5\n", 3),
        ("[problem]\ninstance = custom\nK = const\n", 2),
        ("L = 12\n", 1),
        ("[grid]\nL = 12\nL = 13\n", 3),
    ],
)
def test_config_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert exc.value.line == line
    assert f"line {line}" in str(exc.value)


def test_slow_fft_size_warns():
    with pytest.warns(UserWarning):
        parse_config("[grid]\nN = 46\n")


def test_custom_instance_builds():
    cfg = parse_config("[problem]\ninstance = custom\nK = bump amplitude=2 width=1.5\nf = compact scale=2\n"
                       "[grid]\nN = 16\n")
    inst = cli.build_instance(cfg)
    assert inst.potential.k_sup == 2.0 and inst.name == "custom"


def test_bad_config_exit_code(tmp_path, capsys):
    path = _cfg_file(tmp_path, "[problem]\nq = 2.0\n")
    assert main(["constants", "--config", path, "--out", str(tmp_path)]) == 1
    assert "line 2" in capsys.readouterr().err
    path = _cfg_file(tmp_path, "[problem]\ninstance = custom\nK = const\n")
    assert main(["constants", "--config", path, "--out", str(tmp_path)]) == 1


def test_argparse_error_exits_one():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1


def test_constants_csv_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["constants", "--out", str(a)]) == 0
    assert main(["constants", "--out", str(b)]) == 0
    ta, tb = (a / "constants.csv").read_bytes(), (b / "constants.csv").read_bytes()
    assert ta == tb
    header, row = ta.decode().strip().splitlines()
    assert header.split(",") == ["S", "rho", "lambda0", "C0", "level_bound"]
    assert len(row.split(",")) == 5
    assert float(row.split(",")[2]) == pytest.approx(1.35457452266784, rel=1e-12)


def test_verify_underresolved_bubble_grid_exits_three(tmp_path):
    path = _cfg_file(tmp_path, "[grid]\nN = 16\n[solver]\ngeometry_trials = 4\n")
    assert main(["verify", "--config", path, "--out", str(tmp_path)]) == 3
    text = (tmp_path / "verify.csv").read_text()
    assert "precondition" in text and "phi_scaling,pass" in text


def test_sweep_argument_errors(tmp_path):
    assert main(["sweep", "--out", str(tmp_path)]) == 1
    assert main(["sweep", "--lambdas", "", "--out", str(tmp_path)]) == 1
    assert main(["sweep", "--lambdas", "0.2,x", "--out", str(tmp_path)]) == 1
    assert main(["sweep", "--lambdas", "-0.2", "--out", str(tmp_path)]) == 1


def test_sweep_dedupes_and_sorts(tmp_path, monkeypatch):
    calls = []

    def fake(cfg, out, lam=None):
        calls.append(lam)
        rep = SimpleNamespace(energy=-lam, grad_norm=0.0)
        return SimpleNamespace(converged=True, saddle=rep, ball=rep)

    monkeypatch.setattr(cli, "cmd_solve", fake)
    cfg = RunConfig(N=16)
    with pytest.warns(UserWarning, match="duplicate"):
        rows, text = cli.cmd_sweep(cfg, [0.5, 0.2, 0.5], tmp_path)
    assert len(calls) == 2
    assert [r["lambda_fraction"] for r in rows] == [0.2, 0.5]
    assert (tmp_path / "sweep.csv").read_text() == text
    with pytest.raises(UsageError):
        cli.cmd_sweep(cfg, [], tmp_path)


def test_solve_precondition_and_force(tmp_path):
    path = _cfg_file(tmp_path, "[grid]\nN = 16\n[problem]\nlambda_fraction = 2.0\n")
    assert main(["solve", "--config", path, "--out", str(tmp_path / "a")]) == 3
    cfg = RunConfig(N=16, lambda_fraction=2.0, force=True, string_iters=5, newton_iters=3, ball_iters=200)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            res = cli.cmd_solve(cfg, tmp_path / "b")
        except cli.CritSPError:
            pytest.skip("forced saddle search failed on the coarse grid")
    assert res.ball.guaranteed is False
    assert ",0\n" in res.summary or res.summary.rstrip().endswith(",0")


def test_field_dump_roundtrip(tmp_path, rng):
    g = Grid3(3.0, 8)
    from critsp.field import Field

    u = Field(g, rng.standard_normal(g.shape))
    dump_field(u, tmp_path / "u", "u")
    assert (tmp_path / "u.f64").stat().st_size == 8 * 8**3
    back = load_field(tmp_path / "u.hdr")
    assert back.grid == g and np.array_equal(back.values, u.values)


def test_solve_outputs(canonical_solve):
    res, out = canonical_solve
    names = {p.name for p in out.iterdir()}
    assert {"summary.csv", "saddle_log.csv", "ball_min_log.csv", "saddle.f64", "ball_min.hdr"} <= names
    lines = (out / "summary.csv").read_text().splitlines()
    assert lines[0] == "kind,J,grad_norm,norm,iterations,checks,guaranteed"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["saddle", "ball_min", "least_energy"]
    back = load_field(out / "ball_min.f64")
    assert np.array_equal(back.values, res.ball.u.values)
