import csv

import numpy as np
import pytest

from rcsieve.cli import (EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, CliError, load_csv, main,
                         parse_config, read_config_file)

FAST = ["--n_trees", "100", "--b0_grid=-2:2:0.5", "--b1_grid=-3:3:0.5"]


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--kind", "dgp1", "--n", "1000", "--seed", "7",
                 "--output", str(out)]) == 0
    return out


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_simulate_shape(sim_dir):
    rows = read_rows(sim_dir / "data.csv")
    assert rows[0] == ["Y", "W"] + [f"X{j}" for j in range(1, 11)]
    assert len(rows) == 1001
    assert all(len(r) == 12 for r in rows)
    meta = (sim_dir / "metadata.txt").read_text()
    assert "seed = 7" in meta and "kind = dgp1" in meta


def test_csv_round_trip_is_lossless(sim_dir):
    from rcsieve.simlab import DgpSpec, generate
    data = load_csv(str(sim_dir / "data.csv"))
    ref = generate(DgpSpec("dgp1", 1000, 10, 7))
    np.testing.assert_array_equal(data.Y, ref.Y)
    np.testing.assert_array_equal(data.W, ref.W)
    np.testing.assert_array_equal(data.X, ref.X)


def test_fit_defaults_are_byte_identical(sim_dir, tmp_path):
    for name in ("a", "b"):
        assert main(["fit", "--input", str(sim_dir / "data.csv"),
                     "--output", str(tmp_path / name)]) == 0
    a = (tmp_path / "a" / "density.csv").read_bytes()
    assert a == (tmp_path / "b" / "density.csv").read_bytes()
    rows = read_rows(tmp_path / "a" / "density.csv")
    assert rows[0] == ["b0", "b1", "density"]
    assert len(rows) == 1 + 81 * 201
    meta = (tmp_path / "a" / "metadata.txt").read_text()
    for key in ("Q_min_eig", "imag_ratio", "test_point_resolved", "seed = 0"):
        assert key in meta


def test_median_test_point_is_recorded(sim_dir, tmp_path):
    assert main(["fit", "--input", str(sim_dir / "data.csv"), "--output", str(tmp_path)]
                + FAST) == 0
    data = load_csv(str(sim_dir / "data.csv"))
    line = [l for l in (tmp_path / "metadata.txt").read_text().splitlines()
            if l.startswith("test_point_resolved")][0]
    got = np.array([float(v) for v in line.split("=", 1)[1].split(",")])
    np.testing.assert_array_equal(got, np.median(data.X, axis=0))


def test_cv_table(sim_dir, tmp_path):
    assert main(["cv", "--input", str(sim_dir / "data.csv"), "--output", str(tmp_path),
                 "--K2_values", "3,5,7", "--n_trees", "300"]) == 0
    rows = read_rows(tmp_path / "cv_table.csv")
    assert rows[0] == ["row", "K2", "sigma_t", "criterion"]
    assert [r[0] for r in rows[1:]] == ["grid"] * 3 + ["selected"]
    assert [r[1] for r in rows[1:4]] == ["3", "5", "7"]
    crit = [float(r[3]) for r in rows[1:4]]
    assert rows[4][1] == rows[1 + int(np.argmin(crit))][1]


def test_band_importance_marginal(sim_dir, tmp_path):
    src = str(sim_dir / "data.csv")
    assert main(["band", "--input", src, "--output", str(tmp_path / "band"), "--alpha", "0.1",
                 "--M", "2"] + FAST) == 0
    band = np.loadtxt(tmp_path / "band" / "band.csv", delimiter=",", skiprows=1)
    assert band.shape == (13, 4)
    assert (band[:, 2] <= band[:, 3]).all()
    assert main(["importance", "--input", src, "--output", str(tmp_path / "vi")] + FAST) == 0
    vi = read_rows(tmp_path / "vi" / "importance.csv")
    assert vi[0] == ["feature", "VI_shape", "VI_mean"] and len(vi) == 11
    assert sum(float(r[1]) for r in vi[1:]) == pytest.approx(1.0, abs=1e-9)
    assert main(["marginal", "--input", src, "--output", str(tmp_path / "marg"), "--M", "2",
                 "--n_trees", "50", "--b1_grid=-3:3:1"]) == 0
    assert len(read_rows(tmp_path / "marg" / "marginal.csv")) == 8


def test_simulate_monte_carlo_report(tmp_path):
    assert main(["simulate", "--n", "200", "--p", "4", "--reps", "2", "--n_trees", "50",
                 "--output", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "mc_report.csv")
    assert rows[0] == ["b1", "truth", "median", "q05", "q95"]
    assert len(rows) == 322


def test_config_file_and_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nK2 = 5\n\nalpha = 0.2  # trailing\n", encoding="utf-8")
    out = parse_config(["fit", "--config", str(cfg), "--input", "x.csv", "--output", "o"])
    assert out.K2 == 5 and out.alpha == 0.2
    out = parse_config(["fit", "--config", str(cfg), "--input", "x.csv", "--output", "o",
                        "--K2", "7"])
    assert out.K2 == 7
    out = parse_config(["fit", "--config", str(cfg), "--input", "x.csv", "--output", "o",
                        "K2=9"])
    assert out.K2 == 9
    empty = tmp_path / "empty.cfg"
    empty.write_text("")
    full = parse_config(["fit", "--input", "x.csv", "--output", "o"], file=str(empty))
    assert full.command == "fit" and full.K1 == 3


@pytest.mark.parametrize("argv,needle", [
    (["fit", "--output", "o"], "input"),
    (["fit", "--input", "x", "--output", "o", "--alpha", "0.7"], "alpha"),
    (["fit", "--input", "x", "--output", "o", "--K2", "five"], "K2"),
    (["fit", "--input", "x", "--output", "o", "--K1", "0"], "K1"),
    (["fit", "--input", "x", "--output", "o", "bogus=1"], "bogus"),
    (["simulate", "--output", "o"], "n"),
])
def test_config_errors_exit_2(argv, needle, capsys):
    assert main(argv) == EXIT_CONFIG
    assert needle in capsys.readouterr().err


def test_unknown_key_in_file(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour = red\n")
    with pytest.raises(CliError) as err:
        read_config_file(str(cfg))
    assert err.value.code == EXIT_CONFIG


def write(path, text):
    path.write_text(text)
    return str(path)


def test_load_csv_small_and_shuffled(tmp_path):
    a = load_csv(write(tmp_path / "a.csv", "Y,W,X1\n1,2,3\n4,5,6\n7,8,9\n"))
    assert (a.n, a.d) == (3, 1)
    b = load_csv(write(tmp_path / "b.csv", "X1,W,Y\n3,2,1\n6,5,4\n9,8,7\n"))
    np.testing.assert_array_equal(a.Y, b.Y)
    np.testing.assert_array_equal(a.X, b.X)
    c = load_csv(write(tmp_path / "c.csv", "Y,W,X2,X1\n1,2,30,3\n"))
    np.testing.assert_array_equal(c.X, [[3, 30]])


@pytest.mark.parametrize("text,needle", [
    ("Y,X1\n1,2\n", "column W"),
    ("Y,W,X2\n1,2,3\n", "column X1"),
    ("Y,W,X1\n1,2,NA\n", "row 2, column X1"),
    ("Y,W,X1\n1,2,3\n1,abc,3\n", "row 3, column W"),
    ("Y,W,X1\n1,2\n", "row 2"),
])
def test_load_csv_errors(tmp_path, text, needle):
    with pytest.raises(CliError, match=needle) as err:
        load_csv(write(tmp_path / "bad.csv", text))
    assert err.value.code == EXIT_DATA


def test_data_error_exit_code(tmp_path):
    src = write(tmp_path / "na.csv", "Y,W,X1\n1,2,NA\n")
    assert main(["fit", "--input", src, "--output", str(tmp_path / "o")]) == EXIT_DATA
    assert not (tmp_path / "o").exists()


def test_numeric_failure_leaves_no_files(tmp_path):
    rng = np.random.default_rng(0)
    rows = "\n".join(f"{rng.normal()},1.0,{rng.normal()}" for _ in range(100))
    src = write(tmp_path / "flat.csv", "Y,W,X1\n" + rows + "\n")
    out = tmp_path / "o"
    assert main(["fit", "--input", src, "--output", str(out)] + FAST) == EXIT_NUMERIC
    assert not out.exists()


def test_wrong_test_point_length(sim_dir, tmp_path):
    assert main(["fit", "--input", str(sim_dir / "data.csv"), "--output", str(tmp_path),
                 "--test_point", "0,0.3"] + FAST) == EXIT_CONFIG
