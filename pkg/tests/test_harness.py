"""Config round-trips, synthetic data statistics, runner and CLI behavior."""

import numpy as np
import pytest
import yaml
from scipy.stats import chi2_contingency

from drfed.harness.cli import main
from drfed.harness.config import (
    ConfigError,
    dump_config,
    load_config,
    parse_config,
    save_config,
)
from drfed.harness.run import build_problem, resolve_eta, run_experiment
from drfed.harness.synthetic import gen_synthetic, load_dataset
from drfed.harness.trace import Trace


def minimal_raw(**experiment):
    exp = {"algorithm": "feddr", "rounds": 10, "seeds": [0]}
    exp.update(experiment)
    return {
        "experiment": exp,
        "problem": {"kind": "quadratic", "n": 3, "dim": 2, "spread": 1.5},
        "hyper": {"eta_over_L": 0.3},
    }


class TestConfig:
    def test_round_trip_feddr(self):
        raw = minimal_raw(seeds=[0, 4])
        raw["sampling"] = {"kind": "scripted", "script": [[0, 2], [1]]}
        raw["accuracy"] = {"kind": "absolute", "M": 0.5}
        cfg = parse_config(raw, "t.yaml")
        again = parse_config(yaml.safe_load(dump_config(cfg)), "t.yaml")
        assert cfg == again
        assert cfg.sampling.script == ((0, 2), (1,))

    def test_round_trip_async(self):
        raw = {
            "experiment": {"algorithm": "asyncfeddr", "rounds": 40,
                           "seeds": [1]},
            "problem": {"kind": "quadratic", "n": 8, "dim": 3},
            "hyper": {"eta": 0.1, "alpha": 0.5},
            "delay": {"kind": "scripted", "tau": 2, "cycle": True,
                      "script": [[[0.5, 1.0]], [[0.0, 2.0], [1.0, 1.0]]]},
        }
        cfg = parse_config(raw, "a.yaml")
        assert cfg == parse_config(yaml.safe_load(dump_config(cfg)), "a.yaml")
        assert cfg.delay.script[1][0] == (0.0, 2.0)

    def test_round_trip_baseline(self):
        raw = {
            "experiment": {"algorithm": "fedprox", "rounds": 5, "seeds": [0]},
            "problem": {"kind": "synthetic", "n": 4, "dim": 5, "classes": 3},
            "hyper": {"eta": 0.05},
            "baseline": {"mu": 0.3, "epochs": 2},
            "sampling": {"kind": "uniform", "size": 2},
        }
        cfg = parse_config(raw, "b.yaml")
        assert cfg == parse_config(yaml.safe_load(dump_config(cfg)), "b.yaml")
        assert cfg.baseline.mu == 0.3
        assert cfg.baseline.sampling.size == 2

    def test_unknown_section_and_key(self):
        raw = minimal_raw()
        raw["extra"] = {}
        with pytest.raises(ConfigError, match="unknown section 'extra'"):
            parse_config(raw, "t.yaml")
        raw = minimal_raw()
        raw["problem"]["spred"] = 1.0
        with pytest.raises(ConfigError, match="unknown key 'spred'.*problem"):
            parse_config(raw, "t.yaml")

    def test_eta_exclusivity(self):
        raw = minimal_raw()
        raw["hyper"] = {"eta": 0.1, "eta_over_L": 0.3}
        with pytest.raises(ConfigError, match="exactly one"):
            parse_config(raw, "t.yaml")
        raw["hyper"] = {}
        with pytest.raises(ConfigError, match="exactly one"):
            parse_config(raw, "t.yaml")

    def test_section_applicability(self):
        raw = minimal_raw()
        raw["delay"] = {"tau": 1}
        with pytest.raises(ConfigError, match="'delay' does not apply"):
            parse_config(raw, "t.yaml")
        raw = minimal_raw(algorithm="fedavg")
        raw["accuracy"] = {"kind": "exact"}
        with pytest.raises(ConfigError, match="'accuracy' does not apply"):
            parse_config(raw, "t.yaml")

    def test_fedsplit_alias_rules(self):
        raw = minimal_raw(algorithm="fedsplit")
        cfg = parse_config(raw, "t.yaml")
        assert cfg.alpha == 2.0
        raw["hyper"]["alpha"] = 1.0
        with pytest.raises(ConfigError, match="alpha = 2"):
            parse_config(raw, "t.yaml")
        raw["hyper"].pop("alpha")
        raw["problem"]["reg"] = "l1"
        with pytest.raises(ConfigError, match="reg"):
            parse_config(raw, "t.yaml")

    def test_seed_and_round_validation(self):
        with pytest.raises(ConfigError, match="seeds"):
            parse_config(minimal_raw(seeds=[]), "t.yaml")
        with pytest.raises(ConfigError, match="seeds"):
            parse_config(minimal_raw(seeds=[0, -1]), "t.yaml")
        with pytest.raises(ConfigError, match="rounds"):
            parse_config(minimal_raw(rounds=0), "t.yaml")

    def test_save_load_file(self, tmp_path):
        cfg = parse_config(minimal_raw(), "t.yaml")
        path = tmp_path / "cfg.yaml"
        save_config(cfg, path)
        assert load_config(path) == cfg


class TestSynthetic:
    def test_deterministic_and_seed_sensitive(self):
        a = gen_synthetic(4, 6, 3, samples=(20, 30), seed=5)
        b = gen_synthetic(4, 6, 3, samples=(20, 30), seed=5)
        c = gen_synthetic(4, 6, 3, samples=(20, 30), seed=6)
        for ua, ub in zip(a.users, b.users):
            assert np.array_equal(ua.train_X, ub.train_X)
            assert np.array_equal(ua.test_y, ub.test_y)
        assert not np.array_equal(a.users[0].train_X, c.users[0].train_X)

    def test_split_sizes_and_labels(self):
        ds = gen_synthetic(6, 5, 4, samples=(10, 50), seed=1)
        for u in ds.users:
            m = len(u.train_y) + len(u.test_y)
            assert 10 <= m <= 50
            assert len(u.train_y) == max(1, int(round(0.8 * m)))
            assert len(u.test_y) >= 1
            assert 0 <= u.train_y.min() and u.train_y.max() < 4

    def test_problem_gets_bias_column(self):
        ds = gen_synthetic(3, 7, 3, samples=(15, 15), seed=0)
        prob = ds.problem()
        assert prob.dim == (7 + 1) * 3
        assert prob.n == 3

    def test_iid_label_homogeneity(self):
        # users share one model and one feature distribution, so their
        # label histograms must agree up to sampling noise
        for seed in (0, 1, 2):
            ds = gen_synthetic(4, 10, 4, r=0.0, s=0.0, seed=seed, iid=True,
                               samples=(2500, 2500))
            table = np.stack([
                np.bincount(np.concatenate([u.train_y, u.test_y]),
                            minlength=4) for u in ds.users])
            table = table[:, table.sum(axis=0) > 0]
            if table.shape[1] < 2:
                continue  # degenerate draw: identical by construction
            _, p, _, _ = chi2_contingency(table)
            assert p > 0.01

    def test_heterogeneous_labels_differ(self):
        ds = gen_synthetic(4, 10, 4, r=1.0, s=1.0, seed=0, iid=False,
                           samples=(2500, 2500))
        table = np.stack([
            np.bincount(np.concatenate([u.train_y, u.test_y]), minlength=4)
            for u in ds.users]) + 1  # smoothing keeps chi2 defined
        _, p, _, _ = chi2_contingency(table)
        assert p < 1e-6

    def test_feature_spread_monotone_in_s(self):
        def spread(s, seed):
            d = gen_synthetic(6, 10, 3, r=0.0, s=s, samples=(30, 30),
                              seed=seed)
            mus = np.stack([np.concatenate([u.train_X, u.test_X]).mean(axis=0)
                            for u in d.users])
            return np.mean([np.linalg.norm(mus[a] - mus[b])
                            for a in range(6) for b in range(a + 1, 6)])

        means = [np.mean([spread(s, sd) for sd in range(20)])
                 for s in (0.0, 0.5, 1.0)]
        assert means[0] < means[1] < means[2]

    def test_save_load_round_trip(self, tmp_path):
        ds = gen_synthetic(3, 4, 3, samples=(12, 20), seed=9)
        path = tmp_path / "data.npz"
        ds.save(path)
        back = load_dataset(path)
        assert back.classes == 3 and back.seed == 9
        for a, b in zip(ds.users, back.users):
            assert np.array_equal(a.train_X, b.train_X)
            assert np.array_equal(a.test_X, b.test_X)
            assert np.array_equal(a.train_y, b.train_y)

    def test_rejections(self):
        with pytest.raises(ValueError, match="classes"):
            gen_synthetic(2, 3, 1)
        with pytest.raises(ValueError, match="variance"):
            gen_synthetic(2, 3, 2, r=-1.0)
        with pytest.raises(ValueError, match="samples"):
            gen_synthetic(2, 3, 2, samples=(10, 5))


class TestRunExperiment:
    def test_smoke_two_files_and_pass(self, tmp_path):
        cfg = parse_config(minimal_raw(), "t.yaml")
        res = run_experiment(cfg, out_dir=tmp_path / "o")
        assert len(res.per_seed) == 1
        r = res.per_seed[0]
        assert r.trace_path.exists() and r.report_path.exists()
        assert res.violations == 0
        assert "result: PASS" in r.report_path.read_text()
        trace = Trace.read(r.trace_path)
        assert len(trace) == cfg.rounds + 1
        assert trace.header["eta"] == pytest.approx(0.3)  # L = 1 quadratics

    def test_rerun_byte_identical(self, tmp_path):
        cfg = parse_config(minimal_raw(), "t.yaml")
        a = run_experiment(cfg, out_dir=tmp_path / "a")
        b = run_experiment(cfg, out_dir=tmp_path / "b")
        assert a.per_seed[0].trace_path.read_bytes() == \
            b.per_seed[0].trace_path.read_bytes()

    def test_no_certify_skips_reports(self, tmp_path):
        cfg = parse_config(minimal_raw(), "t.yaml")
        res = run_experiment(cfg, out_dir=tmp_path / "o", certify=False)
        assert res.per_seed[0].report_path is None
        assert not list((tmp_path / "o").glob("*.report.txt"))

    def test_build_problem_kinds(self, tmp_path):
        raw = minimal_raw()
        prob, data = build_problem(parse_config(raw, "t.yaml").problem)
        assert prob.n == 3 and data is None and prob.dim == 2
        raw["problem"] = {"kind": "synthetic", "n": 4, "dim": 5,
                          "classes": 3, "samples": [10, 10]}
        prob2, data2 = build_problem(parse_config(raw, "t.yaml").problem)
        assert prob2.dim == 18 and data2.n == 4
        data2.save(tmp_path / "d.npz")
        raw["problem"] = {"kind": "file", "path": str(tmp_path / "d.npz")}
        prob3, _ = build_problem(parse_config(raw, "t.yaml").problem)
        assert prob3.dim == prob2.dim

    def test_resolve_eta(self):
        cfg = parse_config(minimal_raw(), "t.yaml")
        assert resolve_eta(cfg, 2.0) == pytest.approx(0.15)
        raw = minimal_raw()
        raw["hyper"] = {"eta": 0.07}
        assert resolve_eta(parse_config(raw, "t.yaml"), 2.0) == 0.07

    def test_async_certified_run(self, tmp_path):
        raw = {
            "experiment": {"algorithm": "asyncfeddr", "rounds": 60,
                           "seeds": [0]},
            "problem": {"kind": "quadratic", "n": 8, "dim": 3},
            "hyper": {"eta": 0.12, "alpha": 0.6},
            "delay": {"kind": "uniform", "tau": 3},
        }
        res = run_experiment(parse_config(raw, "a.yaml"),
                             out_dir=tmp_path / "o")
        assert res.violations == 0
        text = res.per_seed[0].report_path.read_text()
        assert "async constants" in text and "result: PASS" in text


class TestCLI:
    def _write(self, tmp_path, raw, name="cfg.yaml"):
        path = tmp_path / name
        path.write_text(yaml.safe_dump(raw))
        return str(path)

    def test_run_ok(self, tmp_path, capsys):
        path = self._write(tmp_path, minimal_raw())
        code = main(["run", path, "--out", str(tmp_path / "o")])
        out = capsys.readouterr().out
        assert code == 0
        assert "seed 0" in out

    def test_inadmissible_alpha_exits_nonzero(self, tmp_path, capsys):
        raw = minimal_raw()
        raw["hyper"] = {"eta_over_L": 0.333, "alpha": 1.9}
        path = self._write(tmp_path, raw)
        code = main(["run", path, "--out", str(tmp_path / "o")])
        err = capsys.readouterr().err
        assert code == 2
        assert "D(alpha=1.9" in err and "<= 0" in err

    def test_unknown_key_exits_nonzero(self, tmp_path, capsys):
        raw = minimal_raw()
        raw["hyper"]["etaa"] = 0.1
        path = self._write(tmp_path, raw)
        assert main(["run", path]) == 2
        assert "unknown key 'etaa'" in capsys.readouterr().err

    def test_certify_command(self, tmp_path, capsys):
        path = self._write(tmp_path, minimal_raw())
        assert main(["run", path, "--out", str(tmp_path / "o")]) == 0
        trace = str(tmp_path / "o" / "cfg-seed0.trace")
        assert main(["certify", trace]) == 0
        assert "result: PASS" in capsys.readouterr().out

    def test_sweep_creates_per_value_dirs(self, tmp_path, capsys):
        path = self._write(tmp_path, minimal_raw())
        code = main(["sweep", path, "--param", "hyper.alpha=0.5,1.0",
                     "--out", str(tmp_path / "sw")])
        assert code == 0
        assert (tmp_path / "sw" / "cfg-alpha0.5" / "cfg-seed0.trace").exists()
        assert (tmp_path / "sw" / "cfg-alpha1.0" / "cfg-seed0.trace").exists()

    def test_gen_data_round_trip(self, tmp_path, capsys):
        raw = minimal_raw()
        raw["problem"] = {"kind": "synthetic", "n": 3, "dim": 4, "classes": 2,
                          "samples": [8, 12], "data_seed": 2}
        path = self._write(tmp_path, raw)
        out = str(tmp_path / "d.npz")
        assert main(["gen-data", path, "-o", out]) == 0
        ds = load_dataset(out)
        assert ds.n == 3 and ds.dim == 4
