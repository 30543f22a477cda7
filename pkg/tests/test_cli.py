import csv
import json
import math

import numpy as np
import pytest

from geovar import dataset as ds
from geovar.cli import AUDIT_HEADER, main
from geovar.reweighting import ReweightConfig, weight
from geovar.semivariogram import (EmpiricalVariogram, SphericalModel, evaluate_spherical, read_model,
                                  read_variogram_csv, write_variogram_csv)


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def gp(tmp_path_factory):
    """A small generated dataset plus its variogram and fitted model."""
    root = tmp_path_factory.mktemp("gp")
    assert run("gen", "--n", 400, "--range-km", 2000, "--seed", 3, "--out", root / "d.gemb") == 0
    assert run("variogram", "--data", root / "d.gemb", "--bins", 25, "--h-max-km", 5000,
               "--out", root / "v.csv", "--fit") == 0
    return root


class TestGen:
    def test_roundtrip(self, tmp_path):
        out = tmp_path / "d.gemb"
        assert run("gen", "--n", 120, "--range-km", 1500, "--sill", 1.0, "--nugget", 0.1, "--seed", 7,
                   "--out", out) == 0
        spec = ds.SyntheticSpec(n=120, cov_range_km=1500, cov_sill=1.0, cov_nugget=0.1, seed=7)
        assert ds.load_binary(out) == ds.generate_synthetic(spec)

    def test_missing_n(self, tmp_path, capsys):
        assert run("gen", "--out", tmp_path / "d.gemb") == 1
        assert "--n" in capsys.readouterr().err

    def test_unknown_subcommand(self):
        assert run("frobnicate") == 1

    def test_deterministic_bytes(self, tmp_path):
        for name in ("a.gemb", "b.gemb"):
            assert run("gen", "--n", 80, "--seed", 2, "--out", tmp_path / name) == 0
        assert (tmp_path / "a.gemb").read_bytes() == (tmp_path / "b.gemb").read_bytes()

    def test_sidecar(self, tmp_path, capsys):
        assert run("gen", "--n", 10, "--seed", 2, "--out", tmp_path / "d.gemb") == 0
        side = json.loads((tmp_path / "d.gemb.config.json").read_text())
        assert side["n"] == 10 and side["seed"] == 2 and side["command"] == "gen"
        assert not any("time" in k or "date" in k for k in side)
        assert '"latent_dim": 8' in capsys.readouterr().out

    def test_zero_variance_is_numeric_failure(self, tmp_path):
        assert run("gen", "--n", 10, "--sill", 0, "--nugget", 0, "--out", tmp_path / "d.gemb") == 3


class TestVariogram:
    def test_constant_features_flat_zero(self, tmp_path):
        n = 60
        rng = np.random.default_rng(0)
        d = ds.Dataset(np.arange(n), rng.uniform(-10, 10, n), rng.uniform(-10, 10, n),
                       np.tile(np.float32([1, 2, 3]), (n, 1)))
        ds.save_binary(d, tmp_path / "c.gemb")
        assert run("variogram", "--data", tmp_path / "c.gemb", "--bins", 10, "--h-max-km", 3000,
                   "--out", tmp_path / "c.csv") == 0
        ev = read_variogram_csv(tmp_path / "c.csv")
        g = ev.gamma[ev.counts > 0]
        assert len(g) and np.all(np.abs(g) < 1e-12)
        assert (tmp_path / "c.svg").read_text().startswith("<svg")

    def test_gp_curve_plateaus(self, gp):
        ev = read_variogram_csv(gp / "v.csv")
        # features are unit-normalised, so the total variance c0 + c maps to 1 in cosine
        # space and uncorrelated records sit at gamma = (c0 + c) / 2 = 0.5
        plateau = 0.5
        assert ev.gamma[-1] == pytest.approx(plateau, rel=0.25)
        assert ev.gamma[0] < ev.gamma[-1]

    def test_fit_writes_model(self, gp):
        keys = [line.split("=")[0] for line in (gp / "v.model").read_text().splitlines()]
        assert keys == ["nugget", "partial_sill", "range_km", "objective"]
        svg = (gp / "v.svg").read_text()
        assert svg.count("<polyline") == 2

    def test_unreadable(self, tmp_path):
        (tmp_path / "bad.gemb").write_bytes(b"NOPE" + bytes(20))
        assert run("variogram", "--data", tmp_path / "bad.gemb", "--out", tmp_path / "v.csv") == 2
        assert run("variogram", "--data", tmp_path / "missing.gemb", "--out", tmp_path / "v.csv") == 2

    def test_thread_count_does_not_change_output(self, gp, tmp_path, monkeypatch):
        monkeypatch.setenv("GEOVAR_THREADS", "1")
        assert run("variogram", "--data", gp / "d.gemb", "--bins", 25, "--h-max-km", 5000,
                   "--out", tmp_path / "one.csv") == 0
        monkeypatch.setenv("GEOVAR_THREADS", "4")
        assert run("variogram", "--data", gp / "d.gemb", "--bins", 25, "--h-max-km", 5000,
                   "--out", tmp_path / "four.csv") == 0
        assert (tmp_path / "one.csv").read_bytes() == (tmp_path / "four.csv").read_bytes()


class TestFit:
    def test_exact_model(self, tmp_path):
        truth = SphericalModel(0.1, 0.4, 1500.0)
        edges = np.linspace(0, 3000, 31)
        centers = 0.5 * (edges[1:] + edges[:-1])
        ev = EmpiricalVariogram.from_arrays(edges, evaluate_spherical(truth, centers), np.full(30, 100))
        write_variogram_csv(ev, tmp_path / "v.csv")
        assert run("fit", "--variogram", tmp_path / "v.csv", "--out", tmp_path / "m.model") == 0
        m = read_model(tmp_path / "m.model")
        for got, want in ((m.nugget, 0.1), (m.partial_sill, 0.4), (m.range_km, 1500.0)):
            assert got == pytest.approx(want, rel=1e-4)

    def test_too_few_bins(self, tmp_path):
        ev = EmpiricalVariogram.from_arrays(np.linspace(0, 100, 5), [0.1, 0.2, np.nan, np.nan], [1, 1, 0, 0])
        write_variogram_csv(ev, tmp_path / "v.csv")
        assert run("fit", "--variogram", tmp_path / "v.csv", "--out", tmp_path / "m.model") == 3

    def test_refit_idempotent(self, gp, tmp_path):
        m = read_model(gp / "v.model")
        ev = read_variogram_csv(gp / "v.csv")
        curve = EmpiricalVariogram.from_arrays(np.append([b.h_lo for b in ev.bins], ev.h_max),
                                               evaluate_spherical(m, ev.centers), ev.counts)
        write_variogram_csv(curve, tmp_path / "curve.csv")
        assert run("fit", "--variogram", tmp_path / "curve.csv", "--out", tmp_path / "re.model") == 0
        re = read_model(tmp_path / "re.model")
        for got, want in ((re.nugget, m.nugget), (re.partial_sill, m.partial_sill), (re.range_km, m.range_km)):
            assert got == pytest.approx(want, rel=1e-6, abs=1e-9)


TRAIN_FLAGS = ("--epochs", 2, "--batch-size", 32, "--queue", 64, "--hidden", 16, "--d-emb", 8,
               "--scales", 3, "--fourier", 4)


class TestTrainEval:
    def test_baseline_and_reweighted(self, gp):
        assert run("train", "--data", gp / "d.gemb", "--no-reweight", *TRAIN_FLAGS, "--out-dir", gp / "base") == 0
        assert run("train", "--data", gp / "d.gemb", "--model", gp / "v.model", *TRAIN_FLAGS,
                   "--out-dir", gp / "rw") == 0
        base = list(csv.DictReader(open(gp / "base" / "epoch_log.csv")))
        rw = list(csv.DictReader(open(gp / "rw" / "epoch_log.csv")))
        assert len(base) == len(rw) == 2
        assert all(r["hard_count"] == "0" and r["false_count"] == "0" for r in base)
        assert sum(int(r["hard_count"]) + int(r["false_count"]) for r in rw) > 0
        assert float(rw[0]["val_acc25"]) <= float(rw[0]["val_acc200"]) <= float(rw[0]["val_acc750"])

    def test_same_seed_same_bytes(self, gp):
        outs = []
        for name in ("s1", "s2"):
            assert run("train", "--data", gp / "d.gemb", "--model", gp / "v.model", *TRAIN_FLAGS,
                       "--seed", 5, "--out-dir", gp / name) == 0
            outs.append(((gp / name / "epoch_log.csv").read_bytes(), (gp / name / "model.gckpt").read_bytes()))
        assert outs[0] == outs[1]

    def test_reweight_needs_model(self, gp):
        assert run("train", "--data", gp / "d.gemb", *TRAIN_FLAGS, "--out-dir", gp / "x") == 1
        assert run("train", "--data", gp / "d.gemb", "--delta-scale", 3, "--no-reweight",
                   "--out-dir", gp / "x") == 1

    def test_checkpoints(self, gp):
        assert run("train", "--data", gp / "d.gemb", "--no-reweight", *TRAIN_FLAGS, "--checkpoint-every", 1,
                   "--out-dir", gp / "ck") == 0
        assert sorted(p.name for p in (gp / "ck" / "checkpoints").iterdir()) == ["epoch0001.gckpt",
                                                                                "epoch0002.gckpt"]

    def test_untrained_near_random_baseline(self, tmp_path, capsys):
        assert run("gen", "--n", 2000, "--seed", 1, "--out", tmp_path / "d.gemb") == 0
        assert run("train", "--data", tmp_path / "d.gemb", "--no-reweight", "--epochs", 0, "--seed", 1,
                   "--out-dir", tmp_path / "r") == 0
        capsys.readouterr()
        assert run("eval", "--checkpoint", tmp_path / "r" / "model.gckpt", "--data", tmp_path / "d.gemb",
                   "--seed", 1, "--out", tmp_path / "e.csv") == 0
        text = capsys.readouterr().out
        row = next(csv.DictReader(open(tmp_path / "e.csv")))
        n = int(row["n_queries"])
        base = dict(zip(("val_acc25", "val_acc200", "val_acc750"),
                        (float(x.split("=")[1]) for x in text.strip().splitlines()[-1].split()[2:])))
        for key, p in base.items():
            acc = float(row[key])
            assert abs(acc - p) <= 4 * math.sqrt(p * (1 - p) / n) + 1.0 / n, key
        assert float(row["val_acc25"]) <= float(row["val_acc200"]) <= float(row["val_acc750"])

    def test_gallery_sample(self, gp, capsys):
        assert run("train", "--data", gp / "d.gemb", "--no-reweight", *TRAIN_FLAGS, "--out-dir", gp / "gs") == 0
        for name in ("a", "b"):
            assert run("eval", "--checkpoint", gp / "gs" / "model.gckpt", "--data", gp / "d.gemb",
                       "--gallery-sample", 50, "--out", gp / f"gs_{name}.csv") == 0
        assert (gp / "gs_a.csv").read_bytes() == (gp / "gs_b.csv").read_bytes()
        assert run("eval", "--checkpoint", gp / "gs" / "model.gckpt", "--data", gp / "d.gemb",
                   "--gallery-sample", -1) == 1

    def test_missing_checkpoint(self, gp):
        assert run("eval", "--checkpoint", gp / "nope.gckpt", "--data", gp / "d.gemb") == 2


@pytest.fixture(scope="module")
def rows(gp):
    assert run("weights", "audit", "--data", gp / "d.gemb", "--model", gp / "v.model",
               "--theta2-km", 300, "--sample-size", 3000, "--seed", 1, "--out", gp / "a.csv") == 0
    with open(gp / "a.csv") as fh:
        reader = csv.reader(fh)
        assert next(reader) == AUDIT_HEADER
        return list(reader)


class TestAudit:
    def test_size_and_partition(self, rows):
        assert len(rows) == 3000
        assert {r[7] for r in rows} == {"hard", "false", "neutral"}

    def test_hard_rows(self, gp, rows):
        theta1 = read_model(gp / "v.model").range_km
        for r in rows:
            if r[7] == "hard":
                assert float(r[2]) > theta1 and float(r[5]) < 0

    def test_weight_recomputed(self, gp, rows):
        cfg = ReweightConfig(read_model(gp / "v.model"), theta2_km=300.0)
        for r in rows:
            d_km, d_cos, expected, delta, w = map(float, r[2:7])
            assert delta == d_cos - expected
            assert w == weight(cfg, delta, d_km)
            if r[7] == "neutral":
                assert w == 1.0

    def test_missing_model(self, gp):
        assert run("weights", "audit", "--data", gp / "d.gemb", "--model", gp / "nope",
                   "--out", gp / "b.csv") == 2
        assert run("weights", "--data", gp / "d.gemb") == 1
