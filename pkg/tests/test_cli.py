"""Command-line verbs end to end on small SNAP fixtures."""

import json
import subprocess
import sys

import pytest
from shapely.geometry import shape

from poiaug.cli import main
from poiaug.config import RunConfig
from poiaug.data import format_time
from poiaug.numerics import load_checkpoint

T0 = 1_600_000_000 - 1_600_000_000 % 86400  # midnight UTC
H = 3600


def snap_row(user, ts, lat, lng, poi):
    return f"{user}\t{format_time(ts)}\t{lat!r}\t{lng!r}\t{poi}\n"


def line_poi(k):
    return 40.0, -74.0 + 0.01 * k


def gap_rows():
    """User A: 10:00, 19:00, 22:00 then a dense morning two days later; B walks the line densely."""
    rows = []
    for h, k in ((10, 0), (19, 3), (22, 4)):
        rows.append(snap_row("A", T0 + h * H, *line_poi(k), f"L{k}"))
    for i, h in enumerate(range(1, 20, 3)):
        rows.append(snap_row("A", T0 + 2 * 86400 + h * H, *line_poi(i), f"L{i}"))
    for day in range(3):
        for i in range(6):
            rows.append(snap_row("B", T0 + (10 + 3 * day) * 86400 + i * 3 * H, *line_poi(i), f"L{i}"))
    return rows


def dense_rows():
    rows = []
    for user in ("C", "D"):
        for i in range(10):
            rows.append(snap_row(user, T0 + i * 3 * H, *line_poi(i % 5), f"L{i % 5}"))
    return rows


@pytest.fixture
def gap_bundle(tmp_path):
    src = tmp_path / "gap.snap"
    src.write_text("".join(gap_rows()), encoding="utf-8")
    bundle = tmp_path / "bundle"
    assert main(["ingest", str(src), "--out", str(bundle)]) == 0
    return bundle


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


class TestIngest:
    def test_summary_and_files(self, gap_bundle, capsys):
        for name in ("config.txt", "vocab.tsv", "stats.txt", "summary.tsv", "train.grid.tsv", "test.snap.tsv"):
            assert (gap_bundle / name).exists()
        summary = dict(line.split("\t") for line in (gap_bundle / "summary.tsv").read_text().splitlines())
        assert summary["users"] == "2"

    def test_refuses_existing_bundle(self, gap_bundle, tmp_path, capsys):
        src = tmp_path / "gap.snap"
        code, _, err = run(capsys, "ingest", src, "--out", gap_bundle)
        assert code == 1 and "--force" in err
        assert run(capsys, "ingest", src, "--out", gap_bundle, "--force")[0] == 0

    def test_user_cap(self, tmp_path, capsys):
        src = tmp_path / "x.snap"
        src.write_text("".join(gap_rows() + dense_rows()), encoding="utf-8")
        code, out, _ = run(capsys, "ingest", src, "--out", tmp_path / "b", "--max-users", 2)
        assert code == 0 and "users\t2\n" in out

    def test_data_errors(self, tmp_path, capsys):
        assert run(capsys, "ingest", tmp_path / "nope.snap", "--out", tmp_path / "b")[0] == 2
        junk = tmp_path / "junk.snap"
        junk.write_text("not\ta\tsnap\nfile\n", encoding="utf-8")
        assert run(capsys, "ingest", junk, "--out", tmp_path / "c")[0] == 2

    def test_usage_errors(self, tmp_path, capsys):
        assert run(capsys, "ingest", tmp_path / "x")[0] == 1
        assert run(capsys, "bogus")[0] == 1
        assert run(capsys, "ingest", tmp_path / "x", "--out", tmp_path / "b", "--set", "colour=red")[0] == 1


class TestAugment:
    def test_gap_gets_two_rows(self, gap_bundle, tmp_path, capsys):
        out = tmp_path / "aug.snap"
        code, stdout, _ = run(capsys, "augment", gap_bundle, "--method", "nn", "--out", out)
        assert code == 0
        original = (gap_bundle / "train.snap.tsv").read_text().splitlines()
        augmented = out.read_text().splitlines()
        inserted = [r for r in augmented if r not in original]
        assert [r.split("\t")[1] for r in inserted] == [format_time(T0 + 13 * H), format_time(T0 + 16 * H)]
        assert [r for r in augmented if r in original] == original
        assert (tmp_path / "aug.snap.count").read_text() == "2\n"
        assert "imputed\t2" in stdout
        assert (gap_bundle / "test.snap.tsv").read_text().splitlines() != []

    def test_marker_column(self, gap_bundle, tmp_path, capsys):
        out = tmp_path / "aug.snap"
        run(capsys, "augment", gap_bundle, "--method", "pop", "--out", out, "--marker", "imputed")
        rows = [r.split("\t") for r in out.read_text().splitlines()]
        assert all(len(r) == 6 for r in rows)
        assert sum(r[5] == "imputed" for r in rows) == 2 and sum(r[5] == "" for r in rows) == len(rows) - 2

    def test_nn_and_pop_differ_only_in_place(self, gap_bundle, tmp_path, capsys):
        run(capsys, "augment", gap_bundle, "--method", "nn", "--out", tmp_path / "nn.snap")
        run(capsys, "augment", gap_bundle, "--method", "pop", "--out", tmp_path / "pop.snap")
        nn = [r.split("\t") for r in (tmp_path / "nn.snap").read_text().splitlines()]
        pop = [r.split("\t") for r in (tmp_path / "pop.snap").read_text().splitlines()]
        assert len(nn) == len(pop)
        for a, b in zip(nn, pop):
            assert a[:2] == b[:2]

    def test_no_gaps_is_identity(self, tmp_path, capsys):
        src = tmp_path / "dense.snap"
        src.write_text("".join(dense_rows()), encoding="utf-8")
        assert run(capsys, "ingest", src, "--out", tmp_path / "b")[0] == 0
        out = tmp_path / "aug.snap"
        assert run(capsys, "augment", tmp_path / "b", "--method", "nn", "--out", out)[0] == 0
        assert out.read_text() == (tmp_path / "b" / "train.snap.tsv").read_text()
        assert (tmp_path / "aug.snap.count").read_text() == "0\n"

    def test_model_needs_checkpoint(self, gap_bundle, tmp_path, capsys):
        code, _, err = run(capsys, "augment", gap_bundle, "--method", "model", "--out", tmp_path / "m.snap")
        assert code == 1 and "--checkpoint" in err


class TestTrainAndModel:
    def test_zero_stages_checkpoint_is_deterministic(self, gap_bundle, tmp_path, capsys):
        for name in ("r1", "r2"):
            assert run(capsys, "train", gap_bundle, "--out", tmp_path / name, "--stages", "0,0,0")[0] == 0
        a = (tmp_path / "r1" / "checkpoint.txt").read_bytes()
        assert a == (tmp_path / "r2" / "checkpoint.txt").read_bytes()
        assert (tmp_path / "r1" / "train_log.tsv").read_text().count("\n") == 1
        store, _ = load_checkpoint(tmp_path / "r1" / "checkpoint.txt")
        assert store["embedding"].shape[0] == len((gap_bundle / "vocab.tsv").read_text().splitlines()) + 1

    def test_model_augment_and_config_echo(self, gap_bundle, tmp_path, capsys):
        run_dir = tmp_path / "run"
        assert run(capsys, "train", gap_bundle, "--out", run_dir, "--stages", "1,1,1", "--seed", 7)[0] == 0
        echoed = RunConfig.from_text((run_dir / "config.txt").read_text())
        assert echoed.stage_epochs == (1, 1, 1) and echoed.seed == 7
        assert RunConfig.from_text(echoed.to_text()) == echoed
        log = (run_dir / "train_log.tsv").read_text().splitlines()
        assert [r.split("\t")[1] for r in log[1:]] == ["pretrain-uni", "pretrain-bi", "mle", "mask"]
        out = tmp_path / "m.snap"
        code = run(capsys, "augment", gap_bundle, "--method", "model", "--checkpoint", run_dir / "checkpoint.txt",
                   "--out", out)[0]
        assert code == 0 and (tmp_path / "m.snap.count").read_text() == "2\n"

    def test_numerical_failure_exit_code(self, gap_bundle, tmp_path, capsys):
        code, _, err = run(capsys, "train", gap_bundle, "--out", tmp_path / "bad", "--stages", "0,2,0",
                           "--set", "lr=1e300", "--set", "clip_norm=1e300")
        assert code == 3 and "numerical" in err
        assert (tmp_path / "bad" / "checkpoint.txt").exists()

    def test_checkpoint_vocabulary_mismatch(self, gap_bundle, tmp_path, capsys):
        src = tmp_path / "dense.snap"
        src.write_text("".join(dense_rows()), encoding="utf-8")
        run(capsys, "ingest", src, "--out", tmp_path / "other")
        run(capsys, "train", tmp_path / "other", "--out", tmp_path / "run", "--stages", "0,0,0")
        code = run(capsys, "augment", gap_bundle, "--method", "model", "--checkpoint", tmp_path / "run" / "checkpoint.txt",
                   "--out", tmp_path / "x.snap")[0]
        assert code == 2


class TestEvaluate:
    def test_reports(self, gap_bundle, tmp_path, capsys):
        code, out, _ = run(capsys, "evaluate", gap_bundle, "--out", tmp_path / "ev", "--methods", "original,li-nn",
                           "--set", "rec_epochs=1")
        assert code == 0
        tsv = (tmp_path / "ev" / "report.tsv").read_text()
        assert tsv == out and len(tsv.splitlines()) == 2 + 4
        doc = json.loads((tmp_path / "ev" / "report.json").read_text())
        assert [r["method"] for r in doc["rows"]] == ["original", "original", "li-nn", "li-nn"]
        assert RunConfig.from_text((tmp_path / "ev" / "config.txt").read_text()).methods == ("original", "li-nn")

    def test_unknown_method(self, gap_bundle, tmp_path, capsys):
        assert run(capsys, "evaluate", gap_bundle, "--out", tmp_path / "ev", "--methods", "magic")[0] == 1


class TestGeoJSON:
    def seq_id(self, bundle):
        first = (bundle / "train.grid.tsv").read_text().splitlines()[0]
        return first.split("\t")[0]

    def test_imputed_points(self, gap_bundle, tmp_path, capsys):
        out = tmp_path / "seq.geojson"
        sid = self.seq_id(gap_bundle)
        assert run(capsys, "export-geojson", gap_bundle, "--sequence", sid, "--method", "nn", "--out", out)[0] == 0
        doc = json.loads(out.read_text())
        assert doc["type"] == "FeatureCollection" and len(doc["features"]) == 5
        assert sum(f["properties"]["imputed"] for f in doc["features"]) == 2
        assert [f["properties"]["order"] for f in doc["features"]] == list(range(5))
        for f in doc["features"]:
            geom = shape(f["geometry"])
            assert geom.is_valid and geom.geom_type == "Point"
            assert -180 <= geom.x <= 180 and -90 <= geom.y <= 90
        assert shape(doc["features"][0]["geometry"]).y == 40.0

    def test_without_fill_skips_missing(self, gap_bundle, tmp_path, capsys):
        out = tmp_path / "raw.geojson"
        run(capsys, "export-geojson", gap_bundle, "--sequence", self.seq_id(gap_bundle), "--out", out)
        doc = json.loads(out.read_text())
        assert len(doc["features"]) == 3 and not any(f["properties"]["imputed"] for f in doc["features"])

    def test_empty_selection(self, gap_bundle, tmp_path, capsys):
        out = tmp_path / "empty.geojson"
        assert run(capsys, "export-geojson", gap_bundle, "--out", out)[0] == 0
        assert json.loads(out.read_text()) == {"type": "FeatureCollection", "features": []}

    def test_unknown_sequence(self, gap_bundle, tmp_path, capsys):
        code, _, err = run(capsys, "export-geojson", gap_bundle, "--sequence", "nope", "--out", tmp_path / "x.geojson")
        assert code == 2 and "nope" in err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "poiaug", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "export-geojson" in proc.stdout
