"""End-to-end CLI behavior: exit codes, file outputs, determinism."""

import numpy as np
import pytest

from otagg.cli import main
from otagg.formats import read_db, read_weights
from otagg.model import AggregatorConfig
from otagg import init_weights


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


SMALL_TRAIN = [
    "--m", "3", "--l", "4", "--g-dim", "4", "--hidden", "8",
    "--batch-places", "3", "--imgs-per-place", "3",
    "--lr", "1e-3", "--dropout", "0.2", "--seed", "7",
]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    code = main([
        "synth", "--out", str(root), "--places", "4", "--imgs-per-place", "3",
        "--holdout", "1", "--n", "10", "--d", "8", "--seed", "3",
    ])
    assert code == 0
    return root


class TestSynth:
    def test_writes_layout(self, dataset):
        assert len(list((dataset / "features").glob("*.salf"))) == 12
        assert len(list((dataset / "queries").glob("*.salf"))) == 4
        assert (dataset / "geotags.csv").exists()
        assert (dataset / "labels.csv").exists()

    def test_rerun_writes_identical_bytes(self, dataset, tmp_path):
        other = tmp_path / "again"
        assert main([
            "synth", "--out", str(other), "--places", "4", "--imgs-per-place", "3",
            "--holdout", "1", "--n", "10", "--d", "8", "--seed", "3",
        ]) == 0
        for sub in ("features", "queries"):
            for path in sorted((dataset / sub).glob("*.salf")):
                assert (other / sub / path.name).read_bytes() == path.read_bytes()
        assert (other / "geotags.csv").read_text() == (dataset / "geotags.csv").read_text()


class TestTrain:
    def test_zero_epochs_equals_initialization(self, dataset, tmp_path, capsys):
        out = tmp_path / "w0.salw"
        code, _, _ = run(
            capsys, "train", "--features", str(dataset / "features"),
            "--labels", str(dataset / "labels.csv"), "--epochs", "0",
            "--out", str(out), *SMALL_TRAIN,
        )
        assert code == 0
        trained = read_weights(out)
        fresh = init_weights(
            AggregatorConfig(m=3, l=4, g_dim=4, d=8, hidden=8,
                             dropout_rate=0.2, sinkhorn_iters=3, seed=7)
        )
        for name, arr in fresh.tensors().items():
            assert np.array_equal(trained.tensors()[name], arr), name

    def test_fixed_seed_reproduces_weight_file(self, dataset, tmp_path, capsys):
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / f"w_{tag}.salw"
            code, _, _ = run(
                capsys, "train", "--features", str(dataset / "features"),
                "--labels", str(dataset / "labels.csv"), "--epochs", "2",
                "--out", str(out), *SMALL_TRAIN,
            )
            assert code == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_loss_log_and_plot(self, dataset, tmp_path, capsys):
        out = tmp_path / "w.salw"
        log = tmp_path / "run.loss.csv"
        code, stdout, _ = run(
            capsys, "train", "--features", str(dataset / "features"),
            "--labels", str(dataset / "labels.csv"), "--epochs", "1",
            "--out", str(out), "--loss-log", str(log), "--plot", *SMALL_TRAIN,
        )
        assert code == 0
        lines = log.read_text().splitlines()
        assert lines, "loss log must not be empty"
        for line in lines:
            it, lr, loss = line.split(",")
            int(it), float(lr), float(loss)
        png = log.with_suffix(".png")
        assert png.exists() and png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_geotag_labels_fallback(self, dataset, tmp_path, capsys):
        out = tmp_path / "w_geo.salw"
        code, _, _ = run(
            capsys, "train", "--features", str(dataset / "features"),
            "--geotags", str(dataset / "geotags.csv"), "--epochs", "0",
            "--out", str(out), *SMALL_TRAIN,
        )
        assert code == 0

    def test_single_place_exits_one(self, tmp_path, capsys):
        root = tmp_path / "mono"
        main([
            "synth", "--out", str(root), "--places", "2", "--imgs-per-place", "2",
            "--n", "6", "--d", "4", "--seed", "0",
        ])
        labels = root / "labels.csv"
        labels.write_text(
            "".join(f"{line.split(',')[0]},0\n" for line in labels.read_text().splitlines()
                    if line and not line.startswith("#")),
            encoding="utf-8",
        )
        code, _, err = run(
            capsys, "train", "--features", str(root / "features"),
            "--labels", str(labels), "--epochs", "1", "--out", str(tmp_path / "w.salw"),
            "--m", "2", "--l", "2", "--g-dim", "2", "--hidden", "4",
            "--imgs-per-place", "2",
        )
        assert code == 1
        assert "places" in err


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    weights = root / "w.salw"
    code = main([
        "train", "--features", str(dataset / "features"),
        "--labels", str(dataset / "labels.csv"), "--epochs", "1",
        "--out", str(weights), *SMALL_TRAIN,
    ])
    assert code == 0
    refs = root / "refs.sald"
    queries = root / "queries.sald"
    assert main(["aggregate", "--weights", str(weights), "--features",
                 str(dataset / "features"), "--out", str(refs)]) == 0
    assert main(["aggregate", "--weights", str(weights), "--features",
                 str(dataset / "queries"), "--out", str(queries)]) == 0
    return {"weights": weights, "refs": refs, "queries": queries}


class TestAggregate:
    def test_db_contents(self, trained, capsys):
        descriptors, tags = read_db(trained["refs"])
        assert len(descriptors) == 12
        assert descriptors[0].dim == 3 * 4 + 4
        assert all(t is not None for t in tags)

    def test_rerun_is_bit_identical(self, dataset, trained, tmp_path, capsys):
        again = tmp_path / "again.sald"
        code, stdout, _ = run(
            capsys, "aggregate", "--weights", str(trained["weights"]),
            "--features", str(dataset / "features"), "--out", str(again),
        )
        assert code == 0
        assert "per-image ms" in stdout
        assert again.read_bytes() == trained["refs"].read_bytes()

    def test_empty_dir_exits_one(self, trained, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        code, _, err = run(
            capsys, "aggregate", "--weights", str(trained["weights"]),
            "--features", str(empty), "--out", str(tmp_path / "x.sald"),
        )
        assert code == 1
        assert "no feature files" in err


class TestIndexAndQuery:
    def test_inspect(self, trained, capsys):
        code, stdout, _ = run(capsys, "index", "--db", str(trained["refs"]))
        assert code == 0
        assert "12 descriptors" in stdout

    def test_query_prints_ranked_csv(self, trained, capsys):
        descriptors, _ = read_db(trained["queries"])
        qid = descriptors[0].id
        code, stdout, _ = run(
            capsys, "query", "--db", str(trained["refs"]),
            "--query-db", str(trained["queries"]), "--id", qid, "-k", "3",
        )
        assert code == 0
        lines = stdout.strip().splitlines()
        assert len(lines) == 3
        for rank, line in enumerate(lines, start=1):
            r, rid, sim = line.split(",")
            assert int(r) == rank
            assert -1.0 - 1e-6 <= float(sim) <= 1.0 + 1e-6

    def test_unknown_query_id_exits_one(self, trained, capsys):
        code, _, err = run(
            capsys, "query", "--db", str(trained["refs"]),
            "--query-db", str(trained["queries"]), "--id", "nope",
        )
        assert code == 1


class TestEval:
    def test_prints_ascending_ks(self, trained, capsys):
        code, stdout, _ = run(
            capsys, "eval", "--db", str(trained["refs"]),
            "--query-db", str(trained["queries"]), "--ks", "5,1",
        )
        assert code == 0
        lines = stdout.strip().splitlines()
        assert lines[0].startswith("R@1: ")
        assert lines[1].startswith("R@5: ")

    def test_identical_colocated_queries_hit_rank_one(self, trained, tmp_path, capsys):
        code, stdout, _ = run(
            capsys, "eval", "--db", str(trained["refs"]),
            "--query-db", str(trained["refs"]), "--ks", "1",
        )
        # query id == reference id gets excluded, but each place has two
        # other co-located training images with near-identical features
        assert code == 0
        assert float(stdout.strip().splitlines()[0].split(": ")[1]) == 1.0

    def test_report_dir_renders_figure(self, trained, tmp_path, capsys):
        report = tmp_path / "report"
        code, stdout, _ = run(
            capsys, "eval", "--db", str(trained["refs"]),
            "--query-db", str(trained["queries"]), "--ks", "1,5",
            "--report-dir", str(report),
        )
        assert code == 0
        csv = (report / "recall.csv").read_text().splitlines()
        assert csv[0] == "k,recall"
        assert len(csv) == 3
        png = report / "recall.png"
        assert png.exists() and png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_dim_mismatch_exits_one(self, trained, dataset, tmp_path, capsys):
        other_w = tmp_path / "wide.salw"
        assert main([
            "train", "--features", str(dataset / "features"),
            "--labels", str(dataset / "labels.csv"), "--epochs", "0",
            "--out", str(other_w), "--m", "3", "--l", "5", "--g-dim", "4",
            "--hidden", "8", "--imgs-per-place", "3",
        ]) == 0
        wide_db = tmp_path / "wide.sald"
        assert main([
            "aggregate", "--weights", str(other_w),
            "--features", str(dataset / "queries"), "--out", str(wide_db),
        ]) == 0
        code, _, err = run(
            capsys, "eval", "--db", str(trained["refs"]),
            "--query-db", str(wide_db), "--ks", "1",
        )
        assert code == 1
        assert "mismatch" in err


class TestUsageErrors:
    def test_unknown_flag_exits_two(self):
        with pytest.raises(SystemExit) as err:
            main(["eval", "--bogus-flag", "x"])
        assert err.value.code == 2

    def test_missing_subcommand_exits_two(self):
        with pytest.raises(SystemExit) as err:
            main([])
        assert err.value.code == 2
