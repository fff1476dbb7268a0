import numpy as np
import pytest

from regionret.cli import main
from regionret.dataset import load_dataset, write_pgm
from regionret.retrieval import load_db, load_index
from regionret.trainer import load_checkpoint


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data -> train -> embed -> build-index, all through the CLI."""
    root = tmp_path_factory.mktemp("pipeline")
    data = root / "data"
    ckpt = root / "model.ckpt"
    db = root / "regions.db"
    idx = root / "regions.idx"
    assert main(["gen-data", "--out", str(data), "--n", "8", "--classes", "3",
                 "--size", "32", "--seed", "2"]) == 0
    assert main(["train", "--data", str(data), "--out", str(ckpt),
                 "--stage", "scratch", "--epochs", "2", "--batch-size", "4",
                 "--clusters", "2", "--image-size", "32", "--seed", "1"]) == 0
    assert main(["embed", "--ckpt", str(ckpt), "--data", str(data),
                 "--out", str(db)]) == 0
    assert main(["build-index", "--db", str(db), "--out", str(idx),
                 "--clusters", "2", "--seed", "0"]) == 0
    return root, data, ckpt, db, idx


class TestPipeline:
    def test_gen_data_loadable(self, pipeline):
        _, data, _, _, _ = pipeline
        manifest = load_dataset(data)
        assert len(manifest.samples) == 8
        assert manifest.num_classes == 3

    def test_gen_data_deterministic(self, tmp_path):
        for sub in ("a", "b"):
            assert main(["gen-data", "--out", str(tmp_path / sub), "--n", "3",
                         "--classes", "4", "--size", "32", "--seed", "5"]) == 0
        files_a = sorted(p.name for p in (tmp_path / "a").rglob("*") if p.is_file())
        for name in files_a:
            pa = next((tmp_path / "a").rglob(name))
            pb = next((tmp_path / "b").rglob(name))
            assert pa.read_bytes() == pb.read_bytes()

    def test_train_outputs(self, pipeline):
        root, _, ckpt, _, _ = pipeline
        loaded = load_checkpoint(ckpt)
        assert loaded.epoch == 2
        log = (root / "model.ckpt.log").read_text().splitlines()
        assert len(log) == 2
        for i, line in enumerate(log, start=1):
            epoch, loss = line.split("\t")
            assert int(epoch) == i
            float(loss)

    def test_embed_outputs(self, pipeline):
        _, _, _, db, _ = pipeline
        loaded = load_db(db)
        assert len(loaded.records) == 8 * 3

    def test_index_outputs(self, pipeline):
        _, _, _, _, idx = pipeline
        loaded = load_index(idx)
        assert sorted(loaded.models) == [0, 1, 2]

    def test_query_output_format(self, pipeline, capsys):
        _, data, ckpt, db, idx = pipeline
        manifest = load_dataset(data)
        sample = manifest.samples[0]
        box = sample.boxes[0]
        image = data / "images" / f"{sample.id}.pgm"
        args = ["query", "--index", str(idx), "--db", str(db),
                "--ckpt", str(ckpt), "--image", str(image),
                "--box", f"{box.label},{box.x0},{box.y0},{box.x1},{box.y1}",
                "--k", "3", "--label-source", "given"]
        assert main(args) == 0
        out1 = capsys.readouterr().out
        lines = out1.strip().splitlines()
        assert len(lines) == 4
        for rank, line in enumerate(lines[:3], start=1):
            r, image_id, label, sim = line.split("\t")
            assert int(r) == rank
            assert int(label) == box.label
            assert -1.0 <= float(sim) <= 1.0
        assert lines[3].startswith("candidates=")
        # identical invocation, identical bytes
        assert main(args) == 0
        assert capsys.readouterr().out == out1

    def test_query_brute_force(self, pipeline, capsys):
        _, data, ckpt, db, _ = pipeline
        manifest = load_dataset(data)
        sample = manifest.samples[1]
        box = sample.boxes[1]
        image = data / "images" / f"{sample.id}.pgm"
        assert main(["query", "--brute-force", "--db", str(db),
                     "--ckpt", str(ckpt), "--image", str(image),
                     "--box", f"{box.label},{box.x0},{box.y0},{box.x1},{box.y1}",
                     "--k", "2"]) == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert out[-1] == "candidates=24"

    def test_eval_output(self, pipeline, capsys):
        _, data, ckpt, _, _ = pipeline
        assert main(["eval", "--data", str(data), "--ckpt", str(ckpt)]) == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert out[0].startswith("accuracy=")
        assert len(out) == 1 + 3  # confusion matrix rows
        total = sum(int(v) for row in out[1:] for v in row.split("\t"))
        assert total == 8 * 3

    def test_eval_folds(self, pipeline, capsys):
        _, data, _, _, _ = pipeline
        assert main(["eval", "--data", str(data), "--folds", "2",
                     "--stage", "scratch", "--epochs", "1", "--batch-size", "2",
                     "--clusters", "1", "--image-size", "32", "--seed", "0"]) == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert out[0].startswith("fold 0: accuracy=")
        assert out[1].startswith("fold 1: accuracy=")
        assert out[2].startswith("mean accuracy=")

    def test_sim_matrix_csv(self, pipeline, tmp_path, capsys):
        _, data, _, db, _ = pipeline
        out_csv = tmp_path / "sim.csv"
        assert main(["sim-matrix", "--db", str(db), "--data", str(data),
                     "--out", str(out_csv)]) == 0
        capsys.readouterr()
        lines = out_csv.read_text().strip().splitlines()
        names = load_dataset(data).class_names
        assert lines[0] == "," + ",".join(names)
        assert len(lines) == 1 + 3
        for line in lines[1:]:
            cells = line.split(",")[1:]
            for v in cells:
                assert v == "" or -1.0 <= float(v) <= 1.0


class TestExitCodes:
    def test_usage_unknown_command(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_usage_missing_required(self):
        with pytest.raises(SystemExit) as exc:
            main(["gen-data", "--n", "3"])
        assert exc.value.code == 2

    def test_usage_query_without_index(self, pipeline):
        _, data, ckpt, db, _ = pipeline
        with pytest.raises(SystemExit) as exc:
            main(["query", "--db", str(db), "--ckpt", str(ckpt),
                  "--image", "x.pgm", "--box", "0,0,0,4,4"])
        assert exc.value.code == 2

    def test_io_missing_dataset(self, tmp_path, capsys):
        code = main(["train", "--data", str(tmp_path / "absent"),
                     "--out", str(tmp_path / "m.ckpt")])
        assert code == 3
        assert "error:" in capsys.readouterr().err

    def test_io_corrupt_checkpoint(self, pipeline, tmp_path, capsys):
        _, data, _, _, _ = pipeline
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage")
        assert main(["eval", "--data", str(data), "--ckpt", str(bad)]) == 3

    def test_validation_bad_epochs(self, pipeline, tmp_path, capsys):
        _, data, _, _, _ = pipeline
        code = main(["train", "--data", str(data),
                     "--out", str(tmp_path / "m.ckpt"), "--epochs", "0"])
        assert code == 4

    def test_validation_too_many_classes(self, tmp_path, capsys):
        assert main(["gen-data", "--out", str(tmp_path / "d"), "--n", "2",
                     "--classes", "12"]) == 4

    def test_validation_bad_box_text(self, pipeline, tmp_path, capsys):
        _, data, ckpt, db, idx = pipeline
        img = tmp_path / "q.pgm"
        write_pgm(img, np.zeros((32, 32)))
        assert main(["query", "--index", str(idx), "--db", str(db),
                     "--ckpt", str(ckpt), "--image", str(img),
                     "--box", "not-a-box"]) == 4

    def test_validation_unknown_anatomy(self, pipeline, tmp_path, capsys):
        _, data, ckpt, db, idx = pipeline
        img = tmp_path / "q.pgm"
        write_pgm(img, np.full((32, 32), 0.5))
        assert main(["query", "--index", str(idx), "--db", str(db),
                     "--ckpt", str(ckpt), "--image", str(img),
                     "--box", "7,0,0,8,8", "--label-source", "given"]) == 4
